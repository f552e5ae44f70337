//! Classical extractors on the whole-face signal: GREEN, CHROM and POS.
//!
//! The whole-face signal is the pixel-count-weighted union of every base ROI.
//! Frames where no ROI has pixels repeat the previous value.

use serde::{Deserialize, Serialize};

use crate::hrdsp::{Biquad, HR_BAND_HZ};
use crate::mstmap::RoiTrace;
use crate::{Error, Result};

/// Window length for CHROM and POS.
pub const WINDOW_S: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Green,
    Chrom,
    Pos,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Green, Method::Chrom, Method::Pos];

    pub fn name(self) -> &'static str {
        match self {
            Method::Green => "green",
            Method::Chrom => "chrom",
            Method::Pos => "pos",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutput {
    pub method: Method,
    pub signal: Vec<f64>,
}

pub fn run(method: Method, trace: &RoiTrace) -> Result<BaselineOutput> {
    let signal = match method {
        Method::Green => green(trace)?,
        Method::Chrom => chrom(trace)?,
        Method::Pos => pos(trace)?,
    };
    Ok(BaselineOutput { method, signal })
}

/// Per-frame whole-face RGB means.
pub fn whole_face_rgb(trace: &RoiTrace) -> Result<Vec<[f64; 3]>> {
    if trace.frame_count == 0 || trace.base_roi_count == 0 {
        return Err(Error::Domain("empty trace".into()));
    }
    let mut out = Vec::with_capacity(trace.frame_count);
    let mut previous = [0.0; 3];
    for t in 0..trace.frame_count {
        if let Some(rgb) = trace.union_mean(t, 0..trace.base_roi_count) {
            previous = rgb;
        }
        out.push(previous);
    }
    Ok(out)
}

pub fn green(trace: &RoiTrace) -> Result<Vec<f64>> {
    let rgb = whole_face_rgb(trace)?;
    let mut g: Vec<f64> = rgb.iter().map(|c| c[1]).collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    Ok(g)
}

pub fn chrom(trace: &RoiTrace) -> Result<Vec<f64>> {
    let rgb = whole_face_rgb(trace)?;
    let n = rgb.len();
    let win = window_len(trace.fps, n)?;
    let filter = Biquad::butter_bandpass(trace.fps, HR_BAND_HZ.0, HR_BAND_HZ.1)?;
    let norm = moving_normalize(&rgb, win);
    let x: Vec<f64> = norm.iter().map(|c| 3.0 * c[0] - 2.0 * c[1]).collect();
    let y: Vec<f64> = norm.iter().map(|c| 1.5 * c[0] + c[1] - 1.5 * c[2]).collect();
    let xf = filter.filtfilt(&x)?;
    let yf = filter.filtfilt(&y)?;
    let weights = hann_periodic(win);
    let mut out = vec![0.0; n];
    for start in window_starts(n, win) {
        let range = start..start + win;
        let part = combine(&xf[range.clone()], &yf[range], -1.0, "CHROM")?;
        for (i, v) in part.iter().enumerate() {
            out[start + i] += weights[i] * v;
        }
    }
    Ok(out)
}

/// Channels divided by their centred moving mean over `win` frames,
/// truncated at the ends. Dark stretches map to 1.
fn moving_normalize(rgb: &[[f64; 3]], win: usize) -> Vec<[f64; 3]> {
    let n = rgb.len();
    let mut prefix = vec![[0.0; 3]; n + 1];
    for (i, c) in rgb.iter().enumerate() {
        for k in 0..3 {
            prefix[i + 1][k] = prefix[i][k] + c[k];
        }
    }
    let half = win / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + win - half).min(n);
            let mut out = [1.0; 3];
            for k in 0..3 {
                let mean = (prefix[hi][k] - prefix[lo][k]) / (hi - lo) as f64;
                if mean > 0.0 {
                    out[k] = rgb[i][k] / mean;
                }
            }
            out
        })
        .collect()
}

pub fn pos(trace: &RoiTrace) -> Result<Vec<f64>> {
    windowed(trace, |norm| {
        let s1: Vec<f64> = norm.iter().map(|c| c[1] - c[2]).collect();
        let s2: Vec<f64> = norm.iter().map(|c| -2.0 * c[0] + c[1] + c[2]).collect();
        let mut h = combine(&s1, &s2, 1.0, "POS")?;
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        h.iter_mut().for_each(|v| *v -= mean);
        Ok(h)
    })
}

fn std_dev(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64).sqrt()
}

/// `a + sign * (σa/σb) * b`; zero when both are flat.
fn combine(a: &[f64], b: &[f64], sign: f64, method: &str) -> Result<Vec<f64>> {
    const FLAT: f64 = 1e-12;
    let (sa, sb) = (std_dev(a), std_dev(b));
    if sb <= FLAT {
        if sa <= FLAT {
            return Ok(vec![0.0; a.len()]);
        }
        return Err(Error::Degenerate(format!("{method}: zero deviation in the projection denominator")));
    }
    let alpha = sign * sa / sb;
    Ok(a.iter().zip(b).map(|(x, y)| x + alpha * y).collect())
}

fn window_len(fps: f64, n: usize) -> Result<usize> {
    let win = ((WINDOW_S * fps).round() as usize).min(n);
    if win < crate::hrdsp::MIN_FILTER_LEN {
        return Err(Error::Domain(format!("{n} frames is too short for a {WINDOW_S} s window")));
    }
    Ok(win)
}

/// Half-overlapping window starts; the last window ends at `n`.
fn window_starts(n: usize, win: usize) -> Vec<usize> {
    let hop = (win / 2).max(1);
    let mut starts: Vec<usize> = (0..=n - win).step_by(hop).collect();
    if starts.last() != Some(&(n - win)) {
        starts.push(n - win);
    }
    starts
}

/// Hann-weighted overlap-add of `f` over half-overlapping windows whose
/// channels are divided by the window mean.
fn windowed<F>(trace: &RoiTrace, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[[f64; 3]]) -> Result<Vec<f64>>,
{
    let rgb = whole_face_rgb(trace)?;
    let n = rgb.len();
    let win = window_len(trace.fps, n)?;
    let weights = hann_periodic(win);
    let mut out = vec![0.0; n];
    for start in window_starts(n, win) {
        let chunk = &rgb[start..start + win];
        let mut mean = [0.0; 3];
        for c in chunk {
            for k in 0..3 {
                mean[k] += c[k] / win as f64;
            }
        }
        if mean.iter().any(|m| *m <= 0.0) {
            log::warn!("window at frame {start} has a dark channel; skipped");
            continue;
        }
        let norm: Vec<[f64; 3]> = chunk.iter().map(|c| [c[0] / mean[0], c[1] / mean[1], c[2] / mean[2]]).collect();
        let part = f(&norm)?;
        for (i, v) in part.iter().enumerate() {
            out[start + i] += weights[i] * v;
        }
    }
    Ok(out)
}

fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / len as f64).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hrdsp::{estimate_hr, metrics};
    use crate::synth::{generate_corpus, SynthConfig};
    use proptest::prelude::*;

    fn trace_from(rgb: impl Fn(usize) -> [f64; 3], frames: usize, fps: f64) -> RoiTrace {
        let channel_means: Vec<[f64; 3]> = (0..frames).flat_map(|t| [rgb(t), rgb(t)]).collect();
        RoiTrace {
            fps,
            frame_count: frames,
            base_roi_count: 2,
            channel_means,
            pixel_counts: vec![100; frames * 2],
            gt_ppg: None,
            gt_hr_bpm: None,
        }
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn constant_trace_gives_zero() {
        let tr = trace_from(|_| [150.0, 120.0, 90.0], 300, 30.0);
        for m in Method::ALL {
            let out = run(m, &tr).unwrap();
            assert_eq!(out.signal.len(), 300);
            assert!(out.signal.iter().all(|v| v.abs() < 1e-9), "{m:?}");
        }
    }

    #[test]
    fn green_recovers_tone() {
        let fs = 30.0;
        let tr = trace_from(
            |t| [150.0, 120.0 + (std::f64::consts::TAU * 1.2 * t as f64 / fs).sin(), 90.0],
            300,
            fs,
        );
        let hr = estimate_hr(&green(&tr).unwrap(), fs).unwrap().hr_bpm;
        assert!((hr - 72.0).abs() <= 1.0, "{hr}");
    }

    #[test]
    fn common_mode_is_rejected() {
        let fs = 30.0;
        let modulation = |t: usize| 1.0 + 0.01 * (std::f64::consts::TAU * 1.2 * t as f64 / fs).sin();
        // Intensity-only: every channel scaled by the same factor.
        let tr = trace_from(|t| [150.0 * modulation(t), 120.0 * modulation(t), 90.0 * modulation(t)], 300, fs);
        let input_rms = 0.01 / 2f64.sqrt();
        for m in [Method::Chrom, Method::Pos] {
            let out = run(m, &tr).unwrap().signal;
            assert!(rms(&out) < 0.01 * input_rms, "{m:?} {}", rms(&out));
        }
        // Achromatic: equal channels pulsing together.
        let tr = trace_from(|t| [120.0 * modulation(t); 3], 300, fs);
        for m in [Method::Chrom, Method::Pos] {
            let out = run(m, &tr).unwrap().signal;
            assert!(rms(&out) < 0.01 * input_rms, "{m:?} {}", rms(&out));
        }
    }

    #[test]
    fn flat_denominator_is_degenerate() {
        // Y = 1.5R + G - 1.5B constant while X = 3R - 2G varies.
        let a = [1.0, 2.0, 1.0, 3.0];
        let b = [0.5; 4];
        assert!(matches!(combine(&a, &b, -1.0, "CHROM"), Err(Error::Degenerate(_))));
    }

    #[test]
    fn too_short_trace_errors() {
        let tr = trace_from(|_| [1.0, 1.0, 1.0], 5, 30.0);
        assert!(chrom(&tr).is_err());
        assert_eq!(green(&tr).unwrap().len(), 5);
    }

    #[test]
    fn clean_corpus_mae_below_two() {
        let template = SynthConfig::clean();
        let corpus = generate_corpus(24, &template, 7).unwrap();
        for m in Method::ALL {
            let mut pred = Vec::new();
            let mut gt = Vec::new();
            for video in &corpus {
                let sig = run(m, &video.trace).unwrap().signal;
                pred.push(estimate_hr(&sig, video.trace.fps).unwrap().hr_bpm);
                gt.push(video.trace.gt_hr_bpm.unwrap());
            }
            let mae = metrics(&pred, &gt).unwrap().mae;
            assert!(mae < 2.0, "{m:?} mae {mae}");
        }
    }

    #[test]
    fn green_on_default_noise_corpus() {
        let corpus = generate_corpus(64, &SynthConfig::default(), 64).unwrap();
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for video in &corpus {
            let sig = green(&video.trace).unwrap();
            pred.push(estimate_hr(&sig, video.trace.fps).unwrap().hr_bpm);
            gt.push(video.trace.gt_hr_bpm.unwrap());
        }
        let mae = metrics(&pred, &gt).unwrap().mae;
        assert!(mae < 2.0, "mae {mae}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rescaling_invariance(scale in 0.1f64..3.0, seed in 0u64..1000) {
            let cfg = SynthConfig { seed, duration_s: 4.0, ..SynthConfig::default() };
            let tr = crate::synth::generate_trace(&cfg).unwrap();
            let mut scaled = tr.clone();
            scaled.channel_means.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v *= scale));
            let g0 = green(&tr).unwrap();
            let g1 = green(&scaled).unwrap();
            for (a, b) in g0.iter().zip(&g1) {
                prop_assert!((a * scale - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
            for m in [Method::Chrom, Method::Pos] {
                let a = run(m, &tr).unwrap().signal;
                let b = run(m, &scaled).unwrap().signal;
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
