//! Heart-rate estimation from pulse waveforms.
//!
//! Waveforms are band-limited with a zero-phase first-order Butterworth
//! bandpass, then converted to beats per minute both from the periodogram
//! peak and from the mean inter-beat interval. The periodogram estimate is the
//! reported one.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const HR_BAND_HZ: (f64, f64) = (0.75, 2.5);

/// Target periodogram bin spacing in Hz (0.3 bpm).
const FFT_RESOLUTION_HZ: f64 = 0.005;

/// Second-order IIR section, `a[0]` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// First-order Butterworth bandpass via the bilinear transform with the
    /// band edges pre-warped.
    pub fn butter_bandpass(fs: f64, low_hz: f64, high_hz: f64) -> Result<Self> {
        if !(low_hz > 0.0 && high_hz > low_hz) {
            return Err(Error::domain(format!("invalid band [{low_hz}, {high_hz}] Hz")));
        }
        if !(fs > 2.0 * high_hz) {
            return Err(Error::domain(format!(
                "sampling rate {fs} Hz too low for a {high_hz} Hz band edge"
            )));
        }
        let k = 2.0 * fs;
        let wl = k * (std::f64::consts::PI * low_hz / fs).tan();
        let wh = k * (std::f64::consts::PI * high_hz / fs).tan();
        let bw = wh - wl;
        let w0_sq = wl * wh;
        // H(s) = bw s / (s^2 + bw s + w0^2), s = k (z - 1) / (z + 1)
        let a0 = k * k + bw * k + w0_sq;
        Ok(Biquad {
            b: [bw * k / a0, 0.0, -bw * k / a0],
            a: [1.0, (2.0 * w0_sq - 2.0 * k * k) / a0, (k * k - bw * k + w0_sq) / a0],
        })
    }

    /// Magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / fs;
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z1 * self.a[1] + z2 * self.a[2];
        (num / den).norm()
    }

    /// Steady-state initial conditions for a unit step (transposed form II).
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let r0 = b1 - a1 * b0;
        let r1 = b2 - a2 * b0;
        let z0 = (r0 + r1) / (1.0 + a1 + a2);
        [z0, r1 - a2 * z0]
    }

    fn run(&self, x: &[f64], mut state: [f64; 2]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        x.iter()
            .map(|&v| {
                let y = b0 * v + state[0];
                state[0] = b1 * v - a1 * y + state[1];
                state[1] = b2 * v - a2 * y;
                y
            })
            .collect()
    }

    /// Forward-backward filtering with odd extension at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() < MIN_FILTER_LEN {
            return Err(Error::domain(format!(
                "signal of {} samples is shorter than {MIN_FILTER_LEN}",
                x.len()
            )));
        }
        let pad = PAD_LEN.min(x.len() - 1);
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let zi = self.step_state();
        let fwd = self.run(&ext, zi.map(|z| z * ext[0]));
        let rev: Vec<f64> = fwd.iter().rev().copied().collect();
        let mut back = self.run(&rev, zi.map(|z| z * rev[0]));
        back.reverse();
        Ok(back[pad..pad + n].to_vec())
    }
}

/// Three times the number of filter taps.
const PAD_LEN: usize = 9;
pub const MIN_FILTER_LEN: usize = 9;

/// Zero-phase first-order Butterworth bandpass over `[low_hz, high_hz]`.
pub fn butter_bandpass(signal: &[f64], fs: f64, low_hz: f64, high_hz: f64) -> Result<Vec<f64>> {
    Biquad::butter_bandpass(fs, low_hz, high_hz)?.filtfilt(signal)
}

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Periodogram peak frequency in `[low_hz, high_hz]`, in Hz.
///
/// The mean is removed, a Hann window applied, and the signal zero-padded to
/// a power of two giving at most [`FFT_RESOLUTION_HZ`] spacing; the peak bin is
/// refined by a parabola through it and its neighbours.
pub fn spectral_peak_hz(signal: &[f64], fs: f64, low_hz: f64, high_hz: f64) -> Result<f64> {
    let n = signal.len();
    if n < 4 {
        return Err(Error::domain(format!("{n} samples is too short for a periodogram")));
    }
    let nfft = n.max((fs / FFT_RESOLUTION_HZ).ceil() as usize).next_power_of_two();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let energy: f64 = signal.iter().map(|v| v * v).sum();
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .zip(hann(n))
        .map(|(v, w)| Complex::new((v - mean) * w, 0.0))
        .collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    fft_plan(nfft).process(&mut buf);
    let power: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
    let bin_hz = fs / nfft as f64;
    let lo = (low_hz / bin_hz).ceil() as usize;
    let hi = ((high_hz / bin_hz).floor() as usize).min(power.len() - 1);
    if lo > hi {
        return Err(Error::domain("band narrower than one periodogram bin"));
    }
    let (peak, peak_power) = (lo..=hi)
        .map(|k| (k, power[k]))
        .fold((lo, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    if !(peak_power > 1e-16 * n as f64 * energy) {
        return Err(Error::degenerate("no spectral energy in the heart-rate band"));
    }
    let mut offset = 0.0;
    if peak > 0 && peak + 1 < power.len() {
        let (l, c, r) = (power[peak - 1], power[peak], power[peak + 1]);
        let curvature = l - 2.0 * c + r;
        if curvature < 0.0 {
            offset = (0.5 * (l - r) / curvature).clamp(-0.5, 0.5);
        }
    }
    Ok(((peak as f64 + offset) * bin_hz).clamp(low_hz, high_hz))
}

fn fft_plan(len: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(len)
}

/// Heart rate in bpm from the periodogram peak in the default band.
pub fn estimate_hr_fft(signal: &[f64], fs: f64) -> Result<f64> {
    if (signal.len() as f64) < 2.0 * fs - 1e-9 {
        return Err(Error::domain(format!(
            "{} samples at {fs} Hz is shorter than 2 s",
            signal.len()
        )));
    }
    Ok(60.0 * spectral_peak_hz(signal, fs, HR_BAND_HZ.0, HR_BAND_HZ.1)?)
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Local maxima above the 60th percentile, at least `fs * 60 / 150` samples
/// apart. Conflicts keep the larger peak, then the earlier one. Returned in
/// ascending index order.
pub fn detect_peaks(signal: &[f64], fs: f64) -> Vec<usize> {
    if signal.len() < 3 {
        return Vec::new();
    }
    let threshold = quantile(signal, 0.6);
    let min_distance = fs * 60.0 / (60.0 * HR_BAND_HZ.1);
    let mut candidates: Vec<usize> = (1..signal.len() - 1)
        .filter(|&i| signal[i] > signal[i - 1] && signal[i] >= signal[i + 1] && signal[i] > threshold)
        .collect();
    candidates.sort_by(|&a, &b| signal[b].total_cmp(&signal[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| (k.abs_diff(c) as f64) >= min_distance) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// `60 / mean inter-beat interval`.
pub fn peak_hr(indices: &[usize], fs: f64) -> Result<f64> {
    if indices.len() < 2 {
        return Err(Error::degenerate(format!("{} peaks, need at least 2", indices.len())));
    }
    let span = (indices[indices.len() - 1] - indices[0]) as f64;
    let mean_ibi_s = span / (indices.len() - 1) as f64 / fs;
    Ok(60.0 / mean_ibi_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrEstimate {
    pub hr_fft_bpm: f64,
    /// `None` when fewer than two beats were found.
    pub hr_peak_bpm: Option<f64>,
    pub hr_bpm: f64,
    pub band: (f64, f64),
}

/// Filters a raw waveform and estimates its heart rate.
pub fn estimate_hr(signal: &[f64], fs: f64) -> Result<HrEstimate> {
    let filtered = butter_bandpass(signal, fs, HR_BAND_HZ.0, HR_BAND_HZ.1)?;
    let hr_fft_bpm = estimate_hr_fft(&filtered, fs)?;
    let hr_peak_bpm = peak_hr(&detect_peaks(&filtered, fs), fs).ok();
    Ok(HrEstimate {
        hr_fft_bpm,
        hr_peak_bpm,
        hr_bpm: hr_fft_bpm,
        band: HR_BAND_HZ,
    })
}

/// Sample Pearson correlation; `None` when either side has no variance.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    let tiny = |s: f64, m: f64| s <= n * (1e-12 * m.abs().max(1e-300)).powi(2);
    if tiny(sxx, mx) || tiny(syy, my) {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Mean relative absolute error in percent.
    pub mer: f64,
    /// Sample standard deviation of the error; `None` for a single pair.
    pub std: Option<f64>,
    /// Pearson correlation; `None` when undefined.
    pub r: Option<f64>,
}

/// Error metrics over paired HR values, with `e = y_pre - y_gt`.
pub fn metrics(y_pre: &[f64], y_gt: &[f64]) -> Result<HrMetrics> {
    if y_pre.len() != y_gt.len() || y_pre.is_empty() {
        return Err(Error::shape(format!(
            "metrics over {} predictions and {} references",
            y_pre.len(),
            y_gt.len()
        )));
    }
    if y_gt.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::domain("reference heart rates must be positive"));
    }
    let m = y_pre.len() as f64;
    let errors: Vec<f64> = y_pre.iter().zip(y_gt).map(|(p, g)| p - g).collect();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / m;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / m).sqrt();
    let mer = 100.0 * errors.iter().zip(y_gt).map(|(e, g)| e.abs() / g).sum::<f64>() / m;
    let std = (errors.len() > 1).then(|| {
        let mean = errors.iter().sum::<f64>() / m;
        (errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (m - 1.0)).sqrt()
    });
    Ok(HrMetrics {
        mae,
        rmse,
        mer,
        std,
        r: pearson_r(y_pre, y_gt),
    })
}

/// Video-level heart rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoHr {
    pub id: String,
    pub hr_pred: f64,
    pub hr_gt: f64,
    pub segments: usize,
    /// Correlation of the per-segment HR sequences within this video.
    pub segment_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrReport {
    pub mae: f64,
    pub rmse: f64,
    pub mer: f64,
    pub std: Option<f64>,
    pub r: Option<f64>,
    pub excluded_segments: usize,
    pub videos: Vec<VideoHr>,
}

impl HrReport {
    pub fn from_videos(videos: Vec<VideoHr>, excluded_segments: usize) -> Result<Self> {
        let y_pre: Vec<f64> = videos.iter().map(|v| v.hr_pred).collect();
        let y_gt: Vec<f64> = videos.iter().map(|v| v.hr_gt).collect();
        let m = metrics(&y_pre, &y_gt)?;
        Ok(HrReport {
            mae: m.mae,
            rmse: m.rmse,
            mer: m.mer,
            std: m.std,
            r: m.r,
            excluded_segments,
            videos,
        })
    }

    pub fn y_pre(&self) -> Vec<f64> {
        self.videos.iter().map(|v| v.hr_pred).collect()
    }

    pub fn y_gt(&self) -> Vec<f64> {
        self.videos.iter().map(|v| v.hr_gt).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs + phase).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// Analog prototype magnitude at the pre-warped frequency.
    fn analog_magnitude(freq: f64, fs: f64) -> f64 {
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (wl, wh, w) = (warp(0.75), warp(2.5), warp(freq));
        let bw = wh - wl;
        bw * w / ((wl * wh - w * w).powi(2) + (bw * w).powi(2)).sqrt()
    }

    #[test]
    fn digital_response_matches_analog_prototype() {
        let fs = 30.0;
        let filter = Biquad::butter_bandpass(fs, 0.75, 2.5).unwrap();
        for f in [0.1, 0.5, 0.75, 1.37, 2.5, 5.0, 10.0] {
            let d = filter.magnitude(f, fs);
            assert!((d - analog_magnitude(f, fs)).abs() < 1e-12, "{f}: {d}");
        }
        assert!((filter.magnitude(0.75, fs) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((filter.magnitude((0.75f64 * 2.5).sqrt(), fs) - 1.0).abs() < 2e-3);
    }

    #[test]
    fn passband_tone_keeps_amplitude() {
        let x = tone(1.5, 30.0, 600, 0.3);
        let y = butter_bandpass(&x, 30.0, 0.75, 2.5).unwrap();
        let mid = 150..450;
        let ratio = rms(&y[mid.clone()]) / rms(&x[mid]);
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn low_tone_is_rejected() {
        let fs = 30.0;
        let n = 1200;
        let slow = butter_bandpass(&tone(0.1, fs, n, 0.0), fs, 0.75, 2.5).unwrap();
        let centre = butter_bandpass(&tone(1.37, fs, n, 0.0), fs, 0.75, 2.5).unwrap();
        let mid = 300..900;
        let ratio = rms(&slow[mid.clone()]) / rms(&centre[mid]);
        let expected = (analog_magnitude(0.1, fs) / analog_magnitude(1.37, fs)).powi(2);
        assert!(ratio < 0.05, "{ratio}");
        assert!((ratio - expected).abs() < 0.01, "{ratio} vs {expected}");
    }

    #[test]
    fn filter_edge_cases() {
        assert_eq!(butter_bandpass(&[0.0; 30], 30.0, 0.75, 2.5).unwrap(), vec![0.0; 30]);
        assert!(butter_bandpass(&[0.0; 30], 4.0, 0.75, 2.5).is_err());
        assert!(butter_bandpass(&[0.0; 8], 30.0, 0.75, 2.5).is_err());
    }

    #[test]
    fn filter_is_linear_and_zero_phase() {
        let fs = 30.0;
        let a = tone(1.2, fs, 300, 0.0);
        let b: Vec<f64> = (0..300).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = butter_bandpass(&a, fs, 0.75, 2.5).unwrap();
        let fb = butter_bandpass(&b, fs, 0.75, 2.5).unwrap();
        let fsum = butter_bandpass(&sum, fs, 0.75, 2.5).unwrap();
        for i in 0..300 {
            assert!((fsum[i] - fa[i] - fb[i]).abs() < 1e-9);
        }
        let mid = 60..240;
        let xcorr = |lag: isize| -> f64 {
            mid.clone()
                .map(|i| fa[i] * a[(i as isize + lag) as usize])
                .sum()
        };
        let best = (-10..=10).max_by(|&l, &r| xcorr(l).total_cmp(&xcorr(r))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn fft_hr_of_tones() {
        let hr = estimate_hr_fft(&tone(1.2, 30.0, 300, 0.0), 30.0).unwrap();
        assert!((hr - 72.0).abs() < 0.5, "{hr}");
        let two: Vec<f64> = tone(1.2, 30.0, 300, 0.0)
            .iter()
            .zip(tone(2.4, 30.0, 300, 0.4))
            .map(|(a, b)| a + 0.3 * b)
            .collect();
        let hr = estimate_hr_fft(&two, 30.0).unwrap();
        assert!((hr - 72.0).abs() < 0.5, "{hr}");
        for bpm in [48.0, 60.0, 72.0, 90.0, 120.0, 144.0] {
            for fs in [25.0, 30.0] {
                let n = (10.0 * fs) as usize;
                let hr = estimate_hr_fft(&tone(bpm / 60.0, fs, n, 0.7), fs).unwrap();
                assert!((hr - bpm).abs() < 0.5, "{bpm} @ {fs}: {hr}");
            }
        }
    }

    #[test]
    fn fft_rejects_dc_and_short_input() {
        assert!(matches!(estimate_hr_fft(&[3.0; 300], 30.0), Err(Error::Degenerate(_))));
        assert!(estimate_hr_fft(&[0.0; 59], 30.0).is_err());
    }

    #[test]
    fn peaks_of_sinusoid() {
        let x = tone(1.0, 30.0, 300, 0.0);
        let peaks = detect_peaks(&x, 30.0);
        assert_eq!(peaks.len(), 10);
        assert!((peak_hr(&peaks, 30.0).unwrap() - 60.0).abs() < 0.5);
    }

    #[test]
    fn peak_edge_cases() {
        let ramp: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(peak_hr(&detect_peaks(&ramp, 30.0), 30.0).is_err());
        // Equal maxima 4 samples apart at 30 fps (minimum distance 12): keep the earlier.
        let mut x = vec![0.0; 40];
        x[10] = 5.0;
        x[14] = 5.0;
        assert_eq!(detect_peaks(&x, 30.0), vec![10]);
        // A larger later peak wins over an earlier smaller one.
        x[14] = 6.0;
        assert_eq!(detect_peaks(&x, 30.0), vec![14]);
        // A flat top counts once.
        let plateau = [0.0, 1.0, 3.0, 3.0, 1.0, 0.0];
        assert_eq!(detect_peaks(&plateau, 30.0), vec![2]);
    }

    #[test]
    fn estimators_agree_on_clean_pulse() {
        let fs = 30.0;
        let f = 1.2;
        let x: Vec<f64> = (0..300)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * f * t).sin() + 0.5 * (4.0 * PI * f * t + 0.8).sin()
            })
            .collect();
        let est = estimate_hr(&x, fs).unwrap();
        assert!((est.hr_bpm - 72.0).abs() < 0.5, "{est:?}");
        assert!((est.hr_fft_bpm - est.hr_peak_bpm.unwrap()).abs() < 2.0, "{est:?}");
        assert!(estimate_hr(&[1.0; 300], fs).is_err());
    }

    #[test]
    fn metric_hand_cases() {
        let m = metrics(&[60.0, 80.0], &[60.0, 80.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mer, m.std), (0.0, 0.0, 0.0, Some(0.0)));
        assert_eq!(m.r, Some(1.0));

        let m = metrics(&[70.0, 80.0], &[60.0, 90.0]).unwrap();
        assert!((m.mae - 10.0).abs() < 1e-9);
        assert!((m.rmse - 10.0).abs() < 1e-9);
        assert!((m.mer - (10.0 / 60.0 + 10.0 / 90.0) / 2.0 * 100.0).abs() < 1e-9);
        assert!((m.std.unwrap() - 200f64.sqrt()).abs() < 1e-9);

        let gt = [60.0, 75.0, 90.0, 66.0];
        let pre: Vec<f64> = gt.iter().map(|g| 2.0 * g + 5.0).collect();
        assert!((metrics(&pre, &gt).unwrap().r.unwrap() - 1.0).abs() < 1e-12);

        let flat = metrics(&[70.0, 70.0], &[60.0, 90.0]).unwrap();
        assert_eq!(flat.r, None);
        let single = metrics(&[70.0], &[72.0]).unwrap();
        assert_eq!((single.std, single.r), (None, None));
        assert!(metrics(&[], &[]).is_err());
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn report_json_keys() {
        let videos = vec![VideoHr {
            id: "a".into(),
            hr_pred: 70.0,
            hr_gt: 72.0,
            segments: 3,
            segment_r: None,
        }];
        let report = HrReport::from_videos(videos, 1).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["excluded_segments", "mae", "mer", "r", "rmse", "std", "videos"]);
        assert!(json["r"].is_null());
    }
}
