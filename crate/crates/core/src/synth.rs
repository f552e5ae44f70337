//! Deterministic synthetic ROI traces with known pulse ground truth.
//!
//! Each ROI channel mean is a skin baseline plus a scaled two-harmonic pulse,
//! a slow illumination drift shared by all channels, Gaussian noise, and
//! occasional motion steps that decay exponentially. Occlusion removes a
//! ROI's pixels for one-second blocks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mstmap::RoiTrace;
use crate::{Error, Result};

/// Heart-rate range drawn by [`generate_corpus`].
pub const CORPUS_HR_RANGE: (f64, f64) = (50.0, 140.0);

const OCCLUSION_BLOCK_S: f64 = 1.0;
const DEFAULT_SKIN: [f64; 3] = [170.0, 120.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub gaussian_sigma: f64,
    pub illumination_amplitude: f64,
    pub illumination_period_s: f64,
    /// Per-frame probability that a motion step starts.
    pub motion_spike_prob: f64,
    pub motion_spike_magnitude: f64,
    pub motion_decay_s: f64,
    /// Per-ROI probability that a one-second block is occluded. Empty means
    /// no occlusion; a single value applies to every ROI.
    pub occlusion_prob: Vec<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gaussian_sigma: 0.3,
            illumination_amplitude: 2.0,
            illumination_period_s: 20.0,
            motion_spike_prob: 0.002,
            motion_spike_magnitude: 3.0,
            motion_decay_s: 0.4,
            occlusion_prob: Vec::new(),
        }
    }
}

impl NoiseConfig {
    pub fn clean() -> Self {
        NoiseConfig {
            gaussian_sigma: 0.0,
            illumination_amplitude: 0.0,
            illumination_period_s: 20.0,
            motion_spike_prob: 0.0,
            motion_spike_magnitude: 0.0,
            motion_decay_s: 0.4,
            occlusion_prob: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub fps: f64,
    pub duration_s: f64,
    pub hr_bpm: f64,
    /// When set, the instantaneous heart rate moves linearly from `hr_bpm` to
    /// this value over the trace.
    pub hr_end_bpm: Option<f64>,
    pub n_rois: usize,
    /// Pulse amplitude per RGB channel on the 0-255 scale.
    pub pulse_amplitude: [f64; 3],
    /// Per-ROI skin means; drawn around a default skin tone when empty.
    pub baseline: Vec<[f64; 3]>,
    pub pixels_per_roi: u32,
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            fps: 30.0,
            duration_s: 10.0,
            hr_bpm: 72.0,
            hr_end_bpm: None,
            n_rois: 6,
            pulse_amplitude: [0.4, 1.0, 0.3],
            baseline: Vec::new(),
            pixels_per_roi: 800,
            noise: NoiseConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn clean() -> Self {
        SynthConfig {
            noise: NoiseConfig::clean(),
            ..SynthConfig::default()
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    /// Mean heart rate over the trace.
    pub fn mean_hr_bpm(&self) -> f64 {
        match self.hr_end_bpm {
            Some(end) => 0.5 * (self.hr_bpm + end),
            None => self.hr_bpm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hr_ok = |hr: f64| (45.0..=150.0).contains(&hr);
        if !hr_ok(self.hr_bpm) || !self.hr_end_bpm.is_none_or(hr_ok) {
            return Err(Error::Config("heart rate must lie in [45, 150] bpm".into()));
        }
        if !(20.0..=60.0).contains(&self.fps) {
            return Err(Error::Config(format!("fps {} outside [20, 60]", self.fps)));
        }
        if !(self.duration_s > 0.0) || self.frame_count() < 2 {
            return Err(Error::Config("duration shorter than two frames".into()));
        }
        if self.n_rois == 0 || self.n_rois > crate::mstmap::MAX_BASE_ROIS {
            return Err(Error::Config(format!("n_rois {} out of range", self.n_rois)));
        }
        if self
            .pulse_amplitude
            .iter()
            .any(|a| !(0.0..=0.05 * 255.0).contains(a))
        {
            return Err(Error::Config("pulse amplitudes must lie in [0, 12.75]".into()));
        }
        if !self.baseline.is_empty() && self.baseline.len() != self.n_rois {
            return Err(Error::Config(format!(
                "{} baselines for {} ROIs",
                self.baseline.len(),
                self.n_rois
            )));
        }
        if self.baseline.iter().flatten().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::Config("baselines must lie in [0, 255]".into()));
        }
        if self.pixels_per_roi == 0 {
            return Err(Error::Config("pixels_per_roi must be positive".into()));
        }
        let n = &self.noise;
        let occ_len = n.occlusion_prob.len();
        if occ_len > 1 && occ_len != self.n_rois {
            return Err(Error::Config(format!(
                "{occ_len} occlusion probabilities for {} ROIs",
                self.n_rois
            )));
        }
        let probs_ok = n.occlusion_prob.iter().chain([&n.motion_spike_prob]).all(|p| (0.0..=1.0).contains(p));
        let nonneg = [n.gaussian_sigma, n.illumination_amplitude, n.motion_spike_magnitude]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite());
        if !probs_ok || !nonneg || !(n.illumination_period_s > 0.0) || !(n.motion_decay_s > 0.0) {
            return Err(Error::Config("invalid noise parameters".into()));
        }
        Ok(())
    }
}

/// Peak magnitude of `sin(x) + 0.5 sin(2x + 0.8)`.
fn pulse_shape_peak() -> f64 {
    const STEPS: usize = 20_000;
    (0..STEPS)
        .map(|i| {
            let x = std::f64::consts::TAU * i as f64 / STEPS as f64;
            (x.sin() + 0.5 * (2.0 * x + 0.8).sin()).abs()
        })
        .fold(0.0, f64::max)
}

/// Unit-peak two-harmonic pulse with a seeded starting phase.
pub fn generate_ppg(hr_bpm: f64, fps: f64, n_samples: usize, seed: u64) -> Vec<f64> {
    generate_ppg_drift(hr_bpm, hr_bpm, fps, n_samples, seed)
}

/// As [`generate_ppg`] with the rate moving linearly from `start_bpm` to
/// `end_bpm` across the samples.
pub fn generate_ppg_drift(start_bpm: f64, end_bpm: f64, fps: f64, n_samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let peak = pulse_shape_peak();
    let f0 = start_bpm / 60.0;
    let f1 = end_bpm / 60.0;
    let total = n_samples as f64 / fps;
    (0..n_samples)
        .map(|i| {
            let t = i as f64 / fps;
            let phase = phase0 + std::f64::consts::TAU * (f0 * t + (f1 - f0) * t * t / (2.0 * total));
            (phase.sin() + 0.5 * (2.0 * phase + 0.8).sin()) / peak
        })
        .collect()
}

pub fn generate_trace(config: &SynthConfig) -> Result<RoiTrace> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let frames = config.frame_count();
    let n = config.n_rois;
    let fps = config.fps;
    let start = config.hr_bpm;
    let end = config.hr_end_bpm.unwrap_or(start);
    let ppg = generate_ppg_drift(start, end, fps, frames, rng.next_u64());

    let baseline: Vec<[f64; 3]> = if config.baseline.is_empty() {
        (0..n)
            .map(|_| DEFAULT_SKIN.map(|v| v + rng.random_range(-10.0..10.0)))
            .collect()
    } else {
        config.baseline.clone()
    };
    let gains: Vec<f64> = (0..n).map(|_| rng.random_range(0.7..1.3)).collect();
    let counts: Vec<u32> = (0..n)
        .map(|_| {
            let spread = config.pixels_per_roi / 2;
            config.pixels_per_roi - spread + rng.random_range(0..=2 * spread)
        })
        .collect();

    let noise = &config.noise;
    let illum_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let gaussian = Normal::new(0.0, noise.gaussian_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    // Motion: steps with exponential decay shared by every ROI, each ROI
    // seeing it with its own sensitivity.
    let decay = (-1.0 / (noise.motion_decay_s * fps)).exp();
    let mut motion = vec![0.0; frames];
    let mut level = 0.0;
    for m in motion.iter_mut() {
        level *= decay;
        if noise.motion_spike_prob > 0.0 && rng.random_bool(noise.motion_spike_prob) {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            level += sign * noise.motion_spike_magnitude;
        }
        *m = level;
    }
    let motion_gain: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();

    let block = ((OCCLUSION_BLOCK_S * fps).round() as usize).max(1);
    let blocks = frames.div_ceil(block);
    let mut occluded = vec![false; n * blocks];
    for roi in 0..n {
        let p = match noise.occlusion_prob.len() {
            0 => 0.0,
            1 => noise.occlusion_prob[0],
            _ => noise.occlusion_prob[roi],
        };
        for b in 0..blocks {
            occluded[roi * blocks + b] = p > 0.0 && rng.random_bool(p);
        }
    }

    let mut channel_means = Vec::with_capacity(frames * n);
    let mut pixel_counts = Vec::with_capacity(frames * n);
    for t in 0..frames {
        let time = t as f64 / fps;
        let illum = noise.illumination_amplitude
            * (std::f64::consts::TAU * time / noise.illumination_period_s + illum_phase).sin();
        for roi in 0..n {
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let jitter = if noise.gaussian_sigma > 0.0 { gaussian.sample(&mut rng) } else { 0.0 };
                let value = baseline[roi][c]
                    + config.pulse_amplitude[c] * gains[roi] * ppg[t]
                    + illum
                    + motion_gain[roi] * motion[t]
                    + jitter;
                rgb[c] = value.clamp(0.0, 255.0);
            }
            if occluded[roi * blocks + t / block] {
                channel_means.push([0.0; 3]);
                pixel_counts.push(0);
            } else {
                channel_means.push(rgb);
                pixel_counts.push(counts[roi]);
            }
        }
    }
    Ok(RoiTrace {
        fps,
        frame_count: frames,
        base_roi_count: n,
        channel_means,
        pixel_counts,
        gt_ppg: Some(ppg),
        gt_hr_bpm: Some(config.mean_hr_bpm()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub config: SynthConfig,
    pub trace: RoiTrace,
}

/// `n_videos` traces with heart rates drawn uniformly from
/// [`CORPUS_HR_RANGE`] and per-video seeds derived from `seed`.
pub fn generate_corpus(n_videos: usize, template: &SynthConfig, seed: u64) -> Result<Vec<SynthVideo>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let hr = rng.random_range(CORPUS_HR_RANGE.0..=CORPUS_HR_RANGE.1);
        let video_seed = rng.next_u64();
        let hr_end_bpm = template
            .hr_end_bpm
            .map(|end| (hr + end - template.hr_bpm).clamp(45.0, 150.0));
        let config = SynthConfig {
            seed: video_seed,
            hr_bpm: hr,
            hr_end_bpm,
            ..template.clone()
        };
        let trace = generate_trace(&config)?;
        out.push(SynthVideo {
            id: format!("video_{i:03}"),
            config,
            trace,
        });
    }
    Ok(out)
}
