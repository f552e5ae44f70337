//! Fast numerical self-verification of the installed build.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dualtl::autodiff::compare_with_finite_differences;
use dualtl::baselines;
use dualtl::hrdsp::{estimate_hr, Biquad, HR_BAND_HZ};
use dualtl::model::{dual_forward, init_params, loss_and_grad, pearson_loss, read_checkpoint, ModelConfig};
use dualtl::mstmap::{build_mstmap, enumerate_roi_combinations, rgb_to_yuv, ColorSpace, MstMap, RoiTrace};

struct Check {
    name: &'static str,
    run: fn() -> Result<String>,
}

const CHECKS: &[Check] = &[
    Check { name: "combination counts", run: combination_counts },
    Check { name: "mstmap pixel oracle", run: mstmap_oracle },
    Check { name: "model gradient", run: model_gradient },
    Check { name: "pearson loss", run: loss_identities },
    Check { name: "filter response", run: filter_response },
    Check { name: "fft heart rate", run: fft_heart_rate },
    Check { name: "baseline common mode", run: common_mode },
];

/// Runs every check and optionally validates a checkpoint; errors on the
/// first failure after reporting all results.
pub fn run(checkpoint: Option<&Path>) -> Result<()> {
    let mut failed = Vec::new();
    for check in CHECKS {
        match (check.run)() {
            Ok(detail) => println!("PASS {}: {detail}", check.name),
            Err(e) => {
                println!("FAIL {}: {e:#}", check.name);
                failed.push(check.name);
            }
        }
    }
    if let Some(path) = checkpoint {
        match check_checkpoint(path) {
            Ok(detail) => println!("PASS checkpoint: {detail}"),
            Err(e) => {
                println!("FAIL checkpoint: {e:#}");
                failed.push("checkpoint");
            }
        }
    }
    if !failed.is_empty() {
        bail!("{} self-check(s) failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}

fn combination_counts() -> Result<String> {
    for n in 1..=6 {
        let got = enumerate_roi_combinations(n)?.len();
        if got != (1 << n) - 1 {
            bail!("n = {n}: {got} combinations");
        }
    }
    Ok("2^n - 1 for n in 1..=6".into())
}

/// Tiny LCG so the check needs no RNG dependency.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn mstmap_oracle() -> Result<String> {
    let mut rng = Lcg(7);
    let (n, frames) = (3usize, 4usize);
    // pixels[t][roi] lists explicit RGB pixels.
    let pixels: Vec<Vec<Vec<[f64; 3]>>> = (0..frames)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let count = 1 + (rng.next() * 4.0) as usize;
                    (0..count).map(|_| [rng.next() * 255.0, rng.next() * 255.0, rng.next() * 255.0]).collect()
                })
                .collect()
        })
        .collect();
    let mut means = Vec::new();
    let mut counts = Vec::new();
    for frame in &pixels {
        for roi in frame {
            let k = roi.len() as f64;
            means.push([0, 1, 2].map(|c| roi.iter().map(|p| p[c]).sum::<f64>() / k));
            counts.push(roi.len() as u32);
        }
    }
    let trace = RoiTrace {
        fps: 30.0,
        frame_count: frames,
        base_roi_count: n,
        channel_means: means,
        pixel_counts: counts,
        gt_ppg: None,
        gt_hr_bpm: None,
    };
    let combos = enumerate_roi_combinations(n)?;
    let map = build_mstmap(&trace, &combos, ColorSpace::Yuv)?;
    let mut worst = 0.0f64;
    for k in 0..combos.len() {
        for (t, frame) in pixels.iter().enumerate() {
            let union: Vec<[f64; 3]> = combos.members(k).flat_map(|r| frame[r].iter().copied()).collect();
            let m = union.len() as f64;
            let rgb = [0, 1, 2].map(|c| union.iter().map(|p| p[c]).sum::<f64>() / m);
            let yuv = rgb_to_yuv(rgb)?;
            for (c, expected) in yuv.iter().enumerate() {
                let got = map.get(k, c, t);
                worst = worst.max((got - expected).abs() / expected.abs().max(1.0));
            }
        }
    }
    if worst > 1e-9 {
        bail!("relative error {worst:.3e}");
    }
    Ok(format!("max relative error {worst:.1e}"))
}

fn toy_map(cfg: &ModelConfig, seed: u64) -> MstMap {
    let mut rng = Lcg(seed);
    let cs = if cfg.channels == 6 { ColorSpace::RgbYuv } else { ColorSpace::Yuv };
    let mut map = MstMap::zeros(cfg.combinations, cs, cfg.frames);
    map.values.iter_mut().for_each(|v| *v = rng.next() * 255.0);
    map.normalized = true;
    map
}

fn model_gradient() -> Result<String> {
    let cfg = ModelConfig { combinations: 3, frames: 8, channels: 3, dim: 4, layers: 1, heads: 2, ..ModelConfig::default() };
    let mut params = init_params(&cfg, 5)?;
    for t in params.visit_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
    }
    let map = toy_map(&cfg, 9);
    let target: Vec<f64> = (0..cfg.frames).map(|i| (i as f64 * 0.9).sin()).collect();
    let (_, grads) = loss_and_grad(&map, &target, &params, &cfg)?;
    let x = params.to_flat();
    let value = |flat: &[f64]| {
        let mut p = params.clone();
        p.assign_flat(flat)?;
        pearson_loss(&dual_forward(&map, &p, &cfg)?, &target)
    };
    let err = compare_with_finite_differences(value, &x, &grads.to_flat(), 1e-6)?;
    if err >= 1e-3 {
        bail!("max relative error {err:.3e}");
    }
    Ok(format!("max relative error {err:.1e} over {} parameters", x.len()))
}

fn loss_identities() -> Result<String> {
    let s: Vec<f64> = (0..32).map(|i| (i as f64 * 0.4).sin() + 0.1 * i as f64).collect();
    let neg: Vec<f64> = s.iter().map(|v| -v).collect();
    let affine: Vec<f64> = s.iter().map(|v| 3.0 * v - 7.0).collect();
    let same = pearson_loss(&s, &s)?;
    let opposite = pearson_loss(&neg, &s)?;
    let scaled = pearson_loss(&affine, &s)?;
    if same.abs() > 1e-12 || (opposite - 2.0).abs() > 1e-12 || scaled.abs() > 1e-9 {
        bail!("L(s,s) = {same}, L(-s,s) = {opposite}, L(as+b,s) = {scaled}");
    }
    Ok("L(s,s) = 0, L(-s,s) = 2, affine invariant".into())
}

fn filter_response() -> Result<String> {
    let fs = 30.0;
    let filter = Biquad::butter_bandpass(fs, HR_BAND_HZ.0, HR_BAND_HZ.1)?;
    let n = 3000;
    let tone: Vec<f64> = (0..n).map(|i| (std::f64::consts::TAU * 0.1 * i as f64 / fs).sin()).collect();
    let out = filter.filtfilt(&tone)?;
    let mid = &out[n / 4..3 * n / 4];
    let amp = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let centre = (HR_BAND_HZ.0 * HR_BAND_HZ.1).sqrt();
    let passband = filter.magnitude(centre, fs).powi(2);
    let ratio = amp / passband;
    if ratio >= 0.05 {
        bail!("0.1 Hz gain ratio {ratio:.4}");
    }
    Ok(format!("0.1 Hz gain ratio {ratio:.4}"))
}

fn fft_heart_rate() -> Result<String> {
    let fs = 30.0;
    let mut worst = 0.0f64;
    for bpm in [48.0, 60.0, 72.0, 90.0, 120.0, 144.0] {
        let x: Vec<f64> = (0..600).map(|i| (std::f64::consts::TAU * bpm / 60.0 * i as f64 / fs).sin()).collect();
        let est = estimate_hr(&x, fs)?.hr_fft_bpm;
        worst = worst.max((est - bpm).abs());
    }
    if worst > 0.5 {
        bail!("worst error {worst:.3} bpm");
    }
    Ok(format!("worst error {worst:.3} bpm"))
}

fn common_mode() -> Result<String> {
    let fs = 30.0;
    let frames = 300;
    let mut means = Vec::with_capacity(frames);
    for t in 0..frames {
        let m = 1.0 + 0.01 * (std::f64::consts::TAU * 1.2 * t as f64 / fs).sin();
        means.push([160.0 * m, 120.0 * m, 95.0 * m]);
    }
    let trace = RoiTrace {
        fps: fs,
        frame_count: frames,
        base_roi_count: 1,
        channel_means: means,
        pixel_counts: vec![100; frames],
        gt_ppg: None,
        gt_hr_bpm: None,
    };
    let reference = 0.01 / 2f64.sqrt();
    let mut worst = 0.0f64;
    for method in [baselines::Method::Chrom, baselines::Method::Pos] {
        let out = baselines::run(method, &trace)?.signal;
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
        worst = worst.max(rms / reference);
    }
    if worst >= 0.01 {
        bail!("residual {:.3}% of modulation", 100.0 * worst);
    }
    Ok(format!("residual {:.2e}% of modulation", 100.0 * worst))
}

fn check_checkpoint(path: &Path) -> Result<String> {
    let (cfg, params) = read_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if !params.is_finite() {
        bail!("non-finite parameters");
    }
    let out = dual_forward(&toy_map(&cfg, 3), &params, &cfg)?;
    if out.len() != cfg.frames {
        bail!("output length {} for T = {}", out.len(), cfg.frames);
    }
    Ok(format!("{} parameters, forward pass finite", params.numel()))
}
