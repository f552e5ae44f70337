//! Seeded mini-batch training with Adam, resumable state and HR evaluation.
//!
//! Per-sample gradients are computed in parallel and summed in batch order,
//! so results do not depend on the thread count. Epoch `e` shuffles with
//! ChaCha8 seeded by the run seed on stream `e`.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::hrdsp::{estimate_hr, HrReport, VideoHr, pearson_r};
use crate::io::ByteCursor;
use crate::model::{dual_forward, init_params, loss_and_grad, ModelConfig, ModelParams};
use crate::mstmap::{build_mstmap_window, minmax_normalize, segment_trace, ColorSpace, MstMap, RoiCombinationSet, RoiTrace};
use crate::{Error, Result};

pub const STATE_MAGIC: &[u8; 4] = b"DTLS";
pub const STATE_VERSION: u32 = 1;

/// One training or evaluation segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video: String,
    pub start_frame: usize,
    pub map: MstMap,
    /// Ground-truth waveform aligned to the map's frames.
    pub target: Vec<f64>,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between scheduled checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Stops once this many optimizer steps have been taken in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState {
            step: 0,
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
        }
    }
}

/// Bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter changes.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if let Some((name, _)) = grads.visit().into_iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} at step {}", state.step + 1)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.visit();
    let tensors = params
        .visit_mut()
        .into_iter()
        .zip(grads)
        .zip(state.m.visit_mut())
        .zip(state.v.visit_mut());
    for (((p, (name, g)), m), v) in tensors {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient shape mismatch for {name}")));
        }
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Total optimizer steps after this epoch.
    pub step: u64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs; also selects the next shuffle stream.
    pub epochs_done: usize,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(TrainState {
            params: init_params(model, seed)?,
            adam: AdamState::new(model),
            epochs_done: 0,
            history: Vec::new(),
        })
    }
}

fn has_variance(x: &[f64]) -> bool {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    x.iter().any(|v| (v - mean).abs() > 1e-12 * scale.max(1e-300))
}

/// Samples usable for training; constant targets are dropped with a warning.
pub fn trainable(dataset: &[Sample], model: &ModelConfig) -> Result<Vec<usize>> {
    let mut keep = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        model.check_map(&s.map)?;
        if s.target.len() != model.frames {
            return Err(Error::shape(format!(
                "{}@{}: target length {} for T = {}",
                s.video,
                s.start_frame,
                s.target.len(),
                model.frames
            )));
        }
        if has_variance(&s.target) {
            keep.push(i);
        } else {
            log::warn!("{}@{}: constant ground truth, skipped", s.video, s.start_frame);
        }
    }
    if keep.is_empty() {
        return Err(Error::Degenerate("no trainable samples: every target is constant".into()));
    }
    Ok(keep)
}

/// Mean loss and gradient over `batch`, reduced in order.
pub fn batch_loss_and_grad(
    dataset: &[Sample],
    batch: &[usize],
    params: &ModelParams,
    model: &ModelConfig,
) -> Result<(f64, ModelParams)> {
    let results: Vec<Result<(f64, ModelParams)>> = batch
        .par_iter()
        .map(|&i| loss_and_grad(&dataset[i].map, &dataset[i].target, params, model))
        .collect();
    let mut total = ModelParams::zeros(model);
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (acc, (_, g)) in total.visit_mut().into_iter().zip(g.visit()) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    total.visit_mut().into_iter().for_each(|t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v *= scale));
    Ok((loss * scale, total))
}

/// Mean loss over the trainable samples.
pub fn mean_loss(dataset: &[Sample], params: &ModelParams, model: &ModelConfig) -> Result<f64> {
    let keep = trainable(dataset, model)?;
    let losses: Vec<Result<f64>> = keep
        .par_iter()
        .map(|&i| {
            let s = &dataset[i];
            crate::model::pearson_loss(&dual_forward(&s.map, params, model)?, &s.target)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / keep.len() as f64)
}

/// Trains from a fresh initialisation seeded by `cfg.seed`.
pub fn train(dataset: &[Sample], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainState> {
    let state = TrainState::new(model, cfg.seed)?;
    train_from(state, dataset, model, cfg, |_| Ok(()))
}

/// Runs epochs `state.epochs_done..cfg.epochs`, calling `on_epoch` after each.
pub fn train_from<F>(
    mut state: TrainState,
    dataset: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    model.validate()?;
    state.params.check_shapes(model)?;
    let keep = trainable(dataset, model)?;
    let limit = cfg.max_steps.unwrap_or(u64::MAX);
    while state.epochs_done < cfg.epochs && state.adam.step < limit {
        let epoch = state.epochs_done;
        let mut order = keep.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if state.adam.step >= limit {
                break;
            }
            let (loss, grads) = batch_loss_and_grad(dataset, batch, &state.params, model)?;
            adam_step(&mut state.params, &grads, &mut state.adam, cfg)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        state.epochs_done += 1;
        let entry = EpochLog {
            epoch: state.epochs_done,
            step: state.adam.step,
            mean_loss: loss_sum / seen.max(1) as f64,
        };
        log::info!("epoch {} step {} loss {:.6}", entry.epoch, entry.step, entry.mean_loss);
        state.history.push(entry);
        on_epoch(&state)?;
    }
    Ok(state)
}

/// `epoch,step,mean_loss` rows with a header.
pub fn history_csv(history: &[EpochLog]) -> Vec<u8> {
    let mut out = String::from("epoch,step,mean_loss\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.step, h.mean_loss));
    }
    out.into_bytes()
}

/// Full-precision resumable state: parameters, moments and loss history.
pub fn encode_state(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&state.adam.step.to_le_bytes());
    out.extend_from_slice(&(state.epochs_done as u64).to_le_bytes());
    out.extend_from_slice(&(state.params.numel() as u64).to_le_bytes());
    for p in [&state.params, &state.adam.m, &state.adam.v] {
        for v in p.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(state.history.len() as u64).to_le_bytes());
    for h in &state.history {
        out.extend_from_slice(&(h.epoch as u64).to_le_bytes());
        out.extend_from_slice(&h.step.to_le_bytes());
        out.extend_from_slice(&h.mean_loss.to_le_bytes());
    }
    out
}

pub fn decode_state(bytes: &[u8], model: &ModelConfig) -> Result<TrainState> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(4)? != STATE_MAGIC {
        return Err(Error::format("missing DTLS magic"));
    }
    let version = cur.u32()?;
    if version != STATE_VERSION {
        return Err(Error::format(format!("unsupported training state version {version}")));
    }
    let step = cur.u64()?;
    let epochs_done = cur.u64()? as usize;
    let numel = cur.u64()? as usize;
    let mut tensors = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut p = ModelParams::zeros(model);
        if p.numel() != numel {
            return Err(Error::format(format!("state holds {numel} parameters, model needs {}", p.numel())));
        }
        p.assign_flat(&cur.f64s(numel)?)?;
        tensors.push(p);
    }
    let entries = cur.u64()? as usize;
    let mut history = Vec::with_capacity(entries.min(1 << 20));
    for _ in 0..entries {
        let epoch = cur.u64()? as usize;
        let step = cur.u64()?;
        let mean_loss = f64::from_bits(cur.u64()?);
        history.push(EpochLog { epoch, step, mean_loss });
    }
    if !cur.is_empty() {
        return Err(Error::format("trailing bytes after training state"));
    }
    let v = tensors.pop().expect("three tensors");
    let m = tensors.pop().expect("three tensors");
    let params = tensors.pop().expect("three tensors");
    Ok(TrainState {
        params,
        adam: AdamState { step, m, v },
        epochs_done,
        history,
    })
}

/// Linear interpolation of a waveform sampled at `from_fs` onto `n` frame
/// times at `to_fs`; times past the last sample hold its value.
pub fn resample_linear(signal: &[f64], from_fs: f64, to_fs: f64, n: usize) -> Result<Vec<f64>> {
    if signal.is_empty() || !(from_fs > 0.0) || !(to_fs > 0.0) {
        return Err(Error::domain("resampling needs samples and positive rates"));
    }
    let last = signal.len() - 1;
    Ok((0..n)
        .map(|i| {
            let pos = i as f64 * from_fs / to_fs;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = (pos - lo as f64).clamp(0.0, 1.0);
            signal[lo] + frac * (signal[hi] - signal[lo])
        })
        .collect())
}

/// Segments a trace into normalized maps with aligned ground-truth targets.
pub fn trace_samples(
    video: &str,
    trace: &RoiTrace,
    combos: &RoiCombinationSet,
    color_space: ColorSpace,
    seg_len: usize,
    stride_s: f64,
) -> Result<Vec<Sample>> {
    let gt = trace
        .gt_ppg
        .as_ref()
        .ok_or_else(|| Error::domain(format!("{video}: trace has no ground-truth waveform")))?;
    segment_trace(trace, seg_len, stride_s)?
        .into_iter()
        .map(|range: Range<usize>| {
            let map = minmax_normalize(&build_mstmap_window(trace, combos, color_space, range.clone())?)?;
            Ok(Sample {
                video: video.to_string(),
                start_frame: range.start,
                map,
                target: gt[range].to_vec(),
                fps: trace.fps,
            })
        })
        .collect()
}

/// Segment HR via the shared estimator; `None` when the segment fails.
fn segment_hr(signal: &[f64], fs: f64) -> Option<f64> {
    match estimate_hr(signal, fs) {
        Ok(e) => Some(e.hr_bpm),
        Err(err) => {
            log::warn!("segment excluded: {err}");
            None
        }
    }
}

/// Aggregates per-segment (prediction, reference) HRs into a report, with
/// video HRs as arithmetic means over their segments.
pub fn report_from_segments(segments: Vec<(String, Option<(f64, f64)>)>) -> Result<HrReport> {
    let mut per_video: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut excluded = 0;
    for (video, hr) in segments {
        let entry = per_video.entry(video).or_default();
        match hr {
            Some(pair) => entry.push(pair),
            None => excluded += 1,
        }
    }
    let videos: Vec<VideoHr> = per_video
        .into_iter()
        .filter(|(id, hrs)| {
            if hrs.is_empty() {
                log::warn!("{id}: every segment excluded");
            }
            !hrs.is_empty()
        })
        .map(|(id, hrs)| {
            let n = hrs.len() as f64;
            let pred: Vec<f64> = hrs.iter().map(|h| h.0).collect();
            let gt: Vec<f64> = hrs.iter().map(|h| h.1).collect();
            VideoHr {
                id,
                hr_pred: pred.iter().sum::<f64>() / n,
                hr_gt: gt.iter().sum::<f64>() / n,
                segments: hrs.len(),
                segment_r: pearson_r(&pred, &gt),
            }
        })
        .collect();
    if videos.is_empty() {
        return Err(Error::Degenerate("no segment produced a heart rate".into()));
    }
    HrReport::from_videos(videos, excluded)
}

/// Predicted and reference HRs for every segment. References come from the
/// ground-truth waveform through the same estimator as predictions.
pub fn evaluate(dataset: &[Sample], params: &ModelParams, model: &ModelConfig) -> Result<HrReport> {
    let segments: Vec<Result<(String, Option<(f64, f64)>)>> = dataset
        .par_iter()
        .map(|s| {
            let pred = dual_forward(&s.map, params, model)?;
            let hr = segment_hr(&pred, s.fps).zip(segment_hr(&s.target, s.fps));
            Ok((s.video.clone(), hr))
        })
        .collect();
    report_from_segments(segments.into_iter().collect::<Result<_>>()?)
}
