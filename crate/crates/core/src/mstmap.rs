//! Multi-scale spatial-temporal maps (MSTmaps).
//!
//! A trace stores per-frame, per-ROI colour means together with the number of
//! pixels each mean was taken over. Every nonempty subset of the base ROIs is a
//! combination; the map holds the pixel-weighted mean colour of each
//! combination for each frame, optionally converted to YUV.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest base-ROI count accepted by [`enumerate_roi_combinations`].
pub const MAX_BASE_ROIS: usize = 16;

/// Per-frame, per-ROI RGB statistics for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTrace {
    pub fps: f64,
    pub frame_count: usize,
    pub base_roi_count: usize,
    /// `[frame * base_roi_count + roi]`, RGB order, values in `[0, 255]`.
    pub channel_means: Vec<[f64; 3]>,
    /// `[frame * base_roi_count + roi]`.
    pub pixel_counts: Vec<u32>,
    pub gt_ppg: Option<Vec<f64>>,
    pub gt_hr_bpm: Option<f64>,
}

impl RoiTrace {
    pub fn mean(&self, frame: usize, roi: usize) -> [f64; 3] {
        self.channel_means[frame * self.base_roi_count + roi]
    }

    pub fn count(&self, frame: usize, roi: usize) -> u32 {
        self.pixel_counts[frame * self.base_roi_count + roi]
    }

    pub fn duration_s(&self) -> f64 {
        self.frame_count as f64 / self.fps
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::domain(format!("fps must be positive, got {}", self.fps)));
        }
        if self.base_roi_count == 0 || self.base_roi_count > MAX_BASE_ROIS {
            return Err(Error::domain(format!(
                "base ROI count {} outside 1..={MAX_BASE_ROIS}",
                self.base_roi_count
            )));
        }
        let cells = self.frame_count * self.base_roi_count;
        if self.channel_means.len() != cells || self.pixel_counts.len() != cells {
            return Err(Error::shape(format!(
                "trace has {} means and {} counts, expected {cells}",
                self.channel_means.len(),
                self.pixel_counts.len()
            )));
        }
        if let Some(gt) = &self.gt_ppg {
            if gt.len() != self.frame_count {
                return Err(Error::shape(format!(
                    "gt_ppg has {} samples for {} frames",
                    gt.len(),
                    self.frame_count
                )));
            }
            if gt.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gt_ppg".into()));
            }
        }
        for (idx, rgb) in self.channel_means.iter().enumerate() {
            if rgb.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 255.0) {
                return Err(Error::domain(format!(
                    "channel mean {rgb:?} at frame {} roi {} outside [0, 255]",
                    idx / self.base_roi_count,
                    idx % self.base_roi_count
                )));
            }
        }
        Ok(())
    }

    /// Pixel-weighted mean over `rois` at `frame`, or `None` when all of them
    /// are empty.
    pub fn union_mean(&self, frame: usize, rois: impl IntoIterator<Item = usize>) -> Option<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut total = 0u64;
        for roi in rois {
            let count = self.count(frame, roi);
            if count == 0 {
                continue;
            }
            let mean = self.mean(frame, roi);
            for c in 0..3 {
                acc[c] += mean[c] * f64::from(count);
            }
            total += u64::from(count);
        }
        (total > 0).then(|| acc.map(|v| v / total as f64))
    }
}

/// All nonempty subsets of the base ROIs, in ascending bitmask order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiCombinationSet {
    pub n: usize,
    pub masks: Vec<u32>,
}

impl RoiCombinationSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// ROI indices contained in combination `k`.
    pub fn members(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let mask = self.masks[k];
        (0..self.n).filter(move |i| mask & (1 << i) != 0)
    }
}

pub fn enumerate_roi_combinations(n: usize) -> Result<RoiCombinationSet> {
    if !(1..=MAX_BASE_ROIS).contains(&n) {
        return Err(Error::domain(format!("base ROI count {n} outside 1..={MAX_BASE_ROIS}")));
    }
    let masks = (1..(1u32 << n)).collect();
    Ok(RoiCombinationSet { n, masks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    #[default]
    Yuv,
    RgbYuv,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb | ColorSpace::Yuv => 3,
            ColorSpace::RgbYuv => 6,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ColorSpace::Rgb => 0,
            ColorSpace::Yuv => 1,
            ColorSpace::RgbYuv => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ColorSpace::Rgb),
            1 => Ok(ColorSpace::Yuv),
            2 => Ok(ColorSpace::RgbYuv),
            other => Err(Error::format(format!("unknown colour space code {other}"))),
        }
    }
}

impl std::str::FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ColorSpace::Rgb),
            "yuv" => Ok(ColorSpace::Yuv),
            "rgbyuv" => Ok(ColorSpace::RgbYuv),
            other => Err(Error::domain(format!("unknown colour space {other:?}"))),
        }
    }
}

/// BT.601 full-range RGB to YUV with the chroma offset at 128.
pub fn rgb_to_yuv(rgb: [f64; 3]) -> Result<[f64; 3]> {
    if rgb.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("rgb {rgb:?}")));
    }
    let [r, g, b] = rgb;
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let u = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
    let v = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
    Ok([y, u, v].map(|x| x.clamp(0.0, 255.0)))
}

/// An `N x C x T` map. `values` is laid out `[combination][channel][time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MstMap {
    pub combinations: usize,
    pub channels: usize,
    pub frames: usize,
    pub values: Vec<f64>,
    pub color_space: ColorSpace,
    pub normalized: bool,
    /// Set when some combination had no pixels on the window's first frame.
    pub degraded: bool,
}

impl MstMap {
    pub fn zeros(combinations: usize, color_space: ColorSpace, frames: usize) -> Self {
        let channels = color_space.channels();
        MstMap {
            combinations,
            channels,
            frames,
            values: vec![0.0; combinations * channels * frames],
            color_space,
            normalized: false,
            degraded: false,
        }
    }

    #[inline]
    pub fn index(&self, k: usize, c: usize, t: usize) -> usize {
        (k * self.channels + c) * self.frames + t
    }

    #[inline]
    pub fn get(&self, k: usize, c: usize, t: usize) -> f64 {
        self.values[self.index(k, c, t)]
    }

    /// The time series of combination `k`, channel `c`.
    pub fn row(&self, k: usize, c: usize) -> &[f64] {
        let start = self.index(k, c, 0);
        &self.values[start..start + self.frames]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.combinations, self.channels, self.frames)
    }
}

/// Map over every frame of the trace.
pub fn build_mstmap(trace: &RoiTrace, combos: &RoiCombinationSet, color_space: ColorSpace) -> Result<MstMap> {
    build_mstmap_window(trace, combos, color_space, 0..trace.frame_count)
}

/// Map over `frames` of the trace (unnormalized).
///
/// A combination whose ROIs are all empty at some frame repeats its previous
/// frame's value; on the first frame of the window it is zero and the map is
/// flagged as degraded.
pub fn build_mstmap_window(
    trace: &RoiTrace,
    combos: &RoiCombinationSet,
    color_space: ColorSpace,
    frames: Range<usize>,
) -> Result<MstMap> {
    trace.validate()?;
    if combos.n != trace.base_roi_count {
        return Err(Error::shape(format!(
            "combination set over {} ROIs used with a {}-ROI trace",
            combos.n, trace.base_roi_count
        )));
    }
    if frames.start >= frames.end || frames.end > trace.frame_count {
        return Err(Error::domain(format!(
            "frame window {frames:?} invalid for {} frames",
            trace.frame_count
        )));
    }
    let len = frames.len();
    let mut map = MstMap::zeros(combos.len(), color_space, len);
    for k in 0..combos.len() {
        let mut previous: Option<[f64; 6]> = None;
        for (t, frame) in frames.clone().enumerate() {
            let channels = match trace.union_mean(frame, combos.members(k)) {
                Some(rgb) => expand_channels(rgb, color_space)?,
                None => previous.unwrap_or_else(|| {
                    map.degraded = true;
                    [0.0; 6]
                }),
            };
            for (c, value) in channels.iter().take(map.channels).enumerate() {
                let idx = map.index(k, c, t);
                map.values[idx] = *value;
            }
            previous = Some(channels);
        }
    }
    Ok(map)
}

fn expand_channels(rgb: [f64; 3], color_space: ColorSpace) -> Result<[f64; 6]> {
    let mut out = [0.0; 6];
    match color_space {
        ColorSpace::Rgb => out[..3].copy_from_slice(&rgb),
        ColorSpace::Yuv => out[..3].copy_from_slice(&rgb_to_yuv(rgb)?),
        ColorSpace::RgbYuv => {
            out[..3].copy_from_slice(&rgb);
            out[3..].copy_from_slice(&rgb_to_yuv(rgb)?);
        }
    }
    Ok(out)
}

/// Per-row min-max scaling to `[0, 255]`; constant rows become 127.5.
pub fn minmax_normalize(map: &MstMap) -> Result<MstMap> {
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MSTmap entry".into()));
    }
    let mut out = map.clone();
    for row in out.values.chunks_mut(map.frames) {
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        if span > 0.0 {
            row.iter_mut().for_each(|v| *v = 255.0 * (*v - lo) / span);
        } else {
            row.fill(127.5);
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Fixed-length windows starting every `round(stride_s * fps)` frames. The
/// trailing remainder that does not fill a window is dropped.
pub fn segment_trace(trace: &RoiTrace, seg_len_frames: usize, stride_s: f64) -> Result<Vec<Range<usize>>> {
    segment_frames(trace.frame_count, trace.fps, seg_len_frames, stride_s)
}

pub fn segment_frames(frame_count: usize, fps: f64, seg_len_frames: usize, stride_s: f64) -> Result<Vec<Range<usize>>> {
    if seg_len_frames == 0 {
        return Err(Error::domain("segment length must be positive"));
    }
    let stride = (stride_s * fps).round();
    if !(stride.is_finite() && stride >= 1.0) {
        return Err(Error::domain(format!(
            "stride {stride_s} s at {fps} fps is shorter than one frame"
        )));
    }
    let stride = stride as usize;
    if seg_len_frames > frame_count {
        return Ok(Vec::new());
    }
    Ok((0..=frame_count - seg_len_frames)
        .step_by(stride)
        .map(|start| start..start + seg_len_frames)
        .collect())
}
