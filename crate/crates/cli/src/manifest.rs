//! JSON manifests that tie corpus, map and model artifacts together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dualtl::io::{read_mstmap, read_trace, sidecar_path, write_atomic};
use dualtl::mstmap::{ColorSpace, RoiTrace};
use dualtl::synth::SynthConfig;
use dualtl::trainer::Sample;
use serde::{Deserialize, Serialize};

pub const SYNTH_MANIFEST: &str = "manifest.json";
pub const SEGMENT_MANIFEST: &str = "segments.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub seed: u64,
    pub template: SynthConfig,
    pub videos: Vec<SynthEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthEntry {
    pub id: String,
    pub trace: String,
    pub sidecar: String,
    pub seed: u64,
    pub hr_bpm: f64,
    pub hr_end_bpm: Option<f64>,
    pub gt_hr_bpm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentManifest {
    pub color_space: ColorSpace,
    pub seg_len: usize,
    pub stride_s: f64,
    pub normalized: bool,
    pub segments: Vec<SegmentEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub file: String,
    pub video: String,
    pub trace: String,
    pub start_frame: usize,
    pub frames: usize,
    pub fps: f64,
    pub degraded: bool,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Trace CSVs with a sidecar, sorted by name. `input` may be a file or a
/// directory.
pub fn trace_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!("{} is neither a trace file nor a directory", input.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && sidecar_path(p).is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no trace CSVs with sidecars in {}", input.display());
    }
    Ok(files)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Maps listed in `maps_dir/segments.json` paired with ground truth from the
/// traces in `traces_dir`. Without traces the targets are empty.
pub fn load_samples(maps_dir: &Path, traces_dir: Option<&Path>) -> Result<(SegmentManifest, Vec<Sample>)> {
    let manifest: SegmentManifest = read_json(&maps_dir.join(SEGMENT_MANIFEST))?;
    let mut traces: BTreeMap<String, RoiTrace> = BTreeMap::new();
    let mut samples = Vec::with_capacity(manifest.segments.len());
    for seg in &manifest.segments {
        let map = read_mstmap(&maps_dir.join(&seg.file))?;
        let target = match traces_dir {
            Some(dir) => {
                if !traces.contains_key(&seg.trace) {
                    let trace = read_trace(&dir.join(&seg.trace))?;
                    traces.insert(seg.trace.clone(), trace);
                }
                let trace = &traces[&seg.trace];
                let gt = trace
                    .gt_ppg
                    .as_ref()
                    .with_context(|| format!("{} has no ground-truth waveform", seg.trace))?;
                let end = seg.start_frame + seg.frames;
                if end > gt.len() {
                    bail!("segment {} runs past the end of {}", seg.file, seg.trace);
                }
                gt[seg.start_frame..end].to_vec()
            }
            None => Vec::new(),
        };
        samples.push(Sample {
            video: seg.video.clone(),
            start_frame: seg.start_frame,
            map,
            target,
            fps: seg.fps,
        });
    }
    if samples.is_empty() {
        bail!("{} lists no segments", maps_dir.join(SEGMENT_MANIFEST).display());
    }
    Ok((manifest, samples))
}
