//! On-disk formats shared by the library and the CLI.
//!
//! * ROI traces: CSV `frame,roi,pixel_count,mean_r,mean_g,mean_b[,gt_ppg]`
//!   plus a JSON sidecar `{ "fps", "n_rois", "gt_hr_bpm" }`.
//! * MSTmaps: `MSTM` magic, u32 version, u32 N/C/T, u8 colour space,
//!   u8 normalized flag, then `N*C*T` little-endian f32 values.
//! * Signals: CSV with one sample per line.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mstmap::{ColorSpace, MstMap, RoiTrace};
use crate::{Error, Result};

pub const MSTMAP_MAGIC: &[u8; 4] = b"MSTM";
pub const MSTMAP_VERSION: u32 = 1;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSidecar {
    pub fps: f64,
    pub n_rois: usize,
    pub gt_hr_bpm: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    frame: usize,
    roi: usize,
    pixel_count: u32,
    mean_r: f32,
    mean_g: f32,
    mean_b: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_ppg: Option<f32>,
}

/// Sidecar path for a trace CSV: `foo.csv` -> `foo.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Serializes a trace to CSV text. Values are written at f32 precision.
pub fn trace_to_csv(trace: &RoiTrace) -> Result<Vec<u8>> {
    let with_gt = trace.gt_ppg.is_some();
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut header = vec!["frame", "roi", "pixel_count", "mean_r", "mean_g", "mean_b"];
    if with_gt {
        header.push("gt_ppg");
    }
    writer.write_record(&header)?;
    for frame in 0..trace.frame_count {
        for roi in 0..trace.base_roi_count {
            let [r, g, b] = trace.mean(frame, roi);
            writer.serialize(TraceRow {
                frame,
                roi,
                pixel_count: trace.count(frame, roi),
                mean_r: r as f32,
                mean_g: g as f32,
                mean_b: b as f32,
                gt_ppg: trace.gt_ppg.as_ref().map(|gt| gt[frame] as f32),
            })?;
        }
    }
    writer
        .into_inner()
        .map_err(|e| Error::Io(e.into_error()))
}

pub fn write_trace(csv_path: &Path, trace: &RoiTrace) -> Result<()> {
    write_atomic(csv_path, &trace_to_csv(trace)?)?;
    let sidecar = TraceSidecar {
        fps: trace.fps,
        n_rois: trace.base_roi_count,
        gt_hr_bpm: trace.gt_hr_bpm,
    };
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    write_atomic(&sidecar_path(csv_path), &json)
}

pub fn read_trace(csv_path: &Path) -> Result<RoiTrace> {
    let sidecar: TraceSidecar = serde_json::from_slice(&fs::read(sidecar_path(csv_path))?)?;
    let file = fs::File::open(csv_path)?;
    parse_trace_csv(file, &sidecar).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", csv_path.display())),
        other => other,
    })
}

/// Parses trace CSV rows. Rows must be ordered by frame, then ROI.
pub fn parse_trace_csv<R: Read>(reader: R, sidecar: &TraceSidecar) -> Result<RoiTrace> {
    let n = sidecar.n_rois;
    if n == 0 {
        return Err(Error::format("sidecar n_rois must be positive"));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["frame", "roi", "pixel_count", "mean_r", "mean_g", "mean_b"];
    let has_gt = match headers.len() {
        6 => false,
        7 if &headers[6] == "gt_ppg" => true,
        _ => return Err(Error::format(format!("unexpected header {headers:?}"))),
    };
    if headers.iter().take(6).ne(expected.iter().copied()) {
        return Err(Error::format(format!("unexpected header {headers:?}")));
    }
    let mut means = Vec::new();
    let mut counts = Vec::new();
    let mut gt = Vec::new();
    for (idx, record) in rdr.deserialize::<TraceRow>().enumerate() {
        let line = idx + 2;
        let row = record.map_err(|e| Error::format(format!("line {line}: {e}")))?;
        let expect_frame = idx / n;
        let expect_roi = idx % n;
        if row.frame != expect_frame || row.roi != expect_roi {
            return Err(Error::format(format!(
                "line {line}: expected frame {expect_frame} roi {expect_roi}, found frame {} roi {}",
                row.frame, row.roi
            )));
        }
        means.push([row.mean_r, row.mean_g, row.mean_b].map(f64::from));
        counts.push(row.pixel_count);
        if has_gt {
            let value = row
                .gt_ppg
                .ok_or_else(|| Error::format(format!("line {line}: missing gt_ppg")))?;
            if expect_roi == 0 {
                gt.push(f64::from(value));
            }
        }
    }
    if means.len() % n != 0 {
        return Err(Error::format(format!(
            "{} rows is not a whole number of {n}-ROI frames",
            means.len()
        )));
    }
    let trace = RoiTrace {
        fps: sidecar.fps,
        frame_count: means.len() / n,
        base_roi_count: n,
        channel_means: means,
        pixel_counts: counts,
        gt_ppg: has_gt.then_some(gt),
        gt_hr_bpm: sidecar.gt_hr_bpm,
    };
    trace.validate()?;
    Ok(trace)
}

pub fn encode_mstmap(map: &MstMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 4 * map.values.len());
    out.extend_from_slice(MSTMAP_MAGIC);
    for v in [MSTMAP_VERSION, map.combinations as u32, map.channels as u32, map.frames as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(map.color_space.code());
    out.push(u8::from(map.normalized));
    for v in &map.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_mstmap(bytes: &[u8]) -> Result<MstMap> {
    let mut cursor = ByteCursor::new(bytes);
    if cursor.take(4)? != MSTMAP_MAGIC {
        return Err(Error::format("missing MSTM magic"));
    }
    let version = cursor.u32()?;
    if version != MSTMAP_VERSION {
        return Err(Error::format(format!("unsupported MSTmap version {version}")));
    }
    let (n, c, t) = (cursor.u32()? as usize, cursor.u32()? as usize, cursor.u32()? as usize);
    let color_space = ColorSpace::from_code(cursor.u8()?)?;
    if color_space.channels() != c {
        return Err(Error::format(format!("{c} channels inconsistent with {color_space:?}")));
    }
    let normalized = match cursor.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::format(format!("invalid normalized flag {other}"))),
    };
    let len = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| Error::format("MSTmap dimensions overflow"))?;
    let values = cursor.f32s(len)?;
    if !cursor.is_empty() {
        return Err(Error::format("trailing bytes after MSTmap payload"));
    }
    Ok(MstMap {
        combinations: n,
        channels: c,
        frames: t,
        values,
        color_space,
        normalized,
        degraded: false,
    })
}

pub fn write_mstmap(path: &Path, map: &MstMap) -> Result<()> {
    write_atomic(path, &encode_mstmap(map))
}

pub fn read_mstmap(path: &Path) -> Result<MstMap> {
    decode_mstmap(&fs::read(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// One sample per line, shortest round-trip decimal representation.
pub fn signal_to_csv(samples: &[f64]) -> Vec<u8> {
    let mut out = String::with_capacity(samples.len() * 12);
    for v in samples {
        out.push_str(&format!("{v}\n"));
    }
    out.into_bytes()
}

pub fn parse_signal_csv<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: f64 = trimmed
            .parse()
            .map_err(|e| Error::format(format!("line {}: {e}", idx + 1)))?;
        if !value.is_finite() {
            return Err(Error::format(format!("line {}: non-finite sample", idx + 1)));
        }
        samples.push(value);
    }
    Ok(samples)
}

pub fn read_signal(path: &Path) -> Result<Vec<f64>> {
    parse_signal_csv(fs::File::open(path)?)
}

/// Little-endian reader over a byte slice.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(b);
        Ok(u64::from_le_bytes(arr))
    }

    pub(crate) fn f32s(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = self.take(len.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    }

    pub(crate) fn f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| {
                let mut arr = [0u8; 8];
                arr.copy_from_slice(b);
                f64::from_le_bytes(arr)
            })
            .collect())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trace() -> RoiTrace {
        RoiTrace {
            fps: 30.0,
            frame_count: 2,
            base_roi_count: 2,
            channel_means: vec![[1.5, 2.25, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0], [10.0, 11.0, 12.125]],
            pixel_counts: vec![10, 0, 3, 4],
            gt_ppg: Some(vec![0.5, -0.25]),
            gt_hr_bpm: Some(72.0),
        }
    }

    #[test]
    fn trace_csv_header_and_round_trip() {
        let trace = tiny_trace();
        let csv = trace_to_csv(&trace).unwrap();
        let text = String::from_utf8(csv.clone()).unwrap();
        assert!(text.starts_with("frame,roi,pixel_count,mean_r,mean_g,mean_b,gt_ppg\n0,0,10,1.5,2.25,3"), "{text}");
        let sidecar = TraceSidecar { fps: 30.0, n_rois: 2, gt_hr_bpm: Some(72.0) };
        assert_eq!(parse_trace_csv(&csv[..], &sidecar).unwrap(), trace);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let sidecar = TraceSidecar { fps: 30.0, n_rois: 1, gt_hr_bpm: None };
        let text = "frame,roi,pixel_count,mean_r,mean_g,mean_b\n0,0,1,1,1,1\n1,0,x,1,1,1\n";
        let err = parse_trace_csv(text.as_bytes(), &sidecar).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let text = "frame,roi,pixel_count,mean_r,mean_g,mean_b\n0,0,1,1,1,1\n2,0,1,1,1,1\n";
        let err = parse_trace_csv(text.as_bytes(), &sidecar).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let text = "frame,roi,count,mean_r,mean_g,mean_b\n";
        assert!(parse_trace_csv(text.as_bytes(), &sidecar).is_err());
    }

    #[test]
    fn mstmap_binary_layout() {
        let map = MstMap {
            combinations: 1,
            channels: 3,
            frames: 2,
            values: vec![0.0, 1.0, 2.0, 3.0, 4.0, 255.0],
            color_space: ColorSpace::Yuv,
            normalized: true,
            degraded: false,
        };
        let bytes = encode_mstmap(&map);
        assert_eq!(&bytes[..4], b"MSTM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(bytes[20], 1);
        assert_eq!(bytes[21], 1);
        assert_eq!(bytes.len(), 22 + 6 * 4);
        assert_eq!(&bytes[bytes.len() - 4..], &255f32.to_le_bytes());
        assert_eq!(decode_mstmap(&bytes).unwrap(), map);
        assert!(decode_mstmap(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_mstmap(&bad).is_err());
    }

    #[test]
    fn signal_csv_round_trip() {
        let samples = vec![0.1, -2.5, 1e-7];
        assert_eq!(parse_signal_csv(&signal_to_csv(&samples)[..]).unwrap(), samples);
        assert!(parse_signal_csv("1\nnan\n".as_bytes()).is_err());
    }
}
