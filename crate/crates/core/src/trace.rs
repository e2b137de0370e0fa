//! Transformer trace data model and the SOFT1 container format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SOFT" | u32 version = 1 | u32 header_len | JSON header
//! | L*H attention matrices, n_tok^2 f32 each, row-major, layer-major then head-major
//! | key features, (token_count + 1) * D f32
//! | CLS attention, token_count f32
//! | rgb, h * w * 3 u8
//! ```
//!
//! Token index 0 of every attention matrix and of the key features is the CLS
//! token; patch tokens follow in row-major grid order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{atomic, Error, Result};

pub const MAGIC: &[u8; 4] = b"SOFT";
pub const VERSION: u32 = 1;
/// Tolerance on attention row sums (softmax outputs stored as f32).
pub const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_px: usize) -> Result<Self> {
        let grid = PatchGrid { rows, cols, patch_px };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.patch_px == 0 {
            return Err(Error::Invalid(format!(
                "patch grid must be non-empty, got {}x{} with patch {}",
                self.rows, self.cols, self.patch_px
            )));
        }
        Ok(())
    }

    /// Number of patch tokens `m`.
    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Side of the attention matrices, patches plus CLS.
    pub fn token_side(&self) -> usize {
        self.token_count() + 1
    }

    /// `(row, col)` of a patch token (0-based patch index, CLS excluded).
    pub fn position(&self, patch: usize) -> (usize, usize) {
        (patch / self.cols, patch % self.cols)
    }

    /// Patch center in grid units scaled so the longer grid side spans `[0, 1]`.
    pub fn center(&self, patch: usize) -> (f64, f64) {
        let (r, c) = self.position(patch);
        let span = (self.rows.max(self.cols) - 1).max(1) as f64;
        (r as f64 / span, c as f64 / span)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub layer_index: usize,
    pub heads: Vec<Array2<f32>>,
}

impl LayerAttention {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn side(&self) -> usize {
        self.heads.first().map_or(0, |h| h.nrows())
    }
}

/// Elementwise mean of a layer's head matrices.
pub fn head_average(layer: &LayerAttention) -> Array2<f64> {
    let n = layer.side();
    let mut mean = Array2::<f64>::zeros((n, n));
    for head in &layer.heads {
        mean.zip_mut_with(head, |m, &a| *m += a as f64);
    }
    let count = layer.heads.len().max(1) as f64;
    mean.mapv_inplace(|v| v / count);
    mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub grid: PatchGrid,
    pub layers: Vec<LayerAttention>,
    /// `(token_count + 1) x D`, CLS row first.
    pub key_features: Array2<f32>,
    /// Head-averaged final-layer CLS-to-patch attention, length `token_count`.
    pub cls_attention: Vec<f32>,
    pub rgb: RgbImage,
}

impl TraceBundle {
    pub fn new(
        grid: PatchGrid,
        layers: Vec<LayerAttention>,
        key_features: Array2<f32>,
        cls_attention: Vec<f32>,
        rgb: RgbImage,
    ) -> Result<Self> {
        let bundle = TraceBundle { grid, layers, key_features, cls_attention, rgb };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn token_count(&self) -> usize {
        self.grid.token_count()
    }

    pub fn feat_dim(&self) -> usize {
        self.key_features.ncols()
    }

    pub fn head_count(&self) -> usize {
        self.layers.first().map_or(0, LayerAttention::head_count)
    }

    /// Key feature of patch token `patch` (CLS excluded), widened to f64.
    pub fn patch_key(&self, patch: usize) -> Vec<f64> {
        self.key_features.row(patch + 1).iter().map(|&v| v as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let side = self.grid.token_side();
        if self.layers.is_empty() {
            return Err(Error::Invalid("trace has no attention layers".into()));
        }
        let heads = self.layers[0].heads.len();
        if heads == 0 {
            return Err(Error::Invalid("attention layer has no heads".into()));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != heads {
                return Err(Error::Invalid(format!("layer {li} has {} heads, expected {heads}", layer.heads.len())));
            }
            for (hi, head) in layer.heads.iter().enumerate() {
                if head.dim() != (side, side) {
                    return Err(Error::Invalid(format!(
                        "layer {li} head {hi} is {:?}, expected {side}x{side}",
                        head.dim()
                    )));
                }
                for (ri, row) in head.rows().into_iter().enumerate() {
                    let mut sum = 0.0f64;
                    for &a in row {
                        if !a.is_finite() || a < 0.0 {
                            return Err(Error::Invalid(format!("layer {li} head {hi} row {ri} has entry {a}")));
                        }
                        sum += a as f64;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::NotStochastic { layer: li, head: hi, row: ri, sum });
                    }
                }
            }
        }
        if self.key_features.nrows() != side {
            return Err(Error::Invalid(format!(
                "key features have {} rows, expected {side}",
                self.key_features.nrows()
            )));
        }
        if self.key_features.ncols() == 0 {
            return Err(Error::Invalid("key feature dimension must be >= 1".into()));
        }
        if self.key_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("key features contain non-finite values".into()));
        }
        if self.cls_attention.len() != self.grid.token_count() {
            return Err(Error::Invalid(format!(
                "cls attention has {} entries, expected {}",
                self.cls_attention.len(),
                self.grid.token_count()
            )));
        }
        if self.cls_attention.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(Error::Invalid("cls attention entries must be finite and >= 0".into()));
        }
        if self.rgb.width() == 0 || self.rgb.height() == 0 {
            return Err(Error::Invalid("rgb frame is empty".into()));
        }
        Ok(())
    }

    fn header(&self) -> Header {
        Header {
            grid: self.grid,
            layers: self.layers.len(),
            heads: self.head_count(),
            feat_dim: self.feat_dim(),
            rgb: RgbDims { h: self.rgb.height() as usize, w: self.rgb.width() as usize },
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RgbDims {
    h: usize,
    w: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    grid: PatchGrid,
    layers: usize,
    heads: usize,
    feat_dim: usize,
    rgb: RgbDims,
}

impl Header {
    fn payload_len(&self) -> Option<usize> {
        let side = self.grid.rows.checked_mul(self.grid.cols)?.checked_add(1)?;
        let attn = side.checked_mul(side)?.checked_mul(self.layers)?.checked_mul(self.heads)?.checked_mul(4)?;
        let keys = side.checked_mul(self.feat_dim)?.checked_mul(4)?;
        let cls = (side - 1).checked_mul(4)?;
        let rgb = self.rgb.h.checked_mul(self.rgb.w)?.checked_mul(3)?;
        attn.checked_add(keys)?.checked_add(cls)?.checked_add(rgb)
    }
}

/// Exact serialized size of a bundle: fixed preamble, header JSON, payload.
pub fn encoded_len(bundle: &TraceBundle) -> usize {
    let header = serde_json::to_vec(&bundle.header()).expect("header serializes");
    12 + header.len() + bundle.header().payload_len().expect("validated sizes fit")
}

fn push_f32s<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `bundle`; nothing is written if it fails validation.
pub fn write_trace<W: Write>(bundle: &TraceBundle, mut sink: W) -> Result<u64> {
    bundle.validate()?;
    let header = serde_json::to_vec(&bundle.header())?;
    let mut buf = Vec::with_capacity(encoded_len(bundle));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for layer in &bundle.layers {
        for head in &layer.heads {
            push_f32s(&mut buf, head.iter());
        }
    }
    push_f32s(&mut buf, bundle.key_features.iter());
    push_f32s(&mut buf, bundle.cls_attention.iter());
    buf.extend_from_slice(bundle.rgb.as_raw());
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(source: &mut R) -> Result<u32> {
    let mut word = [0u8; 4];
    read_exact_or_truncated(source, &mut word)?;
    Ok(u32::from_le_bytes(word))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn read_trace<R: Read>(mut source: R) -> Result<TraceBundle> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut source, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(&mut source)?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let header_len = read_u32(&mut source)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or_truncated(&mut source, &mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Header(e.to_string()))?;
    header.grid.validate()?;
    if header.layers == 0 || header.heads == 0 || header.feat_dim == 0 {
        return Err(Error::Header("layers, heads and feat_dim must be >= 1".into()));
    }
    if header.rgb.h == 0 || header.rgb.w == 0 || header.rgb.h > u32::MAX as usize || header.rgb.w > u32::MAX as usize {
        return Err(Error::Header("rgb dimensions out of range".into()));
    }
    let payload_len = header.payload_len().ok_or_else(|| Error::Header("payload size overflows".into()))?;

    // Read through `take` so a corrupted header cannot force a huge allocation.
    let mut payload = Vec::new();
    source.by_ref().take(payload_len as u64).read_to_end(&mut payload)?;
    if payload.len() < payload_len {
        return Err(Error::Truncated);
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(Error::Invalid("trailing bytes after payload".into()));
    }

    let side = header.grid.token_side();
    let matrix_bytes = side * side * 4;
    let mut offset = 0;
    let mut layers = Vec::with_capacity(header.layers);
    for layer_index in 0..header.layers {
        let mut heads = Vec::with_capacity(header.heads);
        for _ in 0..header.heads {
            let values = f32s(&payload[offset..offset + matrix_bytes]);
            offset += matrix_bytes;
            heads.push(Array2::from_shape_vec((side, side), values).expect("sized"));
        }
        layers.push(LayerAttention { layer_index, heads });
    }
    let key_bytes = side * header.feat_dim * 4;
    let key_features =
        Array2::from_shape_vec((side, header.feat_dim), f32s(&payload[offset..offset + key_bytes])).expect("sized");
    offset += key_bytes;
    let cls_bytes = (side - 1) * 4;
    let cls_attention = f32s(&payload[offset..offset + cls_bytes]);
    offset += cls_bytes;
    let rgb = RgbImage::from_raw(header.rgb.w as u32, header.rgb.h as u32, payload[offset..].to_vec())
        .ok_or_else(|| Error::Header("rgb payload size mismatch".into()))?;

    TraceBundle::new(header.grid, layers, key_features, cls_attention, rgb)
}

pub fn save_trace(bundle: &TraceBundle, path: &Path) -> Result<u64> {
    let mut written = 0;
    atomic::write_atomic_with(path, |buf| {
        written = write_trace(bundle, buf)?;
        Ok(())
    })?;
    Ok(written)
}

pub fn load_trace(path: &Path) -> Result<TraceBundle> {
    let file = fs::File::open(path)?;
    read_trace(io::BufReader::new(file))
}

/// One demonstration trajectory: frames paired with the action taken at each.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub frames: Vec<TraceBundle>,
    pub actions: Vec<Vec<f64>>,
}

impl Demonstration {
    pub fn new(frames: Vec<TraceBundle>, actions: Vec<Vec<f64>>) -> Result<Self> {
        validate_actions(frames.len(), &actions)?;
        Ok(Demonstration { frames, actions })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }
}

fn validate_actions(frames: usize, actions: &[Vec<f64>]) -> Result<()> {
    if frames == 0 || frames != actions.len() {
        return Err(Error::Invalid(format!(
            "demonstration needs equal, non-zero frame and action counts ({frames} vs {})",
            actions.len()
        )));
    }
    let dim = actions[0].len();
    if actions.iter().any(|a| a.len() != dim) {
        return Err(Error::Invalid("actions have inconsistent dimensions".into()));
    }
    Ok(())
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.soft")
}

pub const ACTIONS_FILE: &str = "actions.jsonl";

/// Frame paths of a demonstration directory, in frame order.
pub fn demonstration_frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("frame_") && n.ends_with(".soft"))
        })
        .collect();
    paths.sort();
    for (i, p) in paths.iter().enumerate() {
        if p.file_name().and_then(|n| n.to_str()) != Some(frame_file_name(i).as_str()) {
            return Err(Error::Invalid(format!("{}: frame files are not numbered contiguously from 0", dir.display())));
        }
    }
    Ok(paths)
}

pub fn read_actions(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<Vec<f64>>(l).map_err(Error::from))
        .collect()
}

pub fn read_demonstration(dir: &Path) -> Result<Demonstration> {
    let frames = demonstration_frame_paths(dir)?.iter().map(|p| load_trace(p)).collect::<Result<Vec<_>>>()?;
    let actions = read_actions(&dir.join(ACTIONS_FILE))?;
    Demonstration::new(frames, actions)
}

pub fn write_demonstration(demo: &Demonstration, dir: &Path) -> Result<()> {
    validate_actions(demo.frames.len(), &demo.actions)?;
    fs::create_dir_all(dir)?;
    for (i, frame) in demo.frames.iter().enumerate() {
        save_trace(frame, &dir.join(frame_file_name(i)))?;
    }
    let mut text = String::new();
    for action in &demo.actions {
        text.push_str(&serde_json::to_string(action)?);
        text.push('\n');
    }
    atomic::write_atomic(&dir.join(ACTIONS_FILE), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn minimal_bundle() -> TraceBundle {
        let grid = PatchGrid::new(1, 1, 1).unwrap();
        let head = array![[0.5f32, 0.5], [0.25, 0.75]];
        TraceBundle::new(
            grid,
            vec![LayerAttention { layer_index: 0, heads: vec![head] }],
            array![[1.0f32], [2.0]],
            vec![0.5],
            RgbImage::from_raw(1, 1, vec![10, 20, 30]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn minimal_bundle_size_matches_formula() {
        let bundle = minimal_bundle();
        let mut buf = Vec::new();
        let n = write_trace(&bundle, &mut buf).unwrap();
        let header =
            br#"{"grid":{"rows":1,"cols":1,"patch_px":1},"layers":1,"heads":1,"feat_dim":1,"rgb":{"h":1,"w":1}}"#;
        // preamble + header + 2x2 attention + 2x1 keys + 1 cls + 3 rgb bytes
        let expected = 12 + header.len() + 4 * 4 + 2 * 4 + 4 + 3;
        assert_eq!(n as usize, expected);
        assert_eq!(buf.len(), expected);
        assert_eq!(encoded_len(&bundle), expected);
        assert_eq!(&buf[12..12 + header.len()], &header[..]);
    }

    #[test]
    fn round_trip_minimal() {
        let bundle = minimal_bundle();
        let mut buf = Vec::new();
        write_trace(&bundle, &mut buf).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), bundle);
    }

    #[test]
    fn non_stochastic_rows_rejected_before_writing() {
        let mut bundle = minimal_bundle();
        bundle.layers[0].heads[0] = array![[0.45f32, 0.45], [0.45, 0.45]];
        let mut buf = Vec::new();
        let err = write_trace(&bundle, &mut buf).unwrap_err();
        assert!(matches!(err, Error::NotStochastic { .. }));
        assert!(err.to_string().contains("attention rows not stochastic"));
        assert!(buf.is_empty());
    }

    #[test]
    fn corrupted_magic() {
        let mut buf = Vec::new();
        write_trace(&minimal_bundle(), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_trace(&buf[..]), Err(Error::BadMagic)));
    }

    #[test]
    fn wrong_version() {
        let mut buf = Vec::new();
        write_trace(&minimal_bundle(), &mut buf).unwrap();
        buf[4] = 2;
        assert!(matches!(read_trace(&buf[..]), Err(Error::VersionMismatch(2))));
    }

    #[test]
    fn truncated_by_one_byte() {
        let mut buf = Vec::new();
        write_trace(&minimal_bundle(), &mut buf).unwrap();
        buf.pop();
        assert!(matches!(read_trace(&buf[..]), Err(Error::Truncated)));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut buf = Vec::new();
        write_trace(&minimal_bundle(), &mut buf).unwrap();
        buf.push(0);
        assert!(matches!(read_trace(&buf[..]), Err(Error::Invalid(_))));
    }

    #[test]
    fn head_average_single_head_is_identity() {
        let bundle = minimal_bundle();
        let avg = head_average(&bundle.layers[0]);
        let expected = bundle.layers[0].heads[0].mapv(|v| v as f64);
        assert_eq!(avg, expected);
    }

    #[test]
    fn head_average_uniform_and_permutation() {
        let uniform = Array2::<f32>::from_elem((3, 3), 1.0 / 3.0);
        let perm = array![[0.0f32, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let layer = LayerAttention { layer_index: 0, heads: vec![uniform.clone(), perm.clone()] };
        let avg = head_average(&layer);
        for i in 0..3 {
            for j in 0..3 {
                let expected = (uniform[[i, j]] as f64 + perm[[i, j]] as f64) / 2.0;
                assert_eq!(avg[[i, j]], expected);
            }
        }
    }

    #[test]
    fn grid_centers_normalized() {
        let grid = PatchGrid::new(1, 2, 8).unwrap();
        assert_eq!(grid.center(0), (0.0, 0.0));
        assert_eq!(grid.center(1), (0.0, 1.0));
        let grid = PatchGrid::new(2, 4, 8).unwrap();
        assert_eq!(grid.center(7), (1.0 / 3.0, 1.0));
        assert!(PatchGrid::new(0, 4, 8).is_err());
    }

    #[test]
    fn demonstration_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let demo =
            Demonstration::new(vec![minimal_bundle(), minimal_bundle()], vec![vec![1.0, -2.5], vec![0.125, 3.0]])
                .unwrap();
        write_demonstration(&demo, dir.path()).unwrap();
        assert!(dir.path().join("frame_00001.soft").exists());
        assert_eq!(read_demonstration(dir.path()).unwrap(), demo);
    }

    #[test]
    fn demonstration_rejects_mismatched_lengths() {
        assert!(Demonstration::new(vec![minimal_bundle()], vec![]).is_err());
        assert!(Demonstration::new(vec![minimal_bundle(), minimal_bundle()], vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
