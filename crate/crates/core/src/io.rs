//! File formats: the binary tensor container, 2D raster images, keypoint CSV,
//! displacement-field sidecars and label masks.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! "BLG1" | dtype: u8 (0 = f32, 1 = f64) | rank: u8 | rank x u32 extents | payload
//! ```
//!
//! The payload is row-major. Trailing bytes after the payload are rejected.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::solver::DisplacementField;
use crate::tensor::{check_shape, DType, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"BLG1";
const PNG_MAGIC: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    check_shape(t.shape())?;
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::InvalidParameter(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * t.dtype().size_bytes());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.dtype().code());
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| Error::InvalidParameter(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(Error::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(6)?;
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let dtype = DType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(Error::MalformedHeader("rank 0".into()));
    }
    let header = 6 + 4 * rank;
    need(header)?;
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::MalformedHeader(format!("zero extent in {shape:?}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::MalformedHeader(format!("shape {shape:?} overflows")))?;
    let total = n
        .checked_mul(dtype.size_bytes())
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::MalformedHeader(format!("shape {shape:?} overflows")))?;
    need(total)?;
    if bytes.len() > total {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after payload",
            bytes.len() - total
        )));
    }
    let payload = &bytes[header..total];
    match dtype {
        DType::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new_f32(shape, data)
        }
        DType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape, data)
        }
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Channel-first image with physical spacing, values normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    tensor: Tensor,
    spacing: Vec<f64>,
    /// Encoded values that map to 0 and 1 respectively.
    value_range: (f64, f64),
}

impl Image {
    /// Wraps a `[channels, spatial...]` tensor with unit spacing and a `(0, 1)` range.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let rank = tensor.rank().saturating_sub(1);
        Image::with_spacing(tensor, vec![1.0; rank])
    }

    pub fn with_spacing(tensor: Tensor, spacing: Vec<f64>) -> Result<Self> {
        let spatial = tensor.rank().saturating_sub(1);
        if !(1..=3).contains(&spatial) {
            return Err(Error::InvalidParameter(format!(
                "image spatial rank must be 1, 2 or 3, got {spatial}"
            )));
        }
        if spacing.len() != spatial || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "spacing {spacing:?} invalid for spatial rank {spatial}"
            )));
        }
        Ok(Image {
            tensor,
            spacing,
            value_range: (0.0, 1.0),
        })
    }

    pub fn with_value_range(mut self, lo: f64, hi: f64) -> Self {
        self.value_range = (lo, hi);
        self
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.value_range
    }

    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }

    pub fn spatial_shape(&self) -> &[usize] {
        self.tensor.trailing_shape()
    }

    /// Same metadata, new pixel data.
    pub fn with_tensor(&self, tensor: Tensor) -> Result<Image> {
        if tensor.trailing_shape() != self.spatial_shape() {
            return Err(Error::shape(self.spatial_shape(), tensor.trailing_shape()));
        }
        Ok(Image {
            tensor,
            spacing: self.spacing.clone(),
            value_range: self.value_range,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FileKind {
    Tensor,
    Png,
    Pgm,
}

fn sniff(bytes: &[u8], path: &Path) -> Result<FileKind> {
    if bytes.starts_with(TENSOR_MAGIC) {
        Ok(FileKind::Tensor)
    } else if bytes.starts_with(PNG_MAGIC) {
        Ok(FileKind::Png)
    } else if bytes.starts_with(b"P5") {
        Ok(FileKind::Pgm)
    } else {
        Err(Error::UnsupportedFormat(path.to_path_buf()))
    }
}

fn kind_for_writing(path: &Path) -> FileKind {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => FileKind::Png,
        Some("pgm") => FileKind::Pgm,
        _ => FileKind::Tensor,
    }
}

/// Decodes a raster into raw channel-first samples plus the encoding maximum.
fn decode_raster(bytes: &[u8]) -> Result<(Tensor, f64)> {
    use image::DynamicImage as D;
    let img = image::load_from_memory(bytes).map_err(|e| Error::Codec(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar = |channels: usize, interleaved: Vec<f64>| {
        let n = w * h;
        let mut data = vec![0.0; channels * n];
        for (p, px) in interleaved.chunks_exact(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * n + p] = v;
            }
        }
        Tensor::new(vec![channels, h, w], data)
    };
    let conv8 = |v: Vec<u8>| v.into_iter().map(f64::from).collect::<Vec<_>>();
    let conv16 = |v: Vec<u16>| v.into_iter().map(f64::from).collect::<Vec<_>>();
    match img {
        D::ImageLuma8(b) => Ok((planar(1, conv8(b.into_raw()))?, 255.0)),
        D::ImageLumaA8(_) => Ok((planar(1, conv8(img.to_luma8().into_raw()))?, 255.0)),
        D::ImageRgb8(b) => Ok((planar(3, conv8(b.into_raw()))?, 255.0)),
        D::ImageRgba8(_) => Ok((planar(3, conv8(img.to_rgb8().into_raw()))?, 255.0)),
        D::ImageLuma16(b) => Ok((planar(1, conv16(b.into_raw()))?, 65535.0)),
        D::ImageLumaA16(_) => Ok((planar(1, conv16(img.to_luma16().into_raw()))?, 65535.0)),
        D::ImageRgb16(b) => Ok((planar(3, conv16(b.into_raw()))?, 65535.0)),
        D::ImageRgba16(_) => Ok((planar(3, conv16(img.to_rgb16().into_raw()))?, 65535.0)),
        other => Err(Error::UnsupportedBitDepth(format!("{:?}", other.color()))),
    }
}

/// Reads a PGM (P5), PNG, or tensor-format image and normalizes it to [0, 1].
///
/// Raster images map `[0, maxval]` onto `[0, 1]`. Tensor images already inside
/// `[0, 1]` are kept as is; otherwise they are min-max normalized and the
/// original range is recorded so [`write_image`] can restore it.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    match sniff(&bytes, path)? {
        FileKind::Tensor => {
            let t = decode_tensor(&bytes)?;
            let (lo, hi) = (t.min(), t.max());
            if lo >= 0.0 && hi <= 1.0 {
                Image::new(t)
            } else {
                let span = hi - lo;
                let norm = t.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
                Ok(Image::new(norm)?.with_value_range(lo, hi))
            }
        }
        FileKind::Png | FileKind::Pgm => {
            let (raw, maxval) = decode_raster(&bytes)?;
            let norm = raw.map(|v| v / maxval);
            Ok(Image::new(norm)?.with_value_range(0.0, maxval))
        }
    }
}

fn quantize(image: &Image, maxval: f64) -> Vec<f64> {
    image
        .tensor()
        .data()
        .iter()
        .map(|&v| (v * maxval).round().clamp(0.0, maxval))
        .collect()
}

/// Writes an image, inverting the normalization applied by [`read_image`].
///
/// `.pgm` and `.png` require a 2D image; PGM accepts one channel, PNG one or
/// three. Any other extension writes the tensor format.
pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let kind = kind_for_writing(path);
    if kind == FileKind::Tensor {
        let (lo, hi) = image.value_range();
        let t = image.tensor().map(|v| lo + v * (hi - lo));
        return write_tensor(&t, path);
    }
    let shape = image.spatial_shape();
    let c = image.channels();
    if shape.len() != 2 {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    let (h, w) = (shape[0], shape[1]);
    let maxval = if image.value_range().1 > 255.0 {
        65535.0
    } else {
        255.0
    };
    let q = quantize(image, maxval);
    let n = h * w;
    match (kind, c) {
        (FileKind::Pgm, 1) => {
            let mut out = Vec::with_capacity(n * 2 + 32);
            write!(out, "P5\n{w} {h}\n{}\n", maxval as u32)?;
            if maxval > 255.0 {
                q.iter()
                    .for_each(|&v| out.extend_from_slice(&(v as u16).to_be_bytes()));
            } else {
                out.extend(q.iter().map(|&v| v as u8));
            }
            fs::write(path, out)?;
            Ok(())
        }
        (FileKind::Png, 1 | 3) => {
            let color = match (c, maxval > 255.0) {
                (1, false) => image::ExtendedColorType::L8,
                (1, true) => image::ExtendedColorType::L16,
                (_, false) => image::ExtendedColorType::Rgb8,
                (_, true) => image::ExtendedColorType::Rgb16,
            };
            let mut interleaved = Vec::with_capacity(n * c * 2);
            for p in 0..n {
                for ch in 0..c {
                    let v = q[ch * n + p];
                    if maxval > 255.0 {
                        interleaved.extend_from_slice(&(v as u16).to_be_bytes());
                    } else {
                        interleaved.push(v as u8);
                    }
                }
            }
            image::save_buffer(path, &interleaved, w as u32, h as u32, color)
                .map_err(|e| Error::Codec(e.to_string()))
        }
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Paired landmark coordinates in voxel units, ordered by tensor axis.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    dim: usize,
    fixed: Vec<f64>,
    moving: Vec<f64>,
}

impl KeypointSet {
    pub fn new(dim: usize, fixed: Vec<f64>, moving: Vec<f64>) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!(
                "keypoint dimension must be 1, 2 or 3, got {dim}"
            )));
        }
        if fixed.len() != moving.len() || !fixed.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(
                "fixed and moving keypoints must have identical N x D layout".into(),
            ));
        }
        Ok(KeypointSet { dim, fixed, moving })
    }

    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let dim = pairs.first().map_or(1, |p| p.0.len());
        let mut fixed = Vec::new();
        let mut moving = Vec::new();
        for (f, m) in pairs {
            if f.len() != dim || m.len() != dim {
                return Err(Error::InvalidParameter("mixed keypoint dimensions".into()));
            }
            fixed.extend_from_slice(f);
            moving.extend_from_slice(m);
        }
        KeypointSet::new(dim, fixed, moving)
    }

    pub fn empty() -> Self {
        KeypointSet {
            dim: 0,
            fixed: Vec::new(),
            moving: Vec::new(),
        }
    }

    /// Spatial dimension; 0 for an empty set parsed from a file without rows.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fixed.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fixed(&self, i: usize) -> &[f64] {
        &self.fixed[i * self.dim..(i + 1) * self.dim]
    }

    pub fn moving(&self, i: usize) -> &[f64] {
        &self.moving[i * self.dim..(i + 1) * self.dim]
    }

    /// `moving - fixed` for pair `i`.
    pub fn displacement(&self, i: usize) -> Vec<f64> {
        self.fixed(i)
            .iter()
            .zip(self.moving(i))
            .map(|(f, m)| m - f)
            .collect()
    }

    /// Checks every coordinate lies in `[0, extent - 1]` of its axis.
    pub fn validate_extent(&self, extent: &[usize]) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        if extent.len() != self.dim {
            return Err(Error::InvalidParameter(format!(
                "{}D keypoints bound to {}D image",
                self.dim,
                extent.len()
            )));
        }
        for i in 0..self.len() {
            let inside = |p: &[f64]| {
                p.iter()
                    .zip(extent)
                    .all(|(&c, &e)| c.is_finite() && c >= 0.0 && c <= (e - 1) as f64)
            };
            if !inside(self.fixed(i)) || !inside(self.moving(i)) {
                return Err(Error::KeypointOutOfExtent {
                    index: i,
                    extent: extent.to_vec(),
                });
            }
        }
        Ok(())
    }
}

pub fn parse_keypoints(text: &str) -> Result<KeypointSet> {
    let mut cols: Option<usize> = None;
    let mut fixed = Vec::new();
    let mut moving = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let expected = *cols.get_or_insert(fields.len());
        if fields.len() != expected || !matches!(expected, 2 | 4 | 6) {
            return Err(Error::RaggedRow {
                line: line_no,
                expected: if matches!(expected, 2 | 4 | 6) { expected } else { 2 * (expected / 2).clamp(1, 3) },
                found: fields.len(),
            });
        }
        let dim = expected / 2;
        for (k, field) in fields.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::NonNumeric {
                line: line_no,
                field: field.to_string(),
            })?;
            if k < dim {
                fixed.push(v);
            } else {
                moving.push(v);
            }
        }
    }
    match cols {
        None => Ok(KeypointSet::empty()),
        Some(c) => KeypointSet::new(c / 2, fixed, moving),
    }
}

pub fn read_keypoints(path: impl AsRef<Path>) -> Result<KeypointSet> {
    parse_keypoints(&fs::read_to_string(path)?)
}

pub fn write_keypoints(kps: &KeypointSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for i in 0..kps.len() {
        let row: Vec<String> = kps
            .fixed(i)
            .iter()
            .chain(kps.moving(i))
            .map(|v| v.to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldSidecar {
    spacing: Vec<f64>,
}

/// Path of the JSON sidecar stored next to a displacement-field tensor.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_tensor(field.vectors(), path)?;
    let sidecar = FieldSidecar {
        spacing: field.spacing().to_vec(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a field tensor; spacing comes from the sidecar when present, else 1.
pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let vectors = read_tensor(path)?;
    let side = sidecar_path(path);
    let spacing = if side.exists() {
        let s: FieldSidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
        s.spacing
    } else {
        vec![1.0; vectors.rank().saturating_sub(1)]
    };
    DisplacementField::with_spacing(vectors, spacing)
}

/// Reads integer labels from a PGM/PNG (raw sample values) or a tensor file
/// (values rounded; a leading unit channel axis is dropped).
pub fn read_label_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let t = match sniff(&bytes, path)? {
        FileKind::Tensor => decode_tensor(&bytes)?,
        _ => decode_raster(&bytes)?.0,
    };
    let t = if t.rank() > 1 && t.shape()[0] == 1 {
        let shape = t.trailing_shape().to_vec();
        t.reshape(shape)?
    } else {
        t
    };
    let mut labels = Vec::with_capacity(t.len());
    for &v in t.data() {
        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
            return Err(Error::InvalidParameter(format!(
                "label value {v} is not a nonnegative integer"
            )));
        }
        labels.push(v as u32);
    }
    let spacing = vec![1.0; t.rank()];
    LabelMask::new(t.shape().to_vec(), labels, spacing)
}
