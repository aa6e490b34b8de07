//! Dataset ingestion (IDX, PGM/PPM directories) and the `DMFA` binary
//! container used for tensors, models and checkpoints.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "DMFA" | u32 version (=1) | u32 header length | JSON header | f32 payload
//! ```
//!
//! The JSON header lists every tensor (`role`, `shape`, `dtype = "f32"`,
//! `byte_order = "little"`) in payload order, plus a free-form `meta` object.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"DMFA";
pub const CONTAINER_VERSION: u32 = 1;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// `(channels, height, width)` of an image; samples are stored flat in
/// channel-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// A set of images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Vec<f32>>,
    shape: ImageShape,
}

impl Dataset {
    pub fn new(samples: Vec<Vec<f32>>, shape: ImageShape) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.len() != shape.len() {
                return Err(Error::Shape(format!(
                    "sample {i} has length {}, expected {}",
                    s.len(),
                    shape.len()
                )));
            }
            if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidValue(format!(
                    "sample {i} has value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { samples, shape })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Vec<f32>] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.samples[i]
    }

    /// First `n` samples (or all of them if there are fewer).
    pub fn take(&self, n: usize) -> Self {
        Self {
            samples: self.samples.iter().take(n).cloned().collect(),
            shape: self.shape,
        }
    }

    /// Per-coordinate mean and (population) variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.shape.len();
        let count = self.count().max(1) as f64;
        let mut mean = vec![0.0f64; n];
        for s in &self.samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; n];
        for s in &self.samples {
            for ((acc, &m), &v) in var.iter_mut().zip(&mean).zip(s) {
                *acc += (v as f64 - m).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        (mean, var)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads an IDX image file (optionally gzip-compressed).
pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<Dataset> {
    let be = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("IDX header truncated".into()))
    };
    match be(0)? {
        IDX_IMAGES => {}
        IDX_LABELS => {
            return Err(Error::WrongKind(
                "IDX label file (magic 0x00000801), expected images".into(),
            ))
        }
        other => return Err(Error::Format(format!("bad IDX magic {other:#010x}"))),
    }
    let count = be(4)? as usize;
    let height = be(8)? as usize;
    let width = be(12)? as usize;
    let shape = ImageShape::new(1, height, width);
    let payload = &bytes[16..];
    let expected = count * shape.len();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let samples = if shape.is_empty() {
        vec![Vec::new(); count]
    } else {
        payload
            .chunks_exact(shape.len())
            .map(|c| c.iter().map(|&b| b as f32 / 255.0).collect())
            .collect()
    };
    Ok(Dataset { samples, shape })
}

/// Serializes a dataset back to IDX bytes (values rounded to the nearest
/// byte level). Only single-channel data can be represented.
pub fn encode_idx(data: &Dataset) -> Result<Vec<u8>> {
    let s = data.shape();
    if s.channels != 1 {
        return Err(Error::Shape(format!(
            "IDX stores single-channel images, dataset has {} channels",
            s.channels
        )));
    }
    let mut out = Vec::with_capacity(16 + data.count() * s.len());
    for v in [IDX_IMAGES, data.count() as u32, s.height as u32, s.width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for sample in data.samples() {
        out.extend(sample.iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

/// Clamps to `[0, 1]` and quantizes to a byte.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A decoded binary PGM (`P5`, 1 channel) or PPM (`P6`, 3 channels) image.
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Interleaved bytes as stored in the file.
    pub bytes: Vec<u8>,
}

pub fn parse_pnm(data: &[u8]) -> Result<Pnm> {
    let channels = match data.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PGM/PPM (P5/P6) file".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match data.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while data.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while data.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&data[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {maxval}")));
    }
    if !data.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::Format("malformed PNM header".into()));
    }
    pos += 1;
    let len = channels * width * height;
    let bytes = data
        .get(pos..pos + len)
        .ok_or_else(|| Error::Format("PNM pixel data truncated".into()))?;
    let bytes = if maxval == 255 {
        bytes.to_vec()
    } else {
        bytes
            .iter()
            .map(|&b| ((b as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    };
    Ok(Pnm {
        channels,
        height,
        width,
        bytes,
    })
}

/// Writes channel-major `values` (in `[0, 1]`, clamped) as PGM or PPM.
pub fn write_pnm(path: impl AsRef<Path>, shape: ImageShape, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let (magic, c) = match shape.channels {
        1 => ("P5", 1),
        3 => ("P6", 3),
        other => {
            return Err(Error::Shape(format!(
                "PGM/PPM output needs 1 or 3 channels, got {other}"
            )))
        }
    };
    if values.len() != shape.len() {
        return Err(Error::Shape(format!(
            "image buffer has {} values, shape needs {}",
            values.len(),
            shape.len()
        )));
    }
    let hw = shape.pixels();
    let mut out = format!("{magic}\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    for p in 0..hw {
        for ch in 0..c {
            out.push(to_byte(values[ch * hw + p]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads every `.pgm`/`.ppm`/`.pnm` file in `dir`, in lexicographic filename
/// order. All images must share one channel count and be exactly
/// `height × width`.
pub fn load_image_dir(dir: impl AsRef<Path>, height: usize, width: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let mut channels = None;
    let mut samples = Vec::with_capacity(files.len());
    for path in &files {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = parse_pnm(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match channels {
            None => channels = Some(img.channels),
            Some(c) if c != img.channels => {
                return Err(Error::Format(format!(
                    "{} has {} channels but earlier images have {c}",
                    path.display(),
                    img.channels
                )))
            }
            _ => {}
        }
        if img.height != height || img.width != width {
            return Err(Error::Shape(format!(
                "{} is {}x{}, expected {height}x{width}",
                path.display(),
                img.height,
                img.width
            )));
        }
        let hw = height * width;
        let mut v = vec![0.0f32; img.channels * hw];
        for p in 0..hw {
            for ch in 0..img.channels {
                v[ch * hw + p] = img.bytes[p * img.channels + ch] as f32 / 255.0;
            }
        }
        samples.push(v);
    }
    let shape = ImageShape::new(channels.unwrap_or(1), height, width);
    Ok(Dataset { samples, shape })
}

/// One named tensor in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub role: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(role: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            role: role.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub tensors: Vec<Tensor>,
    pub meta: Value,
}

impl Container {
    pub fn new(tensors: Vec<Tensor>, meta: Value) -> Self {
        Self { tensors, meta }
    }

    pub fn get(&self, role: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.role == role)
            .ok_or_else(|| Error::Format(format!("container has no tensor with role {role:?}")))
    }

    pub fn take(&mut self, role: &str) -> Result<Tensor> {
        let i = self
            .tensors
            .iter()
            .position(|t| t.role == role)
            .ok_or_else(|| Error::Format(format!("container has no tensor with role {role:?}")))?;
        Ok(self.tensors.remove(i))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    role: String,
    shape: Vec<usize>,
    dtype: String,
    byte_order: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorHeader>,
    #[serde(default)]
    meta: Value,
}

pub fn encode_container(c: &Container) -> Result<Vec<u8>> {
    let mut headers = Vec::with_capacity(c.tensors.len());
    let mut payload_len = 0usize;
    for t in &c.tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Format(format!(
                "tensor {:?} has shape {:?} ({expected} values) but {} values",
                t.role,
                t.shape,
                t.data.len()
            )));
        }
        if let Some(v) = t.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "tensor {:?} contains non-finite value {v}",
                t.role
            )));
        }
        payload_len += 4 * expected;
        headers.push(TensorHeader {
            role: t.role.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            byte_order: "little".into(),
        });
    }
    let header = serde_json::to_vec(&Header {
        tensors: headers,
        meta: c.meta.clone(),
    })
    .map_err(|e| Error::Format(format!("cannot encode container header: {e}")))?;
    let mut out = Vec::with_capacity(12 + header.len() + payload_len);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &c.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 12 {
        return Err(Error::Format("container shorter than its fixed header".into()));
    }
    if &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::Format(format!(
            "bad container magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {CONTAINER_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Format("container header truncated".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Format(format!("container header is not valid JSON: {e}")))?;
    let mut payload = &bytes[12 + header_len..];
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != 4 * total {
        return Err(Error::Format(format!(
            "container payload has {} bytes, header implies {}",
            payload.len(),
            4 * total
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        if t.dtype != "f32" || t.byte_order != "little" {
            return Err(Error::Format(format!(
                "tensor {:?}: unsupported dtype/byte order {}/{}",
                t.role, t.dtype, t.byte_order
            )));
        }
        let len: usize = t.shape.iter().product();
        let (head, rest) = payload.split_at(4 * len);
        payload = rest;
        let data = head
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor {
            role: t.role,
            shape: t.shape,
            data,
        });
    }
    Ok(Container {
        tensors,
        meta: header.meta,
    })
}

pub fn save_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(c)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}
