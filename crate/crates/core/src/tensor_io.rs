//! Label maps (8-bit PNG) and dense tensors (the AFT1 container).
//!
//! AFT1 layout, all integers little-endian:
//!
//! | bytes   | content                                              |
//! |---------|------------------------------------------------------|
//! | 0..4    | magic `41 46 54 31` (`"AFT1"`)                       |
//! | 4       | dtype code: 1 = float32, 2 = uint8                   |
//! | 5       | ndim, 1..=4                                          |
//! | 6..16   | zero                                                 |
//! | 16..32  | four `u32` extents; unused trailing extents are zero |
//! | 32..    | row-major payload                                    |
//!
//! Readers reject anything after the payload.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"AFT1";
pub const HEADER_LEN: usize = 16;
pub const DIMS_LEN: usize = 16;
pub const MAX_DIMS: usize = 4;
pub const DEFAULT_IGNORE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

/// A row-major tensor with one to four axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(Error::MalformedHeader(format!(
                "ndim must be 1..=4, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::DimOverflow(
                dims.iter().map(|&d| d.min(u32::MAX as usize) as u32).collect(),
            ));
        }
        let n = element_count(&dims)
            .ok_or_else(|| Error::DimOverflow(dims.iter().map(|&d| d as u32).collect()))?;
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} imply {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(dims, TensorData::F32(data))
    }

    pub fn from_u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Tensor::new(dims, TensorData::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Serializes to AFT1. Fails on NaN or infinite float elements.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let TensorData::F32(v) = &self.data {
            if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(pos));
            }
        }
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + DIMS_LEN + self.len() * dtype.size());
        out.extend_from_slice(&MAGIC);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        out.resize(HEADER_LEN, 0);
        for axis in 0..MAX_DIMS {
            let extent = self.dims.get(axis).copied().unwrap_or(0) as u32;
            out.extend_from_slice(&extent.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN + DIMS_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN + DIMS_LEN,
                found: bytes.len(),
            });
        }
        let dtype = DType::from_code(bytes[4])
            .ok_or_else(|| Error::MalformedHeader(format!("unknown dtype code {}", bytes[4])))?;
        let ndim = bytes[5] as usize;
        if !(1..=MAX_DIMS).contains(&ndim) {
            return Err(Error::MalformedHeader(format!("ndim {ndim} outside 1..=4")));
        }
        if bytes[6..HEADER_LEN].iter().any(|&b| b != 0) {
            return Err(Error::MalformedHeader("nonzero header padding".into()));
        }
        let extents: Vec<u32> = bytes[HEADER_LEN..HEADER_LEN + DIMS_LEN]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if extents[ndim..].iter().any(|&e| e != 0) {
            return Err(Error::MalformedHeader("nonzero unused extent".into()));
        }
        let dims: Vec<usize> = extents[..ndim].iter().map(|&e| e as usize).collect();
        let payload_len = element_count(&dims)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::DimOverflow(extents[..ndim].to_vec()))?;
        let payload = &bytes[HEADER_LEN + DIMS_LEN..];
        if payload.len() < payload_len {
            return Err(Error::Truncated {
                expected: payload_len,
                found: payload.len(),
            });
        }
        if payload.len() > payload_len {
            return Err(Error::TrailingBytes(payload.len() - payload_len));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Tensor { dims, data })
    }
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = t.to_bytes()?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Semantic ground truth: one class index per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
    ignore_value: u8,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::with_ignore(height, width, data, DEFAULT_IGNORE)
    }

    pub fn with_ignore(height: usize, width: usize, data: Vec<u8>, ignore_value: u8) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "label map must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
            ignore_value,
        })
    }

    /// A label map filled with a single class.
    pub fn filled(height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn ignore_value(&self) -> u8 {
        self.ignore_value
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn is_ignored(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == self.ignore_value
    }

    /// Largest non-ignored class index, if any pixel is labeled.
    pub fn max_class(&self) -> Option<u8> {
        self.data
            .iter()
            .copied()
            .filter(|&v| v != self.ignore_value)
            .max()
    }

    /// Checks that every labeled pixel is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.max_class() {
            Some(m) if m as usize >= num_classes => Err(Error::InvalidArgument(format!(
                "class index {m} out of range for {num_classes} classes"
            ))),
            _ => Ok(()),
        }
    }
}

/// Reads an 8-bit grayscale or paletted PNG. Palette indices are taken as
/// class indices; the palette colors themselves are ignored.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    match color {
        png::ColorType::Grayscale | png::ColorType::Indexed => {}
        other => {
            return Err(Error::UnsupportedEncoding(format!(
                "{}: color type {other:?} is neither single-channel nor paletted",
                path.display()
            )))
        }
    }
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: bit depth {depth:?}, expected 8",
            path.display()
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(stride).take(h) {
        data.extend_from_slice(&row[..w]);
    }
    LabelMap::new(h, w, data)
}

/// Writes an 8-bit grayscale PNG holding the raw class indices.
pub fn save_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut bytes, labels.width as u32, labels.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&labels.data)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    write_atomic(path, &bytes)
}
