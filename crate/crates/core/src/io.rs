//! Minimal MetaImage (`.mhd` + `.raw`) reader and writer.
//!
//! Only the subset needed here is supported: 2 or 3 dimensions, no
//! compression, little-endian `MET_FLOAT` or `MET_UCHAR` data in a separate
//! file named by `ElementDataFile` relative to the header.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scalar::Real;
use crate::volume::{BinaryMask, Grid, Volume};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("unsupported element type `{0}` (expected MET_FLOAT or MET_UCHAR)")]
    UnknownElementType(String),
    #[error("data file {path} missing")]
    MissingDataFile { path: PathBuf },
    #[error("data file {path} has {actual} bytes, header implies {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    UInt8,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Float32 => "MET_FLOAT",
            ElementType::UInt8 => "MET_UCHAR",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::UInt8 => 1,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn header_err(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::Header {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn write_header<T: Real>(path: &Path, grid: &Grid<T>, ty: ElementType) -> Result<(), VolumeError> {
    let ndims = if grid.dims[2] == 1 { 2 } else { 3 };
    let data_name = raw_path(path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| header_err(path, "path has no file name"))?;
    let spacing: Vec<f64> = grid.spacing[..ndims].iter().map(|s| s.as_f64()).collect();
    let origin: Vec<f64> = grid.origin[..ndims].iter().map(|s| s.as_f64()).collect();
    let dims: Vec<String> = grid.dims[..ndims].iter().map(|d| d.to_string()).collect();
    let mut text = format!(
        "ObjectType = Image\nNDims = {ndims}\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\nOffset = {}\nElementSpacing = {}\nDimSize = {}\nElementType = {}\nElementDataFile = {data_name}\n",
        fmt_vec(&origin),
        fmt_vec(&spacing),
        dims.join(" "),
        ty.tag(),
    );
    if ndims == 2 {
        // keep the slice position so 2-D volumes round-trip exactly
        text.push_str(&format!(
            "SliceSpacing = {:?}\nSliceOrigin = {:?}\n",
            grid.spacing[2].as_f64(),
            grid.origin[2].as_f64()
        ));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

struct Header {
    grid: Grid<f64>,
    ty: ElementType,
    data: PathBuf,
}

fn parse_list<V: std::str::FromStr>(path: &Path, key: &str, s: &str, n: usize) -> Result<Vec<V>, VolumeError> {
    let v: Vec<V> = s
        .split_whitespace()
        .map(|t| t.parse::<V>())
        .collect::<Result<_, _>>()
        .map_err(|_| header_err(path, format!("cannot parse {key} = {s}")))?;
    if v.len() != n {
        return Err(header_err(path, format!("{key} needs {n} entries")));
    }
    Ok(v)
}

fn read_header(path: &Path) -> Result<Header, VolumeError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| header_err(path, format!("line without `=`: {line}")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| header_err(path, format!("missing {k}")))
    };
    let ndims: usize = get("NDims")?
        .parse()
        .map_err(|_| header_err(path, "NDims is not an integer"))?;
    if !(2..=3).contains(&ndims) {
        return Err(header_err(path, format!("NDims = {ndims} unsupported")));
    }
    if fields
        .get("CompressedData")
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
    {
        return Err(header_err(path, "compressed data unsupported"));
    }
    let msb = fields
        .get("BinaryDataByteOrderMSB")
        .or_else(|| fields.get("ElementByteOrderMSB"));
    if msb.is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(header_err(path, "big-endian data unsupported"));
    }
    let ty = match get("ElementType")? {
        "MET_FLOAT" => ElementType::Float32,
        "MET_UCHAR" => ElementType::UInt8,
        other => return Err(VolumeError::UnknownElementType(other.to_string())),
    };
    let dims_v: Vec<usize> = parse_list(path, "DimSize", get("DimSize")?, ndims)?;
    let spacing_v: Vec<f64> = match fields.get("ElementSpacing").or_else(|| fields.get("ElementSize")) {
        Some(s) => parse_list(path, "ElementSpacing", s, ndims)?,
        None => vec![1.0; ndims],
    };
    let origin_v: Vec<f64> = match fields.get("Offset").or_else(|| fields.get("Origin")) {
        Some(s) => parse_list(path, "Offset", s, ndims)?,
        None => vec![0.0; ndims],
    };
    let mut dims = [1usize; 3];
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    dims[..ndims].copy_from_slice(&dims_v);
    spacing[..ndims].copy_from_slice(&spacing_v);
    origin[..ndims].copy_from_slice(&origin_v);
    if ndims == 2 {
        if let Some(s) = fields.get("SliceSpacing") {
            spacing[2] = s.parse().map_err(|_| header_err(path, "bad SliceSpacing"))?;
        }
        if let Some(s) = fields.get("SliceOrigin") {
            origin[2] = s.parse().map_err(|_| header_err(path, "bad SliceOrigin"))?;
        }
    }
    let grid = Grid::new(dims, spacing, origin).map_err(|e| header_err(path, e.to_string()))?;
    let data_name = get("ElementDataFile")?;
    if data_name == "LOCAL" {
        return Err(header_err(path, "inline data unsupported"));
    }
    let data = path.parent().unwrap_or(Path::new("")).join(data_name);
    Ok(Header { grid, ty, data })
}

fn read_raw(header: &Header) -> Result<Vec<u8>, VolumeError> {
    if !header.data.exists() {
        return Err(VolumeError::MissingDataFile {
            path: header.data.clone(),
        });
    }
    let bytes = fs::read(&header.data).map_err(|e| io_err(&header.data, e))?;
    let expected = header.grid.len() * header.ty.size();
    if bytes.len() != expected {
        return Err(VolumeError::SizeMismatch {
            path: header.data.clone(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

/// Reads any supported volume; `MET_UCHAR` data is converted to scalars.
pub fn read_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>, VolumeError> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let bytes = read_raw(&header)?;
    let data: Vec<T> = match header.ty {
        ElementType::Float32 => bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        ElementType::UInt8 => bytes.iter().map(|&b| T::lit(b as f64)).collect(),
    };
    Ok(Volume {
        grid: header.grid.cast(),
        data,
    })
}

/// Writes `volume` as `MET_FLOAT`; the data file is the header path with a `.raw` extension.
pub fn write_volume<T: Real>(volume: &Volume<T>, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    write_header(path, &volume.grid, ElementType::Float32)?;
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in &volume.data {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let raw = raw_path(path);
    fs::write(&raw, bytes).map_err(|e| io_err(&raw, e))
}

/// Writes a mask as `MET_UCHAR` with values 0/1.
pub fn write_mask<T: Real>(mask: &BinaryMask<T>, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    write_header(path, &mask.grid, ElementType::UInt8)?;
    let bytes: Vec<u8> = mask.data.iter().map(|&b| b as u8).collect();
    let raw = raw_path(path);
    fs::write(&raw, bytes).map_err(|e| io_err(&raw, e))
}

/// Reads a mask; every voxel must be 0 or 1.
pub fn read_mask<T: Real>(path: impl AsRef<Path>) -> crate::error::Result<BinaryMask<T>> {
    let v = read_volume::<T>(path)?;
    BinaryMask::from_volume(&v)
}
