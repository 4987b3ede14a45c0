//! VVOL: a little-endian voxel container.
//!
//! | bytes  | field                                   |
//! |--------|-----------------------------------------|
//! | 0..4   | magic `VVOL`                            |
//! | 4      | version, currently 1                    |
//! | 5      | dtype: 0 = intensity, 1 = label         |
//! | 6..8   | reserved, zero                          |
//! | 8..20  | `nx`, `ny`, `nz` as `u32`               |
//! | 20..   | `nx * ny * nz` voxel bytes, x fastest   |

use std::fs;
use std::path::Path;

use super::{Dims, LabelVolume, Volume};
use crate::{Error, Result};

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u8 = 1;
pub const VVOL_HEADER_LEN: usize = 20;

const DTYPE_INTENSITY: u8 = 0;
const DTYPE_LABEL: u8 = 1;

/// Either kind of volume, as selected by the dtype byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VolumeData {
    Intensity(Volume),
    Labels(LabelVolume),
}

impl VolumeData {
    pub fn dims(&self) -> Dims {
        match self {
            VolumeData::Intensity(v) => v.dims(),
            VolumeData::Labels(l) => l.dims(),
        }
    }

    pub fn into_intensity(self) -> Result<Volume> {
        match self {
            VolumeData::Intensity(v) => Ok(v),
            VolumeData::Labels(_) => Err(Error::format("dtype", "expected intensity volume, found labels")),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            VolumeData::Labels(l) => Ok(l),
            VolumeData::Intensity(_) => Err(Error::format("dtype", "expected label volume, found intensity")),
        }
    }
}

impl From<Volume> for VolumeData {
    fn from(v: Volume) -> Self {
        VolumeData::Intensity(v)
    }
}

impl From<LabelVolume> for VolumeData {
    fn from(l: LabelVolume) -> Self {
        VolumeData::Labels(l)
    }
}

/// Parses a VVOL byte stream.
pub fn decode_vvol(bytes: &[u8]) -> Result<VolumeData> {
    if bytes.len() < VVOL_HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("need {VVOL_HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != VVOL_MAGIC {
        return Err(Error::format("magic", format!("expected \"VVOL\", got {:?}", &bytes[0..4])));
    }
    if bytes[4] != VVOL_VERSION {
        return Err(Error::format("version", format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    if dtype > DTYPE_LABEL {
        return Err(Error::format("dtype", format!("unknown dtype {dtype}")));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::format("reserved", "reserved bytes must be zero"));
    }
    let dim = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(8), dim(12), dim(16));
    for (name, n) in [("nx", dims.nx), ("ny", dims.ny), ("nz", dims.nz)] {
        if n == 0 {
            return Err(Error::format("dims", format!("{name} is zero")));
        }
    }
    let len = dims
        .checked_len()
        .ok_or_else(|| Error::format("dims", "voxel count overflows"))?;
    let payload = &bytes[VVOL_HEADER_LEN..];
    if payload.len() < len {
        return Err(Error::format(
            "payload",
            format!("truncated: expected {len} bytes, got {}", payload.len()),
        ));
    }
    if payload.len() > len {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after {len}-byte payload", payload.len() - len),
        ));
    }
    let data = payload.to_vec();
    Ok(match dtype {
        DTYPE_INTENSITY => VolumeData::Intensity(Volume::new(dims, data)?),
        _ => VolumeData::Labels(LabelVolume::new(dims, data)?),
    })
}

/// Serializes a volume to VVOL bytes.
pub fn encode_vvol(v: &VolumeData) -> Vec<u8> {
    let (dims, dtype, data) = match v {
        VolumeData::Intensity(v) => (v.dims(), DTYPE_INTENSITY, v.data()),
        VolumeData::Labels(l) => (l.dims(), DTYPE_LABEL, l.data()),
    };
    let mut out = Vec::with_capacity(VVOL_HEADER_LEN + data.len());
    out.extend_from_slice(VVOL_MAGIC);
    out.push(VVOL_VERSION);
    out.push(dtype);
    out.extend_from_slice(&[0, 0]);
    for n in dims.as_array() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn load_vvol(path: impl AsRef<Path>) -> Result<VolumeData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vvol(&bytes)
}

/// Writes `v`, creating parent directories as needed.
pub fn save_vvol(v: impl Into<VolumeData>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_vvol(&v.into())).map_err(|e| Error::io(path, e))
}
