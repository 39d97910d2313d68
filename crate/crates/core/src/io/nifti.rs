//! NIfTI-1 reader and writer.
//!
//! Only the fields needed for voxel-space evaluation are interpreted:
//! `dim`, `pixdim`, `datatype`, `bitpix`, `vox_offset`, `scl_slope`,
//! `scl_inter` and `magic`. Orientation (qform/sform) is ignored.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{read_file, write_file, Dtype, Image, Voxels};
use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Spacing, Volume, VolumeKind};

pub const HEADER_SIZE: usize = 348;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;

fn dtype_code(dtype: Dtype) -> i16 {
    match dtype {
        Dtype::U8 => DT_UINT8,
        Dtype::I16 => DT_INT16,
        Dtype::I32 => DT_INT32,
        Dtype::F32 => DT_FLOAT32,
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn gunzip(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(bytes.len() * 4);
    MultiGzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::io(path, e))?;
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Header fields this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dims: Dims,
    pub spacing: Spacing,
    pub dtype: Dtype,
    pub vox_offset: usize,
    pub scaling: Option<(f32, f32)>,
    pub big_endian: bool,
    /// `true` for `n+1` (header and data in one file), `false` for `ni1`.
    pub single_file: bool,
}

pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader {
            offset: bytes.len(),
            reason: format!("file is {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        });
    }
    let raw_size: [u8; 4] = bytes[0..4].try_into().unwrap();
    let big_endian = if i32::from_le_bytes(raw_size) == HEADER_SIZE as i32 {
        false
    } else if i32::from_be_bytes(raw_size) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::MalformedHeader {
            offset: 0,
            reason: format!("sizeof_hdr is {}, expected 348", i32::from_le_bytes(raw_size)),
        });
    };
    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => {
            return Err(Error::MalformedHeader {
                offset: OFF_MAGIC,
                reason: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
            })
        }
    };
    let r = Reader { bytes, big_endian };

    let ndim = r.i16(OFF_DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::MalformedHeader {
            offset: OFF_DIM,
            reason: format!("dim[0] = {ndim} is outside 1..=7"),
        });
    }
    // Trailing singleton dimensions (e.g. a 4D file with one frame) are
    // still a 3D volume.
    let extra_singleton = (4..=ndim as usize).all(|k| r.i16(OFF_DIM + 2 * k) == 1);
    if ndim < 3 || !extra_singleton {
        return Err(Error::DimensionCount {
            found: ndim,
            offset: OFF_DIM,
        });
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let off = OFF_DIM + 2 * (a + 1);
        let v = r.i16(off);
        if v <= 0 {
            return Err(Error::MalformedHeader {
                offset: off,
                reason: format!("dim[{}] = {v} must be positive", a + 1),
            });
        }
        *d = v as usize;
    }

    let code = r.i16(OFF_DATATYPE);
    let dtype = match code {
        DT_UINT8 => Dtype::U8,
        DT_INT16 => Dtype::I16,
        DT_INT32 => Dtype::I32,
        DT_FLOAT32 => Dtype::F32,
        _ => {
            return Err(Error::UnsupportedDatatype {
                code,
                offset: OFF_DATATYPE,
            })
        }
    };
    let bitpix = r.i16(OFF_BITPIX);
    if bitpix as usize != dtype.size() * 8 {
        return Err(Error::MalformedHeader {
            offset: OFF_BITPIX,
            reason: format!("bitpix {bitpix} disagrees with datatype {dtype}"),
        });
    }

    let mut spacing = [0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let off = OFF_PIXDIM + 4 * (a + 1);
        let v = r.f32(off).abs();
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::MalformedHeader {
                offset: off,
                reason: format!("pixdim[{}] = {v} must be positive", a + 1),
            });
        }
        *s = v as f64;
    }

    let vox = r.f32(OFF_VOX_OFFSET);
    if !(vox.is_finite() && vox >= 0.0) || (single_file && (vox as usize) < HEADER_SIZE) {
        return Err(Error::MalformedHeader {
            offset: OFF_VOX_OFFSET,
            reason: format!("vox_offset {vox} is invalid"),
        });
    }

    let slope = r.f32(OFF_SCL_SLOPE);
    let inter = r.f32(OFF_SCL_INTER);
    let scaling = if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        Some((slope, if inter.is_finite() { inter } else { 0.0 }))
    } else {
        None
    };

    Ok(Header {
        dims: Dims(dims),
        spacing: Spacing(spacing),
        dtype,
        vox_offset: vox as usize,
        scaling,
        big_endian,
        single_file,
    })
}

fn decode_payload(header: &Header, bytes: &[u8], start: usize) -> Result<Voxels> {
    let expected = header.dims.len() * header.dtype.size();
    let available = bytes.len().saturating_sub(start);
    if available < expected {
        return Err(Error::TruncatedPayload {
            offset: start,
            expected,
            found: available,
        });
    }
    Ok(Voxels::decode(
        header.dtype,
        &bytes[start..start + expected],
        header.big_endian,
    ))
}

/// Decodes an in-memory single-file NIfTI (gzip or plain).
pub fn parse_nifti(bytes: &[u8]) -> Result<Image> {
    let owned;
    let bytes = if is_gzip(bytes) {
        owned = gunzip(bytes, Path::new("<memory>"))?;
        &owned[..]
    } else {
        bytes
    };
    let header = parse_header(bytes)?;
    if !header.single_file {
        return Err(Error::MalformedHeader {
            offset: OFF_MAGIC,
            reason: "ni1 header has no inline payload".into(),
        });
    }
    let voxels = decode_payload(&header, bytes, header.vox_offset)?;
    Ok(Image {
        dims: header.dims,
        spacing: header.spacing,
        voxels,
        scaling: header.scaling,
    })
}

fn companion_image(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else {
        path.with_extension("img")
    }
}

/// Reads a `.nii`, `.nii.gz`, or `.hdr`/`.img` pair.
pub fn read_nifti(path: &Path) -> Result<Image> {
    let raw = read_file(path)?;
    let bytes = if is_gzip(&raw) {
        gunzip(&raw, path)?
    } else {
        raw
    };
    let header = parse_header(&bytes)?;
    let voxels = if header.single_file {
        decode_payload(&header, &bytes, header.vox_offset)?
    } else {
        let img_path = companion_image(path);
        let raw = read_file(&img_path)?;
        let data = if is_gzip(&raw) {
            gunzip(&raw, &img_path)?
        } else {
            raw
        };
        decode_payload(&header, &data, header.vox_offset)?
    };
    Ok(Image {
        dims: header.dims,
        spacing: header.spacing,
        voxels,
        scaling: header.scaling,
    })
}

pub fn load_nifti(path: &Path, kind: VolumeKind) -> Result<Volume> {
    read_nifti(path)?.into_volume(kind)
}

pub fn load_nifti_labels(path: &Path) -> Result<LabelMap> {
    read_nifti(path)?.into_label_map()
}

/// Encodes a single-file little-endian NIfTI-1 image.
pub fn encode_nifti(image: &Image) -> Result<Vec<u8>> {
    for (a, d) in image.dims.0.iter().enumerate() {
        if *d > i16::MAX as usize {
            return Err(Error::InvalidVolume(format!(
                "axis {a} extent {d} exceeds the NIfTI-1 limit"
            )));
        }
    }
    let vox_offset = HEADER_SIZE + 4;
    let mut h = vec![0u8; vox_offset];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let put16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    let dim = [3, image.dims.0[0], image.dims.0[1], image.dims.0[2], 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        put16(&mut h, OFF_DIM + 2 * k, *d as i16);
    }
    let dtype = image.dtype();
    put16(&mut h, OFF_DATATYPE, dtype_code(dtype));
    put16(&mut h, OFF_BITPIX, (dtype.size() * 8) as i16);
    let pixdim = [
        1.0,
        image.spacing.0[0] as f32,
        image.spacing.0[1] as f32,
        image.spacing.0[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (k, p) in pixdim.iter().enumerate() {
        put32(&mut h, OFF_PIXDIM + 4 * k, *p);
    }
    put32(&mut h, OFF_VOX_OFFSET, vox_offset as f32);
    let (slope, inter) = image.scaling.unwrap_or((1.0, 0.0));
    put32(&mut h, OFF_SCL_SLOPE, slope);
    put32(&mut h, OFF_SCL_INTER, inter);
    // NIFTI_UNITS_MM | NIFTI_UNITS_SEC
    h[OFF_XYZT_UNITS] = 2 | 8;
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
    h.extend_from_slice(&image.voxels.to_le_bytes());
    Ok(h)
}

/// Writes a single-file NIfTI-1; gzip-compressed when the name ends in `.gz`.
pub fn save_nifti(image: &Image, path: &Path) -> Result<()> {
    let bytes = encode_nifti(image)?;
    if path.to_string_lossy().ends_with(".gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        let gz = enc.finish().map_err(|e| Error::io(path, e))?;
        write_file(path, &gz)
    } else {
        write_file(path, &bytes)
    }
}
