//! Single-file NIfTI-1 reader/writer for the subset this pipeline needs:
//! magic `n+1`, datatypes uint8/int16/float32, up to 4 dimensions with a
//! singleton 4th, both endiannesses on read. The writer always emits
//! little-endian float32 with scl_slope 0 and a 352-byte data offset, and is
//! byte-stable for identical input.

use std::path::Path;

use super::{LabelVolume, Volume};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

const OFF_SIZEOF_HDR: usize = 0;
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_QOFFSET_X: usize = 268;
const OFF_MAGIC: usize = 344;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl<'a> Reader<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn f32_at(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

#[derive(Debug)]
struct Parsed {
    width: usize,
    height: usize,
    depth: usize,
    spacing: [f32; 3],
    origin: [f32; 3],
    values: Vec<f32>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Parse {
            field: "sizeof_hdr",
            offset: OFF_SIZEOF_HDR,
            detail: format!("file holds only {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        });
    }
    // sizeof_hdr doubles as the endianness probe
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let endian = if le == HEADER_SIZE as i32 {
        Endian::Little
    } else if be == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::Parse {
            field: "sizeof_hdr",
            offset: OFF_SIZEOF_HDR,
            detail: format!("expected 348 in either byte order, got {le} (LE) / {be} (BE)"),
        });
    };
    let r = Reader { bytes, endian };

    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::Parse {
            field: "magic",
            offset: OFF_MAGIC,
            detail: format!("expected \"n+1\\0\", got {magic:?}"),
        });
    }

    let ndim = r.i16_at(OFF_DIM);
    if !(1..=4).contains(&ndim) {
        return Err(Error::Parse {
            field: "dim",
            offset: OFF_DIM,
            detail: format!("dim[0] = {ndim}, supported range is 1..=4"),
        });
    }
    let mut extents = [1usize; 4];
    for i in 0..ndim as usize {
        let e = r.i16_at(OFF_DIM + 2 * (i + 1));
        if e < 1 {
            return Err(Error::Parse {
                field: "dim",
                offset: OFF_DIM + 2 * (i + 1),
                detail: format!("dim[{}] = {e}, must be >= 1", i + 1),
            });
        }
        extents[i] = e as usize;
    }
    if ndim == 4 && extents[3] != 1 {
        return Err(Error::Parse {
            field: "dim",
            offset: OFF_DIM + 8,
            detail: format!("dim[4] = {} but only singleton 4th dimensions are supported", extents[3]),
        });
    }

    let datatype = r.i16_at(OFF_DATATYPE);
    let bytes_per = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::Parse {
                field: "datatype",
                offset: OFF_DATATYPE,
                detail: format!("unsupported datatype code {other} (supported: 2, 4, 16)"),
            })
        }
    };
    let bitpix = r.i16_at(OFF_BITPIX);
    if bitpix as usize != bytes_per * 8 {
        return Err(Error::Parse {
            field: "bitpix",
            offset: OFF_BITPIX,
            detail: format!("bitpix {bitpix} does not match datatype {datatype}"),
        });
    }

    let mut spacing = [1.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let v = r.f32_at(OFF_PIXDIM + 4 * (i + 1));
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Parse {
                field: "pixdim",
                offset: OFF_PIXDIM + 4 * (i + 1),
                detail: format!("pixdim[{}] = {v}, must be positive and finite", i + 1),
            });
        }
        *s = v;
    }

    let vox_offset = r.f32_at(OFF_VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 && vox_offset.fract() == 0.0) {
        return Err(Error::Parse {
            field: "vox_offset",
            offset: OFF_VOX_OFFSET,
            detail: format!("vox_offset {vox_offset} is not a whole number >= 348"),
        });
    }
    let vox_offset = vox_offset as usize;

    let slope = r.f32_at(OFF_SCL_SLOPE);
    let inter = r.f32_at(OFF_SCL_INTER);
    let origin = [
        r.f32_at(OFF_QOFFSET_X),
        r.f32_at(OFF_QOFFSET_X + 4),
        r.f32_at(OFF_QOFFSET_X + 8),
    ];

    let numel: usize = extents.iter().product();
    let need = vox_offset + numel * bytes_per;
    if bytes.len() < need {
        return Err(Error::Parse {
            field: "data",
            offset: vox_offset,
            detail: format!("truncated payload: need {need} bytes, file has {}", bytes.len()),
        });
    }

    let raw = &bytes[vox_offset..need];
    let mut values = Vec::with_capacity(numel);
    match datatype {
        DT_UINT8 => values.extend(raw.iter().map(|&b| b as f32)),
        DT_INT16 => {
            for ch in raw.chunks_exact(2) {
                let v = match endian {
                    Endian::Little => i16::from_le_bytes([ch[0], ch[1]]),
                    Endian::Big => i16::from_be_bytes([ch[0], ch[1]]),
                };
                values.push(v as f32);
            }
        }
        DT_FLOAT32 => {
            for ch in raw.chunks_exact(4) {
                let b: [u8; 4] = ch.try_into().unwrap();
                let v = match endian {
                    Endian::Little => f32::from_le_bytes(b),
                    Endian::Big => f32::from_be_bytes(b),
                };
                values.push(v);
            }
        }
        _ => unreachable!(),
    }
    // scl_slope == 0 means "no scaling" per the format
    if slope != 0.0 {
        for v in &mut values {
            *v = slope * *v + inter;
        }
    }

    Ok(Parsed {
        width: extents[0],
        height: extents[1],
        depth: extents[2],
        spacing,
        origin,
        values,
    })
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path)?;
    let p = parse(&bytes)?;
    let mut vol = Volume::new(p.width, p.height, p.depth, p.values, p.spacing)?;
    vol.origin = p.origin;
    Ok(vol)
}

/// Read a volume and reinterpret it as integer labels. Values must be whole
/// numbers inside `0..num_classes`.
pub fn read_label_volume(path: &Path, num_classes: usize) -> Result<LabelVolume> {
    let bytes = std::fs::read(path)?;
    let p = parse(&bytes)?;
    let mut labels = Vec::with_capacity(p.values.len());
    for &v in &p.values {
        let r = v.round();
        if (v - r).abs() > 1e-4 || r < 0.0 || (r as usize) >= num_classes {
            return Err(Error::Label(format!(
                "voxel value {v} is not a label in 0..{num_classes}"
            )));
        }
        labels.push(r as u8);
    }
    let mut vol = LabelVolume::new(p.width, p.height, p.depth, labels, num_classes, p.spacing)?;
    vol.origin = p.origin;
    Ok(vol)
}

fn write_header(
    out: &mut Vec<u8>,
    width: usize,
    height: usize,
    depth: usize,
    spacing: [f32; 3],
    origin: [f32; 3],
) {
    out.resize(VOX_OFFSET, 0);
    out[OFF_SIZEOF_HDR..OFF_SIZEOF_HDR + 4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [3, width as i16, height as i16, depth as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        out[OFF_DIM + 2 * i..OFF_DIM + 2 * i + 2].copy_from_slice(&d.to_le_bytes());
    }
    out[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    out[OFF_BITPIX..OFF_BITPIX + 2].copy_from_slice(&32i16.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        out[OFF_PIXDIM + 4 * i..OFF_PIXDIM + 4 * i + 4].copy_from_slice(&p.to_le_bytes());
    }
    out[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4]
        .copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    out[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&0.0f32.to_le_bytes());
    out[OFF_SCL_INTER..OFF_SCL_INTER + 4].copy_from_slice(&0.0f32.to_le_bytes());
    for (i, o) in origin.iter().enumerate() {
        out[OFF_QOFFSET_X + 4 * i..OFF_QOFFSET_X + 4 * i + 4].copy_from_slice(&o.to_le_bytes());
    }
    out[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let mut out = Vec::with_capacity(VOX_OFFSET + vol.numel() * 4);
    write_header(&mut out, vol.width, vol.height, vol.depth, vol.spacing, vol.origin);
    for &v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_label_volume(path: &Path, vol: &LabelVolume) -> Result<()> {
    let mut out = Vec::with_capacity(VOX_OFFSET + vol.labels.len() * 4);
    write_header(&mut out, vol.width, vol.height, vol.depth, vol.spacing, vol.origin);
    for &v in &vol.labels {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}
