//! Reader and writer for the single-file NIfTI-1 subset used by the pipeline.
//!
//! Supported: little-endian `.nii` / `.nii.gz`, three spatial dimensions,
//! datatypes uint8, int16 and float32. Orientation comes from the sform when
//! `sform_code > 0` (axis-aligned only), otherwise from pixdim with a zero
//! origin. A qform-only header is refused instead of being half-honored.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{CtVolume, Geometry, Volume, VolumeKind, Voxel};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

const XFORM_SCANNER_ANAT: i16 = 1;
const UNITS_MM: u8 = 2;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Parsed subset of the header fields the loader honors.
#[derive(Clone, Debug)]
struct Header {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    srow: [[f32; 4]; 3],
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| corrupt(path, format!("gzip stream: {e}")))?;
        out
    } else {
        raw
    };
    decode(&bytes, path)
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_header(b: &[u8], path: &Path) -> Result<Header> {
    use offsets::*;
    if b.len() < HEADER_SIZE {
        return Err(corrupt(
            path,
            format!("{} bytes is shorter than a NIfTI-1 header", b.len()),
        ));
    }
    match LittleEndian::read_i32(&b[SIZEOF_HDR..]) {
        348 => {}
        _ if byteorder::BigEndian::read_i32(&b[SIZEOF_HDR..]) == 348 => {
            return Err(Error::UnsupportedFormat(
                "big-endian NIfTI files are not supported".into(),
            ))
        }
        n => {
            return Err(Error::UnsupportedFormat(format!(
                "sizeof_hdr is {n}, not a NIfTI-1 file"
            )))
        }
    }
    let magic = &b[MAGIC..MAGIC + 4];
    if magic != MAGIC_SINGLE {
        return Err(Error::UnsupportedFormat(format!(
            "magic {magic:?} (only single-file \"n+1\" NIfTI-1 is supported)"
        )));
    }

    let mut dim = [0i16; 8];
    LittleEndian::read_i16_into(&b[DIM..DIM + 16], &mut dim);
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) || dim[4..=ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::UnsupportedFormat(format!(
            "expected a 3D volume, got dim = {:?}",
            &dim[..=(ndim.clamp(0, 7) as usize)]
        )));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(corrupt(path, format!("non-positive dimension in {dim:?}")));
    }

    let datatype = LittleEndian::read_i16(&b[DATATYPE..]);
    let bitpix = LittleEndian::read_i16(&b[BITPIX..]);
    let expected_bitpix = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "datatype code {other} (supported: uint8, int16, float32)"
            )))
        }
    };
    if bitpix != expected_bitpix {
        return Err(corrupt(
            path,
            format!("bitpix {bitpix} inconsistent with datatype {datatype}"),
        ));
    }

    let mut pixdim = [0f32; 8];
    LittleEndian::read_f32_into(&b[PIXDIM..PIXDIM + 32], &mut pixdim);
    let vox_offset = LittleEndian::read_f32(&b[VOX_OFFSET..]);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(corrupt(path, format!("vox_offset {vox_offset}")));
    }

    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        LittleEndian::read_f32_into(&b[SROW_X + 16 * r..SROW_X + 16 * (r + 1)], row);
    }

    Ok(Header {
        dims: [dim[1] as usize, dim[2] as usize, dim[3] as usize],
        datatype,
        pixdim: [pixdim[1], pixdim[2], pixdim[3]],
        vox_offset: vox_offset as usize,
        scl_slope: LittleEndian::read_f32(&b[SCL_SLOPE..]),
        scl_inter: LittleEndian::read_f32(&b[SCL_INTER..]),
        qform_code: LittleEndian::read_i16(&b[QFORM_CODE..]),
        sform_code: LittleEndian::read_i16(&b[SFORM_CODE..]),
        srow,
    })
}

/// Resolved placement: positive spacing, origin, and which axes the stored
/// data runs backwards along.
fn resolve_orientation(h: &Header, path: &Path) -> Result<([f64; 3], [f64; 3], [bool; 3])> {
    if h.sform_code > 0 {
        let mut spacing = [0.0; 3];
        let mut origin = [0.0; 3];
        let mut flip = [false; 3];
        let scale = (0..3)
            .map(|a| (h.srow[a][a] as f64).abs())
            .fold(0.0f64, f64::max);
        for row in 0..3 {
            for col in 0..3 {
                let v = h.srow[row][col] as f64;
                if row != col && v.abs() > 1e-6 * scale.max(1.0) {
                    return Err(Error::UnsupportedFormat(
                        "oblique sform (non-diagonal rotation) is not supported".into(),
                    ));
                }
            }
        }
        for a in 0..3 {
            let d = h.srow[a][a] as f64;
            let offset = h.srow[a][3] as f64;
            if !(d.is_finite() && d != 0.0 && offset.is_finite()) {
                return Err(corrupt(
                    path,
                    format!("degenerate sform row {a}: {:?}", h.srow[a]),
                ));
            }
            spacing[a] = d.abs();
            if d < 0.0 {
                // Stored order runs toward decreasing world coordinates: the
                // last stored voxel becomes index 0 after the flip.
                flip[a] = true;
                origin[a] = offset + d * (h.dims[a] as f64 - 1.0);
            } else {
                origin[a] = offset;
            }
        }
        Ok((spacing, origin, flip))
    } else if h.qform_code > 0 {
        Err(Error::UnsupportedFormat(
            "qform-only orientation is not supported; provide an sform (sform_code > 0)".into(),
        ))
    } else {
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            let s = h.pixdim[a] as f64;
            if !(s.is_finite() && s > 0.0) {
                return Err(corrupt(path, format!("pixdim[{}] = {s}", a + 1)));
            }
            spacing[a] = s;
        }
        Ok((spacing, [0.0; 3], [false; 3]))
    }
}

fn decode(b: &[u8], path: &Path) -> Result<CtVolume> {
    let h = parse_header(b, path)?;
    let (spacing, origin, flip) = resolve_orientation(&h, path)?;
    let geometry = Geometry::new(h.dims, spacing, origin)?;
    let n = geometry.voxel_count();
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    };
    let needed = n
        .checked_mul(width)
        .and_then(|len| len.checked_add(h.vox_offset))
        .ok_or_else(|| corrupt(path, "voxel data size overflows"))?;
    if b.len() < needed {
        return Err(corrupt(
            path,
            format!("truncated: need {needed} bytes, file has {}", b.len()),
        ));
    }
    let payload = &b[h.vox_offset..needed];

    let scale = h.scl_slope != 0.0 && h.scl_slope.is_finite();
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);
    let convert = |raw: f64| -> f32 {
        if scale {
            (raw * slope + inter) as f32
        } else {
            raw as f32
        }
    };
    let stored: Vec<f32> = match h.datatype {
        DT_UINT8 => payload.iter().map(|&v| convert(v as f64)).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| convert(LittleEndian::read_i16(c) as f64))
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| convert(LittleEndian::read_f32(c) as f64))
            .collect(),
    };

    let data = if flip.iter().any(|&f| f) {
        let [nx, ny, nz] = h.dims;
        let mut out = vec![0f32; n];
        for k in 0..nz {
            let sk = if flip[2] { nz - 1 - k } else { k };
            for j in 0..ny {
                let sj = if flip[1] { ny - 1 - j } else { j };
                for i in 0..nx {
                    let si = if flip[0] { nx - 1 - i } else { i };
                    out[geometry.linear_index(i, j, k)] = stored[geometry.linear_index(si, sj, sk)];
                }
            }
        }
        out
    } else {
        stored
    };
    Volume::new(geometry, data)
}

/// Writes a volume; masks as uint8, instance labels as int16, intensities as
/// float32. A `.gz` extension selects gzip compression.
pub fn save_volume<T: Voxel>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v)?;
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let result = if gz {
        let mut enc = GzEncoder::new(&mut writer, Compression::fast());
        enc.write_all(&bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        writer.write_all(&bytes)
    };
    result
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

fn encode<T: Voxel>(v: &Volume<T>) -> Result<Vec<u8>> {
    use offsets::*;
    let (datatype, width): (i16, usize) = match T::KIND {
        VolumeKind::BinaryMask => (DT_UINT8, 1),
        VolumeKind::InstanceLabels => (DT_INT16, 2),
        VolumeKind::Intensity => (DT_FLOAT32, 4),
    };
    if T::KIND == VolumeKind::InstanceLabels {
        if let Some(max) = v.data().iter().map(|x| x.to_f64()).reduce(f64::max) {
            if max > i16::MAX as f64 {
                return Err(Error::Range(format!(
                    "label {max} exceeds the int16 limit of {}",
                    i16::MAX
                )));
            }
        }
    }

    let g = v.geometry();
    let dims = g.dims();
    for &d in &dims {
        if d > i16::MAX as usize {
            return Err(Error::Range(format!(
                "dimension {d} exceeds the NIfTI-1 limit"
            )));
        }
    }
    let mut out = vec![0u8; DATA_OFFSET + v.data().len() * width];
    let h = &mut out[..DATA_OFFSET];
    LittleEndian::write_i32(&mut h[SIZEOF_HDR..], HEADER_SIZE as i32);
    let dim: [i16; 8] = [
        3,
        dims[0] as i16,
        dims[1] as i16,
        dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    LittleEndian::write_i16_into(&dim, &mut h[DIM..DIM + 16]);
    LittleEndian::write_i16(&mut h[DATATYPE..], datatype);
    LittleEndian::write_i16(&mut h[BITPIX..], (width * 8) as i16);
    let sp = g.spacing();
    let pixdim: [f32; 8] = [
        1.0,
        sp[0] as f32,
        sp[1] as f32,
        sp[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    LittleEndian::write_f32_into(&pixdim, &mut h[PIXDIM..PIXDIM + 32]);
    LittleEndian::write_f32(&mut h[VOX_OFFSET..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[SCL_INTER..], 0.0);
    h[XYZT_UNITS] = UNITS_MM;
    let descrip = b"lesiontrack";
    h[DESCRIP..DESCRIP + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut h[SFORM_CODE..], XFORM_SCANNER_ANAT);
    let o = g.origin();
    for a in 0..3 {
        let mut row = [0f32; 4];
        row[a] = sp[a] as f32;
        row[3] = o[a] as f32;
        LittleEndian::write_f32_into(&row, &mut h[SROW_X + 16 * a..SROW_X + 16 * (a + 1)]);
    }
    h[MAGIC..MAGIC + 4].copy_from_slice(MAGIC_SINGLE);

    let body = &mut out[DATA_OFFSET..];
    match T::KIND {
        VolumeKind::BinaryMask => {
            for (dst, x) in body.iter_mut().zip(v.data()) {
                *dst = x.to_f64() as u8;
            }
        }
        VolumeKind::InstanceLabels => {
            for (dst, x) in body.chunks_exact_mut(2).zip(v.data()) {
                LittleEndian::write_i16(dst, x.to_f64() as i16);
            }
        }
        VolumeKind::Intensity => {
            for (dst, x) in body.chunks_exact_mut(4).zip(v.data()) {
                LittleEndian::write_f32(dst, x.to_f64() as f32);
            }
        }
    }
    Ok(out)
}
