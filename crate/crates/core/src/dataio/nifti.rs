//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer for 3D
//! scalar volumes.
//!
//! NIfTI stores `i` (x) fastest, then `j` (y), then `k` (z), which is exactly
//! the in-memory `(z, y, x)` row-major layout used here, so no reordering is
//! needed beyond reading `dim[1..=3]` as `(x, y, z)`.

use super::DataIoError;
use crate::volume::{Grid3, ImageVolume, LabelVolume, Shape3, SideRanges, Spacing};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::{Compression, GzBuilder};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

#[derive(Debug, Clone, PartialEq)]
struct Header {
    shape: Shape3,
    spacing: [f64; 3],
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    big_endian: bool,
}

fn bytes_per_voxel(datatype: i16) -> Option<usize> {
    Some(match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        _ => return None,
    })
}

fn read_i16(b: &[u8], off: usize, be: bool) -> i16 {
    let a = [b[off], b[off + 1]];
    if be {
        i16::from_be_bytes(a)
    } else {
        i16::from_le_bytes(a)
    }
}

fn read_i32(b: &[u8], off: usize, be: bool) -> i32 {
    let a = [b[off], b[off + 1], b[off + 2], b[off + 3]];
    if be {
        i32::from_be_bytes(a)
    } else {
        i32::from_le_bytes(a)
    }
}

fn read_f32(b: &[u8], off: usize, be: bool) -> f32 {
    f32::from_bits(read_i32(b, off, be) as u32)
}

fn parse_header(b: &[u8]) -> Result<Header, DataIoError> {
    if b.len() < HEADER_SIZE {
        return Err(DataIoError::CorruptHeader(format!("file holds {} bytes, header needs {HEADER_SIZE}", b.len())));
    }
    let big_endian = match (read_i32(b, 0, false), read_i32(b, 0, true)) {
        (348, _) => false,
        (_, 348) => true,
        (n, _) => return Err(DataIoError::CorruptHeader(format!("sizeof_hdr is {n}, expected 348"))),
    };
    let magic = &b[344..348];
    if magic != b"n+1\0" {
        return Err(DataIoError::CorruptHeader(format!("unsupported magic {magic:?}; only single-file NIfTI-1 is read")));
    }
    let be = big_endian;
    let ndim = read_i16(b, 40, be);
    if !(3..=7).contains(&ndim) {
        return Err(DataIoError::CorruptHeader(format!("dim[0] = {ndim}, expected a 3D volume")));
    }
    let mut dims = [0usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = read_i16(b, 42 + 2 * i, be);
        if v < 1 {
            return Err(DataIoError::CorruptHeader(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..ndim as usize].iter().any(|&d| d != 1) {
        return Err(DataIoError::CorruptHeader("only 3D volumes are supported".into()));
    }
    let datatype = read_i16(b, 70, be);
    if bytes_per_voxel(datatype).is_none() {
        return Err(DataIoError::CorruptHeader(format!("unsupported datatype code {datatype}")));
    }
    let pix = |i: usize| read_f32(b, 76 + 4 * i, be) as f64;
    let spacing = [pix(3), pix(2), pix(1)];
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(DataIoError::CorruptHeader(format!("non-positive pixdim {spacing:?}")));
    }
    let vox_offset = read_f32(b, 108, be);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(DataIoError::CorruptHeader(format!("vox_offset {vox_offset}")));
    }
    Ok(Header {
        shape: Shape3::new(dims[2], dims[1], dims[0]),
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: read_f32(b, 112, be),
        scl_inter: read_f32(b, 116, be),
        big_endian,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataIoError> {
    let raw = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataIoError::FileMissing(path.to_path_buf()),
        _ => DataIoError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| DataIoError::CorruptHeader(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn payload<'a>(bytes: &'a [u8], h: &Header) -> Result<&'a [u8], DataIoError> {
    let bpv = bytes_per_voxel(h.datatype).expect("validated in parse_header");
    let need = h.shape.len() * bpv;
    bytes
        .get(h.vox_offset..h.vox_offset + need)
        .ok_or_else(|| DataIoError::CorruptHeader(format!("payload truncated: need {need} bytes after offset {}", h.vox_offset)))
}

fn decode_f64(p: &[u8], h: &Header) -> Vec<f64> {
    let be = h.big_endian;
    match h.datatype {
        DT_UINT8 => p.iter().map(|&v| v as f64).collect(),
        DT_INT16 => p.chunks_exact(2).map(|c| read_i16(c, 0, be) as f64).collect(),
        DT_UINT16 => p.chunks_exact(2).map(|c| read_i16(c, 0, be) as u16 as f64).collect(),
        DT_INT32 => p.chunks_exact(4).map(|c| read_i32(c, 0, be) as f64).collect(),
        DT_FLOAT32 => p.chunks_exact(4).map(|c| read_f32(c, 0, be) as f64).collect(),
        DT_FLOAT64 => p
            .chunks_exact(8)
            .map(|c| {
                let a: [u8; 8] = c.try_into().unwrap();
                if be {
                    f64::from_be_bytes(a)
                } else {
                    f64::from_le_bytes(a)
                }
            })
            .collect(),
        _ => unreachable!(),
    }
}

/// Loads a scalar volume as `f32`, applying `scl_slope`/`scl_inter` when set.
/// The case id is the file name without its NIfTI extension.
pub fn load_volume(path: impl AsRef<Path>) -> Result<ImageVolume, DataIoError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let h = parse_header(&bytes)?;
    let p = payload(&bytes, &h)?;
    let scaled = h.scl_slope != 0.0 && !(h.scl_slope == 1.0 && h.scl_inter == 0.0);
    let data: Vec<f32> = if h.datatype == DT_FLOAT32 && !scaled {
        p.chunks_exact(4).map(|c| read_f32(c, 0, h.big_endian)).collect()
    } else {
        let (s, i) = if scaled { (h.scl_slope as f64, h.scl_inter as f64) } else { (1.0, 0.0) };
        decode_f64(p, &h).into_iter().map(|v| (v * s + i) as f32).collect()
    };
    let bad = data.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(DataIoError::NonFiniteVoxels { count: bad });
    }
    let grid = Grid3::from_vec(h.shape, data).expect("payload sized from header");
    let spacing = Spacing::new(h.spacing[0], h.spacing[1], h.spacing[2]).map_err(|e| DataIoError::CorruptHeader(e.to_string()))?;
    Ok(ImageVolume::new(case_id_from_path(path), grid, spacing)?)
}

/// Loads an unsigned 8-bit class map. Range metadata is not stored in NIfTI;
/// callers attach it from the annotations when needed.
pub fn load_labels(path: impl AsRef<Path>) -> Result<(LabelVolume, Spacing), DataIoError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let h = parse_header(&bytes)?;
    let p = payload(&bytes, &h)?;
    let data: Vec<u8> = if h.datatype == DT_UINT8 {
        p.to_vec()
    } else {
        decode_f64(p, &h)
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(DataIoError::InvalidLabel { index: i, value: v })
                }
            })
            .collect::<Result<_, _>>()?
    };
    let grid = Grid3::from_vec(h.shape, data).expect("payload sized from header");
    let spacing = Spacing::new(h.spacing[0], h.spacing[1], h.spacing[2]).map_err(|e| DataIoError::CorruptHeader(e.to_string()))?;
    Ok((LabelVolume::new(grid, SideRanges::default())?, spacing))
}

fn header_bytes(shape: Shape3, spacing: Spacing, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[39] = 0; // dim_info
    let dims = [3i16, shape.x as i16, shape.y as i16, shape.z as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let [dz, dy, dx] = spacing.0;
    let pixdim = [1.0f32, dx as f32, dy as f32, dz as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    h[123] = 10; // xyzt_units: mm, s
    put_i16(&mut h, 254, 1); // sform_code: scanner
    let rows = [[dx as f32, 0.0, 0.0, 0.0], [0.0, dy as f32, 0.0, 0.0], [0.0, 0.0, dz as f32, 0.0]];
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * c, *v);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_file(path: &Path, header: Vec<u8>, payload: &[u8]) -> Result<(), DataIoError> {
    let fail = |e: std::io::Error| DataIoError::WriteFailure {
        path: path.to_path_buf(),
        source: e,
    };
    let gz = path.extension().is_some_and(|e| e == "gz");
    let mut bytes = header;
    bytes.extend_from_slice(payload);
    let out = if gz {
        // mtime 0 keeps repeated writes byte-identical
        let mut enc: GzEncoder<Vec<u8>> = GzBuilder::new().mtime(0).write(Vec::new(), Compression::new(6));
        enc.write_all(&bytes).map_err(fail)?;
        enc.finish().map_err(fail)?
    } else {
        bytes
    };
    fs::write(path, out).map_err(fail)
}

/// Writes a float32 NIfTI (gzip when the path ends in `.gz`).
pub fn save_volume(vol: &ImageVolume, path: impl AsRef<Path>) -> Result<(), DataIoError> {
    let payload: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path.as_ref(), header_bytes(vol.shape(), vol.spacing(), DT_FLOAT32, 32), &payload)
}

/// Writes an unsigned 8-bit NIfTI whose payload bytes are the class ids.
pub fn save_labels(labels: &LabelVolume, spacing: Spacing, path: impl AsRef<Path>) -> Result<(), DataIoError> {
    write_file(path.as_ref(), header_bytes(labels.shape(), spacing, DT_UINT8, 8), labels.data())
}

fn case_id_from_path(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}
