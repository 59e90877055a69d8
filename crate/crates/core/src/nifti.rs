//! NIfTI-1 single-file reader/writer.
//!
//! Only the float32, little-endian, three-dimensional subset is handled.
//! Anything else is rejected rather than converted.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, SpatialTransform, Volume3D};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";
pub const DT_FLOAT32: i16 = 16;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn put_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut [u8], off: usize, v: i32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parses an in-memory `.nii` image.
pub fn decode(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "file of {} bytes is shorter than the {HEADER_SIZE}-byte header",
            bytes.len()
        )));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        return Err(Error::Format(format!(
            "sizeof_hdr is {sizeof_hdr}, expected 348"
        )));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"n+1\\0\"",
            &bytes[344..348]
        )));
    }

    let ndim = i16_at(bytes, 40);
    if ndim != 3 {
        return Err(Error::Unsupported(format!(
            "dim[0] = {ndim}, only 3D volumes are supported"
        )));
    }
    let mut extent = [0usize; 3];
    for (axis, e) in extent.iter_mut().enumerate() {
        let d = i16_at(bytes, 42 + 2 * axis);
        if d <= 0 {
            return Err(Error::Format(format!(
                "dim[{}] = {d} is not positive",
                axis + 1
            )));
        }
        *e = d as usize;
    }
    let dims = Dims::new(extent[0], extent[1], extent[2]);

    let datatype = i16_at(bytes, 70);
    if datatype != DT_FLOAT32 {
        return Err(Error::Unsupported(format!(
            "datatype code {datatype}, only float32 (16) is supported"
        )));
    }
    let bitpix = i16_at(bytes, 72);
    if bitpix != 32 {
        return Err(Error::Format(format!(
            "bitpix {bitpix} inconsistent with float32"
        )));
    }

    let pixdim: Vec<f32> = (0..4).map(|i| f32_at(bytes, 76 + 4 * i)).collect();
    let voxel = pixdim[1];
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::Format(format!(
            "pixdim[1] = {voxel} is not a positive voxel size"
        )));
    }
    if pixdim[2] != voxel || pixdim[3] != voxel {
        return Err(Error::Unsupported(format!(
            "anisotropic voxels {:?}",
            &pixdim[1..4]
        )));
    }

    let slope = f32_at(bytes, 112);
    let inter = f32_at(bytes, 116);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        return Err(Error::Unsupported(format!(
            "intensity scaling slope {slope} intercept {inter}"
        )));
    }

    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= DATA_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!(
            "vox_offset {vox_offset} is invalid for a single-file image"
        )));
    }
    let offset = vox_offset as usize;
    let payload = dims.len() * 4;
    let available = bytes.len().saturating_sub(offset);
    if available < payload {
        return Err(Error::Format(format!(
            "truncated payload: {available} bytes present, {payload} expected"
        )));
    }
    if available > payload {
        return Err(Error::Format(format!(
            "payload of {available} bytes exceeds the {payload} bytes implied by dims {dims}"
        )));
    }

    let data: Vec<f32> = bytes[offset..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Rejected(format!("non-finite value at voxel {i}")));
    }

    let transform = SpatialTransform {
        qform_code: i16_at(bytes, 252),
        sform_code: i16_at(bytes, 254),
        quatern: [f32_at(bytes, 256), f32_at(bytes, 260), f32_at(bytes, 264)],
        srow: [
            [0, 1, 2, 3].map(|i| f32_at(bytes, 280 + 4 * i)),
            [0, 1, 2, 3].map(|i| f32_at(bytes, 296 + 4 * i)),
            [0, 1, 2, 3].map(|i| f32_at(bytes, 312 + 4 * i)),
        ],
    };
    let origin = [f32_at(bytes, 268), f32_at(bytes, 272), f32_at(bytes, 276)];

    Ok(Volume3D::new(dims, voxel, data)?
        .with_origin(origin)
        .with_transform(transform))
}

/// Serializes a volume to `.nii` bytes.
pub fn encode(v: &Volume3D) -> Result<Vec<u8>> {
    if let Some(i) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::Rejected(format!(
            "refusing to write non-finite value at voxel {i}"
        )));
    }
    let d = v.dims();
    for (axis, n) in d.as_array().iter().enumerate() {
        if *n > i16::MAX as usize {
            return Err(Error::Unsupported(format!(
                "dim[{}] = {n} exceeds NIfTI-1 limits",
                axis + 1
            )));
        }
    }

    let mut out = vec![0u8; DATA_OFFSET + d.len() * 4];
    let h = &mut out[..DATA_OFFSET];
    put_i32(h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    put_i16(h, 40, 3);
    put_i16(h, 42, d.nx as i16);
    put_i16(h, 44, d.ny as i16);
    put_i16(h, 46, d.nz as i16);
    for i in 4..8 {
        put_i16(h, 40 + 2 * i, 1);
    }
    put_i16(h, 70, DT_FLOAT32);
    put_i16(h, 72, 32);
    let s = v.voxel_size_mm();
    put_f32(h, 76, 1.0);
    for i in 1..4 {
        put_f32(h, 76 + 4 * i, s);
    }
    put_f32(h, 108, DATA_OFFSET as f32);
    put_f32(h, 112, 1.0);
    put_f32(h, 116, 0.0);
    // mm + s
    h[123] = 2 | 8;

    let t = v.transform();
    put_i16(h, 252, t.qform_code);
    put_i16(h, 254, t.sform_code);
    for (i, q) in t.quatern.iter().enumerate() {
        put_f32(h, 256 + 4 * i, *q);
    }
    for (i, o) in v.origin_mm().iter().enumerate() {
        put_f32(h, 268 + 4 * i, *o);
    }
    for (r, row) in t.srow.iter().enumerate() {
        for (c, val) in row.iter().enumerate() {
            put_f32(h, 280 + 16 * r + 4 * c, *val);
        }
    }
    h[344..348].copy_from_slice(MAGIC);

    for (chunk, value) in out[DATA_OFFSET..].chunks_exact_mut(4).zip(v.data()) {
        chunk.copy_from_slice(&value.to_le_bytes());
    }
    Ok(out)
}

pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}
