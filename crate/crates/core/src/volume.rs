//! Dense 3D scalar fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent of a volume, x varying fastest in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn axis_len(&self, axis: usize) -> usize {
        self.as_array()[axis]
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let rest = index / self.nx;
        [x, rest % self.ny, rest / self.ny]
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x < self.nx && y < self.ny && z < self.nz
    }

    pub fn max_dim(&self) -> usize {
        self.nx.max(self.ny).max(self.nz)
    }

    pub fn min_dim(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Orientation fields carried through I/O untouched.
///
/// Nothing in this crate resamples or reorients; all volumes of a session
/// are assumed to already live on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Default for SpatialTransform {
    fn default() -> Self {
        SpatialTransform {
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            srow: [[0.0; 4]; 3],
        }
    }
}

/// A 2D plane cut out of a volume, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    voxel_size_mm: f32,
    origin_mm: [f32; 3],
    transform: SpatialTransform,
    data: Vec<f32>,
}

impl Volume3D {
    /// Builds a volume, checking the payload length and voxel size.
    ///
    /// Non-finite values are accepted here; the writer refuses them and the
    /// reader never produces them.
    pub fn new(dims: Dims, voxel_size_mm: f32, data: Vec<f32>) -> Result<Self> {
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::Shape(format!("dims must be positive, got {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "payload of {} values does not match dims {dims} ({} voxels)",
                data.len(),
                dims.len()
            )));
        }
        if !(voxel_size_mm > 0.0 && voxel_size_mm.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "voxel size must be positive, got {voxel_size_mm}"
            )));
        }
        Ok(Volume3D {
            dims,
            voxel_size_mm,
            origin_mm: [0.0; 3],
            transform: SpatialTransform::default(),
            data,
        })
    }

    pub fn zeros(dims: Dims, voxel_size_mm: f32) -> Result<Self> {
        Self::new(dims, voxel_size_mm, vec![0.0; dims.len()])
    }

    pub fn from_fn(
        dims: Dims,
        voxel_size_mm: f32,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxel_size_mm, data)
    }

    pub fn with_origin(mut self, origin_mm: [f32; 3]) -> Self {
        self.origin_mm = origin_mm;
        self
    }

    pub fn with_transform(mut self, transform: SpatialTransform) -> Self {
        self.transform = transform;
        self
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "payload of {} values does not match dims {}",
                data.len(),
                self.dims
            )));
        }
        Ok(Volume3D {
            dims: self.dims,
            voxel_size_mm: self.voxel_size_mm,
            origin_mm: self.origin_mm,
            transform: self.transform,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        self.with_data(data).expect("same length")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> f32 {
        self.voxel_size_mm
    }

    /// Volume of one voxel in millilitres.
    pub fn voxel_volume_ml(&self) -> f64 {
        let s = self.voxel_size_mm as f64;
        s * s * s / 1000.0
    }

    pub fn origin_mm(&self) -> [f32; 3] {
        self.origin_mm
    }

    pub fn transform(&self) -> &SpatialTransform {
        &self.transform
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn ensure_dims(&self, expected: Dims) -> Result<()> {
        if self.dims != expected {
            return Err(Error::Dims {
                expected: expected.as_array(),
                found: self.dims.as_array(),
            });
        }
        Ok(())
    }

    /// Extracts the plane `index` orthogonal to `axis`.
    ///
    /// Axis 0 (sagittal) yields rows over z and columns over y, axis 1
    /// (coronal) rows over z and columns over x, axis 2 (axial) rows over y
    /// and columns over x.
    pub fn slice(&self, axis: usize, index: usize) -> Result<Slice2D> {
        if axis > 2 {
            return Err(Error::InvalidParameter(format!("axis {axis} out of range")));
        }
        let d = self.dims;
        if index >= d.axis_len(axis) {
            return Err(Error::InvalidParameter(format!(
                "slice index {index} out of range for axis {axis} of length {}",
                d.axis_len(axis)
            )));
        }
        let (width, height) = match axis {
            0 => (d.ny, d.nz),
            1 => (d.nx, d.nz),
            _ => (d.nx, d.ny),
        };
        let mut values = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let v = match axis {
                    0 => self.get(index, col, row),
                    1 => self.get(col, index, row),
                    _ => self.get(col, row, index),
                };
                values.push(v);
            }
        }
        Ok(Slice2D {
            width,
            height,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_are_inverse() {
        let d = Dims::new(3, 4, 5);
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 3);
        assert_eq!(d.index(0, 0, 1), 12);
    }

    #[test]
    fn rejects_bad_payload_and_voxel_size() {
        let d = Dims::new(2, 2, 2);
        assert!(Volume3D::new(d, 1.0, vec![0.0; 7]).is_err());
        assert!(Volume3D::new(d, 0.0, vec![0.0; 8]).is_err());
        assert!(Volume3D::new(Dims::new(0, 2, 2), 1.0, vec![]).is_err());
    }

    #[test]
    fn slices_pick_the_right_plane() {
        let d = Dims::new(3, 4, 5);
        let v = Volume3D::from_fn(d, 1.0, |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        let s = v.slice(2, 3).unwrap();
        assert_eq!((s.width, s.height), (3, 4));
        assert_eq!(s.values[0], 300.0);
        assert_eq!(s.values[3 + 2], 312.0);
        let s = v.slice(0, 2).unwrap();
        assert_eq!((s.width, s.height), (4, 5));
        assert_eq!(s.values[4 + 1], 112.0);
        let s = v.slice(1, 1).unwrap();
        assert_eq!(s.values[2 * 3 + 2], 212.0);
        assert!(v.slice(2, 5).is_err());
        assert!(v.slice(3, 0).is_err());
    }
}
