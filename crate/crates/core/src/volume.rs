//! Dense 3D scalar fields stored x-fastest.

use crate::error::{Error, Result};

/// Grid shape `(nx, ny, nz)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels in one axial (xy) slice.
    pub fn plane(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Material contrast (dimensionless) sampled on a cubic-voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    voxel_nm: f64,
    values: Vec<f64>,
}

impl Volume3D {
    pub fn zeros(dims: Dims, voxel_nm: f64) -> Self {
        Volume3D {
            dims,
            voxel_nm,
            values: vec![0.0; dims.len()],
        }
    }

    pub fn from_values(dims: Dims, voxel_nm: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} values supplied for a {} grid",
                values.len(),
                dims
            )));
        }
        if !(voxel_nm > 0.0) || !voxel_nm.is_finite() {
            return Err(Error::InvalidArgument(format!("voxel_nm must be positive, got {voxel_nm}")));
        }
        Ok(Volume3D { dims, voxel_nm, values })
    }

    pub fn from_fn(dims: Dims, voxel_nm: f64, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    values.push(f(x, y, z));
                }
            }
        }
        Volume3D { dims, voxel_nm, values }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_nm(&self) -> f64 {
        self.voxel_nm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.dims.index(x, y, z);
        self.values[i] = v;
    }

    /// Axial slice `z` as an `nx * ny` row-major (x-fastest) slice.
    pub fn slice_z(&self, z: usize) -> &[f64] {
        let p = self.dims.plane();
        &self.values[z * p..(z + 1) * p]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn dot(&self, other: &Volume3D) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims && self.voxel_nm == other.voxel_nm
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Volume3D) {
        debug_assert_eq!(self.dims, other.dims);
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
    }
}

/// Boolean occupancy on a voxel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryVolume {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryVolume {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::Shape(format!("{} bits for a {} grid", bits.len(), dims)));
        }
        Ok(BinaryVolume { dims, bits })
    }

    pub fn from_threshold(vol: &Volume3D, threshold: f64) -> Self {
        BinaryVolume {
            dims: vol.dims(),
            bits: vol.values().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Self {
        BinaryVolume {
            dims: self.dims,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_volume(&self, voxel_nm: f64) -> Volume3D {
        Volume3D {
            dims: self.dims,
            voxel_nm,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}
