//! Ray-driven laminographic projector and its exact transpose.
//!
//! Each detector pixel launches a ray `centre + u e_u + v e_v + t d(phi)`.
//! The volume is sampled by trilinear interpolation at `t = k * dt` for every
//! integer `k` whose sample has non-zero interpolation support, and the
//! samples are summed times `dt` (in nm). Backprojection scatters with the
//! same weights in the same order, so the pair is an exact adjoint.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{LaminoGeometry, Vec3};
use crate::volume::{Dims, Volume3D};

/// One detector frame; `pixels` is u-fastest (`a + nu * b`).
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub phi_deg: f64,
    pub nu: usize,
    pub nv: usize,
    pub pixel_nm: f64,
    pub pixels: Vec<f64>,
}

impl Projection {
    pub fn zeros(phi_deg: f64, nu: usize, nv: usize, pixel_nm: f64) -> Self {
        Projection {
            phi_deg,
            nu,
            nv,
            pixel_nm,
            pixels: vec![0.0; nu * nv],
        }
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.pixels[a + self.nu * b]
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }

    pub fn dot(&self, other: &Projection) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| a * b).sum()
    }

    pub fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Projection { pixels, ..self.clone() }
    }
}

/// Measurements for every angle of a geometry, in angle order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack {
    pub frames: Vec<Projection>,
    pub pixel_nm: f64,
}

impl ProjectionStack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dot(&self, other: &ProjectionStack) -> f64 {
        self.frames.iter().zip(&other.frames).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn map_frames(&self, f: impl Fn(&Projection) -> Projection + Sync + Send) -> ProjectionStack {
        ProjectionStack {
            frames: self.frames.par_iter().map(f).collect(),
            pixel_nm: self.pixel_nm,
        }
    }

    /// Keep every `step`-th frame, matching [`LaminoGeometry::decimate`].
    pub fn decimate(&self, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::InvalidArgument("decimation step must be >= 1".into()));
        }
        Ok(ProjectionStack {
            frames: self.frames.iter().step_by(step).cloned().collect(),
            pixel_nm: self.pixel_nm,
        })
    }

    pub fn check_matches(&self, geom: &LaminoGeometry) -> Result<()> {
        if self.frames.len() != geom.n_angles() {
            return Err(Error::Shape(format!(
                "stack has {} frames, geometry has {} angles",
                self.frames.len(),
                geom.n_angles()
            )));
        }
        for (f, &phi) in self.frames.iter().zip(&geom.angles_deg) {
            if f.phi_deg != phi {
                return Err(Error::Shape(format!("frame angle {} does not match geometry angle {phi}", f.phi_deg)));
            }
            if f.nu != geom.det_nu || f.nv != geom.det_nv || f.pixels.len() != f.nu * f.nv {
                return Err(Error::Shape(format!(
                    "frame is {}x{}, detector is {}x{}",
                    f.nu, f.nv, geom.det_nu, geom.det_nv
                )));
            }
        }
        if self.pixel_nm != geom.det_pixel_nm {
            return Err(Error::Shape(format!(
                "stack pixel {} nm differs from detector pixel {} nm",
                self.pixel_nm, geom.det_pixel_nm
            )));
        }
        Ok(())
    }
}

/// Per-angle ray parameters in voxel units.
#[derive(Clone, Copy, Debug)]
struct RayFrame {
    d: Vec3,
    eu: Vec3,
    ev: Vec3,
}

impl RayFrame {
    fn new(geom: &LaminoGeometry, phi_deg: f64) -> Self {
        let d = geom.ray_direction(phi_deg);
        let (eu, ev) = geom.detector_basis(phi_deg);
        RayFrame { d, eu, ev }
    }
}

struct Grid {
    dims: Dims,
    centre: Vec3,
    nu: usize,
    nv: usize,
    /// Sample spacing in voxel units.
    step: f64,
    /// Sample spacing in nm, the quadrature weight.
    step_nm: f64,
}

impl Grid {
    fn new(dims: Dims, voxel_nm: f64, geom: &LaminoGeometry) -> Result<Self> {
        geom.validate()?;
        if (geom.det_pixel_nm - voxel_nm).abs() > 1e-12 * voxel_nm {
            return Err(Error::Shape(format!(
                "detector pixel {} nm must equal voxel size {} nm (no resampling)",
                geom.det_pixel_nm, voxel_nm
            )));
        }
        Ok(Grid {
            dims,
            centre: [
                (dims.nx as f64 - 1.0) / 2.0,
                (dims.ny as f64 - 1.0) / 2.0,
                (dims.nz as f64 - 1.0) / 2.0,
            ],
            nu: geom.det_nu,
            nv: geom.det_nv,
            step: geom.ray_step_frac,
            step_nm: geom.ray_step_frac * voxel_nm,
        })
    }

    /// Origin of the ray through pixel `(a, b)` and its sample index range.
    #[inline]
    fn ray(&self, f: &RayFrame, a: usize, b: usize) -> Option<(Vec3, i64, i64)> {
        let u = a as f64 - (self.nu as f64 - 1.0) / 2.0;
        let v = b as f64 - (self.nv as f64 - 1.0) / 2.0;
        let o = [
            self.centre[0] + u * f.eu[0] + v * f.ev[0],
            self.centre[1] + u * f.eu[1] + v * f.ev[1],
            self.centre[2] + u * f.eu[2] + v * f.ev[2],
        ];
        let n = [self.dims.nx as f64, self.dims.ny as f64, self.dims.nz as f64];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            // Interpolation support is the open box (-1, n).
            if f.d[i].abs() < 1e-15 {
                if o[i] <= -1.0 || o[i] >= n[i] {
                    return None;
                }
            } else {
                let ta = (-1.0 - o[i]) / f.d[i];
                let tb = (n[i] - o[i]) / f.d[i];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if !(t1 > t0) {
            return None;
        }
        let k0 = (t0 / self.step).ceil() as i64;
        let k1 = (t1 / self.step).floor() as i64;
        (k1 >= k0).then_some((o, k0, k1))
    }
}

/// Trilinear stencil: base index per axis and fractional offsets.
#[inline]
fn stencil(p: Vec3) -> ([i64; 3], [f64; 3]) {
    let fx = p[0].floor();
    let fy = p[1].floor();
    let fz = p[2].floor();
    ([fx as i64, fy as i64, fz as i64], [p[0] - fx, p[1] - fy, p[2] - fz])
}

#[inline]
fn gather(values: &[f64], dims: Dims, p: Vec3) -> f64 {
    let ([ix, iy, iz], [fx, fy, fz]) = stencil(p);
    let (nx, ny, nz) = (dims.nx as i64, dims.ny as i64, dims.nz as i64);
    let w = [[1.0 - fx, fx], [1.0 - fy, fy], [1.0 - fz, fz]];
    if ix >= 0 && iy >= 0 && iz >= 0 && ix + 1 < nx && iy + 1 < ny && iz + 1 < nz {
        let base = (ix + nx * (iy + ny * iz)) as usize;
        let sx = 1;
        let sy = dims.nx;
        let sz = dims.nx * dims.ny;
        let c00 = values[base] * w[0][0] + values[base + sx] * w[0][1];
        let c10 = values[base + sy] * w[0][0] + values[base + sy + sx] * w[0][1];
        let c01 = values[base + sz] * w[0][0] + values[base + sz + sx] * w[0][1];
        let c11 = values[base + sz + sy] * w[0][0] + values[base + sz + sy + sx] * w[0][1];
        return (c00 * w[1][0] + c10 * w[1][1]) * w[2][0] + (c01 * w[1][0] + c11 * w[1][1]) * w[2][1];
    }
    let mut acc = 0.0;
    for (dz, wz) in w[2].iter().enumerate() {
        let z = iz + dz as i64;
        if z < 0 || z >= nz {
            continue;
        }
        for (dy, wy) in w[1].iter().enumerate() {
            let y = iy + dy as i64;
            if y < 0 || y >= ny {
                continue;
            }
            for (dx, wx) in w[0].iter().enumerate() {
                let x = ix + dx as i64;
                if x < 0 || x >= nx {
                    continue;
                }
                acc += values[(x + nx * (y + ny * z)) as usize] * wx * wy * wz;
            }
        }
    }
    acc
}

#[inline]
fn scatter(values: &mut [f64], dims: Dims, p: Vec3, val: f64) {
    let ([ix, iy, iz], [fx, fy, fz]) = stencil(p);
    let (nx, ny, nz) = (dims.nx as i64, dims.ny as i64, dims.nz as i64);
    let w = [[1.0 - fx, fx], [1.0 - fy, fy], [1.0 - fz, fz]];
    if ix >= 0 && iy >= 0 && iz >= 0 && ix + 1 < nx && iy + 1 < ny && iz + 1 < nz {
        let base = (ix + nx * (iy + ny * iz)) as usize;
        let sy = dims.nx;
        let sz = dims.nx * dims.ny;
        let v0 = val * w[2][0];
        let v1 = val * w[2][1];
        let (a00, a10, a01, a11) = (v0 * w[1][0], v0 * w[1][1], v1 * w[1][0], v1 * w[1][1]);
        values[base] += a00 * w[0][0];
        values[base + 1] += a00 * w[0][1];
        values[base + sy] += a10 * w[0][0];
        values[base + sy + 1] += a10 * w[0][1];
        values[base + sz] += a01 * w[0][0];
        values[base + sz + 1] += a01 * w[0][1];
        values[base + sz + sy] += a11 * w[0][0];
        values[base + sz + sy + 1] += a11 * w[0][1];
        return;
    }
    for (dz, wz) in w[2].iter().enumerate() {
        let z = iz + dz as i64;
        if z < 0 || z >= nz {
            continue;
        }
        for (dy, wy) in w[1].iter().enumerate() {
            let y = iy + dy as i64;
            if y < 0 || y >= ny {
                continue;
            }
            for (dx, wx) in w[0].iter().enumerate() {
                let x = ix + dx as i64;
                if x < 0 || x >= nx {
                    continue;
                }
                values[(x + nx * (y + ny * z)) as usize] += val * wz * wy * wx;
            }
        }
    }
}

fn project_frame(values: &[f64], grid: &Grid, frame: &RayFrame, out: &mut [f64]) {
    let d = frame.d;
    for b in 0..grid.nv {
        for a in 0..grid.nu {
            let Some((o, k0, k1)) = grid.ray(frame, a, b) else {
                out[a + grid.nu * b] = 0.0;
                continue;
            };
            let mut acc = 0.0;
            for k in k0..=k1 {
                let t = k as f64 * grid.step;
                acc += gather(values, grid.dims, [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
            }
            out[a + grid.nu * b] = acc * grid.step_nm;
        }
    }
}

fn backproject_frame(pixels: &[f64], grid: &Grid, frame: &RayFrame, acc: &mut [f64]) {
    let d = frame.d;
    for b in 0..grid.nv {
        for a in 0..grid.nu {
            let y = pixels[a + grid.nu * b];
            if y == 0.0 {
                continue;
            }
            let Some((o, k0, k1)) = grid.ray(frame, a, b) else {
                continue;
            };
            let val = y * grid.step_nm;
            for k in k0..=k1 {
                let t = k as f64 * grid.step;
                scatter(acc, grid.dims, [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]], val);
            }
        }
    }
}

/// Line integrals of `vol` along `d(phi_deg)` onto the detector.
pub fn forward_project(vol: &Volume3D, geom: &LaminoGeometry, phi_deg: f64) -> Result<Projection> {
    let grid = Grid::new(vol.dims(), vol.voxel_nm(), geom)?;
    let mut p = Projection::zeros(phi_deg, geom.det_nu, geom.det_nv, geom.det_pixel_nm);
    project_frame(vol.values(), &grid, &RayFrame::new(geom, phi_deg), &mut p.pixels);
    Ok(p)
}

/// Forward projection at every geometry angle, in order.
pub fn forward_project_all(vol: &Volume3D, geom: &LaminoGeometry) -> Result<ProjectionStack> {
    let grid = Grid::new(vol.dims(), vol.voxel_nm(), geom)?;
    let frames = geom
        .angles_deg
        .par_iter()
        .map(|&phi| {
            let mut p = Projection::zeros(phi, geom.det_nu, geom.det_nv, geom.det_pixel_nm);
            project_frame(vol.values(), &grid, &RayFrame::new(geom, phi), &mut p.pixels);
            p
        })
        .collect();
    Ok(ProjectionStack {
        frames,
        pixel_nm: geom.det_pixel_nm,
    })
}

/// Angles accumulated into one partial volume before the ordered reduction.
const BACKPROJECT_CHUNK: usize = 4;

/// Transpose of [`forward_project_all`] onto a `dims` grid.
///
/// Angles are split into fixed-size chunks; each chunk accumulates into its
/// own partial volume and partials are summed in chunk order, so the result
/// does not depend on the worker count.
pub fn back_project(stack: &ProjectionStack, geom: &LaminoGeometry, dims: Dims) -> Result<Volume3D> {
    stack.check_matches(geom)?;
    let voxel_nm = geom.det_pixel_nm;
    let grid = Grid::new(dims, voxel_nm, geom)?;
    let partials: Vec<Vec<f64>> = stack
        .frames
        .par_chunks(BACKPROJECT_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; dims.len()];
            for f in chunk {
                backproject_frame(&f.pixels, &grid, &RayFrame::new(geom, f.phi_deg), &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; dims.len()];
    for p in partials {
        out.iter_mut().zip(&p).for_each(|(o, v)| *o += v);
    }
    Volume3D::from_values(dims, voxel_nm, out)
}
