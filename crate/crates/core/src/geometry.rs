//! Oblique-axis laminographic geometry.
//!
//! The rotation axis is the volume z-axis and the beam rotates around it in
//! the sample frame. At laminographic angle `theta` the beam direction is
//! tilted `theta` away from the axis, so `theta = 90` is classic tomography.

use crate::error::{Error, Result};
use crate::volume::Dims;

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Acquisition geometry shared by the projector, FBP and the solver.
#[derive(Clone, Debug, PartialEq)]
pub struct LaminoGeometry {
    pub theta_deg: f64,
    pub angles_deg: Vec<f64>,
    pub det_nu: usize,
    pub det_nv: usize,
    pub det_pixel_nm: f64,
    pub ray_step_frac: f64,
}

impl LaminoGeometry {
    pub fn new(
        theta_deg: f64,
        angles_deg: Vec<f64>,
        det_nu: usize,
        det_nv: usize,
        det_pixel_nm: f64,
        ray_step_frac: f64,
    ) -> Result<Self> {
        let geom = LaminoGeometry {
            theta_deg,
            angles_deg,
            det_nu,
            det_nv,
            det_pixel_nm,
            ray_step_frac,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// `n_angles` equally spaced rotation angles over the full circle with a
    /// detector large enough to see every voxel of `dims` at every angle.
    pub fn full_circle(theta_deg: f64, n_angles: usize, dims: Dims, voxel_nm: f64, ray_step_frac: f64) -> Result<Self> {
        if n_angles == 0 {
            return Err(Error::Geometry("at least one rotation angle is required".into()));
        }
        let angles = (0..n_angles).map(|i| 360.0 * i as f64 / n_angles as f64).collect();
        let (nu, nv) = covering_detector(dims, theta_deg);
        Self::new(theta_deg, angles, nu, nv, voxel_nm, ray_step_frac)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_deg > 0.0 && self.theta_deg <= 90.0) {
            return Err(Error::Geometry(format!("theta_deg must lie in (0, 90], got {}", self.theta_deg)));
        }
        if self.angles_deg.is_empty() {
            return Err(Error::Geometry("angle list is empty".into()));
        }
        for w in self.angles_deg.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Geometry(format!("angles must be strictly increasing ({} then {})", w[0], w[1])));
            }
        }
        let first = self.angles_deg[0];
        let last = *self.angles_deg.last().unwrap();
        if !(first >= 0.0 && last < 360.0) {
            return Err(Error::Geometry("angles must lie within [0, 360)".into()));
        }
        if self.det_nu == 0 || self.det_nv == 0 {
            return Err(Error::Geometry("detector must have at least one pixel".into()));
        }
        if !(self.det_pixel_nm > 0.0) {
            return Err(Error::Geometry(format!("det_pixel_nm must be positive, got {}", self.det_pixel_nm)));
        }
        if !(self.ray_step_frac > 0.0 && self.ray_step_frac <= 1.0) {
            return Err(Error::Geometry(format!("ray_step_frac must lie in (0, 1], got {}", self.ray_step_frac)));
        }
        Ok(())
    }

    pub fn n_angles(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn ray_direction(&self, phi_deg: f64) -> Vec3 {
        ray_direction(self.theta_deg, phi_deg)
    }

    pub fn detector_basis(&self, phi_deg: f64) -> (Vec3, Vec3) {
        detector_basis(self.theta_deg, phi_deg)
    }

    /// Keep every `step`-th angle, starting with the first.
    pub fn decimate(&self, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::Geometry("decimation step must be >= 1".into()));
        }
        let mut g = self.clone();
        g.angles_deg = self.angles_deg.iter().copied().step_by(step).collect();
        Ok(g)
    }

    /// Same geometry restricted to the given angle indices (kept in order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut g = self.clone();
        g.angles_deg = indices
            .iter()
            .map(|&i| {
                self.angles_deg
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Geometry(format!("angle index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        g.validate()?;
        Ok(g)
    }
}

/// Beam propagation direction `d(phi)` in the sample frame.
pub fn ray_direction(theta_deg: f64, phi_deg: f64) -> Vec3 {
    let (st, ct) = theta_deg.to_radians().sin_cos();
    let (sp, cp) = phi_deg.to_radians().sin_cos();
    [st * cp, st * sp, ct]
}

/// Detector axes `(e_u, e_v)`; `{e_u, e_v, d}` is right-handed orthonormal.
pub fn detector_basis(theta_deg: f64, phi_deg: f64) -> (Vec3, Vec3) {
    let (st, ct) = theta_deg.to_radians().sin_cos();
    let (sp, cp) = phi_deg.to_radians().sin_cos();
    ([-sp, cp, 0.0], [-ct * cp, -ct * sp, st])
}

/// Smallest odd detector `(nu, nv)` in voxel-sized pixels that covers the
/// trilinear footprint of a `dims` grid for every rotation angle.
pub fn covering_detector(dims: Dims, theta_deg: f64) -> (usize, usize) {
    // Trilinear support extends one voxel beyond the outer voxel centres.
    let hx = dims.nx as f64 / 2.0 + 0.5;
    let hy = dims.ny as f64 / 2.0 + 0.5;
    let hz = dims.nz as f64 / 2.0 + 0.5;
    let (st, ct) = theta_deg.to_radians().sin_cos();
    let r = (hx * hx + hy * hy).sqrt();
    let u_max = r;
    let v_max = ct.abs() * r + st * hz;
    let odd = |h: f64| 2 * h.ceil() as usize + 1;
    (odd(u_max), odd(v_max))
}

/// Centred, normalized frequency `(i - n/2) / n` for a centred spectrum bin.
#[inline]
pub fn centered_frequency(i: usize, n: usize) -> f64 {
    (i as f64 - (n / 2) as f64) / n as f64
}

/// Double cone of spatial frequencies around `k_z` that no projection at
/// laminographic angle `theta_deg` samples.
///
/// Indices follow the centred spectrum convention (DC at `n/2` on each axis).
/// `mask[k]` is set iff `sqrt(kx^2 + ky^2) < |kz| cot(theta)`; DC is excluded.
pub fn missing_cone_mask(dims: Dims, theta_deg: f64) -> Result<Vec<bool>> {
    if dims.is_empty() {
        return Err(Error::Geometry(format!("empty grid {dims}")));
    }
    if !(theta_deg > 0.0 && theta_deg <= 90.0) {
        return Err(Error::Geometry(format!(
            "missing cone undefined for theta_deg = {theta_deg}; must lie in (0, 90]"
        )));
    }
    let cot = cone_cot(theta_deg);
    let mut mask = vec![false; dims.len()];
    for z in 0..dims.nz {
        let kz = centered_frequency(z, dims.nz);
        for y in 0..dims.ny {
            let ky = centered_frequency(y, dims.ny);
            for x in 0..dims.nx {
                let kx = centered_frequency(x, dims.nx);
                let rho = (kx * kx + ky * ky).sqrt();
                mask[dims.index(x, y, z)] = rho < kz.abs() * cot;
            }
        }
    }
    Ok(mask)
}

/// `cot(theta)` with the floating-point residue at 90 degrees removed.
fn cone_cot(theta_deg: f64) -> f64 {
    let cot = 1.0 / theta_deg.to_radians().tan();
    if cot.abs() < 1e-12 {
        0.0
    } else {
        cot
    }
}

/// Bins inside the isotropic Nyquist ball `|k| <= 1/2`, DC excluded.
///
/// Corner frequencies of a cubic grid are direction-biased; cone statistics
/// are taken over this ball.
pub fn nyquist_ball(dims: Dims) -> Vec<bool> {
    let mut ball = vec![false; dims.len()];
    for z in 0..dims.nz {
        let kz = centered_frequency(z, dims.nz);
        for y in 0..dims.ny {
            let ky = centered_frequency(y, dims.ny);
            for x in 0..dims.nx {
                let kx = centered_frequency(x, dims.nx);
                let r2 = kx * kx + ky * ky + kz * kz;
                ball[dims.index(x, y, z)] = r2 > 0.0 && r2 <= 0.25;
            }
        }
    }
    ball
}

/// Fraction of the Nyquist ball covered by the missing cone.
pub fn missing_cone_fraction(dims: Dims, theta_deg: f64) -> Result<f64> {
    let mask = missing_cone_mask(dims, theta_deg)?;
    let ball = nyquist_ball(dims);
    let inside = mask.iter().zip(&ball).filter(|(m, b)| **m && **b).count();
    let total = ball.iter().filter(|b| **b).count();
    Ok(inside as f64 / total.max(1) as f64)
}
