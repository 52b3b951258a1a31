//! Ramp-filtered backprojection for the oblique-axis geometry.
//!
//! Rows are filtered along `u` only. Each row is mirror-extended to `2 nu`
//! samples before the spectral multiply, which keeps the opposite edge from
//! wrapping in and leaves constants exactly in the null space.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::fft::signed_freq;
use crate::geometry::LaminoGeometry;
use crate::projector::{back_project, Projection, ProjectionStack};
use crate::volume::{Dims, Volume3D};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Window {
    #[default]
    None,
    Hann,
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Window::None),
            "hann" => Ok(Window::Hann),
            other => Err(Error::InvalidArgument(format!("unknown window `{other}` (expected none|hann)"))),
        }
    }
}

/// Ramp response `|k|` (cycles/nm) on the padded grid, with optional window.
fn ramp_response(len: usize, pixel_nm: f64, window: Window) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let k = signed_freq(i, len) / len as f64;
            let w = match window {
                Window::None => 1.0,
                Window::Hann => 0.5 * (1.0 + (2.0 * PI * k).cos()),
            };
            k.abs() / pixel_nm * w
        })
        .collect()
}

pub fn ramp_filter(proj: &Projection, window: Window) -> Result<Projection> {
    if proj.nu < 4 {
        return Err(Error::InvalidArgument(format!("ramp filter needs nu >= 4, got {}", proj.nu)));
    }
    let nu = proj.nu;
    let len = 2 * nu;
    let response = ramp_response(len, proj.pixel_nm, window);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    let mut out = proj.clone();
    for b in 0..proj.nv {
        let row = &proj.pixels[b * nu..(b + 1) * nu];
        for (i, &v) in row.iter().enumerate() {
            buf[i] = Complex64::new(v, 0.0);
            buf[len - 1 - i] = Complex64::new(v, 0.0);
        }
        fwd.process(&mut buf);
        buf.iter_mut().zip(&response).for_each(|(c, r)| *c *= r);
        inv.process(&mut buf);
        for (i, o) in out.pixels[b * nu..(b + 1) * nu].iter_mut().enumerate() {
            *o = buf[i].re / len as f64;
        }
    }
    Ok(out)
}

/// Filtered backprojection onto a `dims` grid, scaled by `pi / n_angles`.
pub fn fbp_reconstruct(stack: &ProjectionStack, geom: &LaminoGeometry, dims: Dims, window: Window) -> Result<Volume3D> {
    if stack.is_empty() {
        return Err(Error::InvalidArgument("cannot reconstruct from an empty stack".into()));
    }
    stack.check_matches(geom)?;
    let frames = stack
        .frames
        .iter()
        .map(|f| ramp_filter(f, window))
        .collect::<Result<Vec<_>>>()?;
    let filtered = ProjectionStack {
        frames,
        pixel_nm: stack.pixel_nm,
    };
    let mut vol = back_project(&filtered, geom, dims)?;
    vol.scale(PI / stack.len() as f64);
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_projection(row: &[f64]) -> Projection {
        Projection {
            phi_deg: 0.0,
            nu: row.len(),
            nv: 1,
            pixel_nm: 1.0,
            pixels: row.to_vec(),
        }
    }

    #[test]
    fn constant_is_annihilated() {
        let p = Projection {
            phi_deg: 0.0,
            nu: 13,
            nv: 3,
            pixel_nm: 2.0,
            pixels: vec![4.2; 39],
        };
        for w in [Window::None, Window::Hann] {
            let f = ramp_filter(&p, w).unwrap();
            assert!(f.pixels.iter().all(|v| v.abs() < 1e-10), "{:?}", f.pixels);
        }
    }

    #[test]
    fn cosine_is_an_eigenfunction() {
        // Half-sample cosines are exact cosines of the mirrored 2nu signal.
        let nu = 16;
        for m in [1usize, 3, 7] {
            let f = m as f64 / (2 * nu) as f64;
            let row: Vec<f64> = (0..nu).map(|i| (2.0 * PI * f * (i as f64 + 0.5)).cos()).collect();
            let out = ramp_filter(&row_projection(&row), Window::None).unwrap();
            for (o, r) in out.pixels.iter().zip(&row) {
                assert!((o - f * r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_matches_direct_dft() {
        let nu = 16;
        let mut row = vec![0.0; nu];
        row[5] = 1.0;
        let out = ramp_filter(&row_projection(&row), Window::None).unwrap();
        // Brute-force: mirror, O(n^2) DFT, multiply |k|, O(n^2) inverse.
        let len = 2 * nu;
        let mut ext = vec![0.0; len];
        for i in 0..nu {
            ext[i] = row[i];
            ext[len - 1 - i] = row[i];
        }
        let spec: Vec<(f64, f64)> = (0..len)
            .map(|k| {
                (0..len).fold((0.0, 0.0), |(re, im), n| {
                    let a = -2.0 * PI * (k * n) as f64 / len as f64;
                    (re + ext[n] * a.cos(), im + ext[n] * a.sin())
                })
            })
            .collect();
        for n in 0..nu {
            let mut acc = 0.0;
            for (k, &(re, im)) in spec.iter().enumerate() {
                let kk = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 };
                let r = (kk / len as f64).abs();
                let a = 2.0 * PI * (k * n) as f64 / len as f64;
                acc += r * (re * a.cos() - im * a.sin());
            }
            acc /= len as f64;
            assert!((out.pixels[n] - acc).abs() < 1e-12, "n {n}: {} vs {acc}", out.pixels[n]);
        }
    }

    #[test]
    fn rejects_short_rows() {
        assert!(ramp_filter(&row_projection(&[1.0, 2.0, 3.0]), Window::None).is_err());
    }

    #[test]
    fn empty_stack_rejected() {
        let dims = Dims::new(8, 8, 4);
        let g = LaminoGeometry::full_circle(61.0, 1, dims, 1.0, 0.5).unwrap();
        let s = ProjectionStack { frames: vec![], pixel_nm: 1.0 };
        assert!(fbp_reconstruct(&s, &g, dims, Window::None).is_err());
    }

    #[test]
    fn zero_stack_gives_zero_volume() {
        let dims = Dims::new(8, 8, 4);
        let g = LaminoGeometry::full_circle(61.0, 4, dims, 1.0, 0.5).unwrap();
        let s = crate::projector::forward_project_all(&Volume3D::zeros(dims, 1.0), &g).unwrap();
        let v = fbp_reconstruct(&s, &g, dims, Window::Hann).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
    }
}
