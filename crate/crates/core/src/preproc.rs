//! Measurement-side processing: spectral high-pass, synthetic jitter and
//! subpixel phase-correlation alignment.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fftn, real_part, signed_freq, to_complex, Direction};
use crate::geometry::detector_basis;
use crate::projector::{Projection, ProjectionStack};

/// `HPF(y) = y - G_sigma * y` with a periodic Gaussian kernel, applied in
/// the Fourier domain. The DC gain is exactly zero.
#[derive(Clone, Debug)]
pub struct HighPass {
    nu: usize,
    nv: usize,
    multiplier: Vec<f64>,
}

impl HighPass {
    pub fn new(nu: usize, nv: usize, sigma_px: f64) -> Result<Self> {
        if !(sigma_px > 0.0) {
            return Err(Error::InvalidArgument(format!("high-pass sigma must be positive, got {sigma_px}")));
        }
        let kernel = gaussian_kernel(nu, nv, sigma_px);
        let mut spec = to_complex(&kernel);
        fftn(&mut spec, &[nu, nv], Direction::Forward);
        let mut multiplier: Vec<f64> = spec.iter().map(|c| 1.0 - c.re).collect();
        multiplier[0] = 0.0;
        Ok(HighPass { nu, nv, multiplier })
    }

    pub fn multiplier(&self) -> &[f64] {
        &self.multiplier
    }

    /// Filter whose response is this one's squared.
    pub fn squared(&self) -> HighPass {
        HighPass {
            multiplier: self.multiplier.iter().map(|m| m * m).collect(),
            ..self.clone()
        }
    }

    pub fn apply(&self, proj: &Projection) -> Result<Projection> {
        if (proj.nu, proj.nv) != (self.nu, self.nv) {
            return Err(Error::Shape(format!(
                "filter is {}x{}, projection is {}x{}",
                self.nu, self.nv, proj.nu, proj.nv
            )));
        }
        let mut buf = to_complex(&proj.pixels);
        fftn(&mut buf, &[self.nu, self.nv], Direction::Forward);
        buf.iter_mut().zip(&self.multiplier).for_each(|(c, m)| *c *= m);
        fftn(&mut buf, &[self.nu, self.nv], Direction::Inverse);
        Ok(proj.with_pixels(real_part(&buf)))
    }

    pub fn apply_stack(&self, stack: &ProjectionStack) -> Result<ProjectionStack> {
        let frames = stack.frames.iter().map(|f| self.apply(f)).collect::<Result<Vec<_>>>()?;
        Ok(ProjectionStack { frames, pixel_nm: stack.pixel_nm })
    }
}

/// Periodic (minimum-image) Gaussian normalized to unit sum, u-fastest.
pub fn gaussian_kernel(nu: usize, nv: usize, sigma_px: f64) -> Vec<f64> {
    let wrap = |i: usize, n: usize| {
        let d = i.min(n - i) as f64;
        d * d
    };
    let mut k: Vec<f64> = (0..nu * nv)
        .map(|i| (-(wrap(i % nu, nu) + wrap(i / nu, nv)) / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn high_pass(proj: &Projection, sigma_px: f64) -> Result<Projection> {
    HighPass::new(proj.nu, proj.nv, sigma_px)?.apply(proj)
}

/// Detector-plane displacement in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub du: f64,
    pub dv: f64,
}

/// Moves the frame content by `(du, dv)` pixels with a Fourier phase ramp.
pub fn fourier_shift(proj: &Projection, shift: Shift) -> Projection {
    if shift.du == 0.0 && shift.dv == 0.0 {
        return proj.clone();
    }
    let (nu, nv) = (proj.nu, proj.nv);
    let mut buf = to_complex(&proj.pixels);
    fftn(&mut buf, &[nu, nv], Direction::Forward);
    for b in 0..nv {
        let kv = signed_freq(b, nv) / nv as f64;
        for a in 0..nu {
            let ku = signed_freq(a, nu) / nu as f64;
            let phase = -2.0 * PI * (ku * shift.du + kv * shift.dv);
            buf[a + nu * b] *= Complex64::from_polar(1.0, phase);
        }
    }
    fftn(&mut buf, &[nu, nv], Direction::Inverse);
    proj.with_pixels(real_part(&buf))
}

/// Displaces every frame by an independent `N(0, sigma^2)` shift per axis.
pub fn jitter_projections(stack: &ProjectionStack, sigma_shift_px: f64, seed: u64) -> Result<(ProjectionStack, Vec<Shift>)> {
    if !(sigma_shift_px >= 0.0) {
        return Err(Error::InvalidArgument(format!("jitter sigma must be >= 0, got {sigma_shift_px}")));
    }
    if sigma_shift_px == 0.0 {
        return Ok((stack.clone(), vec![Shift::default(); stack.len()]));
    }
    let normal = Normal::new(0.0, sigma_shift_px).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<Shift> = (0..stack.len())
        .map(|_| Shift {
            du: normal.sample(&mut rng),
            dv: normal.sample(&mut rng),
        })
        .collect();
    let frames = stack.frames.iter().zip(&shifts).map(|(f, &s)| fourier_shift(f, s)).collect();
    Ok((ProjectionStack { frames, pixel_nm: stack.pixel_nm }, shifts))
}

/// Peak search grids after the integer peak: 0.1 px, then 0.01 px. The second
/// stage keeps quantization error from accumulating along the alignment chain.
const REFINE_STEPS: [f64; 2] = [0.1, 0.01];
const REFINE_HALF_WIDTH: i32 = 15;

/// Displacement of `moving` relative to `reference` from the cross-correlation
/// peak, refined by matrix-multiply DFT evaluation around the integer peak.
/// `None` if either frame has no signal.
pub fn register(reference: &Projection, moving: &Projection) -> Option<Shift> {
    let (nu, nv) = (reference.nu, reference.nv);
    let spectrum = |p: &Projection| -> Option<Vec<Complex64>> {
        let mean = p.sum() / p.pixels.len() as f64;
        let centred: Vec<f64> = p.pixels.iter().map(|v| v - mean).collect();
        if centred.iter().all(|v| *v == 0.0) {
            return None;
        }
        let mut buf = to_complex(&centred);
        fftn(&mut buf, &[nu, nv], Direction::Forward);
        Some(buf)
    };
    let fr = spectrum(reference)?;
    let fm = spectrum(moving)?;
    let cross: Vec<Complex64> = fm.iter().zip(&fr).map(|(m, r)| m * r.conj()).collect();
    let mut cc = cross.clone();
    fftn(&mut cc, &[nu, nv], Direction::Inverse);
    let (peak, _) = cc
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, c)| if c.re > bv { (i, c.re) } else { (bi, bv) });
    let mut best = Shift {
        du: signed_freq(peak % nu, nu),
        dv: signed_freq(peak / nu, nv),
    };
    for step in REFINE_STEPS {
        best = refine_peak(&cross, nu, nv, best, step);
    }
    Some(best)
}

/// Maximizes `cc(s) = sum_k X(k) exp(2 pi i k.s / N)` over `centre + m * step`.
fn refine_peak(cross: &[Complex64], nu: usize, nv: usize, centre: Shift, step: f64) -> Shift {
    let offsets: Vec<f64> = (-REFINE_HALF_WIDTH..=REFINE_HALF_WIDTH).map(|m| m as f64 * step).collect();
    let ku: Vec<f64> = (0..nu).map(|a| signed_freq(a, nu) / nu as f64).collect();
    let kv: Vec<f64> = (0..nv).map(|b| signed_freq(b, nv) / nv as f64).collect();
    // Along u for every v-frequency row first, then along v.
    let mut partial = vec![Complex64::new(0.0, 0.0); offsets.len() * nv];
    for (j, du) in offsets.iter().enumerate() {
        let su = centre.du + du;
        let twiddle: Vec<Complex64> = ku.iter().map(|k| Complex64::from_polar(1.0, 2.0 * PI * k * su)).collect();
        for b in 0..nv {
            let row = &cross[b * nu..(b + 1) * nu];
            partial[j * nv + b] = row.iter().zip(&twiddle).map(|(x, t)| x * t).sum();
        }
    }
    let mut best = (f64::NEG_INFINITY, centre);
    for dv in &offsets {
        let sv = centre.dv + dv;
        let twiddle: Vec<Complex64> = kv.iter().map(|k| Complex64::from_polar(1.0, 2.0 * PI * k * sv)).collect();
        for (j, du) in offsets.iter().enumerate() {
            let val: Complex64 = partial[j * nv..(j + 1) * nv].iter().zip(&twiddle).map(|(x, t)| x * t).sum();
            if val.re > best.0 {
                best = (val.re, Shift { du: centre.du + du, dv: sv });
            }
        }
    }
    best.1
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub stack: ProjectionStack,
    /// Estimated displacement of each input frame (zero-mean).
    pub shifts: Vec<Shift>,
    /// Frames that could not be registered (no signal).
    pub skipped: Vec<usize>,
    /// Loop-closure residual distributed over the chain, if the scan closes.
    pub closure_residual: Option<Shift>,
}

impl Alignment {
    pub fn has_warnings(&self) -> bool {
        !self.skipped.is_empty()
    }
}

/// Whether the last-to-first gap is a regular angular step of a closed scan.
fn closes_loop(stack: &ProjectionStack) -> bool {
    let n = stack.len();
    if n < 3 {
        return false;
    }
    let angles: Vec<f64> = stack.frames.iter().map(|f| f.phi_deg).collect();
    let mut steps: Vec<f64> = angles.windows(2).map(|w| w[1] - w[0]).collect();
    steps.sort_by(f64::total_cmp);
    let median = steps[steps.len() / 2];
    let gap = 360.0 - angles[n - 1] + angles[0];
    gap > 0.0 && gap <= 1.5 * median
}

/// Mass centroid in pixel coordinates. `None` unless the frame is a
/// predominantly positive mass distribution (resampling ringing is tolerated).
fn centroid(p: &Projection) -> Option<(f64, f64)> {
    let (mut m, mut neg, mut cu, mut cv) = (0.0, 0.0, 0.0, 0.0);
    for (i, v) in p.pixels.iter().enumerate() {
        m += v;
        neg += v.min(0.0).abs();
        cu += v * (i % p.nu) as f64;
        cv += v * (i / p.nu) as f64;
    }
    (m > 0.0 && neg <= 0.05 * m).then(|| (cu / m, cv / m))
}

/// Residuals of the frame centroids after fitting a rigid object offset.
///
/// An object point `r` projects to `(r . e_u, r . e_v)` plus a fixed detector
/// offset, so both centroid tracks share the two lateral unknowns `(x, y)`;
/// the `z` term is constant in `v` and merges with its offset.
fn rigid_residual(phi: &[f64], theta_deg: f64, cu: &[f64], cv: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<([f64; 4], [f64; 4])> = phi
        .iter()
        .map(|&p| {
            let (eu, ev) = detector_basis(theta_deg, p);
            ([eu[0], eu[1], 1.0, 0.0], [ev[0], ev[1], 0.0, 1.0])
        })
        .collect();
    let mut a = [[0.0; 5]; 4];
    for ((ru, rv), (&u, &v)) in rows.iter().zip(cu.iter().zip(cv)) {
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] += ru[i] * ru[j] + rv[i] * rv[j];
            }
            a[i][4] += ru[i] * u + rv[i] * v;
        }
    }
    // Gaussian elimination with partial pivoting on the 4x4 normal equations.
    let scale = a.iter().flat_map(|r| r[..4].iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    for c in 0..4 {
        let piv = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() <= 1e-9 * scale {
            return None;
        }
        a.swap(c, piv);
        for r in 0..4 {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..5 {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    let x: Vec<f64> = (0..4).map(|i| a[i][4] / a[i][i]).collect();
    let dot = |r: &[f64; 4]| r.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
    Some((
        rows.iter().zip(cu).map(|((ru, _), u)| u - dot(ru)).collect(),
        rows.iter().zip(cv).map(|((_, rv), v)| v - dot(rv)).collect(),
    ))
}

/// Relative weight of a chain link against a centroid anchor
/// (inverse variance ratio of the two measurements).
const LINK_WEIGHT: f64 = 25.0;

/// Minimizes `W sum_links (s_j - s_i - r)^2 + sum_i (s_i - c_i)^2` by
/// conjugate gradients. The system is SPD for any link graph.
fn fuse(links: &[(usize, usize, f64)], anchors: &[f64]) -> Vec<f64> {
    let n = anchors.len();
    let apply = |x: &[f64]| -> Vec<f64> {
        let mut out = x.to_vec();
        for &(i, j, _) in links {
            let d = LINK_WEIGHT * (x[j] - x[i]);
            out[j] += d;
            out[i] -= d;
        }
        out
    };
    let mut b = anchors.to_vec();
    for &(i, j, r) in links {
        b[j] += LINK_WEIGHT * r;
        b[i] -= LINK_WEIGHT * r;
    }
    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let tol = 1e-24 * b.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    for _ in 0..4 * n + 10 {
        if rr <= tol {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, ai)| *ri -= alpha * ai);
        let next: f64 = r.iter().map(|v| v * v).sum();
        p = r.iter().zip(&p).map(|(ri, pi)| ri + next / rr * pi).collect();
        rr = next;
    }
    x
}

/// Registers each frame to its predecessor by phase correlation and chains
/// the pairwise shifts. This chain is the one serial stage.
///
/// Chained links are precise locally but integrate the apparent motion of
/// the object between views into a slow drift. When every frame has
/// predominantly positive mass, the drift is anchored by the projected mass
/// centroid, which for a parallel beam follows a rigid offset of the object
/// seen at tilt `theta_deg`; links and anchors are fused by least squares. Otherwise the chain is used
/// alone, closing the loop for 360-degree scans. Shifts are made zero-mean
/// and frames are moved back by their estimate.
pub fn align_projections(stack: &ProjectionStack, theta_deg: f64) -> Result<Alignment> {
    let n = stack.len();
    if n < 2 {
        return Err(Error::InvalidArgument("alignment needs at least two projections".into()));
    }
    let empty: Vec<bool> = stack.frames.iter().map(|f| f.pixels.iter().all(|v| *v == 0.0)).collect();
    let skipped: Vec<usize> = (0..n).filter(|&i| empty[i]).collect();

    let pair = |i: usize, j: usize| -> Option<Shift> {
        if empty[i] || empty[j] {
            return None;
        }
        register(&stack.frames[i], &stack.frames[j])
    };
    // (i, j, displacement of frame j relative to frame i)
    let mut links: Vec<(usize, usize, Shift)> = (1..n).filter_map(|j| pair(j - 1, j).map(|s| (j - 1, j, s))).collect();
    let closed = closes_loop(stack) && skipped.is_empty();
    if closed {
        if let Some(s) = pair(n - 1, 0) {
            links.push((n - 1, 0, s));
        }
    }

    let phi: Vec<f64> = stack.frames.iter().map(|f| f.phi_deg).collect();
    let centroids: Option<Vec<(f64, f64)>> = stack.frames.iter().map(centroid).collect();
    let anchors = centroids.filter(|_| n >= 4).and_then(|c| {
        let cu: Vec<f64> = c.iter().map(|x| x.0).collect();
        let cv: Vec<f64> = c.iter().map(|x| x.1).collect();
        rigid_residual(&phi, theta_deg, &cu, &cv)
    });

    let mut closure_residual = None;
    let mut shifts: Vec<Shift> = match anchors {
        Some((au, av)) => {
            let lu: Vec<_> = links.iter().map(|&(i, j, s)| (i, j, s.du)).collect();
            let lv: Vec<_> = links.iter().map(|&(i, j, s)| (i, j, s.dv)).collect();
            fuse(&lu, &au).into_iter().zip(fuse(&lv, &av)).map(|(du, dv)| Shift { du, dv }).collect()
        }
        None => {
            let mut steps: Vec<Shift> = vec![Shift::default(); n];
            for &(i, j, s) in &links {
                if j == i + 1 {
                    steps[j] = s;
                }
            }
            if closed && links.len() == n {
                let (eu, ev) = links.iter().fold((0.0, 0.0), |(a, b), l| (a + l.2.du, b + l.2.dv));
                for s in steps.iter_mut().skip(1) {
                    s.du -= eu / n as f64;
                    s.dv -= ev / n as f64;
                }
                closure_residual = Some(Shift { du: eu, dv: ev });
            }
            let mut acc = Shift::default();
            steps
                .iter()
                .map(|s| {
                    acc.du += s.du;
                    acc.dv += s.dv;
                    acc
                })
                .collect()
        }
    };
    let (mu, mv) = shifts.iter().fold((0.0, 0.0), |(a, b), s| (a + s.du, b + s.dv));
    shifts.iter_mut().for_each(|s| {
        s.du -= mu / n as f64;
        s.dv -= mv / n as f64;
    });
    let frames = stack
        .frames
        .iter()
        .zip(&shifts)
        .map(|(f, s)| fourier_shift(f, Shift { du: -s.du, dv: -s.dv }))
        .collect();
    Ok(Alignment {
        stack: ProjectionStack { frames, pixel_nm: stack.pixel_nm },
        shifts,
        skipped,
        closure_residual,
    })
}
