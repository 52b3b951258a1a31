//! Reconstruction quality metrics.
//!
//! Occupancy is recovered by a two-component 1D Gaussian mixture fitted with
//! EM; BER compares occupancies, PCC compares raw values, and the centred
//! power spectrum measures how much energy sits in the missing cone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fftn, to_complex, Direction};
use crate::geometry::{missing_cone_mask, nyquist_ball};
use crate::phantom::occupancy_mask;
use crate::volume::{BinaryVolume, Dims, Volume3D};

/// Depth split separating coarse and fine interconnect layers.
pub const FINE_Z_SPLIT: f64 = 0.70;

/// Half-open range of z-slices `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZRange {
    pub start: usize,
    pub end: usize,
}

impl ZRange {
    pub fn all(nz: usize) -> Self {
        ZRange { start: 0, end: nz }
    }

    /// Slices with `z >= split * nz`.
    pub fn fine(nz: usize, split: f64) -> Self {
        let start = ((split * nz as f64) - 1e-9).ceil().max(0.0) as usize;
        ZRange { start: start.min(nz), end: nz }
    }

    pub fn parse(name: &str, nz: usize) -> Result<Self> {
        match name {
            "all" => Ok(ZRange::all(nz)),
            "fine" => Ok(ZRange::fine(nz, FINE_Z_SPLIT)),
            other => Err(Error::InvalidArgument(format!("unknown z-range `{other}` (expected all|fine)"))),
        }
    }

    fn check(&self, dims: Dims) -> Result<std::ops::Range<usize>> {
        if self.start >= self.end || self.end > dims.nz {
            return Err(Error::Metric(format!(
                "empty or out-of-bounds z-range {}..{} for nz = {}",
                self.start, self.end, dims.nz
            )));
        }
        let p = dims.plane();
        Ok(self.start * p..self.end * p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    fn log_weighted_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        self.weight.ln() - 0.5 * (2.0 * std::f64::consts::PI * self.variance).ln() - d * d / (2.0 * self.variance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmFit {
    /// Lower-mean component first.
    pub components: [Gaussian; 2],
    pub threshold: f64,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl EmFit {
    /// `log(w_lo N_lo(x)) - log(w_hi N_hi(x))`; zero at the threshold.
    pub fn log_posterior_ratio(&self, x: f64) -> f64 {
        self.components[0].log_weighted_pdf(x) - self.components[1].log_weighted_pdf(x)
    }
}

const EM_MAX_ITERS: usize = 200;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits a two-component Gaussian mixture to `values`.
pub fn fit_two_gaussians(values: &[f64]) -> Result<EmFit> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Binarize("need at least two values".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Binarize("constant (or non-finite) input cannot be split into two classes".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (mut m_lo, mut m_hi) = (percentile(&sorted, 0.10), percentile(&sorted, 0.90));
    if !(m_hi > m_lo) {
        m_lo = sorted[0];
        m_hi = sorted[n - 1];
    }
    match run_em(values, [m_lo, m_hi], var) {
        Ok(fit) => Ok(fit),
        Err(_) => {
            let jitter = 0.25 * var.sqrt();
            run_em(values, [m_lo - jitter, m_hi + jitter], var)
        }
    }
}

fn run_em(values: &[f64], means: [f64; 2], global_var: f64) -> Result<EmFit> {
    let n = values.len() as f64;
    // Variance floor keeps exactly separable clusters from collapsing.
    let reg = 1e-6 * global_var;
    let mut comp = [
        Gaussian { weight: 0.5, mean: means[0], variance: global_var },
        Gaussian { weight: 0.5, mean: means[1], variance: global_var },
    ];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    let tol = 1e-8 * n;
    for it in 1..=EM_MAX_ITERS {
        iterations = it;
        let mut s0 = [0.0f64; 2];
        let mut s1 = [0.0f64; 2];
        ll = 0.0;
        for &x in values {
            let l0 = comp[0].log_weighted_pdf(x);
            let l1 = comp[1].log_weighted_pdf(x);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            ll += lse;
            let r0 = (l0 - lse).exp();
            let r1 = (l1 - lse).exp();
            s0[0] += r0;
            s0[1] += r1;
            s1[0] += r0 * x;
            s1[1] += r1 * x;
        }
        let mut new = comp;
        for k in 0..2 {
            if s0[k] < 1e-9 * n {
                return Err(Error::Binarize(format!("component {k} collapsed to zero weight")));
            }
            new[k].weight = s0[k] / n;
            new[k].mean = s1[k] / s0[k];
        }
        let mut s2 = [0.0f64; 2];
        for &x in values {
            let l0 = comp[0].log_weighted_pdf(x);
            let l1 = comp[1].log_weighted_pdf(x);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            s2[0] += (l0 - lse).exp() * (x - new[0].mean).powi(2);
            s2[1] += (l1 - lse).exp() * (x - new[1].mean).powi(2);
        }
        for k in 0..2 {
            new[k].variance = s2[k] / s0[k] + reg;
            if !(new[k].variance >= 1e-18) {
                return Err(Error::Binarize(format!("component {k} variance collapsed")));
            }
        }
        comp = new;
        if (ll - prev_ll).abs() < tol {
            break;
        }
        prev_ll = ll;
    }
    if comp[0].mean > comp[1].mean {
        comp.swap(0, 1);
    }
    let mut fit = EmFit {
        components: comp,
        threshold: 0.0,
        iterations,
        log_likelihood: ll,
    };
    fit.threshold = equal_posterior_point(&fit);
    Ok(fit)
}

/// Point between the two means where both weighted densities agree.
fn equal_posterior_point(fit: &EmFit) -> f64 {
    let [lo, hi] = fit.components;
    let mid = 0.5 * (lo.mean + hi.mean);
    let a = -0.5 / lo.variance + 0.5 / hi.variance;
    let b = lo.mean / lo.variance - hi.mean / hi.variance;
    let c = -lo.mean * lo.mean / (2.0 * lo.variance) + hi.mean * hi.mean / (2.0 * hi.variance)
        + (lo.weight / hi.weight).ln()
        - 0.5 * (lo.variance / hi.variance).ln();
    let inside = |x: f64| x.is_finite() && x >= lo.mean && x <= hi.mean;
    let scale = a.abs() * (hi.mean - lo.mean).max(f64::MIN_POSITIVE);
    let candidate = if scale < 1e-12 * b.abs() {
        Some(-c / b)
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            None
        } else {
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            [q / a, c / q]
                .into_iter()
                .filter(|&x| inside(x))
                .min_by(|x, y| (x - mid).abs().total_cmp(&(y - mid).abs()))
        }
    };
    match candidate {
        Some(x) if inside(x) => x,
        _ => {
            // No crossing between the means: bisect if the sign changes.
            let (mut l, mut h) = (lo.mean, hi.mean);
            let (fl, fh) = (fit.log_posterior_ratio(l), fit.log_posterior_ratio(h));
            if fl.signum() == fh.signum() {
                return mid;
            }
            for _ in 0..200 {
                let m = 0.5 * (l + h);
                if fit.log_posterior_ratio(m).signum() == fl.signum() {
                    l = m;
                } else {
                    h = m;
                }
            }
            0.5 * (l + h)
        }
    }
}

/// Occupancy by EM mixture fit: foreground is the higher-mean component.
pub fn binarize_em(vol: &Volume3D) -> Result<(BinaryVolume, EmFit)> {
    let fit = fit_two_gaussians(vol.values())?;
    Ok((BinaryVolume::from_threshold(vol, fit.threshold), fit))
}

/// Fraction of voxels in `z_range` where the two occupancies disagree.
pub fn ber(a: &BinaryVolume, b: &BinaryVolume, z_range: ZRange) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{} vs {}", a.dims(), b.dims())));
    }
    let r = z_range.check(a.dims())?;
    let n = r.len();
    let wrong = a.bits()[r.clone()].iter().zip(&b.bits()[r]).filter(|(x, y)| x != y).count();
    Ok(wrong as f64 / n as f64)
}

/// Pearson correlation of voxel values in `z_range`.
pub fn pcc(a: &Volume3D, b: &Volume3D, z_range: ZRange) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{} vs {}", a.dims(), b.dims())));
    }
    let r = z_range.check(a.dims())?;
    let (xa, xb) = (&a.values()[r.clone()], &b.values()[r]);
    let n = xa.len() as f64;
    let ma = xa.iter().sum::<f64>() / n;
    let mb = xb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in xa.iter().zip(xb) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("PCC undefined for a constant volume".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Centred power spectrum `|DFT(vol)|^2` with DC at `(nx/2, ny/2, nz/2)`.
///
/// Bins `k` and `-k` are averaged, which is exact for real input and makes
/// the point symmetry hold bit-for-bit.
pub fn psd(vol: &Volume3D) -> Volume3D {
    let d = vol.dims();
    let mut buf = to_complex(vol.values());
    fftn(&mut buf, &d.as_array(), Direction::Forward);
    let power: Vec<f64> = buf.iter().map(|c| c.norm_sqr()).collect();
    let neg = |i: usize, n: usize| (n - i) % n;
    let shift = |c: usize, n: usize| (c + n - n / 2) % n;
    Volume3D::from_fn(d, vol.voxel_nm(), |cx, cy, cz| {
        let (x, y, z) = (shift(cx, d.nx), shift(cy, d.ny), shift(cz, d.nz));
        let p = power[d.index(x, y, z)];
        let q = power[d.index(neg(x, d.nx), neg(y, d.ny), neg(z, d.nz))];
        0.5 * (p + q)
    })
}

/// Share of non-DC spectral energy inside the missing cone, over the
/// Nyquist ball.
pub fn cone_energy_ratio(spectrum: &Volume3D, theta_deg: f64) -> Result<f64> {
    if spectrum.values().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Metric("spectrum must be non-negative and finite".into()));
    }
    let mask = missing_cone_mask(spectrum.dims(), theta_deg)?;
    let ball = nyquist_ball(spectrum.dims());
    let (mut inside, mut total) = (0.0, 0.0);
    for ((&v, &m), &b) in spectrum.values().iter().zip(&mask).zip(&ball) {
        if b {
            total += v;
            if m {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::Metric("spectrum has no non-DC energy".into()));
    }
    Ok(inside / total)
}

/// Metrics for one reconstruction against a reference occupancy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub label: String,
    pub ber_all: f64,
    pub ber_fine: f64,
    pub pcc: f64,
    pub pcc_fine: f64,
    pub cone_energy_ratio: f64,
    pub em_threshold: f64,
    /// Loss-trace file, or the number of logged iterations.
    pub loss_trace: String,
    pub config_hash: String,
    /// Which values each metric was computed on.
    pub method: String,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "label,ber_all,ber_fine,pcc,pcc_fine,cone_energy_ratio,em_threshold,loss_trace,config_hash";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            self.label,
            self.ber_all,
            self.ber_fine,
            self.pcc,
            self.pcc_fine,
            self.cone_energy_ratio,
            self.em_threshold,
            self.loss_trace,
            self.config_hash
        )
    }
}

/// How the reference occupancy is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reference {
    /// Threshold the known phantom at half contrast.
    #[default]
    Phantom,
    /// EM-binarize the reference volume (e.g. a dense reconstruction).
    EmBinarized,
}

pub fn evaluate(
    label: &str,
    recon: &Volume3D,
    reference: &Volume3D,
    reference_kind: Reference,
    theta_deg: f64,
) -> Result<MetricsRecord> {
    if !recon.same_grid(reference) {
        return Err(Error::Shape(format!(
            "reconstruction {} @ {} nm vs reference {} @ {} nm",
            recon.dims(),
            recon.voxel_nm(),
            reference.dims(),
            reference.voxel_nm()
        )));
    }
    let nz = recon.dims().nz;
    let (all, fine) = (ZRange::all(nz), ZRange::fine(nz, FINE_Z_SPLIT));
    let (bin, fit) = binarize_em(recon)?;
    let truth = match reference_kind {
        Reference::Phantom => occupancy_mask(reference),
        Reference::EmBinarized => binarize_em(reference)?.0,
    };
    Ok(MetricsRecord {
        label: label.to_string(),
        ber_all: ber(&bin, &truth, all)?,
        ber_fine: ber(&bin, &truth, fine)?,
        pcc: pcc(recon, reference, all)?,
        pcc_fine: pcc(recon, reference, fine)?,
        cone_energy_ratio: cone_energy_ratio(&psd(recon), theta_deg)?,
        em_threshold: fit.threshold,
        loss_trace: String::new(),
        config_hash: String::new(),
        method: "ber: EM-binarized reconstruction vs reference occupancy; pcc: raw values".into(),
    })
}
