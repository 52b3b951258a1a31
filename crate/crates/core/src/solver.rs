//! Generator fitting: data fidelity through the projector plus
//! depth-dependent smoothed total variation, minimized over network weights
//! with Adam.

use serde::{Deserialize, Serialize};

use crate::dipnet::{ArchConfig, DipNetwork, NoiseInput};
use crate::error::{Error, Result};
use crate::geometry::LaminoGeometry;
use crate::preproc::HighPass;
use crate::projector::{back_project, forward_project_all, ProjectionStack};
use crate::volume::{Dims, Volume3D};

pub const TV_EPS: f64 = 1e-8;

/// Per-slice TV weight: `coarse` below `z_split_frac * nz`, `fine` above.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaMap {
    pub z_split_frac: f64,
    pub lambda_coarse: f64,
    pub lambda_fine: f64,
    values: Vec<f64>,
}

impl LambdaMap {
    pub fn new(nz: usize, z_split_frac: f64, lambda_coarse: f64, lambda_fine: f64) -> Result<Self> {
        if !(lambda_coarse >= 0.0 && lambda_fine >= 0.0) || !lambda_coarse.is_finite() || !lambda_fine.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "TV weights must be finite and >= 0, got {lambda_coarse}, {lambda_fine}"
            )));
        }
        if !(0.0..=1.0).contains(&z_split_frac) {
            return Err(Error::InvalidArgument(format!("z split must be in [0, 1], got {z_split_frac}")));
        }
        let split = z_split_frac * nz as f64;
        let values = (0..nz)
            .map(|z| if (z as f64) < split { lambda_coarse } else { lambda_fine })
            .collect();
        Ok(LambdaMap { z_split_frac, lambda_coarse, lambda_fine, values })
    }

    pub fn uniform(nz: usize, lambda: f64) -> Result<Self> {
        Self::new(nz, 1.0, lambda, lambda)
    }

    pub fn nz(&self) -> usize {
        self.values.len()
    }

    pub fn at(&self, z: usize) -> f64 {
        self.values[z]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `sum lambda(z) sqrt(dx^2 + dy^2 + dz^2 + eps^2)` with forward differences
/// (zero across the last slice on each axis) and its exact gradient.
pub fn tv_value_grad(vol: &Volume3D, lmap: &LambdaMap) -> Result<(f64, Volume3D)> {
    let d = vol.dims();
    if lmap.nz() != d.nz {
        return Err(Error::Shape(format!("lambda map has {} slices, volume has {}", lmap.nz(), d.nz)));
    }
    let v = vol.values();
    let mut grad = vec![0.0; d.len()];
    let mut value = 0.0;
    let (sx, sy, sz) = (1, d.nx, d.plane());
    for z in 0..d.nz {
        let lam = lmap.at(z);
        if lam == 0.0 {
            continue;
        }
        for y in 0..d.ny {
            for x in 0..d.nx {
                let i = d.index(x, y, z);
                let dx = if x + 1 < d.nx { v[i + sx] - v[i] } else { 0.0 };
                let dy = if y + 1 < d.ny { v[i + sy] - v[i] } else { 0.0 };
                let dz = if z + 1 < d.nz { v[i + sz] - v[i] } else { 0.0 };
                let s = (dx * dx + dy * dy + dz * dz + TV_EPS * TV_EPS).sqrt();
                value += lam * s;
                let (gx, gy, gz) = (lam * dx / s, lam * dy / s, lam * dz / s);
                grad[i] -= gx + gy + gz;
                if x + 1 < d.nx {
                    grad[i + sx] += gx;
                }
                if y + 1 < d.ny {
                    grad[i + sy] += gy;
                }
                if z + 1 < d.nz {
                    grad[i + sz] += gz;
                }
            }
        }
    }
    Ok((value, Volume3D::from_values(d, vol.voxel_nm(), grad)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The rate is halved for steps `t > halve_after`.
    pub halve_after: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halve_after: 1000,
        }
    }
}

impl AdamConfig {
    /// Rate used by step `t` (1-based).
    pub fn rate_at(&self, t: u64) -> f64 {
        if t <= self.halve_after {
            self.learning_rate
        } else {
            self.learning_rate / 2.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Adam { config, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = &self.config;
        let lr = c.rate_at(self.t);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_iters: usize,
    pub adam: AdamConfig,
    pub z_split_frac: f64,
    pub lambda_coarse: f64,
    pub lambda_fine: f64,
    /// Gaussian scale of the measurement high-pass; `None` means `nx / 8`.
    pub hpf_sigma_px: Option<f64>,
    pub no_hpf: bool,
    pub no_tv: bool,
    /// Also filter the model projections, not only the measurements.
    pub symmetric_hpf: bool,
    /// Divide the data term by the number of measured pixels.
    pub normalize_data_term: bool,
    pub net_seed: u64,
    pub noise_seed: u64,
    /// Keep a volume every `snapshot_every` iterations; 0 disables.
    pub snapshot_every: usize,
    #[serde(skip)]
    pub arch: ArchConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_iters: 1500,
            adam: AdamConfig::default(),
            z_split_frac: 0.70,
            lambda_coarse: 3e-6,
            lambda_fine: 3e-8,
            hpf_sigma_px: None,
            no_hpf: false,
            no_tv: false,
            symmetric_hpf: false,
            normalize_data_term: false,
            net_seed: 1,
            noise_seed: 2,
            snapshot_every: 100,
            arch: ArchConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn hpf_sigma(&self, dims: Dims) -> f64 {
        self.hpf_sigma_px.unwrap_or(dims.nx as f64 / 8.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub data_term: f64,
    pub tv_term: f64,
    pub total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,data_term,tv_term,total";

    pub fn csv_row(&self) -> String {
        format!("{},{:.17e},{:.17e},{:.17e}", self.iteration, self.data_term, self.tv_term, self.total)
    }
}

/// Fixed parts of the objective: geometry, (filtered) targets, TV weights.
#[derive(Clone, Debug)]
pub struct Objective {
    pub geom: LaminoGeometry,
    pub target: ProjectionStack,
    pub model_filter: Option<HighPass>,
    pub lambda: Option<LambdaMap>,
    pub data_scale: f64,
}

impl Objective {
    /// Precomputes the filtered measurements once per run.
    pub fn new(stack: &ProjectionStack, geom: &LaminoGeometry, dims: Dims, cfg: &SolverConfig) -> Result<Self> {
        geom.validate()?;
        stack.check_matches(geom)?;
        let filter = if cfg.no_hpf {
            None
        } else {
            Some(HighPass::new(geom.det_nu, geom.det_nv, cfg.hpf_sigma(dims))?)
        };
        let target = match &filter {
            Some(f) => f.apply_stack(stack)?,
            None => stack.clone(),
        };
        let lambda = if cfg.no_tv {
            None
        } else {
            Some(LambdaMap::new(dims.nz, cfg.z_split_frac, cfg.lambda_coarse, cfg.lambda_fine)?)
        };
        let data_scale = if cfg.normalize_data_term {
            1.0 / (geom.n_angles() * geom.det_nu * geom.det_nv) as f64
        } else {
            1.0
        };
        Ok(Objective {
            geom: geom.clone(),
            target,
            model_filter: filter.filter(|_| cfg.symmetric_hpf),
            lambda,
            data_scale,
        })
    }

    /// Loss terms and the gradient with respect to the volume.
    pub fn value_grad(&self, x: &Volume3D) -> Result<(LossRecord, Volume3D)> {
        let mut model = forward_project_all(x, &self.geom)?;
        if let Some(f) = &self.model_filter {
            model = f.apply_stack(&model)?;
        }
        let mut residual = model;
        for (r, t) in residual.frames.iter_mut().zip(&self.target.frames) {
            r.pixels.iter_mut().zip(&t.pixels).for_each(|(a, b)| *a -= b);
        }
        let data_term = 0.5 * self.data_scale * residual.dot(&residual);
        if let Some(f) = &self.model_filter {
            // The periodic Gaussian filter is symmetric, so it is its own adjoint.
            residual = f.apply_stack(&residual)?;
        }
        let mut grad = back_project(&residual, &self.geom, x.dims())?;
        grad.scale(self.data_scale);
        let tv_term = match &self.lambda {
            Some(l) => {
                let (v, g) = tv_value_grad(x, l)?;
                grad.add_assign(&g);
                v
            }
            None => 0.0,
        };
        Ok((LossRecord { iteration: 0, data_term, tv_term, total: data_term + tv_term }, grad))
    }
}

/// Loss, parameter gradients and the current volume `x = T_w(z)`.
pub fn loss_and_grad(net: &DipNetwork, z: &NoiseInput, objective: &Objective) -> Result<(LossRecord, Vec<f64>, Volume3D)> {
    let (x, cache) = net.forward(z)?;
    let (loss, grad_x) = objective.value_grad(&x)?;
    let grads = net.backward(z, &cache, &grad_x)?;
    Ok((loss, grads, x))
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub volume: Volume3D,
    /// One record per optimizer step plus the final state.
    pub trace: Vec<LossRecord>,
    pub snapshots: Vec<(usize, Volume3D)>,
    pub network: DipNetwork,
}

pub fn reconstruct(stack: &ProjectionStack, geom: &LaminoGeometry, dims: Dims, voxel_nm: f64, cfg: &SolverConfig) -> Result<Reconstruction> {
    reconstruct_with(stack, geom, dims, voxel_nm, cfg, |_| {})
}

/// Runs the fit, calling `on_step` after each logged loss.
pub fn reconstruct_with(
    stack: &ProjectionStack,
    geom: &LaminoGeometry,
    dims: Dims,
    voxel_nm: f64,
    cfg: &SolverConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Reconstruction> {
    let objective = Objective::new(stack, geom, dims, cfg)?;
    let mut net = DipNetwork::new(cfg.arch.clone(), dims, voxel_nm, cfg.net_seed)?;
    let z = NoiseInput::new(dims, cfg.noise_seed);
    let mut adam = Adam::new(cfg.adam.clone(), net.n_params());
    let mut trace = Vec::with_capacity(cfg.n_iters + 1);
    let mut snapshots = Vec::new();
    let mut last_finite: Option<Volume3D> = None;

    let diverged = |iteration: usize, detail: String, last: Option<Volume3D>| Error::Diverged {
        iteration,
        detail,
        last_finite: last.map(Box::new),
    };

    for it in 0..cfg.n_iters {
        let (mut loss, grads, x) = loss_and_grad(&net, &z, &objective)?;
        loss.iteration = it;
        if !loss.total.is_finite() || !x.is_finite() {
            return Err(diverged(it, format!("non-finite loss {}", loss.total), last_finite));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged(it, "non-finite gradient".into(), Some(x)));
        }
        trace.push(loss);
        on_step(&loss);
        if cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0 {
            snapshots.push((it, x.clone()));
        }
        last_finite = Some(x);
        adam.step(net.params_mut(), &grads)?;
    }

    let (volume, _) = net.forward(&z)?;
    let (mut loss, _) = objective.value_grad(&volume)?;
    loss.iteration = cfg.n_iters;
    if !loss.total.is_finite() || !volume.is_finite() {
        return Err(diverged(cfg.n_iters, format!("non-finite loss {}", loss.total), last_finite));
    }
    trace.push(loss);
    on_step(&loss);
    Ok(Reconstruction { volume, trace, snapshots, network: net })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_ic_phantom, PhantomSpec};
    use crate::projector::forward_project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64, amp: f64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(dims, 1.0, |_, _, _| rng.gen_range(-amp..amp))
    }

    /// Direct transcription of the TV sum, no shared code with the kernel.
    fn tv_oracle(vol: &Volume3D, lam: impl Fn(usize) -> f64) -> f64 {
        let d = vol.dims();
        let at = |x: usize, y: usize, z: usize| vol.get(x, y, z);
        let mut total = 0.0;
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let fx = if x + 1 < d.nx { at(x + 1, y, z) - at(x, y, z) } else { 0.0 };
                    let fy = if y + 1 < d.ny { at(x, y + 1, z) - at(x, y, z) } else { 0.0 };
                    let fz = if z + 1 < d.nz { at(x, y, z + 1) - at(x, y, z) } else { 0.0 };
                    total += lam(z) * (fx * fx + fy * fy + fz * fz + TV_EPS * TV_EPS).sqrt();
                }
            }
        }
        total
    }

    #[test]
    fn lambda_map_splits_at_fraction() {
        let l = LambdaMap::new(10, 0.7, 3e-6, 3e-8).unwrap();
        assert_eq!(l.at(6), 3e-6);
        assert_eq!(l.at(7), 3e-8);
        assert!(LambdaMap::new(4, 0.5, -1.0, 0.0).is_err());
        assert!(LambdaMap::new(4, 1.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn tv_of_constant_is_eps_floor() {
        let d = Dims::new(5, 4, 3);
        let vol = Volume3D::from_fn(d, 1.0, |_, _, _| 0.7);
        let l = LambdaMap::new(3, 0.5, 2.0, 1.0).unwrap();
        let (v, g) = tv_value_grad(&vol, &l).unwrap();
        let expect: f64 = (0..3).map(|z| l.at(z) * 20.0 * TV_EPS).sum();
        assert!((v - expect).abs() < 1e-20);
        assert!(v <= TV_EPS * 60.0 * 2.0);
        assert!(g.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tv_of_unit_step_counts_faces() {
        let d = Dims::new(4, 4, 4);
        let vol = Volume3D::from_fn(d, 1.0, |x, _, _| if x >= 2 { 1.0 } else { 0.0 });
        let l = LambdaMap::uniform(4, 1.0).unwrap();
        let (v, _) = tv_value_grad(&vol, &l).unwrap();
        // 16 faces between x=1 and x=2, each contributing sqrt(1 + eps^2).
        let faces = 16.0 * (1.0 + TV_EPS * TV_EPS).sqrt() + 48.0 * TV_EPS;
        assert!((v - faces).abs() < 1e-10);
        assert!((v - tv_oracle(&vol, |_| 1.0)).abs() < 1e-10);
    }

    #[test]
    fn tv_matches_oracle_and_finite_differences() {
        let d = Dims::new(6, 6, 6);
        let vol = random_volume(d, 3, 1.0);
        let l = LambdaMap::new(6, 0.5, 1.5, 0.25).unwrap();
        let (v, g) = tv_value_grad(&vol, &l).unwrap();
        assert!((v - tv_oracle(&vol, |z| l.at(z))).abs() < 1e-10 * v);
        let h = 1e-6;
        for i in (0..d.len()).step_by(7) {
            let mut p = vol.clone();
            p.values_mut()[i] += h;
            let mut m = vol.clone();
            m.values_mut()[i] -= h;
            let fd = (tv_oracle(&p, |z| l.at(z)) - tv_oracle(&m, |z| l.at(z))) / (2.0 * h);
            let rel = (fd - g.values()[i]).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-6, "voxel {i}: fd {fd} analytic {}", g.values()[i]);
        }
    }

    #[test]
    fn tv_rejects_wrong_depth() {
        let vol = Volume3D::zeros(Dims::new(2, 2, 3), 1.0);
        assert!(tv_value_grad(&vol, &LambdaMap::uniform(4, 1.0).unwrap()).is_err());
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![3.0, -0.25, 1e-3];
        adam.step(&mut p, &g).unwrap();
        let d = [p[0] - 1.0, p[1] + 2.0, p[2] - 0.5];
        for (di, gi) in d.iter().zip(&g) {
            assert!((di.abs() - 2e-4).abs() < 1e-7);
            assert_eq!(di.signum(), -gi.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![0.3, -0.1];
        for _ in 0..50 {
            adam.step(&mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, vec![0.3, -0.1]);
        assert!(adam.step(&mut p, &[0.0]).is_err());
    }

    #[test]
    fn adam_schedule_halves_after_1000() {
        let c = AdamConfig::default();
        assert_eq!(c.rate_at(1), 2e-4);
        assert_eq!(c.rate_at(1000), 2e-4);
        assert_eq!(c.rate_at(1001), 1e-4);
        assert_eq!(c.rate_at(1500), 1e-4);
    }

    fn tiny_setup(n_angles: usize) -> (Dims, LaminoGeometry, SolverConfig) {
        let dims = Dims::new(8, 8, 4);
        let geom = LaminoGeometry::full_circle(61.0, n_angles, dims, 1.0, 0.5).unwrap();
        let cfg = SolverConfig {
            arch: ArchConfig { stages: 1, widths: vec![2], bottleneck_width: 2, ..ArchConfig::default() },
            lambda_coarse: 1e-3,
            lambda_fine: 1e-4,
            hpf_sigma_px: Some(2.0),
            ..SolverConfig::default()
        };
        (dims, geom, cfg)
    }

    #[test]
    fn exact_fit_without_tv_has_zero_loss() {
        let (dims, geom, mut cfg) = tiny_setup(3);
        cfg.no_tv = true;
        cfg.no_hpf = true;
        let net = DipNetwork::new(cfg.arch.clone(), dims, 1.0, cfg.net_seed).unwrap();
        let z = NoiseInput::new(dims, cfg.noise_seed);
        let (x, _) = net.forward(&z).unwrap();
        let y = forward_project_all(&x, &geom).unwrap();
        let obj = Objective::new(&y, &geom, dims, &cfg).unwrap();
        let (loss, grads, _) = loss_and_grad(&net, &z, &obj).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_angle_loss_matches_direct_residual() {
        let dims = Dims::new(8, 8, 4);
        let geom = LaminoGeometry::new(90.0, vec![0.0], 9, 9, 1.0, 1.0).unwrap();
        let cfg = SolverConfig { no_tv: true, no_hpf: true, ..tiny_setup(1).2 };
        let x = random_volume(dims, 5, 0.03);
        let y = Volume3D::from_fn(dims, 1.0, |a, b, c| ((a + 2 * b + 3 * c) % 5) as f64 * 0.01);
        let meas = forward_project_all(&y, &geom).unwrap();
        let obj = Objective::new(&meas, &geom, dims, &cfg).unwrap();
        let (loss, _) = obj.value_grad(&x).unwrap();
        let px = forward_project(&x, &geom, 0.0).unwrap();
        let py = forward_project(&y, &geom, 0.0).unwrap();
        let direct = 0.5 * px.pixels.iter().zip(&py.pixels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        assert!((loss.data_term - direct).abs() < 1e-12 * direct.max(1.0));
        assert_eq!(loss.tv_term, 0.0);
    }

    /// Richardson-extrapolated central difference of the full objective.
    fn fd_param(net: &mut DipNetwork, z: &NoiseInput, obj: &Objective, i: usize, h: f64) -> f64 {
        let p0 = net.params()[i];
        let mut eval = |d: f64| {
            net.params_mut()[i] = p0 + d;
            obj.value_grad(&net.forward(z).unwrap().0).unwrap().0.total
        };
        let c = |e: &mut dyn FnMut(f64) -> f64, h: f64| (e(h) - e(-h)) / (2.0 * h);
        let coarse = c(&mut eval, h);
        let fine = c(&mut eval, h / 2.0);
        net.params_mut()[i] = p0;
        (4.0 * fine - coarse) / 3.0
    }

    pub(crate) fn objective_fd_check(cfg: &SolverConfig, seed: u64, samples: usize, h: f64) -> f64 {
        let (dims, geom, _) = tiny_setup(3);
        let truth = random_volume(dims, seed, 0.03);
        let meas = forward_project_all(&truth, &geom).unwrap();
        let obj = Objective::new(&meas, &geom, dims, cfg).unwrap();
        let mut net = DipNetwork::new(cfg.arch.clone(), dims, 1.0, cfg.net_seed).unwrap();
        let z = NoiseInput::new(dims, cfg.noise_seed);
        let (_, grads, _) = loss_and_grad(&net, &z, &obj).unwrap();
        let gmax = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let i = rng.gen_range(0..net.n_params());
            let fd = fd_param(&mut net, &z, &obj, i, h);
            let scale = fd.abs().max(grads[i].abs()).max(1e-6 * gmax);
            worst = worst.max((fd - grads[i]).abs() / scale);
        }
        worst
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (_, _, mut cfg) = tiny_setup(3);
        // At the default gain the output is ~1e-5 and neighbour differences sit
        // inside the TV smoothing scale, where finite differences are no oracle.
        cfg.arch.init_gain = 1.5;
        let cases = [
            SolverConfig { no_tv: true, ..cfg.clone() },
            cfg.clone(),
            SolverConfig { symmetric_hpf: true, ..cfg.clone() },
            SolverConfig { no_hpf: true, normalize_data_term: true, ..cfg },
        ];
        for (k, c) in cases.iter().enumerate() {
            let worst = objective_fd_check(c, 11 + k as u64, 40, 1e-4);
            assert!(worst < 1e-3, "case {k}: worst relative error {worst}");
        }
    }

    #[test]
    fn zero_iterations_return_initial_output() {
        let (dims, geom, mut cfg) = tiny_setup(3);
        cfg.n_iters = 0;
        let truth = random_volume(dims, 2, 0.03);
        let meas = forward_project_all(&truth, &geom).unwrap();
        let rec = reconstruct(&meas, &geom, dims, 1.0, &cfg).unwrap();
        let net = DipNetwork::new(cfg.arch.clone(), dims, 1.0, cfg.net_seed).unwrap();
        let (x0, _) = net.forward(&NoiseInput::new(dims, cfg.noise_seed)).unwrap();
        assert_eq!(rec.volume, x0);
        assert_eq!(rec.trace.len(), 1);
        assert!(rec.snapshots.is_empty());
    }

    #[test]
    fn short_run_reduces_data_term_and_is_deterministic() {
        let dims = Dims::new(16, 16, 8);
        let spec = PhantomSpec { dims, coarse_pitch_px: 4, fine_pitch_px: 2, n_layers: 4, voxel_nm: 1.0, ..PhantomSpec::default() };
        let ph = generate_ic_phantom(&spec).unwrap();
        let geom = LaminoGeometry::full_circle(61.0, 12, dims, 1.0, 1.0).unwrap();
        let meas = forward_project_all(&ph, &geom).unwrap();
        let cfg = SolverConfig {
            n_iters: 60,
            snapshot_every: 25,
            arch: ArchConfig { stages: 2, widths: vec![4, 8], bottleneck_width: 8, ..ArchConfig::default() },
            adam: AdamConfig { learning_rate: 5e-3, ..AdamConfig::default() },
            ..SolverConfig::default()
        };
        let mut seen = 0;
        let a = reconstruct_with(&meas, &geom, dims, 1.0, &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 61);
        assert_eq!(a.trace.len(), 61);
        assert_eq!(a.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 25, 50]);
        assert!(a.trace.iter().all(|r| r.total.is_finite()));
        assert!(a.trace[60].data_term < 0.9 * a.trace[0].data_term);
        assert!(a.volume.max_abs() < 0.03);
        let b = reconstruct(&meas, &geom, dims, 1.0, &cfg).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn divergence_keeps_last_finite_volume() {
        let (dims, geom, mut cfg) = tiny_setup(3);
        cfg.n_iters = 3;
        let mut meas = forward_project_all(&random_volume(dims, 4, 0.03), &geom).unwrap();
        meas.frames[1].pixels[0] = f64::NAN;
        cfg.no_hpf = true;
        match reconstruct(&meas, &geom, dims, 1.0, &cfg) {
            Err(Error::Diverged { iteration, last_finite, .. }) => {
                assert_eq!(iteration, 0);
                assert!(last_finite.is_none());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
