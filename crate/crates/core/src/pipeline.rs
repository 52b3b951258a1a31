//! End-to-end runs driven by a [`RunConfig`]: phantom, dense scan, optional
//! jitter and alignment, decimation, reconstruction and metrics.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsRecord};
use crate::fbp::fbp_reconstruct;
use crate::geometry::LaminoGeometry;
use crate::phantom::generate_ic_phantom;
use crate::preproc::{align_projections, jitter_projections, Alignment, Shift};
use crate::projector::{forward_project_all, ProjectionStack};
use crate::solver::{reconstruct_with, LossRecord, Reconstruction};
use crate::volume::Volume3D;

/// Runs `f` on a private single-thread pool when `sequential` is set.
pub fn with_threads<T: Send>(sequential: bool, f: impl FnOnce() -> T + Send) -> Result<T> {
    if !sequential {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Measurements ready for reconstruction.
#[derive(Clone, Debug)]
pub struct Scan {
    pub geom: LaminoGeometry,
    pub stack: ProjectionStack,
    /// Injected shifts of the dense frames, if jitter was requested.
    pub true_shifts: Option<Vec<Shift>>,
    pub alignment: Option<Alignment>,
}

pub fn dense_scan(cfg: &RunConfig, phantom: &Volume3D) -> Result<(LaminoGeometry, ProjectionStack)> {
    let geom = cfg.dense_geometry()?;
    let stack = forward_project_all(phantom, &geom)?;
    Ok((geom, stack))
}

/// Jitters and aligns the dense scan as configured, then keeps every
/// `decimate`-th frame. Alignment runs on the dense scan, where consecutive
/// views are most similar.
pub fn prepare_scan(cfg: &RunConfig, dense_geom: &LaminoGeometry, dense: &ProjectionStack) -> Result<Scan> {
    let mut stack = dense.clone();
    let mut true_shifts = None;
    if cfg.preproc.jitter_px > 0.0 {
        let (j, shifts) = jitter_projections(&stack, cfg.preproc.jitter_px, cfg.preproc.jitter_seed)?;
        stack = j;
        true_shifts = Some(shifts);
    }
    let mut alignment = None;
    if cfg.preproc.align {
        let a = align_projections(&stack, dense_geom.theta_deg)?;
        stack = a.stack.clone();
        alignment = Some(a);
    }
    let k = cfg.geometry.decimate;
    Ok(Scan {
        geom: dense_geom.decimate(k)?,
        stack: stack.decimate(k)?,
        true_shifts,
        alignment,
    })
}

/// RMS distance between estimated and injected shifts, both made zero-mean.
pub fn shift_rms(truth: &[Shift], estimate: &[Shift]) -> Result<f64> {
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(Error::Shape(format!("{} true shifts vs {} estimates", truth.len(), estimate.len())));
    }
    let n = truth.len() as f64;
    let mean = |s: &[Shift]| (s.iter().map(|x| x.du).sum::<f64>() / n, s.iter().map(|x| x.dv).sum::<f64>() / n);
    let (tu, tv) = mean(truth);
    let (eu, ev) = mean(estimate);
    let ss: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| ((t.du - tu) - (e.du - eu)).powi(2) + ((t.dv - tv) - (e.dv - ev)).powi(2))
        .sum();
    Ok((ss / n).sqrt())
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub phantom: Volume3D,
    pub scan: Scan,
    pub fbp: Volume3D,
    pub fbp_metrics: MetricsRecord,
    pub dip: Reconstruction,
    pub dip_metrics: MetricsRecord,
}

pub fn hash_hex(cfg: &RunConfig) -> String {
    cfg.hash().iter().map(|b| format!("{b:02x}")).collect()
}

/// FBP and generator reconstructions of one configured scan, with metrics.
pub fn run_pipeline(cfg: &RunConfig, on_step: impl FnMut(&LossRecord) + Send) -> Result<PipelineOutput> {
    with_threads(cfg.sequential, || run_inner(cfg, on_step))?
}

fn run_inner(cfg: &RunConfig, on_step: impl FnMut(&LossRecord)) -> Result<PipelineOutput> {
    cfg.validate()?;
    let phantom = generate_ic_phantom(&cfg.phantom)?;
    let (dense_geom, dense) = dense_scan(cfg, &phantom)?;
    let scan = prepare_scan(cfg, &dense_geom, &dense)?;
    let dims = phantom.dims();
    let theta = cfg.geometry.theta_deg;
    let hash = hash_hex(cfg);

    let fbp = fbp_reconstruct(&scan.stack, &scan.geom, dims, cfg.eval.fbp_window)?;
    let mut fbp_metrics = evaluate("fbp", &fbp, &phantom, cfg.eval.reference, theta)?;
    fbp_metrics.config_hash = hash.clone();

    let dip = reconstruct_with(&scan.stack, &scan.geom, dims, phantom.voxel_nm(), &cfg.solver, on_step)?;
    let mut dip_metrics = evaluate(&ablation_label(cfg), &dip.volume, &phantom, cfg.eval.reference, theta)?;
    dip_metrics.config_hash = hash;
    dip_metrics.loss_trace = format!("{} records", dip.trace.len());
    Ok(PipelineOutput { phantom, scan, fbp, fbp_metrics, dip, dip_metrics })
}

pub fn ablation_label(cfg: &RunConfig) -> String {
    match (cfg.solver.no_hpf, cfg.solver.no_tv) {
        (false, false) => "full".into(),
        (true, false) => "no_hpf".into(),
        (false, true) => "no_tv".into(),
        (true, true) => "no_hpf_no_tv".into(),
    }
}
