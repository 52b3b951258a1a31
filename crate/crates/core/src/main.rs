use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lamino::config::RunConfig;
use lamino::eval::{evaluate, psd, MetricsRecord};
use lamino::fbp::fbp_reconstruct;
use lamino::geometry::LaminoGeometry;
use lamino::io::{
    encode_pgm, read_stack, read_volume, slice_image, write_atomic, write_stack, write_volume, write_weights,
    GeometryTag, Provenance, SliceAxis, ValueKind,
};
use lamino::phantom::generate_ic_phantom;
use lamino::pipeline::{ablation_label, hash_hex, prepare_scan, with_threads};
use lamino::preproc::Shift;
use lamino::projector::{forward_project_all, ProjectionStack};
use lamino::solver::{reconstruct_with, LossRecord, Reconstruction};
use lamino::volume::Volume3D;
use lamino::{Error, Result};

#[derive(Parser)]
#[command(name = "lamino", version, about = "Laminography phantoms, projection, FBP and generator-prior reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration file (key = value, with [sections]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set solver.n_iters=200.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic IC phantom volume.
    Phantom {
        #[arg(long)]
        seed: Option<u64>,
        /// nx,ny,nz
        #[arg(long)]
        dims: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Forward-project a volume over a full circle of angles.
    Project {
        volume: PathBuf,
        #[arg(long)]
        angles: Option<usize>,
        #[arg(long)]
        theta: Option<f64>,
        /// Keep every k-th angle after jitter and alignment.
        #[arg(long)]
        decimate: Option<usize>,
        /// Standard deviation of injected detector shifts, in pixels.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        jitter_seed: Option<u64>,
        #[arg(long)]
        align: bool,
        /// CSV of injected and estimated shifts.
        #[arg(long)]
        shifts: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Filtered backprojection.
    Fbp {
        stack: PathBuf,
        #[arg(long)]
        dims: Option<String>,
        /// Ramp window: none|hann.
        #[arg(long)]
        window: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generator-prior reconstruction.
    Reconstruct {
        stack: PathBuf,
        /// Use this many evenly spaced angles of the stack.
        #[arg(long)]
        angles: Option<usize>,
        /// no_hpf or no_tv; may be repeated.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long)]
        iters: Option<usize>,
        /// Seeds the network weights and, offset by one, the input noise.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dims: Option<String>,
        /// Loss trace CSV; defaults to <out>.loss.csv.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Directory for intermediate volumes.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Network weights checkpoint.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a reconstruction against a reference volume.
    Eval {
        volume: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        label: Option<String>,
        /// Also write the centred power spectrum as a volume.
        #[arg(long)]
        psd: Option<PathBuf>,
        /// Metrics CSV; a JSON sidecar is written next to it.
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full, no_hpf and no_tv variants and tabulate them.
    Ablate {
        stack: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        angles: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export a plane as an 8-bit PGM image.
    Slice {
        volume: PathBuf,
        /// z: axial layer, x: yz cut.
        #[arg(long, default_value = "z")]
        axis: String,
        #[arg(long)]
        index: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            key: o.clone(),
            message: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if common.sequential {
        cfg.sequential = true;
    }
    Ok(cfg)
}

fn finish(cfg: &mut RunConfig) -> Result<()> {
    cfg.validate()
}

fn provenance(cfg: &RunConfig, seed: u64) -> Provenance {
    Provenance::new(cfg.hash(), seed)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Keeps `n` evenly spaced frames of a stack.
fn select_angles(stack: ProjectionStack, geom: LaminoGeometry, n: Option<usize>) -> Result<(ProjectionStack, LaminoGeometry)> {
    let Some(n) = n else { return Ok((stack, geom)) };
    let total = stack.len();
    if n == 0 || total % n != 0 {
        return Err(Error::InvalidArgument(format!("--angles {n} must divide the {total} frames of the stack")));
    }
    let k = total / n;
    Ok((stack.decimate(k)?, geom.decimate(k)?))
}

fn run_dip(cfg: &RunConfig, stack: &ProjectionStack, geom: &LaminoGeometry) -> Result<Reconstruction> {
    let dims = cfg.phantom.dims;
    let every = (cfg.solver.n_iters / 10).max(1);
    reconstruct_with(stack, geom, dims, geom.det_pixel_nm, &cfg.solver, |r: &LossRecord| {
        if r.iteration % every == 0 || r.iteration == cfg.solver.n_iters {
            eprintln!("iter {:>6}  data {:.6e}  tv {:.6e}  total {:.6e}", r.iteration, r.data_term, r.tv_term, r.total);
        }
    })
}

fn write_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut text = String::from(LossRecord::CSV_HEADER);
    text.push('\n');
    for r in trace {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::from(MetricsRecord::CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    let json = serde_json::to_string_pretty(records).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&path.with_extension("json"), json.as_bytes())
}

fn geometry_from_stack(cfg: &mut RunConfig, geom: &LaminoGeometry) -> Result<()> {
    cfg.geometry.theta_deg = geom.theta_deg;
    cfg.geometry.ray_step_frac = geom.ray_step_frac;
    cfg.phantom.voxel_nm = geom.det_pixel_nm;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { seed, dims, out, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.set("phantom.seed", &s.to_string())?;
            }
            if let Some(d) = dims {
                cfg.set("phantom.dims", &d)?;
            }
            finish(&mut cfg)?;
            let vol = generate_ic_phantom(&cfg.phantom)?;
            write_volume(&out, &vol, ValueKind::Contrast, &provenance(&cfg, cfg.phantom.seed), GeometryTag::NONE)?;
            eprintln!("wrote {} ({})", out.display(), vol.dims());
        }
        Command::Project { volume, angles, theta, decimate, jitter, jitter_seed, align, shifts, out, common } => {
            let mut cfg = load_config(&common)?;
            let (_, vol) = read_volume(&volume)?;
            cfg.phantom.dims = vol.dims();
            cfg.phantom.voxel_nm = vol.voxel_nm();
            if let Some(n) = angles {
                cfg.geometry.n_angles = n;
            }
            if let Some(t) = theta {
                cfg.geometry.theta_deg = t;
            }
            if let Some(k) = decimate {
                cfg.geometry.decimate = k;
            }
            if let Some(j) = jitter {
                cfg.preproc.jitter_px = j;
            }
            if let Some(s) = jitter_seed {
                cfg.preproc.jitter_seed = s;
            }
            cfg.preproc.align |= align;
            finish(&mut cfg)?;
            let scan = with_threads(cfg.sequential, || -> Result<_> {
                let dense_geom = cfg.dense_geometry()?;
                let dense = forward_project_all(&vol, &dense_geom)?;
                prepare_scan(&cfg, &dense_geom, &dense)
            })??;
            if let Some(a) = &scan.alignment {
                if a.has_warnings() {
                    eprintln!("warning: alignment skipped empty frames {:?}", a.skipped);
                }
            }
            if let Some(path) = shifts {
                let n = cfg.geometry.n_angles;
                let zero = vec![Shift::default(); n];
                let truth = scan.true_shifts.as_deref().unwrap_or(&zero);
                let est = scan.alignment.as_ref().map(|a| a.shifts.as_slice()).unwrap_or(&zero);
                let mut text = String::from("index,true_du,true_dv,est_du,est_dv\n");
                for i in 0..n {
                    text.push_str(&format!("{i},{:.6},{:.6},{:.6},{:.6}\n", truth[i].du, truth[i].dv, est[i].du, est[i].dv));
                }
                write_atomic(&path, text.as_bytes())?;
            }
            write_stack(&out, &scan.stack, &scan.geom, &provenance(&cfg, cfg.preproc.jitter_seed))?;
            eprintln!("wrote {} ({} frames, theta {})", out.display(), scan.stack.len(), scan.geom.theta_deg);
        }
        Command::Fbp { stack, dims, window, out, common } => {
            let mut cfg = load_config(&common)?;
            let (_, st, geom) = read_stack(&stack)?;
            geometry_from_stack(&mut cfg, &geom)?;
            if let Some(d) = dims {
                cfg.set("phantom.dims", &d)?;
            }
            if let Some(w) = window {
                cfg.set("eval.fbp_window", &w)?;
            }
            finish(&mut cfg)?;
            let rec = with_threads(cfg.sequential, || fbp_reconstruct(&st, &geom, cfg.phantom.dims, cfg.eval.fbp_window))??;
            write_volume(&out, &rec, ValueKind::Contrast, &provenance(&cfg, 0), GeometryTag::of(&geom))?;
            eprintln!("wrote {}", out.display());
        }
        Command::Reconstruct { stack, angles, ablate, iters, seed, dims, trace, snapshots, weights, out, common } => {
            let mut cfg = load_config(&common)?;
            let (_, st, geom) = read_stack(&stack)?;
            geometry_from_stack(&mut cfg, &geom)?;
            if let Some(d) = dims {
                cfg.set("phantom.dims", &d)?;
            }
            for a in &ablate {
                match a.as_str() {
                    "no_hpf" => cfg.solver.no_hpf = true,
                    "no_tv" => cfg.solver.no_tv = true,
                    other => return Err(Error::InvalidArgument(format!("unknown ablation `{other}` (expected no_hpf|no_tv)"))),
                }
            }
            if let Some(n) = iters {
                cfg.solver.n_iters = n;
            }
            if let Some(s) = seed {
                cfg.solver.net_seed = s;
                cfg.solver.noise_seed = s.wrapping_add(1);
            }
            finish(&mut cfg)?;
            let (st, geom) = select_angles(st, geom, angles)?;
            let rec = with_threads(cfg.sequential, || run_dip(&cfg, &st, &geom))??;
            let prov = provenance(&cfg, cfg.solver.net_seed);
            let tag = GeometryTag::of(&geom);
            write_volume(&out, &rec.volume, ValueKind::Contrast, &prov, tag)?;
            write_trace(&trace.unwrap_or_else(|| with_suffix(&out, ".loss.csv")), &rec.trace)?;
            if let Some(dir) = snapshots {
                std::fs::create_dir_all(&dir)?;
                for (it, v) in &rec.snapshots {
                    write_volume(&dir.join(format!("iter{it:06}.lmv")), v, ValueKind::Contrast, &prov, tag)?;
                }
            }
            if let Some(w) = weights {
                write_weights(&w, rec.network.params(), &rec.network.tensor_table(), &prov)?;
            }
            eprintln!("wrote {} ({})", out.display(), ablation_label(&cfg));
        }
        Command::Eval { volume, reference, label, psd: psd_out, out, common } => {
            let mut cfg = load_config(&common)?;
            let (h, vol) = read_volume(&volume)?;
            let (hr, refv) = read_volume(&reference)?;
            if !h.geometry.compatible(&hr.geometry) {
                return Err(Error::InvalidArgument(format!(
                    "geometry headers differ: {} (theta {}) vs {} (theta {})",
                    volume.display(),
                    h.geometry.theta_deg,
                    reference.display(),
                    hr.geometry.theta_deg
                )));
            }
            if !h.geometry.is_none() {
                cfg.geometry.theta_deg = h.geometry.theta_deg;
            } else if !hr.geometry.is_none() {
                cfg.geometry.theta_deg = hr.geometry.theta_deg;
            }
            let label = label.unwrap_or_else(|| volume.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let mut m = with_threads(cfg.sequential, || evaluate(&label, &vol, &refv, cfg.eval.reference, cfg.geometry.theta_deg))??;
            m.config_hash = h.provenance.hash_hex();
            let trace = with_suffix(&volume, ".loss.csv");
            if trace.exists() {
                m.loss_trace = trace.display().to_string();
            }
            write_metrics(&out, &[m])?;
            if let Some(p) = psd_out {
                write_volume(&p, &psd(&vol), ValueKind::Psd, &h.provenance, h.geometry)?;
            }
            eprintln!("wrote {}", out.display());
        }
        Command::Ablate { stack, reference, angles, iters, out, common } => {
            let mut cfg = load_config(&common)?;
            let (_, st, geom) = read_stack(&stack)?;
            let (_, refv) = read_volume(&reference)?;
            geometry_from_stack(&mut cfg, &geom)?;
            cfg.phantom.dims = refv.dims();
            if let Some(n) = iters {
                cfg.solver.n_iters = n;
            }
            finish(&mut cfg)?;
            let (st, geom) = select_angles(st, geom, angles)?;
            let mut rows = Vec::new();
            for (no_hpf, no_tv) in [(false, false), (true, false), (false, true)] {
                let mut c = cfg.clone();
                c.solver.no_hpf = no_hpf;
                c.solver.no_tv = no_tv;
                let label = ablation_label(&c);
                eprintln!("variant {label}");
                let rec = with_threads(c.sequential, || run_dip(&c, &st, &geom))??;
                let mut m = evaluate(&label, &rec.volume, &refv, c.eval.reference, geom.theta_deg)?;
                m.config_hash = hash_hex(&c);
                m.loss_trace = format!("{} records", rec.trace.len());
                rows.push(m);
            }
            write_metrics(&out, &rows)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Slice { volume, axis, index, out } => {
            let (_, vol): (_, Volume3D) = read_volume(&volume)?;
            let (w, h, px) = slice_image(&vol, axis.parse::<SliceAxis>()?, index)?;
            write_atomic(&out, &encode_pgm(w, h, &px)?)?;
            eprintln!("wrote {} ({w}x{h})", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
