//! Plain-text run configuration.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment            (also `;`)
//! [section]
//! key = value
//! ```
//!
//! Sections: `phantom`, `geometry`, `preproc`, `network`, `solver`, `eval`,
//! `run`. Lists are comma separated, booleans are `true`/`false`. Unknown
//! sections or keys, duplicates and unparsable values are errors naming the
//! key and line. Command-line flags are applied afterwards through
//! [`RunConfig::set`].

use sha2::{Digest, Sha256};

use crate::dipnet::ArchConfig;
use crate::error::{Error, Result};
use crate::eval::Reference;
use crate::fbp::Window;
use crate::geometry::LaminoGeometry;
use crate::phantom::PhantomSpec;
use crate::solver::SolverConfig;
use crate::volume::Dims;

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub theta_deg: f64,
    /// Dense scan size; sparse runs keep every `decimate`-th angle.
    pub n_angles: usize,
    pub ray_step_frac: f64,
    pub decimate: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { theta_deg: 61.0, n_angles: 400, ray_step_frac: 0.5, decimate: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreprocConfig {
    pub jitter_px: f64,
    pub jitter_seed: u64,
    pub align: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalConfig {
    pub reference: Reference,
    pub fbp_window: Window,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub geometry: GeometryConfig,
    pub preproc: PreprocConfig,
    pub solver: SolverConfig,
    pub eval: EvalConfig,
    /// Run every parallel section on a single thread.
    pub sequential: bool,
}

pub const KEYS: &[&str] = &[
    "phantom.seed",
    "phantom.dims",
    "phantom.voxel_nm",
    "phantom.z_split_frac",
    "phantom.coarse_pitch_px",
    "phantom.fine_pitch_px",
    "phantom.fill_frac",
    "phantom.n_layers",
    "phantom.via_density",
    "geometry.theta_deg",
    "geometry.n_angles",
    "geometry.ray_step_frac",
    "geometry.decimate",
    "preproc.hpf_sigma_px",
    "preproc.jitter_px",
    "preproc.jitter_seed",
    "preproc.align",
    "network.stages",
    "network.widths",
    "network.bottleneck_width",
    "network.bottleneck_convs",
    "network.leaky_slope",
    "network.output_bound",
    "network.init_gain",
    "network.net_seed",
    "network.noise_seed",
    "solver.n_iters",
    "solver.learning_rate",
    "solver.beta1",
    "solver.beta2",
    "solver.eps",
    "solver.halve_after",
    "solver.lambda_coarse",
    "solver.lambda_fine",
    "solver.z_split_frac",
    "solver.no_hpf",
    "solver.no_tv",
    "solver.symmetric_hpf",
    "solver.normalize_data_term",
    "solver.snapshot_every",
    "eval.reference",
    "eval.fbp_window",
    "run.sequential",
];

fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse::<usize>(s.trim())).collect()
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').map(str::trim).ok_or_else(|| Error::Config {
                    line,
                    key: content.to_string(),
                    message: "unterminated section header".into(),
                })?;
                if !KEYS.iter().any(|k| k.split('.').next() == Some(name)) {
                    return Err(Error::Config { line, key: name.to_string(), message: "unknown section".into() });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                key: content.to_string(),
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let sec = section.as_deref().ok_or_else(|| Error::Config {
                line,
                key: key.to_string(),
                message: "key outside of a section".into(),
            })?;
            let full = format!("{sec}.{key}");
            if !seen.insert(full.clone()) {
                return Err(Error::Config { line, key: full, message: "duplicate key".into() });
            }
            cfg.set_at(&full, value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `section.key` override (line 0 marks the command line).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(key, value, 0)
    }

    fn set_at(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        self.apply(key, value).map_err(|message| Error::Config { line, key: key.to_string(), message })
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (p, g, pre, s) = (&mut self.phantom, &mut self.geometry, &mut self.preproc, &mut self.solver);
        match key {
            "phantom.seed" => p.seed = parse(v)?,
            "phantom.dims" => {
                let d = parse_list(v)?;
                if d.len() != 3 {
                    return Err(format!("expected nx,ny,nz, got `{v}`"));
                }
                p.dims = Dims::new(d[0], d[1], d[2]);
            }
            "phantom.voxel_nm" => p.voxel_nm = parse(v)?,
            "phantom.z_split_frac" => p.z_split_frac = parse(v)?,
            "phantom.coarse_pitch_px" => p.coarse_pitch_px = parse(v)?,
            "phantom.fine_pitch_px" => p.fine_pitch_px = parse(v)?,
            "phantom.fill_frac" => p.fill_frac = parse(v)?,
            "phantom.n_layers" => p.n_layers = parse(v)?,
            "phantom.via_density" => p.via_density = parse(v)?,
            "geometry.theta_deg" => g.theta_deg = parse(v)?,
            "geometry.n_angles" => g.n_angles = parse(v)?,
            "geometry.ray_step_frac" => g.ray_step_frac = parse(v)?,
            "geometry.decimate" => g.decimate = parse(v)?,
            "preproc.hpf_sigma_px" => s.hpf_sigma_px = if v == "auto" { None } else { Some(parse(v)?) },
            "preproc.jitter_px" => pre.jitter_px = parse(v)?,
            "preproc.jitter_seed" => pre.jitter_seed = parse(v)?,
            "preproc.align" => pre.align = parse_bool(v)?,
            "network.stages" => s.arch.stages = parse(v)?,
            "network.widths" => s.arch.widths = parse_list(v)?,
            "network.bottleneck_width" => s.arch.bottleneck_width = parse(v)?,
            "network.bottleneck_convs" => s.arch.bottleneck_convs = parse(v)?,
            "network.leaky_slope" => s.arch.leaky_slope = parse(v)?,
            "network.output_bound" => s.arch.output_bound = parse(v)?,
            "network.init_gain" => s.arch.init_gain = parse(v)?,
            "network.net_seed" => s.net_seed = parse(v)?,
            "network.noise_seed" => s.noise_seed = parse(v)?,
            "solver.n_iters" => s.n_iters = parse(v)?,
            "solver.learning_rate" => s.adam.learning_rate = parse(v)?,
            "solver.beta1" => s.adam.beta1 = parse(v)?,
            "solver.beta2" => s.adam.beta2 = parse(v)?,
            "solver.eps" => s.adam.eps = parse(v)?,
            "solver.halve_after" => s.adam.halve_after = parse(v)?,
            "solver.lambda_coarse" => s.lambda_coarse = parse(v)?,
            "solver.lambda_fine" => s.lambda_fine = parse(v)?,
            "solver.z_split_frac" => s.z_split_frac = parse(v)?,
            "solver.no_hpf" => s.no_hpf = parse_bool(v)?,
            "solver.no_tv" => s.no_tv = parse_bool(v)?,
            "solver.symmetric_hpf" => s.symmetric_hpf = parse_bool(v)?,
            "solver.normalize_data_term" => s.normalize_data_term = parse_bool(v)?,
            "solver.snapshot_every" => s.snapshot_every = parse(v)?,
            "eval.reference" => {
                self.eval.reference = match v {
                    "phantom" => Reference::Phantom,
                    "em" => Reference::EmBinarized,
                    _ => return Err(format!("expected phantom or em, got `{v}`")),
                }
            }
            "eval.fbp_window" => self.eval.fbp_window = v.parse().map_err(|e: Error| e.to_string())?,
            "run.sequential" => self.sequential = parse_bool(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// `(key, value)` for every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (p, g, pre, s) = (&self.phantom, &self.geometry, &self.preproc, &self.solver);
        let a = &s.arch;
        let values = vec![
            p.seed.to_string(),
            format!("{},{},{}", p.dims.nx, p.dims.ny, p.dims.nz),
            fmt_f64(p.voxel_nm),
            fmt_f64(p.z_split_frac),
            p.coarse_pitch_px.to_string(),
            p.fine_pitch_px.to_string(),
            fmt_f64(p.fill_frac),
            p.n_layers.to_string(),
            fmt_f64(p.via_density),
            fmt_f64(g.theta_deg),
            g.n_angles.to_string(),
            fmt_f64(g.ray_step_frac),
            g.decimate.to_string(),
            s.hpf_sigma_px.map_or("auto".to_string(), fmt_f64),
            fmt_f64(pre.jitter_px),
            pre.jitter_seed.to_string(),
            pre.align.to_string(),
            a.stages.to_string(),
            fmt_list(&a.widths),
            a.bottleneck_width.to_string(),
            a.bottleneck_convs.to_string(),
            fmt_f64(a.leaky_slope),
            fmt_f64(a.output_bound),
            fmt_f64(a.init_gain),
            s.net_seed.to_string(),
            s.noise_seed.to_string(),
            s.n_iters.to_string(),
            fmt_f64(s.adam.learning_rate),
            fmt_f64(s.adam.beta1),
            fmt_f64(s.adam.beta2),
            fmt_f64(s.adam.eps),
            s.adam.halve_after.to_string(),
            fmt_f64(s.lambda_coarse),
            fmt_f64(s.lambda_fine),
            fmt_f64(s.z_split_frac),
            s.no_hpf.to_string(),
            s.no_tv.to_string(),
            s.symmetric_hpf.to_string(),
            s.normalize_data_term.to_string(),
            s.snapshot_every.to_string(),
            match self.eval.reference {
                Reference::Phantom => "phantom".to_string(),
                Reference::EmBinarized => "em".to_string(),
            },
            match self.eval.fbp_window {
                Window::None => "none".to_string(),
                Window::Hann => "hann".to_string(),
            },
            self.sequential.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Sectioned text that parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').unwrap();
            if sec != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                current = sec;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.solver.arch.validate(self.phantom.dims)?;
        let g = &self.geometry;
        if g.n_angles == 0 || g.decimate == 0 || g.decimate > g.n_angles {
            return Err(Error::Config {
                line: 0,
                key: "geometry.decimate".into(),
                message: format!("need 1 <= decimate <= n_angles, got {} of {}", g.decimate, g.n_angles),
            });
        }
        if !(self.preproc.jitter_px >= 0.0) {
            return Err(Error::Config { line: 0, key: "preproc.jitter_px".into(), message: "must be >= 0".into() });
        }
        self.dense_geometry()?;
        Ok(())
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.solver.arch
    }

    pub fn dense_geometry(&self) -> Result<LaminoGeometry> {
        let g = &self.geometry;
        LaminoGeometry::full_circle(g.theta_deg, g.n_angles, self.phantom.dims, self.phantom.voxel_nm, g.ray_step_frac)
    }

    pub fn sparse_geometry(&self) -> Result<LaminoGeometry> {
        self.dense_geometry()?.decimate(self.geometry.decimate)
    }
}
