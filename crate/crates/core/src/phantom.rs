//! Synthetic binary multi-layer interconnect phantoms.
//!
//! Metal layers are stacked along z. Each layer is a slab of parallel
//! Manhattan wires (alternating x/y orientation) with a coarse pitch below the
//! depth split and a fine pitch above it. Adjacent layers are joined by
//! square via columns at wire crossings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, Dims, Volume3D};

/// Contrast of occupied voxels; sits at the generator's output bound.
pub const CONTRAST_MAX: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: Dims,
    pub voxel_nm: f64,
    /// Layers whose slot centre lies below `z_split_frac * nz` are coarse.
    pub z_split_frac: f64,
    pub coarse_pitch_px: usize,
    pub fine_pitch_px: usize,
    pub fill_frac: f64,
    pub n_layers: usize,
    pub via_density: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 1,
            dims: Dims::new(64, 64, 32),
            voxel_nm: 27.2,
            z_split_frac: 0.70,
            coarse_pitch_px: 8,
            fine_pitch_px: 4,
            fill_frac: 0.3,
            n_layers: 6,
            via_density: 0.3,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_split_frac > 0.0 && self.z_split_frac < 1.0) {
            return Err(Error::Phantom(format!("z_split_frac must lie in (0, 1), got {}", self.z_split_frac)));
        }
        if self.coarse_pitch_px < 2 || self.fine_pitch_px < 2 {
            return Err(Error::Phantom("wire pitches must be at least 2 px".into()));
        }
        if !(self.fill_frac >= 0.0 && self.fill_frac < 1.0) {
            return Err(Error::Phantom(format!("fill_frac must lie in [0, 1), got {}", self.fill_frac)));
        }
        if !(0.0..=1.0).contains(&self.via_density) {
            return Err(Error::Phantom(format!("via_density must lie in [0, 1], got {}", self.via_density)));
        }
        if !(self.voxel_nm > 0.0) {
            return Err(Error::Phantom(format!("voxel_nm must be positive, got {}", self.voxel_nm)));
        }
        if self.n_layers == 0 {
            return Err(Error::Phantom("n_layers must be at least 1".into()));
        }
        let Dims { nx, ny, nz } = self.dims;
        if nz < 2 * self.n_layers {
            return Err(Error::Phantom(format!(
                "nz = {nz} cannot host {} layers: each layer needs a slab and a spacer (at least {} z-voxels)",
                self.n_layers,
                2 * self.n_layers
            )));
        }
        let pitch = self.coarse_pitch_px.max(self.fine_pitch_px);
        if nx < 2 * pitch || ny < 2 * pitch {
            return Err(Error::Phantom(format!(
                "lateral size {nx}x{ny} too small for pitch {pitch} (need at least two tracks)"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WireAxis {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    /// Occupied slab is `z_start..z_end`.
    pub z_start: usize,
    pub z_end: usize,
    pub axis: WireAxis,
    pub fine: bool,
    pub pitch_px: usize,
    pub width_px: usize,
    /// Fraction of the xy plane occupied within the slab.
    pub occupancy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Via {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub z_start: usize,
    pub z_end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomReport {
    pub layers: Vec<LayerInfo>,
    pub vias: Vec<Via>,
    pub occupied_voxels: usize,
}

pub fn generate_ic_phantom(spec: &PhantomSpec) -> Result<Volume3D> {
    generate_ic_phantom_with_report(spec).map(|(v, _)| v)
}

struct LayerPlan {
    info: LayerInfo,
    plane: Vec<bool>,
    tracks: Vec<(usize, usize)>,
}

pub fn generate_ic_phantom_with_report(spec: &PhantomSpec) -> Result<(Volume3D, PhantomReport)> {
    spec.validate()?;
    let dims = spec.dims;
    let slot = dims.nz / spec.n_layers;
    let base = (dims.nz - slot * spec.n_layers) / 2;
    let split = spec.z_split_frac * dims.nz as f64;

    let plans: Vec<LayerPlan> = (0..spec.n_layers)
        .map(|l| {
            let z0 = base + l * slot;
            let fine = (z0 as f64 + slot as f64 / 2.0) >= split;
            let thick = if fine { (slot / 2).max(1) } else { slot.div_ceil(2).min(slot - 1).max(1) };
            let pitch = if fine { spec.fine_pitch_px } else { spec.coarse_pitch_px };
            let axis = if l % 2 == 0 { WireAxis::X } else { WireAxis::Y };
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, l as u64));
            let (plane, tracks) = draw_layer(dims, axis, pitch, spec.fill_frac, &mut rng);
            let occupancy = plane.iter().filter(|&&b| b).count() as f64 / dims.plane() as f64;
            LayerPlan {
                info: LayerInfo {
                    z_start: z0,
                    z_end: z0 + thick,
                    axis,
                    fine,
                    pitch_px: pitch,
                    width_px: wire_width(pitch),
                    occupancy,
                },
                plane,
                tracks,
            }
        })
        .collect();

    let mut vol = Volume3D::zeros(dims, spec.voxel_nm);
    for plan in &plans {
        for z in plan.info.z_start..plan.info.z_end {
            let off = z * dims.plane();
            for (i, &b) in plan.plane.iter().enumerate() {
                if b {
                    vol.values_mut()[off + i] = CONTRAST_MAX;
                }
            }
        }
    }

    let mut vias = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, u64::MAX));
    for pair in plans.windows(2) {
        let (lo, hi) = (&pair[0], &pair[1]);
        let (z_start, z_end) = (lo.info.z_end, hi.info.z_start);
        if z_end <= z_start {
            continue;
        }
        // Lower and upper layers run in perpendicular directions.
        for &(a0, aw) in &lo.tracks {
            for &(b0, bw) in &hi.tracks {
                let (x0, xw, y0, yw) = match lo.info.axis {
                    WireAxis::X => (b0, bw, a0, aw),
                    WireAxis::Y => (a0, aw, b0, bw),
                };
                let size = xw.min(yw).min(2);
                let x = x0 + (xw - size) / 2;
                let y = y0 + (yw - size) / 2;
                if x + size > dims.nx || y + size > dims.ny {
                    continue;
                }
                let landed = (y..y + size).all(|yy| {
                    (x..x + size).all(|xx| lo.plane[xx + dims.nx * yy] && hi.plane[xx + dims.nx * yy])
                });
                if !landed || rng.gen::<f64>() >= spec.via_density {
                    continue;
                }
                for z in z_start..z_end {
                    for yy in y..y + size {
                        for xx in x..x + size {
                            vol.set(xx, yy, z, CONTRAST_MAX);
                        }
                    }
                }
                vias.push(Via { x, y, size, z_start, z_end });
            }
        }
    }

    let occupied_voxels = vol.values().iter().filter(|&&v| v != 0.0).count();
    let report = PhantomReport {
        layers: plans.into_iter().map(|p| p.info).collect(),
        vias,
        occupied_voxels,
    };
    Ok((vol, report))
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finaliser over (seed, stream).
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn wire_width(pitch: usize) -> usize {
    ((pitch as f64 / 2.0).round() as usize).clamp(1, pitch - 1)
}

/// Draws one layer's occupancy plane; returns the plane and the
/// `(start, width)` of each track across the wire direction.
fn draw_layer(dims: Dims, axis: WireAxis, pitch: usize, fill: f64, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<(usize, usize)>) {
    let mut plane = vec![false; dims.plane()];
    let width = wire_width(pitch);
    let (along, across) = match axis {
        WireAxis::X => (dims.nx, dims.ny),
        WireAxis::Y => (dims.ny, dims.nx),
    };
    let on_frac = (fill * pitch as f64 / width as f64).min(1.0);
    let phase = rng.gen_range(0..pitch);
    let mut tracks = Vec::new();
    let mut start = phase;
    while start + width <= across {
        tracks.push((start, width));
        start += pitch;
    }
    for &(t0, w) in &tracks {
        let runs = segment_track(along, on_frac, 3 * pitch, rng);
        for (s, len) in runs {
            for a in s..s + len {
                for c in t0..t0 + w {
                    let (x, y) = match axis {
                        WireAxis::X => (a, c),
                        WireAxis::Y => (c, a),
                    };
                    plane[x + dims.nx * y] = true;
                }
            }
        }
    }
    (plane, tracks)
}

/// Splits a track of `len` pixels into wire segments covering exactly
/// `round(on_frac * len)` pixels, with segments averaging `mean_run`.
fn segment_track(len: usize, on_frac: f64, mean_run: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let on_total = (on_frac * len as f64).round() as usize;
    if on_total == 0 {
        return Vec::new();
    }
    if on_total >= len {
        return vec![(0, len)];
    }
    let off_total = len - on_total;
    let k = (on_total / mean_run.max(1)).clamp(1, off_total.max(1));
    let on = random_composition(on_total, k, rng);
    // k segments need k + 1 gaps, the outer two may be empty.
    let mut off = random_composition(off_total + 2, k + 1, rng);
    off[0] -= 1;
    off[k] -= 1;
    let mut runs = Vec::with_capacity(k);
    let mut pos = off[0];
    for i in 0..k {
        runs.push((pos, on[i]));
        pos += on[i] + off[i + 1];
    }
    debug_assert_eq!(pos, len);
    runs
}

/// Uniformly random composition of `total` into `parts` positive integers.
fn random_composition(total: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    let mut cuts = rand::seq::index::sample(rng, total - 1, parts - 1).into_vec();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c + 1 - prev);
        prev = c + 1;
    }
    out.push(total - prev);
    out
}

/// Occupancy of a two-valued phantom: voxels above half the contrast maximum.
pub fn occupancy_mask(vol: &Volume3D) -> BinaryVolume {
    BinaryVolume::from_threshold(vol, CONTRAST_MAX / 2.0)
}

/// Mean length of occupied runs along x within the given z-slices.
pub fn mean_run_length_x(vol: &Volume3D, zs: impl IntoIterator<Item = usize>) -> f64 {
    let d = vol.dims();
    let (mut total, mut runs) = (0usize, 0usize);
    for z in zs {
        for y in 0..d.ny {
            let mut in_run = false;
            for x in 0..d.nx {
                let occ = vol.get(x, y, z) > CONTRAST_MAX / 2.0;
                if occ {
                    total += 1;
                    if !in_run {
                        runs += 1;
                    }
                }
                in_run = occ;
            }
        }
    }
    if runs == 0 {
        0.0
    } else {
        total as f64 / runs as f64
    }
}
