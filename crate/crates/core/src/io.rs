//! Binary containers for volumes (`LMV1`) and projection stacks (`LMS1`).
//!
//! All integers and floats are little-endian; payload scalars are `f32`.
//!
//! Volume header (128 bytes):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `LMV1`                            |
//! | 4      | 4    | format version (u32)                    |
//! | 8      | 24   | nx, ny, nz (u64 each)                   |
//! | 32     | 8    | voxel size in nm (f64)                  |
//! | 40     | 4    | value kind (u32, see [`ValueKind`])     |
//! | 44     | 4    | named-tensor count (u32)                |
//! | 48     | 8    | seed (u64)                              |
//! | 56     | 8    | timestamp, unix seconds (u64)           |
//! | 64     | 32   | config hash (SHA-256)                   |
//! | 96     | 8    | theta in degrees (f64, NaN if none)     |
//! | 104    | 8    | geometry fingerprint (u64, 0 if none)   |
//! | 112    | 16   | tool version, UTF-8, zero padded        |
//!
//! Weights files follow the header with one 80-byte record per tensor:
//! name (48 bytes, zero padded), offset (u64), length (u64), rank (u32),
//! shape (4 x u32). The payload is x-fastest.
//!
//! Stack header (128 bytes): magic `LMS1`, version (u32), n_angles, nu, nv
//! (u64 each, offsets 8/16/24), pixel_nm (f64, 32), theta_deg (f64, 40),
//! ray_step_frac (f64, 48), seed (u64, 56), timestamp (u64, 64), config hash
//! (72..104), tool version (104..120), 8 reserved bytes. Then `n_angles`
//! f64 angles in degrees, then frames in angle order, u-fastest.

use std::io::Write;
use std::path::Path;

use crate::dipnet::NamedTensor;
use crate::error::{Error, Result};
use crate::geometry::LaminoGeometry;
use crate::projector::{Projection, ProjectionStack};
use crate::volume::{Dims, Volume3D};

pub const VOLUME_MAGIC: &[u8; 4] = b"LMV1";
pub const STACK_MAGIC: &[u8; 4] = b"LMS1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 128;
pub const TIMESTAMP_OFFSET: usize = 56;
pub const STACK_TIMESTAMP_OFFSET: usize = 64;
const TENSOR_RECORD_LEN: usize = 80;
const TENSOR_NAME_LEN: usize = 48;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Contrast = 0,
    Binary = 1,
    Psd = 2,
    Weights = 3,
}

impl ValueKind {
    fn from_u32(v: u32) -> Result<Self> {
        Ok(match v {
            0 => ValueKind::Contrast,
            1 => ValueKind::Binary,
            2 => ValueKind::Psd,
            3 => ValueKind::Weights,
            other => return Err(Error::Format(format!("unknown value kind {other}"))),
        })
    }
}

/// Creation metadata embedded in every file.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub timestamp: u64,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_hash: [u8; 32], seed: u64) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Provenance { config_hash, seed, timestamp, tool_version: TOOL_VERSION.to_string() }
    }

    pub fn hash_hex(&self) -> String {
        self.config_hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Geometry echo carried by volume files so artifacts from different scans
/// are not compared by accident.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryTag {
    pub theta_deg: f64,
    pub fingerprint: u64,
}

impl GeometryTag {
    pub const NONE: GeometryTag = GeometryTag { theta_deg: f64::NAN, fingerprint: 0 };

    pub fn of(geom: &LaminoGeometry) -> Self {
        GeometryTag { theta_deg: geom.theta_deg, fingerprint: geometry_fingerprint(geom) }
    }

    pub fn is_none(&self) -> bool {
        self.fingerprint == 0
    }

    pub fn compatible(&self, other: &GeometryTag) -> bool {
        self.is_none() || other.is_none() || self.fingerprint == other.fingerprint
    }
}

/// FNV-1a over tilt, detector size and pixel size. Angles are left out so
/// decimated subsets of one acquisition stay comparable.
pub fn geometry_fingerprint(geom: &LaminoGeometry) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut feed = |bits: u64| {
        for b in bits.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    feed(geom.theta_deg.to_bits());
    feed(geom.det_nu as u64);
    feed(geom.det_nv as u64);
    feed(geom.det_pixel_nm.to_bits());
    h.max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub version: u32,
    pub dims: Dims,
    pub voxel_nm: f64,
    pub kind: ValueKind,
    pub provenance: Provenance,
    pub geometry: GeometryTag,
    pub tensors: Vec<NamedTensor>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn fixed_str(&mut self, s: &str, len: usize) -> Result<()> {
        if s.len() > len {
            return Err(Error::Format(format!("`{s}` exceeds {len} bytes")));
        }
        self.0.extend_from_slice(s.as_bytes());
        self.0.resize(self.0.len() + len - s.len(), 0);
        Ok(())
    }
    fn f32s(&mut self, values: &[f64]) {
        self.0.reserve(values.len() * 4);
        for v in values {
            self.0.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: need {n} bytes at offset {}, have {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size field overflows".into()))
    }
    fn fixed_str(&mut self, len: usize) -> Result<String> {
        let raw = self.take(len)?;
        let end = raw.iter().position(|b| *b == 0).unwrap_or(len);
        String::from_utf8(raw[..end].to_vec()).map_err(|_| Error::Format("string field is not UTF-8".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload size overflows".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader, magic: &[u8; 4], path: &Path) -> Result<u32> {
    let m = r.take(4)?;
    if m != magic {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: version, path: path.to_path_buf() });
    }
    Ok(version)
}

pub fn encode_volume(
    vol: &Volume3D,
    kind: ValueKind,
    prov: &Provenance,
    geometry: GeometryTag,
    tensors: &[NamedTensor],
) -> Result<Vec<u8>> {
    let d = vol.dims();
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + tensors.len() * TENSOR_RECORD_LEN + d.len() * 4));
    w.0.extend_from_slice(VOLUME_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(d.nx as u64);
    w.u64(d.ny as u64);
    w.u64(d.nz as u64);
    w.f64(vol.voxel_nm());
    w.u32(kind as u32);
    w.u32(tensors.len() as u32);
    w.u64(prov.seed);
    w.u64(prov.timestamp);
    w.0.extend_from_slice(&prov.config_hash);
    w.f64(geometry.theta_deg);
    w.u64(geometry.fingerprint);
    w.fixed_str(&prov.tool_version, 16)?;
    debug_assert_eq!(w.0.len(), HEADER_LEN);
    for t in tensors {
        if t.shape.len() > 4 {
            return Err(Error::Format(format!("tensor {} has rank {} > 4", t.name, t.shape.len())));
        }
        w.fixed_str(&t.name, TENSOR_NAME_LEN)?;
        w.u64(t.offset as u64);
        w.u64(t.len() as u64);
        w.u32(t.shape.len() as u32);
        for k in 0..4 {
            w.u32(t.shape.get(k).copied().unwrap_or(0) as u32);
        }
    }
    w.f32s(vol.values());
    Ok(w.0)
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<(VolumeHeader, Volume3D)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let version = check_magic(&mut r, VOLUME_MAGIC, path)?;
    let dims = Dims::new(r.usize()?, r.usize()?, r.usize()?);
    let voxel_nm = r.f64()?;
    let kind = ValueKind::from_u32(r.u32()?)?;
    let n_tensors = r.u32()? as usize;
    let seed = r.u64()?;
    let timestamp = r.u64()?;
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let theta_deg = r.f64()?;
    let fingerprint = r.u64()?;
    let tool_version = r.fixed_str(16)?;
    let mut tensors = Vec::with_capacity(n_tensors.min(1024));
    for _ in 0..n_tensors {
        let name = r.fixed_str(TENSOR_NAME_LEN)?;
        let offset = r.usize()?;
        let len = r.usize()?;
        let rank = r.u32()? as usize;
        let raw: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        if rank > 4 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let shape = raw[..rank].to_vec();
        if shape.iter().product::<usize>() != len || offset + len > dims.len() {
            return Err(Error::Format(format!("tensor {name} is inconsistent with the payload")));
        }
        tensors.push(NamedTensor { name, offset, shape });
    }
    let values = r.f32s(dims.len())?;
    r.finish()?;
    let vol = Volume3D::from_values(dims, voxel_nm, values)?;
    let header = VolumeHeader {
        version,
        dims,
        voxel_nm,
        kind,
        provenance: Provenance { config_hash, seed, timestamp, tool_version },
        geometry: GeometryTag { theta_deg, fingerprint },
        tensors,
    };
    Ok((header, vol))
}

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_volume(path: &Path, vol: &Volume3D, kind: ValueKind, prov: &Provenance, geometry: GeometryTag) -> Result<()> {
    write_atomic(path, &encode_volume(vol, kind, prov, geometry, &[])?)
}

pub fn read_volume(path: &Path) -> Result<(VolumeHeader, Volume3D)> {
    decode_volume(&std::fs::read(path)?, path)
}

/// Flat parameter vector stored as an `n x 1 x 1` volume with a tensor table.
pub fn write_weights(path: &Path, params: &[f64], tensors: &[NamedTensor], prov: &Provenance) -> Result<()> {
    let vol = Volume3D::from_values(Dims::new(params.len(), 1, 1), 1.0, params.to_vec())?;
    write_atomic(path, &encode_volume(&vol, ValueKind::Weights, prov, GeometryTag::NONE, tensors)?)
}

pub fn read_weights(path: &Path) -> Result<(VolumeHeader, Vec<f64>)> {
    let (h, v) = read_volume(path)?;
    if h.kind != ValueKind::Weights {
        return Err(Error::Format(format!("{} does not hold network weights", path.display())));
    }
    Ok((h, v.into_values()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackHeader {
    pub version: u32,
    pub provenance: Provenance,
}

pub fn encode_stack(stack: &ProjectionStack, geom: &LaminoGeometry, prov: &Provenance) -> Result<Vec<u8>> {
    stack.check_matches(geom)?;
    let (nu, nv) = (geom.det_nu, geom.det_nv);
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + stack.len() * (8 + nu * nv * 4)));
    w.0.extend_from_slice(STACK_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(stack.len() as u64);
    w.u64(nu as u64);
    w.u64(nv as u64);
    w.f64(geom.det_pixel_nm);
    w.f64(geom.theta_deg);
    w.f64(geom.ray_step_frac);
    w.u64(prov.seed);
    w.u64(prov.timestamp);
    w.0.extend_from_slice(&prov.config_hash);
    w.fixed_str(&prov.tool_version, 16)?;
    w.u64(0);
    debug_assert_eq!(w.0.len(), HEADER_LEN);
    for a in &geom.angles_deg {
        w.f64(*a);
    }
    for f in &stack.frames {
        w.f32s(&f.pixels);
    }
    Ok(w.0)
}

pub fn decode_stack(bytes: &[u8], path: &Path) -> Result<(StackHeader, ProjectionStack, LaminoGeometry)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let version = check_magic(&mut r, STACK_MAGIC, path)?;
    let n = r.usize()?;
    let nu = r.usize()?;
    let nv = r.usize()?;
    let pixel_nm = r.f64()?;
    let theta_deg = r.f64()?;
    let ray_step = r.f64()?;
    let seed = r.u64()?;
    let timestamp = r.u64()?;
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let tool_version = r.fixed_str(16)?;
    r.u64()?;
    let angles: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    let frame_len = nu.checked_mul(nv).ok_or_else(|| Error::Format("detector size overflows".into()))?;
    let mut frames = Vec::with_capacity(n.min(1 << 16));
    for a in &angles {
        frames.push(Projection { phi_deg: *a, nu, nv, pixel_nm, pixels: r.f32s(frame_len)? });
    }
    r.finish()?;
    let geom = LaminoGeometry::new(theta_deg, angles, nu, nv, pixel_nm, ray_step)?;
    let header = StackHeader { version, provenance: Provenance { config_hash, seed, timestamp, tool_version } };
    Ok((header, ProjectionStack { frames, pixel_nm }, geom))
}

pub fn write_stack(path: &Path, stack: &ProjectionStack, geom: &LaminoGeometry, prov: &Provenance) -> Result<()> {
    write_atomic(path, &encode_stack(stack, geom, prov)?)
}

pub fn read_stack(path: &Path) -> Result<(StackHeader, ProjectionStack, LaminoGeometry)> {
    decode_stack(&std::fs::read(path)?, path)
}

/// 8-bit binary PGM (P5), row-major with `width` samples per row.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceAxis {
    /// Axial layer at fixed z, image is x by y.
    Z,
    /// yz cut at fixed x, image is y by z with z increasing downwards.
    X,
}

impl std::str::FromStr for SliceAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(SliceAxis::Z),
            "x" => Ok(SliceAxis::X),
            other => Err(Error::InvalidArgument(format!("unknown slice axis `{other}` (expected z|x)"))),
        }
    }
}

pub const WINDOW_LOW_PERCENTILE: f64 = 2.5;
pub const WINDOW_HIGH_PERCENTILE: f64 = 80.0;

/// Linear-interpolated percentile, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

/// 8-bit image of one plane, windowed to the 2.5th and 80th percentiles of
/// that plane. Returns `(width, height, pixels)`.
pub fn slice_image(vol: &Volume3D, axis: SliceAxis, index: usize) -> Result<(usize, usize, Vec<u8>)> {
    let d = vol.dims();
    let (w, h, values): (usize, usize, Vec<f64>) = match axis {
        SliceAxis::Z => {
            if index >= d.nz {
                return Err(Error::InvalidArgument(format!("z index {index} outside 0..{}", d.nz)));
            }
            (d.nx, d.ny, vol.slice_z(index).to_vec())
        }
        SliceAxis::X => {
            if index >= d.nx {
                return Err(Error::InvalidArgument(format!("x index {index} outside 0..{}", d.nx)));
            }
            let v = (0..d.nz).flat_map(|z| (0..d.ny).map(move |y| (y, z))).map(|(y, z)| vol.get(index, y, z)).collect();
            (d.ny, d.nz, v)
        }
    };
    let lo = percentile(&values, WINDOW_LOW_PERCENTILE);
    let hi = percentile(&values, WINDOW_HIGH_PERCENTILE);
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    Ok((w, h, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance { config_hash: [7; 32], seed: 42, timestamp: 1_700_000_000, tool_version: "0.1.0".into() }
    }

    fn sample_volume() -> Volume3D {
        Volume3D::from_fn(Dims::new(5, 3, 2), 27.2, |x, y, z| (x as f64 - 2.0) * 0.01 + y as f64 * 0.001 - z as f64 * 0.25)
    }

    #[test]
    fn header_offsets_are_as_documented() {
        let vol = sample_volume();
        let tag = GeometryTag { theta_deg: 61.0, fingerprint: 99 };
        let b = encode_volume(&vol, ValueKind::Psd, &prov(), tag, &[]).unwrap();
        assert_eq!(&b[0..4], b"LMV1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(b[32..40].try_into().unwrap()), 27.2);
        assert_eq!(u32::from_le_bytes(b[40..44].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[TIMESTAMP_OFFSET..TIMESTAMP_OFFSET + 8].try_into().unwrap()), 1_700_000_000);
        assert_eq!(&b[64..96], &[7u8; 32]);
        assert_eq!(f64::from_le_bytes(b[96..104].try_into().unwrap()), 61.0);
        assert_eq!(&b[112..117], b"0.1.0");
        assert_eq!(b.len(), HEADER_LEN + 30 * 4);
        // x-fastest payload
        let first = f32::from_le_bytes(b[128..132].try_into().unwrap());
        let second = f32::from_le_bytes(b[132..136].try_into().unwrap());
        assert_eq!(first, vol.get(0, 0, 0) as f32);
        assert_eq!(second, vol.get(1, 0, 0) as f32);
    }

    #[test]
    fn f32_exact_values_round_trip_bit_identically() {
        let vol = Volume3D::from_fn(Dims::new(4, 4, 4), 1.0, |x, y, z| ((x * 16 + y * 4 + z) as f32 * 0.37f32) as f64);
        let b = encode_volume(&vol, ValueKind::Contrast, &prov(), GeometryTag::NONE, &[]).unwrap();
        let (h, back) = decode_volume(&b, Path::new("mem")).unwrap();
        assert_eq!(back, vol);
        assert_eq!(h.kind, ValueKind::Contrast);
        assert_eq!(h.provenance, prov());
        assert!(h.geometry.is_none());
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut b = encode_volume(&sample_volume(), ValueKind::Contrast, &prov(), GeometryTag::NONE, &[]).unwrap();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = decode_volume(&b, Path::new("old.lmv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("version 1") && msg.contains("version 2"), "{msg}");
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let b = encode_volume(&sample_volume(), ValueKind::Contrast, &prov(), GeometryTag::NONE, &[]).unwrap();
        assert!(decode_volume(&b[..b.len() - 1], Path::new("x")).is_err());
        let mut longer = b.clone();
        longer.push(0);
        assert!(decode_volume(&longer, Path::new("x")).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad, Path::new("x")), Err(Error::Format(_))));
        let mut kind = b;
        kind[40] = 9;
        assert!(decode_volume(&kind, Path::new("x")).is_err());
    }

    #[test]
    fn weights_carry_tensor_table() {
        let params: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let tensors = vec![
            NamedTensor { name: "enc0.conv.weight".into(), offset: 0, shape: vec![2, 1, 2, 2] },
            NamedTensor { name: "enc0.conv.bias".into(), offset: 8, shape: vec![2] },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.lmv");
        write_weights(&p, &params, &tensors, &prov()).unwrap();
        let (h, back) = read_weights(&p).unwrap();
        assert_eq!(back, params);
        assert_eq!(h.tensors, tensors);
        write_volume(&p, &sample_volume(), ValueKind::Contrast, &prov(), GeometryTag::NONE).unwrap();
        assert!(read_weights(&p).is_err());
    }

    #[test]
    fn stack_round_trip_restores_geometry() {
        let dims = Dims::new(6, 6, 4);
        let geom = LaminoGeometry::full_circle(61.0, 5, dims, 2.0, 0.5).unwrap();
        let frames = geom
            .angles_deg
            .iter()
            .map(|&a| {
                let mut p = Projection::zeros(a, geom.det_nu, geom.det_nv, 2.0);
                p.pixels.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.25);
                p
            })
            .collect();
        let stack = ProjectionStack { frames, pixel_nm: 2.0 };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.lms");
        write_stack(&p, &stack, &geom, &prov()).unwrap();
        let (h, back, g2) = read_stack(&p).unwrap();
        assert_eq!(back, stack);
        assert_eq!(g2, geom);
        assert_eq!(h.provenance.seed, 42);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"LMS1");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 5);
        assert_eq!(f64::from_le_bytes(bytes[40..48].try_into().unwrap()), 61.0);
    }

    #[test]
    fn geometry_tags_compare_by_acquisition() {
        let dims = Dims::new(8, 8, 4);
        let g = LaminoGeometry::full_circle(61.0, 16, dims, 1.0, 0.5).unwrap();
        let sparse = g.decimate(4).unwrap();
        let other = LaminoGeometry::full_circle(45.0, 16, dims, 1.0, 0.5).unwrap();
        assert!(GeometryTag::of(&g).compatible(&GeometryTag::of(&sparse)));
        assert!(!GeometryTag::of(&g).compatible(&GeometryTag::of(&other)));
        assert!(GeometryTag::NONE.compatible(&GeometryTag::of(&other)));
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 100.0), 10.0);
        assert!((percentile(&v, 2.5) - 0.25).abs() < 1e-12);
        assert!((percentile(&v, 80.0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn slices_are_windowed_and_oriented() {
        let vol = Volume3D::from_fn(Dims::new(4, 3, 2), 1.0, |x, y, z| (x + 10 * y + 100 * z) as f64);
        let (w, h, px) = slice_image(&vol, SliceAxis::Z, 1).unwrap();
        assert_eq!((w, h, px.len()), (4, 3, 12));
        assert_eq!(px[0], 0);
        assert_eq!(*px.last().unwrap(), 255);
        assert!(px.windows(2).take(3).all(|p| p[0] <= p[1]));
        let (w, h, px) = slice_image(&vol, SliceAxis::X, 2).unwrap();
        assert_eq!((w, h), (3, 2));
        assert!(px[0] < px[3]);
        assert!(slice_image(&vol, SliceAxis::Z, 2).is_err());
        let flat = Volume3D::zeros(Dims::new(2, 2, 1), 1.0);
        assert!(slice_image(&flat, SliceAxis::Z, 0).unwrap().2.iter().all(|p| *p == 0));
    }

    #[test]
    fn pgm_layout() {
        let b = encode_pgm(3, 2, &[0, 1, 2, 3, 4, 255]).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[0, 1, 2, 3, 4, 255]);
        assert!(encode_pgm(2, 2, &[0]).is_err());
    }
}
