//! C ABI over the reconstruction toolkit.
//!
//! Objects are opaque handles created by `lamino_*_new`/producer functions
//! and released with the matching `lamino_*_free`. Every fallible call
//! returns a [`LaminoStatus`]; on failure a message is kept per thread and
//! can be read with [`lamino_last_error`]. Output handles are written only
//! on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lamino::config::RunConfig;
use lamino::eval::evaluate;
use lamino::fbp::fbp_reconstruct;
use lamino::geometry::LaminoGeometry;
use lamino::io::{read_volume, write_volume, GeometryTag, Provenance, ValueKind};
use lamino::phantom::generate_ic_phantom;
use lamino::pipeline::{dense_scan, prepare_scan, with_threads};
use lamino::projector::ProjectionStack;
use lamino::solver::reconstruct;
use lamino::volume::{Dims, Volume3D};
use lamino::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaminoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Geometry = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    Diverged = 8,
    Metric = 9,
    Panic = 10,
    Other = 11,
}

impl From<&Error> for LaminoStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Phantom(_) => LaminoStatus::InvalidArgument,
            Error::Shape(_) | Error::StaleCache(_) => LaminoStatus::Shape,
            Error::Geometry(_) => LaminoStatus::Geometry,
            Error::Config { .. } => LaminoStatus::Config,
            Error::Io(_) => LaminoStatus::Io,
            Error::Format(_) | Error::VersionMismatch { .. } => LaminoStatus::Format,
            Error::Diverged { .. } => LaminoStatus::Diverged,
            Error::Metric(_) | Error::Binarize(_) => LaminoStatus::Metric,
        }
    }
}

/// Run configuration.
pub struct LaminoConfig(RunConfig);

/// Real-valued volume.
pub struct LaminoVolume {
    volume: Volume3D,
    geometry: GeometryTag,
}

/// Projection stack together with its acquisition geometry.
pub struct LaminoStack {
    stack: ProjectionStack,
    geom: LaminoGeometry,
}

/// Metrics of a reconstruction against a reference.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LaminoMetrics {
    pub ber_all: f64,
    pub ber_fine: f64,
    pub pcc: f64,
    pub pcc_fine: f64,
    pub cone_energy_ratio: f64,
    pub em_threshold: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), (LaminoStatus, String)>) -> LaminoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LaminoStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LaminoStatus::Panic
        }
    }
}

type FfiResult<T> = Result<T, (LaminoStatus, String)>;

fn lift<T>(r: lamino::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (LaminoStatus::from(&e), e.to_string()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| (LaminoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| (LaminoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err((LaminoStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LaminoStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err((LaminoStatus::NullPointer, "output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lamino_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn lamino_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version contains NUL"),
    };
    VERSION.as_ptr()
}

/// Default configuration.
#[no_mangle]
pub extern "C" fn lamino_config_new() -> *mut LaminoConfig {
    Box::into_raw(Box::new(LaminoConfig(RunConfig::default())))
}

/// Parses configuration text (key = value with [sections]).
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_config_parse(text: *const c_char, out: *mut *mut LaminoConfig) -> LaminoStatus {
    guard(|| {
        let cfg = lift(RunConfig::parse(c_str(text, "text")?))?;
        emit(out, LaminoConfig(cfg))
    })
}

/// Sets one `section.key` to `value`. Cross-field checks run when the
/// configuration is used.
///
/// # Safety
/// `cfg` must come from this library; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lamino_config_set(cfg: *mut LaminoConfig, key: *const c_char, value: *const c_char) -> LaminoStatus {
    guard(|| {
        let cfg = deref_mut(cfg, "config")?;
        lift(cfg.0.set(c_str(key, "key")?, c_str(value, "value")?))
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lamino_config_free(cfg: *mut LaminoConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Copies `nx * ny * nz` values (x fastest) into a new volume.
///
/// # Safety
/// `values` must point to `nx * ny * nz` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_volume_new(
    nx: usize,
    ny: usize,
    nz: usize,
    voxel_nm: f64,
    values: *const f64,
    out: *mut *mut LaminoVolume,
) -> LaminoStatus {
    guard(|| {
        let dims = Dims::new(nx, ny, nz);
        if values.is_null() {
            return Err((LaminoStatus::NullPointer, "values is null".into()));
        }
        let n = nx.checked_mul(ny).and_then(|v| v.checked_mul(nz));
        let n = n.ok_or_else(|| (LaminoStatus::Shape, "volume size overflows".into()))?;
        let data = std::slice::from_raw_parts(values, n).to_vec();
        let volume = lift(Volume3D::from_values(dims, voxel_nm, data))?;
        emit(out, LaminoVolume { volume, geometry: GeometryTag::NONE })
    })
}

/// # Safety
/// `vol` must be a live volume handle; the three outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_volume_dims(vol: *const LaminoVolume, nx: *mut usize, ny: *mut usize, nz: *mut usize) -> LaminoStatus {
    guard(|| {
        let d = deref(vol, "volume")?.volume.dims();
        for (p, v) in [(nx, d.nx), (ny, d.ny), (nz, d.nz)] {
            *deref_mut(p, "dimension output")? = v;
        }
        Ok(())
    })
}

/// Copies the values (x fastest) into `buf`, which must hold exactly
/// `nx * ny * nz` doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lamino_volume_copy_values(vol: *const LaminoVolume, buf: *mut f64, len: usize) -> LaminoStatus {
    guard(|| {
        let v = deref(vol, "volume")?.volume.values();
        if buf.is_null() {
            return Err((LaminoStatus::NullPointer, "buffer is null".into()));
        }
        if len != v.len() {
            return Err((LaminoStatus::Shape, format!("buffer holds {len} values, volume has {}", v.len())));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(v);
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_volume_read(path: *const c_char, out: *mut *mut LaminoVolume) -> LaminoStatus {
    guard(|| {
        let (h, volume) = lift(read_volume(Path::new(c_str(path, "path")?)))?;
        emit(out, LaminoVolume { volume, geometry: h.geometry })
    })
}

/// Writes a contrast volume file stamped with the configuration hash.
///
/// # Safety
/// Handles must be live; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lamino_volume_write(cfg: *const LaminoConfig, vol: *const LaminoVolume, path: *const c_char) -> LaminoStatus {
    guard(|| {
        let cfg = &deref(cfg, "config")?.0;
        let v = deref(vol, "volume")?;
        let prov = Provenance::new(cfg.hash(), cfg.phantom.seed);
        lift(write_volume(Path::new(c_str(path, "path")?), &v.volume, ValueKind::Contrast, &prov, v.geometry))
    })
}

/// # Safety
/// `vol` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lamino_volume_free(vol: *mut LaminoVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Synthetic phantom from the `[phantom]` section.
///
/// # Safety
/// `cfg` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_phantom_generate(cfg: *const LaminoConfig, out: *mut *mut LaminoVolume) -> LaminoStatus {
    guard(|| {
        let cfg = &deref(cfg, "config")?.0;
        let volume = lift(generate_ic_phantom(&cfg.phantom))?;
        emit(out, LaminoVolume { volume, geometry: GeometryTag::NONE })
    })
}

/// Dense scan of `vol`, then jitter, alignment and decimation as configured.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_project(cfg: *const LaminoConfig, vol: *const LaminoVolume, out: *mut *mut LaminoStack) -> LaminoStatus {
    guard(|| {
        let mut cfg = deref(cfg, "config")?.0.clone();
        let v = &deref(vol, "volume")?.volume;
        cfg.phantom.dims = v.dims();
        cfg.phantom.voxel_nm = v.voxel_nm();
        lift(cfg.validate())?;
        let scan = lift(lift(with_threads(cfg.sequential, || -> lamino::Result<_> {
            let (g, dense) = dense_scan(&cfg, v)?;
            prepare_scan(&cfg, &g, &dense)
        }))?)?;
        emit(out, LaminoStack { stack: scan.stack, geom: scan.geom })
    })
}

/// # Safety
/// `stack` must be live.
#[no_mangle]
pub unsafe extern "C" fn lamino_stack_len(stack: *const LaminoStack) -> usize {
    stack.as_ref().map_or(0, |s| s.stack.len())
}

/// # Safety
/// `stack` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lamino_stack_free(stack: *mut LaminoStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Filtered backprojection onto the configured phantom grid.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_fbp(cfg: *const LaminoConfig, stack: *const LaminoStack, out: *mut *mut LaminoVolume) -> LaminoStatus {
    guard(|| {
        let cfg = &deref(cfg, "config")?.0;
        let s = deref(stack, "stack")?;
        let volume = lift(lift(with_threads(cfg.sequential, || {
            fbp_reconstruct(&s.stack, &s.geom, cfg.phantom.dims, cfg.eval.fbp_window)
        }))?)?;
        emit(out, LaminoVolume { volume, geometry: GeometryTag::of(&s.geom) })
    })
}

/// Generator-prior reconstruction with the `[solver]` and `[network]` settings.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_reconstruct(cfg: *const LaminoConfig, stack: *const LaminoStack, out: *mut *mut LaminoVolume) -> LaminoStatus {
    guard(|| {
        let cfg = &deref(cfg, "config")?.0;
        let s = deref(stack, "stack")?;
        let rec = lift(lift(with_threads(cfg.sequential, || {
            reconstruct(&s.stack, &s.geom, cfg.phantom.dims, s.geom.det_pixel_nm, &cfg.solver)
        }))?)?;
        emit(out, LaminoVolume { volume: rec.volume, geometry: GeometryTag::of(&s.geom) })
    })
}

/// BER on EM-binarized values, PCC on raw values, cone energy of the spectrum.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lamino_evaluate(
    cfg: *const LaminoConfig,
    recon: *const LaminoVolume,
    reference: *const LaminoVolume,
    out: *mut LaminoMetrics,
) -> LaminoStatus {
    guard(|| {
        let cfg = &deref(cfg, "config")?.0;
        let r = deref(recon, "reconstruction")?;
        let f = deref(reference, "reference")?;
        if !r.geometry.compatible(&f.geometry) {
            return Err((LaminoStatus::Geometry, "volumes come from different geometries".into()));
        }
        let m = lift(evaluate("ffi", &r.volume, &f.volume, cfg.eval.reference, cfg.geometry.theta_deg))?;
        let out = deref_mut(out, "metrics output")?;
        *out = LaminoMetrics {
            ber_all: m.ber_all,
            ber_fine: m.ber_fine,
            pcc: m.pcc,
            pcc_fine: m.pcc_fine,
            cone_energy_ratio: m.cone_energy_ratio,
            em_threshold: m.em_threshold,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn status_mapping_covers_error_kinds() {
        assert_eq!(LaminoStatus::from(&Error::Shape("x".into())), LaminoStatus::Shape);
        assert_eq!(
            LaminoStatus::from(&Error::Config { line: 1, key: "k".into(), message: "m".into() }),
            LaminoStatus::Config
        );
        assert_eq!(LaminoStatus::from(&Error::Format("x".into())), LaminoStatus::Format);
    }

    #[test]
    fn null_handles_are_reported() {
        let mut out = ptr::null_mut();
        let s = unsafe { lamino_phantom_generate(ptr::null(), &mut out) };
        assert_eq!(s, LaminoStatus::NullPointer);
        assert!(out.is_null());
        let msg = unsafe { CStr::from_ptr(lamino_last_error()) }.to_str().unwrap();
        assert!(msg.contains("config"));
    }

    #[test]
    fn panics_do_not_cross_the_boundary() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, LaminoStatus::Panic);
    }
}
