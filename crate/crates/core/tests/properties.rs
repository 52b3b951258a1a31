use std::path::Path;

use proptest::prelude::*;

use lamino::config::RunConfig;
use lamino::io::{decode_volume, encode_volume, GeometryTag, Provenance, ValueKind};
use lamino::preproc::{fourier_shift, HighPass, Shift};
use lamino::{back_project, forward_project_all, Dims, LaminoGeometry, Projection, Volume3D};

fn volume(dims: Dims, seed: u64) -> Volume3D {
    // Small LCG so the property inputs stay reproducible without extra state.
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Volume3D::from_fn(dims, 1.0, |_, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    })
}

fn frame(nu: usize, nv: usize, seed: u64) -> Projection {
    let v = volume(Dims::new(nu, nv, 1), seed);
    Projection::zeros(0.0, nu, nv, 1.0).with_pixels(v.into_values())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projector_adjoint_holds(theta in 20.0f64..89.0, n in 4usize..9, nz in 2usize..6, k in 1usize..5, seed in any::<u64>()) {
        let dims = Dims::new(n, n + 1, nz);
        let geom = LaminoGeometry::full_circle(theta, k, dims, 1.0, 0.5).unwrap();
        let x = volume(dims, seed);
        let y = forward_project_all(&volume(dims, seed ^ 0xabc), &geom).unwrap();
        let ax = forward_project_all(&x, &geom).unwrap();
        let aty = back_project(&y, &geom, dims).unwrap();
        let (l, r) = (ax.dot(&y), x.dot(&aty));
        prop_assert!((l - r).abs() <= 1e-9 * l.abs().max(r.abs()).max(1e-12), "{l} vs {r}");
    }

    #[test]
    fn high_pass_is_symmetric_and_kills_the_mean(nu in 3usize..12, nv in 3usize..12, sigma in 0.5f64..6.0, seed in any::<u64>()) {
        let h = HighPass::new(nu, nv, sigma).unwrap();
        let a = frame(nu, nv, seed);
        let b = frame(nu, nv, seed.wrapping_add(1));
        let ha = h.apply(&a).unwrap();
        let hb = h.apply(&b).unwrap();
        prop_assert!((ha.dot(&b) - a.dot(&hb)).abs() < 1e-10);
        prop_assert!(ha.sum().abs() < 1e-9);
    }

    #[test]
    fn fourier_shift_round_trips(hu in 2usize..6, hv in 2usize..6, du in -3.0f64..3.0, dv in -3.0f64..3.0, seed in any::<u64>()) {
        // Odd sizes, as on the detector; an even size has a Nyquist bin that a real frame cannot shift.
        let a = frame(2 * hu + 1, 2 * hv + 1, seed);
        let back = fourier_shift(&fourier_shift(&a, Shift { du, dv }), Shift { du: -du, dv: -dv });
        for (x, y) in a.pixels.iter().zip(&back.pixels) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn volume_file_round_trips(nx in 1usize..7, ny in 1usize..7, nz in 1usize..5, seed in any::<u64>(), kind in 0usize..4) {
        let v = volume(Dims::new(nx, ny, nz), seed);
        let kind = [ValueKind::Contrast, ValueKind::Binary, ValueKind::Psd, ValueKind::Weights][kind];
        let prov = Provenance::new([7; 32], seed);
        let bytes = encode_volume(&v, kind, &prov, GeometryTag::NONE, &[]).unwrap();
        let (h, back) = decode_volume(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(h.dims, v.dims());
        prop_assert_eq!(h.kind, kind);
        prop_assert_eq!(h.provenance.seed, seed);
        prop_assert_eq!(h.provenance.config_hash, [7; 32]);
        for (a, b) in v.values().iter().zip(back.values()) {
            prop_assert_eq!(*a as f32 as f64, *b);
        }
        // Any truncation is a format error, never a panic.
        let cut = bytes.len() / 2;
        prop_assert!(decode_volume(&bytes[..cut], Path::new("mem")).is_err());
    }

    #[test]
    fn config_text_round_trips(seed in 0u64..1000, iters in 0usize..5000, theta in 10.0f64..89.0, lr in 1e-6f64..1e-2) {
        let mut c = RunConfig::default();
        c.set("phantom.seed", &seed.to_string()).unwrap();
        c.set("solver.n_iters", &iters.to_string()).unwrap();
        c.set("geometry.theta_deg", &theta.to_string()).unwrap();
        c.set("solver.learning_rate", &lr.to_string()).unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }
}
