use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rspde_core::archive::Archive;
use rspde_core::controlled::{compose, scrp_distance};
use rspde_core::convolution::rough_convolution_values;
use rspde_core::rough_path::{chen_defect, lift_smooth};
use rspde_core::spectral::interpolation_defect;
use rspde_core::transform::Collocation;
use rspde_core::*;

fn exps() -> HolderExponents {
    HolderExponents::new(0.45, 0.4, 0.3).unwrap()
}

fn field_from(shape: FieldShape, vals: &[(f64, f64)]) -> SpectralField {
    let coeffs = (0..shape.len()).map(|i| C64::new(vals[i % vals.len()].0, vals[i % vals.len()].1)).collect();
    SpectralField::from_coeffs(shape, false, coeffs).unwrap()
}

/// Makes the coefficients those of a real field: `û_{-k} = conj(û_k)`.
fn hermitize(shape: FieldShape, mut u: SpectralField) -> SpectralField {
    let modes = shape.modes();
    let c = u.coeffs_mut();
    for ch in 0..shape.channels {
        for i in 0..modes {
            let j = shape.mirror(i);
            if i < j {
                c[ch * modes + j] = c[ch * modes + i].conj();
            } else if i == j {
                c[ch * modes + i].im = 0.0;
            }
        }
    }
    u.set_real_valued(true);
    u
}

fn trig_path(a: f64, b: f64, w: f64) -> impl Fn(f64, &mut [f64]) {
    move |t, x: &mut [f64]| {
        x[0] = a * (w * t).sin() + b * t;
        if x.len() > 1 {
            x[1] = b * (w * t).cos() - a * t * t;
        }
    }
}

fn controlled_ensemble(grid: &TimeGrid, lifts: &LiftEnsemble, shape: FieldShape, scale: f64) -> ControlledEnsemble {
    let xs: Vec<f64> = (0..grid.num_nodes()).map(|i| lifts.get(0).x(i)[0]).collect();
    let y = SampleEnsemble::from_fn(shape, grid, 1, true, |_, i, out| {
        for (k, o) in out.iter_mut().enumerate() {
            *o = C64::new(scale * (1.0 + xs[i]) / (1.0 + k as f64), 0.0);
        }
    });
    let yp = SampleEnsemble::from_fn(shape, grid, 1, true, |_, _, out| {
        for (k, o) in out.iter_mut().enumerate() {
            *o = C64::new(scale / (1.0 + k as f64), 0.0);
        }
    });
    ControlledEnsemble::new(y, yp, lifts, 0.0, exps()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn interpolation_inequality_holds(
        vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..40),
        n in 1usize..3,
        k in 1usize..6,
        g in (-1.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
    ) {
        let shape = FieldShape::new(n, k, 1).unwrap();
        let u = field_from(shape, &vals);
        prop_assume!(!u.is_zero());
        let (g1, g2, g3) = (g.0, g.0 + g.1, g.0 + g.1 + g.2);
        let d = interpolation_defect(&u, SpaceIndex(g1), SpaceIndex(g2), SpaceIndex(g3)).unwrap();
        prop_assert!(d <= 1.0 + 1e-12, "defect {}", d);
    }

    #[test]
    fn smooth_lifts_satisfy_chen(a in -2.0f64..2.0, b in -2.0f64..2.0, w in 0.5f64..20.0, steps in 2usize..40, e in 1usize..3) {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let lift = lift_smooth(&trig_path(a, b, w), &grid, e, 3).unwrap();
        let (x, xx) = lift.expand();
        let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())).powi(2);
        prop_assert!(chen_defect(&x, &xx, e).unwrap() <= 1e-12 * scale);
    }

    #[test]
    fn brownian_lifts_satisfy_chen(seed in any::<u64>(), ito in any::<bool>()) {
        let grid = TimeGrid::uniform(1.0, 24).unwrap();
        let mode = if ito { BrownianMode::Ito } else { BrownianMode::Strat };
        let lifts = LiftEnsemble::brownian(seed, &grid, 2, mode, 2, 2).unwrap();
        for lift in lifts.members() {
            let (x, xx) = lift.expand();
            prop_assert!(chen_defect(&x, &xx, 2).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn lift_sampling_is_a_function_of_the_seed(seed in any::<u64>()) {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let a = LiftEnsemble::fbm(seed, &grid, 1, 0.4, 1, 3).unwrap();
        let b = LiftEnsemble::fbm(seed, &grid, 1, 0.4, 1, 3).unwrap();
        let c = LiftEnsemble::fbm(seed.wrapping_add(1), &grid, 1, 0.4, 1, 3).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(a.get(0).x_values(), c.get(0).x_values());
    }

    #[test]
    fn heat_cocycle(kappa in 0.01f64..1.0, s in 0.0f64..0.3, r in 0.3f64..0.6, t in 0.6f64..1.0,
                    vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..20)) {
        let shape = FieldShape::new(1, 6, 1).unwrap();
        let u = field_from(shape, &vals);
        let p = Propagator::heat(kappa);
        let two = p.apply(r, t, &p.apply(s, r, &u).unwrap()).unwrap();
        let one = p.apply(s, t, &u).unwrap();
        for (a, b) in one.coeffs().iter().zip(two.coeffs()) {
            prop_assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn heat_flow_keeps_real_fields_real(vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..30)) {
        let shape = FieldShape::new(2, 3, 2).unwrap();
        let u = hermitize(shape, field_from(shape, &vals));
        let v = Propagator::heat(0.3).apply(0.0, 0.2, &u).unwrap();
        prop_assert!(v.hermitian_defect() <= 1e-14);
    }

    #[test]
    fn collocation_round_trip(vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..30), k in 1usize..8) {
        let shape = FieldShape::new(1, k, 1).unwrap();
        let u = field_from(shape, &vals);
        let col = Collocation::for_products(1, k);
        let mut phys = Vec::new();
        col.to_physical(u.coeffs(), &mut phys);
        let mut back = vec![C64::new(0.0, 0.0); shape.len()];
        col.from_physical(&mut phys, &mut back);
        for (a, b) in u.coeffs().iter().zip(&back) {
            prop_assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn archive_round_trip(vals in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..20), samples in 1usize..4, steps in 1usize..5) {
        let shape = FieldShape::new(1, 2, 2).unwrap();
        let grid = TimeGrid::uniform(0.7, steps).unwrap();
        let q = SampleEnsemble::from_fn(shape, &grid, samples, false, |s, i, out| {
            for (k, o) in out.iter_mut().enumerate() {
                let v = vals[(s + i + k) % vals.len()];
                *o = C64::new(v.0, v.1);
            }
        });
        let bytes = Archive::from_ensemble(&q).unwrap().to_bytes();
        let back = Archive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let restored = back.to_ensemble().unwrap();
        prop_assert_eq!(restored.data(), q.data());
    }

    #[test]
    fn compose_is_linear_in_the_path(a in -2.0f64..2.0, b in -2.0f64..2.0, g0 in -1.0f64..1.0, g1 in -1.0f64..1.0) {
        let shape = FieldShape::new(1, 2, 1).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let lifts = LiftEnsemble::shared(lift_smooth(&trig_path(0.7, 0.3, 5.0), &grid, 1, 2).unwrap());
        let (c1, c2) = (controlled_ensemble(&grid, &lifts, shape, 1.0), controlled_ensemble(&grid, &lifts, shape, -0.4));
        let sym = MultiplicationSymbol::function(1, 1, false, Arc::new(move |node, _s, x: &[f64], out: &mut [f64]| {
            out[0] = g0 + g1 * (2.0 * std::f64::consts::PI * x[0]).cos() + 0.01 * node as f64;
        }));
        let g = ControlledOperatorFamily::new(sym, MultiplicationSymbol::zero(1, 1), &lifts, shape).unwrap();
        let lhs = compose(&g, &c1.combine(a, &c2, b).unwrap()).unwrap();
        let rhs = compose(&g, &c1).unwrap().combine(a, &compose(&g, &c2).unwrap(), b).unwrap();
        for (x, y) in lhs.y().data().iter().zip(rhs.y().data()) {
            prop_assert!((x - y).norm() <= 1e-12);
        }
        for (x, y) in lhs.y_prime().data().iter().zip(rhs.y_prime().data()) {
            prop_assert!((x - y).norm() <= 1e-12);
        }
    }

    #[test]
    fn convolution_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, kappa in 0.0f64..0.5) {
        let shape = FieldShape::new(1, 2, 1).unwrap();
        let grid = TimeGrid::dyadic(1.0, 5).unwrap();
        let lifts = LiftEnsemble::shared(lift_smooth(&trig_path(1.1, -0.2, 7.0), &grid, 1, 2).unwrap());
        let prop = GridPropagator::new(&Propagator::heat(kappa), &grid, shape).unwrap();
        let (c1, c2) = (controlled_ensemble(&grid, &lifts, shape, 1.0), controlled_ensemble(&grid, &lifts, shape, 0.3));
        let lhs = rough_convolution_values(&c1.combine(a, &c2, b).unwrap(), &prop).unwrap();
        let z1 = rough_convolution_values(&c1, &prop).unwrap();
        let z2 = rough_convolution_values(&c2, &prop).unwrap();
        let rhs = z1.combine(a, &z2, b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).norm() <= 1e-12 * (1.0 + y.norm()));
        }
    }

    #[test]
    fn scrp_norm_is_homogeneous(c in -3.0f64..3.0) {
        let shape = FieldShape::new(1, 2, 1).unwrap();
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let lifts = LiftEnsemble::shared(lift_smooth(&trig_path(0.5, 1.0, 3.0), &grid, 1, 2).unwrap());
        let u = controlled_ensemble(&grid, &lifts, shape, 1.0);
        let zero = ControlledEnsemble::zero(shape, &grid, &lifts, 0.0, exps());
        let n1 = u.scrp_norm(2.0).unwrap().total;
        let nc = scrp_distance(&u.combine(c, &zero, 0.0).unwrap(), &zero, 2.0).unwrap().total;
        prop_assert!((nc - c.abs() * n1).abs() <= 1e-12 * (1.0 + n1));
    }
}

#[test]
fn lift_rescaling_is_canonical() {
    let grid = TimeGrid::uniform(1.0, 12).unwrap();
    let lift = lift_smooth(&trig_path(0.8, 0.4, 4.0), &grid, 2, 3).unwrap();
    let s = lift.scaled(-1.7);
    let (mut a, mut b) = (vec![0.0; 4], vec![0.0; 4]);
    lift.xx(2, 9, &mut a);
    s.xx(2, 9, &mut b);
    for (x, y) in a.iter().zip(&b) {
        assert_relative_eq!(*y, 1.7 * 1.7 * x, max_relative = 1e-13);
    }
}
