use std::f64::consts::PI;

use nalgebra::{dvector, DMatrix, DVector};
use proptest::prelude::*;

use randers::causality::{causal_cone, Stencil};
use randers::config::Config;
use randers::fermat::examples::{rotating, static_cylinder};
use randers::fermat::{Direction, StationarySpacetime};
use randers::fields::{ChartDomain, OneFormField, RiemannianField, ScalarField, VectorField};
use randers::finsler::{FinslerMetric, RandersMetric};
use randers::variational::{minimize, BoundarySpec, DiscreteCurve, MinimizeOptions};

fn square(half: f64) -> ChartDomain {
    ChartDomain::new(2)
        .unwrap()
        .with_bounds(0, -half, half)
        .unwrap()
        .with_bounds(1, -half, half)
        .unwrap()
}

/// Position-dependent `h` with `|omega| = b` everywhere.
fn wavy(b: f64) -> FinslerMetric {
    let hm = |x: &DVector<f64>| {
        DMatrix::from_row_slice(2, 2, &[1.5 + x[0].sin(), 0.3 * x[1], 0.3 * x[1], 1.2 + 0.2 * x[0] * x[0]])
    };
    let h = RiemannianField::new(square(2.0), hm);
    let omega = OneFormField::new(square(2.0), move |x| {
        let v = dvector![(2.0 * x[1]).cos(), x[0].sin() + 0.3];
        let n = v.dot(&(hm(x).try_inverse().unwrap() * &v)).sqrt();
        v * (b / n)
    });
    FinslerMetric::from(RandersMetric::new(h, omega).unwrap())
}

fn point() -> impl Strategy<Value = DVector<f64>> {
    (-1.8f64..1.8, -1.8f64..1.8).prop_map(|(a, b)| dvector![a, b])
}

fn direction() -> impl Strategy<Value = DVector<f64>> {
    (0.0f64..2.0 * PI, 0.05f64..5.0).prop_map(|(t, r)| dvector![r * t.cos(), r * t.sin()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn homogeneity(x in point(), y in direction(), lambda in 1e-3f64..10.0, b in 0.0f64..0.95) {
        let m = wavy(b);
        let f = m.eval(&x, &y);
        prop_assert!((m.eval(&x, &(&y * lambda)) - lambda * f).abs() <= 1e-12 * (1.0 + lambda * f));
    }

    #[test]
    fn euler_identity_closed_form(x in point(), y in direction(), b in 0.0f64..0.95) {
        let m = wavy(b);
        let f = m.eval(&x, &y);
        let g = m.g_matrix(&x, &y).unwrap();
        prop_assert!((y.dot(&(&g * &y)) - f * f).abs() <= 1e-12 * f * f);
    }

    #[test]
    fn energy_density_is_c1_at_zero_section(x in point(), t in 0.0f64..2.0 * PI, b in 0.0f64..0.95) {
        let m = wavy(b);
        let v = dvector![t.cos(), t.sin()];
        for s in [1e-2, 1e-4, 1e-6] {
            let d = m.energy_density(&x, &(&v * s)).unwrap();
            prop_assert!(d.dy.norm() <= 20.0 * s);
        }
    }

    #[test]
    fn fundamental_tensor_positive_definite(x in point(), y in direction(), b in 0.0f64..0.99) {
        let g = wavy(b).g_matrix(&x, &y).unwrap();
        prop_assert!(g.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn chern_connection_is_torsion_free(x in point(), y in direction(), b in 0.0f64..0.9) {
        let c = wavy(b).chern_coefficients(&x, &y).unwrap();
        prop_assert!(c.chern.lower_asymmetry() < 1e-9);
    }

    #[test]
    fn riemannian_connection_ignores_direction(x in point(), y in direction(), z in direction()) {
        let m = wavy(0.0);
        let a = m.chern_coefficients(&x, &y).unwrap().chern;
        let b = m.chern_coefficients(&x, &z).unwrap().chern;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    prop_assert!((a.get(i, j, k) - b.get(i, j, k)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn reversed_fermat_metric_is_reflection(x in point(), y in direction(), w in -1.0f64..1.0) {
        let st = rotating(w, 2.0);
        let (f, fr) = (st.fermat_metric().unwrap(), st.reversed_fermat_metric().unwrap());
        prop_assert!((fr.eval(&x, &y) - f.eval(&x, &(-&y))).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn static_fermat_metric_is_reversible(x in point(), c in 0.1f64..1.0, s in 0.5f64..2.0) {
        let d = square(2.0);
        let st = StationarySpacetime::new(
            RiemannianField::new(d.clone(), move |x| {
                DMatrix::from_row_slice(2, 2, &[1.0 + c * x[0] * x[0], 0.1, 0.1, s])
            }),
            VectorField::constant(d.clone(), dvector![0.0, 0.0]),
            ScalarField::new(d, move |x| 1.0 + c * x[1].sin().powi(2)),
        )
        .unwrap();
        prop_assert!((st.fermat_metric().unwrap().reversibility(&x) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn descent_is_monotone(p in point(), q in point(), amp in -0.5f64..0.5, b in 0.0f64..0.8) {
        let m = wavy(b);
        let n = 16;
        let nodes = (0..=n)
            .map(|k| {
                let s = k as f64 / n as f64;
                &p * (1.0 - s) + &q * s + dvector![0.0, amp * (PI * s).sin()]
            })
            .collect();
        let curve = DiscreteCurve::new(nodes, vec![]).unwrap();
        let rep = minimize(&m, &curve, &BoundarySpec::FixedFixed, &MinimizeOptions::default()).unwrap();
        for w in rep.energy_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-13 * (1.0 + w[0]));
        }
    }

    #[test]
    fn rays_satisfy_arrival_identity(z in -3.0f64..3.0, theta in 0.3f64..6.0, t0 in -5.0f64..5.0) {
        let st = static_cylinder();
        let rays = st
            .lens_images(&dvector![0.0, 0.0], t0, &dvector![theta, z], 1, 32, &MinimizeOptions::default(), Direction::Future)
            .unwrap();
        prop_assert!(!rays.is_empty());
        for r in &rays {
            prop_assert!((r.arrival_time - t0 - r.length).abs() <= 1e-12 * (1.0 + r.length));
            prop_assert!(r.is_time_oriented());
        }
    }

    #[test]
    fn cone_slices_are_nested(s1 in 0.0f64..1.5, ds in 0.0f64..1.5) {
        let cone = causal_cone(&rotating(0.4, 2.0), &dvector![0.3, -0.2], 0.0, 4.0, Direction::Future, 41, 4).unwrap();
        let (a, b) = (cone.slice_mask(s1), cone.slice_mask(s1 + ds));
        prop_assert!(a.iter().zip(&b).all(|(x, y)| !*x || *y));
        prop_assert_eq!(cone.map.stencil, Stencil::Sixteen);
    }

    #[test]
    fn config_dump_round_trips(
        n in 2usize..500,
        k in 0i64..5,
        tol in 1e-12f64..1e-2,
        seed in 0u64..1_000_000,
        lo in -10.0f64..0.0,
        width in 0.1f64..10.0,
        w in -2.0f64..2.0,
    ) {
        let text = format!(
            "dim = 2\nbounds = [[{lo:?}, {:?}], none]\nperiods = [none, 2pi]\ndelta = [0, {w:?}*x1]\nN = {n}\nK = {k}\ntol = {tol:?}\nseed = {seed}\n",
            lo + width
        );
        let c = Config::parse(&text).unwrap();
        prop_assert_eq!(&Config::parse(&c.dump()).unwrap(), &c);
    }
}
