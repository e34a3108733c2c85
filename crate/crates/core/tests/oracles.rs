use proptest::prelude::*;

use sobotrim::counterexample::{reproduce_section4, CounterexampleParams};
use sobotrim::cubication::{build_cubication, classify};
use sobotrim::error::Error;
use sobotrim::grid::{energy, reflect_extend, Grid, GridMap, Region};
use sobotrim::homogenization::homogenize_cube;
use sobotrim::manifolds::{bad_map_algebraic, embed_funnel, FunnelProfile, TargetManifold};
use sobotrim::maps::{mollify_project, MapSpec};
use sobotrim::pipeline::{converge, ClaimConstants, ScheduleLaw, StageSchedule};
use sobotrim::trimming::{brouwer_degree, geodesic_trim_1d, DegreeMethod};
use sobotrim::util::norm;

fn s2() -> TargetManifold {
    TargetManifold::sphere(2).unwrap()
}

#[test]
fn euclidean_target_has_unbounded_tube() {
    let e = TargetManifold::euclidean(3).unwrap();
    assert_eq!(e.tubular_radius(1.0), f64::INFINITY);
    assert_eq!(e.project(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
}

#[test]
fn equal_points_are_at_distance_zero() {
    for m in [s2(), TargetManifold::funnel_sphere(2, 0.4).unwrap()] {
        let y = m.project(&[0.3, 0.4, 0.5]).unwrap();
        assert_eq!(m.geodesic_distance(&y, &y).unwrap(), 0.0);
    }
}

#[test]
fn funnel_parameters_follow_the_admissible_range() {
    assert!(embed_funnel(2, 0.4, FunnelProfile::default()).is_ok());
    for a in [0.0, 0.5, 0.8] {
        assert!(matches!(embed_funnel(2, a, FunnelProfile::default()), Err(Error::ParameterOutOfRange(_))), "{a}");
    }
    // 1/(n(β−1)) < γ < (n−1)/n with n = 2, β = 3: 0.25 < γ < 0.5.
    assert!(bad_map_algebraic(2, 3.0, 0.3).is_ok());
    assert!(bad_map_algebraic(2, 3.0, 0.2).is_err());
    assert!(bad_map_algebraic(2, 3.0, 0.6).is_err());
}

#[test]
fn angular_energy_matches_polar_quadrature() {
    let g = Grid::new(2, 513, 1.0).unwrap();
    let u = MapSpec::Angular.build(&g).unwrap();
    let reg = Region::from_cells(&g, "annulus", |x| norm(x) > 0.25);
    // ∫ 1/|x| over the square minus the disc of radius 1/4.
    let exact = 8.0 * 1f64.asinh() - std::f64::consts::FRAC_PI_2;
    let e = energy(&u, 1.0, &reg).unwrap();
    assert!((e - exact).abs() < 0.02 * exact, "{e} vs {exact}");
}

#[test]
fn single_segment_cubication() {
    let g = Grid::new(1, 33, 1.5).unwrap();
    let c = build_cubication(&g, 0.5, 1.5, 0.125).unwrap();
    assert_eq!(c.cubes().len(), 1);
    assert_eq!(c.faces(0).len(), 2);
}

#[test]
fn constant_maps_are_fixed_everywhere() {
    let g = Grid::new(2, 65, 1.0).unwrap();
    let u = GridMap::constant(g.clone(), &[0.0, 0.0, 1.0]);
    assert_eq!(reflect_extend(&u, 0.5).unwrap().values.iter().filter(|v| **v != 0.0 && **v != 1.0).count(), 0);
    assert_eq!(homogenize_cube(&u, 1.5).unwrap(), u);
    assert_eq!(energy(&u, 2.0, &Region::full(&g)).unwrap(), 0.0);
    let wide = GridMap::constant(Grid::new(2, 81, 1.25).unwrap(), &[0.0, 0.0, 1.0]);
    let cub = build_cubication(&wide.grid, 0.25, 0.25, 0.25).unwrap();
    assert_eq!(classify(&wide, &cub, 2.0, 0.5, 1.0, &s2()).unwrap().n_bad(), 0);

    let s = s2();
    let c = ClaimConstants::default();
    let sched = StageSchedule::from_law(&ScheduleLaw::default(), &s, g.res, &c).unwrap();
    let rep = converge(&u, &s, 2.0, &sched, &c, 0.05).unwrap();
    assert!(rep.converged);
    assert!(rep.rows.iter().all(|r| r.err_lp == 0.0 && r.err_grad == 0.0));
    assert_eq!(rep.outputs.last().unwrap(), &u);
}

#[test]
fn equal_endpoints_give_a_constant_path() {
    let y = [0.0, 0.6, 0.8];
    let t = geodesic_trim_1d(&y, &y, &s2(), 17).unwrap();
    assert_eq!(t.length, 0.0);
    assert!(t.map.values.chunks(3).all(|v| v == y));
}

#[test]
fn coarse_counterexample_certificate() {
    let p = CounterexampleParams { res: 257, lift_res: 65, ..Default::default() };
    let r = reproduce_section4(2, 3, &p).unwrap();
    for name in ["degrees_nonzero", "small_cube_energy_decreasing", "area_witness", "battery_above_epsilon", "lift_factor"] {
        assert!(r.check(name).unwrap().pass, "{name}: {:?}", r.check(name));
    }
    assert!(r.epsilon > 0.0);
    assert!((r.lift.ratio - 1.0).abs() < 0.05);
}

#[test]
fn odd_degree_maps() {
    let g = Grid::new(2, 65, 1.0).unwrap();
    // z ↦ z̄³ has degree −3 around the origin.
    let u = GridMap::from_fn(g, 2, |x, o| {
        let (a, b) = (x[0], -x[1]);
        o[0] = a * a * a - 3.0 * a * b * b;
        o[1] = 3.0 * a * a * b - b * b * b;
    });
    for m in [DegreeMethod::Winding, DegreeMethod::Simplex] {
        assert_eq!(brouwer_degree(&u, 0.5, &[0.003, 0.001], m).unwrap(), -3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sphere_projection_is_idempotent(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
        prop_assume!(norm(&[x, y, z]) > 0.6);
        let s = s2();
        let p = s.project(&[x, y, z]).unwrap();
        prop_assert!((norm(&p) - 1.0).abs() < 1e-12);
        let q = s.project(&p).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn funnel_projection_lands_on_the_surface(x in -1.5..1.5f64, y in -1.5..1.5f64, z in 0.0..2.0f64) {
        let f = TargetManifold::funnel_sphere(2, 0.4).unwrap();
        if let Ok(p) = f.project(&[x, y, z]) {
            prop_assert!(f.residual(&p) < 1e-8);
        }
    }

    #[test]
    fn mollify_project_stays_on_the_sphere(seed in 0u64..1000) {
        let g = Grid::new(2, 33, 1.0).unwrap();
        let u = MapSpec::SmoothSphere { seed }.build(&g).unwrap();
        let v = mollify_project(&u, &s2(), 2.0 * g.h(), 4).unwrap();
        prop_assert!(v.values.chunks(3).all(|w| (norm(w) - 1.0).abs() < 1e-12));
    }
}
