use std::sync::{Arc, OnceLock};

use fractal_westervelt::domains::{
    contains_polygon, koch_prefractal, polygon_area, read_polygon, write_polygon, Point, Polygon,
    PrefractalSpec,
};
use fractal_westervelt::fem::{
    extend_by_zero, l2_project, quadrature_points, FemFunction, FemSpace,
};
use fractal_westervelt::linwave::{energy_report, solve_modal, PhysicalParams, TimeGrid};
use fractal_westervelt::meshing::{refine_uniform, triangulate, MIN_ANGLE_DEG};
use fractal_westervelt::mosco::TestFunctionSet;
use fractal_westervelt::spectral::{EigenOptions, ModalBasis};
use fractal_westervelt::westervelt::SmallnessBudget;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn square_basis() -> Arc<ModalBasis> {
    static B: OnceLock<Arc<ModalBasis>> = OnceLock::new();
    B.get_or_init(|| {
        let mesh = triangulate(&Polygon::unit_square(), 0.1).unwrap();
        let space = Arc::new(FemSpace::new(Arc::new(mesh)).unwrap());
        Arc::new(ModalBasis::compute(&space, 12, &EigenOptions::default()).unwrap())
    })
    .clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn koch_levels_are_ccw_nested_and_follow_the_area_series(
        side in 0.1f64..10.0, cx in -5.0f64..5.0, cy in -5.0f64..5.0, level in 0u32..4,
    ) {
        let spec = PrefractalSpec::new(side, level, Point::new(cx, cy));
        let p = koch_prefractal(&spec).unwrap();
        let q = koch_prefractal(&spec.with_level(level + 1)).unwrap();
        prop_assert!(p.signed_area() > 0.0);
        prop_assert!(polygon_area(&q) > polygon_area(&p));
        prop_assert!(contains_polygon(&q, &p));
        let a0 = 3f64.sqrt() / 4.0 * side * side;
        let limit = a0 * 8.0 / 5.0;
        let deficit = a0 / 3.0 * (4.0f64 / 9.0).powi(level as i32) / (1.0 - 4.0 / 9.0);
        prop_assert!((limit - polygon_area(&p) - deficit).abs() <= 1e-12 * side * side * 4.0);
    }

    #[test]
    fn polygon_text_round_trips_bit_exactly(side in 1e-3f64..1e3, cx in -1e3f64..1e3, level in 0u32..3) {
        let p = koch_prefractal(&PrefractalSpec::new(side, level, Point::new(cx, -cx / 3.0))).unwrap();
        let q = read_polygon(&write_polygon(&p)).unwrap();
        prop_assert_eq!(p.vertices(), q.vertices());
    }

    #[test]
    fn meshes_are_conforming_and_shape_regular(w in 0.3f64..2.0, hgt in 0.3f64..2.0, h in 0.08f64..0.3) {
        let p = Polygon::rectangle(0.0, 0.0, w, hgt).unwrap();
        let h = h * w.min(hgt);
        let m = triangulate(&p, h).unwrap();
        prop_assert!(m.min_angle_deg() >= MIN_ANGLE_DEG);
        prop_assert!(m.h() <= h * (1.0 + 1e-12));
        prop_assert!((m.total_area() - w * hgt).abs() < 1e-12 * w * hgt);
        let boundary: std::collections::HashSet<_> = m.boundary_edges().into_iter().collect();
        for (e, count) in m.edges() {
            prop_assert_eq!(count as usize, if boundary.contains(&e) { 1 } else { 2 });
        }
    }

    #[test]
    fn galerkin_orthogonality_of_projection(seed in 0u64..1000) {
        let basis = square_basis();
        let mesh = basis.mesh().clone();
        let q = quadrature_points(&mesh);
        let g: Vec<f64> = q.iter().map(|x| ((seed as f64 + 1.0) * x.x).sin() * (3.0 * x.y).cos()).collect();
        let p = l2_project(&g, &mesh).unwrap();
        let space = basis.space();
        let residual_load = {
            let mut pq = vec![0.0; q.len()];
            for (i, x) in q.iter().enumerate() {
                pq[i] = p.eval(*x).unwrap() - g[i];
            }
            space.quadrature_load(&pq).unwrap()
        };
        let scale = space.quadrature_load(&g).unwrap().iter().map(|v| v.abs()).fold(0.0, f64::max);
        for r in residual_load {
            prop_assert!(r.abs() <= 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn parseval_in_the_modal_basis(c in prop::collection::vec(-1.0f64..1.0, 12)) {
        let basis = square_basis();
        let u = basis.synthesize(&c);
        let space = basis.space();
        let l2 = space.mass().quadratic_form(&u);
        let h1 = space.stiffness().quadratic_form(&u);
        let sum_l2: f64 = c.iter().map(|x| x * x).sum();
        let sum_h1: f64 = c.iter().zip(basis.lambdas()).map(|(x, l)| l * x * x).sum();
        prop_assert!((l2 - sum_l2).abs() <= 1e-8 * sum_l2);
        prop_assert!((h1 - sum_h1).abs() <= 1e-8 * sum_h1);
    }

    #[test]
    fn stored_acceleration_satisfies_the_modal_ode(seed in 0u64..1000, eps in 1e-3f64..3.0) {
        let basis = square_basis();
        let n = basis.len();
        let grid = TimeGrid::new(0.01, 50).unwrap();
        let p = PhysicalParams { eps, ..Default::default() };
        let r = |k: usize, i: usize| (((seed + 1) as f64) * 0.37 * (k + 3 * i + 1) as f64).sin();
        let f = DMatrix::from_fn(n, grid.n_points(), r);
        let d0: Vec<f64> = (0..n).map(|k| r(k, 7)).collect();
        let d1: Vec<f64> = (0..n).map(|k| r(k, 11)).collect();
        let u = solve_modal(&p, grid, &basis, &d0, &d1, &f).unwrap();
        for k in 0..n {
            let l = basis.lambda(k);
            for i in 0..grid.n_points() {
                let lhs = u.dpp()[(k, i)] + p.damping() * l * u.dp()[(k, i)] + p.c * p.c * l * u.d()[(k, i)];
                prop_assert!((lhs - f[(k, i)]).abs() <= 1e-9 * (1.0 + f[(k, i)].abs() + l * u.d()[(k, i)].abs()));
            }
        }
    }

    #[test]
    fn unforced_energy_is_nonincreasing(seed in 0u64..1000, eps in 1e-4f64..1.0) {
        let basis = square_basis();
        let n = basis.len();
        let grid = TimeGrid::new(0.005, 200).unwrap();
        let p = PhysicalParams { eps, ..Default::default() };
        let d0: Vec<f64> = (0..n).map(|k| ((seed + k as u64) as f64).cos()).collect();
        let d1: Vec<f64> = (0..n).map(|k| ((seed * 7 + k as u64) as f64).sin()).collect();
        let u = solve_modal(&p, grid, &basis, &d0, &d1, &DMatrix::zeros(n, grid.n_points())).unwrap();
        let e = energy_report(&u, &p);
        for w in e.energy.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-13));
        }
    }

    #[test]
    fn energy_balance_where_the_fastest_mode_is_resolved(seed in 0u64..1000, frac in 0.01f64..1.0) {
        let basis = square_basis();
        let n = basis.len();
        let grid = TimeGrid::new(0.005, 200).unwrap();
        let eps = frac * 0.05 / (basis.lambdas().last().unwrap() * grid.dt);
        let p = PhysicalParams { eps, ..Default::default() };
        let d0: Vec<f64> = (0..n).map(|k| ((seed + k as u64) as f64).cos()).collect();
        let d1: Vec<f64> = (0..n).map(|k| ((seed * 7 + k as u64) as f64).sin()).collect();
        let u = solve_modal(&p, grid, &basis, &d0, &d1, &DMatrix::zeros(n, grid.n_points())).unwrap();
        let e = energy_report(&u, &p);
        prop_assert!(e.max_balance_error <= 1e-6 * e.energy[0], "{:e}", e.max_balance_error / e.energy[0]);
    }

    #[test]
    fn piecewise_linear_forcing_is_integrated_exactly(seed in 0u64..1000) {
        let basis = square_basis();
        let n = basis.len();
        let p = PhysicalParams::default();
        let coarse = TimeGrid::new(0.02, 25).unwrap();
        let fine = TimeGrid::new(0.01, 50).unwrap();
        let nodes: DMatrix<f64> =
            DMatrix::from_fn(n, coarse.n_points(), |k, i| (((seed + 1) * (k as u64 + 2)) as f64 * 0.1 + i as f64).sin());
        let fine_f = DMatrix::from_fn(n, fine.n_points(), |k, i| {
            if i % 2 == 0 { nodes[(k, i / 2)] } else { 0.5 * (nodes[(k, i / 2)] + nodes[(k, i / 2 + 1)]) }
        });
        let zero = vec![0.0; n];
        let a = solve_modal(&p, coarse, &basis, &zero, &zero, &nodes).unwrap();
        let b = solve_modal(&p, fine, &basis, &zero, &zero, &fine_f).unwrap();
        let scale = a.d().amax().max(1e-300);
        for i in 0..coarse.n_points() {
            for k in 0..n {
                prop_assert!((a.d()[(k, i)] - b.d()[(k, 2 * i)]).abs() <= 1e-12 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn budget_algebra(
        b1 in 1e-4f64..1e4, b2 in 1e-4f64..1e4, c0 in 1e-4f64..1e4, c1 in 1e-4f64..1e4,
        nu in 1e-2f64..1e2, eps in 1e-5f64..1.0, alpha in 1e-3f64..1e3, s in 1e-6f64..(1.0 - 1e-6),
    ) {
        let p = PhysicalParams { c: 1.0, nu, eps, alpha };
        let b = SmallnessBudget::new(b1, b2, c0, c1, &p).unwrap();
        prop_assert!((b.theta_of(b.r_star) - 1.0).abs() <= 4.0 * f64::EPSILON);
        prop_assert!(b.w_of(s * b.r_star) > 0.0);
        prop_assert!(b.theta_of(s * b.r_star) < 1.0);
    }

    #[test]
    fn test_functions_vanish_outside_their_support(cx in -0.1f64..0.1, cy in -0.1f64..0.1, half in 0.05f64..0.15) {
        let set = TestFunctionSet::standard(Point::new(cx, cy), half).unwrap();
        let mesh = basis_mesh_for_support();
        let grid = TimeGrid::new(0.1, 10).unwrap();
        let tests = set.materialize(&mesh, &grid).unwrap();
        prop_assert_eq!(tests.len(), 6);
        for t in &tests {
            for (x, v) in mesh.vertices().iter().zip(t.spatial.values()) {
                if !set.support.contains_point(*x) {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }
}

fn basis_mesh_for_support() -> Arc<fractal_westervelt::meshing::Mesh> {
    static M: OnceLock<Arc<fractal_westervelt::meshing::Mesh>> = OnceLock::new();
    M.get_or_init(|| {
        Arc::new(triangulate(&koch_prefractal(&PrefractalSpec::unit(1)).unwrap(), 0.04).unwrap())
    })
    .clone()
}

#[test]
fn double_refinement_quarters_h() {
    let m = triangulate(&koch_prefractal(&PrefractalSpec::unit(1)).unwrap(), 0.1).unwrap();
    let r = refine_uniform(&refine_uniform(&m));
    assert_eq!(r.n_triangles(), 16 * m.n_triangles());
    assert!((r.h() - m.h() / 4.0).abs() < 1e-14);
}

#[test]
fn stiffness_couples_no_two_modes() {
    let basis = square_basis();
    let k = basis.space().stiffness();
    for i in 0..basis.len() {
        let kw = k.matvec(basis.vector(i));
        for j in 0..basis.len() {
            let e: f64 = kw.iter().zip(basis.vector(j)).map(|(a, b)| a * b).sum();
            let expected = if i == j { basis.lambda(i) } else { 0.0 };
            assert!(
                (e - expected).abs() < 1e-8 * basis.lambda(i.max(j)),
                "({i},{j}): {e}"
            );
        }
    }
}

#[test]
fn zero_extension_is_local() {
    let inner = koch_prefractal(&PrefractalSpec::unit(1)).unwrap();
    let outer = koch_prefractal(&PrefractalSpec::unit(2)).unwrap();
    let src = Arc::new(triangulate(&inner, 0.08).unwrap());
    let dst = Arc::new(triangulate(&outer, 0.05).unwrap());
    let u =
        FemFunction::interpolate_dirichlet(src.clone(), |p| (3.0 * p.x).cos() * (2.0 * p.y).cos());
    let e = extend_by_zero(&u, &inner, &outer, &dst).unwrap();
    for (x, v) in dst.vertices().iter().zip(e.values()) {
        let near = inner.boundary_distance(*x) <= inner.epsilon();
        if near {
            assert!(v.abs() < 1e-12, "at {x:?}: {v}");
        } else if !inner.contains_point(*x) {
            assert_eq!(*v, 0.0, "at {x:?}");
        } else {
            let expected = u.eval(*x).unwrap();
            assert!((v - expected).abs() < 1e-12, "at {x:?}: {v} vs {expected}");
        }
    }
}
