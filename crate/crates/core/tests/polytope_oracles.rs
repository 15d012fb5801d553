use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sepinv::polytope::*;

fn random_polytope(rng: &mut ChaCha8Rng, n: usize) -> HPolytope {
    let rows = rng.gen_range(n + 3..n + 12);
    let shift: DVector<f64> = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let mut a = DMatrix::zeros(rows + 2 * n, n);
    let mut b = DVector::zeros(rows + 2 * n);
    for r in 0..rows {
        let g: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let g = g.normalize();
        a.row_mut(r).copy_from(&g.transpose());
        b[r] = rng.gen_range(0.3..2.0);
    }
    // a loose box keeps every instance bounded
    for k in 0..n {
        a[(rows + k, k)] = 1.0;
        a[(rows + n + k, k)] = -1.0;
        b[rows + k] = 3.0;
        b[rows + n + k] = 3.0;
    }
    let b = &b + &a * &shift;
    HPolytope::new(a, b).unwrap()
}

#[test]
fn lp_matches_vertex_maxima() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for inst in 0..200 {
        let n = 2 + inst % 2;
        let p = random_polytope(&mut rng, n);
        let verts = enumerate_vertices(&p).unwrap();
        assert!(verts.len() >= n + 1);
        let c: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let lp = lp_solve(&c, &p.a, &p.b, Sense::Max).unwrap();
        assert_eq!(lp.status, LpStatus::Optimal);
        let best = verts.iter().map(|v| c.dot(v)).fold(f64::NEG_INFINITY, f64::max);
        let val = lp.value.unwrap();
        assert!((val - best).abs() <= 1e-8 * (1.0 + best.abs()), "instance {inst}: {val} vs {best}");
        assert!(p.residual(lp.x_star.as_ref().unwrap()) <= TOL_FEAS);
    }
}

#[test]
fn dual_certificate_closes_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.gen_range(2..5);
        let p = random_polytope(&mut rng, n);
        let c: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let primal = lp_solve(&c, &p.a, &p.b, Sense::Max).unwrap().value.unwrap();
        // dual: min b.y  s.t.  A^T y = c, y >= 0, solved independently
        let m = p.rows();
        let at = p.a.transpose();
        let mut g = DMatrix::zeros(2 * n + m, m);
        g.rows_mut(0, n).copy_from(&at);
        g.rows_mut(n, n).copy_from(&(-&at));
        g.rows_mut(2 * n, m).copy_from(&(-DMatrix::<f64>::identity(m, m)));
        let mut h = DVector::zeros(2 * n + m);
        h.rows_mut(0, n).copy_from(&c);
        h.rows_mut(n, n).copy_from(&(-&c));
        let dual = lp_solve(&p.b, &g, &h, Sense::Min).unwrap();
        assert_eq!(dual.status, LpStatus::Optimal);
        let y = dual.x_star.unwrap();
        assert!(y.min() >= -1e-9);
        assert!((&at * &y - &c).amax() < 1e-7);
        let dv = dual.value.unwrap();
        assert!((dv - primal).abs() <= 1e-7 * (1.0 + primal.abs()), "{dv} vs {primal}");
    }
}

#[test]
fn support_homogeneous_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let n = rng.gen_range(2..4);
        let z = DMatrix::from_fn(n + 2, n, |_, _| rng.sample(StandardNormal));
        let h = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)) + DMatrix::identity(n, n) * 3.0;
        let g = GenSet::new(z, h).unwrap();
        let d: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let s1 = support(&g, &d).unwrap();
        let alpha = rng.gen_range(0.1..10.0);
        let s2 = support(&g, &(&d * alpha)).unwrap();
        assert!((s2 - alpha * s1).abs() <= 1e-9 * s2.abs().max(1.0));
        assert!((support(&g, &(-&d)).unwrap() - s1).abs() <= 1e-9 * s1.abs().max(1.0));
        let (ok, margins) = contains(&g.to_hpolytope(), &g).unwrap();
        assert!(ok);
        assert!(margins.iter().all(|&m| m >= -TOL_FEAS));
    }
    // with evenly spread generators every row is a facet, so margins vanish
    for count in 2..9 {
        let z = sepinv::model::generators(2, count, sepinv::model::GeneratorMode::Even, 0);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 2.0]);
        let g = GenSet::new(z, h).unwrap();
        let (ok, margins) = contains(&g.to_hpolytope(), &g).unwrap();
        assert!(ok);
        assert!(margins.iter().all(|&m| m.abs() <= TOL_FEAS), "{margins}");
    }
}

fn exists_u(p: &HPolytope, x: &DVector<f64>, nx: usize) -> bool {
    // rows a_x x + a_u u <= b  =>  a_u u <= b - a_x x
    let nu = p.dim() - nx;
    let ax = p.a.columns(0, nx);
    let au = p.a.columns(nx, nu).into_owned();
    let rhs = &p.b - ax * x;
    lp_solve(&DVector::zeros(nu), &au, &rhs, Sense::Max).unwrap().status == LpStatus::Optimal
}

#[test]
fn projection_membership_agrees_with_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for inst in 0..20 {
        let nx = 1 + inst % 2;
        let p = random_polytope(&mut rng, nx + 1);
        let shadow = fm_project(&p, &[nx]).unwrap();
        let mut agree = 0;
        for _ in 0..100 {
            let x: DVector<f64> = DVector::from_fn(nx, |_, _| rng.gen_range(-5.0..5.0));
            let res = shadow.residual(&x);
            if res.abs() < 1e-7 {
                agree += 1; // on the boundary either answer is acceptable
                continue;
            }
            if (res < 0.0) == exists_u(&p, &x, nx) {
                agree += 1;
            }
        }
        assert_eq!(agree, 100, "instance {inst}");
        // every projected vertex lies in the shadow
        for v in enumerate_vertices(&p).unwrap() {
            let x = v.rows(0, nx).into_owned();
            assert!(shadow.residual(&x) <= 1e-7);
        }
    }
}
