use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sepinv::linalg::{block_diag, block_matrix};
use sepinv::lmi::*;
use sepinv::model::{compose, load_model, load_model_file, ComposedSystem};

fn models_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn scalar() -> ComposedSystem {
    compose(&load_model_file(models_dir().join("scalar.json")).unwrap())
}

fn rotational() -> ComposedSystem {
    compose(&load_model_file(models_dir().join("rotational.json")).unwrap())
}

fn small_disturbed() -> ComposedSystem {
    let doc = r#"{"subsystems": [
        {"A": [[0.9, 0.2], [0, 0.8]], "B": [[0], [1]], "E": [[1], [0.5]], "d_box": 0.1,
         "input_box": 1, "state_box": 1, "generators": {"count": 3}},
        {"A": [[0.7]], "B": [[1]], "input_box": 0.5, "state_box": 2, "Z": [[1]]}],
        "couplings": [{"i": 1, "j": 2, "A": [[0.1], [0]]}, {"i": 2, "j": 1, "A": [[0, 0.05]]}],
        "k_pattern": [[1, 2]]}"#;
    compose(&load_model(doc).unwrap())
}

fn random_y(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn scalar_block_layout() {
    let cs = scalar();
    let prob = build_problem(&cs, default_eps(&cs)).unwrap();
    let sizes: Vec<(&str, usize)> = prob.blocks.iter().map(|b| (b.label.as_str(), b.size)).collect();
    assert_eq!(
        sizes,
        vec![
            ("slack_1", 2),
            ("invariance_1", 4),
            ("multiplier_1", 2),
            ("pd_Dx_1", 1),
            ("state_1", 2),
            ("pd_Ds_1", 1),
            ("state_2", 2),
            ("pd_Ds_2", 1),
            ("input_1", 2),
            ("pd_Du_1", 1),
            ("input_2", 2),
            ("pd_Du_2", 1),
            ("pd_lambda", 1),
        ]
    );
    assert_eq!(prob.n_vars(), 14);
    assert!(prob.var_map.facets[0].dd.is_none());
    // multiplier at w = 1, k_hat = 0: off-diagonal is -a/2
    let mut y = DVector::zeros(prob.n_vars());
    y[prob.var_map.w[0].offset] = 1.0;
    let m = prob.blocks[2].eval(&y);
    assert_eq!(m[(0, 1)], -0.25);
}

#[test]
fn rotational_variable_count() {
    let cs = rotational();
    let prob = build_problem(&cs, default_eps(&cs)).unwrap();
    // W 12, K_hat 12, lambda 3, per facet 24+6+3*78+3*144, D_s and D_u 12*24 each
    assert_eq!(prob.n_vars(), 12 + 12 + 3 + 24 * (24 + 6 + 3 * 78 + 3 * 144) + 2 * 12 * 24);
    assert_eq!(prob.n_vars(), 17307);
    let count = |p: &str| prob.blocks.iter().filter(|b| b.label.starts_with(p)).count();
    assert_eq!(count("slack_"), 24);
    assert_eq!(count("invariance_"), 24);
    assert_eq!(count("multiplier_"), 24);
    let size = |l: &str| prob.blocks.iter().find(|b| b.label == l).unwrap().size;
    assert_eq!(size("slack_1"), 24);
    assert_eq!(size("invariance_1"), 37);
    assert_eq!(size("multiplier_1"), 6 + 6 + 12);
    assert_eq!(size("state_1"), 7);
    assert_eq!(size("input_1"), 7);
}

#[test]
fn pencil_evaluation_basics() {
    let cs = small_disturbed();
    let prob = build_problem(&cs, 1e-6).unwrap();
    let nv = prob.n_vars();
    let zero = eval_pencil(&prob, &DVector::zeros(nv)).unwrap();
    for (b, e) in prob.blocks.iter().zip(&zero) {
        assert_eq!(e.matrix, b.f0);
    }
    for i in [0, 3, nv / 2, nv - 1] {
        let mut y = DVector::zeros(nv);
        y[i] = 1.0;
        for (b, e) in prob.blocks.iter().zip(eval_pencil(&prob, &y).unwrap()) {
            let want = match b.vars.iter().position(|&v| v == i) {
                Some(k) => &b.f0 + b.coefficient(k),
                None => b.f0.clone(),
            };
            assert_eq!(e.matrix, want, "{}", b.label);
        }
    }
    assert!(eval_pencil(&prob, &DVector::zeros(nv + 1)).is_err());
}

#[test]
fn pencils_are_affine_and_symmetric() {
    let cs = small_disturbed();
    let prob = build_problem(&cs, 1e-6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y1 = random_y(&mut rng, prob.n_vars());
    let y2 = random_y(&mut rng, prob.n_vars());
    let a = 0.3;
    let e1 = eval_pencil(&prob, &y1).unwrap();
    let e2 = eval_pencil(&prob, &y2).unwrap();
    let em = eval_pencil(&prob, &(&y1 * a + &y2 * (1.0 - a))).unwrap();
    for k in 0..e1.len() {
        let lin = &e1[k].matrix * a + &e2[k].matrix * (1.0 - a);
        assert!((&em[k].matrix - lin).amax() < 1e-13);
        assert_eq!(em[k].matrix, em[k].matrix.transpose());
    }
    for b in &prob.blocks {
        assert_eq!(b.f0, b.f0.transpose());
    }
}

/// Dense reconstruction of the printed blocks from variable values.
#[test]
fn blocks_match_dense_formulas() {
    let cs = small_disturbed();
    let prob = build_problem(&cs, 1e-6).unwrap();
    let vm = &prob.var_map;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = random_y(&mut rng, prob.n_vars());
    let (n, p, q) = (cs.n, cs.p, vm.q);
    assert_eq!(q, 2 * n);
    let w = vm.w_value(&cs, &y);
    let kh = vm.k_hat_value(&cs, &y);
    let lam = vm.lambda.value(&y);
    let lam_mat = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        cs.state_blocks.iter().enumerate().flat_map(|(i, r)| std::iter::repeat(lam[i]).take(r.len())),
    ));
    let wb = block_diag(&[w.clone(), w.clone()]);
    let lb = block_diag(&[lam_mat.clone(), lam_mat.clone()]);
    let hd_inv = cs.h_d.clone().try_inverse().unwrap();
    for j in 0..cs.n_x {
        let f = &vm.facets[j];
        let (gm, xi, psi, pm) = (f.gamma.value(&y), f.xi.value(&y), f.psi.value(&y), f.p.value(&y));
        let (o1, o2) = (f.omega1.value(&y), f.omega2.value(&y));
        let dx = DMatrix::from_diagonal(&f.dx.value(&y));
        let dd = DMatrix::from_diagonal(&f.dd.unwrap().value(&y));
        let zej = cs.z.row(j).transpose();
        let yj = DMatrix::from_iterator(q, 1, zej.iter().chain(zej.iter()).cloned());
        let scalar = lam[cs.row_owner[j]] - dx.trace() - dd.trace();
        let z3 = DMatrix::zeros(q, 1);
        let a13 = block_matrix(&[
            vec![&xi - &pm, &o1 - &wb, &o2 - &wb, psi.transpose() * &yj],
            vec![(&o1 - &wb).transpose(), &lb * 2.0 - &gm, &lb + o1.transpose() - &psi, z3.clone()],
            vec![(&o2 - &wb).transpose(), (&lb + o1.transpose() - &psi).transpose(), &o2 + o2.transpose() - &xi, z3.clone()],
            vec![(psi.transpose() * &yj).transpose(), z3.transpose(), z3.transpose(), DMatrix::from_element(1, 1, scalar)],
        ]);
        let got = prob.blocks.iter().find(|b| b.label == format!("invariance_{}", j + 1)).unwrap().eval(&y);
        assert!((got - a13).amax() < 1e-13);

        let akt = (w.transpose() * cs.a.transpose() + kh.transpose() * cs.b.transpose()) * -0.5;
        let off = block_matrix(&[
            vec![akt, DMatrix::zeros(n, n)],
            vec![DMatrix::zeros(p, n), hd_inv.transpose() * cs.e.transpose() * -0.5],
        ]);
        let tl = block_diag(&[cs.z.transpose() * &dx * &cs.z, dd.clone()]);
        let a14 = block_matrix(&[vec![tl, off.clone()], vec![off.transpose(), pm.clone()]]);
        let got = prob.blocks.iter().find(|b| b.label == format!("multiplier_{}", j + 1)).unwrap().eval(&y);
        assert!((got - a14).amax() < 1e-13);
    }
    for l in 0..cs.n_u {
        let du = DMatrix::from_diagonal(&vm.du[l].value(&y));
        let col = kh.transpose() * cs.h_u.row(l).transpose() * -0.5;
        let col = DMatrix::from_iterator(n, 1, col.iter().cloned());
        let a16 = block_matrix(&[
            vec![cs.z.transpose() * &du * &cs.z, col.clone()],
            vec![col.transpose(), DMatrix::from_element(1, 1, cs.h_u_rhs[l] - du.trace())],
        ]);
        let got = prob.blocks.iter().find(|b| b.label == format!("input_{}", l + 1)).unwrap().eval(&y);
        assert!((got - a16).amax() < 1e-13);
    }
    // K_hat off-pattern entries are not variables: (1,2) block declared, (2,1) not
    assert_eq!(vm.k_hat.len(), 3);
    assert_eq!(kh[(1, 0)], 0.0);
}

#[test]
fn undisturbed_model_lifts_to_n() {
    let cs = scalar();
    let prob = build_problem(&cs, 1e-6).unwrap();
    assert_eq!(prob.var_map.q, 1);
    assert!(prob.blocks.iter().all(|b| !b.label.starts_with("pd_Dd")));
}

#[test]
fn triplet_roundtrip() {
    let cs = small_disturbed();
    let prob = build_problem(&cs, 1e-6).unwrap();
    let text = prob.to_triplets();
    let back = prob.blocks_from_triplets(&text).unwrap();
    assert_eq!(back.len(), prob.blocks.len());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = random_y(&mut rng, prob.n_vars());
    for (a, b) in prob.blocks.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.group, b.group);
        assert_eq!(a.eval(&y), b.eval(&y));
    }
    assert!(prob.blocks_from_triplets("nonsense line").is_err());
}

#[test]
fn symmetric_var_indexing_is_contiguous() {
    let v = MatVar { offset: 10, rows: 4, cols: 4, sym: true };
    let mut seen: Vec<usize> = (0..4).flat_map(|r| (r..4).map(move |c| v.index(r, c))).collect();
    seen.sort();
    assert_eq!(seen, (10..20).collect::<Vec<_>>());
    assert_eq!(v.index(3, 1), v.index(1, 3));
}

#[test]
fn blocks_have_single_local_group() {
    let cs = rotational();
    let prob = build_problem(&cs, 1e-6).unwrap();
    for b in &prob.blocks {
        if b.label.starts_with("eq1") {
            assert!(b.group.is_some(), "{}", b.label);
        }
    }
    assert_eq!(prob.blocks.last().unwrap().group, None);
}
