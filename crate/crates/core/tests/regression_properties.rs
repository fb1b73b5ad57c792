use std::sync::Arc;

use apc::apc_basis::{build_multiindex, eval_basis, MomentSet, MultivariateBasis};
use apc::models::Distribution;
use apc::regression::{
    assemble_block_system, fit_sensitivity_enhanced, fit_wlsq, solve_block_system, BlockSystem,
    EvaluationRecord, PceModel, RegressionError,
};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn basis(n_u: usize, p: usize) -> Arc<MultivariateBasis> {
    let dims = [
        Distribution::bimodal_mixture(),
        Distribution::Normal { mean: 0.5, sd: 2.0 },
        Distribution::Uniform {
            lower: -1.0,
            upper: 3.0,
        },
    ];
    let moments: Vec<MomentSet> = (0..n_u)
        .map(|i| MomentSet::new(dims[i % 3].raw_moments(2 * p).unwrap()).unwrap())
        .collect();
    Arc::new(MultivariateBasis::from_moments(&moments, p).unwrap())
}

/// Random polynomial `Σ c_α ξ^α` over all exponents of total degree ≤ p,
/// evaluated directly in monomials.
struct Poly {
    terms: Vec<(Vec<u32>, f64)>,
}

impl Poly {
    fn random(n_u: usize, p: usize, rng: &mut ChaCha8Rng) -> Self {
        let mi = build_multiindex(n_u, p).unwrap();
        let terms = mi
            .rows()
            .map(|r| (r.to_vec(), rng.random_range(-1.0..1.0)))
            .collect();
        Self { terms }
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(a, c)| c * a.iter().zip(x).map(|(&e, xi)| xi.powi(e as i32)).product::<f64>())
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                self.terms
                    .iter()
                    .filter(|(a, _)| a[i] > 0)
                    .map(|(a, c)| {
                        let mut t = c * a[i] as f64;
                        for (j, (&e, xj)) in a.iter().zip(x).enumerate() {
                            let e = if j == i { e - 1 } else { e };
                            t *= xj.powi(e as i32);
                        }
                        t
                    })
                    .sum()
            })
            .collect()
    }

    fn record(&self, x: Vec<f64>, with_gradient: bool) -> EvaluationRecord {
        let g = with_gradient.then(|| self.gradient(&x));
        EvaluationRecord::new(x.clone(), self.value(&x), g)
    }
}

fn random_points(n: usize, n_u: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..n_u).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

fn positive_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.2..3.0)).collect()
}

fn assert_reproduces(model: &PceModel, poly: &Poly, rng: &mut ChaCha8Rng) {
    let n_u = model.basis().n_inputs();
    for x in random_points(1000, n_u, rng) {
        let got = model.predict(&x).unwrap();
        let want = poly.value(&x);
        assert!(
            (got - want).abs() <= 1e-10 * want.abs().max(1.0),
            "at {x:?}: {got} vs {want}"
        );
    }
}

#[test]
fn constant_function_fits_constant_term_only() {
    let b = basis(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = random_points(b.len() + 3, 3, &mut rng);
    let records: Vec<_> = pts.into_iter().map(|x| EvaluationRecord::new(x, 4.25, None)).collect();
    let w = positive_weights(records.len(), &mut rng);
    let m = fit_wlsq(b.clone(), &records, &w).unwrap();
    assert!((m.lambda()[0] * b.constant_term() - 4.25).abs() <= 1e-12);
    assert!(m.lambda()[1..].iter().all(|l| l.abs() <= 1e-12), "{:?}", m.lambda());
}

#[test]
fn basis_member_gives_unit_coefficient_vector() {
    let b = basis(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = random_points(15, 2, &mut rng);
    let arr = Array2::from_shape_fn((15, 2), |(m, i)| pts[m][i]);
    let psi = eval_basis(&b, arr.view()).unwrap();
    let records: Vec<_> = pts
        .into_iter()
        .enumerate()
        .map(|(m, x)| EvaluationRecord::new(x, psi[[m, 3]], None))
        .collect();
    let m = fit_wlsq(b, &records, &[1.0; 15]).unwrap();
    for (k, l) in m.lambda().iter().enumerate() {
        let e = if k == 3 { 1.0 } else { 0.0 };
        assert!((l - e).abs() <= 1e-10, "λ_{k} = {l}");
    }
}

#[test]
fn affine_map_recovered_from_one_point_and_gradient() {
    let b = basis(3, 1);
    let slope = [1.5, -2.0, 0.25];
    let x = vec![0.3, -0.7, 1.1];
    let value = 0.5 + slope.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
    let rec = EvaluationRecord::new(x, value, Some(slope.to_vec()));
    let sys = assemble_block_system(&b, std::slice::from_ref(&rec), &[1.0]).unwrap();
    assert_eq!(sys.phi.dim(), (4, 4));
    let m = fit_sensitivity_enhanced(b, &[rec], &[1.0]).unwrap();
    assert!(m.diagnostics().residual_norm <= 1e-12);
    for z in [[0.0, 0.0, 0.0], [2.0, 1.0, -3.0]] {
        let want = 0.5 + slope.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        assert!((m.predict(&z).unwrap() - want).abs() <= 1e-12);
    }
}

#[test]
fn linear_model_gives_constant_gradient_rows() {
    let b = basis(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records: Vec<_> = random_points(6, 2, &mut rng)
        .into_iter()
        .map(|x| EvaluationRecord::new(x.clone(), 2.0 * x[0] - x[1], Some(vec![2.0, -1.0])))
        .collect();
    let sys = assemble_block_system(&b, &records, &[1.0; 6]).unwrap();
    for i in 0..2 {
        let block = sys.phi.slice(s![6 * (i + 1)..6 * (i + 2), ..]);
        for row in block.outer_iter() {
            assert_eq!(row, block.row(0));
        }
    }
    assert_eq!(sys.weights.len(), 18);
}

#[test]
fn gradient_rows_match_finite_differences() {
    let b = basis(3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pts = random_points(20, 3, &mut rng);
    let records: Vec<_> = pts
        .iter()
        .map(|x| EvaluationRecord::new(x.clone(), 0.0, Some(vec![0.0; 3])))
        .collect();
    let sys = assemble_block_system(&b, &records, &[1.0; 20]).unwrap();
    let h = 1e-6;
    for (m, x) in pts.iter().enumerate() {
        for i in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let both = Array2::from_shape_fn((2, 3), |(r, c)| if r == 0 { xp[c] } else { xm[c] });
            let psi = eval_basis(&b, both.view()).unwrap();
            for k in 0..b.len() {
                let fd = (psi[[0, k]] - psi[[1, k]]) / (2.0 * h);
                let a = sys.phi[[20 * (i + 1) + m, k]];
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(1.0), "record {m} dim {i} term {k}");
            }
        }
    }
}

#[test]
fn minimum_sample_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (n_u, p) in [(2, 2), (3, 2), (4, 1), (5, 2), (3, 3)] {
        let b = basis(n_u, p);
        let poly = Poly::random(n_u, p, &mut rng);
        let q_grad = b.len().div_ceil(n_u + 1);
        let pts = random_points(b.len(), n_u, &mut rng);
        let with: Vec<_> = pts.iter().map(|x| poly.record(x.clone(), true)).collect();
        let without: Vec<_> = pts.iter().map(|x| poly.record(x.clone(), false)).collect();

        assert!(fit_sensitivity_enhanced(b.clone(), &with[..q_grad], &vec![1.0; q_grad]).is_ok());
        if q_grad > 1 {
            let short = &with[..q_grad - 1];
            assert!(matches!(
                fit_sensitivity_enhanced(b.clone(), short, &vec![1.0; short.len()]),
                Err(RegressionError::Underdetermined { .. })
            ));
        }
        let n = b.len();
        assert!(fit_wlsq(b.clone(), &without, &vec![1.0; n]).is_ok());
        assert!(matches!(
            fit_wlsq(b.clone(), &without[..n - 1], &vec![1.0; n - 1]),
            Err(RegressionError::Underdetermined { .. })
        ));
    }
}

#[test]
fn first_order_sample_count_is_independent_of_dimension() {
    for n_u in 1..=12 {
        let b = basis(n_u, 1);
        assert_eq!(b.len().div_ceil(n_u + 1), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(n_u as u64);
        let poly = Poly::random(n_u, 1, &mut rng);
        let rec = poly.record(random_points(1, n_u, &mut rng).remove(0), true);
        let m = fit_sensitivity_enhanced(b, &[rec], &[1.0]).unwrap();
        assert_reproduces(&m, &poly, &mut rng);
    }
}

#[test]
fn records_are_assembled_in_design_order() {
    let b = basis(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let poly = Poly::random(2, 2, &mut rng);
    let mut records: Vec<_> = random_points(4, 2, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = poly.record(x, true);
            r.doe_index = Some(i);
            r
        })
        .collect();
    let w = positive_weights(4, &mut rng);
    let sorted = assemble_block_system(&b, &records, &w).unwrap();
    records.reverse();
    let rw: Vec<f64> = w.iter().rev().copied().collect();
    assert_eq!(assemble_block_system(&b, &records, &rw).unwrap(), sorted);
}

#[test]
fn export_is_pinned_to_its_basis() {
    let b = basis(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let poly = Poly::random(2, 2, &mut rng);
    let records: Vec<_> = random_points(6, 2, &mut rng).into_iter().map(|x| poly.record(x, false)).collect();
    let m = fit_wlsq(b.clone(), &records, &[1.0; 6]).unwrap();
    let json = serde_json::to_string(&m.export()).unwrap();
    let back = PceModel::from_export(serde_json::from_str(&json).unwrap(), b).unwrap();
    assert_eq!(back.lambda(), m.lambda());
    let other = basis(2, 2);
    let moved = Arc::new(
        MultivariateBasis::from_moments(
            &[
                MomentSet::new(Distribution::Normal { mean: 0.0, sd: 1.0 }.raw_moments(4).unwrap()).unwrap(),
                MomentSet::new(Distribution::Normal { mean: 0.0, sd: 1.0 }.raw_moments(4).unwrap()).unwrap(),
            ],
            2,
        )
        .unwrap(),
    );
    assert!(PceModel::from_export(m.export(), other).is_ok());
    assert!(matches!(
        PceModel::from_export(m.export(), moved),
        Err(RegressionError::BasisMismatch { .. })
    ));
}

#[test]
fn squared_hyperplane_is_invisible_to_minimal_design() {
    // n_u = 3, p = 2: P + 1 = 10, minimal q = 3. The plane through the three
    // points gives ℓ² with zero value and zero gradient at each of them.
    let b = basis(3, 2);
    let pts = [[0.2, -0.4, 1.0], [1.1, 0.3, -0.5], [-0.6, 0.9, 0.4]];
    let (u, v) = (sub(pts[1], pts[0]), sub(pts[2], pts[0]));
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let ell = |x: &[f64]| (0..3).map(|i| n[i] * (x[i] - pts[0][i])).sum::<f64>();
    let records: Vec<_> = pts
        .iter()
        .map(|x| {
            let l = ell(x);
            assert!(l.abs() < 1e-12);
            EvaluationRecord::new(x.to_vec(), l * l, Some(n.iter().map(|ni| 2.0 * l * ni).collect()))
        })
        .collect();
    let m = fit_sensitivity_enhanced(b.clone(), &records, &[1.0; 3]).unwrap();
    assert!(m.diagnostics().rank_deficient);
    assert!(m.diagnostics().rank < b.len());
    let probe = [1.0, 1.0, 1.0];
    assert!(ell(&probe).powi(2) > 0.1);
    assert!(m.predict(&probe).unwrap().abs() < 1e-12);
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Value and gradient data at q ≤ n_u points cannot separate ℓ² from 0,
    // where ℓ is affine and vanishes on all q points; see
    // `squared_hyperplane_is_invisible_to_minimal_design`.
    #[test]
    #[ignore = "minimal designs are rank deficient for p ≥ 2 and n_u ≥ 2"]
    fn polynomials_reproduced_from_minimal_design(seed in 0u64..100_000, n_u in 1usize..5, p in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = basis(n_u, p);
        let poly = Poly::random(n_u, p, &mut rng);
        let q = b.len().div_ceil(n_u + 1);
        let records: Vec<_> = random_points(q, n_u, &mut rng).into_iter().map(|x| poly.record(x, true)).collect();
        let w = positive_weights(q, &mut rng);
        let m = fit_sensitivity_enhanced(b, &records, &w).unwrap();
        assert_reproduces(&m, &poly, &mut rng);
    }

    #[test]
    fn polynomials_reproduced_when_minimal_design_has_full_rank(
        seed in 0u64..100_000,
        n_u in 1usize..5,
        p in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = basis(n_u, p);
        let poly = Poly::random(n_u, p, &mut rng);
        let q = b.len().div_ceil(n_u + 1);
        let records: Vec<_> = random_points(q, n_u, &mut rng).into_iter().map(|x| poly.record(x, true)).collect();
        let w = positive_weights(q, &mut rng);
        let m = fit_sensitivity_enhanced(b.clone(), &records, &w).unwrap();
        if n_u == 1 || p == 1 {
            prop_assert_eq!(m.diagnostics().rank, b.len());
        }
        // Roundoff in the coefficients scales with κ·ε; above κ ≈ 1e5 random
        // square designs drift past 1e-10 while still reproducing to κ·ε.
        let d = m.diagnostics();
        if d.rank == b.len() && d.condition_estimate <= 1e4 {
            assert_reproduces(&m, &poly, &mut rng);
        }
    }

    #[test]
    fn value_rows_of_block_system_match_wlsq(seed in 0u64..100_000, n_u in 1usize..4, p in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = basis(n_u, p);
        let q = b.len() + 2;
        let records: Vec<_> = random_points(q, n_u, &mut rng)
            .into_iter()
            .map(|x| {
                let v = x.iter().map(|t| t.sin()).sum::<f64>();
                EvaluationRecord::new(x, v, Some(vec![0.0; n_u]))
            })
            .collect();
        let w = positive_weights(q, &mut rng);
        let full = assemble_block_system(&b, &records, &w).unwrap();
        let values_only = BlockSystem {
            g: full.g[..q].to_vec(),
            phi: full.phi.slice(s![..q, ..]).to_owned(),
            weights: full.weights[..q].to_vec(),
            q,
            n_u: 0,
        };
        let (block, _) = solve_block_system(&values_only).unwrap();
        let stripped: Vec<_> = records.into_iter().map(|r| EvaluationRecord { gradient: None, ..r }).collect();
        let wlsq = fit_wlsq(b, &stripped, &w).unwrap();
        for (a, c) in block.iter().zip(wlsq.lambda()) {
            prop_assert!((a - c).abs() <= 1e-12 * c.abs().max(1.0), "{} vs {}", a, c);
        }
    }

    #[test]
    fn uniform_weight_scaling_leaves_coefficients(seed in 0u64..100_000, scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = basis(3, 2);
        let records: Vec<_> = random_points(5, 3, &mut rng)
            .into_iter()
            .map(|x| {
                let g: Vec<f64> = x.iter().map(|t| t.cos()).collect();
                EvaluationRecord::new(x.clone(), x.iter().map(|t| t.sin()).sum(), Some(g))
            })
            .collect();
        let w = positive_weights(5, &mut rng);
        let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let a = fit_sensitivity_enhanced(b.clone(), &records, &w).unwrap();
        let c = fit_sensitivity_enhanced(b, &records, &ws).unwrap();
        for (x, y) in a.lambda().iter().zip(c.lambda()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }
}
