mod common;

use std::sync::OnceLock;

use common::{trained, RELATION_LAYER, SUBJECT_LAYER};
use kedit_core::dke::*;
use kedit_core::krd::{train_krd, KrdConfig, KrdState};
use kedit_core::lm::{softmax, SubstitutionHook, TransformerLm};
use kedit_core::numerics::gradcheck::{grad_check, grad_check_at};
use kedit_core::numerics::graph::Graph;
use kedit_core::numerics::linalg::solve_spd;
use kedit_core::numerics::Tensor;
use kedit_core::world::{plan_subjects, EditRequest, World};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn vecr(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row_slice(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn rel_fro(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Random instance of the four-term problem with `V0 = W K0`, `v0 = W k*`.
struct Instance {
    w: Tensor,
    k: Vec<f64>,
    v_star: Vec<f64>,
    v0: Vec<f64>,
    k0: Tensor,
    v0s: Tensor,
    w3: Tensor,
}

impl Instance {
    fn new(seed: u64, d: usize, d_ff: usize, extra: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = mat(&mut rng, d, d_ff);
        let k = vecr(&mut rng, d_ff);
        let v_star = vecr(&mut rng, d).iter().map(|x| 3.0 * x).collect();
        let k0 = mat(&mut rng, d_ff, d_ff + extra);
        let v0s = w.matmul(&k0).unwrap();
        let w3 = mat(&mut rng, d, d).scale(0.7);
        let v0 = matvec(&w, &k);
        Self {
            w,
            k,
            v_star,
            v0,
            k0,
            v0s,
            w3,
        }
    }

    fn c0(&self) -> Tensor {
        self.k0.matmul_nt(&self.k0).unwrap()
    }

    fn objective(&self, w_hat: &Tensor) -> f64 {
        evaluate_objective(w_hat, &self.k, &self.v_star, &self.v0, &self.k0, &self.v0s, &self.w3).unwrap()
    }

    fn gradient(&self, w_hat: &Tensor) -> Tensor {
        objective_gradient(w_hat, &self.k, &self.v_star, &self.v0, &self.k0, &self.v0s, &self.w3).unwrap()
    }

    /// Conjugate gradient on the quadratic objective, driven only by its
    /// term-by-term gradient.
    fn iterative_minimizer(&self, iters: usize) -> Tensor {
        let mut x = self.w.clone();
        let mut g = self.gradient(&x);
        let mut p = g.scale(-1.0);
        let zero = self.gradient(&Tensor::zeros(self.w.shape()));
        let tol = 1e-10 * g.frobenius_norm();
        for _ in 0..iters {
            let hp = self.gradient(&p).sub(&zero).unwrap();
            let php = p.dot(&hp).unwrap();
            if php <= 0.0 {
                break;
            }
            let gg = g.dot(&g).unwrap();
            let alpha = gg / php;
            x.add_scaled_(&p, alpha).unwrap();
            let g_new = self.gradient(&x);
            let beta = g_new.dot(&g_new).unwrap() / gg;
            if g_new.frobenius_norm() <= tol {
                break;
            }
            p = p.scale(beta).sub(&g_new).unwrap();
            g = g_new;
        }
        x
    }
}

#[test]
fn scalar_memit_case_matches_gradient_descent() {
    let w = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    let c0 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    let w_hat = memit_update(&w, &[1.0], &[2.0], &c0).unwrap();
    assert_eq!(w_hat.data(), &[1.0]);
    // minimize (x − 2)² + x²
    let mut x = 0.0;
    for _ in 0..200 {
        x -= 0.1 * (2.0 * (x - 2.0) + 2.0 * x);
    }
    assert!((w_hat.data()[0] - x).abs() < 1e-9);
}

#[test]
fn memit_is_a_no_op_when_the_value_is_already_stored() {
    let inst = Instance::new(1, 4, 8, 2);
    let v = matvec(&inst.w, &inst.k);
    assert_eq!(memit_update(&inst.w, &inst.k, &v, &inst.c0()).unwrap(), inst.w);
}

#[test]
fn memit_matches_an_iterative_minimizer_of_the_two_term_objective() {
    for seed in 0..10 {
        let inst = Instance::new(100 + seed, 5, 10, 3);
        let zero_w3 = Instance {
            w3: Tensor::zeros(&[5, 5]),
            ..Instance::new(100 + seed, 5, 10, 3)
        };
        let closed = memit_update(&inst.w, &inst.k, &inst.v_star, &inst.c0()).unwrap();
        // with W3 = 0 the four-term objective is the two-term one
        let oracle = zero_w3.iterative_minimizer(500);
        assert!(rel_fro(&closed, &oracle) < 1e-3, "seed {seed}");
    }
}

#[test]
fn dike_reduces_to_memit_and_halves_it() {
    let inst = Instance::new(2, 6, 12, 4);
    let c0 = inst.c0();
    let memit = memit_update(&inst.w, &inst.k, &inst.v_star, &c0).unwrap();
    let zero = dike_update(&inst.w, &inst.k, &inst.v_star, &c0, &Tensor::zeros(&[6, 6])).unwrap();
    assert_eq!(zero.data(), memit.data());
    let half = dike_update(&inst.w, &inst.k, &inst.v_star, &c0, &Tensor::eye(6)).unwrap();
    let expect = inst.w.add(&memit.sub(&inst.w).unwrap().scale(0.5)).unwrap();
    assert!(half.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn dike_matches_an_iterative_minimizer_of_the_four_term_objective() {
    for seed in 0..10 {
        let d_ff = 8 + 2 * seed as usize;
        let inst = Instance::new(200 + seed, 4 + seed as usize, d_ff, 2 * d_ff);
        let closed = dike_update(&inst.w, &inst.k, &inst.v_star, &inst.c0(), &inst.w3).unwrap();
        let oracle = inst.iterative_minimizer(2000);
        assert!(
            rel_fro(&closed, &oracle) < 1e-3,
            "seed {seed}: {}",
            rel_fro(&closed, &oracle)
        );
    }
}

#[test]
fn dike_output_is_stationary_and_beats_random_rank_one_moves() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..5 {
        let inst = Instance::new(300 + seed, 6, 12, 3);
        let closed = dike_update(&inst.w, &inst.k, &inst.v_star, &inst.c0(), &inst.w3).unwrap();
        let scale = inst.objective(&inst.w);
        let best = inst.objective(&closed);
        assert!(best <= scale);
        // central differences of a quadratic are exact up to rounding
        let h = 1e-3;
        let mut fd = Tensor::zeros(closed.shape());
        for i in 0..closed.numel() {
            let mut p = closed.clone();
            p.data_mut()[i] += h;
            let mut m = closed.clone();
            m.data_mut()[i] -= h;
            fd.data_mut()[i] = (inst.objective(&p) - inst.objective(&m)) / (2.0 * h);
        }
        assert!(
            fd.frobenius_norm() <= 1e-6 * scale,
            "{} vs {scale}",
            fd.frobenius_norm()
        );
        for _ in 0..100 {
            let u = vecr(&mut rng, 6);
            let v = vecr(&mut rng, 12);
            let step = rng.random_range(-0.1..0.1);
            let moved = closed.add(&Tensor::outer(&u, &v).scale(step)).unwrap();
            assert!(inst.objective(&moved) >= best);
        }
    }
}

#[test]
fn gradient_agrees_with_the_closed_derivation_and_finite_differences() {
    let inst = Instance::new(4, 5, 9, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w_hat = inst.w.add(&mat(&mut rng, 5, 9).scale(0.3)).unwrap();
    let grad = inst.gradient(&w_hat);
    // 2((W3ᵀW3 + I) ΔW (K0K0ᵀ + kkᵀ) − (v* − Wk*) k*ᵀ)
    let delta = w_hat.sub(&inst.w).unwrap();
    let gram = unrelated_gram(&inst.w3).unwrap();
    let keys = inst.c0().add(&Tensor::outer(&inst.k, &inst.k)).unwrap();
    let r: Vec<f64> = inst.v_star.iter().zip(&inst.v0).map(|(a, b)| a - b).collect();
    let closed = gram
        .matmul(&delta)
        .unwrap()
        .matmul(&keys)
        .unwrap()
        .sub(&Tensor::outer(&r, &inst.k))
        .unwrap()
        .scale(2.0);
    assert!(rel_fro(&grad, &closed) < 1e-10);

    let f = |g: &mut Graph<'_>, w| {
        Ok(objective_var(g, w, &inst.k, &inst.v_star, &inst.v0, &inst.k0, &inst.v0s, &inst.w3).unwrap())
    };
    assert!(grad_check(f, &w_hat, 1e-5).unwrap() < 1e-4);
    let mut g = Graph::new();
    let wv = g.param(w_hat.clone());
    let out = objective_var(
        &mut g,
        wv,
        &inst.k,
        &inst.v_star,
        &inst.v0,
        &inst.k0,
        &inst.v0s,
        &inst.w3,
    )
    .unwrap();
    let value = g.value(out).item();
    assert!((value - inst.objective(&w_hat)).abs() < 1e-10 * value);
    let back = g.backward(out).unwrap();
    assert!(rel_fro(back.get(wv).unwrap(), &grad) < 1e-10);
}

#[test]
fn objective_vanishes_at_the_unedited_weights() {
    let inst = Instance::new(5, 4, 8, 1);
    let stored = Instance {
        v_star: inst.v0.clone(),
        ..Instance::new(5, 4, 8, 1)
    };
    assert_eq!(stored.objective(&stored.w), 0.0);
    assert!(inst.objective(&inst.w) > 0.0);
}

#[test]
fn memit_residual_on_preserved_keys_matches_its_derivation() {
    let inst = Instance::new(6, 5, 10, 5);
    let closed = memit_update(&inst.w, &inst.k, &inst.v_star, &inst.c0()).unwrap();
    let delta = closed.sub(&inst.w).unwrap();
    let residual = closed.matmul(&inst.k0).unwrap().sub(&inst.v0s).unwrap();
    assert!(residual.frobenius_norm() <= delta.frobenius_norm() * inst.k0.frobenius_norm());
    // ŴK0 − V0 = r (bᵀK0) with b = (C0 + kkᵀ)⁻¹k
    let a = inst.c0().add(&Tensor::outer(&inst.k, &inst.k)).unwrap();
    let b = solve_spd(&a, &Tensor::column(inst.k.clone())).unwrap();
    let r: Vec<f64> = inst.v_star.iter().zip(&inst.v0).map(|(x, y)| x - y).collect();
    let bk0 = b.transpose().unwrap().matmul(&inst.k0).unwrap();
    let analytic = Tensor::outer(&r, bk0.data());
    assert!(residual.max_abs_diff(&analytic) < 1e-8);
}

#[test]
fn sherman_morrison_direction_matches_a_direct_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let keys: Vec<Vec<f64>> = (0..40).map(|_| vecr(&mut rng, 12)).collect();
    let pres = PreservationSet::from_keys(&keys, 12, 1.5, 1e-3).unwrap();
    let k = vecr(&mut rng, 12);
    let fast = pres.key_direction(&k).unwrap();
    let a = pres.c0.add(&Tensor::outer(&k, &k)).unwrap();
    let direct = solve_spd(&a, &Tensor::column(k.clone())).unwrap();
    for (x, y) in fast.iter().zip(direct.data()) {
        assert!((x - y).abs() < 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn covariance_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let keys: Vec<Vec<f64>> = (0..30).map(|_| vecr(&mut rng, 8)).collect();
    let id = PreservationSet::from_keys(&keys, 8, 0.0, 1.0).unwrap();
    assert_eq!(id.c0, Tensor::eye(8));

    let a = PreservationSet::from_keys(&keys, 8, 1.0, 0.0).unwrap();
    let b = PreservationSet::from_keys(&keys, 8, 2.0, 0.0).unwrap();
    assert_eq!(b.c0, a.c0.scale(2.0));

    let ridged = PreservationSet::from_keys(&keys[..3], 8, 3.0, 0.25).unwrap();
    let m = to_na(&ridged.c0);
    assert_eq!(m, m.transpose());
    let min = SymmetricEigen::new(m).eigenvalues.min();
    assert!(min >= 0.25 - 1e-10);

    assert!(PreservationSet::from_keys(&[], 8, 1.0, 1.0).is_err());
    assert!(PreservationSet::from_keys(&keys[..3], 8, 1.0, 0.0).is_err());
}

fn krd() -> &'static KrdState {
    static CELL: OnceLock<KrdState> = OnceLock::new();
    CELL.get_or_init(|| {
        let (w, m) = trained();
        let cfg = KrdConfig {
            samples_per_epoch: 512,
            epochs: 3,
            ..Default::default()
        };
        let mut st = KrdState::new(m.arch.d_model, SUBJECT_LAYER, RELATION_LAYER, &cfg).unwrap();
        train_krd(&mut st, m, w, &cfg).unwrap();
        st
    })
}

fn preservation() -> &'static PreservationSet {
    static CELL: OnceLock<PreservationSet> = OnceLock::new();
    CELL.get_or_init(|| {
        let (w, m) = trained();
        let cfg = EditConfig::default();
        estimate_covariance(m, &corpus_prompts(w), SUBJECT_LAYER, cfg.lambda, cfg.ridge).unwrap()
    })
}

fn edits(world: &World, seed: u64) -> Vec<EditRequest> {
    plan_subjects(world, seed)
        .iter()
        .map(|p| p.edit(world, p.edit_relation))
        .collect()
}

#[test]
fn model_covariance_is_symmetric_with_ridge_floor() {
    let (w, m) = trained();
    let pres = preservation();
    assert_eq!(pres.width(), m.arch.d_ff);
    assert_eq!(pres.n_keys, corpus_prompts(w).len());
    let c = to_na(&pres.c0);
    assert_eq!(c, c.transpose());
    assert!(SymmetricEigen::new(c).eigenvalues.min() >= pres.ridge - 1e-10);
    assert!(estimate_covariance(m, &[], SUBJECT_LAYER, 1.0, 1.0).is_err());
}

#[test]
fn key_examples() {
    let (w, m) = trained();
    let p = w.canonical_prompt(0, 0);
    let (_, trace) = m.forward(&p.tokens, None).unwrap();
    let single = compute_key(m, std::slice::from_ref(&p), SUBJECT_LAYER).unwrap();
    assert_eq!(single, trace.k(SUBJECT_LAYER, p.subject_pos()));
    assert_eq!(single.len(), m.arch.d_ff);
    let same = compute_key(m, &[p.clone(), p.clone(), p.clone(), p.clone()], SUBJECT_LAYER).unwrap();
    for (a, b) in same.iter().zip(&single) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(compute_key(m, &[], SUBJECT_LAYER).is_err());

    let five = key_prompts(w, 0, 0, 5, 1);
    assert_eq!(five[0], p);
    assert_eq!(
        five[1..],
        (0..4).map(|i| w.prompt(0, 0, 0, Some(i))).collect::<Vec<_>>()[..]
    );
    let seven = key_prompts(w, 0, 0, 7, 1);
    assert_eq!(seven.len(), 7);
    assert_eq!(seven, key_prompts(w, 0, 0, 7, 1));
    assert_eq!(key_prompts(w, 0, 0, 1, 1), vec![p]);
}

#[test]
fn value_examples() {
    let (w, m) = trained();
    let p = w.canonical_prompt(1, 2);
    let (_, trace) = m.forward(&p.tokens, None).unwrap();
    let pos = p.subject_pos();
    let h_s = trace.h(SUBJECT_LAYER, pos);
    let v_s = trace.v(SUBJECT_LAYER, pos);
    let (v_star, h_p) = compute_value(h_s, v_s, h_s).unwrap();
    assert_eq!(v_star.len(), m.arch.d_model);
    for i in 0..v_star.len() {
        assert!((v_star[i] - v_s[i]).abs() < 1e-12);
        assert_eq!(h_p[i], h_s[i] - v_s[i]);
    }
    let k = compute_key(m, std::slice::from_ref(&p), SUBJECT_LAYER).unwrap();
    let v0 = matvec(m.w_out(SUBJECT_LAYER).unwrap(), &k);
    let h_star: Vec<f64> = h_s.iter().enumerate().map(|(i, x)| x + 0.1 * i as f64).collect();
    let (v_star, _) = compute_value(h_s, v_s, &h_star).unwrap();
    for i in 0..v_star.len() {
        assert!(((v_star[i] - v0[i]) - (h_star[i] - h_s[i])).abs() < 1e-12);
    }
}

#[test]
fn delta_search_stops_at_once_when_the_target_is_already_predicted() {
    let (w, m) = trained();
    let cfg = EditConfig::default();
    let t = w.triple(0, 1);
    let keep = EditRequest {
        subject: 0,
        relation: 1,
        object: t.object,
        new_object: t.object,
    };
    let site = ShiftSite::new(m, &w.canonical_prompt(0, 1), SUBJECT_LAYER, RELATION_LAYER, t.object).unwrap();
    let out = optimize_shift(
        m,
        SUBJECT_LAYER,
        ShiftSpace::Residual,
        std::slice::from_ref(&site),
        &cfg,
    )
    .unwrap();
    assert!(out.loss < cfg.early_stop);
    assert_eq!(out.steps, 0);
    assert!(out.delta.iter().all(|&x| x == 0.0));
    assert_eq!(out.h_star, site.h_s);
    let (_, related) = optimize_delta(m, krd(), w, &keep, &cfg).unwrap();
    if related.initial_loss < cfg.early_stop {
        assert_eq!(related.steps, 0);
        assert!(related.delta.iter().all(|&x| x == 0.0));
    }
}

fn substituted_probs(m: &TransformerLm, w: &World, e: &EditRequest, h: &[f64]) -> Vec<f64> {
    let p = w.canonical_prompt(e.subject, e.relation);
    let hook = SubstitutionHook {
        layer: SUBJECT_LAYER,
        position: p.subject_pos(),
        value: h.to_vec(),
    };
    let (logits, _) = m.forward(&p.tokens, Some(&hook)).unwrap();
    softmax(logits.row_slice(p.last_pos()))
}

#[test]
fn delta_search_makes_the_new_object_win() {
    let (w, m) = trained();
    let cfg = EditConfig::default();
    for e in edits(w, 0).iter().take(4) {
        let (_, out) = optimize_delta(m, krd(), w, e, &cfg).unwrap();
        assert!(out.loss <= out.initial_loss);
        let probs = substituted_probs(m, w, e, &out.h_star);
        assert!(probs[e.new_object] > probs[e.object], "{e:?}");
    }
}

#[test]
fn delta_objective_passes_grad_check() {
    let (w, m) = trained();
    let st = krd();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for e in edits(w, 1).iter().take(3) {
        let p = w.canonical_prompt(e.subject, e.relation);
        let site = ShiftSite::new(m, &p, SUBJECT_LAYER, RELATION_LAYER, e.new_object).unwrap();
        let delta = Tensor::row(vecr(&mut rng, m.arch.d_model).iter().map(|x| 0.3 * x).collect());
        for space in [ShiftSpace::Related(st), ShiftSpace::Residual] {
            let f = |g: &mut Graph<'_>, vs: &[kedit_core::numerics::graph::Var]| {
                let bound = m.bind_owned(g);
                Ok(shift_loss_var(g, m, &bound, SUBJECT_LAYER, space, std::slice::from_ref(&site), vs[0]).unwrap())
            };
            let coords: Vec<(usize, usize)> = (0..m.arch.d_model).map(|i| (0, i)).collect();
            let err = grad_check_at(f, std::slice::from_ref(&delta), 1e-5, &coords).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}

#[test]
fn constrained_variant_needs_constraints_and_sums_every_term() {
    let (w, m) = trained();
    let cfg = EditConfig {
        max_steps: 0,
        ..Default::default()
    };
    let e = edits(w, 0)[0];
    assert!(constrained_value_variant(m, w, &e, &[], SUBJECT_LAYER, &cfg).is_err());
    let others: Vec<usize> = (0..w.n_relations()).filter(|&r| r != e.relation).take(3).collect();
    let constraints: Vec<_> = others.iter().map(|&r| w.triple(e.subject, r)).collect();
    let (_, out) = constrained_value_variant(m, w, &e, &constraints, SUBJECT_LAYER, &cfg).unwrap();
    let ce = |r: usize, target: usize| {
        let p = w.canonical_prompt(e.subject, r);
        -m.next_token_probs(&p.tokens).unwrap()[target].ln()
    };
    let expect = ce(e.relation, e.new_object) + constraints.iter().map(|t| ce(t.relation, t.object)).sum::<f64>();
    assert!((out.initial_loss - expect).abs() < 1e-10 * expect);
    let wrong = [w.triple((e.subject + 1) % w.subjects.len(), others[0])];
    assert!(constrained_value_variant(m, w, &e, &wrong, SUBJECT_LAYER, &cfg).is_err());
}

#[test]
fn constraints_keep_their_facts_at_least_as_well_as_the_baseline() {
    let (w, m) = trained();
    let cfg = EditConfig::default();
    let pres = preservation();
    let plain = Editor::new(EditorKind::Memit, &cfg, krd(), pres, false).unwrap();
    let constrained = Editor::new(EditorKind::MemitConstrained, &cfg, krd(), pres, false).unwrap();
    let (mut kept_plain, mut kept_constrained) = (0, 0);
    for e in edits(w, 2) {
        let constraints: Vec<_> = (0..w.n_relations())
            .filter(|&r| r != e.relation)
            .take(3)
            .map(|r| w.triple(e.subject, r))
            .collect();
        let recall = |model: &TransformerLm| {
            constraints
                .iter()
                .filter(|t| {
                    model
                        .predict(&w.canonical_prompt(t.subject, t.relation).tokens)
                        .unwrap()
                        == t.object
                })
                .count()
        };
        kept_plain += recall(&plain.apply_batch(m, w, &[e], &constraints).unwrap().0);
        kept_constrained += recall(&constrained.apply_batch(m, w, &[e], &constraints).unwrap().0);
    }
    assert!(kept_constrained >= kept_plain, "{kept_constrained} < {kept_plain}");
}

#[test]
fn applying_an_edit_touches_one_matrix_with_a_rank_one_change() {
    let (w, m) = trained();
    let cfg = EditConfig::default();
    let ed = Editor::new(EditorKind::Dike, &cfg, krd(), preservation(), false).unwrap();
    let e = edits(w, 0)[1];
    let (edited, updates, reports) = ed.apply_batch(m, w, &[e], &[]).unwrap();
    assert_eq!(reports.len(), 1);
    let changed: Vec<String> = m
        .named_params()
        .into_iter()
        .zip(edited.named_params())
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0)
        .collect();
    assert_eq!(changed, vec![format!("blocks.{}.w_out", SUBJECT_LAYER - 1)]);
    let diff = edited
        .w_out(SUBJECT_LAYER)
        .unwrap()
        .sub(m.w_out(SUBJECT_LAYER).unwrap())
        .unwrap();
    let sv = to_na(&diff).singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert!(s[1] <= 1e-10 * s[0]);
    assert!((reports[0].update_norm - updates[0].frobenius_norm()).abs() < 1e-12);
    assert!((updates[0].frobenius_norm() - diff.frobenius_norm()).abs() < 1e-9 * diff.frobenius_norm());

    let same = apply_edit(m, SUBJECT_LAYER, m.w_out(SUBJECT_LAYER).unwrap().clone()).unwrap();
    let p = w.canonical_prompt(3, 4);
    assert_eq!(
        same.forward(&p.tokens, None).unwrap().0,
        m.forward(&p.tokens, None).unwrap().0
    );
    assert!(apply_edit(m, SUBJECT_LAYER, Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn editor_update_matches_the_direct_closed_forms() {
    let (w, m) = trained();
    let cfg = EditConfig::default();
    let pres = preservation();
    let e = edits(w, 3)[0];
    let dike = Editor::new(EditorKind::Dike, &cfg, krd(), pres, false).unwrap();
    let zeroed = Editor::new(EditorKind::Dike, &cfg, krd(), pres, true).unwrap();
    let memit = Editor::new(EditorKind::Memit, &cfg, krd(), pres, false).unwrap();
    let comp = dike.compute(m, w, &e, &[]).unwrap();
    let w0 = m.w_out(SUBJECT_LAYER).unwrap();
    assert_eq!(zeroed.update(m, &comp).unwrap(), memit.update(m, &comp).unwrap());

    let direct = dike_update(w0, &comp.k_star, &comp.v_star, &pres.c0, krd().weight(3)).unwrap();
    let fast = dike.update(m, &comp).unwrap().apply_to(w0).unwrap();
    assert!(rel_fro(&fast.sub(w0).unwrap(), &direct.sub(w0).unwrap()) < 1e-10);
    let direct = memit_update(w0, &comp.k_star, &comp.v_star, &pres.c0).unwrap();
    let fast = memit.update(m, &comp).unwrap().apply_to(w0).unwrap();
    assert!(rel_fro(&fast.sub(w0).unwrap(), &direct.sub(w0).unwrap()) < 1e-10);

    assert_eq!(comp.v0, matvec(w0, &comp.k_star));
    let (v_star, _) = compute_value(
        &comp.h_s,
        &{
            let (_, t) = m
                .forward(&w.canonical_prompt(e.subject, e.relation).tokens, None)
                .unwrap();
            t.v(SUBJECT_LAYER, w.canonical_prompt(e.subject, e.relation).subject_pos())
                .to_vec()
        },
        &comp.h_star,
    )
    .unwrap();
    assert_eq!(v_star, comp.v_star);
}

#[test]
fn batches_apply_in_order_and_size_one_matches_a_single_edit() {
    let (w, m) = trained();
    let pres = preservation();
    let plan = &plan_subjects(w, 4)[0];
    let batch: Vec<EditRequest> = plan.others[..3].iter().map(|&r| plan.edit(w, r)).collect();
    let fwd_cfg = EditConfig::default();
    let rev_cfg = EditConfig {
        order: EditOrder::Reverse,
        ..Default::default()
    };
    let fwd = Editor::new(EditorKind::Memit, &fwd_cfg, krd(), pres, false).unwrap();
    let rev = Editor::new(EditorKind::Memit, &rev_cfg, krd(), pres, false).unwrap();
    let (_, _, rf) = fwd.apply_batch(m, w, &batch, &[]).unwrap();
    let (_, _, rr) = rev.apply_batch(m, w, &batch, &[]).unwrap();
    assert_eq!(rf.iter().map(|r| r.edit).collect::<Vec<_>>(), batch);
    assert_eq!(rr.iter().map(|r| r.edit).rev().collect::<Vec<_>>(), batch);
    assert_eq!(rf.iter().map(|r| r.position).collect::<Vec<_>>(), vec![0, 1, 2]);

    let (single, ups, _) = fwd.apply_batch(m, w, &batch[..1], &[]).unwrap();
    let comp = fwd.compute(m, w, &batch[0], &[]).unwrap();
    assert_eq!(ups[0], fwd.update(m, &comp).unwrap());
    assert_eq!(single, apply_updates(m, &ups).unwrap());
}

#[test]
fn editor_names_parse_and_unknown_names_list_the_valid_ones() {
    for k in EditorKind::ALL {
        assert_eq!(k.name().parse::<EditorKind>().unwrap(), k);
    }
    let err = "rome".parse::<EditorKind>().unwrap_err().to_string();
    assert!(err.contains("dike") && err.contains("memit-constrained"), "{err}");
}

#[test]
fn krd_from_a_different_layer_is_rejected() {
    let (w, m) = trained();
    let other = KrdState::new(m.arch.d_model, SUBJECT_LAYER + 1, RELATION_LAYER, &KrdConfig::default()).unwrap();
    let e = edits(w, 0)[0];
    let site = ShiftSite::new(
        m,
        &w.canonical_prompt(e.subject, e.relation),
        SUBJECT_LAYER,
        RELATION_LAYER,
        0,
    )
    .unwrap();
    assert!(optimize_shift(
        m,
        SUBJECT_LAYER,
        ShiftSpace::Related(&other),
        &[site],
        &EditConfig::default()
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn column_sum_equals_frobenius_form(seed in 0u64..10_000, d in 2usize..8, d_ff in 2usize..12, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w3 = mat(&mut rng, d, d);
        let w_hat = mat(&mut rng, d, d_ff);
        let k0 = mat(&mut rng, d_ff, n);
        let v0 = mat(&mut rng, d, n);
        let resid = w_hat.matmul(&k0).unwrap().sub(&v0).unwrap();
        let frob = w3.matmul(&resid).unwrap().frobenius_norm().powi(2);
        let mut cols = 0.0;
        for i in 0..n {
            let ki: Vec<f64> = (0..d_ff).map(|r| k0.at(r, i)).collect();
            let vi: Vec<f64> = (0..d).map(|r| v0.at(r, i)).collect();
            let ri: Vec<f64> = matvec(&w_hat, &ki).iter().zip(&vi).map(|(a, b)| a - b).collect();
            cols += matvec(&w3, &ri).iter().map(|x| x * x).sum::<f64>();
        }
        prop_assert!((cols - frob).abs() <= 1e-10 * frob.max(1e-300));
    }

    #[test]
    fn dike_zero_w3_equals_memit_bitwise(seed in 0u64..10_000, d in 2usize..10, d_ff in 2usize..16) {
        let inst = Instance::new(seed, d, d_ff, 1);
        let c0 = inst.c0().add(&Tensor::eye(d_ff).scale(1e-3)).unwrap();
        let a = memit_update(&inst.w, &inst.k, &inst.v_star, &c0).unwrap();
        let b = dike_update(&inst.w, &inst.k, &inst.v_star, &c0, &Tensor::zeros(&[d, d])).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn updates_are_rank_one(seed in 0u64..10_000, d in 2usize..8, d_ff in 3usize..12) {
        let inst = Instance::new(seed, d, d_ff, 2);
        let w_hat = dike_update(&inst.w, &inst.k, &inst.v_star, &inst.c0(), &inst.w3).unwrap();
        let diff = to_na(&w_hat.sub(&inst.w).unwrap());
        let mut s: Vec<f64> = diff.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert!(s[1] <= 1e-10 * s[0]);
    }
}
