//! Acceptance suite. Each test implements one release criterion end to end
//! and prints one PASS line (run with `--nocapture` to see them). Gated
//! thresholds are pinned here; anything marked "reported" prints its
//! numbers without gating.

use hafrm_core::data::{split, synth_generate, DatasetSplit, SynthRule};
use hafrm_core::eval::{
    best_of_n, implicit_dpo_reward, judged_ranking, ood_matrix, pairwise_accuracy, top_k_recall,
    ImplicitDpoScorer, ModelScorer, OracleJudge, RecallMode, RewardScorer, RuleScorer,
    ShiftedScorer, UniformRandomScorer,
};
use hafrm_core::losses::{
    hybrid_loss, policy_loss_dpo, reward_loss, GraphMode, HybridConfig, PairExample,
};
use hafrm_core::model::{DualHeadModel, ModelConfig};
use hafrm_core::rng::Rng;
use hafrm_core::tensor::{
    grad_check, grad_check_sampled, log_sigmoid_scalar, sigmoid_scalar, Tape, Tensor, Var,
};
use hafrm_core::train::{
    adamw_update, alpha_sweep, encode_records, fit, AdamWParams, Checkpoint, OptimState,
    TrainConfig, TrainGraph, Trainer,
};
use std::collections::BTreeMap;
use std::time::Instant;

const LN_2: f64 = std::f64::consts::LN_2;

fn pass(criterion: &str, details: String) {
    println!("ACCEPTANCE {criterion}: PASS - {details}");
}

fn rand_tensor(shape: Vec<usize>, rng: &mut Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * scale).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Column-weighted scalar readout so gradients of row-structured ops are
/// non-uniform.
fn scalarize(tape: &mut Tape, y: Var, weights: &Tensor) -> Var {
    let w = tape.input(weights);
    let reduced = tape.matmul(y, w).unwrap();
    tape.sum(reduced).unwrap()
}

// ---------------------------------------------------------------------
// Criterion 1: gradient suite, every primitive op and the full hybrid
// loss through a 2-layer d32 model, >= 20 seeds, rel err <= 1e-4 at
// h = 1e-5 (1e-6 for primitives), under 60 seconds.
// ---------------------------------------------------------------------

#[test]
fn c01_gradient_suite() {
    let started = Instant::now();
    let h = 1e-5;
    let tol_primitive = 1e-6;
    let seeds = 20;

    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut check = |name: &'static str,
                     seed: u64,
                     x: Tensor,
                     f: &dyn Fn(&mut Tape, Var) -> Result<Var, hafrm_core::tensor::TensorError>| {
        let report = grad_check(f, &x, h, tol_primitive).unwrap();
        assert!(report.pass, "{name} seed {seed}: {report}");
        if report.max_rel_err > worst.0 {
            worst = (report.max_rel_err, name);
        }
    };

    for seed in 0..seeds {
        let mut rng = Rng::new(seed);
        let wc3 = rand_tensor(vec![3, 1], &mut rng, 1.0);
        let wc4 = rand_tensor(vec![4, 1], &mut rng, 1.0);
        let wc5 = rand_tensor(vec![5, 1], &mut rng, 1.0);

        let b_mat = rand_tensor(vec![4, 3], &mut rng, 1.0);
        let wcb = wc3.clone();
        check("matmul wrt lhs", seed, rand_tensor(vec![2, 4], &mut rng, 1.0), &{
            let b_mat = b_mat.clone();
            let wcb = wcb.clone();
            move |tape, x| {
                let b = tape.input(&b_mat);
                let y = tape.matmul(x, b)?;
                Ok(scalarize(tape, y, &wcb))
            }
        });
        let a_mat = rand_tensor(vec![2, 4], &mut rng, 1.0);
        check("matmul wrt rhs", seed, rand_tensor(vec![4, 3], &mut rng, 1.0), &{
            let a_mat = a_mat.clone();
            let wcb = wc3.clone();
            move |tape, x| {
                let a = tape.input(&a_mat);
                let y = tape.matmul(a, x)?;
                Ok(scalarize(tape, y, &wcb))
            }
        });

        let nt_b = rand_tensor(vec![3, 4], &mut rng, 1.0);
        check("matmul_nt wrt lhs", seed, rand_tensor(vec![2, 4], &mut rng, 1.0), &{
            let nt_b = nt_b.clone();
            let w = wc3.clone();
            move |tape, x| {
                let b = tape.input(&nt_b);
                let y = tape.matmul_nt(x, b)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        let nt_a = rand_tensor(vec![2, 4], &mut rng, 1.0);
        check("matmul_nt wrt rhs", seed, rand_tensor(vec![3, 4], &mut rng, 1.0), &{
            let nt_a = nt_a.clone();
            let w = wc3.clone();
            move |tape, x| {
                let a = tape.input(&nt_a);
                let y = tape.matmul_nt(a, x)?;
                Ok(scalarize(tape, y, &w))
            }
        });

        let other = rand_tensor(vec![2, 5], &mut rng, 1.0);
        check("add", seed, rand_tensor(vec![2, 5], &mut rng, 1.0), &{
            let other = other.clone();
            let w = wc5.clone();
            move |tape, x| {
                let o = tape.input(&other);
                let y = tape.add(x, o)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("sub wrt rhs", seed, rand_tensor(vec![2, 5], &mut rng, 1.0), &{
            let other = other.clone();
            let w = wc5.clone();
            move |tape, x| {
                let o = tape.input(&other);
                let y = tape.sub(o, x)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        let mat25 = rand_tensor(vec![2, 5], &mut rng, 1.0);
        check("add_bias wrt x", seed, rand_tensor(vec![2, 5], &mut rng, 1.0), &{
            let bias = rand_tensor(vec![5], &mut rng, 1.0);
            let w = wc5.clone();
            move |tape, x| {
                let b = tape.input(&bias);
                let y = tape.add_bias(x, b)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("add_bias wrt bias", seed, rand_tensor(vec![5], &mut rng, 1.0), &{
            let mat25 = mat25.clone();
            let w = wc5.clone();
            move |tape, x| {
                let m = tape.input(&mat25);
                let y = tape.add_bias(m, x)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("scale", seed, rand_tensor(vec![2, 5], &mut rng, 1.0), &{
            let w = wc5.clone();
            move |tape, x| {
                let y = tape.scale(x, -1.7)?;
                Ok(scalarize(tape, y, &w))
            }
        });

        let ids = vec![rng.below(6), rng.below(6), rng.below(6), rng.below(6)];
        check("embedding", seed, rand_tensor(vec![6, 3], &mut rng, 1.0), &{
            let ids = ids.clone();
            let w = wc3.clone();
            move |tape, x| {
                let y = tape.embedding(x, &ids)?;
                Ok(scalarize(tape, y, &w))
            }
        });

        check("select_row", seed, rand_tensor(vec![4, 3], &mut rng, 1.0), &{
            let w = wc3.clone();
            move |tape, x| {
                let y = tape.select_row(x, 2)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("slice_rows", seed, rand_tensor(vec![5, 3], &mut rng, 1.0), &{
            let w = wc3.clone();
            move |tape, x| {
                let y = tape.slice_rows(x, 1, 3)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("slice_cols", seed, rand_tensor(vec![3, 6], &mut rng, 1.0), &{
            let w = wc3.clone();
            move |tape, x| {
                let y = tape.slice_cols(x, 2, 3)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("concat_cols", seed, rand_tensor(vec![3, 2], &mut rng, 1.0), &{
            let fixed = rand_tensor(vec![3, 2], &mut rng, 1.0);
            let w = wc4.clone();
            move |tape, x| {
                let o = tape.input(&fixed);
                let y = tape.concat_cols(&[x, o])?;
                Ok(scalarize(tape, y, &w))
            }
        });
        // composed with softmax as in attention, so the large mask constant
        // never reaches the loss and the difference quotient stays
        // well-conditioned
        check("causal_mask", seed, rand_tensor(vec![4, 4], &mut rng, 1.0), &{
            let w = wc4.clone();
            move |tape, x| {
                let masked = tape.causal_mask(x)?;
                let y = tape.softmax_rows(masked)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("softmax_rows", seed, rand_tensor(vec![3, 4], &mut rng, 2.0), &{
            let w = wc4.clone();
            move |tape, x| {
                let y = tape.softmax_rows(x)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("log_softmax_rows", seed, rand_tensor(vec![3, 4], &mut rng, 2.0), &{
            let w = wc4.clone();
            move |tape, x| {
                let y = tape.log_softmax_rows(x)?;
                Ok(scalarize(tape, y, &w))
            }
        });

        let gain = rand_tensor(vec![5], &mut rng, 1.0);
        let bias = rand_tensor(vec![5], &mut rng, 1.0);
        check("layer_norm wrt x", seed, rand_tensor(vec![2, 5], &mut rng, 1.0), &{
            let gain = gain.clone();
            let bias = bias.clone();
            let w = wc5.clone();
            move |tape, x| {
                let g = tape.input(&gain);
                let b = tape.input(&bias);
                let y = tape.layer_norm(x, g, b, 1e-5)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("layer_norm wrt gain", seed, rand_tensor(vec![5], &mut rng, 1.0), &{
            let mat = mat25.clone();
            let bias = bias.clone();
            let w = wc5.clone();
            move |tape, x| {
                let m = tape.input(&mat);
                let b = tape.input(&bias);
                let y = tape.layer_norm(m, x, b, 1e-5)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("layer_norm wrt bias", seed, rand_tensor(vec![5], &mut rng, 1.0), &{
            let mat = mat25.clone();
            let gain = gain.clone();
            let w = wc5.clone();
            move |tape, x| {
                let m = tape.input(&mat);
                let g = tape.input(&gain);
                let y = tape.layer_norm(m, g, x, 1e-5)?;
                Ok(scalarize(tape, y, &w))
            }
        });

        check("gelu", seed, rand_tensor(vec![2, 5], &mut rng, 2.0), &{
            let w = wc5.clone();
            move |tape, x| {
                let y = tape.gelu(x)?;
                Ok(scalarize(tape, y, &w))
            }
        });
        check("log_sigmoid", seed, rand_tensor(vec![2, 5], &mut rng, 3.0), &{
            let w = wc5.clone();
            move |tape, x| {
                let y = tape.log_sigmoid(x)?;
                Ok(scalarize(tape, y, &w))
            }
        });

        check("gather", seed, rand_tensor(vec![3, 4], &mut rng, 1.0), &|tape, x| {
            let y = tape.gather(x, &[(0, 1), (2, 3), (0, 1), (1, 0)])?;
            tape.sum(y)
        });
        check("sum", seed, rand_tensor(vec![2, 3], &mut rng, 1.0), &|tape, x| tape.sum(x));
        check("mean", seed, rand_tensor(vec![2, 3], &mut rng, 1.0), &|tape, x| tape.mean(x));
        check("stack", seed, rand_tensor(vec![1, 4], &mut rng, 1.0), &|tape, x| {
            let parts: Vec<Var> = (0..4)
                .map(|i| tape.gather(x, &[(0, i)]).unwrap())
                .collect();
            let stacked = tape.stack(&parts)?;
            tape.sum(stacked)
        });
    }

    // sampled sweep over a vocabulary-sized table, the one primitive too
    // large to sweep exhaustively per seed
    for seed in 0..seeds {
        let mut rng = Rng::new(500 + seed);
        let table = rand_tensor(vec![259, 32], &mut rng, 0.5);
        let ids: Vec<usize> = (0..12).map(|_| rng.below(259)).collect();
        let weights = rand_tensor(vec![32, 1], &mut rng, 1.0);
        let coords: Vec<usize> = (0..30).map(|_| rng.below(table.numel())).collect();
        let report = grad_check_sampled(
            |tape, x| {
                let y = tape.embedding(x, &ids)?;
                Ok(scalarize(tape, y, &weights))
            },
            &table,
            h,
            tol_primitive,
            &coords,
        )
        .unwrap();
        assert!(report.pass, "sampled embedding seed {seed}: {report}");
    }

    // full hybrid loss through a 2-layer, d_model-32 model
    let cfg = ModelConfig::tiny(32, 2, 2, 48);
    let template = DualHeadModel::new(cfg.clone()).unwrap();
    let n_params = template.param_count();
    let pair_specs = [("tell me", "yes sir"), ("tell me", "not now")];
    let tol_model = 1e-4;
    let mut worst_model = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(1000 + seed);
        // random model state around the init scale
        let flat: Vec<f64> = (0..n_params)
            .map(|_| (rng.uniform() * 2.0 - 1.0) * 0.05)
            .collect();
        let build_batch = |model: &DualHeadModel| -> Vec<PairExample> {
            pair_specs
                .iter()
                .enumerate()
                .map(|(i, (p, r))| PairExample {
                    id: format!("g{i}"),
                    chosen: model.encode_pair(p, r).unwrap(),
                    rejected: model.encode_pair(p, "oh no").unwrap(),
                    ref_logp_chosen: -3.5,
                    ref_logp_rejected: -4.25,
                })
                .collect()
        };
        let eval_loss = |flat: &[f64]| -> f64 {
            let mut model = template.clone();
            model.load_flat_params(flat).unwrap();
            let batch = build_batch(&model);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let out = hybrid_loss(
                &mut tape,
                &bound,
                &batch,
                &HybridConfig::default(),
                GraphMode::Hybrid,
            )
            .unwrap();
            tape.value(out.objective).item().unwrap()
        };

        // analytic gradient through one tape
        let mut model = template.clone();
        model.load_flat_params(&flat).unwrap();
        let batch = build_batch(&model);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let out = hybrid_loss(
            &mut tape,
            &bound,
            &batch,
            &HybridConfig::default(),
            GraphMode::Hybrid,
        )
        .unwrap();
        tape.backward(out.objective).unwrap();
        let analytic: Vec<f64> = bound
            .param_vars()
            .iter()
            .flat_map(|&v| tape.grad_or_zeros(v))
            .collect();
        assert_eq!(analytic.len(), n_params);

        // central differences on sampled coordinates
        let mut perturbed = flat.clone();
        for _ in 0..24 {
            let i = rng.below(n_params);
            let orig = perturbed[i];
            perturbed[i] = orig + 1e-5;
            let plus = eval_loss(&perturbed);
            perturbed[i] = orig - 1e-5;
            let minus = eval_loss(&perturbed);
            perturbed[i] = orig;
            let numeric = (plus - minus) / 2e-5;
            let rel = (analytic[i] - numeric).abs()
                / 1.0f64.max(analytic[i].abs()).max(numeric.abs());
            assert!(
                rel <= tol_model,
                "hybrid-loss grad seed {seed} coord {i}: rel err {rel:.3e}"
            );
            worst_model = worst_model.max(rel);
        }
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "gradient suite took {elapsed:?}, budget is 60 s"
    );
    pass(
        "C1 gradient suite",
        format!(
            "21 primitive ops and hybrid loss through a 2-layer d32 model over {seeds} seeds; \
             worst primitive rel err {:.2e} ({}), worst model rel err {:.2e}, {elapsed:?}",
            worst.0, worst.1, worst_model
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 2: closed-form loss values.
// ---------------------------------------------------------------------

#[test]
fn c02_closed_form_losses() {
    // zero-margin reward loss = ln 2
    let mut tape = Tape::new();
    let a = tape.input(&Tensor::scalar(0.37));
    let b = tape.input(&Tensor::scalar(0.37));
    let l_s = reward_loss(&mut tape, &[a], &[b]).unwrap();
    let l_s_val = tape.value(l_s).item().unwrap();
    assert!((l_s_val - LN_2).abs() <= 1e-12);

    // zero-pd DPO loss = ln 2
    let w = tape.input(&Tensor::scalar(-6.5));
    let l = tape.input(&Tensor::scalar(-8.0));
    let dpo = policy_loss_dpo(&mut tape, &[w], &[l], &[-6.5], &[-8.0], 0.1).unwrap();
    let l_p_val = tape.value(dpo.loss).item().unwrap();
    assert!((l_p_val - LN_2).abs() <= 1e-12);

    // l_h = l_s + 0.2 l_p on a real zero-init model at step 0
    let model = DualHeadModel::new(ModelConfig::tiny(16, 1, 2, 64)).unwrap();
    let data = split(
        &synth_generate("marker-count", 24, 0).unwrap().preference_records(),
        0,
        0.0,
        0.25,
    )
    .unwrap();
    let encoded = encode_records(&model, &data.train).unwrap();
    let mut trainer = Trainer::new(model, &TrainConfig::default()).unwrap();
    let outcome = trainer.train_step(&encoded[..8]).unwrap();
    let bd = outcome.breakdown;
    assert_eq!(bd.l_s.to_bits(), LN_2.to_bits(), "step-0 l_s must be ln 2 exactly");
    assert_eq!(bd.l_p.to_bits(), LN_2.to_bits(), "step-0 l_p must be ln 2 exactly");
    assert!((bd.l_h - (bd.l_s + 0.2 * bd.l_p)).abs() <= 1e-12);
    assert!((bd.l_h - 1.2 * LN_2).abs() <= 1e-12);

    pass(
        "C2 closed-form losses",
        format!(
            "zero-margin and zero-pd losses equal ln 2 within 1e-12; step-0 l_s = l_p = ln 2 \
             bit-exactly; l_h - (l_s + 0.2 l_p) = {:.1e}",
            (bd.l_h - (bd.l_s + 0.2 * bd.l_p)).abs()
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 3: alpha = 0 training is bitwise identical to the baseline
// trainer (which never constructs the policy branch) over 200 steps.
// ---------------------------------------------------------------------

#[test]
fn c03_baseline_equivalence() {
    let records = synth_generate("marker-count", 64, 0)
        .unwrap()
        .preference_records();
    let data = split(&records, 0, 0.0, 0.125).unwrap();
    let base = TrainConfig {
        batch_size: 8,
        max_steps: 200,
        eval_every_frac: 0.05,
        early_stop_patience: u64::MAX,
        hybrid: HybridConfig { alpha: 0.0, tau: 0.1 },
        ..TrainConfig::default()
    };
    let cfg_baseline = base.clone();
    let cfg_forced = TrainConfig {
        graph: TrainGraph::ForceHybrid,
        ..base
    };
    let model_cfg = ModelConfig::tiny(16, 1, 2, 64);

    let run_a = fit(DualHeadModel::new(model_cfg.clone()).unwrap(), &data, &cfg_baseline).unwrap();
    let run_b = fit(DualHeadModel::new(model_cfg).unwrap(), &data, &cfg_forced).unwrap();
    assert_eq!(run_a.log.mode, "baseline");
    assert_eq!(run_b.log.mode, "hybrid");

    let steps_a: Vec<_> = run_a.log.steps().collect();
    let steps_b: Vec<_> = run_b.log.steps().collect();
    assert_eq!(steps_a.len(), 200);
    assert_eq!(steps_a.len(), steps_b.len());
    for (a, b) in steps_a.iter().zip(&steps_b) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.loss.l_s.to_bits(), b.loss.l_s.to_bits(), "l_s at step {}", a.step);
        assert_eq!(a.loss.l_h.to_bits(), b.loss.l_h.to_bits(), "l_h at step {}", a.step);
        assert_eq!(
            a.loss.margin.to_bits(),
            b.loss.margin.to_bits(),
            "margin at step {}",
            a.step
        );
    }
    let vals_a: Vec<_> = run_a.log.validations().collect();
    let vals_b: Vec<_> = run_b.log.validations().collect();
    assert_eq!(vals_a.len(), vals_b.len());
    for (a, b) in vals_a.iter().zip(&vals_b) {
        assert_eq!(a.step, b.step);
        assert_eq!(
            a.validation_accuracy.to_bits(),
            b.validation_accuracy.to_bits()
        );
        assert_eq!(a.mean_margin.to_bits(), b.mean_margin.to_bits());
    }
    assert_eq!(run_a.best.step, run_b.best.step);
    let pa = run_a.best.model.flatten_params();
    let pb = run_b.best.model.flatten_params();
    for (i, (x, y)) in pa.iter().zip(&pb).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "param {i} diverged");
    }

    pass(
        "C3 baseline equivalence",
        format!(
            "alpha=0 vs policy-branch-free trainer: 200 steps, {} validations, {} parameters \
             all bitwise identical",
            vals_a.len(),
            pa.len()
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 4: invariance suite at 1e-9.
// ---------------------------------------------------------------------

#[test]
fn c04_invariance_suite() {
    let tol = 1e-9;
    // L_s shift invariance
    let eval_ls = |margins: &[(f64, f64)], c: f64| {
        let mut tape = Tape::new();
        let w: Vec<Var> = margins
            .iter()
            .map(|(a, _)| tape.input(&Tensor::scalar(a + c)))
            .collect();
        let l: Vec<Var> = margins
            .iter()
            .map(|(_, b)| tape.input(&Tensor::scalar(b + c)))
            .collect();
        let loss = reward_loss(&mut tape, &w, &l).unwrap();
        tape.value(loss).item().unwrap()
    };
    let margins = [(1.2, 0.1), (-0.4, 0.8), (2.5, 2.5)];
    let base = eval_ls(&margins, 0.0);
    for c in [-77.0, -0.9, 3.3, 41.0] {
        assert!((eval_ls(&margins, c) - base).abs() < tol, "L_s shift {c}");
    }

    // L_P invariance under a common shift of all four log-prob arguments
    let eval_lp = |c: f64| {
        let mut tape = Tape::new();
        let w: Vec<Var> = [-3.0, -1.2]
            .iter()
            .map(|v| tape.input(&Tensor::scalar(v + c)))
            .collect();
        let l: Vec<Var> = [-4.5, -2.2]
            .iter()
            .map(|v| tape.input(&Tensor::scalar(v + c)))
            .collect();
        let terms =
            policy_loss_dpo(&mut tape, &w, &l, &[-2.0 + c, -3.0 + c], &[-1.0 + c, -2.5 + c], 0.1)
                .unwrap();
        tape.value(terms.loss).item().unwrap()
    };
    let base = eval_lp(0.0);
    for c in [-31.0, -0.1, 5.5, 18.0] {
        assert!((eval_lp(c) - base).abs() < tol, "L_P shift {c}");
    }

    // swap identity: -log sigmoid(-m) = m - log sigmoid(m)
    for m in [-7.0, -1.1, 0.0, 0.3, 2.8, 9.0] {
        let lhs = -log_sigmoid_scalar(-m);
        let rhs = m - log_sigmoid_scalar(m);
        assert!((lhs - rhs).abs() < tol, "swap identity at {m}");
    }

    // argmax invariance of best-of-N and accuracy under constant shifts
    let records = synth_generate("marker-count", 60, 3)
        .unwrap()
        .preference_records();
    let scorer = RuleScorer(SynthRule::MarkerCount);
    let report = pairwise_accuracy(&scorer, "mc", &records).unwrap();
    let candidates: Vec<String> = ["zap zap zap", "plain here", "one zap", "zap zap here zap zap"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let pick = best_of_n(&scorer, "p", "q", &candidates).unwrap();
    for delta in [-1000.0, -2.5, 0.7, 314.0] {
        let shifted = ShiftedScorer {
            inner: RuleScorer(SynthRule::MarkerCount),
            delta,
        };
        let r2 = pairwise_accuracy(&shifted, "mc", &records).unwrap();
        assert_eq!(report.accuracy, r2.accuracy, "accuracy shifted by {delta}");
        assert_eq!(report.n_correct, r2.n_correct);
        let p2 = best_of_n(&shifted, "p", "q", &candidates).unwrap();
        assert_eq!(pick.selected, p2.selected, "selection shifted by {delta}");
    }

    pass(
        "C4 invariance suite",
        "L_s shift, L_P common-shift, swap identity, and reward-shift argmax invariance all \
         within 1e-9"
            .to_string(),
    );
}

// ---------------------------------------------------------------------
// Criterion 5: synthetic end-to-end. Gated: baseline and the hybrid
// objective both reach validation accuracy >= 0.95 on the 2000-record
// marker corpus (seed 0, desk config) within 2000 steps and 10 minutes.
// Reported: hybrid-vs-baseline ordering across 3 seeds.
// ---------------------------------------------------------------------

#[test]
fn c05_synthetic_end_to_end() {
    let started = Instant::now();
    let records = synth_generate("marker-count", 2000, 0)
        .unwrap()
        .preference_records();
    let data = split(&records, 0, 0.1, 0.05).unwrap();
    let cfg_for = |alpha: f64| TrainConfig {
        max_steps: 2000,
        eval_every_frac: 0.0075, // validate every 15 steps
        early_stop_patience: 5,
        hybrid: HybridConfig { alpha, tau: 0.1 },
        ..TrainConfig::default()
    };

    let mut gated = Vec::new();
    for (name, alpha) in [("baseline", 0.0), ("hybrid", 0.2)] {
        let model = DualHeadModel::new(ModelConfig::desk_default()).unwrap();
        let out = fit(model, &data, &cfg_for(alpha)).unwrap();
        let acc = out.best.validation_accuracy;
        let step = out.best.step;
        assert!(
            acc >= 0.95,
            "{name}: best validation accuracy {acc} below 0.95 (step {step})"
        );
        assert!(step <= 2000);
        let test_acc = pairwise_accuracy(
            &ModelScorer {
                model: &out.best.model,
            },
            "test",
            &data.test,
        )
        .unwrap()
        .accuracy;
        gated.push((name, acc, step, test_acc));
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 600.0,
        "end-to-end pair took {elapsed:?}, budget is 10 min"
    );

    // reported, not gated: ordering across 3 seeds at reduced scale
    let mut hybrid_wins = 0;
    let mut report_lines = Vec::new();
    for seed in 1..=3u64 {
        let records = synth_generate("marker-count", 600, seed)
            .unwrap()
            .preference_records();
        let data = split(&records, seed, 0.1, 0.1).unwrap();
        let small_cfg = |alpha: f64| TrainConfig {
            max_steps: 150,
            eval_every_frac: 0.1,
            early_stop_patience: 4,
            seed,
            hybrid: HybridConfig { alpha, tau: 0.1 },
            ..TrainConfig::default()
        };
        let model_cfg = ModelConfig {
            d_model: 32,
            seed,
            ..ModelConfig::desk_default()
        };
        let base = fit(
            DualHeadModel::new(model_cfg.clone()).unwrap(),
            &data,
            &small_cfg(0.0),
        )
        .unwrap();
        let hybrid = fit(
            DualHeadModel::new(model_cfg).unwrap(),
            &data,
            &small_cfg(0.2),
        )
        .unwrap();
        if hybrid.best.validation_accuracy > base.best.validation_accuracy {
            hybrid_wins += 1;
        }
        report_lines.push(format!(
            "seed {seed}: baseline {:.3} vs hybrid {:.3}",
            base.best.validation_accuracy, hybrid.best.validation_accuracy
        ));
    }
    println!(
        "REPORT C5 (not gated): hybrid beats baseline on {hybrid_wins}/3 reduced-scale seeds \
         [{}]",
        report_lines.join("; ")
    );

    pass(
        "C5 synthetic end-to-end",
        format!(
            "{} in {elapsed:?}",
            gated
                .iter()
                .map(|(n, a, s, t)| format!("{n}: val {a:.3} @ step {s} (test {t:.3})"))
                .collect::<Vec<_>>()
                .join("; ")
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 6: best-of-N against the oracle judge. Ground-truth scorer
// gives recall 1.0; a uniform-random scorer sits at chance (0.25 / 0.50
// within 0.03 over 10k prompts, N = 4).
// ---------------------------------------------------------------------

#[test]
fn c06_best_of_n_oracle() {
    let judge = OracleJudge {
        rule: SynthRule::MarkerCount,
    };
    let make_candidates = |rng: &mut Rng| -> Vec<String> {
        // four candidates with distinct marker counts, shuffled
        let mut counts = [0usize, 1, 2, 3];
        rng.shuffle(&mut counts);
        counts
            .iter()
            .map(|&k| {
                let mut words = vec!["fine"; 3 + rng.below(3)];
                for _ in 0..k {
                    let pos = rng.below(words.len() + 1);
                    words.insert(pos, "zap");
                }
                words.join(" ")
            })
            .collect()
    };

    // oracle scorer: perfect recall at every k
    let oracle = RuleScorer(SynthRule::MarkerCount);
    let mut rng = Rng::new(60);
    let mut results = Vec::new();
    for i in 0..200 {
        let id = format!("p{i}");
        let prompt = format!("ask {i}");
        let candidates = make_candidates(&mut rng);
        let mut r = best_of_n(&oracle, &id, &prompt, &candidates).unwrap();
        r.judge_ranking = Some(judged_ranking(&judge, &id, &prompt, &candidates).unwrap());
        results.push(r);
    }
    let report = top_k_recall(&results, &[1, 2, 3], RecallMode::ArgmaxInTopK).unwrap();
    for e in &report.entries {
        assert_eq!(e.recall, 1.0, "oracle recall at k={}", e.k);
    }

    // uniform-random scorer: chance level over 10k prompts. Prompts must be
    // unique: the scorer is a pure hash of (prompt, response), and the small
    // candidate text pool repeats across prompts, so a shared prompt would
    // correlate the draws.
    let random = UniformRandomScorer { seed: 7 };
    let mut rng = Rng::new(61);
    let mut results = Vec::new();
    for i in 0..10_000 {
        let id = format!("p{i}");
        let prompt = format!("ask {i}");
        let candidates = make_candidates(&mut rng);
        let mut r = best_of_n(&random, &id, &prompt, &candidates).unwrap();
        r.judge_ranking = Some(judged_ranking(&judge, &id, &prompt, &candidates).unwrap());
        results.push(r);
    }
    let report = top_k_recall(&results, &[1, 2], RecallMode::ArgmaxInTopK).unwrap();
    let top1 = report.entries[0].recall;
    let top2 = report.entries[1].recall;
    assert!((top1 - 0.25).abs() <= 0.03, "random top-1 {top1}");
    assert!((top2 - 0.50).abs() <= 0.03, "random top-2 {top2}");

    pass(
        "C6 best-of-N oracle",
        format!(
            "oracle scorer recall 1.0 at k=1,2,3; uniform-random scorer at chance \
             (top-1 {top1:.4}, top-2 {top2:.4} over 10k prompts)"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 7: the cross-dataset protocol on two rules in two groups.
// Full grid, exact rAcc recomputation, same-group transfer > 0.5 across
// three seeds.
// ---------------------------------------------------------------------

fn train_small(records: &[hafrm_core::data::PreferenceRecord], seed: u64) -> (DualHeadModel, DatasetSplit) {
    let data = split(records, seed, 0.15, 0.1).unwrap();
    let cfg = TrainConfig {
        max_steps: 120,
        eval_every_frac: 0.1,
        early_stop_patience: 4,
        seed,
        lr: 2e-3,
        hybrid: HybridConfig {
            alpha: 0.2,
            tau: 0.1,
        },
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig {
        d_model: 32,
        seed,
        ..ModelConfig::desk_default()
    };
    let out = fit(DualHeadModel::new(model_cfg).unwrap(), &data, &cfg).unwrap();
    (out.best.model, data)
}

#[test]
fn c07_ood_protocol() {
    let mut transfer_cells = Vec::new();
    for seed in 0..3u64 {
        let mk_a = synth_generate("marker-count", 400, 100 + seed).unwrap();
        let mk_b = synth_generate("marker-count", 200, 200 + seed).unwrap();
        let sf_a = synth_generate("keyword-safety", 400, 300 + seed).unwrap();
        let sf_b = synth_generate("keyword-safety", 200, 400 + seed).unwrap();

        let (mk_model, mk_split) = train_small(&mk_a.preference_records(), seed);
        let (sf_model, sf_split) = train_small(&sf_a.preference_records(), seed);

        let mk_scorer = ModelScorer { model: &mk_model };
        let sf_scorer = ModelScorer { model: &sf_model };
        let mut models: BTreeMap<String, &dyn RewardScorer> = BTreeMap::new();
        models.insert("mk-a".into(), &mk_scorer);
        models.insert("sf-a".into(), &sf_scorer);

        let mut datasets = BTreeMap::new();
        datasets.insert("mk-a".to_string(), mk_split.test.clone());
        datasets.insert("mk-b".to_string(), mk_b.preference_records());
        datasets.insert("sf-a".to_string(), sf_split.test.clone());
        datasets.insert("sf-b".to_string(), sf_b.preference_records());

        let mut groups = BTreeMap::new();
        groups.insert("mk-a".to_string(), "better".to_string());
        groups.insert("mk-b".to_string(), "better".to_string());
        groups.insert("sf-a".to_string(), "safer".to_string());
        groups.insert("sf-b".to_string(), "safer".to_string());

        let matrix = ood_matrix(&models, &datasets, &groups).unwrap();
        assert_eq!(matrix.row_tags.len(), 2);
        assert_eq!(matrix.col_tags.len(), 4);
        for row in 0..matrix.row_tags.len() {
            assert_eq!(
                matrix.racc[row],
                matrix.recompute_racc(row),
                "rAcc must recompute exactly from the cells"
            );
            assert!(!matrix.in_distribution_only[row]);
        }
        let mk_transfer = matrix.cell("mk-a", "mk-b").unwrap();
        let sf_transfer = matrix.cell("sf-a", "sf-b").unwrap();
        assert!(
            mk_transfer > 0.5,
            "seed {seed}: marker-count same-group transfer {mk_transfer}"
        );
        assert!(
            sf_transfer > 0.5,
            "seed {seed}: safety same-group transfer {sf_transfer}"
        );
        transfer_cells.push((seed, mk_transfer, sf_transfer));
    }

    pass(
        "C7 cross-dataset protocol",
        format!(
            "2x4 grid with exact rAcc; same-group transfer > 0.5 on all 3 seeds: {}",
            transfer_cells
                .iter()
                .map(|(s, a, b)| format!("seed {s}: mk {a:.3}, sf {b:.3}"))
                .collect::<Vec<_>>()
                .join("; ")
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 8: the policy-ratio sweep emits aligned series, the margin
// at every best checkpoint is positive, and the negative-ratio arm is
// reported against alpha = 0.
// ---------------------------------------------------------------------

#[test]
fn c08_alpha_sweep() {
    let records = synth_generate("marker-count", 400, 0)
        .unwrap()
        .preference_records();
    let data = split(&records, 0, 0.1, 0.1).unwrap();
    let base = TrainConfig {
        max_steps: 100,
        eval_every_frac: 0.1,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig {
        d_model: 32,
        ..ModelConfig::desk_default()
    };

    let sweep = alpha_sweep(&model_cfg, &data, &base, &[0.0, 0.1, 0.2]).unwrap();
    let margin_csv = sweep.margin_vs_step_csv();
    let acc_csv = sweep.accuracy_vs_step_csv();
    assert!(margin_csv.starts_with("step,alpha=0,alpha=0.1,alpha=0.2\n"));
    assert_eq!(margin_csv.lines().count(), 1 + 100, "one margin row per step");
    assert_eq!(acc_csv.lines().count(), 1 + 11, "validations at 0,10,...,100");
    for run in &sweep.runs {
        assert!(
            run.margin_at_best > 0.0,
            "alpha {}: margin at best checkpoint {}",
            run.alpha,
            run.margin_at_best
        );
    }

    // negative ratio arm: successful emission gated, ordering reported
    let negative = alpha_sweep(&model_cfg, &data, &base, &[-0.1]).unwrap();
    let neg_csv = negative.margin_vs_step_csv();
    assert!(neg_csv.starts_with("step,alpha=-0.1\n"));
    assert_eq!(neg_csv.lines().count(), 1 + 100);
    let neg_final = negative.runs[0]
        .outcome
        .log
        .validations()
        .last()
        .unwrap()
        .validation_accuracy;
    let zero_final = sweep.runs[0]
        .outcome
        .log
        .validations()
        .last()
        .unwrap()
        .validation_accuracy;
    println!(
        "REPORT C8 (not gated, single seed): final accuracy alpha=-0.1 is {neg_final:.3} vs \
         alpha=0 {zero_final:.3}{}",
        if neg_final <= zero_final {
            " (degraded or equal, as expected)"
        } else {
            " (inverted on this seed)"
        }
    );

    pass(
        "C8 policy-ratio sweep",
        format!(
            "aligned margin/accuracy series for alphas 0, 0.1, 0.2; margins at best checkpoints \
             {:?} all positive; negative arm emitted",
            sweep
                .runs
                .iter()
                .map(|r| (r.alpha, (r.margin_at_best * 1000.0).round() / 1000.0))
                .collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 9: determinism and persistence.
// ---------------------------------------------------------------------

#[test]
fn c09_determinism_and_persistence() {
    let records = synth_generate("marker-count", 80, 5)
        .unwrap()
        .preference_records();
    let data = split(&records, 1, 0.1, 0.1).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        max_steps: 24,
        eval_every_frac: 0.25,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig::tiny(16, 1, 2, 64);

    let a = fit(DualHeadModel::new(model_cfg.clone()).unwrap(), &data, &cfg).unwrap();
    let b = fit(DualHeadModel::new(model_cfg).unwrap(), &data, &cfg).unwrap();
    assert_eq!(
        a.log.to_jsonl(),
        b.log.to_jsonl(),
        "identical config + seed must reproduce identical log bytes"
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    a.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let rescored = pairwise_accuracy(
        &ModelScorer {
            model: &loaded.model,
        },
        "validation",
        &data.validation,
    )
    .unwrap()
    .accuracy;
    assert_eq!(
        rescored.to_bits(),
        a.best.validation_accuracy.to_bits(),
        "checkpoint round trip must preserve validation accuracy exactly"
    );

    pass(
        "C9 determinism and persistence",
        format!(
            "rerun log bytes identical ({} lines); reloaded checkpoint reproduces validation \
             accuracy {} exactly",
            a.log.to_jsonl().lines().count(),
            rescored
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 10: implicit DPO rewards: exactly zero at the snapshot and
// ranking-invariant under positive rescaling. The cross-rule cells of a
// DPO-only model are reported, not gated.
// ---------------------------------------------------------------------

#[test]
fn c10_implicit_dpo_scoring() {
    let model = DualHeadModel::new(ModelConfig::tiny(16, 2, 2, 64)).unwrap();
    let reference = model.snapshot_reference();
    for response in ["short", "a medium one", "and a rather longer answer"] {
        let r = implicit_dpo_reward(&model, &reference, "prompt", response).unwrap();
        assert_eq!(r, 0.0, "pi == pi_ref must give exactly zero");
    }

    // train a DPO-only model: descend the policy loss alone
    let corpus = synth_generate("marker-count", 200, 9).unwrap();
    let data = split(&corpus.preference_records(), 9, 0.2, 0.0).unwrap();
    let mut dpo_model = DualHeadModel::new(ModelConfig {
        d_model: 32,
        ..ModelConfig::desk_default()
    })
    .unwrap();
    let dpo_reference = dpo_model.snapshot_reference();
    let encoded = encode_records(&dpo_model, &data.train).unwrap();
    let mut optim = OptimState::new(&dpo_model);
    let adamw = AdamWParams {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-5,
        weight_decay: 0.0,
    };
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut rng = Rng::new(9);
    for _ in 0..60 {
        rng.shuffle(&mut order);
        let batch: Vec<_> = order.iter().take(16).map(|&i| &encoded[i]).collect();
        let mut tape = Tape::new();
        let bound = dpo_model.bind(&mut tape, true);
        let mut lw = Vec::new();
        let mut ll = Vec::new();
        let mut rw = Vec::new();
        let mut rl = Vec::new();
        for ex in &batch {
            lw.push(bound.seq_log_prob(&mut tape, &ex.chosen).unwrap());
            ll.push(bound.seq_log_prob(&mut tape, &ex.rejected).unwrap());
            rw.push(dpo_reference.sequence_log_prob(&ex.chosen).unwrap());
            rl.push(dpo_reference.sequence_log_prob(&ex.rejected).unwrap());
        }
        let terms = policy_loss_dpo(&mut tape, &lw, &ll, &rw, &rl, 0.1).unwrap();
        tape.backward(terms.loss).unwrap();
        let grads: Vec<Vec<f64>> = bound
            .param_vars()
            .iter()
            .map(|&v| tape.grad_or_zeros(v))
            .collect();
        drop(tape);
        let mut clipped = grads;
        hafrm_core::train::clip_global_norm(&mut clipped, 1.0);
        adamw_update(&mut dpo_model, &clipped, &mut optim, &adamw);
    }

    // positive rescaling never reorders candidates
    let scorer_1x = ImplicitDpoScorer {
        policy: &dpo_model,
        reference: &dpo_reference,
        scale: 1.0,
    };
    let scorer_tau = ImplicitDpoScorer {
        policy: &dpo_model,
        reference: &dpo_reference,
        scale: 0.1,
    };
    let candidates: Vec<String> = ["zap zap zap so", "well it is plain", "one zap only here"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let a = best_of_n(&scorer_1x, "p", "tell me about tea", &candidates).unwrap();
    let b = best_of_n(&scorer_tau, "p", "tell me about tea", &candidates).unwrap();
    assert_eq!(a.selected, b.selected, "positive rescaling reordered candidates");
    let in_dist = pairwise_accuracy(&scorer_1x, "mk-test", &data.test).unwrap();
    let in_dist_tau = pairwise_accuracy(&scorer_tau, "mk-test", &data.test).unwrap();
    assert_eq!(in_dist.accuracy, in_dist_tau.accuracy);

    // reported, not gated: cross-rule cells of the DPO-only scorer
    let other = synth_generate("keyword-safety", 150, 10)
        .unwrap()
        .preference_records();
    let cross = pairwise_accuracy(&scorer_1x, "sf", &other).unwrap();
    println!(
        "REPORT C10 (not gated): DPO-only implicit-reward accuracy in-distribution {:.3}, \
         cross-rule {:.3}",
        in_dist.accuracy, cross.accuracy
    );

    pass(
        "C10 implicit DPO scoring",
        format!(
            "implicit rewards exactly zero at the snapshot; rankings invariant under positive \
             rescaling (in-distribution accuracy {:.3} unchanged)",
            in_dist.accuracy
        ),
    );
}

// keep sigmoid_scalar linked for the closed-form checks below
#[test]
fn closed_form_gradient_bound() {
    for m in [-6.0, -1.0, 0.0, 2.0, 5.0] {
        let g = sigmoid_scalar(m) - 1.0;
        assert!(g > -1.0 && g < 0.0);
    }
}
