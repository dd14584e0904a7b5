//! Acceptance gate: ten numbered criteria covering gradient integrity,
//! attention oracles, algebraic identities, training progress, concept
//! fidelity, encoding speed, freeze contracts, and byte reproducibility.
//! Each test prints one PASS line (or panics with a FAIL line). The
//! criteria that need trained weights share one full-scale fixture built
//! on first use, so the whole gate runs inside a single `cargo test`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elite_lab::cli::{run, Cli, RunConfig};
use elite_lab::data::{dataset_sample, heldout_combos, sample_for_combo, Split};
use elite_lab::diffcore::gradcheck::finite_diff_check;
use elite_lab::eval::{benchmark_encoding, concept_metrics, random_concept};
use elite_lab::globalmap::{global_loss, stage1_param, train_global, train_global_step};
use elite_lab::ldm::{ldm_loss_at, sample};
use elite_lab::localmap::{
    fuse, local_attention, local_loss, reweight_attention, stage2_param, train_local,
    train_local_step,
};
use elite_lab::model::{Model, PreparedSample, StepStats};
use elite_lab::nn::{scaled_dot_attention, Linear};
use elite_lab::pretrain::{pretrain_encoders, train_backbone, unet_param};
use elite_lab::textenc::InjectMode;
use elite_lab::{OptimizerState, ParamSet, Scalar, Tape, Tensor};

fn pass(n: usize, detail: &str) {
    println!("PASS criterion {n}: {detail}");
}

fn check(ok: bool, n: usize, detail: &str) {
    assert!(ok, "FAIL criterion {n}: {detail}");
}

/// A tiny double-precision model with every zero-initialized tensor
/// replaced by small random values, so losses and gradients are probed at
/// a generic point instead of the degenerate all-zero output state.
fn generic_tiny_model() -> (RunConfig, Model, ParamSet<f64>) {
    let mut cfg = RunConfig::tiny_for_tests();
    cfg.reweight_in_training = true;
    let mut ps = ParamSet::<f64>::new();
    let model = Model::build(&cfg, &mut ps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for r in ps.all_refs() {
        let t = ps.get(r);
        if t.data().iter().all(|v| *v == 0.0) {
            let shape = t.shape().to_vec();
            *ps.get_mut(r) = Tensor::randn(shape, 0.05, &mut rng);
        }
    }
    (cfg, model, ps)
}

#[test]
fn c01_gradients_match_finite_differences() {
    let started = Instant::now();
    let (cfg, model, mut ps) = generic_tiny_model();
    let sample = dataset_sample::<f64>(&cfg, Split::Train, cfg.seed, 0).unwrap();
    let prep = model.prepare(&ps, &sample).unwrap();
    let template = "a photo of a S*";
    let t = 617;
    let mut nrng = ChaCha8Rng::seed_from_u64(11);
    let eps = Tensor::<f64>::randn(prep.z0.shape().to_vec(), 1.0, &mut nrng);

    let tok = model.text_encoder.tokenize("a photo of a red square").unwrap();
    let ctx = model.text_encoder.encode_tokens(&ps, &tok, None, InjectMode::PrimaryOnly).unwrap();

    let denoise = |tape: &Tape<f64>, ps: &ParamSet<f64>| {
        let ctx_var = tape.leaf(ctx.clone());
        ldm_loss_at(
            tape,
            ps,
            &model.unet,
            &model.schedule,
            &prep.z0,
            t,
            &eps,
            ctx_var,
            None,
            0.0,
        )
    };

    let mut reports = Vec::new();
    for (name, pred, which) in [
        ("L_LDM", unet_param as fn(&str) -> bool, 0usize),
        ("L_global", stage1_param as fn(&str) -> bool, 1),
        ("L_local", stage2_param as fn(&str) -> bool, 2),
    ] {
        let refs = ps.refs_matching(pred);
        let tape = Tape::with_trainable(&refs);
        let loss = match which {
            0 => denoise(&tape, &ps).unwrap(),
            1 => global_loss(&tape, &ps, &model, &prep, template, t, &eps).unwrap().loss,
            _ => local_loss(&tape, &ps, &model, &prep, template, t, &eps).unwrap().loss,
        };
        let grads = tape.backward(loss).unwrap();
        ps.clear_grads();
        grads.apply_to_params(&tape, &mut ps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7 + which as u64);
        let report = finite_diff_check(&mut ps, &refs, 6, 1e-5, 1e-4, &mut rng, &mut |ps| {
            let tape = Tape::new();
            let loss = match which {
                0 => denoise(&tape, ps)?,
                1 => global_loss(&tape, ps, &model, &prep, template, t, &eps)?.loss,
                _ => local_loss(&tape, ps, &model, &prep, template, t, &eps)?.loss,
            };
            Ok(tape.item(loss)?.to_f64())
        })
        .unwrap_or_else(|e| panic!("FAIL criterion 1: {name} gradient check: {e}"));
        ps.clear_grads();
        reports.push(format!("{name} {} entries max rel err {:.2e}", report.checked, report.max_rel_err));
    }
    let secs = started.elapsed().as_secs_f64();
    check(secs < 120.0, 1, &format!("gradient checks took {secs:.1} s, budget is 120 s"));
    pass(1, &format!("{}; {secs:.1} s", reports.join("; ")));
}

fn bf_softmax_rows(scores: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &mut scores[i * cols..(i + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

fn assert_close(actual: &Tensor<f64>, expect: &[f64], what: &str, trial: usize) {
    assert_eq!(actual.numel(), expect.len(), "{what} size, trial {trial}");
    for (i, (a, e)) in actual.data().iter().zip(expect).enumerate() {
        assert!(
            (a - e).abs() <= 1e-6,
            "FAIL criterion 2: {what}[{i}] = {a} vs brute force {e}, trial {trial}"
        );
    }
}

#[test]
fn c02_attention_oracles_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    for trial in 0..1000 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let dv = rng.random_range(1..=8);

        // Scaled dot-product attention over free tensors.
        let q = Tensor::<f64>::randn(vec![n, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![m, d], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![m, dv], 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let (out, attn) = scaled_dot_attention(
            &tape,
            tape.leaf(q.clone()),
            tape.leaf(k.clone()),
            tape.leaf(v.clone()),
        )
        .unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        let mut scores = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                scores[i * m + j] =
                    (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>() * scale;
            }
        }
        bf_softmax_rows(&mut scores, n, m);
        assert_close(&tape.value(attn), &scores, "attention map", trial);
        let mut expect = vec![0.0; n * dv];
        for i in 0..n {
            for l in 0..dv {
                expect[i * dv + l] =
                    (0..m).map(|j| scores[i * m + j] * v.data()[j * dv + l]).sum();
            }
        }
        assert_close(&tape.value(out), &expect, "attention output", trial);

        // Local attention over a masked patch grid with bias-free K/V.
        let p = rng.random_range(1..=8);
        let c = rng.random_range(1..=8);
        let mut lps = ParamSet::<f64>::new();
        let wk = Linear::new(&mut lps, &mut rng, "k", c, d, false).unwrap();
        let wv = Linear::new(&mut lps, &mut rng, "v", c, d, false).unwrap();
        let grid = Tensor::<f64>::randn(vec![p, c], 1.0, &mut rng);
        let mask_bits: Vec<f64> = (0..p).map(|_| rng.random_range(0..2) as f64).collect();
        let mask = Tensor::new(vec![p], mask_bits.clone()).unwrap();
        let lq = Tensor::<f64>::randn(vec![n, d], 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let (lattn, lvals, lout) = local_attention(
            &tape,
            &lps,
            tape.leaf(lq.clone()),
            tape.leaf(grid.clone()),
            tape.leaf(mask.clone()),
            &wk,
            &wv,
        )
        .unwrap();
        let wkm = lps.get(wk.w).data().to_vec();
        let wvm = lps.get(wv.w).data().to_vec();
        let masked: Vec<f64> = (0..p * c)
            .map(|i| grid.data()[i] * mask_bits[i / c])
            .collect();
        let proj = |w: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; p * d];
            for j in 0..p {
                for dd in 0..d {
                    out[j * d + dd] = (0..c).map(|cc| masked[j * c + cc] * w[cc * d + dd]).sum();
                }
            }
            out
        };
        let keys = proj(&wkm);
        let vals = proj(&wvm);
        let mut lscores = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                lscores[i * p + j] = (0..d)
                    .map(|dd| lq.data()[i * d + dd] * keys[j * d + dd])
                    .sum::<f64>()
                    * scale;
            }
        }
        bf_softmax_rows(&mut lscores, n, p);
        let mut lexpect = vec![0.0; n * d];
        for i in 0..n {
            for dd in 0..d {
                lexpect[i * d + dd] =
                    (0..p).map(|j| lscores[i * p + j] * vals[j * d + dd]).sum();
            }
        }
        assert_close(&tape.value(lattn), &lscores, "local attention map", trial);
        assert_close(&tape.value(lvals), &vals, "local values", trial);
        assert_close(&tape.value(lout), &lexpect, "local attention output", trial);

        // Reweighting by the primary word's attention column.
        let cols = rng.random_range(1..=8);
        let pos = rng.random_range(0..cols);
        let a_local: Vec<f64> = (0..n * p).map(|_| rng.random_range(0.0..1.0)).collect();
        let a_global: Vec<f64> = (0..n * cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let tape = Tape::<f64>::new();
        let rew = reweight_attention(
            &tape,
            tape.leaf(Tensor::new(vec![n, p], a_local.clone()).unwrap()),
            tape.leaf(Tensor::new(vec![n, cols], a_global.clone()).unwrap()),
            pos,
        )
        .unwrap();
        let peak =
            (0..n).map(|i| a_global[i * cols + pos]).fold(f64::NEG_INFINITY, f64::max);
        let rexpect: Vec<f64> = (0..n * p)
            .map(|i| a_local[i] * a_global[(i / p) * cols + pos] / peak)
            .collect();
        assert_close(&tape.value(rew), &rexpect, "reweighted map", trial);

        // Fusion of the two branches.
        let lambda = if trial % 10 == 0 { 0.0 } else { rng.random_range(0.0..2.0) };
        let g: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::<f64>::new();
        let fused = fuse(
            &tape,
            tape.leaf(Tensor::new(vec![n, d], g.clone()).unwrap()),
            tape.leaf(Tensor::new(vec![n, d], l.clone()).unwrap()),
            lambda,
        )
        .unwrap();
        let fexpect: Vec<f64> = g.iter().zip(&l).map(|(gv, lv)| gv + lambda * lv).collect();
        assert_close(&tape.value(fused), &fexpect, "fused output", trial);
    }
    pass(2, "attention, local attention, reweighting, fusion each match scalar brute force over 1000 random instances within 1e-6");
}

#[test]
fn c03_algebraic_identities_hold() {
    let (cfg, model, ps) = generic_tiny_model();
    let src = dataset_sample::<f64>(&cfg, Split::Train, cfg.seed, 0).unwrap();
    let prep = model.prepare(&ps, &src).unwrap();
    let words = model.encode(&ps, &src.image).unwrap();
    let prompt = "a photo of a S*";

    // Zero fusion weight leaves generation bit-identical to running
    // without the local branch at all.
    let mut opts = model.gen_options();
    opts.steps = 3;
    opts.lambda = 0.0;
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    let with_src = model
        .generate(&ps, &words, Some((&src.image, &src.mask)), prompt, &opts, &mut r1)
        .unwrap();
    let without = model.generate(&ps, &words, None, prompt, &opts, &mut r2).unwrap();
    let bitwise = with_src
        .image
        .data()
        .iter()
        .zip(without.image.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    check(bitwise, 3, "lambda = 0 generation must be bit-identical with and without a source");

    // Unit guidance collapses to the conditional branch: the
    // unconditional context cannot influence the trajectory, and equal
    // branches cancel at any scale.
    let mut crng = ChaCha8Rng::seed_from_u64(9);
    let ctx_c = Tensor::<f64>::randn(vec![5, cfg.txt_dim], 1.0, &mut crng);
    let ctx_u = Tensor::<f64>::randn(vec![3, cfg.txt_dim], 1.0, &mut crng);
    let side = cfg.latent_size();
    let run = |cond: &Tensor<f64>, uncond: &Tensor<f64>, s: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        sample(&ps, &model.unet, &model.schedule, cond, uncond, side, 4, s, None, 0.0, &mut rng)
            .unwrap()
    };
    let a = run(&ctx_c, &ctx_u, 1.0);
    let b = run(&ctx_c, &ctx_c, 1.0);
    let c = run(&ctx_c, &ctx_c, 5.0);
    let same = |x: &Tensor<f64>, y: &Tensor<f64>| {
        x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    check(same(&a, &b) && same(&b, &c), 3, "unit-guidance trajectories must be bit-identical");

    // Both training losses decompose exactly into denoising term plus
    // their L1 regularizer.
    let t = 400;
    let mut nrng = ChaCha8Rng::seed_from_u64(17);
    let eps = Tensor::<f64>::randn(prep.z0.shape().to_vec(), 1.0, &mut nrng);
    let tape = Tape::<f64>::new();
    let gp = global_loss(&tape, &ps, &model, &prep, prompt, t, &eps).unwrap();
    let l1: f64 = tape.value(gp.words).data().iter().map(|v| v.abs()).sum();
    let gap = tape.item(gp.loss).unwrap() - tape.item(gp.ldm).unwrap();
    check(
        (gap - cfg.lambda_global * l1).abs() <= 1e-6,
        3,
        &format!("global loss gap {gap} vs lambda * ||v||_1 {}", cfg.lambda_global * l1),
    );
    let tape = Tape::<f64>::new();
    let lp = local_loss(&tape, &ps, &model, &prep, prompt, t, &eps).unwrap();
    let lgap = tape.item(lp.loss).unwrap() - tape.item(lp.ldm).unwrap();
    let vl1 = tape.item(lp.values_l1).unwrap();
    check(
        (lgap - cfg.lambda_local * vl1).abs() <= 1e-6,
        3,
        &format!("local loss gap {lgap} vs lambda * sum ||V||_1 {}", cfg.lambda_local * vl1),
    );

    // Reweighting never raises any attention entry.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let p = rng.random_range(1..=8);
        let cols = rng.random_range(1..=8);
        let pos = rng.random_range(0..cols);
        let a_l: Vec<f64> = (0..n * p).map(|_| rng.random_range(0.0..1.0)).collect();
        let a_g: Vec<f64> = (0..n * cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let tape = Tape::<f64>::new();
        let rew = reweight_attention(
            &tape,
            tape.leaf(Tensor::new(vec![n, p], a_l.clone()).unwrap()),
            tape.leaf(Tensor::new(vec![n, cols], a_g).unwrap()),
            pos,
        )
        .unwrap();
        for (r, o) in tape.value(rew).data().iter().zip(&a_l) {
            check(*r <= o + 1e-9, 3, "reweighted entries must not exceed the original map");
        }
    }
    pass(3, "fusion invisibility, unit guidance, both regularizer decompositions, and reweighting monotonicity all hold");
}

/// Full-scale pipeline trained once and shared by the criteria that need
/// trained weights: encoders, backbone, then both mapping stages at the
/// published defaults.
struct Trained {
    model: Model,
    ps: ParamSet<f32>,
    stage1: Vec<StepStats>,
    stage1_seconds: f64,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let cfg = RunConfig::default();
        let mut ps = ParamSet::<f32>::new();
        let mut model = Model::build(&cfg, &mut ps).unwrap();
        pretrain_encoders(&model, &mut ps, |_, _| {}).unwrap();
        model.stage = "encoders".into();
        train_backbone(&model, &mut ps, |_, _, _| {}).unwrap();
        model.stage = "backbone".into();
        let t0 = Instant::now();
        let stage1 = train_global(&model, &mut ps, |_, _| {}).unwrap();
        let stage1_seconds = t0.elapsed().as_secs_f64();
        model.stage = "global".into();
        train_local(&model, &mut ps, |_, _| {}).unwrap();
        model.stage = "local".into();
        Trained { model, ps, stage1, stage1_seconds }
    })
}

/// Per-concept fidelity sweep shared by the trend criteria: source and
/// prompt fidelity of the encoded concept at three fusion weights, plus
/// the random-embedding null at weight zero, all on paired noise.
struct ComboSweep {
    encoded: [(f64, f64); 3],
    random_ci: f64,
}

const SWEEP_LAMBDAS: [f64; 3] = [0.0, 0.4, 0.8];

static SWEEP: OnceLock<Vec<ComboSweep>> = OnceLock::new();

fn sweep() -> &'static Vec<ComboSweep> {
    SWEEP.get_or_init(|| {
        let tr = trained();
        let cfg = &tr.model.config;
        let prompt = "a photo of a S*";
        heldout_combos(cfg)
            .iter()
            .map(|&combo| {
                let sample = sample_for_combo::<f32>(cfg, combo, cfg.seed, 0).unwrap();
                let words = tr.model.encode(&tr.ps, &sample.image).unwrap();
                let encoded = SWEEP_LAMBDAS.map(|l| {
                    concept_metrics(&tr.model, &tr.ps, combo, &words, l, prompt, cfg.eval_seeds)
                        .unwrap()
                });
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(0x7261_6e64_0000_0000 | combo as u64);
                let null = random_concept(&tr.model, &mut rng);
                let (random_ci, _) =
                    concept_metrics(&tr.model, &tr.ps, combo, &null, 0.0, prompt, cfg.eval_seeds)
                        .unwrap();
                ComboSweep { encoded, random_ci }
            })
            .collect()
    })
}

#[test]
fn c04_stage1_denoising_loss_falls_within_budget() {
    let tr = trained();
    let ldm: Vec<f64> = tr.stage1.iter().map(|s| s.ldm).collect();
    check(ldm.len() >= 100, 4, "stage-1 run too short for a 100-step moving average");
    let ma: Vec<f64> =
        ldm.windows(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    let initial = ma[0];
    let best = ma.iter().cloned().fold(f64::INFINITY, f64::min);
    let last = *ma.last().unwrap();
    check(
        best <= 0.7 * initial,
        4,
        &format!("moving average fell only to {best:.4} from {initial:.4} ({:.3}x)", best / initial),
    );
    check(
        tr.stage1_seconds < 3600.0,
        4,
        &format!("stage-1 run took {:.1} min, budget is 60 min", tr.stage1_seconds / 60.0),
    );
    pass(4, &format!(
        "{} steps on {} samples: 100-step moving average {initial:.4} -> {last:.4} (best {best:.4}, {:.3}x) in {:.1} min",
        ldm.len(),
        tr.model.config.dataset_size,
        best / initial,
        tr.stage1_seconds / 60.0
    ));
}

#[test]
fn c05_encoded_concept_beats_random_embedding() {
    let rows = sweep();
    let wins = rows.iter().filter(|r| r.encoded[0].0 > r.random_ci).count();
    let need = (rows.len() * 4).div_ceil(5);
    check(
        wins >= need,
        5,
        &format!("encoded concept won on {wins}/{} held-out concepts, need {need}", rows.len()),
    );
    pass(5, &format!(
        "encoded concept beats a random embedding on source fidelity for {wins}/{} held-out concepts ({} seeds each)",
        rows.len(),
        trained().model.config.eval_seeds
    ));
}

#[test]
fn c06_local_branch_raises_source_fidelity() {
    let rows = sweep();
    let wins = rows.iter().filter(|r| r.encoded[2].0 > r.encoded[0].0).count();
    let need = (rows.len() * 7).div_ceil(10);
    let n = rows.len() as f64;
    let ct0 = rows.iter().map(|r| r.encoded[0].1).sum::<f64>() / n;
    let ct8 = rows.iter().map(|r| r.encoded[2].1).sum::<f64>() / n;
    check(
        wins >= need,
        6,
        &format!("fusion weight 0.8 beat 0 on {wins}/{} concepts, need {need}", rows.len()),
    );
    check(
        ct0 - ct8 <= 0.05,
        6,
        &format!("prompt fidelity dropped {:.4}, allowed 0.05", ct0 - ct8),
    );
    pass(6, &format!(
        "local branch raised source fidelity on {wins}/{} concepts; prompt fidelity {ct0:.4} -> {ct8:.4}",
        rows.len()
    ));
}

#[test]
fn c07_source_fidelity_grows_with_fusion_weight() {
    let rows = sweep();
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..SWEEP_LAMBDAS.len())
        .map(|i| rows.iter().map(|r| r.encoded[i].0).sum::<f64>() / n)
        .collect();
    let inversions = means.windows(2).filter(|w| w[1] < w[0]).count();
    check(
        inversions <= 1,
        7,
        &format!("mean source fidelity {means:?} has {inversions} inversions across the sweep"),
    );
    pass(7, &format!(
        "mean source fidelity over fusion weights {SWEEP_LAMBDAS:?} is {means:?} ({inversions} inversion)"
    ));
}

#[test]
fn c08_encoding_is_100x_faster_than_optimization() {
    let tr = trained();
    let combos = heldout_combos(&tr.model.config);
    let (enc_ms, base_ms) = benchmark_encoding(&tr.model, &tr.ps, &combos[..1]).unwrap();
    check(
        enc_ms <= base_ms / 100.0,
        8,
        &format!("encode {enc_ms:.2} ms vs {}-step baseline {base_ms:.0} ms", tr.model.config.invert_steps),
    );
    pass(8, &format!(
        "encode {enc_ms:.2} ms vs {}-step optimization baseline {base_ms:.0} ms ({:.0}x)",
        tr.model.config.invert_steps,
        base_ms / enc_ms
    ));
}

#[test]
fn c09_stages_update_only_their_parameter_sets() {
    let cfg = RunConfig::tiny_for_tests();
    let mut ps = ParamSet::<f32>::new();
    let mut model = Model::build(&cfg, &mut ps).unwrap();
    let prepared: Vec<PreparedSample<f32>> = (0..2)
        .map(|i| {
            let s = dataset_sample::<f32>(&cfg, Split::Train, cfg.seed, i).unwrap();
            model.prepare(&ps, &s).unwrap()
        })
        .collect();
    let batch: Vec<&PreparedSample<f32>> = prepared.iter().collect();

    let audit = |ps: &mut ParamSet<f32>,
                     model: &Model,
                     stage1: bool|
     -> (usize, usize) {
        let before = ps.snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut opt = OptimizerState::new(1e-3);
        for _ in 0..10 {
            if stage1 {
                train_global_step(model, ps, &mut opt, &batch, &mut rng).unwrap();
            } else {
                train_local_step(model, ps, &mut opt, &batch, &mut rng).unwrap();
            }
        }
        let mut changed = 0;
        let mut frozen = 0;
        for (name, old) in &before {
            let now = ps.get(ps.lookup(name).unwrap()).data();
            let moved = now.iter().zip(old).any(|(a, b)| a.to_bits() != b.to_bits());
            let trainable = if stage1 { stage1_param(name) } else { stage2_param(name) };
            if trainable {
                changed += moved as usize;
            } else {
                check(
                    !moved,
                    9,
                    &format!("`{name}` moved during stage {}", if stage1 { 1 } else { 2 }),
                );
                frozen += 1;
            }
        }
        (changed, frozen)
    };

    let (c1, f1) = audit(&mut ps, &model, true);
    check(c1 > 0, 9, "stage 1 updated no parameters at all");
    model.stage = "global".into();
    let (c2, f2) = audit(&mut ps, &model, false);
    check(c2 > 0, 9, "stage 2 updated no parameters at all");
    pass(9, &format!(
        "over 10 steps each: stage 1 moved {c1} mapping/projection tensors ({f1} others bitwise fixed), stage 2 moved {c2} ({f2} fixed)"
    ));
}

fn run_cli(cfg_path: &Path, args: &[&str]) {
    let mut argv = vec!["elite-lab".to_string(), "--config".into(), cfg_path.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let cli = Cli::try_parse_from(argv).unwrap();
    run(cli).unwrap_or_else(|e| panic!("FAIL criterion 10: `{}` failed: {e}", args.join(" ")));
}

fn dir_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn c10_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out: PathBuf = dir.path().join("run");
    let mut cfg = RunConfig::tiny_for_tests();
    cfg.seed = 3;
    cfg.out_dir = out.display().to_string();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let run_all = || {
        for stage in
            ["gen-data", "pretrain-encoders", "train-autoencoder", "train-global", "train-local"]
        {
            run_cli(&cfg_path, &[stage]);
        }
        let heldout = out.join("data").join("heldout");
        let image = std::fs::read_dir(&heldout)
            .unwrap()
            .filter_map(|e| {
                let p = e.unwrap().path();
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                (name.ends_with(".png") && !name.contains("_mask")).then_some(p)
            })
            .min()
            .expect("gen-data wrote held-out images");
        let image = image.display().to_string();
        run_cli(&cfg_path, &["encode", "--image", &image]);
        run_cli(&cfg_path, &["generate", "--image", &image, "--prompt", "a photo of a S*"]);
    };

    run_all();
    let first = dir_bytes(&out);
    std::fs::remove_dir_all(&out).unwrap();
    run_all();
    let second = dir_bytes(&out);

    check(!first.is_empty(), 10, "first pipeline run produced no artifacts");
    let names_first: Vec<&String> = first.keys().collect();
    let names_second: Vec<&String> = second.keys().collect();
    check(
        names_first == names_second,
        10,
        &format!("artifact lists differ: {names_first:?} vs {names_second:?}"),
    );
    for (name, bytes) in &first {
        check(
            bytes == &second[name],
            10,
            &format!("`{name}` differs between the two runs"),
        );
    }
    pass(10, &format!(
        "{} artifacts (checkpoints, logs, dataset, concept JSON, generated PNG) byte-identical across two serial runs",
        first.len()
    ));
}
