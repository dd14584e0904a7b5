//! Embedding-cosine quality metrics (source fidelity, prompt fidelity, and
//! a second independent embedder), an optimization-based inversion baseline
//! for speed comparisons, and a serializable evaluation report over the
//! held-out concepts.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{category_name, category_noun, heldout_combos, sample_for_combo};
use crate::diffcore::params::ParamSet;
use crate::diffcore::tape::Tape;
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::ldm::unet::ldm_loss_at;
use crate::model::Model;
use crate::nn::Linear;
use crate::textenc::{instantiate, sample_template, InjectMode, WordEmbeddingSet, PLACEHOLDER};

/// Cosine similarity of two equally sized tensors, flattened.
pub fn cosine<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(Error::Shape(format!(
            "cosine over {} vs {} elements",
            a.numel(),
            b.numel()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64(), y.to_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero-norm embedding".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Source fidelity: cosine of the primary image embedder's pooled features
/// of the two images.
pub fn clip_i<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    generated: &Tensor<S>,
    reference: &Tensor<S>,
) -> Result<f64> {
    let a = model.image_encoder.embed(ps, generated)?;
    let b = model.image_encoder.embed(ps, reference)?;
    cosine(&a, &b)
}

/// Source fidelity under the second, independently trained embedder.
pub fn dino_i<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    generated: &Tensor<S>,
    reference: &Tensor<S>,
) -> Result<f64> {
    let a = model.dino_encoder.embed(ps, generated)?;
    let b = model.dino_encoder.embed(ps, reference)?;
    cosine(&a, &b)
}

fn project<S: Scalar>(ps: &ParamSet<S>, head: &Linear, pooled: &Tensor<S>) -> Result<Tensor<S>> {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, pooled.numel()], pooled.data().to_vec())?);
    let y = head.forward(&tape, ps, x)?;
    Ok(tape.value(y))
}

/// Prompt fidelity: the placeholder is replaced by the concept's real
/// category text, both sides are projected into the joint metric space,
/// and their cosine is returned.
pub fn clip_t<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    generated: &Tensor<S>,
    prompt: &str,
    category_text: &str,
) -> Result<f64> {
    if !prompt.contains(PLACEHOLDER) {
        return Err(Error::Contract(format!(
            "prompt fidelity needs a {PLACEHOLDER} slot to substitute: {prompt}"
        )));
    }
    let text = instantiate(prompt, category_text);
    let img = project(ps, &model.joint_img, &model.image_encoder.embed(ps, generated)?)?;
    let txt = project(ps, &model.joint_txt, &model.text_encoder.pooled(ps, &text)?)?;
    cosine(&img, &txt)
}

/// A generation prompt for evaluation; edit prompts recompose the concept
/// and run at the editing fusion weight.
#[derive(Debug, Clone, Copy)]
pub struct PromptSpec {
    pub text: &'static str,
    pub edit: bool,
}

/// The fixed ten-prompt evaluation set: eight straight generation prompts
/// and two editing prompts, all built from vocabulary words.
pub fn eval_prompts() -> &'static [PromptSpec; 10] {
    &[
        PromptSpec { text: "a photo of a S*", edit: false },
        PromptSpec { text: "a good photo of the S*", edit: false },
        PromptSpec { text: "a close-up photo of a S*", edit: false },
        PromptSpec { text: "a rendition of the S*", edit: false },
        PromptSpec { text: "a dark photo of the S*", edit: false },
        PromptSpec { text: "a bright photo of the S*", edit: false },
        PromptSpec { text: "a cropped photo of the S*", edit: false },
        PromptSpec { text: "a photo of one S*", edit: false },
        PromptSpec { text: "a photo of a tiny S* on a dark background", edit: true },
        PromptSpec { text: "a photo of a huge S* with a clean background", edit: true },
    ]
}

/// A concept of the same shape as an encoded one but with random word
/// embeddings at token-table scale, the null model for fidelity checks.
pub fn random_concept<S: Scalar>(model: &Model, rng: &mut ChaCha8Rng) -> WordEmbeddingSet<S> {
    let n = model.config.img_taps.len();
    WordEmbeddingSet {
        words: Tensor::randn(vec![n, model.config.txt_dim], 0.02, rng),
        primary_index: 0,
        tap_layer_ids: model.config.img_taps.clone(),
    }
}

/// Result of optimizing a single word embedding against the denoising
/// objective.
#[derive(Debug, Clone)]
pub struct InversionOutcome<S: Scalar> {
    pub words: WordEmbeddingSet<S>,
    pub seconds: f64,
    pub losses: Vec<f64>,
}

/// Optimization-based inversion baseline: gradient descent on one word
/// embedding, spliced into sampled templates, against the denoising loss
/// on a single concept image. Initialized from the concept's category
/// noun; zero steps return the initialization unchanged.
pub fn invert_baseline<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    image: &Tensor<S>,
    combo: usize,
    steps: usize,
) -> Result<InversionOutcome<S>> {
    let cfg = &model.config;
    let te = &model.text_encoder;
    let id = te.vocab.id(category_noun(combo)?);
    let d = te.dim;
    let table = ps.get(te.embed);
    let mut word = Tensor::new(vec![1, d], table.data()[id * d..(id + 1) * d].to_vec())?;

    let start = Instant::now();
    let z0 = model.autoencoder.encode_latent(ps, image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x696e_7665_7274_0000 | combo as u64);
    let lr = S::from_f64(cfg.invert_lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let tape = Tape::with_trainable(&[]);
        let wv = tape.leaf_grad(word.clone());
        let tok = te.tokenize(sample_template(&mut rng))?;
        let embedded = te.inject_concept(&tape, ps, &tok, Some(wv), InjectMode::PrimaryOnly)?;
        let ctx = te.encode_text(&tape, ps, embedded)?;
        let t = rng.random_range(1..=model.schedule.timesteps());
        let eps = Tensor::randn(z0.shape().to_vec(), 1.0, &mut rng);
        let loss =
            ldm_loss_at(&tape, ps, &model.unet, &model.schedule, &z0, t, &eps, ctx, None, 0.0)?;
        let value = tape.item(loss)?.to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("inversion loss became non-finite: {value}")));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        if let Some(g) = grads.wrt(wv) {
            for (w, &gi) in word.data_mut().iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(InversionOutcome {
        words: WordEmbeddingSet {
            words: word,
            primary_index: 0,
            tap_layer_ids: vec![cfg.img_taps[0]],
        },
        seconds,
        losses,
    })
}

/// Mean source and prompt fidelity of one concept over several generation
/// seeds at a fixed fusion weight. Seeds reuse the same noise across
/// different weights so sweeps compare like with like.
pub fn concept_metrics<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    combo: usize,
    words: &WordEmbeddingSet<S>,
    lambda: f64,
    prompt: &str,
    seeds: usize,
) -> Result<(f64, f64)> {
    if seeds == 0 {
        return Err(Error::Contract("concept metrics over zero seeds".into()));
    }
    let cfg = &model.config;
    let sample = sample_for_combo::<S>(cfg, combo, cfg.seed, 0)?;
    let name = category_name(combo)?;
    let mut opts = model.gen_options();
    opts.steps = cfg.eval_sample_steps;
    opts.lambda = lambda;
    let (mut ci, mut ct) = (0.0, 0.0);
    for si in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x7377_6565_7000_0000 | ((combo as u64) << 8) | si as u64);
        let source = (lambda > 0.0).then_some((&sample.image, &sample.mask));
        let gen = model.generate(ps, words, source, prompt, &opts, &mut rng)?;
        ci += clip_i(model, ps, &gen.image, &sample.image)?;
        ct += clip_t(model, ps, &gen.image, prompt, &name)?;
    }
    Ok((ci / seeds as f64, ct / seeds as f64))
}

/// Wall-clock seconds reported for full-scale systems of each family,
/// recorded for context next to the measured desk-scale times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceSeconds {
    pub word_optimization: f64,
    pub model_finetune: f64,
    pub attention_finetune: f64,
    pub forward_encoder: f64,
}

impl Default for ReferenceSeconds {
    fn default() -> Self {
        ReferenceSeconds {
            word_optimization: 3000.0,
            model_finetune: 900.0,
            attention_finetune: 360.0,
            forward_encoder: 0.05,
        }
    }
}

/// One generated image's scores, the unit of the evaluation log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub combo: usize,
    pub category: String,
    pub prompt: String,
    pub edit: bool,
    pub lambda: f64,
    pub seed_index: usize,
    pub clip_i: f64,
    pub clip_t: f64,
    pub dino_i: f64,
}

/// Aggregate metrics over the held-out concepts plus the encoding-time
/// benchmark against the optimization baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_i: f64,
    pub clip_t: f64,
    pub dino_i: f64,
    pub encode_ms: f64,
    pub baseline_ms: f64,
    pub speedup: f64,
    pub reference_seconds: ReferenceSeconds,
    pub records: Vec<ConceptRecord>,
}

/// Mean wall-clock milliseconds of a single-image encode and of a full
/// inversion-baseline run over the given concepts.
pub fn benchmark_encoding<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    combos: &[usize],
) -> Result<(f64, f64)> {
    if combos.is_empty() {
        return Err(Error::Contract("benchmark over zero concepts".into()));
    }
    let cfg = &model.config;
    let (mut enc, mut base) = (0.0, 0.0);
    for &combo in combos {
        let sample = sample_for_combo::<S>(cfg, combo, cfg.seed, 0)?;
        let t0 = Instant::now();
        let _ = model.encode(ps, &sample.image)?;
        enc += t0.elapsed().as_secs_f64() * 1e3;
        base += invert_baseline(model, ps, &sample.image, combo, cfg.invert_steps)?.seconds * 1e3;
    }
    Ok((enc / combos.len() as f64, base / combos.len() as f64))
}

/// Scores every held-out concept against the ten-prompt set, up to the
/// configured generation budget, then benchmarks encoding time on the
/// first concept. `on_record` sees each record as it is produced, for
/// streaming logs.
pub fn evaluate<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    mut on_record: impl FnMut(&ConceptRecord),
) -> Result<MetricReport> {
    let cfg = &model.config;
    if model.stage != "global" && model.stage != "local" {
        return Err(Error::Config(format!(
            "evaluation requires a trained mapping, model is at stage '{}'",
            model.stage
        )));
    }
    let combos = heldout_combos(cfg);
    if combos.is_empty() {
        return Err(Error::Config("no held-out categories to evaluate".into()));
    }
    let mut records = Vec::new();
    'outer: for &combo in &combos {
        let sample = sample_for_combo::<S>(cfg, combo, cfg.seed, 0)?;
        let words = model.encode(ps, &sample.image)?;
        let name = category_name(combo)?;
        for (pi, p) in eval_prompts().iter().enumerate() {
            for si in 0..cfg.eval_seeds.max(1) {
                if records.len() >= cfg.eval_budget {
                    break 'outer;
                }
                let lambda = if p.edit { cfg.lambda_edit } else { cfg.lambda_gen };
                let mut opts = model.gen_options();
                opts.steps = cfg.eval_sample_steps;
                opts.lambda = lambda;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(
                    0x6576_616c_0000_0000 | ((combo as u64) << 16) | ((pi as u64) << 8) | si as u64,
                );
                let source = (lambda > 0.0).then_some((&sample.image, &sample.mask));
                let gen = model.generate(ps, &words, source, p.text, &opts, &mut rng)?;
                let record = ConceptRecord {
                    combo,
                    category: name.clone(),
                    prompt: p.text.to_string(),
                    edit: p.edit,
                    lambda,
                    seed_index: si,
                    clip_i: clip_i(model, ps, &gen.image, &sample.image)?,
                    clip_t: clip_t(model, ps, &gen.image, p.text, &name)?,
                    dino_i: dino_i(model, ps, &gen.image, &sample.image)?,
                };
                on_record(&record);
                records.push(record);
            }
        }
    }
    let (encode_ms, baseline_ms) = benchmark_encoding(model, ps, &combos[..1])?;
    let n = records.len() as f64;
    Ok(MetricReport {
        clip_i: records.iter().map(|r| r.clip_i).sum::<f64>() / n,
        clip_t: records.iter().map(|r| r.clip_t).sum::<f64>() / n,
        dino_i: records.iter().map(|r| r.dino_i).sum::<f64>() / n,
        encode_ms,
        baseline_ms,
        speedup: baseline_ms / encode_ms,
        reference_seconds: ReferenceSeconds::default(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::RunConfig;

    fn tiny_model() -> (ParamSet<f32>, Model) {
        let cfg = RunConfig::tiny_for_tests();
        let mut ps = ParamSet::new();
        let model = Model::build(&cfg, &mut ps).unwrap();
        (ps, model)
    }

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img: Tensor<f32> = Tensor::randn(vec![3, 16, 16], 0.25, &mut rng);
        for v in img.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        img
    }

    #[test]
    fn self_similarity_is_one() {
        let (ps, model) = tiny_model();
        let img = image(1);
        assert!((clip_i(&model, &ps, &img, &img).unwrap() - 1.0).abs() < 1e-6);
        assert!((dino_i(&model, &ps, &img, &img).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn image_metrics_are_symmetric_and_bounded() {
        let (ps, model) = tiny_model();
        let (a, b) = (image(1), image(2));
        let ab = clip_i(&model, &ps, &a, &b).unwrap();
        let ba = clip_i(&model, &ps, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));
        let d = dino_i(&model, &ps, &a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&d));
        assert!((ab - d).abs() > 1e-12, "the two embedders coincide");
    }

    #[test]
    fn prompt_fidelity_substitutes_the_placeholder() {
        let (ps, model) = tiny_model();
        let img = image(3);
        let v = clip_t(&model, &ps, &img, "a photo of a S*", "star").unwrap();
        assert!((-1.0..=1.0).contains(&v));
        assert!(matches!(
            clip_t(&model, &ps, &img, "a photo of a shape", "star"),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn eval_prompts_all_carry_the_placeholder() {
        let prompts = eval_prompts();
        assert_eq!(prompts.len(), 10);
        assert_eq!(prompts.iter().filter(|p| p.edit).count(), 2);
        let (ps, model) = tiny_model();
        let _ = ps;
        for p in prompts {
            let tok = model.text_encoder.tokenize(p.text).unwrap();
            assert!(tok.placeholder_position.is_some(), "{} lacks the slot", p.text);
            assert!(
                !tok.ids.contains(&crate::textenc::UNK),
                "{} has out-of-vocabulary words",
                p.text
            );
        }
    }

    #[test]
    fn zero_step_inversion_returns_the_noun_embedding() {
        let (ps, model) = tiny_model();
        let img = image(4);
        let out = invert_baseline(&model, &ps, &img, 0, 0).unwrap();
        let id = model.text_encoder.vocab.id(category_noun(0).unwrap());
        let d = model.text_encoder.dim;
        let table = ps.get(model.text_encoder.embed);
        assert_eq!(out.words.words.data(), &table.data()[id * d..(id + 1) * d]);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn inversion_steps_change_the_word_and_leave_parameters_alone() {
        let (ps, model) = tiny_model();
        let before = ps.snapshot();
        let img = image(5);
        let none = invert_baseline(&model, &ps, &img, 0, 0).unwrap();
        let out = invert_baseline(&model, &ps, &img, 0, 3).unwrap();
        assert_eq!(out.losses.len(), 3);
        assert!(out.words.words.data() != none.words.words.data(), "word never moved");
        assert!(out.seconds >= 0.0);
        for (name, old) in &before {
            let r = ps.lookup(name).unwrap();
            assert!(old.iter().zip(ps.get(r).data()).all(|(a, b)| a == b), "{name} changed");
        }
    }

    #[test]
    fn evaluation_respects_budget_and_bounds() {
        let (mut ps, mut model) = tiny_model();
        assert!(matches!(evaluate(&model, &ps, |_| {}), Err(Error::Config(_))));
        model.stage = "global".into();
        let _ = &mut ps;
        let mut seen = 0usize;
        let report = evaluate(&model, &ps, |_| seen += 1).unwrap();
        assert_eq!(report.records.len(), model.config.eval_budget);
        assert_eq!(seen, report.records.len());
        for r in &report.records {
            assert!((-1.0..=1.0).contains(&r.clip_i));
            assert!((-1.0..=1.0).contains(&r.clip_t));
            assert!((-1.0..=1.0).contains(&r.dino_i));
        }
        assert!(report.encode_ms >= 0.0 && report.baseline_ms >= 0.0);
        assert!(report.speedup > 0.0);
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.records.len(), report.records.len());
    }

    #[test]
    fn concept_metrics_average_over_seeds() {
        let (ps, model) = tiny_model();
        let img = image(6);
        let words = model.encode(&ps, &img).unwrap();
        let (ci, ct) = concept_metrics(&model, &ps, 0, &words, 0.0, "a photo of a S*", 2).unwrap();
        assert!((-1.0..=1.0).contains(&ci));
        assert!((-1.0..=1.0).contains(&ct));
    }
}
