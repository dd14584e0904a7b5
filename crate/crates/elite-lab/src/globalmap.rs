//! Global mapping network: per-tap MLP heads that project pooled
//! hierarchical image features into word embeddings, trained with the
//! regularized denoising loss while the cross-attention key/value
//! projections for text are finetuned alongside.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::optim::OptimizerState;
use crate::diffcore::params::ParamSet;
use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imageenc::TapFeatures;
use crate::ldm::unet::ldm_loss_at;
use crate::model::{Model, PreparedSample, StepStats};
use crate::nn::Linear;
use crate::textenc::{sample_template, InjectMode, WordEmbeddingSet};

/// One three-layer projection head: pooled tap features to a word vector.
/// The final layer starts at zero so training begins from v = 0 and the
/// conditioned model initially matches the unconditioned one.
#[derive(Debug, Clone)]
pub struct MlpHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl MlpHead {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let hidden = 2 * in_dim;
        Ok(MlpHead {
            fc1: Linear::new(ps, rng, &format!("{prefix}.fc1"), in_dim, hidden, true)?,
            fc2: Linear::new(ps, rng, &format!("{prefix}.fc2"), hidden, hidden, true)?,
            fc3: Linear::new_zeroed(ps, &format!("{prefix}.fc3"), hidden, out_dim, true)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let h = tape.gelu(self.fc1.forward(tape, ps, x)?);
        let h = tape.gelu(self.fc2.forward(tape, ps, h)?);
        self.fc3.forward(tape, ps, h)
    }
}

/// The full global mapper: one head per tap, head 0 bound to the deepest
/// tap and producing the primary word w0.
#[derive(Debug, Clone)]
pub struct GlobalMapper {
    pub heads: Vec<MlpHead>,
    pub feature_dim: usize,
    pub word_dim: usize,
}

impl GlobalMapper {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        num_taps: usize,
        feature_dim: usize,
        word_dim: usize,
    ) -> Result<Self> {
        let heads = (0..num_taps)
            .map(|i| MlpHead::new(ps, rng, &format!("{prefix}.head{i}"), feature_dim, word_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(GlobalMapper { heads, feature_dim, word_dim })
    }

    pub fn num_words(&self) -> usize {
        self.heads.len()
    }
}

/// Maps tapped features to the `[n, d]` word matrix on the tape; row i
/// comes from tap i's pooled features through head i, so row 0 is the
/// deepest tap's word.
pub fn map_global<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    mapper: &GlobalMapper,
    taps: &TapFeatures<S>,
) -> Result<Var> {
    if taps.pooled.len() != mapper.heads.len() {
        return Err(Error::Config(format!(
            "{} taps but {} mapping heads",
            taps.pooled.len(),
            mapper.heads.len()
        )));
    }
    let mut rows = Vec::with_capacity(mapper.heads.len());
    for (head, pooled) in mapper.heads.iter().zip(&taps.pooled) {
        if pooled.numel() != mapper.feature_dim {
            return Err(Error::Shape(format!(
                "pooled tap has {} features, heads expect {}",
                pooled.numel(),
                mapper.feature_dim
            )));
        }
        let x = tape.leaf(pooled.reshaped(vec![1, mapper.feature_dim])?);
        rows.push(head.forward(tape, ps, x)?);
    }
    tape.concat0(&rows)
}

/// Frozen concept encoding: tapped features through the mapper, off-tape.
pub fn encode_concept<S: Scalar>(
    ps: &ParamSet<S>,
    mapper: &GlobalMapper,
    taps: &TapFeatures<S>,
) -> Result<WordEmbeddingSet<S>> {
    let tape = Tape::new();
    let v = map_global(&tape, ps, mapper, taps)?;
    Ok(WordEmbeddingSet {
        words: tape.value(v),
        primary_index: 0,
        tap_layer_ids: taps.tap_layer_ids.clone(),
    })
}

/// The pieces of the stage-1 objective for one sample at a fixed
/// (template, timestep, noise) triple.
pub struct GlobalLossParts {
    pub loss: Var,
    pub ldm: Var,
    pub words: Var,
}

/// L_global = L_LDM + λ_global · ‖v‖₁ with the condition built by
/// splicing all words into a training template. When the auxiliary-only
/// flag is set the penalty skips the primary row.
pub fn global_loss<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    model: &Model,
    prep: &PreparedSample<S>,
    template: &str,
    t: usize,
    eps: &Tensor<S>,
) -> Result<GlobalLossParts> {
    let cfg = &model.config;
    if cfg.lambda_global < 0.0 {
        return Err(Error::Config(format!(
            "lambda_global must be nonnegative, got {}",
            cfg.lambda_global
        )));
    }
    let words = map_global(tape, ps, &model.global_mapper, &prep.taps)?;

    let tok = model.text_encoder.tokenize(template)?;
    let embedded =
        model.text_encoder.inject_concept(tape, ps, &tok, Some(words), InjectMode::Full)?;
    let ctx = model.text_encoder.encode_text(tape, ps, embedded)?;

    let ldm =
        ldm_loss_at(tape, ps, &model.unet, &model.schedule, &prep.z0, t, eps, ctx, None, 0.0)?;

    let reg_target = if cfg.reg_aux_only {
        let n = tape.shape(words)[0];
        tape.slice_rows(words, 1, n - 1)?
    } else {
        words
    };
    let reg = tape.l1_all(reg_target);
    let loss = tape.add(ldm, tape.scale(reg, S::from_f64(cfg.lambda_global)))?;
    Ok(GlobalLossParts { loss, ldm, words })
}

/// Predicate selecting exactly the stage-1 trainable parameters: the
/// mapping heads and the text-side key/value projections of every
/// cross-attention block.
pub fn stage1_param(name: &str) -> bool {
    name.starts_with("globalmap.")
        || (name.starts_with("unet.cross") && (name.contains(".kg.") || name.contains(".vg.")))
}

/// One optimizer step of stage-1 training on a batch of prepared samples;
/// returns the batch statistics. Only the stage-1 parameter set receives
/// updates.
pub fn train_global_step<S: Scalar>(
    model: &Model,
    ps: &mut ParamSet<S>,
    opt: &mut OptimizerState<S>,
    batch: &[&PreparedSample<S>],
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let refs = ps.refs_matching(stage1_param);
    let tape = Tape::with_trainable(&refs);
    let mut total: Option<Var> = None;
    let mut total_ldm: Option<Var> = None;
    for prep in batch {
        let template = sample_template(rng);
        let t = rand::Rng::random_range(rng, 1..=model.schedule.timesteps());
        let latent_shape =
            vec![model.unet.latent_channels, model.config.latent_size(), model.config.latent_size()];
        let eps = Tensor::<S>::randn(latent_shape, 1.0, rng);
        let parts = global_loss(&tape, ps, model, prep, template, t, &eps)?;
        total = Some(match total {
            None => parts.loss,
            Some(acc) => tape.add(acc, parts.loss)?,
        });
        total_ldm = Some(match total_ldm {
            None => parts.ldm,
            Some(acc) => tape.add(acc, parts.ldm)?,
        });
    }
    let inv = S::from_f64(1.0 / batch.len() as f64);
    let loss = tape.scale(total.expect("nonempty batch"), inv);
    let ldm = tape.scale(total_ldm.expect("nonempty batch"), inv);
    let value = tape.item(loss)?.to_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("stage-1 loss became non-finite: {value}")));
    }
    let stats = StepStats { loss: value, ldm: tape.item(ldm)?.to_f64() };
    let grads = tape.backward(loss)?;
    grads.apply_to_params(&tape, ps)?;
    opt.adam_step(ps, &refs)?;
    Ok(stats)
}

/// Full stage-1 run: prepares the dataset once (the backbone is frozen),
/// then cycles batches for the configured number of steps. Requires a
/// pretrained backbone. `on_step` sees every step's statistics.
pub fn train_global<S: Scalar>(
    model: &Model,
    ps: &mut ParamSet<S>,
    mut on_step: impl FnMut(usize, StepStats),
) -> Result<Vec<StepStats>> {
    let cfg = &model.config;
    if model.stage != "backbone" && model.stage != "global" {
        return Err(Error::Config(format!(
            "stage-1 training requires a pretrained backbone, model is at stage '{}'",
            model.stage
        )));
    }
    let prepared = model.prepare_dataset(ps, cfg.dataset_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7374_6167_6531_0000);
    let mut opt = OptimizerState::new(cfg.stage1_lr);
    let mut stats = Vec::with_capacity(cfg.stage1_steps);
    for step in 0..cfg.stage1_steps {
        let batch: Vec<&PreparedSample<S>> = (0..cfg.stage1_batch)
            .map(|i| &prepared[(step * cfg.stage1_batch + i) % prepared.len()])
            .collect();
        let s = train_global_step(model, ps, &mut opt, &batch, &mut rng)?;
        on_step(step, s);
        stats.push(s);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::RunConfig;
    use rand::SeedableRng;

    fn tiny_model() -> (ParamSet<f64>, Model) {
        let cfg = RunConfig::tiny_for_tests();
        let mut ps = ParamSet::new();
        let model = Model::build(&cfg, &mut ps).unwrap();
        (ps, model)
    }

    #[test]
    fn map_global_shapes_words_per_tap_with_deepest_first() {
        let (ps, model) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f64>::rand_uniform(
            vec![3, model.config.image_size, model.config.image_size],
            0.0,
            1.0,
            &mut rng,
        );
        let taps = model.tap_features(&ps, &img).unwrap();
        let tape = Tape::new();
        let v = map_global(&tape, &ps, &model.global_mapper, &taps).unwrap();
        assert_eq!(
            tape.shape(v),
            vec![model.config.img_taps.len(), model.config.txt_dim]
        );
        assert_eq!(taps.tap_layer_ids[0], model.config.img_taps[0]);
    }

    #[test]
    fn zero_final_layer_starts_words_at_zero() {
        let (ps, model) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f64>::rand_uniform(
            vec![3, model.config.image_size, model.config.image_size],
            0.0,
            1.0,
            &mut rng,
        );
        let taps = model.tap_features(&ps, &img).unwrap();
        let set = encode_concept(&ps, &model.global_mapper, &taps).unwrap();
        assert!(set.words.data().iter().all(|&v| v == 0.0));
        assert_eq!(set.primary_index, 0);
    }

    #[test]
    fn tap_head_mismatch_is_a_config_error() {
        let (ps, model) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f64>::rand_uniform(
            vec![3, model.config.image_size, model.config.image_size],
            0.0,
            1.0,
            &mut rng,
        );
        let mut taps = model.tap_features(&ps, &img).unwrap();
        taps.pooled.pop();
        let tape = Tape::new();
        assert!(matches!(
            map_global(&tape, &ps, &model.global_mapper, &taps),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn regularizer_identity_holds_exactly() {
        let (mut ps, model) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for name in ["globalmap.head0.fc3.w", "globalmap.head1.fc3.w"] {
            let r = ps.lookup(name).unwrap();
            let t = ps.get(r).clone();
            let fresh = Tensor::<f64>::randn(t.shape().to_vec(), 0.05, &mut rng);
            ps.get_mut(r).data_mut().copy_from_slice(fresh.data());
        }
        let sample = crate::data::dataset_sample::<f64>(
            &model.config,
            crate::data::Split::Train,
            model.config.seed,
            0,
        )
        .unwrap();
        let prep = model.prepare(&ps, &sample).unwrap();
        let tape = Tape::new();
        let latent = model.config.latent_size();
        let eps =
            Tensor::<f64>::randn(vec![model.unet.latent_channels, latent, latent], 1.0, &mut rng);
        let parts = global_loss(&tape, &ps, &model, &prep, "a photo of a S*", 7, &eps).unwrap();
        let l1: f64 = tape.value(parts.words).data().iter().map(|v| v.abs()).sum();
        let gap = tape.item(parts.loss).unwrap() - tape.item(parts.ldm).unwrap();
        assert!((gap - model.config.lambda_global * l1).abs() < 1e-12);
        assert!(l1 > 0.0);
    }

    #[test]
    fn stage1_step_updates_only_the_stage1_set() {
        let (mut ps, model) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<_> = (0..2)
            .map(|i| {
                let s = crate::data::dataset_sample::<f64>(
                    &model.config,
                    crate::data::Split::Train,
                    model.config.seed,
                    i,
                )
                .unwrap();
                model.prepare(&ps, &s).unwrap()
            })
            .collect();
        let refs: Vec<&_> = batch.iter().collect();
        let before = ps.snapshot();
        let mut opt = OptimizerState::new(1e-3);
        let stats = train_global_step(&model, &mut ps, &mut opt, &refs, &mut rng).unwrap();
        assert!(stats.loss.is_finite());
        assert!(stats.ldm.is_finite());
        let mut changed = Vec::new();
        for (name, old) in &before {
            let r = ps.lookup(name).unwrap();
            let now = ps.get(r).data();
            let same = old.iter().zip(now).all(|(a, b)| a == b);
            if !same {
                changed.push(name.clone());
            }
            if !stage1_param(name) {
                assert!(same, "frozen parameter {name} changed");
            }
        }
        assert!(changed.iter().any(|n| n.starts_with("globalmap.")));
        assert!(changed.iter().any(|n| n.contains(".kg.") || n.contains(".vg.")));
    }
}
