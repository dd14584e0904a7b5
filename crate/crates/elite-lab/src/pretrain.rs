//! Backbone pretraining, run before the two mapping stages: contrastive
//! image/text encoder alignment with category-classification heads, then
//! latent-autoencoder reconstruction, latent-statistics fitting, and
//! denoiser training on true-category captions with caption dropout.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{category_name, dataset_sample, ConceptSample, Split};
use crate::diffcore::optim::OptimizerState;
use crate::diffcore::params::ParamSet;
use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imageenc::ImageEncoder;
use crate::ldm::unet::ldm_loss_at;
use crate::model::Model;
use crate::textenc::{instantiate, sample_template, InjectMode, TextEncoder, TokenizedPrompt};

const TEMPERATURE: f64 = 0.1;

/// Parameters updated by encoder pretraining: both image encoders, the
/// text encoder, the joint projections, and the classification heads.
pub fn pretrain_param(name: &str) -> bool {
    ["imgenc.", "dino.", "txtenc.", "joint.", "pretrain."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Autoencoder weights, excluding the programmatically fitted latent
/// statistics.
pub fn vae_param(name: &str) -> bool {
    name.starts_with("vae.") && !name.ends_with("latent_mean") && !name.ends_with("latent_std")
}

/// Denoiser weights, including every cross-attention projection.
pub fn unet_param(name: &str) -> bool {
    name.starts_with("unet.")
}

fn train_batch<S: Scalar>(
    model: &Model,
    step: usize,
    batch: usize,
) -> Result<Vec<ConceptSample<S>>> {
    (0..batch)
        .map(|i| dataset_sample(&model.config, Split::Train, model.config.seed, step * batch + i))
        .collect()
}

/// Stacks pooled deepest-block embeddings of a batch into `[B, c]`, on
/// the tape so the encoder receives gradients.
fn embed_images<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    enc: &ImageEncoder,
    images: &[&Tensor<S>],
) -> Result<Var> {
    let deepest = enc.blocks.len();
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let taps = enc.forward_taps(tape, ps, img, &[deepest])?;
        let pooled = tape.mean_rows(taps[0])?;
        rows.push(tape.reshape(pooled, vec![1, enc.dim])?);
    }
    tape.concat0(&rows)
}

/// Stacks mean-pooled caption features into `[B, d]`, on the tape.
fn embed_texts<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    te: &TextEncoder,
    texts: &[String],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(texts.len());
    for text in texts {
        let tok = te.tokenize(text)?;
        let embedded = te.inject_concept(tape, ps, &tok, None, InjectMode::PrimaryOnly)?;
        let feats = te.encode_text(tape, ps, embedded)?;
        let pooled = tape.mean_rows(feats)?;
        rows.push(tape.reshape(pooled, vec![1, te.dim])?);
    }
    tape.concat0(&rows)
}

/// Symmetric in-batch contrastive loss between row-normalized embedding
/// matrices: matched rows are positives, every other pairing a negative.
fn info_nce<S: Scalar>(tape: &Tape<S>, a: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(a);
    if shape != tape.shape(b) {
        return Err(Error::Shape(format!(
            "contrastive embeddings differ in shape: {:?} vs {:?}",
            shape,
            tape.shape(b)
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let eps = S::from_f64(1e-6);
    let an = tape.row_norm(a, eps)?;
    let bn = tape.row_norm(b, eps)?;
    let sim = tape.matmul(an, tape.transpose(bn)?)?;
    let logits = tape.scale(sim, S::from_f64(1.0 / (cols as f64 * TEMPERATURE)));
    let ids: Vec<usize> = (0..rows).collect();
    let fwd = tape.gather_elems(tape.log_softmax_lastdim(logits)?, &ids)?;
    let bwd = tape.gather_elems(tape.log_softmax_lastdim(tape.transpose(logits)?)?, &ids)?;
    let both = tape.add(tape.mean_all(fwd)?, tape.mean_all(bwd)?)?;
    Ok(tape.scale(tape.neg(both), S::from_f64(0.5)))
}

/// Mean negative log-likelihood of the labeled classes.
fn cross_entropy<S: Scalar>(tape: &Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.gather_elems(tape.log_softmax_lastdim(logits)?, labels)?;
    Ok(tape.neg(tape.mean_all(picked)?))
}

/// Trains both image encoders, the text encoder, the joint projections
/// and the classification heads so that categories separate in embedding
/// space and captions align with their images.
pub fn pretrain_encoders<S: Scalar>(
    model: &Model,
    ps: &mut ParamSet<S>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let refs = ps.refs_matching(pretrain_param);
    let mut opt = OptimizerState::new(cfg.enc_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x656e_636f_6465_7273);
    let mut losses = Vec::with_capacity(cfg.enc_steps);
    for step in 0..cfg.enc_steps {
        let samples = train_batch::<S>(model, step, cfg.enc_batch)?;
        let images: Vec<&Tensor<S>> = samples.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.category_id).collect();
        let texts = samples
            .iter()
            .map(|s| Ok(instantiate(sample_template(&mut rng), &category_name(s.category_id)?)))
            .collect::<Result<Vec<_>>>()?;

        let tape = Tape::with_trainable(&refs);
        let img = embed_images(&tape, ps, &model.image_encoder, &images)?;
        let dino = embed_images(&tape, ps, &model.dino_encoder, &images)?;
        let txt = embed_texts(&tape, ps, &model.text_encoder, &texts)?;
        let ji = model.joint_img.forward(&tape, ps, img)?;
        let jd = model.joint_dino.forward(&tape, ps, dino)?;
        let jt = model.joint_txt.forward(&tape, ps, txt)?;

        let align = tape.add(info_nce(&tape, ji, jt)?, info_nce(&tape, jd, jt)?)?;
        let cls = tape.add(
            cross_entropy(&tape, model.cls_img.forward(&tape, ps, img)?, &labels)?,
            cross_entropy(&tape, model.cls_dino.forward(&tape, ps, dino)?, &labels)?,
        )?;
        let loss = tape.add(align, cls)?;
        let value = tape.item(loss)?.to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("encoder loss became non-finite: {value}")));
        }
        let grads = tape.backward(loss)?;
        grads.apply_to_params(&tape, ps)?;
        opt.adam_step(ps, &refs)?;
        on_step(step, value);
        losses.push(value);
    }
    Ok(losses)
}

/// Per-step losses of the two backbone phases.
#[derive(Debug, Clone)]
pub struct BackboneLosses {
    pub recon: Vec<f64>,
    pub denoise: Vec<f64>,
}

fn raw_latent<S: Scalar>(model: &Model, ps: &ParamSet<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
    let tape = Tape::new();
    let z = model.autoencoder.encode(&tape, ps, tape.leaf(image.clone()))?;
    Ok(tape.value(z))
}

/// Trains the latent autoencoder by reconstruction, fits the latent
/// standardization statistics, then trains the denoiser on true-category
/// captions, dropping a fraction of captions to the empty prompt so the
/// unconditional guidance branch is learned too. Requires pretrained
/// encoders (the text encoder is frozen here).
pub fn train_backbone<S: Scalar>(
    model: &Model,
    ps: &mut ParamSet<S>,
    mut on_step: impl FnMut(&str, usize, f64),
) -> Result<BackboneLosses> {
    let cfg = &model.config;
    if model.stage != "encoders" && model.stage != "backbone" {
        return Err(Error::Config(format!(
            "backbone training requires pretrained encoders, model is at stage '{}'",
            model.stage
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x6261_636b_626f_6e65);

    let vrefs = ps.refs_matching(vae_param);
    let mut vopt = OptimizerState::new(cfg.ae_lr);
    let mut recon = Vec::with_capacity(cfg.ae_steps);
    for step in 0..cfg.ae_steps {
        let samples = train_batch::<S>(model, step, cfg.unet_batch)?;
        let tape = Tape::with_trainable(&vrefs);
        let mut total: Option<Var> = None;
        for s in &samples {
            let term = model.autoencoder.recon_loss(&tape, ps, &s.image)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let loss =
            tape.scale(total.expect("nonempty batch"), S::from_f64(1.0 / samples.len() as f64));
        let value = tape.item(loss)?.to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("reconstruction loss became non-finite: {value}")));
        }
        let grads = tape.backward(loss)?;
        grads.apply_to_params(&tape, ps)?;
        vopt.adam_step(ps, &vrefs)?;
        on_step("recon", step, value);
        recon.push(value);
    }

    let stat_pool = cfg.dataset_size.min(64);
    let latents = (0..stat_pool)
        .map(|i| {
            let s = dataset_sample::<S>(cfg, Split::Train, cfg.seed, i)?;
            raw_latent(model, ps, &s.image)
        })
        .collect::<Result<Vec<_>>>()?;
    model.autoencoder.fit_latent_stats(ps, &latents)?;

    let urefs = ps.refs_matching(unet_param);
    let mut uopt = OptimizerState::new(cfg.unet_lr);
    let mut denoise = Vec::with_capacity(cfg.unet_steps);
    let uncond = model.uncond_context(ps)?;
    let mut latent_cache: BTreeMap<usize, (usize, Tensor<S>)> = BTreeMap::new();
    let mut ctx_cache: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for step in 0..cfg.unet_steps {
        let tape = Tape::with_trainable(&urefs);
        let mut total: Option<Var> = None;
        for i in 0..cfg.unet_batch {
            let index = (step * cfg.unet_batch + i) % cfg.dataset_size;
            if !latent_cache.contains_key(&index) {
                let s = dataset_sample::<S>(cfg, Split::Train, cfg.seed, index)?;
                let z = model.autoencoder.encode_latent(ps, &s.image)?;
                latent_cache.insert(index, (s.category_id, z));
            }
            let (combo, z0) = latent_cache[&index].clone();
            let ctx = if rng.random_range(0.0..1.0) < cfg.caption_dropout {
                uncond.clone()
            } else {
                let text = instantiate(sample_template(&mut rng), &category_name(combo)?);
                match ctx_cache.get(&text) {
                    Some(c) => c.clone(),
                    None => {
                        let c = model.text_encoder.encode_prompt(
                            ps,
                            &text,
                            None,
                            InjectMode::PrimaryOnly,
                        )?;
                        ctx_cache.insert(text, c.clone());
                        c
                    }
                }
            };
            let t = rng.random_range(1..=model.schedule.timesteps());
            let latent_shape =
                vec![model.unet.latent_channels, cfg.latent_size(), cfg.latent_size()];
            let eps = Tensor::<S>::randn(latent_shape, 1.0, &mut rng);
            let ctx_leaf = tape.leaf(ctx);
            let term = ldm_loss_at(
                &tape,
                ps,
                &model.unet,
                &model.schedule,
                &z0,
                t,
                &eps,
                ctx_leaf,
                None,
                0.0,
            )?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let loss =
            tape.scale(total.expect("nonempty batch"), S::from_f64(1.0 / cfg.unet_batch as f64));
        let value = tape.item(loss)?.to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("denoising loss became non-finite: {value}")));
        }
        let grads = tape.backward(loss)?;
        grads.apply_to_params(&tape, ps)?;
        uopt.adam_step(ps, &urefs)?;
        on_step("denoise", step, value);
        denoise.push(value);
    }
    Ok(BackboneLosses { recon, denoise })
}

/// Most likely category of an image under the pretrained classification
/// head.
pub fn classify<S: Scalar>(model: &Model, ps: &ParamSet<S>, image: &Tensor<S>) -> Result<usize> {
    let tape = Tape::new();
    let emb = embed_images(&tape, ps, &model.image_encoder, &[image])?;
    let logits = model.cls_img.forward(&tape, ps, emb)?;
    tape.value(logits)
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Contract("empty classification head".into()))
}

/// Frozen classification accuracy of the image-encoder head over `count`
/// training samples, a quick check that pretraining separated categories.
pub fn classification_accuracy<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    count: usize,
) -> Result<f64> {
    if count == 0 {
        return Err(Error::Contract("accuracy over zero samples".into()));
    }
    let mut hits = 0usize;
    for i in 0..count {
        let s = dataset_sample::<S>(&model.config, Split::Train, model.config.seed, i)?;
        if classify(model, ps, &s.image)? == s.category_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / count as f64)
}

/// The caption a backbone-training sample would use, exposed for tests.
pub fn caption_for(combo: usize, template: &str) -> Result<String> {
    Ok(instantiate(template, &category_name(combo)?))
}

/// Tokenization of the empty prompt used for dropped captions.
pub fn empty_prompt() -> TokenizedPrompt {
    TokenizedPrompt::empty()
}
