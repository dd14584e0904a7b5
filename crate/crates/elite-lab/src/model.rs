//! The assembled system: hierarchical image encoder (plus an independent
//! twin for metrics), text encoder, latent-diffusion backbone, and the two
//! concept mappings, all registered against one parameter set, with the
//! high-level encode and generate entry points.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cli::checkpoint::load_checkpoint;
use crate::cli::config::RunConfig;
use crate::data::{dataset_sample, ConceptSample, Split};
use crate::diffcore::params::ParamSet;
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::globalmap::{encode_concept, GlobalMapper};
use crate::imageenc::{ImageEncoder, TapFeatures};
use crate::ldm::{
    sample_traced, AttentionTrace, Autoencoder, LocalConditioning, NoiseSchedule, Unet,
};
use crate::localmap::{map_local, LocalMapper};
use crate::nn::Linear;
use crate::textenc::{InjectMode, TextEncoder, TokenizedPrompt, WordEmbeddingSet};

const STREAM_IMG: u64 = 1;
const STREAM_DINO: u64 = 2;
const STREAM_TXT: u64 = 3;
const STREAM_JOINT: u64 = 4;
const STREAM_VAE: u64 = 5;
const STREAM_UNET: u64 = 6;
const STREAM_GLOBAL: u64 = 7;
const STREAM_LOCAL: u64 = 8;
const STREAM_HEADS: u64 = 9;

/// All components built over a shared parameter set. The `stage` tag
/// tracks how far through the training pipeline the weights have come
/// ("init", "encoders", "backbone", "global", "local").
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub stage: String,
    pub image_encoder: ImageEncoder,
    /// Twin encoder with independent weights, used only for evaluation.
    pub dino_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    /// Projections into the shared image/text metric space.
    pub joint_img: Linear,
    pub joint_txt: Linear,
    pub joint_dino: Linear,
    /// Category-classification heads used during encoder pretraining.
    pub cls_img: Linear,
    pub cls_dino: Linear,
    pub autoencoder: Autoencoder,
    pub unet: Unet,
    pub global_mapper: GlobalMapper,
    pub local_mapper: LocalMapper,
    pub schedule: NoiseSchedule,
}

/// Frozen per-sample features reused across training steps of both
/// mapping stages: the backbone and encoders do not move there, so tapped
/// features and the clean latent can be computed once per dataset index.
#[derive(Debug, Clone)]
pub struct PreparedSample<S: Scalar> {
    pub combo: usize,
    pub image: Tensor<S>,
    pub mask: Tensor<S>,
    pub taps: TapFeatures<S>,
    /// Standardized clean latent z0.
    pub z0: Tensor<S>,
}

/// Scalar loss bookkeeping from one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    /// The denoising component alone, without regularizers.
    pub ldm: f64,
}

/// Sampling knobs for one generation; defaults come from the config via
/// [`Model::gen_options`] and CLI flags override individual fields.
#[derive(Debug, Clone)]
pub struct GenOptions {
    pub mode: InjectMode,
    pub steps: usize,
    pub guidance: f64,
    /// Fusion weight of the local branch; 0 disables it exactly.
    pub lambda: f64,
}

/// One finished generation with its attention bookkeeping.
#[derive(Debug, Clone)]
pub struct Generation<S: Scalar> {
    pub image: Tensor<S>,
    pub latent: Tensor<S>,
    pub trace: AttentionTrace<S>,
    pub tokens: TokenizedPrompt,
}

impl Model {
    /// Registers every component's parameters into `ps` with seeded,
    /// per-component random streams, so layouts and initial values depend
    /// only on the config.
    pub fn build<S: Scalar>(cfg: &RunConfig, ps: &mut ParamSet<S>) -> Result<Model> {
        cfg.validate()?;
        let mk = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(stream);
            r
        };
        let image_encoder = ImageEncoder::new(
            ps,
            &mut mk(STREAM_IMG),
            "imgenc",
            cfg.image_size,
            cfg.patch_size,
            cfg.img_dim,
            cfg.img_blocks,
            cfg.img_mlp_ratio,
        )?;
        let dino_encoder = ImageEncoder::new(
            ps,
            &mut mk(STREAM_DINO),
            "dino",
            cfg.image_size,
            cfg.patch_size,
            cfg.img_dim,
            cfg.img_blocks,
            cfg.img_mlp_ratio,
        )?;
        let text_encoder = TextEncoder::new(
            ps,
            &mut mk(STREAM_TXT),
            "txtenc",
            cfg.txt_dim,
            cfg.txt_blocks,
            cfg.txt_max_len,
        )?;
        let mut jrng = mk(STREAM_JOINT);
        let joint_img = Linear::new(ps, &mut jrng, "joint.img", cfg.img_dim, cfg.img_dim, false)?;
        let joint_txt = Linear::new(ps, &mut jrng, "joint.txt", cfg.txt_dim, cfg.img_dim, false)?;
        let joint_dino = Linear::new(ps, &mut jrng, "joint.dino", cfg.img_dim, cfg.img_dim, false)?;
        let mut hrng = mk(STREAM_HEADS);
        let cls_img =
            Linear::new(ps, &mut hrng, "pretrain.cls_img", cfg.img_dim, cfg.num_categories, true)?;
        let cls_dino =
            Linear::new(ps, &mut hrng, "pretrain.cls_dino", cfg.img_dim, cfg.num_categories, true)?;
        let autoencoder = Autoencoder::new(
            ps,
            &mut mk(STREAM_VAE),
            "vae",
            cfg.ae_channels,
            cfg.latent_channels,
            cfg.norm_groups,
        )?;
        let unet = Unet::new(
            ps,
            &mut mk(STREAM_UNET),
            "unet",
            cfg.latent_channels,
            cfg.unet_channels,
            cfg.txt_dim,
            cfg.attn_dim,
            cfg.temb_dim,
            cfg.norm_groups,
        )?;
        let global_mapper = GlobalMapper::new(
            ps,
            &mut mk(STREAM_GLOBAL),
            "globalmap",
            cfg.img_taps.len(),
            cfg.img_dim,
            cfg.txt_dim,
        )?;
        let local_mapper = LocalMapper::new(
            ps,
            &mut mk(STREAM_LOCAL),
            "localmap",
            cfg.img_taps.len() * cfg.img_dim,
            cfg.txt_dim,
        )?;
        let schedule = NoiseSchedule::cosine(cfg.timesteps, cfg.cosine_s)?;
        Ok(Model {
            config: cfg.clone(),
            stage: "init".into(),
            image_encoder,
            dino_encoder,
            text_encoder,
            joint_img,
            joint_txt,
            joint_dino,
            cls_img,
            cls_dino,
            autoencoder,
            unet,
            global_mapper,
            local_mapper,
            schedule,
        })
    }

    /// Hierarchical features of one image at the configured taps.
    pub fn tap_features<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        image: &Tensor<S>,
    ) -> Result<TapFeatures<S>> {
        self.image_encoder.encode_image(ps, image, &self.config.img_taps)
    }

    /// Precomputes the frozen features of one training sample.
    pub fn prepare<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        sample: &ConceptSample<S>,
    ) -> Result<PreparedSample<S>> {
        Ok(PreparedSample {
            combo: sample.category_id,
            image: sample.image.clone(),
            mask: sample.mask.clone(),
            taps: self.tap_features(ps, &sample.image)?,
            z0: self.autoencoder.encode_latent(ps, &sample.image)?,
        })
    }

    /// Prepares the first `count` training samples, cycling the dataset.
    pub fn prepare_dataset<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        count: usize,
    ) -> Result<Vec<PreparedSample<S>>> {
        (0..count)
            .map(|i| {
                let s = dataset_sample(&self.config, Split::Train, self.config.seed, i)?;
                self.prepare(ps, &s)
            })
            .collect()
    }

    /// One forward pass from image to word embeddings (the fast inversion).
    pub fn encode<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        image: &Tensor<S>,
    ) -> Result<WordEmbeddingSet<S>> {
        let taps = self.tap_features(ps, image)?;
        encode_concept(ps, &self.global_mapper, &taps)
    }

    /// Features of the empty prompt, the unconditional guidance branch.
    pub fn uncond_context<S: Scalar>(&self, ps: &ParamSet<S>) -> Result<Tensor<S>> {
        self.text_encoder.encode_tokens(
            ps,
            &TokenizedPrompt::empty(),
            None,
            InjectMode::PrimaryOnly,
        )
    }

    /// Local conditioning of one masked source image, ready for sampling.
    pub fn local_conditioning<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        image: &Tensor<S>,
        mask: &Tensor<S>,
        w0_position: usize,
    ) -> Result<LocalConditioning<S>> {
        let fm = map_local(
            ps,
            &self.image_encoder,
            &self.local_mapper,
            &self.config.img_taps,
            image,
            mask,
        )?;
        Ok(LocalConditioning {
            grid: fm.grid,
            mask: fm.mask,
            w0_position,
            reweight: true,
            deepest_only: self.config.local_deepest_only,
        })
    }

    /// Generation defaults from the config.
    pub fn gen_options(&self) -> GenOptions {
        GenOptions {
            mode: InjectMode::PrimaryOnly,
            steps: self.config.sample_steps,
            guidance: self.config.guidance_scale,
            lambda: self.config.lambda_gen,
        }
    }

    /// Samples an image for a prompt containing the placeholder, with the
    /// concept spliced in. `source` attaches the local branch computed
    /// from a (image, mask) pair of the concept.
    pub fn generate<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        concept: &WordEmbeddingSet<S>,
        source: Option<(&Tensor<S>, &Tensor<S>)>,
        prompt: &str,
        opts: &GenOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<Generation<S>> {
        let tok = self.text_encoder.tokenize(prompt)?;
        let ctx_cond = self.text_encoder.encode_tokens(ps, &tok, Some(concept), opts.mode)?;
        let ctx_uncond = self.uncond_context(ps)?;
        let local = match source {
            Some((image, mask)) => {
                let w0 = tok.placeholder_position.ok_or_else(|| {
                    Error::Contract(format!(
                        "prompt has no placeholder to anchor the local branch: {prompt}"
                    ))
                })?;
                Some(self.local_conditioning(ps, image, mask, w0)?)
            }
            None => None,
        };
        let (latent, trace) = sample_traced(
            ps,
            &self.unet,
            &self.schedule,
            &ctx_cond,
            &ctx_uncond,
            self.config.latent_size(),
            opts.steps,
            opts.guidance,
            local.as_ref(),
            opts.lambda,
            rng,
        )?;
        let image = self.autoencoder.decode_latent(ps, &latent)?;
        Ok(Generation { image, latent, trace, tokens: tok })
    }
}

/// Rebuilds the model recorded in a checkpoint and restores its weights.
pub fn load_model<S: Scalar>(path: &Path) -> Result<(Model, ParamSet<S>)> {
    let ck = load_checkpoint(path)?;
    let mut ps = ParamSet::new();
    let mut model = Model::build(&ck.config, &mut ps)?;
    ck.load_into(&mut ps)?;
    model.stage = ck.stage;
    Ok((model, ps))
}
