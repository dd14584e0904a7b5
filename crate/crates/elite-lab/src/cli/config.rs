//! Run configuration: one flat JSON object covering dataset, model
//! dimensions, training knobs, and sampling. Unknown keys are rejected;
//! missing keys fall back to the published full-scale defaults, so `{}`
//! is a valid config. Desk-scale runs override sizes and learning rates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn d_seed() -> u64 {
    0
}
fn d_image_size() -> usize {
    64
}
fn d_patch_size() -> usize {
    8
}
fn d_img_dim() -> usize {
    64
}
fn d_img_blocks() -> usize {
    6
}
fn d_img_taps() -> Vec<usize> {
    vec![6, 1, 2, 3, 4]
}
fn d_img_mlp_ratio() -> usize {
    2
}
fn d_txt_dim() -> usize {
    64
}
fn d_txt_blocks() -> usize {
    2
}
fn d_txt_max_len() -> usize {
    32
}
fn d_latent_channels() -> usize {
    4
}
fn d_ae_channels() -> usize {
    16
}
fn d_unet_channels() -> usize {
    32
}
fn d_temb_dim() -> usize {
    64
}
fn d_attn_dim() -> usize {
    64
}
fn d_norm_groups() -> usize {
    4
}
fn d_timesteps() -> usize {
    1000
}
fn d_cosine_s() -> f64 {
    0.008
}
fn d_lambda_global() -> f64 {
    0.01
}
fn d_lambda_local() -> f64 {
    0.0001
}
fn d_guidance_scale() -> f64 {
    5.0
}
fn d_lambda_train() -> f64 {
    1.0
}
fn d_lambda_gen() -> f64 {
    0.8
}
fn d_lambda_edit() -> f64 {
    0.6
}
fn d_stage1_batch() -> usize {
    16
}
fn d_stage1_lr() -> f64 {
    1e-6
}
fn d_stage1_steps() -> usize {
    3000
}
fn d_stage2_batch() -> usize {
    8
}
fn d_stage2_lr() -> f64 {
    1e-5
}
fn d_stage2_steps() -> usize {
    1000
}
fn d_enc_steps() -> usize {
    1500
}
fn d_enc_lr() -> f64 {
    1e-3
}
fn d_enc_batch() -> usize {
    8
}
fn d_ae_steps() -> usize {
    1500
}
fn d_ae_lr() -> f64 {
    2e-3
}
fn d_unet_steps() -> usize {
    4000
}
fn d_unet_lr() -> f64 {
    1e-3
}
fn d_unet_batch() -> usize {
    4
}
fn d_caption_dropout() -> f64 {
    0.1
}
fn d_sample_steps() -> usize {
    50
}
fn d_eval_sample_steps() -> usize {
    12
}
fn d_dataset_size() -> usize {
    2000
}
fn d_num_categories() -> usize {
    60
}
fn d_heldout_categories() -> usize {
    20
}
fn d_invert_steps() -> usize {
    500
}
fn d_invert_lr() -> f64 {
    5e-3
}
fn d_eval_seeds() -> usize {
    5
}
fn d_eval_budget() -> usize {
    200
}
fn d_false() -> bool {
    false
}
fn d_out_dir() -> String {
    "out".into()
}

/// Every knob of a run. Serializes to a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,

    /// Edge length of training images (pixels).
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    /// Image-encoder patch size; `image_size / patch_size` is the token
    /// grid side `p`.
    #[serde(default = "d_patch_size")]
    pub patch_size: usize,
    /// Image-encoder channel width `c`.
    #[serde(default = "d_img_dim")]
    pub img_dim: usize,
    /// Number of image-encoder transformer blocks.
    #[serde(default = "d_img_blocks")]
    pub img_blocks: usize,
    /// Tapped block indices (1-based), deepest first. The deepest tap
    /// produces the primary word.
    #[serde(default = "d_img_taps")]
    pub img_taps: Vec<usize>,
    #[serde(default = "d_img_mlp_ratio")]
    pub img_mlp_ratio: usize,

    /// Token-embedding and textual-feature dimension `d = d_ctx`.
    #[serde(default = "d_txt_dim")]
    pub txt_dim: usize,
    #[serde(default = "d_txt_blocks")]
    pub txt_blocks: usize,
    /// Hard cap on token-sequence length after concept injection.
    #[serde(default = "d_txt_max_len")]
    pub txt_max_len: usize,

    /// Latent channels of the autoencoder (spatial factor is fixed at 4).
    #[serde(default = "d_latent_channels")]
    pub latent_channels: usize,
    #[serde(default = "d_ae_channels")]
    pub ae_channels: usize,
    #[serde(default = "d_unet_channels")]
    pub unet_channels: usize,
    #[serde(default = "d_temb_dim")]
    pub temb_dim: usize,
    /// Cross-attention width `d'`.
    #[serde(default = "d_attn_dim")]
    pub attn_dim: usize,
    #[serde(default = "d_norm_groups")]
    pub norm_groups: usize,

    /// Diffusion training steps `T`.
    #[serde(default = "d_timesteps")]
    pub timesteps: usize,
    /// Small offset of the cosine noise schedule.
    #[serde(default = "d_cosine_s")]
    pub cosine_s: f64,

    #[serde(default = "d_lambda_global")]
    pub lambda_global: f64,
    #[serde(default = "d_lambda_local")]
    pub lambda_local: f64,
    #[serde(default = "d_guidance_scale")]
    pub guidance_scale: f64,
    /// Fusion weight during stage-2 training.
    #[serde(default = "d_lambda_train")]
    pub lambda_train: f64,
    /// Fusion weight for concept generation.
    #[serde(default = "d_lambda_gen")]
    pub lambda_gen: f64,
    /// Fusion weight for concept editing.
    #[serde(default = "d_lambda_edit")]
    pub lambda_edit: f64,

    #[serde(default = "d_stage1_batch")]
    pub stage1_batch: usize,
    #[serde(default = "d_stage1_lr")]
    pub stage1_lr: f64,
    #[serde(default = "d_stage1_steps")]
    pub stage1_steps: usize,
    #[serde(default = "d_stage2_batch")]
    pub stage2_batch: usize,
    #[serde(default = "d_stage2_lr")]
    pub stage2_lr: f64,
    #[serde(default = "d_stage2_steps")]
    pub stage2_steps: usize,

    /// Encoder pretraining (reconstruction + caption contrastive).
    #[serde(default = "d_enc_steps")]
    pub enc_steps: usize,
    #[serde(default = "d_enc_lr")]
    pub enc_lr: f64,
    #[serde(default = "d_enc_batch")]
    pub enc_batch: usize,

    /// Latent-autoencoder and denoiser backbone pretraining.
    #[serde(default = "d_ae_steps")]
    pub ae_steps: usize,
    #[serde(default = "d_ae_lr")]
    pub ae_lr: f64,
    #[serde(default = "d_unet_steps")]
    pub unet_steps: usize,
    #[serde(default = "d_unet_lr")]
    pub unet_lr: f64,
    #[serde(default = "d_unet_batch")]
    pub unet_batch: usize,
    /// Fraction of backbone training captions dropped to the empty prompt,
    /// which trains the unconditional branch used by guidance.
    #[serde(default = "d_caption_dropout")]
    pub caption_dropout: f64,

    #[serde(default = "d_sample_steps")]
    pub sample_steps: usize,
    /// Cheaper step count used inside metric sweeps.
    #[serde(default = "d_eval_sample_steps")]
    pub eval_sample_steps: usize,

    /// Number of distinct training samples the generator cycles through.
    #[serde(default = "d_dataset_size")]
    pub dataset_size: usize,
    /// Category combinations in play, drawn from the 600-combination
    /// catalog (desk default 60).
    #[serde(default = "d_num_categories")]
    pub num_categories: usize,
    /// Of those, how many are held out as unseen concepts.
    #[serde(default = "d_heldout_categories")]
    pub heldout_categories: usize,

    #[serde(default = "d_invert_steps")]
    pub invert_steps: usize,
    #[serde(default = "d_invert_lr")]
    pub invert_lr: f64,
    #[serde(default = "d_eval_seeds")]
    pub eval_seeds: usize,
    /// Cap on generated images per evaluation run.
    #[serde(default = "d_eval_budget")]
    pub eval_budget: usize,

    /// Attach local K/V projections only to the deepest-resolution block.
    #[serde(default = "d_false")]
    pub local_deepest_only: bool,
    /// Average the primary word's attention column across blocks before
    /// reweighting (default: each block uses its own map).
    #[serde(default = "d_false")]
    pub reweight_average: bool,
    /// Restrict the word-embedding L1 penalty to auxiliary words.
    #[serde(default = "d_false")]
    pub reg_aux_only: bool,
    /// Apply attention reweighting during stage-2 training as well as at
    /// inference.
    #[serde(default = "d_false")]
    pub reweight_in_training: bool,

    #[serde(default = "d_out_dir")]
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty object parses to defaults")
    }
}

impl RunConfig {
    /// Token grid side of the image encoder.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Latent spatial side (autoencoder downsamples by 4).
    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    /// Number of words produced by the global mapping.
    pub fn num_words(&self) -> usize {
        self.img_taps.len()
    }

    /// A miniature but valid configuration for fast unit tests: 16×16
    /// images, 4×4 latents, single-digit channel counts.
    pub fn tiny_for_tests() -> Self {
        let cfg: RunConfig = serde_json::from_str(
            r#"{
                "image_size": 16, "patch_size": 4,
                "img_dim": 8, "img_blocks": 3, "img_taps": [3, 1, 2],
                "txt_dim": 8, "txt_blocks": 1, "txt_max_len": 16,
                "latent_channels": 2, "ae_channels": 4, "unet_channels": 8,
                "temb_dim": 8, "attn_dim": 8, "norm_groups": 2,
                "sample_steps": 5, "eval_sample_steps": 4,
                "dataset_size": 8, "num_categories": 6, "heldout_categories": 2,
                "stage1_batch": 2, "stage1_steps": 4,
                "stage2_batch": 2, "stage2_steps": 4,
                "enc_steps": 4, "enc_batch": 2, "ae_steps": 4,
                "unet_steps": 4, "unet_batch": 2,
                "invert_steps": 4, "eval_seeds": 1, "eval_budget": 8
            }"#,
        )
        .expect("tiny test config parses");
        cfg.validate().expect("tiny test config is valid");
        cfg
    }

    /// Checks invariants that JSON typing cannot express.
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 14] = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("img_dim", self.img_dim),
            ("img_blocks", self.img_blocks),
            ("txt_dim", self.txt_dim),
            ("txt_blocks", self.txt_blocks),
            ("txt_max_len", self.txt_max_len),
            ("latent_channels", self.latent_channels),
            ("ae_channels", self.ae_channels),
            ("unet_channels", self.unet_channels),
            ("attn_dim", self.attn_dim),
            ("timesteps", self.timesteps),
            ("sample_steps", self.sample_steps),
            ("eval_sample_steps", self.eval_sample_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let nonneg: [(&str, f64); 9] = [
            ("lambda_global", self.lambda_global),
            ("lambda_local", self.lambda_local),
            ("lambda_train", self.lambda_train),
            ("lambda_gen", self.lambda_gen),
            ("lambda_edit", self.lambda_edit),
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr", self.stage2_lr),
            ("invert_lr", self.invert_lr),
            ("guidance_scale", self.guidance_scale),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a nonnegative finite number")));
            }
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(Error::Config("caption_dropout must lie in [0, 1]".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.image_size % 8 != 0 {
            return Err(Error::Config(
                "image_size must be divisible by 8 (latent factor 4, one denoiser downsample)"
                    .into(),
            ));
        }
        if self.img_taps.is_empty() {
            return Err(Error::Config("img_taps must list at least one tapped block".into()));
        }
        let deepest = *self.img_taps.iter().max().unwrap();
        if self.img_taps[0] != deepest {
            return Err(Error::Config(format!(
                "img_taps must list the deepest tap first, got {:?}",
                self.img_taps
            )));
        }
        for &t in &self.img_taps {
            if t == 0 || t > self.img_blocks {
                return Err(Error::Config(format!(
                    "tap index {t} outside 1..={}",
                    self.img_blocks
                )));
            }
        }
        let mut sorted = self.img_taps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.img_taps.len() {
            return Err(Error::Config(format!("img_taps has duplicates: {:?}", self.img_taps)));
        }
        if self.norm_groups == 0
            || self.unet_channels % self.norm_groups != 0
            || self.ae_channels % self.norm_groups != 0
        {
            return Err(Error::Config(format!(
                "norm_groups {} must divide ae_channels {} and unet_channels {}",
                self.norm_groups, self.ae_channels, self.unet_channels
            )));
        }
        if self.temb_dim % 2 != 0 {
            return Err(Error::Config("temb_dim must be even".into()));
        }
        if self.heldout_categories >= self.num_categories {
            return Err(Error::Config(format!(
                "heldout_categories {} must be below num_categories {}",
                self.heldout_categories, self.num_categories
            )));
        }
        if self.num_categories > crate::data::catalog_size() {
            return Err(Error::Config(format!(
                "num_categories {} exceeds the {}-combination catalog",
                self.num_categories,
                crate::data::catalog_size()
            )));
        }
        if self.sample_steps > self.timesteps || self.eval_sample_steps > self.timesteps {
            return Err(Error::Config("sampler steps cannot exceed timesteps".into()));
        }
        Ok(())
    }
}

/// Reads and validates a config file; `{}` yields the full defaults.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_published_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.lambda_global, 0.01);
        assert_eq!(cfg.lambda_local, 0.0001);
        assert_eq!(cfg.guidance_scale, 5.0);
        assert_eq!(cfg.lambda_train, 1.0);
        assert_eq!(cfg.lambda_gen, 0.8);
        assert_eq!(cfg.lambda_edit, 0.6);
        assert_eq!(cfg.stage1_batch, 16);
        assert_eq!(cfg.stage1_lr, 1e-6);
        assert_eq!(cfg.stage2_batch, 8);
        assert_eq!(cfg.stage2_lr, 1e-5);
        assert_eq!(cfg.invert_steps, 500);
        assert_eq!(cfg.invert_lr, 5e-3);
        assert_eq!(cfg.img_taps, vec![6, 1, 2, 3, 4]);
        assert_eq!(cfg.timesteps, 1000);
        assert_eq!(cfg.sample_steps, 50);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let cfg: RunConfig = serde_json::from_str(r#"{"lambda_global": -1}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lambda_global"));
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let r: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"lambda_globall": 0.1}"#);
        let msg = r.unwrap_err().to_string();
        assert!(msg.contains("lambda_globall"), "{msg}");
    }

    #[test]
    fn serialize_parse_round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.unet_channels = 24;
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn taps_must_start_with_deepest() {
        let cfg: RunConfig = serde_json::from_str(r#"{"img_taps": [1, 6, 2]}"#).unwrap();
        assert!(cfg.validate().is_err());
    }
}
