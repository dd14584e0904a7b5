//! Cross-attention U-Net noise predictor over the latent grid, with an
//! optional local conditioning branch fused into every cross-attention
//! block, and the denoising training loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::params::ParamSet;
use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::ldm::schedule::NoiseSchedule;
use crate::localmap;
use crate::nn::{scaled_dot_attention, sinusoidal_embedding, Conv, GroupNorm, Linear, ResBlock};

/// Local conditioning already materialized on a tape.
#[derive(Debug, Clone)]
pub struct LocalContext {
    /// `[p*p, d_ctx]` patch features (unmasked; masking happens inside
    /// the attention op so zeroed rows stay exact).
    pub grid: Var,
    /// `[p*p]` binary patch mask.
    pub mask: Var,
    /// Column of the primary word inside the text context.
    pub w0_position: usize,
    /// Scale local attention rows by the primary word's global attention.
    pub reweight: bool,
    /// Attach the local branch only to the deepest cross-attention block.
    pub deepest_only: bool,
}

/// Tensor-side local conditioning, turned into a [`LocalContext`] per
/// sampling step.
#[derive(Debug, Clone)]
pub struct LocalConditioning<S: Scalar> {
    pub grid: Tensor<S>,
    pub mask: Tensor<S>,
    pub w0_position: usize,
    pub reweight: bool,
    pub deepest_only: bool,
}

impl<S: Scalar> LocalConditioning<S> {
    pub fn on_tape(&self, tape: &Tape<S>) -> LocalContext {
        LocalContext {
            grid: tape.leaf(self.grid.clone()),
            mask: tape.leaf(self.mask.clone()),
            w0_position: self.w0_position,
            reweight: self.reweight,
            deepest_only: self.deepest_only,
        }
    }
}

/// Attention bookkeeping from one cross block in one forward pass.
#[derive(Debug, Clone)]
pub struct LocalRecord {
    /// The local map actually used for the output (post-reweighting when
    /// reweighting is on).
    pub attn: Var,
    /// The local value matrix V^l, target of the stage-2 regularizer.
    pub values: Var,
}

#[derive(Debug, Clone)]
pub struct AttnRecord {
    /// Text attention map `[tokens, ctx_len]`.
    pub global: Var,
    pub local: Option<LocalRecord>,
    /// Spatial side length of the query grid.
    pub side: usize,
}

/// Full output of one denoiser forward pass.
#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub eps: Var,
    pub records: Vec<AttnRecord>,
}

/// One cross-attention block: latent tokens attend over textual features
/// through the text-side projections (kg/vg) and, when a local context is
/// attached, over patch features through the local projections (kl/vl).
#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    pub norm: GroupNorm,
    pub wq: Linear,
    pub kg: Linear,
    pub vg: Linear,
    pub kl: Linear,
    pub vl: Linear,
    pub proj: Linear,
}

impl CrossAttnBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        d_ctx: usize,
        d_attn: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(CrossAttnBlock {
            norm: GroupNorm::new(ps, &format!("{prefix}.norm"), channels, groups)?,
            wq: Linear::new(ps, rng, &format!("{prefix}.wq"), channels, d_attn, false)?,
            kg: Linear::new(ps, rng, &format!("{prefix}.kg"), d_ctx, d_attn, false)?,
            vg: Linear::new(ps, rng, &format!("{prefix}.vg"), d_ctx, d_attn, false)?,
            kl: Linear::new(ps, rng, &format!("{prefix}.kl"), d_ctx, d_attn, false)?,
            vl: Linear::new(ps, rng, &format!("{prefix}.vl"), d_ctx, d_attn, false)?,
            proj: Linear::new(ps, rng, &format!("{prefix}.proj"), d_attn, channels, true)?,
        })
    }

    /// Text cross-attention alone: returns updated latent tokens and the
    /// attention map A^g.
    pub fn cross_attention<S: Scalar>(
        &self,
        tape: &Tape<S>,
        ps: &ParamSet<S>,
        x: Var,
        ctx: Var,
    ) -> Result<(Var, Var)> {
        let (out, rec) = self.forward(tape, ps, x, ctx, None, 0.0)?;
        Ok((out, rec.global))
    }

    /// Full block: residual latent update plus attention records. `local`
    /// must already be filtered for λ = 0.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        ps: &ParamSet<S>,
        x: Var,
        ctx: Var,
        local: Option<&LocalContext>,
        lambda: f64,
    ) -> Result<(Var, AttnRecord)> {
        let shape = tape.shape(x);
        if shape.len() != 3 {
            return Err(Error::Shape(format!("cross block expects [c, h, w], got {shape:?}")));
        }
        let ctx_shape = tape.shape(ctx);
        if ctx_shape.len() != 2 || ctx_shape[0] == 0 {
            return Err(Error::Shape(format!(
                "context must be a nonempty [len, d_ctx] matrix, got {ctx_shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let normed = self.norm.forward(tape, ps, x)?;
        let flat = tape.reshape(normed, vec![c, h * w])?;
        let tokens = tape.transpose(flat)?;
        let q = self.wq.forward(tape, ps, tokens)?;
        let k = self.kg.forward(tape, ps, ctx)?;
        let v = self.vg.forward(tape, ps, ctx)?;
        let (out_g, a_g) = scaled_dot_attention(tape, q, k, v)?;

        let (fused, local_rec) = match local {
            None => (out_g, None),
            Some(lc) => {
                if lc.w0_position >= ctx_shape[0] {
                    return Err(Error::Shape(format!(
                        "primary-word position {} outside context of {} tokens",
                        lc.w0_position, ctx_shape[0]
                    )));
                }
                let (a_l, values, _) =
                    localmap::local_attention(tape, ps, q, lc.grid, lc.mask, &self.kl, &self.vl)?;
                let a_used = if lc.reweight {
                    localmap::reweight_attention(tape, a_l, a_g, lc.w0_position)?
                } else {
                    a_l
                };
                let out_l = tape.matmul(a_used, values)?;
                let fused = localmap::fuse(tape, out_g, out_l, lambda)?;
                (fused, Some(LocalRecord { attn: a_used, values }))
            }
        };

        let projected = self.proj.forward(tape, ps, fused)?;
        let back = tape.transpose(projected)?;
        let spatial = tape.reshape(back, vec![c, h, w])?;
        let out = tape.add(x, spatial)?;
        Ok((out, AttnRecord { global: a_g, local: local_rec, side: h }))
    }
}

/// Two-resolution denoiser: convolutional encode/decode around two
/// cross-attention blocks (full latent resolution and half resolution).
#[derive(Debug, Clone)]
pub struct Unet {
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    res_down: ResBlock,
    cross0: CrossAttnBlock,
    down: Conv,
    res_mid1: ResBlock,
    cross1: CrossAttnBlock,
    res_mid2: ResBlock,
    up: Conv,
    res_up: ResBlock,
    gn_out: GroupNorm,
    conv_out: Conv,
    pub latent_channels: usize,
    pub temb_dim: usize,
}

impl Unet {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        latent_channels: usize,
        channels: usize,
        d_ctx: usize,
        d_attn: usize,
        temb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        let c = channels;
        let p = |n: &str| format!("{prefix}.{n}");
        Ok(Unet {
            time1: Linear::new(ps, rng, &p("time1"), temb_dim, temb_dim, true)?,
            time2: Linear::new(ps, rng, &p("time2"), temb_dim, temb_dim, true)?,
            conv_in: Conv::new(ps, rng, &p("conv_in"), latent_channels, c, 3, 1, 1)?,
            res_down: ResBlock::new(ps, rng, &p("res_down"), c, c, temb_dim, groups)?,
            cross0: CrossAttnBlock::new(ps, rng, &p("cross0"), c, d_ctx, d_attn, groups)?,
            down: Conv::new(ps, rng, &p("down"), c, 2 * c, 3, 2, 1)?,
            res_mid1: ResBlock::new(ps, rng, &p("res_mid1"), 2 * c, 2 * c, temb_dim, groups)?,
            cross1: CrossAttnBlock::new(ps, rng, &p("cross1"), 2 * c, d_ctx, d_attn, groups)?,
            res_mid2: ResBlock::new(ps, rng, &p("res_mid2"), 2 * c, 2 * c, temb_dim, groups)?,
            up: Conv::new(ps, rng, &p("up"), 2 * c, c, 3, 1, 1)?,
            res_up: ResBlock::new(ps, rng, &p("res_up"), 2 * c, c, temb_dim, groups)?,
            gn_out: GroupNorm::new(ps, &p("gn_out"), c, groups)?,
            conv_out: Conv::new(ps, rng, &p("conv_out"), c, latent_channels, 3, 1, 1)?,
            latent_channels,
            temb_dim,
        })
    }

    /// The cross-attention blocks, shallow to deep.
    pub fn cross_blocks(&self) -> Vec<&CrossAttnBlock> {
        vec![&self.cross0, &self.cross1]
    }

    /// Full forward pass predicting the noise in `z_t`. When `local` is
    /// present and λ > 0 the local branch feeds the configured blocks;
    /// λ = 0 takes the identical code path as `local = None`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        ps: &ParamSet<S>,
        z_t: Var,
        t: usize,
        ctx: Var,
        local: Option<&LocalContext>,
        lambda: f64,
    ) -> Result<DenoiseOutput> {
        if lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
        }
        let shape = tape.shape(z_t);
        if shape.len() != 3 || shape[0] != self.latent_channels {
            return Err(Error::Shape(format!(
                "expected a [{}, h, w] latent, got {shape:?}",
                self.latent_channels
            )));
        }
        if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
            return Err(Error::Shape(format!(
                "latent extent {}x{} must be even for the half-resolution path",
                shape[1], shape[2]
            )));
        }
        if t == 0 {
            return Err(Error::Contract("timestep must be at least 1".into()));
        }
        let local = if lambda == 0.0 { None } else { local };

        let temb = tape.leaf(sinusoidal_embedding(t as f64, self.temb_dim));
        let temb = self.time1.forward(tape, ps, temb)?;
        let temb = self.time2.forward(tape, ps, tape.silu(temb))?;

        let h0 = self.conv_in.forward(tape, ps, z_t)?;
        let h1 = self.res_down.forward(tape, ps, h0, temb)?;
        let local0 = local.filter(|lc| !lc.deepest_only);
        let (h1, rec0) = self.cross0.forward(tape, ps, h1, ctx, local0, lambda)?;

        let h2 = self.down.forward(tape, ps, h1)?;
        let h2 = self.res_mid1.forward(tape, ps, h2, temb)?;
        let (h2, rec1) = self.cross1.forward(tape, ps, h2, ctx, local, lambda)?;
        let h2 = self.res_mid2.forward(tape, ps, h2, temb)?;

        let u = tape.upsample2x(h2)?;
        let u = self.up.forward(tape, ps, u)?;
        let cat = tape.concat0(&[u, h1])?;
        let out = self.res_up.forward(tape, ps, cat, temb)?;
        let out = tape.silu(self.gn_out.forward(tape, ps, out)?);
        let eps = self.conv_out.forward(tape, ps, out)?;
        Ok(DenoiseOutput { eps, records: vec![rec0, rec1] })
    }
}

/// Noise prediction alone: ε̂ = εθ(z_t, t, ctx [, local]).
pub fn unet_denoise<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    unet: &Unet,
    z_t: Var,
    t: usize,
    ctx: Var,
    local: Option<&LocalContext>,
    lambda: f64,
) -> Result<Var> {
    Ok(unet.forward(tape, ps, z_t, t, ctx, local, lambda)?.eps)
}

/// Single-sample denoising loss at a fixed (t, ε): mean squared error
/// between the drawn noise and the prediction on z_t built from z0.
pub fn ldm_loss_at<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    unet: &Unet,
    schedule: &NoiseSchedule,
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    ctx: Var,
    local: Option<&LocalContext>,
    lambda: f64,
) -> Result<Var> {
    let z_t = tape.leaf(schedule.add_noise(z0, t, eps)?);
    let eps_hat = unet_denoise(tape, ps, unet, z_t, t, ctx, local, lambda)?;
    let target = tape.leaf(eps.clone());
    let diff = tape.sub(eps_hat, target)?;
    tape.mean_all(tape.mul(diff, diff)?)
}

/// Denoising loss with timestep and noise drawn from `rng`: one
/// Monte-Carlo term of E‖ε − εθ(z_t, t, ctx)‖².
pub fn ldm_loss<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    unet: &Unet,
    schedule: &NoiseSchedule,
    z0: &Tensor<S>,
    ctx: Var,
    local: Option<&LocalContext>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let t = rng.random_range(1..=schedule.timesteps());
    let eps = Tensor::<S>::randn(z0.shape().to_vec(), 1.0, rng);
    ldm_loss_at(tape, ps, unet, schedule, z0, t, &eps, ctx, local, lambda)
}
