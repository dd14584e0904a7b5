//! Neural building blocks shared by the encoders and the denoiser.
//!
//! Each block registers its parameters under a dotted name prefix at
//! construction time and keeps only [`ParamRef`] handles, so the same
//! block definition serves training (gradients on) and inference.
//! Construction order fixes both parameter order and RNG consumption,
//! which keeps initialization byte-reproducible.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::diffcore::params::{ParamRef, ParamSet};
use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Scalar, Tensor};

/// Affine layer `y = x w + b` with `w` stored as `[fan_in, fan_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(fan_in)`; bias starts at zero.
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = ps.register(
            &format!("{prefix}.w"),
            Tensor::randn(vec![fan_in, fan_out], std, rng),
        )?;
        let b = if bias {
            Some(ps.register(&format!("{prefix}.b"), Tensor::zeros(vec![fan_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    /// Same layer with the weight (and bias) set to zero, used where the
    /// output should start as a no-op.
    pub fn new_zeroed<S: Scalar>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = ps.register(&format!("{prefix}.w"), Tensor::zeros(vec![fan_in, fan_out]))?;
        let b = if bias {
            Some(ps.register(&format!("{prefix}.b"), Tensor::zeros(vec![fan_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    /// Applies the layer to a `[tokens, fan_in]` matrix.
    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.b {
            y = tape.add_row(y, tape.param(ps, b))?;
        }
        Ok(y)
    }
}

/// Per-feature layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = ps.register(&format!("{prefix}.gamma"), Tensor::full(vec![dim], S::one()))?;
        let beta = ps.register(&format!("{prefix}.beta"), Tensor::zeros(vec![dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let n = tape.row_norm(x, S::from_f64(1e-5))?;
        let scaled = tape.mul_row(n, tape.param(ps, self.gamma))?;
        tape.add_row(scaled, tape.param(ps, self.beta))
    }
}

/// Two-layer MLP with GELU, hidden width `dim * ratio`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        ratio: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let fc1 = Linear::new(ps, rng, &format!("{prefix}.fc1"), dim, dim * ratio, true)?;
        let fc2 = Linear::new(ps, rng, &format!("{prefix}.fc2"), dim * ratio, out_dim, true)?;
        Ok(Mlp { fc1, fc2 })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, ps, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, ps, h)
    }
}

/// Scaled dot-product attention. Returns `(output, attention)` where the
/// attention matrix is `softmax(q k^T / sqrt(d))` of shape `[tq, tk]`.
pub fn scaled_dot_attention<S: Scalar>(
    tape: &Tape<S>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().ok_or_else(|| {
        crate::error::Error::Shape("attention query must have a feature dimension".into())
    })?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, S::from_f64(1.0 / (d as f64).sqrt()));
    let attn = tape.softmax_lastdim(scores)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Single-head self-attention with output projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl SelfAttention {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(SelfAttention {
            wq: Linear::new(ps, rng, &format!("{prefix}.wq"), dim, dim, false)?,
            wk: Linear::new(ps, rng, &format!("{prefix}.wk"), dim, dim, false)?,
            wv: Linear::new(ps, rng, &format!("{prefix}.wv"), dim, dim, false)?,
            wo: Linear::new(ps, rng, &format!("{prefix}.wo"), dim, dim, false)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let q = self.wq.forward(tape, ps, x)?;
        let k = self.wk.forward(tape, ps, x)?;
        let v = self.wv.forward(tape, ps, x)?;
        let (out, _) = scaled_dot_attention(tape, q, k, v)?;
        self.wo.forward(tape, ps, out)
    }
}

/// Pre-norm transformer block: attention and MLP with residual adds.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(ps, &format!("{prefix}.ln1"), dim)?,
            attn: SelfAttention::new(ps, rng, &format!("{prefix}.attn"), dim)?,
            ln2: LayerNorm::new(ps, &format!("{prefix}.ln2"), dim)?,
            mlp: Mlp::new(ps, rng, &format!("{prefix}.mlp"), dim, mlp_ratio, dim)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let a = self.ln1.forward(tape, ps, x)?;
        let a = self.attn.forward(tape, ps, a)?;
        let x = tape.add(x, a)?;
        let m = self.ln2.forward(tape, ps, x)?;
        let m = self.mlp.forward(tape, ps, m)?;
        tape.add(x, m)
    }
}

/// 2-D convolution layer; kernels stored as `[cout, cin*kh*kw]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamRef,
    pub b: ParamRef,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = ps.register(
            &format!("{prefix}.w"),
            Tensor::randn(vec![cout, fan_in], std, rng),
        )?;
        let b = ps.register(&format!("{prefix}.b"), Tensor::zeros(vec![cout]))?;
        Ok(Conv { w, b, k, stride, pad })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        tape.conv2d(x, w, Some(b), self.k, self.k, self.stride, self.pad)
    }
}

/// Group normalization over `[c, h, w]` with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(crate::error::Error::Config(format!(
                "group norm needs groups dividing channels, got {groups} for {channels}"
            )));
        }
        let gamma =
            ps.register(&format!("{prefix}.gamma"), Tensor::full(vec![channels], S::one()))?;
        let beta = ps.register(&format!("{prefix}.beta"), Tensor::zeros(vec![channels]))?;
        Ok(GroupNorm { gamma, beta, groups })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let grouped = tape.reshape(x, vec![self.groups, c / self.groups * h * w])?;
        let normed = tape.row_norm(grouped, S::from_f64(1e-5))?;
        let per_channel = tape.reshape(normed, vec![c, h * w])?;
        let scaled = tape.mul_col(per_channel, tape.param(ps, self.gamma))?;
        let shifted = tape.add_col(scaled, tape.param(ps, self.beta))?;
        tape.reshape(shifted, vec![c, h, w])
    }
}

/// Residual convolution block with timestep conditioning added per channel.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv,
    pub temb: Linear,
    pub gn2: GroupNorm,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        let gn1 = GroupNorm::new(ps, &format!("{prefix}.gn1"), cin, groups)?;
        let conv1 = Conv::new(ps, rng, &format!("{prefix}.conv1"), cin, cout, 3, 1, 1)?;
        let temb = Linear::new(ps, rng, &format!("{prefix}.temb"), temb_dim, cout, true)?;
        let gn2 = GroupNorm::new(ps, &format!("{prefix}.gn2"), cout, groups)?;
        let conv2 = Conv::new(ps, rng, &format!("{prefix}.conv2"), cout, cout, 3, 1, 1)?;
        let skip = if cin != cout {
            Some(Conv::new(ps, rng, &format!("{prefix}.skip"), cin, cout, 1, 1, 0)?)
        } else {
            None
        };
        Ok(ResBlock { gn1, conv1, temb, gn2, conv2, skip })
    }

    /// `x` is `[cin, h, w]`; `temb` is a `[1, temb_dim]` embedding.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        ps: &ParamSet<S>,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        let (h, w) = (shape[1], shape[2]);
        let mut hid = self.gn1.forward(tape, ps, x)?;
        hid = tape.silu(hid);
        hid = self.conv1.forward(tape, ps, hid)?;
        let cout = tape.shape(hid)[0];

        let t = tape.silu(temb);
        let t = self.temb.forward(tape, ps, t)?;
        let t = tape.reshape(t, vec![cout])?;
        let flat = tape.reshape(hid, vec![cout, h * w])?;
        let flat = tape.add_col(flat, t)?;
        hid = tape.reshape(flat, vec![cout, h, w])?;

        hid = self.gn2.forward(tape, ps, hid)?;
        hid = tape.silu(hid);
        hid = self.conv2.forward(tape, ps, hid)?;

        let shortcut = match &self.skip {
            Some(conv) => conv.forward(tape, ps, x)?,
            None => x,
        };
        tape.add(shortcut, hid)
    }
}

/// Sinusoidal position/timestep features of even dimension `dim`.
pub fn sinusoidal_embedding<S: Scalar>(t: f64, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (10_000.0_f64).powf(-(i as f64) / half as f64);
        data[i] = S::from_f64((t * freq).sin());
        data[half + i] = S::from_f64((t * freq).cos());
    }
    Tensor::new(vec![1, dim], data).expect("shape matches construction")
}
