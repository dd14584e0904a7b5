//! Convolutional latent autoencoder: images down to a factor-4 latent
//! grid and back, plus per-channel latent standardization so the
//! diffusion process sees roughly unit-variance inputs.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::params::{ParamRef, ParamSet};
use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv, GroupNorm};

pub const DOWN_FACTOR: usize = 4;

/// Encoder/decoder pair with stored latent statistics. The statistics are
/// plain parameters so they travel inside checkpoints, but they are set
/// programmatically after training, never by gradient steps.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    enc1: Conv,
    enc_gn1: GroupNorm,
    enc2: Conv,
    enc_gn2: GroupNorm,
    enc3: Conv,
    enc_gn3: GroupNorm,
    enc4: Conv,
    dec1: Conv,
    dec_gn1: GroupNorm,
    dec2: Conv,
    dec_gn2: GroupNorm,
    dec3: Conv,
    dec_gn3: GroupNorm,
    dec4: Conv,
    pub latent_mean: ParamRef,
    pub latent_std: ParamRef,
    pub latent_channels: usize,
}

impl Autoencoder {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        latent_channels: usize,
        groups: usize,
    ) -> Result<Self> {
        let c = channels;
        let p = |n: &str| format!("{prefix}.{n}");
        Ok(Autoencoder {
            enc1: Conv::new(ps, rng, &p("enc1"), 3, c, 3, 1, 1)?,
            enc_gn1: GroupNorm::new(ps, &p("enc1.gn"), c, groups)?,
            enc2: Conv::new(ps, rng, &p("enc2"), c, c, 3, 2, 1)?,
            enc_gn2: GroupNorm::new(ps, &p("enc2.gn"), c, groups)?,
            enc3: Conv::new(ps, rng, &p("enc3"), c, 2 * c, 3, 2, 1)?,
            enc_gn3: GroupNorm::new(ps, &p("enc3.gn"), 2 * c, groups)?,
            enc4: Conv::new(ps, rng, &p("enc4"), 2 * c, latent_channels, 3, 1, 1)?,
            dec1: Conv::new(ps, rng, &p("dec1"), latent_channels, 2 * c, 3, 1, 1)?,
            dec_gn1: GroupNorm::new(ps, &p("dec1.gn"), 2 * c, groups)?,
            dec2: Conv::new(ps, rng, &p("dec2"), 2 * c, c, 3, 1, 1)?,
            dec_gn2: GroupNorm::new(ps, &p("dec2.gn"), c, groups)?,
            dec3: Conv::new(ps, rng, &p("dec3"), c, c, 3, 1, 1)?,
            dec_gn3: GroupNorm::new(ps, &p("dec3.gn"), c, groups)?,
            dec4: Conv::new(ps, rng, &p("dec4"), c, 3, 3, 1, 1)?,
            latent_mean: ps.register(&p("latent_mean"), Tensor::zeros(vec![latent_channels]))?,
            latent_std: ps.register(
                &p("latent_std"),
                Tensor::full(vec![latent_channels], S::one()),
            )?,
            latent_channels,
        })
    }

    fn check_divisible(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("expected a [3, h, w] image, got {shape:?}")));
        }
        if shape[1] % DOWN_FACTOR != 0 || shape[2] % DOWN_FACTOR != 0 {
            return Err(Error::Shape(format!(
                "image extent {}x{} not divisible by {DOWN_FACTOR}",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }

    /// Raw encoder forward on the tape: `[3, h, w]` to
    /// `[latent_channels, h/4, w/4]`, no standardization.
    pub fn encode<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, image: Var) -> Result<Var> {
        self.check_divisible(&tape.shape(image))?;
        let mut h = self.enc1.forward(tape, ps, image)?;
        h = tape.silu(self.enc_gn1.forward(tape, ps, h)?);
        h = self.enc2.forward(tape, ps, h)?;
        h = tape.silu(self.enc_gn2.forward(tape, ps, h)?);
        h = self.enc3.forward(tape, ps, h)?;
        h = tape.silu(self.enc_gn3.forward(tape, ps, h)?);
        self.enc4.forward(tape, ps, h)
    }

    /// Raw decoder forward on the tape: latent back to `[3, h, w]`.
    pub fn decode<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, z: Var) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.len() != 3 || shape[0] != self.latent_channels {
            return Err(Error::Shape(format!(
                "expected a [{}, h, w] latent, got {shape:?}",
                self.latent_channels
            )));
        }
        let mut h = self.dec1.forward(tape, ps, z)?;
        h = tape.silu(self.dec_gn1.forward(tape, ps, h)?);
        h = tape.upsample2x(h)?;
        h = self.dec2.forward(tape, ps, h)?;
        h = tape.silu(self.dec_gn2.forward(tape, ps, h)?);
        h = tape.upsample2x(h)?;
        h = self.dec3.forward(tape, ps, h)?;
        h = tape.silu(self.dec_gn3.forward(tape, ps, h)?);
        self.dec4.forward(tape, ps, h)
    }

    /// Mean squared reconstruction error of one image, on the tape.
    pub fn recon_loss<S: Scalar>(
        &self,
        tape: &Tape<S>,
        ps: &ParamSet<S>,
        image: &Tensor<S>,
    ) -> Result<Var> {
        let x = tape.leaf(image.clone());
        let z = self.encode(tape, ps, x)?;
        let y = self.decode(tape, ps, z)?;
        let d = tape.sub(y, x)?;
        let sq = tape.mul(d, d)?;
        tape.mean_all(sq)
    }

    /// Frozen encode of an image into the standardized latent space the
    /// denoiser is trained in.
    pub fn encode_latent<S: Scalar>(&self, ps: &ParamSet<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let x = tape.leaf(image.clone());
        let z = self.encode(&tape, ps, x)?;
        self.standardize(ps, &tape.value(z))
    }

    /// Frozen decode of a standardized latent into a `[3, h, w]` image
    /// clamped to [0, 1].
    pub fn decode_latent<S: Scalar>(&self, ps: &ParamSet<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        let raw = self.unstandardize(ps, z)?;
        let tape = Tape::new();
        let zv = tape.leaf(raw);
        let img = self.decode(&tape, ps, zv)?;
        Ok(tape.value(img).map(|v| {
            let f = v.to_f64().clamp(0.0, 1.0);
            S::from_f64(f)
        }))
    }

    fn channel_stats<S: Scalar>(&self, ps: &ParamSet<S>) -> (Vec<f64>, Vec<f64>) {
        let mean = ps.get(self.latent_mean).to_f64_vec();
        let std = ps.get(self.latent_std).to_f64_vec();
        (mean, std)
    }

    /// (z − μ_c) / σ_c per channel.
    pub fn standardize<S: Scalar>(&self, ps: &ParamSet<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        self.apply_stats(ps, z, |v, m, s| (v - m) / s)
    }

    /// z · σ_c + μ_c per channel.
    pub fn unstandardize<S: Scalar>(&self, ps: &ParamSet<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        self.apply_stats(ps, z, |v, m, s| v * s + m)
    }

    fn apply_stats<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        z: &Tensor<S>,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<Tensor<S>> {
        let shape = z.shape().to_vec();
        if shape.len() != 3 || shape[0] != self.latent_channels {
            return Err(Error::Shape(format!(
                "expected a [{}, h, w] latent, got {shape:?}",
                self.latent_channels
            )));
        }
        let (mean, std) = self.channel_stats(ps);
        let hw = shape[1] * shape[2];
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| S::from_f64(f(v.to_f64(), mean[i / hw], std[i / hw])))
            .collect();
        Tensor::new(shape, data)
    }

    /// Computes per-channel mean/std over raw encoded latents and stores
    /// them in the stat parameters (std floored at 1e-3).
    pub fn fit_latent_stats<S: Scalar>(
        &self,
        ps: &mut ParamSet<S>,
        latents: &[Tensor<S>],
    ) -> Result<()> {
        if latents.is_empty() {
            return Err(Error::Contract("need at least one latent to fit statistics".into()));
        }
        let c = self.latent_channels;
        let mut sum = vec![0.0_f64; c];
        let mut sumsq = vec![0.0_f64; c];
        let mut count = vec![0.0_f64; c];
        for z in latents {
            let shape = z.shape();
            if shape.len() != 3 || shape[0] != c {
                return Err(Error::Shape(format!("latent shape {shape:?} does not match")));
            }
            let hw = shape[1] * shape[2];
            for (i, &v) in z.data().iter().enumerate() {
                let ch = i / hw;
                let f = v.to_f64();
                sum[ch] += f;
                sumsq[ch] += f * f;
                count[ch] += 1.0;
            }
        }
        let mean = ps.get_mut(self.latent_mean).data_mut();
        for ch in 0..c {
            mean[ch] = S::from_f64(sum[ch] / count[ch]);
        }
        let std = ps.get_mut(self.latent_std).data_mut();
        for ch in 0..c {
            let m = sum[ch] / count[ch];
            let var = (sumsq[ch] / count[ch] - m * m).max(0.0);
            std[ch] = S::from_f64(var.sqrt().max(1e-3));
        }
        Ok(())
    }
}
