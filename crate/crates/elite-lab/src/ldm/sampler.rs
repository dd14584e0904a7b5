//! Deterministic iterative sampler over the latent space with
//! classifier-free guidance and optional attention-map collection.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::params::ParamSet;
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::diffcore::tape::Tape;
use crate::error::{Error, Result};
use crate::ldm::schedule::NoiseSchedule;
use crate::ldm::unet::{unet_denoise, LocalConditioning, Unet};

/// Evenly spaced ascending timestep subsequence ending at T.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Contract("sampling needs at least one step".into()));
    }
    if steps > total {
        return Err(Error::Contract(format!(
            "{steps} sampling steps exceed the {total} training timesteps"
        )));
    }
    Ok((1..=steps).map(|i| i * total / steps).collect())
}

/// Per-block attention maps averaged over all sampling steps, for the
/// conditional branch.
#[derive(Debug, Clone)]
pub struct AttentionTrace<S: Scalar> {
    /// One `[tokens, ctx_len]` mean map per cross-attention block.
    pub per_block: Vec<Tensor<S>>,
    /// Query-grid side length per block.
    pub sides: Vec<usize>,
}

/// Deterministic denoising from seeded Gaussian noise down to a clean
/// standardized latent. ε̂ = ε̂_u + s·(ε̂_c − ε̂_u); s = 1 runs the
/// conditional branch alone so the identity is exact. The unconditional
/// branch never sees the local context.
#[allow(clippy::too_many_arguments)]
pub fn sample<S: Scalar>(
    ps: &ParamSet<S>,
    unet: &Unet,
    schedule: &NoiseSchedule,
    ctx_cond: &Tensor<S>,
    ctx_uncond: &Tensor<S>,
    latent_side: usize,
    steps: usize,
    guidance_scale: f64,
    local: Option<&LocalConditioning<S>>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    sample_traced(
        ps, unet, schedule, ctx_cond, ctx_uncond, latent_side, steps, guidance_scale, local,
        lambda, rng,
    )
    .map(|(z, _)| z)
}

/// Like [`sample`], also returning timestep-averaged attention maps.
#[allow(clippy::too_many_arguments)]
pub fn sample_traced<S: Scalar>(
    ps: &ParamSet<S>,
    unet: &Unet,
    schedule: &NoiseSchedule,
    ctx_cond: &Tensor<S>,
    ctx_uncond: &Tensor<S>,
    latent_side: usize,
    steps: usize,
    guidance_scale: f64,
    local: Option<&LocalConditioning<S>>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, AttentionTrace<S>)> {
    let ts = sampling_timesteps(schedule.timesteps(), steps)?;
    let shape = vec![unet.latent_channels, latent_side, latent_side];
    let mut z = Tensor::<S>::randn(shape, 1.0, rng);

    let mut sums: Vec<Tensor<S>> = Vec::new();
    let mut sides: Vec<usize> = Vec::new();

    for w in (0..ts.len()).rev() {
        let t = ts[w];
        let prev = if w == 0 { 0 } else { ts[w - 1] };

        let tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let cctx = tape.leaf(ctx_cond.clone());
        let local_ctx = local.map(|l| l.on_tape(&tape));
        let out = unet.forward(&tape, ps, zv, t, cctx, local_ctx.as_ref(), lambda)?;
        let e_cond = tape.value(out.eps);

        for (b, rec) in out.records.iter().enumerate() {
            let map = tape.value(rec.global);
            if sums.len() <= b {
                sums.push(Tensor::zeros(map.shape().to_vec()));
                sides.push(rec.side);
            }
            let acc = sums[b].data_mut();
            for (o, &v) in acc.iter_mut().zip(map.data()) {
                *o += v;
            }
        }

        let e_hat = if guidance_scale == 1.0 {
            e_cond
        } else {
            let uctx = tape.leaf(ctx_uncond.clone());
            let e_un = unet_denoise(&tape, ps, unet, zv, t, uctx, None, lambda)?;
            let e_un = tape.value(e_un);
            let s = S::from_f64(guidance_scale);
            let data = e_un
                .data()
                .iter()
                .zip(e_cond.data())
                .map(|(&u, &c)| u + s * (c - u))
                .collect();
            Tensor::new(e_cond.shape().to_vec(), data)?
        };
        if !e_hat.all_finite() {
            return Err(Error::Numeric(format!("noise prediction diverged at t = {t}")));
        }

        let a_t = schedule.alpha_bar(t);
        let a_p = schedule.alpha_bar(prev);
        let (sq_t, sq_n) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let (sq_p, sq_pn) = (a_p.sqrt(), (1.0 - a_p).sqrt());
        let data = z
            .data()
            .iter()
            .zip(e_hat.data())
            .map(|(&zt, &e)| {
                let pred = (zt.to_f64() - sq_n * e.to_f64()) / sq_t;
                S::from_f64(sq_p * pred + sq_pn * e.to_f64())
            })
            .collect();
        z = Tensor::new(z.shape().to_vec(), data)?;
    }

    let count = S::from_f64(ts.len() as f64);
    for sum in sums.iter_mut() {
        for v in sum.data_mut().iter_mut() {
            *v /= count;
        }
    }
    Ok((z, AttentionTrace { per_block: sums, sides }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ParamSet<f64>, Unet, NoiseSchedule) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let unet = Unet::new(&mut ps, &mut rng, "unet", 4, 8, 16, 16, 16, 4).unwrap();
        (ps, unet, NoiseSchedule::cosine(50, 0.008).unwrap())
    }

    #[test]
    fn timestep_subsequence_is_ascending_and_ends_at_t() {
        let ts = sampling_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(*ts.last().unwrap(), 1000);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        assert!(ts[0] >= 1);
        assert!(sampling_timesteps(10, 0).is_err());
        assert!(matches!(sampling_timesteps(10, 11), Err(Error::Contract(_))));
    }

    #[test]
    fn fixed_seed_gives_bit_identical_latents() {
        let (ps, unet, schedule) = setup();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let mut rngc = ChaCha8Rng::seed_from_u64(1);
        let cond = Tensor::<f64>::randn(vec![5, 16], 1.0, &mut rngc);
        let un = Tensor::<f64>::randn(vec![2, 16], 1.0, &mut rngc);
        let a = sample(&ps, &unet, &schedule, &cond, &un, 4, 5, 5.0, None, 0.0, &mut r1).unwrap();
        let b = sample(&ps, &unet, &schedule, &cond, &un, 4, 5, 5.0, None, 0.0, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[4, 4, 4]);
    }

    #[test]
    fn unit_guidance_equals_conditional_only_trajectory() {
        let (ps, unet, schedule) = setup();
        let mut rngc = ChaCha8Rng::seed_from_u64(2);
        let cond = Tensor::<f64>::randn(vec![5, 16], 1.0, &mut rngc);
        let uncond = Tensor::<f64>::randn(vec![2, 16], 1.0, &mut rngc);
        let garbage = Tensor::<f64>::full(vec![2, 16], f64::MAX / 1e10);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = sample(&ps, &unet, &schedule, &cond, &uncond, 4, 6, 1.0, None, 0.0, &mut r1)
            .unwrap();
        let b = sample(&ps, &unet, &schedule, &cond, &garbage, 4, 6, 1.0, None, 0.0, &mut r2)
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn attention_trace_covers_both_blocks_with_row_normalized_means() {
        let (ps, unet, schedule) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rngc = ChaCha8Rng::seed_from_u64(5);
        let cond = Tensor::<f64>::randn(vec![5, 16], 1.0, &mut rngc);
        let un = Tensor::<f64>::randn(vec![2, 16], 1.0, &mut rngc);
        let (_, trace) =
            sample_traced(&ps, &unet, &schedule, &cond, &un, 4, 4, 5.0, None, 0.0, &mut rng)
                .unwrap();
        assert_eq!(trace.per_block.len(), 2);
        assert_eq!(trace.sides, vec![4, 2]);
        assert_eq!(trace.per_block[0].shape(), &[16, 5]);
        assert_eq!(trace.per_block[1].shape(), &[4, 5]);
        for block in &trace.per_block {
            for row in block.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
