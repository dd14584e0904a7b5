//! Local mapping network: patch-level features of the masked concept
//! image projected into the textual feature space, injected through
//! dedicated key/value projections, reweighted by the primary word's
//! attention, and fused additively with the global attention branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::optim::OptimizerState;
use crate::diffcore::params::ParamSet;
use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imageenc::ImageEncoder;
use crate::ldm::unet::LocalContext;
use crate::model::{Model, PreparedSample, StepStats};
use crate::nn::Linear;
use crate::textenc::{sample_template, InjectMode};

/// Patch-grid features of a masked concept image along with the
/// patch-level binary mask, both with p×p spatial extent.
#[derive(Debug, Clone)]
pub struct LocalFeatureMap<S: Scalar> {
    /// `[p*p, d_ctx]` feature grid in textual feature space.
    pub grid: Tensor<S>,
    /// `[p*p]` mask with entries in {0, 1}.
    pub mask: Tensor<S>,
}

impl<S: Scalar> LocalFeatureMap<S> {
    pub fn side(&self) -> usize {
        (self.mask.numel() as f64).sqrt() as usize
    }
}

/// Positionwise three-layer MLP from channel-stacked tap features to the
/// textual feature dimension. The final layer starts at zero so the local
/// branch is initially silent.
#[derive(Debug, Clone)]
pub struct LocalMapper {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LocalMapper {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let hidden = 2 * out_dim;
        Ok(LocalMapper {
            fc1: Linear::new(ps, rng, &format!("{prefix}.fc1"), in_dim, hidden, true)?,
            fc2: Linear::new(ps, rng, &format!("{prefix}.fc2"), hidden, hidden, true)?,
            fc3: Linear::new_zeroed(ps, &format!("{prefix}.fc3"), hidden, out_dim, true)?,
            in_dim,
            out_dim,
        })
    }

    /// Applies the MLP to every row of a `[p*p, in_dim]` matrix.
    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let h = tape.gelu(self.fc1.forward(tape, ps, x)?);
        let h = tape.gelu(self.fc2.forward(tape, ps, h)?);
        self.fc3.forward(tape, ps, h)
    }
}

/// Masks the image, runs the frozen hierarchical encoder, and stacks the
/// tap grids channelwise into the mapper's `[p*p, n_taps*c]` input,
/// together with the mask downsampled to the patch grid (area ≥ 0.5).
pub fn local_mapper_input<S: Scalar>(
    ps: &ParamSet<S>,
    enc: &ImageEncoder,
    taps_wanted: &[usize],
    image: &Tensor<S>,
    mask: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let ishape = image.shape().to_vec();
    if ishape.len() != 3 || mask.shape() != &ishape[1..] {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match image extent {:?}",
            mask.shape(),
            &ishape[1..]
        )));
    }
    let (h, w) = (ishape[1], ishape[2]);
    let mut masked = image.clone();
    for c in 0..3 {
        for (i, v) in masked.data_mut()[c * h * w..(c + 1) * h * w].iter_mut().enumerate() {
            *v *= mask.data()[i];
        }
    }
    let taps = enc.encode_image(ps, &masked, taps_wanted)?;
    let p2 = taps.grids[0].dim(0);
    let c = taps.grids[0].dim(1);
    let n = taps.grids.len();
    let mut stacked = vec![S::zero(); p2 * n * c];
    for (g, grid) in taps.grids.iter().enumerate() {
        for pos in 0..p2 {
            let src = &grid.data()[pos * c..(pos + 1) * c];
            stacked[pos * n * c + g * c..pos * n * c + (g + 1) * c].copy_from_slice(src);
        }
    }
    let p = (p2 as f64).sqrt() as usize;
    let down = downsample_mask(mask, p)?;
    Ok((Tensor::new(vec![p2, n * c], stacked)?, down))
}

/// Averages the pixel mask over p×p blocks and thresholds at 0.5.
pub fn downsample_mask<S: Scalar>(mask: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let shape = mask.shape();
    if shape.len() != 2 || shape[0] % p != 0 || shape[1] % p != 0 {
        return Err(Error::Shape(format!(
            "mask {shape:?} does not divide into a {p}x{p} grid"
        )));
    }
    let (bh, bw) = (shape[0] / p, shape[1] / p);
    let mut out = vec![S::zero(); p * p];
    for by in 0..p {
        for bx in 0..p {
            let mut acc = 0.0;
            for y in 0..bh {
                for x in 0..bw {
                    acc += mask.data()[(by * bh + y) * shape[1] + bx * bw + x].to_f64();
                }
            }
            if acc / (bh * bw) as f64 >= 0.5 {
                out[by * p + bx] = S::one();
            }
        }
    }
    Tensor::new(vec![p * p], out)
}

/// Frozen local encoding of one masked image into a [`LocalFeatureMap`].
pub fn map_local<S: Scalar>(
    ps: &ParamSet<S>,
    enc: &ImageEncoder,
    mapper: &LocalMapper,
    taps_wanted: &[usize],
    image: &Tensor<S>,
    mask: &Tensor<S>,
) -> Result<LocalFeatureMap<S>> {
    let (stacked, down) = local_mapper_input(ps, enc, taps_wanted, image, mask)?;
    let tape = Tape::new();
    let x = tape.leaf(stacked);
    let grid = mapper.forward(&tape, ps, x)?;
    Ok(LocalFeatureMap { grid: tape.value(grid), mask: down })
}

/// Attention of latent-token queries over masked patch features:
/// K = W_K·(e ⊙ m), V = W_V·(e ⊙ m) through bias-free projections,
/// A = softmax(Q Kᵀ/√d'). Returns the map, the value matrix, and A·V.
pub fn local_attention<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    q: Var,
    grid: Var,
    mask: Var,
    wk: &Linear,
    wv: &Linear,
) -> Result<(Var, Var, Var)> {
    if wk.b.is_some() || wv.b.is_some() {
        return Err(Error::Contract("local key/value projections must be bias-free".into()));
    }
    if tape.shape(grid)[0] != tape.shape(mask)[0] {
        return Err(Error::Shape(format!(
            "grid has {} patches but mask has {}",
            tape.shape(grid)[0],
            tape.shape(mask)[0]
        )));
    }
    let masked = tape.mul_col(grid, mask)?;
    let k = wk.forward(tape, ps, masked)?;
    let v = wv.forward(tape, ps, masked)?;
    let d = tape.shape(q)[1];
    if tape.shape(k)[1] != d {
        return Err(Error::Shape(format!(
            "query dim {d} does not match key dim {}",
            tape.shape(k)[1]
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.scale(tape.matmul(q, kt)?, S::from_f64(1.0 / (d as f64).sqrt()));
    let attn = tape.softmax_lastdim(scores)?;
    let out = tape.matmul(attn, v)?;
    Ok((attn, v, out))
}

/// Scales each query row of the local map by that query's attention to
/// the primary word, normalized by the column maximum. Rows are not
/// renormalized afterwards, so they may sum to less than one.
pub fn reweight_attention<S: Scalar>(
    tape: &Tape<S>,
    a_local: Var,
    a_global: Var,
    w0_position: usize,
) -> Result<Var> {
    let gshape = tape.shape(a_global);
    let lshape = tape.shape(a_local);
    if gshape.len() != 2 || lshape.len() != 2 || gshape[0] != lshape[0] {
        return Err(Error::Shape(format!(
            "attention maps {lshape:?} and {gshape:?} must share the query count"
        )));
    }
    if w0_position >= gshape[1] {
        return Err(Error::Shape(format!(
            "word position {w0_position} outside the {} context columns",
            gshape[1]
        )));
    }
    let gt = tape.transpose(a_global)?;
    let col = tape.slice_rows(gt, w0_position, 1)?;
    let col = tape.reshape(col, vec![gshape[0]])?;
    let peak = tape.max_all(col)?;
    if tape.item(peak)?.to_f64() <= 0.0 {
        return Err(Error::Numeric(
            "primary-word attention column is all zero; cannot reweight".into(),
        ));
    }
    let ratio = tape.div_scalar_var(col, peak)?;
    tape.mul_col(a_local, ratio)
}

/// Additive fusion of the two attention outputs: global + λ · local.
/// λ = 0 returns the global tokens unchanged.
pub fn fuse<S: Scalar>(tape: &Tape<S>, global: Var, local: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("fusion weight must be nonnegative, got {lambda}")));
    }
    if tape.shape(global) != tape.shape(local) {
        return Err(Error::Shape(format!(
            "fusion operands differ: {:?} vs {:?}",
            tape.shape(global),
            tape.shape(local)
        )));
    }
    if lambda == 0.0 {
        return Ok(global);
    }
    tape.add(global, tape.scale(local, S::from_f64(lambda)))
}

/// The pieces of the stage-2 objective for one sample at a fixed
/// (template, timestep, noise) triple.
pub struct LocalLossParts {
    pub loss: Var,
    pub ldm: Var,
    pub values_l1: Var,
}

/// L_local = L_LDM + λ_local · Σ‖V^l‖₁ over the cross-attention blocks
/// carrying the local branch; the text condition splices w0 only.
pub fn local_loss<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    model: &Model,
    prep: &PreparedSample<S>,
    template: &str,
    t: usize,
    eps: &Tensor<S>,
) -> Result<LocalLossParts> {
    let cfg = &model.config;
    if cfg.lambda_local < 0.0 {
        return Err(Error::Config(format!(
            "lambda_local must be nonnegative, got {}",
            cfg.lambda_local
        )));
    }
    let concept = crate::globalmap::encode_concept(ps, &model.global_mapper, &prep.taps)?;

    let tok = model.text_encoder.tokenize(template)?;
    let words = tape.leaf(concept.words.clone());
    let embedded =
        model.text_encoder.inject_concept(tape, ps, &tok, Some(words), InjectMode::PrimaryOnly)?;
    let ctx = model.text_encoder.encode_text(tape, ps, embedded)?;
    let w0_position = tok
        .placeholder_position
        .ok_or_else(|| Error::Contract(format!("template has no placeholder: {template}")))?;

    let (stacked, down) =
        local_mapper_input(ps, &model.image_encoder, &cfg.img_taps, &prep.image, &prep.mask)?;
    let grid = model.local_mapper.forward(tape, ps, tape.leaf(stacked))?;
    let local = LocalContext {
        grid,
        mask: tape.leaf(down),
        w0_position,
        reweight: cfg.reweight_in_training,
        deepest_only: cfg.local_deepest_only,
    };

    let out = model.unet.forward(
        tape,
        ps,
        tape.leaf(model.schedule.add_noise(&prep.z0, t, eps)?),
        t,
        ctx,
        Some(&local),
        cfg.lambda_train,
    )?;
    let eps_leaf = tape.leaf(eps.clone());
    let diff = tape.sub(out.eps, eps_leaf)?;
    let ldm = tape.mean_all(tape.mul(diff, diff)?)?;

    let mut values_l1: Option<Var> = None;
    for rec in &out.records {
        if let Some(local_rec) = &rec.local {
            let term = tape.l1_all(local_rec.values);
            values_l1 = Some(match values_l1 {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let values_l1 = values_l1
        .ok_or_else(|| Error::Contract("no cross-attention block carried the local branch".into()))?;
    let loss = tape.add(ldm, tape.scale(values_l1, S::from_f64(cfg.lambda_local)))?;
    Ok(LocalLossParts { loss, ldm, values_l1 })
}

/// Predicate selecting exactly the stage-2 trainable parameters: the
/// local mapper and the local key/value projections.
pub fn stage2_param(name: &str) -> bool {
    name.starts_with("localmap.")
        || (name.starts_with("unet.cross") && (name.contains(".kl.") || name.contains(".vl.")))
}

/// One optimizer step of stage-2 training on a batch of prepared samples;
/// returns the batch statistics. Requires a stage-1 trained model;
/// everything outside the stage-2 set stays bitwise fixed.
pub fn train_local_step<S: Scalar>(
    model: &Model,
    ps: &mut ParamSet<S>,
    opt: &mut OptimizerState<S>,
    batch: &[&PreparedSample<S>],
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    if model.stage != "global" && model.stage != "local" {
        return Err(Error::Config(format!(
            "stage-2 training requires a stage-1 checkpoint, model is at stage '{}'",
            model.stage
        )));
    }
    let refs = ps.refs_matching(stage2_param);
    let tape = Tape::with_trainable(&refs);
    let mut total: Option<Var> = None;
    let mut total_ldm: Option<Var> = None;
    for prep in batch {
        let template = sample_template(rng);
        let t = rand::Rng::random_range(rng, 1..=model.schedule.timesteps());
        let latent =
            vec![model.unet.latent_channels, model.config.latent_size(), model.config.latent_size()];
        let eps = Tensor::<S>::randn(latent, 1.0, rng);
        let parts = local_loss(&tape, ps, model, prep, template, t, &eps)?;
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
        return Err(Error::Numeric(format!("stage-2 loss became non-finite: {value}")));
    }
    let stats = StepStats { loss: value, ldm: tape.item(ldm)?.to_f64() };
    let grads = tape.backward(loss)?;
    grads.apply_to_params(&tape, ps)?;
    opt.adam_step(ps, &refs)?;
    Ok(stats)
}

/// Full stage-2 run mirroring the stage-1 loop: dataset prepared once,
/// batches cycled for the configured number of steps.
pub fn train_local<S: Scalar>(
    model: &Model,
    ps: &mut ParamSet<S>,
    mut on_step: impl FnMut(usize, StepStats),
) -> Result<Vec<StepStats>> {
    let cfg = &model.config;
    let prepared = model.prepare_dataset(ps, cfg.dataset_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7374_6167_6532_0000);
    let mut opt = OptimizerState::new(cfg.stage2_lr);
    let mut stats = Vec::with_capacity(cfg.stage2_steps);
    for step in 0..cfg.stage2_steps {
        let batch: Vec<&PreparedSample<S>> = (0..cfg.stage2_batch)
            .map(|i| &prepared[(step * cfg.stage2_batch + i) % prepared.len()])
            .collect();
        let s = train_local_step(model, ps, &mut opt, &batch, &mut rng)?;
        on_step(step, s);
        stats.push(s);
    }
    Ok(stats)
}
