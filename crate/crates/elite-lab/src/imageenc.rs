//! Hierarchical image feature extractor: a small patch-token transformer
//! whose intermediate blocks are tapped, standing in for a large frozen
//! vision encoder. The deepest tap carries subject identity; shallower
//! taps feed the auxiliary words.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::params::{ParamRef, ParamSet};
use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerBlock};

/// Token grids from the tapped blocks, deepest first, plus their pooled
/// vectors.
#[derive(Debug, Clone)]
pub struct TapFeatures<S: Scalar> {
    /// Each grid is `[p*p, c]`, tokens in row-major spatial order.
    pub grids: Vec<Tensor<S>>,
    /// Mean over token positions of each grid, length `c`.
    pub pooled: Vec<Tensor<S>>,
    /// 1-based block indices the grids were taken from, deepest first.
    pub tap_layer_ids: Vec<usize>,
}

/// Mean over the token positions of a `[tokens, c]` grid.
pub fn pool_features<S: Scalar>(grid: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = grid.as_matrix_dims();
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("pool_features on an empty grid".into()));
    }
    let mut out = vec![S::zero(); cols];
    for chunk in grid.data().chunks(cols) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    let n = S::from_f64(rows as f64);
    for o in out.iter_mut() {
        *o /= n;
    }
    Tensor::new(vec![cols], out)
}

/// Patch-token transformer with learned positional embeddings.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub pos: ParamRef,
    pub blocks: Vec<TransformerBlock>,
    pub patch_size: usize,
    pub dim: usize,
    /// Token grid side `p`.
    pub grid: usize,
}

impl ImageEncoder {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        image_size: usize,
        patch_size: usize,
        dim: usize,
        blocks: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if patch_size == 0 || image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {patch_size} must divide image size {image_size}"
            )));
        }
        let grid = image_size / patch_size;
        let patch_embed = Linear::new(
            ps,
            rng,
            &format!("{prefix}.patch"),
            3 * patch_size * patch_size,
            dim,
            true,
        )?;
        let pos = ps.register(
            &format!("{prefix}.pos"),
            Tensor::randn(vec![grid * grid, dim], 0.02, rng),
        )?;
        let blocks = (0..blocks)
            .map(|i| TransformerBlock::new(ps, rng, &format!("{prefix}.block{i}"), dim, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageEncoder { patch_embed, pos, blocks, patch_size, dim, grid })
    }

    /// Rearranges `[3, h, w]` pixels into a `[p*p, 3*ps*ps]` patch matrix.
    fn patchify<S: Scalar>(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        if image.shape().len() != 3 || image.dim(0) != 3 {
            return Err(Error::Shape(format!(
                "encoder input must be [3, h, w], got {:?}",
                image.shape()
            )));
        }
        let (h, w) = (image.dim(1), image.dim(2));
        let ps = self.patch_size;
        if h % ps != 0 || w % ps != 0 || h / ps != self.grid || w / ps != self.grid {
            return Err(Error::Shape(format!(
                "image {h}x{w} does not match grid {}x{} of patch size {ps}",
                self.grid, self.grid
            )));
        }
        let mut data = vec![S::zero(); self.grid * self.grid * 3 * ps * ps];
        let row_len = 3 * ps * ps;
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let tok = gy * self.grid + gx;
                for c in 0..3 {
                    for py in 0..ps {
                        for px in 0..ps {
                            data[tok * row_len + (c * ps + py) * ps + px] =
                                image.data()[(c * h + gy * ps + py) * w + gx * ps + px];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.grid * self.grid, row_len], data)
    }

    /// Runs the transformer on a tape and returns the post-block token
    /// grid Vars for the requested taps, in the given (deepest-first)
    /// order.
    pub fn forward_taps<S: Scalar>(
        &self,
        tape: &Tape<S>,
        ps: &ParamSet<S>,
        image: &Tensor<S>,
        taps: &[usize],
    ) -> Result<Vec<Var>> {
        for &t in taps {
            if t == 0 || t > self.blocks.len() {
                return Err(Error::Config(format!(
                    "tap index {t} outside 1..={}",
                    self.blocks.len()
                )));
            }
        }
        let patches = tape.leaf(self.patchify(image)?);
        let mut x = self.patch_embed.forward(tape, ps, patches)?;
        x = tape.add(x, tape.param(ps, self.pos))?;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(tape, ps, x)?;
            per_block.push(x);
        }
        Ok(taps.iter().map(|&t| per_block[t - 1]).collect())
    }

    /// Frozen-weight encoding: token grids and pooled vectors for each
    /// tap, deepest first.
    pub fn encode_image<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        image: &Tensor<S>,
        taps: &[usize],
    ) -> Result<TapFeatures<S>> {
        let tape = Tape::new();
        let vars = self.forward_taps(&tape, ps, image, taps)?;
        let grids: Vec<Tensor<S>> = vars.iter().map(|&v| tape.value(v)).collect();
        let pooled = grids.iter().map(pool_features).collect::<Result<Vec<_>>>()?;
        Ok(TapFeatures { grids, pooled, tap_layer_ids: taps.to_vec() })
    }

    /// Pooled deepest-block embedding, the metric embedding of an image.
    pub fn embed<S: Scalar>(&self, ps: &ParamSet<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
        let deepest = self.blocks.len();
        let feats = self.encode_image(ps, image, &[deepest])?;
        Ok(feats.pooled.into_iter().next().expect("one tap requested"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_encoder() -> (ParamSet<f32>, ImageEncoder) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ImageEncoder::new(&mut ps, &mut rng, "imgenc", 16, 4, 8, 3, 2).unwrap();
        (ps, enc)
    }

    fn random_image(seed: u64, size: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(vec![3, size, size], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn tap_grids_have_token_by_channel_shape() {
        let (ps, enc) = small_encoder();
        let feats = enc.encode_image(&ps, &random_image(0, 16), &[3, 1, 2]).unwrap();
        assert_eq!(feats.grids.len(), 3);
        assert_eq!(feats.tap_layer_ids, vec![3, 1, 2]);
        for g in &feats.grids {
            assert_eq!(g.shape(), &[16, 8]);
        }
        for p in &feats.pooled {
            assert_eq!(p.shape(), &[8]);
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let (ps, enc) = small_encoder();
        let img = random_image(5, 16);
        let a = enc.encode_image(&ps, &img, &[3, 1]).unwrap();
        let b = enc.encode_image(&ps, &img, &[3, 1]).unwrap();
        for (ga, gb) in a.grids.iter().zip(&b.grids) {
            assert_eq!(ga.data(), gb.data());
        }
    }

    #[test]
    fn invalid_tap_index_is_a_config_error() {
        let (ps, enc) = small_encoder();
        let r = enc.encode_image(&ps, &random_image(0, 16), &[4]);
        assert!(matches!(r, Err(Error::Config(_))));
        let r0 = enc.encode_image(&ps, &random_image(0, 16), &[0]);
        assert!(matches!(r0, Err(Error::Config(_))));
    }

    #[test]
    fn swapping_patches_changes_tap_tokens() {
        let (ps, enc) = small_encoder();
        let img = random_image(9, 16);
        let mut swapped = img.clone();
        // Swap the two top-left 4x4 patches in every channel.
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let i = (c * 16 + y) * 16 + x;
                    let j = (c * 16 + y) * 16 + x + 4;
                    let d = swapped.data_mut();
                    d.swap(i, j);
                }
            }
        }
        let a = enc.encode_image(&ps, &img, &[3]).unwrap();
        let b = enc.encode_image(&ps, &swapped, &[3]).unwrap();
        assert_ne!(a.grids[0].data(), b.grids[0].data());
    }

    #[test]
    fn pool_features_matches_hand_mean_and_ignores_order() {
        let grid = Tensor::<f64>::new(vec![2, 3], vec![1.0, 0.0, 2.0, 3.0, 4.0, 6.0]).unwrap();
        let pooled = pool_features(&grid).unwrap();
        assert_eq!(pooled.data(), &[2.0, 2.0, 4.0]);
        let permuted = Tensor::<f64>::new(vec![2, 3], vec![3.0, 4.0, 6.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(pool_features(&permuted).unwrap().data(), pooled.data());
        let constant = Tensor::<f64>::full(vec![5, 2], 7.0);
        assert_eq!(pool_features(&constant).unwrap().data(), &[7.0, 7.0]);
    }

    #[test]
    fn pool_features_rejects_empty_grid() {
        let empty = Tensor::<f64>::zeros(vec![0, 3]);
        assert!(matches!(pool_features(&empty), Err(Error::Shape(_))));
    }
}
