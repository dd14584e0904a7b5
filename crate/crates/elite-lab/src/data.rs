//! Synthetic masked-object dataset: parametric foreground shapes on varied
//! backgrounds with exact segmentation masks and category labels.
//!
//! The category catalog is a fixed 600-combination grid (10 shapes x 20
//! colors x 3 textures). A run puts the first `num_categories` combinations
//! in play and holds out every `stride`-th one as unseen concepts, so each
//! held-out shape/color pairing never appears in training while its shape
//! and its color individually do.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cli::config::RunConfig;
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const SHAPE_NAMES: [&str; 10] = [
    "circle",
    "ellipse",
    "triangle",
    "square",
    "pentagon",
    "hexagon",
    "diamond",
    "sparkle",
    "star",
    "snowflake",
];

pub const COLOR_NAMES: [&str; 20] = [
    "red", "crimson", "orange", "gold", "yellow", "lime", "green", "teal", "cyan", "azure",
    "blue", "navy", "violet", "purple", "magenta", "pink", "brown", "gray", "white", "black",
];

const COLOR_RGB: [[f64; 3]; 20] = [
    [0.85, 0.10, 0.10],
    [0.60, 0.05, 0.15],
    [0.95, 0.55, 0.10],
    [0.85, 0.70, 0.10],
    [0.95, 0.90, 0.20],
    [0.55, 0.85, 0.15],
    [0.10, 0.60, 0.15],
    [0.05, 0.55, 0.50],
    [0.10, 0.80, 0.85],
    [0.25, 0.55, 0.90],
    [0.10, 0.20, 0.80],
    [0.05, 0.10, 0.45],
    [0.50, 0.25, 0.80],
    [0.45, 0.10, 0.55],
    [0.85, 0.15, 0.75],
    [0.95, 0.55, 0.70],
    [0.50, 0.30, 0.15],
    [0.50, 0.50, 0.50],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
];

pub const TEXTURE_NAMES: [&str; 3] = ["plain", "striped", "dotted"];

/// Total category combinations in the catalog.
pub fn catalog_size() -> usize {
    SHAPE_NAMES.len() * COLOR_NAMES.len() * TEXTURE_NAMES.len()
}

/// One catalog entry decoded from its combination id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Category {
    pub shape: usize,
    pub color: usize,
    pub texture: usize,
}

/// Decodes a combination id: shapes vary fastest, then colors, then
/// textures, so the first 60 ids cover all shapes in six colors, plain.
pub fn category(combo: usize) -> Result<Category> {
    if combo >= catalog_size() {
        return Err(Error::Config(format!(
            "category id {combo} outside the {}-combination catalog",
            catalog_size()
        )));
    }
    let shape = combo % SHAPE_NAMES.len();
    let color = (combo / SHAPE_NAMES.len()) % COLOR_NAMES.len();
    let texture = combo / (SHAPE_NAMES.len() * COLOR_NAMES.len());
    Ok(Category { shape, color, texture })
}

/// Human-readable category name, e.g. "lime star" or "striped red circle".
pub fn category_name(combo: usize) -> Result<String> {
    let c = category(combo)?;
    let base = format!("{} {}", COLOR_NAMES[c.color], SHAPE_NAMES[c.shape]);
    Ok(if c.texture == 0 { base } else { format!("{} {base}", TEXTURE_NAMES[c.texture]) })
}

/// The noun used when substituting S* for metric computation: the last
/// word of the category name (its shape).
pub fn category_noun(combo: usize) -> Result<&'static str> {
    Ok(SHAPE_NAMES[category(combo)?.shape])
}

/// Combination ids used for training under a config.
pub fn train_combos(cfg: &RunConfig) -> Vec<usize> {
    let held = heldout_combos(cfg);
    (0..cfg.num_categories).filter(|c| !held.contains(c)).collect()
}

/// Held-out combination ids (unseen concepts) under a config.
pub fn heldout_combos(cfg: &RunConfig) -> Vec<usize> {
    if cfg.heldout_categories == 0 {
        return Vec::new();
    }
    let stride = (cfg.num_categories / cfg.heldout_categories).max(1);
    (0..cfg.num_categories)
        .filter(|c| c % stride == stride - 1)
        .take(cfg.heldout_categories)
        .collect()
}

/// One labeled training/evaluation image.
#[derive(Debug, Clone)]
pub struct ConceptSample<S: Scalar> {
    /// `[3, h, w]`, values in `[0, 1]`.
    pub image: Tensor<S>,
    /// `[h, w]`, values exactly 0 or 1, foreground = 1.
    pub mask: Tensor<S>,
    pub category_id: usize,
    /// Tight half-open bounds of the mask support: (x0, y0, x1, y1).
    pub bbox: (usize, usize, usize, usize),
}

/// Knobs for one generated sample.
#[derive(Debug, Clone)]
pub struct SampleSpec {
    pub combo: usize,
    pub image_size: usize,
    /// Shape radius bounds as fractions of the image side.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl SampleSpec {
    pub fn new(combo: usize, image_size: usize) -> Self {
        SampleSpec { combo, image_size, min_radius: 0.20, max_radius: 0.32 }
    }
}

fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn regular_polygon(cx: f64, cy: f64, r: f64, n: usize, rot: f64, squeeze: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = rot + i as f64 * std::f64::consts::TAU / n as f64;
            (cx + r * a.cos(), cy + squeeze * r * a.sin())
        })
        .collect()
}

fn star_polygon(cx: f64, cy: f64, r: f64, points: usize, rot: f64) -> Vec<(f64, f64)> {
    let inner = 0.45 * r;
    (0..2 * points)
        .map(|i| {
            let a = rot + i as f64 * std::f64::consts::PI / points as f64;
            let rad = if i % 2 == 0 { r } else { inner };
            (cx + rad * a.cos(), cy + rad * a.sin())
        })
        .collect()
}

struct Geometry {
    shape: usize,
    cx: f64,
    cy: f64,
    r: f64,
    rot: f64,
    verts: Vec<(f64, f64)>,
}

impl Geometry {
    fn contains(&self, px: f64, py: f64) -> bool {
        match self.shape {
            0 | 1 => {
                let b = if self.shape == 0 { self.r } else { 0.6 * self.r };
                let (s, c) = self.rot.sin_cos();
                let dx = px - self.cx;
                let dy = py - self.cy;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / self.r).powi(2) + (v / b).powi(2) <= 1.0
            }
            _ => point_in_polygon(px, py, &self.verts),
        }
    }
}

/// Generates one sample: a textured foreground shape on a contrasting
/// background with gradient and grain, plus its exact mask. Deterministic
/// given the RNG state.
pub fn gen_concept_image<S: Scalar>(
    rng: &mut ChaCha8Rng,
    spec: &SampleSpec,
) -> Result<ConceptSample<S>> {
    let size = spec.image_size;
    if size == 0 || spec.min_radius <= 0.0 || spec.max_radius < spec.min_radius {
        return Err(Error::Config(format!(
            "degenerate sample spec: size {size}, radius range {}..{}",
            spec.min_radius, spec.max_radius
        )));
    }
    let cat = category(spec.combo)?;
    let fg = COLOR_RGB[cat.color];

    let s = size as f64;
    let cx = rng.random_range(0.38..0.62) * s;
    let cy = rng.random_range(0.38..0.62) * s;
    let r = rng.random_range(spec.min_radius..=spec.max_radius) * s;
    let rot = rng.random_range(0.0..std::f64::consts::TAU);

    let verts = match cat.shape {
        0 | 1 => Vec::new(),
        2 => regular_polygon(cx, cy, r, 3, rot, 1.0),
        3 => regular_polygon(cx, cy, r, 4, rot, 1.0),
        4 => regular_polygon(cx, cy, r, 5, rot, 1.0),
        5 => regular_polygon(cx, cy, r, 6, rot, 1.0),
        6 => regular_polygon(cx, cy, r, 4, rot, 0.6),
        7 => star_polygon(cx, cy, r, 4, rot),
        8 => star_polygon(cx, cy, r, 5, rot),
        _ => star_polygon(cx, cy, r, 6, rot),
    };
    let geom = Geometry { shape: cat.shape, cx, cy, r, rot, verts };

    // Background color kept far from the foreground so masks stay
    // learnable: total channel distance at least 0.75.
    let mut bg;
    loop {
        bg = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let dist: f64 = (0..3).map(|i| (bg[i] - fg[i]).abs()).sum();
        if dist >= 0.75 {
            break;
        }
    }
    let grad_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let grad_amp = rng.random_range(0.0..0.08);
    let stripe_w = rng.random_range(3.0..6.0);
    let stripe_dir: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let dot_g = rng.random_range(3..6usize);

    let mut image = vec![S::zero(); 3 * size * size];
    let mut mask = vec![S::zero(); size * size];
    let mut any_fg = false;
    let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0usize, 0usize);

    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let noise = rng.random_range(-0.02..0.02);
            let rgb = if geom.contains(px, py) {
                mask[y * size + x] = S::one();
                any_fg = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                let shade = match cat.texture {
                    1 => {
                        let sline = px * stripe_dir.cos() + py * stripe_dir.sin();
                        if (sline / stripe_w).floor() as i64 % 2 == 0 {
                            1.0
                        } else {
                            0.45
                        }
                    }
                    2 => {
                        if x % dot_g < dot_g / 2 && y % dot_g < dot_g / 2 {
                            0.35
                        } else {
                            1.0
                        }
                    }
                    _ => 1.0,
                };
                [fg[0] * shade, fg[1] * shade, fg[2] * shade]
            } else {
                let gproj = (px / s - 0.5) * grad_dir.cos() + (py / s - 0.5) * grad_dir.sin();
                let shift = gproj * grad_amp;
                [bg[0] + shift, bg[1] + shift, bg[2] + shift]
            };
            for (c, &v) in rgb.iter().enumerate() {
                image[(c * size + y) * size + x] =
                    S::from_f64((v + noise).clamp(0.0, 1.0));
            }
        }
    }
    if !any_fg {
        return Err(Error::Config("sample spec produced a zero-area shape".into()));
    }
    Ok(ConceptSample {
        image: Tensor::new(vec![3, size, size], image)?,
        mask: Tensor::new(vec![size, size], mask)?,
        category_id: spec.combo,
        bbox: (x0, y0, x1, y1),
    })
}

/// Crops the bounding box with a 10% margin and resizes to
/// `target x target`: bilinear for the image, nearest-neighbor for the
/// mask (so it stays binary).
pub fn crop_resize<S: Scalar>(sample: &ConceptSample<S>, target: usize) -> Result<ConceptSample<S>> {
    let (x0, y0, x1, y1) = sample.bbox;
    let h = sample.mask.dim(0);
    let w = sample.mask.dim(1);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Contract("crop_resize on an empty bounding box".into()));
    }
    if x1 > w || y1 > h {
        return Err(Error::Contract(format!(
            "bbox ({x0},{y0},{x1},{y1}) outside {w}x{h} image"
        )));
    }
    let mx = ((x1 - x0) as f64 * 0.10).round() as usize;
    let my = ((y1 - y0) as f64 * 0.10).round() as usize;
    let cx0 = x0.saturating_sub(mx);
    let cy0 = y0.saturating_sub(my);
    let cx1 = (x1 + mx).min(w);
    let cy1 = (y1 + my).min(h);
    let cw = cx1 - cx0;
    let ch = cy1 - cy0;

    let mut image = vec![S::zero(); 3 * target * target];
    let mut mask = vec![S::zero(); target * target];
    let sx = cw as f64 / target as f64;
    let sy = ch as f64 / target as f64;
    for ty in 0..target {
        for tx in 0..target {
            let fx = (tx as f64 + 0.5) * sx - 0.5;
            let fy = (ty as f64 + 0.5) * sy - 0.5;
            let fx0 = fx.floor().clamp(0.0, (cw - 1) as f64) as usize;
            let fy0 = fy.floor().clamp(0.0, (ch - 1) as f64) as usize;
            let fx1 = (fx0 + 1).min(cw - 1);
            let fy1 = (fy0 + 1).min(ch - 1);
            let ax = (fx - fx0 as f64).clamp(0.0, 1.0);
            let ay = (fy - fy0 as f64).clamp(0.0, 1.0);
            for c in 0..3 {
                let at = |xx: usize, yy: usize| {
                    sample.image.data()[(c * h + cy0 + yy) * w + cx0 + xx].to_f64()
                };
                let top = at(fx0, fy0) * (1.0 - ax) + at(fx1, fy0) * ax;
                let bot = at(fx0, fy1) * (1.0 - ax) + at(fx1, fy1) * ax;
                image[(c * target + ty) * target + tx] =
                    S::from_f64(top * (1.0 - ay) + bot * ay);
            }
            let nx = (fx.round().clamp(0.0, (cw - 1) as f64)) as usize;
            let ny = (fy.round().clamp(0.0, (ch - 1) as f64)) as usize;
            mask[ty * target + tx] = sample.mask.data()[(cy0 + ny) * w + cx0 + nx];
        }
    }

    let mut bbox = (target, target, 0usize, 0usize);
    let mut any = false;
    for y in 0..target {
        for x in 0..target {
            if mask[y * target + x] > S::zero() {
                any = true;
                bbox.0 = bbox.0.min(x);
                bbox.1 = bbox.1.min(y);
                bbox.2 = bbox.2.max(x + 1);
                bbox.3 = bbox.3.max(y + 1);
            }
        }
    }
    if !any {
        return Err(Error::Contract("crop_resize erased the mask".into()));
    }
    Ok(ConceptSample {
        image: Tensor::new(vec![3, target, target], image)?,
        mask: Tensor::new(vec![target, target], mask)?,
        category_id: sample.category_id,
        bbox,
    })
}

/// Which category pool a sample is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

/// Deterministic dataset access: sample `index` under `seed` is always the
/// same object-centric crop. The category cycles through the split's pool
/// while geometry, texture phase and background vary per index.
pub fn dataset_sample<S: Scalar>(
    cfg: &RunConfig,
    split: Split,
    seed: u64,
    index: usize,
) -> Result<ConceptSample<S>> {
    let pool = match split {
        Split::Train => train_combos(cfg),
        Split::Heldout => heldout_combos(cfg),
    };
    if pool.is_empty() {
        return Err(Error::Config("dataset split has no categories".into()));
    }
    let combo = pool[index % pool.len()];
    sample_for_combo(cfg, combo, seed, index)
}

/// Deterministic sample of a specific category combination.
pub fn sample_for_combo<S: Scalar>(
    cfg: &RunConfig,
    combo: usize,
    seed: u64,
    index: usize,
) -> Result<ConceptSample<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6461_7461_0000_0000 ^ index as u64);
    let spec = SampleSpec::new(combo, cfg.image_size);
    let scene = gen_concept_image(&mut rng, &spec)?;
    crop_resize(&scene, cfg.image_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig::default()
    }

    #[test]
    fn catalog_has_600_combinations() {
        assert_eq!(catalog_size(), 600);
        assert_eq!(category_name(0).unwrap(), "red circle");
        let last = category(599).unwrap();
        assert_eq!(last.texture, 2);
        assert!(category(600).is_err());
    }

    #[test]
    fn fixed_seed_gives_bit_identical_sample() {
        let a: ConceptSample<f32> = dataset_sample(&cfg(), Split::Train, 7, 42).unwrap();
        let b: ConceptSample<f32> = dataset_sample(&cfg(), Split::Train, 7, 42).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask.data(), b.mask.data());
        assert_eq!(a.bbox, b.bbox);
    }

    #[test]
    fn mask_is_binary_and_bbox_tight() {
        let s: ConceptSample<f32> = dataset_sample(&cfg(), Split::Train, 1, 5).unwrap();
        let size = s.mask.dim(0);
        let mut count = 0usize;
        for &v in s.mask.data() {
            assert!(v == 0.0 || v == 1.0);
            count += (v == 1.0) as usize;
        }
        assert!(count > 0);
        let (x0, y0, x1, y1) = s.bbox;
        let mut seen_edge_col = false;
        for y in 0..size {
            if s.mask.data()[y * size + x0] == 1.0 {
                seen_edge_col = true;
            }
            for x in 0..x0 {
                assert_eq!(s.mask.data()[y * size + x], 0.0);
            }
            for x in x1..size {
                assert_eq!(s.mask.data()[y * size + x], 0.0);
            }
        }
        assert!(seen_edge_col);
        assert!(y0 < y1 && y1 <= size);
    }

    #[test]
    fn heldout_pairs_do_not_appear_in_training() {
        let c = cfg();
        let train = train_combos(&c);
        let held = heldout_combos(&c);
        assert_eq!(held.len(), 20);
        assert_eq!(train.len(), 40);
        for h in &held {
            assert!(!train.contains(h));
            let hc = category(*h).unwrap();
            assert!(train.iter().any(|t| category(*t).unwrap().shape == hc.shape));
            assert!(train.iter().any(|t| category(*t).unwrap().color == hc.color));
        }
    }

    #[test]
    fn foreground_background_contrast_holds() {
        for idx in 0..10 {
            let s: ConceptSample<f64> = dataset_sample(&cfg(), Split::Train, 3, idx).unwrap();
            let size = s.mask.dim(0);
            let mut fg = [0.0f64; 3];
            let mut bg = [0.0f64; 3];
            let mut nfg = 0.0;
            let mut nbg = 0.0;
            for y in 0..size {
                for x in 0..size {
                    let m = s.mask.data()[y * size + x];
                    for c in 0..3 {
                        let v = s.image.data()[(c * size + y) * size + x];
                        if m == 1.0 {
                            fg[c] += v;
                        } else {
                            bg[c] += v;
                        }
                    }
                    if m == 1.0 {
                        nfg += 1.0;
                    } else {
                        nbg += 1.0;
                    }
                }
            }
            let dist: f64 =
                (0..3).map(|c| (fg[c] / nfg - bg[c] / nbg).abs()).sum();
            assert!(dist > 0.2, "index {idx}: contrast {dist}");
        }
    }

    #[test]
    fn crop_resize_full_bbox_is_pure_resize_and_mask_stays_binary() {
        let mut s: ConceptSample<f32> = dataset_sample(&cfg(), Split::Train, 2, 0).unwrap();
        s.bbox = (0, 0, s.mask.dim(1), s.mask.dim(0));
        let r = crop_resize(&s, 32).unwrap();
        assert_eq!(r.image.shape(), &[3, 32, 32]);
        for &v in r.mask.data() {
            assert!(v == 0.0 || v == 1.0);
        }
    }
}
