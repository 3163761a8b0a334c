//! Patch encoder producing visual tokens, transparency fusion of the two
//! token streams, and the category classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_into, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{impl_module, join, Linear, Params, TransformerBlock};
use crate::real::Real;
use crate::reconstruction::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    /// Tokens of the occluded RGB input.
    OccludedRgb,
    /// Tokens of the reconstructed object rendering.
    Reconstructed,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenSequence<T = f32> {
    pub tokens: Matrix<T>,
    pub source: TokenSource,
}

impl<T: Real> VisualTokenSequence<T> {
    pub fn new(tokens: Matrix<T>, source: TokenSource) -> Result<Self> {
        if !tokens.all_finite() {
            return Err(Error::InvalidInput("visual tokens must be finite".into()));
        }
        Ok(Self { tokens, source })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEncoderConfig {
    pub image_side: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub attention: bool,
}

impl Default for PatchEncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch: 16,
            dim: 64,
            heads: 4,
            attention: true,
        }
    }
}

impl PatchEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_side.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch size {}",
                self.image_side, self.patch
            )));
        }
        if self.attention && (self.heads == 0 || !self.dim.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "token dim {} does not split across {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Linear patch projection, optionally followed by one pre-norm
/// transformer block over all patches with learned patch positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder<P> {
    pub config: PatchEncoderConfig,
    pub proj: Linear<P>,
    pub attention: Option<Mixer<P>>,
}

/// Global mixing step: position embeddings (zero at initialization) and
/// one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer<P> {
    pub positions: P,
    pub block: TransformerBlock<P>,
}

impl<P> Mixer<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Mixer<Q> {
        Mixer {
            positions: f(&join(prefix, "positions"), &self.positions),
            block: self.block.map(&join(prefix, "block"), f),
        }
    }
}

impl<P> Params<P> for Mixer<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "positions"), &self.positions);
        self.block.visit(&join(prefix, "block"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "positions"), &mut self.positions);
        self.block.visit_mut(&join(prefix, "block"), f);
    }
}

impl<T: Real> PatchEncoder<Matrix<T>> {
    pub fn new<R: Rng>(config: PatchEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let proj = Linear::new(config.patch_pixels(), config.dim, rng);
        let attention = config
            .attention
            .then(|| Mixer {
                positions: Matrix::zeros(config.tokens(), config.dim),
                block: TransformerBlock::new(config.dim, rng),
            });
        Ok(Self {
            config,
            proj,
            attention,
        })
    }

    /// Image pixels (scaled to `[0, 1]`) as one row per patch, patches in
    /// raster order, each row laid out row-major with RGB innermost.
    pub fn patchify(&self, image: &RasterImage) -> Result<Matrix<T>> {
        let side = self.config.image_side;
        if image.width != side || image.height != side {
            return Err(Error::Shape(format!(
                "encoder expects {side}x{side} images, got {}x{}",
                image.width, image.height
            )));
        }
        let p = self.config.patch;
        let per_row = side / p;
        let mut out = Matrix::zeros(per_row * per_row, self.config.patch_pixels());
        let inv = T::of(1.0 / 255.0);
        for py in 0..per_row {
            for px in 0..per_row {
                let row = out.row_mut(py * per_row + px);
                for y in 0..p {
                    for x in 0..p {
                        let rgb = image.get(px * p + x, py * p + y);
                        for c in 0..3 {
                            row[(y * p + x) * 3 + c] = T::of(rgb[c] as f64) * inv;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// `N x D` visual tokens for one image.
    pub fn encode_image(&self, image: &RasterImage, source: TokenSource) -> Result<VisualTokenSequence<T>> {
        let patches = self.patchify(image)?;
        let mut tape = Tape::new();
        let bound = self.map("", &mut |_, m| tape.leaf(m.clone()));
        let x = tape.leaf(patches);
        let out = bound.forward(&mut tape, x);
        VisualTokenSequence::new(tape.value(out).clone(), source)
    }

    pub fn cast<U: Real>(&self) -> PatchEncoder<Matrix<U>> {
        self.map("", &mut |_, m| m.cast())
    }
}

impl<P> PatchEncoder<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> PatchEncoder<Q> {
        PatchEncoder {
            config: self.config.clone(),
            proj: self.proj.map(&join(prefix, "proj"), f),
            attention: self
                .attention
                .as_ref()
                .map(|a| a.map(&join(prefix, "attention"), f)),
        }
    }
}

impl PatchEncoder<Var> {
    /// Tokens from a patchified image already on the tape.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, patches: Var) -> Var {
        let x = self.proj.forward(tape, patches);
        match &self.attention {
            Some(m) => {
                let x = tape.add(x, m.positions);
                m.block.forward(tape, x, self.config.heads, false)
            }
            None => x,
        }
    }
}

impl<P> Params<P> for PatchEncoder<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.proj.visit(&join(prefix, "proj"), f);
        if let Some(a) = &self.attention {
            a.visit(&join(prefix, "attention"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        if let Some(a) = &mut self.attention {
            a.visit_mut(&join(prefix, "attention"), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl FusionConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        let cfg = Self { alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "fusion alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Transparency fusion `alpha * x1 + (1 - alpha) * x2` of occluded-image
/// tokens `x1` and reconstruction tokens `x2`.
pub fn fuse_tokens<T: Real>(
    x1: &VisualTokenSequence<T>,
    x2: &VisualTokenSequence<T>,
    cfg: &FusionConfig,
) -> Result<VisualTokenSequence<T>> {
    cfg.validate()?;
    if x1.source != TokenSource::OccludedRgb || x2.source != TokenSource::Reconstructed {
        return Err(Error::InvalidInput(format!(
            "fusion expects occluded-rgb and reconstructed tokens, got {:?} and {:?}",
            x1.source, x2.source
        )));
    }
    if x1.tokens.shape() != x2.tokens.shape() {
        return Err(Error::Shape(format!(
            "token shapes differ: {:?} vs {:?}",
            x1.tokens.shape(),
            x2.tokens.shape()
        )));
    }
    Ok(VisualTokenSequence {
        tokens: blend(&x1.tokens, &x2.tokens, T::of(cfg.alpha)),
        source: TokenSource::Fused,
    })
}

fn blend<T: Real>(a: &Matrix<T>, b: &Matrix<T>, alpha: T) -> Matrix<T> {
    let beta = T::one() - alpha;
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect(),
    }
}

/// Same blend on the tape.
pub fn fuse_on_tape<T: Real>(tape: &mut Tape<T>, x1: Var, x2: Var, alpha: f64) -> Var {
    let a = tape.scale(x1, T::of(alpha));
    let b = tape.scale(x2, T::of(1.0 - alpha));
    tape.add(a, b)
}

/// Mean-pooled tokens mapped to category logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryHead<P> {
    pub categories: Vec<String>,
    pub linear: Linear<P>,
}

impl<T: Real> CategoryHead<Matrix<T>> {
    pub fn new<R: Rng>(dim: usize, categories: Vec<String>, rng: &mut R) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::Config("a category head needs at least two classes".into()));
        }
        let linear = Linear::new(dim, categories.len(), rng);
        Ok(Self { categories, linear })
    }

    pub fn zeros(dim: usize, categories: Vec<String>) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::Config("a category head needs at least two classes".into()));
        }
        let linear = Linear::zeros(dim, categories.len());
        Ok(Self { categories, linear })
    }

    /// Probability over categories for one token sequence.
    pub fn classify_object(&self, tokens: &VisualTokenSequence<T>) -> Result<Vec<T>> {
        if tokens.dim() != self.linear.in_dim() {
            return Err(Error::Shape(format!(
                "head expects {}-dim tokens, got {}",
                self.linear.in_dim(),
                tokens.dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.map("", &mut |_, m| tape.leaf(m.clone()));
        let x = tape.leaf(tokens.tokens.clone());
        let logits = bound.forward(&mut tape, x);
        let logits = tape.value(logits);
        let mut probs = vec![T::zero(); logits.cols];
        softmax_into(&logits.data, &mut probs);
        Ok(probs)
    }

    pub fn cast<U: Real>(&self) -> CategoryHead<Matrix<U>> {
        self.map("", &mut |_, m| m.cast())
    }
}

impl<P> CategoryHead<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> CategoryHead<Q> {
        CategoryHead {
            categories: self.categories.clone(),
            linear: self.linear.map(&join(prefix, "linear"), f),
        }
    }
}

impl CategoryHead<Var> {
    /// `1 x C` logits.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, tokens: Var) -> Var {
        let pooled = tape.mean_rows(tokens);
        self.linear.forward(tape, pooled)
    }
}

impl<P> Params<P> for CategoryHead<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

impl_module!(PatchEncoder, CategoryHead);

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
