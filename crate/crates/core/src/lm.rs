//! Byte-level causal language model over visual tokens followed by text.
//!
//! The input is `N` mapped visual rows, a BOS row at the boundary, then the
//! prompt bytes. Decoding appends generated bytes after the prompt and stops
//! at EOS.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_into, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::matrix::Matrix;
use crate::nn::{impl_module, join, LayerNorm, Linear, Params, TransformerBlock};
use crate::real::Real;
use crate::vision::VisualTokenSequence;

pub const VOCAB_SIZE: usize = 259;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTokenSequence {
    pub ids: Vec<usize>,
}

impl TextTokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One id per UTF-8 byte. No special tokens are added.
pub fn tokenize(text: &str) -> TextTokenSequence {
    TextTokenSequence {
        ids: text.bytes().map(usize::from).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub text: String,
    /// Set when the bytes were not valid UTF-8 and replacement characters
    /// were substituted.
    pub lossy: bool,
}

/// Drops special ids and decodes the remaining bytes.
pub fn detokenize(ids: &[usize]) -> Detokenized {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
    match String::from_utf8(bytes) {
        Ok(text) => Detokenized { text, lossy: false },
        Err(e) => Detokenized {
            text: String::from_utf8_lossy(e.as_bytes()).into_owned(),
            lossy: true,
        },
    }
}

/// Prompt bytes for a question: the question followed by a newline.
pub fn prompt_ids(question: &str) -> Vec<usize> {
    let mut ids = tokenize(question).ids;
    ids.push(usize::from(b'\n'));
    ids
}

/// Text rows and next-token targets for teacher forcing on one
/// question/answer pair. Text rows are `BOS, prompt, answer`; only the rows
/// whose successor is an answer byte or the closing EOS carry a target.
pub fn answer_targets(prompt: &[usize], answer: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut text = Vec::with_capacity(1 + prompt.len() + answer.len());
    text.push(BOS);
    text.extend_from_slice(prompt);
    text.extend_from_slice(answer);
    let mut targets = vec![None; text.len()];
    let first = prompt.len();
    for (j, &t) in answer.iter().chain(std::iter::once(&EOS)).enumerate() {
        targets[first + j] = Some(t);
    }
    (text, targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub dim: usize,
    pub visual_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_positions: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: VOCAB_SIZE,
            dim: 64,
            visual_dim: 64,
            blocks: 2,
            heads: 4,
            max_positions: 160,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocabulary must have {VOCAB_SIZE} entries, got {}",
                self.vocab
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} does not split across {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_positions == 0 || self.visual_dim == 0 {
            return Err(Error::Config("empty position table or visual dim".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence<T> {
    pub embeddings: Matrix<T>,
    /// Index of the BOS row, equal to the number of visual rows.
    pub boundary: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T> {
    pub h: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<P> {
    pub config: LmConfig,
    pub token_embedding: P,
    pub visual_map: Linear<P>,
    pub positions: P,
    pub blocks: Vec<TransformerBlock<P>>,
    pub final_norm: LayerNorm<P>,
    pub head: P,
}

impl<T: Real> LmParams<Matrix<T>> {
    pub fn new<R: Rng>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        Ok(Self {
            token_embedding: Matrix::uniform(config.vocab, d, 0.1, rng),
            visual_map: Linear::new(config.visual_dim, d, rng),
            positions: Matrix::uniform(config.max_positions, d, 0.02, rng),
            blocks: (0..config.blocks).map(|_| TransformerBlock::new(d, rng)).collect(),
            final_norm: LayerNorm::new(d),
            head: Matrix::glorot(d, config.vocab, rng),
            config,
        })
    }

    pub fn cast<U: Real>(&self) -> LmParams<Matrix<U>> {
        self.map("", &mut |_, m| m.cast())
    }

    /// Affine map of each visual token into the model dimension.
    pub fn map_visual(&self, tokens: &VisualTokenSequence<T>) -> Result<Matrix<T>> {
        if tokens.dim() != self.config.visual_dim {
            return Err(Error::Shape(format!(
                "visual tokens have dim {}, map expects {}",
                tokens.dim(),
                self.config.visual_dim
            )));
        }
        let mut out = tokens.tokens.matmul(&self.visual_map.w);
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&self.visual_map.b.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Mapped visual rows, BOS, prompt embeddings, plus positions.
    pub fn build_input(&self, visual: &Matrix<T>, prompt: &[usize]) -> Result<InputSequence<T>> {
        let d = self.config.dim;
        if visual.cols != d {
            return Err(Error::Shape(format!(
                "mapped visual rows have dim {}, model dim is {d}",
                visual.cols
            )));
        }
        if let Some(&bad) = prompt.iter().find(|&&id| id >= self.config.vocab) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary")));
        }
        let n = visual.rows;
        let t = n + 1 + prompt.len();
        if t > self.config.max_positions {
            return Err(Error::Capacity {
                needed: t,
                capacity: self.config.max_positions,
            });
        }
        let mut emb = Matrix::zeros(t, d);
        for r in 0..t {
            let src = if r < n {
                visual.row(r)
            } else if r == n {
                self.token_embedding.row(BOS)
            } else {
                self.token_embedding.row(prompt[r - n - 1])
            };
            for ((o, &s), &p) in emb.row_mut(r).iter_mut().zip(src).zip(self.positions.row(r)) {
                *o = s + p;
            }
        }
        Ok(InputSequence {
            embeddings: emb,
            boundary: n,
        })
    }

    /// Final-layer hidden states under a strictly causal mask.
    pub fn forward(&self, input: &InputSequence<T>) -> Result<HiddenStates<T>> {
        if input.embeddings.cols != self.config.dim {
            return Err(Error::Shape(format!(
                "input rows have dim {}, model dim is {}",
                input.embeddings.cols, self.config.dim
            )));
        }
        if !input.embeddings.all_finite() {
            return Err(Error::Numeric { layer: 0 });
        }
        let mut tape = Tape::new();
        let bound = self.map("", &mut |_, m| tape.leaf(m.clone()));
        let mut x = tape.leaf(input.embeddings.clone());
        for (i, block) in bound.blocks.iter().enumerate() {
            x = block.forward(&mut tape, x, self.config.heads, true);
            if !tape.value(x).all_finite() {
                return Err(Error::Numeric { layer: i + 1 });
            }
        }
        let h = bound.final_norm.forward(&mut tape, x);
        if !tape.value(h).all_finite() {
            return Err(Error::Numeric {
                layer: self.config.blocks + 1,
            });
        }
        Ok(HiddenStates {
            h: tape.value(h).clone(),
        })
    }

    pub fn logits(&self, h_t: &[T]) -> Vec<T> {
        let v = self.config.vocab;
        let mut out = vec![T::zero(); v];
        for (k, &hk) in h_t.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.head.row(k)) {
                *o += hk * w;
            }
        }
        out
    }

    /// Softmax over the vocabulary-head logits of one hidden state.
    pub fn next_token_distribution(&self, h_t: &[T]) -> Vec<T> {
        let logits = self.logits(h_t);
        let mut p = vec![T::zero(); logits.len()];
        softmax_into(&logits, &mut p);
        p
    }
}

impl<P> LmParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LmParams<Q> {
        LmParams {
            config: self.config.clone(),
            token_embedding: f(&join(prefix, "token_embedding"), &self.token_embedding),
            visual_map: self.visual_map.map(&join(prefix, "visual_map"), f),
            positions: f(&join(prefix, "positions"), &self.positions),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("blocks.{i}")), f))
                .collect(),
            final_norm: self.final_norm.map(&join(prefix, "final_norm"), f),
            head: f(&join(prefix, "head"), &self.head),
        }
    }
}

impl<P> Params<P> for LmParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "token_embedding"), &self.token_embedding);
        self.visual_map.visit(&join(prefix, "visual_map"), f);
        f(&join(prefix, "positions"), &self.positions);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        f(&join(prefix, "head"), &self.head);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "token_embedding"), &mut self.token_embedding);
        self.visual_map.visit_mut(&join(prefix, "visual_map"), f);
        f(&join(prefix, "positions"), &mut self.positions);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        f(&join(prefix, "head"), &mut self.head);
    }
}

impl LmParams<Var> {
    /// Input rows on the tape: mapped visual tokens then `text` (which is
    /// expected to start with BOS), plus positions.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, visual: Var, text: &[usize]) -> Var {
        let mapped = self.visual_map.forward(tape, visual);
        let words = tape.gather(self.token_embedding, text);
        let x = tape.concat_rows(&[mapped, words]);
        let t = tape.value(x).rows;
        let pos = tape.slice_rows(self.positions, 0, t);
        tape.add(x, pos)
    }

    pub fn hidden<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(tape, x, self.config.heads, true);
        }
        self.final_norm.forward(tape, x)
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, h: Var) -> Var {
        tape.matmul(h, self.head)
    }

    /// Mean answer cross-entropy for one example. `visual` holds the raw
    /// `N x D_v` tokens.
    pub fn answer_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        visual: Var,
        prompt: &[usize],
        answer: &[usize],
    ) -> Var {
        let n = tape.value(visual).rows;
        let (text, text_targets) = answer_targets(prompt, answer);
        let x = self.embed(tape, visual, &text);
        let h = self.hidden(tape, x);
        let logits = self.logits(tape, h);
        let mut targets = vec![None; n];
        targets.extend(text_targets);
        tape.cross_entropy(logits, &targets)
    }
}

impl_module!(LmParams);

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Anything that scores the next token given the tokens generated so far.
pub trait NextTokenModel: Sync {
    fn vocab_size(&self) -> usize;

    fn eos(&self) -> usize;

    /// Natural-log probabilities over the vocabulary.
    fn log_probs(&self, generated: &[usize]) -> Result<Vec<f64>>;
}

/// The language model conditioned on mapped visual rows and a prompt.
pub struct LmDecoder<'a, T> {
    params: &'a LmParams<Matrix<T>>,
    visual: Matrix<T>,
    prompt: Vec<usize>,
}

impl<'a, T: Real> LmDecoder<'a, T> {
    /// Fails with a capacity error when `max_new` more tokens would not fit.
    pub fn new(
        params: &'a LmParams<Matrix<T>>,
        visual: Matrix<T>,
        prompt: Vec<usize>,
        max_new: usize,
    ) -> Result<Self> {
        let needed = visual.rows + 1 + prompt.len() + max_new;
        if needed > params.config.max_positions {
            return Err(Error::Capacity {
                needed,
                capacity: params.config.max_positions,
            });
        }
        Ok(Self {
            params,
            visual,
            prompt,
        })
    }
}

impl<T: Real> NextTokenModel for LmDecoder<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn log_probs(&self, generated: &[usize]) -> Result<Vec<f64>> {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(generated);
        let input = self.params.build_input(&self.visual, &ids)?;
        let h = self.params.forward(&input)?.h;
        let logits: Vec<f64> = self
            .params
            .logits(h.row(h.rows - 1))
            .into_iter()
            .map(Real::f64)
            .collect();
        Ok(log_softmax(&logits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids, including the closing EOS when finished.
    pub ids: Vec<usize>,
    /// Sum of the natural-log probabilities of `ids`.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn empty() -> Self {
        Self {
            ids: Vec::new(),
            score: 0.0,
            finished: false,
        }
    }

    /// Generated ids without the closing EOS.
    pub fn generated(&self) -> &[usize] {
        match self.ids.split_last() {
            Some((_, head)) if self.finished => head,
            _ => &self.ids,
        }
    }

    pub fn text(&self) -> Detokenized {
        detokenize(self.generated())
    }

    fn key(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.ids.is_empty() {
            self.score / self.ids.len() as f64
        } else {
            self.score
        }
    }
}

/// Higher score first, then the lexicographically smaller id sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Appends the most probable token (lowest id on ties) until EOS or
/// `max_new` tokens.
pub fn greedy_decode(model: &impl NextTokenModel, max_new: usize) -> Result<BeamHypothesis> {
    let mut hyp = BeamHypothesis::empty();
    while hyp.ids.len() < max_new {
        let lp = model.log_probs(&hyp.ids)?;
        let tok = argmax_lowest(&lp);
        hyp.ids.push(tok);
        hyp.score += lp[tok];
        if tok == model.eos() {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_new: usize,
    /// Rank completed hypotheses by mean instead of summed log-probability.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 4,
            max_new: 64,
            length_normalize: false,
        }
    }
}

/// Beam search over cumulative log-probability.
///
/// Each step expands every live hypothesis by the whole vocabulary and keeps
/// the best `width` candidates; those ending in EOS move to the finished
/// pool. The search stops once `width` finished hypotheses all score at
/// least as well as the best live one, or when live hypotheses reach
/// `max_new` tokens, at which point they count as complete too. The best
/// complete hypothesis is returned.
pub fn beam_search_decode(
    model: &impl NextTokenModel,
    cfg: &BeamConfig,
    exec: Execution,
) -> Result<BeamHypothesis> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let v = model.vocab_size();
    let eos = model.eos();
    let mut live = vec![BeamHypothesis::empty()];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..cfg.max_new {
        let expanded = exec::map_slice(exec, &live, |h| model.log_probs(&h.ids));
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (parent, lp) in expanded.into_iter().enumerate() {
            let lp = lp?;
            let base = live[parent].score;
            candidates.extend(lp.iter().enumerate().map(|(tok, &l)| (base + l, parent, tok)));
        }
        let seq = |&(_, parent, tok): &(f64, usize, usize)| {
            let mut ids = live[parent].ids.clone();
            ids.push(tok);
            ids
        };
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.1].ids.cmp(&live[b.1].ids))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(cfg.width);
        let mut next = Vec::with_capacity(cfg.width);
        for c in &candidates {
            let hyp = BeamHypothesis {
                ids: seq(c),
                score: c.0,
                finished: c.2 == eos,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if !cfg.length_normalize && finished.len() >= cfg.width {
            finished.sort_by(|a, b| rank((a.score, &a.ids), (b.score, &b.ids)));
            if finished[cfg.width - 1].score >= live[0].score {
                live.clear();
                break;
            }
        }
    }
    let best = finished
        .into_iter()
        .chain(live)
        .min_by(|a, b| {
            rank(
                (a.key(cfg.length_normalize), &a.ids),
                (b.key(cfg.length_normalize), &b.ids),
            )
        })
        .unwrap_or_else(BeamHypothesis::empty);
    Ok(best)
}

/// Summed log-probability of `ids` under teacher forcing.
pub fn sequence_log_prob(model: &impl NextTokenModel, ids: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..ids.len() {
        total += model.log_probs(&ids[..t])?[ids[t]];
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::TokenSource;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    fn small_config() -> LmConfig {
        LmConfig {
            dim: 16,
            visual_dim: 8,
            heads: 2,
            max_positions: 48,
            ..LmConfig::default()
        }
    }

    fn small_model(seed: u64) -> LmParams<Matrix<f32>> {
        LmParams::new(small_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// Prefix-hashed random logits over a small vocabulary whose last id is
    /// EOS.
    struct HashModel {
        vocab: usize,
        seed: u64,
    }

    impl NextTokenModel for HashModel {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn eos(&self) -> usize {
            self.vocab - 1
        }

        fn log_probs(&self, generated: &[usize]) -> Result<Vec<f64>> {
            let mut h = DefaultHasher::new();
            (self.seed, generated).hash(&mut h);
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Ok(log_softmax(&logits))
        }
    }

    /// Best complete sequence: EOS-terminated within `max_new`, or exactly
    /// `max_new` long.
    fn brute_force(model: &HashModel, max_new: usize) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut stack = vec![(Vec::new(), 0.0)];
        while let Some((ids, score)) = stack.pop() {
            let complete = ids.len() == max_new || ids.last() == Some(&model.eos());
            if complete {
                let better = match &best {
                    None => true,
                    Some((b, s)) => rank((score, &ids), (*s, b)) == Ordering::Less,
                };
                if better {
                    best = Some((ids, score));
                }
                continue;
            }
            let lp = model.log_probs(&ids).unwrap();
            for (tok, &l) in lp.iter().enumerate() {
                let mut next = ids.clone();
                next.push(tok);
                stack.push((next, score + l));
            }
        }
        best.unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Hi").ids, vec![72, 105]);
        assert_eq!(detokenize(&[72, 105]).text, "Hi");
        assert_eq!(detokenize(&[EOS]).text, "");
        assert_eq!(detokenize(&[72, EOS, 105]).text, "Hi");
    }

    #[test]
    fn invalid_utf8_is_flagged() {
        let out = detokenize(&[0xff, 72]);
        assert!(out.lossy);
        assert_eq!(out.text, "\u{fffd}H");
        assert!(!detokenize(&[72]).lossy);
    }

    #[test]
    fn answer_targets_cover_answer_and_eos() {
        let (text, targets) = answer_targets(&[10, 11], &[20, 21]);
        assert_eq!(text, vec![BOS, 10, 11, 20, 21]);
        assert_eq!(targets, vec![None, None, Some(20), Some(21), Some(EOS)]);
    }

    #[test]
    fn map_visual_examples() {
        let mut p = small_model(1);
        p.config.visual_dim = 16;
        p.visual_map = Linear::zeros(16, 16);
        p.visual_map.b = Matrix::from_vec(1, 16, (0..16).map(|i| i as f32).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = VisualTokenSequence::new(Matrix::uniform(5, 16, 1.0, &mut rng), TokenSource::Fused).unwrap();
        let out = p.map_visual(&x).unwrap();
        for r in 0..5 {
            assert_eq!(out.row(r), p.visual_map.b.row(0));
        }

        p.visual_map.b = Matrix::zeros(1, 16);
        for i in 0..16 {
            p.visual_map.w.set(i, i, 1.0);
        }
        assert_eq!(p.map_visual(&x).unwrap(), x.tokens);

        p.visual_map.w = Matrix::uniform(16, 16, 1.0, &mut rng);
        let doubled = VisualTokenSequence::new(x.tokens.scale(2.0), TokenSource::Fused).unwrap();
        let a = p.map_visual(&doubled).unwrap();
        let b = p.map_visual(&x).unwrap().scale(2.0);
        assert!(a.max_abs_diff(&b) < 1e-5);

        let wrong = VisualTokenSequence::new(Matrix::zeros(5, 3), TokenSource::Fused).unwrap();
        assert!(matches!(p.map_visual(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn build_input_examples() {
        let mut cfg = small_config();
        cfg.max_positions = 160;
        let p: LmParams<Matrix<f32>> = LmParams::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let visual = Matrix::zeros(16, 16);
        let input = p.build_input(&visual, &tokenize("abcd").ids).unwrap();
        assert_eq!((input.embeddings.rows, input.boundary), (21, 16));
        assert_eq!(p.build_input(&visual, &[]).unwrap().embeddings.rows, 17);
        let long = vec![65; 144];
        assert!(matches!(
            p.build_input(&visual, &long),
            Err(Error::Capacity { needed: 161, capacity: 160 })
        ));
        // BOS row is its embedding plus position.
        let row: Vec<f32> = (0..16)
            .map(|k| p.token_embedding.get(BOS, k) + p.positions.get(16, k))
            .collect();
        assert_eq!(input.embeddings.row(16), row.as_slice());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let p = small_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let visual = Matrix::uniform(6, 16, 1.0, &mut rng);
        let input = p.build_input(&visual, &tokenize("hello").ids).unwrap();
        let a = p.forward(&input).unwrap();
        assert_eq!(a.h.shape(), (12, 16));
        let b = small_model(4).forward(&input).unwrap();
        assert_eq!(a.h.data, b.h.data);
    }

    #[test]
    fn forward_reports_numeric_layer() {
        let mut p = small_model(6);
        let visual = Matrix::zeros(2, 16);
        let mut input = p.build_input(&visual, &[1, 2]).unwrap();
        input.embeddings.set(0, 0, f32::NAN);
        assert!(matches!(p.forward(&input), Err(Error::Numeric { layer: 0 })));
        p.blocks[1].ff_out.b.data[0] = f32::INFINITY;
        let input = p.build_input(&visual, &[1, 2]).unwrap();
        assert!(matches!(p.forward(&input), Err(Error::Numeric { layer: 2 })));
    }

    #[test]
    fn forward_is_causal() {
        let p = small_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let visual = Matrix::uniform(8, 16, 1.0, &mut rng);
        let input = p.build_input(&visual, &tokenize("causal masks!").ids).unwrap();
        let base = p.forward(&input).unwrap().h;
        let t_len = input.embeddings.rows;
        for _ in 0..20 {
            let t = rng.gen_range(0..t_len - 1);
            let k = rng.gen_range(1..t_len - t);
            let mut perturbed = input.clone();
            for v in perturbed.embeddings.row_mut(t + k) {
                *v += rng.gen_range(-1.0..1.0);
            }
            let h = p.forward(&perturbed).unwrap().h;
            for r in 0..=t {
                for c in 0..16 {
                    assert!((h.get(r, c) - base.get(r, c)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut p = small_model(9);
        p.head = Matrix::zeros(16, VOCAB_SIZE);
        let dist = p.next_token_distribution(&[0.5; 16]);
        for q in dist {
            assert!((q as f64 - 1.0 / VOCAB_SIZE as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits: Vec<f64> = (0..VOCAB_SIZE).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|l| l + 37.5).collect();
        let mut a = vec![0.0; VOCAB_SIZE];
        let mut b = vec![0.0; VOCAB_SIZE];
        softmax_into(&logits, &mut a);
        softmax_into(&shifted, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn eos_peaked_model_generates_nothing() {
        let mut p = small_model(11);
        p.head = Matrix::zeros(16, VOCAB_SIZE);
        for k in 0..16 {
            p.head.set(k, EOS, 50.0);
        }
        // Constant hidden state of ones.
        p.final_norm.gamma = Matrix::zeros(1, 16);
        p.final_norm.beta = Matrix::filled(1, 16, 1.0);
        let dec = LmDecoder::new(&p, Matrix::zeros(4, 16), prompt_ids("q"), 10).unwrap();
        let g = greedy_decode(&dec, 10).unwrap();
        assert!(g.generated().is_empty() && g.finished);
        let b = beam_search_decode(&dec, &BeamConfig { width: 3, max_new: 10, length_normalize: false }, Execution::Sequential).unwrap();
        assert!(b.generated().is_empty());
        assert!(greedy_decode(&dec, 0).unwrap().ids.is_empty());
    }

    #[test]
    fn decoder_checks_capacity_and_width() {
        let p = small_model(12);
        assert!(matches!(
            LmDecoder::new(&p, Matrix::zeros(40, 16), vec![1; 5], 3),
            Err(Error::Capacity { needed: 49, capacity: 48 })
        ));
        let model = HashModel { vocab: 4, seed: 0 };
        let cfg = BeamConfig { width: 0, max_new: 2, length_normalize: false };
        assert!(matches!(
            beam_search_decode(&model, &cfg, Execution::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn width_one_beam_matches_greedy_on_random_models() {
        let cfg = BeamConfig { width: 1, max_new: 6, length_normalize: false };
        for seed in 0..100 {
            let p = small_model(1000 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let visual = Matrix::uniform(4, 16, 1.0, &mut rng);
            let dec = LmDecoder::new(&p, visual, prompt_ids("Is it?"), cfg.max_new).unwrap();
            let g = greedy_decode(&dec, cfg.max_new).unwrap();
            let b = beam_search_decode(&dec, &cfg, Execution::Sequential).unwrap();
            assert_eq!(g.ids, b.ids, "seed {seed}");
            assert_eq!(g.finished, b.finished);
        }
    }

    #[test]
    fn toy_beam_matches_enumeration() {
        for seed in 0..50 {
            let model = HashModel { vocab: 4, seed };
            let cfg = BeamConfig { width: 4, max_new: 2, length_normalize: false };
            let got = beam_search_decode(&model, &cfg, Execution::Sequential).unwrap();
            let (ids, score) = brute_force(&model, 2);
            assert_eq!(got.ids, ids, "seed {seed}");
            assert!((got.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn lm_beam_score_matches_teacher_forcing() {
        let p = small_model(13);
        let visual = Matrix::uniform(4, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(14));
        let dec = LmDecoder::new(&p, visual, prompt_ids("Describe"), 5).unwrap();
        let cfg = BeamConfig { width: 3, max_new: 5, length_normalize: false };
        let seq = beam_search_decode(&dec, &cfg, Execution::Sequential).unwrap();
        let par = beam_search_decode(&dec, &cfg, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        let tf = sequence_log_prob(&dec, &seq.ids).unwrap();
        assert!((seq.score - tf).abs() < 1e-5);
        assert!(seq.score <= 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn byte_roundtrip(s in ".*") {
            let out = detokenize(&tokenize(&s).ids);
            prop_assert_eq!(out.text, s);
            prop_assert!(!out.lossy);
        }

        #[test]
        fn exhaustive_beam_is_brute_force(seed in 0u64..1000, vocab in 2usize..=5, max_new in 1usize..=3) {
            let model = HashModel { vocab, seed };
            let width = vocab.pow(max_new as u32);
            let cfg = BeamConfig { width, max_new, length_normalize: false };
            let got = beam_search_decode(&model, &cfg, Execution::Sequential).unwrap();
            let (ids, score) = brute_force(&model, max_new);
            prop_assert_eq!(&got.ids, &ids);
            prop_assert!((got.score - score).abs() < 1e-12);
            let tf = sequence_log_prob(&model, &got.ids).unwrap();
            prop_assert!((got.score - tf).abs() < 1e-9);
        }

        #[test]
        fn distribution_sums_to_one(seed in 0u64..200) {
            let p = small_model(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f32> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let sum: f64 = p.next_token_distribution(&h).iter().map(|&q| q as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn extending_never_raises_score(seed in 0u64..500, len in 1usize..6) {
            let model = HashModel { vocab: 6, seed };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..5)).collect();
            let mut prev = 0.0;
            for t in 1..=len {
                let s = sequence_log_prob(&model, &ids[..t]).unwrap();
                prop_assert!(s <= prev);
                prev = s;
            }
        }
    }
}
