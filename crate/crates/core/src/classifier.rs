//! Category classifier over fused visual tokens, fine-tuned from the
//! reconstruction-pretrained encoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::exec::{self, Execution};
use crate::matrix::Matrix;
use crate::nn::{impl_module, join, Module, Params};
use crate::real::Real;
use crate::train::{batch_loss_grads, check_finite, check_grads, Hyperparams, LossCurve, Optimizer, OptimizerKind};
use crate::vision::{argmax, fuse_on_tape, CategoryHead, FusionConfig, PatchEncoder};

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<P> {
    pub encoder: PatchEncoder<P>,
    pub head: CategoryHead<P>,
}

impl<T: Real> Classifier<Matrix<T>> {
    pub fn new<R: Rng>(encoder: PatchEncoder<Matrix<T>>, categories: Vec<String>, rng: &mut R) -> Result<Self> {
        let head = CategoryHead::new(encoder.config.dim, categories, rng)?;
        Ok(Self { encoder, head })
    }

    /// Logits for one example at fusion weight `alpha`.
    pub fn logits(&self, ex: &ClassifierExample, alpha: f64) -> Vec<T> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = bound.forward(&mut tape, ex, alpha);
        tape.value(out).data.clone()
    }

    pub fn predict(&self, ex: &ClassifierExample, alpha: f64) -> usize {
        argmax(&self.logits(ex, alpha))
    }

    pub fn cast<U: Real>(&self) -> Classifier<Matrix<U>> {
        self.map("", &mut |_, m| m.cast())
    }
}

impl<P> Classifier<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Classifier<Q> {
        Classifier {
            encoder: self.encoder.map(&join(prefix, "encoder"), f),
            head: self.head.map(&join(prefix, "head"), f),
        }
    }
}

impl<P> Params<P> for Classifier<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl_module!(Classifier);

/// Patchified occluded image, patchified reconstruction and the label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierExample {
    pub occluded: Matrix<f32>,
    pub reconstructed: Matrix<f32>,
    pub label: usize,
}

impl Classifier<Var> {
    /// `1 x C` logits of the head over `alpha * enc(x1) + (1 - alpha) * enc(x2)`.
    /// A branch with zero weight is not encoded at all.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ex: &ClassifierExample, alpha: f64) -> Var {
        let tokens = if alpha >= 1.0 {
            let x1 = tape.leaf(ex.occluded.cast());
            self.encoder.forward(tape, x1)
        } else if alpha <= 0.0 {
            let x2 = tape.leaf(ex.reconstructed.cast());
            self.encoder.forward(tape, x2)
        } else {
            let x1 = tape.leaf(ex.occluded.cast());
            let x2 = tape.leaf(ex.reconstructed.cast());
            let t1 = self.encoder.forward(tape, x1);
            let t2 = self.encoder.forward(tape, x2);
            fuse_on_tape(tape, t1, t2, alpha)
        };
        self.head.forward(tape, tokens)
    }

    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, ex: &ClassifierExample, alpha: f64) -> Var {
        let logits = self.forward(tape, ex, alpha);
        tape.cross_entropy(logits, &[Some(ex.label)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub hp: Hyperparams,
    pub fusion: FusionConfig,
    /// Learning-rate multiplier for the pretrained encoder.
    pub pretrained_lr_scale: f64,
    /// Keeps the pretrained encoder fixed and trains only the head.
    pub freeze_pretrained: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            hp: Hyperparams {
                learning_rate: 1e-3,
                epochs: 10,
                optimizer: OptimizerKind::Adam,
                ..Hyperparams::default()
            },
            fusion: FusionConfig::default(),
            pretrained_lr_scale: 0.1,
            freeze_pretrained: false,
        }
    }
}

impl Stage2Config {
    pub fn lr_scale(&self, name: &str) -> f64 {
        if name.starts_with("encoder") {
            if self.freeze_pretrained {
                0.0
            } else {
                self.pretrained_lr_scale
            }
        } else {
            1.0
        }
    }
}

/// Cross-entropy fine-tuning of encoder and head on category labels.
pub fn finetune_sdf_stage2(
    model: &mut Classifier<Matrix<f32>>,
    examples: &[ClassifierExample],
    cfg: &Stage2Config,
    exec: Execution,
) -> Result<LossCurve> {
    cfg.hp.validate()?;
    cfg.fusion.validate()?;
    let alpha = cfg.fusion.alpha;
    let mut opt = Optimizer::new(&cfg.hp);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.hp.seed);
    let mut curve = LossCurve::default();
    let mut step = 0;
    let scale = |name: &str| cfg.lr_scale(name);
    for _ in 0..cfg.hp.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.hp.batch_size) {
            let batch: Vec<&ClassifierExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_loss_grads(&*model, &batch, exec, |tape, m, ex| m.loss(tape, ex, alpha));
            check_finite(step, loss)?;
            check_grads(step, loss, &grads)?;
            opt.step(model, &grads, &scale);
            curve.push(step, loss);
            step += 1;
        }
    }
    Ok(curve)
}

pub fn predict_all(model: &Classifier<Matrix<f32>>, examples: &[ClassifierExample], alpha: f64, exec: Execution) -> Vec<usize> {
    exec::map_slice(exec, examples, |ex| model.predict(ex, alpha))
}

pub fn accuracy(model: &Classifier<Matrix<f32>>, examples: &[ClassifierExample], alpha: f64, exec: Execution) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let preds = predict_all(model, examples, alpha, exec);
    let hits = preds.iter().zip(examples).filter(|(p, ex)| **p == ex.label).count();
    hits as f64 / examples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::PatchEncoderConfig;

    fn encoder(seed: u64) -> PatchEncoder<Matrix<f32>> {
        let cfg = PatchEncoderConfig {
            image_side: 16,
            patch: 8,
            dim: 8,
            heads: 2,
            attention: true,
        };
        PatchEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    /// Label is encoded as brightness of the reconstruction only.
    fn examples(n: usize, seed: u64) -> Vec<ClassifierExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 3;
                let noise = Matrix::uniform(4, 192, 0.3, &mut rng);
                let mut rec = Matrix::uniform(4, 192, 0.05, &mut rng);
                for v in rec.data.iter_mut() {
                    *v += label as f32 * 0.5 - 0.5;
                }
                ClassifierExample {
                    occluded: noise,
                    reconstructed: rec,
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn untrained_zero_head_is_uniform() {
        let mut model = Classifier::new(encoder(1), names(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        model.head = CategoryHead::zeros(8, names()).unwrap();
        let logits = model.logits(&examples(1, 1)[0], 0.5);
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn frozen_encoder_stays_fixed() {
        let mut model = Classifier::new(encoder(2), names(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = model.encoder.clone();
        let head_before = model.head.clone();
        let cfg = Stage2Config {
            freeze_pretrained: true,
            hp: Hyperparams {
                learning_rate: 1e-2,
                batch_size: 4,
                ..Hyperparams::default()
            },
            ..Stage2Config::default()
        };
        finetune_sdf_stage2(&mut model, &examples(8, 2), &cfg, Execution::Sequential).unwrap();
        assert_eq!(model.encoder, before);
        assert_ne!(model.head, head_before);
    }

    #[test]
    fn learns_from_the_reconstruction_branch() {
        let mut model = Classifier::new(encoder(3), names(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let train = examples(60, 3);
        let test = examples(30, 4);
        let cfg = Stage2Config {
            hp: Hyperparams {
                learning_rate: 1e-2,
                batch_size: 8,
                epochs: 15,
                optimizer: OptimizerKind::Adam,
                ..Hyperparams::default()
            },
            pretrained_lr_scale: 1.0,
            ..Stage2Config::default()
        };
        finetune_sdf_stage2(&mut model, &train, &cfg, Execution::Parallel).unwrap();
        assert!(accuracy(&model, &test, 0.5, Execution::Parallel) > 0.9);
    }

    #[test]
    fn same_seed_same_result() {
        let run = || {
            let mut model = Classifier::new(encoder(5), names(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let cfg = Stage2Config {
                hp: Hyperparams {
                    learning_rate: 1e-2,
                    batch_size: 4,
                    ..Hyperparams::default()
                },
                ..Stage2Config::default()
            };
            finetune_sdf_stage2(&mut model, &examples(12, 5), &cfg, Execution::Parallel).unwrap();
            (model.clone(), accuracy(&model, &examples(9, 6), 0.5, Execution::Sequential))
        };
        assert_eq!(run(), run());
    }
}
