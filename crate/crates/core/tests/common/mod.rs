//! Helpers shared by the integration tests.

#![allow(dead_code)]

use occluvis::autograd::{Tape, Var};
use occluvis::geometry::{Role, SdfDecoder, SdfDecoderConfig};
use occluvis::lm::{prompt_ids, tokenize, LmConfig, LmParams};
use occluvis::nn::{Module, TransformerBlock};
use occluvis::train::{gradient_check, GradCheckConfig, GradCheckReport};
use occluvis::vision::{CategoryHead, PatchEncoder, PatchEncoderConfig};
use occluvis::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `v` with fixed random weights into a scalar, so every output
/// entry gets a gradient of order one.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let (rows, cols) = tape.value(v).shape();
    let mut r = rng(seed);
    let left = tape.leaf(Matrix::uniform(1, rows, 1.0, &mut r));
    let right = tape.leaf(Matrix::uniform(cols, 1, 1.0, &mut r));
    let row = tape.matmul(left, v);
    tape.matmul(row, right)
}

fn check<M: Module<f64> + Clone>(model: &M, loss: impl Fn(&mut Tape<f64>, &M::Bound) -> Var) -> GradCheckReport {
    gradient_check(model, loss, &GradCheckConfig::default())
}

pub fn sdf_decoder() -> GradCheckReport {
    let cfg = SdfDecoderConfig::default();
    let dec: SdfDecoder<Matrix<f64>> = SdfDecoder::new(Role::Object, &cfg, &mut rng(1));
    let input = Matrix::uniform(6, dec.input_dim(), 1.0, &mut rng(2));
    check(&dec, |t, m| {
        let x = t.leaf(input.clone());
        let y = m.forward(t, x);
        project(t, y, 3)
    })
}

pub fn patch_encoder() -> GradCheckReport {
    let cfg = PatchEncoderConfig {
        image_side: 32,
        patch: 16,
        dim: 16,
        heads: 4,
        attention: true,
    };
    let enc: PatchEncoder<Matrix<f64>> = PatchEncoder::new(cfg.clone(), &mut rng(4)).unwrap();
    let patches = Matrix::uniform(cfg.tokens(), cfg.patch_pixels(), 1.0, &mut rng(5));
    check(&enc, |t, m| {
        let x = t.leaf(patches.clone());
        let y = m.forward(t, x);
        project(t, y, 6)
    })
}

pub fn cross_modal_map() -> GradCheckReport {
    let lm: LmParams<Matrix<f64>> = LmParams::new(LmConfig::default(), &mut rng(7)).unwrap();
    let visual = Matrix::uniform(16, lm.config.visual_dim, 1.0, &mut rng(8));
    check(&lm.visual_map, |t, m| {
        let x = t.leaf(visual.clone());
        let y = m.forward(t, x);
        project(t, y, 9)
    })
}

pub fn transformer_block() -> GradCheckReport {
    let block: TransformerBlock<Matrix<f64>> = TransformerBlock::new(16, &mut rng(10));
    let input = Matrix::uniform(7, 16, 1.0, &mut rng(11));
    check(&block, |t, m| {
        let x = t.leaf(input.clone());
        let y = m.forward(t, x, 4, true);
        project(t, y, 12)
    })
}

/// The whole language model under its answer loss; the vocabulary head is
/// one of the tensors checked.
pub fn language_model() -> GradCheckReport {
    let cfg = LmConfig {
        dim: 16,
        visual_dim: 8,
        heads: 4,
        ..LmConfig::default()
    };
    let lm: LmParams<Matrix<f64>> = LmParams::new(cfg, &mut rng(13)).unwrap();
    let visual = Matrix::uniform(4, 8, 1.0, &mut rng(14));
    let prompt = prompt_ids("Is it round?");
    let answer = tokenize("yes").ids;
    check(&lm, |t, m| {
        let v = t.leaf(visual.clone());
        m.answer_loss(t, v, &prompt, &answer)
    })
}

pub fn classifier_head() -> GradCheckReport {
    let names: Vec<String> = ["a", "b", "c", "d", "e", "f"].iter().map(|s| s.to_string()).collect();
    let head: CategoryHead<Matrix<f64>> = CategoryHead::new(16, names, &mut rng(15)).unwrap();
    let tokens = Matrix::uniform(16, 16, 1.0, &mut rng(16));
    check(&head, |t, m| {
        let x = t.leaf(tokens.clone());
        let logits = m.forward(t, x);
        t.cross_entropy(logits, &[Some(2)])
    })
}

pub fn all_gradient_checks() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("sdf decoder", sdf_decoder()),
        ("patch encoder", patch_encoder()),
        ("cross-modal map", cross_modal_map()),
        ("transformer block", transformer_block()),
        ("language model", language_model()),
        ("classifier head", classifier_head()),
    ]
}
