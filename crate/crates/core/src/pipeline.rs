//! The full chain: reconstruction pretraining, classification fine-tuning,
//! instruction tuning, evaluation and single-image description.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::classifier::{finetune_sdf_stage2, Classifier, ClassifierExample, Stage2Config};
use crate::dataset::{Category, Sample, INSTRUCTIONS};
use crate::error::{Error, Result};
use crate::eval::{instruction_accuracy, EvalReport};
use crate::exec::{self, Execution};
use crate::geometry::{Role, SdfDecoder, SdfDecoderConfig};
use crate::lm::{beam_search_decode, greedy_decode, prompt_ids, tokenize, BeamConfig, LmConfig, LmDecoder, LmParams};
use crate::matrix::Matrix;
use crate::nn::Module;
use crate::reconstruction::{marching_cubes, project_mesh, render_mask, BinaryMask, Camera, Mesh, RasterImage, Shading};
use crate::sdf_training::{
    pretrain_sdf_stage1, train_image_to_sdf, AutoDecoder, ImageSdfConfig, ImageToSdf, LatentRegressor, SdfScene, Stage1Config,
};
use crate::train::{train_lm, Hyperparams, LmExample, LossCurve};
use crate::vision::{fuse_on_tape, PatchEncoder, PatchEncoderConfig};

pub const STAGE_SDF1: &str = "sdf1";
pub const STAGE_SDF2: &str = "sdf2";
pub const STAGE_LM: &str = "lm";

pub const SEG_OBJECT: &str = "sdf.object";
pub const SEG_SUBJECT: &str = "sdf.subject";
pub const SEG_REGRESSOR: &str = "regressor";
pub const SEG_LM: &str = "lm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: SdfDecoderConfig,
    pub encoder: PatchEncoderConfig,
    pub lm: LmConfig,
    pub categories: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            decoder: SdfDecoderConfig::default(),
            encoder: PatchEncoderConfig::default(),
            lm: LmConfig::default(),
            categories: Category::names(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()?;
        if self.encoder.dim != self.lm.visual_dim {
            return Err(Error::Config(format!(
                "encoder dim {} differs from the language model's visual dim {}",
                self.encoder.dim, self.lm.visual_dim
            )));
        }
        if self.categories.len() < 2 {
            return Err(Error::Config("at least two categories are needed".into()));
        }
        Ok(())
    }
}

/// Settings of the reconstruction branch at inference time. A 17-point
/// grid already resolves the 64-pixel silhouette; finer grids mostly cost
/// time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub grid_resolution: usize,
    pub shading: Shading,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 17,
            shading: Shading::Depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Settings {
    pub object: Stage1Config,
    pub subject: Stage1Config,
    pub image: ImageSdfConfig,
}

impl Default for Stage1Settings {
    /// Many scenes with few points each: larger batches of smaller point
    /// sets fit a whole dataset faster than the single-scene defaults.
    fn default() -> Self {
        let mut object = Stage1Config::default();
        object.hp.batch_size = 32;
        object.hp.learning_rate = 3e-3;
        object.sampling.count = 64;
        object.pool_size = 1024;
        let subject = Stage1Config {
            steps: 500,
            occlusion_weight: 0.0,
            ..object.clone()
        };
        Self {
            object,
            subject,
            image: ImageSdfConfig::default(),
        }
    }
}

impl Stage1Settings {
    /// Scales every phase to `steps` object steps; the subject phase runs
    /// a quarter of them.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.object.steps = steps;
        self.subject.steps = steps / 4;
        self.image.steps = steps;
        self
    }
}

/// Trained weights of every stage present so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub models: ModelConfig,
    pub recon: ReconstructionConfig,
    pub object: AutoDecoder<Matrix<f32>>,
    pub subject: AutoDecoder<Matrix<f32>>,
    pub regressor: LatentRegressor<Matrix<f32>>,
    pub classifier: Option<Classifier<Matrix<f32>>>,
    pub lm: Option<LmParams<Matrix<f32>>>,
    /// Free-form settings recorded with the checkpoint.
    pub echo: serde_json::Value,
}

pub fn object_scene(s: &Sample) -> SdfScene {
    SdfScene {
        shapes: vec![s.scene.object],
        occluder: s.scene.occluder.clone(),
        eye: s.scene.camera.eye,
    }
}

pub fn subject_scene(s: &Sample) -> SdfScene {
    SdfScene {
        shapes: s.scene.occluder.clone(),
        occluder: Vec::new(),
        eye: s.scene.camera.eye,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stage1Curves {
    pub object: LossCurve,
    pub subject: LossCurve,
    pub regressor: LossCurve,
}

/// Reconstruction pretraining: object and subject auto-decoders against
/// the analytic shapes, then the image encoder regressing object latents.
pub fn train_stage1(
    samples: &[&Sample],
    models: &ModelConfig,
    settings: &Stage1Settings,
    seed: u64,
    exec: Execution,
) -> Result<(Pipeline, Stage1Curves)> {
    models.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut object = AutoDecoder::new(Role::Object, &models.decoder, n, &mut rng);
    let mut subject = AutoDecoder::new(Role::Subject, &models.decoder, n, &mut rng);
    let objects: Vec<SdfScene> = samples.iter().map(|s| object_scene(s)).collect();
    let subjects: Vec<SdfScene> = samples.iter().map(|s| subject_scene(s)).collect();
    let with_seed = |c: &Stage1Config, salt: u64| {
        let mut c = c.clone();
        c.hp.seed = crate::dataset::mix_seed(seed, salt);
        c
    };
    let object_curve = pretrain_sdf_stage1(&mut object, &objects, &with_seed(&settings.object, 1), exec)?;
    let subject_curve = pretrain_sdf_stage1(&mut subject, &subjects, &with_seed(&settings.subject, 2), exec)?;

    let encoder = PatchEncoder::new(models.encoder.clone(), &mut rng)?;
    let mut joint = ImageToSdf {
        regressor: LatentRegressor::new(encoder, models.decoder.latent_dim, &mut rng),
        decoder: object.decoder.clone(),
    };
    let patches = exec::map_slice(exec, samples, |s| joint.regressor.encoder.patchify(&s.image))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut image_cfg = settings.image.clone();
    image_cfg.hp.seed = crate::dataset::mix_seed(seed, 3);
    let regressor_curve = train_image_to_sdf(&mut joint, &patches, &objects, Some(&object.latents), &image_cfg, exec)?;
    let ImageToSdf { regressor, decoder } = joint;
    object.decoder = decoder;
    let pipeline = Pipeline {
        models: models.clone(),
        recon: ReconstructionConfig::default(),
        object,
        subject,
        regressor,
        classifier: None,
        lm: None,
        echo: json!({}),
    };
    Ok((
        pipeline,
        Stage1Curves {
            object: object_curve,
            subject: subject_curve,
            regressor: regressor_curve,
        },
    ))
}

/// Output of the reconstruction branch for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub latent: Vec<f32>,
    pub mesh: Mesh,
    pub image: RasterImage,
}

/// Regressed latent, decoded field on a grid, marching cubes, then
/// projection under the default camera at the encoder's image size.
pub fn reconstruct(
    regressor: &LatentRegressor<Matrix<f32>>,
    decoder: &SdfDecoder<Matrix<f32>>,
    recon: &ReconstructionConfig,
    image: &RasterImage,
    exec: Execution,
) -> Result<Reconstruction> {
    let latent = regressor.predict(image)?;
    let grid = decoder.sample_grid(&latent, recon.grid_resolution, exec)?;
    let mesh = marching_cubes(&grid, 0.0)?;
    let side = regressor.encoder.config.image_side;
    let image = project_mesh(&mesh, &Camera::with_size(side, side), recon.shading);
    Ok(Reconstruction { latent, mesh, image })
}

impl Pipeline {
    pub fn stages(&self) -> Vec<&'static str> {
        let mut out = vec![STAGE_SDF1];
        if self.classifier.is_some() {
            out.push(STAGE_SDF2);
        }
        if self.lm.is_some() {
            out.push(STAGE_LM);
        }
        out
    }

    /// The shared encoder that produces both token branches: the
    /// fine-tuned one once stage 2 exists, the regressor's before that.
    pub fn encoder(&self) -> &PatchEncoder<Matrix<f32>> {
        match &self.classifier {
            Some(c) => &c.encoder,
            None => &self.regressor.encoder,
        }
    }

    pub fn reconstruct(&self, image: &RasterImage, exec: Execution) -> Result<Reconstruction> {
        reconstruct(&self.regressor, &self.object.decoder, &self.recon, image, exec)
    }

    /// Patchified inputs of both branches. Samples run in parallel, each
    /// reconstruction sequentially.
    pub fn examples(&self, samples: &[&Sample], exec: Execution) -> Result<Vec<ClassifierExample>> {
        let encoder = self.encoder();
        exec::map_slice(exec, samples, |s| {
            let rec = self.reconstruct(&s.image, Execution::Sequential)?;
            Ok(ClassifierExample {
                occluded: encoder.patchify(&s.image)?,
                reconstructed: encoder.patchify(&rec.image)?,
                label: s.record.category.index(),
            })
        })
        .into_iter()
        .collect()
    }

    /// Fused visual tokens `alpha * x1 + (1 - alpha) * x2`.
    pub fn fused_tokens(&self, ex: &ClassifierExample, alpha: f64) -> Matrix<f32> {
        let mut tape = crate::autograd::Tape::new();
        let enc = self.encoder().bind(&mut tape);
        let p1 = tape.leaf(ex.occluded.clone());
        let p2 = tape.leaf(ex.reconstructed.clone());
        let t1 = enc.forward(&mut tape, p1);
        let t2 = enc.forward(&mut tape, p2);
        let fused = fuse_on_tape(&mut tape, t1, t2, alpha);
        tape.value(fused).clone()
    }

    /// Stage 2: classifier initialized from the reconstruction-pretrained
    /// encoder, trained on fused tokens.
    pub fn train_stage2(&mut self, examples: &[ClassifierExample], cfg: &Stage2Config, exec: Execution) -> Result<LossCurve> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::mix_seed(cfg.hp.seed, 4));
        let mut clf = Classifier::new(self.regressor.encoder.clone(), self.models.categories.clone(), &mut rng)?;
        let curve = finetune_sdf_stage2(&mut clf, examples, cfg, exec)?;
        self.classifier = Some(clf);
        Ok(curve)
    }

    pub fn lm_examples(&self, samples: &[&Sample], examples: &[ClassifierExample], alpha: f64, exec: Execution) -> Vec<LmExample> {
        let visual = exec::map_slice(exec, examples, |ex| self.fused_tokens(ex, alpha));
        let mut out = Vec::with_capacity(samples.len() * 5);
        for (s, v) in samples.iter().zip(visual) {
            for qa in &s.record.qa {
                out.push(LmExample {
                    visual: v.clone(),
                    prompt: prompt_ids(&qa.question),
                    answer: tokenize(&qa.answer).ids,
                });
            }
        }
        out
    }

    /// Instruction tuning of a fresh language model on the five questions
    /// of every training record.
    pub fn train_lm_stage(
        &mut self,
        samples: &[&Sample],
        examples: &[ClassifierExample],
        alpha: f64,
        hp: &Hyperparams,
        exec: Execution,
    ) -> Result<LossCurve> {
        if self.classifier.is_none() {
            return Err(Error::Config("instruction tuning needs the stage-2 encoder".into()));
        }
        let data = self.lm_examples(samples, examples, alpha, exec);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::mix_seed(hp.seed, 5));
        let mut lm = LmParams::new(self.models.lm.clone(), &mut rng)?;
        let curve = train_lm(&mut lm, &data, hp, None, exec)?;
        self.lm = Some(lm);
        Ok(curve)
    }

    /// Decodes an answer from fused tokens. Width 1 uses greedy decoding.
    pub fn answer(&self, tokens: &Matrix<f32>, question: &str, beam: &BeamConfig, exec: Execution) -> Result<String> {
        let lm = self
            .lm
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no language model".into()))?;
        let seq = crate::vision::VisualTokenSequence::new(tokens.clone(), crate::vision::TokenSource::Fused)?;
        let mapped = lm.map_visual(&seq)?;
        let model = LmDecoder::new(lm, mapped, prompt_ids(question), beam.max_new)?;
        let hyp = if beam.width == 1 {
            greedy_decode(&model, beam.max_new)?
        } else {
            beam_search_decode(&model, beam, exec)?
        };
        Ok(hyp.text().text)
    }

    /// Scores the test samples. The classifier answers the category
    /// question; the language model, when present, answers all five.
    pub fn evaluate(
        &self,
        samples: &[&Sample],
        examples: &[ClassifierExample],
        alpha: f64,
        beam: &BeamConfig,
        exec: Execution,
    ) -> Result<Vec<EvalReport>> {
        let records: Vec<_> = samples.iter().map(|s| s.record.clone()).collect();
        let echo = json!({
            "alpha": alpha,
            "image_size": self.models.encoder.image_side,
            "grid_resolution": self.recon.grid_resolution,
            "beam_width": beam.width,
            "settings": self.echo,
        });
        let mut reports = Vec::new();
        if let Some(clf) = &self.classifier {
            let preds = crate::classifier::predict_all(clf, examples, alpha, exec);
            let by_id: BTreeMap<String, String> = records
                .iter()
                .zip(preds)
                .map(|(r, p)| (r.id.clone(), self.models.categories[p].clone()))
                .collect();
            let mut r = EvalReport::new(format!("classifier a={alpha}"), records.len(), echo.clone());
            r.record(1, instruction_accuracy(&by_id, &records, 1));
            reports.push(r);
        }
        if self.lm.is_some() {
            let answers = exec::map_slice(exec, examples, |ex| {
                let tokens = self.fused_tokens(ex, alpha);
                INSTRUCTIONS
                    .iter()
                    .map(|q| self.answer(&tokens, q, beam, Execution::Sequential))
                    .collect::<Result<Vec<String>>>()
            });
            let mut per_q: Vec<BTreeMap<String, String>> = vec![BTreeMap::new(); 5];
            for (r, a) in records.iter().zip(answers) {
                for (q, text) in a?.into_iter().enumerate() {
                    per_q[q].insert(r.id.clone(), text);
                }
            }
            let mut r = EvalReport::new(format!("lm a={alpha}"), records.len(), echo);
            for (q, preds) in per_q.iter().enumerate() {
                r.record(q as u8 + 1, instruction_accuracy(preds, &records, q as u8 + 1));
            }
            reports.push(r);
        }
        Ok(reports)
    }

    /// Answers `question` about a single occluded image.
    pub fn describe(&self, image: &RasterImage, question: &str, alpha: f64, beam: &BeamConfig, exec: Execution) -> Result<Description> {
        let side = self.models.encoder.image_side;
        let image = crate::dataset::resize_image(image, side);
        let rec = self.reconstruct(&image, exec)?;
        let encoder = self.encoder();
        let ex = ClassifierExample {
            occluded: encoder.patchify(&image)?,
            reconstructed: encoder.patchify(&rec.image)?,
            label: 0,
        };
        // Without a language model the classifier still answers the
        // category question.
        let answer = match (&self.lm, &self.classifier) {
            (None, Some(clf)) if question == INSTRUCTIONS[0] => self.models.categories[clf.predict(&ex, alpha)].clone(),
            _ => self.answer(&self.fused_tokens(&ex, alpha), question, beam, exec)?,
        };
        let full = render_mask(&rec.mesh, &Camera::with_size(side, side));
        Ok(Description {
            answer,
            vertices: rec.mesh.vertices.len(),
            triangles: rec.mesh.triangles.len(),
            occlusion_estimate: crate::reconstruction::occlusion_ratio(&full, &visible_object_mask(&image))?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "models": self.models,
            "reconstruction": self.recon,
            "stages": self.stages(),
            "settings": self.echo,
        }));
        ck.insert(SEG_OBJECT, &self.object);
        ck.insert(SEG_SUBJECT, &self.subject);
        ck.insert(SEG_REGRESSOR, &self.regressor);
        if let Some(c) = &self.classifier {
            ck.insert("", c);
        }
        if let Some(lm) = &self.lm {
            ck.insert(SEG_LM, lm);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("metadata lacks a valid {what}"));
        let meta = &ck.metadata;
        let models: ModelConfig =
            serde_json::from_value(meta["models"].clone()).map_err(|_| bad("model config"))?;
        let recon: ReconstructionConfig =
            serde_json::from_value(meta["reconstruction"].clone()).map_err(|_| bad("reconstruction config"))?;
        models.validate()?;
        if !ck.has_segment(SEG_OBJECT) {
            return Err(Error::Config("checkpoint has no stage-1 reconstruction weights".into()));
        }
        let scenes = ck
            .shape(&format!("{SEG_OBJECT}.latents"))
            .map(|s| s.0)
            .ok_or_else(|| Error::Checkpoint("missing object latents".into()))?;
        let subject_scenes = ck.shape(&format!("{SEG_SUBJECT}.latents")).map_or(0, |s| s.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut object = AutoDecoder::new(Role::Object, &models.decoder, scenes, &mut rng);
        let mut subject = AutoDecoder::new(Role::Subject, &models.decoder, subject_scenes, &mut rng);
        ck.restore(SEG_OBJECT, &mut object)?;
        ck.restore(SEG_SUBJECT, &mut subject)?;
        let encoder = PatchEncoder::new(models.encoder.clone(), &mut rng)?;
        let mut regressor = LatentRegressor::new(encoder.clone(), models.decoder.latent_dim, &mut rng);
        ck.restore(SEG_REGRESSOR, &mut regressor)?;
        let classifier = if ck.has_segment("head") {
            let mut c = Classifier::new(encoder, models.categories.clone(), &mut rng)?;
            ck.restore("", &mut c)?;
            Some(c)
        } else {
            None
        };
        let lm = if ck.has_segment(SEG_LM) {
            let mut lm = LmParams::new(models.lm.clone(), &mut rng)?;
            ck.restore(SEG_LM, &mut lm)?;
            Some(lm)
        } else {
            None
        };
        Ok(Self {
            models,
            recon,
            object,
            subject,
            regressor,
            classifier,
            lm,
            echo: meta["settings"].clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub answer: String,
    pub vertices: usize,
    pub triangles: usize,
    /// Reconstructed silhouette area not matched by visible object pixels.
    pub occlusion_estimate: f64,
}

/// Non-background pixels whose chromaticity differs from the hand's.
pub fn visible_object_mask(image: &RasterImage) -> BinaryMask {
    let skin = [225.0, 180.0, 150.0];
    let bits = image
        .pixels
        .iter()
        .map(|p| {
            let r = p[0] as f64;
            if p.iter().all(|&c| c == 0) {
                return false;
            }
            let near_skin = r > 0.0
                && (p[1] as f64 / r - skin[1] / skin[0]).abs() < 0.04
                && (p[2] as f64 / r - skin[2] / skin[0]).abs() < 0.04;
            !near_skin
        })
        .collect();
    BinaryMask {
        width: image.width,
        height: image.height,
        bits,
    }
}
