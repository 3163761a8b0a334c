//! Reconstruction pretraining of the SDF decoders against analytic shapes,
//! and the image-to-latent regressor that feeds the reconstruction branch
//! at inference time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::{encode_points, union_sdf, AnalyticShape, Point3, Role, SdfDecoder, SdfDecoderConfig};
use crate::matrix::Matrix;
use crate::nn::{impl_module, join, Linear, Params};
use crate::real::Real;
use crate::reconstruction::RasterImage;
use crate::train::{batch_loss_grads, check_finite, check_grads, Hyperparams, LossCurve, Optimizer, OptimizerKind};
use crate::vision::PatchEncoder;

/// Supervision for one scene: the shapes whose union is the target field,
/// plus the occluder and eye used by the occlusion-weighted loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfScene {
    pub shapes: Vec<AnalyticShape>,
    pub occluder: Vec<AnalyticShape>,
    pub eye: Point3,
}

impl SdfScene {
    pub fn single(shape: AnalyticShape) -> Self {
        Self {
            shapes: vec![shape],
            occluder: Vec::new(),
            eye: Point3::new(0.0, 0.0, 2.5),
        }
    }

    pub fn truth(&self, p: Point3) -> f64 {
        union_sdf(&self.shapes, p)
    }
}

/// Training points with their analytic targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<Point3>,
    pub targets: Vec<f64>,
    /// Whether the segment from the eye to the point crosses the occluder.
    pub occluded: Vec<bool>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSampling {
    pub count: usize,
    /// Fraction of points drawn near the surface instead of uniformly.
    pub near_fraction: f64,
    /// Half-width of the uniform jitter applied to surface points.
    pub jitter: f64,
}

impl Default for PointSampling {
    fn default() -> Self {
        Self {
            count: 256,
            near_fraction: 0.5,
            jitter: 0.05,
        }
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> Point3 {
    loop {
        let p = Point3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = p.norm();
        if n > 1e-3 && n <= 1.0 {
            return p * (1.0 / n);
        }
    }
}

/// Walks outward from an interior point until the field crosses zero.
/// Each step moves by the distance bound, so it never skips the surface.
fn march_to_surface(shapes: &[AnalyticShape], start: Point3, dir: Point3) -> Point3 {
    let mut t = 0.0;
    for _ in 0..64 {
        let d = union_sdf(shapes, start + dir * t);
        if d.abs() < 1e-5 {
            break;
        }
        t += d.abs().max(1e-5);
        if t > 4.0 {
            break;
        }
    }
    start + dir * t
}

/// True when the segment from `eye` to `p` passes through the occluder
/// before reaching `p`.
pub fn ray_blocked(occluder: &[AnalyticShape], eye: Point3, p: Point3) -> bool {
    if occluder.is_empty() {
        return false;
    }
    let span = p - eye;
    let len = span.norm();
    let dir = span * (1.0 / len);
    let mut t = 0.0;
    while t < len {
        let d = union_sdf(occluder, eye + dir * t);
        if d < 1e-4 {
            return true;
        }
        t += d;
    }
    false
}

fn clamp_cube(p: Point3) -> Point3 {
    Point3::new(p.x.clamp(-1.0, 1.0), p.y.clamp(-1.0, 1.0), p.z.clamp(-1.0, 1.0))
}

/// Uniform points in the cube mixed with jittered surface points.
pub fn sample_points<R: Rng>(scene: &SdfScene, cfg: &PointSampling, rng: &mut R) -> PointSet {
    let near = (cfg.count as f64 * cfg.near_fraction).round() as usize;
    let mut set = PointSet::default();
    for i in 0..cfg.count {
        let p = if i < near {
            let shape = &scene.shapes[rng.gen_range(0..scene.shapes.len())];
            let surface = march_to_surface(&scene.shapes, shape.pose.translation, random_direction(rng));
            let j = Point3::new(
                rng.gen_range(-cfg.jitter..=cfg.jitter),
                rng.gen_range(-cfg.jitter..=cfg.jitter),
                rng.gen_range(-cfg.jitter..=cfg.jitter),
            );
            clamp_cube(surface + j)
        } else {
            Point3::new(
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            )
        };
        set.targets.push(scene.truth(p));
        set.occluded.push(ray_blocked(&scene.occluder, scene.eye, p));
        set.points.push(p);
    }
    set
}

/// A decoder plus one free latent row per training scene.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoDecoder<P> {
    pub decoder: SdfDecoder<P>,
    /// `scenes x latent_dim`.
    pub latents: P,
}

impl<T: Real> AutoDecoder<Matrix<T>> {
    pub fn new<R: Rng>(role: Role, cfg: &SdfDecoderConfig, scenes: usize, rng: &mut R) -> Self {
        Self {
            decoder: SdfDecoder::new(role, cfg, rng),
            latents: Matrix::uniform(scenes, cfg.latent_dim, 0.01, rng),
        }
    }

    pub fn latent(&self, scene: usize) -> &[T] {
        self.latents.row(scene)
    }

    pub fn cast<U: Real>(&self) -> AutoDecoder<Matrix<U>> {
        self.map("", &mut |_, m| m.cast())
    }
}

impl<P> AutoDecoder<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> AutoDecoder<Q> {
        AutoDecoder {
            decoder: self.decoder.map(&join(prefix, "decoder"), f),
            latents: f(&join(prefix, "latents"), &self.latents),
        }
    }
}

impl<P> Params<P> for AutoDecoder<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.decoder.visit(&join(prefix, "decoder"), f);
        f(&join(prefix, "latents"), &self.latents);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        f(&join(prefix, "latents"), &mut self.latents);
    }
}

impl_module!(AutoDecoder);

/// Points of one scene inside a training batch.
pub struct SceneBatch<'a> {
    pub scene: usize,
    pub points: &'a PointSet,
    pub occlusion_weight: f64,
}

impl AutoDecoder<Var> {
    /// Decoded field at `points` for the latent row of `scene`.
    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, scene: usize, points: &[Point3]) -> Var {
        let feats = tape.leaf(encode_points(points, self.decoder.bands));
        let lat = tape.gather(self.latents, &vec![scene; points.len()]);
        let input = tape.concat_cols(feats, lat);
        self.decoder.forward(tape, input)
    }

    /// Mean absolute error, plus `occlusion_weight` times the mean error
    /// over points hidden behind the occluder.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, batch: &SceneBatch) -> Var {
        let pred = self.predict(tape, batch.scene, &batch.points.points);
        let n = batch.points.len() as f64;
        let hidden = batch.points.occluded.iter().filter(|&&o| o).count();
        let extra = if hidden > 0 && batch.occlusion_weight > 0.0 {
            batch.occlusion_weight / hidden as f64
        } else {
            0.0
        };
        let weights: Vec<T> = batch
            .points
            .occluded
            .iter()
            .map(|&o| T::of(1.0 / n + if o { extra } else { 0.0 }))
            .collect();
        let targets: Vec<T> = batch.points.targets.iter().map(|&t| T::of(t)).collect();
        tape.weighted_abs(pred, &targets, &weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub hp: Hyperparams,
    pub steps: usize,
    pub sampling: PointSampling,
    /// Points pre-sampled per scene; each step draws `sampling.count` of them.
    pub pool_size: usize,
    /// Weight of the loss over occluded points; zero disables it.
    pub occlusion_weight: f64,
    /// L2 penalty on the latent codes.
    pub latent_penalty: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            hp: Hyperparams {
                batch_size: 16,
                learning_rate: 1e-3,
                optimizer: OptimizerKind::Adam,
                ..Hyperparams::default()
            },
            steps: 2000,
            sampling: PointSampling::default(),
            pool_size: 4096,
            occlusion_weight: 2.0,
            latent_penalty: 1e-4,
        }
    }
}

/// Pre-sampled point pools, one per scene, deterministic in `seed`.
pub fn point_pools(scenes: &[SdfScene], count: usize, sampling: &PointSampling, seed: u64, exec: Execution) -> Vec<PointSet> {
    let cfg = PointSampling { count, ..sampling.clone() };
    exec::map_range(exec, scenes.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::mix_seed(seed, i as u64));
        sample_points(&scenes[i], &cfg, &mut rng)
    })
}

fn subset(pool: &PointSet, count: usize, rng: &mut impl Rng) -> PointSet {
    let mut out = PointSet::default();
    for _ in 0..count.min(pool.len()) {
        let i = rng.gen_range(0..pool.len());
        out.points.push(pool.points[i]);
        out.targets.push(pool.targets[i]);
        out.occluded.push(pool.occluded[i]);
    }
    out
}

/// Fits decoder weights and per-scene latents to the analytic fields of
/// `scenes` by minimizing the absolute SDF error.
pub fn pretrain_sdf_stage1(
    model: &mut AutoDecoder<Matrix<f32>>,
    scenes: &[SdfScene],
    cfg: &Stage1Config,
    exec: Execution,
) -> Result<LossCurve> {
    cfg.hp.validate()?;
    if model.latents.rows != scenes.len() {
        return Err(Error::Shape(format!(
            "{} latent rows for {} scenes",
            model.latents.rows,
            scenes.len()
        )));
    }
    let mut curve = LossCurve::default();
    if cfg.steps == 0 || scenes.is_empty() {
        return Ok(curve);
    }
    let pools = point_pools(scenes, cfg.pool_size, &cfg.sampling, cfg.hp.seed, exec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.hp.seed);
    let mut opt = Optimizer::new(&cfg.hp);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.hp.batch_size);
        for _ in 0..cfg.hp.batch_size.min(scenes.len()) {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            }
            picks.push(order.pop().expect("refilled"));
        }
        let subsets: Vec<PointSet> = picks
            .iter()
            .map(|&s| subset(&pools[s], cfg.sampling.count, &mut rng))
            .collect();
        let batch: Vec<SceneBatch> = picks
            .iter()
            .zip(&subsets)
            .map(|(&scene, points)| SceneBatch {
                scene,
                points,
                occlusion_weight: cfg.occlusion_weight,
            })
            .collect();
        let (loss, mut grads) = batch_loss_grads(&*model, &batch, exec, |tape, m, b| m.loss(tape, b));
        check_finite(step, loss)?;
        check_grads(step, loss, &grads)?;
        // The latent table is the last leaf.
        let g = grads.last_mut().expect("latent gradient");
        let k = (2.0 * cfg.latent_penalty) as f32;
        for &s in &picks {
            let z = model.latents.row(s).to_vec();
            for (gv, zv) in g.row_mut(s).iter_mut().zip(z) {
                *gv += k * zv / picks.len() as f32;
            }
        }
        opt.step(model, &grads, &crate::train::unit_scale);
        curve.push(step, loss);
    }
    Ok(curve)
}

/// Mean absolute difference between the decoded field of `scene` and
/// the analytic truth over `points`.
pub fn validation_error<T: Real>(decoder: &SdfDecoder<Matrix<T>>, latent: &[T], points: &PointSet) -> Result<f64> {
    let pred = decoder.eval_points(&points.points, latent)?;
    let total: f64 = pred
        .iter()
        .zip(&points.targets)
        .map(|(p, t)| (p.f64() - t).abs())
        .sum();
    Ok(total / points.len().max(1) as f64)
}

/// Patch encoder followed by mean pooling and a linear map to a latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRegressor<P> {
    pub encoder: PatchEncoder<P>,
    pub out: Linear<P>,
}

impl<T: Real> LatentRegressor<Matrix<T>> {
    pub fn new<R: Rng>(encoder: PatchEncoder<Matrix<T>>, latent_dim: usize, rng: &mut R) -> Self {
        let dim = encoder.config.dim;
        Self {
            encoder,
            out: Linear::new(dim, latent_dim, rng),
        }
    }

    pub fn predict(&self, image: &RasterImage) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = crate::nn::Module::bind(self, &mut tape);
        let patches = tape.leaf(self.encoder.patchify(image)?);
        let z = bound.forward(&mut tape, patches);
        Ok(tape.value(z).data.clone())
    }
}

impl<P> LatentRegressor<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LatentRegressor<Q> {
        LatentRegressor {
            encoder: self.encoder.map(&join(prefix, "encoder"), f),
            out: self.out.map(&join(prefix, "out"), f),
        }
    }
}

impl<P> Params<P> for LatentRegressor<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

impl_module!(LatentRegressor);

impl LatentRegressor<Var> {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, patches: Var) -> Var {
        let tokens = self.encoder.forward(tape, patches);
        let pooled = tape.mean_rows(tokens);
        self.out.forward(tape, pooled)
    }
}

/// Image encoder and SDF decoder trained together: the regressed latent
/// is scored by the decoded field against the analytic shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageToSdf<P> {
    pub regressor: LatentRegressor<P>,
    pub decoder: SdfDecoder<P>,
}

impl<P> ImageToSdf<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> ImageToSdf<Q> {
        ImageToSdf {
            regressor: self.regressor.map(&join(prefix, "regressor"), f),
            decoder: self.decoder.map(&join(prefix, "decoder"), f),
        }
    }
}

impl<P> Params<P> for ImageToSdf<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.regressor.visit(&join(prefix, "regressor"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.regressor.visit_mut(&join(prefix, "regressor"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

impl_module!(ImageToSdf);

/// One image with points of its scene and, optionally, the free latent
/// fitted to that scene.
pub struct ImageSdfSample<'a> {
    pub patches: &'a Matrix<f32>,
    pub points: PointSet,
    pub latent: Option<&'a [f32]>,
}

impl ImageToSdf<Var> {
    /// SDF error of the decoded regressed latent (with the occlusion
    /// term) plus `latent_weight` times the mean absolute distance to the
    /// free latent.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, s: &ImageSdfSample, occlusion_weight: f64, latent_weight: f64) -> Var {
        let x = tape.leaf(s.patches.cast());
        let z = self.regressor.forward(tape, x);
        let n = s.points.len();
        let feats = tape.leaf(encode_points(&s.points.points, self.decoder.bands));
        let zs = tape.gather(z, &vec![0; n]);
        let input = tape.concat_cols(feats, zs);
        let pred = self.decoder.forward(tape, input);
        let hidden = s.points.occluded.iter().filter(|&&o| o).count();
        let extra = if hidden > 0 { occlusion_weight / hidden as f64 } else { 0.0 };
        let weights: Vec<T> = s
            .points
            .occluded
            .iter()
            .map(|&o| T::of(1.0 / n as f64 + if o { extra } else { 0.0 }))
            .collect();
        let targets: Vec<T> = s.points.targets.iter().map(|&t| T::of(t)).collect();
        let sdf = tape.weighted_abs(pred, &targets, &weights);
        match s.latent {
            Some(target) if latent_weight > 0.0 => {
                let w = vec![T::of(latent_weight / target.len() as f64); target.len()];
                let t: Vec<T> = target.iter().map(|&v| T::of(v as f64)).collect();
                let lat = tape.weighted_abs(z, &t, &w);
                tape.add(sdf, lat)
            }
            _ => sdf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSdfConfig {
    pub hp: Hyperparams,
    pub steps: usize,
    pub points: usize,
    pub pool_size: usize,
    pub sampling: PointSampling,
    pub occlusion_weight: f64,
    pub latent_weight: f64,
}

impl Default for ImageSdfConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparams {
                batch_size: 16,
                learning_rate: 1e-3,
                optimizer: OptimizerKind::Adam,
                ..Hyperparams::default()
            },
            steps: 2000,
            points: 64,
            pool_size: 1024,
            sampling: PointSampling::default(),
            occlusion_weight: 2.0,
            latent_weight: 1.0,
        }
    }
}

/// Single-image reconstruction training. `patches[i]` shows `scenes[i]`;
/// `latents`, when given, holds the free latent of every scene.
pub fn train_image_to_sdf(
    model: &mut ImageToSdf<Matrix<f32>>,
    patches: &[Matrix<f32>],
    scenes: &[SdfScene],
    latents: Option<&Matrix<f32>>,
    cfg: &ImageSdfConfig,
    exec: Execution,
) -> Result<LossCurve> {
    cfg.hp.validate()?;
    if patches.len() != scenes.len() || latents.is_some_and(|l| l.rows != scenes.len()) {
        return Err(Error::Shape(format!(
            "{} images for {} scenes",
            patches.len(),
            scenes.len()
        )));
    }
    let mut curve = LossCurve::default();
    if cfg.steps == 0 || scenes.is_empty() {
        return Ok(curve);
    }
    let pools = point_pools(scenes, cfg.pool_size, &cfg.sampling, cfg.hp.seed, exec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.hp.seed);
    let mut opt = Optimizer::new(&cfg.hp);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.hp.batch_size);
        for _ in 0..cfg.hp.batch_size.min(scenes.len()) {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            }
            let i = order.pop().expect("refilled");
            batch.push(ImageSdfSample {
                patches: &patches[i],
                points: subset(&pools[i], cfg.points, &mut rng),
                latent: latents.map(|l| l.row(i)),
            });
        }
        let (loss, grads) = batch_loss_grads(&*model, &batch, exec, |tape, m, s| {
            m.loss(tape, s, cfg.occlusion_weight, cfg.latent_weight)
        });
        check_finite(step, loss)?;
        check_grads(step, loss, &grads)?;
        opt.step(model, &grads, &crate::train::unit_scale);
        curve.push(step, loss);
    }
    Ok(curve)
}
