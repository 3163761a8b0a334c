//! Synthetic occluded-object scenes: an analytic object partly hidden by a
//! hand-like occluder, rendered with programmatic question/answer ground
//! truth and stored as JSON lines plus netpbm images.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::{sample_grid_in, union_sdf, AnalyticShape, Point3, Pose, ShapeKind};
use crate::reconstruction::{marching_cubes, occlusion_ratio, rasterize, BinaryMask, Camera, Fragments, Mesh, RasterImage};

/// The five questions asked about every image, in instruction-id order.
pub const INSTRUCTIONS: [&str; 5] = [
    "What's the object in the hand?",
    "Is the object in the hand round?",
    "Is the object in the hand long?",
    "Is the object in the hand thin?",
    "Describe the object in the hand",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Ball,
    Rod,
    Plate,
    Box,
    Can,
    Bowl,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Ball,
        Category::Rod,
        Category::Plate,
        Category::Box,
        Category::Can,
        Category::Bowl,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Ball => "ball",
            Category::Rod => "rod",
            Category::Plate => "plate",
            Category::Box => "box",
            Category::Can => "can",
            Category::Bowl => "bowl",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectColor {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl ObjectColor {
    pub const ALL: [ObjectColor; 6] = [
        ObjectColor::Red,
        ObjectColor::Green,
        ObjectColor::Blue,
        ObjectColor::Yellow,
        ObjectColor::Purple,
        ObjectColor::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectColor::Red => "red",
            ObjectColor::Green => "green",
            ObjectColor::Blue => "blue",
            ObjectColor::Yellow => "yellow",
            ObjectColor::Purple => "purple",
            ObjectColor::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ObjectColor::Red => [200, 40, 40],
            ObjectColor::Green => [40, 170, 60],
            ObjectColor::Blue => [50, 80, 210],
            ObjectColor::Yellow => [220, 200, 40],
            ObjectColor::Purple => [140, 60, 180],
            ObjectColor::Orange => [230, 130, 30],
        }
    }
}

const SKIN: [u8; 3] = [225, 180, 150];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub occlusion_target: f64,
    /// Side of the square rendered images.
    pub image_side: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            occlusion_target: 0.25,
            image_side: 224,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.occlusion_target > 0.0 && self.occlusion_target < 1.0) {
            return Err(Error::Config(format!(
                "occlusion target {} outside (0, 1)",
                self.occlusion_target
            )));
        }
        if self.image_side == 0 {
            return Err(Error::Config("image side must be positive".into()));
        }
        Ok(())
    }
}

/// Per-scene tolerance on the realized occlusion ratio.
pub const OCCLUSION_TOLERANCE: f64 = 0.1;
const BISECTION_STOP: f64 = 0.02;
const BISECTION_STEPS: usize = 32;
const MAX_ATTEMPTS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Sub-seed attempt that produced an acceptable occluder placement.
    pub attempt: u32,
    pub category: Category,
    pub color: ObjectColor,
    pub object: AnalyticShape,
    /// Palm box and thumb cylinder.
    pub occluder: Vec<AnalyticShape>,
    pub camera: Camera,
    /// Realized area-based occlusion of the object.
    pub occlusion_ratio: f64,
}

impl SceneSpec {
    pub fn id(&self) -> String {
        format!("s{:016x}", self.seed)
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_object<R: Rng>(category: Category, rng: &mut R) -> Result<AnalyticShape> {
    let kind = match category {
        Category::Ball => ShapeKind::Sphere {
            radius: rng.gen_range(0.25..0.45),
        },
        Category::Rod => ShapeKind::Cylinder {
            radius: rng.gen_range(0.06..0.09),
            half_height: rng.gen_range(0.45..0.7),
        },
        Category::Plate => ShapeKind::Cylinder {
            radius: rng.gen_range(0.35..0.5),
            half_height: rng.gen_range(0.02..0.035),
        },
        Category::Box => ShapeKind::Box {
            half_extents: [
                rng.gen_range(0.15..0.4),
                rng.gen_range(0.15..0.4),
                rng.gen_range(0.15..0.4),
            ],
        },
        Category::Can => {
            let radius = rng.gen_range(0.18..0.28);
            ShapeKind::Cylinder {
                radius,
                half_height: radius * rng.gen_range(0.8..1.15),
            }
        }
        Category::Bowl => {
            let radius = rng.gen_range(0.3..0.45);
            ShapeKind::Cylinder {
                radius,
                half_height: radius * rng.gen_range(0.25..0.45),
            }
        }
    };
    let offset = Point3::new(
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
    );
    let shape = AnalyticShape::new(kind, Pose::random_rotation(rng, offset))?;
    if !shape.inside_cube() {
        return AnalyticShape::new(kind, Pose { translation: Point3::ORIGIN, ..shape.pose });
    }
    Ok(shape)
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation whose local x, y, z axes map to `right`, `up`, `back`.
fn frame(right: Point3, up: Point3, back: Point3) -> [[f64; 3]; 3] {
    [
        [right.x, up.x, back.x],
        [right.y, up.y, back.y],
        [right.z, up.z, back.z],
    ]
}

/// Hand stand-in centred at the local origin: a palm box facing the camera
/// and a thumb cylinder sticking out sideways.
fn sample_hand<R: Rng>(camera: &Camera, rng: &mut R) -> Result<Vec<AnalyticShape>> {
    let back = (camera.eye - camera.target).normalized();
    let right0 = camera.up.cross(back).normalized();
    let up0 = back.cross(right0);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let right = right0 * phi.cos() + up0 * phi.sin();
    let up = back.cross(right);
    let rot = frame(right, up, back);
    let palm = [
        rng.gen_range(0.18..0.26),
        rng.gen_range(0.22..0.3),
        rng.gen_range(0.05..0.07),
    ];
    let thumb_r = rng.gen_range(0.05..0.07);
    let thumb_hh = rng.gen_range(0.12..0.18);
    // Local cylinder axis is y; turn it to point along the palm's x.
    let sideways = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    let thumb_center = right * (palm[0] + 0.8 * thumb_hh) + up * rng.gen_range(-0.1..0.1);
    Ok(vec![
        AnalyticShape::new(
            ShapeKind::Box { half_extents: palm },
            Pose {
                rotation: rot,
                translation: Point3::ORIGIN,
            },
        )?,
        AnalyticShape::new(
            ShapeKind::Cylinder {
                radius: thumb_r,
                half_height: thumb_hh,
            },
            Pose {
                rotation: mat3_mul(&rot, &sideways),
                translation: thumb_center,
            },
        )?,
    ])
}

fn translated_shapes(shapes: &[AnalyticShape], offset: Point3) -> Vec<AnalyticShape> {
    shapes
        .iter()
        .map(|s| AnalyticShape {
            kind: s.kind,
            pose: Pose {
                rotation: s.pose.rotation,
                translation: s.pose.translation + offset,
            },
        })
        .collect()
}

fn bounding_radius(shapes: &[AnalyticShape], center: Point3) -> f64 {
    shapes
        .iter()
        .map(|s| (s.pose.translation - center).norm() + s.circumscribing_radius())
        .fold(0.0, f64::max)
}

/// Triangle mesh of a union of analytic shapes, meshed over the shapes' own
/// bounds with cells small enough to resolve the thinnest part.
pub fn mesh_shapes(shapes: &[AnalyticShape], exec: Execution) -> Result<Mesh> {
    if shapes.is_empty() {
        return Ok(Mesh::default());
    }
    let thinnest = shapes
        .iter()
        .flat_map(|s| s.extents())
        .fold(f64::INFINITY, f64::min);
    let cell = (thinnest / 3.0).clamp(0.012, 0.04);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in shapes {
        let (a, b) = s.world_bounds();
        for k in 0..3 {
            lo[k] = lo[k].min(a.to_array()[k] - 2.0 * cell);
            hi[k] = hi[k].max(b.to_array()[k] + 2.0 * cell);
        }
    }
    let dims = [0, 1, 2].map(|k| (((hi[k] - lo[k]) / cell).ceil() as usize + 1).clamp(2, 128));
    let grid = sample_grid_in(
        |v| union_sdf(shapes, v),
        dims,
        Point3::from_array(lo),
        Point3::from_array(hi),
        exec,
    )?;
    marching_cubes(&grid, 0.0)
}

fn coverage(frags: &Fragments, mesh: u16) -> BinaryMask {
    BinaryMask {
        width: frags.width,
        height: frags.height,
        bits: frags
            .owner
            .iter()
            .map(|o| matches!(o, Some((m, _)) if *m == mesh))
            .collect(),
    }
}

fn overlap_fraction(full: &BinaryMask, cover: &BinaryMask) -> f64 {
    let total = full.count();
    if total == 0 {
        return 0.0;
    }
    let hit = full.bits.iter().zip(&cover.bits).filter(|(&a, &b)| a && b).count();
    hit as f64 / total as f64
}

/// One placement attempt; `None` when no offset lands within tolerance.
fn try_scene(seed: u64, attempt: u32, cfg: &SceneConfig, exec: Execution) -> Result<Option<SceneSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(if attempt == 0 { seed } else { mix_seed(seed, attempt as u64) });
    let camera = Camera::with_size(cfg.image_side, cfg.image_side);
    let category = Category::ALL[rng.gen_range(0..Category::ALL.len())];
    let color = ObjectColor::ALL[rng.gen_range(0..ObjectColor::ALL.len())];
    let object = sample_object(category, &mut rng)?;
    let hand = sample_hand(&camera, &mut rng)?;
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);

    let obj_mesh = mesh_shapes(std::slice::from_ref(&object), exec)?;
    let full = coverage(&rasterize(&[&obj_mesh], &camera, exec), 0);
    if full.count() == 0 {
        return Ok(None);
    }
    let hand_mesh = mesh_shapes(&hand, exec)?;

    // Hand sits entirely in front of the object's bounding sphere, shifted
    // sideways in its own depth plane by `s`.
    let back = (camera.eye - camera.target).normalized();
    let right = camera.up.cross(back).normalized();
    let up = back.cross(right);
    let obj_center = object.pose.translation;
    let r_obj = object.circumscribing_radius();
    let r_hand = bounding_radius(&hand, Point3::ORIGIN);
    let base = obj_center + back * (r_obj + r_hand + 0.05);
    let dir = right * theta.cos() + up * theta.sin();
    let depth_ratio = (base - camera.eye).norm() / (obj_center - camera.eye).norm();
    let s_max = 1.2 * (r_obj * depth_ratio + r_hand) + 0.05;
    let place = |s: f64| base + dir * s;
    let ratio_at = |s: f64| {
        let moved = hand_mesh.translated(place(s));
        let cover = coverage(&rasterize(&[&moved], &camera, exec), 0);
        overlap_fraction(&full, &cover)
    };

    let target = cfg.occlusion_target;
    let (mut lo, mut hi) = (0.0, s_max);
    let mut best = (0.0, ratio_at(0.0));
    if best.1 < target - OCCLUSION_TOLERANCE {
        return Ok(None);
    }
    for _ in 0..BISECTION_STEPS {
        if (best.1 - target).abs() <= BISECTION_STOP {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let r = ratio_at(mid);
        if (r - target).abs() < (best.1 - target).abs() {
            best = (mid, r);
        }
        if r > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let offset = place(best.0);
    let occluder = translated_shapes(&hand, offset);
    let moved = hand_mesh.translated(offset);
    let frags = rasterize(&[&obj_mesh, &moved], &camera, exec);
    let realized = occlusion_ratio(&full, &coverage(&frags, 0))?;
    if (realized - target).abs() > OCCLUSION_TOLERANCE {
        return Ok(None);
    }
    Ok(Some(SceneSpec {
        seed,
        attempt,
        category,
        color,
        object,
        occluder,
        camera,
        occlusion_ratio: realized,
    }))
}

/// Deterministic scene for `seed` whose occlusion ratio lies within
/// [`OCCLUSION_TOLERANCE`] of the target.
pub fn generate_scene(seed: u64, cfg: &SceneConfig, exec: Execution) -> Result<SceneSpec> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(scene) = try_scene(seed, attempt, cfg, exec)? {
            return Ok(scene);
        }
    }
    Err(Error::SceneGeneration {
        seed,
        attempts: MAX_ATTEMPTS as usize,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub round: bool,
    pub long: bool,
    pub thin: bool,
    pub category: Category,
    pub description_template: usize,
}

/// Sentence patterns for the describe instruction.
pub const DESCRIPTION_TEMPLATES: [&str; 2] = [
    "It is a {color} {category} with a {shape} shape.",
    "A {shape} {color} {category} held in the hand.",
];

impl AttributeSet {
    /// Ground-truth attributes from the object's kind and size.
    pub fn of_scene(scene: &SceneSpec) -> Self {
        let ext = scene.object.extents();
        let max = ext.iter().copied().fold(0.0, f64::max);
        let min = ext.iter().copied().fold(f64::INFINITY, f64::min);
        let round = match scene.object.kind {
            ShapeKind::Sphere { .. } => true,
            ShapeKind::Cylinder {
                radius,
                half_height,
            } => half_height / radius < 1.2,
            ShapeKind::Box { .. } => false,
        };
        Self {
            round,
            long: max / min >= 3.0,
            thin: min <= 0.15 * max,
            category: scene.category,
            description_template: (mix_seed(scene.seed, 0xd5) % DESCRIPTION_TEMPLATES.len() as u64) as usize,
        }
    }

    pub fn describe(&self, color: ObjectColor) -> String {
        let shape = if self.round {
            "round"
        } else if self.long {
            "long"
        } else {
            "boxy"
        };
        DESCRIPTION_TEMPLATES[self.description_template]
            .replace("{color}", color.name())
            .replace("{category}", self.category.name())
            .replace("{shape}", shape)
    }

    /// Answers to the five instructions, in order.
    pub fn answers(&self, color: ObjectColor) -> [String; 5] {
        let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
        [
            self.category.name().to_string(),
            yn(self.round),
            yn(self.long),
            yn(self.thin),
            self.describe(color),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub instruction_id: u8,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Relative to the dataset directory.
    pub image_path: String,
    pub reconstructed_image_path: String,
    pub occlusion_ratio: f64,
    pub category: Category,
    pub attributes: AttributeSet,
    pub qa: Vec<QaPair>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.qa.len() != INSTRUCTIONS.len() {
            return Err(Error::Validation(format!(
                "record {} has {} question/answer pairs, expected {}",
                self.id,
                self.qa.len(),
                INSTRUCTIONS.len()
            )));
        }
        for (i, (qa, q)) in self.qa.iter().zip(INSTRUCTIONS).enumerate() {
            if qa.instruction_id as usize != i + 1 || qa.question != q {
                return Err(Error::Validation(format!(
                    "record {} entry {} is not instruction {}: {:?}",
                    self.id,
                    i,
                    i + 1,
                    qa.question
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_ratio) {
            return Err(Error::Validation(format!(
                "record {} occlusion ratio {} outside [0, 1]",
                self.id, self.occlusion_ratio
            )));
        }
        if self.attributes.category != self.category {
            return Err(Error::Validation(format!(
                "record {} category disagrees with its attributes",
                self.id
            )));
        }
        Ok(())
    }

    pub fn answer(&self, instruction_id: u8) -> Option<&str> {
        self.qa
            .iter()
            .find(|q| q.instruction_id == instruction_id)
            .map(|q| q.answer.as_str())
    }
}

/// Light direction towards the viewer's upper right.
fn light_dir(camera: &Camera) -> Point3 {
    let back = (camera.eye - camera.target).normalized();
    let right = camera.up.cross(back).normalized();
    let up = back.cross(right);
    (back + up * 0.6 + right * 0.3).normalized()
}

fn shade(frags: &Fragments, meshes: &[&Mesh], colors: &[[u8; 3]], camera: &Camera) -> RasterImage {
    let light = light_dir(camera);
    let mut img = RasterImage::new(frags.width, frags.height);
    for (px, own) in img.pixels.iter_mut().zip(&frags.owner) {
        let Some((m, t)) = *own else { continue };
        let mesh = meshes[m as usize];
        let tri = mesh.triangles[t as usize];
        let [a, b, c] = tri.map(|i| mesh.vertices[i]);
        let mut n = (b - a).cross(c - a).normalized();
        if n.dot(camera.eye - a) < 0.0 {
            n = n * -1.0;
        }
        let k = 0.3 + 0.7 * n.dot(light).max(0.0);
        *px = colors[m as usize].map(|ch| (ch as f64 * k).round().min(255.0) as u8);
    }
    img
}

pub struct RenderedScene {
    pub occluded: RasterImage,
    pub object_only: RasterImage,
    pub full_mask: BinaryMask,
    pub visible_mask: BinaryMask,
}

/// Renders the occluded view and the object-only companion view.
pub fn render_scene(scene: &SceneSpec, exec: Execution) -> Result<RenderedScene> {
    let obj = mesh_shapes(std::slice::from_ref(&scene.object), exec)?;
    let hand = mesh_shapes(&scene.occluder, exec)?;
    let color = scene.color.rgb();
    let alone = rasterize(&[&obj], &scene.camera, exec);
    let joint = rasterize(&[&obj, &hand], &scene.camera, exec);
    Ok(RenderedScene {
        occluded: shade(&joint, &[&obj, &hand], &[color, SKIN], &scene.camera),
        object_only: shade(&alone, &[&obj], &[color], &scene.camera),
        full_mask: coverage(&alone, 0),
        visible_mask: coverage(&joint, 0),
    })
}

pub fn image_rel_path(id: &str) -> String {
    format!("images/{id}.ppm")
}

pub fn recon_rel_path(id: &str) -> String {
    format!("recon/{id}.ppm")
}

/// Full and visible object masks stored next to a record.
pub fn mask_paths(out_dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("masks/{id}_full.pgm")),
        out_dir.join(format!("masks/{id}_visible.pgm")),
    )
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Renders a scene into `out_dir` and builds its record.
pub fn render_record(scene: &SceneSpec, out_dir: &Path, exec: Execution) -> Result<DatasetRecord> {
    for sub in ["images", "recon", "masks"] {
        ensure_dir(&out_dir.join(sub))?;
    }
    let id = scene.id();
    let r = render_scene(scene, exec)?;
    let image_path = image_rel_path(&id);
    let reconstructed_image_path = recon_rel_path(&id);
    r.occluded.write_ppm(&out_dir.join(&image_path))?;
    r.object_only.write_ppm(&out_dir.join(&reconstructed_image_path))?;
    let (full_path, visible_path) = mask_paths(out_dir, &id);
    r.full_mask.write_pgm(&full_path)?;
    r.visible_mask.write_pgm(&visible_path)?;
    let attributes = AttributeSet::of_scene(scene);
    let qa = INSTRUCTIONS
        .iter()
        .zip(attributes.answers(scene.color))
        .enumerate()
        .map(|(i, (q, a))| QaPair {
            instruction_id: i as u8 + 1,
            question: q.to_string(),
            answer: a,
        })
        .collect();
    Ok(DatasetRecord {
        id,
        image_path,
        reconstructed_image_path,
        occlusion_ratio: occlusion_ratio(&r.full_mask, &r.visible_mask)?,
        category: scene.category,
        attributes,
        qa,
    })
}

/// Bilinear resampling to `side x side` with pixel-centre alignment;
/// channel values round half up.
pub fn resize_image(image: &RasterImage, side: usize) -> RasterImage {
    let side = side.max(1);
    if image.width == side && image.height == side {
        return image.clone();
    }
    let mut out = RasterImage::new(side, side);
    if image.width == 0 || image.height == 0 {
        return out;
    }
    let sx = image.width as f64 / side as f64;
    let sy = image.height as f64 / side as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    for y in 0..side {
        let (y0, y1, fy) = coord(y, sy, image.height);
        for x in 0..side {
            let (x0, x1, fx) = coord(x, sx, image.width);
            let (p00, p10, p01, p11) = (
                image.get(x0, y0),
                image.get(x1, y0),
                image.get(x0, y1),
                image.get(x1, y1),
            );
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                px[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, px);
        }
    }
    out
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_records(records: &[DatasetRecord], path: &Path) -> Result<()> {
    write_jsonl(records, path)
}

/// Reads and validates records; the error names the offending line.
pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| Error::Validation(format!("{}: line {}: {e}", path.display(), i + 1)))?;
    }
    Ok(records)
}

pub fn write_scenes(scenes: &[SceneSpec], path: &Path) -> Result<()> {
    write_jsonl(scenes, path)
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneSpec>> {
    read_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 80/10/10 partition by scene seed.
    pub fn of_seed(seed: u64) -> Self {
        match mix_seed(seed, 0x5911) % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 5000,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const CONFIG_FILE: &str = "config.json";

pub fn scene_seed(master: u64, index: usize) -> u64 {
    mix_seed(master, index as u64)
}

/// Generates, renders and writes a whole dataset. Scenes are produced in
/// parallel; files listing them are written in index order.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path, exec: Execution) -> Result<Vec<DatasetRecord>> {
    cfg.scene.validate()?;
    ensure_dir(out_dir)?;
    let results = exec::map_range(exec, cfg.count, |i| {
        let scene = generate_scene(scene_seed(cfg.seed, i), &cfg.scene, Execution::Sequential)?;
        let record = render_record(&scene, out_dir, Execution::Sequential)?;
        Ok((scene, record))
    });
    let mut scenes = Vec::with_capacity(cfg.count);
    let mut records = Vec::with_capacity(cfg.count);
    for r in results {
        let (s, rec): (SceneSpec, DatasetRecord) = r?;
        scenes.push(s);
        records.push(rec);
    }
    write_records(&records, &out_dir.join(RECORDS_FILE))?;
    write_scenes(&scenes, &out_dir.join(SCENES_FILE))?;
    let config_path = out_dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(&config_path, json + "\n").map_err(|e| Error::io(&config_path, e))?;
    Ok(records)
}

/// A record with its scene and its occluded image at training resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: DatasetRecord,
    pub scene: SceneSpec,
    pub image: RasterImage,
}

impl Sample {
    pub fn split(&self) -> Split {
        Split::of_seed(self.scene.seed)
    }
}

/// Loads a generated dataset, resizing images to `side` (or keeping the
/// stored size when `None`).
pub fn load_dataset(dir: &Path, side: Option<usize>, exec: Execution) -> Result<Vec<Sample>> {
    let records = read_records(&dir.join(RECORDS_FILE))?;
    let scenes = read_scenes(&dir.join(SCENES_FILE))?;
    if records.len() != scenes.len() {
        return Err(Error::Validation(format!(
            "{} records but {} scenes",
            records.len(),
            scenes.len()
        )));
    }
    let pairs: Vec<(DatasetRecord, SceneSpec)> = records.into_iter().zip(scenes).collect();
    exec::map_slice(exec, &pairs, |(record, scene)| {
        if record.id != scene.id() {
            return Err(Error::Validation(format!(
                "record {} does not match scene {}",
                record.id,
                scene.id()
            )));
        }
        let image = RasterImage::read_ppm(&dir.join(&record.image_path))?;
        let image = match side {
            Some(s) => resize_image(&image, s),
            None => image,
        };
        Ok(Sample {
            record: record.clone(),
            scene: scene.clone(),
            image,
        })
    })
    .into_iter()
    .collect()
}
