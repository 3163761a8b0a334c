//! Signed distance fields: analytic primitives used as ground truth, the
//! learned subject/object decoders, and regular-grid sampling.

use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::matrix::Matrix;
use crate::nn::{impl_module, join, Linear, Params};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Point3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(self, o: Point3, t: f64) -> Point3 {
        self + (o - self) * t
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Sinusoidal point feature: raw coordinates followed, for each band `k`,
/// by `sin(2^k π c)` for the three axes and then `cos(2^k π c)` for the
/// three axes.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeature {
    pub values: Vec<f64>,
}

pub const fn feature_dim(bands: usize) -> usize {
    3 + 6 * bands
}

pub fn positional_encode(v: Point3, bands: usize) -> Result<PointFeature> {
    if !v.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite point {v:?}")));
    }
    let mut values = Vec::with_capacity(feature_dim(bands));
    encode_into(v, bands, &mut values);
    Ok(PointFeature { values })
}

fn encode_into<T: Real>(v: Point3, bands: usize, out: &mut Vec<T>) {
    let c = v.to_array();
    out.extend(c.iter().map(|&x| T::of(x)));
    for k in 0..bands {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(c.iter().map(|&x| T::of((freq * x).sin())));
        out.extend(c.iter().map(|&x| T::of((freq * x).cos())));
    }
}

/// Encodes a batch of points as rows of a matrix.
pub fn encode_points<T: Real>(points: &[Point3], bands: usize) -> Matrix<T> {
    let mut data = Vec::with_capacity(points.len() * feature_dim(bands));
    for &p in points {
        encode_into(p, bands, &mut data);
    }
    Matrix {
        rows: points.len(),
        cols: feature_dim(bands),
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Subject,
    Object,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
    pub role: Role,
}

/// Fully connected SDF decoder over `[point feature; latent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfDecoder<P> {
    pub role: Role,
    pub bands: usize,
    pub latent_dim: usize,
    /// Hidden layers followed by the scalar head.
    pub layers: Vec<Linear<P>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfDecoderConfig {
    pub bands: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for SdfDecoderConfig {
    fn default() -> Self {
        Self {
            bands: 4,
            latent_dim: 16,
            hidden: vec![64, 64, 64],
        }
    }
}

/// Sharpness of the softplus between hidden layers.
pub const SOFTPLUS_BETA: f64 = 10.0;

impl<T: Real> SdfDecoder<Matrix<T>> {
    pub fn new<R: Rng>(role: Role, cfg: &SdfDecoderConfig, rng: &mut R) -> Self {
        let mut dims = vec![feature_dim(cfg.bands) + cfg.latent_dim];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self {
            role,
            bands: cfg.bands,
            latent_dim: cfg.latent_dim,
            layers,
        }
    }

    /// Decoder whose every weight and bias is zero except the head bias.
    pub fn constant(role: Role, cfg: &SdfDecoderConfig, head_bias: T) -> Self {
        let mut dims = vec![feature_dim(cfg.bands) + cfg.latent_dim];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let mut layers: Vec<Linear<Matrix<T>>> =
            dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        layers.last_mut().expect("head layer").b.data[0] = head_bias;
        Self {
            role,
            bands: cfg.bands,
            latent_dim: cfg.latent_dim,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Tape-free batched evaluation over rows of `[features | latents]`.
    pub fn forward_plain(&self, input: &Matrix<T>) -> Matrix<T> {
        let beta = T::of(SOFTPLUS_BETA);
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.matmul(&layer.w);
            for r in 0..next.rows {
                for (o, &b) in next.row_mut(r).iter_mut().zip(&layer.b.data) {
                    *o += b;
                    if i < last {
                        let bx = beta * *o;
                        if bx <= T::of(20.0) {
                            *o = bx.exp().ln_1p() / beta;
                        }
                    }
                }
            }
            h = next;
        }
        h
    }

    fn check_inputs(&self, role: Role, feature: &PointFeature, latent: &LatentCode) -> Result<()> {
        if self.role != role || latent.role != role {
            return Err(Error::Shape(format!(
                "decoder role {:?} and latent role {:?} must both be {role:?}",
                self.role, latent.role
            )));
        }
        if feature.values.len() + latent.values.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "decoder expects {} inputs, got {} feature + {} latent",
                self.input_dim(),
                feature.values.len(),
                latent.values.len()
            )));
        }
        Ok(())
    }

    fn eval_role(&self, role: Role, feature: &PointFeature, latent: &LatentCode) -> Result<T> {
        self.check_inputs(role, feature, latent)?;
        let row: Vec<T> = feature
            .values
            .iter()
            .chain(&latent.values)
            .map(|&v| T::of(v))
            .collect();
        let out = self.forward_plain(&Matrix::row_vector(row));
        Ok(out.data[0])
    }

    /// Subject (occluder) signed distance `f_s([e_v; e_h])`.
    pub fn eval_sdf_subject(&self, e_v: &PointFeature, e_h: &LatentCode) -> Result<T> {
        self.eval_role(Role::Subject, e_v, e_h)
    }

    /// Object signed distance `f_o([e_v; e_o])`.
    pub fn eval_sdf_object(&self, e_v: &PointFeature, e_o: &LatentCode) -> Result<T> {
        self.eval_role(Role::Object, e_v, e_o)
    }

    /// Evaluates the field at many points for one latent code.
    pub fn eval_points(&self, points: &[Point3], latent: &[T]) -> Result<Vec<T>> {
        if feature_dim(self.bands) + latent.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "latent of length {} does not fit decoder input {}",
                latent.len(),
                self.input_dim()
            )));
        }
        let feats = encode_points::<T>(points, self.bands);
        let width = self.input_dim();
        let mut input = Matrix::zeros(points.len(), width);
        for r in 0..points.len() {
            let row = input.row_mut(r);
            row[..feats.cols].copy_from_slice(feats.row(r));
            row[feats.cols..].copy_from_slice(latent);
        }
        Ok(self.forward_plain(&input).data)
    }

    /// Samples the decoded field on a regular grid over `[-1, 1]^3`.
    pub fn sample_grid(&self, latent: &[T], resolution: usize, exec: Execution) -> Result<SdfGrid> {
        if resolution < 2 {
            return Err(Error::InvalidInput("grid resolution must be at least 2".into()));
        }
        let r = resolution;
        // One x-slab per task; each slab is a single batched forward pass.
        let slabs = exec::map_range(exec, r, |i| {
            let mut pts = Vec::with_capacity(r * r);
            for j in 0..r {
                for k in 0..r {
                    pts.push(grid_point([i, j, k], [r, r, r], CUBE_MIN, CUBE_MAX));
                }
            }
            self.eval_points(&pts, latent)
        });
        let mut values = Vec::with_capacity(r * r * r);
        for (i, slab) in slabs.into_iter().enumerate() {
            for (n, v) in slab?.into_iter().enumerate() {
                let v = v.f64();
                if !v.is_finite() {
                    return Err(Error::InvalidValue {
                        index: [i, n / r, n % r],
                        value: v,
                    });
                }
                values.push(v);
            }
        }
        Ok(SdfGrid {
            dims: [r, r, r],
            min: CUBE_MIN,
            max: CUBE_MAX,
            values,
        })
    }

    pub fn cast<U: Real>(&self) -> SdfDecoder<Matrix<U>> {
        self.map("", &mut |_, m| m.cast())
    }
}

impl<P> SdfDecoder<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> SdfDecoder<Q> {
        SdfDecoder {
            role: self.role,
            bands: self.bands,
            latent_dim: self.latent_dim,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layer{i}")), f))
                .collect(),
        }
    }
}

impl SdfDecoder<Var> {
    /// Batched forward on the tape; `input` rows are `[feature | latent]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i < last {
                h = tape.softplus(h, T::of(SOFTPLUS_BETA));
            }
        }
        h
    }
}

impl<P> Params<P> for SdfDecoder<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

impl_module!(SdfDecoder);

/// Row-major 3x3 rotation plus translation, applied as `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: Point3::ORIGIN,
    };

    pub fn translation(t: Point3) -> Self {
        Pose {
            translation: t,
            ..Self::IDENTITY
        }
    }

    /// Uniformly random rotation (Shoemake's quaternion method).
    pub fn random_rotation<R: Rng>(rng: &mut R, translation: Point3) -> Self {
        let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let tau = std::f64::consts::TAU;
        let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
        let (w, x, y, z) = (
            a * (tau * u2).sin(),
            a * (tau * u2).cos(),
            b * (tau * u3).sin(),
            b * (tau * u3).cos(),
        );
        let rotation = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - z * w),
                2.0 * (x * z + y * w),
            ],
            [
                2.0 * (x * y + z * w),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - x * w),
            ],
            [
                2.0 * (x * z - y * w),
                2.0 * (y * z + x * w),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        Pose {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
        ) + self.translation
    }

    pub fn inverse_apply(&self, p: Point3) -> Point3 {
        let q = p - self.translation;
        let r = &self.rotation;
        Point3::new(
            r[0][0] * q.x + r[1][0] * q.y + r[2][0] * q.z,
            r[0][1] * q.x + r[1][1] * q.y + r[2][1] * q.z,
            r[0][2] * q.x + r[1][2] * q.y + r[2][2] * q.z,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Axis along local +y.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticShape {
    pub kind: ShapeKind,
    pub pose: Pose,
}

impl AnalyticShape {
    pub fn new(kind: ShapeKind, pose: Pose) -> Result<Self> {
        let shape = Self { kind, pose };
        shape.validate()?;
        Ok(shape)
    }

    pub fn sphere(radius: f64, center: Point3) -> Result<Self> {
        Self::new(ShapeKind::Sphere { radius }, Pose::translation(center))
    }

    pub fn validate(&self) -> Result<()> {
        let sizes: Vec<f64> = match self.kind {
            ShapeKind::Sphere { radius } => vec![radius],
            ShapeKind::Box { half_extents } => half_extents.to_vec(),
            ShapeKind::Cylinder {
                radius,
                half_height,
            } => vec![radius, half_height],
        };
        if sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "shape sizes must be positive and finite: {:?}",
                self.kind
            )));
        }
        if !self.pose.translation.is_finite() {
            return Err(Error::InvalidInput("non-finite pose".into()));
        }
        Ok(())
    }

    /// Half extents of the local axis-aligned bounding box.
    pub fn local_half_extents(&self) -> [f64; 3] {
        match self.kind {
            ShapeKind::Sphere { radius } => [radius; 3],
            ShapeKind::Box { half_extents } => half_extents,
            ShapeKind::Cylinder {
                radius,
                half_height,
            } => [radius, half_height, radius],
        }
    }

    /// Full extents along the shape's own axes, smallest first is not
    /// guaranteed.
    pub fn extents(&self) -> [f64; 3] {
        self.local_half_extents().map(|h| 2.0 * h)
    }

    /// World-space axis-aligned bounding box (conservative for spheres and
    /// cylinders).
    pub fn world_bounds(&self) -> (Point3, Point3) {
        let h = self.local_half_extents();
        let r = &self.pose.rotation;
        let mut ext = [0.0; 3];
        for (i, e) in ext.iter_mut().enumerate() {
            *e = (0..3).map(|j| r[i][j].abs() * h[j]).sum();
        }
        let c = self.pose.translation;
        (
            Point3::new(c.x - ext[0], c.y - ext[1], c.z - ext[2]),
            Point3::new(c.x + ext[0], c.y + ext[1], c.z + ext[2]),
        )
    }

    pub fn inside_cube(&self) -> bool {
        let (lo, hi) = self.world_bounds();
        lo.to_array().iter().all(|&v| v >= -1.0) && hi.to_array().iter().all(|&v| v <= 1.0)
    }

    /// Radius of the smallest origin-centred sphere around the local shape.
    pub fn circumscribing_radius(&self) -> f64 {
        let h = self.local_half_extents();
        match self.kind {
            ShapeKind::Sphere { radius } => radius,
            _ => (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt(),
        }
    }
}

/// Exact signed distance: negative inside, zero on the surface, positive
/// outside.
pub fn analytic_sdf(shape: &AnalyticShape, v: Point3) -> f64 {
    let p = shape.pose.inverse_apply(v);
    match shape.kind {
        ShapeKind::Sphere { radius } => p.norm() - radius,
        ShapeKind::Box { half_extents: h } => {
            let q = [p.x.abs() - h[0], p.y.abs() - h[1], p.z.abs() - h[2]];
            let outside = Point3::new(q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)).norm();
            outside + q[0].max(q[1]).max(q[2]).min(0.0)
        }
        ShapeKind::Cylinder {
            radius,
            half_height,
        } => {
            let dr = (p.x * p.x + p.z * p.z).sqrt() - radius;
            let dy = p.y.abs() - half_height;
            let outside = (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
            outside + dr.max(dy).min(0.0)
        }
    }
}

/// Signed distance of a union of shapes.
pub fn union_sdf(shapes: &[AnalyticShape], v: Point3) -> f64 {
    shapes
        .iter()
        .map(|s| analytic_sdf(s, v))
        .fold(f64::INFINITY, f64::min)
}

pub const CUBE_MIN: Point3 = Point3::new(-1.0, -1.0, -1.0);
pub const CUBE_MAX: Point3 = Point3::new(1.0, 1.0, 1.0);

/// Scalar field sampled at the corners of a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    /// Samples per axis (x, y, z).
    pub dims: [usize; 3],
    pub min: Point3,
    pub max: Point3,
    /// Index `(i, j, k)` lives at `(i * dims[1] + j) * dims[2] + k`.
    pub values: Vec<f64>,
}

impl SdfGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Point3 {
        grid_point([i, j, k], self.dims, self.min, self.max)
    }

    pub fn resolution(&self) -> usize {
        self.dims[0]
    }

    pub fn cell_size(&self) -> Point3 {
        let d = self.max - self.min;
        Point3::new(
            d.x / (self.dims[0] - 1) as f64,
            d.y / (self.dims[1] - 1) as f64,
            d.z / (self.dims[2] - 1) as f64,
        )
    }
}

/// Corner-aligned lattice position: index 0 maps to `min`, the last index to
/// `max`, exactly.
pub fn grid_point(idx: [usize; 3], dims: [usize; 3], min: Point3, max: Point3) -> Point3 {
    let axis = |i: usize, n: usize, lo: f64, hi: f64| {
        if i == n - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    Point3::new(
        axis(idx[0], dims[0], min.x, max.x),
        axis(idx[1], dims[1], min.y, max.y),
        axis(idx[2], dims[2], min.z, max.z),
    )
}

/// Samples `field` at `resolution^3` corner-aligned points over `[-1, 1]^3`.
pub fn sample_grid<F>(field: F, resolution: usize) -> Result<SdfGrid>
where
    F: Fn(Point3) -> f64 + Sync + Send,
{
    sample_grid_in(
        field,
        [resolution; 3],
        CUBE_MIN,
        CUBE_MAX,
        Execution::default(),
    )
}

/// Samples `field` over an arbitrary axis-aligned box.
pub fn sample_grid_in<F>(
    field: F,
    dims: [usize; 3],
    min: Point3,
    max: Point3,
    exec: Execution,
) -> Result<SdfGrid>
where
    F: Fn(Point3) -> f64 + Sync + Send,
{
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidInput(format!(
            "grid needs at least 2 samples per axis, got {dims:?}"
        )));
    }
    let slabs = exec::map_range(exec, dims[0], |i| {
        let mut slab = Vec::with_capacity(dims[1] * dims[2]);
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let v = field(grid_point([i, j, k], dims, min, max));
                if !v.is_finite() {
                    return Err(Error::InvalidValue {
                        index: [i, j, k],
                        value: v,
                    });
                }
                slab.push(v);
            }
        }
        Ok(slab)
    });
    let mut values = Vec::with_capacity(dims.iter().product());
    for slab in slabs {
        values.extend(slab?);
    }
    Ok(SdfGrid {
        dims,
        min,
        max,
        values,
    })
}
