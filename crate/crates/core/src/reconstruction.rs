//! Object-field reconstruction: marching-cubes meshing of an SDF grid,
//! pinhole projection of meshes into images and masks, and occlusion ratios.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::{Point3, SdfGrid};
use crate::mc_tables::{CORNERS, EDGES, TRIANGLES};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.vertices.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite vertex {v:?}")));
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::InvalidInput(format!("triangle {i} indexes past the vertex list")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::InvalidInput(format!("triangle {i} is degenerate: {t:?}")));
            }
        }
        Ok(())
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_use_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every undirected edge borders exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_use_counts().values().all(|&c| c == 2)
    }

    pub fn translated(&self, offset: Point3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|&v| v + offset).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Concatenates meshes, re-indexing triangles.
    pub fn merged(meshes: &[&Mesh]) -> Mesh {
        let mut out = Mesh::default();
        for m in meshes {
            let base = out.vertices.len();
            out.vertices.extend_from_slice(&m.vertices);
            out.triangles
                .extend(m.triangles.iter().map(|t| t.map(|i| i + base)));
        }
        out
    }
}

/// Marching cubes at level `iso`. Corners strictly below `iso` count as
/// inside; vertices are linear interpolations of the crossing along each
/// cell edge and are shared between neighbouring cells.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> Result<Mesh> {
    if grid.dims.iter().any(|&d| d < 2) || grid.values.len() != grid.dims.iter().product::<usize>() {
        return Err(Error::InvalidInput(format!(
            "grid of dims {:?} holds {} values",
            grid.dims,
            grid.values.len()
        )));
    }
    if let Some(pos) = grid.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite grid value at flat index {pos}"
        )));
    }
    let [nx, ny, nz] = grid.dims;
    let mut mesh = Mesh::default();
    // Vertex index per (grid point, axis) edge.
    let mut edge_vertex = vec![u32::MAX; nx * ny * nz * 3];

    let mut corner_idx = [[0usize; 3]; 8];
    let mut corner_val = [0.0f64; 8];
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    corner_idx[c] = [i + off[0], j + off[1], k + off[2]];
                    corner_val[c] = grid.value(corner_idx[c][0], corner_idx[c][1], corner_idx[c][2]);
                    if corner_val[c] < iso {
                        case |= 1 << c;
                    }
                }
                let row = &TRIANGLES[case];
                if row[0] < 0 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0usize; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let e = e as usize;
                        if local[e] == usize::MAX {
                            let (a, b) = EDGES[e];
                            let (pa, pb) = (corner_idx[a], corner_idx[b]);
                            // Canonical edge key: lower endpoint + axis.
                            let (lo, axis) = edge_key(pa, pb);
                            let key = grid.index(lo[0], lo[1], lo[2]) * 3 + axis;
                            if edge_vertex[key] == u32::MAX {
                                let (va, vb) = (corner_val[a], corner_val[b]);
                                let t = if (vb - va).abs() > 0.0 {
                                    ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                                } else {
                                    0.5
                                };
                                let p = grid
                                    .point(pa[0], pa[1], pa[2])
                                    .lerp(grid.point(pb[0], pb[1], pb[2]), t);
                                edge_vertex[key] = mesh.vertices.len() as u32;
                                mesh.vertices.push(p);
                            }
                            local[e] = edge_vertex[key] as usize;
                        }
                        *slot = local[e];
                    }
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    Ok(mesh)
}

fn edge_key(a: [usize; 3], b: [usize; 3]) -> ([usize; 3], usize) {
    let axis = (0..3).find(|&d| a[d] != b[d]).expect("cell edge spans one axis");
    if a[axis] < b[axis] {
        (a, axis)
    } else {
        (b, axis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Point3,
    pub target: Point3,
    pub up: Point3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            eye: Point3::new(0.0, 0.0, 2.5),
            target: Point3::ORIGIN,
            up: Point3::new(0.0, 1.0, 0.0),
            fov_deg: 45.0,
            width: 64,
            height: 64,
            near: 0.1,
        }
    }
}

impl Camera {
    pub fn with_size(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("camera: {m}")));
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov must lie in (0, 180)");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image must be at least 1x1");
        }
        if (self.eye - self.target).norm() == 0.0 {
            return bad("eye equals target");
        }
        if self.near.is_nan() || self.near <= 0.0 {
            return bad("near plane must be positive");
        }
        if (self.up.norm() - 1.0).abs() > 1e-9 {
            return bad("up vector must be unit length");
        }
        if (self.target - self.eye).normalized().cross(self.up).norm() < 1e-9 {
            return bad("up vector is parallel to the view direction");
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    fn basis(&self) -> (Point3, Point3, Point3) {
        let forward = (self.target - self.eye).normalized();
        let right = forward.cross(self.up).normalized();
        let up = right.cross(forward);
        (right, up, forward)
    }

    /// World point to camera space `(x right, y up, z depth along view)`.
    pub fn to_camera(&self, p: Point3) -> Point3 {
        let (r, u, f) = self.basis();
        let d = p - self.eye;
        Point3::new(d.dot(r), d.dot(u), d.dot(f))
    }

    /// Camera-space point (with positive depth) to continuous pixel
    /// coordinates; pixel `(c, r)` has its centre at `(c + 0.5, r + 0.5)`.
    pub fn project_camera(&self, c: Point3) -> (f64, f64) {
        let f = self.focal();
        (
            self.width as f64 / 2.0 + f * c.x / c.z,
            self.height as f64 / 2.0 - f * c.y / c.z,
        )
    }

    /// Inverse of `project_camera` at a given depth.
    pub fn unproject(&self, px: f64, py: f64, depth: f64) -> Point3 {
        let f = self.focal();
        let x = (px - self.width as f64 / 2.0) * depth / f;
        let y = (self.height as f64 / 2.0 - py) * depth / f;
        let (r, u, fw) = self.basis();
        self.eye + r * x + u * y + fw * depth
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.pixels.iter().flatten());
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (w, h, data) = read_netpbm(BufReader::new(file), b"P6", 3)
            .map_err(|m| Error::InvalidInput(format!("{}: {m}", path.display())))?;
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::from_pixels(w, h, pixels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Pixels that are non-black in any channel.
    pub fn from_image(image: &RasterImage) -> Self {
        Self {
            width: image.width,
            height: image.height,
            bits: image.pixels.iter().map(|p| p.iter().any(|&c| c > 0)).collect(),
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (w, h, data) = read_netpbm(BufReader::new(file), b"P5", 1)
            .map_err(|m| Error::InvalidInput(format!("{}: {m}", path.display())))?;
        Ok(Self {
            width: w,
            height: h,
            bits: data.iter().map(|&v| v > 127).collect(),
        })
    }
}

fn read_netpbm<R: BufRead>(
    mut r: R,
    magic: &[u8],
    channels: usize,
) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut header = Vec::new();
    // magic, width, height, maxval; '#' comments run to end of line.
    while header.len() < 4 {
        let mut token = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            if r.read(&mut byte).map_err(|e| e.to_string())? == 0 {
                return Err("truncated header".into());
            }
            match byte[0] {
                b'#' if token.is_empty() => {
                    let mut skip = Vec::new();
                    r.read_until(b'\n', &mut skip).map_err(|e| e.to_string())?;
                }
                c if c.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        break;
                    }
                }
                c => token.push(c),
            }
        }
        header.push(token);
    }
    if header[0] != magic {
        return Err(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        ));
    }
    let num = |t: &[u8]| -> std::result::Result<usize, String> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "bad header number".to_string())
    };
    let (w, h, max) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let mut data = vec![0u8; w * h * channels];
    r.read_exact(&mut data).map_err(|e| e.to_string())?;
    Ok((w, h, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shading {
    /// Covered pixels white on black.
    Silhouette,
    /// Nearer fragments brighter.
    Depth,
}

/// Screen-space triangle after near-plane clipping.
#[derive(Debug, Clone, Copy)]
struct ScreenTri {
    /// `(px, py, depth)` with positive signed area.
    v: [[f64; 3]; 3],
    mesh: u16,
    tri: u32,
}

/// Per-pixel result of rasterizing one or more meshes with a depth buffer.
#[derive(Debug, Clone)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    /// `(mesh index, triangle index)` of the winning fragment.
    pub owner: Vec<Option<(u16, u32)>>,
}

fn edge_fn(a: [f64; 3], b: [f64; 3], px: f64, py: f64) -> f64 {
    (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
}

/// Top-left style tie rule: of the two orientations of a shared edge exactly
/// one owns pixel centres lying on it.
fn edge_inclusive(a: [f64; 3], b: [f64; 3]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn clip_near(cam: &[Point3; 3], near: f64) -> Vec<Point3> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let (a, b) = (cam[i], cam[(i + 1) % 3]);
        let (ina, inb) = (a.z >= near, b.z >= near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (near - a.z) / (b.z - a.z);
            out.push(a.lerp(b, t));
        }
    }
    out
}

fn setup_triangles(meshes: &[&Mesh], camera: &Camera) -> Vec<ScreenTri> {
    let mut out = Vec::new();
    for (mi, mesh) in meshes.iter().enumerate() {
        let cam: Vec<Point3> = mesh.vertices.iter().map(|&v| camera.to_camera(v)).collect();
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let tri = [cam[t[0]], cam[t[1]], cam[t[2]]];
            if tri.iter().all(|p| p.z < camera.near) {
                continue;
            }
            let poly = if tri.iter().all(|p| p.z >= camera.near) {
                tri.to_vec()
            } else {
                clip_near(&tri, camera.near)
            };
            let screen: Vec<[f64; 3]> = poly
                .iter()
                .map(|&p| {
                    let (x, y) = camera.project_camera(p);
                    [x, y, p.z]
                })
                .collect();
            for k in 1..screen.len().saturating_sub(1) {
                let mut v = [screen[0], screen[k], screen[k + 1]];
                let area = edge_fn(v[0], v[1], v[2][0], v[2][1]);
                if area == 0.0 || !area.is_finite() {
                    continue;
                }
                if area < 0.0 {
                    v.swap(1, 2);
                }
                out.push(ScreenTri {
                    v,
                    mesh: mi as u16,
                    tri: ti as u32,
                });
            }
        }
    }
    out
}

/// Rasterizes meshes with a shared depth buffer; nearer fragments win and
/// ties keep the earlier triangle. Row bands are independent, so they are
/// processed in parallel and stitched in order.
pub fn rasterize(meshes: &[&Mesh], camera: &Camera, exec: Execution) -> Fragments {
    let (w, h) = (camera.width, camera.height);
    let tris = setup_triangles(meshes, camera);
    const BAND: usize = 16;
    let bands = h.div_ceil(BAND);
    let parts = exec::map_range(exec, bands, |band| {
        let (y0, y1) = (band * BAND, ((band + 1) * BAND).min(h));
        let mut depth = vec![f64::INFINITY; (y1 - y0) * w];
        let mut owner = vec![None; (y1 - y0) * w];
        for st in &tris {
            let v = st.v;
            let ymin = v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let ymax = v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let xmin = v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let xmax = v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            // Pixel centres c + 0.5 within [min, max].
            let row_lo = ((ymin - 0.5).ceil().max(y0 as f64)) as usize;
            let row_hi = (ymax - 0.5).floor().min(y1 as f64 - 1.0);
            let col_lo = (xmin - 0.5).ceil().max(0.0) as usize;
            let col_hi = (xmax - 0.5).floor().min(w as f64 - 1.0);
            if row_hi < row_lo as f64 || col_hi < col_lo as f64 {
                continue;
            }
            let area = edge_fn(v[0], v[1], v[2][0], v[2][1]);
            let incl = [
                edge_inclusive(v[1], v[2]),
                edge_inclusive(v[2], v[0]),
                edge_inclusive(v[0], v[1]),
            ];
            for y in row_lo..=row_hi as usize {
                let py = y as f64 + 0.5;
                for x in col_lo..=col_hi as usize {
                    let px = x as f64 + 0.5;
                    let ws = [
                        edge_fn(v[1], v[2], px, py),
                        edge_fn(v[2], v[0], px, py),
                        edge_fn(v[0], v[1], px, py),
                    ];
                    let inside = ws
                        .iter()
                        .zip(incl)
                        .all(|(&e, inc)| e > 0.0 || (e == 0.0 && inc));
                    if !inside {
                        continue;
                    }
                    let z = (ws[0] * v[0][2] + ws[1] * v[1][2] + ws[2] * v[2][2]) / area;
                    let idx = (y - y0) * w + x;
                    if z < depth[idx] {
                        depth[idx] = z;
                        owner[idx] = Some((st.mesh, st.tri));
                    }
                }
            }
        }
        (depth, owner)
    });
    let mut frags = Fragments {
        width: w,
        height: h,
        depth: Vec::with_capacity(w * h),
        owner: Vec::with_capacity(w * h),
    };
    for (d, o) in parts {
        frags.depth.extend(d);
        frags.owner.extend(o);
    }
    frags
}

/// Gray level for a fragment at `depth` under `camera`: nearer is brighter,
/// and every covered pixel stays distinguishable from the black background.
pub fn depth_gray(camera: &Camera, depth: f64) -> u8 {
    let dist = (camera.target - camera.eye).norm();
    let span = 3f64.sqrt();
    let t = ((depth - (dist - span)) / (2.0 * span)).clamp(0.0, 1.0);
    (32.0 + 223.0 * (1.0 - t)).round() as u8
}

/// Pinhole projection of a mesh with a depth buffer.
pub fn project_mesh(mesh: &Mesh, camera: &Camera, shading: Shading) -> RasterImage {
    let frags = rasterize(&[mesh], camera, Execution::default());
    let mut img = RasterImage::new(camera.width, camera.height);
    for (i, (own, &z)) in frags.owner.iter().zip(&frags.depth).enumerate() {
        if own.is_some() {
            img.pixels[i] = match shading {
                Shading::Silhouette => [255; 3],
                Shading::Depth => [depth_gray(camera, z); 3],
            };
        }
    }
    img
}

/// Silhouette coverage of a mesh.
pub fn render_mask(mesh: &Mesh, camera: &Camera) -> BinaryMask {
    let frags = rasterize(&[mesh], camera, Execution::default());
    BinaryMask {
        width: camera.width,
        height: camera.height,
        bits: frags.owner.iter().map(Option::is_some).collect(),
    }
}

/// `1 - |visible ∩ full| / |full|`, or 0 for an empty `full` mask.
pub fn occlusion_ratio(full: &BinaryMask, visible: &BinaryMask) -> Result<f64> {
    if (full.width, full.height) != (visible.width, visible.height) {
        return Err(Error::Shape(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            full.width, full.height, visible.width, visible.height
        )));
    }
    let total = full.count();
    if total == 0 {
        return Ok(0.0);
    }
    let kept = full
        .bits
        .iter()
        .zip(&visible.bits)
        .filter(|(&f, &v)| f && v)
        .count();
    Ok(1.0 - kept as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{analytic_sdf, sample_grid, AnalyticShape, Pose, ShapeKind};
    use proptest::prelude::*;

    fn sphere_mesh(r: f64, res: usize) -> Mesh {
        let s = AnalyticShape::sphere(r, Point3::ORIGIN).unwrap();
        marching_cubes(&sample_grid(|p| analytic_sdf(&s, p), res).unwrap(), 0.0).unwrap()
    }

    #[test]
    fn constant_sign_grids_give_empty_meshes() {
        let pos = sample_grid(|_| 1.0, 5).unwrap();
        assert!(marching_cubes(&pos, 0.0).unwrap().is_empty());
        let neg = sample_grid(|_| -1.0, 5).unwrap();
        assert!(marching_cubes(&neg, 0.0).unwrap().is_empty());
    }

    #[test]
    fn non_finite_grid_rejected() {
        let mut g = sample_grid(|_| 1.0, 3).unwrap();
        g.values[4] = f64::NAN;
        assert!(matches!(marching_cubes(&g, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sphere_mesh_is_watertight_and_close_to_radius() {
        let mesh = sphere_mesh(0.5, 33);
        mesh.validate().unwrap();
        assert!(mesh.is_watertight());
        let bound = 2.0 * 3f64.sqrt() / 32.0;
        for v in &mesh.vertices {
            assert!((v.norm() - 0.5).abs() <= bound);
        }
    }

    #[test]
    fn rotated_box_and_cylinder_are_watertight() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let shapes = [
            ShapeKind::Box {
                half_extents: [0.4, 0.25, 0.3],
            },
            ShapeKind::Cylinder {
                radius: 0.3,
                half_height: 0.5,
            },
        ];
        for kind in shapes {
            let s = AnalyticShape::new(kind, Pose::random_rotation(&mut rng, Point3::ORIGIN)).unwrap();
            let grid = sample_grid(|p| analytic_sdf(&s, p), 33).unwrap();
            let mesh = marching_cubes(&grid, 0.0).unwrap();
            mesh.validate().unwrap();
            assert!(mesh.is_watertight(), "{kind:?}");
            let diag = 3f64.sqrt() * 2.0 / 32.0;
            for v in &mesh.vertices {
                assert!(analytic_sdf(&s, *v).abs() <= diag);
            }
        }
    }

    #[test]
    fn empty_and_hidden_meshes_render_black() {
        let cam = Camera::default();
        let img = project_mesh(&Mesh::default(), &cam, Shading::Silhouette);
        assert!(img.pixels.iter().all(|p| *p == [0; 3]));
        assert_eq!(render_mask(&Mesh::default(), &cam).count(), 0);

        let behind = sphere_mesh(0.5, 17).translated(Point3::new(0.0, 0.0, 5.0));
        let img = project_mesh(&behind, &cam, Shading::Depth);
        assert!(img.pixels.iter().all(|p| *p == [0; 3]));
    }

    #[test]
    fn single_facing_triangle_covers_centre() {
        let tri = Mesh {
            vertices: vec![
                Point3::new(-0.5, -0.5, 0.0),
                Point3::new(0.5, -0.5, 0.0),
                Point3::new(0.0, 0.6, 0.0),
            ],
            triangles: vec![[0, 1, 2]],
        };
        let cam = Camera::default();
        let mask = render_mask(&tri, &cam);
        assert!(mask.get(32, 32));
        // Half-space oracle: a pixel is covered iff its back-projected ray hits
        // the triangle's plane inside all three edges.
        let inside = |p: Point3| {
            let v = &tri.vertices;
            let s = |a: Point3, b: Point3| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
            let (s0, s1, s2) = (s(v[0], v[1]), s(v[1], v[2]), s(v[2], v[0]));
            (s0 > 0.0 && s1 > 0.0 && s2 > 0.0) || (s0 < 0.0 && s1 < 0.0 && s2 < 0.0)
        };
        for y in 0..64 {
            for x in 0..64 {
                let p = cam.unproject(x as f64 + 0.5, y as f64 + 0.5, 2.5);
                let clearly_in = inside(p);
                if clearly_in {
                    assert!(mask.get(x, y), "({x},{y}) should be covered");
                }
            }
        }
    }

    #[test]
    fn nearer_triangle_wins_contested_pixels() {
        let quad = |z: f64| Mesh {
            vertices: vec![
                Point3::new(-0.5, -0.5, z),
                Point3::new(0.5, -0.5, z),
                Point3::new(0.5, 0.5, z),
                Point3::new(-0.5, 0.5, z),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        let far = quad(-0.5);
        let near = quad(0.5).translated(Point3::new(0.3, 0.0, 0.0));
        let cam = Camera::default();
        for order in [[&far, &near], [&near, &far]] {
            let frags = rasterize(&order, &cam, Execution::Sequential);
            let near_idx = if std::ptr::eq(order[0], &near) { 0 } else { 1 };
            let near_mask = render_mask(&near, &cam);
            for (i, own) in frags.owner.iter().enumerate() {
                if near_mask.bits[i] {
                    assert_eq!(own.map(|o| o.0), Some(near_idx));
                }
            }
        }
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // Two triangles of a quad: every covered pixel owned by exactly one.
        let quad = Mesh {
            vertices: vec![
                Point3::new(-0.6, -0.4, 0.0),
                Point3::new(0.6, -0.4, 0.0),
                Point3::new(0.6, 0.4, 0.0),
                Point3::new(-0.6, 0.4, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        let cam = Camera::default();
        let sep: Vec<usize> = (0..2)
            .map(|t| {
                let m = Mesh {
                    vertices: quad.vertices.clone(),
                    triangles: vec![quad.triangles[t]],
                };
                render_mask(&m, &cam).count()
            })
            .collect();
        assert_eq!(sep[0] + sep[1], render_mask(&quad, &cam).count());
    }

    #[test]
    fn mask_matches_thresholded_silhouette() {
        let mesh = sphere_mesh(0.5, 33);
        let cam = Camera::default();
        let img = project_mesh(&mesh, &cam, Shading::Silhouette);
        assert_eq!(render_mask(&mesh, &cam), BinaryMask::from_image(&img));
        let depth = project_mesh(&mesh, &cam, Shading::Depth);
        assert_eq!(render_mask(&mesh, &cam), BinaryMask::from_image(&depth));
        // Depth shading: the sphere centre is nearer than its rim.
        let centre = depth.get(32, 32)[0];
        let rim = (0..64).map(|x| depth.get(x, 32)[0]).filter(|&g| g > 0).min().unwrap();
        assert!(centre > rim);
    }

    #[test]
    fn sequential_and_parallel_rasterization_agree() {
        let mesh = sphere_mesh(0.4, 21);
        let cam = Camera::with_size(96, 80);
        let a = rasterize(&[&mesh], &cam, Execution::Sequential);
        let b = rasterize(&[&mesh], &cam, Execution::Parallel);
        assert_eq!(a.owner, b.owner);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn occlusion_ratio_examples() {
        let mut full = BinaryMask::new(10, 10);
        full.bits.iter_mut().for_each(|b| *b = true);
        assert_eq!(occlusion_ratio(&full, &full).unwrap(), 0.0);
        assert_eq!(occlusion_ratio(&full, &BinaryMask::new(10, 10)).unwrap(), 1.0);
        let mut vis = BinaryMask::new(10, 10);
        vis.bits[..75].iter_mut().for_each(|b| *b = true);
        assert_eq!(occlusion_ratio(&full, &vis).unwrap(), 0.25);
        assert_eq!(occlusion_ratio(&BinaryMask::new(10, 10), &vis).unwrap(), 0.0);
        assert!(occlusion_ratio(&full, &BinaryMask::new(5, 5)).is_err());
    }

    #[test]
    fn netpbm_roundtrip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RasterImage::new(3, 2);
        img.set(1, 0, [10, 20, 30]);
        img.set(2, 1, [255, 0, 7]);
        let p = dir.path().join("a.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(RasterImage::read_ppm(&p).unwrap(), img);

        let mut bytes = b"P6\n# made by hand\n3 2\n255\n".to_vec();
        bytes.extend(img.pixels.iter().flatten());
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(RasterImage::read_ppm(&p).unwrap(), img);

        let mask = BinaryMask::from_image(&img);
        let q = dir.path().join("m.pgm");
        mask.write_pgm(&q).unwrap();
        assert_eq!(BinaryMask::read_pgm(&q).unwrap(), mask);
        assert!(RasterImage::read_ppm(&q).is_err());
    }

    proptest! {
        #[test]
        fn occlusion_ratio_bounded_and_monotone(
            full in proptest::collection::vec(any::<bool>(), 64),
            vis in proptest::collection::vec(any::<bool>(), 64),
            extra in 0usize..64,
        ) {
            let f = BinaryMask { width: 8, height: 8, bits: full };
            let v = BinaryMask { width: 8, height: 8, bits: vis };
            let r = occlusion_ratio(&f, &v).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            let mut more = v.clone();
            more.bits[extra] = true;
            prop_assert!(occlusion_ratio(&f, &more).unwrap() <= r);
        }
    }
}
