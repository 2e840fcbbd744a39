//! Software splatting of time-sliced primitives into per-pixel feature maps.
//!
//! Compositing keeps every retained `(primitive, weight)` pair so the feature
//! adjoint is exact: a rendered pixel is `Σ wᵢ fᵢ`, hence `∂pixel/∂fᵢ = wᵢ`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianPrimitive, Scene, Vec3};

/// Added to the projected covariance diagonal (px²).
pub const COV2D_DILATION: f64 = 0.3;
/// Projected primitives below this effective opacity are culled, and pixel
/// alphas below it contribute nothing.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MAX_ALPHA: f64 = 0.99;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
pub const RECORD_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_TAU_FG: f64 = 0.5;
const NEAR_PLANE: f64 = 1e-3;

/// Pinhole camera; `rotation`/`translation` map world points into the camera
/// frame (x right, y down, z forward). Pixel `(x, y)` has its center at
/// `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.x, t.y, t.z],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!(
                "image size {}x{} is empty",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p + Vec3::from(self.translation)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project_point(&self, pc: &Vec3) -> Vector2<f64> {
        Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Jacobian of `project_point` at a camera-frame point.
    pub fn projection_jacobian(&self, pc: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A primitive projected into one camera at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub index: usize,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` outside which alpha < `MIN_ALPHA`.
    pub bbox: [usize; 4],
    /// Exponent below which alpha falls under `MIN_ALPHA`.
    power_cutoff: f64,
}

impl Splat {
    /// Unclamped Gaussian falloff times opacity at a pixel center.
    pub fn raw_alpha(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (px - self.mean.x, py - self.mean.y);
        let c = &self.conic;
        let power = -0.5 * (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy);
        self.opacity * power.exp()
    }

    /// Alpha at a pixel center, or `None` when it is below `MIN_ALPHA`.
    #[inline]
    fn alpha_at(&self, px: f64, py: f64) -> Option<f64> {
        let (dx, dy) = (px - self.mean.x, py - self.mean.y);
        let c = &self.conic;
        let power = -0.5 * (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy);
        if power < self.power_cutoff {
            return None;
        }
        let alpha = (self.opacity * power.exp()).min(MAX_ALPHA);
        (alpha >= MIN_ALPHA).then_some(alpha)
    }
}

/// EWA projection of `g` at time `t`. `None` when the primitive is behind the
/// camera, too transparent, or its footprint misses the image.
pub fn project(g: &GaussianPrimitive, cam: &Camera, t: f64) -> Option<Splat> {
    project_indexed(0, g, cam, t)
}

fn project_indexed(index: usize, g: &GaussianPrimitive, cam: &Camera, t: f64) -> Option<Splat> {
    let opacity = g.effective_opacity(t);
    if opacity < MIN_ALPHA {
        return None;
    }
    let pc = cam.world_to_camera(&g.position_at(t));
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let mean = cam.project_point(&pc);
    let j = cam.projection_jacobian(&pc);
    let w = cam.rotation_matrix();
    let m = j * w;
    let mut cov = m * g.spatial_covariance() * m.transpose();
    cov[(0, 1)] = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(1, 0)] = cov[(0, 1)];
    cov[(0, 0)] += COV2D_DILATION;
    cov[(1, 1)] += COV2D_DILATION;
    let conic = cov.try_inverse()?;

    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    // alpha = opacity · exp(-r²/(2λmax)) reaches MIN_ALPHA at this radius
    let radius = (2.0 * lambda_max * (opacity / MIN_ALPHA).ln()).max(0.0).sqrt();

    let lo_x = (mean.x - radius - 0.5).ceil();
    let hi_x = (mean.x + radius - 0.5).floor();
    let lo_y = (mean.y - radius - 0.5).ceil();
    let hi_y = (mean.y + radius - 0.5).floor();
    let (wmax, hmax) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > wmax || lo_y > hmax || lo_x > hi_x || lo_y > hi_y {
        return None;
    }
    let bbox = [
        lo_x.max(0.0) as usize,
        hi_x.min(wmax) as usize,
        lo_y.max(0.0) as usize,
        hi_y.min(hmax) as usize,
    ];
    Some(Splat {
        index,
        mean,
        cov,
        conic,
        depth: pc.z,
        opacity,
        bbox,
        power_cutoff: (MIN_ALPHA / opacity).ln() - 1e-9,
    })
}

/// Projects every primitive and sorts front to back (ties by index).
pub fn project_scene(scene: &Scene, cam: &Camera, t: f64) -> Vec<Splat> {
    let mut splats: Vec<Splat> = scene
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_indexed(i, g, cam, t))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

/// Row-major `height × width × dim` array.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    pub fn from_data(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::Shape(format!(
                "{} values do not fill {width}x{height}x{dim}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Per-image instance labels; 0 is unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels do not fill {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixel indices of each nonzero label, ascending by label.
    pub fn pixels_by_label(&self) -> Vec<(u32, Vec<usize>)> {
        let mut by: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (p, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                by.entry(l).or_default().push(p);
            }
        }
        by.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRecord {
    pub index: u32,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub features: FeatureMap,
    pub alpha: Vec<f64>,
    offsets: Vec<usize>,
    records: Vec<WeightRecord>,
    primitive_count: usize,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.features.width
    }

    pub fn height(&self) -> usize {
        self.features.height
    }

    pub fn primitive_count(&self) -> usize {
        self.primitive_count
    }

    /// Retained `(primitive, weight)` pairs at pixel `p`, front to back.
    pub fn records(&self, p: usize) -> &[WeightRecord] {
        &self.records[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn total_records(&self) -> usize {
        self.records.len()
    }
}

const TILE: usize = 8;

struct TileOut {
    features: Vec<f64>,
    alpha: Vec<f64>,
    /// Record range of each tile pixel, row-major within the tile.
    spans: Vec<(usize, usize)>,
    records: Vec<WeightRecord>,
}

fn check_inputs(scene: &Scene, cam: &Camera) -> Result<()> {
    cam.validate()?;
    if let Some(g) = scene.primitives.iter().find(|g| g.feature.len() != scene.feature_dim) {
        return Err(Error::FeatureDim {
            expected: scene.feature_dim,
            actual: g.feature.len(),
        });
    }
    Ok(())
}

/// Renders the feature field at time `t`.
pub fn render(scene: &Scene, cam: &Camera, t: f64) -> Result<RenderOutput> {
    check_inputs(scene, cam)?;
    let d = scene.feature_dim;
    let (w, h) = (cam.width, cam.height);
    let splats = project_scene(scene, cam, t);

    let mut sorted_features = Vec::with_capacity(splats.len() * d);
    for s in &splats {
        sorted_features.extend_from_slice(&scene.primitives[s.index].feature);
    }
    let (tw, th) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tw * th];
    for (k, s) in splats.iter().enumerate() {
        for ty in s.bbox[2] / TILE..=s.bbox[3] / TILE {
            for tx in s.bbox[0] / TILE..=s.bbox[1] / TILE {
                tiles[ty * tw + tx].push(k as u32);
            }
        }
    }

    let outs: Vec<TileOut> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (x0, y0) = ((ti % tw) * TILE, (ti / tw) * TILE);
            let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
            let n = (x1 - x0) * (y1 - y0);
            let tile_w = x1 - x0;
            let mut features = vec![0.0; n * d];
            let mut transmittance = vec![1.0f64; n];
            let mut live = n;
            let mut raw: Vec<(u16, WeightRecord)> = Vec::new();
            for &k in list {
                if live == 0 {
                    break;
                }
                let s = &splats[k as usize];
                let f = &sorted_features[k as usize * d..(k as usize + 1) * d];
                for y in s.bbox[2].max(y0)..=s.bbox[3].min(y1 - 1) {
                    let py = y as f64 + 0.5;
                    for x in s.bbox[0].max(x0)..=s.bbox[1].min(x1 - 1) {
                        let local = (y - y0) * tile_w + (x - x0);
                        let t = transmittance[local];
                        if t < TRANSMITTANCE_STOP {
                            continue;
                        }
                        let Some(alpha) = s.alpha_at(x as f64 + 0.5, py) else {
                            continue;
                        };
                        let weight = alpha * t;
                        if weight > RECORD_THRESHOLD {
                            raw.push((
                                local as u16,
                                WeightRecord {
                                    index: s.index as u32,
                                    weight,
                                },
                            ));
                            for (o, v) in features[local * d..(local + 1) * d].iter_mut().zip(f) {
                                *o += weight * v;
                            }
                        }
                        let next = t * (1.0 - alpha);
                        transmittance[local] = next;
                        if next < TRANSMITTANCE_STOP {
                            live -= 1;
                        }
                    }
                }
            }
            // stable counting sort by pixel keeps front-to-back order per pixel
            let mut starts = vec![0usize; n + 1];
            for (l, _) in &raw {
                starts[*l as usize + 1] += 1;
            }
            for i in 0..n {
                starts[i + 1] += starts[i];
            }
            let spans: Vec<(usize, usize)> = (0..n).map(|i| (starts[i], starts[i + 1])).collect();
            let mut records = vec![WeightRecord { index: 0, weight: 0.0 }; raw.len()];
            for (l, r) in raw {
                records[starts[l as usize]] = r;
                starts[l as usize] += 1;
            }
            TileOut {
                features,
                alpha: transmittance.iter().map(|t| 1.0 - t).collect(),
                spans,
                records,
            }
        })
        .collect();

    let mut features = vec![0.0; w * h * d];
    let mut alpha = vec![0.0; w * h];
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut records = Vec::with_capacity(outs.iter().map(|o| o.records.len()).sum());
    offsets.push(0);
    for y in 0..h {
        for x in 0..w {
            let o = &outs[(y / TILE) * tw + x / TILE];
            let (x0, y0) = ((x / TILE) * TILE, (y / TILE) * TILE);
            let local = (y - y0) * ((x0 + TILE).min(w) - x0) + (x - x0);
            let p = y * w + x;
            features[p * d..(p + 1) * d].copy_from_slice(&o.features[local * d..(local + 1) * d]);
            alpha[p] = o.alpha[local];
            let (a, b) = o.spans[local];
            records.extend_from_slice(&o.records[a..b]);
            offsets.push(records.len());
        }
    }
    Ok(RenderOutput {
        features: FeatureMap {
            width: w,
            height: h,
            dim: d,
            data: features,
        },
        alpha,
        offsets,
        records,
        primitive_count: scene.len(),
    })
}

/// Pulls pixel-space gradients back onto primitive features.
///
/// Returns a flat `n × dim` buffer in primitive order.
pub fn backprop_features(out: &RenderOutput, grad_pixels: &FeatureMap) -> Result<Vec<f64>> {
    let f = &out.features;
    if grad_pixels.width != f.width || grad_pixels.height != f.height || grad_pixels.dim != f.dim {
        return Err(Error::Shape(format!(
            "gradient map {}x{}x{} does not match render {}x{}x{}",
            grad_pixels.width, grad_pixels.height, grad_pixels.dim, f.width, f.height, f.dim
        )));
    }
    let pixels = (0..f.pixel_count()).filter_map(|p| {
        let g = grad_pixels.pixel(p);
        g.iter().any(|v| *v != 0.0).then_some((p, g))
    });
    backprop_pixels(out, pixels)
}

/// Sparse form of [`backprop_features`]: gradients for the listed pixels only.
/// Pixels may repeat; their contributions add.
pub fn backprop_pixels<'a>(
    out: &RenderOutput,
    pixel_grads: impl IntoIterator<Item = (usize, &'a [f64])>,
) -> Result<Vec<f64>> {
    let d = out.features.dim;
    let mut grads = vec![0.0; out.primitive_count * d];
    for (p, g) in pixel_grads {
        if p >= out.features.pixel_count() || g.len() != d {
            return Err(Error::Shape(format!(
                "pixel gradient ({p}, len {}) outside a {}x{}x{d} render",
                g.len(),
                out.width(),
                out.height()
            )));
        }
        for r in out.records(p) {
            let dst = &mut grads[r.index as usize * d..(r.index as usize + 1) * d];
            for (o, gv) in dst.iter_mut().zip(g) {
                *o += r.weight * gv;
            }
        }
    }
    Ok(grads)
}

/// Per-pixel argmax of summed compositing weight per label; pixels whose
/// accumulated alpha is below `tau_fg` get label 0. Ties go to the smaller label.
pub fn render_labels(
    scene: &Scene,
    labels: &[u32],
    cam: &Camera,
    t: f64,
    tau_fg: f64,
) -> Result<SegmentationMap> {
    if labels.len() != scene.len() {
        return Err(Error::MissingLabel(labels.len().min(scene.len())));
    }
    let geometry = Scene {
        primitives: scene
            .primitives
            .iter()
            .map(|g| GaussianPrimitive {
                feature: Vec::new(),
                ..g.clone()
            })
            .collect(),
        feature_dim: 0,
        time_range: scene.time_range,
    };
    let out = render(&geometry, cam, t)?;
    Ok(labels_from_render(&out, labels, tau_fg))
}

/// Labels from an existing render; `labels` is indexed by primitive.
pub fn labels_from_render(out: &RenderOutput, labels: &[u32], tau_fg: f64) -> SegmentationMap {
    let n = out.width() * out.height();
    let mut result = vec![0u32; n];
    let mut acc: Vec<(u32, f64)> = Vec::new();
    for (p, slot) in result.iter_mut().enumerate() {
        if out.alpha[p] < tau_fg {
            continue;
        }
        acc.clear();
        for r in out.records(p) {
            let l = labels[r.index as usize];
            match acc.iter_mut().find(|(k, _)| *k == l) {
                Some((_, w)) => *w += r.weight,
                None => acc.push((l, r.weight)),
            }
        }
        acc.sort_by_key(|(l, _)| *l);
        let mut best: Option<(u32, f64)> = None;
        for &(l, w) in &acc {
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((l, w));
            }
        }
        *slot = best.map_or(0, |(l, _)| l);
    }
    SegmentationMap {
        width: out.width(),
        height: out.height(),
        labels: result,
    }
}

/// Ground-truth mask from `gt_instance` tags.
pub fn render_gt_labels(scene: &Scene, cam: &Camera, t: f64, tau_fg: f64) -> Result<SegmentationMap> {
    let labels = scene.gt_labels()?;
    render_labels(scene, &labels, cam, t, tau_fg)
}
