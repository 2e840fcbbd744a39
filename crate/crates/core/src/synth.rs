//! Synthetic dynamic scenes with ground truth, camera rigs, per-image masks
//! whose labels carry no identity across images, and surrogate semantic maps.
//!
//! Moving instances are chains of short-lived primitive groups: segment `k`
//! is centered at `c_k = k / (K - 1)` with temporal scale `Δ = 1 / (K - 1)`,
//! sits on the chord of the trajectory over `[c_k - Δ/2, c_k + Δ/2]` and moves
//! along it with the chord's slope.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mapio;
use crate::model::{GaussianPrimitive, Scene, Vec3};
use crate::raster::{render_gt_labels, Camera, FeatureMap, SegmentationMap, DEFAULT_TAU_FG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionProfile {
    Static {
        center: [f64; 3],
    },
    Linear {
        start: [f64; 3],
        end: [f64; 3],
    },
    /// Waypoints visited at equally spaced times over the clip.
    PiecewiseLinear {
        waypoints: Vec<[f64; 3]>,
    },
    Circular {
        center: [f64; 3],
        radius: f64,
        turns: f64,
        phase: f64,
    },
}

impl MotionProfile {
    pub fn position(&self, t: f64) -> Vec3 {
        match self {
            MotionProfile::Static { center } => Vec3::from(*center),
            MotionProfile::Linear { start, end } => {
                let (a, b) = (Vec3::from(*start), Vec3::from(*end));
                a + (b - a) * t
            }
            MotionProfile::PiecewiseLinear { waypoints } => {
                let n = waypoints.len();
                if n == 1 {
                    return Vec3::from(waypoints[0]);
                }
                let s = t.clamp(0.0, 1.0) * (n - 1) as f64;
                let k = (s.floor() as usize).min(n - 2);
                let (a, b) = (Vec3::from(waypoints[k]), Vec3::from(waypoints[k + 1]));
                a + (b - a) * (s - k as f64)
            }
            MotionProfile::Circular {
                center,
                radius,
                turns,
                phase,
            } => {
                let th = phase + 2.0 * PI * turns * t;
                Vec3::from(*center) + Vec3::new(radius * th.cos(), radius * th.sin(), 0.0)
            }
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, MotionProfile::Static { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTemplate {
    pub motion: MotionProfile,
    /// Half extents of the box the primitives are scattered in.
    pub extent: [f64; 3],
    pub primitives_per_segment: usize,
    pub primitive_scale: f64,
    /// Chain length for moving instances; static instances use one segment.
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub instances: Vec<InstanceTemplate>,
    /// Static slab the movers stand on; tagged as an instance of its own.
    pub background: Option<InstanceTemplate>,
    pub frames: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in units of the image width.
    pub focal_factor: f64,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub look_at: [f64; 3],
    pub feature_dim: usize,
    pub semantic_dim: usize,
    pub semantic_classes: usize,
    pub semantic_noise: f64,
    pub opacity: f64,
    pub permute: bool,
    pub seed: u64,
}

fn person(motion: MotionProfile) -> InstanceTemplate {
    InstanceTemplate {
        motion,
        extent: [0.16, 0.16, 0.4],
        primitives_per_segment: 220,
        primitive_scale: 0.042,
        segments: 10,
    }
}

impl SceneSpec {
    /// Desk-scale scene: a linear walker, a circling walker, a fast ball on a
    /// piecewise-linear path through both, and a ground slab.
    pub fn desk() -> Self {
        let ball = InstanceTemplate {
            motion: MotionProfile::PiecewiseLinear {
                waypoints: vec![
                    [-1.1, 0.9, 0.3],
                    [0.9, -0.7, 0.3],
                    [-0.7, -0.5, 0.3],
                    [1.0, 0.9, 0.3],
                    [-0.9, 0.2, 0.3],
                ],
            },
            extent: [0.11, 0.11, 0.11],
            primitives_per_segment: 200,
            primitive_scale: 0.025,
            segments: 13,
        };
        Self {
            instances: vec![
                person(MotionProfile::Linear {
                    start: [-1.2, -0.6, 0.45],
                    end: [1.2, -0.2, 0.45],
                }),
                person(MotionProfile::Circular {
                    center: [0.2, 0.4, 0.45],
                    radius: 0.65,
                    turns: 1.0,
                    phase: 0.0,
                }),
                ball,
            ],
            background: Some(InstanceTemplate {
                motion: MotionProfile::Static {
                    center: [0.0, 0.0, -0.04],
                },
                extent: [1.8, 1.8, 0.04],
                primitives_per_segment: 2400,
                primitive_scale: 0.078,
                segments: 1,
            }),
            frames: 30,
            views: 4,
            width: 96,
            height: 96,
            focal_factor: 1.2,
            camera_radius: 4.5,
            camera_height: 2.2,
            look_at: [0.0, 0.0, 0.3],
            feature_dim: 16,
            semantic_dim: 48,
            semantic_classes: 4,
            semantic_noise: 0.1,
            opacity: 0.9,
            permute: true,
            seed: 1,
        }
    }

    /// Scaled-down variant of [`SceneSpec::desk`] for quick checks.
    pub fn small() -> Self {
        let mut s = Self::desk();
        for inst in s.instances.iter_mut().chain(s.background.iter_mut()) {
            inst.primitives_per_segment = (inst.primitives_per_segment / 8).max(4);
            inst.primitive_scale *= 2.0;
        }
        s.frames = 10;
        s.views = 2;
        s.width = 48;
        s.height = 48;
        s
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            other => Err(Error::InvalidConfig(format!("unknown scene preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.instances.is_empty() {
            return bad("at least one instance is required".into());
        }
        if self.frames < 2 || self.views < 1 {
            return bad(format!("need T >= 2 and V >= 1, got T={} V={}", self.frames, self.views));
        }
        if self.width == 0 || self.height == 0 || !(self.focal_factor > 0.0) {
            return bad("empty image or non-positive focal length".into());
        }
        if self.feature_dim == 0 || self.semantic_dim <= self.semantic_classes {
            return bad(format!(
                "semantic dimension {} must exceed the class count {}",
                self.semantic_dim, self.semantic_classes
            ));
        }
        if self.semantic_classes == 0 || !(self.semantic_noise >= 0.0) {
            return bad("need at least one semantic class and non-negative noise".into());
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return bad(format!("opacity {} outside (0, 1]", self.opacity));
        }
        for (i, inst) in self.instances.iter().chain(self.background.iter()).enumerate() {
            if inst.primitives_per_segment == 0 || !(inst.primitive_scale > 0.0) {
                return bad(format!("instance {i} has no primitives or a bad scale"));
            }
            if !inst.motion.is_static() && inst.segments < 2 {
                return bad(format!("moving instance {i} needs at least 2 segments"));
            }
            if let MotionProfile::PiecewiseLinear { waypoints } = &inst.motion {
                if waypoints.is_empty() {
                    return bad(format!("instance {i} has no waypoints"));
                }
            }
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.frames).map(|f| f as f64 / (self.frames - 1) as f64).collect()
    }

    pub fn cameras(&self) -> Vec<Camera> {
        (0..self.views)
            .map(|v| {
                let a = 2.0 * PI * v as f64 / self.views as f64 + PI / 4.0;
                let eye = Vec3::new(
                    self.camera_radius * a.cos(),
                    self.camera_radius * a.sin(),
                    self.camera_height,
                );
                Camera::look_at(
                    eye,
                    Vec3::from(self.look_at),
                    Vec3::z(),
                    self.focal_factor * self.width as f64,
                    self.width,
                    self.height,
                )
            })
            .collect()
    }

    /// Ground-truth ids: movers are `1..=n`, the background slab follows.
    pub fn dynamic_ids(&self) -> Vec<u32> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| !i.motion.is_static())
            .map(|(k, _)| k as u32 + 1)
            .collect()
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        let n = self.instances.len() + self.background.is_some() as usize;
        (1..=n as u32).collect()
    }

    /// Index of the one-hot semantic code; 0 is reserved for unlabeled pixels.
    pub fn semantic_code(&self, instance: u32) -> usize {
        if instance == 0 {
            0
        } else {
            1 + instance as usize % self.semantic_classes
        }
    }
}

fn scatter(rng: &mut ChaCha8Rng, extent: &[f64; 3]) -> Vec3 {
    Vec3::new(
        rng.random_range(-extent[0]..=extent[0]),
        rng.random_range(-extent[1]..=extent[1]),
        rng.random_range(-extent[2]..=extent[2]),
    )
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut prims = Vec::new();
    for (k, inst) in spec.instances.iter().chain(spec.background.iter()).enumerate() {
        let id = k as u32 + 1;
        let mut push = |rng: &mut ChaCha8Rng, center: Vec3, velocity: Vec3, mu_t: f64, scale_t: f64| {
            for _ in 0..inst.primitives_per_segment {
                let mut g = GaussianPrimitive::new(center + scatter(rng, &inst.extent), inst.primitive_scale, spec.feature_dim);
                g.scale_x = g.scale_x.map(|s| s * rng.random_range(0.8..1.25));
                g.mu_t = mu_t;
                g.scale_t = scale_t;
                g.velocity = velocity;
                g.opacity = spec.opacity;
                g.gt_instance = Some(id);
                prims.push(g);
            }
        };
        if inst.motion.is_static() {
            push(&mut rng, inst.motion.position(0.5), Vec3::zeros(), 0.5, 100.0);
            continue;
        }
        let delta = 1.0 / (inst.segments - 1) as f64;
        for s in 0..inst.segments {
            let c = s as f64 * delta;
            let a = inst.motion.position(c - 0.5 * delta);
            let b = inst.motion.position(c + 0.5 * delta);
            push(&mut rng, (a + b) * 0.5, (b - a) / delta, c, delta);
        }
    }
    Scene::new(prims, spec.feature_dim, [0.0, 1.0])
}

/// Ground-truth masks for every `(view, frame)`, indexed `view * T + frame`.
pub fn generate_gt_masks(scene: &Scene, cams: &[Camera], times: &[f64]) -> Result<Vec<SegmentationMap>> {
    let keys: Vec<(usize, usize)> = (0..cams.len())
        .flat_map(|v| (0..times.len()).map(move |f| (v, f)))
        .collect();
    keys.par_iter()
        .map(|&(v, f)| render_gt_labels(scene, &cams[v], times[f], DEFAULT_TAU_FG))
        .collect()
}

/// Relabels the nonzero labels of one image with a random dense permutation.
pub fn permute_labels<R: Rng + ?Sized>(seg: &SegmentationMap, rng: &mut R) -> SegmentationMap {
    let present: Vec<u32> = seg.pixels_by_label().into_iter().map(|(l, _)| l).collect();
    let order = rand::seq::index::sample(rng, present.len(), present.len()).into_vec();
    let map: std::collections::HashMap<u32, u32> = present
        .iter()
        .zip(order)
        .map(|(&l, k)| (l, k as u32 + 1))
        .collect();
    SegmentationMap {
        width: seg.width,
        height: seg.height,
        labels: seg.labels.iter().map(|l| if *l == 0 { 0 } else { map[l] }).collect(),
    }
}

fn key_rng(seed: u64, salt: u64, v: usize, f: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(((v as u64) << 32) | f as u64);
    rng
}

/// Training masks: ground truth with an independent relabeling per image when
/// `permute` is set.
pub fn generate_masks(
    scene: &Scene,
    cams: &[Camera],
    times: &[f64],
    permute: bool,
    seed: u64,
) -> Result<Vec<SegmentationMap>> {
    let gt = generate_gt_masks(scene, cams, times)?;
    if !permute {
        return Ok(gt);
    }
    Ok(gt
        .iter()
        .enumerate()
        .map(|(k, m)| permute_labels(m, &mut key_rng(seed, 0x6d61736b, k / times.len(), k % times.len())))
        .collect())
}

/// Raw surrogate semantic map: one-hot class code per pixel plus Gaussian noise.
pub fn generate_semantic(spec: &SceneSpec, gt: &SegmentationMap, view: usize, frame: usize) -> FeatureMap {
    let d = spec.semantic_dim;
    let mut out = FeatureMap::zeros(gt.width, gt.height, d);
    let mut rng = key_rng(spec.seed, 0x73656d61, view, frame);
    for (p, &l) in gt.labels.iter().enumerate() {
        let px = out.pixel_mut(p);
        if spec.semantic_noise > 0.0 {
            for x in px.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x = spec.semantic_noise * z;
            }
        }
        px[spec.semantic_code(l)] += 1.0;
    }
    out
}

/// Frames addressed by zero-based `(view, frame)`.
pub trait FrameSource: Sync {
    fn views(&self) -> usize;
    fn frames(&self) -> usize;
    fn camera(&self, view: usize) -> &Camera;
    fn time(&self, frame: usize) -> f64;
    fn mask(&self, view: usize, frame: usize) -> &SegmentationMap;
    /// Raw semantic map, if the source has one.
    fn semantic(&self, view: usize, frame: usize) -> Option<FeatureMap>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub times: Vec<f64>,
    /// Training masks, `view * T + frame`.
    pub masks: Vec<SegmentationMap>,
    /// Globally consistent masks for evaluation.
    pub gt_masks: Vec<SegmentationMap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    spec: SceneSpec,
    checksum: String,
    semantic_written: bool,
}

const DATASET_FORMAT: &str = "dynseg-dataset";

impl Dataset {
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        let scene = generate_scene(spec)?;
        let cameras = spec.cameras();
        let times = spec.times();
        let gt_masks = generate_gt_masks(&scene, &cameras, &times)?;
        let masks = if spec.permute {
            gt_masks
                .iter()
                .enumerate()
                .map(|(k, m)| permute_labels(m, &mut key_rng(spec.seed, 0x6d61736b, k / times.len(), k % times.len())))
                .collect()
        } else {
            gt_masks.clone()
        };
        Ok(Self {
            spec: spec.clone(),
            scene,
            cameras,
            times,
            masks,
            gt_masks,
        })
    }

    fn key(&self, view: usize, frame: usize) -> usize {
        view * self.times.len() + frame
    }

    pub fn gt_mask(&self, view: usize, frame: usize) -> &SegmentationMap {
        &self.gt_masks[self.key(view, frame)]
    }

    pub fn dynamic_ids(&self) -> Vec<u32> {
        self.spec.dynamic_ids()
    }

    /// SHA-256 over the scene, cameras and all masks.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.scene.to_json()?.as_bytes());
        h.update(serde_json::to_string(&self.cameras)?.as_bytes());
        for m in self.masks.iter().chain(&self.gt_masks) {
            for l in &m.labels {
                h.update(l.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, dir: &Path, with_semantic: bool) -> Result<()> {
        for sub in ["masks", "gt"].iter().chain(with_semantic.then_some(&"semantic")) {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        self.scene.save(&dir.join("scene.json"))?;
        let cams = dir.join("cameras.json");
        std::fs::write(&cams, serde_json::to_string_pretty(&self.cameras)?).map_err(|e| Error::io(&cams, e))?;
        for v in 0..self.cameras.len() {
            for f in 0..self.times.len() {
                let name = format!("v{v:02}_f{f:03}.dsmap");
                let t = self.times[f];
                mapio::write_label_map(&dir.join("masks").join(&name), &self.masks[self.key(v, f)], t, v)?;
                mapio::write_label_map(&dir.join("gt").join(&name), self.gt_mask(v, f), t, v)?;
                if with_semantic {
                    let sem = generate_semantic(&self.spec, self.gt_mask(v, f), v, f);
                    mapio::write_feature_map(&dir.join("semantic").join(&name), &sem, mapio::Dtype::F32, t, v)?;
                }
            }
        }
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            spec: self.spec.clone(),
            checksum: self.checksum()?,
            semantic_written: with_semantic,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a saved dataset; semantic maps are regenerated from the manifest
    /// seed. Fails if the stored checksum does not match the content.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format != DATASET_FORMAT || manifest.version != 1 {
            return Err(Error::format(&path, format!("unsupported dataset {} v{}", manifest.format, manifest.version)));
        }
        let spec = manifest.spec;
        spec.validate()?;
        let scene = Scene::load(&dir.join("scene.json"))?;
        let cams_path = dir.join("cameras.json");
        let cams_text = std::fs::read_to_string(&cams_path).map_err(|e| Error::io(&cams_path, e))?;
        let cameras: Vec<Camera> =
            serde_json::from_str(&cams_text).map_err(|e| Error::format(&cams_path, e.to_string()))?;
        let times = spec.times();
        let mut masks = Vec::new();
        let mut gt_masks = Vec::new();
        for v in 0..cameras.len() {
            for f in 0..times.len() {
                let name = format!("v{v:02}_f{f:03}.dsmap");
                masks.push(mapio::read_label_map(&dir.join("masks").join(&name))?.0);
                gt_masks.push(mapio::read_label_map(&dir.join("gt").join(&name))?.0);
            }
        }
        let ds = Self {
            spec,
            scene,
            cameras,
            times,
            masks,
            gt_masks,
        };
        if ds.checksum()? != manifest.checksum {
            return Err(Error::format(&path, "checksum does not match dataset content"));
        }
        Ok(ds)
    }
}

impl FrameSource for Dataset {
    fn views(&self) -> usize {
        self.cameras.len()
    }

    fn frames(&self) -> usize {
        self.times.len()
    }

    fn camera(&self, view: usize) -> &Camera {
        &self.cameras[view]
    }

    fn time(&self, frame: usize) -> f64 {
        self.times[frame]
    }

    fn mask(&self, view: usize, frame: usize) -> &SegmentationMap {
        &self.masks[self.key(view, frame)]
    }

    fn semantic(&self, view: usize, frame: usize) -> Option<FeatureMap> {
        Some(generate_semantic(&self.spec, self.gt_mask(view, frame), view, frame))
    }
}
