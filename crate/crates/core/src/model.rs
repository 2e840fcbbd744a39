//! Spatiotemporal Gaussian primitives with linear motion and learnable features.

use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const SCENE_FORMAT: &str = "dynseg-scene";
const SCENE_VERSION: u32 = 1;

/// One splat that is free in space and time.
///
/// Geometry is fixed once a scene is built; only `feature` is optimized.
/// `rotation` is a unit quaternion stored as `[w, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mu_x: Vec3,
    pub mu_t: f64,
    pub scale_x: Vec3,
    pub scale_t: f64,
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub velocity: Vec3,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sh: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_instance: Option<u32>,
}

impl GaussianPrimitive {
    /// Static, axis-aligned, fully opaque primitive with a zero feature of length `dim`.
    pub fn new(mu_x: Vec3, scale: f64, dim: usize) -> Self {
        Self {
            mu_x,
            mu_t: 0.5,
            scale_x: Vec3::repeat(scale),
            scale_t: 1.0,
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 1.0,
            velocity: Vec3::zeros(),
            feature: vec![0.0; dim],
            sh: None,
            gt_instance: None,
        }
    }

    /// Position at time `t` under linear motion from the reference time.
    pub fn position_at(&self, t: f64) -> Vec3 {
        self.mu_x + self.velocity * (t - self.mu_t)
    }

    /// Gaussian temporal window; the opacity used for rendering is
    /// `opacity * temporal_opacity(t)`.
    pub fn temporal_opacity(&self, t: f64) -> f64 {
        let z = (t - self.mu_t) / self.scale_t;
        (-0.5 * z * z).exp()
    }

    pub fn effective_opacity(&self, t: f64) -> f64 {
        self.opacity * self.temporal_opacity(t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner()
    }

    /// `R diag(scale_x²) Rᵀ`.
    pub fn spatial_covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale_x.component_mul(&self.scale_x));
        let cov = r * s2 * r.transpose();
        // symmetrize away rounding so downstream inverses see an exact Σ = Σᵀ
        (cov + cov.transpose()) * 0.5
    }

    pub fn validate(&self, index: usize, feature_dim: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidPrimitive { index, reason };
        if self.scale_x.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(bad(format!("spatial scale {:?} not positive", self.scale_x)));
        }
        if !(self.scale_t > 0.0 && self.scale_t.is_finite()) {
            return Err(bad(format!("temporal scale {} not positive", self.scale_t)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(bad(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        let norm = self.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(bad(format!("rotation norm {norm} is not 1")));
        }
        if self.feature.len() != feature_dim {
            return Err(Error::FeatureDim {
                expected: feature_dim,
                actual: self.feature.len(),
            });
        }
        let finite = self.mu_x.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.mu_t.is_finite()
            && self.feature.iter().all(|v| v.is_finite());
        if !finite {
            return Err(bad("non-finite field".into()));
        }
        Ok(())
    }
}

/// Ordered primitives sharing one feature dimension and one clip time range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    pub feature_dim: usize,
    pub time_range: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format: String,
    version: u32,
    feature_dim: usize,
    time_range: [f64; 2],
    primitives: Vec<GaussianPrimitive>,
}

impl Scene {
    pub fn new(
        primitives: Vec<GaussianPrimitive>,
        feature_dim: usize,
        time_range: [f64; 2],
    ) -> Result<Self> {
        let scene = Self {
            primitives,
            feature_dim,
            time_range,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            primitives: Vec::new(),
            feature_dim,
            time_range: [0.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [t0, t1] = self.time_range;
        if !(t0 <= t1) {
            return Err(Error::InvalidConfig(format!(
                "time range [{t0}, {t1}] is empty"
            )));
        }
        for (i, g) in self.primitives.iter().enumerate() {
            g.validate(i, self.feature_dim)?;
            if g.mu_t < t0 || g.mu_t > t1 {
                return Err(Error::InvalidPrimitive {
                    index: i,
                    reason: format!("mu_t {} outside time range", g.mu_t),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Median over primitives of the mean spatial scale.
    pub fn median_spatial_scale(&self) -> f64 {
        if self.primitives.is_empty() {
            return 0.0;
        }
        let mut s: Vec<f64> = self.primitives.iter().map(|g| g.scale_x.mean()).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }

    /// All features concatenated in primitive order (`n * feature_dim`).
    pub fn features_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.feature_dim);
        for g in &self.primitives {
            out.extend_from_slice(&g.feature);
        }
        out
    }

    pub fn set_features_flat(&mut self, flat: &[f64]) -> Result<()> {
        let d = self.feature_dim;
        if flat.len() != self.len() * d {
            return Err(Error::Shape(format!(
                "feature buffer has {} values, scene needs {}",
                flat.len(),
                self.len() * d
            )));
        }
        for (g, chunk) in self.primitives.iter_mut().zip(flat.chunks_exact(d)) {
            g.feature.copy_from_slice(chunk);
        }
        Ok(())
    }

    /// Ground-truth tags, failing on the first untagged primitive.
    pub fn gt_labels(&self) -> Result<Vec<u32>> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, g)| g.gt_instance.ok_or(Error::MissingLabel(i)))
            .collect()
    }

    /// Zero all velocities and widen every temporal window so each primitive
    /// stays visible over the whole clip.
    pub fn without_motion(&self) -> Scene {
        let span = (self.time_range[1] - self.time_range[0]).max(1e-9);
        let mut out = self.clone();
        for g in &mut out.primitives {
            g.velocity = Vec3::zeros();
            g.scale_t = g.scale_t.max(100.0 * span);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SceneFile {
            format: SCENE_FORMAT.to_string(),
            version: SCENE_VERSION,
            feature_dim: self.feature_dim,
            time_range: self.time_range,
            primitives: self.primitives.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text)?;
        if file.format != SCENE_FORMAT || file.version != SCENE_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported scene format {} v{}",
                file.format, file.version
            )));
        }
        Scene::new(file.primitives, file.feature_dim, file.time_range)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Scene::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }
}
