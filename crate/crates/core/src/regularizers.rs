//! Temporal tracking alignment and semantic-center alignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::contrastive::{build_batch, contrastive_against, InstanceBatch, LossGrad};
use crate::error::{Error, Result};
use crate::model::Scene;
use crate::raster::{FeatureMap, SegmentationMap};
use crate::spatial::KdTree;

pub const DEFAULT_TAU_VIS: f64 = 0.05;
const TRACKING_DEAD_ZONE: f64 = 1e-8;

/// Projected per-pixel semantic features (`dim` = scene feature dimension).
pub type SemanticMap = FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub src: usize,
    pub dst: usize,
    pub src_time: f64,
    pub dst_time: f64,
    pub distance: f64,
}

/// Primitives visible at `t` (temporal opacity ≥ `tau_vis`) that are not at `t_next`.
pub fn find_disappearing(scene: &Scene, t: f64, t_next: f64, tau_vis: f64) -> Vec<usize> {
    debug_assert!(t < t_next);
    scene
        .primitives
        .iter()
        .enumerate()
        .filter(|(_, g)| g.temporal_opacity(t) >= tau_vis && g.temporal_opacity(t_next) < tau_vis)
        .map(|(i, _)| i)
        .collect()
}

/// Three times the median spatial scale.
pub fn default_r_max(scene: &Scene) -> f64 {
    3.0 * scene.median_spatial_scale()
}

/// Nearest visible successor at `t_next` of each disappearing primitive,
/// comparing positions advanced to `t_next`. Sorted by source index.
pub fn match_pairs(
    scene: &Scene,
    disappearing: &[usize],
    t: f64,
    t_next: f64,
    tau_vis: f64,
    r_max: f64,
) -> Vec<MatchPair> {
    let tree = KdTree::build(
        scene
            .primitives
            .iter()
            .enumerate()
            .filter(|(_, g)| g.temporal_opacity(t_next) >= tau_vis)
            .map(|(i, g)| (i, g.position_at(t_next))),
    );
    let mut sources = disappearing.to_vec();
    sources.sort_unstable();
    sources.dedup();
    sources
        .into_iter()
        .filter_map(|src| {
            let q = scene.primitives[src].position_at(t_next);
            let (dst, d2) = tree.nearest(&q, Some(src))?;
            let distance = d2.sqrt();
            (distance <= r_max).then_some(MatchPair {
                src,
                dst,
                src_time: t,
                dst_time: t_next,
                distance,
            })
        })
        .collect()
}

/// `Σ ‖f_src − f_dst‖` over pairs, with gradients on both endpoints.
pub fn tracking_loss(scene: &Scene, pairs: &[MatchPair]) -> (f64, Vec<f64>) {
    let d = scene.feature_dim;
    let mut grads = vec![0.0; scene.len() * d];
    let mut loss = 0.0;
    let mut residual = vec![0.0; d];
    for p in pairs {
        let (a, b) = (&scene.primitives[p.src].feature, &scene.primitives[p.dst].feature);
        for ((r, x), y) in residual.iter_mut().zip(a).zip(b) {
            *r = x - y;
        }
        let norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        if norm < TRACKING_DEAD_ZONE {
            continue;
        }
        loss += norm;
        for (k, r) in residual.iter().enumerate() {
            grads[p.src * d + k] += r / norm;
            grads[p.dst * d + k] -= r / norm;
        }
    }
    (loss, grads)
}

/// Fixed linear map from raw semantic features to the scene feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProjection {
    pub dim: usize,
    pub raw_dim: usize,
    /// `dim × raw_dim`, row-major.
    pub matrix: Vec<f64>,
}

impl SemanticProjection {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for k in 0..dim {
            matrix[k * dim + k] = 1.0;
        }
        Self {
            dim,
            raw_dim: dim,
            matrix,
        }
    }

    /// Seeded Gaussian matrix with Gram–Schmidt orthonormalized rows.
    pub fn random_orthonormal(dim: usize, raw_dim: usize, seed: u64) -> Result<Self> {
        if dim > raw_dim {
            return Err(Error::InvalidConfig(format!(
                "cannot build {dim} orthonormal rows in {raw_dim} dimensions"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while rows.len() < dim {
            let mut v: Vec<f64> = (0..raw_dim).map(|_| rng.sample(StandardNormal)).collect();
            // two passes of modified Gram–Schmidt
            for _ in 0..2 {
                for r in &rows {
                    let c: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= c * b);
                }
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-8 {
                v.iter_mut().for_each(|a| *a /= n);
                rows.push(v);
            }
        }
        Ok(Self {
            dim,
            raw_dim,
            matrix: rows.concat(),
        })
    }

    pub fn apply(&self, raw: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.matrix.chunks_exact(self.raw_dim)) {
            *o = row.iter().zip(raw).map(|(a, b)| a * b).sum();
        }
    }
}

pub fn project_semantic(raw: &FeatureMap, proj: &SemanticProjection) -> Result<SemanticMap> {
    if raw.dim != proj.raw_dim {
        return Err(Error::Shape(format!(
            "raw semantic map has {} channels, projection expects {}",
            raw.dim, proj.raw_dim
        )));
    }
    let mut out = FeatureMap::zeros(raw.width, raw.height, proj.dim);
    for p in 0..raw.pixel_count() {
        proj.apply(raw.pixel(p), out.pixel_mut(p));
    }
    Ok(out)
}

/// Mean semantic feature over each batch instance's full mask.
pub fn semantic_centers(seg: &SegmentationMap, sem: &SemanticMap, batch: &InstanceBatch) -> Vec<Vec<f64>> {
    let by_label = seg.pixels_by_label();
    batch
        .instances
        .iter()
        .map(|inst| {
            let pixels = &by_label
                .iter()
                .find(|(l, _)| *l == inst.label)
                .expect("batch label comes from this mask")
                .1;
            let mut c = vec![0.0; sem.dim];
            for &p in pixels {
                c.iter_mut().zip(sem.pixel(p)).for_each(|(o, v)| *o += v);
            }
            c.iter_mut().for_each(|v| *v /= pixels.len() as f64);
            c
        })
        .collect()
}

/// Contrastive loss of rendered-feature samples against semantic centers.
pub fn semantic_loss<R: Rng + ?Sized>(
    feat: &FeatureMap,
    seg: &SegmentationMap,
    sem: &SemanticMap,
    n_s: usize,
    phi_min: f64,
    rng: &mut R,
) -> Result<(InstanceBatch, LossGrad)> {
    if sem.width != feat.width || sem.height != feat.height || sem.dim != feat.dim {
        return Err(Error::Shape(format!(
            "semantic map {}x{}x{} vs features {}x{}x{}",
            sem.width, sem.height, sem.dim, feat.width, feat.height, feat.dim
        )));
    }
    let batch = build_batch(feat, seg, n_s, phi_min, rng)?;
    let centers = semantic_centers(seg, sem, &batch);
    let refs: Vec<&[f64]> = centers.iter().map(Vec::as_slice).collect();
    let lg = contrastive_against(&batch, &refs)?;
    Ok((batch, lg))
}
