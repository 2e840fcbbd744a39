//! Turning trained primitive features into 4D instances.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdbscan::{hdbscan, HdbscanParams};
use crate::model::{Scene, Vec3};

pub const DEFAULT_TAU_SIM: f64 = 0.5;
pub const DEFAULT_TAU_ASSIGN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub subset_rate: f64,
    pub min_samples: usize,
    pub min_cluster_size: usize,
    pub epsilon: f64,
    pub tau_sim: f64,
    pub tau_assign: f64,
    pub seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            subset_rate: 0.05,
            min_samples: 10,
            min_cluster_size: 10,
            epsilon: 0.0,
            tau_sim: DEFAULT_TAU_SIM,
            tau_assign: DEFAULT_TAU_ASSIGN,
            seed: 0,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.subset_rate > 0.0 && self.subset_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "subset rate {} outside (0, 1]",
                self.subset_rate
            )));
        }
        if self.min_samples == 0 {
            return Err(Error::InvalidConfig("min_samples must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!("negative epsilon {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Member statistics of one cluster. Positions are taken at `reference_time`,
/// the mean temporal center of the members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub label: i32,
    pub size: usize,
    pub mean_feature: Vec<f64>,
    pub mean_velocity: [f64; 3],
    pub mean_position: [f64; 3],
    pub reference_time: f64,
    pub sigma_v: f64,
    pub sigma_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// One entry per primitive; `-1` is noise or unassigned.
    pub labels: Vec<i32>,
    pub clusters: Vec<ClusterStats>,
    pub ejected: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    if denom > 0.0 {
        ab / denom
    } else {
        0.0
    }
}

/// `f / ‖f‖`, or `f` unchanged when it is zero.
pub fn unit(f: &[f64]) -> Vec<f64> {
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        f.iter().map(|v| v / norm).collect()
    } else {
        f.to_vec()
    }
}

pub fn cluster_stats(scene: &Scene, label: i32, members: &[usize]) -> ClusterStats {
    let d = scene.feature_dim;
    let n = members.len().max(1) as f64;
    let mut mean_feature = vec![0.0; d];
    let mut mean_v = Vec3::zeros();
    let mut t_ref = 0.0;
    for &i in members {
        let g = &scene.primitives[i];
        for (m, f) in mean_feature.iter_mut().zip(&g.feature) {
            *m += f / n;
        }
        mean_v += g.velocity / n;
        t_ref += g.mu_t / n;
    }
    let positions: Vec<Vec3> = members
        .iter()
        .map(|&i| scene.primitives[i].position_at(t_ref))
        .collect();
    let mean_p = positions.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let var_v = members
        .iter()
        .map(|&i| (scene.primitives[i].velocity - mean_v).norm_squared())
        .sum::<f64>()
        / n;
    let var_p = positions.iter().map(|p| (p - mean_p).norm_squared()).sum::<f64>() / n;
    ClusterStats {
        label,
        size: members.len(),
        mean_feature,
        mean_velocity: [mean_v.x, mean_v.y, mean_v.z],
        mean_position: [mean_p.x, mean_p.y, mean_p.z],
        reference_time: t_ref,
        sigma_v: var_v.sqrt(),
        sigma_p: var_p.sqrt(),
    }
}

/// Members to eject: velocity deviation above 3σ_v, position deviation above
/// 3σ_p, and cosine to the mean feature below `tau_sim`, all three at once.
pub fn filter(scene: &Scene, members: &[usize], stats: &ClusterStats, tau_sim: f64) -> Vec<usize> {
    if members.len() < 2 {
        return Vec::new();
    }
    let mv = Vec3::from(stats.mean_velocity);
    let mp = Vec3::from(stats.mean_position);
    members
        .iter()
        .copied()
        .filter(|&i| {
            let g = &scene.primitives[i];
            let dv = (g.velocity - mv).norm();
            let dp = (g.position_at(stats.reference_time) - mp).norm();
            dv > 3.0 * stats.sigma_v
                && dp > 3.0 * stats.sigma_p
                && cosine(&g.feature, &stats.mean_feature) < tau_sim
        })
        .collect()
}

fn members_by_label(labels: &[i32], k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            out[l as usize].push(i);
        }
    }
    out
}

/// Subset clustering on unit-normalized features, cosine assignment of
/// everything else, then one filter pass.
pub fn segment(scene: &Scene, params: &ClusterParams) -> Result<ClusterResult> {
    params.validate()?;
    let n = scene.len();
    let m = ((params.subset_rate * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut subset = rand::seq::index::sample(&mut rng, n, m).into_vec();
    subset.sort_unstable();
    let points: Vec<Vec<f64>> = subset
        .iter()
        .map(|&i| unit(&scene.primitives[i].feature))
        .collect();
    let sub_labels = hdbscan(
        &points,
        &HdbscanParams {
            min_samples: params.min_samples,
            min_cluster_size: params.min_cluster_size,
            epsilon: params.epsilon,
        },
    )?;
    let k = sub_labels.iter().copied().max().map_or(0, |x| x + 1) as usize;
    if k == 0 {
        return Err(Error::NoClusters);
    }

    let mut labels = vec![-1i32; n];
    let mut clustered = vec![false; n];
    for (&i, &l) in subset.iter().zip(&sub_labels) {
        labels[i] = l;
        clustered[i] = l >= 0;
    }
    let centers: Vec<Vec<f64>> = members_by_label(&labels, k)
        .iter()
        .enumerate()
        .map(|(c, mem)| cluster_stats(scene, c as i32, mem).mean_feature)
        .collect();
    for i in (0..n).filter(|&i| !clustered[i]) {
        let f = &scene.primitives[i].feature;
        let mut best = (-1i32, f64::NEG_INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let s = cosine(f, center);
            if s > best.1 {
                best = (c as i32, s);
            }
        }
        labels[i] = if best.1 >= params.tau_assign { best.0 } else { -1 };
    }

    let members = members_by_label(&labels, k);
    let mut ejected = 0;
    for (c, mem) in members.iter().enumerate() {
        let stats = cluster_stats(scene, c as i32, mem);
        for i in filter(scene, mem, &stats, params.tau_sim) {
            labels[i] = -1;
            ejected += 1;
        }
    }
    let clusters = members_by_label(&labels, k)
        .iter()
        .enumerate()
        .map(|(c, mem)| cluster_stats(scene, c as i32, mem))
        .collect();
    Ok(ClusterResult {
        labels,
        clusters,
        ejected,
    })
}

impl ClusterResult {
    /// Render labels: cluster `c` becomes `c + 1`, noise becomes 0.
    pub fn render_labels(&self) -> Vec<u32> {
        self.labels.iter().map(|&l| if l >= 0 { l as u32 + 1 } else { 0 }).collect()
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("primitive,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<i32>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut labels = Vec::new();
        for (k, line) in text.lines().enumerate().skip(1) {
            let (idx, label) = line
                .split_once(',')
                .ok_or_else(|| Error::format(path, format!("line {}: expected two fields", k + 1)))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad index", k + 1)))?;
            if idx != labels.len() {
                return Err(Error::format(path, format!("line {}: indices out of order", k + 1)));
            }
            labels.push(
                label
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {}: bad label", k + 1)))?,
            );
        }
        Ok(labels)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join("labels.csv"))?;
        let path = dir.join("clusters.json");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("clusters.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EditOp {
    Remove,
    Duplicate([f64; 3]),
    Extract,
}

pub fn edit(scene: &Scene, result: &ClusterResult, label: i32, op: EditOp) -> Result<Scene> {
    if result.labels.len() != scene.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} primitives",
            result.labels.len(),
            scene.len()
        )));
    }
    if label < 0 || !result.labels.contains(&label) {
        return Err(Error::UnknownLabel(label));
    }
    let inside = |i: &usize| result.labels[*i] == label;
    let mut out = Scene {
        primitives: Vec::new(),
        feature_dim: scene.feature_dim,
        time_range: scene.time_range,
    };
    let all = 0..scene.len();
    match op {
        EditOp::Remove => {
            out.primitives = all.filter(|i| !inside(i)).map(|i| scene.primitives[i].clone()).collect();
        }
        EditOp::Extract => {
            out.primitives = all.filter(inside).map(|i| scene.primitives[i].clone()).collect();
        }
        EditOp::Duplicate(offset) => {
            out.primitives = scene.primitives.clone();
            let shift = Vec3::from(offset);
            out.primitives.extend(all.filter(inside).map(|i| {
                let mut g = scene.primitives[i].clone();
                g.mu_x += shift;
                g
            }));
        }
    }
    Ok(out)
}
