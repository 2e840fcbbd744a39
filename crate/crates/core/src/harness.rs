//! Experiment configuration and drivers: full pipeline, ablation arms,
//! clustering sweeps, and PCA visualization of feature maps.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, temporal_feature_variance, MetricReport};
use crate::inference::{segment, ClusterParams, ClusterResult};
use crate::model::{GaussianPrimitive, Scene};
use crate::raster::{labels_from_render, render, FeatureMap, SegmentationMap, DEFAULT_TAU_FG};
use crate::synth::{Dataset, SceneSpec};
use crate::trainer::{initialize_features, train, SamplingMode, StepLog, TrainConfig};

pub const VERSION_TAG: &str = concat!("dynseg ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub cluster: ClusterParams,
    pub feature_init_std: f64,
    pub init_seed: u64,
    pub tau_fg: f64,
    /// Train and predict on zero-velocity, clip-spanning geometry.
    pub no_motion: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneSpec::desk();
        let seed = scene.seed;
        Self {
            scene,
            train: TrainConfig {
                epochs: 6,
                steps_per_frame: 2,
                ..Default::default()
            },
            cluster: ClusterParams::default(),
            feature_init_std: 1e-3,
            init_seed: 0,
            tau_fg: DEFAULT_TAU_FG,
            no_motion: false,
        }
        .with_seed(seed)
    }
}

impl ExperimentConfig {
    /// Sets every seed from one global seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.train.seed = seed;
        self.cluster.seed = seed;
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.cluster.validate()?;
        if !(self.feature_init_std > 0.0) || !(0.0..1.0).contains(&self.tau_fg) {
            return Err(Error::InvalidConfig("feature_init_std must be positive and tau_fg in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config: &'a ExperimentConfig,
    dataset_checksum: &'a str,
}

/// Writes `manifest.json` with everything needed to repeat a run.
pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, dataset_checksum: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.json");
    let m = Manifest {
        version: VERSION_TAG,
        config: cfg,
        dataset_checksum,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
}

/// Geometry an arm trains and predicts on.
pub fn arm_scene(cfg: &ExperimentConfig, dataset: &Dataset) -> Scene {
    if cfg.no_motion {
        dataset.scene.without_motion()
    } else {
        dataset.scene.clone()
    }
}

pub fn train_arm(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(Scene, Vec<StepLog>)> {
    let mut scene = arm_scene(cfg, dataset);
    initialize_features(&mut scene, cfg.feature_init_std, cfg.init_seed)?;
    let out = train(scene, dataset, &cfg.train)?;
    Ok((out.scene, out.log))
}

/// Clusters, treating an empty clustering as all-noise.
pub fn segment_or_noise(scene: &Scene, params: &ClusterParams) -> Result<ClusterResult> {
    match segment(scene, params) {
        Ok(r) => Ok(r),
        Err(Error::NoClusters | Error::TooFewPoints { .. }) => Ok(ClusterResult {
            labels: vec![-1; scene.len()],
            clusters: Vec::new(),
            ejected: 0,
        }),
        Err(e) => Err(e),
    }
}

fn geometry_only(scene: &Scene) -> Scene {
    Scene {
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
    }
}

/// Scores several clusterings of the same scene, rendering each frame once.
pub fn evaluate_many(
    scene: &Scene,
    results: &[ClusterResult],
    dataset: &Dataset,
    tau_fg: f64,
) -> Result<Vec<MetricReport>> {
    let geometry = geometry_only(scene);
    let labels: Vec<Vec<u32>> = results.iter().map(ClusterResult::render_labels).collect();
    let t_count = dataset.times.len();
    let keys: Vec<(usize, usize)> = (0..dataset.cameras.len())
        .flat_map(|v| (0..t_count).map(move |f| (v, f)))
        .collect();
    // per_key[k][r] = predicted mask of result r at key k
    let per_key: Vec<Vec<SegmentationMap>> = keys
        .par_iter()
        .map(|&(v, f)| -> Result<_> {
            let out = render(&geometry, &dataset.cameras[v], dataset.times[f])?;
            Ok(labels.iter().map(|l| labels_from_render(&out, l, tau_fg)).collect())
        })
        .collect::<Result<_>>()?;
    let dynamic = dataset.dynamic_ids();
    (0..results.len())
        .into_par_iter()
        .map(|r| {
            let pred: Vec<SegmentationMap> = per_key.iter().map(|m| m[r].clone()).collect();
            compute_metrics(&pred, &dataset.gt_masks, &dynamic)
        })
        .collect()
}

pub fn evaluate(scene: &Scene, result: &ClusterResult, dataset: &Dataset, tau_fg: f64) -> Result<MetricReport> {
    Ok(evaluate_many(scene, std::slice::from_ref(result), dataset, tau_fg)?.remove(0))
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub scene: Scene,
    pub result: ClusterResult,
    pub report: MetricReport,
    pub sigma2: f64,
    pub log: Vec<StepLog>,
}

/// Train, segment, and evaluate one configuration on a shared dataset.
pub fn pipeline(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<ArmOutcome> {
    cfg.validate()?;
    let (scene, log) = train_arm(cfg, dataset)?;
    let result = segment_or_noise(&scene, &cfg.cluster)?;
    let report = evaluate(&scene, &result, dataset, cfg.tau_fg)?;
    let sigma2 = temporal_feature_variance(
        &scene,
        &dataset.cameras,
        &dataset.times,
        &dataset.gt_masks,
        &dataset.dynamic_ids(),
    )?;
    Ok(ArmOutcome {
        scene,
        result,
        report,
        sigma2,
        log,
    })
}

pub const ARMS: [&str; 5] = ["full", "w/o Motion", "w/o Streaming", "w/o Tracking", "w/o DINO"];

/// The ablation arms; each differs from `base` in exactly one field.
pub fn arm_configs(base: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    ARMS.iter()
        .map(|&name| {
            let mut c = base.clone();
            match name {
                "w/o Motion" => c.no_motion = true,
                "w/o Streaming" => c.train.sampling = SamplingMode::Random,
                "w/o Tracking" => c.train.lambda1 = 0.0,
                "w/o DINO" => c.train.lambda2 = 0.0,
                _ => {}
            }
            (name, c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub report: MetricReport,
    pub sigma2: f64,
    pub clusters: usize,
    pub dataset_checksum: String,
}

/// Runs every arm on one dataset generated from `base.scene`, keeping the
/// trained scenes and clusterings.
pub fn ablate_outcomes(base: &ExperimentConfig) -> Result<(Dataset, Vec<(&'static str, ArmOutcome)>)> {
    base.validate()?;
    let dataset = Dataset::generate(&base.scene)?;
    let checksum = dataset.checksum()?;
    let outcomes = arm_configs(base)
        .into_par_iter()
        .map(|(name, cfg)| {
            // every arm sees the identical dataset
            if Dataset::generate(&cfg.scene)?.checksum()? != checksum {
                return Err(Error::InvalidConfig(format!("arm {name} changed the dataset")));
            }
            Ok((name, pipeline(&cfg, &dataset)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dataset, outcomes))
}

pub fn ablation_rows(dataset_checksum: &str, outcomes: &[(&str, ArmOutcome)]) -> Vec<AblationRow> {
    outcomes
        .iter()
        .map(|(name, out)| AblationRow {
            arm: name.to_string(),
            clusters: out.result.cluster_count(),
            report: out.report.clone(),
            sigma2: out.sigma2,
            dataset_checksum: dataset_checksum.to_string(),
        })
        .collect()
}

pub fn ablate(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let (dataset, outcomes) = ablate_outcomes(base)?;
    Ok(ablation_rows(&dataset.checksum()?, &outcomes))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("arm,{},sigma2,clusters,dataset\n", MetricReport::CSV_HEADER);
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            r.arm,
            r.report.csv_row(),
            r.sigma2,
            r.clusters,
            r.dataset_checksum
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub subset_rate: Vec<f64>,
    pub min_samples: Vec<usize>,
    pub epsilon: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            subset_rate: vec![0.02, 0.05, 0.1],
            min_samples: vec![5, 10, 20],
            epsilon: vec![0.0, 0.05, 0.1],
        }
    }
}

impl SweepGrid {
    pub fn points(&self, base: &ClusterParams) -> Vec<ClusterParams> {
        let mut out = Vec::new();
        for &r in &self.subset_rate {
            for &m in &self.min_samples {
                for &e in &self.epsilon {
                    out.push(ClusterParams {
                        subset_rate: r,
                        min_samples: m,
                        epsilon: e,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: ClusterParams,
    pub clusters: usize,
    pub report: MetricReport,
}

/// Segments a trained scene at every grid point and scores each result.
pub fn sweep(scene: &Scene, dataset: &Dataset, base: &ClusterParams, grid: &SweepGrid, tau_fg: f64) -> Result<Vec<SweepRow>> {
    let points = grid.points(base);
    let results: Vec<ClusterResult> = points
        .par_iter()
        .map(|p| segment_or_noise(scene, p))
        .collect::<Result<_>>()?;
    let reports = evaluate_many(scene, &results, dataset, tau_fg)?;
    Ok(points
        .into_iter()
        .zip(results)
        .zip(reports)
        .map(|((params, r), report)| SweepRow {
            params,
            clusters: r.cluster_count(),
            report,
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("R,M,E,clusters,{}\n", MetricReport::CSV_HEADER);
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.params.subset_rate,
            r.params.min_samples,
            r.params.epsilon,
            r.clusters,
            r.report.csv_row()
        ));
    }
    s
}

/// Three leading principal directions of foreground pixel features with the
/// value range seen while fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Zero-variance input: images fall back to the feature norm in gray.
    pub degenerate: bool,
    pub max_norm: f64,
    pub tau_fg: f64,
}

fn foreground<'a>(maps: &'a [(&'a FeatureMap, &'a [f64])], tau_fg: f64) -> impl Iterator<Item = &'a [f64]> + 'a {
    maps.iter()
        .flat_map(move |(m, a)| (0..m.pixel_count()).filter(move |&p| a[p] >= tau_fg).map(move |p| m.pixel(p)))
}

/// Fits one basis for a whole sequence of `(features, alpha)` renders.
pub fn fit_pca(maps: &[(&FeatureMap, &[f64])], tau_fg: f64) -> Result<PcaBasis> {
    let d = maps.first().map_or(0, |(m, _)| m.dim);
    if d == 0 {
        return Err(Error::Shape("no feature channels to visualize".into()));
    }
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    let mut max_norm: f64 = 0.0;
    for x in foreground(maps, tau_fg) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
        max_norm = max_norm.max(x.iter().map(|v| v * v).sum::<f64>().sqrt());
        count += 1;
    }
    let n = count.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in foreground(maps, tau_fg) {
        let c: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    let degenerate = count == 0 || !(top > 1e-12 * max_norm.powi(2).max(1e-300));
    let components: Vec<Vec<f64>> = order
        .iter()
        .take(3)
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // sign convention: largest-magnitude entry positive
            let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let mut basis = PcaBasis {
        mean,
        lo: vec![f64::INFINITY; components.len()],
        hi: vec![f64::NEG_INFINITY; components.len()],
        components,
        degenerate,
        max_norm,
        tau_fg,
    };
    let fg: Vec<&[f64]> = foreground(maps, tau_fg).collect();
    for x in fg {
        let proj = basis.project(x);
        for (k, p) in proj.iter().enumerate() {
            basis.lo[k] = basis.lo[k].min(*p);
            basis.hi[k] = basis.hi[k].max(*p);
        }
    }
    Ok(basis)
}

impl PcaBasis {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((a, v), m)| a * (v - m)).sum())
            .collect()
    }

    /// RGB bytes; background pixels are black.
    pub fn to_rgb(&self, map: &FeatureMap, alpha: &[f64]) -> Vec<u8> {
        let mut out = vec![0u8; map.pixel_count() * 3];
        for p in 0..map.pixel_count() {
            if alpha[p] < self.tau_fg {
                continue;
            }
            let x = map.pixel(p);
            let px = &mut out[p * 3..p * 3 + 3];
            if self.degenerate {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let g = if self.max_norm > 0.0 { norm / self.max_norm } else { 0.5 };
                px.fill((g.clamp(0.0, 1.0) * 255.0).round() as u8);
                continue;
            }
            let proj = self.project(x);
            for k in 0..3 {
                let v = match proj.get(k) {
                    Some(v) if self.hi[k] - self.lo[k] > 1e-12 * (self.hi[0] - self.lo[0]) => {
                        (v - self.lo[k]) / (self.hi[k] - self.lo[k])
                    }
                    _ => 0.5,
                };
                px[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_round_trip_and_single_field_arms() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default().with_seed(11);
        cfg.save(&dir.path().join("c.json")).unwrap();
        assert_eq!(ExperimentConfig::load(&dir.path().join("c.json")).unwrap(), cfg);

        let arms = arm_configs(&cfg);
        assert_eq!(arms.iter().map(|a| a.0).collect::<Vec<_>>(), ARMS);
        let base = serde_json::to_value(&cfg).unwrap();
        for (name, c) in &arms[1..] {
            let v = serde_json::to_value(c).unwrap();
            let mut diffs = 0;
            fn count(a: &serde_json::Value, b: &serde_json::Value, n: &mut usize) {
                match (a, b) {
                    (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                        for (k, va) in x {
                            count(va, &y[k], n);
                        }
                    }
                    _ if a != b => *n += 1,
                    _ => {}
                }
            }
            count(&base, &v, &mut diffs);
            assert_eq!(diffs, 1, "arm {name}");
        }
    }

    #[test]
    fn sweep_grid_cardinality() {
        assert_eq!(SweepGrid::default().points(&ClusterParams::default()).len(), 27);
    }

    fn map_from(pixels: Vec<Vec<f64>>, w: usize) -> (FeatureMap, Vec<f64>) {
        let d = pixels[0].len();
        let h = pixels.len() / w;
        let m = FeatureMap::from_data(w, h, d, pixels.concat()).unwrap();
        (m, vec![1.0; w * h])
    }

    #[test]
    fn constant_map_is_one_flat_color() {
        let (m, a) = map_from(vec![vec![0.3, -0.2, 0.5]; 16], 4);
        let b = fit_pca(&[(&m, &a)], 0.5).unwrap();
        assert!(b.degenerate);
        let rgb = b.to_rgb(&m, &a);
        assert!(rgb.chunks(3).all(|c| c == &rgb[..3]));
    }

    #[test]
    fn two_instances_get_distinct_colors() {
        let px: Vec<Vec<f64>> = (0..16).map(|i| if i < 8 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let (m, a) = map_from(px, 4);
        let b = fit_pca(&[(&m, &a)], 0.5).unwrap();
        let rgb = b.to_rgb(&m, &a);
        assert_ne!(&rgb[..3], &rgb[45..48]);
        assert!(rgb[..24].chunks(3).all(|c| c == &rgb[..3]));
        assert!(rgb[..3].iter().chain(&rgb[45..48]).any(|v| *v == 0 || *v == 255));
    }

    #[test]
    fn pca_captures_at_least_random_projection_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let scales = [3.0, 2.0, 1.5, 0.5, 0.2, 0.1];
        let px: Vec<Vec<f64>> = (0..400)
            .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (m, a) = map_from(px.clone(), 20);
        let b = fit_pca(&[(&m, &a)], 0.5).unwrap();
        let captured = |basis: &[Vec<f64>]| -> f64 {
            let mean: Vec<f64> = (0..d).map(|k| px.iter().map(|x| x[k]).sum::<f64>() / px.len() as f64).collect();
            px.iter()
                .map(|x| {
                    basis
                        .iter()
                        .map(|c| c.iter().zip(x).zip(&mean).map(|((a, v), m)| a * (v - m)).sum::<f64>().powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        let best = captured(&b.components);
        for _ in 0..50 {
            // random orthonormal rank-3 basis by Gram-Schmidt
            let mut q: Vec<Vec<f64>> = Vec::new();
            while q.len() < 3 {
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                for u in &q {
                    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    q.push(v.iter().map(|x| x / n).collect());
                }
            }
            assert!(best >= captured(&q) - 1e-9);
        }
    }
}
