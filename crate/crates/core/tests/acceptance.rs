//! End-to-end acceptance criteria. Each test prints one status line straight
//! to stdout so the summary survives output capture.

use std::io::Write;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dynseg::contrastive::{build_batch, contrastive_against, contrastive_loss, InstanceBatch, DEFAULT_PHI_MIN};
use dynseg::harness::{ablate_outcomes, ablation_csv, ablation_rows, pipeline, sweep, ArmOutcome, ExperimentConfig, SweepGrid};
use dynseg::hdbscan::{hdbscan, mutual_reachability_mst, HdbscanParams};
use dynseg::inference::{cluster_stats, cosine, filter};
use dynseg::model::Vec3;
use dynseg::raster::{
    backprop_pixels, project_scene, render, render_gt_labels, DEFAULT_TAU_FG, MAX_ALPHA, MIN_ALPHA, RECORD_THRESHOLD,
    TRANSMITTANCE_STOP,
};
use dynseg::regularizers::{
    default_r_max, find_disappearing, match_pairs, project_semantic, semantic_centers, semantic_loss, tracking_loss,
    SemanticProjection,
};
use dynseg::synth::Dataset;
use dynseg::{Camera, FeatureMap, GaussianPrimitive, Scene};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id:>2} {status} {name}: {detail}").unwrap();
}

fn camera(size: usize) -> Camera {
    Camera::look_at(
        Vec3::new(0.0, 0.0, -5.0),
        Vec3::zeros(),
        Vec3::new(0.0, -1.0, 0.0),
        size as f64,
        size,
        size,
    )
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

// ---------------------------------------------------------------- criterion 1

fn blob(rng: &mut ChaCha8Rng, center: Vec3, velocity: Vec3, mu_t: f64, scale_t: f64, id: u32, dim: usize) -> Vec<GaussianPrimitive> {
    (0..12)
        .map(|_| {
            let offset = Vec3::new(
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            );
            let mut g = GaussianPrimitive::new(center + offset, rng.random_range(0.08..0.14), dim);
            g.velocity = velocity;
            g.mu_t = mu_t;
            g.scale_t = scale_t;
            g.opacity = 0.8;
            g.gt_instance = Some(id);
            g.feature = gaussian_vec(rng, dim, 1.0);
            g
        })
        .collect()
}

fn with_features(batch: &InstanceBatch, map: &FeatureMap) -> InstanceBatch {
    let mut b = batch.clone();
    for inst in &mut b.instances {
        inst.features = inst.pixels.iter().flat_map(|&p| map.pixel(p).to_vec()).collect();
    }
    b
}

#[test]
fn c01_gradient_matches_finite_differences() {
    let start = Instant::now();
    let (dim, raw_dim, size) = (8, 12, 32);
    let (lambda1, lambda2, h) = (100.0, 10.0, 1e-4);
    let (t_prev, t) = (0.2, 0.35);
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let v = Vec3::new(0.8, 0.0, 0.0);
    let mut prims = blob(&mut rng, Vec3::new(-1.2, 0.0, 0.0), v, 0.0, 0.1, 1, dim);
    prims.extend(blob(&mut rng, Vec3::new(-0.8, 0.0, 0.0), v, 0.5, 0.1, 1, dim));
    prims.extend(blob(&mut rng, Vec3::new(0.4, 0.5, 0.3), Vec3::zeros(), 0.5, 1.0, 2, dim));
    prims.extend(blob(&mut rng, Vec3::new(0.6, -0.6, -0.2), Vec3::zeros(), 0.5, 1.0, 3, dim));
    let scene = Scene::new(prims, dim, [0.0, 1.0]).unwrap();
    let cam = camera(size);

    let mask = render_gt_labels(&scene, &cam, t, DEFAULT_TAU_FG).unwrap();
    let out = render(&scene, &cam, t).unwrap();
    let batch = build_batch(&out.features, &mask, 64, DEFAULT_PHI_MIN, &mut rng).unwrap();
    assert_eq!(batch.instances.len(), 3);
    let cc = contrastive_loss(&batch).unwrap();

    let mut raw = FeatureMap::zeros(size, size, raw_dim);
    let noise = Normal::new(0.0, 0.1).unwrap();
    for p in 0..raw.pixel_count() {
        let class = mask.labels[p] as usize;
        for (k, x) in raw.pixel_mut(p).iter_mut().enumerate() {
            *x = f64::from(u8::from(k == class)) + noise.sample(&mut rng);
        }
    }
    let projection = SemanticProjection::random_orthonormal(dim, raw_dim, 3).unwrap();
    let sem = project_semantic(&raw, &projection).unwrap();
    let (sem_batch, sem_lg) = semantic_loss(&out.features, &mask, &sem, 64, DEFAULT_PHI_MIN, &mut rng).unwrap();
    let sem_centers = semantic_centers(&mask, &sem, &sem_batch);

    let gone = find_disappearing(&scene, t_prev, t, 0.05);
    let pairs = match_pairs(&scene, &gone, t_prev, t, 0.05, default_r_max(&scene));
    assert!(!pairs.is_empty());

    let g_cc = backprop_pixels(&out, cc.pixel_grads(&batch)).unwrap();
    let g_dino = backprop_pixels(&out, sem_lg.pixel_grads(&sem_batch)).unwrap();
    let (_, g_align) = tracking_loss(&scene, &pairs);
    let analytic: Vec<f64> = (0..g_cc.len())
        .map(|k| g_cc[k] + lambda1 * g_align[k] + lambda2 * g_dino[k])
        .collect();

    let cc_centers: Vec<&[f64]> = batch.instances.iter().map(|i| i.center.as_slice()).collect();
    let dino_centers: Vec<&[f64]> = sem_centers.iter().map(Vec::as_slice).collect();
    let loss_at = |flat: &[f64]| -> f64 {
        let mut s = scene.clone();
        s.set_features_flat(flat).unwrap();
        let o = render(&s, &cam, t).unwrap();
        let cc = contrastive_against(&with_features(&batch, &o.features), &cc_centers).unwrap().loss;
        let dino = contrastive_against(&with_features(&sem_batch, &o.features), &dino_centers).unwrap().loss;
        let (align, _) = tracking_loss(&s, &pairs);
        cc + lambda1 * align + lambda2 * dino
    };

    let candidates: Vec<usize> = (0..analytic.len()).filter(|&k| analytic[k].abs() > 1e-8).collect();
    let base = scene.features_flat();
    let mut worst = 0.0f64;
    for pick in index::sample(&mut rng, candidates.len(), 20) {
        let k = candidates[pick];
        let mut plus = base.clone();
        plus[k] += h;
        let mut minus = base.clone();
        minus[k] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        worst = worst.max((fd - analytic[k]).abs() / analytic[k].abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && elapsed < Duration::from_secs(10);
    report(
        1,
        "gradient check",
        pass,
        &format!("max rel err {worst:.2e} over 20 coords, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

fn random_scene(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Scene {
    let prims = (0..n)
        .map(|_| {
            let mut g = GaussianPrimitive::new(
                Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0)),
                0.1,
                dim,
            );
            g.scale_x = Vec3::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
            let q = gaussian_vec(rng, 4, 1.0);
            let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.rotation = [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn];
            g.opacity = rng.random_range(0.05..1.0);
            g.mu_t = rng.random_range(0.0..1.0);
            g.scale_t = rng.random_range(0.2..1.0);
            g.velocity = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
            g.feature = gaussian_vec(rng, dim, 1.0);
            g
        })
        .collect();
    Scene::new(prims, dim, [0.0, 1.0]).unwrap()
}

#[test]
fn c02_compositing_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (size, dim, scenes, per_scene) = (48, 4, 5, 200);
    let (mut max_sum, mut max_record_err, mut max_lin_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut monotone = true;
    for _ in 0..scenes {
        let scene = random_scene(&mut rng, 80, dim);
        let cam = camera(size);
        let t = rng.random_range(0.0..1.0);
        let out = render(&scene, &cam, t).unwrap();
        let splats = project_scene(&scene, &cam, t);

        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut other = scene.clone();
        for g in &mut other.primitives {
            g.feature = gaussian_vec(&mut rng, dim, 1.0);
        }
        let mut mixed = scene.clone();
        for (m, o) in mixed.primitives.iter_mut().zip(&other.primitives) {
            m.feature = m.feature.iter().zip(&o.feature).map(|(x, y)| a * x + b * y).collect();
        }
        let out_other = render(&other, &cam, t).unwrap();
        let out_mixed = render(&mixed, &cam, t).unwrap();

        for _ in 0..per_scene {
            let p = rng.random_range(0..size * size);
            let (px, py) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);

            // independent front-to-back compositing over every projected splat
            let mut transmittance = 1.0;
            let mut oracle = Vec::new();
            for s in &splats {
                if transmittance < TRANSMITTANCE_STOP {
                    break;
                }
                let alpha = s.raw_alpha(px, py).min(MAX_ALPHA);
                if alpha < MIN_ALPHA {
                    continue;
                }
                oracle.push((s.index, alpha * transmittance));
                let next = transmittance * (1.0 - alpha);
                monotone &= next <= transmittance;
                transmittance = next;
            }
            let kept: Vec<_> = oracle.iter().filter(|(_, w)| *w > RECORD_THRESHOLD).collect();
            let records = out.records(p);
            if kept.len() != records.len() {
                max_record_err = f64::INFINITY;
            } else {
                for ((i, w), r) in kept.iter().zip(records) {
                    let err = if *i == r.index as usize { (w - r.weight).abs() } else { f64::INFINITY };
                    max_record_err = max_record_err.max(err);
                }
            }
            let mut cumulative = 0.0;
            for r in records {
                monotone &= r.weight >= 0.0;
                cumulative += r.weight;
            }
            max_sum = max_sum.max(cumulative);

            for k in 0..dim {
                let expect = a * out.features.pixel(p)[k] + b * out_other.features.pixel(p)[k];
                max_lin_err = max_lin_err.max((out_mixed.features.pixel(p)[k] - expect).abs());
            }
        }
    }
    let pass = max_sum <= 1.0 + 1e-6 && monotone && max_lin_err <= 1e-10 && max_record_err <= 1e-12;
    report(
        2,
        "compositing invariants",
        pass,
        &format!(
            "{} pixels, max sum w {max_sum:.9}, monotone {monotone}, linearity err {max_lin_err:.1e}, record err {max_record_err:.1e}",
            scenes * per_scene
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------- criteria 3-6, 8, 10

struct Shared {
    dataset: Dataset,
    outcomes: Vec<(&'static str, ArmOutcome)>,
    full_time: Duration,
    full_alone: ArmOutcome,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let start = Instant::now();
        let dataset = Dataset::generate(&cfg.scene).unwrap();
        let full_alone = pipeline(&cfg, &dataset).unwrap();
        let full_time = start.elapsed();
        let (dataset, outcomes) = ablate_outcomes(&cfg).unwrap();
        Shared {
            dataset,
            outcomes,
            full_time,
            full_alone,
        }
    })
}

fn arm(name: &str) -> &'static ArmOutcome {
    &shared().outcomes.iter().find(|(n, _)| *n == name).unwrap().1
}

#[test]
fn c03_end_to_end_segmentation() {
    let s = shared();
    let r = &s.full_alone.report;
    let same = s.full_alone.report == arm("full").report;
    let pass = r.miou >= 0.90 && r.recall_dyn >= 0.85 && s.full_time < Duration::from_secs(600) && same;
    report(
        3,
        "end-to-end segmentation",
        pass,
        &format!(
            "mIoU {:.4}, Recall_dyn {:.4}, {:.1}s, matches ablation full arm {same}",
            r.miou,
            r.recall_dyn,
            s.full_time.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c04_streaming_ablation_direction() {
    let (full, random) = (arm("full").report.miou, arm("w/o Streaming").report.miou);
    let pass = full - random >= 0.10;
    report(
        4,
        "streaming vs random sampling",
        pass,
        &format!("streaming mIoU {full:.4}, random mIoU {random:.4}, gap {:.4}", full - random),
    );
    assert!(pass);
}

#[test]
fn c05_motion_ablation_direction() {
    let (full, still) = (arm("full").report.miou, arm("w/o Motion").report.miou);
    let pass = full - still >= 0.10;
    report(
        5,
        "motion vs no motion",
        pass,
        &format!("full mIoU {full:.4}, no-motion mIoU {still:.4}, gap {:.4}", full - still),
    );
    assert!(pass);
}

#[test]
fn c06_regularizers_reduce_temporal_variance() {
    let (full, no_track, no_dino) = (arm("full").sigma2, arm("w/o Tracking").sigma2, arm("w/o DINO").sigma2);
    let pass = full <= no_track && full <= no_dino;
    report(
        6,
        "temporal feature variance",
        pass,
        &format!("full {full:.5}, w/o tracking {no_track:.5}, w/o DINO {no_dino:.5}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

fn prim_oracle(points: &[Vec<f64>], min_samples: usize) -> f64 {
    let n = points.len();
    let d = |i: usize, j: usize| -> f64 {
        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| d(i, j)).collect();
            row.sort_by(f64::total_cmp);
            row[min_samples.min(n) - 1]
        })
        .collect();
    let reach = |i: usize, j: usize| d(i, j).max(core[i]).max(core[j]);
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..n {
        let u = (0..n)
            .filter(|&i| !in_tree[i])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]))
            .unwrap();
        in_tree[u] = true;
        total += best[u];
        for v in 0..n {
            if !in_tree[v] {
                best[v] = best[v].min(reach(u, v));
            }
        }
    }
    total
}

#[test]
fn c07_hdbscan_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(10..=200);
        let dim = rng.random_range(2..=5);
        let min_samples = rng.random_range(2..=10);
        let points: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, dim, 1.0)).collect();
        let mst: f64 = mutual_reachability_mst(&points, min_samples).iter().map(|e| e.weight).sum();
        worst = worst.max((mst - prim_oracle(&points, min_samples)).abs());
    }

    let mut blobs = Vec::new();
    for center in [0.0, 100.0] {
        for _ in 0..50 {
            let r = 0.5 * rng.random_range(0.0f64..1.0).sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            blobs.push(vec![center + r * a.cos(), r * a.sin()]);
        }
    }
    let params = HdbscanParams {
        min_samples: 5,
        min_cluster_size: 5,
        epsilon: 0.0,
    };
    let labels = hdbscan(&blobs, &params).unwrap();
    let mut distinct: Vec<i32> = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let noise = labels.iter().filter(|&&l| l < 0).count();
    let pass = worst <= 1e-9 && distinct.len() == 2 && noise == 0;
    report(
        7,
        "hdbscan oracle equivalence",
        pass,
        &format!("max MST weight diff {worst:.1e}, two blobs -> {} clusters, {noise} noise", distinct.len()),
    );
    assert!(pass);
}

#[test]
fn c08_clustering_robustness() {
    let s = shared();
    let full = arm("full");
    let cfg = ExperimentConfig::default();
    let grid = SweepGrid::default();
    let rows = sweep(&full.scene, &s.dataset, &cfg.cluster, &grid, cfg.tau_fg).unwrap();
    let lo = rows.iter().map(|r| r.report.miou).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.report.miou).fold(f64::NEG_INFINITY, f64::max);
    let pass = rows.len() == 27 && hi - lo <= 0.05;
    report(
        8,
        "clustering robustness",
        pass,
        &format!("{} grid points, mIoU {lo:.4}..{hi:.4}, spread {:.4}", rows.len(), hi - lo),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

struct Member {
    velocity: Vec3,
    offset: Vec3,
    cos: f64,
}

/// A 101-member cluster: 100 coherent members and one planted member.
fn planted_cluster(planted: Member) -> (Scene, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 4;
    let axis = [1.0, 0.0, 0.0, 0.0];
    let mut prims: Vec<GaussianPrimitive> = (0..100)
        .map(|_| {
            let mut g = GaussianPrimitive::new(Vec3::from_iterator(gaussian_vec(&mut rng, 3, 0.1)), 0.05, dim);
            g.velocity = Vec3::new(1.0, 0.0, 0.0) + Vec3::from_iterator(gaussian_vec(&mut rng, 3, 0.1));
            let tilt = gaussian_vec(&mut rng, 3, 0.05);
            g.feature = vec![1.0, tilt[0], tilt[1], tilt[2]];
            g
        })
        .collect();
    let mut g = GaussianPrimitive::new(planted.offset, 0.05, dim);
    g.velocity = Vec3::new(1.0, 0.0, 0.0) + planted.velocity;
    let c = planted.cos;
    g.feature = vec![c, (1.0 - c * c).sqrt(), 0.0, 0.0];
    debug_assert!((cosine(&g.feature, &axis) - c).abs() < 1e-12);
    prims.push(g);
    let members = (0..prims.len()).collect();
    (Scene::new(prims, dim, [0.0, 1.0]).unwrap(), members)
}

fn ejected(planted: Member) -> Vec<usize> {
    let (scene, members) = planted_cluster(planted);
    let stats = cluster_stats(&scene, 0, &members);
    filter(&scene, &members, &stats, 0.5)
}

#[test]
fn c09_filter_correctness() {
    // member spread is about 0.17 per vector, so 10σ is about 1.7
    let far = 10.0 * 0.17;
    let outlier = ejected(Member {
        velocity: Vec3::new(0.0, far, 0.0),
        offset: Vec3::new(0.0, 0.0, far),
        cos: 0.1,
    });
    let only_velocity = ejected(Member {
        velocity: Vec3::new(0.0, far, 0.0),
        offset: Vec3::zeros(),
        cos: 0.1,
    });
    let only_position = ejected(Member {
        velocity: Vec3::zeros(),
        offset: Vec3::new(0.0, 0.0, far),
        cos: 0.1,
    });
    let only_feature = ejected(Member {
        velocity: Vec3::zeros(),
        offset: Vec3::zeros(),
        cos: 0.1,
    });
    let similar = ejected(Member {
        velocity: Vec3::new(0.0, far, 0.0),
        offset: Vec3::new(0.0, 0.0, far),
        cos: 0.9,
    });

    let mut same = GaussianPrimitive::new(Vec3::new(0.3, 0.1, 0.0), 0.05, 3);
    same.velocity = Vec3::new(0.2, 0.0, 0.0);
    same.feature = vec![0.5, 0.5, 0.0];
    let identical = Scene::new(vec![same; 50], 3, [0.0, 1.0]).unwrap();
    let all: Vec<usize> = (0..50).collect();
    let none = filter(&identical, &all, &cluster_stats(&identical, 0, &all), 0.5);

    let pass = outlier == vec![100]
        && only_velocity.is_empty()
        && only_position.is_empty()
        && only_feature.is_empty()
        && similar.is_empty()
        && none.is_empty();
    report(
        9,
        "filter correctness",
        pass,
        &format!(
            "planted {outlier:?}, single cues {}/{}/{}, cos 0.9 {}, identical {}",
            only_velocity.len(),
            only_position.len(),
            only_feature.len(),
            similar.len(),
            none.len()
        ),
    );
    assert!(pass);
}

// --------------------------------------------------------------- criterion 10

#[test]
fn c10_ablate_is_deterministic() {
    let s = shared();
    let first = ablation_csv(&ablation_rows(&s.dataset.checksum().unwrap(), &s.outcomes));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_dynseg"))
        .args(["ablate", "--seed", "1", "--out"])
        .arg(&path)
        .status()
        .unwrap();
    let second = std::fs::read_to_string(&path).unwrap_or_default();
    let pass = status.success() && first.as_bytes() == second.as_bytes();
    report(
        10,
        "ablate determinism",
        pass,
        &format!("{} CSV bytes, identical {}", first.len(), first == second),
    );
    assert!(pass);
}
