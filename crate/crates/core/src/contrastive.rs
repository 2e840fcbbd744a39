//! Contrastive clustering loss over sampled pixel features.
//!
//! Each instance in a per-image mask contributes `N_s` sampled pixel features.
//! A sample is scored against every instance center with a per-instance
//! temperature; the loss is the mean negative log-softmax of its own center.
//! Centers and temperatures are held constant within a step.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{FeatureMap, SegmentationMap};

pub const DEFAULT_PHI_MIN: f64 = 1e-2;

/// Samples of one instance in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSamples {
    pub label: u32,
    /// Pixel index of each sample (may repeat for small masks).
    pub pixels: Vec<usize>,
    /// `N_s × dim`, row per sample.
    pub features: Vec<f64>,
    pub center: Vec<f64>,
    pub temperature: f64,
}

impl InstanceSamples {
    pub fn sample(&self, j: usize, dim: usize) -> &[f64] {
        &self.features[j * dim..(j + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBatch {
    pub dim: usize,
    pub samples_per_instance: usize,
    pub instances: Vec<InstanceSamples>,
}

/// Loss value and its gradient w.r.t. every sample feature, laid out like
/// [`InstanceSamples::features`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

impl LossGrad {
    fn zero(batch: &InstanceBatch) -> Self {
        Self {
            loss: 0.0,
            grads: batch
                .instances
                .iter()
                .map(|i| vec![0.0; i.features.len()])
                .collect(),
        }
    }

    /// `(pixel, gradient)` pairs for handing to the rasterizer adjoint.
    pub fn pixel_grads<'a>(&'a self, batch: &'a InstanceBatch) -> impl Iterator<Item = (usize, &'a [f64])> + 'a {
        let d = batch.dim;
        batch
            .instances
            .iter()
            .zip(&self.grads)
            .flat_map(move |(inst, g)| {
                inst.pixels
                    .iter()
                    .enumerate()
                    .map(move |(j, &p)| (p, &g[j * d..(j + 1) * d]))
            })
    }
}

/// `Σ_j ‖f_j − f̄‖² / (N_s · ln(N_s + 10))`, before clamping.
pub fn raw_temperature(samples: &[f64], center: &[f64], n_s: usize) -> f64 {
    let d = center.len();
    let scatter: f64 = samples
        .chunks_exact(d)
        .map(|f| f.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    scatter / (n_s as f64 * (n_s as f64 + 10.0).ln())
}

fn mean_rows(rows: &[f64], d: usize) -> Vec<f64> {
    let n = rows.len() / d;
    let mut c = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        for (o, v) in c.iter_mut().zip(r) {
            *o += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    c
}

/// Samples `n_s` pixels per nonzero label and computes centers and temperatures.
///
/// Masks with at least `n_s` pixels are sampled without replacement, masks
/// with `2..n_s` pixels with replacement; smaller masks are skipped.
pub fn build_batch<R: Rng + ?Sized>(
    feat: &FeatureMap,
    seg: &SegmentationMap,
    n_s: usize,
    phi_min: f64,
    rng: &mut R,
) -> Result<InstanceBatch> {
    if feat.width != seg.width || feat.height != seg.height {
        return Err(Error::Shape(format!(
            "feature map {}x{} vs mask {}x{}",
            feat.width, feat.height, seg.width, seg.height
        )));
    }
    if n_s < 2 {
        return Err(Error::InvalidConfig(format!("N_s must be at least 2, got {n_s}")));
    }
    let d = feat.dim;
    let mut instances = Vec::new();
    for (label, pixels) in seg.pixels_by_label() {
        if pixels.len() < 2 {
            continue;
        }
        let chosen: Vec<usize> = if pixels.len() >= n_s {
            index::sample(rng, pixels.len(), n_s)
                .into_iter()
                .map(|k| pixels[k])
                .collect()
        } else {
            (0..n_s)
                .map(|_| pixels[rng.random_range(0..pixels.len())])
                .collect()
        };
        let mut features = Vec::with_capacity(n_s * d);
        for &p in &chosen {
            features.extend_from_slice(feat.pixel(p));
        }
        let center = mean_rows(&features, d);
        let temperature = raw_temperature(&features, &center, n_s).max(phi_min);
        instances.push(InstanceSamples {
            label,
            pixels: chosen,
            features,
            center,
            temperature,
        });
    }
    Ok(InstanceBatch {
        dim: d,
        samples_per_instance: n_s,
        instances,
    })
}

/// Contrastive loss of the batch against its own centers.
pub fn contrastive_loss(batch: &InstanceBatch) -> Result<LossGrad> {
    let centers: Vec<&[f64]> = batch.instances.iter().map(|i| i.center.as_slice()).collect();
    contrastive_against(batch, &centers)
}

/// Contrastive loss of the batch samples against an arbitrary center set
/// (one per instance, same order), using the batch temperatures.
pub fn contrastive_against(batch: &InstanceBatch, centers: &[&[f64]]) -> Result<LossGrad> {
    let n_inst = batch.instances.len();
    if centers.len() != n_inst {
        return Err(Error::Shape(format!(
            "{} centers for {n_inst} instances",
            centers.len()
        )));
    }
    if n_inst < 2 {
        return Ok(LossGrad::zero(batch));
    }
    let d = batch.dim;
    let finite = batch
        .instances
        .iter()
        .all(|i| i.features.iter().all(|v| v.is_finite()) && i.temperature.is_finite())
        && centers.iter().all(|c| c.len() == d && c.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFinite("contrastive batch".into()));
    }

    // scaled centers c_k / φ_k
    let scaled: Vec<Vec<f64>> = centers
        .iter()
        .zip(&batch.instances)
        .map(|(c, inst)| c.iter().map(|v| v / inst.temperature).collect())
        .collect();

    let total: usize = batch.instances.iter().map(|i| i.pixels.len()).sum();
    let norm = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(n_inst);
    let mut logits = vec![0.0; n_inst];
    for (i, inst) in batch.instances.iter().enumerate() {
        let mut g = vec![0.0; inst.features.len()];
        for (j, f) in inst.features.chunks_exact(d).enumerate() {
            for (k, s) in scaled.iter().enumerate() {
                logits[k] = dot(f, s);
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let log_z = m + z.ln();
            loss -= logits[i] - log_z;
            let gj = &mut g[j * d..(j + 1) * d];
            for (k, s) in scaled.iter().enumerate() {
                let p = (logits[k] - log_z).exp();
                for (o, v) in gj.iter_mut().zip(s) {
                    *o += norm * p * v;
                }
            }
            for (o, v) in gj.iter_mut().zip(&scaled[i]) {
                *o -= norm * v;
            }
        }
        grads.push(g);
    }
    Ok(LossGrad {
        loss: loss * norm,
        grads,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch_from(groups: Vec<Vec<Vec<f64>>>, phi_min: f64) -> InstanceBatch {
        let dim = groups[0][0].len();
        let n_s = groups[0].len();
        let instances = groups
            .into_iter()
            .enumerate()
            .map(|(i, rows)| {
                let features: Vec<f64> = rows.concat();
                let center = mean_rows(&features, dim);
                let temperature = raw_temperature(&features, &center, n_s).max(phi_min);
                InstanceSamples {
                    label: i as u32 + 1,
                    pixels: (0..n_s).collect(),
                    features,
                    center,
                    temperature,
                }
            })
            .collect();
        InstanceBatch {
            dim,
            samples_per_instance: n_s,
            instances,
        }
    }

    fn random_batch(seed: u64, d: usize, n_inst: usize, n_s: usize) -> InstanceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = (0..n_inst)
            .map(|_| {
                (0..n_s)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        batch_from(groups, DEFAULT_PHI_MIN)
    }

    #[test]
    fn temperature_closed_form() {
        let b = batch_from(vec![vec![vec![1.0, 0.0], vec![-1.0, 0.0]]], 0.0);
        let inst = &b.instances[0];
        assert_eq!(inst.center, vec![0.0, 0.0]);
        let want = 2.0 / (2.0 * 12f64.ln());
        assert!((inst.temperature - want).abs() < 1e-15);
        assert!((want - 0.4024).abs() < 1e-4);
    }

    #[test]
    fn identical_samples_clamp_to_phi_min() {
        let b = batch_from(vec![vec![vec![0.3, 0.3]; 4]], DEFAULT_PHI_MIN);
        assert_eq!(raw_temperature(&b.instances[0].features, &b.instances[0].center, 4), 0.0);
        assert_eq!(b.instances[0].temperature, DEFAULT_PHI_MIN);
    }

    #[test]
    fn build_batch_skips_tiny_masks_and_background() {
        let feat = FeatureMap::from_data(3, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let seg = SegmentationMap::new(3, 2, vec![0, 1, 2, 2, 2, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_batch(&feat, &seg, 4, DEFAULT_PHI_MIN, &mut rng).unwrap();
        assert_eq!(b.instances.len(), 1);
        let inst = &b.instances[0];
        assert_eq!(inst.label, 2);
        assert_eq!(inst.pixels.len(), 4);
        assert!(inst.pixels.iter().all(|p| [2, 3, 4].contains(p)));
        let mean = inst.features.iter().sum::<f64>() / 4.0;
        assert!((inst.center[0] - mean).abs() < 1e-15);
    }

    #[test]
    fn build_batch_samples_without_replacement_when_possible() {
        let feat = FeatureMap::from_data(4, 4, 1, (0..16).map(|v| v as f64).collect()).unwrap();
        let seg = SegmentationMap::new(4, 4, vec![1; 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = build_batch(&feat, &seg, 8, DEFAULT_PHI_MIN, &mut rng).unwrap();
        let mut px = b.instances[0].pixels.clone();
        px.sort();
        px.dedup();
        assert_eq!(px.len(), 8);
        let bad = SegmentationMap::new(2, 2, vec![1; 4]).unwrap();
        assert!(build_batch(&feat, &bad, 8, DEFAULT_PHI_MIN, &mut rng).is_err());
    }

    #[test]
    fn uniform_softmax_gives_log_two() {
        // two instances, same center and temperature
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = batch_from(vec![rows.clone(), rows], DEFAULT_PHI_MIN);
        let r = contrastive_loss(&b).unwrap();
        assert!((r.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_instance_is_zero() {
        let b = random_batch(3, 4, 1, 5);
        let r = contrastive_loss(&b).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grads.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_rejected() {
        let mut b = random_batch(3, 4, 2, 5);
        b.instances[1].features[2] = f64::NAN;
        assert!(matches!(contrastive_loss(&b), Err(Error::NonFinite(_))));
    }

    /// Loss with the sample features replaced, centers and temperatures frozen.
    fn loss_with(batch: &InstanceBatch, i: usize, k: usize, value: f64) -> f64 {
        let mut b = batch.clone();
        b.instances[i].features[k] = value;
        let centers: Vec<&[f64]> = batch.instances.iter().map(|x| x.center.as_slice()).collect();
        contrastive_against(&b, &centers).unwrap().loss
    }

    #[test]
    fn gradient_matches_central_differences() {
        let b = random_batch(7, 4, 3, 8);
        let r = contrastive_loss(&b).unwrap();
        let h = 1e-4;
        for (i, inst) in b.instances.iter().enumerate() {
            for k in 0..inst.features.len() {
                let x = inst.features[k];
                let fd = (loss_with(&b, i, k, x + h) - loss_with(&b, i, k, x - h)) / (2.0 * h);
                let an = r.grads[i][k];
                let rel = (fd - an).abs() / an.abs().max(1e-8);
                assert!(rel <= 1e-5 || (fd - an).abs() < 1e-10, "i={i} k={k} fd={fd} an={an}");
            }
        }
    }

    proptest! {
        #[test]
        fn loss_positive_and_label_permutation_invariant(seed in 0u64..500, n_inst in 2usize..5) {
            let b = random_batch(seed, 3, n_inst, 4);
            let r = contrastive_loss(&b).unwrap();
            prop_assert!(r.loss > 0.0);

            let mut perm = b.clone();
            perm.instances.reverse();
            for (k, inst) in perm.instances.iter_mut().enumerate() {
                inst.label = 100 - k as u32;
            }
            let rp = contrastive_loss(&perm).unwrap();
            prop_assert!((r.loss - rp.loss).abs() < 1e-12);
        }

        #[test]
        fn sample_gradient_is_bounded_residual(seed in 0u64..500) {
            let b = random_batch(seed, 3, 3, 4);
            let r = contrastive_loss(&b).unwrap();
            let total = (b.instances.len() * b.samples_per_instance) as f64;
            let bound = b.instances.iter()
                .map(|i| dot(&i.center, &i.center).sqrt() / i.temperature)
                .fold(0.0, f64::max);
            for g in &r.grads {
                for row in g.chunks_exact(b.dim) {
                    prop_assert!(dot(row, row).sqrt() * total <= 2.0 * bound + 1e-9);
                }
            }
            // summed over a whole batch the residuals stay within one bound
            let mut sum = vec![0.0; b.dim];
            for g in &r.grads {
                for row in g.chunks_exact(b.dim) {
                    for (s, v) in sum.iter_mut().zip(row) { *s += v; }
                }
            }
            prop_assert!(dot(&sum, &sum).sqrt() <= 2.0 * bound + 1e-9);
        }
    }
}
