//! Feature-field optimization over a temporally ordered sample stream.
//!
//! Each step renders one `(view, frame)` key, applies the contrastive loss to
//! its mask, the semantic loss during the first part of training, and the
//! tracking loss whenever the key advances exactly one frame past the
//! previous key. Only features are optimized; geometry stays fixed.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contrastive::{build_batch, contrastive_loss, DEFAULT_PHI_MIN};
use crate::error::{Error, Result};
use crate::model::Scene;
use crate::optim::{exponential_lr, optimizer_step, AdamState};
use crate::raster::{backprop_pixels, render};
use crate::regularizers::{
    default_r_max, find_disappearing, match_pairs, project_semantic, semantic_loss, tracking_loss,
    SemanticProjection, DEFAULT_TAU_VIS,
};
use crate::synth::FrameSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Streaming,
    Random,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "streaming" => Ok(SamplingMode::Streaming),
            "random" => Ok(SamplingMode::Random),
            other => Err(Error::InvalidConfig(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_s: usize,
    pub epochs: usize,
    /// Round-robin passes over the views of a frame before moving on.
    pub steps_per_frame: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub dino_cutoff_fraction: f64,
    pub sampling: SamplingMode,
    pub phi_min: f64,
    pub tau_vis: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_s: 64,
            epochs: 1,
            steps_per_frame: 4,
            lr_start: 2.5e-3,
            lr_end: 2e-6,
            lambda1: 100.0,
            lambda2: 500.0,
            dino_cutoff_fraction: 0.3,
            sampling: SamplingMode::Streaming,
            phi_min: DEFAULT_PHI_MIN,
            tau_vis: DEFAULT_TAU_VIS,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return bad(format!("need lr_start > lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("negative loss weights {} / {}", self.lambda1, self.lambda2));
        }
        if !(0.0..=1.0).contains(&self.dino_cutoff_fraction) {
            return bad(format!("dino cutoff {} outside [0, 1]", self.dino_cutoff_fraction));
        }
        if self.n_s < 2 || self.steps_per_frame == 0 {
            return bad("need N_s >= 2 and at least one step per frame".into());
        }
        if !(self.phi_min > 0.0 && self.tau_vis > 0.0 && self.tau_vis < 1.0) {
            return bad("phi_min must be positive and tau_vis in (0, 1)".into());
        }
        Ok(())
    }

    /// Total optimizer steps for a source with `views × frames` keys.
    pub fn iterations(&self, views: usize, frames: usize) -> usize {
        self.epochs * frames * views * self.steps_per_frame
    }
}

/// Zero-based `(view, frame)` keys. Streaming visits frames in order, each
/// with `steps_per_frame` round-robin passes over the views; random mode
/// shuffles the same multiset.
pub fn build_stream(
    views: usize,
    frames: usize,
    mode: SamplingMode,
    epochs: usize,
    steps_per_frame: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut keys = Vec::with_capacity(epochs * frames * views * steps_per_frame);
    for _ in 0..epochs {
        for f in 0..frames {
            for _ in 0..steps_per_frame {
                keys.extend((0..views).map(|v| (v, f)));
            }
        }
    }
    if mode == SamplingMode::Random {
        keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    keys
}

/// Replaces all features with i.i.d. `N(0, std²)` draws.
pub fn initialize_features(scene: &mut Scene, std: f64, seed: u64) -> Result<()> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &mut scene.primitives {
        for f in &mut g.feature {
            *f = normal.sample(&mut rng);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub view: usize,
    pub frame: usize,
    pub lr: f64,
    pub cc: f64,
    pub align: f64,
    pub dino: f64,
    pub total: f64,
}

/// Per-component primitive-space gradients of one step, unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub cc: Vec<f64>,
    pub align: Vec<f64>,
    pub dino: Vec<f64>,
    pub total: Vec<f64>,
    pub losses: [f64; 3],
}

pub struct Trainer<'a, S: FrameSource> {
    scene: Scene,
    source: &'a S,
    cfg: TrainConfig,
    stream: Vec<(usize, usize)>,
    projection: SemanticProjection,
    state: AdamState,
    rng: ChaCha8Rng,
    r_max: f64,
    step: usize,
    prev_frame: Option<usize>,
    log: Vec<StepLog>,
}

impl<'a, S: FrameSource> Trainer<'a, S> {
    pub fn new(scene: Scene, source: &'a S, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        if source.views() == 0 || source.frames() == 0 {
            return Err(Error::InvalidConfig("frame source is empty".into()));
        }
        let stream = build_stream(
            source.views(),
            source.frames(),
            cfg.sampling,
            cfg.epochs,
            cfg.steps_per_frame,
            cfg.seed,
        );
        let raw_dim = source.semantic(0, 0).map_or(scene.feature_dim, |m| m.dim);
        let projection = SemanticProjection::random_orthonormal(scene.feature_dim, raw_dim, cfg.seed ^ 0x70726f6a)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            state: AdamState::new(scene.len() * scene.feature_dim),
            r_max: default_r_max(&scene),
            scene,
            source,
            cfg,
            stream,
            projection,
            rng,
            step: 0,
            prev_frame: None,
            log: Vec::new(),
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn total_steps(&self) -> usize {
        self.stream.len()
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn stream(&self) -> &[(usize, usize)] {
        &self.stream
    }

    fn dino_active(&self) -> bool {
        self.cfg.lambda2 > 0.0 && (self.step as f64) < self.cfg.dino_cutoff_fraction * self.stream.len() as f64
    }

    /// Gradients the next step would apply, without applying them. Consumes
    /// the same random draws as [`Trainer::step`].
    pub fn gradients(&mut self) -> Result<StepGradients> {
        let (view, frame) = self.stream[self.step];
        let n = self.scene.len() * self.scene.feature_dim;
        let cam = self.source.camera(view);
        let t = self.source.time(frame);
        let mask = self.source.mask(view, frame);
        let out = render(&self.scene, cam, t)?;

        let batch = build_batch(&out.features, mask, self.cfg.n_s, self.cfg.phi_min, &mut self.rng)?;
        let cc = contrastive_loss(&batch)?;
        let g_cc = backprop_pixels(&out, cc.pixel_grads(&batch))?;

        let (mut dino_loss, mut g_dino) = (0.0, vec![0.0; n]);
        if self.dino_active() {
            if let Some(raw) = self.source.semantic(view, frame) {
                let sem = project_semantic(&raw, &self.projection)?;
                let (b, lg) = semantic_loss(&out.features, mask, &sem, self.cfg.n_s, self.cfg.phi_min, &mut self.rng)?;
                dino_loss = lg.loss;
                g_dino = backprop_pixels(&out, lg.pixel_grads(&b))?;
            }
        }

        let (mut align_loss, mut g_align) = (0.0, vec![0.0; n]);
        if self.cfg.lambda1 > 0.0 && frame > 0 && self.prev_frame == Some(frame - 1) {
            let t_prev = self.source.time(frame - 1);
            let gone = find_disappearing(&self.scene, t_prev, t, self.cfg.tau_vis);
            let pairs = match_pairs(&self.scene, &gone, t_prev, t, self.cfg.tau_vis, self.r_max);
            (align_loss, g_align) = tracking_loss(&self.scene, &pairs);
        }

        let (l1, l2) = (self.cfg.lambda1, self.cfg.lambda2);
        let total = (0..n).map(|k| g_cc[k] + l1 * g_align[k] + l2 * g_dino[k]).collect();
        Ok(StepGradients {
            cc: g_cc,
            align: g_align,
            dino: g_dino,
            total,
            losses: [cc.loss, align_loss, dino_loss],
        })
    }

    /// One optimizer step; `None` once the stream is exhausted.
    pub fn step(&mut self) -> Result<Option<StepLog>> {
        if self.step >= self.stream.len() {
            return Ok(None);
        }
        let (view, frame) = self.stream[self.step];
        let g = self.gradients()?;
        let [cc, align, dino] = g.losses;
        let total = cc + self.cfg.lambda1 * align + self.cfg.lambda2 * dino;
        if !total.is_finite() || g.total.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: self.step,
                view,
                frame,
                cc,
                align,
                dino,
            });
        }
        let lr = exponential_lr(self.cfg.lr_start, self.cfg.lr_end, self.step, self.stream.len());
        let mut params = self.scene.features_flat();
        optimizer_step(&mut params, &g.total, &mut self.state, lr);
        self.scene.set_features_flat(&params)?;
        let entry = StepLog {
            step: self.step,
            view,
            frame,
            lr,
            cc,
            align,
            dino,
            total,
        };
        self.log.push(entry);
        self.prev_frame = Some(frame);
        self.step += 1;
        Ok(Some(entry))
    }

    /// Runs to the end of the stream, checkpointing into `checkpoint_dir`
    /// every `checkpoint_every` steps when both are set.
    pub fn run(mut self, checkpoint_dir: Option<&Path>) -> Result<TrainOutput> {
        while self.step()?.is_some() {
            let every = self.cfg.checkpoint_every;
            if let (Some(dir), true) = (checkpoint_dir, every > 0) {
                if self.step % every == 0 || self.step == self.stream.len() {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(TrainOutput {
            scene: self.scene,
            log: self.log,
            state: self.state,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.scene.save(&dir.join(format!("scene_{:06}.json", self.step)))?;
        let path = dir.join(format!("optimizer_{:06}.json", self.step));
        std::fs::write(&path, serde_json::to_string(&self.state)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub scene: Scene,
    pub log: Vec<StepLog>,
    pub state: AdamState,
}

pub fn train<S: FrameSource>(scene: Scene, source: &S, cfg: &TrainConfig) -> Result<TrainOutput> {
    Trainer::new(scene, source, cfg.clone())?.run(None)
}

pub const LOSS_CSV_HEADER: &str = "step,lr,L_CC,L_align,L_DINO,L_total";

pub fn write_loss_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from(LOSS_CSV_HEADER);
    body.push('\n');
    for e in log {
        body.push_str(&format!("{},{:e},{:e},{:e},{:e},{:e}\n", e.step, e.lr, e.cc, e.align, e.dino, e.total));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
