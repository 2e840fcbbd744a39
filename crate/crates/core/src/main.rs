use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dynseg::harness::{
    ablate, ablation_csv, evaluate, fit_pca, sweep, sweep_csv, write_manifest, ExperimentConfig, SweepGrid,
};
use dynseg::inference::{edit, segment, ClusterParams, ClusterResult, EditOp};
use dynseg::mapio;
use dynseg::raster::{labels_from_render, render, DEFAULT_TAU_FG};
use dynseg::synth::{Dataset, SceneSpec};
use dynseg::trainer::{initialize_features, write_loss_csv, SamplingMode, Trainer};
use dynseg::{Error, Result, Scene};

const THREADS_ENV: &str = "DYNSEG_THREADS";

#[derive(Parser)]
#[command(name = "dynseg", version, about = "4D instance segmentation of Gaussian feature fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Optimize primitive features against a dataset
    Train(TrainArgs),
    /// Cluster trained features into instances
    Segment(SegmentArgs),
    /// Score a segmentation against ground truth
    Eval(EvalArgs),
    /// Remove, duplicate, or extract one instance
    Edit(EditArgs),
    /// Write PCA feature images and label images
    Render(RenderArgs),
    /// Grid over clustering parameters
    Sweep(SweepArgs),
    /// Run the ablation arms on one dataset
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Preset name (`default`, `small`) or a scene-spec JSON file
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write raw semantic maps
    #[arg(long)]
    semantic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Experiment config JSON; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sampling: Option<SamplingMode>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    no_tracking: bool,
    #[arg(long)]
    no_dino: bool,
    /// Zero all velocities and widen temporal scales over the clip
    #[arg(long)]
    no_motion: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_frame: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct ClusterFlags {
    #[arg(long = "R")]
    subset_rate: Option<f64>,
    #[arg(long = "M")]
    min_samples: Option<usize>,
    #[arg(long = "E")]
    epsilon: Option<f64>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    tau_sim: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ClusterFlags {
    fn apply(&self, mut p: ClusterParams) -> ClusterParams {
        if let Some(v) = self.subset_rate {
            p.subset_rate = v;
        }
        if let Some(v) = self.min_samples {
            p.min_samples = v;
        }
        if let Some(v) = self.epsilon {
            p.epsilon = v;
        }
        if let Some(v) = self.min_cluster_size {
            p.min_cluster_size = v;
        }
        if let Some(v) = self.tau_sim {
            p.tau_sim = v;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
        p
    }
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    cluster: ClusterFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU_FG)]
    tau_fg: f64,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    label: i32,
    /// `remove`, `duplicate`, or `extract`
    #[arg(long)]
    op: String,
    /// Offset for `duplicate`, as `x,y,z`
    #[arg(long, default_value = "0,0,0")]
    offset: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Also write predicted label images from these clusters
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU_FG)]
    tau_fg: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long = "R", value_delimiter = ',', default_values_t = [0.02, 0.05, 0.1])]
    subset_rate: Vec<f64>,
    #[arg(long = "M", value_delimiter = ',', default_values_t = [5, 10, 20])]
    min_samples: Vec<usize>,
    #[arg(long = "E", value_delimiter = ',', default_values_t = [0.0, 0.05, 0.1])]
    epsilon: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn load_spec(name: &str) -> Result<SceneSpec> {
    let path = Path::new(name);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        });
    }
    SceneSpec::preset(name)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut spec = load_spec(&a.spec)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = Dataset::generate(&spec)?;
    ds.save(&a.out, a.semantic)?;
    println!("{}", ds.checksum()?);
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.scene = ds.spec.clone();
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
        cfg.scene = ds.spec.clone();
    }
    if let Some(m) = a.sampling {
        cfg.train.sampling = m;
    }
    if let Some(v) = a.lambda1 {
        cfg.train.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        cfg.train.lambda2 = v;
    }
    if a.no_tracking {
        cfg.train.lambda1 = 0.0;
    }
    if a.no_dino {
        cfg.train.lambda2 = 0.0;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.steps_per_frame {
        cfg.train.steps_per_frame = v;
    }
    cfg.train.checkpoint_every = a.checkpoint_every;
    cfg.no_motion |= a.no_motion;
    cfg.validate()?;

    create_dir(&a.out)?;
    let mut scene = dynseg::harness::arm_scene(&cfg, &ds);
    initialize_features(&mut scene, cfg.feature_init_std, cfg.init_seed)?;
    let trainer = Trainer::new(scene, &ds, cfg.train.clone())?;
    let out = trainer.run(Some(&a.out.join("checkpoints")))?;
    out.scene.save(&a.out.join("scene.json"))?;
    write_loss_csv(&a.out.join("loss.csv"), &out.log)?;
    cfg.save(&a.out.join("config.json"))?;
    write_manifest(&a.out, &cfg, &ds.checksum()?)
}

fn run_segment(a: SegmentArgs) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let params = a.cluster.apply(load_config(a.config.as_deref())?.cluster);
    let result = segment(&scene, &params)?;
    result.save(&a.out)?;
    println!("{} clusters, {} ejected", result.cluster_count(), result.ejected);
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let scene = Scene::load(&a.scene)?;
    let result = ClusterResult::load(&a.clusters)?;
    let report = evaluate(&scene, &result, &ds, a.tau_fg)?;
    write(&a.out, &serde_json::to_string_pretty(&report)?)?;
    println!("{}\n{}", dynseg::eval::MetricReport::CSV_HEADER, report.csv_row());
    Ok(())
}

fn parse_offset(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("bad offset {s:?}")))?;
    v.try_into()
        .map_err(|_| Error::InvalidConfig(format!("offset {s:?} needs three components")))
}

fn run_edit(a: EditArgs) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let result = ClusterResult::load(&a.clusters)?;
    let op = match a.op.as_str() {
        "remove" => EditOp::Remove,
        "extract" => EditOp::Extract,
        "duplicate" => EditOp::Duplicate(parse_offset(&a.offset)?),
        other => return Err(Error::InvalidConfig(format!("unknown edit op {other:?}"))),
    };
    edit(&scene, &result, a.label, op)?.save(&a.out)
}

fn run_render(a: RenderArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let scene = Scene::load(&a.scene)?;
    let result = a.clusters.as_deref().map(ClusterResult::load).transpose()?;
    create_dir(&a.out)?;
    for (v, cam) in ds.cameras.iter().enumerate() {
        let renders = ds
            .times
            .iter()
            .map(|&t| render(&scene, cam, t))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = renders.iter().map(|o| (&o.features, o.alpha.as_slice())).collect();
        let basis = fit_pca(&pairs, a.tau_fg)?;
        for (f, out) in renders.iter().enumerate() {
            let rgb = basis.to_rgb(&out.features, &out.alpha);
            mapio::write_ppm(&a.out.join(format!("pca_v{v:02}_f{f:03}.ppm")), cam.width, cam.height, &rgb)?;
            if let Some(r) = &result {
                let seg = labels_from_render(out, &r.render_labels(), a.tau_fg);
                mapio::write_label_ppm(&a.out.join(format!("labels_v{v:02}_f{f:03}.ppm")), &seg)?;
            }
        }
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let scene = Scene::load(&a.scene)?;
    let cfg = load_config(a.config.as_deref())?;
    let grid = SweepGrid {
        subset_rate: a.subset_rate,
        min_samples: a.min_samples,
        epsilon: a.epsilon,
    };
    let rows = sweep(&scene, &ds, &cfg.cluster, &grid, cfg.tau_fg)?;
    write(&a.out, &sweep_csv(&rows))
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            scene: load_spec(&a.spec)?,
            ..Default::default()
        },
    };
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let rows = ablate(&cfg)?;
    write(&a.out, &ablation_csv(&rows))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_manifest(dir, &cfg, &rows[0].dataset_checksum)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Format { .. } | Error::Json(_) => 4,
        Error::InvalidConfig(_) => 5,
        Error::Shape(_) | Error::FeatureDim { .. } => 6,
        Error::NonFinite(_) | Error::Diverged { .. } => 7,
        Error::NoClusters | Error::TooFewPoints { .. } => 8,
        Error::UnknownLabel(_) => 9,
        Error::MissingLabel(_) | Error::InvalidPrimitive { .. } | Error::InvalidCamera(_) => 10,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // the global pool can only be configured once; a failure leaves the default
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Segment(a) => run_segment(a),
        Command::Eval(a) => run_eval(a),
        Command::Edit(a) => run_edit(a),
        Command::Render(a) => run_render(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
