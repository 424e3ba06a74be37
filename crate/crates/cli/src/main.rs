use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use poserefine::dataset::{Corpus, RawSample, Refiner};
use poserefine::eval::{evaluate, render_overlay, EvalReport};
use poserefine::patching::{limb_boxes, PatchBox};
use poserefine::store::{self, Checkpoint};
use poserefine::synth::{generate_corpus, Split, SynthConfig};
use poserefine::updater::{
    train_with_progress, EpochRecord, RegressorConfig, TrainingConfig, DESK_BASE_LR, FULL_SCALE_BASE_LR,
};
use poserefine::{build_volume, Modality, PatchConfig, SegPalette, SkeletonTopology};

const THREADS_ENV: &str = "POSEREFINE_THREADS";

#[derive(Parser)]
#[command(name = "poserefine", version, about = "Patch-based refinement of 3D human pose estimates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (images, poses, initial estimates, manifest).
    Gen(GenArgs),
    /// Train a residual regressor on a corpus's train/val splits.
    Train(TrainArgs),
    /// Write refined poses for every sample of a split.
    Refine(RefineArgs),
    /// Evaluate a checkpoint on a split and write a JSON report.
    Eval(EvalArgs),
    /// Dump the per-limb patches and crop boxes of one sample.
    Inspect(InspectArgs),
    /// Render tables and skeleton overlays from an evaluation report.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Std-dev of the per-limb rotation noise of initial estimates, degrees.
    #[arg(long, default_value_t = 8.0)]
    orient_noise_deg: f64,
    /// Relative std-dev of limb-length noise of initial estimates.
    #[arg(long, default_value_t = 0.03)]
    length_noise_frac: f64,
    /// Std-dev of root translation noise of initial estimates, millimetres.
    #[arg(long, default_value_t = 30.0)]
    root_noise_mm: f64,
    /// Fraction of each limb's deviation from its rest direction that the
    /// initial estimate loses (bias towards common poses), in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    prior_pull: f64,
    /// Fraction of samples in the validation split.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Fraction of samples in the test split.
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    /// Three stride-2 convs, flattened 4x4 feature map, FC(64).
    Spatial,
    /// Two stride-2 convs, global average pool, FC(64).
    Gap,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by `gen`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint; the loss history goes to `<stem>.history.json` beside it.
    #[arg(long)]
    out_ckpt: PathBuf,
    /// JSON training config; any field may be omitted. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Full-scale preset: 256 px patches and base learning rate 1e-5.
    #[arg(long)]
    full_scale: bool,
    /// Training epochs [default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 32].
    #[arg(long)]
    batch: Option<usize>,
    /// Base learning rate [default: 1e-3; 1e-5 with --full-scale].
    #[arg(long)]
    lr: Option<f64>,
    /// Plateau patience in epochs before the single learning-rate decay [default: 2].
    #[arg(long)]
    patience: Option<usize>,
    /// Learning-rate divisor applied on plateau [default: 10].
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Shuffle and initialization seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Visit training samples in corpus order.
    #[arg(long)]
    no_shuffle: bool,
    /// Channels the regressor sees: fused, rgb-only or seg-only [default: fused].
    #[arg(long)]
    modality: Option<Modality>,
    /// Patch resolution in pixels [default: 32; 256 with --full-scale].
    #[arg(long)]
    patch_res: Option<usize>,
    /// Minimum tight-box side before scaling, pixels.
    #[arg(long, default_value_t = 28.0)]
    min_side: f64,
    /// Crop enlargement factor.
    #[arg(long, default_value_t = 2.3)]
    scale: f64,
    /// Regressor architecture.
    #[arg(long, value_enum, default_value_t = Arch::Spatial)]
    arch: Arch,
}

#[derive(Args)]
struct RefineArgs {
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Split to refine: train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output directory; one `<id>.json` pose file per sample.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output JSON report.
    #[arg(long)]
    out_report: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Sample directory (containing gt.json, init.json, kp2d.json, rgb.png, seg.png).
    #[arg(long)]
    sample: PathBuf,
    /// Output directory for patch PNGs and boxes.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Topology file [default: the corpus's topology.json two levels up, else the bundled 17-joint skeleton].
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Patch resolution in pixels.
    #[arg(long, default_value_t = 32)]
    patch_res: usize,
    /// Minimum tight-box side before scaling, pixels.
    #[arg(long, default_value_t = 28.0)]
    min_side: f64,
    /// Crop enlargement factor.
    #[arg(long, default_value_t = 2.3)]
    scale: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report written by `eval`.
    #[arg(long)]
    eval: PathBuf,
    /// Output directory for table.txt, summary.json and overlays/.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of overlays to render, rarest samples first [default: all].
    #[arg(long)]
    overlays: Option<usize>,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| UsageError(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<poserefine::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Report(a) => report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(UsageError("--n must be >= 1".into()).into());
    }
    let mut cfg = SynthConfig::default();
    cfg.perturb.orient_noise_deg = a.orient_noise_deg;
    cfg.perturb.length_noise_frac = a.length_noise_frac;
    cfg.perturb.root_noise_mm = a.root_noise_mm;
    cfg.perturb.prior_pull = a.prior_pull;
    cfg.val_frac = a.val_frac;
    cfg.test_frac = a.test_frac;
    cfg.perturb
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    let topo = SkeletonTopology::h36m17();
    let m = generate_corpus(&a.out, a.n, a.seed, &cfg, &topo, &SegPalette::default16())
        .with_context(|| format!("generating corpus in {}", a.out.display()))?;
    let count = |s| m.samples.iter().filter(|e| e.split == s).count();
    eprintln!(
        "wrote {} samples (train {}, val {}, test {}) to {}",
        m.samples.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct HistoryFile<'a> {
    version: u32,
    best_epoch: usize,
    training: &'a TrainingConfig,
    epochs: &'a [EpochRecord],
}

fn history_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    ckpt.with_file_name(format!("{stem}.history.json"))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut tc = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| poserefine::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<TrainingConfig>(&text).map_err(|e| poserefine::Error::Schema {
                path: p.clone(),
                msg: e.to_string(),
            })?
        }
        None => TrainingConfig::desk_scale(),
    };
    if a.full_scale {
        tc.base_lr = FULL_SCALE_BASE_LR;
    } else if a.config.is_none() {
        tc.base_lr = DESK_BASE_LR;
    }
    if let Some(v) = a.epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.batch {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.base_lr = v;
    }
    if let Some(v) = a.patience {
        tc.plateau_patience = v;
    }
    if let Some(v) = a.lr_decay {
        tc.lr_decay_factor = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if a.no_shuffle {
        tc.shuffle = false;
    }
    if let Some(m) = a.modality {
        tc.modality = m;
    }
    tc.validate().map_err(|e| UsageError(e.to_string()))?;
    let patch = PatchConfig {
        min_side: a.min_side,
        scale: a.scale,
        out_res: a.patch_res.unwrap_or(if a.full_scale { 256 } else { 32 }),
    };
    patch.validate().map_err(|e| UsageError(e.to_string()))?;

    let corpus = Corpus::open(&a.corpus).with_context(|| format!("opening corpus {}", a.corpus.display()))?;
    let limbs = corpus.topology.limb_count();
    let reg = match a.arch {
        Arch::Spatial => RegressorConfig::spatial_for(limbs, patch.out_res, tc.seed),
        Arch::Gap => RegressorConfig::default_for(limbs, patch.out_res, tc.seed),
    };
    reg.validate().map_err(|e| UsageError(e.to_string()))?;
    let samples = corpus.prepare_splits(&[Split::Train, Split::Val], &patch)?;
    let (train_set, val_set): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.split == Split::Train);
    eprintln!(
        "training on {} samples, validating on {} ({} parameters)",
        train_set.len(),
        val_set.len(),
        reg.param_count()?
    );
    let out = train_with_progress(&train_set, &val_set, &reg, &tc, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.1e}  train {:.6}  val {:.6}",
            r.epoch, r.lr, r.train_loss, r.val_loss
        )
    })?;
    let ckpt = Checkpoint {
        regressor: reg,
        patch,
        modality: tc.modality,
        params: out.params,
    };
    store::save_checkpoint(&a.out_ckpt, &ckpt)?;
    let hist = HistoryFile {
        version: 1,
        best_epoch: out.best_epoch,
        training: &tc,
        epochs: &out.history,
    };
    store::write_json(&history_path(&a.out_ckpt), &hist)?;
    eprintln!("best epoch {}; wrote {}", out.best_epoch, a.out_ckpt.display());
    Ok(())
}

fn load_refiner(path: &Path) -> anyhow::Result<Refiner> {
    let ckpt = store::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Refiner::new(ckpt)?)
}

fn split_samples(
    corpus: &Corpus,
    refiner: &Refiner,
    split: Split,
) -> anyhow::Result<Vec<poserefine::dataset::PreparedSample>> {
    let samples = corpus.prepare_splits(&[split], refiner.patch())?;
    if samples.is_empty() {
        return Err(poserefine::Error::Empty("requested split").into());
    }
    Ok(samples)
}

fn refine(a: RefineArgs) -> anyhow::Result<()> {
    let corpus = Corpus::open(&a.corpus).with_context(|| format!("opening corpus {}", a.corpus.display()))?;
    let refiner = load_refiner(&a.ckpt)?;
    let samples = split_samples(&corpus, &refiner, a.split)?;
    for s in &samples {
        let refined = refiner.refine(s, &corpus.stats, &corpus.topology)?;
        store::save_pose(&a.out.join(format!("{}.json", s.id)), &refined)?;
    }
    eprintln!("refined {} poses into {}", samples.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let corpus = Corpus::open(&a.corpus).with_context(|| format!("opening corpus {}", a.corpus.display()))?;
    let refiner = load_refiner(&a.ckpt)?;
    let samples = split_samples(&corpus, &refiner, a.split)?;
    let report = evaluate(
        &samples,
        &a.split.to_string(),
        &corpus.stats,
        &corpus.topology,
        &corpus.manifest.config.camera,
        |s| refiner.predict(&s.example.volume),
    )?;
    report.save(&a.out_report)?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct BoxesFile {
    version: u32,
    patch: PatchConfig,
    limbs: Vec<LimbBox>,
}

#[derive(Serialize)]
struct LimbBox {
    limb: usize,
    parent: String,
    child: String,
    #[serde(flatten)]
    bx: PatchBox,
}

fn inspect(a: InspectArgs) -> anyhow::Result<()> {
    let patch = PatchConfig {
        min_side: a.min_side,
        scale: a.scale,
        out_res: a.patch_res,
    };
    patch.validate().map_err(|e| UsageError(e.to_string()))?;
    let corpus_topo = a.sample.join("../../topology.json");
    let topo = match &a.topology {
        Some(p) => store::load_topology(p)?,
        None if corpus_topo.is_file() => store::load_topology(&corpus_topo)?,
        None => SkeletonTopology::h36m17(),
    };
    let raw = RawSample {
        gt: store::load_pose_for(&a.sample.join("gt.json"), &topo)?,
        initial: store::load_pose_for(&a.sample.join("init.json"), &topo)?,
        keypoints: store::load_keypoints(&a.sample.join("kp2d.json"))?,
        rgb: store::load_png(&a.sample.join("rgb.png"))?,
        seg: store::load_png(&a.sample.join("seg.png"))?,
    };
    let boxes = limb_boxes(&raw.keypoints, &topo, &patch)?;
    let volume = build_volume(&raw.rgb, &raw.seg, &raw.keypoints, &topo, &patch)?;
    let names = topo.joint_names();
    let mut limbs = Vec::new();
    for (k, (l, bx)) in topo.limbs().iter().zip(&boxes).enumerate() {
        for (seg, tag) in [(false, "rgb"), (true, "seg")] {
            let img = volume.limb_patch(k, seg).quantized();
            store::save_png(&a.out_dir.join(format!("limb{k:02}_{tag}.png")), &img)?;
        }
        limbs.push(LimbBox {
            limb: k,
            parent: names[l.parent].clone(),
            child: names[l.child].clone(),
            bx: *bx,
        });
    }
    store::write_json(
        &a.out_dir.join("boxes.json"),
        &BoxesFile {
            version: 1,
            patch,
            limbs,
        },
    )?;
    eprintln!("wrote {} patches to {}", 2 * topo.limb_count(), a.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    version: u32,
    alignment: &'a str,
    split: &'a str,
    n: usize,
    mpjpe_initial: f64,
    mpjpe_refined: f64,
    relative_improvement: f64,
    rarity_buckets: &'a [poserefine::eval::RarityBucket],
    per_joint_initial: &'a [f64],
    per_joint_refined: &'a [f64],
    per_limb_orient_err_deg_initial: &'a [f64],
    per_limb_orient_err_deg_refined: &'a [f64],
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let r = EvalReport::load(&a.eval).with_context(|| format!("loading report {}", a.eval.display()))?;
    if r.joint_names.is_empty() {
        return Err(anyhow!("report {} lists no joints", a.eval.display()));
    }
    let topo = SkeletonTopology::h36m17();
    if topo.joint_names() != r.joint_names.as_slice() {
        return Err(poserefine::Error::Schema {
            path: a.eval.clone(),
            msg: "overlays support the bundled 17-joint skeleton only".into(),
        }
        .into());
    }
    let table = r.to_table();
    store::write_atomic(&a.out_dir.join("table.txt"), table.as_bytes())?;
    store::write_json(
        &a.out_dir.join("summary.json"),
        &Summary {
            version: 1,
            alignment: &r.alignment,
            split: &r.split,
            n: r.n,
            mpjpe_initial: r.mpjpe_initial,
            mpjpe_refined: r.mpjpe_refined,
            relative_improvement: r.overall().relative_improvement(),
            rarity_buckets: &r.rarity_buckets,
            per_joint_initial: &r.per_joint_initial,
            per_joint_refined: &r.per_joint_refined,
            per_limb_orient_err_deg_initial: &r.per_limb_orient_err_deg_initial,
            per_limb_orient_err_deg_refined: &r.per_limb_orient_err_deg_refined,
        },
    )?;
    let mut order: Vec<usize> = (0..r.samples.len()).collect();
    order.sort_by(|&x, &y| r.samples[y].rarity.total_cmp(&r.samples[x].rarity).then(x.cmp(&y)));
    let take = a.overlays.unwrap_or(order.len()).min(order.len());
    for &i in &order[..take] {
        let rec = &r.samples[i];
        let img = render_overlay(rec, &r.camera, &topo)?;
        store::save_png(&a.out_dir.join("overlays").join(format!("{}.png", rec.id)), &img)?;
    }
    print!("{table}");
    eprintln!("wrote table, summary and {take} overlays to {}", a.out_dir.display());
    Ok(())
}
