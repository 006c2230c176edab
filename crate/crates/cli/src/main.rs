//! Command-line front end: dataset generation, training (mixture and
//! bipartite-baseline objectives), evaluation with optional NMS/WTA
//! post-processing, parameter sweeps, and finite-difference gradient
//! checking.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O error. Given identical flags and `--seed`, every command writes
//! byte-identical output files; `--threads` only caps parallelism.

mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use drmm_core::baselines::{train_bipartite, BipartiteConfig, Variant};
use drmm_core::data::{generate, GenConfig, GroundTruth, Scene};
use drmm_core::eval::{
    average_precision, coco_ap, coco_ar, dup_rate, ece, histograms, stage_diagnostics,
    Histogram, ReliabilityBin, StageDiagnostics, DEFAULT_ECE_BINS, DEFAULT_ECE_IOU,
};
use drmm_core::inference::{extract, nms, wta, Prediction};
use drmm_core::losses::StopGradConfig;
use drmm_core::model::{
    forward, loss_and_grad, train, ModelConfig, ModelError, Optimizer, TrainConfig, TrainError,
    DEFAULT_O_ANCHOR,
    Weights,
};

#[derive(Debug)]
enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<drmm_core::eval::EvalError> for CliError {
    fn from(e: drmm_core::eval::EvalError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "drmm",
    about = "Desk-scale detection-as-mixture-density laboratory",
    version
)]
struct Cli {
    /// Seed for any randomized step (generation, init, shuffling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Upper bound on worker threads. All computation is sequential, so
    /// this never changes results.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a detection head.
    Train(TrainArgs),
    /// Evaluate trained weights on a dataset.
    Eval(EvalArgs),
    /// Train/evaluate across a grid of one parameter; emit a CSV.
    Sweep(SweepArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    max_objects: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args, Clone)]
struct TrainKnobs {
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, default_value_t = 20)]
    proposals: usize,
    #[arg(long, default_value_t = 1.0)]
    topk_ratio: f64,
    #[arg(long, default_value_t = 1)]
    copies: usize,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Hidden layer widths of the per-proposal MLP.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize])]
    hidden: Vec<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// drmm | nll-only | bipartite:<eq1-separate-losses |
    /// matched-nll | nll-plus-mcm-bipartite>
    #[arg(long, default_value = "drmm")]
    mode: String,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// Warm-start from previously saved weights instead of a fresh
    /// initialization. The saved model shape must match the knobs.
    #[arg(long)]
    init_weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// IoU threshold for NMS, or `none` (1.0 behaves identically).
    #[arg(long, default_value = "none")]
    nms_thresh: String,
    /// Add suppressed scores onto their suppressor (winner-take-all).
    #[arg(long)]
    wta: bool,
    /// Keep this many top-scored predictions per scene.
    #[arg(long, default_value_t = 100)]
    top_n: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// Optional predictions dump (JSON lines).
    #[arg(long)]
    preds: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// beta | topk-ratio | nms-thresh | copies
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Training split.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation split; defaults to the training split.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[command(flatten)]
    knobs: TrainKnobs,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Number of randomly chosen weights to probe.
    #[arg(long, default_value_t = 50)]
    params: usize,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads < 1 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(cli.seed, &args),
        Cmd::Train(args) => cmd_train(cli.seed, &args),
        Cmd::Eval(args) => cmd_eval(&args),
        Cmd::Sweep(args) => cmd_sweep(cli.seed, &args),
        Cmd::Gradcheck(args) => cmd_gradcheck(cli.seed, &args),
    }
}

// -------------------------------------------------------------- gen-data

fn cmd_gen_data(seed: u64, args: &GenDataArgs) -> Result<(), CliError> {
    let cfg = GenConfig {
        height: args.height,
        width: args.width,
        num_classes: args.classes,
        max_objects: args.max_objects,
        ..GenConfig::default()
    };
    let scenes =
        generate(seed, args.scenes, &cfg).map_err(|e| CliError::Config(e.to_string()))?;
    io::save_scenes(&args.out, &scenes, args.classes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

// ----------------------------------------------------------------- train

fn model_config(seed: u64, knobs: &TrainKnobs, num_classes: usize) -> ModelConfig {
    ModelConfig {
        num_stages: knobs.stages,
        num_proposals: knobs.proposals,
        num_classes,
        hidden_sizes: knobs.hidden.clone(),
        out_size: 4,
        topk_ratio: knobs.topk_ratio,
        seed,
    }
}

fn train_config(seed: u64, knobs: &TrainKnobs, beta: f64) -> TrainConfig {
    TrainConfig {
        beta,
        steps: knobs.steps,
        batch_size: knobs.batch_size,
        optimizer: Optimizer::Adam {
            lr: knobs.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        stopgrad: StopGradConfig::default(),
        o_anchor: DEFAULT_O_ANCHOR,
        shuffle_seed: seed,
    }
}

enum Mode {
    Mixture { beta: f64 },
    Bipartite(Variant),
}

fn parse_mode(mode: &str, beta: f64) -> Result<Mode, CliError> {
    if mode == "drmm" {
        Ok(Mode::Mixture { beta })
    } else if mode == "nll-only" {
        Ok(Mode::Mixture { beta: 0.0 })
    } else if let Some(variant) = mode.strip_prefix("bipartite:") {
        Ok(Mode::Bipartite(
            variant.parse::<Variant>().map_err(CliError::Config)?,
        ))
    } else {
        Err(CliError::Config(format!("unknown mode `{mode}`")))
    }
}

fn run_training(
    seed: u64,
    scenes: &[Scene],
    num_classes: usize,
    knobs: &TrainKnobs,
    mode: &Mode,
    init: Option<Weights>,
) -> Result<(ModelConfig, Weights), CliError> {
    let cfg = model_config(seed, knobs, num_classes);
    let outcome = match mode {
        Mode::Mixture { beta } => {
            let tcfg = train_config(seed, knobs, *beta);
            train(scenes, &cfg, &tcfg, init)?
        }
        Mode::Bipartite(variant) => {
            let tcfg = train_config(seed, knobs, knobs.beta);
            let bcfg = BipartiteConfig {
                variant: *variant,
                copies: knobs.copies,
                ..BipartiteConfig::default()
            };
            let (outcome, skipped) = train_bipartite(scenes, &cfg, &tcfg, &bcfg, init)?;
            if skipped > 0 {
                eprintln!(
                    "warning: skipped {skipped} scene visits (replicated ground truths exceed proposals)"
                );
            }
            outcome
        }
    };
    if let Some(last) = outcome.history.last() {
        eprintln!("final batch loss: {last}");
    }
    Ok((cfg, outcome.weights))
}

fn cmd_train(seed: u64, args: &TrainArgs) -> Result<(), CliError> {
    let dataset = io::load_scenes(&args.data)?;
    let mode = parse_mode(&args.mode, args.knobs.beta)?;
    let init = match &args.init_weights {
        Some(path) => {
            let (init_cfg, w) = io::load_weights(path)?;
            let cfg = model_config(seed, &args.knobs, dataset.num_classes);
            if init_cfg != cfg {
                return Err(CliError::Config(format!(
                    "initial weights from {} were trained with a different model configuration",
                    path.display()
                )));
            }
            Some(w)
        }
        None => None,
    };
    let (cfg, weights) = run_training(seed, &dataset.scenes, dataset.num_classes, &args.knobs, &mode, init)?;
    io::save_weights(&args.out, &cfg, &weights)?;
    eprintln!("wrote weights to {}", args.out.display());
    Ok(())
}

// ------------------------------------------------------------------ eval

#[derive(Clone, Copy)]
enum Post {
    None,
    Nms(f64),
    Wta(f64),
}

fn parse_post(nms_thresh: &str, use_wta: bool) -> Result<Post, CliError> {
    let thresh = if nms_thresh == "none" {
        None
    } else {
        let t: f64 = nms_thresh
            .parse()
            .map_err(|_| CliError::Config(format!("bad --nms-thresh `{nms_thresh}`")))?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::Config("--nms-thresh must be in (0, 1]".into()));
        }
        Some(t)
    };
    Ok(match (thresh, use_wta) {
        (None, false) => Post::None,
        (None, true) => Post::Wta(1.0),
        (Some(t), false) => Post::Nms(t),
        (Some(t), true) => Post::Wta(t),
    })
}

struct SceneOutputs {
    ids: Vec<u64>,
    preds: Vec<Vec<Prediction>>,
    gts: Vec<Vec<GroundTruth>>,
    final_mixtures: Vec<drmm_core::MixtureParams>,
}

fn run_model(
    scenes: &[Scene],
    cfg: &ModelConfig,
    weights: &Weights,
    top_n: usize,
    post: Post,
) -> Result<SceneOutputs, CliError> {
    let mut out = SceneOutputs {
        ids: Vec::with_capacity(scenes.len()),
        preds: Vec::with_capacity(scenes.len()),
        gts: Vec::with_capacity(scenes.len()),
        final_mixtures: Vec::with_capacity(scenes.len()),
    };
    for scene in scenes {
        let states = forward(scene, weights, cfg)?;
        let last = states.last().expect("num_stages >= 1");
        let raw = extract(last, top_n);
        let processed = match post {
            Post::None => raw,
            Post::Nms(t) => nms(&raw, t),
            Post::Wta(t) => wta(&raw, t),
        };
        out.ids.push(scene.id);
        out.preds.push(processed);
        out.gts.push(scene.gts.clone());
        out.final_mixtures.push(last.mixture.clone());
    }
    Ok(out)
}

#[derive(Serialize)]
struct Report {
    ap: f64,
    ap50: f64,
    ap75: f64,
    ar: f64,
    ece: f64,
    dup_rate: f64,
    reliability_bins: Vec<ReliabilityBinJson>,
    per_stage: Vec<StageJson>,
    scenes: usize,
    predictions: usize,
}

#[derive(Serialize)]
struct ReliabilityBinJson {
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
    mean_conf: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct StageJson {
    stage: usize,
    mean_nll: f64,
    mean_exp_neg_mcm: f64,
}

struct Metrics {
    report: Report,
    bins: Vec<ReliabilityBin>,
    hist_p: Histogram,
    hist_o: Histogram,
    hist_po: Histogram,
    diags: Vec<StageDiagnostics>,
}

fn compute_metrics(
    outputs: &SceneOutputs,
    scenes: &[Scene],
    cfg: &ModelConfig,
    weights: &Weights,
) -> Result<Metrics, CliError> {
    let ap = coco_ap(&outputs.preds, &outputs.gts)?;
    let ap50 = average_precision(&outputs.preds, &outputs.gts, 0.5)?;
    let ap75 = average_precision(&outputs.preds, &outputs.gts, 0.75)?;
    let ar = coco_ar(&outputs.preds, &outputs.gts)?;
    let (ece_value, bins) = ece(&outputs.preds, &outputs.gts, DEFAULT_ECE_BINS, DEFAULT_ECE_IOU)?;
    let dup = dup_rate(&outputs.preds);
    let (hist_p, hist_o, hist_po) = histograms(&outputs.final_mixtures);
    let diags = stage_diagnostics(scenes, weights, cfg)?;
    let report = Report {
        ap,
        ap50,
        ap75,
        ar,
        ece: ece_value,
        dup_rate: dup,
        reliability_bins: bins
            .iter()
            .map(|b| ReliabilityBinJson {
                bin_lo: b.bin_lo,
                bin_hi: b.bin_hi,
                count: b.count,
                mean_conf: b.mean_conf,
                accuracy: b.accuracy,
            })
            .collect(),
        per_stage: diags
            .iter()
            .enumerate()
            .map(|(i, d)| StageJson {
                stage: i + 1,
                mean_nll: d.mean_nll,
                mean_exp_neg_mcm: d.mean_exp_neg_mcm,
            })
            .collect(),
        scenes: scenes.len(),
        predictions: outputs.preds.iter().map(|p| p.len()).sum(),
    };
    Ok(Metrics {
        report,
        bins,
        hist_p,
        hist_o,
        hist_po,
        diags,
    })
}

fn write_csvs(dir: &Path, m: &Metrics) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(e.to_string()))?;
    let r = &m.report;
    io::write_csv(
        &dir.join("metrics.csv"),
        &["metric", "value"],
        &[
            vec!["ap".into(), io::cell(r.ap)],
            vec!["ap50".into(), io::cell(r.ap50)],
            vec!["ap75".into(), io::cell(r.ap75)],
            vec!["ar".into(), io::cell(r.ar)],
            vec!["ece".into(), io::cell(r.ece)],
            vec!["dup_rate".into(), io::cell(r.dup_rate)],
        ],
    )?;
    io::write_csv(
        &dir.join("reliability.csv"),
        &["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"],
        &m.bins
            .iter()
            .map(|b| {
                vec![
                    io::cell(b.bin_lo),
                    io::cell(b.bin_hi),
                    b.count.to_string(),
                    io::cell(b.mean_conf),
                    io::cell(b.accuracy),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    for (name, hist) in [
        ("hist_p.csv", &m.hist_p),
        ("hist_o.csv", &m.hist_o),
        ("hist_po.csv", &m.hist_po),
    ] {
        let n = hist.counts.len() as f64;
        io::write_csv(
            &dir.join(name),
            &["bin_lo", "bin_hi", "count"],
            &hist
                .counts
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    vec![
                        io::cell(i as f64 / n),
                        io::cell((i + 1) as f64 / n),
                        c.to_string(),
                    ]
                })
                .collect::<Vec<_>>(),
        )?;
    }
    io::write_csv(
        &dir.join("per_stage.csv"),
        &["stage", "mean_nll", "mean_exp_neg_mcm"],
        &m.diags
            .iter()
            .enumerate()
            .map(|(i, d)| {
                vec![
                    (i + 1).to_string(),
                    io::cell(d.mean_nll),
                    io::cell(d.mean_exp_neg_mcm),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    if args.top_n < 1 {
        return Err(CliError::Config("--top-n must be >= 1".into()));
    }
    let dataset = io::load_scenes(&args.data)?;
    let (cfg, weights) = io::load_weights(&args.weights)?;
    if cfg.num_classes != dataset.num_classes {
        return Err(CliError::Config(format!(
            "weights trained for {} classes but dataset has {}",
            cfg.num_classes, dataset.num_classes
        )));
    }
    let post = parse_post(&args.nms_thresh, args.wta)?;
    let outputs = run_model(&dataset.scenes, &cfg, &weights, args.top_n, post)?;
    let metrics = compute_metrics(&outputs, &dataset.scenes, &cfg, &weights)?;

    println!(
        "ap {:.4}  ap50 {:.4}  ap75 {:.4}  ar {:.4}  ece {:.4}  dup_rate {:.4}",
        metrics.report.ap,
        metrics.report.ap50,
        metrics.report.ap75,
        metrics.report.ar,
        metrics.report.ece,
        metrics.report.dup_rate
    );
    for (i, d) in metrics.diags.iter().enumerate() {
        println!(
            "stage {}: mean_nll {:.4}  exp(-mcm) {:.4}",
            i + 1,
            d.mean_nll,
            d.mean_exp_neg_mcm
        );
    }

    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&metrics.report)
            .map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| CliError::Io(e.to_string()))?;
    }
    if let Some(dir) = &args.csv_dir {
        write_csvs(dir, &metrics)?;
    }
    if let Some(path) = &args.preds {
        io::save_predictions(path, &outputs.ids, &outputs.preds)?;
    }
    Ok(())
}

// ----------------------------------------------------------------- sweep

fn cmd_sweep(seed: u64, args: &SweepArgs) -> Result<(), CliError> {
    let train_set = io::load_scenes(&args.data)?;
    let eval_set = match &args.eval_data {
        Some(p) => io::load_scenes(p)?,
        None => io::load_scenes(&args.data)?,
    };
    if train_set.num_classes != eval_set.num_classes {
        return Err(CliError::Config(
            "train and eval datasets disagree on class count".into(),
        ));
    }

    // for nms-thresh the model is trained once and re-evaluated per value
    let mut cached: Option<(ModelConfig, Weights)> = None;
    let mut rows = Vec::with_capacity(args.values.len());
    for raw in &args.values {
        let (cfg, weights, post) = match args.param.as_str() {
            "beta" => {
                let beta: f64 = parse_value(raw)?;
                let mut knobs = args.knobs.clone();
                knobs.beta = beta;
                let (cfg, w) = run_training(
                    seed,
                    &train_set.scenes,
                    train_set.num_classes,
                    &knobs,
                    &Mode::Mixture { beta },
                    None,
                )?;
                (cfg, w, Post::None)
            }
            "topk-ratio" => {
                let ratio: f64 = parse_value(raw)?;
                let mut knobs = args.knobs.clone();
                knobs.topk_ratio = ratio;
                let (cfg, w) = run_training(
                    seed,
                    &train_set.scenes,
                    train_set.num_classes,
                    &knobs,
                    &Mode::Mixture { beta: knobs.beta },
                    None,
                )?;
                (cfg, w, Post::None)
            }
            "nms-thresh" => {
                let t: f64 = parse_value(raw)?;
                if !(t > 0.0 && t <= 1.0) {
                    return Err(CliError::Config("nms-thresh values must be in (0, 1]".into()));
                }
                if cached.is_none() {
                    cached = Some(run_training(
                        seed,
                        &train_set.scenes,
                        train_set.num_classes,
                        &args.knobs,
                        &Mode::Mixture {
                            beta: args.knobs.beta,
                        },
                        None,
                    )?);
                }
                let (cfg, w) = cached.clone().unwrap();
                (cfg, w, Post::Nms(t))
            }
            "copies" => {
                let copies: usize = raw
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad copies value `{raw}`")))?;
                if copies < 1 {
                    return Err(CliError::Config("copies must be >= 1".into()));
                }
                let mut knobs = args.knobs.clone();
                knobs.copies = copies;
                let (cfg, w) = run_training(
                    seed,
                    &train_set.scenes,
                    train_set.num_classes,
                    &knobs,
                    &Mode::Bipartite(Variant::Eq1SeparateLosses),
                    None,
                )?;
                (cfg, w, Post::None)
            }
            other => {
                return Err(CliError::Config(format!("unknown sweep param `{other}`")));
            }
        };

        // `ap` uses the sweep's own post-processing; `ap_nms50` is always
        // reported for comparison
        let outputs = run_model(&eval_set.scenes, &cfg, &weights, 100, post)?;
        let metrics = compute_metrics(&outputs, &eval_set.scenes, &cfg, &weights)?;
        let nms50 = run_model(&eval_set.scenes, &cfg, &weights, 100, Post::Nms(0.5))?;
        let ap_nms50 = coco_ap(&nms50.preds, &nms50.gts)?;
        let final_ratio = metrics
            .diags
            .last()
            .map_or(0.0, |d| d.mean_exp_neg_mcm);
        rows.push(vec![
            args.param.clone(),
            raw.clone(),
            io::cell(metrics.report.ap),
            io::cell(ap_nms50),
            io::cell(metrics.report.ece),
            io::cell(metrics.report.dup_rate),
            io::cell(final_ratio),
        ]);
        eprintln!("{} = {raw}: ap {:.4}", args.param, metrics.report.ap);
    }
    io::write_csv(
        &args.csv,
        &[
            "param",
            "value",
            "ap",
            "ap_nms50",
            "ece",
            "dup_rate",
            "exp_neg_mcm_final",
        ],
        &rows,
    )?;
    Ok(())
}

fn parse_value(raw: &str) -> Result<f64, CliError> {
    raw.parse()
        .map_err(|_| CliError::Config(format!("bad sweep value `{raw}`")))
}

// ------------------------------------------------------------- gradcheck

fn cmd_gradcheck(seed: u64, args: &GradcheckArgs) -> Result<(), CliError> {
    use rand::{Rng, SeedableRng};
    let dataset = io::load_scenes(&args.data)?;
    let (cfg, weights) = io::load_weights(&args.weights)?;
    let scene = dataset
        .scenes
        .iter()
        .find(|s| !s.gts.is_empty())
        .ok_or_else(|| CliError::Config("no scene with ground truths".into()))?;

    let sg = StopGradConfig::none();
    let (_, tape) = loss_and_grad(scene, &weights, &cfg, args.beta, DEFAULT_O_ANCHOR, &sg)?;
    let analytic = tape.flatten();
    let flat = weights.flatten();
    let n = flat.len();
    let probes = args.params.min(n);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < probes {
        picked.insert(rng.gen_range(0..n));
    }

    let h = 1e-5;
    let mut probe = weights.clone();
    let mut max_err = 0.0f64;
    for &i in &picked {
        let mut plus = flat.clone();
        plus[i] += h;
        probe.assign_flat(&plus);
        let (rp, _) = loss_and_grad(scene, &probe, &cfg, args.beta, DEFAULT_O_ANCHOR, &sg)?;
        let mut minus = flat.clone();
        minus[i] -= h;
        probe.assign_flat(&minus);
        let (rm, _) = loss_and_grad(scene, &probe, &cfg, args.beta, DEFAULT_O_ANCHOR, &sg)?;
        let fd = (rp.total - rm.total) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / (1.0 + fd.abs());
        if err > max_err {
            max_err = err;
        }
    }
    println!("checked {probes} weights: max relative error {max_err:.3e}");
    if max_err >= args.tol {
        return Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {max_err:.3e} >= tol {:.3e}",
            args.tol
        )));
    }
    Ok(())
}
