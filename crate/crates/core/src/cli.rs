//! Command-line front end.
//!
//! Every subcommand reads and writes the crate's file formats; all
//! randomness flows from `--seed`, so reruns produce identical bytes.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{baseline_constant, baseline_expected_length, baseline_random, class_mean_lengths};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::io::annotations::{parse_annotations, write_annotations};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
use crate::io::feature_file::{load_features, write_feature_dir};
use crate::metrics::{
    app, frame_detections, frame_truths, framewise_mse, mse_by_progress, partial_tube_mse, video_ap,
    EvalReport, ScoredSequence, PARTIAL_WINDOWS,
};
use crate::net::{dump_hidden_states, predict_tube, ModelConfig, ModelParams, Variant};
use crate::refine::{trim_tube, TrimParams};
use crate::synth::{generate, SynthConfig};
use crate::train::{samples_from_dataset, train, tube_features, TrainConfig};
use crate::tube::{progress_targets, Dataset, ProgressSequence, Tube};
use crate::LossKind;

#[derive(Parser, Debug)]
#[command(name = "progress-tubes", version, about = "Action progress prediction on spatio-temporal tubes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset: annotations.json plus features/<video>.ptfm
    GenSynth(GenSynthArgs),
    /// Train a progress model on ground-truth tubes
    Train(TrainArgs),
    /// Attach predicted progress to every tube of one set
    Predict(PredictArgs),
    /// Trim detections using their attached progress
    Refine(RefineArgs),
    /// Evaluate predictions or detections
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Attach baseline progress (random, constant or expected-length)
    Baselines(BaselineArgs),
    /// Export the top recurrent layer's hidden state per frame as CSV
    DumpStates(DumpArgs),
    /// Convert an evaluation report to CSV files
    ExportPlots(ExportArgs),
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Framewise MSE of ground-truth tube progress, with a per-progress breakdown
    Mse(MseArgs),
    /// Average Progress Precision of detections over progress margins
    App(AppArgs),
    /// Video-AP of detection tubes over tube-IoU thresholds
    Vap(VapArgs),
    /// MSE on partially observed ground-truth tubes
    Partial(PartialArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// JSON SynthConfig; defaults are used when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub videos_per_class: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PoolingArgs {
    /// Region pooling grid height
    #[arg(long, default_value_t = 3)]
    pub pool_h: usize,
    /// Region pooling grid width
    #[arg(long, default_value_t = 3)]
    pub pool_w: usize,
    /// Pyramid levels of the context pooling
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub levels: Vec<usize>,
}

impl PoolingArgs {
    fn config(&self) -> Result<FeatureConfig> {
        if self.pool_h == 0 || self.pool_w == 0 || self.levels.is_empty() || self.levels.contains(&0) {
            return Err(Error::InvalidConfig("pooling sizes must be positive".into()));
        }
        Ok(FeatureConfig { pool_h: self.pool_h, pool_w: self.pool_w, levels: self.levels.clone() })
    }
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory of per-video feature files
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub pooling: PoolingArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Bo,
    L2,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Output loss trace CSV
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// JSON TrainConfig; flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON ModelConfig; the input width always follows the features
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub curriculum: bool,
    /// Use the memoryless variant
    #[arg(long = "static")]
    pub static_variant: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TubeSet {
    Detections,
    GroundTruth,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Random,
    Constant,
    ExpectedLength,
}

#[derive(Args, Debug)]
pub struct BaselineOpts {
    /// Constant prediction used by the constant baseline
    #[arg(long, default_value_t = 0.5)]
    pub value: f64,
    /// Annotations whose ground truth gives the class mean lengths
    /// (defaults to the input's own ground truth)
    #[arg(long)]
    pub train_annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Predict with a baseline instead of a checkpoint
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    pub baseline: Option<BaselineKind>,
    #[command(flatten)]
    pub baseline_opts: BaselineOpts,
    #[arg(long, value_enum, default_value = "detections")]
    pub set: TubeSet,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    #[command(flatten)]
    pub opts: BaselineOpts,
    #[arg(long, value_enum, default_value = "ground-truth")]
    pub set: TubeSet,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// Annotations whose detections carry progress
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub mu_s: f64,
    #[arg(long, default_value_t = 0.8)]
    pub mu_e: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportOut {
    /// JSON report path; a text table goes to stdout either way
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MseArgs {
    /// Annotations whose ground-truth tubes carry predicted progress
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Args, Debug)]
pub struct AppArgs {
    /// Annotations whose detections carry predicted progress
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5")]
    pub margins: Vec<f64>,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Args, Debug)]
pub struct VapArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3,0.4,0.5,0.6")]
    pub thresholds: Vec<f64>,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Args, Debug)]
pub struct PartialArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    pub baseline: Option<BaselineKind>,
    #[command(flatten)]
    pub baseline_opts: BaselineOpts,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "ground-truth")]
    pub set: TubeSet,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// JSON report written by `eval`
    #[arg(long)]
    pub report: PathBuf,
    /// Receives curve.csv and, for MSE reports, bins.csv
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}: line {} column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn tubes_mut(d: &mut Dataset, set: TubeSet) -> &mut Vec<Tube> {
    match set {
        TubeSet::Detections => &mut d.detections,
        TubeSet::GroundTruth => &mut d.ground_truth,
    }
}

fn class_names(d: &Dataset) -> BTreeMap<u32, String> {
    d.classes.iter().map(|c| (c.id, c.name.clone())).collect()
}

fn emit_report(report: &EvalReport, dataset: &Dataset, out: &ReportOut) -> Result<()> {
    print!("{}", report.to_table(&class_names(dataset)));
    if let Some(path) = &out.out {
        let mut s = serde_json::to_string_pretty(report).expect("finite report");
        s.push('\n');
        write_text(path, &s)?;
    }
    Ok(())
}

/// Builds a per-tube progress predictor for a baseline.
struct Baseline {
    kind: BaselineKind,
    value: f64,
    means: BTreeMap<u32, f64>,
    rng: RefCell<ChaCha8Rng>,
}

impl Baseline {
    fn new(kind: BaselineKind, opts: &BaselineOpts, dataset: &Dataset) -> Result<Self> {
        let means = match kind {
            BaselineKind::ExpectedLength => {
                let source = match &opts.train_annotations {
                    Some(p) => parse_annotations(p)?,
                    None => dataset.clone(),
                };
                class_mean_lengths(source.ground_truth.iter().map(|t| (t.class_id, t.len())))
            }
            _ => BTreeMap::new(),
        };
        Ok(Self { kind, value: opts.value, means, rng: RefCell::new(ChaCha8Rng::seed_from_u64(opts.seed)) })
    }

    fn predict(&self, class_id: u32, len: usize) -> Result<ProgressSequence> {
        match self.kind {
            BaselineKind::Random => Ok(baseline_random(len, &mut *self.rng.borrow_mut())),
            BaselineKind::Constant => baseline_constant(len, self.value),
            BaselineKind::ExpectedLength => baseline_expected_length(len, class_id, &self.means),
        }
    }
}

fn load_model(path: &Path, pooling: &FeatureConfig, dataset: &Dataset, features: &Features) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if let Some(channels) = channels_of(dataset, features) {
        let expected = pooling.input_dim(channels);
        if expected != params.config.input_dim {
            return Err(Error::DimensionMismatch { what: "checkpoint input width vs pooled features", expected: params.config.input_dim, actual: expected });
        }
    }
    Ok(params)
}

type Features = BTreeMap<String, Vec<crate::FeatureMap>>;

fn channels_of(dataset: &Dataset, features: &Features) -> Option<usize> {
    dataset.videos.iter().find_map(|v| features.get(&v.id)?.first().map(|m| m.channels))
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.videos_per_class {
        cfg.videos_per_class = n;
    }
    let data = generate(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_annotations(&data.dataset, &a.out.join("annotations.json"))?;
    write_feature_dir(&a.out.join("features"), &data.features)?;
    println!(
        "wrote {} videos, {} ground-truth tubes, {} detections to {}",
        data.dataset.videos.len(),
        data.dataset.ground_truth.len(),
        data.dataset.detections.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(l) = a.loss {
        cfg.loss = match l {
            LossArg::Bo => LossKind::Bo,
            LossArg::L2 => LossKind::L2,
        };
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.curriculum |= a.curriculum;
    let mut model: ModelConfig = match &a.model {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    };
    if a.static_variant {
        model.variant = Variant::Static;
    }

    let pooling = a.data.pooling.config()?;
    let dataset = parse_annotations(&a.data.annotations)?;
    let features = load_features(&a.data.features, &dataset)?;
    let channels = channels_of(&dataset, &features).ok_or(Error::EmptyDataset)?;
    model.input_dim = pooling.input_dim(channels);
    let samples = samples_from_dataset(&dataset, &features, &pooling)?;
    let outcome = train(&samples, &model, &cfg)?;
    save_checkpoint(&outcome.params, &a.out)?;
    if let Some(t) = &a.trace {
        write_text(t, &outcome.trace_csv())?;
    }
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    println!("trained on {} tubes, {} steps, final loss {last:.6}", samples.len(), outcome.trace.len());
    Ok(())
}

fn attach<F>(dataset: &mut Dataset, set: TubeSet, mut f: F) -> Result<()>
where
    F: FnMut(&Tube) -> Result<ProgressSequence>,
{
    let tubes = tubes_mut(dataset, set);
    for t in tubes.iter_mut() {
        let p = f(t)?;
        t.progress = None;
        *t = t.clone().with_progress(p)?;
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let mut dataset = parse_annotations(&a.data.annotations)?;
    match (&a.checkpoint, a.baseline) {
        (_, Some(kind)) => {
            let b = Baseline::new(kind, &a.baseline_opts, &dataset)?;
            attach(&mut dataset, a.set, |t| b.predict(t.class_id, t.len()))?;
        }
        (Some(ckpt), None) => {
            let pooling = a.data.pooling.config()?;
            let features = load_features(&a.data.features, &dataset)?;
            let params = load_model(ckpt, &pooling, &dataset, &features)?;
            attach(&mut dataset, a.set, |t| {
                let frames = features.get(&t.video_id).ok_or_else(|| Error::MissingFeatures(t.video_id.clone()))?;
                predict_tube(&params, &tube_features(t, frames, &pooling)?)
            })?;
        }
        (None, None) => return Err(Error::InvalidConfig("need --checkpoint or --baseline".into())),
    }
    write_annotations(&dataset, &a.out)
}

fn baselines_cmd(a: BaselineArgs) -> Result<()> {
    let mut dataset = parse_annotations(&a.annotations)?;
    let b = Baseline::new(a.kind, &a.opts, &dataset)?;
    attach(&mut dataset, a.set, |t| b.predict(t.class_id, t.len()))?;
    write_annotations(&dataset, &a.out)
}

fn refine_cmd(a: RefineArgs) -> Result<()> {
    let params = TrimParams { delta: a.delta, mu_s: a.mu_s, mu_e: a.mu_e };
    let mut dataset = parse_annotations(&a.annotations)?;
    let mut removed = 0;
    for (i, t) in dataset.detections.iter_mut().enumerate() {
        let p = t
            .progress
            .clone()
            .ok_or_else(|| Error::MissingPredictions(format!("detections[{i}] has no progress; run predict first")))?;
        let trimmed = trim_tube(t, &p, &params)?;
        removed += t.len() - trimmed.tube.len();
        *t = trimmed.tube;
    }
    write_annotations(&dataset, &a.out)?;
    println!("trimmed {removed} frames from {} detections", dataset.detections.len());
    Ok(())
}

fn mse_cmd(a: MseArgs) -> Result<()> {
    let dataset = parse_annotations(&a.annotations)?;
    let targets: Vec<ProgressSequence> = dataset.ground_truth.iter().map(progress_targets).collect();
    let items = dataset
        .ground_truth
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(i, (t, target))| {
            let p = t
                .progress
                .as_ref()
                .ok_or_else(|| Error::MissingPredictions(format!("ground_truth[{i}] has no progress")))?;
            Ok(ScoredSequence { class_id: t.class_id, predictions: p, targets: target })
        })
        .collect::<Result<Vec<_>>>()?;
    let r = framewise_mse(&items)?;
    let mut report = EvalReport { metric: "mse".into(), sections: vec![], progress_bins: vec![], matches: vec![] };
    report.push_mse("mse", None, r);
    report.progress_bins = mse_by_progress(&items, a.bins);
    emit_report(&report, &dataset, &a.report)
}

fn app_cmd(a: AppArgs) -> Result<()> {
    let dataset = parse_annotations(&a.annotations)?;
    let dets = frame_detections(&dataset.detections);
    let truths = frame_truths(&dataset.ground_truth);
    let mut report = EvalReport { metric: "app".into(), sections: vec![], progress_bins: vec![], matches: vec![] };
    for m in &a.margins {
        report.push_ap(format!("m={m}"), *m, app(&dets, &truths, a.iou, *m)?);
    }
    report.matches.clear();
    emit_report(&report, &dataset, &a.report)
}

fn vap_cmd(a: VapArgs) -> Result<()> {
    let dataset = parse_annotations(&a.annotations)?;
    let mut report = EvalReport { metric: "video_ap".into(), sections: vec![], progress_bins: vec![], matches: vec![] };
    for (tau, r) in video_ap(&dataset.detections, &dataset.ground_truth, &a.thresholds)? {
        report.push_ap(format!("tau={tau}"), tau, r);
    }
    report.matches.clear();
    emit_report(&report, &dataset, &a.report)
}

fn partial_cmd(a: PartialArgs) -> Result<()> {
    let dataset = parse_annotations(&a.data.annotations)?;
    let pooling = a.data.pooling.config()?;
    let features = load_features(&a.data.features, &dataset)?;
    let samples = samples_from_dataset(&dataset, &features, &pooling)?;
    let model = match &a.checkpoint {
        Some(p) if a.baseline.is_none() => Some(load_model(p, &pooling, &dataset, &features)?),
        _ => None,
    };
    let baseline = a.baseline.map(|k| Baseline::new(k, &a.baseline_opts, &dataset)).transpose()?;
    let mut report = EvalReport { metric: "partial_mse".into(), sections: vec![], progress_bins: vec![], matches: vec![] };
    for (s, e) in PARTIAL_WINDOWS {
        let r = partial_tube_mse(
            |t| match (&model, &baseline) {
                (Some(m), _) => Ok(predict_tube(m, &t.features)?.into_inner()),
                (None, Some(b)) => Ok(b.predict(t.class_id, t.len())?.into_inner()),
                (None, None) => Err(Error::InvalidConfig("need --checkpoint or --baseline".into())),
            },
            &samples,
            s,
            e,
        )?;
        report.push_mse(format!("{s}-{e}"), Some(s), r);
    }
    emit_report(&report, &dataset, &a.report)
}

fn dump_cmd(a: DumpArgs) -> Result<()> {
    let mut dataset = parse_annotations(&a.data.annotations)?;
    let pooling = a.data.pooling.config()?;
    let features = load_features(&a.data.features, &dataset)?;
    let params = load_model(&a.checkpoint, &pooling, &dataset, &features)?;
    let dim = params.config.top_dim();
    let mut out = String::from("tube,video_id,class_id,frame");
    for k in 0..dim {
        let _ = write!(out, ",h{k}");
    }
    out.push('\n');
    let tubes = tubes_mut(&mut dataset, a.set).clone();
    for (i, t) in tubes.iter().enumerate() {
        let frames = features.get(&t.video_id).ok_or_else(|| Error::MissingFeatures(t.video_id.clone()))?;
        let states = dump_hidden_states(&params, &tube_features(t, frames, &pooling)?)?;
        for (f, h) in states.iter().enumerate() {
            let _ = write!(out, "{i},{},{},{}", t.video_id, t.class_id, t.start_frame as usize + f);
            for v in h {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    write_text(&a.out, &out)
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let report: EvalReport = read_json(&a.report)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    write_text(&a.out_dir.join("curve.csv"), &report.curve_csv())?;
    if !report.progress_bins.is_empty() {
        write_text(&a.out_dir.join("bins.csv"), &report.bins_csv())?;
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Eval(EvalCommand::Mse(a)) => mse_cmd(a),
        Command::Eval(EvalCommand::App(a)) => app_cmd(a),
        Command::Eval(EvalCommand::Vap(a)) => vap_cmd(a),
        Command::Eval(EvalCommand::Partial(a)) => partial_cmd(a),
        Command::Baselines(a) => baselines_cmd(a),
        Command::DumpStates(a) => dump_cmd(a),
        Command::ExportPlots(a) => export_cmd(a),
    }
}

/// Parses `std::env::args`, runs, and reports failures as one line:
/// `error: <kind>: <message>`.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
