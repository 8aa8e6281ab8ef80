//! Command-line front end. Every subcommand maps onto one library operation;
//! randomness comes only from `--seed`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::annotator::{annotate, AnnotationConfig, AugmentedExample};
use crate::calibration::{self, DEFAULT_BINS};
use crate::confidence::{score_prediction, ConfidenceMethod, ScoreRecord};
use crate::dataset::{
    load_jsonl, load_predictions, read_jsonl_lines, save_jsonl, save_predictions, split,
    write_jsonl_lines,
};
use crate::error::{Error, Result};
use crate::gateway::{GatewayConfig, GatewayServer};
use crate::mock_backend::{MockServer, Script};
use crate::pipeline::{self, LatencyMode, PredictConfig};
use crate::rejection::{self, build_rejection_set};
use crate::routing::{
    curve_from_items, join_items, join_items_against_remote, latency_account, parity_routing_rate,
    quantile_thresholds, random_baseline, DEFAULT_STEPS,
};
use crate::synth::{self, SynthConfig};
use crate::tinylm::{
    add_confidence_tokens, load_checkpoint, save_checkpoint, train_sequences, Optimizer,
    TrainConfig, TrainSequence,
};
use crate::types::{Dataset, PredictionRecord, RngSeed, SplitTag};

const SCHEMAS: &str = "\
File formats (one JSON object per line unless noted):
  dataset     {\"id\", \"prompt\", \"choices\": [{\"letter\", \"text\"}] | null, \"ground_truth\": letter | text | \"<REJECT>\", \"subject\" | null}
  predictions {\"query_id\", \"model_id\", \"answer\", \"token_probs\", \"p_un\", \"p_cn\", \"latency_s\", \"token_count\"}
  scores      {\"query_id\", \"value\", \"method\"}
  augmented   {\"query_id\", \"prompt\", \"completion\", \"loss_weights\", \"tag\"}
  model       JSON checkpoint written by `train`
  gateway     JSON {\"threshold\", \"local\", \"remote\", \"listen_address\", \"degraded_mode\"}
  script      JSON {\"responses\", \"default_response\", \"failure_plan\", \"artificial_delay_ms\"}";

#[derive(Debug, Parser)]
#[command(name = "confroute", version, about = "Confidence-token routing toolkit", after_help = SCHEMAS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset and optionally split it.
    Ingest(IngestArgs),
    /// Build the confidence-token training set from base-model predictions.
    Annotate(AnnotateArgs),
    /// Train a base model on a dataset, or fine-tune on an augmented set.
    Train(TrainArgs),
    /// Greedy predictions with confidence-token probabilities.
    Predict(PredictArgs),
    /// Confidence scores for a prediction log.
    Score(ScoreArgs),
    /// Routing tradeoff summary (JSON) with random baseline and parity rate.
    EvalRoute(RouteArgs),
    /// Remove the correct option from part of a dataset.
    RejectionSet(RejectionSetArgs),
    /// Rejection ROC of a confidence method on a rejection set.
    EvalReject(EvalRejectArgs),
    /// ECE, Brier score and cross-entropy.
    Calibrate(CalibrateArgs),
    /// Routing tradeoff curve as CSV.
    Curve(RouteArgs),
    /// Run the routing gateway.
    Serve(ServeArgs),
    /// Run a scripted backend.
    MockServe(MockServeArgs),
    /// Generate the synthetic residue task.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "train")]
    pub split_tag: SplitTag,
    /// Normalized copy of the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train/val/test fractions, e.g. `0.8,0.1,0.1`. Requires --out-dir.
    #[arg(long, value_parser = parse_fractions)]
    pub fractions: Option<(f64, f64, f64)>,
    #[arg(long, requires = "fractions")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Supervised data for a base model.
    #[arg(long, conflicts_with = "aug", required_unless_present = "aug")]
    pub data: Option<PathBuf>,
    /// Augmented examples for confidence-token fine-tuning. Requires --init.
    #[arg(long, requires = "init")]
    pub aug: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Extra datasets whose tokens the fresh model's vocabulary must cover.
    #[arg(long)]
    pub vocab_data: Vec<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long)]
    pub grad_check_every: Option<usize>,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "tiny")]
    pub model_id: String,
    #[arg(long, default_value_t = 8)]
    pub max_new_tokens: usize,
    /// Report `seconds x tokens` instead of wall-clock latency, for byte-identical logs.
    #[arg(long)]
    pub per_token_latency: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, default_value = "self-ref")]
    pub method: ConfidenceMethod,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub local: PathBuf,
    #[arg(long)]
    pub remote: PathBuf,
    /// Scores file; without it, scores come from the local log via --method.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value = "self-ref")]
    pub method: ConfidenceMethod,
    /// Ground truth. Without it, agreement with the remote answer counts as correct.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RejectionSetArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = rejection::DEFAULT_REJECT_FRACTION)]
    pub fraction: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalRejectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, default_value = "self-ref")]
    pub method: ConfidenceMethod,
    /// ROC as CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, default_value = "self-ref")]
    pub method: ConfidenceMethod,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    /// Script file.
    #[arg(long, conflicts_with = "preds", required_unless_present = "preds")]
    pub script: Option<PathBuf>,
    /// Replay a prediction log, keyed by prompt hash. Requires --data.
    #[arg(long, requires = "data")]
    pub preds: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub delay_ms: u64,
    #[arg(long, default_value = "127.0.0.1:8081")]
    pub listen: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub max_value: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub moduli: Option<Vec<u32>>,
    /// Options per question are drawn uniformly from `min-choices..=4`.
    #[arg(long, default_value_t = 4)]
    pub min_choices: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_fractions(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!(
            "expected three comma-separated fractions, got {}",
            parts.len()
        )),
    }
}

/// Parse `argv` (including the program name), run, and return the exit code:
/// 0 on success, 2 on usage errors, 1 on everything else.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Annotate(a) => annotate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::EvalRoute(a) => route_cmd(a, false),
        Command::Curve(a) => route_cmd(a, true),
        Command::RejectionSet(a) => {
            let d = load_jsonl(&a.data, SplitTag::Test)?;
            save_jsonl(
                &build_rejection_set(&d, a.fraction, RngSeed(a.seed))?,
                &a.out,
            )
        }
        Command::EvalReject(a) => eval_reject(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Serve(a) => serve(a),
        Command::MockServe(a) => mock_serve(a),
        Command::Synth(a) => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                n: a.n,
                max_value: a.max_value.unwrap_or(defaults.max_value),
                moduli: a.moduli.unwrap_or(defaults.moduli),
                min_choices: a.min_choices,
                seed: RngSeed(a.seed),
                ..defaults
            };
            save_jsonl(&synth::generate(&cfg)?, &a.out)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let d = load_jsonl(&a.input, a.split_tag)?;
    if let Some(out) = &a.out {
        save_jsonl(&d, out)?;
    }
    if let Some(f) = &a.fractions {
        let dir = a
            .out_dir
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--fractions needs --out-dir".into()))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (train, val, test) = split(&d, *f, RngSeed(a.seed))?;
        for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
            save_jsonl(part, dir.join(format!("{name}.jsonl")))?;
        }
        eprintln!(
            "{} records: {} train, {} val, {} test",
            d.len(),
            train.len(),
            val.len(),
            test.len()
        );
    } else {
        eprintln!("{} records", d.len());
    }
    Ok(())
}

fn annotate_cmd(a: AnnotateArgs) -> Result<()> {
    let train = load_jsonl(&a.train, SplitTag::Train)?;
    let preds = load_predictions(&a.preds)?;
    let aug = annotate(
        &train,
        &preds,
        &AnnotationConfig::new(a.alpha, RngSeed(a.seed))?,
    )?;
    write_jsonl_lines(&aug, &a.out)
}

fn load_augmented(path: &Path) -> Result<Vec<AugmentedExample>> {
    let examples: Vec<AugmentedExample> = read_jsonl_lines(path)?;
    for (i, e) in examples.iter().enumerate() {
        e.validate().map_err(|message| Error::Schema {
            line: i + 1,
            message,
        })?;
    }
    Ok(examples)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let optimizer = match a.optimizer.as_str() {
        "adam" => Optimizer::Adam,
        "sgd" => Optimizer::Sgd,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?}"
            )))
        }
    };
    let config = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: RngSeed(a.seed),
        grad_check_every: a.grad_check_every,
        optimizer,
    };
    let (model, seqs) = if let Some(aug_path) = &a.aug {
        let init = load_checkpoint(a.init.as_ref().expect("clap enforces --init"))?;
        let model = if init.vocab.has_confidence_tokens() {
            init
        } else {
            add_confidence_tokens(&init)?
        };
        let seqs = load_augmented(aug_path)?
            .iter()
            .map(|e| TrainSequence::from_example(&model, e))
            .collect::<Result<Vec<_>>>()?;
        (model, seqs)
    } else {
        let data = load_jsonl(
            a.data.as_ref().expect("clap enforces --data"),
            SplitTag::Train,
        )?;
        let model = match &a.init {
            Some(p) => load_checkpoint(p)?,
            None => {
                let extra = a
                    .vocab_data
                    .iter()
                    .map(|p| load_jsonl(p, SplitTag::Train))
                    .collect::<Result<Vec<Dataset>>>()?;
                pipeline::init_model(std::iter::once(&data).chain(&extra), a.dim, RngSeed(a.seed))?
            }
        };
        let seqs = pipeline::supervised_sequences(&model, &data)?;
        (model, seqs)
    };
    let trained = train_sequences(&model, &seqs, &config, |s| {
        eprintln!("epoch {} mean loss {:.6}", s.epoch + 1, s.mean_loss);
    })?;
    save_checkpoint(&trained, &a.out)
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let data = load_jsonl(&a.data, SplitTag::Test)?;
    let latency = match a.per_token_latency {
        Some(s) if s.is_finite() && s >= 0.0 => LatencyMode::PerToken(s),
        Some(s) => return Err(Error::InvalidArgument(format!("bad per-token latency {s}"))),
        None => LatencyMode::Measured,
    };
    let cfg = PredictConfig {
        model_id: a.model_id,
        max_new_tokens: a.max_new_tokens,
        latency,
    };
    save_predictions(&pipeline::predict(&model, &data, &cfg)?, &a.out)
}

fn scores_for(preds: &[PredictionRecord], method: ConfidenceMethod) -> Result<Vec<ScoreRecord>> {
    preds
        .iter()
        .map(|p| {
            Ok(ScoreRecord {
                query_id: p.query_id.clone(),
                value: score_prediction(p, method)?.value,
                method,
            })
        })
        .collect()
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let preds = load_predictions(&a.preds)?;
    write_jsonl_lines(&scores_for(&preds, a.method)?, &a.out)
}

#[derive(serde::Serialize)]
struct RouteSummary {
    steps: u32,
    local_accuracy: f64,
    remote_accuracy: f64,
    parity_routing_rate: Option<f64>,
    points: Vec<RoutePointSummary>,
}

#[derive(serde::Serialize)]
struct RoutePointSummary {
    threshold: f64,
    routing_rate: f64,
    accuracy: f64,
    random_accuracy: f64,
    mean_latency_s: f64,
    speedup_vs_remote: f64,
}

fn route_cmd(a: RouteArgs, csv: bool) -> Result<()> {
    let local = load_predictions(&a.local)?;
    let remote = load_predictions(&a.remote)?;
    let scores = match &a.scores {
        Some(p) => read_jsonl_lines(p)?,
        None => scores_for(&local, a.method)?,
    };
    let items = match &a.data {
        Some(p) => join_items(&local, &remote, &scores, &load_jsonl(p, SplitTag::Test)?)?,
        None => join_items_against_remote(&local, &remote, &scores)?,
    };
    let values: Vec<f64> = items.iter().map(|i| i.score).collect();
    let curve = curve_from_items(&items, &quantile_thresholds(&values, a.steps)?)?;
    if csv {
        return write_text(&a.out, &curve.to_csv());
    }
    let n = items.len() as f64;
    let acc_local = items.iter().filter(|i| i.local_correct).count() as f64 / n;
    let acc_remote = items.iter().filter(|i| i.remote_correct).count() as f64 / n;
    let mean = |f: fn(&crate::routing::RoutingItem) -> f64| items.iter().map(f).sum::<f64>() / n;
    let (lat_local, lat_remote) = (
        mean(|i| i.local_per_token_s),
        mean(|i| i.remote_per_token_s),
    );
    let points = curve
        .points
        .iter()
        .map(|p| {
            let speedup = latency_account(lat_local, lat_remote, p.routing_rate)
                .map(|l| l.speedup)
                .unwrap_or(f64::NAN);
            Ok(RoutePointSummary {
                threshold: p.threshold,
                routing_rate: p.routing_rate,
                accuracy: p.accuracy,
                random_accuracy: random_baseline(acc_local, acc_remote, &[p.routing_rate])?[0].1,
                mean_latency_s: p.mean_latency_s,
                speedup_vs_remote: speedup,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &a.out,
        &RouteSummary {
            steps: a.steps,
            local_accuracy: acc_local,
            remote_accuracy: acc_remote,
            parity_routing_rate: parity_routing_rate(&curve, acc_remote),
            points,
        },
    )
}

/// Scores aligned to `data` order.
fn aligned_scores(
    data: &Dataset,
    preds: &[PredictionRecord],
    method: ConfidenceMethod,
) -> Result<Vec<f64>> {
    let by_id: std::collections::HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.query_id.as_str(), p)).collect();
    data.records
        .iter()
        .map(|r| {
            let p = by_id
                .get(r.id.as_str())
                .ok_or_else(|| Error::MissingPrediction(r.id.clone()))?;
            Ok(score_prediction(p, method)?.value)
        })
        .collect()
}

fn eval_reject(a: EvalRejectArgs) -> Result<()> {
    let data = load_jsonl(&a.data, SplitTag::Test)?;
    let preds = load_predictions(&a.preds)?;
    let scores = aligned_scores(&data, &preds, a.method)?;
    let truth: Vec<bool> = data
        .records
        .iter()
        .map(|r| r.ground_truth.is_reject())
        .collect();
    let roc = rejection::roc_from_confidence(&scores, &truth)?;
    eprintln!("rejection AUC {}", roc.auc);
    write_text(&a.out, &roc.to_csv())
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let data = load_jsonl(&a.data, SplitTag::Test)?;
    let preds = load_predictions(&a.preds)?;
    let scores = aligned_scores(&data, &preds, a.method)?;
    let correct = pipeline::correctness(&data, &preds)?;
    write_json(&a.out, &calibration::report(&scores, &correct, a.bins)?)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("tokio runtime: {e}")))
}

fn init_tracing() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
}

fn serve(a: ServeArgs) -> Result<()> {
    init_tracing();
    let config = GatewayConfig::load(&a.config)?;
    runtime()?.block_on(async {
        let mut server = GatewayServer::start(config).await?;
        tracing::info!("gateway listening on {}", server.local_addr());
        tokio::select! {
            r = server.wait() => r,
            _ = tokio::signal::ctrl_c() => {
                server.shutdown().await;
                Ok(())
            }
        }
    })
}

fn mock_serve(a: MockServeArgs) -> Result<()> {
    init_tracing();
    let mut script = match (&a.script, &a.preds) {
        (Some(p), _) => Script::load(p)?,
        (None, Some(p)) => {
            let data = load_jsonl(
                a.data.as_ref().expect("clap enforces --data"),
                SplitTag::Test,
            )?;
            Script::from_predictions(&data, &load_predictions(p)?)?
        }
        (None, None) => unreachable!("clap enforces one source"),
    };
    if a.delay_ms > 0 {
        script.artificial_delay_ms = a.delay_ms;
    }
    runtime()?.block_on(async {
        let server = MockServer::start(script, &a.listen).await?;
        tracing::info!("mock backend listening on {}", server.local_addr());
        let _ = tokio::signal::ctrl_c().await;
        server.shutdown().await;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["confroute", "frobnicate"]), 2);
        assert_eq!(run(["confroute", "annotate", "--train", "x"]), 2);
        assert_eq!(run(["confroute", "synth", "-o", "x"]), 2);
        assert_eq!(run(["confroute"]), 2);
    }

    #[test]
    fn data_errors_exit_1() {
        assert_eq!(
            run(["confroute", "ingest", "--input", "/nonexistent/file.jsonl"]),
            1
        );
    }
}
