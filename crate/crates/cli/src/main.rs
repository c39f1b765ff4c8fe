use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use semgraph_core::confusion::{estimate_cm, parse_grid, prevalence, roc_sweep, ConfusionMatrix, LabeledScores};
use semgraph_core::format::{read_feature_rows, read_graph_stream, read_rows, read_score_rows, write_graph_stream, write_rows, ScoreRow};
use semgraph_core::ged::{build_costs, CostModel, EditCostTable};
use semgraph_core::graph::{ClassCatalog, Goal};
use semgraph_core::hmm::{baum_welch, m_viterbi, viterbi, HmmModel};
use semgraph_core::integrator::{detect, integrate, tune_window, ScoreModel, ScoreStream};
use semgraph_core::pipeline::{self, rate, smooth_banks, write_events, InnovationLedger, SubspaceParams};
use semgraph_core::simkit::{self, ExtractorModel, ScenarioSpec, Timeline};
use semgraph_core::subspace::{InnovationThreshold, Lambda, RankPolicy, ReconcileConfig, WindowedConfig};

#[derive(Parser)]
#[command(name = "semgraph", version, about = "Semantic graph stream processing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Confusion matrices, ROC curves and edit costs.
    #[command(subcommand)]
    Cm(CmCommand),
    /// Moving-average integration and thresholding of score streams.
    Integrate(IntegrateArgs),
    /// Pick the integration window for a target false positive rate.
    Tune(TuneArgs),
    /// Attribute-level innovation of feature streams.
    Pcp(PcpArgs),
    /// Merge track ids that follow the same object.
    Reconcile(ReconcileArgs),
    /// Baseline smoothing of a graph stream.
    Ged(GedArgs),
    /// Most likely state sequence of an observation sequence.
    Viterbi(ViterbiArgs),
    /// Baum-Welch re-estimation of a model.
    Fit(FitArgs),
    /// Seeded synthetic data.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Run a configured pipeline.
    Run(RunArgs),
    /// Information rates of an innovation ledger.
    Rate(RateArgs),
}

#[derive(Subcommand)]
enum CmCommand {
    Estimate(CmEstimateArgs),
    Roc(CmRocArgs),
    /// Edit cost table from a confusion matrix.
    Costs(CmCostsArgs),
}

#[derive(Args)]
struct CmEstimateArgs {
    #[arg(long)]
    tau: f64,
    /// JSONL of `{"truth": i, "scores": [..]}`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma separated pattern names; `p0,p1,..` by default.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    /// Also write the sample prevalence of each pattern here.
    #[arg(long)]
    prevalence_out: Option<PathBuf>,
}

#[derive(Args)]
struct CmRocArgs {
    #[arg(long, default_value = "0.05:0.95:0.05")]
    taus: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
}

#[derive(Args)]
struct CmCostsArgs {
    #[arg(long)]
    cm: PathBuf,
    /// JSON array of pattern prevalences; switches to posterior costs.
    #[arg(long)]
    prevalence: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IntegrateArgs {
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    /// JSON score model `{mu0, sigma0, mu1, sigma1, rho}`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    target_fpr: f64,
    #[arg(long, default_value_t = 8)]
    max_window: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PcpArgs {
    #[arg(long, default_value_t = 32)]
    buffer: usize,
    /// `auto` or a number.
    #[arg(long, default_value = "auto")]
    lambda: Lambda,
    #[arg(long, default_value_t = 2.0)]
    threshold: f64,
    /// Read the threshold as a multiple of the mean row mass.
    #[arg(long)]
    relative: bool,
    #[arg(long, default_value_t = 1)]
    rank: usize,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconcileArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Absolute distance cut-off instead of the derived one.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GedArgs {
    #[arg(long)]
    costs: PathBuf,
    /// Class catalog the stream's class names resolve against.
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value_t = 5)]
    streak: usize,
    /// Start from the empty graph instead of the first stable one.
    #[arg(long)]
    initial_empty: bool,
    #[arg(long = "in")]
    input: PathBuf,
    /// Events JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the smoothed graph stream.
    #[arg(long)]
    smoothed: Option<PathBuf>,
}

#[derive(Args)]
struct ViterbiArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with columns `t,symbol`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep only the best `m` states per step.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    init: PathBuf,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-iteration log-likelihoods as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SimCommand {
    /// Random Gaussian score models.
    Extractor(SimExtractorArgs),
    /// Labeled score samples from an extractor, for `cm estimate`.
    Samples(SimSamplesArgs),
    /// On/off presence timeline.
    Timeline(SimTimelineArgs),
    /// Per-frame score CSV from an extractor and a timeline.
    Scores(SimScoresArgs),
    /// Observed graph stream of a scripted scenario.
    Graphs(SimGraphsArgs),
    /// Observation CSV sampled from a model.
    Hmm(SimHmmArgs),
}

#[derive(Args)]
struct SimExtractorArgs {
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 2.0)]
    separability: f64,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimSamplesArgs {
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimTimelineArgs {
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    frames: usize,
    #[arg(long, default_value_t = 50.0)]
    on: f64,
    #[arg(long, default_value_t = 50.0)]
    off: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimScoresArgs {
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long)]
    timeline: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimGraphsArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    cm: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the ground-truth stream.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SimHmmArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    len: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the hidden states.
    #[arg(long)]
    states: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RateArgs {
    #[arg(long)]
    ledger: PathBuf,
    /// Goal JSON; the universal goal of `--catalog` when omitted.
    #[arg(long)]
    goal: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Seconds; defaults to the ledger's frames over its frame rate.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct SymbolRow {
    t: u64,
    symbol: usize,
}

#[derive(Serialize)]
struct StateRow<'a> {
    t: u64,
    state: usize,
    label: &'a str,
}

#[derive(Serialize)]
struct DetectionRow<'a> {
    t: u64,
    pattern: &'a str,
    score: f64,
    detected: u8,
}

#[derive(Serialize)]
struct RocRow<'a> {
    pattern: &'a str,
    tau: f64,
    fpr: f64,
    tpr: f64,
}

#[derive(Serialize)]
struct TuneRow {
    #[serde(rename = "T")]
    window: usize,
    tau: f64,
    tpr: f64,
}

#[derive(Serialize)]
struct PresenceRow {
    t: usize,
    pattern: usize,
    present: u8,
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    log_likelihood: f64,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

/// A file, or stdout when no path is given.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<()> {
    let mut w = sink(path)?;
    write_rows(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<LabeledScores>> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), n + 1))?);
    }
    if out.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    Ok(out)
}

fn sample_labels(samples: &[LabeledScores], labels: Option<Vec<String>>) -> Vec<String> {
    labels.unwrap_or_else(|| (0..samples[0].scores.len()).map(|i| format!("p{i}")).collect())
}

fn read_symbols(path: &Path) -> Result<Vec<usize>> {
    let mut rows: Vec<SymbolRow> = read_rows(open(path)?)?;
    rows.sort_by_key(|r| r.t);
    if rows.windows(2).any(|w| w[0].t == w[1].t) {
        bail!("{} repeats a time index", path.display());
    }
    Ok(rows.into_iter().map(|r| r.symbol).collect())
}

fn cm_command(cmd: CmCommand) -> Result<()> {
    match cmd {
        CmCommand::Estimate(a) => {
            let samples = read_samples(&a.input)?;
            let labels = sample_labels(&samples, a.labels);
            let cm = estimate_cm(&samples, &labels, a.tau)?;
            write_json(Some(&a.out), &cm)?;
            if let Some(p) = a.prevalence_out {
                write_json(Some(&p), &prevalence(&samples, labels.len())?)?;
            }
        }
        CmCommand::Roc(a) => {
            let samples = read_samples(&a.input)?;
            let labels = sample_labels(&samples, a.labels);
            let curves = roc_sweep(&samples, &labels, &parse_grid(&a.taus)?)?;
            let rows: Vec<RocRow> = curves
                .iter()
                .flat_map(|c| {
                    c.points.iter().map(|p| RocRow {
                        pattern: &c.pattern,
                        tau: p.tau,
                        fpr: p.fpr,
                        tpr: p.tpr,
                    })
                })
                .collect();
            write_csv(a.out.as_deref(), &rows)?;
        }
        CmCommand::Costs(a) => {
            let cm: ConfusionMatrix = read_json(&a.cm)?;
            let prev: Option<Vec<f64>> = a.prevalence.as_deref().map(read_json).transpose()?;
            write_json(a.out.as_deref(), &build_costs(&cm, prev.as_deref())?)?;
        }
    }
    Ok(())
}

fn integrate_command(a: IntegrateArgs) -> Result<()> {
    let rows = read_score_rows(open(&a.input)?)?;
    let mut by_pattern: std::collections::BTreeMap<String, Vec<(u64, f64)>> = Default::default();
    for r in rows {
        by_pattern.entry(r.pattern).or_default().push((r.t, r.score));
    }
    let mut out = Vec::new();
    for (k, (pattern, frames)) in by_pattern.iter_mut().enumerate() {
        frames.sort_by_key(|f| f.0);
        let smoothed = integrate(&ScoreStream::new(k, std::mem::take(frames))?, a.window)?;
        let flags = detect(&smoothed, a.tau);
        for ((t, s), d) in smoothed.frames.iter().zip(flags) {
            out.push((*t, pattern.as_str(), *s, d));
        }
    }
    out.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    let rows: Vec<DetectionRow> = out
        .into_iter()
        .map(|(t, pattern, score, d)| DetectionRow {
            t,
            pattern,
            score,
            detected: u8::from(d),
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)
}

fn tune_command(a: TuneArgs) -> Result<()> {
    let model: ScoreModel = read_json(&a.model)?;
    let tuning = tune_window(&model, a.target_fpr, a.max_window)?;
    log::info!("best window {} at tau {:.4}, tpr {:.4}", tuning.window, tuning.tau, tuning.tpr);
    let rows: Vec<TuneRow> = tuning
        .table
        .iter()
        .map(|r| TuneRow {
            window: r.window,
            tau: r.tau,
            tpr: r.tpr,
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)
}

fn pcp_command(a: PcpArgs) -> Result<()> {
    let features = read_feature_rows(open(&a.input)?)?;
    let mut innovation = WindowedConfig {
        buffer: a.buffer,
        threshold: if a.relative {
            InnovationThreshold::Relative(a.threshold)
        } else {
            InnovationThreshold::Absolute(a.threshold)
        },
        ..WindowedConfig::default()
    };
    innovation.pcp.lambda = a.lambda;
    innovation.pcp.rank = RankPolicy::Fixed(a.rank);
    let params = SubspaceParams {
        innovation,
        reconcile: None,
    };
    let out = pipeline::subspace_stage(&features, &params)?;
    write_csv(a.out.as_deref(), &out.innovation)
}

fn reconcile_command(a: ReconcileArgs) -> Result<()> {
    let features = read_feature_rows(open(&a.input)?)?;
    let params = SubspaceParams {
        reconcile: Some(ReconcileConfig {
            threshold: a.threshold,
            ..ReconcileConfig::default()
        }),
        ..SubspaceParams::default()
    };
    let out = pipeline::subspace_stage(&features, &params)?;
    match out.reconciliation {
        Some(r) => write_json(a.out.as_deref(), &r),
        None => bail!("reconciliation needs at least two tracks"),
    }
}

fn ged_command(a: GedArgs) -> Result<()> {
    let catalog: ClassCatalog = read_json(&a.catalog)?;
    let table: EditCostTable = read_json(&a.costs)?;
    let costs = CostModel::new(table, &catalog)?;
    let frames = read_graph_stream(open(&a.input)?, &catalog)?;
    let config = pipeline::SmoothParams {
        costs: None,
        threshold: a.threshold,
        streak: a.streak,
        initial_empty: a.initial_empty,
    }
    .smooth_config();
    let (smoothed, events) = smooth_banks(&frames, &costs, &config)?;
    log::info!("{} frames, {} events", frames.len(), events.len());
    let mut w = sink(a.out.as_deref())?;
    write_events(&mut w, &events, &catalog)?;
    w.flush()?;
    if let Some(p) = a.smoothed {
        let mut w = sink(Some(&p))?;
        write_graph_stream(&mut w, &smoothed, &catalog)?;
        w.flush()?;
    }
    Ok(())
}

fn viterbi_command(a: ViterbiArgs) -> Result<()> {
    let model: HmmModel = read_json(&a.model)?;
    let obs = read_symbols(&a.input)?;
    let decoded = match a.beam {
        Some(m) => m_viterbi(&model, &obs, m)?,
        None => viterbi(&model, &obs)?,
    };
    log::info!("log probability {}", decoded.log_prob);
    let rows: Vec<StateRow> = decoded
        .states
        .iter()
        .enumerate()
        .map(|(t, s)| StateRow {
            t: t as u64,
            state: *s,
            label: &model.labels()[*s],
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)
}

fn fit_command(a: FitArgs) -> Result<()> {
    let init: HmmModel = read_json(&a.init)?;
    let obs = read_symbols(&a.input)?;
    let report = baum_welch(&obs, &init, a.iters, a.tol)?;
    log::info!("{} iterations, converged: {}", report.iterations, report.converged);
    write_json(a.out.as_deref(), &report.model)?;
    if let Some(p) = a.trace {
        let rows: Vec<TraceRow> = report
            .log_likelihoods
            .iter()
            .enumerate()
            .map(|(iteration, ll)| TraceRow {
                iteration,
                log_likelihood: *ll,
            })
            .collect();
        write_csv(Some(&p), &rows)?;
    }
    Ok(())
}

fn sim_command(cmd: SimCommand) -> Result<()> {
    match cmd {
        SimCommand::Extractor(a) => {
            let ex = simkit::gen_extractor(a.k, a.separability, a.rho, a.seed)?;
            write_json(a.out.as_deref(), &ex)
        }
        SimCommand::Samples(a) => {
            let ex: ExtractorModel = read_json(&a.extractor)?;
            let mut w = sink(a.out.as_deref())?;
            for s in simkit::sample_detections(&ex, a.n, a.seed) {
                serde_json::to_writer(&mut w, &s)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            Ok(())
        }
        SimCommand::Timeline(a) => {
            let tl = simkit::gen_timeline(a.k, a.frames, a.on, a.off, a.seed)?;
            match a.out.as_deref() {
                Some(p) if p.extension().is_some_and(|e| e == "csv") => {
                    let rows: Vec<PresenceRow> = (0..tl.frames())
                        .flat_map(|t| {
                            tl.presence.iter().enumerate().map(move |(pattern, track)| PresenceRow {
                                t,
                                pattern,
                                present: u8::from(track[t]),
                            })
                        })
                        .collect();
                    write_csv(Some(p), &rows)
                }
                p => write_json(p, &tl),
            }
        }
        SimCommand::Scores(a) => {
            let ex: ExtractorModel = read_json(&a.extractor)?;
            let tl: Timeline = read_json(&a.timeline)?;
            let streams = simkit::emit_scores(&tl, &ex, a.seed)?;
            let mut rows: Vec<ScoreRow> = streams
                .iter()
                .flat_map(|s| {
                    let pattern = ex.labels[s.pattern].clone();
                    s.frames.iter().map(move |(t, score)| ScoreRow {
                        t: *t,
                        pattern: pattern.clone(),
                        score: *score,
                    })
                })
                .collect();
            rows.sort_by_key(|r| r.t);
            write_csv(a.out.as_deref(), &rows)
        }
        SimCommand::Graphs(a) => {
            let mut spec: ScenarioSpec = read_json(&a.scenario)?;
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            let cm: ConfusionMatrix = read_json(&a.cm)?;
            let (truth, observed) = simkit::emit_graph_stream(&spec, &cm)?;
            let mut w = sink(a.out.as_deref())?;
            write_graph_stream(&mut w, &observed, &spec.catalog)?;
            w.flush()?;
            if let Some(p) = a.truth {
                let mut w = sink(Some(&p))?;
                write_graph_stream(&mut w, &truth, &spec.catalog)?;
                w.flush()?;
            }
            Ok(())
        }
        SimCommand::Hmm(a) => {
            let model: HmmModel = read_json(&a.model)?;
            let (states, obs) = simkit::sample_hmm(&model, a.len, a.seed);
            let rows: Vec<SymbolRow> = obs
                .iter()
                .enumerate()
                .map(|(t, s)| SymbolRow { t: t as u64, symbol: *s })
                .collect();
            write_csv(a.out.as_deref(), &rows)?;
            if let Some(p) = a.states {
                let rows: Vec<StateRow> = states
                    .iter()
                    .enumerate()
                    .map(|(t, s)| StateRow {
                        t: t as u64,
                        state: *s,
                        label: &model.labels()[*s],
                    })
                    .collect();
                write_csv(Some(&p), &rows)?;
            }
            Ok(())
        }
    }
}

fn run_command(a: RunArgs) -> Result<()> {
    let out = pipeline::run_config_file(&a.config)?;
    log::info!(
        "{} frames, {} smoothing events, R = {:.1} bit/s, filtered {:.1} bit/s",
        out.frames.len(),
        out.events.len(),
        out.rate.r,
        out.rate.r_hat
    );
    Ok(())
}

fn rate_command(a: RateArgs) -> Result<()> {
    let ledger: InnovationLedger = read_json(&a.ledger)?;
    let goal: Goal = match (&a.goal, &a.catalog) {
        (Some(g), _) => read_json(g)?,
        (None, Some(c)) => Goal::universal(&read_json::<ClassCatalog>(c)?),
        (None, None) => bail!("rate needs --goal or --catalog"),
    };
    if let Some(c) = &a.catalog {
        goal.check(&read_json::<ClassCatalog>(c)?)?;
    }
    let duration = a.duration.unwrap_or_else(|| ledger.duration());
    write_json(a.out.as_deref(), &rate(&ledger, duration, &goal)?)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Cm(c) => cm_command(c),
        Command::Integrate(a) => integrate_command(a),
        Command::Tune(a) => tune_command(a),
        Command::Pcp(a) => pcp_command(a),
        Command::Reconcile(a) => reconcile_command(a),
        Command::Ged(a) => ged_command(a),
        Command::Viterbi(a) => viterbi_command(a),
        Command::Fit(a) => fit_command(a),
        Command::Sim(c) => sim_command(c),
        Command::Run(a) => run_command(a),
        Command::Rate(a) => rate_command(a),
    }
}

/// 2 for bad input, 3 when a computation fails on valid input.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<semgraph_core::Error>()) {
        Some(e) if !e.is_input_error() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
