//! Command-line driver: synthetic stream generation, single detector runs,
//! and full multi-seed experiment evaluation.
//!
//! Exit codes: 0 on success, 1 on data errors (missing or malformed input
//! files), 2 on usage errors (bad flags or config keys).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use itan::baselines::{build_estimator, Algo};
use itan::data::{
    gen_gauss_mixture_stream, gen_sine_stream, load_vehicle, mask_feedback, read_stream_csv,
    standardize_stream, write_stream_csv, StreamRecord,
};
use itan::eval::{auc, avg_log_loss_curve, detection_rates, evaluate_algo, roc_sweep, RunSummary};
use itan::pipeline::{
    run_detector, DensityEstimator, DetectorConfig, ItanEstimator, RoundOutput, ThresholdSpace,
};
use itan::threshold::CostPair;

#[derive(Parser)]
#[command(name = "itan", version, about = "Sequential anomaly detection runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled stream to CSV.
    Generate {
        /// Which synthetic generator to use.
        #[arg(long, value_enum)]
        exp: SyntheticExp,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of rounds to generate.
        #[arg(long, default_value_t = 1000)]
        len: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one algorithm over one stream and write the per-round trace.
    Run(RunArgs),
    /// Replicate an experiment: several seeds, the full cost grid, one ROC
    /// and loss curve per algorithm.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SyntheticExp {
    Gauss,
    Sine,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Experiment {
    Gauss,
    Sine,
    Vehicle,
}

#[derive(Args)]
struct RunArgs {
    /// Algorithm to run: itan, wgmm, wkde, or ml.
    #[arg(long)]
    algo: String,
    /// Experiment whose stream to use; `vehicle` requires --data.
    #[arg(long, value_enum)]
    exp: Option<Experiment>,
    /// Dataset file: the vehicle CSV when --exp vehicle, otherwise a stream
    /// CSV as written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    len: usize,
    /// Per-round trace CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run summary JSON; stderr when omitted.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Write the final tree state as JSON (itan only).
    #[arg(long)]
    snapshot_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment to replicate.
    #[arg(long, value_enum)]
    exp: Experiment,
    /// Dataset file, required for --exp vehicle.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated algorithms to evaluate.
    #[arg(long, default_value = "itan,wgmm,wkde,ml")]
    algos: String,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1000)]
    len: usize,
    /// Directory for roc_<algo>.csv, loss_curve_<algo>.csv, summary.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
}

/// Detector options shared by `run` and `eval`.  Every flag overrides the
/// same key in `--config`; unset values fall back to the built-in defaults
/// (or the vehicle-experiment defaults when --exp vehicle).
#[derive(Args)]
struct ConfigFlags {
    /// Config file of `key=value` lines; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split-schedule base β.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight fraction ξ a split parent keeps.
    #[arg(long)]
    xi: Option<f64>,
    /// Restart the split parent's sequential 2-means after each split.
    #[arg(long)]
    reset_two_means: bool,
    /// Mixture learning rate θ.
    #[arg(long)]
    theta: Option<f64>,
    /// Miss cost C₁.
    #[arg(long)]
    c1: Option<f64>,
    /// False-alarm cost C₋₁.
    #[arg(long = "c-1")]
    c_neg1: Option<f64>,
    /// Probability that a round's true label is revealed.
    #[arg(long)]
    feedback_prob: Option<f64>,
    /// Threshold log-density instead of density (G shifts accordingly).
    #[arg(long)]
    log_space_threshold: bool,
    /// Lower end of the feasible threshold interval G.
    #[arg(long)]
    g_lo: Option<f64>,
    /// Upper end of the feasible threshold interval G.
    #[arg(long)]
    g_hi: Option<f64>,
    /// Number of wGMM components.
    #[arg(long)]
    gmm_k: Option<usize>,
    /// Seed for the wGMM EM initializer.
    #[arg(long)]
    em_seed: Option<u64>,
    /// Z-score each feature with running normal-sample statistics.
    #[arg(long)]
    standardize: bool,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn data_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Data(msg.to_string())
}

/// Fully resolved run options: detector config plus the stream-side choices.
struct Resolved {
    detector: DetectorConfig,
    feedback_prob: f64,
    standardize: bool,
}

impl Resolved {
    /// Defaults, then the config file, then explicit flags.  The vehicle
    /// experiment starts from log-space thresholding over standardized
    /// features with G = [-40, 0] unless overridden.
    fn new(flags: &ConfigFlags, vehicle: bool) -> Result<Self, CliError> {
        let mut r = Resolved {
            detector: DetectorConfig::default(),
            feedback_prob: 1.0,
            standardize: false,
        };
        if vehicle {
            r.detector.threshold_space = ThresholdSpace::LogDensity;
            r.detector.g_lo = -40.0;
            r.detector.g_hi = 0.0;
            r.standardize = true;
        }
        if let Some(path) = &flags.config {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            r.apply_file(&text)?;
        }
        r.apply_flags(flags)?;
        r.detector
            .validate()
            .map_err(|e| usage(format!("invalid config: {e}")))?;
        if !(0.0..=1.0).contains(&r.feedback_prob) {
            return Err(usage(format!(
                "feedback_prob must lie in [0, 1], got {}",
                r.feedback_prob
            )));
        }
        Ok(r)
    }

    fn apply_file(&mut self, text: &str) -> Result<(), CliError> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad =
                |e: &dyn std::fmt::Display| usage(format!("config line {}: {e}", lineno + 1));
            macro_rules! num {
                () => {
                    value.parse().map_err(|e| bad(&e))?
                };
            }
            match key {
                "beta" => self.detector.tree.beta = num!(),
                "xi" => self.detector.tree.xi = num!(),
                "reset_two_means" => {
                    self.detector.tree.reset_two_means_on_split = parse_bool(value)
                        .ok_or_else(|| bad(&"expected true or false"))?;
                }
                "theta" => self.detector.theta = num!(),
                "c1" => self.set_costs(Some(num!()), None).map_err(|e| bad(&e))?,
                "c-1" | "c_neg1" => self.set_costs(None, Some(num!())).map_err(|e| bad(&e))?,
                "feedback_prob" => self.feedback_prob = num!(),
                "log_space_threshold" => {
                    self.detector.threshold_space = if parse_bool(value)
                        .ok_or_else(|| bad(&"expected true or false"))?
                    {
                        ThresholdSpace::LogDensity
                    } else {
                        ThresholdSpace::Density
                    };
                }
                "g_lo" => self.detector.g_lo = num!(),
                "g_hi" => self.detector.g_hi = num!(),
                "gmm_k" => self.detector.gmm_components = num!(),
                "em_seed" => self.detector.em_seed = num!(),
                "standardize" => {
                    self.standardize =
                        parse_bool(value).ok_or_else(|| bad(&"expected true or false"))?;
                }
                other => return Err(usage(format!("config line {}: unknown key {other}", lineno + 1))),
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, flags: &ConfigFlags) -> Result<(), CliError> {
        if let Some(v) = flags.beta {
            self.detector.tree.beta = v;
        }
        if let Some(v) = flags.xi {
            self.detector.tree.xi = v;
        }
        if flags.reset_two_means {
            self.detector.tree.reset_two_means_on_split = true;
        }
        if let Some(v) = flags.theta {
            self.detector.theta = v;
        }
        if flags.c1.is_some() || flags.c_neg1.is_some() {
            self.set_costs(flags.c1, flags.c_neg1)
                .map_err(|e| usage(format!("invalid costs: {e}")))?;
        }
        if let Some(v) = flags.feedback_prob {
            self.feedback_prob = v;
        }
        if flags.log_space_threshold {
            self.detector.threshold_space = ThresholdSpace::LogDensity;
        }
        if let Some(v) = flags.g_lo {
            self.detector.g_lo = v;
        }
        if let Some(v) = flags.g_hi {
            self.detector.g_hi = v;
        }
        if let Some(v) = flags.gmm_k {
            self.detector.gmm_components = v;
        }
        if let Some(v) = flags.em_seed {
            self.detector.em_seed = v;
        }
        if flags.standardize {
            self.standardize = true;
        }
        Ok(())
    }

    fn set_costs(&mut self, miss: Option<f64>, false_alarm: Option<f64>) -> itan::Result<()> {
        let miss = miss.unwrap_or_else(|| self.detector.costs.miss());
        let fa = false_alarm.unwrap_or_else(|| self.detector.costs.false_alarm());
        self.detector.costs = CostPair::new(miss, fa)?;
        Ok(())
    }

    /// The `# key=value` metadata lines that make a trace replayable.
    fn metadata(&self, extra: &[(&str, String)]) -> String {
        let d = &self.detector;
        let mut pairs: Vec<(&str, String)> = vec![
            ("version", env!("CARGO_PKG_VERSION").into()),
            ("beta", d.tree.beta.to_string()),
            ("xi", d.tree.xi.to_string()),
            (
                "reset_two_means",
                d.tree.reset_two_means_on_split.to_string(),
            ),
            ("theta", d.theta.to_string()),
            ("c1", d.costs.miss().to_string()),
            ("c-1", d.costs.false_alarm().to_string()),
            (
                "log_space_threshold",
                matches!(d.threshold_space, ThresholdSpace::LogDensity).to_string(),
            ),
            ("g_lo", d.g_lo.to_string()),
            ("g_hi", d.g_hi.to_string()),
            ("gmm_k", d.gmm_components.to_string()),
            ("em_seed", d.em_seed.to_string()),
            ("feedback_prob", self.feedback_prob.to_string()),
            ("standardize", self.standardize.to_string()),
        ];
        pairs.extend(extra.iter().cloned());
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "# {k}={v}");
        }
        s
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            exp,
            seed,
            len,
            out,
        } => cmd_generate(exp, seed, len, out.as_deref()),
        Command::Run(args) => cmd_run(&args),
        Command::Eval(args) => cmd_eval(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_generate(
    exp: SyntheticExp,
    seed: u64,
    len: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let stream = match exp {
        SyntheticExp::Gauss => gen_gauss_mixture_stream(seed, len),
        SyntheticExp::Sine => gen_sine_stream(seed, len),
    };
    let mut buf = Vec::new();
    write_stream_csv(&mut buf, &stream).map_err(data_err)?;
    write_output(out, &buf).map_err(data_err)
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> std::io::Result<()> {
    match path {
        Some(p) => fs::write(p, bytes),
        None => std::io::stdout().write_all(bytes),
    }
}

/// Load or generate the stream a run/eval operates on, after feedback
/// masking and optional standardization.
fn prepare_stream(
    exp: Option<Experiment>,
    dataset: Option<&Path>,
    seed: u64,
    len: usize,
    r: &Resolved,
) -> Result<Vec<StreamRecord>, CliError> {
    let stream = match (exp, dataset) {
        (Some(Experiment::Vehicle), Some(path)) => load_vehicle(path).map_err(data_err)?,
        (Some(Experiment::Vehicle), None) => {
            return Err(usage("--exp vehicle requires --data"));
        }
        (Some(Experiment::Gauss), None) => gen_gauss_mixture_stream(seed, len),
        (Some(Experiment::Sine), None) => gen_sine_stream(seed, len),
        (Some(_), Some(_)) => {
            return Err(usage("--exp and --data are mutually exclusive (except vehicle)"));
        }
        (None, Some(path)) => read_stream_csv(path).map_err(data_err)?,
        (None, None) => return Err(usage("either --exp or --data is required")),
    };
    let stream = mask_feedback(&stream, r.feedback_prob, seed)
        .map_err(|e| usage(e.to_string()))?;
    Ok(if r.standardize {
        standardize_stream(&stream)
    } else {
        stream
    })
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let algo = Algo::from_str(&args.algo).map_err(|e| usage(e.to_string()))?;
    if args.snapshot_out.is_some() && algo != Algo::Itan {
        return Err(usage("--snapshot-out is only available for --algo itan"));
    }
    let r = Resolved::new(&args.config, args.exp == Some(Experiment::Vehicle))?;
    let stream = prepare_stream(args.exp, args.data.as_deref(), args.seed, args.len, &r)?;
    let dim = stream.first().map(|s| s.x.len()).unwrap_or(1);

    let started = Instant::now();
    let (outputs, node_count, snapshot) = if algo == Algo::Itan {
        let mut est = ItanEstimator::from_config(dim, &r.detector).map_err(data_err)?;
        let outputs = run_detector(&stream, &mut est, &r.detector).map_err(data_err)?;
        let snapshot = est.tree().to_json().map_err(data_err)?;
        (outputs, est.node_count(), Some(snapshot))
    } else {
        let mut est = build_estimator(algo, dim, &r.detector).map_err(data_err)?;
        let outputs = run_detector(&stream, est.as_mut(), &r.detector).map_err(data_err)?;
        (outputs, est.node_count(), None)
    };
    let wall_ms = started.elapsed().as_millis() as u64;

    let exp_name = match args.exp {
        Some(Experiment::Gauss) => "gauss",
        Some(Experiment::Sine) => "sine",
        Some(Experiment::Vehicle) => "vehicle",
        None => "file",
    };
    let mut extra = vec![
        ("algo", algo.name().to_string()),
        ("exp", exp_name.to_string()),
        ("seed", args.seed.to_string()),
        ("len", stream.len().to_string()),
    ];
    if let Some(p) = &args.data {
        extra.push(("data", p.display().to_string()));
    }
    let mut csv = r.metadata(&extra);
    csv.push_str("t,p_hat,tau,decision,true_label,log_loss,zero_one\n");
    for o in &outputs {
        csv.push_str(&round_csv_line(o));
    }
    write_output(args.out.as_deref(), csv.as_bytes()).map_err(data_err)?;

    if let (Some(path), Some(json)) = (&args.snapshot_out, &snapshot) {
        fs::write(path, json).map_err(data_err)?;
    }

    let curve = avg_log_loss_curve(&outputs);
    let (fpr, tpr) = detection_rates(&outputs);
    let summary = RunSummary {
        algo: algo.name().to_string(),
        seed: Some(args.seed),
        rounds: outputs.len(),
        node_count,
        final_avg_log_loss: curve.last().copied(),
        fpr,
        tpr,
        wall_ms,
        config: r.detector.clone(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(data_err)?;
    match &args.summary {
        Some(p) => fs::write(p, json).map_err(data_err)?,
        None => eprintln!("{json}"),
    }
    Ok(())
}

fn round_csv_line(o: &RoundOutput) -> String {
    let opt_label = o.true_label.map(|l| l.to_string()).unwrap_or_default();
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    format!(
        "{},{:.17e},{:.17e},{},{},{},{}\n",
        o.t,
        o.p_hat,
        o.tau,
        o.decision,
        opt_label,
        opt(o.log_loss),
        opt(o.zero_one),
    )
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let algos: Vec<Algo> = args
        .algos
        .split(',')
        .map(|s| Algo::from_str(s.trim()).map_err(|e| usage(e.to_string())))
        .collect::<Result<_, _>>()?;
    if algos.is_empty() {
        return Err(usage("--algos must name at least one algorithm"));
    }
    let vehicle = args.exp == Experiment::Vehicle;
    let r = Resolved::new(&args.config, vehicle)?;
    fs::create_dir_all(&args.out_dir).map_err(data_err)?;

    let streams: Vec<Vec<StreamRecord>> = if vehicle {
        vec![prepare_stream(Some(args.exp), args.data.as_deref(), 0, args.len, &r)?]
    } else {
        (0..args.seeds)
            .map(|seed| prepare_stream(Some(args.exp), None, seed, args.len, &r))
            .collect::<Result<_, _>>()?
    };

    let exp_name = match args.exp {
        Experiment::Gauss => "gauss",
        Experiment::Sine => "sine",
        Experiment::Vehicle => "vehicle",
    };
    let mut summary = BTreeMap::new();
    for &algo in &algos {
        let report = evaluate_algo(&streams, algo, &r.detector).map_err(data_err)?;
        let roc_points: Vec<(f64, f64, f64)> = if vehicle {
            // Real data has no seed average; report the single run's sweep.
            roc_sweep(&streams[0], algo, &r.detector)
                .map_err(data_err)?
                .iter()
                .map(|p| (p.false_alarm_cost, p.fpr, p.tpr))
                .collect()
        } else {
            report
                .mean_roc
                .iter()
                .map(|p| (p.false_alarm_cost, p.fpr, p.tpr))
                .collect()
        };

        let mut roc_csv = r.metadata(&[("algo", algo.name().into()), ("exp", exp_name.into())]);
        roc_csv.push_str("cost,fpr,tpr\n");
        for (c, f, t) in &roc_points {
            let _ = writeln!(roc_csv, "{c},{f:.17e},{t:.17e}");
        }
        let roc_path = args.out_dir.join(format!("roc_{}.csv", algo.name()));
        fs::write(roc_path, roc_csv).map_err(data_err)?;

        let mut loss_csv =
            r.metadata(&[("algo", algo.name().into()), ("exp", exp_name.into())]);
        loss_csv.push_str("t,loss\n");
        for (i, l) in report.mean_loss_curve.iter().enumerate() {
            let _ = writeln!(loss_csv, "{},{l:.17e}", i + 1);
        }
        let loss_path = args.out_dir.join(format!("loss_curve_{}.csv", algo.name()));
        fs::write(loss_path, loss_csv).map_err(data_err)?;

        let pairs: Vec<(f64, f64)> = roc_points.iter().map(|&(_, f, t)| (f, t)).collect();
        summary.insert(
            algo.name().to_string(),
            serde_json::json!({
                "log_loss_mean": report.loss_mean,
                "log_loss_per_seed": report.loss_finals,
                "auc_mean": report.auc_mean,
                "auc_std": report.auc_std,
                "auc_per_seed": report.aucs,
                "roc_auc": auc(&pairs),
                "wall_ms": report.wall_ms,
            }),
        );
    }

    let doc = serde_json::json!({
        "exp": exp_name,
        "seeds": if vehicle { 1 } else { args.seeds },
        "len": args.len,
        "feedback_prob": r.feedback_prob,
        "standardize": r.standardize,
        "config": r.detector,
        "algos": summary,
    });
    let path = args.out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&doc).map_err(data_err)?)
        .map_err(data_err)?;
    Ok(())
}
