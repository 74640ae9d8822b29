//! `glc` command line: `generate`, `cluster`, `correct`, `selftrain`, `eval`, `grid`.
//!
//! Every subcommand takes `--config PATH`, `--seed N`, `--out DIR` and one
//! override flag per [`RunConfig`] key (`--lambda`, `--t_e`, ...). Failures
//! print one line `error: code=<n> kind=<kind> message=<text>` to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use crate::clustering::{corrupt_labels, dbscan, kmeans};
use crate::config::RunConfig;
use crate::correction::{threshold_grid, FittedCorrection};
use crate::dataset::{load_embeddings, load_labels, save_embeddings, save_labels, Labeling};
use crate::error::Error;
use crate::knn_graph::{load_graph, save_graph};
use crate::metrics::{graph_recall, MetricReport};
use crate::selftrain::{build_scenario, run_loop};

/// Process exit codes.
pub mod exit {
    pub const RUNTIME: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const SCHEMA: i32 = 4;
    pub const CONFIG: i32 = 5;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: exit::USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    /// The single stderr line for this failure.
    pub fn line(&self) -> String {
        let msg = self.message.replace('\n', " ");
        format!("error: code={} kind={} message={}", self.code, self.kind, msg.trim())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { .. } => (exit::IO, "io"),
            Error::Parse { .. } | Error::Shape(_) => (exit::SCHEMA, "schema"),
            Error::Config(_) => (exit::CONFIG, "config"),
            Error::InvalidParam { .. } | Error::Degenerate(_) => (exit::RUNTIME, "runtime"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn common_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(Arg::new("config").long("config").value_name("PATH").help("key = value config file"))
        .arg(Arg::new("out").long("out").value_name("DIR").default_value("out").help("output directory"));
    for key in RunConfig::KEYS {
        if *key == "seed" {
            cmd = cmd.arg(Arg::new("seed").long("seed").value_name("N").help("RNG seed"));
        } else {
            cmd = cmd.arg(
                Arg::new(*key)
                    .long(*key)
                    .value_name("VALUE")
                    .hide(true)
                    .help(format!("override `{key}`")),
            );
        }
    }
    cmd
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").required(true).help(help)
}

pub fn command() -> Command {
    Command::new("glc")
        .about("Graph-based pseudo-label correction")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(common_args(
            Command::new("generate").about("Write the synthetic scenario: embeddings, ground truth, clustered and noisy labels"),
        ))
        .subcommand(common_args(
            Command::new("cluster")
                .about("Cluster embeddings into pseudo labels")
                .arg(path_arg("embeddings", "embeddings CSV"))
                .arg(
                    Arg::new("method")
                        .long("method")
                        .value_parser(["dbscan", "kmeans"])
                        .default_value("dbscan"),
                )
                .arg(Arg::new("clusters").long("clusters").value_name("N").help("k-means cluster count"))
                .arg(
                    Arg::new("corrupt")
                        .long("corrupt")
                        .action(ArgAction::SetTrue)
                        .help("inject flip_rate / outlier_rate noise"),
                ),
        ))
        .subcommand(common_args(
            Command::new("correct")
                .about("Correct pseudo labels")
                .arg(path_arg("embeddings", "embeddings CSV"))
                .arg(path_arg("labels", "labels CSV"))
                .arg(
                    Arg::new("dump-graph")
                        .long("dump-graph")
                        .action(ArgAction::SetTrue)
                        .help("also write the inference graph with edge confidences"),
                ),
        ))
        .subcommand(common_args(
            Command::new("selftrain").about("Run the synthetic self-training loop").arg(
                Arg::new("glc")
                    .long("glc")
                    .value_parser(["on", "off"])
                    .default_value("on"),
            ),
        ))
        .subcommand(common_args(
            Command::new("eval")
                .about("Score labels against ground truth")
                .arg(path_arg("labels", "labels CSV"))
                .arg(path_arg("gt", "ground-truth labels CSV"))
                .arg(Arg::new("graph").long("graph").value_name("PATH").help("edge list for graph recall")),
        ))
        .subcommand(common_args(
            Command::new("grid")
                .about("NMI over a grid of pruning thresholds")
                .arg(path_arg("embeddings", "embeddings CSV"))
                .arg(path_arg("labels", "labels CSV"))
                .arg(Arg::new("tau1s").long("tau1s").default_value("0.4,0.5,0.6,0.7,0.8"))
                .arg(Arg::new("tau2s").long("tau2s").default_value("0.4,0.5,0.6,0.7,0.8")),
        ))
}

fn resolve_config(m: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{path}: {e}")))?;
    }
    for key in RunConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(m: &ArgMatches) -> CliResult<PathBuf> {
    let dir = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn path_of(m: &ArgMatches, name: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(name).expect("required"))
}

#[derive(Serialize)]
struct GenerateReport<'a> {
    n_samples: usize,
    clustered: MetricReport,
    noisy: MetricReport,
    config: &'a RunConfig,
}

fn cmd_generate(m: &ArgMatches) -> CliResult<()> {
    let cfg = resolve_config(m)?;
    let dir = out_dir(m)?;
    let sc = build_scenario(&cfg)?;
    save_embeddings(&sc.set, dir.join("embeddings.csv"))?;
    save_labels(&Labeling::new(sc.raw.gt_labels.clone())?, dir.join("gt.csv"))?;
    save_labels(&sc.clustered, dir.join("labels_clustered.csv"))?;
    save_labels(&sc.noisy, dir.join("labels_noisy.csv"))?;
    let report = GenerateReport {
        n_samples: sc.raw.n(),
        clustered: MetricReport::evaluate(&sc.clustered, &sc.raw.gt_labels)?,
        noisy: MetricReport::evaluate(&sc.noisy, &sc.raw.gt_labels)?,
        config: &cfg,
    };
    write_json(&dir.join("generate.json"), &report)
}

#[derive(Serialize)]
struct ClusterReport<'a> {
    method: &'a str,
    n_clusters: usize,
    n_outliers: usize,
    metrics: Option<MetricReport>,
    config: &'a RunConfig,
}

fn cmd_cluster(m: &ArgMatches) -> CliResult<()> {
    let cfg = resolve_config(m)?;
    let set = load_embeddings(path_of(m, "embeddings"))?;
    let method = m.get_one::<String>("method").expect("defaulted").as_str();
    let mut lab = match method {
        "dbscan" => dbscan(&set, cfg.dbscan_params())?,
        _ => {
            let k: usize = match m.get_one::<String>("clusters") {
                Some(v) => v
                    .parse()
                    .map_err(|_| CliError::usage(format!("bad --clusters `{v}`")))?,
                None => return Err(CliError::usage("kmeans needs --clusters N")),
            };
            kmeans(&set, k, cfg.seed)?
        }
    };
    if m.get_flag("corrupt") {
        lab = corrupt_labels(&lab, cfg.flip_rate, cfg.outlier_rate, cfg.seed)?;
    }
    let dir = out_dir(m)?;
    save_labels(&lab, dir.join("labels.csv"))?;
    let metrics = set
        .gt_labels()
        .map(|gt| MetricReport::evaluate(&lab, gt))
        .transpose()?;
    let report = ClusterReport {
        method,
        n_clusters: lab.n_clusters(),
        n_outliers: lab.n_outliers(),
        metrics,
        config: &cfg,
    };
    write_json(&dir.join("cluster.json"), &report)
}

#[derive(Serialize)]
struct CorrectReport<'a> {
    correction: crate::correction::CorrectionSummary,
    before: Option<MetricReport>,
    after: Option<MetricReport>,
    config: &'a RunConfig,
}

fn cmd_correct(m: &ArgMatches) -> CliResult<()> {
    let cfg = resolve_config(m)?;
    let set = load_embeddings(path_of(m, "embeddings"))?;
    let lab = load_labels(path_of(m, "labels"))?;
    let fitted = FittedCorrection::fit(&set, &lab, &cfg, cfg.seed)?;
    let result = fitted.apply(cfg.tau1, cfg.tau2);
    let dir = out_dir(m)?;
    save_labels(&result.corrected, dir.join("corrected.csv"))?;
    if m.get_flag("dump-graph") {
        save_graph(&fitted.graphs.inference, Some(&fitted.confidence), dir.join("graph.txt"))?;
    }
    let eval = |l: &Labeling| {
        set.gt_labels()
            .map(|gt| MetricReport::evaluate(l, gt))
            .transpose()
    };
    let report = CorrectReport {
        correction: result.summary(&lab),
        before: eval(&lab)?,
        after: eval(&result.corrected)?,
        config: &cfg,
    };
    write_json(&dir.join("correction.json"), &report)
}

#[derive(Serialize)]
struct SelftrainReport<'a> {
    glc: bool,
    epochs: usize,
    final_metrics: MetricReport,
    config: &'a RunConfig,
}

fn cmd_selftrain(m: &ArgMatches) -> CliResult<()> {
    let cfg = resolve_config(m)?;
    let use_glc = m.get_one::<String>("glc").expect("defaulted") == "on";
    let raw = crate::dataset::generate_synthetic(&cfg.synth_spec())?;
    let history = run_loop(&raw, &cfg, use_glc, cfg.seed)?;
    let dir = out_dir(m)?;
    write_text(&dir.join("history.csv"), &history.to_csv())?;
    let last = history.labels.last().expect("at least one epoch");
    let mut final_metrics = MetricReport::evaluate(last, &raw.gt_labels)?;
    final_metrics.map = history.last().map;
    let report = SelftrainReport {
        glc: use_glc,
        epochs: history.records.len(),
        final_metrics,
        config: &cfg,
    };
    write_json(&dir.join("report.json"), &report)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    metrics: MetricReport,
    config: &'a RunConfig,
}

fn cmd_eval(m: &ArgMatches) -> CliResult<()> {
    let cfg = resolve_config(m)?;
    let lab = load_labels(path_of(m, "labels"))?;
    let gt = load_labels(path_of(m, "gt"))?;
    if gt.n_outliers() > 0 {
        return Err(Error::invalid("gt", "ground truth must not contain -1").into());
    }
    let mut metrics = MetricReport::evaluate(&lab, gt.labels())?;
    if let Some(p) = m.get_one::<String>("graph") {
        let g = load_graph(p)?;
        metrics.graph_recall = Some(graph_recall(&g, gt.labels())?);
    }
    let report = EvalReport {
        metrics,
        config: &cfg,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if m.value_source("out") == Some(clap::parser::ValueSource::CommandLine) {
        write_json(&out_dir(m)?.join("eval.json"), &report)?;
    }
    Ok(())
}

fn parse_list(m: &ArgMatches, name: &str) -> CliResult<Vec<f64>> {
    m.get_one::<String>(name)
        .expect("defaulted")
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("bad --{name} entry `{s}`")))
        })
        .collect()
}

fn cmd_grid(m: &ArgMatches) -> CliResult<()> {
    let cfg = resolve_config(m)?;
    let set = load_embeddings(path_of(m, "embeddings"))?;
    let lab = load_labels(path_of(m, "labels"))?;
    let tau1s = parse_list(m, "tau1s")?;
    let tau2s = parse_list(m, "tau2s")?;
    let grid = threshold_grid(&set, &lab, &cfg, &tau1s, &tau2s, cfg.seed)?;
    let mut csv = String::from("tau1,tau2,nmi,n_clusters,n_outliers,edges_removed_conf,edges_removed_nc\n");
    for c in &grid.cells {
        csv.push_str(&format!(
            "{},{},{:.9},{},{},{},{}\n",
            c.tau1, c.tau2, c.nmi, c.n_clusters, c.n_outliers, c.edges_removed_conf, c.edges_removed_nc
        ));
    }
    let dir = out_dir(m)?;
    write_text(&dir.join("grid.csv"), &csv)?;
    #[derive(Serialize)]
    struct GridReport<'a> {
        best_nmi: f64,
        config: &'a RunConfig,
    }
    let best_nmi = grid.nmi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    write_json(&dir.join("grid.json"), &GridReport { best_nmi, config: &cfg })
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments").to_string();
            return Err(CliError::usage(first.trim_start_matches("error: ")));
        }
    };
    match matches.subcommand() {
        Some(("generate", m)) => cmd_generate(m),
        Some(("cluster", m)) => cmd_cluster(m),
        Some(("correct", m)) => cmd_correct(m),
        Some(("selftrain", m)) => cmd_selftrain(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("grid", m)) => cmd_grid(m),
        _ => Err(CliError::usage("missing subcommand")),
    }
}
