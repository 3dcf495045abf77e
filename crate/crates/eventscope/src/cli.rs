//! Command-line front end: learn / detect / localize / simulate / eval /
//! export-graph over a shared JSON configuration.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::detector::{run_stream, AnomalyReport, DetectorConfig, WindowVerdict};
use crate::efp::{bin_frequencies, EfpModel};
use crate::esp::{learn_esps, parse_esps, serialize_esps, LearnerConfig};
use crate::evalkit::{
    ac_at_k, avg_at_k, detection_metrics, simulate, GroundTruth, IncidentKind, RclCase, Scale,
};
use crate::event_model::{read_ndjson, Event, FieldMapping, ReadMode};
use crate::rcl::{
    build_graph, extended_window_bounds, rank, time_aware_walk, ExportFormat, RankEntry,
    RootCauseRanking, WalkConfig,
};

/// Shared configuration; every field has a default and any field can be
/// overridden by the owning subcommand's flags. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub actor_path: String,
    pub operation_path: String,
    pub resources_path: String,
    pub time_path: String,
    pub delta_secs: u64,
    pub bin_secs: u64,
    pub m: usize,
    pub alpha: f64,
    pub adapt: bool,
    pub adapt_threshold: u64,
    pub adapt_persistence: u32,
    pub walks: usize,
    pub seed: u64,
    pub extended_window_secs: u64,
    pub retention_cap: usize,
    pub max_set_size: usize,
    pub scale_actors: usize,
    pub scale_resources: usize,
    pub scale_train_secs: u64,
    pub scale_test_secs: u64,
}

impl Default for Config {
    fn default() -> Self {
        let mapping = FieldMapping::default();
        let scale = Scale::default();
        Config {
            actor_path: mapping.actor_path,
            operation_path: mapping.operation_path,
            resources_path: mapping.resources_path,
            time_path: mapping.time_path,
            delta_secs: 60,
            bin_secs: 60,
            m: 6,
            alpha: 1e-3,
            adapt: true,
            adapt_threshold: 5,
            adapt_persistence: 3,
            walks: 100,
            seed: 42,
            extended_window_secs: 3600,
            retention_cap: 10_000,
            max_set_size: 8,
            scale_actors: scale.actors,
            scale_resources: scale.resources,
            scale_train_secs: scale.train_secs,
            scale_test_secs: scale.test_secs,
        }
    }
}

impl Config {
    fn mapping(&self) -> FieldMapping {
        FieldMapping {
            actor_path: self.actor_path.clone(),
            operation_path: self.operation_path.clone(),
            resources_path: self.resources_path.clone(),
            time_path: self.time_path.clone(),
        }
    }

    fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            max_set_size: self.max_set_size,
            ..LearnerConfig::default()
        }
    }

    fn detector(&self, no_adapt: bool) -> DetectorConfig {
        DetectorConfig {
            delta_secs: self.delta_secs,
            adapt: self.adapt && !no_adapt,
            adapt_threshold: self.adapt_threshold,
            adapt_persistence: self.adapt_persistence,
            adapt_buffer_cap: self.retention_cap,
        }
    }

    fn scale(&self) -> Scale {
        Scale {
            actors: self.scale_actors,
            resources: self.scale_resources,
            train_secs: self.scale_train_secs,
            test_secs: self.scale_test_secs,
            bin_secs: self.bin_secs,
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: &str| Err(CliError::new(msg));
        if self.delta_secs == 0 || self.bin_secs == 0 {
            return fail("delta_secs and bin_secs must be positive");
        }
        if self.m < 2 {
            return fail("m must be at least 2");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha must be in (0, 1)");
        }
        if self.walks == 0 {
            return fail("walks must be at least 1");
        }
        if self.adapt_persistence == 0 {
            return fail("adapt_persistence must be at least 1");
        }
        self.mapping().validate().map_err(|e| CliError::new(&e.to_string()))
    }
}

#[derive(Debug)]
struct CliError {
    message: String,
    path: Option<PathBuf>,
}

impl CliError {
    fn new(message: &str) -> Self {
        CliError {
            message: message.to_string(),
            path: None,
        }
    }

    fn with_path(message: String, path: &Path) -> Self {
        CliError {
            message,
            path: Some(path.to_path_buf()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "eventscope",
    version,
    about = "Anomaly detection and root-cause localization for structured cloud event streams"
)]
struct Cli {
    /// JSON configuration file (flat object; flags override its values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Emit pretty-printed JSON diagnostics on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn ESP rules and EFP profiles from a training stream.
    Learn {
        /// Training events, NDJSON.
        #[arg(long)]
        events: PathBuf,
        /// Output directory for esps.json and efp.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Detect anomalies in a test stream against learned models.
    Detect {
        /// Test events, NDJSON.
        #[arg(long)]
        events: PathBuf,
        /// Directory holding esps.json and efp.json.
        #[arg(long, required_unless_present_all = ["esps", "efp"])]
        models: Option<PathBuf>,
        /// Rule-set file (overrides the one in --models).
        #[arg(long)]
        esps: Option<PathBuf>,
        /// Frequency-model file (overrides the one in --models).
        #[arg(long)]
        efp: Option<PathBuf>,
        /// Output verdicts file, NDJSON (one window verdict per line).
        #[arg(long)]
        out: PathBuf,
        /// Disable rule promotion and profile updates during detection.
        #[arg(long)]
        no_adapt: bool,
    },
    /// Localize root causes for detected anomalies.
    Localize {
        /// Events covering the extended window, NDJSON.
        #[arg(long)]
        events: PathBuf,
        /// Verdicts produced by `detect`.
        #[arg(long)]
        verdicts: PathBuf,
        /// Output ranking file, JSON.
        #[arg(long)]
        out: PathBuf,
        /// Random walks per anomaly node.
        #[arg(long)]
        walks: Option<usize>,
        /// RNG seed for the walks.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the intervention graph in DOT format.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Generate a synthetic benchmark case.
    Simulate {
        /// Incident class to inject.
        #[arg(long)]
        kind: KindArg,
        /// Generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for train.ndjson, test.ndjson, truth.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score verdicts and rankings against ground truth.
    Eval {
        /// Ground-truth file written by `simulate`.
        #[arg(long)]
        truth: PathBuf,
        /// Verdicts produced by `detect`.
        #[arg(long)]
        verdicts: PathBuf,
        /// Ranking produced by `localize`.
        #[arg(long)]
        rankings: PathBuf,
        /// Output metrics file, JSON (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the intervention graph for a detected window.
    ExportGraph {
        /// Events covering the extended window, NDJSON.
        #[arg(long)]
        events: PathBuf,
        /// Verdicts produced by `detect`.
        #[arg(long)]
        verdicts: PathBuf,
        /// Output format.
        #[arg(long, value_enum, default_value_t = FormatArg::Dot)]
        format: FormatArg,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    SecretDeactivation,
    Dos,
    UnusualActivity,
    None,
}

impl From<KindArg> for IncidentKind {
    fn from(kind: KindArg) -> Self {
        match kind {
            KindArg::SecretDeactivation => IncidentKind::SecretDeactivation,
            KindArg::Dos => IncidentKind::Dos,
            KindArg::UnusualActivity => IncidentKind::UnusualActivity,
            KindArg::None => IncidentKind::None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Dot,
    Json,
}

/// Entry point: parses argv, dispatches, and maps outcomes to exit codes
/// (0 success, 1 operational error, 2 usage error).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests exit 0; real usage errors exit 2.
            let code = if err.exit_code() == 0 { 0 } else { 2 };
            let _ = err.print();
            return code;
        }
    };
    let json_errors = cli.json_errors;
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let diag = json!({
                "error": e.message,
                "path": e.path.as_ref().map(|p| p.display().to_string()),
            });
            if json_errors {
                eprintln!("{}", serde_json::to_string_pretty(&diag).unwrap());
            } else {
                eprintln!("{diag}");
            }
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    let config = match path {
        Some(path) => {
            let text = read_file(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::with_path(format!("bad config: {e}"), path))?
        }
        None => Config::default(),
    };
    config.validate()?;
    Ok(config)
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::with_path(format!("cannot read: {e}"), path))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::with_path(format!("cannot write: {e}"), path))
}

fn read_events(path: &Path, mapping: &FieldMapping) -> Result<Vec<Event>, CliError> {
    let file =
        fs::File::open(path).map_err(|e| CliError::with_path(format!("cannot read: {e}"), path))?;
    let (events, _) = read_ndjson(BufReader::new(file), mapping, ReadMode::Strict)
        .map_err(|e| CliError::with_path(e.to_string(), path))?;
    Ok(events)
}

fn read_verdicts(path: &Path) -> Result<Vec<WindowVerdict>, CliError> {
    let text = read_file(path)?;
    let mut verdicts = Vec::new();
    for (number, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: WindowVerdict = serde_json::from_str(line)
            .map_err(|e| CliError::with_path(format!("line {}: {e}", number + 1), path))?;
        verdicts.push(v);
    }
    Ok(verdicts)
}

/// Effective-config echo written next to each command's outputs.
fn write_provenance(dir_or_file: &Path, command: &str, config: &Config, extra: Value) -> Result<(), CliError> {
    let doc = json!({
        "command": command,
        "config": config,
        "details": extra,
    });
    let path = if dir_or_file.is_dir() {
        dir_or_file.join("run-config.json")
    } else {
        let mut name = dir_or_file.file_name().unwrap_or_default().to_os_string();
        name.push(".run-config.json");
        dir_or_file.with_file_name(name)
    };
    write_file(&path, &(serde_json::to_string_pretty(&doc).unwrap() + "\n"))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::with_path(format!("cannot create directory: {e}"), path))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Learn { events, out_dir } => cmd_learn(&config, &events, &out_dir),
        Command::Detect {
            events,
            models,
            esps,
            efp,
            out,
            no_adapt,
        } => {
            let esps_path = esps
                .or_else(|| models.as_ref().map(|m| m.join("esps.json")))
                .expect("clap enforces --models or --esps/--efp");
            let efp_path = efp
                .or_else(|| models.as_ref().map(|m| m.join("efp.json")))
                .expect("clap enforces --models or --esps/--efp");
            cmd_detect(&config, &events, &esps_path, &efp_path, &out, no_adapt)
        }
        Command::Localize {
            events,
            verdicts,
            out,
            walks,
            seed,
            dot,
        } => {
            let mut config = config;
            if let Some(walks) = walks {
                config.walks = walks;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            config.validate()?;
            cmd_localize(&config, &events, &verdicts, &out, dot.as_deref())
        }
        Command::Simulate { kind, seed, out_dir } => {
            let mut config = config;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            cmd_simulate(&config, kind.into(), &out_dir)
        }
        Command::Eval {
            truth,
            verdicts,
            rankings,
            out,
        } => cmd_eval(&config, &truth, &verdicts, &rankings, out.as_deref()),
        Command::ExportGraph {
            events,
            verdicts,
            format,
            out,
        } => cmd_export_graph(&config, &events, &verdicts, format, out.as_deref()),
    }
}

fn cmd_learn(config: &Config, events_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let mapping = config.mapping();
    let events = read_events(events_path, &mapping)?;
    if events.is_empty() {
        return Err(CliError::with_path("no events to learn from".into(), events_path));
    }
    let esps = learn_esps(&events, &mapping, &config.learner())
        .map_err(|e| CliError::new(&e.to_string()))?;

    let labeled: Vec<(i64, String)> = events
        .iter()
        .filter_map(|e| esps.classify(e, &mapping).map(|id| (e.time_ms, id.to_string())))
        .collect();
    let bin_ms = config.bin_secs as i64 * 1000;
    let origin = events[0].time_ms.div_euclid(bin_ms) * bin_ms;
    let horizon = (events[events.len() - 1].time_ms.div_euclid(bin_ms) + 1) * bin_ms;
    let series = bin_frequencies(
        labeled.iter().map(|(t, id)| (*t, id.as_str())),
        origin,
        config.bin_secs,
        horizon,
    );
    let efp = EfpModel::build(series, config.m, config.alpha, config.bin_secs, config.retention_cap)
        .map_err(|e| CliError::new(&e.to_string()))?;

    ensure_dir(out_dir)?;
    write_file(&out_dir.join("esps.json"), &(serialize_esps(&esps) + "\n"))?;
    write_file(
        &out_dir.join("efp.json"),
        &(serde_json::to_string_pretty(&efp.to_json()).unwrap() + "\n"),
    )?;
    write_provenance(
        out_dir,
        "learn",
        config,
        json!({ "events": events.len(), "rules": esps.rules.len() }),
    )
}

fn load_models(
    config: &Config,
    esps_path: &Path,
    efp_path: &Path,
) -> Result<(crate::esp::EspSet, EfpModel), CliError> {
    let mut esps = parse_esps(&read_file(esps_path)?)
        .map_err(|e| CliError::with_path(e.to_string(), esps_path))?;
    esps.learner_config = config.learner();
    let efp_value: Value = serde_json::from_str(&read_file(efp_path)?)
        .map_err(|e| CliError::with_path(format!("malformed JSON: {e}"), efp_path))?;
    let efp = EfpModel::from_json(&efp_value, config.retention_cap)
        .map_err(|e| CliError::with_path(e.to_string(), efp_path))?;
    Ok((esps, efp))
}

fn cmd_detect(
    config: &Config,
    events_path: &Path,
    esps_path: &Path,
    efp_path: &Path,
    out: &Path,
    no_adapt: bool,
) -> Result<(), CliError> {
    let mapping = config.mapping();
    let (esps, efp) = load_models(config, esps_path, efp_path)?;
    let events = read_events(events_path, &mapping)?;
    let result = run_stream(&esps, &efp, &events, &mapping, &config.detector(no_adapt))
        .map_err(|e| CliError::new(&e.to_string()))?;
    let mut lines = String::new();
    for verdict in &result.verdicts {
        lines.push_str(&serde_json::to_string(verdict).unwrap());
        lines.push('\n');
    }
    write_file(out, &lines)?;
    write_provenance(
        out,
        "detect",
        config,
        json!({
            "windows": result.verdicts.len(),
            "flagged": result.verdicts.iter().filter(|v| v.y).count(),
            "promoted_rules": result.promoted_rules,
            "adapt": config.adapt && !no_adapt,
        }),
    )
}

fn collect_reports(verdicts: &[WindowVerdict]) -> Vec<AnomalyReport> {
    verdicts.iter().flat_map(|v| v.reports.iter().cloned()).collect()
}

fn run_localization(
    config: &Config,
    events: &[Event],
    reports: &[AnomalyReport],
) -> Result<(crate::rcl::InterventionGraph, RootCauseRanking), CliError> {
    let times: Vec<i64> = reports.iter().map(|r| r.anomaly_time_ms()).collect();
    let window: Vec<Event> = match extended_window_bounds(&times, config.extended_window_secs) {
        Some((start, end)) => events
            .iter()
            .filter(|e| e.time_ms >= start && e.time_ms <= end)
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    let graph = build_graph(&window, reports).map_err(|e| CliError::new(&e.to_string()))?;
    let walk = time_aware_walk(
        &graph,
        &WalkConfig {
            walks_per_anomaly: config.walks,
            rng_seed: config.seed,
        },
    );
    Ok((graph.clone(), rank(&graph, &walk)))
}

fn cmd_localize(
    config: &Config,
    events_path: &Path,
    verdicts_path: &Path,
    out: &Path,
    dot: Option<&Path>,
) -> Result<(), CliError> {
    let mapping = config.mapping();
    let events = read_events(events_path, &mapping)?;
    let verdicts = read_verdicts(verdicts_path)?;
    let reports = collect_reports(&verdicts);
    let (graph, ranking) = run_localization(config, &events, &reports)?;
    write_file(
        out,
        &(serde_json::to_string_pretty(&ranking.entries).unwrap() + "\n"),
    )?;
    if let Some(dot_path) = dot {
        write_file(dot_path, &crate::rcl::export_graph(&graph, &ranking, ExportFormat::Dot))?;
    }
    write_provenance(
        out,
        "localize",
        config,
        json!({
            "anomalies": reports.len(),
            "no_actor_reached": ranking.no_actor_reached,
        }),
    )
}

fn cmd_simulate(config: &Config, kind: IncidentKind, out_dir: &Path) -> Result<(), CliError> {
    let mapping = config.mapping();
    let case = simulate(kind, config.seed, &config.scale())
        .map_err(|e| CliError::new(&e.to_string()))?;
    ensure_dir(out_dir)?;
    let ndjson = |events: &[Event]| -> String {
        events
            .iter()
            .map(|e| e.to_json(&mapping).to_string() + "\n")
            .collect()
    };
    write_file(&out_dir.join("train.ndjson"), &ndjson(&case.train_events))?;
    write_file(&out_dir.join("test.ndjson"), &ndjson(&case.test_events))?;
    write_file(
        &out_dir.join("truth.json"),
        &(serde_json::to_string_pretty(&case.truth).unwrap() + "\n"),
    )?;
    write_provenance(
        out_dir,
        "simulate",
        config,
        json!({
            "kind": case.kind,
            "seed": case.seed,
            "train_events": case.train_events.len(),
            "test_events": case.test_events.len(),
        }),
    )
}

fn cmd_eval(
    config: &Config,
    truth_path: &Path,
    verdicts_path: &Path,
    rankings_path: &Path,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let truth: GroundTruth = serde_json::from_str(&read_file(truth_path)?)
        .map_err(|e| CliError::with_path(format!("bad truth file: {e}"), truth_path))?;
    let verdicts = read_verdicts(verdicts_path)?;
    let entries: Vec<RankEntry> = serde_json::from_str(&read_file(rankings_path)?)
        .map_err(|e| CliError::with_path(format!("bad ranking file: {e}"), rankings_path))?;

    let y_pred = verdicts.iter().any(|v| v.y);
    let mut metrics = detection_metrics(&[y_pred], &[truth.label])
        .map_err(|e| CliError::new(&e.to_string()))?;
    if !truth.root_cause_actors.is_empty() {
        let case: RclCase = (
            entries.iter().map(|e| e.actor.clone()).collect(),
            truth.root_cause_actors.clone(),
        );
        for k in 1..=3 {
            let ac = ac_at_k(std::slice::from_ref(&case), k)
                .map_err(|e| CliError::new(&e.to_string()))?;
            let avg = avg_at_k(std::slice::from_ref(&case), k)
                .map_err(|e| CliError::new(&e.to_string()))?;
            metrics.ac_at.insert(k, ac);
            metrics.avg_at.insert(k, avg);
        }
    }
    let doc = json!({
        "metrics": metrics,
        "config": config,
    });
    let text = serde_json::to_string_pretty(&doc).unwrap() + "\n";
    match out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_export_graph(
    config: &Config,
    events_path: &Path,
    verdicts_path: &Path,
    format: FormatArg,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mapping = config.mapping();
    let events = read_events(events_path, &mapping)?;
    let verdicts = read_verdicts(verdicts_path)?;
    let reports = collect_reports(&verdicts);
    let (graph, ranking) = run_localization(config, &events, &reports)?;
    let format = match format {
        FormatArg::Dot => ExportFormat::Dot,
        FormatArg::Json => ExportFormat::Json,
    };
    let text = crate::rcl::export_graph(&graph, &ranking, format);
    match out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// Used by integration tests to exercise the CLI in-process.
#[doc(hidden)]
pub fn run_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match dispatch(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("{}", json!({ "error": e.message, "path": e.path.as_ref().map(|p| p.display().to_string()) }));
                1
            }
        },
        Err(err) => {
            let _ = err.print();
            if err.exit_code() == 0 {
                0
            } else {
                2
            }
        }
    }
}
