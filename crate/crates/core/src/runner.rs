//! Run orchestration and on-disk artifacts.
//!
//! A run takes a validated [`Scenario`], executes it to the horizon, and
//! reduces the flow ledger into a fixed artifact set inside one output
//! directory:
//!
//! * `flows.csv`      — one row per monitored flow, every derived metric
//! * `summary.json`   — run-level aggregates, warning delivery report
//! * `sinr_hist.csv`  — 1 dB SINR histogram of counted receptions
//! * `config.cfg`     — the resolved configuration, canonical form
//! * `manifest.json`  — config hash, seed, artifact list, wall-clock runtime
//!
//! Everything except the manifest is byte-deterministic for a given
//! configuration and seed; the manifest carries wall-clock runtime and is
//! therefore excluded from determinism comparisons.
//!
//! A sweep re-runs a base scenario across one axis (`speed`, `rate_vpm`,
//! or `stack`), each point under its own subdirectory with an independent
//! per-point seed, and collects `sweep.csv` in long form: one row per
//! (value, stack, metric). Failed points are recorded and do not stop the
//! remaining points. Worker threads only change wall-clock time, never any
//! artifact byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::{json, Value};
use thiserror::Error;

use crate::apps::{DelayBreakdown, FcwDelivery};
use crate::engine::derive_run_seed;
use crate::flowmon::{FlowClass, FlowStats, SinrHistogram, StackTag};
use crate::mobility::NodeId;
use crate::scenario::{AppSel, Scenario, ScenarioError, StackSel};

/// Hard end-to-end budget for a forward collision warning.
pub const FCW_BUDGET_MS: f64 = 200.0;
/// Receiver bitrate band, in Kbit/s, that marks a collection flow as able to
/// carry an HD video stream.
pub const HD_BAND_KBPS: (f64, f64) = (1200.0, 4000.0);

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no run artifacts under {dir}: expected {dir}/summary.json or {dir}/sweep.csv", dir = .dir.display())]
    MissingArtifact { dir: PathBuf },
    #[error("{path}: {message}", path = .path.display())]
    Malformed { path: PathBuf, message: String },
    #[error("sweep needs at least one axis value")]
    EmptySweep,
}

impl RunnerError {
    /// Process exit code: 2 for usage/configuration mistakes the caller can
    /// fix by editing arguments, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Scenario(ScenarioError::Config(_))
            | RunnerError::Scenario(ScenarioError::MissingTrace(_))
            | RunnerError::MissingArtifact { .. }
            | RunnerError::EmptySweep => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Load a scenario from a configuration file on disk.
pub fn load_scenario(path: &Path) -> Result<Scenario, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Scenario::from_text(&text).map_err(ScenarioError::from)?)
}

/// Warning delivery to a single follower, resolved for reporting.
#[derive(Debug, Clone)]
pub struct FollowerReport {
    pub node: NodeId,
    pub label: String,
    pub delivery: Option<FcwDelivery>,
}

/// Outcome of the forward-collision-warning exchange in one run.
#[derive(Debug, Clone)]
pub struct FcwReport {
    pub stack: StackTag,
    pub trigger_s: f64,
    pub warning_bytes: u64,
    pub followers: Vec<FollowerReport>,
}

impl FcwReport {
    pub fn all_delivered(&self) -> bool {
        self.followers.iter().all(|f| f.delivery.is_some())
    }

    /// Worst delivered end-to-end delay, in milliseconds.
    pub fn max_delay_ms(&self) -> Option<f64> {
        self.followers
            .iter()
            .filter_map(|f| f.delivery.as_ref())
            .map(|d| d.delay_us as f64 / 1e3)
            .fold(None, |acc, d| Some(acc.map_or(d, |a: f64| a.max(d))))
    }

    /// Difference between the slowest and fastest delivered warning, in
    /// milliseconds. `None` with fewer than two deliveries.
    pub fn delay_spread_ms(&self) -> Option<f64> {
        let delays: Vec<u64> = self
            .followers
            .iter()
            .filter_map(|f| f.delivery.as_ref().map(|d| d.delay_us))
            .collect();
        if delays.len() < 2 {
            return None;
        }
        let max = *delays.iter().max().expect("non-empty");
        let min = *delays.iter().min().expect("non-empty");
        Some((max - min) as f64 / 1e3)
    }
}

/// Everything a finished run needs for artifacts, reports, and assertions.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub duration_s: f64,
    pub stack: StackSel,
    pub app: AppSel,
    pub config_hash: u64,
    /// Canonical configuration text, as written to `config.cfg`.
    pub config_text: String,
    pub flows: Vec<FlowStats>,
    pub fcw: Option<FcwReport>,
    pub hist: SinrHistogram,
    pub events: u64,
    pub wall_ms: u64,
}

impl RunResult {
    /// Flows carrying application data (excludes safety beacons/warnings).
    pub fn data_flows(&self) -> impl Iterator<Item = &FlowStats> {
        self.flows
            .iter()
            .filter(|f| matches!(f.class, FlowClass::Data | FlowClass::CbrUplink))
    }
}

/// Execute a scenario to its horizon and gather the results.
pub fn execute(sc: &Scenario) -> Result<RunResult, ScenarioError> {
    let mut sim = sc.build()?;
    let started = Instant::now();
    sim.run();
    let wall_ms = started.elapsed().as_millis() as u64;
    let fcw = sim.fcw.as_ref().map(|state| FcwReport {
        stack: state.stack,
        trigger_s: sc.fcw.trigger_s,
        warning_bytes: state.warning_bytes,
        followers: state
            .followers
            .iter()
            .map(|&node| FollowerReport {
                node,
                label: sim.world.label(node).to_string(),
                delivery: state.deliveries.get(&node).copied(),
            })
            .collect(),
    });
    Ok(RunResult {
        seed: sc.seed,
        duration_s: sc.duration_s,
        stack: sc.stack,
        app: sc.app,
        config_hash: sc.config_hash(),
        config_text: sc.dump(),
        flows: sim.fm.flows().to_vec(),
        fcw,
        hist: sim.fm.sinr_histogram(1.0),
        events: sim.q.executed(),
        wall_ms,
    })
}

/// Execute a scenario and write the full artifact set under `dir`.
pub fn run_to_dir(sc: &Scenario, dir: &Path) -> Result<RunResult, RunnerError> {
    let result = execute(sc)?;
    write_artifacts(&result, dir)?;
    Ok(result)
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt6(x: Option<f64>) -> String {
    x.map(f6).unwrap_or_default()
}

fn ratio(part: u64, whole: u64) -> Option<f64> {
    (whole > 0).then(|| part as f64 / whole as f64)
}

fn mean_sinr_db(flow: &FlowStats) -> Option<f64> {
    if flow.sinr_samples.is_empty() {
        return None;
    }
    let sum: f64 = flow.sinr_samples.iter().map(|&s| s as f64).sum();
    Some(sum / flow.sinr_samples.len() as f64)
}

/// Column layout of `flows.csv`. Kept in one place so writers and readers
/// (the report command, tests) cannot drift apart.
pub const FLOWS_CSV_HEADER: &str = "src,dst,flow_id,class,stack,tx_packets,rx_packets,\
lost_packets,tx_bytes,rx_bytes,loss_ratio,mean_delay_ms,rx_kbps,tx_kbps,rx_kbps_active,\
mean_packet_size_bytes,mean_sinr_db,first_tx_s,last_rx_s";

fn flows_csv(result: &RunResult) -> String {
    let mut out = String::from(FLOWS_CSV_HEADER);
    out.push('\n');
    for f in &result.flows {
        let tx_kbps = f.tx_bytes as f64 * 8.0 / 1e3 / result.duration_s;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f.key.src,
            f.key.dst,
            f.key.flow_id,
            f.class.as_str(),
            f.stack.as_str(),
            f.tx_packets,
            f.rx_packets,
            f.lost_packets,
            f.tx_bytes,
            f.rx_bytes,
            opt6(ratio(f.lost_packets, f.tx_packets)),
            opt6(f.mean_delay_ms()),
            f6(f.rx_kbps(result.duration_s)),
            f6(tx_kbps),
            opt6(f.rx_kbps_active()),
            opt6(f.mean_packet_size()),
            opt6(mean_sinr_db(f)),
            opt6(f.first_tx.map(|t| t.as_micros() as f64 / 1e6)),
            opt6(f.last_rx.map(|t| t.as_micros() as f64 / 1e6)),
        );
    }
    out
}

/// One flow as a JSON object, same columns and derived metrics as
/// [`FLOWS_CSV_HEADER`] but with typed numbers (`null` where the CSV
/// leaves a field empty).
pub fn flow_json(f: &FlowStats, duration_s: f64) -> Value {
    json!({
        "src": f.key.src.to_string(),
        "dst": f.key.dst.to_string(),
        "flow_id": f.key.flow_id,
        "class": f.class.as_str(),
        "stack": f.stack.as_str(),
        "tx_packets": f.tx_packets,
        "rx_packets": f.rx_packets,
        "lost_packets": f.lost_packets,
        "tx_bytes": f.tx_bytes,
        "rx_bytes": f.rx_bytes,
        "loss_ratio": ratio(f.lost_packets, f.tx_packets),
        "mean_delay_ms": f.mean_delay_ms(),
        "rx_kbps": f.rx_kbps(duration_s),
        "tx_kbps": f.tx_bytes as f64 * 8.0 / 1e3 / duration_s,
        "rx_kbps_active": f.rx_kbps_active(),
        "mean_packet_size_bytes": f.mean_packet_size(),
        "mean_sinr_db": mean_sinr_db(f),
        "first_tx_s": f.first_tx.map(|t| t.as_micros() as f64 / 1e6),
        "last_rx_s": f.last_rx.map(|t| t.as_micros() as f64 / 1e6),
    })
}

fn sinr_hist_csv(hist: &SinrHistogram) -> String {
    let mut out = String::from("bin_low_db,count\n");
    for (&idx, &count) in &hist.counts {
        let _ = writeln!(out, "{},{}", f6(idx as f64 * hist.bin_db), count);
    }
    out
}

fn breakdown_json(b: &DelayBreakdown) -> Value {
    match *b {
        DelayBreakdown::Dsrc {
            contention_us,
            airtime_us,
        } => json!({ "contention": contention_us, "airtime": airtime_us }),
        DelayBreakdown::Mmwave {
            uplink_wait_us,
            uplink_air_us,
            processing_us,
            downlink_wait_us,
            downlink_air_us,
        } => json!({
            "uplink_wait": uplink_wait_us,
            "uplink_air": uplink_air_us,
            "processing": processing_us,
            "downlink_wait": downlink_wait_us,
            "downlink_air": downlink_air_us,
        }),
    }
}

fn stack_totals_json(result: &RunResult, tag: StackTag) -> Option<Value> {
    let totals = crate::flowmon::Totals::over(result.flows.iter().filter(|f| f.stack == tag));
    if totals.flows == 0 {
        return None;
    }
    Some(json!({
        "flows": totals.flows,
        "tx_packets": totals.tx_packets,
        "rx_packets": totals.rx_packets,
        "lost_packets": totals.lost_packets,
        "tx_bytes": totals.tx_bytes,
        "rx_bytes": totals.rx_bytes,
        "loss_ratio": totals.loss_ratio(),
        "mean_delay_ms": totals.mean_delay_ms(),
        "rx_kbps": totals.rx_kbps(result.duration_s),
        "mean_packet_size_bytes": totals.mean_packet_size(),
    }))
}

fn fcw_json(fcw: &FcwReport) -> Value {
    let followers: Vec<Value> = fcw
        .followers
        .iter()
        .map(|f| {
            json!({
                "node": f.node.0,
                "label": f.label,
                "delivered": f.delivery.is_some(),
                "end_to_end_delay_ms": f.delivery.map(|d| d.delay_us as f64 / 1e3),
                "breakdown_us": f.delivery.map(|d| breakdown_json(&d.breakdown)),
            })
        })
        .collect();
    json!({
        "stack": fcw.stack.as_str(),
        "trigger_s": fcw.trigger_s,
        "warning_bytes": fcw.warning_bytes,
        "all_delivered": fcw.all_delivered(),
        "max_delay_ms": fcw.max_delay_ms(),
        "delay_spread_ms": fcw.delay_spread_ms(),
        "budget_ms": FCW_BUDGET_MS,
        "within_budget": fcw.all_delivered()
            && fcw.max_delay_ms().is_some_and(|d| d < FCW_BUDGET_MS),
        "followers": followers,
    })
}

fn datacol_json(result: &RunResult) -> Option<Value> {
    let flows: Vec<&FlowStats> = result.data_flows().collect();
    if flows.is_empty() {
        return None;
    }
    let tx: u64 = flows.iter().map(|f| f.tx_packets).sum();
    let lost: u64 = flows.iter().map(|f| f.lost_packets).sum();
    let rx: u64 = flows.iter().map(|f| f.rx_packets).sum();
    let delay_sum: u64 = flows.iter().map(|f| f.delay_sum_us).sum();
    let rates: Vec<f64> = flows.iter().filter_map(|f| f.rx_kbps_active()).collect();
    let hd = rates
        .iter()
        .filter(|&&r| r >= HD_BAND_KBPS.0 && r <= HD_BAND_KBPS.1)
        .count();
    let rate_stats = (!rates.is_empty()).then(|| {
        let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        json!({ "min": min, "mean": mean, "max": max })
    });
    Some(json!({
        "flows": flows.len(),
        "loss_ratio": ratio(lost, tx),
        "mean_delay_ms": (rx > 0).then(|| delay_sum as f64 / rx as f64 / 1e3),
        "rx_kbps_total": flows.iter().map(|f| f.rx_kbps(result.duration_s)).sum::<f64>(),
        "per_flow_rx_kbps_active": rate_stats,
        "hd_band_kbps": [HD_BAND_KBPS.0, HD_BAND_KBPS.1],
        "hd_capable_flows": hd,
    }))
}

fn sinr_json(hist: &SinrHistogram) -> Option<Value> {
    let (mode_db, mode_count) = hist.mode()?;
    Some(json!({
        "bin_db": hist.bin_db,
        "samples": hist.total,
        "mode_db": mode_db,
        "mode_count": mode_count,
        "mode_offset_from_50_db": mode_db - 50.0,
    }))
}

/// The JSON document written to `summary.json`.
pub fn summary_json(result: &RunResult) -> Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": result.seed,
        "config_hash": format!("{:016x}", result.config_hash),
        "duration_s": result.duration_s,
        "stack": result.stack.as_str(),
        "app": result.app.as_str(),
        "events": result.events,
        "flows": result.flows.len(),
        "totals": {
            "dsrc": stack_totals_json(result, StackTag::Dsrc),
            "mmwave": stack_totals_json(result, StackTag::Mmwave),
        },
        "fcw": result.fcw.as_ref().map(fcw_json),
        "datacol": datacol_json(result),
        "sinr": sinr_json(&result.hist),
    })
}

/// Artifact basenames written by [`write_artifacts`], manifest excluded.
pub const ARTIFACT_NAMES: [&str; 4] = ["config.cfg", "flows.csv", "sinr_hist.csv", "summary.json"];

/// Write the artifact set for a finished run into `dir` (created if needed).
pub fn write_artifacts(result: &RunResult, dir: &Path) -> Result<(), RunnerError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut pretty_summary = serde_json::to_string_pretty(&summary_json(result))
        .expect("summary serialization cannot fail");
    pretty_summary.push('\n');
    let files = [
        ("config.cfg", result.config_text.clone()),
        ("flows.csv", flows_csv(result)),
        ("sinr_hist.csv", sinr_hist_csv(&result.hist)),
        ("summary.json", pretty_summary),
    ];
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(io_err(&path))?;
    }
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": result.seed,
        "config_hash": format!("{:016x}", result.config_hash),
        "artifacts": ARTIFACT_NAMES,
        "runtime_ms": result.wall_ms,
    });
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Which configuration key a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Speed,
    RateVpm,
    Stack,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<SweepAxis> {
        match s {
            "speed" => Some(SweepAxis::Speed),
            "rate_vpm" => Some(SweepAxis::RateVpm),
            "stack" => Some(SweepAxis::Stack),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Speed => "speed",
            SweepAxis::RateVpm => "rate_vpm",
            SweepAxis::Stack => "stack",
        }
    }

    /// Configuration key the axis overrides.
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Speed => "corridor.speed_mph",
            SweepAxis::RateVpm => "corridor.rate_vpm",
            SweepAxis::Stack => "stack",
        }
    }
}

/// One long-form row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: String,
    /// Stack the metric belongs to; empty on FAILED rows.
    pub stack: String,
    pub metric: String,
    pub metric_value: Option<f64>,
    pub status: &'static str,
}

/// Everything a finished sweep produced.
#[derive(Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub failures: usize,
    pub csv_path: PathBuf,
}

fn sanitize_component(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Metric rows contributed by one successful run.
fn point_rows(axis: SweepAxis, value: &str, result: &RunResult) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    let mut push = |stack: &str, metric: &str, v: Option<f64>| {
        rows.push(SweepRow {
            axis: axis.name(),
            value: value.to_string(),
            stack: stack.to_string(),
            metric: metric.to_string(),
            metric_value: v,
            status: "OK",
        });
    };
    for tag in [StackTag::Dsrc, StackTag::Mmwave] {
        let totals = crate::flowmon::Totals::over(result.flows.iter().filter(|f| f.stack == tag));
        if totals.flows == 0 {
            continue;
        }
        push(tag.as_str(), "loss_ratio", totals.loss_ratio());
        push(tag.as_str(), "mean_delay_ms", totals.mean_delay_ms());
        push(tag.as_str(), "rx_kbps", Some(totals.rx_kbps(result.duration_s)));
        let hist = SinrHistogram::from_samples(
            result
                .flows
                .iter()
                .filter(|f| f.stack == tag)
                .flat_map(|f| f.sinr_samples.iter()),
            1.0,
        );
        if let Some((mode_db, _)) = hist.mode() {
            push(tag.as_str(), "sinr_mode_db", Some(mode_db));
        }
    }
    if let Some(fcw) = &result.fcw {
        push(fcw.stack.as_str(), "fcw_max_delay_ms", fcw.max_delay_ms());
    }
    rows
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,stack,metric,metric_value,status\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.stack,
            r.metric,
            opt6(r.metric_value),
            r.status
        );
    }
    out
}

/// Run `base` once per axis value. Each point gets seed
/// `derive_run_seed(base.seed, index)` and writes its artifacts under
/// `out_root/<index>_<axis>_<value>/`; rows come back in axis-value order
/// regardless of `workers`, and a failed point contributes a FAILED row
/// instead of aborting the sweep.
pub fn run_sweep(
    base: &Scenario,
    axis: SweepAxis,
    values: &[String],
    out_root: &Path,
    workers: usize,
) -> Result<SweepReport, RunnerError> {
    if values.is_empty() {
        return Err(RunnerError::EmptySweep);
    }
    std::fs::create_dir_all(out_root).map_err(io_err(out_root))?;

    let outcomes: Mutex<Vec<Option<Result<RunResult, String>>>> =
        Mutex::new(vec![None; values.len()]);
    let cursor = AtomicUsize::new(0);
    let worker_count = workers.clamp(1, values.len());

    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= values.len() {
                    break;
                }
                let outcome = run_sweep_point(base, axis, &values[i], i, out_root);
                outcomes.lock().expect("sweep worker panicked")[i] = Some(outcome);
            });
        }
    });

    let outcomes = outcomes.into_inner().expect("sweep worker panicked");
    let mut rows = Vec::new();
    let mut failures = 0;
    for (value, outcome) in values.iter().zip(outcomes) {
        match outcome.expect("every point visited") {
            Ok(result) => rows.extend(point_rows(axis, value, &result)),
            Err(message) => {
                failures += 1;
                rows.push(SweepRow {
                    axis: axis.name(),
                    value: value.clone(),
                    stack: String::new(),
                    metric: format!("error: {message}"),
                    metric_value: None,
                    status: "FAILED",
                });
            }
        }
    }

    let csv_path = out_root.join("sweep.csv");
    std::fs::write(&csv_path, sweep_csv(&rows)).map_err(io_err(&csv_path))?;
    Ok(SweepReport {
        rows,
        failures,
        csv_path,
    })
}

fn run_sweep_point(
    base: &Scenario,
    axis: SweepAxis,
    value: &str,
    index: usize,
    out_root: &Path,
) -> Result<RunResult, String> {
    let seed = derive_run_seed(base.seed, index as u64);
    let sc = base
        .with_override(axis.key(), value)
        .and_then(|sc| sc.with_override("seed", &seed.to_string()))
        .map_err(|e| e.to_string())?;
    let dir = out_root.join(format!(
        "{index:02}_{}_{}",
        axis.name(),
        sanitize_component(value)
    ));
    run_to_dir(&sc, &dir).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// A rendered report: human-readable text plus the gnuplot data files that
/// were written under `<dir>/plots/`.
#[derive(Debug)]
pub struct ReportOutput {
    pub text: String,
    pub dat_files: Vec<PathBuf>,
}

/// Build a report for a run directory (containing `summary.json`) or a sweep
/// directory (containing `sweep.csv`). Reads artifacts, never rewrites them;
/// plot data lands under `<dir>/plots/` and is identical on every invocation.
pub fn build_report(dir: &Path) -> Result<ReportOutput, RunnerError> {
    let summary_path = dir.join("summary.json");
    let sweep_path = dir.join("sweep.csv");
    if summary_path.is_file() {
        report_single_run(dir, &summary_path)
    } else if sweep_path.is_file() {
        report_sweep(dir, &sweep_path)
    } else {
        Err(RunnerError::MissingArtifact { dir: dir.to_path_buf() })
    }
}

fn malformed(path: &Path, message: impl Into<String>) -> RunnerError {
    RunnerError::Malformed {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn json_f64(v: &Value) -> Option<f64> {
    v.as_f64()
}

fn write_plot(
    plots_dir: &Path,
    name: &str,
    contents: &str,
    dat_files: &mut Vec<PathBuf>,
) -> Result<(), RunnerError> {
    std::fs::create_dir_all(plots_dir).map_err(io_err(plots_dir))?;
    let path = plots_dir.join(name);
    std::fs::write(&path, contents).map_err(io_err(&path))?;
    dat_files.push(path);
    Ok(())
}

fn report_single_run(dir: &Path, summary_path: &Path) -> Result<ReportOutput, RunnerError> {
    let text = std::fs::read_to_string(summary_path).map_err(io_err(summary_path))?;
    let summary: Value =
        serde_json::from_str(&text).map_err(|e| malformed(summary_path, e.to_string()))?;

    let mut out = String::new();
    let mut dat_files = Vec::new();
    let plots_dir = dir.join("plots");

    let _ = writeln!(
        out,
        "Run {} — stack={} app={} seed={} duration={}s",
        summary["config_hash"].as_str().unwrap_or("?"),
        summary["stack"].as_str().unwrap_or("?"),
        summary["app"].as_str().unwrap_or("?"),
        summary["seed"],
        summary["duration_s"],
    );

    out.push_str("\nStack totals:\n");
    let _ = writeln!(
        out,
        "  {:<8} {:>6} {:>10} {:>10} {:>8} {:>8} {:>12} {:>12}",
        "stack", "flows", "tx_pkts", "rx_pkts", "lost", "loss%", "delay_ms", "rx_kbps"
    );
    for tag in ["dsrc", "mmwave"] {
        let t = &summary["totals"][tag];
        if t.is_null() {
            continue;
        }
        let _ = writeln!(
            out,
            "  {:<8} {:>6} {:>10} {:>10} {:>8} {:>8} {:>12} {:>12}",
            tag,
            t["flows"].to_string(),
            t["tx_packets"].to_string(),
            t["rx_packets"].to_string(),
            t["lost_packets"].to_string(),
            json_f64(&t["loss_ratio"]).map(|r| format!("{:.2}", r * 100.0)).unwrap_or_default(),
            json_f64(&t["mean_delay_ms"]).map(|d| format!("{d:.3}")).unwrap_or_default(),
            json_f64(&t["rx_kbps"]).map(|r| format!("{r:.1}")).unwrap_or_default(),
        );
    }

    if let Some(fcw) = summary.get("fcw").filter(|v| !v.is_null()) {
        let _ = writeln!(
            out,
            "\nForward collision warning over {} (budget {FCW_BUDGET_MS} ms):",
            fcw["stack"].as_str().unwrap_or("?")
        );
        let mut plot = String::from("# follower end_to_end_delay_ms\n");
        for f in fcw["followers"].as_array().into_iter().flatten() {
            let label = f["label"].as_str().unwrap_or("?");
            match json_f64(&f["end_to_end_delay_ms"]) {
                Some(delay) => {
                    let verdict = if delay < FCW_BUDGET_MS { "PASS" } else { "FAIL" };
                    let _ = writeln!(out, "  {label:<12} {delay:>10.3} ms  {verdict}");
                    let _ = writeln!(plot, "{label} {delay:.6}");
                }
                None => {
                    let _ = writeln!(out, "  {label:<12} {:>10}  FAIL", "lost");
                    let _ = writeln!(plot, "{label} ?");
                }
            }
        }
        let overall = fcw["within_budget"].as_bool().unwrap_or(false);
        let _ = writeln!(
            out,
            "  overall: {} (max {} ms, spread {} ms)",
            if overall { "PASS" } else { "FAIL" },
            json_f64(&fcw["max_delay_ms"]).map(|d| format!("{d:.3}")).unwrap_or_default(),
            json_f64(&fcw["delay_spread_ms"]).map(|d| format!("{d:.3}")).unwrap_or_default(),
        );
        write_plot(&plots_dir, "fcw_delay.dat", &plot, &mut dat_files)?;
    }

    if let Some(dc) = summary.get("datacol").filter(|v| !v.is_null()) {
        let _ = writeln!(
            out,
            "\nCollection flows (HD band {}–{} kbps):",
            HD_BAND_KBPS.0, HD_BAND_KBPS.1
        );
        let _ = writeln!(
            out,
            "  {} flows, loss {}%, mean delay {} ms",
            dc["flows"],
            json_f64(&dc["loss_ratio"]).map(|r| format!("{:.2}", r * 100.0)).unwrap_or_default(),
            json_f64(&dc["mean_delay_ms"]).map(|d| format!("{d:.3}")).unwrap_or_default(),
        );
        let _ = writeln!(
            out,
            "  {} of {} flows HD-capable",
            dc["hd_capable_flows"], dc["flows"]
        );
        if let Some(rates) = dc.get("per_flow_rx_kbps_active").filter(|v| !v.is_null()) {
            let _ = writeln!(
                out,
                "  active bitrate per flow: min {} / mean {} / max {} kbps",
                json_f64(&rates["min"]).map(|r| format!("{r:.1}")).unwrap_or_default(),
                json_f64(&rates["mean"]).map(|r| format!("{r:.1}")).unwrap_or_default(),
                json_f64(&rates["max"]).map(|r| format!("{r:.1}")).unwrap_or_default(),
            );
        }
        // Per-flow bitrate plot from flows.csv (summary only carries aggregates).
        let flows_path = dir.join("flows.csv");
        if flows_path.is_file() {
            let flows_text = std::fs::read_to_string(&flows_path).map_err(io_err(&flows_path))?;
            let mut plot = String::from("# flow_index rx_kbps_active\n");
            let mut idx = 0usize;
            for line in flows_text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() < 15 || (cols[3] != "DATA" && cols[3] != "CBR_UPLINK") {
                    continue;
                }
                if !cols[14].is_empty() {
                    let _ = writeln!(plot, "{idx} {}", cols[14]);
                }
                idx += 1;
            }
            write_plot(&plots_dir, "flow_bitrate.dat", &plot, &mut dat_files)?;
        }
    }

    if let Some(sinr) = summary.get("sinr").filter(|v| !v.is_null()) {
        let _ = writeln!(
            out,
            "\nSINR: mode {} dB ({} of {} samples), offset from 50 dB: {}",
            sinr["mode_db"], sinr["mode_count"], sinr["samples"], sinr["mode_offset_from_50_db"]
        );
        let hist_path = dir.join("sinr_hist.csv");
        if hist_path.is_file() {
            let hist_text = std::fs::read_to_string(&hist_path).map_err(io_err(&hist_path))?;
            let mut plot = String::from("# bin_low_db count\n");
            for line in hist_text.lines().skip(1) {
                let _ = writeln!(plot, "{}", line.replace(',', " "));
            }
            write_plot(&plots_dir, "sinr_hist.dat", &plot, &mut dat_files)?;
        }
    }

    if !dat_files.is_empty() {
        let _ = writeln!(out, "\nPlot data written under {}", plots_dir.display());
    }
    Ok(ReportOutput { text: out, dat_files })
}

fn report_sweep(dir: &Path, sweep_path: &Path) -> Result<ReportOutput, RunnerError> {
    let text = std::fs::read_to_string(sweep_path).map_err(io_err(sweep_path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "axis,value,stack,metric,metric_value,status" {
        return Err(malformed(sweep_path, "unrecognized sweep.csv header"));
    }

    struct Row {
        value: String,
        stack: String,
        metric: String,
        metric_value: String,
        status: String,
    }
    let mut axis = String::new();
    let mut rows = Vec::new();
    for line in lines {
        // `metric` may contain commas inside an error message; the first four
        // and last two fields are comma-free by construction.
        let cols: Vec<&str> = line.splitn(4, ',').collect();
        if cols.len() != 4 {
            return Err(malformed(sweep_path, format!("bad row: {line}")));
        }
        let tail = cols[3];
        let (metric, rest) = tail.rsplit_once(',').and_then(|(head, status)| {
            head.rsplit_once(',').map(|(metric, value)| (metric, (value, status)))
        })
        .ok_or_else(|| malformed(sweep_path, format!("bad row: {line}")))?;
        axis = cols[0].to_string();
        rows.push(Row {
            value: cols[1].to_string(),
            stack: cols[2].to_string(),
            metric: metric.to_string(),
            metric_value: rest.0.to_string(),
            status: rest.1.to_string(),
        });
    }
    if rows.is_empty() {
        return Err(malformed(sweep_path, "sweep.csv has no data rows"));
    }

    let failed: Vec<&Row> = rows.iter().filter(|r| r.status == "FAILED").collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Sweep over {axis}: {} points, {} failed",
        rows.iter().map(|r| r.value.as_str()).collect::<std::collections::BTreeSet<_>>().len(),
        failed.len()
    );
    let _ = writeln!(
        out,
        "  {:<12} {:<8} {:<20} {:>14} {}",
        "value", "stack", "metric", "metric_value", "status"
    );
    for r in &rows {
        let _ = writeln!(
            out,
            "  {:<12} {:<8} {:<20} {:>14} {}",
            r.value, r.stack, r.metric, r.metric_value, r.status
        );
        if r.metric == "fcw_max_delay_ms" {
            if let Ok(d) = r.metric_value.parse::<f64>() {
                let verdict = if d < FCW_BUDGET_MS { "PASS" } else { "FAIL" };
                let _ = writeln!(
                    out,
                    "  {:<12} {:<8} {:<20} {:>14} {verdict} vs {FCW_BUDGET_MS} ms budget",
                    "", "", "", ""
                );
            }
        }
    }

    // One gnuplot file per (metric, stack): "value metric_value" rows.
    let mut dat_files = Vec::new();
    let plots_dir = dir.join("plots");
    let mut groups: std::collections::BTreeMap<(String, String), String> =
        std::collections::BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == "OK" && !r.metric_value.is_empty()) {
        let entry = groups
            .entry((r.metric.clone(), r.stack.clone()))
            .or_insert_with(|| format!("# {axis} {}\n", r.metric));
        let _ = writeln!(entry, "{} {}", r.value, r.metric_value);
    }
    for ((metric, stack), contents) in &groups {
        let name = format!(
            "{}_{}_vs_{axis}.dat",
            sanitize_component(metric),
            stack.to_ascii_lowercase()
        );
        write_plot(&plots_dir, &name, contents, &mut dat_files)?;
    }
    if !dat_files.is_empty() {
        let _ = writeln!(out, "\nPlot data written under {}", plots_dir.display());
    }
    Ok(ReportOutput { text: out, dat_files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(dir: &Path, name: &str) -> String {
        std::fs::read_to_string(dir.join(name)).expect(name)
    }

    #[test]
    fn identical_runs_write_identical_artifacts() {
        let sc = Scenario::preset("fcw_dsrc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        run_to_dir(&sc, &a).unwrap();
        run_to_dir(&sc, &b).unwrap();
        for name in ["flows.csv", "summary.json", "sinr_hist.csv", "config.cfg"] {
            assert_eq!(read(&a, name), read(&b, name), "{name} must be deterministic");
        }
        // Manifest differs only in wall-clock runtime.
        let m: Value = serde_json::from_str(&read(&a, "manifest.json")).unwrap();
        assert_eq!(m["artifacts"].as_array().unwrap().len(), ARTIFACT_NAMES.len());
        assert!(m["runtime_ms"].is_u64());
    }

    #[test]
    fn flows_csv_rows_match_header_width() {
        let sc = Scenario::preset("fcw_mmwave_1450ft").unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_to_dir(&sc, dir.path()).unwrap();
        let text = read(dir.path(), "flows.csv");
        let width = FLOWS_CSV_HEADER.split(',').count();
        let mut rows = 0;
        for line in text.lines() {
            assert_eq!(line.split(',').count(), width, "row: {line}");
            rows += 1;
        }
        assert!(rows > 1, "expected at least one flow row");
    }

    #[test]
    fn summary_reports_each_follower_delay() {
        let sc = Scenario::preset("fcw_dsrc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let result = run_to_dir(&sc, dir.path()).unwrap();
        let summary: Value = serde_json::from_str(&read(dir.path(), "summary.json")).unwrap();
        let followers = summary["fcw"]["followers"].as_array().unwrap();
        assert_eq!(followers.len(), result.fcw.as_ref().unwrap().followers.len());
        for f in followers {
            assert!(f["delivered"].as_bool().unwrap());
            let delay = f["end_to_end_delay_ms"].as_f64().unwrap();
            assert!(delay > 0.0 && delay < FCW_BUDGET_MS, "delay {delay}");
        }
        assert_eq!(summary["fcw"]["within_budget"], Value::Bool(true));
    }

    #[test]
    fn sweep_continues_past_failed_points_and_orders_rows() {
        let sc = Scenario::preset("fcw_dsrc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<String> = ["dsrc", "both", "mmwave"].iter().map(|s| s.to_string()).collect();
        let report = run_sweep(&sc, SweepAxis::Stack, &values, dir.path(), 2).unwrap();
        assert_eq!(report.failures, 1, "stack=both cannot carry a single warning");
        let failed: Vec<&SweepRow> = report.rows.iter().filter(|r| r.status == "FAILED").collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].value, "both");
        // Row order follows the value list, not thread completion order.
        let first_dsrc = report.rows.iter().position(|r| r.value == "dsrc").unwrap();
        let first_mmw = report.rows.iter().position(|r| r.value == "mmwave").unwrap();
        let failed_pos = report.rows.iter().position(|r| r.status == "FAILED").unwrap();
        assert!(first_dsrc < failed_pos && failed_pos < first_mmw);
        assert!(report.csv_path.is_file());
    }

    #[test]
    fn sweep_artifacts_do_not_depend_on_worker_count() {
        let sc = Scenario::preset("fcw_dsrc").unwrap();
        let values: Vec<String> = ["35", "45", "55"].iter().map(|s| s.to_string()).collect();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("w1"), dir.path().join("w4"));
        run_sweep(&sc, SweepAxis::Speed, &values, &a, 1).unwrap();
        run_sweep(&sc, SweepAxis::Speed, &values, &b, 4).unwrap();
        assert_eq!(read(&a, "sweep.csv"), read(&b, "sweep.csv"));
        for sub in ["00_speed_35", "01_speed_45", "02_speed_55"] {
            assert_eq!(
                read(&a.join(sub), "summary.json"),
                read(&b.join(sub), "summary.json"),
                "{sub}"
            );
        }
    }

    #[test]
    fn empty_sweep_is_a_usage_error() {
        let sc = Scenario::preset("fcw_dsrc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_sweep(&sc, SweepAxis::Speed, &[], dir.path(), 1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn report_flags_latency_budget_and_is_idempotent() {
        let sc = Scenario::preset("fcw_dsrc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_to_dir(&sc, dir.path()).unwrap();
        let first = build_report(dir.path()).unwrap();
        assert!(first.text.contains("PASS"), "report:\n{}", first.text);
        assert!(!first.dat_files.is_empty());
        let second = build_report(dir.path()).unwrap();
        assert_eq!(first.text, second.text, "report must be idempotent");
    }

    #[test]
    fn report_on_sweep_directory_tabulates_points() {
        let sc = Scenario::preset("fcw_dsrc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<String> = ["35", "55"].iter().map(|s| s.to_string()).collect();
        run_sweep(&sc, SweepAxis::Speed, &values, dir.path(), 2).unwrap();
        let report = build_report(dir.path()).unwrap();
        assert!(report.text.contains("Sweep over speed"));
        assert!(report.text.contains("fcw_max_delay_ms"));
        assert!(
            report.dat_files.iter().any(|p| p
                .file_name()
                .is_some_and(|n| n.to_string_lossy().contains("fcw_max_delay_ms"))),
            "expected a delay-vs-speed plot file"
        );
    }

    #[test]
    fn report_without_artifacts_names_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        let err = build_report(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(&dir.path().display().to_string()));
    }

    #[test]
    fn missing_trace_maps_to_usage_exit_code() {
        let text = format!(
            "{}corridor.trace = /nonexistent/trace.csv\ncorridor.rate_vpm = 0\n",
            Scenario::preset_text("datacol_dsrc").unwrap()
        );
        let sc = Scenario::from_text(&text).unwrap();
        let err = run_to_dir(&sc, Path::new("/tmp/unused-runner-test")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/trace.csv"));
    }
}
