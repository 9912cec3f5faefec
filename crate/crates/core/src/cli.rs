//! Command-line front end. Each subcommand reads and writes the file formats
//! of the module it wraps.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 acquisition
//! failure, 4 QBER above the limit, 5 reconciliation not verified.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::linkmodel::{background_grid, write_sweep_csv, LinkModel};
use crate::params::ParamFile;
use crate::pipeline::{
    amplify_key, key_block_ranges, read_reconciled, reconcile_block, run_pipeline, write_reconciled, KeyBlockReport,
    KeyOutcome, SessionConfig,
};
use crate::postproc::FinalKey;
use crate::protocol::{Endpoint, ProtocolError, Role, TcpTransport};
use crate::sidechannel::{analyze_pairs, asymmetry_stats, build_matrix, CorrelationMatrix};
use crate::sifter::{find_coincidences, read_sifted, sift, write_sifted};
use crate::simulator::{read_stream, simulate_session, write_stream, Party, SimConfig, TimestampStream};
use crate::timesync::{lock, track_stream, OffsetTimeline, SyncError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("acquisition failed: {0}")]
    Acquisition(String),
    #[error("QBER above the limit in every key block; no key produced")]
    QberLimit,
    #[error("reconciliation could not be verified; no key produced")]
    Verification,
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Acquisition(_) => 3,
            CliError::QberLimit => 4,
            CliError::Verification => 5,
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn sync_error(e: SyncError) -> CliError {
    match e {
        SyncError::AcquisitionFailed { .. } | SyncError::InsufficientData(_) => CliError::Acquisition(e.to_string()),
        e => other(e),
    }
}

#[derive(Debug, Parser)]
#[command(name = "qkdlink", version, about = "Entanglement-based QKD link: model, simulator and post-processing")]
pub struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analytic rate and QBER model.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Simulate a session and write both timestamp files.
    Simulate(SimulateArgs),
    /// Recover the clock offset between two timestamp files.
    Sync(SyncArgs),
    /// Find coincidences and write the sifted keys.
    Sift(SiftArgs),
    /// Sample the QBER and run CASCADE on sifted keys.
    Reconcile(ReconcileArgs),
    /// Privacy amplification of reconciled keys.
    Amplify(AmplifyArgs),
    /// One side of a networked session.
    Endpoint(EndpointArgs),
    /// Side-channel analysis of a correlation matrix or a pair of streams.
    Analyze(AnalyzeArgs),
    /// Simulate (or read) a session and run every stage.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Subcommand)]
pub enum ModelCmd {
    /// Sifted rate and QBER over a background grid, as CSV.
    Sweep {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1e3)]
        rbg_min: f64,
        #[arg(long, default_value_t = 1e7)]
        rbg_max: f64,
        #[arg(long, default_value_t = 41)]
        points: usize,
        /// Logarithmic grid.
        #[arg(long)]
        log: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Background rate at which the QBER reaches the limit.
    Threshold {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0.11)]
        q_limit: f64,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub out_a: PathBuf,
    #[arg(long)]
    pub out_b: PathBuf,
    /// Ground-truth pair CSV.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyncArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Tracked offset timeline CSV.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SiftArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Offset timeline from `sync`; acquired afresh when absent.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
    #[arg(long)]
    pub out_a: PathBuf,
    #[arg(long)]
    pub out_b: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconcileArgs {
    /// Side-A sifted key.
    #[arg(long)]
    pub a: PathBuf,
    /// Side-B sifted key.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_a: PathBuf,
    #[arg(long)]
    pub out_b: PathBuf,
}

#[derive(Debug, Args)]
pub struct AmplifyArgs {
    /// Reconciled key from `reconcile`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draw matrix seeds from the operating system.
    #[arg(long)]
    pub live: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Accounting CSV; defaults to the key path with `.csv` appended.
    #[arg(long)]
    pub accounting: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EndpointArgs {
    #[arg(long)]
    pub role: Role,
    #[arg(long, conflicts_with = "connect", required_unless_present = "connect")]
    pub listen: Option<String>,
    #[arg(long)]
    pub connect: Option<String>,
    /// Own timestamp file.
    #[arg(long, conflicts_with = "simulate", required_unless_present = "simulate")]
    pub stream: Option<PathBuf>,
    /// Simulate the session from this config and keep one side of it.
    #[arg(long)]
    pub simulate: Option<PathBuf>,
    /// Side kept from a simulation (a|b); the sender takes b by default.
    #[arg(long)]
    pub side: Option<String>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub live: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Correlation matrix CSV.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub matrix: Option<PathBuf>,
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Residual histogram bin for the timing analysis (s).
    #[arg(long, default_value_t = 125e-12)]
    pub bin_width: f64,
    /// Write the measured matrix here.
    #[arg(long)]
    pub matrix_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Session and simulator parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Recorded side-A stream instead of a simulation.
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub accounting: Option<PathBuf>,
}

fn load_params(path: Option<&Path>, seed: Option<u64>) -> Result<ParamFile, CliError> {
    let mut p = match path {
        Some(p) => ParamFile::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => ParamFile::default(),
    };
    if let Some(s) = seed {
        p.set("seed", s);
    }
    Ok(p)
}

fn session_config(p: &ParamFile) -> Result<SessionConfig, CliError> {
    SessionConfig::from_params(p).map_err(|e| CliError::Usage(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| other(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn read_ts(path: &Path) -> Result<TimestampStream, CliError> {
    read_stream(path).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn accounting_path(key: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        let mut s = key.as_os_str().to_owned();
        s.push(".csv");
        PathBuf::from(s)
    })
}

/// Maps an empty key to the code of the reason it is empty.
fn key_outcome(blocks: &[KeyBlockReport], key: &FinalKey) -> Result<(), CliError> {
    if key.n_out() > 0 {
        return Ok(());
    }
    if blocks.iter().any(|b| b.outcome == KeyOutcome::Failed) {
        return Err(CliError::Verification);
    }
    if blocks.iter().any(|b| b.outcome == KeyOutcome::Paused) {
        return Err(CliError::QberLimit);
    }
    Ok(())
}

fn cmd_model(cmd: ModelCmd, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        ModelCmd::Sweep {
            params,
            rbg_min,
            rbg_max,
            points,
            log,
            out: path,
        } => {
            let p = load_params(params.as_deref(), None)?;
            let model = LinkModel::from_params(&p).map_err(|e| CliError::Usage(e.to_string()))?;
            let grid = background_grid(rbg_min, rbg_max, points, log).map_err(|e| CliError::Usage(e.to_string()))?;
            let rows = model.sweep(&grid).map_err(other)?;
            match path {
                Some(path) => write_sweep_csv(&rows, create(&path)?).map_err(other),
                None => write_sweep_csv(&rows, out).map_err(other),
            }
        }
        ModelCmd::Threshold { params, q_limit } => {
            let p = load_params(params.as_deref(), None)?;
            let model = LinkModel::from_params(&p).map_err(|e| CliError::Usage(e.to_string()))?;
            let r = model.background_threshold(q_limit).map_err(other)?;
            writeln!(out, "background threshold for QBER {q_limit}: {r:.6e} cps").map_err(other)
        }
    }
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut p = load_params(a.config.as_deref(), a.seed)?;
    if let Some(d) = a.duration {
        p.set("duration", d);
    }
    let cfg = SimConfig::from_params(&p).map_err(|e| CliError::Usage(e.to_string()))?;
    let s = simulate_session(&cfg).map_err(other)?;
    write_stream(&s.a, &a.out_a).map_err(other)?;
    write_stream(&s.b, &a.out_b).map_err(other)?;
    if let Some(t) = &a.truth {
        s.truth.save(t).map_err(other)?;
    }
    writeln!(
        out,
        "side A: {} events, side B: {} events, {} true pairs{}",
        s.a.len(),
        s.b.len(),
        s.truth.pairs.len(),
        if s.truth.saturation_warning { " (detectors saturated)" } else { "" }
    )
    .map_err(other)
}

fn timeline_for(a: &TimestampStream, b: &TimestampStream, cfg: &SessionConfig) -> Result<OffsetTimeline, CliError> {
    let est = lock(a, b, &cfg.sync).map_err(sync_error)?;
    let (tl, _) = track_stream(a, b, &est, &cfg.sync).map_err(sync_error)?;
    Ok(tl)
}

fn cmd_sync(a: SyncArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = session_config(&load_params(a.params.as_deref(), None)?)?;
    let (sa, sb) = (read_ts(&a.a)?, read_ts(&a.b)?);
    let est = lock(&sa, &sb, &cfg.sync).map_err(sync_error)?;
    let (tl, last) = track_stream(&sa, &sb, &est, &cfg.sync).map_err(sync_error)?;
    writeln!(
        out,
        "offset {:.6e} s at t_A = {:.3} s, drift {:.3e}, confidence {:.1}",
        est.offset, est.epoch, est.freq_drift, est.confidence
    )
    .map_err(other)?;
    writeln!(out, "tracked offset at end {:.6e} s, drift {:.3e}", last.offset, last.freq_drift).map_err(other)?;
    if let Some(path) = &a.timeline {
        tl.write_csv(create(path)?).map_err(other)?;
    }
    Ok(())
}

fn cmd_sift(a: SiftArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = session_config(&load_params(a.params.as_deref(), None)?)?;
    let (sa, sb) = (read_ts(&a.a)?, read_ts(&a.b)?);
    let tl = match &a.timeline {
        Some(p) => OffsetTimeline::read_csv(&read_text(p)?).map_err(|e| CliError::Usage(e.to_string()))?,
        None => timeline_for(&sa, &sb, &cfg)?,
    };
    let pairs = find_coincidences(&sa, &sb, &tl, cfg.tau_c);
    let (ka, kb) = sift(&pairs, &sa);
    write_sifted(&ka, create(&a.out_a)?).map_err(other)?;
    write_sifted(&kb, create(&a.out_b)?).map_err(other)?;
    writeln!(
        out,
        "{} coincidences, {} sifted (fraction {:.4})",
        pairs.len(),
        ka.len(),
        ka.counts.sift_fraction()
    )
    .map_err(other)
}

fn cmd_reconcile(a: ReconcileArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = session_config(&load_params(a.params.as_deref(), a.seed)?)?;
    let ka = read_sifted(&read_text(&a.a)?, Some(Party::A)).map_err(other)?;
    let kb = read_sifted(&read_text(&a.b)?, Some(Party::B)).map_err(other)?;
    if ka.len() != kb.len() {
        return Err(CliError::Usage(format!("sifted keys differ in length: {} vs {}", ka.len(), kb.len())));
    }
    let mut reports = Vec::new();
    let mut done = Vec::new();
    for (j, r) in key_block_ranges(ka.len(), &cfg).into_iter().enumerate() {
        let (rep, rec) =
            reconcile_block(&ka.bits[r.clone()], &kb.bits[r.clone()], &ka.bases[r], j as u64, &cfg).map_err(other)?;
        let q = rep.qber.map_or(String::from("-"), |q| format!("{:.4}", q.q()));
        writeln!(out, "block {j}: {} sifted, qber {q}, {}, leak {}", rep.sifted, rep.outcome, rep.leak_ec)
            .map_err(other)?;
        if rec.is_none() && rep.outcome == KeyOutcome::Discarded {
            log::warn!("block {j} too short");
        }
        reports.push(rep);
        done.extend(rec);
    }
    let side = |pick: fn(&crate::pipeline::Reconciled) -> &crate::postproc::ReconciledKey| {
        done.iter().map(|r| (r.block, r.qber, pick(r))).collect::<Vec<_>>()
    };
    write_reconciled(&side(|r| &r.a), create(&a.out_a)?).map_err(other)?;
    write_reconciled(&side(|r| &r.b), create(&a.out_b)?).map_err(other)?;
    if done.is_empty() {
        if reports.iter().any(|b| b.outcome == KeyOutcome::Failed) {
            return Err(CliError::Verification);
        }
        if reports.iter().any(|b| b.outcome == KeyOutcome::Paused) {
            return Err(CliError::QberLimit);
        }
    }
    Ok(())
}

fn cmd_amplify(a: AmplifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = session_config(&load_params(a.params.as_deref(), a.seed)?)?;
    cfg.live_entropy = a.live;
    let blocks = read_reconciled(&read_text(&a.input)?).map_err(CliError::Usage)?;
    let mut key = FinalKey::default();
    for (block, qber, rk) in &blocks {
        key.append(amplify_key(rk, *qber, *block, &cfg).map_err(other)?);
    }
    key.save(&a.out, accounting_path(&a.out, a.accounting.as_ref())).map_err(other)?;
    writeln!(out, "{} blocks, {} bits in, {} bits out", blocks.len(), key.n_in(), key.n_out()).map_err(other)
}

fn cmd_endpoint(a: EndpointArgs, out: &mut dyn Write) -> Result<(), CliError> {
    // A simulation config also carries the session keys and wins over --params.
    let p = load_params(a.simulate.as_deref().or(a.params.as_deref()), a.seed)?;
    let mut cfg = session_config(&p)?;
    cfg.live_entropy = a.live;
    let stream = match (&a.stream, &a.simulate) {
        (Some(path), _) => read_ts(path)?,
        (None, Some(_)) => {
            let sim = SimConfig::from_params(&p).map_err(|e| CliError::Usage(e.to_string()))?;
            let s = simulate_session(&sim).map_err(other)?;
            let side = a.side.as_deref().unwrap_or(match a.role {
                Role::Sender => "b",
                Role::Receiver => "a",
            });
            match side {
                "a" => s.a,
                "b" => s.b,
                _ => return Err(CliError::Usage(format!("unknown side `{side}` (a|b)"))),
            }
        }
        (None, None) => return Err(CliError::Usage("need --stream or --simulate".into())),
    };
    let mut transport = match (&a.listen, &a.connect) {
        (Some(addr), _) => {
            let l = TcpListener::bind(addr).map_err(|e| other(format!("{addr}: {e}")))?;
            TcpTransport::accept(&l).map_err(other)?
        }
        (None, Some(addr)) => TcpTransport::connect(addr.as_str()).map_err(|e| other(format!("{addr}: {e}")))?,
        (None, None) => return Err(CliError::Usage("need --listen or --connect".into())),
    };
    let mut ep = Endpoint::new(a.role, stream, cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = ep.run(&mut transport).map_err(|e: ProtocolError| other(e))?;
    report
        .key
        .save(&a.out, accounting_path(&a.out, None))
        .map_err(other)?;
    if let Some(path) = &a.stats {
        report.write_stats(create(path)?).map_err(other)?;
    }
    writeln!(out, "{report}").map_err(other)?;
    if !report.chunks.iter().any(|c| c.locked) {
        return Err(CliError::Acquisition("no chunk could be locked".into()));
    }
    key_outcome(&report.blocks, &report.key)
}

fn cmd_analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = match (&a.matrix, &a.a, &a.b) {
        (Some(path), _, _) => {
            let m = CorrelationMatrix::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
            writeln!(out, "{} correlated events", m.total()).map_err(other)?;
            asymmetry_stats(&m).map_err(other)?
        }
        (None, Some(pa), Some(pb)) => {
            let cfg = session_config(&load_params(a.params.as_deref(), None)?)?;
            let (sa, sb) = (read_ts(pa)?, read_ts(pb)?);
            let tl = timeline_for(&sa, &sb, &cfg)?;
            let pairs = find_coincidences(&sa, &sb, &tl, cfg.tau_c);
            let m = build_matrix(&pairs);
            if let Some(path) = &a.matrix_out {
                m.write_csv(create(path)?).map_err(other)?;
            }
            writeln!(out, "{} coincidences", pairs.len()).map_err(other)?;
            let (rep, timing) = analyze_pairs(&pairs, a.bin_width).map_err(other)?;
            for c in &timing.insufficient {
                log::warn!("too few pairs for timing histogram {c:?}");
            }
            rep
        }
        _ => return Err(CliError::Usage("need --matrix or both --a and --b".into())),
    };
    writeln!(out, "{report}").map_err(other)
}

fn cmd_pipeline(a: PipelineArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let p = load_params(a.config.as_deref(), a.seed)?;
    let cfg = session_config(&p)?;
    let (sa, sb) = match (&a.a, &a.b) {
        (Some(pa), Some(pb)) => (read_ts(pa)?, read_ts(pb)?),
        _ => {
            let sim = SimConfig::from_params(&p).map_err(|e| CliError::Usage(e.to_string()))?;
            let s = simulate_session(&sim).map_err(other)?;
            (s.a, s.b)
        }
    };
    let report = run_pipeline(&sa, &sb, &cfg).map_err(|e| match e {
        crate::pipeline::PipelineError::Sync(s) => sync_error(s),
        e => other(e),
    })?;
    writeln!(out, "{report}").map_err(other)?;
    if let Some(path) = &a.out {
        report
            .key_a
            .save(path, accounting_path(path, a.accounting.as_ref()))
            .map_err(other)?;
    }
    key_outcome(&report.blocks, &report.key_a)
}

/// Executes one command line and returns the process exit code. Normal
/// output goes to `out`, diagnostics to standard error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).try_init();
    let result = match cli.command {
        Command::Model(c) => cmd_model(c, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Sync(a) => cmd_sync(a, out),
        Command::Sift(a) => cmd_sift(a, out),
        Command::Reconcile(a) => cmd_reconcile(a, out),
        Command::Amplify(a) => cmd_amplify(a, out),
        Command::Endpoint(a) => cmd_endpoint(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Pipeline(a) => cmd_pipeline(a, out),
    };
    let _ = out.flush();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

/// [`run`] on the process arguments with output to standard output.
pub fn main_with_args() -> i32 {
    run(std::env::args_os(), &mut io::stdout().lock())
}
