//! Command-line entry points: the device simulator, the processing
//! service, offline palate fitting and batch export.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error. Usage errors are
//! detected before anything is opened, bound or written. The log level is
//! read from `ARTICFEED_LOG` (error, warn, info, debug).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::fitting::{fit_palate, Tracker, TrackerConfig};
use crate::geometry::{Mesh, Vec3};
use crate::models::{load_model, Correspondence};
use crate::pipeline::{
    run_session, BroadcastServer, FrameSink, Models, PlaySource, Processor, RecorderSink, SessionConfig,
    SessionOptions, SourceOpener,
};
use crate::stream::{connect_device, read_sweep, serve_device, DeviceSource, DeviceStream, FrameSource, SweepPlayer};
use crate::synthetic::SyntheticSubject;

#[derive(Debug, Parser)]
#[command(
    name = "articfeed",
    version,
    about = "Real-time EMA processing and tongue model fitting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve a recorded sweep or a synthetic subject over EMA-RT/1.
    Simulate(SimulateArgs),
    /// Process a device stream or sweep file and broadcast the results.
    Serve(ServeArgs),
    /// Fit palate weights to a traced sweep.
    FitPalate(FitPalateArgs),
    /// Track a sweep offline and write one mesh per frame.
    Export(ExportArgs),
}

fn positive_rate(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(r) if r.is_finite() && r > 0.0 => Ok(r),
        Ok(r) => Err(format!("rate must be a positive number of Hz, got {r}")),
        Err(e) => Err(e.to_string()),
    }
}

fn seconds(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        Ok(v) => Err(format!("expected seconds >= 0, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Sweep file to play (JSONL or CSV).
    #[arg(required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub sweep: Option<PathBuf>,
    /// Play a synthetic subject generated from this seed instead of a file.
    #[arg(long, value_name = "SEED")]
    pub synthetic: Option<u64>,
    #[arg(long, default_value = "127.0.0.1:7000")]
    pub bind: String,
    /// Advertised rate and default streaming rate (Hz); defaults to the sweep's rate.
    #[arg(long, value_parser = positive_rate)]
    pub rate: Option<f64>,
    /// Synthetic model size: identity modes.
    #[arg(long, default_value_t = 2, requires = "synthetic")]
    pub n: usize,
    /// Synthetic model size: pose modes.
    #[arg(long, default_value_t = 3, requires = "synthetic")]
    pub m: usize,
    /// Synthetic mesh grid size (vertices per side).
    #[arg(long, default_value_t = 20, requires = "synthetic")]
    pub grid: usize,
    /// Number of synthetic frames; unlimited if omitted.
    #[arg(long, requires = "synthetic")]
    pub frames: Option<u64>,
    /// Write the synthetic subject's models and a calibrated session config here.
    #[arg(long, value_name = "DIR", requires = "synthetic")]
    pub models_out: Option<PathBuf>,
    /// Shut down after this many seconds.
    #[arg(long, value_parser = seconds)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// EMA-RT/1 device address.
    #[arg(long, required_unless_present = "file", conflicts_with = "file")]
    pub device: Option<String>,
    /// Sweep file to process.
    #[arg(long)]
    pub file: Option<PathBuf>,
    /// Directory with tongue.json and optionally palate.json.
    #[arg(long)]
    pub models: PathBuf,
    /// Session config (JSON).
    #[arg(long)]
    pub session: PathBuf,
    /// WebSocket address for visualization clients.
    #[arg(long)]
    pub ws: Option<String>,
    /// Directory for the raw and processed recordings.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Streaming rate requested from the device, or playback rate for files.
    #[arg(long, value_parser = positive_rate)]
    pub rate: Option<f64>,
    /// Play files at their recorded rate instead of as fast as possible.
    #[arg(long)]
    pub realtime: bool,
    /// End the session after this many seconds.
    #[arg(long, value_parser = seconds)]
    pub duration: Option<f64>,
    /// Keep serving after the source ends, waiting for clients to play another.
    #[arg(long)]
    pub linger: bool,
    /// Write the session config (with recorded calibration) here on exit.
    #[arg(long)]
    pub save_session: Option<PathBuf>,
    /// Also print key=value metrics to stderr on exit.
    #[arg(long)]
    pub metrics: bool,
}

#[derive(Debug, Args)]
pub struct FitPalateArgs {
    /// PCA palate model (JSON).
    pub model: PathBuf,
    /// Sweep holding the trace in canonical coordinates.
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Coil that traced the palate; defaults to the sweep's first coil.
    #[arg(long)]
    pub coil: Option<String>,
    #[arg(long, default_value_t = crate::pipeline::PALATE_PRIOR_WEIGHT)]
    pub prior: f64,
    #[arg(long, default_value_t = crate::pipeline::PALATE_OUTER_ITERATIONS)]
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Obj,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Bilinear tongue model (JSON).
    pub model: PathBuf,
    pub sweep: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "obj")]
    pub format: ExportFormat,
    /// Session config; frames go through the full pipeline.
    #[arg(long, required_unless_present = "corr", conflicts_with = "corr")]
    pub session: Option<PathBuf>,
    /// Correspondence list (JSON); frames are taken as already normalized.
    #[arg(long)]
    pub corr: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub freeze_after: Option<usize>,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Serve(a) => cmd_serve(&a),
        Command::FitPalate(a) => cmd_fit_palate(&a),
        Command::Export(a) => cmd_export(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("articfeed: {e}");
            e.code()
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("ARTICFEED_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

// One Ctrl-C flag per process; commands poll it.
fn interrupted() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = flag.clone();
        if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install Ctrl-C handler: {e}");
        }
        flag
    })
    .clone()
}

fn wait_until(deadline: Option<Instant>, stop: &AtomicBool, done: impl Fn() -> bool) {
    while !stop.load(Ordering::SeqCst) && !done() && deadline.is_none_or(|d| Instant::now() < d) {
        std::thread::sleep(Duration::from_millis(20));
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    if args.synthetic.is_some() && (args.n == 0 || args.m == 0 || args.grid < 4) {
        return Err(CliError::Usage(
            "synthetic models need n >= 1, m >= 1 and grid >= 4".into(),
        ));
    }
    let (source, rate) = match (&args.sweep, args.synthetic) {
        (Some(path), None) => {
            let (header, frames) = read_sweep(path).map_err(runtime(path.display()))?;
            if frames.is_empty() {
                return Err(CliError::Runtime(format!("{}: sweep has no frames", path.display())));
            }
            let rate = args.rate.unwrap_or(header.rate);
            (DeviceSource::sweep(header, frames), rate)
        }
        (None, Some(seed)) => {
            let mut subject = SyntheticSubject::new(seed, args.n, args.m, args.grid);
            subject.frames = args.frames;
            if let Some(r) = args.rate {
                subject.rate = r;
            }
            if let Some(dir) = &args.models_out {
                subject.write_models(dir).map_err(runtime(dir.display()))?;
                let cfg_path = dir.join("session.json");
                subject
                    .session_config(true)
                    .save(&cfg_path)
                    .map_err(runtime(cfg_path.display()))?;
            }
            let rate = subject.rate;
            (DeviceSource::Synthetic(Arc::new(subject)), rate)
        }
        _ => return Err(CliError::Usage("give either a sweep file or --synthetic SEED".into())),
    };
    let server = serve_device(source, args.bind.as_str(), rate).map_err(runtime(format!("bind {}", args.bind)))?;
    println!("listening on {}", server.local_addr());
    let _ = std::io::stdout().flush();
    let deadline = args.duration.map(|d| Instant::now() + Duration::from_secs_f64(d));
    wait_until(deadline, &interrupted(), || !server.is_running());
    server.shutdown();
    Ok(())
}

fn open_file(path: &Path, rate: Option<f64>, realtime: bool) -> Result<Box<dyn FrameSource>, String> {
    let player = SweepPlayer::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let pace = rate.or(realtime.then(|| player.header().rate));
    Ok(Box::new(match pace {
        Some(r) => player.paced(r),
        None => player,
    }))
}

fn open_device(address: &str, rate: Option<f64>) -> Result<Box<dyn FrameSource>, String> {
    let client = connect_device(address).map_err(|e| format!("device {address}: {e}"))?;
    Ok(Box::new(DeviceStream::new(client, rate)))
}

pub fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    let models = Models::load_dir(&args.models).map_err(runtime(format!("models {}", args.models.display())))?;
    let config = SessionConfig::load(&args.session).map_err(runtime(args.session.display()))?;
    let source = match (&args.device, &args.file) {
        (Some(addr), None) => open_device(addr, args.rate),
        (None, Some(path)) => open_file(path, args.rate, args.realtime),
        _ => return Err(CliError::Usage("give exactly one of --device and --file".into())),
    }
    .map_err(CliError::Runtime)?;

    let mut sinks: Vec<Box<dyn FrameSink>> = Vec::new();
    let mut options = SessionOptions {
        linger: args.linger,
        ..Default::default()
    };
    let server = match &args.ws {
        Some(addr) => {
            let s = BroadcastServer::bind(addr.as_str()).map_err(runtime(format!("bind {addr}")))?;
            eprintln!("broadcasting on ws://{}", s.local_addr());
            sinks.push(Box::new(s.sink()));
            options.control = Some(s.control());
            Some(s)
        }
        None => None,
    };
    if let Some(dir) = &args.record {
        sinks.push(Box::new(RecorderSink::new(dir).map_err(runtime(dir.display()))?));
    }
    let (device, rate, realtime) = (args.device.clone(), args.rate, args.realtime);
    let opener: SourceOpener = Box::new(move |kind, path| {
        let result = match (kind, path, device.as_deref()) {
            (PlaySource::File, Some(p), _) => open_file(Path::new(p), rate, realtime),
            (PlaySource::File, None, _) => Err("play from file needs a path".to_string()),
            (PlaySource::Device, Some(addr), _) | (PlaySource::Device, None, Some(addr)) => open_device(addr, rate),
            (PlaySource::Device, None, None) => Err("no device address configured".to_string()),
        };
        result.map_err(crate::pipeline::PipelineError::InvalidSetting)
    });
    options.opener = Some(opener);

    let stop = options.stop.clone();
    let ctrl_c = interrupted();
    let deadline = args.duration.map(|d| Instant::now() + Duration::from_secs_f64(d));
    let watcher_stop = stop.clone();
    let watcher = std::thread::spawn(move || {
        wait_until(deadline, &ctrl_c, || watcher_stop.load(Ordering::SeqCst));
        watcher_stop.store(true, Ordering::SeqCst);
    });

    let result = run_session(source, config, &models, sinks, options);
    stop.store(true, Ordering::SeqCst);
    let _ = watcher.join();
    drop(server);
    let report = result.map_err(runtime("session"))?;
    if let Some(path) = &args.save_session {
        report.config.save(path).map_err(runtime(path.display()))?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(runtime("report"))?;
    println!("{json}");
    if args.metrics {
        eprint!("{}", report.metrics());
    }
    info!("served {} frames", report.frames);
    Ok(())
}

#[derive(Debug, Serialize)]
struct PalateOutput {
    weights: Vec<f64>,
    mean_residual: f64,
    residual_history: Vec<f64>,
    points: usize,
    coil: String,
}

pub fn cmd_fit_palate(args: &FitPalateArgs) -> Result<(), CliError> {
    if args.prior.is_nan() || args.prior < 0.0 || args.iterations == 0 {
        return Err(CliError::Usage("--prior must be >= 0 and --iterations >= 1".into()));
    }
    let model = load_model(&args.model)
        .and_then(|m| m.into_pca())
        .map_err(runtime(args.model.display()))?;
    let (header, frames) = read_sweep(&args.trace).map_err(runtime(args.trace.display()))?;
    let coil = match &args.coil {
        Some(c) => c.clone(),
        None => header
            .coil_ids
            .first()
            .cloned()
            .ok_or_else(|| CliError::Runtime("trace sweep has no coils".into()))?,
    };
    let trace: Vec<Vec3> = frames.iter().filter_map(|f| f.position(&coil)).collect();
    let fit = fit_palate(&model, &trace, args.prior, args.iterations).map_err(runtime("palate fit"))?;
    let out = PalateOutput {
        weights: fit.weights.iter().copied().collect(),
        mean_residual: fit.mean_residual,
        residual_history: fit.residual_history,
        points: trace.len(),
        coil,
    };
    let json = serde_json::to_string_pretty(&out).map_err(runtime("output"))?;
    std::fs::write(&args.out, json).map_err(runtime(args.out.display()))?;
    println!("mean residual {:.6} mm over {} points", out.mean_residual, out.points);
    Ok(())
}

pub fn cmd_export(args: &ExportArgs) -> Result<(), CliError> {
    let negative = |v: Option<f64>| v.is_some_and(|v| v.is_nan() || v < 0.0);
    if negative(args.alpha) || negative(args.beta) {
        return Err(CliError::Usage("--alpha and --beta must be >= 0".into()));
    }
    if args.freeze_after == Some(0) {
        return Err(CliError::Usage("--freeze-after must be >= 1".into()));
    }
    let tongue = load_model(&args.model)
        .and_then(|m| m.into_multilinear())
        .map_err(runtime(args.model.display()))?;
    let (header, frames) = read_sweep(&args.sweep).map_err(runtime(args.sweep.display()))?;
    std::fs::create_dir_all(&args.out).map_err(runtime(args.out.display()))?;
    let faces = tongue.faces.clone();
    let models = Models::new(tongue, None);

    let mut rows: Vec<WeightsRow> = Vec::with_capacity(frames.len());
    let mut emit =
        |index: usize, t: f64, x: Vec<f64>, y: Vec<f64>, vertices: &[f64], residual: f64| -> Result<(), CliError> {
            let mesh = Mesh::from_flat(vertices, faces.clone()).map_err(runtime("mesh"))?;
            let path = args.out.join(format!("frame_{index:06}.obj"));
            mesh.write_obj(&path).map_err(runtime(path.display()))?;
            rows.push(WeightsRow {
                frame: index,
                t,
                x,
                y,
                residual,
            });
            Ok(())
        };

    match (&args.session, &args.corr) {
        (Some(path), None) => {
            let mut config = SessionConfig::load(path).map_err(runtime(path.display()))?;
            config.delay = 0.0;
            if let Some(a) = args.alpha {
                config.tracking.alpha_prior = a;
            }
            if let Some(b) = args.beta {
                config.tracking.beta_temporal = b;
            }
            if let Some(k) = args.freeze_after {
                config.tracking.freeze_after = k;
            }
            let mut processor = Processor::new(config, &models).map_err(runtime("session"))?;
            processor.begin_source(&header);
            let mut index = 0;
            for f in frames {
                for out in processor.process(f) {
                    let p = out.frame;
                    emit(index, p.t, p.x, p.y, &p.vertices, p.residual)?;
                    index += 1;
                }
            }
            for out in processor.flush() {
                let p = out.frame;
                emit(index, p.t, p.x, p.y, &p.vertices, p.residual)?;
                index += 1;
            }
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(runtime(path.display()))?;
            let corr: Vec<Correspondence> = serde_json::from_str(&text).map_err(runtime(path.display()))?;
            let mut cfg = TrackerConfig::new(corr);
            if let Some(a) = args.alpha {
                cfg.alpha_prior = a;
            }
            if let Some(b) = args.beta {
                cfg.beta_temporal = b;
            }
            if let Some(k) = args.freeze_after {
                cfg.freeze_after = k;
            }
            let mut tracker = Tracker::new(models.tongue.clone(), cfg).map_err(runtime("tracker"))?;
            for (index, f) in frames.iter().enumerate() {
                let coils = f
                    .coils
                    .iter()
                    .filter(|c| c.ok)
                    .map(|c| (c.id.clone(), c.position()))
                    .collect();
                let out = tracker.track(&coils).map_err(runtime(format!("frame {index}")))?;
                let s = tracker.state();
                let residual = if out.diagnostics.held {
                    f64::NAN
                } else {
                    out.diagnostics.residual
                };
                emit(
                    index,
                    f.t,
                    s.x.as_slice().to_vec(),
                    s.y.as_slice().to_vec(),
                    &out.vertices,
                    residual,
                )?;
            }
        }
        _ => return Err(CliError::Usage("give exactly one of --session and --corr".into())),
    }

    write_weights_csv(&args.out.join("weights.csv"), &rows)?;
    println!("wrote {} meshes to {}", rows.len(), args.out.display());
    Ok(())
}

struct WeightsRow {
    frame: usize,
    t: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    residual: f64,
}

fn write_weights_csv(path: &Path, rows: &[WeightsRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime(path.display()))?;
    let (n, m) = rows.first().map(|r| (r.x.len(), r.y.len())).unwrap_or((0, 0));
    let mut head = vec!["frame".to_string(), "t".to_string()];
    head.extend((0..n).map(|i| format!("x{i}")));
    head.extend((0..m).map(|j| format!("y{j}")));
    head.push("residual".into());
    w.write_record(&head).map_err(runtime(path.display()))?;
    for r in rows {
        let mut rec = vec![r.frame.to_string(), r.t.to_string()];
        rec.extend(r.x.iter().map(|v| v.to_string()));
        rec.extend(r.y.iter().map(|v| v.to_string()));
        rec.push(if r.residual.is_finite() {
            r.residual.to_string()
        } else {
            String::new()
        });
        w.write_record(&rec).map_err(runtime(path.display()))?;
    }
    w.flush().map_err(runtime(path.display()))?;
    Ok(())
}
