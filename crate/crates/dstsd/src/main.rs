//! Command-line front end: simulation, training, prediction, monitoring,
//! control-limit calibration, and full experiment runs driven by sectioned
//! key = value config files.

use clap::{Parser, Subcommand};
use dstsd::cable::{make_protocol, StimulationSchedule};
use dstsd::config::Config;
use dstsd::evaluation::{
    mix_seed, monitored_case, prepare_pipeline, run_experiment, train_model, ExperimentSetup,
};
use dstsd::field::SpatioTemporalField;
use dstsd::metamodel::Metamodel;
use dstsd::monitoring::{monitor_stream, write_records_csv, MonitorConfig};
use dstsd::spline::SplineBasis;
use dstsd::{Error, Result};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dstsd", about = "Spatio-temporal sparse decomposition toolkit", version)]
struct Cli {
    /// Sectioned key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides [experiment] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a monitored stream with injected anomalies and noise.
    Simulate,
    /// Train the metamodel on freshly simulated regular-protocol data.
    Train,
    /// Roll a trained model forward from a recorded history.
    Predict,
    /// Run the control chart over a recorded stream.
    Monitor,
    /// Calibrate control limits for the chart and both baselines.
    Calibrate,
    /// Full experiment: train, calibrate, replicate, report.
    Evaluate,
    /// Evaluate over the anomaly-intensity sweep.
    Sweep,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Stage { source, .. } => exit_code(source),
        Error::Config(_) | Error::InvalidArgument(_) | Error::Format { .. } | Error::Io(_) => 2,
        Error::NonFinite { .. }
        | Error::Numerical(_)
        | Error::Instability { .. }
        | Error::ShapeMismatch(_) => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_path(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("experiment", "seed", &seed.to_string());
    }
    Ok(cfg)
}

fn read_field(cfg: &Config, key: &str) -> Result<SpatioTemporalField> {
    SpatioTemporalField::read_binary(Path::new(cfg.require("io", key)?))
}

/// Regular-stimulus increments aligned with a stream, from the [io]
/// schedule file if present, zeros otherwise.
fn increments_for(cfg: &Config, stream: &SpatioTemporalField) -> Result<SpatioTemporalField> {
    match cfg.get("io", "schedule") {
        None => Ok(SpatioTemporalField::zeros(
            stream.n_time,
            stream.n_space,
            stream.dt,
        )),
        Some(path) => {
            let schedule = StimulationSchedule::read_text(Path::new(path))?;
            let dt_internal = cfg.f64("cable", "dt_internal", 0.0025)?;
            Ok(schedule.frame_increments(stream.n_time, stream.n_space, stream.dt, dt_internal))
        }
    }
}

fn basis_for(cfg: &Config, p: usize) -> Result<SplineBasis> {
    let m = cfg.usize("basis", "m", (p / 5).clamp(4, p))?;
    SplineBasis::new(p, m)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Simulate => simulate_cmd(&cfg, out),
        Command::Train => train_cmd(&cfg, out),
        Command::Predict => predict_cmd(&cfg, out),
        Command::Monitor => monitor_cmd(&cfg, out),
        Command::Calibrate => calibrate_cmd(&cfg, out),
        Command::Evaluate => run_experiment(&cfg, out),
        Command::Sweep => {
            let mut cfg = cfg;
            if cfg.get("sweep", "deltas").is_none() {
                cfg.set("sweep", "deltas", "0.15;0.25;0.35");
            }
            run_experiment(&cfg, out)
        }
    }
}

fn simulate_cmd(cfg: &Config, out: &Path) -> Result<()> {
    let setup = ExperimentSetup::from_config(cfg)?;
    let (stream, regular, truths) =
        monitored_case(&setup, setup.delta, mix_seed(setup.seed, 50))?;
    stream.write_binary(&out.join("stream.bin"))?;
    stream.write_csv(&out.join("stream.csv"))?;
    regular.write_binary(&out.join("regular.bin"))?;
    let schedule = make_protocol(
        setup.case,
        setup.base_cycle_ms,
        &setup.sites,
        setup.monitor_duration,
        setup.r0,
    )?;
    schedule.write_text(&out.join("schedule.txt"))?;
    dstsd::cable::AnomalyGroundTruth::write_text(&truths, &out.join("truth.txt"))?;
    Ok(())
}

fn train_cmd(cfg: &Config, out: &Path) -> Result<()> {
    let setup = ExperimentSetup::from_config(cfg)?;
    let (model, losses) = train_model(&setup)?;
    model.save(&out.join("model.ckpt"))?;
    let mut f = std::fs::File::create(out.join("losses.csv"))?;
    writeln!(f, "epoch,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    Ok(())
}

fn predict_cmd(cfg: &Config, out: &Path) -> Result<()> {
    let model = Metamodel::load(Path::new(cfg.require("io", "checkpoint")?))?;
    let history = read_field(cfg, "field")?;
    let steps = cfg.usize("predict", "steps", 100)?;
    // increments for the predicted frames, sliced out of the full timeline
    let total = SpatioTemporalField {
        n_time: history.n_time + steps,
        n_space: history.n_space,
        values: vec![0.0; (history.n_time + steps) * history.n_space],
        dt: history.dt,
    };
    let full_inc = match cfg.get("io", "schedule") {
        None => total,
        Some(path) => {
            let schedule = StimulationSchedule::read_text(Path::new(path))?;
            let dt_internal = cfg.f64("cable", "dt_internal", 0.0025)?;
            schedule.frame_increments(
                history.n_time + steps,
                history.n_space,
                history.dt,
                dt_internal,
            )
        }
    };
    let future = full_inc.slice_time(history.n_time, history.n_time + steps);
    let prediction = model.rollout(&history, steps, &future)?;
    prediction.write_binary(&out.join("prediction.bin"))?;
    prediction.write_csv(&out.join("prediction.csv"))?;
    Ok(())
}

fn monitor_cmd(cfg: &Config, out: &Path) -> Result<()> {
    let model = Metamodel::load(Path::new(cfg.require("io", "checkpoint")?))?;
    let stream = read_field(cfg, "field")?;
    let regular = increments_for(cfg, &stream)?;
    let basis = basis_for(cfg, stream.n_space)?;
    let w_max = cfg.usize("monitor", "w_max", 3)?;
    let mcfg = MonitorConfig {
        limit: cfg.f64("monitor", "limit", f64::INFINITY)?,
        w_max,
        gamma: cfg.f64("monitor", "gamma", 1.0)?,
        step_c: cfg.f64("monitor", "step_c", MonitorConfig::safe_step(&basis, w_max))?,
        epochs: cfg.usize("monitor", "prox_epochs", 50)?,
        warmup: cfg.usize("monitor", "warmup", 40)?,
        stop_on_alarm: cfg.bool("monitor", "stop_on_alarm", false)?,
    };
    let records = monitor_stream(&stream, &model, &basis, &regular, &mcfg)?;
    write_records_csv(&records, &out.join("records.csv"))
}

fn calibrate_cmd(cfg: &Config, out: &Path) -> Result<()> {
    let setup = ExperimentSetup::from_config(cfg)?;
    let model = Metamodel::load(Path::new(cfg.require("io", "checkpoint")?))?;
    let pipeline = prepare_pipeline(&setup, model, Vec::new())?;
    let mut f = std::fs::File::create(out.join("limits.csv"))?;
    writeln!(f, "method,limit,target_arl0,achieved_arl0,std_error,gamma")?;
    for (name, cl) in [
        ("dstsd", &pipeline.dstsd_limit),
        ("residual", &pipeline.residual_limit),
        ("hotelling", &pipeline.hotelling_limit),
    ] {
        writeln!(
            f,
            "{name},{},{},{},{},{}",
            cl.limit, cl.target_arl0, cl.achieved_arl0, cl.std_error, pipeline.gamma
        )?;
    }
    Ok(())
}
