//! `pbrt` command line: simulate, train, update, pbrt, curve.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::driver::{compute_blup, BlupResult, DriverState};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{ModelSpec, Observation, TrainedModel, DEFAULT_DEGREE};
use crate::pbrt::{density_curve, estimate_pbrt, percentile, PbrtEstimate};
use crate::simgen::{default_config, generate, SimConfig};
use crate::training::{fit, FitOptions, TrainingSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pbrt", version, about = "Personalized brake response time estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic observation CSV plus a ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Fit the mixed model to an observation CSV.
    Train(TrainArgs),
    /// Append one braking event to a driver state file.
    Update(UpdateArgs),
    /// Print PBRT percentiles for one stimulus.
    Pbrt(PbrtArgs),
    /// Write naive and conservative PBRT densities on a grid.
    Curve(CurveArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON simulation config; defaults to the built-in fixture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long)]
    pub block_diagonal: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct UpdateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub state: PathBuf,
    /// "stimulus,headway_s,brt_s"
    #[arg(long, allow_hyphen_values = true)]
    pub event: String,
}

#[derive(Debug, Args)]
pub struct PbrtArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[arg(long)]
    pub stimulus: String,
    #[arg(long)]
    pub t_star: Option<f64>,
    /// Percent levels, strictly between 0 and 100.
    #[arg(long, value_delimiter = ',', default_value = "10,50,90")]
    pub percentiles: Vec<f64>,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub conservative: bool,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[arg(long)]
    pub stimulus: String,
    #[arg(long)]
    pub t_star: Option<f64>,
    /// "min,max,steps"
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::DidNotConverge { .. } => EXIT_NOT_CONVERGED,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: &Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Simulate(a) => simulate(a, out),
        Command::Train(a) => train(a, out, err),
        Command::Update(a) => update(a, out),
        Command::Pbrt(a) => pbrt(a, out, err),
        Command::Curve(a) => curve(a, out),
    }
}

fn simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut config: SimConfig<f64> = match &a.config {
        Some(path) => serde_json::from_slice(&fs::read(path)?)?,
        None => default_config(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let (ts, truth) = generate(&config)?;
    let obs: Vec<Observation<f64>> = ts.observations().cloned().collect();
    let mut csv = Vec::new();
    io::write_observations(&mut csv, ts.spec(), &obs)?;
    io::atomic_write(&a.out, &csv)?;
    io::atomic_write(&io::truth_path(&a.out), &io::truth_to_json(&truth)?)?;
    writeln!(out, "{}", obs.len())?;
    Ok(EXIT_OK)
}

fn train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let file = fs::File::open(&a.data)?;
    let (registry, obs) = io::read_observations::<f64, _>(std::io::BufReader::new(file), None)?;
    let spec = ModelSpec::new(registry, DEFAULT_DEGREE);
    let ts = TrainingSet::from_observations(spec.clone(), obs)?;
    let mut opts = FitOptions { seed: a.seed, restarts: a.restarts, ..FitOptions::default() };
    if a.block_diagonal {
        opts = opts.block_diagonal(&spec);
    }
    let model = fit(&ts, &opts)?;
    io::save_model(&a.out, &model)?;
    let info = model.fit_info();
    writeln!(out, "loglik={} converged={}", info.loglik, info.converged)?;
    if let Err(e) = info.ensure_converged() {
        writeln!(err, "warning: {e}")?;
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(EXIT_OK)
}

fn parse_event(spec: &ModelSpec, driver_id: &str, event: &str) -> Result<Observation<f64>> {
    let parts: Vec<&str> = event.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::InvalidInput(format!("event must be \"stimulus,headway,brt\", got {event:?}")));
    }
    let stimulus = spec.stimuli().id(parts[0])?;
    let num = |s: &str, what: &str| {
        s.parse::<f64>().map_err(|_| Error::InvalidInput(format!("{what} {s:?} is not a number")))
    };
    Observation::new(driver_id, stimulus, num(parts[1], "headway")?, num(parts[2], "brt")?)
}

fn driver_id_from_path(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "driver".into())
}

fn update(a: &UpdateArgs, out: &mut dyn Write) -> Result<i32> {
    let model: TrainedModel<f64> = io::load_model(&a.model)?;
    let mut state = if a.state.exists() {
        io::load_state(&a.state, model.spec())?
    } else {
        DriverState::new(driver_id_from_path(&a.state))
    };
    let obs = parse_event(model.spec(), state.driver_id(), &a.event)?;
    state.add_observation(obs)?;
    let norm = state.compute_blup(&model)?.gamma_hat.norm();
    io::save_state(&a.state, &state, model.spec())?;
    writeln!(out, "n={} gamma_hat_norm={norm}", state.len())?;
    Ok(EXIT_OK)
}

/// BLUP for the driver in `state`, or the zero-data predictor when there is no state.
fn blup_for(model: &TrainedModel<f64>, state: Option<&Path>) -> Result<BlupResult<f64>> {
    match state {
        Some(path) if path.exists() => {
            let s: DriverState<f64> = io::load_state(path, model.spec())?;
            compute_blup(s.observations(), model)
        }
        _ => Ok(BlupResult::population(model)),
    }
}

fn estimate(
    model_path: &Path,
    state: Option<&Path>,
    stimulus: &str,
    t_star: Option<f64>,
) -> Result<PbrtEstimate<f64>> {
    let model: TrainedModel<f64> = io::load_model(model_path)?;
    let s = model.spec().stimuli().id(stimulus)?;
    let blup = blup_for(&model, state)?;
    estimate_pbrt(&model, &blup, s, t_star.unwrap_or(model.t_star()))
}

fn pbrt(a: &PbrtArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let levels: Vec<f64> = a
        .percentiles
        .iter()
        .map(|&p| {
            if p > 0.0 && p < 100.0 {
                Ok(p / 100.0)
            } else {
                Err(Error::InvalidQuantile(p / 100.0))
            }
        })
        .collect::<Result<_>>()?;
    let e = estimate(&a.model, a.state.as_deref(), &a.stimulus, a.t_star)?;
    let mut rows = String::from("q,percentile_naive,percentile_conservative\n");
    for &q in &levels {
        let naive = percentile(e.mu, e.var_naive, q)?;
        let cons = percentile(e.mu, e.var_conservative, q)?;
        rows.push_str(&format!("{q},{naive},{cons}\n"));
    }
    out.write_all(rows.as_bytes())?;
    writeln!(err, "mu={} var={}", e.mu, e.variance(a.conservative))?;
    Ok(EXIT_OK)
}

/// Parses `"min,max,steps"` into an evenly spaced grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || Error::InvalidInput(format!("grid must be \"min,max,steps\" with 0 < min < max and steps >= 2, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let min: f64 = parts[0].parse().map_err(|_| bad())?;
    let max: f64 = parts[1].parse().map_err(|_| bad())?;
    let steps: usize = parts[2].parse().map_err(|_| bad())?;
    if !(min > 0.0) || !(max > min) || !max.is_finite() || steps < 2 {
        return Err(bad());
    }
    let h = (max - min) / (steps - 1) as f64;
    Ok((0..steps).map(|i| if i + 1 == steps { max } else { min + h * i as f64 }).collect())
}

fn curve(a: &CurveArgs, out: &mut dyn Write) -> Result<i32> {
    let grid = parse_grid(&a.grid)?;
    let e = estimate(&a.model, a.state.as_deref(), &a.stimulus, a.t_star)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["t_seconds", "pdf_naive", "pdf_conservative"]).map_err(io_err)?;
    for (t, naive, cons) in density_curve(&e, &grid) {
        w.serialize((t, naive, cons)).map_err(io_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    io::atomic_write(&a.out, &bytes)?;
    writeln!(out, "{}", grid.len())?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.2,3.0,200").unwrap();
        assert_eq!(g.len(), 200);
        assert_eq!(g[0], 0.2);
        assert_eq!(g[199], 3.0);
        for bad in ["0,3,10", "1,1,10", "1,2,1", "1,2", "a,2,3", "-1,2,3"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn clap_errors_map_to_validation() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["pbrt", "bogus"], &mut o, &mut e), EXIT_VALIDATION);
        assert_eq!(run(["pbrt", "simulate", "--out", "x", "--nope"], &mut o, &mut e), EXIT_VALIDATION);
        assert_eq!(run(["pbrt", "--help"], &mut o, &mut e), EXIT_OK);
    }

    #[test]
    fn event_parsing() {
        let spec = ModelSpec::default();
        let o = parse_event(&spec, "d", "lead_car_brake, 2.5, 0.9").unwrap();
        assert_eq!(o.headway_s, 2.5);
        assert!(matches!(parse_event(&spec, "d", "nope,1,1"), Err(Error::UnknownStimulus(_))));
        assert!(parse_event(&spec, "d", "traffic_signal,-1.0,0.8").is_err());
        assert!(parse_event(&spec, "d", "traffic_signal,1.0").is_err());
    }
}
