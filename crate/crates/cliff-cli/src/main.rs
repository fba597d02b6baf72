//! Command-line frontend: build flow-field maps from trajectory data, roll
//! out prediction ensembles, score them against ground truth, sweep
//! parameters, compare maps, and generate synthetic benchmark scenarios.
//!
//! Machine-readable results go to stdout as JSON; progress chatter goes to
//! stderr behind `--verbose`. Exit codes: 2 for usage and argument errors,
//! 3 for data and I/O errors, 4 for numerical failures.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cliff_core::data_io::synthetic::{generate_synthetic, SyntheticScenario};
use cliff_core::data_io::{
    downsample_all, load_trajectories, make_observation_splits, parse_atc, read_trajectories_csv,
    save_trajectories, segment_and_filter, Trajectory,
};
use cliff_core::evaluation::{
    evaluate_method_all, parameter_sweep, sweep_table, Aggregation, EvalConfig, PredictorChoice,
    SweepAxis,
};
use cliff_core::map_builder::{build_map, compare_maps_kl, CliffMap, EmConfig, GridSpec};
use cliff_core::motion_model::State;
use cliff_core::predictor::{
    observed_velocity, predict_ensemble, PredictionConfig, PredictionRecordWriter,
};
use cliff_core::{derive_seed, Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cliff", version, about = "Flow-field motion maps and long-horizon prediction")]
struct Cli {
    /// Worker threads for parallel stages (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Print progress details to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a flow-field map from trajectory data.
    BuildMap(BuildMapArgs),
    /// Roll out prediction ensembles and write every predicted state as CSV.
    Predict(PredictArgs),
    /// Score predictors against held-back ground truth at several horizons.
    Evaluate(EvaluateArgs),
    /// Evaluate repeatedly across a range of one parameter.
    Sweep(SweepArgs),
    /// Monte-Carlo KL divergence between two maps on the same grid.
    CompareMaps(CompareMapsArgs),
    /// Generate synthetic benchmark trajectories.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    /// Raw tracker export: ms timestamps, millimeter coordinates.
    Atc,
    /// Canonical trajectory CSV (t_s,person_id,x_m,y_m).
    Canonical,
}

#[derive(Args)]
struct InputArgs {
    /// Trajectory files to read.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Input format.
    #[arg(long, value_enum, default_value_t = Format::Canonical)]
    format: Format,
    /// Resample trajectories to this rate before use, Hz.
    #[arg(long)]
    downsample_hz: Option<f64>,
    /// Split trajectories at sampling gaps larger than this, seconds.
    #[arg(long)]
    max_gap: Option<f64>,
    /// Drop (post-split) trajectories shorter than this, seconds.
    #[arg(long)]
    min_duration: Option<f64>,
    /// Abort parsing when more than this fraction of rows is malformed.
    #[arg(long, default_value_t = 0.05)]
    max_malformed: f64,
}

/// Rollout knobs shared by predict, evaluate, and sweep.
#[derive(Args, Clone)]
struct RolloutArgs {
    /// Prediction time step, seconds (benchmark protocol default).
    #[arg(long = "dt", default_value_t = 1.0)]
    delta_t: f64,
    /// Heading-blend steepness beta (benchmark protocol default).
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Sampling radius around the predicted position, meters (benchmark protocol default).
    #[arg(long = "rs", default_value_t = 1.0)]
    sampling_radius: f64,
    /// Width of the recency weighting over observed velocities, in samples.
    #[arg(long = "sigma-obs", default_value_t = 1.0)]
    sigma_obs: f64,
    /// Ensemble size per trajectory (benchmark protocol default).
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Observation window, seconds (benchmark protocol default).
    #[arg(long = "os", default_value_t = 3.2)]
    observation_s: f64,
    /// Base seed; every trajectory derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RolloutArgs {
    fn prediction_config(&self, horizon_s: f64) -> PredictionConfig {
        PredictionConfig {
            delta_t: self.delta_t,
            horizon_s,
            beta: self.beta,
            sampling_radius: self.sampling_radius,
            sigma_obs: self.sigma_obs,
            k: self.k,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct BuildMapArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Grid origin x, meters. Give all of --origin-x, --origin-y, --width,
    /// --height to pin the grid; otherwise it is fitted to the data.
    #[arg(long)]
    origin_x: Option<f64>,
    /// Grid origin y, meters.
    #[arg(long)]
    origin_y: Option<f64>,
    /// Cell edge length, meters (benchmark protocol default).
    #[arg(long, default_value_t = 1.0)]
    resolution: f64,
    /// Grid width in cells.
    #[arg(long)]
    width: Option<usize>,
    /// Grid height in cells.
    #[arg(long)]
    height: Option<usize>,
    /// Largest per-cell mixture size tried during model selection.
    #[arg(long, default_value_t = 5)]
    max_components: usize,
    /// Iteration cap per mixture fit.
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    /// Relative log-likelihood change that counts as converged.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Smallest eigenvalue allowed in a component covariance.
    #[arg(long, default_value_t = 1e-4)]
    covariance_floor: f64,
    /// Cells with fewer velocity observations stay unpopulated.
    #[arg(long, default_value_t = 10)]
    min_observations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output map path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Learned map to sample from.
    #[arg(long)]
    map: PathBuf,
    /// Canonical trajectory CSV; observed prefixes seed the rollouts.
    #[arg(long)]
    trajectories: PathBuf,
    /// Rollout horizon, seconds (benchmark protocol default).
    #[arg(long, default_value_t = 20.0)]
    horizon: f64,
    #[command(flatten)]
    rollout: RolloutArgs,
    /// Output CSV of predicted states.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    CliffLhmp,
    Cvm,
    Both,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Learned map (required unless --method cvm).
    #[arg(long)]
    map: Option<PathBuf>,
    /// Canonical trajectory CSV to evaluate on.
    #[arg(long)]
    trajectories: PathBuf,
    /// Which predictors to score.
    #[arg(long, value_enum, default_value_t = MethodArg::Both)]
    method: MethodArg,
    /// Comma-separated horizons, seconds (benchmark protocol default).
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 5.0, 10.0, 20.0])]
    horizons: Vec<f64>,
    /// Skip trajectories whose ground truth lasts less than this, seconds.
    #[arg(long, default_value_t = 0.0)]
    min_gt_duration: f64,
    #[command(flatten)]
    rollout: RolloutArgs,
    /// Directory for eval_<method>_<aggregation>.{json,csv}.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Learned map to sample from.
    #[arg(long)]
    map: PathBuf,
    /// Canonical trajectory CSV to evaluate on.
    #[arg(long)]
    trajectories: PathBuf,
    /// Swept parameter: beta, rs, os, or dt.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the swept parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Comma-separated horizons, seconds (benchmark protocol default).
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 5.0, 10.0, 20.0])]
    horizons: Vec<f64>,
    /// Skip trajectories whose ground truth lasts less than this, seconds.
    #[arg(long, default_value_t = 0.0)]
    min_gt_duration: f64,
    #[command(flatten)]
    rollout: RolloutArgs,
    /// Output CSV, one row per (value, horizon).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareMapsArgs {
    #[arg(long)]
    map_a: PathBuf,
    #[arg(long)]
    map_b: PathBuf,
    /// Monte-Carlo draws per cell.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Heatmap JSON output path.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Flat CSV output path (ix,iy,kl_nats; defined cells only).
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Corridor,
    LCorner,
    QuarterCircle,
    YJunction,
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// Scenario family.
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Number of agents.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Walking speed override, m/s.
    #[arg(long)]
    speed: Option<f64>,
    /// Per-step heading noise override, radians.
    #[arg(long)]
    noise: Option<f64>,
    /// Sampling period override, seconds.
    #[arg(long)]
    sample_dt: Option<f64>,
    /// Episode length override, seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Probability of the upper branch (y-junction only).
    #[arg(long, default_value_t = 0.5)]
    branch_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output trajectory CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 = caller mistake, 3 = bad or missing data, 4 = numerical failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildMap(args) => run_build_map(cli, args),
        Command::Predict(args) => run_predict(cli, args),
        Command::Evaluate(args) => run_evaluate(cli, args),
        Command::Sweep(args) => run_sweep(cli, args),
        Command::CompareMaps(args) => run_compare_maps(cli, args),
        Command::GenSynthetic(args) => run_gen_synthetic(cli, args),
    }
}

fn load_dataset(args: &InputArgs, verbose: bool) -> Result<Vec<Trajectory>> {
    let mut all = Vec::new();
    for path in &args.inputs {
        let file = File::open(path)?;
        let trajs = match args.format {
            Format::Atc => {
                let outcome = parse_atc(BufReader::new(file), args.max_malformed)?;
                if verbose {
                    eprintln!(
                        "{}: {} trajectories from {} rows ({} skipped)",
                        path.display(),
                        outcome.trajectories.len(),
                        outcome.rows_total,
                        outcome.rows_skipped
                    );
                }
                outcome.trajectories
            }
            Format::Canonical => read_trajectories_csv(BufReader::new(file))?,
        };
        all.extend(trajs);
    }
    if let Some(hz) = args.downsample_hz {
        let (kept, dropped) = downsample_all(&all, hz)?;
        if verbose {
            eprintln!("downsampled to {hz} Hz: kept {}, dropped {}", kept.len(), dropped);
        }
        all = kept;
    }
    if args.max_gap.is_some() || args.min_duration.is_some() {
        let before = all.len();
        all = segment_and_filter(
            &all,
            args.min_duration.unwrap_or(0.0),
            args.max_gap.unwrap_or(f64::MAX),
        )?;
        if verbose {
            eprintln!("segmented {} trajectories into {}", before, all.len());
        }
    }
    Ok(all)
}

fn fitted_grid(trajectories: &[Trajectory], resolution: f64) -> Result<GridSpec> {
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for traj in trajectories {
        for s in &traj.samples {
            min_x = min_x.min(s.x);
            min_y = min_y.min(s.y);
            max_x = max_x.max(s.x);
            max_y = max_y.max(s.y);
        }
    }
    if !min_x.is_finite() {
        return Err(Error::InsufficientData { got: 0, need: 1 });
    }
    GridSpec::from_bounds(min_x, min_y, max_x, max_y, resolution)
}

fn run_build_map(cli: &Cli, args: &BuildMapArgs) -> Result<()> {
    let trajs = load_dataset(&args.input, cli.verbose)?;
    let grid = match (args.origin_x, args.origin_y, args.width, args.height) {
        (Some(ox), Some(oy), Some(w), Some(h)) => GridSpec::new(ox, oy, args.resolution, w, h)?,
        (None, None, None, None) => fitted_grid(&trajs, args.resolution)?,
        _ => {
            return Err(Error::invalid(
                "give all of --origin-x, --origin-y, --width, --height, or none of them",
            ))
        }
    };
    let em = EmConfig {
        max_components: args.max_components,
        max_iterations: args.max_iterations,
        log_likelihood_tolerance: args.tolerance,
        covariance_floor: args.covariance_floor,
        min_observations_per_cell: args.min_observations,
        seed: args.seed,
    };
    let (map, summary) = build_map(&trajs, grid, &em)?;
    map.save(&args.out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "out": args.out,
            "grid": map.grid(),
            "summary": summary,
        }))?
    );
    Ok(())
}

fn run_predict(cli: &Cli, args: &PredictArgs) -> Result<()> {
    let map = CliffMap::load(&args.map)?;
    let trajs = load_trajectories(&args.trajectories)?;
    let base = args.rollout.prediction_config(args.horizon);
    base.validate()?;

    let mut writer = PredictionRecordWriter::new(BufWriter::new(File::create(&args.out)?))?;
    let mut predicted = 0usize;
    let mut skipped = 0usize;
    let mut rollouts = 0usize;
    let mut truncated = 0usize;
    let mut steps_total = 0usize;
    for (index, traj) in trajs.iter().enumerate() {
        let dt_obs = traj.mean_dt();
        let o_p = ((args.rollout.observation_s / dt_obs).round() as usize).max(2);
        let split = match make_observation_splits(traj, o_p, dt_obs)? {
            Some(split) => split,
            None => {
                skipped += 1;
                continue;
            }
        };
        let v = observed_velocity(&split.history, base.sigma_obs)?;
        let start = State {
            x: split.origin.0,
            y: split.origin.1,
            rho: v.rho,
            theta: v.theta,
        };
        let cfg = PredictionConfig {
            seed: derive_seed(base.seed, index as u64),
            ..base.clone()
        };
        let ensemble = predict_ensemble(&map, start, &cfg);
        for rollout in &ensemble {
            rollouts += 1;
            steps_total += rollout.len();
            if rollout.truncated {
                truncated += 1;
            }
        }
        writer.write_ensemble(&traj.person_id, split.t0, cfg.delta_t, &ensemble)?;
        predicted += 1;
        if cli.verbose {
            eprintln!("{}: {} rollouts", traj.person_id, ensemble.len());
        }
    }
    writer.finish()?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "out": args.out,
            "trajectories_predicted": predicted,
            "trajectories_skipped": skipped,
            "rollouts": rollouts,
            "rollouts_truncated": truncated,
            "mean_rollout_steps": if rollouts > 0 { steps_total as f64 / rollouts as f64 } else { 0.0 },
        }))?
    );
    Ok(())
}

fn methods_for(arg: MethodArg) -> Vec<PredictorChoice> {
    match arg {
        MethodArg::CliffLhmp => vec![PredictorChoice::CliffLhmp],
        MethodArg::Cvm => vec![PredictorChoice::Cvm],
        MethodArg::Both => vec![PredictorChoice::CliffLhmp, PredictorChoice::Cvm],
    }
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn run_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let methods = methods_for(args.method);
    let needs_map = methods.contains(&PredictorChoice::CliffLhmp);
    let map = match (&args.map, needs_map) {
        (Some(path), _) => Some(CliffMap::load(path)?),
        (None, false) => None,
        (None, true) => return Err(Error::invalid("--map is required unless --method cvm")),
    };
    let trajs = load_trajectories(&args.trajectories)?;
    let eval_cfg = EvalConfig {
        horizons_s: args.horizons.clone(),
        aggregation: Aggregation::BestK,
        k: args.rollout.k,
        min_gt_duration_s: args.min_gt_duration,
        observation_s: args.rollout.observation_s,
        seed: args.rollout.seed,
    };
    let pred_cfg = args.rollout.prediction_config(max_of(&args.horizons));
    fs::create_dir_all(&args.out)?;

    let mut outputs = Vec::new();
    for choice in methods {
        if cli.verbose {
            eprintln!("evaluating {} on {} trajectories", choice.as_str(), trajs.len());
        }
        let reports = evaluate_method_all(map.as_ref(), &trajs, choice, &pred_cfg, &eval_cfg)?;
        for report in reports {
            let stem = format!("eval_{}_{}", report.method, report.aggregation.as_str());
            let json_path = args.out.join(format!("{stem}.json"));
            report.save(&json_path)?;
            let csv_path = args.out.join(format!("{stem}.csv"));
            let mut w = BufWriter::new(File::create(&csv_path)?);
            report.write_csv_table(&mut w)?;
            w.flush()?;
            outputs.push(json!({
                "method": report.method,
                "aggregation": report.aggregation.as_str(),
                "n_evaluated": report.n_evaluated,
                "n_skipped": report.n_skipped,
                "json": json_path,
                "csv": csv_path,
                "records": report.records,
            }));
        }
    }
    println!("{}", serde_json::to_string_pretty(&json!({ "reports": outputs }))?);
    Ok(())
}

fn run_sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let axis = SweepAxis::parse(&args.axis)?;
    let map = CliffMap::load(&args.map)?;
    let trajs = load_trajectories(&args.trajectories)?;
    let eval_cfg = EvalConfig {
        horizons_s: args.horizons.clone(),
        aggregation: Aggregation::BestK,
        k: args.rollout.k,
        min_gt_duration_s: args.min_gt_duration,
        observation_s: args.rollout.observation_s,
        seed: args.rollout.seed,
    };
    let pred_cfg = args.rollout.prediction_config(max_of(&args.horizons));
    if cli.verbose {
        eprintln!("sweeping {} over {:?}", axis.as_str(), args.values);
    }
    let rows = parameter_sweep(&map, &trajs, &pred_cfg, &eval_cfg, axis, &args.values)?;
    fs::write(&args.out, sweep_table(axis, &rows))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "out": args.out,
            "axis": axis.as_str(),
            "values": args.values,
            "rows": rows.len() * args.horizons.len(),
        }))?
    );
    Ok(())
}

fn run_compare_maps(cli: &Cli, args: &CompareMapsArgs) -> Result<()> {
    let a = CliffMap::load(&args.map_a)?;
    let b = CliffMap::load(&args.map_b)?;
    if cli.verbose {
        eprintln!("comparing {} cells against {}", a.len(), b.len());
    }
    let heatmap = compare_maps_kl(&a, &b, args.samples, args.seed)?;
    if let Some(path) = &args.out_json {
        heatmap.save(path)?;
    }
    if let Some(path) = &args.out_csv {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "ix,iy,kl_nats")?;
        for iy in 0..heatmap.grid.height {
            for ix in 0..heatmap.grid.width {
                if let Some(v) = heatmap.get(ix, iy) {
                    writeln!(w, "{ix},{iy},{v}")?;
                }
            }
        }
        w.flush()?;
    }
    let defined = heatmap.values.iter().flatten().count();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "cells_compared": defined,
            "mean_kl_nats": heatmap.mean_defined(),
            "out_json": args.out_json,
            "out_csv": args.out_csv,
        }))?
    );
    Ok(())
}

fn run_gen_synthetic(cli: &Cli, args: &GenSyntheticArgs) -> Result<()> {
    let mut scenario = match args.scenario {
        ScenarioArg::Corridor => SyntheticScenario::corridor(args.seed),
        ScenarioArg::LCorner => SyntheticScenario::l_corner(args.seed),
        ScenarioArg::QuarterCircle => SyntheticScenario::quarter_circle(args.seed),
        ScenarioArg::YJunction => SyntheticScenario::y_junction(args.branch_prob, args.seed),
    };
    if let Some(speed) = args.speed {
        scenario.speed = speed;
    }
    if let Some(noise) = args.noise {
        scenario.heading_noise_std = noise;
    }
    if let Some(dt) = args.sample_dt {
        scenario.sample_dt = dt;
    }
    if let Some(duration) = args.duration {
        scenario.duration_s = duration;
    }
    let trajs = generate_synthetic(&scenario, args.n)?;
    save_trajectories(&args.out, &trajs)?;
    if cli.verbose {
        eprintln!("wrote {} trajectories to {}", trajs.len(), args.out.display());
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "out": args.out,
            "scenario": scenario.name,
            "trajectories": trajs.len(),
            "samples": trajs.iter().map(|t| t.samples.len()).sum::<usize>(),
        }))?
    );
    Ok(())
}
