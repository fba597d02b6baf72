//! ADE/FDE evaluation harness.
//!
//! Scores rollout ensembles against ground truth with the truncation rules
//! used throughout: a rollout that ends early is scored up to its last
//! predicted point, never padded or imputed. Per-trajectory work runs in
//! parallel; aggregation reduces in trajectory order, so reports are
//! deterministic for a fixed seed regardless of worker count.

use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{make_observation_splits, ObservationSplit, Sample, Trajectory};
use crate::error::{Error, Result};
use crate::map_builder::CliffMap;
use crate::motion_model::State;
use crate::predictor::{
    cvm_predict, observed_velocity, predict_ensemble, steps_for_horizon, PredictedTrajectory,
    PredictionConfig,
};
use crate::rng::derive_seed;

pub const REPORT_FORMAT_VERSION: u32 = 1;
const SUPPORTED_REPORT_VERSIONS: &[u32] = &[1];

/// How an ensemble's per-sample scores collapse to one number per
/// trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Minimum over the ensemble: how good is the best guess.
    BestK,
    /// Mean over the ensemble: how good is a typical guess.
    MeanK,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::BestK => "best_k",
            Aggregation::MeanK => "mean_k",
        }
    }
}

/// Which predictor the harness drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorChoice {
    /// Map-guided stochastic rollouts.
    CliffLhmp,
    /// Constant-velocity baseline.
    Cvm,
}

impl PredictorChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictorChoice::CliffLhmp => "cliff_lhmp",
            PredictorChoice::Cvm => "cvm",
        }
    }
}

/// Evaluation protocol: which horizons to score, how to aggregate, how much
/// history each trajectory donates to observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Horizons in seconds, strictly ascending.
    pub horizons_s: Vec<f64>,
    pub aggregation: Aggregation,
    /// Ensemble size used during evaluation.
    pub k: usize,
    /// Trajectories whose ground truth lasts less than this are skipped.
    pub min_gt_duration_s: f64,
    /// Observation window in seconds; converted per trajectory to a sample
    /// count at the trajectory's own rate.
    pub observation_s: f64,
    /// Base seed; each trajectory derives its own stream from it.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons_s: vec![1.0, 5.0, 10.0, 20.0],
            aggregation: Aggregation::BestK,
            k: 10,
            min_gt_duration_s: 0.0,
            observation_s: 3.2,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons_s.is_empty() {
            return Err(Error::invalid("horizons_s must not be empty"));
        }
        for h in &self.horizons_s {
            if !(h.is_finite() && *h > 0.0) {
                return Err(Error::invalid(format!("horizons must be positive, got {h}")));
            }
        }
        if self.horizons_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("horizons_s must be strictly ascending"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.observation_s.is_finite() && self.observation_s > 0.0) {
            return Err(Error::invalid(format!(
                "observation_s must be positive, got {}",
                self.observation_s
            )));
        }
        if !(self.min_gt_duration_s.is_finite() && self.min_gt_duration_s >= 0.0) {
            return Err(Error::invalid(format!(
                "min_gt_duration_s must be non-negative, got {}",
                self.min_gt_duration_s
            )));
        }
        Ok(())
    }
}

/// Scores for one horizon, aggregated over all evaluated trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRecord {
    pub horizon_s: f64,
    /// Mean of the per-trajectory aggregated ADE; absent when every
    /// trajectory was undefined at this horizon.
    pub ade_mean: Option<f64>,
    /// Population standard deviation across trajectories.
    pub ade_std: Option<f64>,
    pub fde_mean: Option<f64>,
    pub fde_std: Option<f64>,
    /// Trajectories contributing a defined score at this horizon.
    pub n_trajectories: usize,
    /// Trajectories whose every sample had zero scoreable steps.
    pub n_undefined: usize,
    /// Fraction of trajectories where at least one sample covered the full
    /// horizon.
    pub success_ratio: f64,
}

/// One evaluation run: a method, an aggregation, and one record per horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub aggregation: Aggregation,
    /// Trajectories offered to the harness.
    pub n_input: usize,
    /// Trajectories actually predicted and scored.
    pub n_evaluated: usize,
    /// Trajectories skipped: too short to split, or ground truth under the
    /// minimum duration.
    pub n_skipped: usize,
    pub records: Vec<HorizonRecord>,
}

// ─────────────────────────────────────────────────────────────────────────────
// Per-step scoring
// ─────────────────────────────────────────────────────────────────────────────

/// Euclidean error at each prediction step against ground truth aligned on
/// the same grid, cut at `max_steps` and at whichever of the two sequences
/// ends first. This vector is the audit trail: ADE is its mean and FDE its
/// last entry.
pub fn per_step_errors(
    pred: &PredictedTrajectory,
    gt_aligned: &[(f64, f64)],
    max_steps: usize,
) -> Vec<f64> {
    let n = max_steps.min(pred.states.len()).min(gt_aligned.len());
    (0..n)
        .map(|i| {
            let s = &pred.states[i];
            let (gx, gy) = gt_aligned[i];
            (s.x - gx).hypot(s.y - gy)
        })
        .collect()
}

/// Mean of the per-step errors; None when no step is scoreable.
pub fn ade(errors: &[f64]) -> Option<f64> {
    if errors.is_empty() {
        None
    } else {
        Some(errors.iter().sum::<f64>() / errors.len() as f64)
    }
}

/// Error at the last available step; None when no step is scoreable.
pub fn fde(errors: &[f64]) -> Option<f64> {
    errors.last().copied()
}

/// Collapses per-sample scores (None = undefined) into one score.
pub fn aggregate_ensemble(scores: &[Option<f64>], aggregation: Aggregation) -> Option<f64> {
    let defined: Vec<f64> = scores.iter().flatten().copied().collect();
    if defined.is_empty() {
        return None;
    }
    Some(match aggregation {
        Aggregation::BestK => defined.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregation::MeanK => defined.iter().sum::<f64>() / defined.len() as f64,
    })
}

// ─────────────────────────────────────────────────────────────────────────────
// Dataset evaluation
// ─────────────────────────────────────────────────────────────────────────────

/// Per-trajectory intermediate: aggregated ADE/FDE per horizon (by
/// aggregation) plus horizon-coverage flags.
struct TrajectoryScores {
    /// [horizon][aggregation as index] -> score.
    ade: Vec<[Option<f64>; 2]>,
    fde: Vec<[Option<f64>; 2]>,
    /// Whether any sample covered the horizon's full step count.
    success: Vec<bool>,
}

fn aggregation_index(aggregation: Aggregation) -> usize {
    match aggregation {
        Aggregation::BestK => 0,
        Aggregation::MeanK => 1,
    }
}

/// Ground truth interpolated onto the prediction grid t0 + i·Δt, anchored at
/// the last observed position so the first prediction interval interpolates
/// across the observation boundary.
fn align_ground_truth(split: &ObservationSplit, delta_t: f64, max_steps: usize) -> Vec<(f64, f64)> {
    let gt = &split.ground_truth;
    let t_end = gt.last().map_or(split.t0, |s| s.t);
    let mut out = Vec::new();
    let mut seg = 0usize; // segment index into the anchor+gt chain
    let anchor = Sample {
        t: split.t0,
        x: split.origin.0,
        y: split.origin.1,
    };
    let point = |i: usize| -> &Sample {
        if i == 0 {
            &anchor
        } else {
            &gt[i - 1]
        }
    };
    for i in 1..=max_steps {
        let t = split.t0 + i as f64 * delta_t;
        if t > t_end + 1e-9 {
            break;
        }
        while seg + 1 < gt.len() + 1 && point(seg + 1).t < t {
            seg += 1;
        }
        let a = point(seg);
        if seg + 1 >= gt.len() + 1 {
            out.push((a.x, a.y));
            continue;
        }
        let b = point(seg + 1);
        let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        out.push((a.x + w * (b.x - a.x), a.y + w * (b.y - a.y)));
    }
    out
}

fn score_trajectory(
    map: Option<&CliffMap>,
    split: &ObservationSplit,
    choice: PredictorChoice,
    cfg: &PredictionConfig,
    horizons: &[f64],
) -> Result<TrajectoryScores> {
    let v = observed_velocity(&split.history, cfg.sigma_obs)?;
    let start = State {
        x: split.origin.0,
        y: split.origin.1,
        rho: v.rho,
        theta: v.theta,
    };
    let ensemble: Vec<PredictedTrajectory> = match choice {
        PredictorChoice::CliffLhmp => {
            predict_ensemble(map.expect("map required for rollouts"), start, cfg)
        }
        PredictorChoice::Cvm => vec![cvm_predict(start, cfg)],
    };

    let max_steps = cfg.steps();
    let gt = align_ground_truth(split, cfg.delta_t, max_steps);

    let mut scores = TrajectoryScores {
        ade: vec![[None; 2]; horizons.len()],
        fde: vec![[None; 2]; horizons.len()],
        success: vec![false; horizons.len()],
    };
    for (hi, &h) in horizons.iter().enumerate() {
        let steps_h = steps_for_horizon(h, cfg.delta_t);
        let mut sample_ade = Vec::with_capacity(ensemble.len());
        let mut sample_fde = Vec::with_capacity(ensemble.len());
        for rollout in &ensemble {
            let errors = per_step_errors(rollout, &gt, steps_h);
            sample_ade.push(ade(&errors));
            sample_fde.push(fde(&errors));
            if rollout.states.len() >= steps_h {
                scores.success[hi] = true;
            }
        }
        for agg in [Aggregation::BestK, Aggregation::MeanK] {
            let ai = aggregation_index(agg);
            scores.ade[hi][ai] = aggregate_ensemble(&sample_ade, agg);
            scores.fde[hi][ai] = aggregate_ensemble(&sample_fde, agg);
        }
    }
    Ok(scores)
}

fn mean_and_population_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Runs one predictor over the dataset and reports both aggregations from a
/// single prediction pass. Each trajectory gets a seed derived from the
/// evaluation seed and its dataset index, so results do not depend on worker
/// count or on which other trajectories are present being reordered.
pub fn evaluate_method_all(
    map: Option<&CliffMap>,
    dataset: &[Trajectory],
    choice: PredictorChoice,
    pred_cfg: &PredictionConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    pred_cfg.validate()?;
    eval_cfg.validate()?;
    if matches!(choice, PredictorChoice::CliffLhmp) && map.is_none() {
        return Err(Error::invalid("map-guided evaluation requires a map"));
    }

    // The rollout must cover the largest requested horizon.
    let max_horizon = eval_cfg
        .horizons_s
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(pred_cfg.horizon_s);

    let per_traj: Vec<Option<Result<TrajectoryScores>>> = dataset
        .par_iter()
        .enumerate()
        .map(|(index, traj)| {
            let delta_t_obs = traj.mean_dt();
            let o_p = ((eval_cfg.observation_s / delta_t_obs).round() as usize).max(2);
            let split = match make_observation_splits(traj, o_p, delta_t_obs) {
                Ok(Some(split)) => split,
                Ok(None) => return None,
                Err(e) => return Some(Err(e)),
            };
            let gt_duration = split.ground_truth.last().map_or(0.0, |s| s.t) - split.t0;
            if gt_duration < eval_cfg.min_gt_duration_s {
                return None;
            }
            let cfg = PredictionConfig {
                horizon_s: max_horizon,
                k: eval_cfg.k,
                seed: derive_seed(eval_cfg.seed, index as u64),
                ..pred_cfg.clone()
            };
            Some(score_trajectory(map, &split, choice, &cfg, &eval_cfg.horizons_s))
        })
        .collect();

    let mut scored: Vec<TrajectoryScores> = Vec::new();
    let mut n_skipped = 0usize;
    for entry in per_traj {
        match entry {
            Some(result) => scored.push(result?),
            None => n_skipped += 1,
        }
    }
    if scored.is_empty() {
        return Err(Error::InsufficientData { got: 0, need: 1 });
    }

    let reports = [Aggregation::BestK, Aggregation::MeanK]
        .into_iter()
        .map(|agg| {
            let ai = aggregation_index(agg);
            let records = eval_cfg
                .horizons_s
                .iter()
                .enumerate()
                .map(|(hi, &h)| {
                    let ades: Vec<f64> = scored.iter().filter_map(|s| s.ade[hi][ai]).collect();
                    let fdes: Vec<f64> = scored.iter().filter_map(|s| s.fde[hi][ai]).collect();
                    let successes = scored.iter().filter(|s| s.success[hi]).count();
                    let (ade_mean, ade_std) = mean_and_population_std(&ades);
                    let (fde_mean, fde_std) = mean_and_population_std(&fdes);
                    HorizonRecord {
                        horizon_s: h,
                        ade_mean,
                        ade_std,
                        fde_mean,
                        fde_std,
                        n_trajectories: ades.len(),
                        n_undefined: scored.len() - ades.len(),
                        success_ratio: successes as f64 / scored.len() as f64,
                    }
                })
                .collect();
            EvalReport {
                method: choice.as_str().to_string(),
                aggregation: agg,
                n_input: dataset.len(),
                n_evaluated: scored.len(),
                n_skipped,
                records,
            }
        })
        .collect();
    Ok(reports)
}

/// As `evaluate_method_all`, reporting only the aggregation named in the
/// evaluation config.
pub fn evaluate_method(
    map: Option<&CliffMap>,
    dataset: &[Trajectory],
    choice: PredictorChoice,
    pred_cfg: &PredictionConfig,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport> {
    let reports = evaluate_method_all(map, dataset, choice, pred_cfg, eval_cfg)?;
    Ok(reports
        .into_iter()
        .find(|r| r.aggregation == eval_cfg.aggregation)
        .expect("both aggregations are always computed"))
}

// ─────────────────────────────────────────────────────────────────────────────
// Parameter sweeps
// ─────────────────────────────────────────────────────────────────────────────

/// Which knob a sweep turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Kernel steepness β.
    Beta,
    /// Sampling radius r_s, meters.
    SamplingRadius,
    /// Observation window O_s, seconds.
    ObservationWindow,
    /// Prediction time step Δt, seconds.
    DeltaT,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "rs" => Ok(SweepAxis::SamplingRadius),
            "os" => Ok(SweepAxis::ObservationWindow),
            "dt" => Ok(SweepAxis::DeltaT),
            other => Err(Error::invalid(format!(
                "unknown sweep axis {other:?} (expected beta, rs, os, or dt)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::SamplingRadius => "rs",
            SweepAxis::ObservationWindow => "os",
            SweepAxis::DeltaT => "dt",
        }
    }
}

/// One map-guided evaluation per axis value, everything else held fixed.
pub fn parameter_sweep(
    map: &CliffMap,
    dataset: &[Trajectory],
    base_pred: &PredictionConfig,
    base_eval: &EvalConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<(f64, EvalReport)>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep requires at least one value"));
    }
    values
        .iter()
        .map(|&value| {
            let mut pred = base_pred.clone();
            let mut eval = base_eval.clone();
            match axis {
                SweepAxis::Beta => pred.beta = value,
                SweepAxis::SamplingRadius => pred.sampling_radius = value,
                SweepAxis::ObservationWindow => eval.observation_s = value,
                SweepAxis::DeltaT => pred.delta_t = value,
            }
            let report =
                evaluate_method(Some(map), dataset, PredictorChoice::CliffLhmp, &pred, &eval)?;
            Ok((value, report))
        })
        .collect()
}

/// Flat sweep table keyed by (axis value, horizon), one row per pair.
pub fn sweep_table(axis: SweepAxis, rows: &[(f64, EvalReport)]) -> String {
    let mut out = String::from(
        "method,axis,axis_value,horizon_s,ade_mean,ade_std,fde_mean,fde_std,n_trajectories,n_undefined,success_ratio\n",
    );
    for (value, report) in rows {
        for r in &report.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                report.method,
                axis.as_str(),
                value,
                r.horizon_s,
                opt(r.ade_mean),
                opt(r.ade_std),
                opt(r.fde_mean),
                opt(r.fde_std),
                r.n_trajectories,
                r.n_undefined,
                r.success_ratio,
            ));
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

// ─────────────────────────────────────────────────────────────────────────────
// Report serialization
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ReportDocument {
    format_version: u32,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl EvalReport {
    /// Pretty JSON document with a format version; byte-deterministic for
    /// equal reports.
    pub fn to_json_string(&self) -> String {
        let doc = ReportDocument {
            format_version: REPORT_FORMAT_VERSION,
            report: self.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("report serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if !SUPPORTED_REPORT_VERSIONS.contains(&probe.format_version) {
            return Err(Error::UnsupportedFormatVersion {
                found: probe.format_version,
                supported: SUPPORTED_REPORT_VERSIONS,
            });
        }
        let doc: ReportDocument = serde_json::from_str(text)?;
        Ok(doc.report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Flat per-horizon table for external plotting.
    pub fn write_csv_table(&self, mut writer: impl io::Write) -> Result<()> {
        writeln!(
            writer,
            "method,aggregation,horizon_s,ade_mean,ade_std,fde_mean,fde_std,n_trajectories,n_undefined,success_ratio"
        )?;
        for r in &self.records {
            writeln!(
                writer,
                "{},{},{},{},{},{},{},{},{},{}",
                self.method,
                self.aggregation.as_str(),
                r.horizon_s,
                opt(r.ade_mean),
                opt(r.ade_std),
                opt(r.fde_mean),
                opt(r.fde_std),
                r.n_trajectories,
                r.n_undefined,
                r.success_ratio,
            )?;
        }
        Ok(())
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
