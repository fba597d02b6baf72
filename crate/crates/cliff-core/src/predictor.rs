//! Long-horizon stochastic prediction over a flow-field map.
//!
//! Rollouts repeatedly move one step with the current velocity, sample a
//! velocity from the map near the new position, and steer the heading toward
//! the sample through the distance-dependent kernel. Speed stays at the
//! observed value; a rollout truncates when no populated cell lies within the
//! sampling radius. A constant-velocity baseline shares the code path shape
//! so the two are comparable step for step.

use std::io;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map_builder::CliffMap;
use crate::motion_model::{ang_diff, kernel_unchecked, swgmm_sample, wrap, State, Velocity};
use crate::rng::stream_rng;

/// The observed prefix of a trajectory as finite-difference states, newest
/// last. At least two states.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationHistory {
    pub states: Vec<State>,
}

impl ObservationHistory {
    pub fn new(states: Vec<State>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::invalid(format!(
                "observation history needs at least 2 states, got {}",
                states.len()
            )));
        }
        for s in &states {
            if ![s.x, s.y, s.rho, s.theta].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("observation history contains non-finite state"));
            }
        }
        Ok(ObservationHistory { states })
    }

    pub fn latest(&self) -> &State {
        self.states.last().unwrap()
    }
}

/// Rollout parameters. Defaults follow the benchmark protocol: 1 s steps,
/// 20 s horizon, kernel gain 1, 1 m sampling radius, 1 s observation decay,
/// 10 rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionConfig {
    /// Prediction time step, seconds.
    pub delta_t: f64,
    /// Prediction horizon, seconds; the rollout makes floor(horizon/Δt) steps.
    pub horizon_s: f64,
    /// Kernel steepness β: large β ignores the map, small β follows it.
    pub beta: f64,
    /// Radius around the rollout position searched for populated cells, m.
    pub sampling_radius: f64,
    /// Decay (std, in sample counts) of the observation weights.
    pub sigma_obs: f64,
    /// Number of rollouts per trajectory.
    pub k: usize,
    pub seed: u64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            delta_t: 1.0,
            horizon_s: 20.0,
            beta: 1.0,
            sampling_radius: 1.0,
            sigma_obs: 1.0,
            k: 10,
            seed: 0,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta_t", self.delta_t),
            ("horizon_s", self.horizon_s),
            ("beta", self.beta),
            ("sampling_radius", self.sampling_radius),
            ("sigma_obs", self.sigma_obs),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(())
    }

    /// Number of whole prediction steps in the horizon.
    pub fn steps(&self) -> usize {
        steps_for_horizon(self.horizon_s, self.delta_t)
    }
}

/// floor(horizon / Δt), robust to representation error in the quotient.
pub fn steps_for_horizon(horizon_s: f64, delta_t: f64) -> usize {
    (horizon_s / delta_t + 1e-9).floor() as usize
}

/// One rollout: predicted states at t0 + Δt, t0 + 2Δt, …
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTrajectory {
    pub states: Vec<State>,
    /// True when the rollout stopped early because no populated cell was in
    /// reach.
    pub truncated: bool,
    /// The 1-based step at which sampling failed; the rollout then holds
    /// `truncation_step - 1` states.
    pub truncation_step: Option<usize>,
}

impl PredictedTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Reduces an observation history to one velocity: speeds average under
/// weights that decay with age, headings combine as a weighted vector mean.
/// The most recent sample has age 1, so even it is down-weighted relative to
/// a hypothetical age-0 sample — only the relative decay matters after
/// normalization.
pub fn observed_velocity(history: &ObservationHistory, sigma_obs: f64) -> Result<Velocity> {
    if !(sigma_obs.is_finite() && sigma_obs > 0.0) {
        return Err(Error::invalid(format!(
            "sigma_obs must be positive, got {sigma_obs}"
        )));
    }
    let n = history.states.len();
    // Unnormalized Gaussian weight at age t = n - i (newest i = n-1 gets age 1).
    let mut weights = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let age = (n - i) as f64;
        let w = (-0.5 * (age / sigma_obs).powi(2)).exp();
        weights.push(w);
        total += w;
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::numerical(format!(
            "observation weights degenerate for sigma_obs = {sigma_obs}"
        )));
    }

    let mut rho = 0.0;
    let mut sin_sum = 0.0;
    let mut cos_sum = 0.0;
    for (s, w) in history.states.iter().zip(&weights) {
        let w = w / total;
        rho += w * s.rho;
        sin_sum += w * s.theta.sin();
        cos_sum += w * s.theta.cos();
    }
    // A vanishing resultant means the headings cancel; fall back to the most
    // recent heading rather than an arbitrary atan2(0, 0).
    let theta = if sin_sum.hypot(cos_sum) < 1e-9 {
        history.latest().theta
    } else {
        wrap(sin_sum.atan2(cos_sum))
    };
    Ok(Velocity { theta, rho })
}

/// Draws one velocity from the map near (x, y): a populated cell whose
/// center lies strictly within `radius` is chosen uniformly, then its
/// mixture is sampled. None when no such cell exists.
pub fn sample_velocity_from_map(
    map: &CliffMap,
    x: f64,
    y: f64,
    radius: f64,
    rng: &mut impl Rng,
) -> Option<Velocity> {
    let nearby = map.cells_within(x, y, radius);
    if nearby.is_empty() {
        return None;
    }
    let (_, cell) = nearby[rng.random_range(0..nearby.len())];
    Some(swgmm_sample(&cell.mixture, rng))
}

/// Steers `theta_prev` toward `theta_sample` by the kernel-scaled angular
/// difference: θ' = wrap(θ_prev + d·e^(−β d²)). Small differences pass
/// through almost unchanged; large ones are damped, so the rollout prefers
/// map directions compatible with its current heading.
pub fn blend_heading(theta_prev: f64, theta_sample: f64, beta: f64) -> f64 {
    let d = ang_diff(theta_sample, theta_prev);
    wrap(theta_prev + d * kernel_unchecked(d, beta))
}

/// Rolls out one stochastic prediction from `start` (position and velocity at
/// t0). Each step first moves with the current velocity, then samples the map
/// at the new position to steer the heading. Speed stays constant.
pub fn predict_one(
    map: &CliffMap,
    start: State,
    cfg: &PredictionConfig,
    rng: &mut impl Rng,
) -> PredictedTrajectory {
    let t_p = cfg.steps();
    let mut states = Vec::with_capacity(t_p);
    let mut prev = start;
    for step in 1..=t_p {
        let x = prev.x + prev.rho * prev.theta.cos() * cfg.delta_t;
        let y = prev.y + prev.rho * prev.theta.sin() * cfg.delta_t;
        let Some(sample) = sample_velocity_from_map(map, x, y, cfg.sampling_radius, rng) else {
            return PredictedTrajectory {
                states,
                truncated: true,
                truncation_step: Some(step),
            };
        };
        let next = State {
            x,
            y,
            rho: prev.rho,
            theta: blend_heading(prev.theta, sample.theta, cfg.beta),
        };
        states.push(next);
        prev = next;
    }
    PredictedTrajectory {
        states,
        truncated: false,
        truncation_step: None,
    }
}

/// `cfg.k` rollouts, each on its own deterministic random stream, so the
/// ensemble is reproducible and independent of evaluation order.
pub fn predict_ensemble(map: &CliffMap, start: State, cfg: &PredictionConfig) -> Vec<PredictedTrajectory> {
    (0..cfg.k)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            predict_one(map, start, cfg, &mut rng)
        })
        .collect()
}

/// Constant-velocity baseline: the start velocity extrapolated for the whole
/// horizon. Iterates the same position update as the map-based rollout so the
/// two agree step for step in the limit where the kernel correction vanishes.
pub fn cvm_predict(start: State, cfg: &PredictionConfig) -> PredictedTrajectory {
    let t_p = cfg.steps();
    let mut states = Vec::with_capacity(t_p);
    let mut prev = start;
    for _ in 0..t_p {
        let next = State {
            x: prev.x + prev.rho * prev.theta.cos() * cfg.delta_t,
            y: prev.y + prev.rho * prev.theta.sin() * cfg.delta_t,
            rho: prev.rho,
            theta: prev.theta,
        };
        states.push(next);
        prev = next;
    }
    PredictedTrajectory {
        states,
        truncated: false,
        truncation_step: None,
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Prediction records CSV
// ─────────────────────────────────────────────────────────────────────────────

const PREDICTION_HEADER: [&str; 9] = [
    "trajectory_id",
    "sample_index",
    "step",
    "t_seconds",
    "x",
    "y",
    "rho",
    "theta",
    "truncated_flag",
];

/// Streams rollout ensembles as CSV rows, one row per predicted state.
/// `t_seconds` is absolute (t0 + step·Δt); `truncated_flag` marks every row
/// of a truncated rollout. Floats print in shortest round-trip form.
pub struct PredictionRecordWriter<W: io::Write> {
    inner: csv::Writer<W>,
}

impl<W: io::Write> PredictionRecordWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner
            .write_record(PREDICTION_HEADER)
            .map_err(|e| Error::numerical(format!("csv write failed: {e}")))?;
        Ok(PredictionRecordWriter { inner })
    }

    pub fn write_ensemble(
        &mut self,
        trajectory_id: &str,
        t0: f64,
        delta_t: f64,
        ensemble: &[PredictedTrajectory],
    ) -> Result<()> {
        for (sample_index, rollout) in ensemble.iter().enumerate() {
            let flag = if rollout.truncated { "1" } else { "0" };
            for (i, s) in rollout.states.iter().enumerate() {
                let step = i + 1;
                self.inner
                    .write_record([
                        trajectory_id,
                        &sample_index.to_string(),
                        &step.to_string(),
                        &(t0 + step as f64 * delta_t).to_string(),
                        &s.x.to_string(),
                        &s.y.to_string(),
                        &s.rho.to_string(),
                        &s.theta.to_string(),
                        flag,
                    ])
                    .map_err(|e| Error::numerical(format!("csv write failed: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::synthetic::{generate_synthetic, SyntheticScenario};
    use crate::map_builder::{build_map, CellModel, CliffMap, EmConfig, GridSpec};
    use crate::motion_model::{angular_diff, Cov2, SemiWrappedComponent, Swgmm};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn history_of(states: Vec<State>) -> ObservationHistory {
        ObservationHistory::new(states).unwrap()
    }

    fn constant_history(theta: f64, rho: f64, n: usize) -> ObservationHistory {
        history_of(
            (0..n)
                .map(|i| State {
                    x: i as f64,
                    y: 0.0,
                    rho,
                    theta,
                })
                .collect(),
        )
    }

    /// Map whose every cell holds the same mixture, over a square grid.
    fn uniform_map(mixture: Swgmm, origin: f64, size: usize) -> CliffMap {
        let grid = GridSpec {
            origin_x: origin,
            origin_y: origin,
            resolution: 1.0,
            width: size,
            height: size,
        };
        let mut map = CliffMap::new(grid).unwrap();
        for ix in 0..size {
            for iy in 0..size {
                map.insert(
                    ix,
                    iy,
                    CellModel {
                        mixture: mixture.clone(),
                        observation_count: 100,
                    },
                )
                .unwrap();
            }
        }
        map
    }

    fn unimodal(theta: f64, rho: f64, var: f64) -> Swgmm {
        Swgmm::new(vec![SemiWrappedComponent::new(
            1.0,
            theta,
            rho,
            Cov2::diagonal(var, var),
        )
        .unwrap()])
        .unwrap()
    }

    // ── observed velocity ────────────────────────────────────────────────

    #[test]
    fn observed_velocity_is_a_fixpoint_on_constant_histories() {
        let hist = constant_history(0.73, 1.31, 8);
        let v = observed_velocity(&hist, 1.0).unwrap();
        assert_abs_diff_eq!(v.rho, 1.31, epsilon = 1e-12);
        assert_abs_diff_eq!(angular_diff(v.theta, 0.73).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn observed_velocity_weights_recent_speeds_more() {
        // Two states, sigma 1: normalized weights e^{-1/2} and e^{-2} give
        // 0.8175744761936437 on the newer speed.
        let hist = history_of(vec![
            State { x: 0.0, y: 0.0, rho: 1.0, theta: 0.0 },
            State { x: 1.0, y: 0.0, rho: 2.0, theta: 0.0 },
        ]);
        let v = observed_velocity(&hist, 1.0).unwrap();
        assert_abs_diff_eq!(v.rho, 1.8175744761936437, epsilon = 1e-12);
    }

    #[test]
    fn observed_velocity_averages_headings_circularly_at_the_seam() {
        // Headings straddling ±π must average to the seam, not to 0.
        let states: Vec<State> = (0..8)
            .map(|i| State {
                x: 0.0,
                y: 0.0,
                rho: 1.0,
                theta: if i % 2 == 0 { PI - 0.05 } else { -PI + 0.05 },
            })
            .collect();
        // Near-uniform weights: the ±0.05 sine parts cancel almost exactly.
        let v = observed_velocity(&history_of(states.clone()), 1e6).unwrap();
        assert!(
            angular_diff(v.theta, -PI).unwrap().abs() < 1e-9,
            "seam mean came out {}",
            v.theta
        );
        // Strongly decayed weights still land near the seam.
        let v = observed_velocity(&history_of(states), 1.0).unwrap();
        assert!(angular_diff(v.theta, -PI).unwrap().abs() < 0.1);
    }

    #[test]
    fn observed_velocity_falls_back_to_latest_heading_when_headings_cancel() {
        let states: Vec<State> = [0.0, FRAC_PI_2, PI, -FRAC_PI_2]
            .iter()
            .map(|&theta| State { x: 0.0, y: 0.0, rho: 1.0, theta })
            .collect();
        let v = observed_velocity(&history_of(states), 1e6).unwrap();
        assert_abs_diff_eq!(v.theta, -FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn observed_velocity_of_a_standing_person_is_zero_speed() {
        let hist = constant_history(0.0, 0.0, 8);
        let v = observed_velocity(&hist, 1.0).unwrap();
        assert_eq!(v.rho, 0.0);
    }

    #[test]
    fn observed_velocity_rejects_bad_sigma() {
        let hist = constant_history(0.0, 1.0, 4);
        assert!(observed_velocity(&hist, 0.0).is_err());
        assert!(observed_velocity(&hist, f64::NAN).is_err());
    }

    // ── map sampling ─────────────────────────────────────────────────────

    #[test]
    fn sampling_outside_coverage_returns_none() {
        let map = uniform_map(unimodal(0.0, 1.0, 0.01), 0.0, 4);
        let mut rng = stream_rng(0, 0);
        assert!(sample_velocity_from_map(&map, 50.0, 50.0, 1.0, &mut rng).is_none());
    }

    #[test]
    fn sampling_a_tight_cell_returns_its_mean() {
        let map = uniform_map(unimodal(0.9, 1.4, 1e-10), 0.0, 4);
        let mut rng = stream_rng(0, 0);
        let v = sample_velocity_from_map(&map, 2.0, 2.0, 1.0, &mut rng).unwrap();
        assert_abs_diff_eq!(v.theta, 0.9, epsilon = 1e-4);
        assert_abs_diff_eq!(v.rho, 1.4, epsilon = 1e-4);
    }

    #[test]
    fn sampling_chooses_equidistant_cells_uniformly() {
        // Two populated cells, centers (0.5, 0.5) and (1.5, 0.5); the probe
        // point (1.0, 0.5) is 0.5 m from both.
        let grid = GridSpec {
            origin_x: 0.0,
            origin_y: 0.0,
            resolution: 1.0,
            width: 2,
            height: 1,
        };
        let mut map = CliffMap::new(grid).unwrap();
        map.insert(0, 0, CellModel { mixture: unimodal(0.0, 1.0, 1e-6), observation_count: 10 })
            .unwrap();
        map.insert(1, 0, CellModel { mixture: unimodal(1.0, 1.0, 1e-6), observation_count: 10 })
            .unwrap();

        let mut rng = stream_rng(7, 0);
        let mut west = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let v = sample_velocity_from_map(&map, 1.0, 0.5, 1.0, &mut rng).unwrap();
            if v.theta < 0.5 {
                west += 1;
            }
        }
        let frac = west as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "west cell drawn {frac} of the time");
    }

    // ── heading blend ────────────────────────────────────────────────────

    #[test]
    fn blend_keeps_heading_when_sample_agrees() {
        let theta = blend_heading(0.4, 0.4, 1.0);
        assert_abs_diff_eq!(theta, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn blend_crosses_the_seam_the_short_way() {
        // From just below +π toward just above −π: the short way is forward
        // through the seam, not backward through 0.
        let theta = blend_heading(PI - 0.1, -PI + 0.1, 1e-12);
        assert!(
            angular_diff(theta, PI - 0.1).unwrap() > 0.0,
            "blend went the long way around: {theta}"
        );
        assert!(theta < -PI + 0.2, "β→0 should arrive near the sample, got {theta}");
    }

    proptest! {
        #[test]
        fn blend_correction_is_bounded_by_the_disagreement(
            prev in -PI..PI,
            sample in -PI..PI,
            beta in 1e-3..1e3,
        ) {
            let blended = blend_heading(prev, sample, beta);
            let d = ang_diff(sample, prev);
            let moved = ang_diff(blended, prev);
            prop_assert!(moved.abs() <= d.abs() + 1e-12);
            // Moves toward the sample, never away — up to wrap round-off
            // when the kernel correction vanishes.
            prop_assert!(moved * d >= 0.0 || moved.abs() < 1e-12);
        }

        #[test]
        fn blend_correction_shrinks_as_beta_grows(
            prev in -PI..PI,
            sample in -PI..PI,
        ) {
            let small = ang_diff(blend_heading(prev, sample, 0.5), prev).abs();
            let large = ang_diff(blend_heading(prev, sample, 5.0), prev).abs();
            prop_assert!(large <= small + 1e-12);
        }
    }

    // ── rollouts ─────────────────────────────────────────────────────────

    #[test]
    fn rollout_steps_cover_the_horizon() {
        let cfg = PredictionConfig::default();
        assert_eq!(cfg.steps(), 20);
        assert_eq!(steps_for_horizon(20.0, 0.4), 50);
        assert_eq!(steps_for_horizon(3.0, 0.4), 7, "partial steps are not taken");
    }

    #[test]
    fn rollout_displacement_per_step_is_speed_times_dt() {
        let map = uniform_map(unimodal(FRAC_PI_4, 1.0, 0.05), -20.0, 40);
        let cfg = PredictionConfig { delta_t: 0.5, horizon_s: 8.0, ..Default::default() };
        let start = State { x: 0.0, y: 0.0, rho: 1.3, theta: 0.2 };
        let mut rng = stream_rng(1, 0);
        let pred = predict_one(&map, start, &cfg, &mut rng);
        assert!(!pred.truncated);
        let mut prev = start;
        for s in &pred.states {
            let d = (s.x - prev.x).hypot(s.y - prev.y);
            assert_abs_diff_eq!(d, 1.3 * 0.5, epsilon = 1e-12);
            assert_eq!(s.rho, 1.3, "speed must stay at the observed value");
            prev = *s;
        }
    }

    #[test]
    fn rollout_with_matching_map_tracks_the_constant_velocity_baseline() {
        // Every cell agrees with the start velocity and has almost no
        // spread, so kernel corrections are negligible.
        let start = State { x: 0.0, y: 0.0, rho: 1.0, theta: 0.3 };
        let map = uniform_map(unimodal(0.3, 1.0, 1e-8), -30.0, 60);
        let cfg = PredictionConfig::default();
        let mut rng = stream_rng(3, 0);
        let pred = predict_one(&map, start, &cfg, &mut rng);
        let baseline = cvm_predict(start, &cfg);
        assert_eq!(pred.len(), baseline.len());
        for (p, b) in pred.states.iter().zip(&baseline.states) {
            assert_abs_diff_eq!(p.x, b.x, epsilon = 1e-2);
            assert_abs_diff_eq!(p.y, b.y, epsilon = 1e-2);
        }
    }

    #[test]
    fn rollout_follows_a_curved_flow_field() {
        // Map learned from circulation around a circle of radius 10; a
        // rollout starting tangentially must stay near the circle while the
        // constant-velocity baseline leaves it.
        let mut scenario = SyntheticScenario::quarter_circle(42);
        scenario.heading_noise_std = 0.05;
        let trajs = generate_synthetic(&scenario, 120).unwrap();
        let em = EmConfig { max_components: 2, seed: 9, ..Default::default() };
        let (map, _) = build_map(&trajs, scenario.extent, &em).unwrap();

        // Start on the circle's east point heading north (the tangent).
        let start = State { x: 23.0, y: 13.0, rho: 1.0, theta: FRAC_PI_2 };
        let cfg = PredictionConfig { horizon_s: 15.0, ..Default::default() };
        let mut rng = stream_rng(5, 0);
        let pred = predict_one(&map, start, &cfg, &mut rng);
        assert!(pred.len() >= 12, "rollout should stay on covered ground");
        for s in &pred.states {
            let r = (s.x - 13.0).hypot(s.y - 13.0);
            assert!(
                (r - 10.0).abs() < 1.5,
                "rollout left the annulus: radius {r} at ({}, {})",
                s.x,
                s.y
            );
        }
        // The baseline drives straight off the circle.
        let baseline = cvm_predict(start, &cfg);
        let last = baseline.states.last().unwrap();
        let r = (last.x - 13.0).hypot(last.y - 13.0);
        assert!(r > 12.0, "straight-line baseline should leave the annulus, got {r}");
    }

    #[test]
    fn ensemble_member_zero_replays_predict_one() {
        let map = uniform_map(unimodal(0.0, 1.0, 0.1), -20.0, 40);
        let start = State { x: 0.0, y: 0.0, rho: 1.0, theta: 0.1 };
        let cfg = PredictionConfig { k: 4, seed: 123, ..Default::default() };
        let ensemble = predict_ensemble(&map, start, &cfg);
        assert_eq!(ensemble.len(), 4);
        let mut rng = stream_rng(123, 0);
        let single = predict_one(&map, start, &cfg, &mut rng);
        assert_eq!(ensemble[0], single);
    }

    #[test]
    fn ensembles_are_reproducible_and_members_differ() {
        let map = uniform_map(unimodal(0.0, 1.0, 0.3), -20.0, 40);
        let start = State { x: 0.0, y: 0.0, rho: 1.0, theta: 0.0 };
        let cfg = PredictionConfig { k: 6, seed: 9, ..Default::default() };
        let a = predict_ensemble(&map, start, &cfg);
        let b = predict_ensemble(&map, start, &cfg);
        assert_eq!(a, b);
        assert!(
            a.windows(2).any(|w| w[0] != w[1]),
            "rollouts on different streams should differ"
        );
    }

    #[test]
    fn junction_ensemble_represents_both_branches() {
        // Every cell is an even two-way split between ±π/4; rollouts commit
        // to one branch as the kernel keeps reinforcing whichever mode they
        // sample first.
        let mixture = Swgmm::new(vec![
            SemiWrappedComponent::new(0.5, FRAC_PI_4, 1.0, Cov2::diagonal(0.01, 0.01)).unwrap(),
            SemiWrappedComponent::new(0.5, -FRAC_PI_4, 1.0, Cov2::diagonal(0.01, 0.01)).unwrap(),
        ])
        .unwrap();
        let map = uniform_map(mixture, -25.0, 50);
        let start = State { x: 0.0, y: 0.0, rho: 1.0, theta: 0.0 };
        let cfg = PredictionConfig { k: 20, horizon_s: 12.0, seed: 2, ..Default::default() };
        let ensemble = predict_ensemble(&map, start, &cfg);
        let up = ensemble
            .iter()
            .filter(|p| p.states.last().unwrap().y > 0.0)
            .count();
        let down = ensemble.len() - up;
        assert!(
            up >= 2 && down >= 2,
            "expected both branches among 20 rollouts, got {up} up / {down} down"
        );
    }

    #[test]
    fn rollout_truncates_immediately_outside_coverage() {
        let map = uniform_map(unimodal(0.0, 1.0, 0.1), 0.0, 4);
        let start = State { x: 40.0, y: 40.0, rho: 1.0, theta: 0.0 };
        let mut rng = stream_rng(0, 0);
        let pred = predict_one(&map, start, &PredictionConfig::default(), &mut rng);
        assert!(pred.truncated);
        assert_eq!(pred.truncation_step, Some(1));
        assert!(pred.is_empty());
    }

    #[test]
    fn rollout_truncates_when_walking_off_coverage() {
        // Coverage spans x in [0, 10); starting at x = 8.5 heading east at
        // 1 m/s, step 1 lands at 9.5 (covered), step 2 at 10.5 where the
        // nearest center is exactly 1.0 m away — outside the strict radius.
        let map = uniform_map(unimodal(0.0, 1.0, 1e-9), 0.0, 10);
        let start = State { x: 8.5, y: 0.5, rho: 1.0, theta: 0.0 };
        let mut rng = stream_rng(0, 0);
        let pred = predict_one(&map, start, &PredictionConfig::default(), &mut rng);
        assert!(pred.truncated);
        assert_eq!(pred.truncation_step, Some(2));
        assert_eq!(pred.len(), 1);
    }

    // ── constant-velocity baseline ───────────────────────────────────────

    #[test]
    fn baseline_matches_the_closed_form() {
        let start = State { x: 2.0, y: -1.0, rho: 1.2, theta: 0.7 };
        let cfg = PredictionConfig { delta_t: 0.4, horizon_s: 8.0, ..Default::default() };
        let pred = cvm_predict(start, &cfg);
        assert_eq!(pred.len(), 20);
        assert!(!pred.truncated);
        for (i, s) in pred.states.iter().enumerate() {
            let t = (i + 1) as f64 * 0.4;
            assert_abs_diff_eq!(s.x, 2.0 + 1.2 * t * 0.7f64.cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(s.y, -1.0 + 1.2 * t * 0.7f64.sin(), epsilon = 1e-12);
        }
    }

    // ── records CSV ──────────────────────────────────────────────────────

    #[test]
    fn prediction_records_csv_is_deterministic_and_well_formed() {
        let map = uniform_map(unimodal(0.0, 1.0, 0.1), -20.0, 40);
        let start = State { x: 0.0, y: 0.0, rho: 1.0, theta: 0.0 };
        let cfg = PredictionConfig { k: 3, horizon_s: 4.0, ..Default::default() };
        let ensemble = predict_ensemble(&map, start, &cfg);

        let render = || {
            let mut buf = Vec::new();
            let mut w = PredictionRecordWriter::new(&mut buf).unwrap();
            w.write_ensemble("traj-1", 100.0, cfg.delta_t, &ensemble).unwrap();
            w.finish().unwrap();
            buf
        };
        let a = render();
        assert_eq!(a, render(), "identical input must serialize identically");

        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "trajectory_id,sample_index,step,t_seconds,x,y,rho,theta,truncated_flag"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("traj-1,0,1,101,"), "row was {first:?}");
        assert_eq!(text.lines().count(), 1 + 3 * 4, "3 rollouts of 4 steps each");
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = PredictionConfig::default();
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
        cfg = PredictionConfig::default();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
        cfg = PredictionConfig::default();
        cfg.delta_t = -1.0;
        assert!(cfg.validate().is_err());
        assert!(PredictionConfig::default().validate().is_ok());
    }
}
