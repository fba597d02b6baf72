//! Synthetic motion scenarios with known heading fields.
//!
//! Agents integrate through an analytic flow field at constant speed with
//! per-step Gaussian heading noise. The fields are simple enough that the
//! correct map and the correct predictions are known in closed form, which
//! makes these scenarios the oracles for the map builder and predictor.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data_io::{Sample, Trajectory};
use crate::error::{Error, Result};
use crate::map_builder::GridSpec;
use crate::rng::stream_rng;

/// The heading-field geometry of a scenario.
#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioKind {
    /// Straight eastward flow along `y_center`.
    Corridor { y_center: f64, half_width: f64 },
    /// Eastward entry leg at `leg_y`, a rounded 90° left turn of radius
    /// `turn_radius` ending at `corner_x`, then a northward exit leg.
    LCorner {
        corner_x: f64,
        leg_y: f64,
        turn_radius: f64,
        half_width: f64,
    },
    /// Counterclockwise circulation around (`center_x`, `center_y`); agents
    /// start on the circle of `radius` and follow it.
    QuarterCircle {
        center_x: f64,
        center_y: f64,
        radius: f64,
    },
    /// Eastward stem along `stem_y` splitting at `junction_x` into two
    /// straight branches at ±`branch_angle`; each agent takes the upper
    /// branch with probability `branch_prob`.
    YJunction {
        junction_x: f64,
        stem_y: f64,
        branch_angle: f64,
        branch_prob: f64,
        half_width: f64,
    },
}

/// A complete generation recipe: geometry plus motion and sampling
/// parameters. Generation is fully determined by the scenario (including
/// its seed) and the number of agents.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScenario {
    pub name: String,
    pub kind: ScenarioKind,
    /// Agent speed in m/s; constant along a trajectory.
    pub speed: f64,
    /// Std of the per-step Gaussian heading perturbation, radians.
    pub heading_noise_std: f64,
    /// Sampling interval of the generated trajectories, seconds.
    pub sample_dt: f64,
    /// Maximum trajectory duration; agents also stop at the extent edge.
    pub duration_s: f64,
    /// Walkable area; also a natural grid for maps of this scenario.
    pub extent: GridSpec,
    pub seed: u64,
}

impl SyntheticScenario {
    /// 30 m × 8 m eastward corridor.
    pub fn corridor(seed: u64) -> Self {
        SyntheticScenario {
            name: "corridor".into(),
            kind: ScenarioKind::Corridor {
                y_center: 4.0,
                half_width: 1.5,
            },
            speed: 1.0,
            heading_noise_std: 0.1,
            sample_dt: 0.4,
            duration_s: 60.0,
            extent: GridSpec {
                origin_x: 0.0,
                origin_y: 0.0,
                resolution: 1.0,
                width: 30,
                height: 8,
            },
            seed,
        }
    }

    /// Eastward leg turning north through a rounded 4 m-radius corner.
    pub fn l_corner(seed: u64) -> Self {
        SyntheticScenario {
            name: "l-corner".into(),
            kind: ScenarioKind::LCorner {
                corner_x: 12.0,
                leg_y: 3.0,
                turn_radius: 4.0,
                half_width: 1.0,
            },
            speed: 1.0,
            heading_noise_std: 0.1,
            sample_dt: 0.4,
            duration_s: 45.0,
            extent: GridSpec {
                origin_x: 0.0,
                origin_y: 0.0,
                resolution: 1.0,
                width: 16,
                height: 30,
            },
            seed,
        }
    }

    /// Circulation around a 10 m circle centered in a 26 m × 26 m area.
    pub fn quarter_circle(seed: u64) -> Self {
        SyntheticScenario {
            name: "quarter-circle".into(),
            kind: ScenarioKind::QuarterCircle {
                center_x: 13.0,
                center_y: 13.0,
                radius: 10.0,
            },
            speed: 1.0,
            heading_noise_std: 0.1,
            sample_dt: 0.4,
            duration_s: 30.0,
            extent: GridSpec {
                origin_x: 0.0,
                origin_y: 0.0,
                resolution: 1.0,
                width: 26,
                height: 26,
            },
            seed,
        }
    }

    /// Eastward stem splitting into ±45° branches at x = 12.
    pub fn y_junction(branch_prob: f64, seed: u64) -> Self {
        SyntheticScenario {
            name: "y-junction".into(),
            kind: ScenarioKind::YJunction {
                junction_x: 12.0,
                stem_y: 15.0,
                branch_angle: FRAC_PI_4,
                branch_prob,
                half_width: 1.0,
            },
            speed: 1.0,
            heading_noise_std: 0.1,
            sample_dt: 0.4,
            duration_s: 60.0,
            extent: GridSpec {
                origin_x: 0.0,
                origin_y: 0.0,
                resolution: 1.0,
                width: 30,
                height: 30,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(Error::invalid(format!("speed must be positive, got {}", self.speed)));
        }
        if !(self.heading_noise_std.is_finite() && self.heading_noise_std >= 0.0) {
            return Err(Error::invalid(format!(
                "heading_noise_std must be non-negative, got {}",
                self.heading_noise_std
            )));
        }
        if !(self.sample_dt.is_finite() && self.sample_dt > 0.0) {
            return Err(Error::invalid(format!(
                "sample_dt must be positive, got {}",
                self.sample_dt
            )));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= self.sample_dt) {
            return Err(Error::invalid(format!(
                "duration_s must be at least one sample interval, got {}",
                self.duration_s
            )));
        }
        self.extent.validate()?;
        if let ScenarioKind::YJunction { branch_prob, .. } = self.kind {
            if !(0.0..=1.0).contains(&branch_prob) {
                return Err(Error::invalid(format!(
                    "branch_prob must be in [0, 1], got {branch_prob}"
                )));
            }
        }
        if let ScenarioKind::QuarterCircle { radius, .. } = self.kind {
            if !(radius.is_finite() && radius > 0.0) {
                return Err(Error::invalid(format!("radius must be positive, got {radius}")));
            }
        }
        Ok(())
    }

    /// Field heading at a position. `step_len` lets the circular field use
    /// chord-exact stepping; `branch_up` carries the agent's junction choice.
    fn heading_at(&self, x: f64, y: f64, step_len: f64, branch_up: bool) -> f64 {
        match self.kind {
            ScenarioKind::Corridor { .. } => 0.0,
            ScenarioKind::LCorner {
                corner_x,
                leg_y,
                turn_radius,
                ..
            } => {
                let (cx, cy) = (corner_x - turn_radius, leg_y + turn_radius);
                if x <= cx {
                    0.0
                } else if y >= cy {
                    FRAC_PI_2
                } else {
                    // Counterclockwise tangent around the corner's arc center.
                    (y - cy).atan2(x - cx) + FRAC_PI_2
                }
            }
            ScenarioKind::QuarterCircle {
                center_x, center_y, ..
            } => {
                let (dx, dy) = (x - center_x, y - center_y);
                let r = dx.hypot(dy).max(step_len);
                // Heading of the chord subtending one step on the circle of
                // radius r: each noise-free step lands back on that circle
                // instead of spiraling outward.
                let delta = 2.0 * (step_len / (2.0 * r)).asin();
                dy.atan2(dx) + delta / 2.0 + FRAC_PI_2
            }
            ScenarioKind::YJunction {
                junction_x,
                branch_angle,
                ..
            } => {
                if x < junction_x {
                    0.0
                } else if branch_up {
                    branch_angle
                } else {
                    -branch_angle
                }
            }
        }
    }

    /// Start position (plus the junction choice) for agent `rng`.
    fn spawn(&self, rng: &mut impl Rng) -> ((f64, f64), bool) {
        match self.kind {
            ScenarioKind::Corridor {
                y_center,
                half_width,
            } => {
                let x = rng.random_range(0.5..2.5);
                let y = y_center + rng.random_range(-half_width..half_width);
                ((x, y), false)
            }
            ScenarioKind::LCorner {
                leg_y, half_width, ..
            } => {
                let x = rng.random_range(0.5..2.5);
                let y = leg_y + rng.random_range(-half_width..half_width);
                ((x, y), false)
            }
            ScenarioKind::QuarterCircle {
                center_x,
                center_y,
                radius,
            } => {
                let phi = rng.random_range(-PI..PI);
                (
                    (center_x + radius * phi.cos(), center_y + radius * phi.sin()),
                    false,
                )
            }
            ScenarioKind::YJunction {
                stem_y,
                branch_prob,
                half_width,
                ..
            } => {
                let x = rng.random_range(0.5..2.5);
                let y = stem_y + rng.random_range(-half_width..half_width);
                let up = rng.random::<f64>() < branch_prob;
                ((x, y), up)
            }
        }
    }
}

/// Generates `n` agent trajectories through the scenario's heading field.
///
/// Each agent gets its own deterministic random stream derived from the
/// scenario seed, so output is reproducible bit-exactly and independent of
/// evaluation order. Agents stop at the scenario duration or one step before
/// leaving the extent, whichever comes first.
pub fn generate_synthetic(scenario: &SyntheticScenario, n: usize) -> Result<Vec<Trajectory>> {
    scenario.validate()?;
    let step = scenario.speed * scenario.sample_dt;
    let mut trajectories = Vec::with_capacity(n);
    for agent in 0..n {
        let mut rng = stream_rng(scenario.seed, agent as u64);
        let ((mut x, mut y), branch_up) = scenario.spawn(&mut rng);
        let mut samples = vec![Sample { t: 0.0, x, y }];
        for i in 1.. {
            let t = i as f64 * scenario.sample_dt;
            if t > scenario.duration_s + 1e-9 {
                break;
            }
            let noise: f64 = rng.sample(StandardNormal);
            let theta =
                scenario.heading_at(x, y, step, branch_up) + scenario.heading_noise_std * noise;
            let (nx, ny) = (x + step * theta.cos(), y + step * theta.sin());
            if scenario.extent.cell_of(nx, ny).is_none() {
                break;
            }
            (x, y) = (nx, ny);
            samples.push(Sample { t, x, y });
        }
        trajectories.push(Trajectory::new(
            format!("{}-{:04}", scenario.name, agent),
            samples,
        )?);
    }
    Ok(trajectories)
}
