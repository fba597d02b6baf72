//! Trajectory ingestion and preparation.
//!
//! Covers the raw tracking-log parser (millimeter/millisecond records),
//! the canonical `t_s,person_id,x_m,y_m` trajectory CSV, rate downsampling,
//! gap segmentation, and the observation/ground-truth split used by the
//! evaluation harness.

pub mod synthetic;

pub use synthetic::{generate_synthetic, ScenarioKind, SyntheticScenario};

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_model::State;
use crate::predictor::ObservationHistory;

/// One timed position, in seconds and meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// A person's contiguous track: at least two samples, strictly increasing in
/// time, all coordinates finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub person_id: String,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn new(person_id: String, samples: Vec<Sample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::MalformedTrajectory {
                id: person_id,
                reason: format!("{} samples, need at least 2", samples.len()),
            });
        }
        for s in &samples {
            if !(s.t.is_finite() && s.x.is_finite() && s.y.is_finite()) {
                return Err(Error::MalformedTrajectory {
                    id: person_id,
                    reason: format!("non-finite sample at t = {}", s.t),
                });
            }
        }
        if let Some(pair) = samples.windows(2).find(|p| p[1].t <= p[0].t) {
            return Err(Error::MalformedTrajectory {
                id: person_id,
                reason: format!("timestamps not strictly increasing at t = {}", pair[0].t),
            });
        }
        Ok(Trajectory { person_id, samples })
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().unwrap().t - self.samples.first().unwrap().t
    }

    /// Mean sampling interval.
    pub fn mean_dt(&self) -> f64 {
        self.duration() / (self.samples.len() - 1) as f64
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Raw tracking-log parser
// ─────────────────────────────────────────────────────────────────────────────

/// Result of parsing a raw tracking log: trajectories grouped per person plus
/// how many input rows were discarded (malformed fields, wrong field count,
/// duplicate timestamps).
#[derive(Debug)]
pub struct ParseOutcome {
    pub trajectories: Vec<Trajectory>,
    pub rows_total: usize,
    pub rows_skipped: usize,
}

/// Parses raw tracking rows
/// `time_ms,person_id,x_mm,y_mm,z_mm,velocity_mm_s,motion_angle_rad,facing_angle_rad`
/// into per-person trajectories in seconds/meters. Rows that fail to parse
/// are skipped and counted; if more than `max_malformed_fraction` of the rows
/// are bad the whole parse fails, reporting the first offending line.
pub fn parse_atc(reader: impl io::Read, max_malformed_fraction: f64) -> Result<ParseOutcome> {
    if !(0.0..=1.0).contains(&max_malformed_fraction) {
        return Err(Error::invalid(format!(
            "max_malformed_fraction must be in [0, 1], got {max_malformed_fraction}"
        )));
    }

    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut by_person: std::collections::BTreeMap<String, Vec<Sample>> = Default::default();
    let mut rows_total = 0usize;
    let mut rows_skipped = 0usize;
    let mut first_bad_line: Option<u64> = None;

    for record in csv_reader.records() {
        rows_total += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                rows_skipped += 1;
                first_bad_line.get_or_insert(csv_line_of_error(&e));
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        let parsed = (|| -> Option<(String, Sample)> {
            if record.len() != 8 {
                return None;
            }
            let t_ms: f64 = record.get(0)?.parse().ok()?;
            let person = record.get(1)?.to_string();
            let x_mm: f64 = record.get(2)?.parse().ok()?;
            let y_mm: f64 = record.get(3)?.parse().ok()?;
            // Remaining columns (z, speed, angles) are validated as numeric
            // but recomputed downstream from positions.
            for idx in 4..8 {
                let _: f64 = record.get(idx)?.parse().ok()?;
            }
            let sample = Sample {
                t: t_ms / 1000.0,
                x: x_mm / 1000.0,
                y: y_mm / 1000.0,
            };
            (sample.t.is_finite() && sample.x.is_finite() && sample.y.is_finite())
                .then_some((person, sample))
        })();
        match parsed {
            Some((person, sample)) => by_person.entry(person).or_default().push(sample),
            None => {
                rows_skipped += 1;
                first_bad_line.get_or_insert(line);
            }
        }
    }

    // Per-person cleanup: time order, duplicate timestamps dropped.
    let mut trajectories = Vec::new();
    for (person_id, mut samples) in by_person {
        samples.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        let before = samples.len();
        samples.dedup_by_key(|s| s.t);
        rows_skipped += before - samples.len();
        if samples.len() >= 2 {
            trajectories.push(Trajectory { person_id, samples });
        }
    }

    if rows_total > 0 && rows_skipped as f64 > max_malformed_fraction * rows_total as f64 {
        return Err(Error::Parse {
            line: first_bad_line.unwrap_or(0),
            reason: format!(
                "{rows_skipped} of {rows_total} rows malformed, above the allowed fraction {max_malformed_fraction}"
            ),
        });
    }

    Ok(ParseOutcome {
        trajectories,
        rows_total,
        rows_skipped,
    })
}

fn csv_line_of_error(e: &csv::Error) -> u64 {
    match e.kind() {
        csv::ErrorKind::Utf8 { pos, .. } => pos.as_ref().map_or(0, |p| p.line()),
        csv::ErrorKind::UnequalLengths { pos, .. } => pos.as_ref().map_or(0, |p| p.line()),
        _ => 0,
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Canonical trajectory CSV
// ─────────────────────────────────────────────────────────────────────────────

const CANONICAL_HEADER: [&str; 4] = ["t_s", "person_id", "x_m", "y_m"];

/// Writes trajectories as `t_s,person_id,x_m,y_m` rows (LF line endings).
/// Floats print in shortest round-trip form, so write/read is lossless and
/// the output is byte-deterministic.
pub fn write_trajectories_csv(writer: impl io::Write, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CANONICAL_HEADER)
        .map_err(csv_to_error)?;
    for traj in trajectories {
        for s in &traj.samples {
            w.write_record([
                s.t.to_string(),
                traj.person_id.clone(),
                s.x.to_string(),
                s.y.to_string(),
            ])
            .map_err(csv_to_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the canonical trajectory CSV. Consecutive rows sharing a person_id
/// form one trajectory; a person_id reappearing later starts a new one.
pub fn read_trajectories_csv(reader: impl io::Read) -> Result<Vec<Trajectory>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = r.headers().map_err(csv_to_error)?.clone();
    if headers.iter().collect::<Vec<_>>() != CANONICAL_HEADER {
        return Err(Error::Parse {
            line: 1,
            reason: format!(
                "expected header {:?}, got {:?}",
                CANONICAL_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut current_id: Option<String> = None;
    let mut current: Vec<Sample> = Vec::new();
    for record in r.records() {
        let record = record.map_err(csv_to_error)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                reason: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let parse_f64 = |idx: usize| -> Result<f64> {
            record[idx].parse().map_err(|_| Error::Parse {
                line,
                reason: format!("field {:?} is not a number", &record[idx]),
            })
        };
        let sample = Sample {
            t: parse_f64(0)?,
            x: parse_f64(2)?,
            y: parse_f64(3)?,
        };
        let id = record[1].to_string();
        if current_id.as_deref() != Some(id.as_str()) {
            if let Some(done_id) = current_id.take() {
                trajectories.push(Trajectory::new(done_id, std::mem::take(&mut current))?);
            }
            current_id = Some(id);
        }
        current.push(sample);
    }
    if let Some(done_id) = current_id {
        trajectories.push(Trajectory::new(done_id, current)?);
    }
    Ok(trajectories)
}

pub fn save_trajectories(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<()> {
    write_trajectories_csv(std::fs::File::create(path)?, trajectories)
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    read_trajectories_csv(std::fs::File::open(path)?)
}

fn csv_to_error(e: csv::Error) -> Error {
    let line = csv_line_of_error(&e);
    match e.into_kind() {
        csv::ErrorKind::Io(io_err) => Error::Io(io_err),
        other => Error::Parse {
            line,
            reason: format!("{other:?}"),
        },
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Resampling and segmentation
// ─────────────────────────────────────────────────────────────────────────────

/// Downsamples to `target_hz` by keeping, for each instant of the uniform
/// grid anchored at the first sample, the nearest original sample. Input
/// already at the target rate passes through unchanged; a target above the
/// source rate is an error.
pub fn downsample(traj: &Trajectory, target_hz: f64) -> Result<Trajectory> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::invalid(format!("target_hz must be positive, got {target_hz}")));
    }
    let source_rate = 1.0 / traj.mean_dt();
    if target_hz > source_rate * (1.0 + 1e-9) {
        return Err(Error::invalid(format!(
            "target rate {target_hz} Hz above source rate {source_rate:.3} Hz for {:?}",
            traj.person_id
        )));
    }

    let period = 1.0 / target_hz;
    let s = &traj.samples;
    let t_last = s.last().unwrap().t;
    let mut picked: Vec<usize> = Vec::new();
    let mut j = 0usize;
    let mut k = 0usize;
    loop {
        let tk = s[0].t + k as f64 * period;
        if tk > t_last + 1e-9 {
            break;
        }
        while j + 1 < s.len() && (s[j + 1].t - tk).abs() < (s[j].t - tk).abs() {
            j += 1;
        }
        if picked.last() != Some(&j) {
            picked.push(j);
        }
        k += 1;
    }
    if picked.len() < 2 {
        return Err(Error::InsufficientData {
            got: picked.len(),
            need: 2,
        });
    }
    Trajectory::new(
        traj.person_id.clone(),
        picked.into_iter().map(|i| s[i]).collect(),
    )
}

/// `downsample` over a batch; trajectories too short to survive the target
/// rate are dropped and counted instead of failing the batch.
pub fn downsample_all(trajectories: &[Trajectory], target_hz: f64) -> Result<(Vec<Trajectory>, usize)> {
    let mut kept = Vec::with_capacity(trajectories.len());
    let mut dropped = 0usize;
    for traj in trajectories {
        match downsample(traj, target_hz) {
            Ok(t) => kept.push(t),
            Err(Error::InsufficientData { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((kept, dropped))
}

/// Splits trajectories at sampling gaps larger than `max_gap_s`, then keeps
/// segments lasting at least `min_duration_s`. Split segments get `#k`
/// suffixes on the person id; unsplit trajectories keep their id.
pub fn segment_and_filter(
    trajectories: &[Trajectory],
    min_duration_s: f64,
    max_gap_s: f64,
) -> Result<Vec<Trajectory>> {
    if !(max_gap_s.is_finite() && max_gap_s > 0.0) {
        return Err(Error::invalid(format!("max_gap_s must be positive, got {max_gap_s}")));
    }
    if !(min_duration_s.is_finite() && min_duration_s >= 0.0) {
        return Err(Error::invalid(format!(
            "min_duration_s must be non-negative, got {min_duration_s}"
        )));
    }

    let mut out = Vec::new();
    for traj in trajectories {
        let mut segments: Vec<Vec<Sample>> = vec![Vec::new()];
        for (i, s) in traj.samples.iter().enumerate() {
            if i > 0 && s.t - traj.samples[i - 1].t > max_gap_s {
                segments.push(Vec::new());
            }
            segments.last_mut().unwrap().push(*s);
        }
        let split = segments.len() > 1;
        for (k, seg) in segments.into_iter().enumerate() {
            if seg.len() < 2 || seg.last().unwrap().t - seg[0].t < min_duration_s {
                continue;
            }
            let id = if split {
                format!("{}#{k}", traj.person_id)
            } else {
                traj.person_id.clone()
            };
            out.push(Trajectory::new(id, seg)?);
        }
    }
    Ok(out)
}

// ─────────────────────────────────────────────────────────────────────────────
// Observation / ground-truth split
// ─────────────────────────────────────────────────────────────────────────────

/// A trajectory cut into the observed prefix and the ground truth to predict.
#[derive(Clone, Debug)]
pub struct ObservationSplit {
    pub history: ObservationHistory,
    /// Time of the last observed sample; prediction steps land at
    /// t0 + i * delta_t.
    pub t0: f64,
    /// Position of the last observed sample.
    pub origin: (f64, f64),
    /// Remaining samples, starting right after the observation window.
    pub ground_truth: Vec<Sample>,
}

/// Splits a trajectory into its first `o_p` samples (the observation
/// history) and the remainder (ground truth). Returns None when the
/// trajectory is too short to leave any ground truth.
///
/// The history must sit on a uniform `delta_t_obs` grid; samples whose
/// timestamps deviate by more than 1e-6 s are re-anchored by linear
/// interpolation onto the grid ending at the last observed sample.
pub fn make_observation_splits(
    traj: &Trajectory,
    o_p: usize,
    delta_t_obs: f64,
) -> Result<Option<ObservationSplit>> {
    if o_p < 2 {
        return Err(Error::invalid(format!("o_p must be at least 2, got {o_p}")));
    }
    if !(delta_t_obs.is_finite() && delta_t_obs > 0.0) {
        return Err(Error::invalid(format!(
            "delta_t_obs must be positive, got {delta_t_obs}"
        )));
    }
    if traj.samples.len() < o_p + 1 {
        return Ok(None);
    }

    let observed = &traj.samples[..o_p];
    let t0 = observed[o_p - 1].t;
    let grid_time = |i: usize| t0 - (o_p - 1 - i) as f64 * delta_t_obs;
    let on_grid = observed
        .iter()
        .enumerate()
        .all(|(i, s)| (s.t - grid_time(i)).abs() <= 1e-6);

    let positions: Vec<(f64, f64)> = if on_grid {
        observed.iter().map(|s| (s.x, s.y)).collect()
    } else {
        (0..o_p)
            .map(|i| interpolate_position(observed, grid_time(i)))
            .collect()
    };

    // Backward finite differences; the oldest state reuses the first
    // difference so the history keeps one state per observed sample.
    let mut states = Vec::with_capacity(o_p);
    for (i, &(x, y)) in positions.iter().enumerate() {
        let (dx, dy) = if i == 0 {
            (
                positions[1].0 - positions[0].0,
                positions[1].1 - positions[0].1,
            )
        } else {
            (x - positions[i - 1].0, y - positions[i - 1].1)
        };
        states.push(State {
            x,
            y,
            rho: dx.hypot(dy) / delta_t_obs,
            theta: dy.atan2(dx),
        });
    }

    Ok(Some(ObservationSplit {
        history: ObservationHistory::new(states)?,
        t0,
        origin: positions[o_p - 1],
        ground_truth: traj.samples[o_p..].to_vec(),
    }))
}

/// Linear position interpolation with edge hold outside the sample range.
fn interpolate_position(samples: &[Sample], t: f64) -> (f64, f64) {
    if t <= samples[0].t {
        return (samples[0].x, samples[0].y);
    }
    if t >= samples[samples.len() - 1].t {
        let s = &samples[samples.len() - 1];
        return (s.x, s.y);
    }
    let idx = samples.partition_point(|s| s.t < t);
    let (a, b) = (&samples[idx - 1], &samples[idx]);
    let w = (t - a.t) / (b.t - a.t);
    (a.x + w * (b.x - a.x), a.y + w * (b.y - a.y))
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
