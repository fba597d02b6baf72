//! Flow-field map: a sparse grid of per-cell velocity mixtures.
//!
//! Trajectories are differentiated into positioned velocity observations,
//! binned into grid cells, and each sufficiently populated cell gets a
//! semi-wrapped Gaussian mixture fitted by EM. Maps serialize to a versioned
//! JSON document and can be compared cell-by-cell with a Monte-Carlo KL
//! estimate.

mod em;

pub use em::{fit_cell, CellFit, EmConfig};

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::Trajectory;
use crate::error::{Error, Result};
use crate::motion_model::{log_sum_exp, swgmm_sample, swn_log_pdf, Precision2, Swgmm, Velocity};
use crate::rng::stream_rng;

pub const MAP_FORMAT_VERSION: u32 = 1;
pub const KL_FORMAT_VERSION: u32 = 1;
const SUPPORTED_MAP_VERSIONS: &[u32] = &[MAP_FORMAT_VERSION];
const SUPPORTED_KL_VERSIONS: &[u32] = &[KL_FORMAT_VERSION];

// ─────────────────────────────────────────────────────────────────────────────
// Grid
// ─────────────────────────────────────────────────────────────────────────────

/// Axis-aligned grid: `width` x `height` square cells of side `resolution`
/// meters, anchored at the lower-left corner (origin_x, origin_y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(origin_x: f64, origin_y: f64, resolution: f64, width: usize, height: usize) -> Result<Self> {
        let g = GridSpec { origin_x, origin_y, resolution, width, height };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::invalid("grid origin must be finite"));
        }
        if !self.resolution.is_finite() || self.resolution <= 0.0 {
            return Err(Error::invalid(format!(
                "grid resolution must be positive, got {}",
                self.resolution
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("grid must have at least one cell"));
        }
        Ok(())
    }

    /// Grid that covers the bounding box, expanded outward to whole cells.
    pub fn from_bounds(min_x: f64, min_y: f64, max_x: f64, max_y: f64, resolution: f64) -> Result<Self> {
        if !(min_x <= max_x && min_y <= max_y) {
            return Err(Error::invalid("empty bounds for grid"));
        }
        let width = (((max_x - min_x) / resolution).floor() as usize) + 1;
        let height = (((max_y - min_y) / resolution).floor() as usize) + 1;
        GridSpec::new(min_x, min_y, resolution, width, height)
    }

    /// Cell containing (x, y), or None when outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.origin_x) / self.resolution;
        let fy = (y - self.origin_y) / self.resolution;
        if fx < 0.0 || fy < 0.0 || fx >= self.width as f64 || fy >= self.height as f64 {
            return None;
        }
        Some((fx.floor() as usize, fy.floor() as usize))
    }

    /// Metric center of a cell.
    pub fn center_of(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin_x + (ix as f64 + 0.5) * self.resolution,
            self.origin_y + (iy as f64 + 0.5) * self.resolution,
        )
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Map
// ─────────────────────────────────────────────────────────────────────────────

/// One populated cell: its velocity mixture and how many observations
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct CellModel {
    pub mixture: Swgmm,
    pub observation_count: usize,
}

/// Sparse flow-field map over a `GridSpec`.
#[derive(Clone, Debug, PartialEq)]
pub struct CliffMap {
    grid: GridSpec,
    cells: BTreeMap<(usize, usize), CellModel>,
}

impl CliffMap {
    pub fn new(grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        Ok(CliffMap { grid, cells: BTreeMap::new() })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, ix: usize, iy: usize) -> Option<&CellModel> {
        self.cells.get(&(ix, iy))
    }

    /// Cells in deterministic (ix, iy) order.
    pub fn cells(&self) -> impl Iterator<Item = (&(usize, usize), &CellModel)> {
        self.cells.iter()
    }

    pub fn insert(&mut self, ix: usize, iy: usize, cell: CellModel) -> Result<()> {
        if ix >= self.grid.width || iy >= self.grid.height {
            return Err(Error::invalid(format!(
                "cell ({ix}, {iy}) outside {}x{} grid",
                self.grid.width, self.grid.height
            )));
        }
        self.cells.insert((ix, iy), cell);
        Ok(())
    }

    /// Populated cells whose centers lie strictly within `radius` meters of
    /// (x, y), in deterministic (ix, iy) order.
    pub fn cells_within(&self, x: f64, y: f64, radius: f64) -> Vec<((usize, usize), &CellModel)> {
        let g = &self.grid;
        let lo_x = (((x - radius - g.origin_x) / g.resolution).floor()).max(0.0) as usize;
        let lo_y = (((y - radius - g.origin_y) / g.resolution).floor()).max(0.0) as usize;
        let hi_x = ((x + radius - g.origin_x) / g.resolution).floor();
        let hi_y = ((y + radius - g.origin_y) / g.resolution).floor();
        if hi_x < 0.0 || hi_y < 0.0 {
            return Vec::new();
        }
        let hi_x = (hi_x as usize).min(g.width - 1);
        let hi_y = (hi_y as usize).min(g.height - 1);
        let mut found = Vec::new();
        for ix in lo_x..=hi_x {
            for iy in lo_y..=hi_y {
                if let Some(cell) = self.cells.get(&(ix, iy)) {
                    let (cx, cy) = g.center_of(ix, iy);
                    if (cx - x).hypot(cy - y) < radius {
                        found.push(((ix, iy), cell));
                    }
                }
            }
        }
        found
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Building
// ─────────────────────────────────────────────────────────────────────────────

/// A velocity observation anchored at the position where it was measured.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityObservation {
    pub x: f64,
    pub y: f64,
    pub velocity: Velocity,
}

/// Counters describing one `build_map` run.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct BuildSummary {
    pub trajectories: usize,
    pub observations: usize,
    pub observations_dropped: usize,
    pub cells_populated: usize,
    pub cells_skipped_insufficient: usize,
    pub em_converged: usize,
    pub em_not_converged: usize,
}

/// Finite-difference velocities of a trajectory, each attributed to the
/// earlier sample of its pair. A zero displacement yields speed 0 with
/// heading 0 (the atan2 convention).
pub fn derive_velocities(traj: &Trajectory) -> Result<Vec<VelocityObservation>> {
    let s = &traj.samples;
    let mut out = Vec::with_capacity(s.len().saturating_sub(1));
    for pair in s.windows(2) {
        let dt = pair[1].t - pair[0].t;
        if dt <= 0.0 {
            return Err(Error::MalformedTrajectory {
                id: traj.person_id.clone(),
                reason: format!(
                    "non-increasing timestamps {} -> {}",
                    pair[0].t, pair[1].t
                ),
            });
        }
        let dx = pair[1].x - pair[0].x;
        let dy = pair[1].y - pair[0].y;
        out.push(VelocityObservation {
            x: pair[0].x,
            y: pair[0].y,
            velocity: Velocity {
                theta: dy.atan2(dx),
                rho: dx.hypot(dy) / dt,
            },
        });
    }
    Ok(out)
}

/// Groups observations by containing cell; observations outside the grid are
/// counted as dropped.
pub fn bin_observations(
    observations: &[VelocityObservation],
    grid: &GridSpec,
) -> (BTreeMap<(usize, usize), Vec<Velocity>>, usize) {
    let mut bins: BTreeMap<(usize, usize), Vec<Velocity>> = BTreeMap::new();
    let mut dropped = 0usize;
    for obs in observations {
        match grid.cell_of(obs.x, obs.y) {
            Some(key) => bins.entry(key).or_default().push(obs.velocity),
            None => dropped += 1,
        }
    }
    (bins, dropped)
}

/// Stream id for per-cell RNG derivation; collision-free for grids below
/// 2^32 cells per side.
fn cell_stream(ix: usize, iy: usize) -> u64 {
    ((ix as u64) << 32) ^ (iy as u64)
}

/// Learns a map from trajectories: derive velocities, bin them, fit every
/// cell with at least `min_observations_per_cell` observations. Cell fits run
/// in parallel on dedicated RNG streams, so the result is byte-identical for
/// a given seed regardless of worker count.
pub fn build_map(
    trajectories: &[Trajectory],
    grid: GridSpec,
    cfg: &EmConfig,
) -> Result<(CliffMap, BuildSummary)> {
    grid.validate()?;
    cfg.validate()?;

    let mut summary = BuildSummary {
        trajectories: trajectories.len(),
        ..BuildSummary::default()
    };
    let mut observations = Vec::new();
    for traj in trajectories {
        observations.extend(derive_velocities(traj)?);
    }
    summary.observations = observations.len();

    let (bins, dropped) = bin_observations(&observations, &grid);
    summary.observations_dropped = dropped;

    let mut fittable: Vec<((usize, usize), Vec<Velocity>)> = Vec::new();
    for (key, obs) in bins {
        if obs.len() >= cfg.min_observations_per_cell {
            fittable.push((key, obs));
        } else {
            summary.cells_skipped_insufficient += 1;
        }
    }

    let fits: Vec<((usize, usize), usize, CellFit)> = fittable
        .par_iter()
        .map(|((ix, iy), obs)| {
            let mut rng = stream_rng(cfg.seed, cell_stream(*ix, *iy));
            fit_cell(obs, cfg, &mut rng).map(|fit| ((*ix, *iy), obs.len(), fit))
        })
        .collect::<Result<_>>()?;

    let mut map = CliffMap::new(grid)?;
    for ((ix, iy), count, fit) in fits {
        if fit.converged {
            summary.em_converged += 1;
        } else {
            summary.em_not_converged += 1;
        }
        map.insert(
            ix,
            iy,
            CellModel {
                mixture: fit.mixture,
                observation_count: count,
            },
        )?;
    }
    summary.cells_populated = map.len();

    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    Ok((map, summary))
}

// ─────────────────────────────────────────────────────────────────────────────
// Map comparison
// ─────────────────────────────────────────────────────────────────────────────

/// Per-cell KL estimates between two maps on the same grid. `values` is
/// row-major (iy * width + ix); None marks cells not populated in both maps.
#[derive(Clone, Debug, PartialEq)]
pub struct KlHeatmap {
    pub grid: GridSpec,
    pub values: Vec<Option<f64>>,
}

impl KlHeatmap {
    pub fn get(&self, ix: usize, iy: usize) -> Option<f64> {
        self.values.get(iy * self.grid.width + ix).copied().flatten()
    }

    /// Mean over cells defined in both maps; None when no cell is shared.
    pub fn mean_defined(&self) -> Option<f64> {
        let defined: Vec<f64> = self.values.iter().copied().flatten().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Precomputed mixture evaluator for repeated log-density queries.
struct MixtureEval {
    comps: Vec<(f64, Precision2, f64, f64)>, // (log weight, precision, mean_theta, mean_rho)
}

impl MixtureEval {
    fn new(m: &Swgmm) -> Self {
        MixtureEval {
            comps: m
                .components
                .iter()
                .map(|c| {
                    (
                        c.weight.ln(),
                        c.cov.precision().expect("validated covariance"),
                        c.mean_theta,
                        c.mean_rho,
                    )
                })
                .collect(),
        }
    }

    fn log_pdf(&self, v: Velocity) -> f64 {
        let terms: Vec<f64> = self
            .comps
            .iter()
            .map(|(lw, prec, mt, mr)| lw + swn_log_pdf(prec, *mt, *mr, v))
            .collect();
        log_sum_exp(&terms)
    }
}

/// Monte-Carlo estimate of KL(a_cell || b_cell) for every cell populated in
/// both maps: average log-density ratio over `n_samples` draws from a's
/// mixture, clamped at 0 (KL is non-negative; small negative estimates are
/// sampling noise). Cells missing from either map stay None.
pub fn compare_maps_kl(a: &CliffMap, b: &CliffMap, n_samples: usize, seed: u64) -> Result<KlHeatmap> {
    if a.grid != b.grid {
        return Err(Error::invalid(
            "maps to compare must share an identical grid",
        ));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }

    let shared: Vec<(usize, usize)> = a
        .cells
        .keys()
        .filter(|key| b.cells.contains_key(*key))
        .copied()
        .collect();

    let estimates: Vec<((usize, usize), f64)> = shared
        .par_iter()
        .map(|&(ix, iy)| {
            let pa = MixtureEval::new(&a.get(ix, iy).unwrap().mixture);
            let pb = MixtureEval::new(&b.get(ix, iy).unwrap().mixture);
            let mix_a = &a.get(ix, iy).unwrap().mixture;
            let mut rng = stream_rng(seed, cell_stream(ix, iy));
            let mut acc = 0.0;
            for _ in 0..n_samples {
                let v = swgmm_sample(mix_a, &mut rng);
                acc += pa.log_pdf(v) - pb.log_pdf(v);
            }
            ((ix, iy), (acc / n_samples as f64).max(0.0))
        })
        .collect();

    let mut values = vec![None; a.grid.width * a.grid.height];
    for ((ix, iy), est) in estimates {
        values[iy * a.grid.width + ix] = Some(est);
    }
    Ok(KlHeatmap { grid: a.grid, values })
}

// ─────────────────────────────────────────────────────────────────────────────
// Serialization
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct MapDocument {
    format_version: u32,
    grid: GridSpec,
    cells: Vec<CellDocument>,
}

#[derive(Serialize, Deserialize)]
struct CellDocument {
    ix: usize,
    iy: usize,
    observation_count: usize,
    components: Vec<crate::motion_model::SemiWrappedComponent>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn check_version(json: &str, supported: &'static [u32]) -> Result<()> {
    let probe: VersionProbe = serde_json::from_str(json)?;
    if !supported.contains(&probe.format_version) {
        return Err(Error::UnsupportedFormatVersion {
            found: probe.format_version,
            supported,
        });
    }
    Ok(())
}

impl CliffMap {
    pub fn to_json_string(&self) -> String {
        let doc = MapDocument {
            format_version: MAP_FORMAT_VERSION,
            grid: self.grid,
            cells: self
                .cells
                .iter()
                .map(|(&(ix, iy), cell)| CellDocument {
                    ix,
                    iy,
                    observation_count: cell.observation_count,
                    components: cell.mixture.components.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("map document serializes infallibly")
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        check_version(json, SUPPORTED_MAP_VERSIONS)?;
        let doc: MapDocument = serde_json::from_str(json)?;
        doc.grid.validate()?;
        let mut map = CliffMap::new(doc.grid)?;
        for cell in doc.cells {
            if map.get(cell.ix, cell.iy).is_some() {
                return Err(Error::Parse {
                    line: 0,
                    reason: format!("duplicate cell ({}, {}) in map document", cell.ix, cell.iy),
                });
            }
            map.insert(
                cell.ix,
                cell.iy,
                CellModel {
                    mixture: Swgmm::new(cell.components)?,
                    observation_count: cell.observation_count,
                },
            )?;
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_json_string().as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut json = String::new();
        std::fs::File::open(path)?.read_to_string(&mut json)?;
        Self::from_json_str(&json)
    }
}

#[derive(Serialize, Deserialize)]
struct KlDocument {
    format_version: u32,
    grid: GridSpec,
    values: Vec<Option<f64>>,
}

impl KlHeatmap {
    pub fn to_json_string(&self) -> String {
        let doc = KlDocument {
            format_version: KL_FORMAT_VERSION,
            grid: self.grid,
            values: self.values.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("heatmap document serializes infallibly")
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        check_version(json, SUPPORTED_KL_VERSIONS)?;
        let doc: KlDocument = serde_json::from_str(json)?;
        doc.grid.validate()?;
        if doc.values.len() != doc.grid.width * doc.grid.height {
            return Err(Error::Parse {
                line: 0,
                reason: format!(
                    "heatmap has {} values for a {}x{} grid",
                    doc.values.len(),
                    doc.grid.width,
                    doc.grid.height
                ),
            });
        }
        Ok(KlHeatmap { grid: doc.grid, values: doc.values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_json_string().as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut json = String::new();
        std::fs::File::open(path)?.read_to_string(&mut json)?;
        Self::from_json_str(&json)
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
