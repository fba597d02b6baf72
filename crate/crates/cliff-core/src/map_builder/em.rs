//! Expectation-maximization for semi-wrapped Gaussian mixtures.
//!
//! The heading dimension lives on a circle, which changes two things compared
//! to textbook EM: the E-step evaluates the winding-summed density, and the
//! M-step picks each observation's best winding image under the current
//! component before averaging, then re-wraps the resulting mean. Model order
//! is chosen by BIC over 1..=max_components.

use std::f64::consts::TAU;

use rand::Rng;

use crate::error::{Error, Result};
use crate::motion_model::{
    log_sum_exp, swn_log_pdf, wrap, Cov2, Precision2, SemiWrappedComponent, Swgmm, Velocity,
    DEFAULT_MAX_WINDING,
};

/// Knobs for per-cell mixture fitting.
#[derive(Clone, Copy, Debug)]
pub struct EmConfig {
    /// Largest model order tried during BIC selection.
    pub max_components: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the relative log-likelihood change.
    pub log_likelihood_tolerance: f64,
    /// Lower bound applied to covariance eigenvalues after every M-step.
    pub covariance_floor: f64,
    /// Cells with fewer observations than this are not fitted at all.
    pub min_observations_per_cell: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_components: 5,
            max_iterations: 100,
            log_likelihood_tolerance: 1e-6,
            covariance_floor: 1e-4,
            min_observations_per_cell: 10,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_components == 0 {
            return Err(Error::invalid("max_components must be at least 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.log_likelihood_tolerance > 0.0) {
            return Err(Error::invalid("log_likelihood_tolerance must be positive"));
        }
        if !(self.covariance_floor > 0.0) {
            return Err(Error::invalid("covariance_floor must be positive"));
        }
        if self.min_observations_per_cell < 2 {
            return Err(Error::invalid("min_observations_per_cell must be at least 2"));
        }
        Ok(())
    }
}

/// Result of fitting one cell: the selected mixture plus fit diagnostics.
#[derive(Clone, Debug)]
pub struct CellFit {
    pub mixture: Swgmm,
    /// False when the selected run hit max_iterations without meeting the
    /// tolerance; the best-so-far parameters are still returned.
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub bic: f64,
    /// Per-iteration log-likelihood of the selected run (non-decreasing up to
    /// covariance-floor effects); kept for diagnostics and tests.
    pub log_likelihood_trace: Vec<f64>,
}

/// Fits a semi-wrapped mixture to one cell's velocity observations, selecting
/// the component count by BIC.
pub fn fit_cell(observations: &[Velocity], cfg: &EmConfig, rng: &mut impl Rng) -> Result<CellFit> {
    cfg.validate()?;
    let n = observations.len();
    if n < cfg.min_observations_per_cell {
        return Err(Error::InsufficientData {
            got: n,
            need: cfg.min_observations_per_cell,
        });
    }

    // Scale that makes speed comparable with the unit-radius heading
    // embedding during initialization.
    let rho_scale = {
        let mean = observations.iter().map(|v| v.rho).sum::<f64>() / n as f64;
        let var = observations.iter().map(|v| (v.rho - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            sd
        } else {
            1.0
        }
    };

    let mut best: Option<CellFit> = None;
    for k in 1..=cfg.max_components.min(n) {
        let init = kmeans_init(observations, k, rho_scale, rng);
        let fit = run_em(observations, init, cfg);
        // Free parameters: k-1 weights, 2k means, 3k covariance entries.
        let params = (6 * k - 1) as f64;
        let bic = -2.0 * fit.log_likelihood + params * (n as f64).ln();
        let fit = CellFit { bic, ..fit };
        if best.as_ref().is_none_or(|b| bic < b.bic) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one model order was fitted"))
}

// ─────────────────────────────────────────────────────────────────────────────
// EM core
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Clone)]
struct Component {
    weight: f64,
    mean_theta: f64,
    mean_rho: f64,
    cov: Cov2,
    prec: Precision2,
}

impl Component {
    fn from_params(weight: f64, mean_theta: f64, mean_rho: f64, cov: Cov2) -> Self {
        let prec = cov.precision().expect("floored covariance is SPD");
        Component {
            weight,
            mean_theta,
            mean_rho,
            cov,
            prec,
        }
    }
}

fn run_em(obs: &[Velocity], init: Vec<Component>, cfg: &EmConfig) -> CellFit {
    let n = obs.len();
    let k = init.len();
    let mut comps = init;
    let mut resp = vec![0.0f64; n * k];
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..cfg.max_iterations {
        iterations = iter + 1;

        // E-step: posterior responsibilities and the data log-likelihood
        // under the current parameters.
        let mut ll = 0.0;
        let mut logs = vec![0.0f64; k];
        for (i, v) in obs.iter().enumerate() {
            for (j, c) in comps.iter().enumerate() {
                logs[j] = c.weight.ln() + swn_log_pdf(&c.prec, c.mean_theta, c.mean_rho, *v);
            }
            let lse = log_sum_exp(&logs);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (logs[j] - lse).exp();
            }
        }

        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if (ll - prev).abs() / prev.abs().max(1e-12) < cfg.log_likelihood_tolerance {
                converged = true;
                break;
            }
        }

        // M-step with winding-aware heading statistics.
        let mut weight_total = 0.0;
        for j in 0..k {
            let nj: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nj < 1e-8 {
                // Component starved of responsibility: restart it on the
                // observation the mixture currently explains worst.
                let worst = (0..n)
                    .min_by(|&a, &b| {
                        let ra: f64 = (0..k).map(|j| resp[a * k + j]).sum();
                        let rb: f64 = (0..k).map(|j| resp[b * k + j]).sum();
                        ra.partial_cmp(&rb).unwrap()
                    })
                    .unwrap_or(0);
                comps[j] = Component::from_params(
                    1.0 / n as f64,
                    obs[worst].theta,
                    obs[worst].rho,
                    Cov2::diagonal(0.1, 0.1).eigen_floored(cfg.covariance_floor),
                );
                weight_total += comps[j].weight;
                continue;
            }

            // Each observation contributes its best winding image under the
            // current component, so means and covariances are computed on an
            // unwrapped, locally linear copy of the circle.
            let c = &comps[j];
            let mut sum_theta = 0.0;
            let mut sum_rho = 0.0;
            let mut unwrapped = vec![0.0f64; n];
            for (i, v) in obs.iter().enumerate() {
                let dr = v.rho - c.mean_rho;
                let mut best_q = f64::INFINITY;
                let mut best_theta = v.theta;
                for w in -DEFAULT_MAX_WINDING..=DEFAULT_MAX_WINDING {
                    let theta_w = v.theta + TAU * f64::from(w);
                    let q = c.prec.quad_form(theta_w - c.mean_theta, dr);
                    if q < best_q {
                        best_q = q;
                        best_theta = theta_w;
                    }
                }
                unwrapped[i] = best_theta;
                let r = resp[i * k + j];
                sum_theta += r * best_theta;
                sum_rho += r * v.rho;
            }
            let mean_theta_unwrapped = sum_theta / nj;
            let mean_rho = sum_rho / nj;

            let (mut ctt, mut ctr, mut crr) = (0.0, 0.0, 0.0);
            for (i, v) in obs.iter().enumerate() {
                let r = resp[i * k + j];
                let dt = unwrapped[i] - mean_theta_unwrapped;
                let dr = v.rho - mean_rho;
                ctt += r * dt * dt;
                ctr += r * dt * dr;
                crr += r * dr * dr;
            }
            let cov = Cov2 {
                tt: ctt / nj,
                tr: ctr / nj,
                rr: crr / nj,
            }
            .eigen_floored(cfg.covariance_floor);

            comps[j] =
                Component::from_params(nj / n as f64, wrap(mean_theta_unwrapped), mean_rho, cov);
            weight_total += comps[j].weight;
        }
        // Guard against drift; the weights already sum to ~1.
        for c in &mut comps {
            c.weight /= weight_total;
        }
    }

    // Deterministic presentation order: heaviest component first.
    comps.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap()
            .then(a.mean_theta.partial_cmp(&b.mean_theta).unwrap())
    });
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    let mixture = Swgmm::new(
        comps
            .into_iter()
            .map(|c| {
                SemiWrappedComponent::new(c.weight / total, c.mean_theta, c.mean_rho, c.cov)
                    .expect("EM output satisfies component invariants")
            })
            .collect(),
    )
    .expect("EM output satisfies mixture invariants");

    CellFit {
        mixture,
        converged,
        iterations,
        log_likelihood: *trace.last().expect("at least one iteration ran"),
        bic: f64::NAN, // filled in by fit_cell
        log_likelihood_trace: trace,
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Initialization
// ─────────────────────────────────────────────────────────────────────────────

/// Seeded k-means++ / Lloyd on the cylinder embedding
/// (cos theta, sin theta, rho / rho_scale), turned into initial components.
fn kmeans_init(obs: &[Velocity], k: usize, rho_scale: f64, rng: &mut impl Rng) -> Vec<Component> {
    let n = obs.len();
    let embed: Vec<[f64; 3]> = obs
        .iter()
        .map(|v| [v.theta.cos(), v.theta.sin(), v.rho / rho_scale])
        .collect();
    let d2 = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };

    // k-means++ seeding.
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
    centers.push(embed[rng.random_range(0..n)]);
    while centers.len() < k {
        let dists: Vec<f64> = embed
            .iter()
            .map(|e| {
                centers
                    .iter()
                    .map(|c| d2(e, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        if total <= 0.0 {
            centers.push(embed[rng.random_range(0..n)]);
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in dists.iter().enumerate() {
            target -= d;
            if target <= 0.0 {
                pick = i;
                break;
            }
        }
        centers.push(embed[pick]);
    }

    // Lloyd iterations with empty-cluster rescue.
    let mut assign = vec![0usize; n];
    for _ in 0..25 {
        let mut changed = false;
        for (i, e) in embed.iter().enumerate() {
            let nearest = (0..k)
                .min_by(|&a, &b| d2(e, &centers[a]).partial_cmp(&d2(e, &centers[b])).unwrap())
                .unwrap();
            if assign[i] != nearest {
                assign[i] = nearest;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![[0.0f64; 3]; k];
        for (i, e) in embed.iter().enumerate() {
            counts[assign[i]] += 1;
            for d in 0..3 {
                sums[assign[i]][d] += e[d];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..3 {
                    centers[j][d] = sums[j][d] / counts[j] as f64;
                }
            }
        }
        if rescue_empty_clusters(&embed, &mut centers, &mut assign, &mut counts, d2) {
            changed = true;
        }
        if !changed {
            break;
        }
    }
    // The loop can end right after a rescue shuffled assignments; make the
    // at-least-one-member guarantee unconditional.
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    rescue_empty_clusters(&embed, &mut centers, &mut assign, &mut counts, d2);

    // Cluster statistics become the initial mixture parameters.
    (0..k)
        .map(|j| {
            let members: Vec<&Velocity> = obs
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == j)
                .map(|(v, _)| v)
                .collect();
            debug_assert!(!members.is_empty(), "empty clusters were rescued above");
            let m = members.len() as f64;
            let (sx, sy): (f64, f64) = members
                .iter()
                .fold((0.0, 0.0), |acc, v| (acc.0 + v.theta.cos(), acc.1 + v.theta.sin()));
            let mean_theta = if sx == 0.0 && sy == 0.0 {
                members[0].theta
            } else {
                sy.atan2(sx)
            };
            let mean_rho = members.iter().map(|v| v.rho).sum::<f64>() / m;
            let (mut ctt, mut ctr, mut crr) = (0.0, 0.0, 0.0);
            for v in &members {
                let dt = crate::motion_model::ang_diff(v.theta, mean_theta);
                let dr = v.rho - mean_rho;
                ctt += dt * dt;
                ctr += dt * dr;
                crr += dr * dr;
            }
            let cov = Cov2 {
                tt: ctt / m,
                tr: ctr / m,
                rr: crr / m,
            }
            .eigen_floored(1e-3); // init floor looser than the EM floor
            Component::from_params(m / n as f64, mean_theta, mean_rho, cov)
        })
        .collect()
}

/// Hands each empty cluster one observation donated by a cluster that can
/// spare it (two or more members), preferring the donor's farthest point.
/// With at least as many observations as clusters a donor always exists, so
/// every cluster ends up non-empty — even when all points coincide and
/// distances carry no information. Returns whether anything moved.
fn rescue_empty_clusters(
    embed: &[[f64; 3]],
    centers: &mut [[f64; 3]],
    assign: &mut [usize],
    counts: &mut [usize],
    d2: impl Fn(&[f64; 3], &[f64; 3]) -> f64,
) -> bool {
    let mut moved = false;
    for j in 0..centers.len() {
        if counts[j] > 0 {
            continue;
        }
        let donor = (0..embed.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                d2(&embed[a], &centers[assign[a]])
                    .partial_cmp(&d2(&embed[b], &centers[assign[b]]))
                    .unwrap()
            })
            .expect("more observations than clusters");
        counts[assign[donor]] -= 1;
        assign[donor] = j;
        counts[j] = 1;
        centers[j] = embed[donor];
        moved = true;
    }
    moved
}
