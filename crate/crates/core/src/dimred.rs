//! Forward selection of the coordinates that carry the shift, for large `d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_is::{solve_on, NewtonSettings, ShiftSolution, WeightedBatch};
use crate::vector::{dot, norm_sq, ShiftVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DimRedConfig {
    /// `Some(b)` forces the reduction on or off; `None` enables it above `auto_above`.
    pub enabled: Option<bool>,
    pub auto_above: usize,
    pub max_dims: usize,
    pub energy: f64,
    /// Coordinates whose mean is within `z_min` standard errors of zero carry no energy.
    pub z_min: f64,
}

impl Default for DimRedConfig {
    fn default() -> Self {
        DimRedConfig {
            enabled: None,
            auto_above: 500,
            max_dims: 200,
            energy: 0.99,
            z_min: 2.0,
        }
    }
}

impl DimRedConfig {
    pub fn active_for(&self, d: usize) -> bool {
        self.enabled.unwrap_or(d > self.auto_above)
    }
}

/// Ordered coordinate subset `A`; a reduced shift `t` embeds as `theta[A[i]] = t[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceSelection {
    pub indices: Vec<usize>,
    pub dim: usize,
}

impl SubspaceSelection {
    pub fn all(d: usize) -> Self {
        SubspaceSelection {
            indices: (0..d).collect(),
            dim: d,
        }
    }

    pub fn embed(&self, t: &[f64]) -> ShiftVector {
        let mut theta = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(t) {
            theta[i] = v;
        }
        ShiftVector(theta)
    }

    pub fn project(&self, theta: &ShiftVector) -> Vec<f64> {
        self.indices.iter().map(|&i| theta.0[i]).collect()
    }
}

/// Weighted survivor mean of each coordinate and its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateStats {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl CoordinateStats {
    /// Survivors weighted by `exp(-theta_prev . X)`, i.e. the Newton step of the
    /// log-objective from zero shift.
    pub fn from_batch(batch: &WeightedBatch) -> Result<Self> {
        let d = batch.dim();
        let tp = batch.theta_prev.as_slice();
        let surv: Vec<&[f64]> = batch
            .points
            .iter()
            .zip(&batch.survivors)
            .filter(|(_, &s)| s)
            .map(|(p, _)| p.as_slice())
            .collect();
        if surv.is_empty() {
            return Err(Error::NoSurvivors);
        }
        let logw: Vec<f64> = surv.iter().map(|x| -dot(tp, x)).collect();
        let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let n_eff = 1.0 / norm_sq(&w);

        let mut mean = vec![0.0; d];
        for (x, &wj) in surv.iter().zip(&w) {
            for (m, xi) in mean.iter_mut().zip(x.iter()) {
                *m += wj * xi;
            }
        }
        let mut var = vec![0.0; d];
        for (x, &wj) in surv.iter().zip(&w) {
            for ((v, xi), m) in var.iter_mut().zip(x.iter()).zip(&mean) {
                *v += wj * (xi - m) * (xi - m);
            }
        }
        let std_error = var.iter().map(|v| (v / n_eff).sqrt()).collect();
        Ok(CoordinateStats { mean, std_error })
    }
}

/// Ranks coordinates by `|mean|` (ties to the lower index) and adds them until
/// the selected share of `max(0, |mean| - z_min se)^2` reaches `threshold`, or
/// `max_dims` are selected. A threshold of 1 or more selects up to the cap.
pub fn select_important(stats: &CoordinateStats, max_dims: usize, threshold: f64, z_min: f64) -> SubspaceSelection {
    let d = stats.mean.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| stats.mean[b].abs().total_cmp(&stats.mean[a].abs()).then(a.cmp(&b)));
    let cap = max_dims.min(d).max(1);
    if threshold >= 1.0 {
        order.truncate(cap);
        return SubspaceSelection { indices: order, dim: d };
    }
    let mut energy: Vec<f64> = stats
        .mean
        .iter()
        .zip(&stats.std_error)
        .map(|(m, s)| (m.abs() - z_min * s).max(0.0).powi(2))
        .collect();
    let mut total: f64 = energy.iter().sum();
    if total == 0.0 {
        energy = stats.mean.iter().map(|m| m * m).collect();
        total = energy.iter().sum();
    }
    let mut indices = Vec::new();
    let mut cum = 0.0;
    for &i in order.iter().take(cap) {
        indices.push(i);
        cum += energy[i];
        if cum >= threshold * total {
            break;
        }
    }
    SubspaceSelection { indices, dim: d }
}

pub fn select_from_batch(batch: &WeightedBatch, config: &DimRedConfig) -> Result<SubspaceSelection> {
    let stats = CoordinateStats::from_batch(batch)?;
    Ok(select_important(&stats, config.max_dims, config.energy, config.z_min))
}

/// Minimizes the log-objective over shifts supported on `selection`; the
/// result is exactly zero off the selected coordinates.
pub fn solve_shift_in_subspace(
    batch: &WeightedBatch,
    selection: &SubspaceSelection,
    theta_init: &ShiftVector,
    settings: &NewtonSettings,
) -> Result<ShiftSolution> {
    if selection.dim != batch.dim() || selection.indices.iter().any(|&i| i >= batch.dim()) {
        return Err(Error::Dimension {
            expected: batch.dim(),
            got: selection.dim,
        });
    }
    let sol = solve_on(batch, Some(&selection.indices), theta_init, settings)?;
    if !sol.converged {
        return Err(Error::NotConverged {
            max_iter: settings.max_iter,
            grad_norm: sol.grad_norm,
            best: sol.theta_star,
        });
    }
    Ok(sol)
}
