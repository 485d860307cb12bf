//! Tail quantiles `Gamma(p)`: the threshold whose exceedance probability is `p`.
//!
//! A ladder climbs as for a probability until its intermediate estimate drops
//! to `p`, then the shift is re-solved at the batch's weighted `p`-quantile.
//! Fresh batches under that shift are pooled and the weighted survival curve
//! is inverted at `p`. The interval on the quantile is the probability
//! interval divided by the local slope of the survival curve.

use serde::{Deserialize, Serialize};

use crate::dimred::{select_from_batch, SubspaceSelection};
use crate::error::{Error, Result};
use crate::gaussian_is::{solve_on, WeightedBatch};
use crate::model::{Model, Tail};
use crate::multilevel::{next_level, shift_weight, speedup, z_value, LadderConfig, LadderTrace, LevelRecord};
use crate::rng::{tags, RngStream};
use crate::vector::{Point, ShiftVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantileConfig {
    /// `gamma` is ignored; levels rise until the exceedance estimate reaches `p`.
    pub ladder: LadderConfig,
    /// Target relative half-width of the quantile.
    pub precision: f64,
    pub batch: usize,
    pub confidence: f64,
    pub max_runs: usize,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig {
            ladder: LadderConfig::default(),
            precision: 0.005,
            batch: 1000,
            confidence: 0.95,
            max_runs: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub p: f64,
    pub tail: Tail,
    /// Quantile in model units.
    pub quantile: f64,
    pub half_width: f64,
    pub rel_half_width: f64,
    /// Relative half-width of the exceedance probability at the quantile.
    pub prob_rel_half_width: f64,
    pub confidence: f64,
    pub runs_exploration: usize,
    pub runs_final: usize,
    pub speedup: f64,
    pub theta_final: ShiftVector,
    pub converged: bool,
}

impl QuantileReport {
    pub fn total_runs(&self) -> usize {
        self.runs_exploration + self.runs_final
    }

    pub fn contains(&self, q: f64) -> bool {
        (q - self.quantile).abs() <= self.half_width
    }

    /// The quantile as a threshold on the oriented response.
    pub fn oriented_quantile(&self) -> f64 {
        match self.tail {
            Tail::Right => self.quantile,
            Tail::Left => -self.quantile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRun {
    pub report: QuantileReport,
    pub trace: LadderTrace,
}

/// Weighted sample `(y_j, e_j)` of `n` runs, sorted by decreasing `y`, for
/// evaluating `S(g) = (1/n) sum_{y_j >= g} e_j`.
#[derive(Debug, Clone, Default)]
pub struct WeightedSurvival {
    y: Vec<f64>,
    cum: Vec<f64>,
    cum2: Vec<f64>,
    n: usize,
}

impl WeightedSurvival {
    /// `n` counts every run, including those given zero weight.
    pub fn new(responses: &[f64], weights: &[f64], n: usize) -> Self {
        let mut idx: Vec<usize> = (0..responses.len()).collect();
        idx.sort_by(|&a, &b| responses[b].total_cmp(&responses[a]).then(a.cmp(&b)));
        let mut y = Vec::with_capacity(idx.len());
        let mut cum = Vec::with_capacity(idx.len());
        let mut cum2 = Vec::with_capacity(idx.len());
        let (mut s, mut s2) = (0.0, 0.0);
        for i in idx {
            s += weights[i];
            s2 += weights[i] * weights[i];
            y.push(responses[i]);
            cum.push(s);
            cum2.push(s2);
        }
        WeightedSurvival { y, cum, cum2, n }
    }

    /// Number of sample points with `y >= g`.
    fn count_at(&self, g: f64) -> usize {
        self.y.partition_point(|&v| v >= g)
    }

    pub fn survival(&self, g: f64) -> f64 {
        match self.count_at(g) {
            0 => 0.0,
            k => self.cum[k - 1] / self.n as f64,
        }
    }

    /// Standard error of `survival(g)`.
    pub fn std_error(&self, g: f64) -> f64 {
        let k = self.count_at(g);
        if k == 0 || self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let m = self.cum[k - 1] / n;
        let var = ((self.cum2[k - 1] / n - m * m) * n / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    /// Level `g` with `S(g) = p`, interpolating linearly between order statistics.
    pub fn inverse(&self, p: f64) -> Result<f64> {
        if self.y.is_empty() {
            return Err(Error::ZeroHits { runs: self.n });
        }
        let target = p * self.n as f64;
        let k = self.cum.partition_point(|&c| c < target);
        if k == 0 {
            return Ok(self.y[0]);
        }
        if k >= self.y.len() {
            return Ok(self.y[self.y.len() - 1]);
        }
        let (c0, c1) = (self.cum[k - 1], self.cum[k]);
        let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 1.0 };
        Ok(self.y[k - 1] + frac * (self.y[k] - self.y[k - 1]))
    }

    /// Weighted standard deviation of the responses at or above `g`.
    pub fn tail_spread(&self, g: f64) -> f64 {
        let k = self.count_at(g);
        if k < 2 {
            return 0.0;
        }
        let tot = self.cum[k - 1];
        let w = |j: usize| if j == 0 { self.cum[0] } else { self.cum[j] - self.cum[j - 1] };
        let mean: f64 = (0..k).map(|j| w(j) * self.y[j]).sum::<f64>() / tot;
        let var: f64 = (0..k).map(|j| w(j) * (self.y[j] - mean).powi(2)).sum::<f64>() / tot;
        var.sqrt()
    }

    /// Minus the slope of `S` at `g` by a centered difference of `log S`
    /// over one tail spread, one-sided when `S(g + delta)` is empty.
    pub fn density(&self, g: f64) -> f64 {
        let s = self.survival(g);
        let delta = self.tail_spread(g);
        if s <= 0.0 || delta <= 0.0 {
            return 0.0;
        }
        let lo = self.survival(g - delta);
        let hi = self.survival(g + delta);
        let dlog = if hi > 0.0 {
            (lo.ln() - hi.ln()) / (2.0 * delta)
        } else {
            (lo.ln() - s.ln()) / delta
        };
        s * dlog
    }
}

struct Ladder {
    theta: ShiftVector,
    trace: LadderTrace,
}

fn quantile_ladder(model: &Model, p: f64, config: &LadderConfig, rng: &RngStream) -> Result<Ladder> {
    let mut cfg = config.clone();
    cfg.gamma = f64::INFINITY;
    cfg.validate()?;
    let d = model.dim();
    let n = cfg.n_per_level;
    let stream = rng.substream(tags::QUANTILE);
    let z = z_value(0.95)?;
    let use_dimred = cfg.dimred.active_for(d);

    let mut theta = ShiftVector::zeros(d);
    let mut trace = LadderTrace::default();
    let mut selection: Option<SubspaceSelection> = None;
    let mut current = f64::NEG_INFINITY;
    let mut stalls = 0;

    for batch_no in 0..cfg.max_levels {
        let xbar = stream.std_normal_batch((batch_no * n) as u64, n, d);
        let pts: Vec<Point> = xbar
            .iter()
            .map(|x| Point(x.0.iter().zip(&theta.0).map(|(a, t)| a + t).collect()))
            .collect();
        let resp = model.evaluate_oriented(&pts)?;
        trace.exploration_runs += n;
        let half_sq = 0.5 * theta.norm_sq();
        let weights: Vec<f64> = xbar.iter().map(|x| shift_weight(&theta, half_sq, &x.0)).collect();
        let surv = WeightedSurvival::new(&resp, &weights, n);

        let rho_level = next_level(&resp, cfg.rho, f64::INFINITY)?;
        let last = surv.survival(rho_level) <= p;
        let level = if last { surv.inverse(p)? } else { rho_level };
        if !last && level - current < 1e-9 * level.abs().max(1.0) {
            stalls += 1;
            if stalls >= 3 {
                return Err(Error::MaxLevelsExceeded { trace: Box::new(trace) });
            }
            continue;
        }
        stalls = 0;
        current = level;

        let batch = WeightedBatch::new(pts, resp, theta.clone(), level)?;
        if use_dimred && selection.is_none() {
            let sel = select_from_batch(&batch, &cfg.dimred)?;
            trace.selection = Some(sel.indices.clone());
            selection = Some(sel);
        }
        let coords = selection.as_ref().map(|s| s.indices.as_slice());
        let sol = solve_on(&batch, coords, &theta, &cfg.newton)?;
        let est = surv.survival(level);
        trace.levels.push(LevelRecord {
            iteration: trace.levels.len() + 1,
            runs: trace.exploration_runs,
            gamma: level,
            theta: sol.theta_star.clone(),
            survivors: batch.survivor_count(),
            estimate: est,
            ci: if est > 0.0 { z * surv.std_error(level) / est } else { f64::INFINITY },
            newton_iterations: sol.newton_iterations,
            converged: sol.converged,
            grad_norm: sol.grad_norm,
        });
        theta = sol.theta_star;
        if last {
            return Ok(Ladder { theta, trace });
        }
    }
    Err(Error::MaxLevelsExceeded { trace: Box::new(trace) })
}

/// Estimates the `p`-quantile of the model response in its tail, with a
/// confidence interval, until the relative half-width meets `config.precision`.
/// A run that spends its budget first is returned with `converged = false`.
pub fn estimate_quantile(model: &Model, p: f64, config: &QuantileConfig, rng: &RngStream) -> Result<QuantileRun> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("quantile needs p in (0,1), got {p}")));
    }
    if !(config.precision > 0.0 && config.precision < 1.0) {
        return Err(Error::config("precision", format!("must lie in (0,1), got {}", config.precision)));
    }
    if config.batch == 0 {
        return Err(Error::config("batch", "must be >= 1"));
    }
    let z = z_value(config.confidence)?;
    let Ladder { theta, trace } = quantile_ladder(model, p, &config.ladder, rng)?;
    let explore = trace.exploration_runs;
    let stream = rng.substream(tags::FINAL);
    let d = model.dim();
    let half_sq = 0.5 * theta.norm_sq();

    let mut ys = Vec::new();
    let mut ws = Vec::new();
    let mut batch_no = 0u64;
    let mut state = None;
    let mut converged = false;
    while explore + ys.len() + config.batch <= config.max_runs {
        let start = batch_no * config.batch as u64;
        let xbar = stream.std_normal_batch(start, config.batch, d);
        let pts: Vec<Point> = xbar
            .iter()
            .map(|x| Point(x.0.iter().zip(&theta.0).map(|(a, t)| a + t).collect()))
            .collect();
        ys.extend(model.evaluate_oriented(&pts)?);
        ws.extend(xbar.iter().map(|x| shift_weight(&theta, half_sq, &x.0)));
        batch_no += 1;

        let surv = WeightedSurvival::new(&ys, &ws, ys.len());
        let q = surv.inverse(p)?;
        let se = surv.std_error(q);
        let f = surv.density(q);
        let hw = if f > 0.0 { z * se / f } else { f64::INFINITY };
        let rel = if q != 0.0 { hw / q.abs() } else { f64::INFINITY };
        state = Some((q, hw, rel, se));
        if rel <= config.precision {
            converged = true;
            break;
        }
    }
    let Some((q, hw, rel, se)) = state else {
        return Err(Error::ZeroHits { runs: 0 });
    };
    let eps_p = z * se / p;
    let runs_final = ys.len();
    let quantile = match model.tail() {
        Tail::Right => q,
        Tail::Left => -q,
    };
    Ok(QuantileRun {
        report: QuantileReport {
            p,
            tail: model.tail(),
            quantile,
            half_width: hw,
            rel_half_width: rel,
            prob_rel_half_width: eps_p,
            confidence: config.confidence,
            runs_exploration: explore,
            runs_final,
            speedup: speedup(p, eps_p, z, explore + runs_final),
            theta_final: theta,
            converged,
        },
        trace,
    })
}
