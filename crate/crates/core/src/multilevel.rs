//! Multilevel importance sampling: an adaptive ladder of intermediate
//! thresholds, a shift re-solved at each level, and a final estimation phase on
//! fresh samples.

use serde::{Deserialize, Serialize};

use crate::dimred::{select_from_batch, DimRedConfig, SubspaceSelection};
use crate::error::{Error, Result};
use crate::gaussian_is::{solve_on, NewtonSettings, WeightedBatch};
use crate::model::Model;
use crate::normal::std_normal_quantile;
use crate::rng::{tags, RngStream};
use crate::vector::{check_dim, dot, Point, ShiftVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderConfig {
    /// Threshold on the oriented response.
    pub gamma: f64,
    pub n_per_level: usize,
    pub rho: f64,
    pub max_levels: usize,
    pub newton: NewtonSettings,
    pub dimred: DimRedConfig,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            gamma: 0.0,
            n_per_level: 1000,
            rho: 0.10,
            max_levels: 30,
            newton: NewtonSettings::default(),
            dimred: DimRedConfig::default(),
        }
    }
}

impl LadderConfig {
    pub fn new(gamma: f64) -> Self {
        LadderConfig {
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho", format!("must lie in (0,1), got {}", self.rho)));
        }
        if self.n_per_level < 100 {
            return Err(Error::config("batch", format!("level size must be >= 100, got {}", self.n_per_level)));
        }
        if self.gamma.is_nan() {
            return Err(Error::config("gamma", "threshold is NaN"));
        }
        if self.max_levels == 0 {
            return Err(Error::config("max_levels", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub iteration: usize,
    /// Cumulative exploration runs after this level.
    pub runs: usize,
    pub gamma: f64,
    pub theta: ShiftVector,
    pub survivors: usize,
    /// IS estimate of the probability of exceeding this level, from the level's batch.
    pub estimate: f64,
    /// Relative 95% half-width of `estimate`.
    pub ci: f64,
    pub newton_iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LadderTrace {
    pub levels: Vec<LevelRecord>,
    pub exploration_runs: usize,
    pub selection: Option<Vec<usize>>,
}

impl LadderTrace {
    pub fn final_theta(&self) -> Option<&ShiftVector> {
        self.levels.last().map(|l| &l.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub gamma: f64,
    pub estimate: f64,
    pub std_error: f64,
    /// Relative half-width of the confidence interval.
    pub rel_half_width: f64,
    pub confidence: f64,
    pub runs_exploration: usize,
    pub runs_final: usize,
    pub speedup: f64,
    pub theta_final: ShiftVector,
    pub converged: bool,
}

impl EstimateReport {
    pub fn total_runs(&self) -> usize {
        self.runs_exploration + self.runs_final
    }

    pub fn half_width(&self) -> f64 {
        self.rel_half_width * self.estimate
    }

    pub fn ci(&self) -> (f64, f64) {
        let h = self.half_width();
        (self.estimate - h, self.estimate + h)
    }

    pub fn contains(&self, p: f64) -> bool {
        let (lo, hi) = self.ci();
        lo <= p && p <= hi
    }
}

/// Two-sided normal critical value for `confidence`.
pub fn z_value(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config("confidence", format!("must lie in (0,1), got {confidence}")));
    }
    std_normal_quantile(1.0 - 0.5 * (1.0 - confidence))
}

/// Plain Monte Carlo runs needed for relative half-width `eps` on `p`, divided by `runs`.
pub fn speedup(p: f64, eps: f64, z: f64, runs: usize) -> f64 {
    if !(p > 0.0) || !(eps > 0.0) || runs == 0 {
        return 0.0;
    }
    let n_mc = z * z * (1.0 - p) / (p * eps * eps);
    n_mc / runs as f64
}

/// Next intermediate threshold: the smallest response among the top
/// `ceil(rho n)`, capped at `gamma`.
pub fn next_level(responses: &[f64], rho: f64, gamma: f64) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::domain("next_level on an empty batch"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::domain(format!("rho must lie in (0,1), got {rho}")));
    }
    let n = responses.len();
    let mut sorted = responses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    if lo == hi && hi < gamma {
        return Err(Error::DegenerateBatch { n, value: hi });
    }
    let keep = ((rho * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[n - keep].min(gamma))
}

/// Running sums over weighted final-phase samples. With `E` the likelihood
/// weight, `1` the survivor indicator and `Y` the oriented response, tracks
/// `B = 1 E` and `A = Y 1 E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TailMoments {
    pub n: usize,
    pub sum_b: f64,
    pub sum_b2: f64,
    pub sum_a: f64,
    pub sum_a2: f64,
    pub sum_ab: f64,
}

impl TailMoments {
    pub fn push(&mut self, survivor: bool, weight: f64, response: f64) {
        self.n += 1;
        if survivor {
            let a = response * weight;
            self.sum_b += weight;
            self.sum_b2 += weight * weight;
            self.sum_a += a;
            self.sum_a2 += a * a;
            self.sum_ab += a * weight;
        }
    }

    pub fn merge(&mut self, o: &TailMoments) {
        self.n += o.n;
        self.sum_b += o.sum_b;
        self.sum_b2 += o.sum_b2;
        self.sum_a += o.sum_a;
        self.sum_a2 += o.sum_a2;
        self.sum_ab += o.sum_ab;
    }

    pub fn probability(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.sum_b / self.n as f64
    }

    /// Standard error of [`Self::probability`] from the unbiased sample variance.
    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let p = self.sum_b / n;
        let var = ((self.sum_b2 / n - p * p) * n / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    pub fn survivor_weight_sum(&self) -> f64 {
        self.sum_b
    }
}

/// Weight `exp(-theta.x_bar - |theta|^2/2)` of a centered draw `x_bar`.
pub(crate) fn shift_weight(theta: &ShiftVector, half_sq: f64, xbar: &[f64]) -> f64 {
    (-dot(theta.as_slice(), xbar) - half_sq).exp()
}

/// Draws `start..start+m` of `stream`, shifts them by `theta`, evaluates and
/// accumulates. Also returns the oriented responses and survivor weights.
pub(crate) fn weighted_draws(
    model: &Model,
    gamma: f64,
    theta: &ShiftVector,
    stream: &RngStream,
    start: u64,
    m: usize,
) -> Result<(TailMoments, Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    let xbar = stream.std_normal_batch(start, m, d);
    let pts: Vec<Point> = xbar
        .iter()
        .map(|p| Point(p.0.iter().zip(&theta.0).map(|(x, t)| x + t).collect()))
        .collect();
    let resp = model.evaluate_oriented(&pts)?;
    let half_sq = 0.5 * theta.norm_sq();
    let mut mom = TailMoments::default();
    let mut weights = Vec::with_capacity(m);
    for (x, &y) in xbar.iter().zip(&resp) {
        let w = shift_weight(theta, half_sq, &x.0);
        mom.push(y >= gamma, w, y);
        weights.push(w);
    }
    Ok((mom, resp, weights))
}

fn report_from(
    mom: &TailMoments,
    gamma: f64,
    theta: &ShiftVector,
    confidence: f64,
    runs_exploration: usize,
    converged: bool,
) -> Result<EstimateReport> {
    let z = z_value(confidence)?;
    let est = mom.probability();
    let se = mom.std_error();
    let rel = if est > 0.0 { z * se / est } else { f64::INFINITY };
    Ok(EstimateReport {
        gamma,
        estimate: est,
        std_error: se,
        rel_half_width: rel,
        confidence,
        runs_exploration,
        runs_final: mom.n,
        speedup: speedup(est, rel, z, runs_exploration + mom.n),
        theta_final: theta.clone(),
        converged,
    })
}

/// Final-phase estimator on `m` fresh draws of `rng`, shifted by `theta`.
/// `gamma` is a threshold on the oriented response.
pub fn estimate_probability(
    model: &Model,
    gamma: f64,
    theta: &ShiftVector,
    m: usize,
    rng: &RngStream,
) -> Result<EstimateReport> {
    check_dim(model.dim(), theta.dim())?;
    if m == 0 {
        return Err(Error::config("batch", "need at least one final run"));
    }
    let (mom, _, _) = weighted_draws(model, gamma, theta, rng, 0, m)?;
    if mom.sum_b == 0.0 {
        return Err(Error::ZeroHits { runs: m });
    }
    report_from(&mom, gamma, theta, 0.95, 0, true)
}

/// Walks the ladder up to `config.gamma` on the `LADDER` substream of `rng`.
pub fn run_ladder(model: &Model, config: &LadderConfig, rng: &RngStream) -> Result<(ShiftVector, LadderTrace)> {
    config.validate()?;
    let d = model.dim();
    let n = config.n_per_level;
    let gamma = config.gamma;
    let stream = rng.substream(tags::LADDER);
    let floor = 1e-9 * gamma.abs().max(1.0);
    let z = z_value(0.95)?;
    let use_dimred = config.dimred.active_for(d);

    let mut theta = ShiftVector::zeros(d);
    let mut trace = LadderTrace::default();
    let mut selection: Option<SubspaceSelection> = None;
    let mut current = f64::NEG_INFINITY;
    let mut stalls = 0;

    for batch_no in 0..config.max_levels {
        let xbar = stream.std_normal_batch((batch_no * n) as u64, n, d);
        let pts: Vec<Point> = xbar
            .iter()
            .map(|p| Point(p.0.iter().zip(&theta.0).map(|(x, t)| x + t).collect()))
            .collect();
        let resp = model.evaluate_oriented(&pts)?;
        trace.exploration_runs += n;
        let level = next_level(&resp, config.rho, gamma)?;
        if level - current < floor {
            stalls += 1;
            if stalls >= 3 {
                return Err(Error::MaxLevelsExceeded { trace: Box::new(trace) });
            }
            continue;
        }
        stalls = 0;
        current = level;

        let half_sq = 0.5 * theta.norm_sq();
        let mut mom = TailMoments::default();
        for (x, &y) in xbar.iter().zip(&resp) {
            mom.push(y >= level, shift_weight(&theta, half_sq, &x.0), y);
        }
        let batch = WeightedBatch::new(pts, resp, theta.clone(), level)?;
        if use_dimred && selection.is_none() {
            let sel = select_from_batch(&batch, &config.dimred)?;
            trace.selection = Some(sel.indices.clone());
            selection = Some(sel);
        }
        let coords = selection.as_ref().map(|s| s.indices.as_slice());
        let sol = solve_on(&batch, coords, &theta, &config.newton)?;

        let est = mom.probability();
        trace.levels.push(LevelRecord {
            iteration: trace.levels.len() + 1,
            runs: trace.exploration_runs,
            gamma: level,
            theta: sol.theta_star.clone(),
            survivors: batch.survivor_count(),
            estimate: est,
            ci: if est > 0.0 { z * mom.std_error() / est } else { f64::INFINITY },
            newton_iterations: sol.newton_iterations,
            converged: sol.converged,
            grad_norm: sol.grad_norm,
        });
        theta = sol.theta_star;
        if level >= gamma {
            return Ok((theta, trace));
        }
    }
    Err(Error::MaxLevelsExceeded { trace: Box::new(trace) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrecisionConfig {
    /// Target relative half-width.
    pub target: f64,
    pub batch: usize,
    pub confidence: f64,
    /// Budget on exploration plus final runs.
    pub max_runs: usize,
}

impl Default for PrecisionConfig {
    fn default() -> Self {
        PrecisionConfig {
            target: 0.10,
            batch: 1000,
            confidence: 0.95,
            max_runs: 1_000_000,
        }
    }
}

impl PrecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(Error::config("precision", format!("must lie in (0,1), got {}", self.target)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be >= 1"));
        }
        z_value(self.confidence)?;
        Ok(())
    }
}

/// Everything produced by a ladder plus final-phase run. `report.converged`
/// is false when the budget ran out first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRun {
    pub report: EstimateReport,
    pub trace: LadderTrace,
    pub moments: TailMoments,
}

/// Ladder, then batches of `precision.batch` fresh runs until the relative
/// half-width reaches the target or the budget is spent.
pub fn run_to_precision(
    model: &Model,
    config: &LadderConfig,
    precision: &PrecisionConfig,
    rng: &RngStream,
) -> Result<ProbabilityRun> {
    precision.validate()?;
    let (theta, trace) = run_ladder(model, config, rng)?;
    let stream = rng.substream(tags::FINAL);
    let explore = trace.exploration_runs;
    let mut mom = TailMoments::default();
    let mut batch_no = 0u64;
    let mut converged = false;
    let z = z_value(precision.confidence)?;
    while explore + mom.n + precision.batch <= precision.max_runs {
        let (b, _, _) = weighted_draws(
            model,
            config.gamma,
            &theta,
            &stream,
            batch_no * precision.batch as u64,
            precision.batch,
        )?;
        mom.merge(&b);
        batch_no += 1;
        let est = mom.probability();
        if est > 0.0 && z * mom.std_error() / est <= precision.target {
            converged = true;
            break;
        }
    }
    if mom.n == 0 {
        // no final batch fits: fall back on the last ladder level
        let last = trace.levels.last();
        let estimate = last.map_or(0.0, |l| l.estimate);
        let rel = last.map_or(f64::INFINITY, |l| l.ci);
        let report = EstimateReport {
            gamma: config.gamma,
            estimate,
            std_error: rel * estimate / z,
            rel_half_width: rel,
            confidence: precision.confidence,
            runs_exploration: explore,
            runs_final: 0,
            speedup: 0.0,
            theta_final: theta,
            converged: false,
        };
        return Ok(ProbabilityRun {
            report,
            trace,
            moments: mom,
        });
    }
    if mom.sum_b == 0.0 {
        return Err(Error::ZeroHits { runs: mom.n });
    }
    let report = report_from(&mom, config.gamma, &theta, precision.confidence, explore, converged)?;
    Ok(ProbabilityRun {
        report,
        trace,
        moments: mom,
    })
}

/// As [`run_to_precision`], returning only the report and failing with
/// `BudgetExhausted` if the target was not met.
pub fn estimate_to_precision(
    model: &Model,
    config: &LadderConfig,
    precision: &PrecisionConfig,
    rng: &RngStream,
) -> Result<EstimateReport> {
    let run = run_to_precision(model, config, precision, rng)?;
    if !run.report.converged {
        return Err(Error::BudgetExhausted {
            partial: Box::new(run.report),
        });
    }
    Ok(run.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::normal::std_normal_sf;

    fn identity() -> Model {
        Model::builtin(ModelSpec::identity(1)).unwrap()
    }

    #[test]
    fn next_level_examples() {
        let r: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(next_level(&r, 0.1, 1e6).unwrap(), 91.0);
        assert_eq!(next_level(&r, 0.1, 50.0).unwrap(), 50.0);
        let med = next_level(&r, 0.5, 1e6).unwrap();
        assert_eq!(med, 51.0);
        assert!(matches!(next_level(&[2.0; 10], 0.1, 5.0), Err(Error::DegenerateBatch { n: 10, .. })));
        assert_eq!(next_level(&[2.0; 10], 0.1, 1.0).unwrap(), 1.0);
        assert!(next_level(&[], 0.1, 1.0).is_err());
    }

    #[test]
    fn speedup_examples() {
        let z = z_value(0.95).unwrap();
        let s = speedup(9.1893e-6, 0.0999, z, 8000);
        assert!((s / 5.2e3 - 1.0).abs() < 0.02, "{s}");
        let n_mc = z * z * 0.5 / (0.5 * 0.01);
        assert!((n_mc - 384.146).abs() < 0.01);
        assert!(speedup(0.5, 0.1, z, 1000) < 1.0);
    }

    #[test]
    fn zero_shift_far_below_threshold_is_exact() {
        let r = estimate_probability(&identity(), -1e6, &ShiftVector(vec![0.0]), 500, &RngStream::new(1, 0)).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.std_error, 0.0);
    }

    #[test]
    fn shifted_estimate_toy() {
        let m = 100_000;
        let r = estimate_probability(&identity(), 1.5, &ShiftVector(vec![1.78]), m, &RngStream::new(2, 0)).unwrap();
        let p = std_normal_sf(1.5);
        assert!((r.estimate - p).abs() < 3.0 * r.std_error, "{r:?}");
        let mc_var = p * (1.0 - p) / m as f64;
        assert!(mc_var / r.std_error.powi(2) > 5.0);
    }

    #[test]
    fn zero_hits_reported() {
        let r = estimate_probability(&identity(), 50.0, &ShiftVector(vec![0.0]), 100, &RngStream::new(3, 0));
        assert!(matches!(r, Err(Error::ZeroHits { runs: 100 })));
    }

    #[test]
    fn low_threshold_single_level() {
        let (theta, trace) = run_ladder(&identity(), &LadderConfig::new(-0.5), &RngStream::new(4, 0)).unwrap();
        assert_eq!(trace.levels.len(), 1);
        assert_eq!(trace.levels[0].gamma, -0.5);
        assert_eq!(trace.exploration_runs, 1000);
        assert_eq!(&theta, trace.final_theta().unwrap());
    }

    #[test]
    fn ladder_at_four() {
        for seed in 0..50 {
            let (theta, trace) = run_ladder(&identity(), &LadderConfig::new(4.0), &RngStream::new(seed, 0)).unwrap();
            let k = trace.levels.len();
            assert!((2..=5).contains(&k), "seed {seed}: {k} levels");
            assert!((3.5..=4.6).contains(&theta.0[0]), "seed {seed}: {theta:?}");
            for w in trace.levels.windows(2) {
                assert!(w[0].gamma < w[1].gamma);
            }
            assert_eq!(trace.levels[k - 1].gamma, 4.0);
            for l in &trace.levels {
                assert!(l.survivors >= 99);
                assert!(l.converged);
            }
        }
    }

    #[test]
    fn intermediate_estimates_fall_by_about_rho() {
        let m = Model::builtin(ModelSpec::linear_family(10, 1.0, 100, 0.01)).unwrap();
        let spec = m.spec().clone();
        let gamma = spec.analytic_quantile(1e-6).unwrap();
        let (_, trace) = run_ladder(&m, &LadderConfig::new(gamma), &RngStream::new(5, 0)).unwrap();
        for l in &trace.levels[..trace.levels.len() - 1] {
            // each non-final level is the batch's top 10%, with S close to its true probability
            let truth = spec.analytic_tail_prob(l.gamma).unwrap();
            assert!((l.estimate / truth - 1.0).abs() < 0.5, "{} vs {truth}", l.estimate);
        }
        let first = trace.levels[0].estimate;
        assert!((first - 0.1).abs() < 1e-12);
    }

    #[test]
    fn linear_probability_from_ladder() {
        let m = Model::builtin(ModelSpec::linear(vec![0.6, 0.8], vec![])).unwrap();
        let rng = RngStream::new(6, 0);
        let (theta, _) = run_ladder(&m, &LadderConfig::new(4.0), &rng).unwrap();
        let r = estimate_probability(&m, 4.0, &theta, 10_000, &rng.substream(tags::FINAL)).unwrap();
        assert!((r.estimate - 3.167_124_183_311_992e-5).abs() < 3.0 * r.std_error, "{r:?}");
    }

    #[test]
    fn precision_met_in_first_batch() {
        let pc = PrecisionConfig::default();
        let r = estimate_to_precision(&identity(), &LadderConfig::new(0.0), &pc, &RngStream::new(7, 0)).unwrap();
        assert_eq!(r.runs_final, 1000);
        assert!(r.converged);
        assert!(r.rel_half_width <= 0.1);
    }

    #[test]
    fn precision_loop_runs_whole_batches() {
        let pc = PrecisionConfig::default();
        let r = estimate_to_precision(&identity(), &LadderConfig::new(3.0), &pc, &RngStream::new(8, 0)).unwrap();
        assert_eq!(r.runs_final % 1000, 0);
        assert_eq!(r.runs_exploration % 1000, 0);
        assert!(r.rel_half_width <= 0.1);
        assert!(r.speedup > 1.0);
    }

    #[test]
    fn budget_exhausted_carries_partial() {
        let pc = PrecisionConfig {
            target: 0.001,
            max_runs: 5000,
            ..Default::default()
        };
        match estimate_to_precision(&identity(), &LadderConfig::new(3.0), &pc, &RngStream::new(9, 0)) {
            Err(Error::BudgetExhausted { partial }) => {
                assert!(!partial.converged);
                assert!(partial.total_runs() <= 5000);
                assert!(partial.estimate > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn budget_spent_on_ladder_reports_last_level() {
        let pc = PrecisionConfig {
            max_runs: 3000,
            ..Default::default()
        };
        let run = run_to_precision(&identity(), &LadderConfig::new(8.0), &pc, &RngStream::new(9, 0)).unwrap();
        assert!(!run.report.converged);
        assert_eq!(run.report.runs_final, 0);
        assert_eq!(run.report.estimate, run.trace.levels.last().unwrap().estimate);
    }

    #[test]
    fn ladder_is_reproducible_and_thread_invariant() {
        let m = Model::builtin(ModelSpec::linear_family(3, 1.0, 20, 0.1)).unwrap();
        let cfg = LadderConfig::new(3.5);
        let rng = RngStream::new(10, 0);
        let p1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let p4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = p1.install(|| run_ladder(&m, &cfg, &rng)).unwrap();
        let b = p4.install(|| run_ladder(&m, &cfg, &rng)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut c = LadderConfig::new(1.0);
        c.rho = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        c.rho = 0.1;
        c.n_per_level = 50;
        assert!(c.validate().is_err());
        assert!(PrecisionConfig { target: 0.0, ..Default::default() }.validate().is_err());
    }
}
