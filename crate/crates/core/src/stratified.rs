//! Stratification of the nominal Gaussian along a direction `u`:
//! `D_i = {x : a_{i-1} <= u.x < a_i}`, sampled exactly per stratum, with a
//! pilot pass to estimate per-stratum spreads and a Neyman allocation for the
//! remaining budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::multilevel::{speedup, z_value, EstimateReport};
use crate::normal::{std_normal_cdf, std_normal_isf, std_normal_quantile, std_normal_sf};
use crate::rng::{tags, RngStream};
use crate::vector::{dot, Point, ShiftVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataSpec {
    pub direction: Vec<f64>,
    /// `a_0 = -inf < a_1 < ... < a_I = +inf`.
    pub levels: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Standard normal mass of `[a, b)`, computed on the side that keeps precision.
pub fn interval_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

impl StrataSpec {
    /// `direction` is normalized; `levels` must be strictly increasing and span
    /// the real line.
    pub fn new(direction: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        let norm = dot(&direction, &direction).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::domain("stratification direction must be nonzero and finite"));
        }
        if levels.len() < 2 || levels[0] != f64::NEG_INFINITY || levels[levels.len() - 1] != f64::INFINITY {
            return Err(Error::domain("levels must start at -inf and end at +inf"));
        }
        let mut weights = Vec::with_capacity(levels.len() - 1);
        for w in levels.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::domain("levels must be strictly increasing"));
            }
            let p = interval_mass(w[0], w[1]);
            if !(p > 0.0) {
                return Err(Error::DegenerateStratum { lower: w[0], upper: w[1] });
            }
            weights.push(p);
        }
        Ok(StrataSpec {
            direction: direction.iter().map(|x| x / norm).collect(),
            levels,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.levels[i], self.levels[i + 1])
    }
}

/// `I` equiprobable strata along `theta / |theta|`.
pub fn strata_from_shift(theta: &ShiftVector, strata: usize) -> Result<StrataSpec> {
    if theta.is_zero() {
        return Err(Error::domain("cannot stratify along a zero shift"));
    }
    if strata < 2 {
        return Err(Error::domain(format!("need at least 2 strata, got {strata}")));
    }
    let mut levels = vec![f64::NEG_INFINITY];
    for i in 1..strata {
        levels.push(std_normal_quantile(i as f64 / strata as f64)?);
    }
    levels.push(f64::INFINITY);
    StrataSpec::new(theta.0.clone(), levels)
}

/// Draw `index` of `rng` from `N(0, I)` conditioned on `a <= u.x <= b`, as
/// `u Z + Y - u (u.Y)` with `Z` a truncated normal by inversion.
pub fn conditional_gaussian_sample(u: &[f64], a: f64, b: f64, rng: &RngStream, index: u64) -> Result<Point> {
    if !(a < b) {
        return Err(Error::domain(format!("empty stratum [{a}, {b}]")));
    }
    let mass = interval_mass(a, b);
    if !(mass > 0.0) {
        return Err(Error::DegenerateStratum { lower: a, upper: b });
    }
    let (unif, y) = rng.uniform_and_normal(index, u.len());
    let tiny = f64::MIN_POSITIVE;
    let z = if a >= 0.0 {
        let t = (std_normal_sf(a) - unif * mass).clamp(tiny, 1.0 - f64::EPSILON);
        std_normal_isf(t)?
    } else {
        let t = (std_normal_cdf(a) + unif * mass).clamp(tiny, 1.0 - f64::EPSILON);
        std_normal_quantile(t)?
    }
    .clamp(a, b);
    let uy = dot(u, &y);
    Ok(Point(u.iter().zip(&y).map(|(ui, yi)| ui * z + yi - ui * uy).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub counts: Vec<usize>,
    pub spreads: Vec<f64>,
}

/// Largest-remainder rounding of `N q_i` with `q_i` proportional to `p_i v_i`,
/// giving every stratum at least one sample. With all `p_i v_i = 0` the split
/// is proportional to `p`.
pub fn optimal_allocation(p: &[f64], v: &[f64], n: usize) -> Result<AllocationPlan> {
    let k = p.len();
    if k == 0 || v.len() != k {
        return Err(Error::domain("allocation needs matching, nonempty p and v"));
    }
    if p.iter().any(|&x| !(x > 0.0 && x <= 1.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::domain("stratum probabilities must be positive and sum to 1"));
    }
    if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::domain("stratum spreads must be finite and nonnegative"));
    }
    if n < k {
        return Err(Error::domain(format!("budget {n} is below the number of strata {k}")));
    }
    let mut score: Vec<f64> = p.iter().zip(v).map(|(a, b)| a * b).collect();
    if score.iter().all(|&s| s == 0.0) {
        score = p.to_vec();
    }
    let mut fixed = vec![false; k];
    let ideal = loop {
        let free = fixed.iter().filter(|f| !**f).count();
        let rem = (n - (k - free)) as f64;
        let tot: f64 = (0..k).filter(|&i| !fixed[i]).map(|i| score[i]).sum();
        let ideal: Vec<f64> = (0..k)
            .map(|i| if fixed[i] { 1.0 } else if tot > 0.0 { score[i] / tot * rem } else { rem / free as f64 })
            .collect();
        let mut changed = false;
        for i in 0..k {
            if !fixed[i] && ideal[i] < 1.0 {
                fixed[i] = true;
                changed = true;
            }
        }
        if !changed {
            break ideal;
        }
    };
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let short = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).filter(|&i| !fixed[i]).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(short) {
        counts[i] += 1;
    }
    Ok(AllocationPlan {
        counts,
        spreads: v.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub lower: f64,
    pub upper: f64,
    pub p: f64,
    pub runs: usize,
    pub pilot_runs: usize,
    /// Sample standard deviation of the failure indicator in the stratum.
    pub v_hat: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedRun {
    pub report: EstimateReport,
    pub strata: Vec<StratumSummary>,
    /// `(sum p_i v_i)^2` and `sum p_i v_i^2` on the pilot spreads.
    pub optimal_var_pilot: f64,
    pub proportional_var_pilot: f64,
}

#[derive(Default, Clone)]
struct Acc {
    n: usize,
    hits: usize,
}

impl Acc {
    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.hits as f64 / self.n as f64
        }
    }

    fn sd(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (m * (1.0 - m) * self.n as f64 / (self.n as f64 - 1.0)).max(0.0).sqrt()
    }
}

fn run_strata(
    model: &Model,
    gamma: f64,
    strata: &StrataSpec,
    counts: &[usize],
    starts: &[usize],
    root: &RngStream,
    acc: &mut [Acc],
) -> Result<()> {
    let mut pts = Vec::with_capacity(counts.iter().sum());
    let mut owner = Vec::with_capacity(pts.capacity());
    for (i, (&c, &s)) in counts.iter().zip(starts).enumerate() {
        let (a, b) = strata.bounds(i);
        let stream = root.substream(i as u64);
        for j in 0..c {
            pts.push(conditional_gaussian_sample(&strata.direction, a, b, &stream, (s + j) as u64)?);
            owner.push(i);
        }
    }
    let resp = model.evaluate_oriented(&pts)?;
    for (&i, &y) in owner.iter().zip(&resp) {
        acc[i].n += 1;
        acc[i].hits += (y >= gamma) as usize;
    }
    Ok(())
}

/// Two-pass stratified estimate of `P(oriented >= gamma)` with `n` runs, a
/// fraction `pilot` of them split proportionally to the stratum weights.
pub fn stratified_estimate(
    model: &Model,
    gamma: f64,
    strata: &StrataSpec,
    pilot: f64,
    n: usize,
    rng: &RngStream,
) -> Result<StratifiedRun> {
    let k = strata.len();
    if strata.direction.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: strata.direction.len(),
        });
    }
    if n < 2 * k {
        return Err(Error::config("runs", format!("need at least {} runs for {k} strata, got {n}", 2 * k)));
    }
    if !(pilot > 0.0 && pilot < 1.0) {
        return Err(Error::config("pilot", format!("must lie in (0,1), got {pilot}")));
    }
    let root = rng.substream(tags::STRATA);
    let n_pilot = ((pilot * n as f64).ceil() as usize).clamp(k, n - k);
    let pilot_plan = optimal_allocation(&strata.weights, &vec![1.0; k], n_pilot)?;
    let mut acc = vec![Acc::default(); k];
    run_strata(model, gamma, strata, &pilot_plan.counts, &vec![0; k], &root, &mut acc)?;

    let v_pilot: Vec<f64> = acc.iter().map(Acc::sd).collect();
    let opt: f64 = strata.weights.iter().zip(&v_pilot).map(|(p, v)| p * v).sum::<f64>().powi(2);
    let prop: f64 = strata.weights.iter().zip(&v_pilot).map(|(p, v)| p * v * v).sum();
    debug_assert!(opt <= prop * (1.0 + 1e-12) + 1e-300);

    let plan = optimal_allocation(&strata.weights, &v_pilot, n - n_pilot)?;
    run_strata(model, gamma, strata, &plan.counts, &pilot_plan.counts, &root, &mut acc)?;

    let estimate: f64 = strata.weights.iter().zip(&acc).map(|(p, a)| p * a.mean()).sum();
    let var: f64 = strata
        .weights
        .iter()
        .zip(&acc)
        .map(|(p, a)| p * p * a.sd().powi(2) / a.n as f64)
        .sum();
    let z = z_value(0.95)?;
    let se = var.sqrt();
    let rel = if estimate > 0.0 { z * se / estimate } else { f64::INFINITY };
    let summaries = (0..k)
        .map(|i| StratumSummary {
            lower: strata.levels[i],
            upper: strata.levels[i + 1],
            p: strata.weights[i],
            runs: acc[i].n,
            pilot_runs: pilot_plan.counts[i],
            v_hat: acc[i].sd(),
            mean: acc[i].mean(),
        })
        .collect();
    Ok(StratifiedRun {
        report: EstimateReport {
            gamma,
            estimate,
            std_error: se,
            rel_half_width: rel,
            confidence: 0.95,
            runs_exploration: 0,
            runs_final: n,
            speedup: speedup(estimate, rel, z, n),
            theta_final: ShiftVector::zeros(model.dim()),
            converged: true,
        },
        strata: summaries,
        optimal_var_pilot: opt,
        proportional_var_pilot: prop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::normal::std_normal_pdf;

    #[test]
    fn allocation_examples() {
        assert_eq!(optimal_allocation(&[0.5, 0.5], &[1.0, 3.0], 100).unwrap().counts, vec![25, 75]);
        assert_eq!(optimal_allocation(&[0.9, 0.1], &[0.0, 5.0], 10).unwrap().counts, vec![1, 9]);
        let p = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(optimal_allocation(&p, &[2.0; 4], 100).unwrap().counts, vec![10, 20, 30, 40]);
        let c = optimal_allocation(&[0.3, 0.3, 0.4], &[1.0; 3], 10).unwrap().counts;
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert!(optimal_allocation(&[0.5, 0.6], &[1.0, 1.0], 10).is_err());
        assert!(optimal_allocation(&[0.5, 0.5], &[1.0, 1.0], 1).is_err());
    }

    #[test]
    fn strata_from_shift_examples() {
        let s = strata_from_shift(&ShiftVector(vec![3.0, 4.0]), 2).unwrap();
        assert_eq!(s.direction, vec![0.6, 0.8]);
        assert_eq!(s.levels, vec![f64::NEG_INFINITY, 0.0, f64::INFINITY]);
        assert_eq!(s.weights, vec![0.5, 0.5]);
        for k in [3, 10, 17] {
            let s = strata_from_shift(&ShiftVector(vec![1.0]), k).unwrap();
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(s.weights.iter().all(|w| (w - 1.0 / k as f64).abs() < 1e-12));
        }
        assert!(strata_from_shift(&ShiftVector(vec![0.0, 0.0]), 4).is_err());
    }

    #[test]
    fn sampler_stays_in_stratum() {
        let u = [0.6, 0.8];
        let rng = RngStream::new(1, 0);
        for (a, b) in [(1.0, 2.0), (-3.0, -2.5), (4.0, f64::INFINITY), (f64::NEG_INFINITY, -6.0)] {
            for i in 0..2000 {
                let x = conditional_gaussian_sample(&u, a, b, &rng, i).unwrap();
                let t = dot(&u, &x.0);
                assert!(t >= a - 1e-12 && t <= b + 1e-12, "{t} not in [{a},{b}]");
            }
        }
    }

    #[test]
    fn truncated_normal_mean() {
        let rng = RngStream::new(2, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|i| conditional_gaussian_sample(&[1.0], 1.0, 2.0, &rng, i).unwrap().0[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let want = (std_normal_pdf(1.0) - std_normal_pdf(2.0)) / (std_normal_cdf(2.0) - std_normal_cdf(1.0));
        assert!((want - 1.383_169_046_631_553).abs() < 1e-12);
        assert!((mean - want).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {want}");
    }

    #[test]
    fn whole_line_is_unconditional() {
        let rng = RngStream::new(3, 0);
        let n = 50_000;
        let xs: Vec<Point> = (0..n)
            .map(|i| conditional_gaussian_sample(&[0.0, 1.0], f64::NEG_INFINITY, f64::INFINITY, &rng, i).unwrap())
            .collect();
        for c in 0..2 {
            let m = xs.iter().map(|x| x.0[c]).sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x.0[c] - m).powi(2)).sum::<f64>() / n as f64;
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
            assert!((v - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn orthogonal_part_is_standard_normal() {
        // for u = e_1, the second coordinate must be independent N(0,1)
        let rng = RngStream::new(4, 0);
        let n = 50_000;
        let xs: Vec<Point> = (0..n)
            .map(|i| conditional_gaussian_sample(&[1.0, 0.0], 1.5, 3.0, &rng, i).unwrap())
            .collect();
        let m = xs.iter().map(|x| x.0[1]).sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| x.0[1].powi(2)).sum::<f64>() / n as f64;
        let c = xs.iter().map(|x| x.0[1] * x.0[0]).sum::<f64>() / n as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 0.03);
        assert!(c.abs() < 4.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn single_stratum_is_plain_mc() {
        let m = Model::builtin(ModelSpec::identity(1)).unwrap();
        let s = StrataSpec::new(vec![1.0], vec![f64::NEG_INFINITY, f64::INFINITY]).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        let run = stratified_estimate(&m, 1.5, &s, 0.2, 10_000, &RngStream::new(5, 0)).unwrap();
        let p = std_normal_sf(1.5);
        let mc_se = (p * (1.0 - p) / 10_000.0).sqrt();
        assert!((run.report.estimate - p).abs() < 3.0 * mc_se);
        assert!((run.report.std_error / mc_se - 1.0).abs() < 0.1);
    }

    #[test]
    fn decile_strata_beat_plain_mc() {
        let m = Model::builtin(ModelSpec::identity(1)).unwrap();
        let s = strata_from_shift(&ShiftVector(vec![1.0]), 10).unwrap();
        let run = stratified_estimate(&m, 1.5, &s, 0.2, 10_000, &RngStream::new(6, 0)).unwrap();
        let p = std_normal_sf(1.5);
        let mc_se = (p * (1.0 - p) / 10_000.0).sqrt();
        assert!((run.report.estimate - p).abs() < 3.0 * run.report.std_error.max(1e-6));
        assert!(run.report.std_error < mc_se);
        assert!(run.optimal_var_pilot <= run.proportional_var_pilot + 1e-15);
        assert_eq!(run.strata.iter().map(|s| s.runs).sum::<usize>(), 10_000);
    }

    #[test]
    fn degenerate_strata() {
        assert!(matches!(
            StrataSpec::new(vec![1.0], vec![f64::NEG_INFINITY, 40.0, 41.0, f64::INFINITY]),
            Err(Error::DegenerateStratum { .. })
        ));
        assert!(matches!(
            conditional_gaussian_sample(&[1.0], 40.0, 41.0, &RngStream::new(0, 0), 0),
            Err(Error::DegenerateStratum { .. })
        ));
    }
}
