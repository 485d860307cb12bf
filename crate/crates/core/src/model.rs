//! Black-box scalar responses `h: R^d -> R`.
//!
//! Builtin analytic families are evaluated in-process. An external simulator is
//! driven over a line protocol on its standard input/output:
//!
//! ```text
//! -> EVAL <n> <d>
//! -> <x_1> ... <x_d>        (n lines, 17 significant digits)
//! <- <h>                    (n lines)
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::{std_normal_cdf, std_normal_sf};
use crate::vector::{dot, norm_sq, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    #[default]
    Right,
    Left,
}

impl std::str::FromStr for Tail {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "right" => Ok(Tail::Right),
            "left" => Ok(Tail::Left),
            other => Err(Error::config("tail", format!("expected right|left, got {other}"))),
        }
    }
}

impl std::fmt::Display for Tail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tail::Right => "Right",
            Tail::Left => "Left",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    /// `h(x) = a . x_A + b . x_B` with `A` the leading `a.len()` coordinates.
    BuiltinLinear { a: Vec<f64>, b: Vec<f64> },
    /// `h(x) = x_1`.
    BuiltinIdentity,
    /// `h(x) = exp(x_1 / 2) + 0.05 sum_{i>1} (x_i^2 - 1)`.
    BuiltinSkewed,
    ExternalProcess { program: PathBuf, args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dim: usize,
    pub tail: Tail,
}

impl ModelSpec {
    pub fn identity(dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::BuiltinIdentity,
            dim,
            tail: Tail::Right,
        }
    }

    pub fn linear(a: Vec<f64>, b: Vec<f64>) -> Self {
        let dim = a.len() + b.len();
        ModelSpec {
            kind: ModelKind::BuiltinLinear { a, b },
            dim,
            tail: Tail::Right,
        }
    }

    /// The large-scale test family: `n_a` dominant coefficients `coef_a` and
    /// `n_b` noise coefficients `coef_b`.
    pub fn linear_family(n_a: usize, coef_a: f64, n_b: usize, coef_b: f64) -> Self {
        Self::linear(vec![coef_a; n_a], vec![coef_b; n_b])
    }

    pub fn skewed(dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::BuiltinSkewed,
            dim,
            tail: Tail::Right,
        }
    }

    pub fn external(program: impl Into<PathBuf>, args: Vec<String>, dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::ExternalProcess {
                program: program.into(),
                args,
            },
            dim,
            tail: Tail::Right,
        }
    }

    pub fn with_tail(mut self, tail: Tail) -> Self {
        self.tail = tail;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "model dimension must be >= 1"));
        }
        if let ModelKind::BuiltinLinear { a, b } = &self.kind {
            if a.len() + b.len() != self.dim {
                return Err(Error::config(
                    "dim",
                    format!("|A| + |B| = {} but dim = {}", a.len() + b.len(), self.dim),
                ));
            }
            if a.iter().chain(b).any(|c| !c.is_finite()) {
                return Err(Error::config("coefficients", "non-finite coefficient"));
            }
        }
        Ok(())
    }

    /// Norm of the stacked coefficient vector for the Gaussian-linear families.
    fn linear_scale(&self) -> Option<f64> {
        match &self.kind {
            ModelKind::BuiltinLinear { a, b } => Some((norm_sq(a) + norm_sq(b)).sqrt()),
            ModelKind::BuiltinIdentity => Some(1.0),
            _ => None,
        }
    }

    /// Exact failure probability for threshold `gamma` in this model's tail,
    /// when a closed form exists.
    pub fn analytic_tail_prob(&self, gamma: f64) -> Option<f64> {
        let scale = self.linear_scale()?;
        if scale == 0.0 {
            return Some(match self.tail {
                Tail::Right => (gamma <= 0.0) as u8 as f64,
                Tail::Left => (gamma >= 0.0) as u8 as f64,
            });
        }
        Some(match self.tail {
            Tail::Right => std_normal_sf(gamma / scale),
            Tail::Left => std_normal_cdf(gamma / scale),
        })
    }

    /// Exact quantile for tail probability `p`, when a closed form exists.
    pub fn analytic_quantile(&self, p: f64) -> Option<f64> {
        let scale = self.linear_scale()?;
        let z = crate::normal::std_normal_isf(p).ok()?;
        Some(match self.tail {
            Tail::Right => z * scale,
            Tail::Left => -z * scale,
        })
    }
}

/// Maps a model value so that failure is always `oriented >= threshold`.
pub fn oriented_response(tail: Tail, value: f64) -> f64 {
    match tail {
        Tail::Right => value,
        Tail::Left => -value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub point: Point,
    pub value: f64,
    pub index: usize,
}

struct ExternalWorker {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ExternalWorker {
    fn spawn(program: &PathBuf, args: &[String]) -> std::io::Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ExternalWorker {
            child,
            stdin,
            stdout,
        })
    }

    /// Evaluates `points`; on failure returns the offsets (within `points`)
    /// that did not receive a valid value.
    fn eval(&mut self, points: &[Point]) -> std::result::Result<Vec<f64>, (usize, String)> {
        let d = points.first().map_or(0, Point::dim);
        let mut req = format!("EVAL {} {}\n", points.len(), d);
        for p in points {
            let line: Vec<String> = p.0.iter().map(|x| format!("{x:.16e}")).collect();
            req.push_str(&line.join(" "));
            req.push('\n');
        }
        self.stdin
            .write_all(req.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| (0, format!("write to simulator failed: {e}")))?;
        let mut out = Vec::with_capacity(points.len());
        let mut line = String::new();
        for i in 0..points.len() {
            line.clear();
            match self.stdout.read_line(&mut line) {
                Ok(0) => return Err((i, "simulator closed its output".into())),
                Ok(_) => {}
                Err(e) => return Err((i, format!("read from simulator failed: {e}"))),
            }
            match line.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(v),
                Ok(v) => return Err((i, format!("non-finite reply {v}"))),
                Err(_) => return Err((i, format!("malformed reply {:?}", line.trim()))),
            }
        }
        Ok(out)
    }
}

impl Drop for ExternalWorker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A pool of simulator processes, each owned by at most one batch chunk at a time.
struct ExternalPool {
    program: PathBuf,
    args: Vec<String>,
    workers: Vec<Mutex<Option<ExternalWorker>>>,
}

impl ExternalPool {
    fn new(program: PathBuf, args: Vec<String>, size: usize) -> Self {
        ExternalPool {
            program,
            args,
            workers: (0..size.max(1)).map(|_| Mutex::new(None)).collect(),
        }
    }

    fn evaluate(&self, points: &[Point]) -> Result<Vec<f64>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let chunk = points.len().div_ceil(self.workers.len());
        let results: Vec<Result<Vec<f64>>> = points
            .par_chunks(chunk)
            .enumerate()
            .map(|(w, pts)| {
                let base = w * chunk;
                let mut slot = self.workers[w].lock().unwrap_or_else(|e| e.into_inner());
                if slot.is_none() {
                    let worker = ExternalWorker::spawn(&self.program, &self.args).map_err(|e| {
                        Error::Simulator {
                            indices: (base..base + pts.len()).collect(),
                            message: format!("cannot start {}: {e}", self.program.display()),
                        }
                    })?;
                    *slot = Some(worker);
                }
                let worker = slot.as_mut().expect("worker spawned above");
                match worker.eval(pts) {
                    Ok(v) => Ok(v),
                    Err((offset, message)) => {
                        // the process state is unknown after a failure; restart it next time
                        *slot = None;
                        Err(Error::Simulator {
                            indices: (base + offset..base + pts.len()).collect(),
                            message,
                        })
                    }
                }
            })
            .collect();
        let mut out = Vec::with_capacity(points.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// A model ready for evaluation.
pub struct Model {
    spec: ModelSpec,
    external: Option<ExternalPool>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("spec", &self.spec).finish()
    }
}

impl Model {
    /// `workers` is the number of simulator processes for external models.
    pub fn new(spec: ModelSpec, workers: usize) -> Result<Self> {
        spec.validate()?;
        let external = match &spec.kind {
            ModelKind::ExternalProcess { program, args } => {
                Some(ExternalPool::new(program.clone(), args.clone(), workers))
            }
            _ => None,
        };
        Ok(Model { spec, external })
    }

    pub fn builtin(spec: ModelSpec) -> Result<Self> {
        Self::new(spec, 1)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn tail(&self) -> Tail {
        self.spec.tail
    }

    fn eval_builtin(&self, x: &[f64]) -> f64 {
        match &self.spec.kind {
            ModelKind::BuiltinLinear { a, b } => {
                let (xa, xb) = x.split_at(a.len());
                dot(a, xa) + dot(b, xb)
            }
            ModelKind::BuiltinIdentity => x[0],
            ModelKind::BuiltinSkewed => {
                let rest: f64 = x[1..].iter().map(|v| v * v - 1.0).sum();
                (0.5 * x[0]).exp() + 0.05 * rest
            }
            ModelKind::ExternalProcess { .. } => unreachable!("external models use the pool"),
        }
    }

    /// Raw model values, in input order.
    pub fn evaluate_values(&self, points: &[Point]) -> Result<Vec<f64>> {
        for p in points {
            if p.dim() != self.spec.dim {
                return Err(Error::Dimension {
                    expected: self.spec.dim,
                    got: p.dim(),
                });
            }
        }
        match &self.external {
            Some(pool) => pool.evaluate(points),
            None => Ok(points.par_iter().map(|p| self.eval_builtin(&p.0)).collect()),
        }
    }

    /// Values mapped so that failure reads `oriented >= threshold`.
    pub fn evaluate_oriented(&self, points: &[Point]) -> Result<Vec<f64>> {
        let tail = self.spec.tail;
        let mut v = self.evaluate_values(points)?;
        v.iter_mut().for_each(|x| *x = oriented_response(tail, *x));
        Ok(v)
    }

    pub fn evaluate_batch(&self, points: &[Point]) -> Result<Vec<EvalRecord>> {
        let values = self.evaluate_values(points)?;
        Ok(points
            .iter()
            .zip(values)
            .enumerate()
            .map(|(index, (p, value))| EvalRecord {
                point: p.clone(),
                value,
                index,
            })
            .collect())
    }

    pub fn analytic_tail_prob(&self, gamma: f64) -> Option<f64> {
        self.spec.analytic_tail_prob(gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identity_and_linear_values() {
        let m = Model::builtin(ModelSpec::identity(1)).unwrap();
        let r = m.evaluate_batch(&[Point(vec![1.7])]).unwrap();
        assert_eq!(r[0].value, 1.7);
        assert_eq!(r[0].index, 0);

        let m = Model::builtin(ModelSpec::linear(vec![2.0; 10], vec![])).unwrap();
        assert_eq!(m.evaluate_values(&[Point(vec![1.0; 10])]).unwrap(), vec![20.0]);
    }

    #[test]
    fn linear_mean_is_centered() {
        let spec = ModelSpec::linear_family(10, 1.0, 50, 0.01);
        let m = Model::builtin(spec).unwrap();
        let n = 10_000;
        let pts = RngStream::new(2, 0).std_normal_batch(0, n, 60);
        let v = m.evaluate_values(&pts).unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let c = (10.0f64 + 50.0 * 1e-4).sqrt();
        assert!(mean.abs() < 4.0 * c / (n as f64).sqrt());
    }

    #[test]
    fn orientation() {
        assert_eq!(oriented_response(Tail::Right, 3.2), 3.2);
        assert_eq!(oriented_response(Tail::Left, 3.2), -3.2);
        // left tail, threshold -5: value -6 fails, value -4 does not
        let g = oriented_response(Tail::Left, -5.0);
        assert!(oriented_response(Tail::Left, -6.0) >= g);
        assert!(oriented_response(Tail::Left, -4.0) < g);
    }

    #[test]
    fn oracle_probabilities() {
        let id = ModelSpec::identity(1);
        assert!((id.analytic_tail_prob(1.5).unwrap() - 0.066_807_201_268_858_07).abs() < 1e-15);
        let lin = ModelSpec::linear(vec![0.6, 0.8], vec![]);
        assert!((lin.analytic_tail_prob(4.0).unwrap() - 3.167_124_183_311_992e-5).abs() < 1e-17);
        assert_eq!(id.analytic_tail_prob(f64::NEG_INFINITY), Some(1.0));
        assert_eq!(lin.analytic_tail_prob(f64::NEG_INFINITY), Some(1.0));
        assert_eq!(ModelSpec::skewed(3).analytic_tail_prob(1.0), None);
        let left = ModelSpec::identity(1).with_tail(Tail::Left);
        assert!((left.analytic_tail_prob(-1.5).unwrap() - 0.066_807_201_268_858_07).abs() < 1e-15);
        let q = ModelSpec::linear(vec![2.0], vec![]).analytic_quantile(1e-4).unwrap();
        assert!((q - 7.438_032_970_911_361).abs() < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let m = Model::builtin(ModelSpec::skewed(4)).unwrap();
        let pts = RngStream::new(1, 1).std_normal_batch(0, 64, 4);
        let v = m.evaluate_values(&pts).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let mut w = m.evaluate_values(&rev).unwrap();
        w.reverse();
        assert_eq!(v, w);
    }

    #[test]
    fn skewed_output_is_skewed() {
        let m = Model::builtin(ModelSpec::skewed(5)).unwrap();
        let n = 50_000;
        let v = m.evaluate_values(&RngStream::new(4, 0).std_normal_batch(0, n, 5)).unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
        let skew = m3 / m2.powf(1.5);
        assert!(skew > 0.5, "skewness {skew}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = Model::builtin(ModelSpec::identity(2)).unwrap();
        assert!(matches!(
            m.evaluate_values(&[Point(vec![1.0])]),
            Err(Error::Dimension { expected: 2, got: 1 })
        ));
        let bad = ModelSpec {
            kind: ModelKind::BuiltinLinear {
                a: vec![1.0],
                b: vec![],
            },
            dim: 3,
            tail: Tail::Right,
        };
        assert!(Model::builtin(bad).is_err());
    }
}
