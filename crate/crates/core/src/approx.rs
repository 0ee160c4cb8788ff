//! Least squares, linear value networks and fitted value iteration.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::container::{self, Kind};
use crate::error::{Error, Result};
use crate::mdp::{stage_cost, Benchmark, BoundaryRule};
use crate::rng;
use crate::solve::{argmin_ordered, expected_next, Policy, PolicyLayer};

/// Why LSQR stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `|r| <= tol |b|`.
    Residual,
    /// `|A^T r| <= tol |A| |r|`: a least-squares solution that does not
    /// interpolate.
    NormalEquations,
    IterationLimit,
}

#[derive(Clone, Debug, Serialize)]
pub struct LeastSquaresReport {
    pub iterations: usize,
    /// `|b - A x| / |b|`, recomputed from the returned solution.
    pub residual: f64,
    pub converged: bool,
    pub stop: StopReason,
    /// Running estimate of the relative residual after each iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LsqrOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl LsqrOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self { tol, max_iter }
    }

    /// `tol = 1e-6`, cap `50 * cols`.
    pub fn for_columns(cols: usize) -> Self {
        Self::new(1e-6, 50 * cols.max(1))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scale(v: &mut [f64], s: f64) {
    v.iter_mut().for_each(|x| *x *= s);
}

/// Matrix-free LSQR (Golub-Kahan bidiagonalisation) started from zero, so
/// underdetermined systems converge to the minimum-norm solution.
///
/// `apply(x, y)` must write `A x` into `y` (length `rhs.len()`), and
/// `apply_t(y, x)` must write `A^T y` into `x` (length `cols`).
pub fn lsqr_solve<F, G>(cols: usize, apply: F, apply_t: G, rhs: &[f64], opts: &LsqrOptions) -> Result<(Vec<f64>, LeastSquaresReport)>
where
    F: Fn(&[f64], &mut [f64]),
    G: Fn(&[f64], &mut [f64]),
{
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::Config(format!("lsqr tolerance must be positive, got {}", opts.tol)));
    }
    let rows = rhs.len();
    let mut x = vec![0.0; cols];
    let bnorm = norm(rhs);
    let finish = |x: Vec<f64>, iterations: usize, stop: StopReason, history: Vec<f64>| {
        let mut ax = vec![0.0; rows];
        apply(&x, &mut ax);
        let r = ax.iter().zip(rhs).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        let residual = if bnorm > 0.0 { r / bnorm } else { r };
        let converged = residual <= opts.tol;
        let stop = if stop == StopReason::Residual && !converged {
            StopReason::NormalEquations
        } else {
            stop
        };
        (
            x,
            LeastSquaresReport {
                iterations,
                residual,
                converged,
                stop,
                history,
            },
        )
    };
    if bnorm == 0.0 {
        return Ok(finish(x, 0, StopReason::Residual, Vec::new()));
    }

    let mut u = rhs.to_vec();
    scale(&mut u, 1.0 / bnorm);
    let mut beta;
    let mut v = vec![0.0; cols];
    apply_t(&u, &mut v);
    let mut alpha = norm(&v);
    if alpha == 0.0 {
        return Ok(finish(x, 0, StopReason::NormalEquations, Vec::new()));
    }
    scale(&mut v, 1.0 / alpha);
    let mut w = v.clone();
    let mut phibar = bnorm;
    let mut rhobar = alpha;
    let mut anorm_sq = alpha * alpha;
    let mut history = Vec::new();
    let mut tmp_u = vec![0.0; rows];
    let mut tmp_v = vec![0.0; cols];

    for it in 1..=opts.max_iter {
        apply(&v, &mut tmp_u);
        for (ui, ti) in u.iter_mut().zip(&tmp_u) {
            *ui = ti - alpha * *ui;
        }
        beta = norm(&u);
        if beta > 0.0 {
            scale(&mut u, 1.0 / beta);
        }
        anorm_sq += beta * beta;
        apply_t(&u, &mut tmp_v);
        for (vi, ti) in v.iter_mut().zip(&tmp_v) {
            *vi = ti - beta * *vi;
        }
        alpha = norm(&v);
        if alpha > 0.0 {
            scale(&mut v, 1.0 / alpha);
        }
        anorm_sq += alpha * alpha;

        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        let t1 = phi / rho;
        let t2 = -theta / rho;
        for ((xi, wi), vi) in x.iter_mut().zip(w.iter_mut()).zip(&v) {
            *xi += t1 * *wi;
            *wi = vi + t2 * *wi;
        }

        history.push(phibar / bnorm);
        let arnorm = phibar * alpha * c.abs();
        if phibar <= opts.tol * bnorm {
            return Ok(finish(x, it, StopReason::Residual, history));
        }
        if arnorm <= opts.tol * anorm_sq.sqrt() * phibar || alpha == 0.0 {
            return Ok(finish(x, it, StopReason::NormalEquations, history));
        }
    }
    Ok(finish(x, opts.max_iter, StopReason::IterationLimit, history))
}

/// Row-major `n x dim` matrix of feature vectors, one row per state.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

const CHUNK_ROWS: usize = 256;

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape {
                expected: rows * dim,
                got: data.len(),
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, dim: n, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }

    /// Divides every column by its root-mean-square (columns of zeros are
    /// left alone). Returns the factors applied.
    pub fn normalize_columns(&mut self) -> Vec<f64> {
        let mut ss = vec![0.0; self.dim];
        for r in 0..self.rows {
            for (s, v) in ss.iter_mut().zip(self.row(r)) {
                *s += v * v;
            }
        }
        let factors: Vec<f64> = ss
            .iter()
            .map(|s| {
                let rms = (s / self.rows.max(1) as f64).sqrt();
                if rms > 0.0 {
                    1.0 / rms
                } else {
                    1.0
                }
            })
            .collect();
        for row in self.data.chunks_mut(self.dim.max(1)) {
            for (v, f) in row.iter_mut().zip(&factors) {
                *v *= f;
            }
        }
        factors
    }

    /// `y = Phi x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            *yi = dot(self.row(i), x);
        });
    }

    /// `x = Phi^T y`, reduced over fixed row chunks so results do not depend
    /// on the thread count.
    pub fn apply_t(&self, y: &[f64], x: &mut [f64]) {
        let dim = self.dim;
        let partials: Vec<Vec<f64>> = self
            .data
            .par_chunks(CHUNK_ROWS * dim.max(1))
            .zip(y.par_chunks(CHUNK_ROWS))
            .map(|(block, ys)| {
                let mut acc = vec![0.0; dim];
                for (row, &yi) in block.chunks(dim.max(1)).zip(ys) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += yi * v;
                    }
                }
                acc
            })
            .collect();
        x.iter_mut().for_each(|v| *v = 0.0);
        for p in partials {
            for (a, v) in x.iter_mut().zip(p) {
                *a += v;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares weights `r` minimising `sum_i (r . phi_i - target_i)^2`.
pub fn fit_values(features: &FeatureMatrix, targets: &[f64], opts: &LsqrOptions) -> Result<(Vec<f64>, LeastSquaresReport)> {
    fit_values_from(features, targets, None, opts)
}

/// As [`fit_values`], starting from `start` instead of zero.
pub fn fit_values_from(
    features: &FeatureMatrix,
    targets: &[f64],
    start: Option<&[f64]>,
    opts: &LsqrOptions,
) -> Result<(Vec<f64>, LeastSquaresReport)> {
    if targets.len() != features.rows() {
        return Err(Error::Shape {
            expected: features.rows(),
            got: targets.len(),
        });
    }
    let apply = |x: &[f64], y: &mut [f64]| features.apply(x, y);
    let apply_t = |y: &[f64], x: &mut [f64]| features.apply_t(y, x);
    match start {
        None => lsqr_solve(features.dim(), apply, apply_t, targets, opts),
        Some(x0) => {
            if x0.len() != features.dim() {
                return Err(Error::Shape {
                    expected: features.dim(),
                    got: x0.len(),
                });
            }
            let mut ax0 = vec![0.0; features.rows()];
            features.apply(x0, &mut ax0);
            let shifted: Vec<f64> = targets.iter().zip(&ax0).map(|(t, a)| t - a).collect();
            let (dx, mut report) = lsqr_solve(features.dim(), apply, apply_t, &shifted, opts)?;
            let x: Vec<f64> = x0.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let bnorm = norm(targets);
            let rnorm = report.residual * norm(&shifted);
            report.residual = if bnorm > 0.0 { rnorm / bnorm } else { rnorm };
            report.converged = report.residual <= opts.tol;
            Ok((x, report))
        }
    }
}

/// `r . phi`.
pub fn predict(weights: &[f64], feature: &[f64]) -> Result<f64> {
    if weights.len() != feature.len() {
        return Err(Error::Shape {
            expected: weights.len(),
            got: feature.len(),
        });
    }
    Ok(dot(weights, feature))
}

/// Per-period weight vectors `r_k` of `J_k(phi) = r_k . phi`; period `N`
/// is identically zero and not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearValueNet {
    dim: usize,
    weights: Vec<Vec<f64>>,
}

impl LinearValueNet {
    pub fn new(dim: usize, weights: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| w.len() != dim) {
            return Err(Error::Shape {
                expected: dim,
                got: w.len(),
            });
        }
        Ok(Self { dim, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn periods(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn all_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Writes the weights in the versioned container: periods, dimension,
    /// then each period's vector.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_header(w, Kind::Weights)?;
        container::write_u64(w, self.weights.len() as u64)?;
        container::write_u64(w, self.dim as u64)?;
        for r in &self.weights {
            container::write_f64s(w, r)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        container::read_header(r, Kind::Weights)?;
        let periods = container::read_len(r, 1 << 32)?;
        let dim = container::read_len(r, 1 << 32)?;
        let weights = (0..periods).map(|_| container::read_f64s(r, dim)).collect::<Result<_>>()?;
        Self::new(dim, weights)
    }

    /// `J_k(phi)`; zero for `k >= periods`.
    pub fn value(&self, k: usize, feature: &[f64]) -> Result<f64> {
        match self.weights.get(k) {
            Some(w) => predict(w, feature),
            None if feature.len() == self.dim => Ok(0.0),
            None => Err(Error::Shape {
                expected: self.dim,
                got: feature.len(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FittedViOptions {
    pub lsqr: LsqrOptions,
    /// Start each period's fit from the next period's weights.
    pub warm_start: bool,
    /// Fit only on states whose flag is set; all states otherwise.
    pub train_mask: Option<Vec<bool>>,
    /// Fail on the first period whose fit does not converge.
    pub strict: bool,
}

impl FittedViOptions {
    pub fn new(lsqr: LsqrOptions) -> Self {
        Self {
            lsqr,
            warm_start: false,
            train_mask: None,
            strict: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FittedVi {
    pub net: LinearValueNet,
    pub policy: Policy,
    /// Fit report for period `k` at index `k`.
    pub reports: Vec<LeastSquaresReport>,
    /// Regression targets `beta_k` over the full state set, index `k`.
    pub targets: Vec<Vec<f64>>,
}

/// Fitted value iteration on the clamp chain. Row `i` of `features` is the
/// representation of state `i` of `D x T`.
pub fn fitted_value_iteration(bench: &Benchmark, features: &FeatureMatrix, opts: &FittedViOptions) -> Result<FittedVi> {
    if bench.boundary() != BoundaryRule::Clamp {
        return Err(Error::Unsupported(
            "fitted value iteration needs features for every successor; use the clamp boundary".into(),
        ));
    }
    let lat = bench.state_space();
    if features.rows() != lat.len() {
        return Err(Error::Shape {
            expected: lat.len(),
            got: features.rows(),
        });
    }
    let train: Vec<usize> = match &opts.train_mask {
        Some(mask) => {
            if mask.len() != lat.len() {
                return Err(Error::Shape {
                    expected: lat.len(),
                    got: mask.len(),
                });
            }
            (0..lat.len()).filter(|&i| mask[i]).collect()
        }
        None => (0..lat.len()).collect(),
    };
    let train_features = features.select(&train);
    let n = bench.horizon();
    let controls = bench.controls();
    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut reports: Vec<Option<LeastSquaresReport>> = vec![None; n];
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut layers: Vec<PolicyLayer> = Vec::with_capacity(n);
    let mut next_values = vec![0.0; lat.len()];
    let mut prev_weights: Option<Vec<f64>> = None;
    for k in (0..n).rev() {
        let (choice, beta): (Vec<u8>, Vec<f64>) = (0..lat.len())
            .into_par_iter()
            .map(|i| {
                let s = lat.state(i);
                let (u, ev) = argmin_ordered(controls.iter().map(|&u| expected_next(bench, lat, &next_values, s, u)));
                (u as u8, stage_cost(&s) + ev)
            })
            .unzip();
        let train_targets: Vec<f64> = train.iter().map(|&i| beta[i]).collect();
        let start = if opts.warm_start { prev_weights.as_deref() } else { None };
        let (w, report) = fit_values_from(&train_features, &train_targets, start, &opts.lsqr)?;
        if opts.strict && !report.converged {
            return Err(Error::FitFailed {
                period: k,
                iterations: report.iterations,
                residual: report.residual,
            });
        }
        features.apply(&w, &mut next_values);
        layers.push(PolicyLayer { lattice: lat, choice });
        prev_weights = Some(w.clone());
        weights[k] = w;
        reports[k] = Some(report);
        targets[k] = beta;
    }
    layers.reverse();
    Ok(FittedVi {
        net: LinearValueNet::new(features.dim(), weights)?,
        policy: Policy::new(controls.to_vec(), layers, false),
        reports: reports.into_iter().map(|r| r.expect("every period fitted")).collect(),
        targets,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CapacityRow {
    pub count: usize,
    pub trials: usize,
    pub mean_iterations: f64,
    pub success_rate: f64,
    pub mean_residual: f64,
}

/// For each count `n` and trial `t`, draws `n` distinct rows of the pool
/// produced by `pool(t)` and fits their targets.
pub fn capacity_experiment<F>(pool: F, counts: &[usize], trials: usize, seed: u64, lsqr: &LsqrOptions) -> Result<Vec<CapacityRow>>
where
    F: Fn(usize) -> Result<(FeatureMatrix, Vec<f64>)>,
{
    let pools: Vec<(FeatureMatrix, Vec<f64>)> = (0..trials).map(&pool).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(counts.len());
    for (ci, &count) in counts.iter().enumerate() {
        let mut iters = 0.0;
        let mut successes = 0usize;
        let mut residual = 0.0;
        for (t, (features, targets)) in pools.iter().enumerate() {
            if count > features.rows() {
                return Err(Error::NotEnoughPatches {
                    needed: count,
                    available: features.rows(),
                });
            }
            let mut r = rng::stream(seed, (ci * trials + t) as u64);
            let mut pick = sample(&mut r, features.rows(), count).into_vec();
            pick.sort_unstable();
            let x = features.select(&pick);
            let y: Vec<f64> = pick.iter().map(|&i| targets[i]).collect();
            let (_, report) = fit_values(&x, &y, lsqr)?;
            iters += report.iterations as f64;
            residual += report.residual;
            successes += usize::from(report.converged);
        }
        let tn = trials.max(1) as f64;
        rows.push(CapacityRow {
            count,
            trials,
            mean_iterations: iters / tn,
            success_rate: successes as f64 / tn,
            mean_residual: residual / tn,
        });
    }
    Ok(rows)
}
