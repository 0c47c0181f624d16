//! Lasso regularisation paths by coordinate descent.
//!
//! Losses are `(1/2n) RSS` for the Gaussian family and `(1/n)` times the
//! negative log-likelihood for the binomial family. The intercept is never
//! penalised. With standardisation on, columns are centred and scaled to unit
//! population variance before fitting and coefficients are reported on the
//! original scale.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Binomial,
}

#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub design: Array2<f64>,
    pub response: Array1<f64>,
    pub family: Family,
    pub standardize: bool,
}

impl LassoProblem {
    pub fn new(design: Array2<f64>, response: Array1<f64>, family: Family) -> Result<Self> {
        check_dim("response length", design.nrows(), response.len())?;
        if design.nrows() < 2 {
            return Err(Error::Empty("lasso needs at least two observations".into()));
        }
        if design.ncols() == 0 {
            return Err(Error::Empty("lasso design has no columns".into()));
        }
        if response.iter().chain(design.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Contract("lasso inputs must be finite".into()));
        }
        if family == Family::Binomial {
            if response.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract("binomial response must be 0/1".into()));
            }
            let ones = response.sum();
            if ones == 0.0 || ones == response.len() as f64 {
                return Err(Error::Contract("binomial response has a single class".into()));
            }
        }
        Ok(Self {
            design,
            response,
            family,
            standardize: true,
        })
    }

    pub fn unstandardized(mut self) -> Self {
        self.standardize = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathOptions {
    pub grid_size: usize,
    pub lambda_min_ratio: f64,
    /// Coordinate descent stops when no update lowers the objective by more
    /// than `tol` times the per-sample null deviance.
    pub tol: f64,
    /// When set, each penalty is also refined until every KKT residual is at
    /// most this. Violating inactive columns are always added regardless.
    pub kkt_tol: Option<f64>,
    pub max_sweeps: usize,
    /// Stop the path once the fraction of deviance explained exceeds this.
    /// Applies to the binomial family only; separable data would otherwise
    /// drive coefficients to infinity at small penalties.
    pub binomial_deviance_stop: Option<f64>,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            grid_size: 200,
            lambda_min_ratio: 1e-3,
            tol: 1e-7,
            kkt_tol: Some(1e-7),
            max_sweeps: 100_000,
            binomial_deviance_stop: Some(0.999),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    /// Strictly decreasing penalties.
    pub lambdas: Vec<f64>,
    /// `ncols x lambdas.len()`, original scale.
    pub coefficients: Array2<f64>,
    pub intercepts: Vec<f64>,
    /// Coordinate sweeps spent at each penalty.
    pub iterations: Vec<usize>,
    /// Fraction of null deviance explained at each penalty.
    pub deviance_ratio: Vec<f64>,
}

impl LassoPath {
    /// Largest grid penalty at which each column is nonzero, 0 if never.
    pub fn entry_lambdas(&self) -> Array1<f64> {
        Array1::from_iter(
            self.coefficients
                .rows()
                .into_iter()
                .map(|row| row.iter().position(|&b| b != 0.0).map_or(0.0, |k| self.lambdas[k])),
        )
    }

    /// Grid as rows, coefficients as columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["lambda".to_string(), "intercept".to_string()];
        header.extend((1..=self.coefficients.nrows()).map(|j| format!("b{j}")));
        w.write_record(&header)?;
        for (k, lambda) in self.lambdas.iter().enumerate() {
            let mut rec = vec![lambda.to_string(), self.intercepts[k].to_string()];
            rec.extend(self.coefficients.column(k).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

fn binomial_deviance(y: ArrayView1<'_, f64>, eta: &[f64]) -> f64 {
    // -2 log-likelihood in a form that is stable for large |eta|.
    2.0 * y
        .iter()
        .zip(eta)
        .map(|(&yi, &e)| {
            let log1p_exp = if e > 0.0 {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            };
            log1p_exp - yi * e
        })
        .sum::<f64>()
}

/// Centring and scaling of the design, with constant columns dropped and
/// identical columns merged.
struct Standardized {
    n: usize,
    /// Column-major storage of the distinct working columns.
    columns: Vec<Vec<f64>>,
    /// `(1/n) |x_j|^2` of each working column.
    curvature: Vec<f64>,
    /// Original column indices behind each working column.
    groups: Vec<Vec<usize>>,
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardized {
    fn new(x: ArrayView2<'_, f64>, standardize: bool) -> Self {
        let (n, p) = x.dim();
        let nf = n as f64;
        let mut mean = Array1::zeros(p);
        let mut scale = Array1::ones(p);
        let mut columns = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for j in 0..p {
            let col = x.column(j);
            let m = col.sum() / nf;
            let centered: Vec<f64> = col.iter().map(|v| v - m).collect();
            let var = dot(&centered, &centered) / nf;
            mean[j] = m;
            // Constant columns never enter the path.
            if !(var > 1e-24 * (1.0 + m * m)) {
                continue;
            }
            let sd = var.sqrt();
            let working: Vec<f64> = if standardize {
                scale[j] = sd;
                centered.iter().map(|v| v / sd).collect()
            } else {
                centered
            };
            let key: Vec<u64> = working.iter().map(|v| v.to_bits()).collect();
            match seen.get(&key) {
                Some(&g) => groups[g].push(j),
                None => {
                    seen.insert(key, columns.len());
                    groups.push(vec![j]);
                    columns.push(working);
                }
            }
        }
        let curvature = columns.iter().map(|c| dot(c, c) / nf).collect();
        Self {
            n,
            columns,
            curvature,
            groups,
            mean,
            scale,
        }
    }

    /// `(1/n) x_j^T v` for every working column.
    fn correlations(&self, v: &[f64]) -> Vec<f64> {
        let nf = self.n as f64;
        self.columns.iter().map(|c| dot(c, v) / nf).collect()
    }

    fn gram(&self, y: ArrayView1<'_, f64>, ybar: f64) -> (Vec<f64>, Vec<f64>) {
        let pw = self.columns.len();
        let nf = self.n as f64;
        let mut g = vec![0.0; pw * pw];
        for a in 0..pw {
            for c in a..pw {
                let v = dot(&self.columns[a], &self.columns[c]) / nf;
                g[a * pw + c] = v;
                g[c * pw + a] = v;
            }
        }
        let centered: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        (g, self.correlations(&centered))
    }

    /// Spreads working coefficients over the original columns and undoes the scaling.
    fn to_original(&self, b: &[f64], b0: f64, p: usize) -> (Array1<f64>, f64) {
        let mut beta = Array1::zeros(p);
        for (g, &bg) in self.groups.iter().zip(b) {
            let share = bg / g.len() as f64;
            for &j in g {
                beta[j] = share / self.scale[j];
            }
        }
        let intercept = b0 - beta.dot(&self.mean);
        (beta, intercept)
    }
}

struct Solver<'a> {
    std: &'a Standardized,
    y: ArrayView1<'a, f64>,
    family: Family,
    opts: PathOptions,
    b: Vec<f64>,
    /// Intercept of the working (centred) problem.
    b0: f64,
    active: Vec<bool>,
    /// `tol` times the null deviance per sample.
    threshold: f64,
    /// Gaussian family only: `(1/n) X^T X` over working columns (row-major)
    /// and `(1/n) X^T (y - mean y)`, for the exact active-set solve.
    gram: Option<(Vec<f64>, Vec<f64>)>,
}

impl Solver<'_> {
    fn linear_predictor(&self) -> Vec<f64> {
        let mut eta = vec![self.b0; self.std.n];
        for (c, &bj) in self.std.columns.iter().zip(&self.b) {
            if bj != 0.0 {
                for (e, x) in eta.iter_mut().zip(c) {
                    *e += bj * x;
                }
            }
        }
        eta
    }

    /// `y - fitted` on the response scale.
    fn residual(&self, eta: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Gaussian => self.y.iter().zip(eta).map(|(y, e)| y - e).collect(),
            Family::Binomial => self.y.iter().zip(eta).map(|(y, &e)| y - sigmoid(e)).collect(),
        }
    }

    /// Largest KKT residual over all working columns and the intercept, and
    /// any inactive columns whose gradient exceeds the penalty.
    fn kkt(&self, lambda: f64) -> (f64, Vec<usize>) {
        let eta = self.linear_predictor();
        let r = self.residual(&eta);
        let grad = self.std.correlations(&r);
        let mut worst = (r.iter().sum::<f64>() / self.std.n as f64).abs();
        let mut violators = Vec::new();
        for (j, &g) in grad.iter().enumerate() {
            let res = if self.b[j] != 0.0 {
                (g - lambda * self.b[j].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            if !self.active[j] && g.abs() > lambda {
                violators.push(j);
            }
            worst = worst.max(res);
        }
        (worst, violators)
    }

    /// Weighted coordinate descent on the active set for
    /// `(1/2n) sum w (r - x b)^2 + lambda |b|`, updating `r` in place.
    /// `weights = None` means unit weights and a fixed intercept.
    fn descend(&mut self, lambda: f64, r: &mut [f64], weights: Option<&[f64]>, sweeps: &mut usize) -> Result<()> {
        let nf = self.std.n as f64;
        let weighted_curv: Vec<f64> = match weights {
            None => self.std.curvature.clone(),
            Some(w) => self
                .std
                .columns
                .iter()
                .zip(&self.active)
                .map(|(c, &a)| {
                    if a {
                        c.iter().zip(w).map(|(x, wi)| wi * x * x).sum::<f64>() / nf
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let w_total: f64 = weights.map_or(nf, |w| w.iter().sum());
        loop {
            *sweeps += 1;
            if *sweeps > self.opts.max_sweeps {
                return Err(Error::NonConvergence {
                    lambda,
                    iterations: *sweeps,
                });
            }
            let mut max_change = 0.0f64;
            if let Some(w) = weights {
                let shift = dot(w, r) / w_total;
                if shift != 0.0 {
                    self.b0 += shift;
                    r.iter_mut().for_each(|v| *v -= shift);
                    max_change = max_change.max(w_total / nf * shift * shift);
                }
            }
            for j in 0..self.b.len() {
                if !self.active[j] {
                    continue;
                }
                let c = &self.std.columns[j];
                let g = match weights {
                    None => dot(c, r) / nf,
                    Some(w) => {
                        c.iter()
                            .zip(w)
                            .zip(r.iter())
                            .map(|((x, wi), ri)| x * wi * ri)
                            .sum::<f64>()
                            / nf
                    }
                };
                let v = weighted_curv[j];
                let new = soft_threshold(v * self.b[j] + g, lambda) / v;
                let d = new - self.b[j];
                if d != 0.0 {
                    for (ri, x) in r.iter_mut().zip(c) {
                        *ri -= d * x;
                    }
                    self.b[j] = new;
                    max_change = max_change.max(v * d * d);
                }
            }
            if max_change < self.threshold {
                return Ok(());
            }
        }
    }

    /// With the signs of the nonzero coefficients fixed, the Gaussian lasso
    /// solution solves `G_A b_A = c_A - lambda s_A`. Coordinates whose sign
    /// flips are dropped and the system re-solved. The KKT check in `solve`
    /// decides whether the result stands.
    fn polish(&mut self, lambda: f64) {
        let Some((gram, xty)) = &self.gram else { return };
        let pw = self.b.len();
        let mut support: Vec<usize> = (0..pw).filter(|&j| self.b[j] != 0.0).collect();
        while !support.is_empty() {
            let k = support.len();
            let g = DMatrix::from_fn(k, k, |a, c| gram[support[a] * pw + support[c]]);
            let rhs = DVector::from_fn(k, |a, _| xty[support[a]] - lambda * self.b[support[a]].signum());
            let Some(chol) = g.clone().cholesky() else { return };
            let sol = chol.solve(&rhs);
            let residual = (&g * &sol - &rhs).amax();
            if !(residual <= 1e-9 * (rhs.amax() + g.amax() * sol.amax())) {
                return;
            }
            let flipped: Vec<usize> = (0..k)
                .filter(|&a| !(sol[a] != 0.0 && sol[a].signum() == self.b[support[a]].signum()))
                .collect();
            if flipped.is_empty() {
                for (&j, &v) in support.iter().zip(sol.iter()) {
                    self.b[j] = v;
                }
                return;
            }
            for &a in flipped.iter().rev() {
                self.b[support[a]] = 0.0;
                support.remove(a);
            }
        }
    }

    fn penalized_objective(&self, lambda: f64) -> f64 {
        let eta = self.linear_predictor();
        let loss = binomial_deviance(self.y, &eta) / (2.0 * self.std.n as f64);
        loss + lambda * self.b.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Solves at one penalty, warm-started from the current state. Returns the sweep count.
    fn solve(&mut self, lambda: f64) -> Result<usize> {
        let base = self.threshold;
        let result = self.solve_inner(lambda);
        self.threshold = base;
        result
    }

    fn solve_inner(&mut self, lambda: f64) -> Result<usize> {
        let mut sweeps = 0;
        loop {
            match self.family {
                Family::Gaussian => {
                    let eta = self.linear_predictor();
                    let mut r = self.residual(&eta);
                    self.descend(lambda, &mut r, None, &mut sweeps)?;
                    self.polish(lambda);
                }
                Family::Binomial => self.newton(lambda, &mut sweeps)?,
            }
            let (worst, violators) = self.kkt(lambda);
            if violators.is_empty() && self.opts.kkt_tol.is_none_or(|t| worst <= t) {
                return Ok(sweeps);
            }
            if violators.is_empty() {
                // Only the tolerance failed: the descent stopped too early and
                // the polish did not apply, so ask for smaller steps.
                self.threshold *= 0.01;
            }
            for j in violators {
                self.active[j] = true;
            }
            sweeps += 1;
            if sweeps > self.opts.max_sweeps {
                return Err(Error::NonConvergence {
                    lambda,
                    iterations: sweeps,
                });
            }
        }
    }

    /// Proximal Newton: weighted least-squares surrogate solved by coordinate
    /// descent, with step halving if the penalised objective goes up.
    fn newton(&mut self, lambda: f64, sweeps: &mut usize) -> Result<()> {
        loop {
            let eta = self.linear_predictor();
            let mut w = Vec::with_capacity(eta.len());
            let mut r = Vec::with_capacity(eta.len());
            for (&e, &y) in eta.iter().zip(self.y.iter()) {
                let p = sigmoid(e);
                let wi = (p * (1.0 - p)).max(1e-5);
                w.push(wi);
                r.push((y - p) / wi);
            }
            let old_b = self.b.clone();
            let old_b0 = self.b0;
            let old_obj = self.penalized_objective(lambda);
            self.descend(lambda, &mut r, Some(&w), sweeps)?;

            let new_b = self.b.clone();
            let new_b0 = self.b0;
            let mut step = 1.0;
            while self.penalized_objective(lambda) > old_obj + 1e-12 * old_obj.abs() && step > 1e-6 {
                step *= 0.5;
                self.b0 = old_b0 + step * (new_b0 - old_b0);
                for j in 0..self.b.len() {
                    self.b[j] = old_b[j] + step * (new_b[j] - old_b[j]);
                }
            }
            // Curvature-weighted change, bounded by 1/4 for the logistic loss.
            let change = self
                .b
                .iter()
                .zip(&old_b)
                .zip(&self.std.curvature)
                .map(|((a, b), v)| 0.25 * v * (a - b).powi(2))
                .fold(0.25 * (self.b0 - old_b0).powi(2), f64::max);
            if change < self.threshold {
                return Ok(());
            }
            *sweeps += 1;
            if *sweeps > self.opts.max_sweeps {
                return Err(Error::NonConvergence {
                    lambda,
                    iterations: *sweeps,
                });
            }
        }
    }
}

/// Log-spaced grid from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, grid_size: usize, ratio: f64) -> Vec<f64> {
    let last = (grid_size - 1) as f64;
    (0..grid_size)
        .map(|k| lambda_max * ratio.powf(k as f64 / last))
        .collect()
}

/// Smallest penalty at which every coefficient is zero.
pub fn lambda_max(problem: &LassoProblem) -> f64 {
    let std = Standardized::new(problem.design.view(), problem.standardize);
    let ybar = problem.response.mean().unwrap_or(0.0);
    let r: Vec<f64> = problem.response.iter().map(|y| y - ybar).collect();
    std.correlations(&r).iter().fold(0.0, |m, g| m.max(g.abs()))
}

/// Full path on a log grid, warm-started from the largest penalty. When the
/// response carries no signal at all (`lambda_max = 0`), the grid starts at 1
/// and every coefficient is zero.
pub fn solve_path(problem: &LassoProblem, opts: &PathOptions) -> Result<LassoPath> {
    if opts.grid_size < 2 {
        return Err(Error::Config(format!(
            "grid size must be at least 2, got {}",
            opts.grid_size
        )));
    }
    if !(opts.tol > 0.0) || !(opts.lambda_min_ratio > 0.0 && opts.lambda_min_ratio < 1.0) {
        return Err(Error::Config("path tolerance and lambda ratio must be in range".into()));
    }
    let p = problem.design.ncols();
    let std = Standardized::new(problem.design.view(), problem.standardize);
    let y = problem.response.view();
    let ybar = y.mean().expect("nonempty");
    let mut lmax = lambda_max(problem);
    if !(lmax > 0.0) {
        lmax = 1.0;
    }
    let grid = lambda_grid(lmax, opts.grid_size, opts.lambda_min_ratio);

    let b0 = match problem.family {
        Family::Gaussian => ybar,
        Family::Binomial => (ybar / (1.0 - ybar)).ln(),
    };
    let null_eta = vec![b0; std.n];
    let null_dev = match problem.family {
        Family::Gaussian => y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>(),
        Family::Binomial => binomial_deviance(y, &null_eta),
    };
    let mut solver = Solver {
        std: &std,
        y,
        family: problem.family,
        opts: *opts,
        b: vec![0.0; std.columns.len()],
        b0,
        active: vec![false; std.columns.len()],
        threshold: opts.tol * if null_dev > 0.0 { null_dev / std.n as f64 } else { 1.0 },
        gram: (problem.family == Family::Gaussian).then(|| std.gram(y, ybar)),
    };

    let mut path = LassoPath {
        lambdas: Vec::with_capacity(grid.len()),
        coefficients: Array2::zeros((p, 0)),
        intercepts: Vec::new(),
        iterations: Vec::new(),
        deviance_ratio: Vec::new(),
    };
    let mut columns: Vec<Array1<f64>> = Vec::new();
    for (k, &lambda) in grid.iter().enumerate() {
        // The null model is the exact solution at lambda_max; solving there
        // can leave rounding-level coefficients behind.
        let sweeps = if k == 0 { 0 } else { solver.solve(lambda)? };
        let (beta, intercept) = std.to_original(&solver.b, solver.b0, p);
        let eta = solver.linear_predictor();
        let dev = match problem.family {
            Family::Gaussian => y.iter().zip(&eta).map(|(a, e)| (a - e).powi(2)).sum::<f64>(),
            Family::Binomial => binomial_deviance(y, &eta),
        };
        let ratio = if null_dev > 0.0 { 1.0 - dev / null_dev } else { 0.0 };
        path.lambdas.push(lambda);
        path.intercepts.push(intercept);
        path.iterations.push(sweeps);
        path.deviance_ratio.push(ratio);
        columns.push(beta);
        if problem.family == Family::Binomial && opts.binomial_deviance_stop.is_some_and(|stop| ratio > stop) {
            break;
        }
    }
    path.coefficients = Array2::from_shape_fn((p, columns.len()), |(j, k)| columns[k][j]);
    Ok(path)
}

/// Largest KKT residual at each grid point, recomputed from the original
/// inputs in the standardised coordinates the penalty applies to.
pub fn kkt_residuals(problem: &LassoProblem, path: &LassoPath) -> Vec<f64> {
    let x = problem.design.view();
    let (n, p) = x.dim();
    let nf = n as f64;
    let mut scaled = Array2::zeros((n, p));
    let mut scales = Array1::ones(p);
    for j in 0..p {
        let col = x.column(j);
        let m = col.sum() / nf;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf;
        let s = if problem.standardize && var > 0.0 {
            var.sqrt()
        } else {
            1.0
        };
        scales[j] = s;
        scaled.column_mut(j).assign(&col.mapv(|v| (v - m) / s));
    }
    (0..path.lambdas.len())
        .map(|k| {
            let lambda = path.lambdas[k];
            let beta = path.coefficients.column(k);
            let eta = x.dot(&beta) + path.intercepts[k];
            let r: Array1<f64> = match problem.family {
                Family::Gaussian => &problem.response - &eta,
                Family::Binomial => Array1::from_iter(problem.response.iter().zip(&eta).map(|(y, &e)| y - sigmoid(e))),
            };
            let grad = scaled.t().dot(&r) / nf;
            let mut worst = (r.sum() / nf).abs();
            for j in 0..p {
                let b = beta[j] * scales[j];
                let res = if b != 0.0 {
                    (grad[j] - lambda * b.signum()).abs()
                } else {
                    (grad[j].abs() - lambda).max(0.0)
                };
                worst = worst.max(res);
            }
            worst
        })
        .collect()
}
