//! Linear predictors fitted through second-moment matrices.
//!
//! Both the ridge solver and full-batch gradient descent work on
//! `G = (1/n) X^T X` and `h = (1/n) X^T y`, accumulated in `f64` by row blocks.
//! With a bias the design gets a trailing constant-one column.

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, Par, Side};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Index of the core coordinate.
pub const CORE: usize = 0;
/// Index of the spurious coordinate.
pub const SPURIOUS: usize = 1;

const BLOCK_ROWS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub w: Vec<f64>,
    pub b: Option<f64>,
}

impl ModelWeights {
    pub fn zeros(d: usize, bias: bool) -> Self {
        Self {
            w: vec![0.0; d],
            b: bias.then_some(0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn score(&self, x: &[f32]) -> f64 {
        let dot: f64 = self.w.iter().zip(x).map(|(w, &v)| w * v as f64).sum();
        dot + self.b.unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite()) && self.b.is_none_or(f64::is_finite)
    }

    /// Weights followed by the bias, if any.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = self.w.clone();
        p.extend(self.b);
        p
    }

    pub fn from_params(mut p: Vec<f64>, bias: bool) -> Self {
        let b = if bias { p.pop() } else { None };
        Self { w: p, b }
    }
}

/// Empirical second moments of a (possibly bias-augmented) design.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub n: usize,
    /// Parameter count: `d`, or `d + 1` with a bias.
    pub p: usize,
    pub bias: bool,
    /// `(1/n) X^T X`, row-major `p x p`.
    pub gram: Vec<f64>,
    /// `(1/n) X^T y`.
    pub xy: Vec<f64>,
    /// `(1/n) y^T y`.
    pub yy: f64,
}

/// Adds `B^T B` to `acc` where `B` holds `rows` of width `p`.
pub(crate) fn add_gram(acc: &mut Mat<f64>, block: &Mat<f64>) {
    matmul(
        acc.as_mut(),
        Accum::Add,
        block.transpose(),
        block.as_ref(),
        1.0,
        Par::Seq,
    );
}

impl Moments {
    pub fn from_dataset(data: &Dataset, bias: bool) -> Result<Self> {
        let targets: Vec<f64> = data.labels().iter().map(|&y| y as f64).collect();
        Self::from_rows(data, &targets, bias)
    }

    /// Moments against arbitrary per-row regression targets.
    pub fn from_rows(data: &Dataset, targets: &[f64], bias: bool) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("cannot fit on an empty dataset"));
        }
        if targets.len() != data.len() {
            return Err(Error::DimensionMismatch {
                expected: data.len(),
                found: targets.len(),
            });
        }
        data.check_finite()?;
        let d = data.dim();
        let p = d + bias as usize;
        let n = data.len();
        let mut acc = Mat::<f64>::zeros(p, p);
        let mut xy = vec![0f64; p];
        let mut yy = 0f64;
        let mut start = 0;
        while start < n {
            let rows = BLOCK_ROWS.min(n - start);
            let block = Mat::<f64>::from_fn(rows, p, |i, j| {
                if j < d {
                    data.row(start + i)[j] as f64
                } else {
                    1.0
                }
            });
            add_gram(&mut acc, &block);
            for i in 0..rows {
                let t = targets[start + i];
                for (j, s) in xy.iter_mut().enumerate() {
                    *s += block[(i, j)] * t;
                }
                yy += t * t;
            }
            start += rows;
        }
        let scale = 1.0 / n as f64;
        let gram = (0..p * p).map(|k| acc[(k / p, k % p)] * scale).collect();
        xy.iter_mut().for_each(|v| *v *= scale);
        Ok(Self {
            n,
            p,
            bias,
            gram,
            xy,
            yy: yy * scale,
        })
    }

    pub fn gram_at(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.p + j]
    }

    /// `G v`.
    pub fn gram_times(&self, v: &[f64]) -> Vec<f64> {
        self.gram
            .chunks_exact(self.p)
            .map(|row| row.iter().zip(v).map(|(g, x)| g * x).sum())
            .collect()
    }

    /// Mean squared error of the parameter vector `theta`.
    pub fn mse(&self, theta: &[f64]) -> f64 {
        let gt = self.gram_times(theta);
        let quad: f64 = theta.iter().zip(&gt).map(|(a, b)| a * b).sum();
        let lin: f64 = theta.iter().zip(&self.xy).map(|(a, b)| a * b).sum();
        quad - 2.0 * lin + self.yy
    }

    /// Penalized objective; the bias is never penalized.
    pub fn objective(&self, theta: &[f64], lambda: f64) -> f64 {
        self.mse(theta) + lambda * self.penalized(theta).iter().map(|v| v * v).sum::<f64>()
    }

    /// Gradient of [`Self::objective`].
    pub fn gradient(&self, theta: &[f64], lambda: f64) -> Vec<f64> {
        let gt = self.gram_times(theta);
        let d = self.p - self.bias as usize;
        gt.iter()
            .zip(&self.xy)
            .enumerate()
            .map(|(j, (g, h))| {
                let reg = if j < d { 2.0 * lambda * theta[j] } else { 0.0 };
                2.0 * (g - h) + reg
            })
            .collect()
    }

    fn penalized<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[..self.p - self.bias as usize]
    }

    /// Largest eigenvalue of the Gram by 30 power iterations (Rayleigh
    /// quotient of the last iterate).
    pub fn gram_spectral_radius(&self) -> f64 {
        let mut v = vec![1.0 / (self.p as f64).sqrt(); self.p];
        let mut est = 0.0;
        for _ in 0..30 {
            let u = self.gram_times(&v);
            est = v.iter().zip(&u).map(|(a, b)| a * b).sum();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            v = u.into_iter().map(|x| x / norm).collect();
        }
        est
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeConfig {
    pub lambda: f64,
}

/// Minimizer of `(1/n)||Xw - y||^2 + lambda ||w||^2` (no bias).
pub fn ridge_fit(data: &Dataset, cfg: &RidgeConfig) -> Result<ModelWeights> {
    let m = Moments::from_dataset(data, false)?;
    ridge_solve(&m, cfg.lambda)
}

/// Solves `(G + lambda I) theta = h` by Cholesky, leaving a bias unpenalized.
pub fn ridge_solve(m: &Moments, lambda: f64) -> Result<ModelWeights> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param("lambda", format!("{lambda} is not a finite nonnegative number")));
    }
    let p = m.p;
    let d = p - m.bias as usize;
    let a = Mat::<f64>::from_fn(p, p, |i, j| {
        m.gram_at(i, j) + if i == j && i < d { lambda } else { 0.0 }
    });
    let llt = match a.llt(Side::Lower) {
        Ok(llt) => llt,
        Err(_) => {
            let (index, pivot) = smallest_pivot(&a);
            return Err(Error::Singular { index, pivot });
        }
    };
    let l = llt.L();
    let max_diag = (0..p).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let (index, pivot) = (0..p)
        .map(|i| (i, l[(i, i)] * l[(i, i)]))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    if pivot <= p as f64 * f64::EPSILON * max_diag {
        return Err(Error::Singular { index, pivot });
    }
    let rhs = Mat::<f64>::from_fn(p, 1, |i, _| m.xy[i]);
    let sol = llt.solve(&rhs);
    let theta: Vec<f64> = (0..p).map(|i| sol[(i, 0)]).collect();
    let out = ModelWeights::from_params(theta, m.bias);
    if !out.is_finite() {
        return Err(Error::NonFinite("ridge solution"));
    }
    Ok(out)
}

/// Plain Cholesky that stops at the first nonpositive pivot; returns its
/// index and value, or the smallest pivot when none fails.
fn smallest_pivot(a: &Mat<f64>) -> (usize, f64) {
    let p = a.nrows();
    let mut l = vec![0f64; p * p];
    let mut best = (0, f64::INFINITY);
    for k in 0..p {
        let piv = a[(k, k)] - (0..k).map(|j| l[k * p + j] * l[k * p + j]).sum::<f64>();
        if piv < best.1 {
            best = (k, piv);
        }
        if piv.is_nan() || piv <= 0.0 {
            return (k, piv);
        }
        let lkk = piv.sqrt();
        l[k * p + k] = lkk;
        for i in k + 1..p {
            let s = a[(i, k)] - (0..k).map(|j| l[i * p + j] * l[k * p + j]).sum::<f64>();
            l[i * p + k] = s / lkk;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdConfig {
    /// `None` selects `0.9 * 2 / L` with `L = 2 (lambda_max(G) + lambda)`.
    pub step_size: Option<f64>,
    pub epochs: usize,
    pub init: ModelWeights,
    /// Record the weights every this many epochs (0 disables recording).
    pub record_every: usize,
    pub lambda: f64,
    /// Stop early once the gradient norm falls to this value.
    pub grad_tol: Option<f64>,
}

impl GdConfig {
    pub fn new(init: ModelWeights, epochs: usize) -> Self {
        Self {
            step_size: None,
            epochs,
            init,
            record_every: 0,
            lambda: 0.0,
            grad_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdOutcome {
    pub weights: ModelWeights,
    /// `(epoch, weights)` pairs; epoch 0 is the initialization.
    pub trajectory: Vec<(usize, ModelWeights)>,
    pub epochs_run: usize,
    pub grad_norm: f64,
    pub step_size: f64,
}

/// Full-batch gradient descent on the mean squared error (with bias iff
/// `cfg.init` has one).
pub fn gd_finetune(data: &Dataset, cfg: &GdConfig) -> Result<GdOutcome> {
    let m = Moments::from_dataset(data, cfg.init.b.is_some())?;
    gd_on_moments(&m, cfg)
}

pub fn gd_on_moments(m: &Moments, cfg: &GdConfig) -> Result<GdOutcome> {
    if cfg.init.b.is_some() != m.bias || cfg.init.dim() + m.bias as usize != m.p {
        return Err(Error::DimensionMismatch {
            expected: m.p - m.bias as usize,
            found: cfg.init.dim(),
        });
    }
    let step = match cfg.step_size {
        Some(s) if s >= 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::param("step_size", format!("{s} is not a finite nonnegative number"))),
        None => {
            let l = 2.0 * (m.gram_spectral_radius() + cfg.lambda);
            if l > 0.0 {
                0.9 * 2.0 / l
            } else {
                1.0
            }
        }
    };
    let bias = m.bias;
    let mut theta = cfg.init.to_params();
    let initial = m.objective(&theta, cfg.lambda);
    let limit = 10.0 * initial.max(f64::MIN_POSITIVE);
    let mut trajectory = Vec::new();
    let record = |t: usize, theta: &[f64], traj: &mut Vec<(usize, ModelWeights)>| {
        if cfg.record_every > 0 && t.is_multiple_of(cfg.record_every) {
            traj.push((t, ModelWeights::from_params(theta.to_vec(), bias)));
        }
    };
    record(0, &theta, &mut trajectory);
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut grad = m.gradient(&theta, cfg.lambda);
    let mut epochs_run = 0;
    for t in 1..=cfg.epochs {
        if cfg.grad_tol.is_some_and(|tol| norm(&grad) <= tol) {
            break;
        }
        for (th, g) in theta.iter_mut().zip(&grad) {
            *th -= step * g;
        }
        epochs_run = t;
        let loss = m.objective(&theta, cfg.lambda);
        if !loss.is_finite() || loss > limit {
            return Err(Error::Diverged {
                epoch: t,
                loss,
                initial,
            });
        }
        record(t, &theta, &mut trajectory);
        grad = m.gradient(&theta, cfg.lambda);
    }
    Ok(GdOutcome {
        weights: ModelWeights::from_params(theta, bias),
        trajectory,
        epochs_run,
        grad_norm: norm(&grad),
        step_size: step,
    })
}

/// `w . e_coordinate` (0-based).
pub fn alignment(weights: &ModelWeights, coordinate: usize) -> Result<f64> {
    weights
        .w
        .get(coordinate)
        .copied()
        .ok_or(Error::IndexOutOfRange {
            index: coordinate,
            len: weights.dim(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanDecomposition {
    /// `(w[CORE], w[SPURIOUS])`.
    pub core_spur: [f64; 2],
    pub noise_norm: f64,
    pub full_norm: f64,
}

impl SpanDecomposition {
    /// The same split of `w / ||w||` (unchanged when `w = 0`).
    pub fn normalized(&self) -> Self {
        if self.full_norm == 0.0 {
            return *self;
        }
        let k = 1.0 / self.full_norm;
        Self {
            core_spur: [self.core_spur[0] * k, self.core_spur[1] * k],
            noise_norm: self.noise_norm * k,
            full_norm: 1.0,
        }
    }

    pub fn noise_fraction(&self) -> f64 {
        if self.full_norm == 0.0 {
            0.0
        } else {
            self.noise_norm / self.full_norm
        }
    }
}

/// Splits `w` (bias excluded) into its core/spurious entries and the norm of
/// the remaining coordinates.
pub fn decompose(weights: &ModelWeights) -> Result<SpanDecomposition> {
    if weights.dim() < 3 {
        return Err(Error::param("w", format!("dimension {} is below 3", weights.dim())));
    }
    let w = &weights.w;
    let noise_sq: f64 = w[2..].iter().map(|v| v * v).sum();
    Ok(SpanDecomposition {
        core_spur: [w[CORE], w[SPURIOUS]],
        noise_norm: noise_sq.sqrt(),
        full_norm: (w[0] * w[0] + w[1] * w[1] + noise_sq).sqrt(),
    })
}
