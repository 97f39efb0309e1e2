//! Closed-form worst-group loss of the mixed ridge model and its Monte Carlo
//! counterpart.
//!
//! Parameters: `p` is the fine-tuning correlation strength, `s` the mixing
//! weight, `r` the ratio of tail noise variance to balanced-set size, `sigma1`
//! the core noise and `lambda` the ridge penalty.

use std::fmt;
use std::str::FromStr;

use faer::Mat;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linmodel::{add_gram, ridge_fit, ridge_solve, Moments, ModelWeights, RidgeConfig, CORE, SPURIOUS};
use crate::mixer::{build_class_pools, draw_partner, mix, MixConfig};
use crate::rng::{child_seed, domain};
use crate::synthdata::{draw_row, sample_balanced, sample_dataset, DistSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    pub p: f64,
    pub s: f64,
    pub r: f64,
    pub sigma1: f64,
    pub lambda: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.5 && self.p <= 1.0) {
            return Err(Error::param("p", format!("{} is not in (1/2, 1]", self.p)));
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::param("s", format!("{} is not in [0, 1]", self.s)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::param("r", format!("{} is not positive", self.r)));
        }
        if !(self.sigma1 >= 0.0 && self.sigma1.is_finite()) {
            return Err(Error::param("sigma1", format!("{} is not nonnegative", self.sigma1)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", format!("{} is not positive", self.lambda)));
        }
        Ok(())
    }

    pub fn with_s(self, s: f64) -> Self {
        Self { s, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiValues {
    pub q: f64,
    pub psi1: f64,
    pub psi2: f64,
    pub psi3: f64,
}

impl PsiValues {
    pub fn delta(&self) -> f64 {
        self.psi1 * self.psi3 - self.psi2 * self.psi2
    }
}

/// Which second term of the closed form to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// `sigma1^2 * c1^2`.
    AsPrinted,
    /// `sigma1^2 * (q c1 / delta)^2`, the core weight of the derived solution.
    #[default]
    DerivationConsistent,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::AsPrinted => "printed",
            Variant::DerivationConsistent => "derived",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "printed" => Ok(Variant::AsPrinted),
            "derived" => Ok(Variant::DerivationConsistent),
            other => Err(format!("unknown variant `{other}` (expected printed or derived)")),
        }
    }
}

pub fn psi(params: &TheoryParams) -> Result<PsiValues> {
    params.validate()?;
    let TheoryParams { p, s, r, sigma1, lambda } = *params;
    let u = 1.0 - s;
    let k = 2.0 * p - 1.0;
    let v1 = 1.0 + sigma1 * sigma1;
    let q = lambda / (s * s * r + lambda);
    let psi1 = u * u * v1 + 2.0 * s * u * q + s * s * q * v1 - u * u * (1.0 - q) + lambda;
    let psi2 = u * u * k + s * u * q * k - u * u * (1.0 - q) * k;
    let psi3 = u * u + s * s * q - u * u * (1.0 - q) * k * k + lambda;
    Ok(PsiValues { q, psi1, psi2, psi3 })
}

/// Analytic derivatives of `(q, psi1, psi2, psi3)` with respect to `s`.
pub fn psi_ds(params: &TheoryParams) -> Result<PsiValues> {
    let PsiValues { q, .. } = psi(params)?;
    let TheoryParams { p, s, r, sigma1, lambda } = *params;
    let u = 1.0 - s;
    let k = 2.0 * p - 1.0;
    let v1 = 1.0 + sigma1 * sigma1;
    let dq = -2.0 * s * r * q * q / lambda;
    let dpsi1 = -2.0 * u * v1 + 2.0 * (u - s) * q + 2.0 * s * u * dq + 2.0 * s * q * v1
        + s * s * dq * v1
        + 2.0 * u * (1.0 - q)
        + u * u * dq;
    let dpsi2 = k * (-2.0 * u + (u - s) * q + s * u * dq + 2.0 * u * (1.0 - q) + u * u * dq);
    let dpsi3 = -2.0 * u + 2.0 * s * q + s * s * dq + 2.0 * u * (1.0 - q) * k * k + u * u * dq * k * k;
    Ok(PsiValues {
        q: dq,
        psi1: dpsi1,
        psi2: dpsi2,
        psi3: dpsi3,
    })
}

/// Closed-form minority-group test loss of the ridge model trained on fully
/// mixed data.
pub fn eval_wg_loss(params: &TheoryParams, variant: Variant) -> Result<f64> {
    let v = psi(params)?;
    let PsiValues { q, psi1, psi2, psi3 } = v;
    let delta = v.delta();
    let scale = (psi1 * psi3).abs() + psi2 * psi2;
    if !delta.is_finite() || delta.abs() <= 1e-14 * scale {
        return Err(Error::TheorySingular { psi1, psi2, psi3 });
    }
    let uk = (1.0 - params.s) * (2.0 * params.p - 1.0);
    let c1 = psi3 - psi2 * uk;
    let first = (q / delta * (psi3 + psi2 - (psi1 + psi2) * uk) - 1.0).powi(2);
    let second = match variant {
        Variant::AsPrinted => c1 * c1,
        Variant::DerivationConsistent => (q / delta * c1).powi(2),
    };
    Ok(first + params.sigma1 * params.sigma1 * second)
}

/// Expected squared error on the minority groups (`a = -y`) of a test
/// distribution with the given noise levels.
pub fn minority_population_loss(w: &ModelWeights, sigma1: f64, sigma2: f64, tail_variance: f64) -> f64 {
    let w0 = w.w[CORE];
    let w1 = w.w[SPURIOUS];
    let b = w.b.unwrap_or(0.0);
    let tail: f64 = w.w[2..].iter().map(|v| v * v).sum();
    // A bias enters with opposite signs in the two minority groups.
    (w0 - w1 - 1.0).powi(2) + b * b + sigma1 * sigma1 * w0 * w0 + sigma2 * sigma2 * w1 * w1 + tail_variance * tail
}

/// Monte Carlo configuration at a fixed `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub p: f64,
    pub sigma1: f64,
    pub lambda: f64,
    pub r: f64,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub runs: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        TheoryParams {
            p: self.p,
            s: 0.0,
            r: self.r,
            sigma1: self.sigma1,
            lambda: self.lambda,
        }
        .validate()?;
        if !(self.n >= self.d && self.d >= self.m && self.m >= 4) {
            return Err(Error::param(
                "n, d, m",
                format!("need n >= d >= m >= 4, got n={}, d={}, m={}", self.n, self.d, self.m),
            ));
        }
        if self.runs == 0 {
            return Err(Error::param("runs", "must be at least 1"));
        }
        Ok(())
    }

    /// Fine-tuning distribution; the balanced set uses the same noise levels.
    pub fn spec(&self) -> DistSpec {
        DistSpec::new(self.p, self.sigma1, 0.0, (self.r * self.m as f64).sqrt(), self.d)
    }

    /// Seeds `(fine-tuning, balanced, mixing)` of a run.
    pub fn run_seeds(&self, run: usize) -> (u64, u64, u64) {
        let rs = child_seed(self.seed, domain::RUN, run as u64);
        (
            child_seed(rs, domain::DATA_ROW, 0),
            child_seed(rs, domain::BALANCED_ROW, 0),
            child_seed(rs, domain::MIX_ROW, 0),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimPoint {
    pub mean: f64,
    pub stderr: f64,
}

/// Pairwise (cascade) sum.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Mean and standard error of the mean (0 for a single value).
pub fn mean_stderr(xs: &[f64]) -> SimPoint {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let stderr = if xs.len() < 2 {
        0.0
    } else {
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
        (pairwise_sum(&dev) / (n - 1.0) / n).sqrt()
    };
    SimPoint { mean, stderr }
}

/// Pieces of the mixed-data moments that do not depend on `s`.
struct MixedMoments {
    d: usize,
    /// `(1/n) X^T X`.
    g: Mat<f64>,
    /// `(1/n) X^T P X'` where `P` assigns each row its partner.
    c: Mat<f64>,
    /// `(1/n) X'^T diag(counts) X'`.
    k: Mat<f64>,
    /// `(1/n) X^T y`.
    h_ft: Vec<f64>,
    /// `(1/n) X'^T t` with `t_j` the label sum of rows paired with `j`.
    h_bal: Vec<f64>,
    yy: f64,
}

impl MixedMoments {
    fn build(cfg: &SimConfig, run: usize) -> Result<Self> {
        let spec = cfg.spec();
        let (ft_seed, bal_seed, mix_seed) = cfg.run_seeds(run);
        let bal = sample_balanced(&spec, cfg.m, bal_seed)?;
        let pools = build_class_pools(&bal)?;
        let (n, d, m) = (cfg.n, cfg.d, cfg.m);
        let mut g = Mat::<f64>::zeros(d, d);
        let mut s_rows = Mat::<f64>::zeros(m, d);
        let mut counts = vec![0f64; m];
        let mut t = vec![0f64; m];
        let mut h_ft = vec![0f64; d];
        let block = 1024;
        let mut row = vec![0f32; d];
        let mut start = 0;
        while start < n {
            let rows = block.min(n - start);
            let mut b = Mat::<f64>::zeros(rows, d);
            for r in 0..rows {
                let i = start + r;
                let (y, _) = draw_row(&spec, ft_seed, i, &mut row);
                let partner = draw_partner(mix_seed, 1.0, i, y, &pools)
                    .partner
                    .expect("alpha = 1 mixes every row");
                counts[partner] += 1.0;
                t[partner] += y as f64;
                for j in 0..d {
                    let v = row[j] as f64;
                    b[(r, j)] = v;
                    h_ft[j] += v * y as f64;
                    s_rows[(partner, j)] += v;
                }
            }
            add_gram(&mut g, &b);
            start += rows;
        }
        let xb = Mat::<f64>::from_fn(m, d, |j, c| bal.row(j)[c] as f64);
        let inv_n = 1.0 / n as f64;
        let c = s_rows.transpose() * &xb * faer::Scale(inv_n);
        let weighted = Mat::<f64>::from_fn(m, d, |j, col| xb[(j, col)] * counts[j]);
        let k = xb.transpose() * &weighted * faer::Scale(inv_n);
        let h_bal = (0..d)
            .map(|col| (0..m).map(|j| xb[(j, col)] * t[j]).sum::<f64>() * inv_n)
            .collect();
        h_ft.iter_mut().for_each(|v| *v *= inv_n);
        Ok(Self {
            d,
            g: g * faer::Scale(inv_n),
            c,
            k,
            h_ft,
            h_bal,
            yy: 1.0,
        })
    }

    fn moments(&self, s: f64) -> Moments {
        let u = 1.0 - s;
        let d = self.d;
        let (a, b, c) = (u * u, u * s, s * s);
        let gram = (0..d * d)
            .map(|idx| {
                let (i, j) = (idx / d, idx % d);
                a * self.g[(i, j)] + b * (self.c[(i, j)] + self.c[(j, i)]) + c * self.k[(i, j)]
            })
            .collect();
        let xy = self.h_ft.iter().zip(&self.h_bal).map(|(f, g)| u * f + s * g).collect();
        Moments {
            n: 0,
            p: d,
            bias: false,
            gram,
            xy,
            yy: self.yy,
        }
    }
}

fn run_losses(cfg: &SimConfig, run: usize, s_grid: &[f64]) -> Result<Vec<f64>> {
    let mm = MixedMoments::build(cfg, run)?;
    let tail = cfg.spec().tail_variance();
    s_grid
        .iter()
        .map(|&s| {
            let w = ridge_solve(&mm.moments(s), cfg.lambda)?;
            Ok(minority_population_loss(&w, cfg.sigma1, 0.0, tail))
        })
        .collect()
}

/// One run evaluated by materializing the datasets: sample, mix, fit.
pub fn simulate_run_direct(cfg: &SimConfig, s: f64, run: usize) -> Result<(ModelWeights, f64)> {
    cfg.validate()?;
    let spec = cfg.spec();
    let (ft_seed, bal_seed, mix_seed) = cfg.run_seeds(run);
    let ft = sample_dataset(&spec, cfg.n, ft_seed)?;
    let bal = sample_balanced(&spec, cfg.m, bal_seed)?;
    let (mixed, _) = mix(&ft, &bal, &MixConfig::new(1.0, s, mix_seed))?;
    let w = ridge_fit(&mixed, &RidgeConfig { lambda: cfg.lambda })?;
    let loss = minority_population_loss(&w, cfg.sigma1, 0.0, spec.tail_variance());
    Ok((w, loss))
}

/// Weights of run `run` at each `s`, from the `s`-independent moment pieces.
pub fn simulate_run_weights(cfg: &SimConfig, run: usize, s_grid: &[f64]) -> Result<Vec<ModelWeights>> {
    cfg.validate()?;
    let mm = MixedMoments::build(cfg, run)?;
    s_grid.iter().map(|&s| ridge_solve(&mm.moments(s), cfg.lambda)).collect()
}

/// Monte Carlo minority loss over `cfg.runs` runs at every `s`. Runs share
/// their data and partners across `s`.
pub fn simulate_wg_curve(cfg: &SimConfig, s_grid: &[f64]) -> Result<Vec<SimPoint>> {
    cfg.validate()?;
    for &s in s_grid {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::param("s", format!("{s} is not in [0, 1]")));
        }
    }
    let per_run: Vec<Vec<f64>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| run_losses(cfg, run, s_grid))
        .collect::<Result<_>>()?;
    Ok((0..s_grid.len())
        .map(|k| {
            let xs: Vec<f64> = per_run.iter().map(|r| r[k]).collect();
            mean_stderr(&xs)
        })
        .collect())
}

pub fn simulate_wg_loss(cfg: &SimConfig, s: f64) -> Result<SimPoint> {
    Ok(simulate_wg_curve(cfg, &[s])?[0])
}

/// Empirical minority mean squared error of `w` on a dataset.
pub fn empirical_minority_loss(w: &ModelWeights, data: &Dataset) -> Option<f64> {
    let losses: Vec<f64> = (0..data.len())
        .filter(|&i| data.attribute(i) == -data.label(i))
        .map(|i| (w.score(data.row(i)) - data.label(i) as f64).powi(2))
        .collect();
    (!losses.is_empty()).then(|| pairwise_sum(&losses) / losses.len() as f64)
}

/// `start, start + step, ...` up to `stop` inclusive (within half a step).
pub fn grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 || start.is_nan() || stop.is_nan() || stop < start {
        return Err(Error::param("grid", format!("bad range {start}:{stop}:{step}")));
    }
    let count = ((stop - start) / step + 0.5).floor() as usize + 1;
    // Snap to 12 decimals so 0.1 steps print as 0.3, not 0.30000000000000004.
    let snap = |v: f64| (v * 1e12).round() / 1e12;
    Ok((0..count).map(|k| snap(start + k as f64 * step).min(stop)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1(p: f64, s: f64) -> TheoryParams {
        TheoryParams { p, s, r: 4.0, sigma1: 0.5, lambda: 0.25 }
    }

    #[test]
    fn psi_special_cases() {
        let v = psi(&fig1(0.8, 1.0)).unwrap();
        assert_eq!(v.psi2, 0.0);
        let v = psi(&fig1(0.8, 0.0)).unwrap();
        assert_eq!(v.q, 1.0);
        assert!((v.psi1 - (1.0 + 0.25 + 0.25)).abs() < 1e-15);
        assert!((v.psi2 - 0.6).abs() < 1e-15);
        assert!((v.psi3 - 1.25).abs() < 1e-15);
        for s in [0.0, 0.3, 0.9] {
            let half = TheoryParams { p: 0.5 + 1e-12, ..fig1(0.8, s) };
            assert!(psi(&half).unwrap().psi2.abs() < 1e-11);
        }
    }

    #[test]
    fn invalid_params() {
        assert!(psi(&fig1(0.5, 0.3)).is_err());
        assert!(psi(&TheoryParams { lambda: 0.0, ..fig1(0.8, 0.3) }).is_err());
        assert!(psi(&fig1(0.8, 1.2)).is_err());
    }

    #[test]
    fn grid_includes_endpoint() {
        let g = grid(0.0, 1.0, 0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[10], 1.0);
        assert_eq!(grid(0.0, 1.0, 0.02).unwrap().len(), 51);
    }

    #[test]
    fn mean_stderr_single_run() {
        assert_eq!(mean_stderr(&[0.3]), SimPoint { mean: 0.3, stderr: 0.0 });
        let p = mean_stderr(&[1.0, 3.0]);
        assert_eq!(p.mean, 2.0);
        assert!((p.stderr - 1.0).abs() < 1e-15);
    }
}
