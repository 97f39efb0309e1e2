//! Last-layer retraining on embedding files: split construction, class
//! balancing, per-group sampling, logistic heads and the mixing sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{Dataset, GroupId};
use crate::error::{Error, Result};
use crate::groupeval::{evaluate_predictions, GroupUniverse};
use crate::linmodel::ModelWeights;
use crate::mixer::{mix, MixConfig};
use crate::rng::{domain, Stream};
use crate::theory::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// The first half of a group-stratified split of the given data.
    ValidationHalf,
    /// All of the given data.
    Training,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassBalance {
    /// Resample every smaller class with replacement up to the largest.
    UpsampleMinorClass,
    AsIs,
    /// Exact per-class counts; unlisted classes are dropped.
    Quota(BTreeMap<i8, usize>),
    /// Exact per-group counts; unlisted groups are dropped.
    GroupQuota(BTreeMap<GroupId, usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerGroup {
    Count(usize),
    /// The size of the smallest group.
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub source: Source,
    pub class_balance: ClassBalance,
    pub l_per_group: PerGroup,
    pub seed: u64,
}

/// Splits each group uniformly at random into two halves (the first gets the
/// smaller half of an odd group). Rows keep their original relative order.
pub fn split_validation(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (k, (_, rows)) in data.group_index().iter().enumerate() {
        let mut rows = rows.clone();
        Stream::new(seed, domain::SPLIT, k as u64).shuffle(&mut rows);
        let half = rows.len() / 2;
        first.extend_from_slice(&rows[..half]);
        second.extend_from_slice(&rows[half..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((data.select(&first)?, data.select(&second)?))
}

/// `count` indices drawn from `pool`: without replacement when the pool is
/// large enough, with replacement otherwise.
fn draw(pool: &[usize], count: usize, rng: &mut Stream) -> Vec<usize> {
    if count <= pool.len() {
        rng.sample_without_replacement(pool.len(), count)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    } else {
        (0..count).map(|_| pool[rng.below(pool.len())]).collect()
    }
}

pub fn build_ft_split(data: &Dataset, plan: &SplitPlan) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning source is empty"));
    }
    let source = match plan.source {
        Source::Training => data.clone(),
        Source::ValidationHalf => split_validation(data, plan.seed)?.0,
    };
    let mut by_class: BTreeMap<i8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in source.labels().iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = Stream::new(plan.seed, domain::SAMPLE, 0);
    let indices: Vec<usize> = match &plan.class_balance {
        ClassBalance::AsIs => return Ok(source),
        ClassBalance::UpsampleMinorClass => {
            let target = by_class.values().map(Vec::len).max().unwrap_or(0);
            let mut idx: Vec<usize> = (0..source.len()).collect();
            for rows in by_class.values() {
                idx.extend((0..target - rows.len()).map(|_| rows[rng.below(rows.len())]));
            }
            idx
        }
        ClassBalance::Quota(quota) => {
            let mut idx = Vec::new();
            for (&c, &count) in quota {
                let rows = by_class.get(&c).ok_or(Error::UnknownClass(c))?;
                idx.extend(draw(rows, count, &mut rng));
            }
            idx
        }
        ClassBalance::GroupQuota(quota) => {
            let mut idx = Vec::new();
            for (&g, &count) in quota {
                let rows = source.group_rows(g);
                if rows.is_empty() {
                    return Err(Error::EmptyGroup(g));
                }
                idx.extend(draw(rows, count, &mut rng));
            }
            idx
        }
    };
    source.select(&indices)
}

/// `l` rows per group, without replacement. `groups` limits sampling to the
/// listed groups; by default every group of `data` is used.
pub fn build_balanced_split(data: &Dataset, l: PerGroup, seed: u64, groups: Option<&[GroupId]>) -> Result<Dataset> {
    let groups: Vec<GroupId> = match groups {
        Some(g) => g.to_vec(),
        None => data.groups().collect(),
    };
    if groups.is_empty() {
        return Err(Error::EmptyDataset("no groups to sample from"));
    }
    for &g in &groups {
        if data.group_rows(g).is_empty() {
            return Err(Error::EmptyGroup(g));
        }
    }
    let l = match l {
        PerGroup::Count(l) => l,
        PerGroup::Max => groups.iter().map(|&g| data.group_rows(g).len()).min().unwrap_or(0),
    };
    let mut idx = Vec::with_capacity(l * groups.len());
    for (k, &g) in groups.iter().enumerate() {
        let rows = data.group_rows(g);
        if l > rows.len() {
            return Err(Error::GroupTooSmall {
                group: g,
                requested: l,
                available: rows.len(),
            });
        }
        let mut rng = Stream::new(seed, domain::SAMPLE, k as u64);
        idx.extend(draw(rows, l, &mut rng));
    }
    data.select(&idx)
}

/// Linear classification head: one score for two classes, one per class
/// (one-vs-rest, argmax) otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub classes: Vec<i8>,
    pub weights: Vec<ModelWeights>,
}

impl Head {
    fn layout(train: &Dataset) -> Result<Vec<i8>> {
        let classes: Vec<i8> = train.classes().into_iter().collect();
        if classes.iter().all(|c| *c == 1 || *c == -1) {
            return Ok(vec![-1, 1]);
        }
        if classes.len() < 2 {
            return Err(Error::param("labels", format!("need two classes, found {classes:?}")));
        }
        Ok(classes)
    }

    pub fn is_binary(&self) -> bool {
        self.weights.len() == 1
    }

    pub fn predict(&self, x: &[f32]) -> i8 {
        if self.is_binary() {
            return if self.weights[0].score(x) >= 0.0 {
                self.classes[1]
            } else {
                self.classes[0]
            };
        }
        let mut best = (f64::NEG_INFINITY, self.classes[0]);
        for (w, &c) in self.weights.iter().zip(&self.classes) {
            let s = w.score(x);
            if s > best.0 {
                best = (s, c);
            }
        }
        best.1
    }

    pub fn predict_all(&self, data: &Dataset) -> Vec<i8> {
        data.rows().map(|x| self.predict(x)).collect()
    }

    /// Worst-group accuracy on `data`.
    pub fn worst_group_accuracy(&self, data: &Dataset, universe: &GroupUniverse) -> Result<f64> {
        Ok(evaluate_predictions(&self.predict_all(data), data, universe)?.worst_value())
    }

    /// Per-head binary targets: `targets[k][i]` is 1 when row `i` belongs to
    /// the positive class of head `k`.
    fn targets(&self, data: &Dataset) -> Vec<Vec<f64>> {
        let positive: Vec<i8> = if self.is_binary() {
            vec![self.classes[1]]
        } else {
            self.classes.clone()
        };
        positive
            .iter()
            .map(|&c| data.labels().iter().map(|&y| (y == c) as u8 as f64).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    SgdEarlyStop,
    L1Averaged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainConfig {
    pub optimizer: Optimizer,
    /// SGD step size. The l1 solver uses `1 / L` from the data instead.
    pub learning_rate: f64,
    pub l1_strength: f64,
    /// SGD epochs, or the l1 solver's iteration budget.
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub subset_repeats: usize,
    pub subset_fraction: f64,
    /// The l1 solver stops once no parameter moves by more than this.
    pub tol: f64,
    pub class_weights: BTreeMap<i8, f64>,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::L1Averaged,
            learning_rate: 0.1,
            l1_strength: 1e-3,
            epochs: 300,
            patience: 20,
            batch_size: 32,
            subset_repeats: 5,
            subset_fraction: 0.5,
            tol: 1e-9,
            class_weights: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", format!("{} is not positive", self.learning_rate)));
        }
        if !(self.l1_strength >= 0.0 && self.l1_strength.is_finite()) {
            return Err(Error::param("l1_strength", format!("{} is negative", self.l1_strength)));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if self.patience > self.epochs {
            return Err(Error::param("patience", format!("{} exceeds epochs {}", self.patience, self.epochs)));
        }
        if self.subset_repeats == 0 {
            return Err(Error::param("subset_repeats", "must be at least 1"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::param("subset_fraction", format!("{} is not in (0, 1]", self.subset_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    fn row_weights(&self, data: &Dataset) -> Vec<f64> {
        data.labels()
            .iter()
            .map(|y| self.class_weights.get(y).copied().unwrap_or(1.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainOutcome {
    pub head: Head,
    /// Validation worst-group accuracy after every SGD epoch, or once for the
    /// final l1 head.
    pub history: Vec<f64>,
    pub best_epoch: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) - t z`.
fn logistic_loss(z: f64, t: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z
}

fn dot(theta: &[f64], x: &[f32]) -> f64 {
    let d = x.len();
    theta[..d].iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + theta[d]
}

fn soft_threshold(theta: &mut [f64], d: usize, k: f64) {
    for v in &mut theta[..d] {
        *v = v.signum() * (v.abs() - k).max(0.0);
    }
}

pub fn retrain_head(
    d_mixed: &Dataset,
    val: &Dataset,
    cfg: &RetrainConfig,
    universe: &GroupUniverse,
) -> Result<RetrainOutcome> {
    cfg.validate()?;
    if d_mixed.is_empty() {
        return Err(Error::EmptyDataset("retraining set is empty"));
    }
    if val.dim() != d_mixed.dim() {
        return Err(Error::DimensionMismatch {
            expected: d_mixed.dim(),
            found: val.dim(),
        });
    }
    d_mixed.check_finite()?;
    let classes = Head::layout(d_mixed)?;
    match cfg.optimizer {
        Optimizer::SgdEarlyStop => sgd_early_stop(d_mixed, val, cfg, universe, classes),
        Optimizer::L1Averaged => {
            let head = l1_averaged(d_mixed, cfg, classes)?;
            let acc = head.worst_group_accuracy(val, universe)?;
            Ok(RetrainOutcome {
                head,
                history: vec![acc],
                best_epoch: cfg.epochs,
            })
        }
    }
}

fn to_head(classes: &[i8], params: &[Vec<f64>]) -> Head {
    Head {
        classes: classes.to_vec(),
        weights: params
            .iter()
            .map(|p| ModelWeights::from_params(p.clone(), true))
            .collect(),
    }
}

fn sgd_early_stop(
    train: &Dataset,
    val: &Dataset,
    cfg: &RetrainConfig,
    universe: &GroupUniverse,
    classes: Vec<i8>,
) -> Result<RetrainOutcome> {
    let d = train.dim();
    let shell = to_head(&classes, &[]);
    let heads = if classes.len() == 2 { 1 } else { classes.len() };
    let shell = Head { weights: vec![ModelWeights::zeros(d, true); heads], ..shell };
    let targets = shell.targets(train);
    let cw = cfg.row_weights(train);
    let mut params = vec![vec![0f64; d + 1]; heads];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut grad = vec![0f64; d + 1];
    for epoch in 1..=cfg.epochs {
        Stream::new(cfg.seed, domain::SGD, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for (k, theta) in params.iter_mut().enumerate() {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &i in batch {
                    let x = train.row(i);
                    let z = dot(theta, x);
                    let t = targets[k][i];
                    loss_sum += cw[i] * logistic_loss(z, t);
                    let r = cw[i] * (sigmoid(z) - t) * scale;
                    for (g, &v) in grad.iter_mut().zip(x) {
                        *g += r * v as f64;
                    }
                    grad[d] += r;
                }
                for (th, g) in theta.iter_mut().zip(&grad) {
                    *th -= cfg.learning_rate * g;
                }
                if cfg.l1_strength > 0.0 {
                    soft_threshold(theta, d, cfg.learning_rate * cfg.l1_strength);
                }
            }
        }
        if !loss_sum.is_finite() || params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: loss_sum,
                initial: f64::NAN,
            });
        }
        let acc = to_head(&classes, &params).worst_group_accuracy(val, universe)?;
        history.push(acc);
        if acc > best.0 {
            best = (acc, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(RetrainOutcome {
        head: to_head(&classes, &best.2),
        history,
        best_epoch: best.1,
    })
}

/// Accelerated proximal gradient (FISTA) for weighted l1-penalized logistic
/// regression with an unpenalized bias.
pub fn fit_l1_logistic(
    data: &Dataset,
    rows: &[usize],
    targets: &[f64],
    row_weights: &[f64],
    l1: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let d = data.dim();
    let n = rows.len() as f64;
    let lip = logistic_lipschitz(data, rows, row_weights);
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };
    let mut theta = vec![0f64; d + 1];
    let mut y = theta.clone();
    let mut t = 1.0f64;
    let mut grad = vec![0f64; d + 1];
    for iter in 1..=max_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in rows {
            let x = data.row(i);
            let r = row_weights[i] * (sigmoid(dot(&y, x)) - targets[i]) / n;
            for (g, &v) in grad.iter_mut().zip(x) {
                *g += r * v as f64;
            }
            grad[d] += r;
        }
        let mut next: Vec<f64> = y.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
        soft_threshold(&mut next, d, step * l1);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch: iter,
                loss: f64::NAN,
                initial: f64::NAN,
            });
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        let mut moved = 0f64;
        for j in 0..=d {
            let delta = next[j] - theta[j];
            moved = moved.max(delta.abs());
            y[j] = next[j] + momentum * delta;
        }
        theta = next;
        t = t_next;
        if moved <= tol {
            break;
        }
    }
    Ok(theta)
}

/// Lipschitz constant of the logistic gradient, `lambda_max(X^T C X) / (4 n)`
/// on the bias-augmented rows, by 30 power iterations.
fn logistic_lipschitz(data: &Dataset, rows: &[usize], row_weights: &[f64]) -> f64 {
    let d = data.dim();
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut est = 0.0;
    for _ in 0..30 {
        let mut u = vec![0f64; d + 1];
        for &i in rows {
            let x = data.row(i);
            let xv = row_weights[i] * dot(&v, x);
            for (a, &b) in u.iter_mut().zip(x) {
                *a += xv * b as f64;
            }
            u[d] += xv;
        }
        est = v.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v = u.into_iter().map(|a| a / norm).collect();
    }
    // Power iteration approaches from below; pad slightly.
    1.01 * est / (4.0 * rows.len() as f64)
}

/// Coordinatewise mean of weight vectors, independent of their order.
pub fn average_weights(ws: &[ModelWeights]) -> Result<ModelWeights> {
    let first = ws.first().ok_or(Error::EmptyDataset("no weights to average"))?;
    let mean = |vals: &mut Vec<f64>| {
        vals.sort_unstable_by(f64::total_cmp);
        pairwise_sum(vals) / vals.len() as f64
    };
    let w = (0..first.dim())
        .map(|j| mean(&mut ws.iter().map(|m| m.w[j]).collect()))
        .collect();
    let b = first.b.map(|_| mean(&mut ws.iter().map(|m| m.b.unwrap_or(0.0)).collect()));
    Ok(ModelWeights { w, b })
}

fn l1_averaged(train: &Dataset, cfg: &RetrainConfig, classes: Vec<i8>) -> Result<Head> {
    let d = train.dim();
    let heads = if classes.len() == 2 { 1 } else { classes.len() };
    let shell = Head {
        classes: classes.clone(),
        weights: vec![ModelWeights::zeros(d, true); heads],
    };
    let targets = shell.targets(train);
    let cw = cfg.row_weights(train);
    let n = train.len();
    let size = ((n as f64 * cfg.subset_fraction).round() as usize).clamp(1, n);
    let mut fits: Vec<Vec<ModelWeights>> = vec![Vec::new(); heads];
    for rep in 0..cfg.subset_repeats {
        let mut rows = if size == n {
            (0..n).collect()
        } else {
            Stream::new(cfg.seed, domain::SUBSET, rep as u64).sample_without_replacement(n, size)
        };
        rows.sort_unstable();
        for (k, t) in targets.iter().enumerate() {
            let theta = fit_l1_logistic(train, &rows, t, &cw, cfg.l1_strength, cfg.epochs, cfg.tol)?;
            fits[k].push(ModelWeights::from_params(theta, true));
        }
    }
    let weights = fits.iter().map(|f| average_weights(f)).collect::<Result<_>>()?;
    Ok(Head { classes, weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub s_values: Vec<f64>,
}

impl SweepGrid {
    /// Range used for the toxicity benchmarks.
    pub fn default_grid() -> Self {
        Self {
            alphas: vec![1.0, 0.8, 0.6, 0.4, 0.2],
            s_values: vec![1.0, 0.99, 0.97, 0.95, 0.9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub s: f64,
    pub wg_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Cells in grid order (alpha-major).
    pub table: Vec<SweepCell>,
    pub best: SweepCell,
    pub best_head: Head,
}

/// Mixes, retrains and validates every `(alpha, s)` cell. All cells share
/// `mix_seed` and `cfg.seed`, so an `alpha = 0` cell reproduces the
/// fine-tuning-only fit. Ties in validation accuracy go to the smaller `s`,
/// then the smaller `alpha`.
pub fn sweep(
    d_ft: &Dataset,
    d_bal: &Dataset,
    val: &Dataset,
    grid: &SweepGrid,
    cfg: &RetrainConfig,
    universe: &GroupUniverse,
    mix_seed: u64,
) -> Result<SweepOutcome> {
    if grid.alphas.is_empty() || grid.s_values.is_empty() {
        return Err(Error::param("grid", "alphas and s values must be nonempty"));
    }
    let cells: Vec<(f64, f64)> = grid
        .alphas
        .iter()
        .flat_map(|&a| grid.s_values.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<(SweepCell, Head)> = cells
        .par_iter()
        .map(|&(alpha, s)| {
            let (mixed, _) = mix(d_ft, d_bal, &MixConfig::new(alpha, s, mix_seed))?;
            let out = retrain_head(&mixed, val, cfg, universe)?;
            let wg_acc = out.head.worst_group_accuracy(val, universe)?;
            Ok((SweepCell { alpha, s, wg_acc }, out.head))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (k, (c, _)) in results.iter().enumerate() {
        let b = &results[best].0;
        let better = c.wg_acc > b.wg_acc
            || (c.wg_acc == b.wg_acc && (c.s < b.s || (c.s == b.s && c.alpha < b.alpha)));
        if better {
            best = k;
        }
    }
    let table = results.iter().map(|(c, _)| *c).collect();
    let (best, best_head) = results[best].clone();
    Ok(SweepOutcome {
        table,
        best,
        best_head,
    })
}

/// CSV `alpha,s,wg_acc`.
pub fn write_sweep_csv(table: &[SweepCell], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "alpha,s,wg_acc")?;
    for c in table {
        writeln!(w, "{},{},{}", c.alpha, c.s, c.wg_acc)?;
    }
    w.flush()?;
    Ok(())
}

/// Heat map with one row per alpha and one column per s.
pub fn write_heatmap(table: &[SweepCell], grid: &SweepGrid, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "alpha")?;
    for s in &grid.s_values {
        write!(w, ",{s}")?;
    }
    writeln!(w)?;
    for &a in &grid.alphas {
        write!(w, "{a}")?;
        for &s in &grid.s_values {
            let v = table
                .iter()
                .find(|c| c.alpha == a && c.s == s)
                .map_or(f64::NAN, |c| c.wg_acc);
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
