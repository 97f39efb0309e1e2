//! End-to-end experiments shared by the CLI and the acceptance suite.

use crate::dataset::{Dataset, GroupId};
use crate::error::{Error, Result};
use crate::groupeval::GroupUniverse;
use crate::linmodel::{decompose, gd_finetune, GdConfig, GdOutcome, ModelWeights, SPURIOUS};
use crate::llr::{build_balanced_split, retrain_head, sweep, PerGroup, RetrainConfig, SweepCell, SweepGrid};
use crate::mixer::{mix, MixConfig};
use crate::rng::{child_seed, domain};
use crate::synthdata::{sample_balanced, sample_dataset, sample_single_group, DistSpec};
use crate::theory::{eval_wg_loss, grid, simulate_run_weights, simulate_wg_curve, SimConfig, TheoryParams, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// n = 24000, d = 1600, m = 64.
    Desk,
    /// n = 120000, d = 8000, m = 128.
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(format!("unknown scale `{other}` (expected desk or paper)")),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure1Config {
    pub ps: Vec<f64>,
    pub s_grid: Vec<f64>,
    pub sigma1: f64,
    pub r: f64,
    pub lambda: f64,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub runs: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Figure1Config {
    pub fn preset(scale: Scale) -> Self {
        let (n, d, m) = match scale {
            Scale::Desk => (24_000, 1_600, 64),
            Scale::Paper => (120_000, 8_000, 128),
        };
        Self {
            ps: vec![0.7, 0.8, 0.9, 0.95],
            s_grid: grid(0.0, 1.0, 0.1).expect("static grid"),
            sigma1: 0.5,
            r: 4.0,
            lambda: 0.25,
            n,
            d,
            m,
            runs: 20,
            seed: 0,
            variant: Variant::default(),
        }
    }

    pub fn sim(&self, p: f64) -> SimConfig {
        SimConfig {
            p,
            sigma1: self.sigma1,
            lambda: self.lambda,
            r: self.r,
            n: self.n,
            d: self.d,
            m: self.m,
            runs: self.runs,
            seed: child_seed(self.seed, domain::RUN, p.to_bits()),
        }
    }

    pub fn theory(&self, p: f64, s: f64) -> TheoryParams {
        TheoryParams {
            p,
            s,
            r: self.r,
            sigma1: self.sigma1,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Figure1Row {
    pub p: f64,
    pub s: f64,
    pub theory: f64,
    pub sim_mean: f64,
    pub sim_stderr: f64,
}

/// Closed form and simulation over the `(p, s)` grid. `on_p` is called after
/// each `p` with the rows so far, so callers can flush partial results.
pub fn figure1(cfg: &Figure1Config, mut on_p: impl FnMut(&[Figure1Row])) -> Result<Vec<Figure1Row>> {
    let mut rows = Vec::new();
    for &p in &cfg.ps {
        let sim = simulate_wg_curve(&cfg.sim(p), &cfg.s_grid)?;
        for (&s, pt) in cfg.s_grid.iter().zip(sim) {
            rows.push(Figure1Row {
                p,
                s,
                theory: eval_wg_loss(&cfg.theory(p, s), cfg.variant)?,
                sim_mean: pt.mean,
                sim_stderr: pt.stderr,
            });
        }
        on_p(&rows);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Figure2Row {
    pub s: f64,
    pub core1: f64,
    pub core2: f64,
    pub noise_norm: f64,
    pub full_norm: f64,
}

impl Figure2Row {
    pub fn noise_fraction(&self) -> f64 {
        if self.full_norm == 0.0 {
            0.0
        } else {
            self.noise_norm / self.full_norm
        }
    }
}

/// Decomposition of the fitted weights of one simulation run across `s`.
pub fn figure2(sim: &SimConfig, s_grid: &[f64]) -> Result<Vec<Figure2Row>> {
    let ws = simulate_run_weights(sim, 0, s_grid)?;
    s_grid
        .iter()
        .zip(&ws)
        .map(|(&s, w)| {
            let dec = decompose(w)?;
            Ok(Figure2Row {
                s,
                core1: dec.core_spur[0],
                core2: dec.core_spur[1],
                noise_norm: dec.noise_norm,
                full_norm: dec.full_norm,
            })
        })
        .collect()
}

/// Fine-tuning a model that already uses the spurious coordinate, on data
/// without the attribute, with and without mixing in a single-group set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario2Config {
    pub n: usize,
    pub m: usize,
    pub sigma1: f64,
    /// Spurious-coordinate noise in the single-group set. At 0 the mixed
    /// spurious coordinate is the constant `s` and cannot be separated from
    /// the bias.
    pub sigma2_bal: f64,
    pub init: ModelWeights,
    pub epochs: usize,
    pub alpha: f64,
    pub s: f64,
    pub step_size: Option<f64>,
    pub seed: u64,
}

impl Default for Scenario2Config {
    fn default() -> Self {
        Self {
            n: 1_000_000,
            m: 10_000,
            sigma1: 0.01,
            sigma2_bal: 2.0,
            init: ModelWeights {
                w: vec![1.0, 1.0],
                b: Some(0.0),
            },
            epochs: 2_000,
            alpha: 1.0,
            s: 0.3,
            step_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario2Outcome {
    pub unmixed: GdOutcome,
    pub mixed: GdOutcome,
}

impl Scenario2Outcome {
    /// `(epoch, unmixed w2, mixed w2)` for every recorded epoch.
    pub fn alignment_rows(&self) -> Vec<(usize, f64, f64)> {
        self.unmixed
            .trajectory
            .iter()
            .zip(&self.mixed.trajectory)
            .map(|((e, u), (_, m))| (*e, u.w[SPURIOUS], m.w[SPURIOUS]))
            .collect()
    }
}

/// The two-dimensional datasets of the scenario: `(fine-tuning, single-group)`.
pub fn scenario2_data(cfg: &Scenario2Config) -> Result<(Dataset, Dataset)> {
    let ft_spec = DistSpec::new(0.5, cfg.sigma1, 0.0, 0.0, 3).without_spurious();
    let bal_spec = DistSpec::new(0.5, cfg.sigma1, cfg.sigma2_bal, 0.0, 3);
    let ft = sample_dataset(&ft_spec, cfg.n, child_seed(cfg.seed, domain::DATA_ROW, 0))?;
    let bal = sample_single_group(&bal_spec, 1, 1, cfg.m, child_seed(cfg.seed, domain::SINGLE_GROUP_ROW, 0))?;
    Ok((ft.leading_columns(2)?, bal.leading_columns(2)?))
}

pub fn scenario2(cfg: &Scenario2Config) -> Result<Scenario2Outcome> {
    if cfg.init.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: cfg.init.dim(),
        });
    }
    let (ft, bal) = scenario2_data(cfg)?;
    let (mixed, _) = mix(&ft, &bal, &MixConfig::new(cfg.alpha, cfg.s, child_seed(cfg.seed, domain::MIX_ROW, 0)))?;
    let gd = GdConfig {
        step_size: cfg.step_size,
        record_every: 1,
        ..GdConfig::new(cfg.init.clone(), cfg.epochs)
    };
    Ok(Scenario2Outcome {
        unmixed: gd_finetune(&ft, &gd)?,
        mixed: gd_finetune(&mixed, &gd)?,
    })
}

/// A group removed from the fine-tuning set, with the balanced set drawn
/// from a single group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingGroup {
    pub removed: GroupId,
    pub bal_group: GroupId,
    pub bal_size: usize,
}

/// Synthetic embedding benchmark for the retraining pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub spec: DistSpec,
    pub n_ft: usize,
    /// Balanced-set rows per group.
    pub l: usize,
    /// Size of the group-balanced pool the balanced set is drawn from.
    pub pool: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub missing: Option<MissingGroup>,
    pub grid: SweepGrid,
    pub retrain: RetrainConfig,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn planted(seed: u64) -> Self {
        Self {
            spec: DistSpec::new(0.95, 0.7, 0.1, 12.0, 64),
            n_ft: 2000,
            l: 10,
            pool: 800,
            n_val: 400,
            n_test: 4000,
            missing: None,
            grid: SweepGrid {
                alphas: vec![1.0, 0.8, 0.6, 0.4, 0.2],
                s_values: vec![0.9, 0.7, 0.5, 0.3, 0.1],
            },
            retrain: RetrainConfig::default(),
            seed,
        }
    }

    pub fn missing_group(seed: u64) -> Self {
        Self {
            missing: Some(MissingGroup {
                removed: GroupId::new(1, -1),
                bal_group: GroupId::new(1, 1),
                bal_size: 100,
            }),
            grid: SweepGrid {
                alphas: vec![0.4, 0.3, 0.2, 0.1, 0.05],
                s_values: vec![0.5, 0.4, 0.3, 0.2, 0.1],
            },
            ..Self::planted(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutcome {
    /// Test worst-group accuracy of each arm.
    pub ft_only: f64,
    pub bal_only: f64,
    pub dispel: f64,
    /// The validation-selected sweep cell.
    pub best: SweepCell,
    pub table: Vec<SweepCell>,
}

pub fn benchmark_data(cfg: &BenchmarkConfig) -> Result<[Dataset; 4]> {
    let seed = |k: u64| child_seed(cfg.seed, domain::BENCHMARK, k);
    let mut ft = sample_dataset(&cfg.spec, cfg.n_ft, seed(0))?;
    let pool = sample_balanced(&cfg.spec, cfg.pool, seed(1))?;
    let val = sample_balanced(&cfg.spec, cfg.n_val, seed(2))?;
    let test = sample_balanced(&cfg.spec, cfg.n_test, seed(3))?;
    let bal = match cfg.missing {
        None => build_balanced_split(&pool, PerGroup::Count(cfg.l), seed(4), None)?,
        Some(mg) => {
            let keep: Vec<usize> = (0..ft.len()).filter(|&i| ft.group(i) != mg.removed).collect();
            ft = ft.select(&keep)?;
            build_balanced_split(&pool, PerGroup::Count(mg.bal_size), seed(4), Some(&[mg.bal_group]))?
        }
    };
    Ok([ft, bal, val, test])
}

/// Runs the fine-tuning-only, balanced-only and swept mixing arms under
/// shared seeds and reports test worst-group accuracy.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkOutcome> {
    let [ft, bal, val, test] = benchmark_data(cfg)?;
    let universe = GroupUniverse::new(cfg.spec.groups());
    let ft_only = retrain_head(&ft, &val, &cfg.retrain, &universe)?
        .head
        .worst_group_accuracy(&test, &universe)?;
    let bal_only = retrain_head(&bal, &val, &cfg.retrain, &universe)?
        .head
        .worst_group_accuracy(&test, &universe)?;
    let mix_seed = child_seed(cfg.seed, domain::BENCHMARK, 5);
    let swept = sweep(&ft, &bal, &val, &cfg.grid, &cfg.retrain, &universe, mix_seed)?;
    Ok(BenchmarkOutcome {
        ft_only,
        bal_only,
        dispel: swept.best_head.worst_group_accuracy(&test, &universe)?,
        best: swept.best,
        table: swept.table,
    })
}

/// Median of a nonempty slice.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}
