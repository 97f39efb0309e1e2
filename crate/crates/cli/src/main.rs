//! `dispel`: reproducible experiments for balanced-set data mixing.

mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dispel_core::experiments::{figure1, figure2, scenario2, Figure1Config, Figure1Row, Scale, Scenario2Config};
use dispel_core::groupeval::{evaluate_accuracy, evaluate_mse, evaluate_predictions, Decision, GroupUniverse};
use dispel_core::io::{load_embeddings, load_weights, save_dataset, save_weights, Format};
use dispel_core::linmodel::{ridge_solve, ModelWeights, Moments, CORE, SPURIOUS};
use dispel_core::llr::{retrain_head, sweep, write_heatmap, write_sweep_csv, Optimizer, RetrainConfig, SweepGrid};
use dispel_core::mixer::{mix, MixConfig};
use dispel_core::synthdata::{sample_balanced, sample_dataset, DistSpec};
use dispel_core::theory::{eval_wg_loss, grid, Variant};
use dispel_core::{Dataset, GroupId};

use manifest::{displayed, joined, Manifest};

#[derive(Parser)]
#[command(name = "dispel", version, about = "Data mixing against spurious correlations: theory, simulation and retraining harness")]
struct Cli {
    /// Master seed; every command is deterministic given its flags and seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory that relative output paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Dataset output format; inferred from the extension when omitted.
    #[arg(long, global = true)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset.
    Gen(GenArgs),
    /// Mix a fine-tuning set with a balanced set.
    Mix(MixArgs),
    /// Fit ridge regression.
    Ridge(RidgeArgs),
    /// Per-group evaluation of a linear model.
    Eval(EvalArgs),
    /// Closed-form worst-group loss over a (p, s) grid.
    Theory(TheoryArgs),
    /// Monte Carlo worst-group loss over a (p, s) grid.
    Simulate(SimulateArgs),
    /// Closed form and simulation side by side.
    Figure1(Figure1Args),
    /// Decomposition of fitted weights across s.
    Figure2(Figure2Args),
    /// Fine-tuning without the spurious attribute, with and without mixing.
    Scenario2(Scenario2Args),
    /// Retrain a linear head on mixed embeddings.
    Retrain(RetrainArgs),
    /// Retrain over an (alpha, s) grid and keep the best head.
    Sweep(SweepArgs),
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

fn nonnegative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} is not a finite nonnegative number"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = nonnegative(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("must be positive".into())
    }
}

/// `start:stop:step`.
fn grid_spec(s: &str) -> Result<String, String> {
    parse_grid(s).map(|_| s.to_string())
}

fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("`{s}` is not start:stop:step"));
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    let (a, b, c) = (num(a)?, num(b)?, num(c)?);
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
        return Err(format!("`{s}` leaves [0, 1]"));
    }
    grid(a, b, c).map_err(|e| e.to_string())
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Probability that the spurious attribute agrees with the label.
    #[arg(long, value_parser = probability)]
    mu: f64,
    #[arg(long, default_value_t = 0.5, value_parser = nonnegative)]
    sigma1: f64,
    #[arg(long, default_value_t = 0.0, value_parser = nonnegative)]
    sigma2: f64,
    #[arg(long, default_value_t = 1.0, value_parser = nonnegative)]
    sigma_xi: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Zero the spurious coordinate.
    #[arg(long)]
    no_spurious: bool,
    /// Equal counts per group instead of i.i.d. rows.
    #[arg(long)]
    balanced: bool,
    #[arg(long, default_value = "data.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct MixArgs {
    #[arg(long)]
    ft: PathBuf,
    #[arg(long)]
    bal: PathBuf,
    #[arg(long, value_parser = probability)]
    alpha: f64,
    #[arg(long, value_parser = probability)]
    s: f64,
    #[arg(long, default_value = "mixed.csv")]
    out: PathBuf,
    /// Per-row CSV of mixing decisions.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct RidgeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.1, value_parser = nonnegative)]
    lambda: f64,
    /// Fit an unpenalized bias.
    #[arg(long)]
    bias: bool,
    #[arg(long, default_value = "weights.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Acc,
    Mse,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Groups (`a|y`) the worst-group reduction considers.
    #[arg(long, value_delimiter = ',')]
    #[serde(serialize_with = "joined")]
    restrict: Vec<GroupId>,
    #[arg(long, value_enum, default_value_t = MetricArg::Acc)]
    metric: MetricArg,
    /// Decision threshold for accuracy.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 0.5, value_parser = nonnegative)]
    sigma1: f64,
    /// Tail noise variance over the balanced-set size, held fixed.
    #[arg(long, default_value_t = 4.0, value_parser = positive)]
    r: f64,
    #[arg(long, default_value_t = 0.25, value_parser = positive)]
    lambda: f64,
}

#[derive(Args, Serialize)]
struct TheoryArgs {
    #[arg(long, value_delimiter = ',', required = true, value_parser = probability)]
    #[serde(serialize_with = "joined")]
    p: Vec<f64>,
    #[arg(long, default_value = "0:1:0.1", value_parser = grid_spec)]
    s_grid: String,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = Variant::default())]
    #[serde(serialize_with = "displayed")]
    variant: Variant,
    #[arg(long, default_value = "theory.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SizeArgs {
    #[arg(long, default_value_t = 24_000)]
    n: usize,
    #[arg(long, default_value_t = 1_600)]
    d: usize,
    /// Balanced-set size.
    #[arg(long, default_value_t = 64)]
    m: usize,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long, value_delimiter = ',', required = true, value_parser = probability)]
    #[serde(serialize_with = "joined")]
    p: Vec<f64>,
    #[arg(long, default_value = "0:1:0.1", value_parser = grid_spec)]
    s_grid: String,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    size: SizeArgs,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value = "sim.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct Figure1Args {
    #[arg(long, default_value_t = Scale::Desk)]
    #[serde(serialize_with = "displayed")]
    scale: Scale,
    /// Overrides the preset p values.
    #[arg(long, value_delimiter = ',', value_parser = probability)]
    #[serde(serialize_with = "joined")]
    p: Vec<f64>,
    #[arg(long, value_parser = grid_spec)]
    s_grid: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, default_value_t = Variant::default())]
    #[serde(serialize_with = "displayed")]
    variant: Variant,
}

#[derive(Args, Serialize)]
struct Figure2Args {
    #[arg(long, default_value_t = 0.9, value_parser = probability)]
    p: f64,
    #[arg(long, default_value = "0:1:0.1", value_parser = grid_spec)]
    s_grid: String,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    size: SizeArgs,
    #[arg(long, default_value = "fig2.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct Scenario2Args {
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    /// Single-group set size.
    #[arg(long, default_value_t = 10_000)]
    m: usize,
    #[arg(long, default_value_t = 0.01, value_parser = nonnegative)]
    sigma1: f64,
    /// Spurious-coordinate noise of the single-group set.
    #[arg(long, default_value_t = 2.0, value_parser = nonnegative)]
    sigma2_bal: f64,
    /// Initial spurious weight.
    #[arg(long, default_value_t = 1.0)]
    w0: f64,
    /// Initial core weight.
    #[arg(long, default_value_t = 1.0)]
    w0_core: f64,
    #[arg(long, default_value_t = 2_000)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0, value_parser = probability)]
    alpha: f64,
    #[arg(long, default_value_t = 0.3, value_parser = probability)]
    s: f64,
    /// Fixed step size; derived from the curvature when omitted.
    #[arg(long, value_parser = positive)]
    step: Option<f64>,
    #[arg(long, default_value = "alignment.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OptimizerArg {
    Sgd,
    L1avg,
}

#[derive(Args, Serialize)]
struct HeadArgs {
    #[arg(long)]
    ft: PathBuf,
    #[arg(long)]
    bal: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, value_enum, default_value_t = OptimizerArg::L1avg)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.1, value_parser = positive)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3, value_parser = nonnegative)]
    l1: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Groups (`a|y`) the worst-group selection considers.
    #[arg(long, value_delimiter = ',')]
    #[serde(serialize_with = "joined")]
    restrict: Vec<GroupId>,
}

impl HeadArgs {
    fn config(&self, seed: u64) -> RetrainConfig {
        RetrainConfig {
            optimizer: match self.optimizer {
                OptimizerArg::Sgd => Optimizer::SgdEarlyStop,
                OptimizerArg::L1avg => Optimizer::L1Averaged,
            },
            learning_rate: self.lr,
            l1_strength: self.l1,
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            subset_repeats: self.repeats,
            seed,
            ..RetrainConfig::default()
        }
    }
}

#[derive(Args, Serialize)]
struct RetrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    head: HeadArgs,
    #[arg(long, default_value_t = 1.0, value_parser = probability)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5, value_parser = probability)]
    s: f64,
    #[arg(long, default_value = "weights.csv")]
    out: PathBuf,
    /// Per-group validation accuracy of the retrained head.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    head: HeadArgs,
    #[arg(long, value_delimiter = ',', value_parser = probability, default_values_t = SweepGrid::default_grid().alphas)]
    #[serde(serialize_with = "joined")]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = probability, default_values_t = SweepGrid::default_grid().s_values)]
    #[serde(serialize_with = "joined")]
    s_values: Vec<f64>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    #[arg(long, default_value = "best_weights.csv")]
    best_weights: PathBuf,
    /// Alpha-by-s table of validation worst-group accuracy.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

struct Ctx {
    seed: u64,
    out_dir: PathBuf,
    format: Option<Format>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn manifest(&self, command: &'static str, params: &impl Serialize) -> Result<Manifest> {
        Manifest::new(command, params, self.seed, self.format.map(|f| f.to_string()))
    }

    fn save(&self, data: &Dataset, path: &Path) -> Result<()> {
        let format = self.format.unwrap_or_else(|| Format::from_path(path));
        save_dataset(data, path, format).with_context(|| format!("writing {}", path.display()))
    }
}

fn load(path: &Path) -> Result<Dataset> {
    Format::detect(path)
        .and_then(|f| load_embeddings(path, f))
        .with_context(|| format!("loading {}", path.display()))
}

fn universe(data: &Dataset, restrict: &[GroupId]) -> Result<GroupUniverse> {
    let u = GroupUniverse::from_dataset(data);
    Ok(if restrict.is_empty() {
        u
    } else {
        u.with_restriction(restrict.iter().copied())?
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

fn cmd_gen(ctx: &Ctx, args: &GenArgs) -> Result<()> {
    let mut spec = DistSpec::new(args.mu, args.sigma1, args.sigma2, args.sigma_xi, args.d);
    if args.no_spurious {
        spec = spec.without_spurious();
    }
    let m = ctx.manifest("gen", args)?;
    let data = if args.balanced {
        sample_balanced(&spec, args.n, ctx.seed)?
    } else {
        sample_dataset(&spec, args.n, ctx.seed)?
    };
    let out = ctx.path(&args.out);
    ctx.save(&data, &out)?;
    m.write(&out, std::slice::from_ref(&out), false)?;
    Ok(())
}

fn cmd_mix(ctx: &Ctx, args: &MixArgs) -> Result<()> {
    let m = ctx.manifest("mix", args)?;
    let (ft, bal) = (load(&args.ft)?, load(&args.bal)?);
    let (mixed, trace) = mix(&ft, &bal, &MixConfig::new(args.alpha, args.s, ctx.seed))?;
    let out = ctx.path(&args.out);
    ctx.save(&mixed, &out)?;
    let mut outputs = vec![out.clone()];
    if let Some(t) = &args.trace {
        let t = ctx.path(t);
        trace.write_csv(&t)?;
        outputs.push(t);
    }
    m.write(&out, &outputs, false)?;
    Ok(())
}

fn cmd_ridge(ctx: &Ctx, args: &RidgeArgs) -> Result<()> {
    let m = ctx.manifest("ridge", args)?;
    let data = load(&args.data)?;
    let w = ridge_solve(&Moments::from_dataset(&data, args.bias)?, args.lambda)?;
    let out = ctx.path(&args.out);
    save_weights(&[w], &out)?;
    m.write(&out, std::slice::from_ref(&out), false)?;
    Ok(())
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let m = ctx.manifest("eval", args)?;
    let heads = load_weights(&args.weights)?;
    let [w] = heads.as_slice() else {
        bail!("{}: expected one weight row, found {}", args.weights.display(), heads.len());
    };
    let data = load(&args.data)?;
    let u = universe(&data, &args.restrict)?;
    let report = match args.metric {
        MetricArg::Acc => evaluate_accuracy(w, &data, &u, Decision::Threshold(args.threshold))?,
        MetricArg::Mse => evaluate_mse(w, &data, &u)?,
    };
    let out = ctx.path(&args.out);
    report.write_csv(&out)?;
    m.write(&out, std::slice::from_ref(&out), false)?;
    Ok(())
}

fn figure1_config(args: &ModelArgs, ps: &[f64], s_grid: &str, size: &SizeArgs, runs: usize, seed: u64) -> Figure1Config {
    Figure1Config {
        ps: ps.to_vec(),
        s_grid: parse_grid(s_grid).expect("validated by the parser"),
        sigma1: args.sigma1,
        r: args.r,
        lambda: args.lambda,
        n: size.n,
        d: size.d,
        m: size.m,
        runs,
        seed,
        variant: Variant::default(),
    }
}

fn cmd_theory(ctx: &Ctx, args: &TheoryArgs) -> Result<()> {
    let m = ctx.manifest("theory", args)?;
    let s_grid = parse_grid(&args.s_grid).expect("validated by the parser");
    let out = ctx.path(&args.out);
    let mut w = create(&out)?;
    writeln!(w, "p,s,loss")?;
    for &p in &args.p {
        for &s in &s_grid {
            let params = dispel_core::theory::TheoryParams {
                p,
                s,
                r: args.model.r,
                sigma1: args.model.sigma1,
                lambda: args.model.lambda,
            };
            writeln!(w, "{p},{s},{}", eval_wg_loss(&params, args.variant)?)?;
        }
    }
    w.flush()?;
    drop(w);
    m.write(&out, std::slice::from_ref(&out), false)?;
    Ok(())
}

fn cmd_simulate(ctx: &Ctx, args: &SimulateArgs) -> Result<()> {
    let m = ctx.manifest("simulate", args)?;
    let cfg = figure1_config(&args.model, &args.p, &args.s_grid, &args.size, args.runs, ctx.seed);
    let out = ctx.path(&args.out);
    let mut w = create(&out)?;
    writeln!(w, "p,s,mean,stderr,runs")?;
    for &p in &cfg.ps {
        let sim = cfg.sim(p);
        let pts = dispel_core::theory::simulate_wg_curve(&sim, &cfg.s_grid)?;
        for (&s, pt) in cfg.s_grid.iter().zip(pts) {
            writeln!(w, "{p},{s},{},{},{}", pt.mean, pt.stderr, sim.runs)?;
        }
    }
    w.flush()?;
    drop(w);
    m.write(&out, std::slice::from_ref(&out), false)?;
    Ok(())
}

fn write_figure1(dir: &Path, rows: &[Figure1Row]) -> Result<Vec<PathBuf>> {
    let paths = ["theory.csv", "sim.csv", "fig1.csv"].map(|n| dir.join(n));
    let mut theory = create(&paths[0])?;
    let mut sim = create(&paths[1])?;
    let mut both = create(&paths[2])?;
    writeln!(theory, "p,s,loss")?;
    writeln!(sim, "p,s,mean,stderr")?;
    writeln!(both, "p,s,theory,sim_mean,sim_stderr")?;
    for r in rows {
        writeln!(theory, "{},{},{}", r.p, r.s, r.theory)?;
        writeln!(sim, "{},{},{},{}", r.p, r.s, r.sim_mean, r.sim_stderr)?;
        writeln!(both, "{},{},{},{},{}", r.p, r.s, r.theory, r.sim_mean, r.sim_stderr)?;
    }
    for mut f in [theory, sim, both] {
        f.flush()?;
    }
    Ok(paths.to_vec())
}

fn cmd_figure1(ctx: &Ctx, args: &Figure1Args) -> Result<()> {
    let m = ctx.manifest("figure1", args)?;
    let preset = Figure1Config::preset(args.scale);
    let cfg = Figure1Config {
        ps: if args.p.is_empty() { preset.ps.clone() } else { args.p.clone() },
        s_grid: match &args.s_grid {
            Some(g) => parse_grid(g).expect("validated by the parser"),
            None => preset.s_grid.clone(),
        },
        n: args.n.unwrap_or(preset.n),
        d: args.d.unwrap_or(preset.d),
        m: args.m.unwrap_or(preset.m),
        runs: args.runs.unwrap_or(preset.runs),
        seed: ctx.seed,
        variant: args.variant,
        ..preset
    };
    let primary = ctx.out_dir.join("fig1.csv");
    let mut flush_err = None;
    // Rewrite the outputs after every p so an interrupted run leaves a
    // consistent prefix behind a partial manifest.
    let rows = figure1(&cfg, |rows| {
        if flush_err.is_none() {
            if let Err(e) = write_figure1(&ctx.out_dir, rows).and_then(|paths| m.write(&primary, &paths, true)) {
                flush_err = Some(e);
            }
        }
    })?;
    if let Some(e) = flush_err {
        return Err(e);
    }
    let paths = write_figure1(&ctx.out_dir, &rows)?;
    m.write(&primary, &paths, false)?;
    Ok(())
}

fn cmd_figure2(ctx: &Ctx, args: &Figure2Args) -> Result<()> {
    let m = ctx.manifest("figure2", args)?;
    let cfg = figure1_config(&args.model, &[args.p], &args.s_grid, &args.size, 1, ctx.seed);
    let rows = figure2(&cfg.sim(args.p), &cfg.s_grid)?;
    let out = ctx.path(&args.out);
    let mut w = create(&out)?;
    writeln!(w, "s,core1,core2,noise_norm")?;
    for r in &rows {
        writeln!(w, "{},{},{},{}", r.s, r.core1, r.core2, r.noise_norm)?;
    }
    w.flush()?;
    drop(w);
    m.write(&out, std::slice::from_ref(&out), false)?;
    Ok(())
}

fn cmd_scenario2(ctx: &Ctx, args: &Scenario2Args) -> Result<()> {
    let m = ctx.manifest("scenario2", args)?;
    let mut init = ModelWeights::zeros(2, true);
    init.w[CORE] = args.w0_core;
    init.w[SPURIOUS] = args.w0;
    let cfg = Scenario2Config {
        n: args.n,
        m: args.m,
        sigma1: args.sigma1,
        sigma2_bal: args.sigma2_bal,
        init,
        epochs: args.epochs,
        alpha: args.alpha,
        s: args.s,
        step_size: args.step,
        seed: ctx.seed,
    };
    let outcome = scenario2(&cfg)?;
    let out = ctx.path(&args.out);
    let mut w = create(&out)?;
    writeln!(w, "epoch,unmixed_w2,mixed_w2")?;
    for (epoch, u, mx) in outcome.alignment_rows() {
        writeln!(w, "{epoch},{u},{mx}")?;
    }
    w.flush()?;
    drop(w);
    m.write(&out, std::slice::from_ref(&out), false)?;
    Ok(())
}

fn cmd_retrain(ctx: &Ctx, args: &RetrainArgs) -> Result<()> {
    let m = ctx.manifest("retrain", args)?;
    let h = &args.head;
    let (ft, bal, val) = (load(&h.ft)?, load(&h.bal)?, load(&h.val)?);
    let u = universe(&val, &h.restrict)?;
    let (mixed, _) = mix(&ft, &bal, &MixConfig::new(args.alpha, args.s, ctx.seed))?;
    let outcome = retrain_head(&mixed, &val, &h.config(ctx.seed), &u)?;
    let out = ctx.path(&args.out);
    save_weights(&outcome.head.weights, &out)?;
    let mut outputs = vec![out.clone()];
    if let Some(r) = &args.report {
        let r = ctx.path(r);
        evaluate_predictions(&outcome.head.predict_all(&val), &val, &u)?.write_csv(&r)?;
        outputs.push(r);
    }
    m.write(&out, &outputs, false)?;
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let m = ctx.manifest("sweep", args)?;
    let h = &args.head;
    let (ft, bal, val) = (load(&h.ft)?, load(&h.bal)?, load(&h.val)?);
    let u = universe(&val, &h.restrict)?;
    let grid = SweepGrid {
        alphas: args.alphas.clone(),
        s_values: args.s_values.clone(),
    };
    let outcome = sweep(&ft, &bal, &val, &grid, &h.config(ctx.seed), &u, ctx.seed)?;
    let out = ctx.path(&args.out);
    write_sweep_csv(&outcome.table, &out)?;
    let best = ctx.path(&args.best_weights);
    save_weights(&outcome.best_head.weights, &best)?;
    let mut outputs = vec![out.clone(), best];
    if let Some(p) = &args.heatmap {
        let p = ctx.path(p);
        write_heatmap(&outcome.table, &grid, &p)?;
        outputs.push(p);
    }
    m.write(&out, &outputs, false)?;
    eprintln!(
        "best alpha={} s={} worst-group val acc={}",
        outcome.best.alpha, outcome.best.s, outcome.best.wg_acc
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir,
        format: cli.format,
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Mix(a) => cmd_mix(&ctx, a),
        Command::Ridge(a) => cmd_ridge(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Theory(a) => cmd_theory(&ctx, a),
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Figure1(a) => cmd_figure1(&ctx, a),
        Command::Figure2(a) => cmd_figure2(&ctx, a),
        Command::Scenario2(a) => cmd_scenario2(&ctx, a),
        Command::Retrain(a) => cmd_retrain(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DISPEL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().with_context(|| format!("DISPEL_THREADS=`{raw}` is not a count"))?;
    if n == 0 {
        bail!("DISPEL_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// 3 for invalid inputs, 4 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<dispel_core::Error>() {
        Some(err) if err.is_numerical() => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
