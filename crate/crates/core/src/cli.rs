//! Command-line front end. Each subcommand loads the run config, creates a
//! run directory, does its work there and prints one JSON line. Failures
//! print one JSON line on stderr and exit 2 (config or usage), 3 (missing
//! artifact) or 1.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::{GeneratorKind, RunConfig, SourceKind};
use crate::corpus::{list_image_folder, shapes, write_image_folder, ImageDataset};
use crate::error::{Error, Result};
use crate::generator::{
    load_generator, train_toy_vae, Generator, GeneratorHandle, LatentBatch, LatentSpec, LinearGaussianMlvgm,
};
use crate::monte_carlo::{estimate_unit_magnitudes, McReport, McRow};
use crate::plot;
use crate::probe::{load_probe, probe_level};
use crate::rundir::{runs_root, RunDir};
use crate::sampling::{default_steps_per_epoch, BatchSpec};
use crate::seed::{self, SeedPolicy};
use crate::sscrl::{
    linear_probe_checkpoint, loader_benchmark, train_encoder, BenchReport, BenchSource, ContinuousBench,
    ContinuousSource, NaiveDiskBench, PackedBench, PairSource, RealSource, SyntheticFixedSource,
};
use crate::views::{apply_plan, plan_from_report, PerturbationPlan, Strategy};

#[derive(Debug, Parser)]
#[command(name = "mlvgm", version, about = "Latent-influence probing and generated-view contrastive training")]
pub struct Cli {
    /// TOML run config; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.framework.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Runs root; defaults to $MLVGM_RUNS_DIR or ./runs.
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// Anchors with per-level and full-plan views.
    Grid,
    /// Loss curves from CSV files.
    Curves,
    /// Benchmark bars from a bench report.
    Bars,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy hierarchical VAE (or build the linear oracle).
    TrainToyGen,
    /// Train perturbation probes, one per level.
    Probe {
        /// 1-based level (unit) to probe; repeatable. All when absent.
        #[arg(long = "level")]
        levels: Vec<usize>,
    },
    /// Monte Carlo magnitude report from probe checkpoints.
    McReport,
    /// Image grid of anchors and their views under the configured plan.
    GenViews,
    /// Contrastive encoder training.
    TrainSscrl,
    /// Linear probe of a trained encoder.
    LinearEval,
    /// Data-source throughput benchmark.
    Bench,
    /// Static figures from earlier runs.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// CSV curves, a bench.json, or (grid) a generator checkpoint.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Horizontal reference line for curves.
        #[arg(long)]
        reference: Option<f64>,
        #[arg(long)]
        title: Option<String>,
    },
    /// Print the config reference with every default.
    Defaults,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainToyGen => "train-toy-gen",
            Command::Probe { .. } => "probe",
            Command::McReport => "mc-report",
            Command::GenViews => "gen-views",
            Command::TrainSscrl => "train-sscrl",
            Command::LinearEval => "linear-eval",
            Command::Bench => "bench",
            Command::Plot { .. } => "plot",
            Command::Defaults => "defaults",
        }
    }
}

/// Result of a successful invocation.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub run_dir: Option<PathBuf>,
    pub summary: Value,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Usage(_) => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

/// One-line JSON error record.
pub fn error_line(e: &Error) -> String {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Config { key, .. } = e {
        v["key"] = json!(key);
    }
    v.to_string()
}

/// Parse `args` (including the program name), run, print, and return the
/// exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line(&Error::Usage(first.to_string())));
            return 2;
        }
    };
    match run(cli) {
        Ok(out) => {
            if let Some(text) = out.summary.as_str() {
                print!("{text}");
            } else {
                println!("{}", json!({ "run_dir": out.run_dir, "summary": out.summary }));
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

/// Everything a subcommand needs.
struct Ctx {
    cfg: RunConfig,
    run: RunDir,
    /// Relative paths in the config file resolve against this.
    base: PathBuf,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    if let Command::Defaults = cli.command {
        return Ok(Outcome { run_dir: None, summary: Value::String(RunConfig::reference()?) });
    }
    let cfg = RunConfig::from_file(cli.config.as_deref(), &cli.set)?;
    let base =
        cli.config.as_deref().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let root = cli.runs_dir.clone().unwrap_or_else(runs_root);
    let run = RunDir::create(&root, cli.command.name())?;
    run.freeze(&cfg)?;
    let ctx = Ctx { cfg, run, base };
    let result = dispatch(&ctx, &cli.command);
    if let Err(e) = &result {
        fs::write(ctx.run.join("error.json"), error_line(e))?;
    }
    ctx.run.seal()?;
    Ok(Outcome { run_dir: Some(ctx.run.path.clone()), summary: result? })
}

fn dispatch(ctx: &Ctx, cmd: &Command) -> Result<Value> {
    match cmd {
        Command::TrainToyGen => train_toy_gen(ctx),
        Command::Probe { levels } => probe(ctx, levels),
        Command::McReport => mc_report(ctx),
        Command::GenViews => gen_views(ctx, None),
        Command::TrainSscrl => train_sscrl(ctx),
        Command::LinearEval => linear_eval(ctx),
        Command::Bench => bench(ctx),
        Command::Plot { kind, inputs, reference, title } => plot_cmd(ctx, *kind, inputs, *reference, title.as_deref()),
        Command::Defaults => unreachable!("handled before a run directory exists"),
    }
}

fn corpus(cfg: &RunConfig) -> Result<(ImageDataset, ImageDataset)> {
    shapes(&cfg.generator.corpus, cfg.generator.corpus_seed)
}

fn generator(ctx: &Ctx, explicit: Option<&Path>) -> Result<GeneratorHandle> {
    let path = explicit
        .map(Path::to_path_buf)
        .or_else(|| ctx.cfg.generator.checkpoint.clone())
        .ok_or_else(|| Error::MissingArtifact("generator.checkpoint is not set; run train-toy-gen first".into()))?;
    load_generator(&path, Default::default())
}

/// Explicit plan, else one derived from a magnitude report, else
/// resample-last.
fn plan(ctx: &Ctx, spec: &LatentSpec) -> Result<PerturbationPlan> {
    let v = &ctx.cfg.views;
    let plan = if let Some(entries) = &v.plan {
        PerturbationPlan::from_entries(entries, &ctx.base, &Device::Cpu)?
    } else if let Some(r) = &v.report {
        plan_from_report(&McReport::read(r)?, spec, v.report_scale, v.report_trunc)?
    } else {
        PerturbationPlan::resample_last(spec)
    };
    plan.validate_for(spec).map_err(|e| Error::Config { key: "views.plan".into(), message: e.to_string() })?;
    Ok(plan)
}

fn train_toy_gen(ctx: &Ctx) -> Result<Value> {
    let g = &ctx.cfg.generator;
    let path = ctx.run.join("generator.json");
    let seed_value = seed::derive(ctx.cfg.seed, "toy-gen", 0);
    match g.kind {
        GeneratorKind::ToyVae => {
            let (train, _) = corpus(&ctx.cfg)?;
            let n = ((train.len() as f64 * g.corpus_fraction).ceil() as usize).clamp(1, train.len());
            let vae = train_toy_vae(&train.slice(0, n), &g.vae, seed_value)?;
            vae.save(&path)?;
            let report = vae.report().cloned();
            if let Some(r) = &report {
                let loss = r.epochs.iter().map(|e| e.loss).collect();
                let mse = r.epochs.iter().map(|e| e.val_mse).collect();
                plot::curves(
                    &[("loss".into(), loss)],
                    "toy VAE training",
                    "loss per item",
                    None,
                    &ctx.run.join("vae-loss.svg"),
                )?;
                plot::curves(
                    &[("val mse".into(), mse)],
                    "toy VAE validation",
                    "mse",
                    None,
                    &ctx.run.join("vae-val.svg"),
                )?;
            }
            let samples = sample_rows(&vae, 4, 8, seed::derive(ctx.cfg.seed, "toy-gen-samples", 0))?;
            plot::image_grid(&samples, &ctx.run.join("samples.png"), 3, 2)?;
            Ok(json!({
                "checkpoint": path,
                "train_items": n,
                "val_mse": report.as_ref().map(|r| r.val_mse),
                "anchors": vae.spec().anchor,
            }))
        }
        GeneratorKind::Linear => {
            let l = &g.linear;
            let gen = LinearGaussianMlvgm::hierarchical(l.latent_dim, &l.scales, l.anchor, l.shape, l.eps, seed_value)?;
            gen.save(&path)?;
            Ok(json!({ "checkpoint": path }))
        }
    }
}

fn sample_rows(gen: &dyn Generator, rows: usize, cols: usize, seed_value: u64) -> Result<Vec<Vec<Tensor>>> {
    let spec = gen.spec();
    let mut rng = seed::rng(seed_value);
    let z = LatentBatch::sample(spec, rows * cols, &mut rng).tensors(spec, &gen.device().device)?;
    let x = gen.decode(&z, seed::derive(seed_value, "noise", 0))?;
    (0..rows).map(|r| (0..cols).map(|c| Ok(x.get(r * cols + c)?)).collect()).collect()
}

fn probe(ctx: &Ctx, levels: &[usize]) -> Result<Value> {
    let gen = generator(ctx, None)?;
    let n = gen.spec().units().len();
    let chosen: Vec<usize> = if levels.is_empty() { (1..=n).collect() } else { levels.to_vec() };
    if let Some(&bad) = chosen.iter().find(|&&l| l == 0 || l > n) {
        return Err(Error::Usage(format!("--level {bad} out of range 1..={n}")));
    }
    let mut rows = Vec::new();
    for l in chosen {
        let res = probe_level(gen.as_ref(), l - 1, &ctx.cfg.probe, seed::derive(ctx.cfg.seed, "probe", l as u64 - 1))?;
        let meta = res.save(&ctx.run.path)?;
        let label = res.unit.label();
        plot::curves(
            &[("InfoNCE".into(), res.losses.clone())],
            &format!("probe, level {label}"),
            "loss",
            Some(res.gamma),
            &ctx.run.join(format!("probe-{label}-curve.svg")),
        )?;
        rows.push(json!({
            "level": label,
            "status": res.status.as_str(),
            "final_loss": res.final_loss,
            "iterations": res.iterations,
            "checkpoint": meta,
        }));
    }
    Ok(json!({ "probes": rows }))
}

/// Probe metadata files named by `mc.probes`: files, or run directories.
fn probe_files(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in &ctx.cfg.mc.probes {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    name.starts_with("probe-") && name.ends_with(".json")
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::MissingArtifact(format!("probe path {}", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::MissingArtifact(
            "no probe checkpoints; run probe and list its run directory in mc.probes".into(),
        ));
    }
    Ok(out)
}

fn mc_report(ctx: &Ctx) -> Result<Value> {
    let files = probe_files(ctx)?;
    let gen = generator(ctx, None)?;
    let spec = gen.spec();
    let mut rows: Vec<(usize, McRow)> = Vec::new();
    for f in files {
        let (ck, net) = load_probe(&f, &Device::Cpu)?;
        let unit = spec.unit(ck.unit_index)?;
        if unit.label() != ck.label {
            return Err(Error::Schema(format!("{}: level {} does not match the generator", f.display(), ck.label)));
        }
        let mc_seed = seed::derive(ctx.cfg.seed, "mc", ck.unit_index as u64);
        let est = estimate_unit_magnitudes(&net, spec, &unit, ctx.cfg.mc.samples, mc_seed, ctx.cfg.mc.norm)?;
        let row =
            McRow { level: ck.label, loss: ck.final_loss, mu: est.mu, sigma: est.sigma, n: est.n, status: ck.status };
        rows.push((ck.unit_index, row));
    }
    rows.sort_by_key(|(i, _)| *i);
    let report = McReport::new(rows.into_iter().map(|(_, r)| r).collect())?;
    if let Some(want) = &ctx.cfg.mc.levels {
        for l in want {
            if !report.rows.iter().any(|r| &r.level == l) {
                return Err(Error::MissingArtifact(format!("no probe checkpoint for level {l}")));
            }
        }
    }
    let (j, _) = report.write(&ctx.run.path)?;
    Ok(json!({ "report": j, "rows": report.rows }))
}

/// Grid rows: anchor, one column per unit perturbed alone, full plan.
fn view_grid(ctx: &Ctx, gen: &dyn Generator) -> Result<(Vec<Vec<Tensor>>, PerturbationPlan)> {
    let spec = gen.spec();
    let full = plan(ctx, spec)?;
    let n = ctx.cfg.views.anchors.max(1);
    let mut rng = seed::rng(seed::derive(ctx.cfg.seed, "gen-views-anchors", 0));
    let z = LatentBatch::sample(spec, n, &mut rng).tensors(spec, &gen.device().device)?;
    let noise = seed::derive(ctx.cfg.seed, "gen-views-noise", 0);
    let perturb = seed::derive(ctx.cfg.seed, "gen-views-perturb", 0);
    let mut columns = vec![gen.decode(&z, noise)?];
    for (i, s) in full.strategies.iter().enumerate() {
        let mut only = vec![Strategy::Fixed; full.strategies.len()];
        only[i] = s.clone();
        columns.push(gen.decode(&apply_plan(spec, &PerturbationPlan::new(only), &z, perturb)?, noise)?);
    }
    columns.push(gen.decode(&apply_plan(spec, &full, &z, perturb)?, noise)?);
    let rows = (0..n).map(|r| columns.iter().map(|c| Ok(c.get(r)?)).collect()).collect::<Result<_>>()?;
    Ok((rows, full))
}

fn gen_views(ctx: &Ctx, explicit: Option<&Path>) -> Result<Value> {
    let gen = generator(ctx, explicit)?;
    let (rows, full) = view_grid(ctx, gen.as_ref())?;
    let out = ctx.run.join("views.png");
    plot::image_grid(&rows, &out, 3, 2)?;
    fs::write(ctx.run.join("plan.txt"), format!("{}\n", full.describe()))?;
    Ok(json!({
        "grid": out,
        "plan": full.describe(),
        "columns": "anchor, each level alone, full plan",
    }))
}

fn train_sscrl(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let fw = &cfg.train.framework;
    let (train, _) = corpus(cfg)?;
    let steps = cfg
        .sampling
        .steps_per_epoch
        .unwrap_or_else(|| default_steps_per_epoch(cfg.sampling.reference_size.unwrap_or(train.len()), fw.batch_size));
    let policy = SeedPolicy::new(seed::derive(cfg.seed, "continuous", 0), cfg.sampling.replica);
    let mut source: Box<dyn PairSource> = match cfg.train.source {
        SourceKind::Real => Box::new(RealSource::new(
            train,
            fw.batch_size,
            cfg.train.real_augment.clone(),
            seed::derive(cfg.seed, "real", 0),
            &Device::Cpu,
        )),
        kind => {
            let gen = generator(ctx, None)?;
            let mut spec = BatchSpec::new(fw.batch_size, plan(ctx, gen.spec())?, steps);
            if !cfg.views.augment.is_identity() {
                spec = spec.with_augment(cfg.views.augment.clone());
            }
            let inner = ContinuousSource::new(gen, spec, policy);
            if kind == SourceKind::SyntheticFixed {
                let batches = if cfg.train.fixed_batches == 0 { steps } else { cfg.train.fixed_batches };
                Box::new(SyntheticFixedSource { inner, batches })
            } else {
                Box::new(inner)
            }
        }
    };
    let rec = train_encoder(source.as_mut(), fw, seed::derive(cfg.seed, "train", 0), &ctx.run.path)?;
    plot::curves(
        &[("loss".into(), rec.losses.clone())],
        "contrastive training",
        "loss",
        None,
        &ctx.run.join("loss-curve.svg"),
    )?;
    Ok(json!({
        "checkpoint": rec.checkpoint,
        "digest": rec.digest,
        "steps_per_epoch": rec.steps_per_epoch,
        "epoch_loss": rec.epoch_loss,
        "source": rec.source,
    }))
}

fn linear_eval(ctx: &Ctx) -> Result<Value> {
    let enc = ctx
        .cfg
        .eval
        .encoder
        .clone()
        .ok_or_else(|| Error::MissingArtifact("eval.encoder is not set; run train-sscrl first".into()))?;
    let (train, test) = corpus(&ctx.cfg)?;
    let acc = linear_probe_checkpoint(
        &enc,
        &train,
        &test,
        &ctx.cfg.eval.linear,
        seed::derive(ctx.cfg.seed, "linear-eval", 0),
    )?;
    let v = json!({ "encoder": enc, "top1": acc.top1, "top5": acc.top5, "train_items": train.len(), "test_items": test.len() });
    fs::write(ctx.run.join("eval.json"), serde_json::to_string_pretty(&v)?)?;
    Ok(v)
}

fn bench(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let gen = generator(ctx, None)?;
    let plan = plan(ctx, gen.spec())?;
    let (train, _) = corpus(cfg)?;
    let disk = ctx.run.join("bench-corpus");
    write_image_folder(&train, &disk, cfg.bench.disk_scale.max(1))?;
    let paths = list_image_folder(&disk)?.0.into_iter().map(|(p, _)| p).collect();
    let aug = cfg.views.augment.clone();
    let s = seed::derive(cfg.seed, "bench", 0);
    let shape = train.shape;
    let mut sources: Vec<Box<dyn BenchSource>> = vec![
        Box::new(ContinuousBench::new(Arc::clone(&gen), plan, aug.clone(), s)),
        Box::new(PackedBench::new(train, aug.clone(), s)),
        Box::new(NaiveDiskBench::new(paths, shape, aug, s)),
    ];
    let report = loader_benchmark(&mut sources, &cfg.bench, s);
    fs::remove_dir_all(&disk)?;
    let report = report?;
    let (j, svg) = report.write(&ctx.run.path)?;
    Ok(json!({ "report": j, "chart": svg, "comparison": compare(&report) }))
}

/// Continuous sampling against the fastest and the naive loader, per batch.
pub fn compare(report: &BenchReport) -> Value {
    let rows: Vec<Value> = report
        .config
        .batch_sizes
        .iter()
        .filter_map(|&b| {
            let cs = report.row("continuous", b)?;
            let fastest = report.fastest(b)?;
            let naive = report.row("naive-disk", b);
            Some(json!({
                "batch_size": b,
                "continuous_s": cs.seconds_per_epoch,
                "fastest": fastest.source,
                "ratio_to_fastest": cs.seconds_per_epoch / fastest.seconds_per_epoch,
                "faster_than_naive": naive.map(|n| cs.seconds_per_epoch < n.seconds_per_epoch),
            }))
        })
        .collect();
    Value::Array(rows)
}

/// Read the `loss` column of a CSV (or the last column without one).
pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = header.iter().position(|h| h.trim() == "loss").unwrap_or(header.len().saturating_sub(1));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Schema(format!("{}: bad row `{l}`", path.display())))
        })
        .collect()
}

fn plot_cmd(
    ctx: &Ctx,
    kind: PlotKind,
    inputs: &[PathBuf],
    reference: Option<f64>,
    title: Option<&str>,
) -> Result<Value> {
    match kind {
        PlotKind::Grid => gen_views(ctx, inputs.first().map(PathBuf::as_path)),
        PlotKind::Curves => {
            if inputs.is_empty() {
                return Err(Error::Usage("plot --kind curves needs at least one --input".into()));
            }
            let series = inputs
                .iter()
                .map(|p| {
                    let name = p.parent().and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned());
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok((name.map(|n| format!("{n}/{stem}")).unwrap_or(stem), read_loss_csv(p)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let out = ctx.run.join("curves.svg");
            plot::curves(&series, title.unwrap_or("loss"), "loss", reference, &out)?;
            Ok(json!({ "figure": out }))
        }
        PlotKind::Bars => {
            let input =
                inputs.first().ok_or_else(|| Error::Usage("plot --kind bars needs --input bench.json".into()))?;
            let report = BenchReport::read(input)?;
            let out = ctx.run.join("bars.svg");
            plot::bench_chart(&report, &out)?;
            Ok(json!({ "figure": out }))
        }
    }
}
