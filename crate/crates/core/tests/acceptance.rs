//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 4 (plan ordering on the toy VAE) and 7 (loader throughput) are
//! reported but do not fail the run; their outcome depends on model quality
//! and machine characteristics at desk scale. All other criteria gate the exit
//! status. `MLVGM_ACCEPTANCE=1,5,6` restricts the run to the listed criteria.

use std::collections::HashSet;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Optimizer;
use mlvgm::corpus::{list_image_folder, shapes, write_image_folder, ShapesConfig};
use mlvgm::generator::{
    ComputeDevice, Generator, ImageShape, LinearGaussianMlvgm, ToyVae, ToyVaeConfig, TruncatedNormalParams,
};
use mlvgm::mi::{infonce_loss, scalar};
use mlvgm::monte_carlo::{estimate_unit_magnitudes, Norm, DEFAULT_SAMPLES};
use mlvgm::nn::{adam, EncoderKind, Params};
use mlvgm::probe::{probe_level, PerturbationNet, ProbeConfig, ProbeStatus};
use mlvgm::sampling::{cs_batch, default_steps_per_epoch, epoch_stream, BatchSpec};
use mlvgm::seed::SeedPolicy;
use mlvgm::sscrl::{
    linear_probe_checkpoint, loader_benchmark, train_encoder, BenchConfig, BenchSource, ContinuousBench,
    ContinuousSource, FrameworkConfig, LinearEvalConfig, NaiveDiskBench, PackedBench,
};
use mlvgm::views::{make_view_batch, PerturbationPlan, PixelAugmentConfig, Strategy};
use mlvgm::Result;
use nalgebra::DMatrix;

/// Report-only criteria.
const NON_GATING: [usize; 2] = [4, 7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn tn(std: f64, trunc: f64) -> TruncatedNormalParams {
    TruncatedNormalParams::new(0.0, std, trunc).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<u32>> {
    t.to_vec2::<f32>().unwrap().into_iter().map(|r| r.into_iter().map(f32::to_bits).collect()).collect()
}

/// Bound chain: ln(2K-1) - InfoNCE <= analytic I(X; X') + 0.1 for encoders of
/// several capacities trained on views of a linear oracle.
fn c1() -> Result<Outcome> {
    const K: usize = 64;
    const TRAIN: usize = 600;
    const EVAL: usize = 40;
    let g = LinearGaussianMlvgm::hierarchical(2, &[2.0, 1.0], tn(1.0, 8.0), ImageShape::new(1, 4, 4), 0.5, 1)?;
    let w = tn(1.0, 8.0);
    let encoders = [(4, 1, 2), (16, 1, 8), (64, 2, 16), (128, 2, 64), (256, 3, 128)];
    let bound_const = ((2 * K - 1) as f64).ln();
    let (mut pass, mut worst, mut lines) = (true, f64::NEG_INFINITY, Vec::new());
    for level in 0..2 {
        let mut s = vec![Strategy::Fixed; 2];
        s[level] = Strategy::Random(w);
        let plan = PerturbationPlan::new(s);
        let analytic = g.analytic_pair_mi(level, &(DMatrix::identity(2, 2) * w.variance()))?;
        for (e, &(hidden, depth, out)) in encoders.iter().enumerate() {
            let params = Params::new(&Device::Cpu);
            let enc = EncoderKind::Mlp { hidden, depth, out }.build((1, 4, 4), params.vb())?;
            params.init(100 + e as u64)?;
            let mut opt = adam(params.vars(), 1e-3, 0.9, 0.999)?;
            for it in 0..TRAIN {
                let v = make_view_batch(&g, &plan, K, (level * 10_000 + it) as u64)?;
                let loss = infonce_loss(&enc.forward_t(&v.anchors, true)?, &enc.forward_t(&v.positives, true)?, 0.1)?;
                opt.backward_step(&loss)?;
            }
            let mut total = 0.0;
            for it in 0..EVAL {
                let v = make_view_batch(&g, &plan, K, (1_000_000 + level * 10_000 + it) as u64)?;
                let loss = infonce_loss(&enc.forward_t(&v.anchors, false)?, &enc.forward_t(&v.positives, false)?, 0.1)?;
                total += scalar(&loss)?;
            }
            let bound = bound_const - total / EVAL as f64;
            worst = worst.max(bound - analytic);
            pass &= bound <= analytic + 0.1;
            lines.push(format!("L{} enc{}: {bound:.3}<={analytic:.3}", level + 1, e + 1));
        }
    }
    outcome(pass, format!("max(bound - analytic) {worst:.3} nats; {}", lines.join(", ")))
}

fn oracle_421() -> Result<LinearGaussianMlvgm> {
    LinearGaussianMlvgm::hierarchical(4, &[4.0, 2.0, 1.0], tn(1.0, 2.0), ImageShape::new(1, 4, 4), 0.5, 0)
}

/// Probed magnitudes increase from coarse to fine with disjoint 95% CIs.
fn c2() -> Result<Outcome> {
    let g = oracle_421()?;
    let cfg = ProbeConfig::default();
    let mut est = Vec::new();
    let mut converged = true;
    for unit in 0..3 {
        let r = probe_level(&g, unit, &cfg, 0)?;
        converged &= r.status == ProbeStatus::Converged;
        let u = g.spec().unit(unit)?;
        est.push(estimate_unit_magnitudes(&r.net, g.spec(), &u, DEFAULT_SAMPLES, 7, Norm::L2)?);
    }
    let ci: Vec<_> = est.iter().map(|e| e.ci95()).collect();
    let ordered = est[0].mu < est[1].mu && est[1].mu < est[2].mu;
    let disjoint = ci[0].1 < ci[1].0 && ci[1].1 < ci[2].0;
    let text: Vec<String> = est
        .iter()
        .zip(&ci)
        .enumerate()
        .map(|(i, (e, c))| format!("mu{} {:.4} [{:.4}, {:.4}]", i + 1, e.mu, c.0, c.1))
        .collect();
    outcome(converged && ordered && disjoint, format!("converged {converged}; {}", text.join(", ")))
}

/// A level with A = 0 ends degenerate with low loss; the others hit gamma.
/// The degenerate level's loss sits at the floor set by observation noise.
fn c3() -> Result<Outcome> {
    let g = LinearGaussianMlvgm::hierarchical(4, &[4.0, 2.0, 0.0], tn(1.0, 2.0), ImageShape::new(1, 4, 4), 0.25, 0)?;
    let cfg = ProbeConfig::default();
    let mut pass = true;
    let mut text = Vec::new();
    for unit in 0..3 {
        let r = probe_level(&g, unit, &cfg, 0)?;
        pass &= if unit == 2 {
            r.status == ProbeStatus::Degenerate && r.final_loss < 0.3
        } else {
            r.status == ProbeStatus::Converged && (r.final_loss - 1.0).abs() <= 0.05
        };
        text.push(format!("L{} {} loss {:.3}", unit + 1, r.status.as_str(), r.final_loss));
    }
    outcome(pass, text.join(", "))
}

/// Median linear-probe top-1 of resample-last against uniform random plans,
/// reduced variant: 20 epochs, 10% corpus, 3 seeds.
fn c4() -> Result<Outcome> {
    let (train, test) = shapes(&ShapesConfig { train: 1_000, test: 1_000, ..Default::default() }, 0)?;
    let vae_cfg = ToyVaeConfig { dims: vec![8, 16, 32], width: 16, epochs: 30, ..Default::default() };
    let g: Arc<dyn Generator> = Arc::new(mlvgm::generator::train_toy_vae(&train, &vae_cfg, 0)?);
    let mut plans = vec![("resample-last".to_string(), PerturbationPlan::resample_last(g.spec()))];
    for s in [0.05, 0.10, 0.15] {
        plans.push((format!("random {s}"), PerturbationPlan::uniform_random(g.spec(), tn(s, 2.0))));
    }
    let batch = 128;
    let fw = FrameworkConfig {
        encoder: EncoderKind::ResNet { width: 8 },
        epochs: 20,
        batch_size: batch,
        ..FrameworkConfig::simsiam()
    };
    let steps = default_steps_per_epoch(train.len(), batch);
    let mut acc = vec![Vec::new(); plans.len()];
    for seed in 0..3u64 {
        for (i, (_, plan)) in plans.iter().enumerate() {
            let spec = BatchSpec::new(batch, plan.clone(), steps).with_augment(PixelAugmentConfig::ml_views(32));
            let mut src = ContinuousSource::new(Arc::clone(&g), spec, SeedPolicy::new(seed, 0));
            let dir = tempfile::tempdir()?;
            let rec = train_encoder(&mut src, &fw, seed, dir.path())?;
            acc[i].push(
                linear_probe_checkpoint(&rec.checkpoint, &train, &test, &LinearEvalConfig::default(), seed)?.top1,
            );
        }
    }
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let med: Vec<f64> = acc.iter().map(|a| median(a)).collect();
    let best_random = med[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let text: Vec<String> = plans.iter().zip(&med).map(|((n, _), m)| format!("{n} {:.2}%", 100.0 * m)).collect();
    outcome(med[0] > best_random, format!("median top-1: {}", text.join(", ")))
}

/// InfoNCE: equal embeddings give ln(2K-1); autodiff matches central differences.
fn c5() -> Result<Outcome> {
    let k = 8;
    let e = Tensor::ones((k, 4), DType::F64, &Device::Cpu)?;
    let exact = scalar(&infonce_loss(&e, &e, 0.1)?)?;
    let err_exact = (exact - ((2 * k - 1) as f64).ln()).abs();

    let mut rng = mlvgm::seed::rng(3);
    let mut draw = |n: usize| -> Vec<f64> {
        use rand_distr::Distribution;
        (0..n).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect()
    };
    let (a0, p0) = (draw(k * 4), draw(k * 4));
    let a = Var::from_vec(a0.clone(), (k, 4), &Device::Cpu)?;
    let p = Tensor::from_vec(p0.clone(), (k, 4), &Device::Cpu)?;
    let grads = infonce_loss(a.as_tensor(), &p, 0.5)?.backward()?;
    let ga = grads.get(a.as_tensor()).expect("anchor gradient").flatten_all()?.to_vec1::<f64>()?;
    let f = |v: &[f64]| -> f64 {
        let t = Tensor::from_vec(v.to_vec(), (k, 4), &Device::Cpu).unwrap();
        scalar(&infonce_loss(&t, &p, 0.5).unwrap()).unwrap()
    };
    let h = 1e-6;
    let mut worst = 0f64;
    for i in 0..a0.len() {
        let (mut hi, mut lo) = (a0.clone(), a0.clone());
        hi[i] += h;
        lo[i] -= h;
        let fd = (f(&hi) - f(&lo)) / (2.0 * h);
        worst = worst.max((ga[i] - fd).abs() / fd.abs().max(1e-3));
    }
    outcome(
        err_exact < 1e-12 && worst < 1e-4,
        format!("|loss - ln(2K-1)| {err_exact:.1e}; max gradient rel. error {worst:.1e}"),
    )
}

/// Continuous sampling determinism, freshness and resume replay.
fn c6() -> Result<Outcome> {
    let g = oracle_421()?;
    let plan = PerturbationPlan::resample_last(g.spec());
    let spec = BatchSpec::new(16, plan, 50);
    let policy = SeedPolicy::new(11, 0);
    let dev = g.device().clone();

    let a = cs_batch(&g, &spec, policy, 123, &dev)?;
    let b = cs_batch(&g, &spec, policy, 123, &dev)?;
    let other = cs_batch(&g, &spec, SeedPolicy::new(11, 1), 123, &dev)?;
    let identical = rows(&a.anchors.flatten_from(1)?) == rows(&b.anchors.flatten_from(1)?)
        && rows(&a.positives.flatten_from(1)?) == rows(&b.positives.flatten_from(1)?);
    let replicas_differ = rows(&a.anchor_latents[0]) != rows(&other.anchor_latents[0]);

    let mut seen = HashSet::new();
    let mut repeats = 0;
    for it in 0..1_000u64 {
        let v = cs_batch(&g, &spec, policy, it, &dev)?;
        let z = Tensor::cat(&v.anchor_latents, 1)?;
        for r in rows(&z) {
            repeats += usize::from(!seen.insert(r));
        }
    }

    let full: Vec<_> = epoch_stream(&g, &spec, policy, 3)?.collect::<Result<_>>()?;
    let resumed: Vec<_> = epoch_stream(&g, &spec, policy, 3)?.starting_at(20).collect::<Result<_>>()?;
    let replay = resumed.len() == full.len() - 20
        && full[20..]
            .iter()
            .zip(&resumed)
            .all(|(x, y)| rows(&x.positives.flatten_from(1).unwrap()) == rows(&y.positives.flatten_from(1).unwrap()));

    outcome(
        identical && replicas_differ && repeats == 0 && replay,
        format!(
            "bit-identical {identical}; replicas differ {replicas_differ}; repeats in {} anchors {repeats}; resume replay {replay}",
            seen.len() + repeats
        ),
    )
}

/// Loader benchmark on the toy VAE.
fn c7() -> Result<Outcome> {
    let shape = ImageShape::new(3, 32, 32);
    let g: Arc<dyn Generator> = Arc::new(ToyVae::new(ToyVaeConfig::default(), shape, ComputeDevice::cpu(0), 0)?);
    let (train, _) = shapes(&ShapesConfig { train: 2_000, test: 10, ..Default::default() }, 0)?;
    let disk = tempfile::tempdir()?;
    write_image_folder(&train, disk.path(), 1)?;
    let paths = list_image_folder(disk.path())?.0.into_iter().map(|(p, _)| p).collect();
    let aug = PixelAugmentConfig::ml_views(32);
    let mut sources: Vec<Box<dyn BenchSource>> = vec![
        Box::new(ContinuousBench::new(Arc::clone(&g), PerturbationPlan::resample_last(g.spec()), aug.clone(), 0)),
        Box::new(PackedBench::new(train, aug.clone(), 0)),
        Box::new(NaiveDiskBench::new(paths, shape, aug, 0)),
    ];
    let cfg = BenchConfig::default();
    let report = loader_benchmark(&mut sources, &cfg, 0)?;
    let mut pass = true;
    let mut text = Vec::new();
    for &b in &cfg.batch_sizes {
        let cs = report.row("continuous", b).expect("continuous row").seconds_per_epoch;
        let fastest = report.fastest(b).expect("rows").seconds_per_epoch;
        let naive = report.row("naive-disk", b).expect("naive row").seconds_per_epoch;
        pass &= cs <= 2.0 * fastest && cs < naive;
        text.push(format!("B={b}: continuous {cs:.2}s, fastest {fastest:.2}s, naive {naive:.2}s"));
    }
    outcome(pass, text.join("; "))
}

/// Monte Carlo over 100k latents per level of the toy generator within 100 s.
fn c8() -> Result<Outcome> {
    let g = ToyVae::new(ToyVaeConfig::default(), ImageShape::new(3, 32, 32), ComputeDevice::cpu(0), 0)?;
    let spec = g.spec();
    let mut worst = 0f64;
    for u in spec.units() {
        let net = PerturbationNet::new(spec.unit_dim(&u), 128, &Device::Cpu)?;
        net.init_identity(u.index as u64)?;
        let t = Instant::now();
        estimate_unit_magnitudes(&net, spec, &u, DEFAULT_SAMPLES, 0, Norm::L2)?;
        worst = worst.max(t.elapsed().as_secs_f64());
    }
    outcome(worst <= 100.0, format!("slowest level {worst:.2}s for {DEFAULT_SAMPLES} latents"))
}

fn main() -> ExitCode {
    let only: Option<HashSet<usize>> =
        std::env::var("MLVGM_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Result<Outcome>); 8] = [
        (1, "bound chain", c1),
        (2, "global-to-local monotonicity", c2),
        (3, "degenerate level", c3),
        (4, "resample-last ordering (reduced)", c4),
        (5, "InfoNCE oracle", c5),
        (6, "continuous sampling determinism", c6),
        (7, "throughput", c7),
        (8, "MC timing", c8),
    ];
    let mut failed = false;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let gating = !NON_GATING.contains(&n);
        failed |= gating && !pass;
        println!(
            "criterion {n} {}: {}{} ({:.0}s) {detail}",
            name,
            if pass { "PASS" } else { "FAIL" },
            if gating { "" } else { " [report-only]" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
