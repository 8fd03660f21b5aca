//! Independent oracles: numerical integration for truncated-normal moments,
//! a k-nearest-neighbour MI estimator for the Gaussian closed forms, and
//! data-processing monotonicity of the analytic pair MI.

use mlvgm::generator::{gaussian_mi_from_covariances, ImageShape, LinearGaussianMlvgm, TruncatedNormalParams};
use mlvgm::seed;
use mlvgm::views::{make_view_batch, PerturbationPlan, Strategy};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::digamma;

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn truncated_variance_matches_quadrature() {
    for (std, trunc) in [(1.0, 2.0), (0.3, 0.5), (2.5, 1.0), (1.0, 8.0), (0.1, 0.05)] {
        let p = TruncatedNormalParams::new(0.0, std, trunc).unwrap();
        let dens = |x: f64| (-0.5 * (x / std).powi(2)).exp();
        let (lo, hi) = (p.lower(), p.upper());
        let mass = simpson(dens, lo, hi, 20_000);
        let second = simpson(|x| x * x * dens(x), lo, hi, 20_000);
        let want = second / mass;
        assert!((p.variance() - want).abs() < 1e-9 * want.max(1.0), "std {std} trunc {trunc}");
    }
}

#[test]
fn truncated_samples_match_quadrature_moments() {
    let p = TruncatedNormalParams::new(0.5, 2.0, 1.5).unwrap();
    let xs = mlvgm::generator::sample_truncated_normal(&p, 200_000, 11).unwrap();
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 0.5).abs() < 0.01);
    assert!((var - p.variance()).abs() < 0.02 * p.variance());
    assert!(xs.iter().all(|&x| (x as f64) >= p.lower() - 1e-5 && (x as f64) <= p.upper() + 1e-5));
}

/// Kraskov-Stoegbauer-Grassberger estimator (algorithm 1, max-norm).
fn ksg(x: &[Vec<f64>], y: &[Vec<f64>], k: usize) -> f64 {
    let n = x.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let mut acc = 0.0;
    for i in 0..n {
        let mut joint: Vec<f64> =
            (0..n).filter(|&j| j != i).map(|j| dist(&x[i], &x[j]).max(dist(&y[i], &y[j]))).collect();
        joint.select_nth_unstable_by(k - 1, f64::total_cmp);
        let eps = joint[k - 1];
        let nx = (0..n).filter(|&j| j != i && dist(&x[i], &x[j]) < eps).count();
        let ny = (0..n).filter(|&j| j != i && dist(&y[i], &y[j]) < eps).count();
        acc += digamma(nx as f64 + 1.0) + digamma(ny as f64 + 1.0);
    }
    digamma(k as f64) + digamma(n as f64) - acc / n as f64
}

#[test]
fn gaussian_closed_form_matches_scalar_formula_and_ksg() {
    for rho in [0.0f64, 0.3, 0.8, -0.6] {
        let c = |v: f64| DMatrix::from_element(1, 1, v);
        let mi = gaussian_mi_from_covariances(&c(1.0), &c(1.0), &c(rho)).unwrap();
        assert!((mi + 0.5 * (1.0 - rho * rho).ln()).abs() < 1e-10);
    }
    // Two-dimensional blocks with cross-correlation, against sample-based KSG.
    let mut rng = seed::rng(5);
    let n = 2000;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let g: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        xs.push(vec![g[0], g[1]]);
        ys.push(vec![0.8 * g[0] + 0.6 * g[2], 0.5 * g[1] + 0.5 * g[0] + 0.7071 * g[3]]);
    }
    let cx = DMatrix::identity(2, 2);
    let cxy = DMatrix::from_row_slice(2, 2, &[0.8, 0.5, 0.0, 0.5]);
    let cy = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
    let closed = gaussian_mi_from_covariances(&cx, &cy, &cxy).unwrap();
    let est = ksg(&xs, &ys, 4);
    assert!((closed - est).abs() < 0.06, "closed {closed} ksg {est}");
}

fn view_samples(g: &LinearGaussianMlvgm, plan: &PerturbationPlan, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let v = make_view_batch(g, plan, n, 9).unwrap();
    let rows = |t: &candle_core::Tensor| -> Vec<Vec<f64>> {
        t.flatten_from(1)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap()
            .into_iter()
            .map(|r| r.into_iter().map(f64::from).collect())
            .collect()
    };
    (rows(&v.anchors), rows(&v.positives))
}

#[test]
fn analytic_pair_mi_matches_ksg_on_generated_views() {
    // Near-Gaussian anchors (wide truncation) so the second-moment formula is exact.
    let tn = TruncatedNormalParams::new(0.0, 1.0, 8.0).unwrap();
    let g = LinearGaussianMlvgm::hierarchical(1, &[2.0, 1.0], tn, ImageShape::new(1, 1, 2), 0.5, 3).unwrap();
    let w = TruncatedNormalParams::new(0.0, 0.7, 8.0).unwrap();
    for level in 0..2 {
        let mut s = vec![Strategy::Fixed; 2];
        s[level] = Strategy::Random(w);
        let (x, y) = view_samples(&g, &PerturbationPlan::new(s), 3000);
        let closed = g.analytic_pair_mi(level, &DMatrix::from_element(1, 1, w.variance())).unwrap();
        let est = ksg(&x, &y, 4);
        assert!((closed - est).abs() < 0.08, "level {level}: closed {closed} ksg {est}");
    }
}

#[test]
fn pair_mi_obeys_data_processing() {
    let tn = TruncatedNormalParams::new(0.0, 1.0, 8.0).unwrap();
    let shape = ImageShape::new(1, 4, 4);
    let mi = |eps: f64, var: f64, level: usize| {
        let g = LinearGaussianMlvgm::hierarchical(4, &[4.0, 2.0, 1.0], tn, shape, eps, 0).unwrap();
        g.analytic_pair_mi(level, &(DMatrix::identity(4, 4) * var)).unwrap()
    };
    for level in 0..3 {
        // More observation noise or a larger perturbation can only lose information.
        let by_noise: Vec<f64> = [0.1, 0.3, 1.0, 3.0].iter().map(|&e| mi(e, 0.5, level)).collect();
        assert!(by_noise.windows(2).all(|w| w[0] > w[1]), "{by_noise:?}");
        let by_var: Vec<f64> = [0.01, 0.1, 1.0, 10.0].iter().map(|&v| mi(0.3, v, level)).collect();
        assert!(by_var.windows(2).all(|w| w[0] > w[1]), "{by_var:?}");
        assert!(by_var.iter().all(|&v| v >= 0.0));
    }
    // The same perturbation costs more information on a level with a larger operator norm.
    let per_level: Vec<f64> = (0..3).map(|l| mi(0.3, 0.5, l)).collect();
    assert!(per_level[0] < per_level[1] && per_level[1] < per_level[2], "{per_level:?}");
}
