//! Monte Carlo estimate of the perturbation magnitude `||p(z)||` a trained
//! probe applies to anchor latents, and the per-level report built from it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{LatentSpec, TruncatedNormalParams, Unit};
use crate::probe::{PerturbationNet, ProbeStatus};
use crate::seed;

pub const DEFAULT_SAMPLES: usize = 100_000;
const CHUNK: usize = 10_000;

/// Magnitude metric. L2 is the reported default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    #[default]
    L2,
    Linf,
}

impl Norm {
    fn rows(&self, w: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Norm::L1 => w.abs()?.sum(1)?,
            Norm::L2 => w.sqr()?.sum(1)?.sqrt()?,
            Norm::Linf => w.abs()?.max(1)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeEstimate {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
}

impl MagnitudeEstimate {
    /// Normal-approximation 95% confidence interval for `mu`.
    pub fn ci95(&self) -> (f64, f64) {
        let h = 1.96 * self.sigma / (self.n as f64).sqrt();
        (self.mu - h, self.mu + h)
    }
}

/// Mean and sample std of `||p(z)||_2` over `n` anchors drawn from `anchor`.
pub fn estimate_magnitudes(
    net: &PerturbationNet,
    anchor: &TruncatedNormalParams,
    n: usize,
    seed_value: u64,
) -> Result<MagnitudeEstimate> {
    let anchors = vec![(net.dim(), *anchor)];
    estimate_with(net, &anchors, n, seed_value, Norm::L2)
}

/// Same, for a unit of a spec: each level's slice of the input is drawn from
/// that level's anchor distribution.
pub fn estimate_unit_magnitudes(
    net: &PerturbationNet,
    spec: &LatentSpec,
    unit: &Unit,
    n: usize,
    seed_value: u64,
    norm: Norm,
) -> Result<MagnitudeEstimate> {
    let anchors: Vec<_> = unit.levels.clone().map(|l| (spec.dims[l], spec.anchor[l])).collect();
    estimate_with(net, &anchors, n, seed_value, norm)
}

fn estimate_with(
    net: &PerturbationNet,
    anchors: &[(usize, TruncatedNormalParams)],
    n: usize,
    seed_value: u64,
    norm: Norm,
) -> Result<MagnitudeEstimate> {
    if n < 2 {
        return Err(Error::SampleSize { min: 2, got: n });
    }
    let dim: usize = anchors.iter().map(|(m, _)| m).sum();
    if dim != net.dim() {
        return Err(Error::shape(format!("anchors span {dim} dims, net expects {}", net.dim())));
    }
    for (_, a) in anchors {
        a.validate()?;
    }
    let dev: &Device = net.params().device();
    // Chunk seeds depend only on (seed, chunk index), so chunks can be
    // evaluated in any order or in parallel without changing the result.
    let mut sum = 0.0f64;
    let mut values = Vec::with_capacity(n);
    for (ci, start) in (0..n).step_by(CHUNK).enumerate() {
        let rows = CHUNK.min(n - start);
        let mut rng = seed::rng(seed::derive(seed_value, "mc-chunk", ci as u64));
        let mut buf = vec![0f32; rows * dim];
        let mut col = 0;
        for &(m, a) in anchors {
            let draws = a.sample_n(rows * m, &mut rng);
            for r in 0..rows {
                buf[r * dim + col..r * dim + col + m].copy_from_slice(&draws[r * m..(r + 1) * m]);
            }
            col += m;
        }
        let z = Tensor::from_vec(buf, (rows, dim), dev)?;
        let mags = norm.rows(&net.offset(&z)?.detach())?.to_vec1::<f32>()?;
        for v in mags {
            let v = v as f64;
            sum += v;
            values.push(v);
        }
    }
    let mu = sum / n as f64;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64;
    Ok(MagnitudeEstimate { mu, sigma: var.sqrt(), n })
}

pub const COLUMNS: [&str; 6] = ["level", "loss", "mu", "sigma", "n", "status"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McRow {
    pub level: String,
    pub loss: f64,
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    pub status: ProbeStatus,
}

impl McRow {
    pub fn estimate(&self) -> MagnitudeEstimate {
        MagnitudeEstimate { mu: self.mu, sigma: self.sigma, n: self.n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McReport {
    pub columns: Vec<String>,
    pub rows: Vec<McRow>,
}

/// One probed unit's outcome and estimate, the input to [`build_report`].
#[derive(Debug, Clone)]
pub struct ReportEntry {
    pub unit: Unit,
    pub loss: f64,
    pub estimate: MagnitudeEstimate,
    pub status: ProbeStatus,
}

/// Validate that `entries` cover `units` exactly once and order them.
pub fn build_report(units: &[Unit], entries: Vec<ReportEntry>) -> Result<McReport> {
    let mut slots: Vec<Option<ReportEntry>> = vec![None; units.len()];
    for e in entries {
        let i = e.unit.index;
        if i >= units.len() || units[i] != e.unit {
            return Err(Error::Schema(format!("unknown level {}", e.unit.label())));
        }
        if slots[i].is_some() {
            return Err(Error::Schema(format!("duplicate level {}", e.unit.label())));
        }
        slots[i] = Some(e);
    }
    let rows = slots
        .into_iter()
        .zip(units)
        .map(|(s, u)| {
            let e = s.ok_or_else(|| Error::Schema(format!("missing level {}", u.label())))?;
            row_from(e)
        })
        .collect::<Result<Vec<_>>>()?;
    McReport::new(rows)
}

fn row_from(e: ReportEntry) -> Result<McRow> {
    Ok(McRow {
        level: e.unit.label(),
        loss: e.loss,
        mu: e.estimate.mu,
        sigma: e.estimate.sigma,
        n: e.estimate.n,
        status: e.status,
    })
}

impl McReport {
    pub fn new(rows: Vec<McRow>) -> Result<Self> {
        let r = Self { columns: COLUMNS.iter().map(|s| s.to_string()).collect(), rows };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns != COLUMNS {
            return Err(Error::Schema(format!("report columns {:?}, expected {COLUMNS:?}", self.columns)));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.rows {
            if !seen.insert(&r.level) {
                return Err(Error::Schema(format!("duplicate level {}", r.level)));
            }
            if !(r.sigma >= 0.0) || r.n == 0 {
                return Err(Error::Schema(format!("level {}: sigma must be >= 0 and n > 0", r.level)));
            }
        }
        Ok(())
    }

    /// Levels flagged degenerate, which are excluded from ordering claims.
    pub fn degenerate(&self) -> impl Iterator<Item = &McRow> {
        self.rows.iter().filter(|r| r.status == ProbeStatus::Degenerate)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("mc report: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    /// Right-aligned text table with the frozen column names as header.
    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.level.clone(),
                    r.loss.to_string(),
                    r.mu.to_string(),
                    r.sigma.to_string(),
                    r.n.to_string(),
                    r.status.as_str().to_string(),
                ]
            })
            .collect();
        let mut widths = COLUMNS.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  "));
        };
        line(&mut out, &COLUMNS);
        for row in &cells {
            let r: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut out, &r);
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
        if header != COLUMNS {
            return Err(Error::Schema(format!("table header {header:?}, expected {COLUMNS:?}")));
        }
        let rows = lines
            .enumerate()
            .map(|(i, l)| {
                let c: Vec<&str> = l.split_whitespace().collect();
                if c.len() != 6 {
                    return Err(Error::Schema(format!("table row {}: expected 6 cells", i + 1)));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Schema(format!("bad number `{s}`")));
                Ok(McRow {
                    level: c[0].to_string(),
                    loss: num(c[1])?,
                    mu: num(c[2])?,
                    sigma: num(c[3])?,
                    n: c[4].parse().map_err(|_| Error::Schema(format!("bad count `{}`", c[4])))?,
                    status: match c[5] {
                        "converged" => ProbeStatus::Converged,
                        "degenerate" => ProbeStatus::Degenerate,
                        s => return Err(Error::Schema(format!("bad status `{s}`"))),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// Write `mc-report.json` and `mc-report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let j = dir.join("mc-report.json");
        let t = dir.join("mc-report.txt");
        fs::write(&j, self.to_json()?)?;
        fs::write(&t, self.to_table())?;
        Ok((j, t))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("mc report {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn unit(i: usize) -> Unit {
        Unit { index: i, levels: i..i + 1 }
    }

    fn entry(i: usize, mu: f64) -> ReportEntry {
        ReportEntry {
            unit: unit(i),
            loss: 1.0,
            estimate: MagnitudeEstimate { mu, sigma: 0.1, n: 10 },
            status: ProbeStatus::Converged,
        }
    }

    #[test]
    fn constant_offset_has_exact_magnitude() -> Result<()> {
        let net = PerturbationNet::new(3, 4, &Device::Cpu)?;
        // Zero weights and output bias (3, 4, 0) give p(z) = (3, 4, 0).
        net.params().init_with(0, |_, _| Init::Const(0.0))?;
        let b = net.params().vars_under("l2.bias");
        b[0].set(&Tensor::new(&[3f32, 4.0, 0.0], &Device::Cpu)?)?;
        let tn = TruncatedNormalParams::new(0.0, 1.0, 2.0)?;
        let e = estimate_magnitudes(&net, &tn, 1000, 1)?;
        assert!((e.mu - 5.0).abs() < 1e-6);
        assert!(e.sigma < 1e-6);
        assert!(matches!(estimate_magnitudes(&net, &tn, 1, 1), Err(Error::SampleSize { .. })));
        Ok(())
    }

    #[test]
    fn report_rejects_missing_and_duplicate_levels() {
        let units = vec![unit(0), unit(1)];
        assert!(matches!(build_report(&units, vec![entry(0, 1.0)]), Err(Error::Schema(_))));
        assert!(matches!(build_report(&units, vec![entry(0, 1.0), entry(0, 1.0)]), Err(Error::Schema(_))));
        let r = build_report(&units, vec![entry(1, 2.0), entry(0, 1.0)]).unwrap();
        assert_eq!(r.rows[0].level, "1");
        assert_eq!(r.rows[1].mu, 2.0);
    }

    #[test]
    fn single_level_table_has_one_row() {
        let r = build_report(&[unit(0)], vec![entry(0, 0.5)]).unwrap();
        assert_eq!(r.to_table().lines().count(), 2);
        assert_eq!(McReport::from_table(&r.to_table()).unwrap(), r);
    }

    #[test]
    fn published_rows_round_trip() {
        let rows = [
            ("1", 1.09, 0.67, 0.21),
            ("2", 1.04, 3.63, 1.18),
            ("3", 1.05, 6.97, 1.85),
            ("4", 1.02, 13.00, 7.08),
            ("5", 1.05, 21.22, 13.68),
            ("6", 0.14, 594.71, 616.80),
        ];
        let r = McReport::new(
            rows.iter()
                .map(|&(level, loss, mu, sigma)| McRow {
                    level: level.into(),
                    loss,
                    mu,
                    sigma,
                    n: DEFAULT_SAMPLES,
                    status: if loss < 0.5 { ProbeStatus::Degenerate } else { ProbeStatus::Converged },
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(McReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let table = r.to_table();
        assert_eq!(McReport::from_table(&table).unwrap(), r);
        assert!(table.lines().next().unwrap().split_whitespace().eq(COLUMNS));
        assert_eq!(r.degenerate().map(|r| r.level.as_str()).collect::<Vec<_>>(), ["6"]);
    }
}
