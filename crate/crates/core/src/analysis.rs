//! Weight-evolution statistics, trajectory sampling and training-curve tooling.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::SnapshotStore;
use crate::introspection::csv_err;
use crate::rng::{self, Domain};

pub const DEFAULT_BINS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `w(T) - w(0)`
    FinalMinusInitial,
    /// `sqrt(mean_s (w(s) - w(0))^2)` over recorded steps after 0.
    SqrtSecondMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// `count` equal bins over the data range (symmetric for the signed metric).
    Uniform(usize),
    Edges(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub metric: Metric,
    pub bins: Binning,
    pub log_frequency: bool,
}

impl HistogramSpec {
    pub fn new(metric: Metric) -> Self {
        HistogramSpec { metric, bins: Binning::Uniform(DEFAULT_BINS), log_frequency: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub metric: Metric,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub log_frequency: bool,
    /// Per-scalar metric value.
    pub values: Vec<f64>,
    /// Per-scalar bin index.
    pub bin_of: Vec<usize>,
}

impl Histogram {
    /// `log10(count + 1)` per bin.
    pub fn log_counts(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| (c as f64 + 1.0).log10()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Columns: `lo,hi,count` plus `log10_count` when the log flag is set.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.log_frequency { "lo,hi,count,log10_count\n" } else { "lo,hi,count\n" });
        let logs = self.log_counts();
        for (b, &c) in self.counts.iter().enumerate() {
            let _ = write!(s, "{},{},{}", self.edges[b], self.edges[b + 1], c);
            if self.log_frequency {
                let _ = write!(s, ",{}", logs[b]);
            }
            s.push('\n');
        }
        s
    }
}

/// Index of the bin containing `v`: bins are `[lo, hi)` except the last,
/// which is closed. Values outside the edges go to the end bins.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    let pos = edges.partition_point(|&e| e <= v);
    pos.saturating_sub(1).min(bins - 1)
}

fn make_edges(spec: &HistogramSpec, values: &[f64]) -> Result<Vec<f64>> {
    let edges = match &spec.bins {
        Binning::Edges(e) => e.clone(),
        &Binning::Uniform(count) => {
            if count < 2 {
                return Err(Error::config("histogram.bins", "need at least 2 bins"));
            }
            let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let span = if max > 0.0 { max } else { 1.0 };
            let (lo, hi) = match spec.metric {
                Metric::FinalMinusInitial => (-span, span),
                Metric::SqrtSecondMoment => (0.0, span),
            };
            let w = (hi - lo) / count as f64;
            let mut e: Vec<f64> = (0..count).map(|i| lo + w * i as f64).collect();
            e.push(hi);
            e
        }
    };
    if edges.len() < 3 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config("histogram.bins", "edges must be strictly increasing with at least 2 bins"));
    }
    Ok(edges)
}

fn histogram(spec: &HistogramSpec, values: Vec<f64>) -> Result<Histogram> {
    let edges = make_edges(spec, &values)?;
    let bin_of: Vec<usize> = values.iter().map(|&v| bin_index(&edges, v)).collect();
    let mut counts = vec![0u64; edges.len() - 1];
    for &b in &bin_of {
        counts[b] += 1;
    }
    Ok(Histogram { metric: spec.metric, edges, counts, log_frequency: spec.log_frequency, values, bin_of })
}

fn need_two(store: &SnapshotStore) -> Result<()> {
    if store.len() < 2 {
        return Err(Error::Range("need at least 2 snapshots".into()));
    }
    Ok(())
}

/// Per-scalar `w(T) - w(0)` with `T` the last recorded step.
pub fn deviations(store: &SnapshotStore) -> Result<Vec<f64>> {
    need_two(store)?;
    let w0 = store.exact(0)?;
    let wt = store.exact(store.last_step())?;
    Ok(w0.iter().zip(wt).map(|(&a, &b)| b as f64 - a as f64).collect())
}

/// Per-scalar root mean squared deviation from `w(0)` over recorded steps after 0.
pub fn second_moments(store: &SnapshotStore) -> Result<Vec<f64>> {
    need_two(store)?;
    let w0 = store.exact(0)?;
    let snaps: Vec<&[f32]> = store.steps().filter(|&s| s > 0).map(|s| store.exact(s)).collect::<Result<_>>()?;
    let k = snaps.len() as f64;
    Ok((0..w0.len())
        .into_par_iter()
        .map(|i| {
            let ss: f64 = snaps.iter().map(|s| (s[i] as f64 - w0[i] as f64).powi(2)).sum();
            (ss / k).sqrt()
        })
        .collect())
}

pub fn deviation_histogram(store: &SnapshotStore, spec: &HistogramSpec) -> Result<Histogram> {
    histogram(spec, deviations(store)?)
}

pub fn second_moment_histogram(store: &SnapshotStore, spec: &HistogramSpec) -> Result<Histogram> {
    histogram(spec, second_moments(store)?)
}

pub fn metric_histogram(store: &SnapshotStore, spec: &HistogramSpec) -> Result<Histogram> {
    match spec.metric {
        Metric::FinalMinusInitial => deviation_histogram(store, spec),
        Metric::SqrtSecondMoment => second_moment_histogram(store, spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub bin: usize,
    pub flat_index: usize,
    pub steps: Vec<u64>,
    /// `w(s) - w(0)` per step.
    pub deviations: Vec<f32>,
}

/// Draws up to `per_bin` scalars from every non-empty bin of `hist`.
pub fn sample_trajectories(store: &SnapshotStore, hist: &Histogram, per_bin: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let mut members = vec![Vec::new(); hist.counts.len()];
    for (i, &b) in hist.bin_of.iter().enumerate() {
        members[b].push(i);
    }
    let mut out = Vec::new();
    for (bin, mut m) in members.into_iter().enumerate() {
        if per_bin == 0 || m.is_empty() {
            continue;
        }
        m.shuffle(&mut rng::keyed(Domain::Trajectories, seed, bin as u64, 0));
        m.truncate(per_bin);
        m.sort_unstable();
        for i in m {
            let series = store.weight_series(i)?;
            out.push(Trajectory { bin, flat_index: i, deviations: series.deviations(), steps: series.steps });
        }
    }
    Ok(out)
}

/// Long-format CSV: `bin,flat_index,step,deviation`.
pub fn trajectories_csv(traj: &[Trajectory]) -> String {
    let mut s = String::from("bin,flat_index,step,deviation\n");
    for t in traj {
        for (step, d) in t.steps.iter().zip(&t.deviations) {
            let _ = writeln!(s, "{},{},{},{}", t.bin, t.flat_index, step, d);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub jump_steps: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub meta: CurveMeta,
    pub rows: Vec<CurveRow>,
}

impl TrainingCurve {
    pub fn new(meta: CurveMeta) -> Self {
        TrainingCurve { meta, rows: Vec::new() }
    }

    pub fn push(&mut self, row: CurveRow) -> Result<()> {
        if self.rows.last().is_some_and(|r| r.step >= row.step) {
            return Err(Error::Range(format!("curve step {} is not increasing", row.step)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn max_acc(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_acc).reduce(f64::max)
    }

    pub fn final_acc(&self) -> Option<f64> {
        self.rows.last().map(|r| r.val_acc)
    }

    /// First step whose accuracy is at least `target`.
    pub fn first_reach(&self, target: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.val_acc >= target).map(|r| r.step)
    }

    /// Accuracy at the last evaluation with `step <= s`.
    pub fn acc_at_step(&self, s: u64) -> Option<f64> {
        self.rows.iter().take_while(|r| r.step <= s).last().map(|r| r.val_acc)
    }

    pub fn acc_at_seconds(&self, secs: f64) -> Option<f64> {
        self.rows.iter().take_while(|r| r.seconds <= secs).last().map(|r| r.val_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,val_acc,seconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.val_acc, r.seconds);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Reads a curve CSV. A missing column is a config error naming the file.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::config(path.display().to_string(), format!("missing column '{name}'")))
        };
        let (cs, cl, ca, ct) = (col("step")?, col("loss")?, col("val_acc")?, col("seconds")?);
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut curve = TrainingCurve::new(CurveMeta { name, ..Default::default() });
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let get = |c: usize| -> Result<&str> {
                rec.get(c).ok_or_else(|| Error::Format(format!("{}: row {} is short", path.display(), line + 2)))
            };
            let num = |c: usize| -> Result<f64> {
                get(c)?.trim().parse().map_err(|_| Error::Format(format!("{}: bad number in row {}", path.display(), line + 2)))
            };
            let step = get(cs)?
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad step in row {}", path.display(), line + 2)))?;
            curve.push(CurveRow { step, loss: num(cl)?, val_acc: num(ca)?, seconds: num(ct)? })?;
        }
        Ok(curve)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub max_acc: f64,
    pub final_acc: f64,
    /// First step reaching the reference run's max accuracy; `None` if never.
    pub first_reach: Option<u64>,
    /// Accuracy at the reference run's last step.
    pub acc_at_equal_steps: Option<f64>,
    /// Accuracy at the reference run's total wall-clock.
    pub acc_at_equal_time: Option<f64>,
    pub delta_max: f64,
    pub delta_final: f64,
}

/// Summarises every curve against `curves[reference]`.
pub fn compare_runs(curves: &[TrainingCurve], reference: usize) -> Result<Vec<RunSummary>> {
    if curves.len() < 2 {
        return Err(Error::Range("comparison needs at least 2 curves".into()));
    }
    let r = curves.get(reference).ok_or(Error::Index { index: reference, len: curves.len() })?;
    let span = |c: &TrainingCurve| -> Result<(u64, u64)> {
        match (c.rows.first(), c.rows.last()) {
            (Some(a), Some(b)) => Ok((a.step, b.step)),
            _ => Err(Error::Range(format!("curve '{}' is empty", c.meta.name))),
        }
    };
    let (r_lo, r_hi) = span(r)?;
    let ref_max = r.max_acc().expect("non-empty");
    let ref_final = r.final_acc().expect("non-empty");
    let ref_secs = r.rows.last().expect("non-empty").seconds;
    curves
        .iter()
        .map(|c| {
            let (lo, hi) = span(c)?;
            if hi < r_lo || lo > r_hi {
                return Err(Error::Range(format!("curve '{}' does not overlap the reference steps", c.meta.name)));
            }
            let max_acc = c.max_acc().expect("non-empty");
            let final_acc = c.final_acc().expect("non-empty");
            Ok(RunSummary {
                name: c.meta.name.clone(),
                max_acc,
                final_acc,
                first_reach: c.first_reach(ref_max),
                acc_at_equal_steps: c.acc_at_step(r_hi),
                acc_at_equal_time: c.acc_at_seconds(ref_secs),
                delta_max: max_acc - ref_max,
                delta_final: final_acc - ref_final,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn reach(v: Option<u64>) -> String {
    v.map_or_else(|| "not reached".into(), |s| s.to_string())
}

pub fn summary_csv(rows: &[RunSummary]) -> String {
    let mut s = String::from("run,max_acc,final_acc,first_reach_ref_max,acc_at_equal_steps,acc_at_equal_time,delta_max,delta_final\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.name,
            r.max_acc,
            r.final_acc,
            reach(r.first_reach),
            r.acc_at_equal_steps.map_or_else(|| "n/a".into(), |v| v.to_string()),
            r.acc_at_equal_time.map_or_else(|| "n/a".into(), |v| v.to_string()),
            r.delta_max,
            r.delta_final
        );
    }
    s
}

pub fn summary_table(rows: &[RunSummary]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
    let mut s = format!(
        "{:<w$}  {:>8}  {:>8}  {:>12}  {:>10}  {:>10}  {:>9}\n",
        "run", "max_acc", "final", "reach_ref", "eq_steps", "eq_time", "d_max"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>8.4}  {:>8.4}  {:>12}  {:>10}  {:>10}  {:>+9.4}",
            r.name,
            r.max_acc,
            r.final_acc,
            reach(r.first_reach),
            opt(r.acc_at_equal_steps),
            opt(r.acc_at_equal_time),
            r.delta_max
        );
    }
    s
}

/// Writes `<name>.csv` for each curve and `summary.csv` into `dir`, using
/// the first curve as the reference.
pub fn export_curves(curves: &[TrainingCurve], dir: impl AsRef<Path>) -> Result<Vec<RunSummary>> {
    let dir = dir.as_ref();
    if curves.is_empty() {
        return Err(Error::Range("no curves to export".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, c) in curves.iter().enumerate() {
        let name = if c.meta.name.is_empty() { format!("run{i}") } else { c.meta.name.clone() };
        c.write_csv(dir.join(format!("{name}.csv")))?;
    }
    let summary = if curves.len() >= 2 { compare_runs(curves, 0)? } else { single_summary(&curves[0])? };
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary_csv(&summary)).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn single_summary(c: &TrainingCurve) -> Result<Vec<RunSummary>> {
    let max_acc = c.max_acc().ok_or_else(|| Error::Range("empty curve".into()))?;
    let last = c.rows.last().expect("non-empty");
    Ok(vec![RunSummary {
        name: c.meta.name.clone(),
        max_acc,
        final_acc: last.val_acc,
        first_reach: c.first_reach(max_acc),
        acc_at_equal_steps: Some(last.val_acc),
        acc_at_equal_time: Some(last.val_acc),
        delta_max: 0.0,
        delta_final: 0.0,
    }])
}
