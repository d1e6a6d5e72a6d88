//! Test-time pipeline: four-flip aggregation, verification, ROC and
//! GAR@FAR, moment diagnostics, histograms and the target-mean sweep.
//!
//! For `p > 1` the scalar statistic reported in moments and histograms is the
//! mean of the latent coordinates, which is the projection onto the decision
//! normal `(mu_m - mu_n) 1` up to a constant factor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

use crate::autodiff::Matrix;
use crate::data::{flip, Dataset, Modality};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::target::{PairLabel, TargetSpec};
use crate::trainer::{train, TrainConfig};

/// Flip states `(flip x1, flip x2)` in the fixed order P1..P4.
pub const FLIP_ORDER: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

pub const FAR_TARGETS: [f64; 2] = [1e-2, 1e-3];

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub z_bar: Vec<f64>,
    /// Latent points for P1..P4.
    pub contributions: [Vec<f64>; 4],
}

fn mean_of_four(c: &[Vec<f64>; 4]) -> Vec<f64> {
    (0..c[0].len())
        .map(|k| (c[0][k] + c[1][k] + c[2][k] + c[3][k]) / 4.0)
        .collect()
}

/// Four-flip aggregation for a batch of raw input pairs sharing one modality.
pub fn aggregate_inputs(params: &ModelParams, modality: Modality, pairs: &[(&[f64], &[f64])]) -> Result<Vec<Aggregated>> {
    let dim = params.config.input_dim;
    let mut per_flip = Vec::with_capacity(4);
    for (f1, f2) in FLIP_ORDER {
        let mut left = Vec::with_capacity(pairs.len() * dim);
        let mut right = Vec::with_capacity(pairs.len() * dim);
        for (x1, x2) in pairs {
            left.extend(if f1 { flip(x1, modality) } else { x1.to_vec() });
            right.extend(if f2 { flip(x2, modality) } else { x2.to_vec() });
        }
        let x1 = Matrix::new(pairs.len(), dim, left)
            .map_err(|_| Error::shape("aggregate", format!("inputs must have {dim} features")))?;
        let x2 = Matrix::new(pairs.len(), dim, right)
            .map_err(|_| Error::shape("aggregate", format!("inputs must have {dim} features")))?;
        per_flip.push(params.latent(&x1, &x2)?);
    }
    Ok((0..pairs.len())
        .map(|i| {
            let contributions: [Vec<f64>; 4] = std::array::from_fn(|k| per_flip[k].row(i).to_vec());
            Aggregated {
                z_bar: mean_of_four(&contributions),
                contributions,
            }
        })
        .collect())
}

pub fn aggregate(params: &ModelParams, modality: Modality, x1: &[f64], x2: &[f64]) -> Result<Aggregated> {
    Ok(aggregate_inputs(params, modality, &[(x1, x2)])?.remove(0))
}

/// Aggregation over dataset item pairs.
pub fn aggregate_items(params: &ModelParams, dataset: &Dataset, pairs: &[(usize, usize)]) -> Result<Vec<Aggregated>> {
    let inputs: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|&(a, b)| (dataset.input(a, false), dataset.input(b, false)))
        .collect();
    let refs: Vec<(&[f64], &[f64])> = inputs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    aggregate_inputs(params, dataset.modality, &refs)
}

/// Scalar decision statistic of a latent point.
pub fn statistic(z: &[f64]) -> f64 {
    z.iter().sum::<f64>() / z.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub label: PairLabel,
    pub margin: f64,
    pub aggregated: Aggregated,
}

pub fn verify(params: &ModelParams, target: &TargetSpec, modality: Modality, x1: &[f64], x2: &[f64]) -> Result<Verification> {
    let aggregated = aggregate(params, modality, x1, x2)?;
    let rule = target.decision_rule();
    let margin = rule.margin(&aggregated.z_bar)?;
    Ok(Verification {
        label: crate::target::label_for_margin(margin),
        margin,
        aggregated,
    })
}

pub fn verify_items(params: &ModelParams, target: &TargetSpec, dataset: &Dataset, a: usize, b: usize) -> Result<Verification> {
    for i in [a, b] {
        if i >= dataset.len() {
            return Err(Error::Input(format!("item {i} out of range ({} items)", dataset.len())));
        }
    }
    verify(params, target, dataset.modality, &dataset.input(a, false), &dataset.input(b, false))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub gar: f64,
}

/// Empirical ROC: one point per distinct score plus `-inf`, thresholds descending.
#[derive(Clone, Debug, PartialEq)]
pub struct Roc {
    pub points: Vec<RocPoint>,
}

/// Accepts scores strictly above each threshold.
pub fn roc(matching: &[f64], non_matching: &[f64]) -> Result<Roc> {
    if matching.is_empty() {
        return Err(Error::EmptyClass("matching"));
    }
    if non_matching.is_empty() {
        return Err(Error::EmptyClass("non-matching"));
    }
    for (i, v) in matching.iter().chain(non_matching).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "roc", index: i });
        }
    }
    let desc = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    let (m, n) = (desc(matching), desc(non_matching));
    let mut thresholds: Vec<f64> = m.iter().chain(&n).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.push(f64::NEG_INFINITY);

    let (mut im, mut in_) = (0, 0);
    let points = thresholds
        .into_iter()
        .map(|t| {
            while im < m.len() && m[im] > t {
                im += 1;
            }
            while in_ < n.len() && n[in_] > t {
                in_ += 1;
            }
            RocPoint {
                threshold: t,
                far: in_ as f64 / n.len() as f64,
                gar: im as f64 / m.len() as f64,
            }
        })
        .collect();
    Ok(Roc { points })
}

impl Roc {
    /// Highest GAR with FAR <= `alpha`; among equal GARs the largest threshold.
    pub fn operating_point(&self, alpha: f64) -> RocPoint {
        let mut best = self.points[0];
        for p in &self.points {
            if p.far <= alpha && p.gar > best.gar {
                best = *p;
            }
        }
        best
    }

    pub fn gar_at_far(&self, alpha: f64) -> f64 {
        self.operating_point(alpha).gar
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    /// `None` when the variance is zero.
    pub skewness: Option<f64>,
    /// Raw (not excess) kurtosis; a Gaussian gives 3.
    pub kurtosis: Option<f64>,
}

impl Moments {
    pub fn degenerate(&self) -> bool {
        self.skewness.is_none()
    }
}

pub fn moments(values: &[f64]) -> Result<Moments> {
    if values.is_empty() {
        return Err(Error::InsufficientBatch { needed: 1, got: 0 });
    }
    if values.len() < 4 {
        log::warn!("moments from {} samples; at least 4 are needed for stable estimates", values.len());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let degenerate = m2 <= (1e-12 * scale).powi(2);
    Ok(Moments {
        n: values.len(),
        mean,
        variance: m2,
        skewness: (!degenerate).then(|| m3 / m2.powf(1.5)),
        kurtosis: (!degenerate).then(|| m4 / (m2 * m2)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins on `[lo, hi]`; values outside land in the end bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0; bins];
        for &v in values {
            let i = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            counts[(i.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * bin as f64, self.lo + w * (bin + 1) as f64)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EvalPair {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

fn parse_label(token: &str) -> Option<PairLabel> {
    match token {
        "1" | "m" | "matching" => Some(PairLabel::Matching),
        "0" | "n" | "non_matching" | "non-matching" => Some(PairLabel::NonMatching),
        _ => None,
    }
}

/// Parses `idx1 idx2 label` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<EvalPair>> {
    let err = |line: usize, detail: String| Error::Parse {
        path: origin.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(i + 1, format!("expected \"idx1 idx2 label\", got {line:?}")));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|_| err(i + 1, format!("bad item index {s:?}")));
        let label = parse_label(fields[2]).ok_or_else(|| err(i + 1, format!("bad label {:?}", fields[2])))?;
        pairs.push(EvalPair {
            a: idx(fields[0])?,
            b: idx(fields[1])?,
            label,
        });
    }
    Ok(pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<EvalPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, path)
}

pub fn format_pairs(pairs: &[EvalPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let _ = writeln!(out, "{} {} {}", p.a, p.b, if p.label.is_matching() { 1 } else { 0 });
    }
    out
}

pub fn write_pairs(path: &Path, pairs: &[EvalPair]) -> Result<()> {
    fs::write(path, format_pairs(pairs)).map_err(|e| Error::io(path, e))
}

/// Balanced set of distinct unordered pairs, `per_class` of each label.
pub fn generate_eval_pairs(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Vec<EvalPair>> {
    let groups = dataset.by_identity();
    let matching_total: usize = groups.iter().map(|g| g.len() * g.len().saturating_sub(1) / 2).sum();
    let n = dataset.len();
    let non_matching_total = n * n.saturating_sub(1) / 2 - matching_total;
    if matching_total < per_class || non_matching_total < per_class {
        return Err(Error::DatasetInsufficient(format!(
            "{per_class} pairs per class requested; dataset offers {matching_total} matching and {non_matching_total} non-matching"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rich: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= 2).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(2 * per_class);
    for label in [PairLabel::Matching, PairLabel::NonMatching] {
        let mut count = 0;
        while count < per_class {
            let (a, b) = match label {
                PairLabel::Matching => {
                    let g = rich.choose(&mut rng).expect("matching pairs exist");
                    let pick: Vec<&usize> = g.choose_multiple(&mut rng, 2).collect();
                    (*pick[0], *pick[1])
                }
                PairLabel::NonMatching => {
                    let a = rand::Rng::random_range(&mut rng, 0..n);
                    let b = rand::Rng::random_range(&mut rng, 0..n);
                    if dataset.items[a].identity == dataset.items[b].identity {
                        continue;
                    }
                    (a, b)
                }
            };
            if seen.insert((a.min(b), a.max(b))) {
                out.push(EvalPair { a, b, label });
                count += 1;
            }
        }
    }
    Ok(out)
}

/// Per-pair scores in input order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub pair: EvalPair,
    pub z: f64,
    pub z_bar: f64,
    pub margin: f64,
    pub decision: PairLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub tau: f64,
    pub n_matching: usize,
    pub n_non_matching: usize,
    pub roc: Roc,
    /// `(FAR target, GAR)` for each entry of [`FAR_TARGETS`].
    pub gar_at_far: Vec<(f64, f64)>,
    /// Indexed `[matching, non-matching]`.
    pub moments_z: [Moments; 2],
    pub moments_zbar: [Moments; 2],
    pub histogram_z: [Histogram; 2],
    pub histogram_zbar: [Histogram; 2],
    pub scores: Vec<PairScore>,
}

pub const HISTOGRAM_BINS: usize = 50;

fn check_pairs(dataset: &Dataset, pairs: &[EvalPair]) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.a >= dataset.len() || p.b >= dataset.len() {
            return Err(Error::Input(format!(
                "pair {i} ({}, {}) is out of range for {} items",
                p.a,
                p.b,
                dataset.len()
            )));
        }
        if p.a == p.b {
            return Err(Error::Input(format!("pair {i} pairs item {} with itself", p.a)));
        }
        let same = dataset.items[p.a].identity == dataset.items[p.b].identity;
        if same != p.label.is_matching() {
            return Err(Error::Input(format!(
                "pair {i} ({}, {}) is labelled {:?} but the identities say otherwise",
                p.a, p.b, p.label
            )));
        }
    }
    if !pairs.iter().any(|p| p.label.is_matching()) {
        return Err(Error::EmptyClass("matching"));
    }
    if pairs.iter().all(|p| p.label.is_matching()) {
        return Err(Error::EmptyClass("non-matching"));
    }
    Ok(())
}

pub fn evaluate(params: &ModelParams, target: &TargetSpec, dataset: &Dataset, pairs: &[EvalPair]) -> Result<EvalReport> {
    check_pairs(dataset, pairs)?;
    let items: Vec<(usize, usize)> = pairs.iter().map(|p| (p.a, p.b)).collect();
    let aggregated = aggregate_items(params, dataset, &items)?;
    let rule = target.decision_rule();

    let mut scores = Vec::with_capacity(pairs.len());
    for (pair, agg) in pairs.iter().zip(&aggregated) {
        let margin = rule.margin(&agg.z_bar)?;
        scores.push(PairScore {
            pair: *pair,
            z: statistic(&agg.contributions[0]),
            z_bar: statistic(&agg.z_bar),
            margin,
            decision: crate::target::label_for_margin(margin),
        });
    }
    let correct = scores.iter().filter(|s| s.decision == s.pair.label).count();
    let class = |m: bool, f: fn(&PairScore) -> f64| -> Vec<f64> {
        scores.iter().filter(|s| s.pair.label.is_matching() == m).map(f).collect()
    };
    let roc = roc(&class(true, |s| s.margin), &class(false, |s| s.margin))?;
    let gar_at_far = FAR_TARGETS.iter().map(|&a| (a, roc.gar_at_far(a))).collect();

    let z = [class(true, |s| s.z), class(false, |s| s.z)];
    let zb = [class(true, |s| s.z_bar), class(false, |s| s.z_bar)];
    let all = z.iter().chain(&zb).flatten();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let hist = |v: &Vec<f64>| Histogram::new(v, lo, hi, HISTOGRAM_BINS);

    Ok(EvalReport {
        accuracy: correct as f64 / scores.len() as f64,
        tau: rule.tau,
        n_matching: z[0].len(),
        n_non_matching: z[1].len(),
        roc,
        gar_at_far,
        moments_z: [moments(&z[0])?, moments(&z[1])?],
        moments_zbar: [moments(&zb[0])?, moments(&zb[1])?],
        histogram_z: [hist(&z[0]), hist(&z[1])],
        histogram_zbar: [hist(&zb[0]), hist(&zb[1])],
        scores,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

const CLASS_NAMES: [&str; 2] = ["matching", "non_matching"];

impl EvalReport {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "accuracy,{}", self.accuracy);
        let _ = writeln!(s, "tau,{}", self.tau);
        let _ = writeln!(s, "n_matching,{}", self.n_matching);
        let _ = writeln!(s, "n_non_matching,{}", self.n_non_matching);
        for (a, g) in &self.gar_at_far {
            let _ = writeln!(s, "gar_at_far_{a:e},{g}");
        }
        s
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("threshold,far,gar\n");
        for p in &self.roc.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.far, p.gar);
        }
        s
    }

    pub fn moments_csv(&self) -> String {
        let mut s = String::from("statistic,class,n,mean,variance,skewness,kurtosis,degenerate\n");
        for (name, set) in [("z", &self.moments_z), ("z_bar", &self.moments_zbar)] {
            for (class, m) in CLASS_NAMES.iter().zip(set.iter()) {
                let _ = writeln!(
                    s,
                    "{name},{class},{},{},{},{},{},{}",
                    m.n,
                    m.mean,
                    m.variance,
                    opt(m.skewness),
                    opt(m.kurtosis),
                    m.degenerate()
                );
            }
        }
        s
    }

    pub fn histogram_csv(hists: &[Histogram; 2]) -> String {
        let mut s = String::from("class,bin_lo,bin_hi,count\n");
        for (class, h) in CLASS_NAMES.iter().zip(hists) {
            for (i, c) in h.counts.iter().enumerate() {
                let (lo, hi) = h.edges(i);
                let _ = writeln!(s, "{class},{lo},{hi},{c}");
            }
        }
        s
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from("a,b,label,z,z_bar,margin,decision\n");
        for r in &self.scores {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.pair.a,
                r.pair.b,
                r.pair.label.is_matching() as u8,
                r.z,
                r.z_bar,
                r.margin,
                r.decision.is_matching() as u8
            );
        }
        s
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("summary.csv", self.summary_csv()),
            ("roc.csv", self.roc_csv()),
            ("moments.csv", self.moments_csv()),
            ("histogram_z.csv", Self::histogram_csv(&self.histogram_z)),
            ("histogram_zbar.csv", Self::histogram_csv(&self.histogram_zbar)),
            ("scores.csv", self.scores_csv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub w: f64,
    pub steps: u64,
    pub accuracy: Option<f64>,
    /// Moments of single-orientation `z`, `[matching, non-matching]`.
    pub moments: Option<[Moments; 2]>,
    pub error: Option<String>,
}

/// Trains one fresh model per non-matching target mean `w` and evaluates it.
///
/// Grid points run in parallel. A failing point is recorded and the others
/// continue.
pub fn diagnose_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    pairs: &[EvalPair],
    model: &ModelConfig,
    base_target: &TargetSpec,
    train_config: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    let targets: Vec<TargetSpec> = grid
        .iter()
        .map(|&w| {
            let t = TargetSpec { mu_n: w, ..*base_target };
            t.validate().map(|_| t)
        })
        .collect::<Result<_>>()?;
    check_pairs(test_set, pairs)?;

    let run_one = |target: &TargetSpec| -> SweepRow {
        let outcome = ModelParams::init(model)
            .and_then(|params| train(train_set, params, target, train_config))
            .and_then(|out| {
                let report = evaluate(&out.params, target, test_set, pairs)?;
                Ok((out.summary.steps, report))
            });
        match outcome {
            Ok((steps, report)) => SweepRow {
                w: target.mu_n,
                steps,
                accuracy: Some(report.accuracy),
                moments: Some(report.moments_z),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep point w = {} failed: {e}", target.mu_n);
                SweepRow {
                    w: target.mu_n,
                    steps: 0,
                    accuracy: None,
                    moments: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    Ok(std::thread::scope(|s| {
        let handles: Vec<_> = targets.iter().map(|t| s.spawn(move || run_one(t))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    }))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "w,status,steps,accuracy,mean_m,var_m,skew_m,kurt_m,mean_n,var_n,skew_n,kurt_n,error\n",
    );
    for r in rows {
        let cols = match &r.moments {
            Some([m, n]) => format!(
                "{},{},{},{},{},{},{},{}",
                m.mean,
                m.variance,
                opt(m.skewness),
                opt(m.kurtosis),
                n.mean,
                n.variance,
                opt(n.skewness),
                opt(n.kurtosis)
            ),
            None => ",,,,,,,".to_string(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.w,
            if r.error.is_none() { "ok" } else { "failed" },
            r.steps,
            r.accuracy.map_or(String::new(), |a| a.to_string()),
            cols,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;
    use rand::Rng;

    /// O(n^2) reference: every candidate threshold, counted from scratch.
    pub(crate) fn brute_force_roc(m: &[f64], n: &[f64]) -> Vec<RocPoint> {
        let mut ts: Vec<f64> = m.iter().chain(n).copied().collect();
        ts.push(f64::NEG_INFINITY);
        let mut pts: Vec<RocPoint> = Vec::new();
        for &t in &ts {
            if pts.iter().any(|p| p.threshold == t) {
                continue;
            }
            let gar = m.iter().filter(|&&v| v > t).count() as f64 / m.len() as f64;
            let far = n.iter().filter(|&&v| v > t).count() as f64 / n.len() as f64;
            pts.push(RocPoint { threshold: t, far, gar });
        }
        pts.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
        pts
    }

    fn brute_force_gar(m: &[f64], n: &[f64], alpha: f64) -> f64 {
        brute_force_roc(m, n)
            .into_iter()
            .filter(|p| p.far <= alpha)
            .map(|p| p.gar)
            .fold(0.0, f64::max)
    }

    #[test]
    fn worked_roc_example() {
        let r = roc(&[5.0, 3.0, 1.0], &[0.0, 2.0, 4.0]).unwrap();
        let op = r.operating_point(1.0 / 3.0);
        assert_eq!(op.threshold, 2.0);
        assert_eq!(op.far, 1.0 / 3.0);
        assert_eq!(op.gar, 2.0 / 3.0);
        assert_eq!(r.points, brute_force_roc(&[5.0, 3.0, 1.0], &[0.0, 2.0, 4.0]));
    }

    #[test]
    fn separated_classes() {
        let r = roc(&[10.0, 11.0], &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(r.operating_point(0.0).gar, 1.0);
    }

    #[test]
    fn identical_scores_follow_diagonal() {
        let s: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let r = roc(&s, &s).unwrap();
        assert!(r.points.iter().all(|p| p.far == p.gar));
    }

    #[test]
    fn empty_class_rejected() {
        assert!(matches!(roc(&[], &[1.0]), Err(Error::EmptyClass("matching"))));
        assert!(matches!(roc(&[1.0], &[]), Err(Error::EmptyClass("non-matching"))));
    }

    #[test]
    fn moment_examples() {
        let m = moments(&[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.skewness, Some(0.0));
        let two = moments(&[-1.0, 1.0]).unwrap();
        assert_eq!(two.kurtosis, Some(1.0));
        let flat = moments(&[0.1; 7]).unwrap();
        assert!(flat.degenerate());
    }

    #[test]
    fn gaussian_moments() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = moments(&v).unwrap();
        // standard errors: sqrt(6/n) ~ 0.0077, sqrt(24/n) ~ 0.0155
        assert!(m.skewness.unwrap().abs() < 0.05);
        assert!((m.kurtosis.unwrap() - 3.0).abs() < 0.1);
    }

    #[test]
    fn histogram_counts_everything() {
        let v = [-5.0, 0.0, 0.5, 1.0, 9.0];
        let h = Histogram::new(&v, 0.0, 1.0, 4);
        assert_eq!(h.total(), 5);
        assert_eq!(h.counts, vec![2, 0, 1, 2]);
        assert_eq!(h.edges(1), (0.25, 0.5));
    }

    fn tiny_params(input_dim: usize) -> ModelParams {
        ModelParams::init(&ModelConfig {
            input_dim,
            d: 16,
            p: 1,
            encoder_hidden: vec![8],
            seed: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn aggregation_is_mean_of_enumerated_flips() {
        let params = tiny_params(4);
        let x1 = [0.1, -0.2, 0.3, 0.9];
        let x2 = [-0.5, 0.4, 0.0, 0.2];
        let agg = aggregate(&params, Modality::Vector, &x1, &x2).unwrap();
        for (k, (f1, f2)) in FLIP_ORDER.iter().enumerate() {
            let a = if *f1 { flip(&x1, Modality::Vector) } else { x1.to_vec() };
            let b = if *f2 { flip(&x2, Modality::Vector) } else { x2.to_vec() };
            let z = params
                .latent(&Matrix::row_vector(a), &Matrix::row_vector(b))
                .unwrap();
            assert_eq!(agg.contributions[k], z.data());
        }
        let c = &agg.contributions;
        assert_eq!(agg.z_bar[0], (c[0][0] + c[1][0] + c[2][0] + c[3][0]) / 4.0);
    }

    #[test]
    fn symmetric_inputs_give_identical_contributions() {
        let params = tiny_params(4);
        let x = [0.2, -0.1, -0.1, 0.2];
        let agg = aggregate(&params, Modality::Vector, &x, &x).unwrap();
        assert!(agg.contributions.iter().all(|c| *c == agg.z_bar));
    }

    #[test]
    fn mean_of_four_arithmetic() {
        let c = [vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        assert_eq!(mean_of_four(&c), vec![2.5]);
    }

    #[test]
    fn verify_margin_at_matching_mean() {
        // zero parameters put every latent point at the metric head's bias
        let mut params = ModelParams::zeros(&ModelConfig { input_dim: 3, d: 16, p: 1, ..ModelConfig::default() }).unwrap();
        let target = TargetSpec::default();
        let v = verify(&params, &target, Modality::Vector, &[0.1, 0.2, 0.3], &[0.0; 3]).unwrap();
        assert_eq!(v.margin, 800.0);
        assert_eq!(v.label, PairLabel::Matching);
        params.metric.last_mut().unwrap().bias.data_mut()[0] = 20.0;
        let tie = verify(&params, &target, Modality::Vector, &[0.1, 0.2, 0.3], &[0.0; 3]).unwrap();
        assert_eq!(tie.margin, 0.0);
        assert_eq!(tie.label, PairLabel::NonMatching);
    }

    #[test]
    fn pairs_file_parsing() {
        let text = "# header\n0 1 1\n2 5 0\n\n3 4 matching # trailing\n";
        let pairs = parse_pairs(text, Path::new("p.txt")).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[1], EvalPair { a: 2, b: 5, label: PairLabel::NonMatching });
        assert_eq!(parse_pairs(&format_pairs(&pairs), Path::new("p")).unwrap(), pairs);
        for bad in ["0 1", "0 x 1", "0 1 maybe"] {
            assert!(matches!(parse_pairs(bad, Path::new("p")), Err(Error::Parse { .. })), "{bad}");
        }
    }

    fn small_set() -> Dataset {
        generate_synthetic(&SyntheticSpec { n_identities: 6, images_per_identity: 5, ..SyntheticSpec::benchmark() }).unwrap()
    }

    #[test]
    fn eval_pairs_are_balanced_distinct_and_consistent() {
        let ds = small_set();
        let pairs = generate_eval_pairs(&ds, 40, 3).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.label.is_matching()).count(), 40);
        let keys: HashSet<_> = pairs.iter().map(|p| (p.a.min(p.b), p.a.max(p.b))).collect();
        assert_eq!(keys.len(), 80);
        check_pairs(&ds, &pairs).unwrap();
        assert_eq!(pairs, generate_eval_pairs(&ds, 40, 3).unwrap());
        assert!(generate_eval_pairs(&ds, 61, 3).is_err());
    }

    #[test]
    fn empty_or_one_sided_pair_sets_rejected() {
        let ds = small_set();
        let params = tiny_params(ds.input_dim);
        let t = TargetSpec::default();
        assert!(matches!(evaluate(&params, &t, &ds, &[]), Err(Error::EmptyClass(_))));
        let only_m = vec![EvalPair { a: 0, b: 1, label: PairLabel::Matching }];
        assert!(matches!(evaluate(&params, &t, &ds, &only_m), Err(Error::EmptyClass("non-matching"))));
        let mislabelled = vec![EvalPair { a: 0, b: 1, label: PairLabel::NonMatching }];
        assert!(matches!(evaluate(&params, &t, &ds, &mislabelled), Err(Error::Input(_))));
    }

    #[test]
    fn report_is_consistent() {
        let ds = small_set();
        let params = tiny_params(ds.input_dim);
        let pairs = generate_eval_pairs(&ds, 30, 1).unwrap();
        let r = evaluate(&params, &TargetSpec::default(), &ds, &pairs).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.histogram_z[0].total() + r.histogram_z[1].total(), 60);
        assert_eq!(r.histogram_zbar[0].total() + r.histogram_zbar[1].total(), 60);
        assert!(r.gar_at_far[0].1 >= r.gar_at_far[1].1);
        let dir = tempfile::tempdir().unwrap();
        r.write_csvs(dir.path()).unwrap();
        for f in ["summary.csv", "roc.csv", "moments.csv", "histogram_z.csv", "histogram_zbar.csv", "scores.csv"] {
            let body = fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(body.lines().count() > 1, "{f}");
        }
    }

    #[test]
    fn sweep_rejects_equal_means() {
        let ds = small_set();
        let pairs = generate_eval_pairs(&ds, 10, 1).unwrap();
        let err = diagnose_sweep(&ds, &ds, &pairs, &tiny_params(16).config, &TargetSpec::default(), &TrainConfig::default(), &[0.0, 40.0]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let ds = small_set();
        let pairs = generate_eval_pairs(&ds, 10, 1).unwrap();
        let cfg = TrainConfig { max_iterations: 3, ..TrainConfig::default() };
        let mut bad = tiny_params(16).config;
        bad.input_dim = 7;
        let rows = diagnose_sweep(&ds, &ds, &pairs, &bad, &TargetSpec::default(), &cfg, &[5.0, 40.0]).unwrap();
        assert!(rows.iter().all(|r| r.error.is_some()));
        let rows = diagnose_sweep(&ds, &ds, &pairs, &tiny_params(16).config, &TargetSpec::default(), &cfg, &[5.0, 40.0]).unwrap();
        assert_eq!(rows.iter().map(|r| r.w).collect::<Vec<_>>(), vec![5.0, 40.0]);
        assert!(rows.iter().all(|r| r.error.is_none() && r.steps == 3));
        assert_eq!(sweep_csv(&rows).lines().count(), 3);
    }

    proptest! {
        #[test]
        fn roc_matches_brute_force(
            m in prop::collection::vec(-20i32..20, 1..60),
            n in prop::collection::vec(-20i32..20, 1..60),
            alpha in 0.0f64..1.0,
        ) {
            // integer-valued scores force plenty of ties
            let m: Vec<f64> = m.into_iter().map(f64::from).collect();
            let n: Vec<f64> = n.into_iter().map(f64::from).collect();
            let r = roc(&m, &n).unwrap();
            prop_assert_eq!(&r.points, &brute_force_roc(&m, &n));
            prop_assert_eq!(r.gar_at_far(alpha), brute_force_gar(&m, &n, alpha));
            for w in r.points.windows(2) {
                prop_assert!(w[0].far <= w[1].far && w[0].gar <= w[1].gar);
            }
            prop_assert!(r.gar_at_far(1e-2) >= r.gar_at_far(1e-3));
        }

        #[test]
        fn decisions_survive_rule_rescaling(z in -100.0f64..100.0, k in 0.01f64..50.0) {
            let rule = TargetSpec::default().decision_rule();
            prop_assume!(rule.margin(&[z]).unwrap() != 0.0);
            prop_assert_eq!(rule.decide(&[z]).unwrap(), rule.rescaled(k).decide(&[z]).unwrap());
        }

        #[test]
        fn histogram_total_is_sample_count(v in prop::collection::vec(-1e3f64..1e3, 0..200), bins in 1usize..30) {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let h = Histogram::new(&v, lo.min(0.0), hi.max(1.0), bins);
            prop_assert_eq!(h.total(), v.len());
        }
    }

    #[test]
    fn random_score_sets_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let nm = rng.random_range(1..300);
            let nn = rng.random_range(1..300);
            let m: Vec<f64> = (0..nm).map(|_| (rng.random_range(-50.0..50.0f64) * 4.0).round() / 4.0).collect();
            let n: Vec<f64> = (0..nn).map(|_| (rng.random_range(-60.0..40.0f64) * 4.0).round() / 4.0).collect();
            assert_eq!(roc(&m, &n).unwrap().points, brute_force_roc(&m, &n));
        }
    }
}
