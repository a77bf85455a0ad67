//! Field error metrics, projection-quality metrics over labeled 2D
//! embeddings, Pareto selection and the labeled-subset stability protocol.
//!
//! Unlabeled points never enter the projection metrics.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::fieldio::{FlowGrid, Grid};

/// PSNR reported for a perfect prediction.
pub const PSNR_INF: f64 = f64::INFINITY;
pub const NEIGHBORHOOD_K: usize = 17;
pub const STABILITY_RUNS: usize = 20;

/// Peak signal-to-noise ratio for unit-range fields, in dB.
pub fn psnr(gt: &Grid, pred: &Grid) -> Result<f64> {
    if gt.dims() != pred.dims() {
        return Err(shape_err!("psnr: dims {:?} vs {:?}", gt.dims(), pred.dims()));
    }
    let mse = gt
        .values()
        .iter()
        .zip(pred.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / gt.cells() as f64;
    if mse == 0.0 {
        return Ok(PSNR_INF);
    }
    Ok(-10.0 * mse.log10())
}

/// Mean per-cell Euclidean distance between flow vectors.
pub fn epe(gt: &FlowGrid, pred: &FlowGrid) -> Result<f64> {
    if gt.dims() != pred.dims() || gt.rank() != pred.rank() {
        return Err(shape_err!("epe: flow {:?} vs {:?}", gt.dims(), pred.dims()));
    }
    let n = gt.cells();
    let mut total = 0.0;
    for c in 0..n {
        let d2: f64 = gt
            .components()
            .iter()
            .zip(pred.components())
            .map(|(a, b)| (a[c] - b[c]) * (a[c] - b[c]))
            .sum();
        total += d2.sqrt();
    }
    Ok(total / n as f64)
}

/// 2D points with optional class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<Option<usize>>,
}

impl Embedding2D {
    pub fn new(points: Vec<[f64; 2]>, labels: Vec<Option<usize>>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(invalid!("{} points but {} labels", points.len(), labels.len()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has non-finite coordinates".into()));
        }
        Ok(Self { points, labels })
    }

    pub fn labeled_all(points: Vec<[f64; 2]>, labels: Vec<usize>) -> Result<Self> {
        Self::new(points, labels.into_iter().map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Labeled points and their classes, in index order.
    pub fn labeled(&self) -> (Vec<[f64; 2]>, Vec<usize>) {
        self.points
            .iter()
            .zip(&self.labels)
            .filter_map(|(p, l)| l.map(|l| (*p, l)))
            .unzip()
    }

    /// Same points, labels kept only at `keep`.
    pub fn with_labels_at(&self, keep: &[usize]) -> Self {
        let mut labels = vec![None; self.len()];
        for &i in keep {
            labels[i] = self.labels[i];
        }
        Self { points: self.points.clone(), labels }
    }

    /// `x,y,label` with an empty label for unlabeled points.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,label\n");
        for (p, l) in self.points.iter().zip(&self.labels) {
            let lab = l.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{lab}", p[0], p[1]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("x,y,label") {
            return Err(Error::Format("embedding csv: expected header `x,y,label`".into()));
        }
        let (mut points, mut labels) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Format(format!("embedding csv line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let [x, y, l] = f[..] else { return Err(bad()) };
            points.push([x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?]);
            labels.push(if l.is_empty() { None } else { Some(l.parse().map_err(|_| bad())?) });
        }
        Self::new(points, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean fraction of each labeled point's `k` nearest labeled neighbors that
/// share its class. Ties in distance go to the lower index.
pub fn neighborhood_hit(emb: &Embedding2D, k: usize) -> Result<f64> {
    let (pts, lab) = emb.labeled();
    let n = pts.len();
    if k == 0 || n < k + 1 {
        return Err(invalid!("neighborhood hit with k={k} needs at least {} labeled points, got {n}", k + 1));
    }
    let mut total = 0.0;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (dist(pts[i], pts[j]), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let hits = cand[..k].iter().filter(|&&(_, j)| lab[j] == lab[i]).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / n as f64)
}

/// Mean silhouette over labeled points; points in singleton classes score 0.
pub fn silhouette(emb: &Embedding2D) -> Result<f64> {
    let (pts, lab) = emb.labeled();
    let classes: Vec<usize> = {
        let mut c = lab.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(invalid!("silhouette needs at least 2 classes, got {}", classes.len()));
    }
    let slot = |l: usize| classes.binary_search(&l).expect("class present");
    let mut size = vec![0usize; classes.len()];
    for &l in &lab {
        size[slot(l)] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; classes.len()];
    for i in 0..pts.len() {
        let own = slot(lab[i]);
        if size[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..pts.len() {
            if j != i {
                sums[slot(lab[j])] += dist(pts[i], pts[j]);
            }
        }
        let a = sums[own] / (size[own] - 1) as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / size[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / pts.len() as f64)
}

fn centroids(pts: &[[f64; 2]], lab: &[usize]) -> (Vec<usize>, Vec<[f64; 2]>) {
    let mut classes = lab.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut c = vec![[0.0; 2]; classes.len()];
    let mut n = vec![0usize; classes.len()];
    for (p, l) in pts.iter().zip(lab) {
        let k = classes.binary_search(l).expect("class present");
        c[k][0] += p[0];
        c[k][1] += p[1];
        n[k] += 1;
    }
    for (ci, ni) in c.iter_mut().zip(&n) {
        ci[0] /= *ni as f64;
        ci[1] /= *ni as f64;
    }
    (classes, c)
}

/// Mean pairwise centroid distance over mean point-to-own-centroid distance.
///
/// Zero-spread clusters with distinct centroids give `+∞`.
pub fn separability(emb: &Embedding2D) -> Result<f64> {
    let (pts, lab) = emb.labeled();
    let (classes, c) = centroids(&pts, &lab);
    if classes.len() < 2 {
        return Err(invalid!("separability needs at least 2 classes, got {}", classes.len()));
    }
    let mut between = 0.0;
    let mut pairs = 0usize;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            between += dist(c[i], c[j]);
            pairs += 1;
        }
    }
    between /= pairs as f64;
    let within = pts
        .iter()
        .zip(&lab)
        .map(|(p, l)| dist(*p, c[classes.binary_search(l).expect("class present")]))
        .sum::<f64>()
        / pts.len() as f64;
    Ok(match (between > 0.0, within > 0.0) {
        (false, _) => 0.0,
        (true, false) => f64::INFINITY,
        (true, true) => between / within,
    })
}

/// Mean of the per-axis population standard deviations after min-max
/// normalizing each axis to `[0, 1]`. Uses labeled points, or every point
/// when the embedding carries no labels at all.
pub fn spread(emb: &Embedding2D) -> Result<f64> {
    let (mut pts, _) = emb.labeled();
    if pts.is_empty() && emb.labels.iter().all(Option::is_none) {
        pts = emb.points.clone();
    }
    if pts.is_empty() {
        return Err(invalid!("spread of an empty embedding"));
    }
    let n = pts.len() as f64;
    let mut total = 0.0;
    for a in 0..2 {
        let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[a]), hi.max(p[a])));
        if hi <= lo {
            continue;
        }
        let v: Vec<f64> = pts.iter().map(|p| (p[a] - lo) / (hi - lo)).collect();
        let mean = v.iter().sum::<f64>() / n;
        total += (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    }
    Ok(total / 2.0)
}

/// Indices (ascending) of points no other point dominates; both objectives
/// higher-is-better, duplicates kept together.
pub fn pareto_frontier(records: &[(f64, f64)]) -> Result<Vec<usize>> {
    if records.iter().any(|(a, b)| a.is_nan() || b.is_nan()) {
        return Err(Error::Numeric("pareto_frontier: NaN objective".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| records[j].0.total_cmp(&records[i].0));
    let mut keep = Vec::new();
    let mut best_above = f64::NEG_INFINITY;
    let mut g = 0;
    while g < order.len() {
        let h = records[order[g]].0;
        let end = g + order[g..].iter().take_while(|&&i| records[i].0 == h).count();
        let group_max = order[g..end].iter().map(|&i| records[i].1).fold(f64::NEG_INFINITY, f64::max);
        for &i in &order[g..end] {
            let s = records[i].1;
            if s > best_above && s == group_max {
                keep.push(i);
            }
        }
        best_above = best_above.max(group_max);
        g = end;
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    NeighborhoodHit,
    Silhouette,
    Separability,
    Spread,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::NeighborhoodHit, Metric::Silhouette, Metric::Separability, Metric::Spread];

    pub fn name(self) -> &'static str {
        match self {
            Metric::NeighborhoodHit => "neighborhood_hit",
            Metric::Silhouette => "silhouette",
            Metric::Separability => "separability",
            Metric::Spread => "spread",
        }
    }

    pub fn eval(self, emb: &Embedding2D) -> Result<f64> {
        match self {
            Metric::NeighborhoodHit => neighborhood_hit(emb, NEIGHBORHOOD_K),
            Metric::Silhouette => silhouette(emb),
            Metric::Separability => separability(emb),
            Metric::Spread => spread(emb),
        }
    }
}

/// Replicate mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub runs: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid!("summary of zero replicates"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { mean, sd: var.sqrt(), runs: values.len() })
    }
}

/// Metric summaries for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub model: String,
    pub metrics: IndexMap<String, Summary>,
}

impl MetricRecord {
    /// Scores all four projection metrics once; metrics whose preconditions
    /// fail are left out.
    pub fn score(model: impl Into<String>, emb: &Embedding2D) -> Self {
        let mut metrics = IndexMap::new();
        for m in Metric::ALL {
            if let Ok(v) = m.eval(emb) {
                metrics.insert(m.name().to_string(), Summary { mean: v, sd: 0.0, runs: 1 });
            }
        }
        Self { model: model.into(), metrics }
    }
}

/// `model,metric,mean,sd,runs`.
pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from("model,metric,mean,sd,runs\n");
    for r in records {
        for (k, v) in &r.metrics {
            let _ = writeln!(s, "{},{k},{},{},{}", r.model, v.mean, v.sd, v.runs);
        }
    }
    s
}

/// Stability summaries at one label fraction; `None` marks an absent metric.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub fraction: f64,
    pub subset_size: usize,
    pub metrics: Vec<(Metric, Option<Summary>)>,
}

impl StabilityRow {
    pub fn get(&self, m: Metric) -> Option<Summary> {
        self.metrics.iter().find(|(k, _)| *k == m).and_then(|(_, s)| *s)
    }
}

/// Scores `n_runs` uniform subsamples of the labeled points at each fraction.
///
/// A metric is absent for a fraction when any replicate fails its
/// precondition. Run `r` of fraction `f` draws from ChaCha8 stream
/// `f·n_runs + r` of `seed`.
pub fn subset_stability(emb: &Embedding2D, fractions: &[f64], n_runs: usize, seed: u64) -> Result<Vec<StabilityRow>> {
    if n_runs == 0 {
        return Err(invalid!("n_runs must be positive"));
    }
    let labeled: Vec<usize> = (0..emb.len()).filter(|&i| emb.labels[i].is_some()).collect();
    let mut rows = Vec::with_capacity(fractions.len());
    for (fi, &f) in fractions.iter().enumerate() {
        if !(f > 0.0 && f <= 1.0) {
            return Err(invalid!("fraction {f} outside (0, 1]"));
        }
        let size = ((f * labeled.len() as f64).round() as usize).min(labeled.len());
        let mut vals: Vec<Option<Vec<f64>>> = vec![Some(Vec::new()); Metric::ALL.len()];
        for r in 0..n_runs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((fi * n_runs + r) as u64);
            let keep: Vec<usize> = sample(&mut rng, labeled.len(), size).into_iter().map(|i| labeled[i]).collect();
            let sub = emb.with_labels_at(&keep);
            for (slot, m) in vals.iter_mut().zip(Metric::ALL) {
                if let Some(v) = slot {
                    match m.eval(&sub) {
                        Ok(x) => v.push(x),
                        Err(Error::Invalid(_)) => *slot = None,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        let metrics = Metric::ALL
            .iter()
            .zip(vals)
            .map(|(&m, v)| Ok((m, v.map(|v| Summary::of(&v)).transpose()?)))
            .collect::<Result<_>>()?;
        rows.push(StabilityRow { fraction: f, subset_size: size, metrics });
    }
    Ok(rows)
}

/// `fraction,subset_size,metric,mean,sd`; absent metrics have empty mean and sd.
pub fn stability_to_csv(rows: &[StabilityRow]) -> String {
    let mut s = String::from("fraction,subset_size,metric,mean,sd\n");
    for r in rows {
        for (m, v) in &r.metrics {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "{},{},{},{},{}", r.fraction, r.subset_size, m.name(), v.mean, v.sd);
                }
                None => {
                    let _ = writeln!(s, "{},{},{},,", r.fraction, r.subset_size, m.name());
                }
            }
        }
    }
    s
}
