//! Instance grouping: flat-kernel mean shift over per-point instance
//! features, semantic assignment, and semantic-consistency splitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scene::{canonicalize_instances, Labeling};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftConfig {
    pub bandwidth: f64,
    /// Cap on shifts per seed; a seed that hits it keeps its last position.
    pub max_iters: usize,
    /// Modes closer than this are merged.
    pub mode_merge_radius: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            max_iters: 300,
            mode_merge_radius: 0.5,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.mode_merge_radius >= 0.0 && self.mode_merge_radius <= self.bandwidth) {
            return Err(Error::InvalidArgument(format!(
                "mode_merge_radius must lie in [0, bandwidth], got {}",
                self.mode_merge_radius
            )));
        }
        Ok(())
    }
}

/// Points sorted along one coordinate so that ball queries only scan a
/// window of candidates; the result is exact.
struct BallIndex<'a> {
    data: &'a [f64],
    dim: usize,
    axis: usize,
    /// (coordinate on `axis`, point index), ascending.
    order: Vec<(f64, usize)>,
}

impl<'a> BallIndex<'a> {
    fn new(data: &'a [f64], dim: usize) -> Self {
        let n = data.len() / dim;
        // Sort along the axis of largest variance for the tightest windows.
        let axis = (0..dim)
            .map(|a| {
                let mean = (0..n).map(|i| data[i * dim + a]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (data[i * dim + a] - mean).powi(2)).sum::<f64>();
                (a, var)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        let mut order: Vec<(f64, usize)> = (0..n).map(|i| (data[i * dim + axis], i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self { data, dim, axis, order }
    }

    /// Indices of the points within `radius` of `x` (inclusive), ascending.
    fn ball(&self, x: &[f64], radius: f64) -> Vec<usize> {
        let lo = self.order.partition_point(|p| p.0 < x[self.axis] - radius);
        let hi = self.order.partition_point(|p| p.0 <= x[self.axis] + radius);
        let r2 = radius * radius;
        let mut members = Vec::new();
        for &(_, i) in &self.order[lo..hi] {
            let p = &self.data[i * self.dim..(i + 1) * self.dim];
            let mut d2 = 0.0;
            for (a, b) in p.iter().zip(x) {
                d2 += (a - b) * (a - b);
                if d2 > r2 {
                    break;
                }
            }
            if d2 <= r2 {
                members.push(i);
            }
        }
        members.sort_unstable();
        members
    }

    /// Mean of the given points, summed in the given order.
    fn mean(&self, members: &[usize]) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for &i in members {
            for (m, v) in mean.iter_mut().zip(&self.data[i * self.dim..(i + 1) * self.dim]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        mean
    }
}

/// 128-bit fingerprint of a sorted member set.
fn set_key(members: &[usize]) -> (u64, u64, usize) {
    use std::hash::{Hash, Hasher};
    let mut a = std::collections::hash_map::DefaultHasher::new();
    let mut b = std::collections::hash_map::DefaultHasher::new();
    0x5eed_u64.hash(&mut b);
    members.hash(&mut a);
    members.hash(&mut b);
    (a.finish(), b.finish(), members.len())
}

/// Flat-kernel mean shift seeded from every point.
///
/// Each seed repeatedly moves to the mean of the points within
/// `bandwidth`. With a flat kernel the next position depends only on the
/// current member set, and a seed has converged — exactly — once the set
/// no longer changes (its position is then the mean of its own ball).
/// Trajectories are therefore memoized by member set: a seed that reaches
/// a set already resolved by another seed takes that seed's mode. Modes
/// are ranked by support (ball size, ties by seed index) and greedily
/// accepted unless within `mode_merge_radius` of an accepted mode. Each
/// point joins the accepted mode nearest to its own mode. Cluster ids are
/// numbered by first appearance in point order.
pub fn mean_shift(features: &Tensor, cfg: &MeanShiftConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    if !features.is_finite() {
        return Err(Error::NonFinite("mean-shift features contain NaN or infinity".into()));
    }
    let n = features.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let dim = features.last_dim();
    let data = features.data();
    let index = BallIndex::new(data, dim);
    type Mode = (Vec<f64>, usize);
    let memo: std::sync::Mutex<std::collections::HashMap<(u64, u64, usize), std::sync::Arc<Mode>>> =
        Default::default();
    let modes: Vec<std::sync::Arc<Mode>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut set = index.ball(&data[i * dim..(i + 1) * dim], cfg.bandwidth);
            let mut visited = Vec::new();
            let mut result = None;
            for _ in 0..cfg.max_iters {
                let key = set_key(&set);
                if let Some(m) = memo.lock().expect("memo lock").get(&key) {
                    result = Some(m.clone());
                    break;
                }
                visited.push(key);
                let x = index.mean(&set);
                let next = index.ball(&x, cfg.bandwidth);
                if next == set {
                    result = Some(std::sync::Arc::new((x, set.len())));
                    break;
                }
                set = next;
            }
            match result {
                Some(m) => {
                    let mut memo = memo.lock().expect("memo lock");
                    for k in visited {
                        memo.insert(k, m.clone());
                    }
                    m
                }
                // Iteration cap: not a function of the set alone, so not memoized.
                None => std::sync::Arc::new((index.mean(&set), set.len())),
            }
        })
        .collect();

    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| modes[b].1.cmp(&modes[a].1).then(a.cmp(&b)));
    let r2 = cfg.mode_merge_radius * cfg.mode_merge_radius;
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers: Vec<&[f64]> = Vec::new();
    for &s in &ranked {
        let m = &modes[s].0;
        if !centers.iter().any(|c| d2(c, m) <= r2) {
            centers.push(m);
        }
    }
    let raw: Vec<u32> = modes
        .iter()
        .map(|m| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = d2(center, &m.0);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best as u32
        })
        .collect();
    Ok(canonicalize_instances(&raw))
}

/// Index of the largest count; ties go to the lower index.
fn majority(counts: &[usize]) -> u32 {
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best as u32
}

/// Class of each instance by majority vote of its points (ties → lower
/// class id).
pub fn instance_classes(instance: &[u32], semantic: &[u32]) -> BTreeMap<u32, u32> {
    let k = semantic.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
    let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (&i, &s) in instance.iter().zip(semantic) {
        counts.entry(i).or_insert_with(|| vec![0; k])[s as usize] += 1;
    }
    counts.into_iter().map(|(i, c)| (i, majority(&c))).collect()
}

/// Per-point argmax of the logits (ties → lower class) combined with the
/// cluster ids.
pub fn assign_semantics(clusters: &[u32], logits: &Tensor) -> Result<Labeling> {
    if logits.rank() != 2 || logits.rows() != clusters.len() {
        return Err(Error::shape(
            "assign_semantics",
            format!("{} clusters for logits {:?}", clusters.len(), logits.shape()),
        ));
    }
    let semantic = (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    Ok(Labeling {
        semantic,
        instance: clusters.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub alpha: f64,
    /// Average GT instance size (points) per class from training data.
    /// Classes with a non-positive average never spawn an instance.
    pub avg_size: Vec<f64>,
}

impl SplitConfig {
    pub const DEFAULT_ALPHA: f64 = 0.25;

    pub fn threshold(&self, class: usize) -> Option<f64> {
        let avg = *self.avg_size.get(class)?;
        (avg > 0.0).then_some(self.alpha * avg)
    }
}

/// Split every instance in which two or more classes reach their threshold
/// `th_c = alpha × avg_size(c)`: each such class becomes its own instance,
/// and points of the remaining classes join the qualifying class with the
/// most points (ties → lower class id). Instances with at most one
/// qualifying class are unchanged. Output ids are canonical.
pub fn split_inconsistent(instance: &[u32], semantic: &[u32], cfg: &SplitConfig) -> Result<Vec<u32>> {
    if instance.len() != semantic.len() {
        return Err(Error::shape(
            "split_inconsistent",
            format!("{} instance and {} semantic labels", instance.len(), semantic.len()),
        ));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let k = semantic.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
    let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (&i, &s) in instance.iter().zip(semantic) {
        counts.entry(i).or_insert_with(|| vec![0; k])[s as usize] += 1;
    }
    // For every split instance, the target class of each member class.
    let mut routes: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&id, c) in &counts {
        let qualifying: Vec<usize> = (0..k)
            .filter(|&cls| c[cls] > 0 && cfg.threshold(cls).is_some_and(|th| c[cls] as f64 >= th))
            .collect();
        if qualifying.len() <= 1 {
            continue;
        }
        let mut sink = qualifying[0];
        for &q in &qualifying {
            if c[q] > c[sink] {
                sink = q;
            }
        }
        let route = (0..k)
            .map(|cls| if qualifying.contains(&cls) { cls } else { sink } as u32)
            .collect();
        routes.insert(id, route);
    }
    // Encode (instance, routed class) pairs as fresh ids, then canonicalize.
    let keys: Vec<u64> = instance
        .iter()
        .zip(semantic)
        .map(|(&i, &s)| {
            let cls = routes.get(&i).map_or(u32::MAX, |r| r[s as usize]);
            ((i as u64) << 32) | cls as u64
        })
        .collect();
    let mut ids = BTreeMap::new();
    let mut next = 0u32;
    Ok(keys
        .iter()
        .map(|k| {
            *ids.entry(*k).or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect())
}

/// Text predictions: one line per point, `point_index instance_id semantic_id`.
pub fn format_predictions(labels: &Labeling) -> String {
    let mut s = String::with_capacity(labels.len() * 12);
    for (i, (inst, sem)) in labels.instance.iter().zip(&labels.semantic).enumerate() {
        writeln!(s, "{i} {inst} {sem}").expect("write to string");
    }
    s
}

pub fn parse_predictions(text: &str) -> Result<Labeling> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse = |f: Option<&str>, what: &str| -> Result<u64> {
            f.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: bad {what} in {line:?}", ln + 1)))
        };
        let mut it = line.split_whitespace();
        let idx = parse(it.next(), "point index")? as usize;
        let inst = parse(it.next(), "instance id")? as u32;
        let sem = parse(it.next(), "semantic id")? as u32;
        if it.next().is_some() {
            return Err(Error::InvalidArgument(format!("line {}: extra fields", ln + 1)));
        }
        rows.push((idx, inst, sem));
    }
    rows.sort_by_key(|r| r.0);
    let mut out = Labeling {
        semantic: Vec::with_capacity(rows.len()),
        instance: Vec::with_capacity(rows.len()),
    };
    for (expect, (idx, inst, sem)) in rows.into_iter().enumerate() {
        if idx != expect {
            return Err(Error::InvalidArgument(format!(
                "point indices must cover 0..N exactly once; missing or repeated index near {expect}"
            )));
        }
        out.instance.push(inst);
        out.semantic.push(sem);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, labels: &Labeling) -> Result<()> {
    std::fs::write(path, format_predictions(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Labeling> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text)
}
