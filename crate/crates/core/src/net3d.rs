//! EdgeConv propagation network: lifts bird's-eye-view instance features
//! to every point of the cloud, trained on cylindrical blocks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bev::UnprojectedFeatures;
use crate::error::{Error, Result};
use crate::numeric::nn::{he_normal, Dense};
use crate::numeric::{AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scene::{PointCloud, NUM_FEATURES};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_BLOCK_POINTS: usize = 1024;
pub const DEFAULT_BLOCK_DIAMETER: f64 = 1.0;
pub const DEFAULT_EDGE_WIDTHS: [usize; 3] = [64, 64, 64];
pub const DEFAULT_HEAD_WIDTH: usize = 128;

/// `N × k` neighbour table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.neighbors.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact k nearest neighbours of every row of the `N × dim` matrix
/// `points` by Euclidean distance, excluding the point itself. Neighbours
/// are ordered by distance, ties broken by lower index.
pub fn build_knn(points: &[f64], dim: usize, k: usize) -> Result<KnnGraph> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::shape("build_knn", format!("{} values with dim {dim}", points.len())));
    }
    let n = points.len() / dim;
    if n <= k {
        return Err(Error::InvalidArgument(format!("kNN needs more than k={k} points, got {n}")));
    }
    if k == 0 {
        return Ok(KnnGraph { k, neighbors: Vec::new() });
    }
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pi = &points[i * dim..(i + 1) * dim];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(pi, &points[j * dim..(j + 1) * dim]), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnGraph {
        k,
        neighbors: rows.concat(),
    })
}

/// EdgeConv with a single-layer shared MLP on `concat(x_i, x_j − x_i)`,
/// ReLU, and max aggregation over the neighbours.
///
/// The MLP weight is stored as its two row blocks `w_self` (acting on
/// `x_i`) and `w_edge` (acting on `x_j − x_i`). Because the pre-activation
/// splits as `x_i·(w_self − w_edge) + x_j·w_edge + b` and ReLU is
/// monotone, `max_j relu(·) = relu(x_i·(w_self − w_edge) + b + max_j x_j·w_edge)`,
/// which is what [`EdgeConv::forward`] evaluates.
#[derive(Debug, Clone, Copy)]
pub struct EdgeConv {
    pub w_self: ParamId,
    pub w_edge: ParamId,
    pub bias: ParamId,
}

impl EdgeConv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        // He initialization over the 2·cin concatenated inputs.
        let w_self = store.add(format!("{name}.w_self"), he_normal(rng, &[cin, cout], 2 * cin), true);
        let w_edge = store.add(format!("{name}.w_edge"), he_normal(rng, &[cin, cout], 2 * cin), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self { w_self, w_edge, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, graph: &KnnGraph) -> Result<Var> {
        let ws = g.param(store, self.w_self);
        let we = g.param(store, self.w_edge);
        let b = g.param(store, self.bias);
        let a_self = g.matmul(x, ws)?;
        let a_edge = g.matmul(x, we)?;
        let center = g.sub(a_self, a_edge)?;
        let center = g.add_bias(center, b)?;
        let nmax = g.neighbor_max(a_edge, &graph.neighbors, graph.k)?;
        let pre = g.add(center, nmax)?;
        Ok(g.relu(pre))
    }
}

/// Architecture hyper-parameters of the propagation network.
#[derive(Debug, Clone, PartialEq)]
pub struct Net3dConfig {
    pub input_dim: usize,
    pub edge_widths: Vec<usize>,
    pub head_width: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct PropagationNet {
    pub config: Net3dConfig,
    edges: Vec<EdgeConv>,
    hidden: Dense,
    instance_head: Dense,
    semantic_head: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct PropagationOutput {
    pub features: Var,
    pub logits: Var,
}

impl PropagationNet {
    pub fn new(store: &mut ParamStore, config: Net3dConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        let mut cin = config.input_dim;
        for (l, &w) in config.edge_widths.iter().enumerate() {
            edges.push(EdgeConv::new(store, &format!("prop.edge{l}"), cin, w, &mut rng));
            cin = w;
        }
        let cat: usize = config.input_dim + config.edge_widths.iter().sum::<usize>();
        let hidden = Dense::new(store, "prop.hidden", cat, config.head_width, &mut rng);
        let instance_head = Dense::new(store, "prop.instance_head", config.head_width, config.embed_dim, &mut rng);
        let semantic_head = Dense::new(store, "prop.semantic_head", config.head_width, config.num_classes, &mut rng);
        Self {
            config,
            edges,
            hidden,
            instance_head,
            semantic_head,
        }
    }

    /// `input` is `N × input_dim`; the head sees the input and every
    /// EdgeConv output.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Tensor, graph: &KnnGraph) -> Result<PropagationOutput> {
        if input.rank() != 2 || input.last_dim() != self.config.input_dim || input.rows() != graph.len() {
            return Err(Error::shape(
                "propagation_net",
                format!(
                    "input {:?} for {} graph rows, expected width {}",
                    input.shape(),
                    graph.len(),
                    self.config.input_dim
                ),
            ));
        }
        let x0 = g.constant(input);
        let mut feats = vec![x0];
        let mut x = x0;
        for e in &self.edges {
            x = e.forward(g, store, x, graph)?;
            feats.push(x);
        }
        let cat = g.concat(&feats)?;
        let h = self.hidden.forward(g, store, cat)?;
        let h = g.relu(h);
        Ok(PropagationOutput {
            features: self.instance_head.forward(g, store, h)?,
            logits: self.semantic_head.forward(g, store, h)?,
        })
    }

    /// Inference on one block; returns `(N × D, N × K)`.
    pub fn predict(&self, store: &ParamStore, input: Tensor, graph: &KnnGraph) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, store, input, graph)?;
        Ok((g.value(out.features).clone(), g.value(out.logits).clone()))
    }
}

/// Options for building block graphs and tiling scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub diameter: f64,
    pub points: usize,
    pub k: usize,
    /// Multiplier on z when measuring neighbour distances (1 = plain xyz).
    pub knn_z_scale: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            diameter: DEFAULT_BLOCK_DIAMETER,
            points: DEFAULT_BLOCK_POINTS,
            k: DEFAULT_K,
            knn_z_scale: 1.0,
        }
    }
}

/// Indices of `n` points drawn uniformly from the vertical cylinder of the
/// given diameter around `center`; with replacement when the cylinder holds
/// fewer than `n` points.
pub fn sample_block(cloud: &PointCloud, center: [f64; 2], diameter: f64, n: usize, seed: u64) -> Result<Vec<usize>> {
    let r2 = (diameter / 2.0).powi(2);
    let cand: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = cloud.xyz(i);
            (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) <= r2
        })
        .collect();
    if cand.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no points within {diameter} m cylinder at ({}, {})",
            center[0], center[1]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(if cand.len() >= n {
        let mut picked: Vec<usize> = sample(&mut rng, cand.len(), n).into_iter().map(|i| cand[i]).collect();
        picked.sort_unstable();
        picked
    } else {
        (0..n).map(|_| cand[rng.random_range(0..cand.len())]).collect()
    })
}

/// Per-point regression targets: the mean visible embedding of each point's
/// GT instance. Instances without visible points are undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeatures {
    /// `N × D`, zero on undefined rows.
    pub targets: Tensor,
    pub defined: Vec<bool>,
}

pub fn compute_targets(features: &UnprojectedFeatures, gt_instance: &[u32]) -> Result<TargetFeatures> {
    let n = gt_instance.len();
    let d = features.dim;
    if features.seen.len() != n {
        return Err(Error::shape(
            "compute_targets",
            format!("{} feature rows for {n} labels", features.seen.len()),
        ));
    }
    let num_ids = gt_instance.iter().map(|&i| i as usize + 1).max().unwrap_or(0);
    let mut sums = vec![0.0; num_ids * d];
    let mut counts = vec![0usize; num_ids];
    for i in (0..n).filter(|&i| features.seen[i]) {
        let id = gt_instance[i] as usize;
        counts[id] += 1;
        for (s, v) in sums[id * d..(id + 1) * d].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let mut targets = vec![0.0; n * d];
    let mut defined = vec![false; n];
    for i in 0..n {
        let id = gt_instance[i] as usize;
        if counts[id] > 0 {
            defined[i] = true;
            for (t, s) in targets[i * d..(i + 1) * d].iter_mut().zip(&sums[id * d..(id + 1) * d]) {
                *t = s / counts[id] as f64;
            }
        }
    }
    Ok(TargetFeatures {
        targets: Tensor::new(vec![n, d], targets)?,
        defined,
    })
}

impl TargetFeatures {
    pub fn select(&self, idx: &[usize]) -> TargetFeatures {
        let d = self.targets.last_dim();
        let mut t = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            t.extend_from_slice(self.targets.row(i));
        }
        TargetFeatures {
            targets: Tensor::new(vec![idx.len(), d], t).expect("rows"),
            defined: idx.iter().map(|&i| self.defined[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceLoss3d {
    pub value: Var,
    /// No row had a defined target; the loss is defined as 0.
    pub no_targets: bool,
}

/// Mean Euclidean distance between predicted and target rows over rows
/// with a defined target.
pub fn instance_loss_3d(g: &mut Graph, pred: Var, targets: &TargetFeatures) -> Result<InstanceLoss3d> {
    let value = g.row_distance_mean(pred, &targets.targets, &targets.defined)?;
    Ok(InstanceLoss3d {
        value,
        no_targets: !targets.defined.iter().any(|&d| d),
    })
}

/// Network input rows `N × (9 + D)`: the point features followed by the
/// unprojected BEV features (zero for unseen points). Heights are taken
/// relative to `ground`.
pub fn point_inputs(cloud: &PointCloud, bev: &UnprojectedFeatures, ground: f64) -> Result<Tensor> {
    if bev.seen.len() != cloud.len() {
        return Err(Error::shape(
            "point_inputs",
            format!("{} BEV rows for {} points", bev.seen.len(), cloud.len()),
        ));
    }
    let width = NUM_FEATURES + bev.dim;
    let mut data = Vec::with_capacity(cloud.len() * width);
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        data.extend_from_slice(p);
        let z = data.len() - NUM_FEATURES + 2;
        data[z] -= ground;
        data.extend_from_slice(bev.row(i));
    }
    Tensor::new(vec![cloud.len(), width], data)
}

/// Rows of `inputs` at `idx` with x, y re-centred on `center`.
pub fn block_inputs(inputs: &Tensor, idx: &[usize], center: [f64; 2]) -> Tensor {
    let c = inputs.last_dim();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        let start = data.len();
        data.extend_from_slice(inputs.row(i));
        data[start] -= center[0];
        data[start + 1] -= center[1];
    }
    Tensor::new(vec![idx.len(), c], data).expect("rows")
}

/// kNN graph over the first three columns of block inputs, with z scaled.
pub fn block_graph(block: &Tensor, cfg: &BlockConfig) -> Result<KnnGraph> {
    let pts: Vec<f64> = (0..block.rows())
        .flat_map(|i| {
            let r = block.row(i);
            [r[0], r[1], r[2] * cfg.knn_z_scale]
        })
        .collect();
    build_knn(&pts, 3, cfg.k)
}

/// Losses of one 3D training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport3d {
    pub step: u64,
    pub l_inst: f64,
    pub l_sem: f64,
}

impl LossReport3d {
    pub const CSV_HEADER: &'static str = "step,L_inst,L_sem";

    pub fn total(&self) -> f64 {
        self.l_inst + self.l_sem
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.l_inst, self.l_sem)
    }
}

/// One training example: a block's inputs, graph, targets and labels.
#[derive(Debug, Clone)]
pub struct Block {
    pub inputs: Tensor,
    pub graph: KnnGraph,
    pub targets: TargetFeatures,
    pub semantic: Vec<usize>,
}

/// `L_inst + L_sem` (unit weights) on one block, then Adam.
pub fn train_step_3d(
    net: &PropagationNet,
    store: &mut ParamStore,
    adam: &mut AdamState,
    block: &Block,
    class_weights: &[f64],
) -> Result<LossReport3d> {
    let mut g = Graph::new(true);
    let out = net.forward(&mut g, store, block.inputs.clone(), &block.graph)?;
    let li = instance_loss_3d(&mut g, out.features, &block.targets)?;
    let ls = g.cross_entropy(out.logits, &block.semantic, class_weights)?;
    let total = g.add(li.value, ls)?;
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("3D loss is {value}")));
    }
    store.zero_grad();
    g.backward(total)?;
    g.accumulate_param_grads(store);
    adam.step(store)?;
    Ok(LossReport3d {
        step: adam.step,
        l_inst: g.value(li.value).item(),
        l_sem: g.value(ls).item(),
    })
}

/// Block centres covering the xy bounding box of `xy` on a square grid of
/// the given stride. Every point lies within `stride/√2` of some centre.
pub fn tile_centers(xy: &[[f64; 2]], stride: f64) -> Vec<[f64; 2]> {
    let Some(first) = xy.first() else { return Vec::new() };
    let (mut lo, mut hi) = (*first, *first);
    for p in xy {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let nx = ((hi[0] - lo[0]) / stride).ceil() as usize + 1;
    let ny = ((hi[1] - lo[1]) / stride).ceil() as usize + 1;
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out.push([lo[0] + ix as f64 * stride, lo[1] + iy as f64 * stride]);
        }
    }
    out
}

/// Members of each inference block: every point within the cylinder, in
/// index order, topped up with the nearest points in xy when the cylinder
/// holds `k` points or fewer. A cloud that fits in one cylinder around its
/// bounding-box centre yields that single block.
pub fn scene_blocks(cloud: &PointCloud, cfg: &BlockConfig) -> Vec<([f64; 2], Vec<usize>)> {
    let n = cloud.len();
    if n == 0 {
        return Vec::new();
    }
    let xy: Vec<[f64; 2]> = (0..n).map(|i| {
        let p = cloud.xyz(i);
        [p[0], p[1]]
    }).collect();
    let r2 = (cfg.diameter / 2.0).powi(2);
    let d2 = |p: &[f64; 2], c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    let b = cloud.bounds().expect("non-empty");
    let mid = [(b.min[0] + b.max[0]) / 2.0, (b.min[1] + b.max[1]) / 2.0];
    let centers = if xy.iter().all(|p| d2(p, &mid) <= r2) {
        vec![mid]
    } else {
        tile_centers(&xy, cfg.diameter / 2.0)
    };
    let need = (cfg.k + 1).min(n);
    centers
        .into_iter()
        .filter_map(|c| {
            let mut members: Vec<usize> = (0..n).filter(|&i| d2(&xy[i], &c) <= r2).collect();
            if members.is_empty() {
                return None;
            }
            if members.len() < need {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&i, &j| d2(&xy[i], &c).total_cmp(&d2(&xy[j], &c)).then(i.cmp(&j)));
                members = order[..need].to_vec();
                members.sort_unstable();
            }
            Some((c, members))
        })
        .collect()
}

/// Full-scene inference: every block is evaluated independently and the
/// per-point features and logits are averaged over the blocks covering
/// each point, accumulated in block order.
pub fn infer_full_scene(
    net: &PropagationNet,
    store: &ParamStore,
    cloud: &PointCloud,
    inputs: &Tensor,
    cfg: &BlockConfig,
) -> Result<(Tensor, Tensor)> {
    let n = cloud.len();
    let d = net.config.embed_dim;
    let k = net.config.num_classes;
    let blocks = scene_blocks(cloud, cfg);
    let results: Vec<Result<(Vec<usize>, Tensor, Tensor)>> = blocks
        .into_par_iter()
        .map(|(c, idx)| {
            let x = block_inputs(inputs, &idx, c);
            let graph = block_graph(&x, cfg)?;
            let (f, l) = net.predict(store, x, &graph)?;
            Ok((idx, f, l))
        })
        .collect();
    let mut feat = vec![0.0; n * d];
    let mut logit = vec![0.0; n * k];
    let mut count = vec![0usize; n];
    for r in results {
        let (idx, f, l) = r?;
        for (row, &i) in idx.iter().enumerate() {
            count[i] += 1;
            for (a, b) in feat[i * d..(i + 1) * d].iter_mut().zip(f.row(row)) {
                *a += b;
            }
            for (a, b) in logit[i * k..(i + 1) * k].iter_mut().zip(l.row(row)) {
                *a += b;
            }
        }
    }
    for i in 0..n {
        let c = count[i] as f64;
        debug_assert!(c > 0.0, "point {i} not covered");
        feat[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= c);
        logit[i * k..(i + 1) * k].iter_mut().for_each(|v| *v /= c);
    }
    Ok((Tensor::new(vec![n, d], feat)?, Tensor::new(vec![n, k], logit)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_xy(points: &[[f64; 3]]) -> PointCloud {
        let mut f = Vec::new();
        for p in points {
            f.extend_from_slice(&[p[0], p[1], p[2], 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        }
        PointCloud::new(f).unwrap()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn knn_on_a_line_with_ties() {
        // Points 0, 1, 3 on a line: 0's neighbour is 1; 1's is 0 (dist 1 vs 2);
        // 3's is 1.
        let g = build_knn(&[0.0, 1.0, 3.0], 1, 1).unwrap();
        assert_eq!(g.neighbors, vec![1, 0, 1]);
        // Equidistant neighbours resolve to the lower index.
        let g = build_knn(&[0.0, -1.0, 1.0], 1, 1).unwrap();
        assert_eq!(g.row(0), &[1]);
    }

    #[test]
    fn knn_complete_graph_and_size_limit() {
        let pts = random_points(5, 3, 1);
        let g = build_knn(&pts, 3, 4).unwrap();
        for i in 0..5 {
            let mut r = g.row(i).to_vec();
            r.sort_unstable();
            let want: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(r, want);
        }
        assert!(matches!(build_knn(&pts, 3, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn knn_matches_full_sort() {
        for seed in 0..5 {
            let pts = random_points(200, 3, seed);
            let g = build_knn(&pts, 3, 20).unwrap();
            for i in 0..200 {
                let mut all: Vec<(f64, usize)> = (0..200)
                    .filter(|&j| j != i)
                    .map(|j| (dist2(&pts[i * 3..i * 3 + 3], &pts[j * 3..j * 3 + 3]), j))
                    .collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let want: Vec<usize> = all[..20].iter().map(|p| p.1).collect();
                assert_eq!(g.row(i), &want[..]);
            }
        }
    }

    /// Direct evaluation of `max_j relu([x_i, x_j − x_i]·W + b)`.
    fn edgeconv_reference(x: &[f64], cin: usize, graph: &KnnGraph, ws: &[f64], we: &[f64], b: &[f64]) -> Vec<f64> {
        let cout = b.len();
        let n = x.len() / cin;
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            for o in 0..cout {
                let mut best = f64::NEG_INFINITY;
                for &j in graph.row(i) {
                    let mut v = b[o];
                    for c in 0..cin {
                        v += x[i * cin + c] * ws[c * cout + o] + (x[j * cin + c] - x[i * cin + c]) * we[c * cout + o];
                    }
                    best = best.max(v.max(0.0));
                }
                out[i * cout + o] = best;
            }
        }
        out
    }

    #[test]
    fn edgeconv_equals_direct_formula() {
        for (seed, k) in [(0u64, 1usize), (1, 4), (2, 20)] {
            let (n, cin, cout) = (30, 5, 7);
            let x = random_points(n, cin, seed);
            let graph = build_knn(&x, cin, k).unwrap();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let e = EdgeConv::new(&mut store, "e", cin, cout, &mut rng);
            let bias: Vec<f64> = (0..cout).map(|o| 0.1 * o as f64 - 0.3).collect();
            store.get_mut(e.bias).value = Tensor::from_vec(bias.clone());
            let mut g = Graph::new(false);
            let xv = g.constant(Tensor::new(vec![n, cin], x.clone()).unwrap());
            let y = e.forward(&mut g, &store, xv, &graph).unwrap();
            let want = edgeconv_reference(&x, cin, &graph, store.value(e.w_self).data(), store.value(e.w_edge).data(), &bias);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn edgeconv_with_identical_neighbours_sees_only_self_term() {
        // All points equal: x_j − x_i = 0, so the output is relu(x·w_self + b).
        let (n, cin, cout) = (4, 3, 2);
        let x = [0.7, -0.2, 0.4].repeat(n);
        let graph = build_knn(&x, cin, 2).unwrap();
        let mut store = ParamStore::new();
        let e = EdgeConv::new(&mut store, "e", cin, cout, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new(false);
        let xv = g.constant(Tensor::new(vec![n, cin], x.clone()).unwrap());
        let y = e.forward(&mut g, &store, xv, &graph).unwrap();
        let ws = store.value(e.w_self).data();
        for i in 0..n {
            for o in 0..cout {
                let v: f64 = (0..cin).map(|c| x[c] * ws[c * cout + o]).sum::<f64>().max(0.0);
                assert!((g.value(y).data()[i * cout + o] - v).abs() < 1e-12);
            }
        }
    }

    fn small_net(store: &mut ParamStore) -> PropagationNet {
        PropagationNet::new(
            store,
            Net3dConfig {
                input_dim: 6,
                edge_widths: vec![8, 8],
                head_width: 16,
                embed_dim: 3,
                num_classes: 4,
            },
            5,
        )
    }

    #[test]
    fn propagation_net_is_permutation_equivariant() {
        let n = 40;
        let x = random_points(n, 6, 9);
        let mut store = ParamStore::new();
        let net = small_net(&mut store);
        let g1 = build_knn(&x, 6, 5).unwrap();
        let (f1, l1) = net.predict(&store, Tensor::new(vec![n, 6], x.clone()).unwrap(), &g1).unwrap();
        // Reverse the point order and the graph accordingly.
        let perm: Vec<usize> = (0..n).rev().collect();
        let xp: Vec<f64> = perm.iter().flat_map(|&i| x[i * 6..i * 6 + 6].to_vec()).collect();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let neighbors = perm.iter().flat_map(|&old| g1.row(old).iter().map(|&j| inv[j]).collect::<Vec<_>>()).collect();
        let g2 = KnnGraph { k: 5, neighbors };
        let (f2, l2) = net.predict(&store, Tensor::new(vec![n, 6], xp).unwrap(), &g2).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in f1.row(old).iter().zip(f2.row(new)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in l1.row(old).iter().zip(l2.row(new)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_sampling_respects_cylinder_and_replacement() {
        let pts: Vec<[f64; 3]> = (0..400).map(|i| [(i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1, (i % 7) as f64]).collect();
        let cloud = cloud_xy(&pts);
        let idx = sample_block(&cloud, [1.0, 1.0], 1.0, 50, 1).unwrap();
        assert_eq!(idx.len(), 50);
        let mut u = idx.clone();
        u.dedup();
        assert_eq!(u.len(), 50, "enough points: no repeats");
        for &i in &idx {
            let p = cloud.xyz(i);
            assert!((p[0] - 1.0).powi(2) + (p[1] - 1.0).powi(2) <= 0.25 + 1e-12);
        }
        // Far corner holds few points: sampled with replacement.
        let idx = sample_block(&cloud, [-0.35, -0.35], 1.0, 30, 2).unwrap();
        assert_eq!(idx.len(), 30);
        let mut u = idx.clone();
        u.sort_unstable();
        u.dedup();
        assert!(u.len() < 30);
        assert_eq!(idx, sample_block(&cloud, [-0.35, -0.35], 1.0, 30, 2).unwrap());
        assert!(sample_block(&cloud, [50.0, 50.0], 1.0, 10, 0).is_err());
    }

    #[test]
    fn targets_average_visible_features_per_instance() {
        let feats = UnprojectedFeatures {
            dim: 2,
            values: vec![1.0, 0.0, 3.0, 2.0, 0.0, 0.0, 5.0, 5.0, 0.0, 0.0],
            seen: vec![true, true, false, true, false],
        };
        let gt = [0, 0, 0, 1, 2];
        let t = compute_targets(&feats, &gt).unwrap();
        assert_eq!(t.defined, vec![true, true, true, true, false]);
        assert_eq!(t.targets.row(2), &[2.0, 1.0]);
        assert_eq!(t.targets.row(3), &[5.0, 5.0]);
        assert_eq!(t.targets.row(4), &[0.0, 0.0]);
        let s = t.select(&[4, 2]);
        assert_eq!(s.defined, vec![false, true]);
    }

    #[test]
    fn instance_loss_is_mean_distance_over_defined_rows() {
        let targets = TargetFeatures {
            targets: Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 1.0, 9.0, 9.0]).unwrap(),
            defined: vec![true, true, false],
        };
        let mut g = Graph::new(false);
        let p = g.constant(Tensor::new(vec![3, 2], vec![3.0, 4.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
        let l = instance_loss_3d(&mut g, p, &targets).unwrap();
        assert!((g.value(l.value).item() - 2.5).abs() < 1e-12);
        assert!(!l.no_targets);
        let none = TargetFeatures {
            targets: Tensor::zeros(&[3, 2]),
            defined: vec![false; 3],
        };
        let l = instance_loss_3d(&mut g, p, &none).unwrap();
        assert_eq!(g.value(l.value).item(), 0.0);
        assert!(l.no_targets);
    }

    #[test]
    fn scene_blocks_cover_every_point() {
        let pts: Vec<[f64; 3]> = (0..900).map(|i| [(i % 30) as f64 * 0.1, (i / 30) as f64 * 0.1, 0.0]).collect();
        let cloud = cloud_xy(&pts);
        let cfg = BlockConfig::default();
        let blocks = scene_blocks(&cloud, &cfg);
        assert!(blocks.len() > 1);
        let mut covered = vec![false; cloud.len()];
        for (_, idx) in &blocks {
            assert!(idx.len() > cfg.k);
            idx.iter().for_each(|&i| covered[i] = true);
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn small_scene_is_one_block_and_matches_direct_prediction() {
        let pts: Vec<[f64; 3]> = (0..60).map(|i| [0.3 * ((i % 6) as f64 / 6.0), 0.3 * ((i / 6) as f64 / 10.0), (i % 5) as f64 * 0.1]).collect();
        let cloud = cloud_xy(&pts);
        let cfg = BlockConfig { k: 5, ..BlockConfig::default() };
        let blocks = scene_blocks(&cloud, &cfg);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].1, (0..60).collect::<Vec<_>>());
        let mut store = ParamStore::new();
        let net = PropagationNet::new(
            &mut store,
            Net3dConfig {
                input_dim: NUM_FEATURES + 2,
                edge_widths: vec![4],
                head_width: 8,
                embed_dim: 2,
                num_classes: 3,
            },
            1,
        );
        let bev = UnprojectedFeatures {
            dim: 2,
            values: random_points(60, 2, 4),
            seen: vec![true; 60],
        };
        let inputs = point_inputs(&cloud, &bev, 0.0).unwrap();
        let (f, l) = infer_full_scene(&net, &store, &cloud, &inputs, &cfg).unwrap();
        let x = block_inputs(&inputs, &blocks[0].1, blocks[0].0);
        let graph = block_graph(&x, &cfg).unwrap();
        let (f2, l2) = net.predict(&store, x, &graph).unwrap();
        assert_eq!(f, f2);
        assert_eq!(l, l2);
    }

    #[test]
    fn overlapping_blocks_are_averaged() {
        // A 3 m strip: points are covered by several blocks and the result
        // is the mean of the per-block outputs.
        let pts: Vec<[f64; 3]> = (0..300).map(|i| [(i % 100) as f64 * 0.03, (i / 100) as f64 * 0.1, 0.0]).collect();
        let cloud = cloud_xy(&pts);
        let cfg = BlockConfig { k: 4, ..BlockConfig::default() };
        let mut store = ParamStore::new();
        let net = PropagationNet::new(
            &mut store,
            Net3dConfig {
                input_dim: NUM_FEATURES,
                edge_widths: vec![4],
                head_width: 8,
                embed_dim: 2,
                num_classes: 2,
            },
            2,
        );
        let bev = UnprojectedFeatures {
            dim: 0,
            values: Vec::new(),
            seen: vec![false; 300],
        };
        let inputs = point_inputs(&cloud, &bev, 0.0).unwrap();
        let (f, _) = infer_full_scene(&net, &store, &cloud, &inputs, &cfg).unwrap();
        let mut sum = vec![0.0; 600];
        let mut count = vec![0.0; 300];
        for (c, idx) in scene_blocks(&cloud, &cfg) {
            let x = block_inputs(&inputs, &idx, c);
            let (bf, _) = net.predict(&store, x.clone(), &block_graph(&x, &cfg).unwrap()).unwrap();
            for (r, &i) in idx.iter().enumerate() {
                count[i] += 1.0;
                sum[i * 2] += bf.row(r)[0];
                sum[i * 2 + 1] += bf.row(r)[1];
            }
        }
        assert!(count.iter().any(|&c| c > 1.0));
        for i in 0..300 {
            for d in 0..2 {
                assert!((f.row(i)[d] - sum[i * 2 + d] / count[i]).abs() < 1e-12);
            }
        }
    }
}
