//! U-shaped fully convolutional network over the bird's-eye view, with an
//! instance-embedding head and a semantic head, and its training losses.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bev::{BirdsEyeView, BEV_CHANNELS, NET_ALIGNMENT};
use crate::error::{Error, Result};
use crate::numeric::graph::euclidean;
use crate::numeric::nn::{ConvBnRelu, Dense};
use crate::numeric::{AdamState, Graph, ParamStore, Tensor, Var};

pub const DEFAULT_EMBED_DIM: usize = 8;
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const BN_MOMENTUM: f64 = 0.1;

/// Margins and sampling size of the discriminative pair loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossConfig {
    pub delta_var: f64,
    pub delta_dist: f64,
    pub samples_per_instance: usize,
}

impl Default for PairLossConfig {
    fn default() -> Self {
        Self {
            delta_var: 0.5,
            delta_dist: 1.5,
            samples_per_instance: 100,
        }
    }
}

impl PairLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_var > 0.0 && self.delta_var < self.delta_dist) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < delta_var < delta_dist, got {} and {}",
                self.delta_var, self.delta_dist
            )));
        }
        if self.samples_per_instance < 2 {
            return Err(Error::InvalidArgument("samples_per_instance must be at least 2".into()));
        }
        Ok(())
    }
}

/// Euclidean distance between two embeddings; smaller means more similar.
pub fn pair_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "embeddings of different dimension");
    euclidean(a, b)
}

/// Extra input planes holding each pixel's grid position.
pub const COORD_CHANNELS: usize = 2;
/// Pixels per coordinate unit.
const COORD_SCALE: f64 = 32.0;

/// `[B, H, W, 2]` planes `(row · stride / 32, col · stride / 32)`, i.e. the
/// full-resolution position of each cell of a grid downsampled by `stride`.
fn coordinate_planes(b: usize, h: usize, w: usize, stride: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * h * w * COORD_CHANNELS);
    let unit = stride as f64 / COORD_SCALE;
    for _ in 0..b {
        for i in 0..h {
            for j in 0..w {
                data.push(i as f64 * unit);
                data.push(j as f64 * unit);
            }
        }
    }
    Tensor::new(vec![b, h, w, COORD_CHANNELS], data).expect("shape")
}

/// Append the coordinate planes of a grid downsampled by `stride`.
fn with_coordinates(g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
    let &[b, h, w, _] = g.shape(x) else {
        return Err(Error::shape("unet", format!("expected [B,H,W,C], got {:?}", g.shape(x))));
    };
    let coords = g.constant(coordinate_planes(b, h, w, stride));
    g.concat(&[x, coords])
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub embed_dim: usize,
    pub num_classes: usize,
    encoder: Vec<ConvBnRelu>,
    bottleneck: ConvBnRelu,
    decoder: Vec<ConvBnRelu>,
    instance_head: Dense,
    semantic_head: Dense,
}

/// Outputs of one forward pass, all `[B, H, W, ·]`.
#[derive(Debug, Clone, Copy)]
pub struct UNetOutput {
    pub embeddings: Var,
    pub logits: Var,
}

impl UNet {
    /// Four encoder stages of the given widths, each followed by 2×2 max
    /// pooling, a bottleneck at the deepest width, and a mirrored decoder
    /// with nearest upsampling and skip concatenation.
    pub fn new(store: &mut ParamStore, widths: [usize; 4], embed_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut cin = BEV_CHANNELS + COORD_CHANNELS;
        for (s, &w) in widths.iter().enumerate() {
            encoder.push(ConvBnRelu::new(store, &format!("unet.enc{s}"), cin, w, &mut rng));
            cin = w;
        }
        let bottleneck = ConvBnRelu::new(store, "unet.bottleneck", cin + COORD_CHANNELS, cin, &mut rng);
        let mut decoder = Vec::new();
        for s in (0..4).rev() {
            let out = if s == 0 { widths[0] } else { widths[s - 1] };
            decoder.push(ConvBnRelu::new(store, &format!("unet.dec{s}"), cin + widths[s] + COORD_CHANNELS, out, &mut rng));
            cin = out;
        }
        let instance_head = Dense::new(store, "unet.instance_head", cin, embed_dim, &mut rng);
        let semantic_head = Dense::new(store, "unet.semantic_head", cin, num_classes, &mut rng);
        Self {
            embed_dim,
            num_classes,
            encoder,
            bottleneck,
            decoder,
            instance_head,
            semantic_head,
        }
    }

    /// `input` is `[B, H, W, 4]` with H and W multiples of 16. Rows whose
    /// `valid` flag is false are zeroed before the first convolution, so
    /// invalid cells never influence the result through their content.
    /// Two coordinate planes (`row / 32`, `col / 32`) are appended to the
    /// masked input so that embeddings can depend on position: without
    /// them, identical objects in similar surroundings receive identical
    /// embeddings.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Tensor, valid: &[bool]) -> Result<UNetOutput> {
        let &[_, h, w, c] = input.shape() else {
            return Err(Error::shape("unet", format!("expected [B,H,W,4], got {:?}", input.shape())));
        };
        if c != BEV_CHANNELS || h % NET_ALIGNMENT != 0 || w % NET_ALIGNMENT != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "unet",
                format!("input {:?} must be [B,H,W,4] with H, W positive multiples of {NET_ALIGNMENT}", input.shape()),
            ));
        }
        let mask = Arc::new(valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
        let x = g.constant(input);
        let x = g.mask_rows(x, mask)?;
        let mut x = with_coordinates(g, x, 1)?;
        let mut skips = Vec::with_capacity(4);
        for block in &self.encoder {
            let y = block.forward(g, store, x)?;
            skips.push(y);
            x = g.maxpool2x2(y)?;
        }
        let stride = 1 << self.encoder.len();
        let x_in = with_coordinates(g, x, stride)?;
        x = self.bottleneck.forward(g, store, x_in)?;
        for (s, block) in self.decoder.iter().enumerate() {
            let up = g.upsample2x2(x)?;
            let skip = skips.pop().expect("one skip per stage");
            let cat = g.concat(&[up, skip])?;
            let cat = with_coordinates(g, cat, stride >> (s + 1))?;
            x = block.forward(g, store, cat)?;
        }
        Ok(UNetOutput {
            embeddings: self.instance_head.forward(g, store, x)?,
            logits: self.semantic_head.forward(g, store, x)?,
        })
    }

    /// Inference on one view padded to the network alignment; returns
    /// `[H, W, D]` embeddings and `[H, W, K]` logits on the padded grid.
    pub fn predict(&self, store: &ParamStore, view: &BirdsEyeView) -> Result<(Tensor, Tensor)> {
        let view = view.pad_to_multiple(NET_ALIGNMENT);
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, store, view.to_tensor(), &view.valid)?;
        let (h, w) = (view.height, view.width);
        let e = g.value(out.embeddings).clone().reshape(vec![h, w, self.embed_dim])?;
        let l = g.value(out.logits).clone().reshape(vec![h, w, self.num_classes])?;
        Ok((e, l))
    }
}

/// Value of the instance loss with its two terms and the empty flag.
#[derive(Debug, Clone, Copy)]
pub struct InstanceLoss2d {
    pub total: Var,
    pub l_var: f64,
    pub l_dist: f64,
    /// No instance had two valid pixels; the loss is defined as 0.
    pub no_instances: bool,
}

/// Sample up to `m` pixels per GT instance among `valid` cells, in
/// ascending instance id order. Returns (pixel indices, group per pixel).
pub fn sample_instance_pixels(valid: &[bool], gt_instance: &[u32], m: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (c, (&v, &id)) in valid.iter().zip(gt_instance).enumerate() {
        if v {
            members.entry(id).or_default().push(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    let mut groups = Vec::new();
    for (g, cells) in members.values().enumerate() {
        if cells.len() <= m {
            pixels.extend_from_slice(cells);
            groups.extend(std::iter::repeat_n(g, cells.len()));
        } else {
            let mut picked: Vec<usize> = sample(&mut rng, cells.len(), m).into_iter().map(|i| cells[i]).collect();
            picked.sort_unstable();
            pixels.extend_from_slice(&picked);
            groups.extend(std::iter::repeat_n(g, m));
        }
    }
    (pixels, groups)
}

/// `L_var + L_dist` on sampled pixels of a `[.., D]` embedding tensor whose
/// rows are cells of a grid with the given validity and GT instance ids.
/// Each term is the mean hinge over its pairs.
pub fn instance_loss_2d(
    g: &mut Graph,
    embeddings: Var,
    valid: &[bool],
    gt_instance: &[u32],
    cfg: &PairLossConfig,
    seed: u64,
) -> Result<InstanceLoss2d> {
    cfg.validate()?;
    let d = g.value(embeddings).last_dim();
    let rows = g.value(embeddings).rows();
    if valid.len() != rows || gt_instance.len() != rows {
        return Err(Error::shape(
            "instance_loss_2d",
            format!("{rows} embedding rows, {} mask, {} labels", valid.len(), gt_instance.len()),
        ));
    }
    let (pixels, groups) = sample_instance_pixels(valid, gt_instance, cfg.samples_per_instance, seed);
    let mut counts = BTreeMap::new();
    for &gr in &groups {
        *counts.entry(gr).or_insert(0usize) += 1;
    }
    let no_instances = !counts.values().any(|&c| c >= 2);
    let flat = g.reshape(embeddings, &[rows, d])?;
    let picked = g.gather_rows(flat, &pixels)?;
    let l_var = g.pair_hinge(picked, &groups, cfg.delta_var, true)?;
    let l_dist = g.pair_hinge(picked, &groups, cfg.delta_dist, false)?;
    let (lv, ld) = (g.value(l_var).item(), g.value(l_dist).item());
    let total = g.add(l_var, l_dist)?;
    Ok(InstanceLoss2d {
        total,
        l_var: lv,
        l_dist: ld,
        no_instances,
    })
}

/// Weighted cross-entropy over the valid cells of `[.., K]` logits.
pub fn semantic_loss_2d(
    g: &mut Graph,
    logits: Var,
    valid: &[bool],
    gt_semantic: &[u32],
    class_weights: &[f64],
) -> Result<Var> {
    let k = g.value(logits).last_dim();
    let rows = g.value(logits).rows();
    if valid.len() != rows || gt_semantic.len() != rows {
        return Err(Error::shape(
            "semantic_loss_2d",
            format!("{rows} logit rows, {} mask, {} labels", valid.len(), gt_semantic.len()),
        ));
    }
    let cells: Vec<usize> = (0..rows).filter(|&c| valid[c]).collect();
    let labels: Vec<usize> = cells.iter().map(|&c| gt_semantic[c] as usize).collect();
    let flat = g.reshape(logits, &[rows, k])?;
    let picked = g.gather_rows(flat, &cells)?;
    g.cross_entropy(picked, &labels, class_weights)
}

/// Losses of one 2D training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport2d {
    pub step: u64,
    pub l_var: f64,
    pub l_dist: f64,
    pub l_sem: f64,
}

impl LossReport2d {
    pub const CSV_HEADER: &'static str = "step,L_var,L_dist,L_sem";

    pub fn total(&self) -> f64 {
        self.l_var + self.l_dist + self.l_sem
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.l_var, self.l_dist, self.l_sem)
    }
}

/// Stack equally sized views into one `[B, H, W, 4]` batch.
fn stack(views: &[BirdsEyeView]) -> Result<(Tensor, Vec<bool>, Vec<u32>, Vec<u32>)> {
    let (h, w) = (views[0].height, views[0].width);
    let mut data = Vec::new();
    let mut valid = Vec::new();
    let mut inst = Vec::new();
    let mut sem = Vec::new();
    for (b, v) in views.iter().enumerate() {
        if v.height != h || v.width != w {
            return Err(Error::shape("train_step_2d", "views in a batch must share their size"));
        }
        let (Some(s), Some(i)) = (&v.gt_semantic, &v.gt_instance) else {
            return Err(Error::InvalidArgument("training views need GT rasters".into()));
        };
        data.extend_from_slice(&v.channels);
        valid.extend_from_slice(&v.valid);
        sem.extend_from_slice(s);
        // Keep instance ids of different views apart.
        inst.extend(i.iter().map(|&id| id + (b as u32) * (1 << 24)));
    }
    Ok((Tensor::new(vec![views.len(), h, w, BEV_CHANNELS], data)?, valid, sem, inst))
}

/// One optimization step on a batch of equally sized, aligned views:
/// `L_var + L_dist + L_sem` with unit weights, then Adam. A non-finite
/// loss or gradient aborts the step without touching the parameters.
pub fn train_step_2d(
    net: &UNet,
    store: &mut ParamStore,
    adam: &mut AdamState,
    views: &[BirdsEyeView],
    cfg: &PairLossConfig,
    class_weights: &[f64],
    seed: u64,
) -> Result<LossReport2d> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (input, valid, sem, inst) = stack(views)?;
    let mut g = Graph::new(true);
    let out = net.forward(&mut g, store, input, &valid)?;
    let li = instance_loss_2d(&mut g, out.embeddings, &valid, &inst, cfg, seed)?;
    let ls = semantic_loss_2d(&mut g, out.logits, &valid, &sem, class_weights)?;
    let l_sem = g.value(ls).item();
    let total = g.add(li.total, ls)?;
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("2D loss is {value}")));
    }
    store.zero_grad();
    g.backward(total)?;
    g.accumulate_param_grads(store);
    adam.step(store)?;
    g.commit_bn_stats(store, BN_MOMENTUM);
    Ok(LossReport2d {
        step: adam.step,
        l_var: li.l_var,
        l_dist: li.l_dist,
        l_sem,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::AdamConfig;

    #[test]
    fn similarity_examples() {
        assert_eq!(pair_similarity(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(pair_similarity(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(pair_similarity(&[0.3, -1.0], &[2.0, 4.0]), pair_similarity(&[2.0, 4.0], &[0.3, -1.0]));
    }

    fn tiny_view(h: usize, w: usize, seed: u64) -> BirdsEyeView {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let mut v = BirdsEyeView::empty(0.1);
        v.height = h;
        v.width = w;
        v.channels = (0..n * BEV_CHANNELS).map(|_| rng.random::<f64>()).collect();
        v.valid = (0..n).map(|c| c % 7 != 3).collect();
        v.index_map = (0..n).map(|c| Some(c as u32)).collect();
        v.gt_instance = Some((0..n).map(|c| ((c % w) * 3 / w) as u32).collect());
        v.gt_semantic = Some((0..n).map(|c| ((c % w) * 3 / w) as u32).collect());
        for c in 0..n {
            if !v.valid[c] {
                v.channels[c * BEV_CHANNELS..(c + 1) * BEV_CHANNELS].fill(0.0);
            }
        }
        v
    }

    #[test]
    fn output_matches_input_size_and_is_fully_convolutional() {
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, [4, 4, 4, 4], 3, 5, 1);
        for (h, w) in [(16, 16), (16, 32), (32, 16)] {
            let v = tiny_view(h, w, 0);
            let (e, l) = net.predict(&store, &v).unwrap();
            assert_eq!(e.shape(), &[h, w, 3]);
            assert_eq!(l.shape(), &[h, w, 5]);
        }
        let mut g = Graph::new(false);
        let bad = net.forward(&mut g, &store, Tensor::zeros(&[1, 20, 16, 4]), &[true; 320]);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn invalid_cell_content_never_changes_the_loss() {
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, [4, 4, 4, 4], 3, 3, 2);
        let view = tiny_view(16, 16, 1);
        let loss = |v: &BirdsEyeView| {
            let mut g = Graph::new(true);
            let out = net.forward(&mut g, &store, v.to_tensor(), &v.valid).unwrap();
            let cfg = PairLossConfig::default();
            let li = instance_loss_2d(&mut g, out.embeddings, &v.valid, v.gt_instance.as_ref().unwrap(), &cfg, 3).unwrap();
            let ls = semantic_loss_2d(&mut g, out.logits, &v.valid, v.gt_semantic.as_ref().unwrap(), &[1.0; 3]).unwrap();
            let t = g.add(li.total, ls).unwrap();
            g.value(t).item()
        };
        let base = loss(&view);
        let mut perturbed = view.clone();
        let bad = perturbed.valid.iter().position(|&v| !v).unwrap();
        perturbed.channels[bad * BEV_CHANNELS..(bad + 1) * BEV_CHANNELS].copy_from_slice(&[9.0, -3.0, 7.0, 100.0]);
        assert_eq!(loss(&perturbed).to_bits(), base.to_bits());
    }

    fn embedding_loss(rows: &[[f64; 2]], ids: &[u32], valid: &[bool]) -> (f64, InstanceLoss2d) {
        let mut g = Graph::new(false);
        let data = rows.iter().flatten().copied().collect();
        let e = g.constant(Tensor::new(vec![rows.len(), 2], data).unwrap());
        let l = instance_loss_2d(&mut g, e, valid, ids, &PairLossConfig::default(), 0).unwrap();
        (g.value(l.total).item(), l)
    }

    #[test]
    fn hinge_examples() {
        // One same-instance pair at 0.9 → 0.4; no cross pairs.
        let (v, _) = embedding_loss(&[[0.0, 0.0], [0.9, 0.0]], &[0, 0], &[true, true]);
        assert!((v - 0.4).abs() < 1e-12);
        let (v, _) = embedding_loss(&[[0.0, 0.0], [0.3, 0.0]], &[0, 0], &[true, true]);
        assert_eq!(v, 0.0);
        // Cross pair at 1.0 → 0.5, at 2.0 → 0.
        let (v, l) = embedding_loss(&[[0.0, 0.0], [1.0, 0.0]], &[0, 1], &[true, true]);
        assert!((v - 0.5).abs() < 1e-12 && (l.l_dist - 0.5).abs() < 1e-12);
        let (v, _) = embedding_loss(&[[0.0, 0.0], [2.0, 0.0]], &[0, 1], &[true, true]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn collapsed_separated_instances_give_exact_zero() {
        let rows = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.5, 0.0], [1.5, 0.0], [0.0, 3.0]];
        let (v, l) = embedding_loss(&rows, &[4, 4, 4, 9, 9, 2], &[true; 6]);
        assert_eq!(v, 0.0);
        assert!(!l.no_instances);
    }

    #[test]
    fn no_visible_instances_flags_and_returns_zero() {
        let (v, l) = embedding_loss(&[[0.0, 0.0], [5.0, 0.0]], &[0, 1], &[false, false]);
        assert_eq!(v, 0.0);
        assert!(l.no_instances);
    }

    #[test]
    fn loss_is_permutation_and_translation_invariant() {
        let rows = [[0.0, 0.1], [0.7, 0.2], [1.0, 1.0], [0.2, 1.1], [3.0, -1.0]];
        let (a, _) = embedding_loss(&rows, &[0, 0, 1, 1, 2], &[true; 5]);
        let (b, _) = embedding_loss(&rows, &[7, 7, 3, 3, 0], &[true; 5]);
        let shifted: Vec<[f64; 2]> = rows.iter().map(|r| [r[0] + 10.0, r[1] - 4.0]).collect();
        let (c, _) = embedding_loss(&shifted, &[0, 0, 1, 1, 2], &[true; 5]);
        assert!((a - b).abs() < 1e-12);
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let valid = vec![true; 500];
        let ids: Vec<u32> = (0..500).map(|i| (i % 3) as u32).collect();
        let a = sample_instance_pixels(&valid, &ids, 100, 5);
        let b = sample_instance_pixels(&valid, &ids, 100, 5);
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 300);
        let c = sample_instance_pixels(&valid, &ids, 100, 6);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn loss_decreases_on_a_fixed_scene() {
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, [8, 8, 8, 8], 4, 3, 7);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let view = tiny_view(16, 16, 9);
        let w = vec![1.0; 3];
        let cfg = PairLossConfig::default();
        let first = train_step_2d(&net, &mut store, &mut adam, std::slice::from_ref(&view), &cfg, &w, 0).unwrap();
        let mut last = first;
        for s in 1..200 {
            last = train_step_2d(&net, &mut store, &mut adam, std::slice::from_ref(&view), &cfg, &w, s).unwrap();
        }
        assert!(last.total() < 0.5 * first.total(), "{first:?} → {last:?}");
        assert_eq!(last.step, 200);
    }
}
