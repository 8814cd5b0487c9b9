//! Finite-difference verification of the reverse-mode gradients of every
//! differentiable operation, layer and loss.
//!
//! Each case builds a scalar from free inputs and/or parameters. The
//! analytic gradient is compared with central differences on (a sample
//! of) the coordinates; the error is norm-wise,
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::net2d::{instance_loss_2d, semantic_loss_2d, PairLossConfig, UNet};
use crate::net3d::{build_knn, instance_loss_3d, EdgeConv, Net3dConfig, PropagationNet, TargetFeatures};
use crate::numeric::nn::{BatchNorm, Conv3x3, Dense};
use crate::numeric::{Graph, ParamStore, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Coordinates checked per case (all of them when there are fewer).
pub const MAX_COORDS: usize = 40;

type Build = Box<dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>>;

/// One scalar-valued computation under test.
pub struct Case {
    pub name: &'static str,
    inputs: Vec<Tensor>,
    store: ParamStore,
    build: Build,
}

/// Outcome of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub coords: usize,
    pub rel_error: f64,
}

/// Which value a coordinate perturbs.
#[derive(Clone, Copy)]
enum Coord {
    Input(usize, usize),
    Param(usize, usize),
}

impl Case {
    fn new(name: &'static str, inputs: Vec<Tensor>, store: ParamStore, build: Build) -> Self {
        Self {
            name,
            inputs,
            store,
            build,
        }
    }

    fn eval(&self, inputs: &[Tensor], store: &ParamStore) -> Result<f64> {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (self.build)(&mut g, store, &vars)?;
        Ok(g.value(out).item())
    }

    /// Compare analytic and numeric gradients on up to `MAX_COORDS`
    /// coordinates chosen with `seed`.
    pub fn check(&self, seed: u64) -> Result<CheckResult> {
        let mut store = self.store.clone();
        let mut g = Graph::new(true);
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (self.build)(&mut g, &store, &vars)?;
        store.zero_grad();
        g.backward(out)?;
        g.accumulate_param_grads(&mut store);

        let mut coords = Vec::new();
        for (k, t) in self.inputs.iter().enumerate() {
            coords.extend((0..t.numel()).map(|i| Coord::Input(k, i)));
        }
        let params: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for (k, &id) in params.iter().enumerate() {
            coords.extend((0..store.value(id).numel()).map(|i| Coord::Param(k, i)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
        let chosen: Vec<Coord> = if coords.len() > MAX_COORDS {
            let mut idx = sample(&mut rng, coords.len(), MAX_COORDS).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        } else {
            coords
        };

        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &c in &chosen {
            let analytic = match c {
                Coord::Input(k, i) => g.grad(vars[k]).map_or(0.0, |gr| gr[i]),
                Coord::Param(k, i) => store.grad(params[k]).data()[i],
            };
            let mut f = [0.0; 2];
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut inputs = self.inputs.clone();
                let mut st = self.store.clone();
                match c {
                    Coord::Input(k, i) => inputs[k].data_mut()[i] += sign * STEP,
                    Coord::Param(k, i) => st.get_mut(params[k]).value.data_mut()[i] += sign * STEP,
                }
                f[s] = self.eval(&inputs, &st)?;
            }
            let numeric = (f[0] - f[1]) / (2.0 * STEP);
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        Ok(CheckResult {
            name: self.name,
            coords: chosen.len(),
            rel_error: if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom },
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero, so ReLU kinks are not crossed.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    t
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    // A random linear read-out makes every output coordinate matter.
    let shape = g.shape(x).to_vec();
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

/// Every gradient case for one seed.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = seed;
    let none = ParamStore::new;
    let mut out = Vec::new();

    out.push(Case::new(
        "elementwise",
        vec![uniform(&mut rng, &[3, 4]), uniform(&mut rng, &[3, 4])],
        none(),
        Box::new(move |g, _, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(v[0], v[1])?;
            let c = g.mul(a, b)?;
            let c = g.scale(c, 0.7);
            weighted_sum(g, c, s)
        }),
    ));
    out.push(Case::new(
        "matmul_bias",
        vec![uniform(&mut rng, &[5, 3]), uniform(&mut rng, &[3, 4]), uniform(&mut rng, &[4])],
        none(),
        Box::new(move |g, _, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_bias(y, v[2])?;
            weighted_sum(g, y, s)
        }),
    ));
    out.push(Case::new(
        "conv3x3",
        vec![uniform(&mut rng, &[2, 4, 3, 2]), uniform(&mut rng, &[3, 3, 2, 3])],
        none(),
        Box::new(move |g, _, v| {
            let y = g.conv3x3(v[0], v[1])?;
            weighted_sum(g, y, s)
        }),
    ));
    out.push(Case::new(
        "relu",
        vec![off_zero(&mut rng, &[4, 5])],
        none(),
        Box::new(move |g, _, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, s)
        }),
    ));
    out.push(Case::new(
        "maxpool_upsample",
        vec![uniform(&mut rng, &[1, 4, 6, 2])],
        none(),
        Box::new(move |g, _, v| {
            let y = g.maxpool2x2(v[0])?;
            let y = g.upsample2x2(y)?;
            weighted_sum(g, y, s)
        }),
    ));
    out.push(Case::new(
        "concat_reshape_gather_mask",
        vec![uniform(&mut rng, &[4, 2]), uniform(&mut rng, &[4, 3])],
        none(),
        Box::new(move |g, _, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let c = g.reshape(c, &[2, 2, 5])?;
            let c = g.reshape(c, &[4, 5])?;
            let c = g.gather_rows(c, &[3, 0, 0, 2])?;
            let c = g.mask_rows(c, Arc::new(vec![1.0, 0.0, 1.0, 0.5]))?;
            weighted_sum(g, c, s)
        }),
    ));
    out.push(Case::new(
        "softmax_mean",
        vec![uniform(&mut rng, &[3, 5])],
        none(),
        Box::new(move |g, _, v| {
            let y = g.softmax(v[0]);
            let y = weighted_sum(g, y, s)?;
            let m = g.mean(v[0]);
            g.add(y, m)
        }),
    ));
    let nb = build_knn(uniform(&mut rng, &[12, 2]).data(), 2, 3).expect("knn");
    out.push(Case::new(
        "neighbor_max",
        vec![uniform(&mut rng, &[12, 4])],
        none(),
        Box::new(move |g, _, v| {
            let y = g.neighbor_max(v[0], &nb.neighbors, nb.k)?;
            weighted_sum(g, y, s)
        }),
    ));
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
    out.push(Case::new(
        "cross_entropy",
        vec![uniform(&mut rng, &[6, 4])],
        none(),
        Box::new(move |g, _, v| g.cross_entropy(v[0], &labels, &weights)),
    ));
    let groups: Vec<usize> = (0..10).map(|i| i % 3).collect();
    out.push(Case::new(
        "pair_hinge",
        vec![{
            let mut t = uniform(&mut rng, &[10, 3]);
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            t
        }],
        none(),
        Box::new(move |g, _, v| {
            let a = g.pair_hinge(v[0], &groups, 0.5, true)?;
            let b = g.pair_hinge(v[0], &groups, 1.5, false)?;
            g.add(a, b)
        }),
    ));
    let target = uniform(&mut rng, &[6, 3]);
    out.push(Case::new(
        "row_distance_mean",
        vec![uniform(&mut rng, &[6, 3])],
        none(),
        Box::new(move |g, _, v| g.row_distance_mean(v[0], &target, &[true, false, true, true, false, true])),
    ));

    // Layers with parameters.
    let mut st = ParamStore::new();
    let dense = Dense::new(&mut st, "d", 3, 4, &mut rng);
    out.push(Case::new(
        "dense",
        vec![uniform(&mut rng, &[5, 3])],
        st,
        Box::new(move |g, st, v| {
            let y = dense.forward(g, st, v[0])?;
            weighted_sum(g, y, s)
        }),
    ));
    let mut st = ParamStore::new();
    let conv = Conv3x3::new(&mut st, "c", 2, 3, &mut rng);
    let bn = BatchNorm::new(&mut st, "bn", 3);
    randomize_affine(&mut st, &mut rng);
    out.push(Case::new(
        "conv_batchnorm",
        vec![uniform(&mut rng, &[2, 3, 3, 2])],
        st,
        Box::new(move |g, st, v| {
            let y = conv.forward(g, st, v[0])?;
            let y = bn.forward(g, st, y)?;
            weighted_sum(g, y, s)
        }),
    ));
    let mut st = ParamStore::new();
    let edge = EdgeConv::new(&mut st, "e", 3, 4, &mut rng);
    let x = uniform(&mut rng, &[10, 3]);
    let kg = build_knn(x.data(), 3, 4).expect("knn");
    out.push(Case::new(
        "edgeconv",
        vec![x],
        st,
        Box::new(move |g, st, v| {
            let y = edge.forward(g, st, v[0], &kg)?;
            weighted_sum(g, y, s)
        }),
    ));

    // Whole networks with their losses.
    let mut st = ParamStore::new();
    let unet = UNet::new(&mut st, [2, 3, 3, 4], 3, 4, seed);
    randomize_affine(&mut st, &mut rng);
    let (h, w) = (16, 16);
    let input = uniform(&mut rng, &[1, h, w, 4]);
    let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
    let inst: Vec<u32> = (0..h * w).map(|c| ((c % w) / 6 + 3 * ((c / w) / 8)) as u32).collect();
    let sem: Vec<u32> = inst.iter().map(|&i| i % 4).collect();
    let cw = vec![0.5, 1.0, 1.5, 2.0];
    let loss = PairLossConfig {
        samples_per_instance: 6,
        ..PairLossConfig::default()
    };
    out.push(Case::new(
        "unet_losses",
        vec![],
        st,
        Box::new(move |g, st, _| {
            let o = unet.forward(g, st, input.clone(), &valid)?;
            let li = instance_loss_2d(g, o.embeddings, &valid, &inst, &loss, 7)?;
            let ls = semantic_loss_2d(g, o.logits, &valid, &sem, &cw)?;
            g.add(li.total, ls)
        }),
    ));
    let mut st = ParamStore::new();
    let net = PropagationNet::new(
        &mut st,
        Net3dConfig {
            input_dim: 4,
            edge_widths: vec![3, 3],
            head_width: 5,
            embed_dim: 2,
            num_classes: 3,
        },
        seed,
    );
    let x = uniform(&mut rng, &[16, 4]);
    let kg = build_knn(x.data(), 4, 3).expect("knn");
    let targets = TargetFeatures {
        targets: uniform(&mut rng, &[16, 2]),
        defined: (0..16).map(|i| i % 5 != 0).collect(),
    };
    let sem: Vec<usize> = (0..16).map(|i| i % 3).collect();
    out.push(Case::new(
        "propagation_losses",
        vec![],
        st,
        Box::new(move |g, st, _| {
            let o = net.forward(g, st, x.clone(), &kg)?;
            let li = instance_loss_3d(g, o.features, &targets)?;
            let ls = g.cross_entropy(o.logits, &sem, &[1.0, 0.7, 1.3])?;
            g.add(li.value, ls)
        }),
    ));
    out
}

/// Move batch-norm affine parameters off their identity initialization so
/// their gradients are exercised in general position.
fn randomize_affine(st: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = st
        .iter()
        .filter(|(_, p)| p.name.ends_with(".gamma") || p.name.ends_with(".beta"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let p = st.get_mut(id);
        let base = if p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
        p.value.data_mut().iter_mut().for_each(|v| *v = base + rng.random_range(-0.5..0.5));
    }
}

/// Run every case for `seed`.
pub fn check_all(seed: u64) -> Result<Vec<CheckResult>> {
    cases(seed).iter().map(|c| c.check(seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradients_match_finite_differences() {
        for seed in 0..2 {
            for r in check_all(seed).unwrap() {
                assert!(r.rel_error < 1e-4, "seed {seed}: {} rel error {:e}", r.name, r.rel_error);
                assert!(r.coords > 0, "{}", r.name);
            }
        }
    }
}
