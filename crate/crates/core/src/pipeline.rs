//! End-to-end orchestration: dataset generation, two-stage training,
//! full-scene inference, evaluation and renders.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bev::{
    below_ceiling_indices, rasterize, unproject, Augmentation, BirdsEyeView, UnprojectedFeatures,
    DEFAULT_CEILING_FRACTION, DEFAULT_CELL_SIZE, DEFAULT_MAX_DIM, NET_ALIGNMENT,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::grouping::{assign_semantics, mean_shift, split_inconsistent, write_predictions, MeanShiftConfig, SplitConfig};
use crate::net2d::{
    instance_loss_2d, semantic_loss_2d, train_step_2d, LossReport2d, PairLossConfig, UNet, DEFAULT_EMBED_DIM,
    DEFAULT_WIDTHS,
};
use crate::net3d::{
    block_graph, block_inputs, compute_targets, infer_full_scene, instance_loss_3d, point_inputs, sample_block,
    train_step_3d, Block, BlockConfig, LossReport3d, Net3dConfig, PropagationNet, TargetFeatures,
    DEFAULT_EDGE_WIDTHS, DEFAULT_HEAD_WIDTH,
};
use crate::numeric::nn::class_weights_from_labels;
use crate::numeric::{AdamConfig, AdamState, Checkpoint, Graph, ParamStore, Tensor};
use crate::render;
use crate::scene::{generate_scene, io, Labeling, PointCloud, SceneSpec, SemanticClass, NUM_FEATURES};

pub const MANIFEST: &str = "manifest.txt";
pub const SCENE_EXT: &str = "bevpc";
pub const PRED_SUFFIX: &str = ".pred.txt";
pub const CHECKPOINT_2D: &str = "net2d.bevis";
pub const CHECKPOINT_3D: &str = "net3d.bevis";

const NUM_CLASSES: usize = SemanticClass::COUNT;

/// Dataset generation options.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub width: (f64, f64),
    pub depth: (f64, f64),
    pub height: f64,
    pub density: f64,
    pub ceiling: bool,
    pub position_noise: f64,
    pub color_noise: f64,
}

/// Rasterization options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevConfig {
    pub cell_size: f64,
    pub ceiling_fraction: f64,
    pub max_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Train2dConfig {
    pub widths: [usize; 4],
    pub embed_dim: usize,
    pub loss: PairLossConfig,
    pub adam: AdamConfig,
    pub steps: u64,
    pub augment: bool,
    pub scale_range: (f64, f64),
    /// Smallest kept fraction per axis of the random crop; 1 disables it.
    pub crop_min: f64,
    pub val_every: u64,
    /// Stop after this many validations without improvement.
    pub patience: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Train3dConfig {
    pub edge_widths: Vec<usize>,
    pub head_width: usize,
    pub block: BlockConfig,
    pub adam: AdamConfig,
    pub steps: u64,
    pub val_every: u64,
    pub patience: u64,
    pub val_blocks_per_scene: usize,
}

/// Every pipeline option, read from a [`Config`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub bev: BevConfig,
    pub train2d: Train2dConfig,
    pub train3d: Train3dConfig,
    pub mean_shift: MeanShiftConfig,
    pub split_alpha: f64,
    /// Evaluation split of the GT manifest (`all` for every scene).
    pub eval_split: String,
    pub min_ap50: Option<f64>,
    pub min_ap: Option<f64>,
    pub min_miou: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_config(&Config::new()).expect("defaults are valid")
    }
}

fn adam_from(c: &Config, prefix: &str) -> Result<AdamConfig> {
    let d = AdamConfig::default();
    Ok(AdamConfig {
        base_lr: c.get(&format!("{prefix}.lr"), d.base_lr)?,
        beta1: c.get(&format!("{prefix}.beta1"), d.beta1)?,
        beta2: c.get(&format!("{prefix}.beta2"), d.beta2)?,
        eps: c.get(&format!("{prefix}.eps"), d.eps)?,
        decay_rate: c.get(&format!("{prefix}.decay_rate"), d.decay_rate)?,
        decay_interval: c.get(&format!("{prefix}.decay_interval"), d.decay_interval)?,
    })
}

impl PipelineConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let spec = SceneSpec::default();
        let widths = c.get_list("train2d.widths", &DEFAULT_WIDTHS)?;
        let widths: [usize; 4] = widths
            .try_into()
            .map_err(|_| Error::Config("train2d.widths needs four entries".into()))?;
        let ms = MeanShiftConfig::default();
        let block = BlockConfig::default();
        let loss = PairLossConfig::default();
        let cfg = Self {
            seed: c.get("seed", 0)?,
            gen: GenConfig {
                num_scenes: c.get("gen.num_scenes", 10)?,
                min_objects: c.get("gen.min_objects", 3)?,
                max_objects: c.get("gen.max_objects", 8)?,
                width: (c.get("gen.width_min", 5.0)?, c.get("gen.width_max", 7.0)?),
                depth: (c.get("gen.depth_min", 4.0)?, c.get("gen.depth_max", 6.0)?),
                height: c.get("gen.height", spec.height)?,
                density: c.get("gen.density", spec.density)?,
                ceiling: c.get("gen.ceiling", spec.ceiling)?,
                position_noise: c.get("gen.position_noise", spec.position_noise)?,
                color_noise: c.get("gen.color_noise", spec.color_noise)?,
            },
            bev: BevConfig {
                cell_size: c.get("bev.cell_size", DEFAULT_CELL_SIZE)?,
                ceiling_fraction: c.get("bev.ceiling_fraction", DEFAULT_CEILING_FRACTION)?,
                max_dim: c.get("bev.max_dim", DEFAULT_MAX_DIM)?,
            },
            train2d: Train2dConfig {
                widths,
                embed_dim: c.get("train2d.embed_dim", DEFAULT_EMBED_DIM)?,
                loss: PairLossConfig {
                    delta_var: c.get("loss.delta_var", loss.delta_var)?,
                    delta_dist: c.get("loss.delta_dist", loss.delta_dist)?,
                    samples_per_instance: c.get("loss.samples_per_instance", loss.samples_per_instance)?,
                },
                adam: adam_from(c, "train2d")?,
                steps: c.get("train2d.steps", 2000)?,
                augment: c.get("train2d.augment", true)?,
                scale_range: (c.get("train2d.scale_min", 0.9)?, c.get("train2d.scale_max", 1.1)?),
                crop_min: c.get("train2d.crop_min", 1.0)?,
                val_every: c.get("train2d.val_every", 100)?,
                patience: c.get("train2d.patience", 5)?,
            },
            train3d: Train3dConfig {
                edge_widths: c.get_list("train3d.edge_widths", &DEFAULT_EDGE_WIDTHS)?,
                head_width: c.get("train3d.head_width", DEFAULT_HEAD_WIDTH)?,
                block: BlockConfig {
                    diameter: c.get("block.diameter", block.diameter)?,
                    points: c.get("block.points", block.points)?,
                    k: c.get("block.k", block.k)?,
                    knn_z_scale: c.get("block.knn_z_scale", block.knn_z_scale)?,
                },
                adam: adam_from(c, "train3d")?,
                steps: c.get("train3d.steps", 2000)?,
                val_every: c.get("train3d.val_every", 100)?,
                patience: c.get("train3d.patience", 5)?,
                val_blocks_per_scene: c.get("train3d.val_blocks_per_scene", 8)?,
            },
            mean_shift: MeanShiftConfig {
                bandwidth: c.get("meanshift.bandwidth", ms.bandwidth)?,
                max_iters: c.get("meanshift.max_iters", ms.max_iters)?,
                mode_merge_radius: c.get("meanshift.mode_merge_radius", ms.mode_merge_radius)?,
            },
            split_alpha: c.get("split.alpha", SplitConfig::DEFAULT_ALPHA)?,
            eval_split: c.get("eval.split", "test".to_string())?,
            min_ap50: c.get_opt("eval.min_ap50")?,
            min_ap: c.get_opt("eval.min_ap")?,
            min_miou: c.get_opt("eval.min_miou")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gen;
        if g.min_objects > g.max_objects || !(g.width.0 <= g.width.1) || !(g.depth.0 <= g.depth.1) {
            return Err(Error::Config("gen ranges must satisfy min <= max".into()));
        }
        self.train2d.loss.validate()?;
        self.mean_shift.validate()?;
        if self.train2d.val_every == 0 || self.train3d.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        if !(self.train2d.crop_min > 0.0 && self.train2d.crop_min <= 1.0) {
            return Err(Error::Config("train2d.crop_min must be in (0, 1]".into()));
        }
        if self.train3d.block.points <= self.train3d.block.k {
            return Err(Error::Config("block.points must exceed block.k".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub split: String,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let mut it = l.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(n), Some(s), None) => Ok(ManifestEntry {
                    name: n.to_string(),
                    split: s.to_string(),
                }),
                _ => Err(Error::Pipeline(format!("{}: bad manifest line {l:?}", path.display()))),
            }
        })
        .collect()
}

fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("# scene split\n");
    for e in entries {
        writeln!(s, "{} {}", e.name, e.split).unwrap();
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

/// Scene names of a split (`all` selects every scene).
pub fn split_names(entries: &[ManifestEntry], split: &str) -> Vec<String> {
    entries
        .iter()
        .filter(|e| split == "all" || e.split == split)
        .map(|e| e.name.clone())
        .collect()
}

pub fn scene_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.{SCENE_EXT}"))
}

/// Split sizes for `n` scenes: `round(0.1·n)` each for validation and
/// test, the rest for training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = (n as f64 * 0.1).round() as usize;
    let test = tenth.min(n);
    let val = tenth.min(n - test);
    (n - val - test, val, test)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Draw the spec of scene `i`; placement failures retry with fresh draws.
fn scene_for(cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let g = &cfg.gen;
    let mut last = None;
    for _ in 0..32 {
        let spec = SceneSpec {
            width: rng.random_range(g.width.0..=g.width.1),
            depth: rng.random_range(g.depth.0..=g.depth.1),
            height: g.height,
            num_objects: rng.random_range(g.min_objects..=g.max_objects),
            seed: rng.next_u64(),
            density: g.density,
            ceiling: g.ceiling,
            position_noise: g.position_noise,
            color_noise: g.color_noise,
            ..SceneSpec::default()
        };
        match generate_scene(&spec) {
            Ok(pc) => return Ok(pc),
            Err(e @ Error::InvalidArgument(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Generate `gen.num_scenes` scenes plus a manifest with a train/val/test
/// split into `out_dir`.
pub fn cmd_gen(cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    create_dir(out_dir)?;
    let n = cfg.gen.num_scenes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Per-scene generator streams, drawn up front so scenes can be built in
    // parallel without changing their content.
    let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    let (n_train, n_val, _) = split_sizes(n);
    let entries: Vec<ManifestEntry> = (0..n)
        .map(|i| ManifestEntry {
            name: format!("scene_{i:04}"),
            split: if i < n_train {
                "train"
            } else if i < n_train + n_val {
                "val"
            } else {
                "test"
            }
            .to_string(),
        })
        .collect();
    entries
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(e, &s)| {
            let pc = scene_for(cfg, &mut ChaCha8Rng::seed_from_u64(s))?;
            io::save(&pc, &scene_path(out_dir, &e.name))
        })
        .collect::<Result<Vec<()>>>()?;
    write_manifest(out_dir, &entries)?;
    Ok(entries)
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<(String, PointCloud)>> {
    let names = split_names(&read_manifest(dir)?, split);
    names
        .into_par_iter()
        .map(|n| {
            let pc = io::load(&scene_path(dir, &n))?;
            Ok((n, pc))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Views and checkpoints

/// Bird's-eye view of a scene with the ceiling removed; the index map
/// refers to points of the full cloud.
pub fn scene_view(cloud: &PointCloud, bev: &BevConfig) -> Result<BirdsEyeView> {
    let keep = below_ceiling_indices(cloud, bev.ceiling_fraction);
    let sub = cloud.select(&keep);
    let mut view = rasterize(&sub, bev.cell_size, bev.max_dim)?;
    view.remap_indices(&keep);
    Ok(view)
}

fn meta(values: &[f64]) -> Tensor {
    Tensor::from_vec(values.to_vec())
}

fn meta_of<'a>(ck: &'a Checkpoint, name: &str, path: &Path) -> Result<&'a [f64]> {
    ck.get(name)
        .map(Tensor::data)
        .ok_or_else(|| Error::Pipeline(format!("{}: checkpoint lacks {name}", path.display())))
}

/// Trained 2D network with the rasterization it was trained on.
#[derive(Debug, Clone)]
pub struct Model2d {
    pub net: UNet,
    pub store: ParamStore,
    pub bev: BevConfig,
    pub widths: [usize; 4],
}

impl Model2d {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        let w = self.widths.map(|v| v as f64);
        ck.push(
            "meta.net2d",
            meta(&[self.net.embed_dim as f64, self.net.num_classes as f64, w[0], w[1], w[2], w[3]]),
        );
        ck.push(
            "meta.bev",
            meta(&[self.bev.cell_size, self.bev.ceiling_fraction, self.bev.max_dim as f64]),
        );
        ck
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let a = meta_of(&ck, "meta.net2d", path)?;
        let b = meta_of(&ck, "meta.bev", path)?;
        if a.len() != 6 || b.len() != 3 {
            return Err(Error::Pipeline(format!("{}: malformed 2D metadata", path.display())));
        }
        let widths = [a[2] as usize, a[3] as usize, a[4] as usize, a[5] as usize];
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, widths, a[0] as usize, a[1] as usize, 0);
        ck.restore(&mut store)?;
        Ok(Self {
            net,
            store,
            bev: BevConfig {
                cell_size: b[0],
                ceiling_fraction: b[1],
                max_dim: b[2] as usize,
            },
            widths,
        })
    }

    /// View, padded embeddings `[H', W', D]` and the unprojected per-point
    /// features of a scene.
    pub fn embed(&self, cloud: &PointCloud) -> Result<(BirdsEyeView, Tensor, UnprojectedFeatures)> {
        let view = scene_view(cloud, &self.bev)?;
        let padded = view.pad_to_multiple(NET_ALIGNMENT);
        let (emb, _) = self.net.predict(&self.store, &padded)?;
        let feats = unproject(&padded, &emb, cloud.len())?;
        Ok((view, emb, feats))
    }
}

/// Trained 3D network with its block settings and the per-class average
/// instance sizes used for splitting.
#[derive(Debug, Clone)]
pub struct Model3d {
    pub net: PropagationNet,
    pub store: ParamStore,
    pub block: BlockConfig,
    pub avg_instance_size: Vec<f64>,
}

impl Model3d {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        let c = &self.net.config;
        let mut arch = vec![c.input_dim as f64, c.embed_dim as f64, c.num_classes as f64, c.head_width as f64];
        arch.extend(c.edge_widths.iter().map(|&w| w as f64));
        ck.push("meta.net3d", meta(&arch));
        let b = &self.block;
        ck.push("meta.block", meta(&[b.diameter, b.points as f64, b.k as f64, b.knn_z_scale]));
        ck.push("meta.avg_instance_size", meta(&self.avg_instance_size));
        ck
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let a = meta_of(&ck, "meta.net3d", path)?;
        let b = meta_of(&ck, "meta.block", path)?;
        let avg = meta_of(&ck, "meta.avg_instance_size", path)?.to_vec();
        if a.len() < 5 || b.len() != 4 {
            return Err(Error::Pipeline(format!("{}: malformed 3D metadata", path.display())));
        }
        let config = Net3dConfig {
            input_dim: a[0] as usize,
            embed_dim: a[1] as usize,
            num_classes: a[2] as usize,
            head_width: a[3] as usize,
            edge_widths: a[4..].iter().map(|&w| w as usize).collect(),
        };
        let mut store = ParamStore::new();
        let net = PropagationNet::new(&mut store, config, 0);
        ck.restore(&mut store)?;
        Ok(Self {
            net,
            store,
            block: BlockConfig {
                diameter: b[0],
                points: b[1] as usize,
                k: b[2] as usize,
                knn_z_scale: b[3],
            },
            avg_instance_size: avg,
        })
    }
}

// ---------------------------------------------------------------------------
// Training

/// Outcome of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub best_step: u64,
    pub best_val_loss: Option<f64>,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

struct CsvLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            file: std::io::BufWriter::new(f),
            path,
        };
        log.line(header)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Tracks the best validation loss and the parameters that achieved it.
struct EarlyStop {
    best: Option<(f64, u64, ParamStore)>,
    bad: u64,
    patience: u64,
}

impl EarlyStop {
    fn new(patience: u64) -> Self {
        Self {
            best: None,
            bad: 0,
            patience,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, loss: f64, step: u64, store: &ParamStore) -> bool {
        match &self.best {
            Some((b, _, _)) if loss >= *b => {
                self.bad += 1;
                self.bad >= self.patience
            }
            _ => {
                self.best = Some((loss, step, store.clone()));
                self.bad = 0;
                false
            }
        }
    }
}

fn labels_of(cloud: &PointCloud, name: &str) -> Result<(Vec<u32>, Vec<u32>)> {
    match (&cloud.gt_semantic, &cloud.gt_instance) {
        (Some(s), Some(i)) => Ok((s.clone(), i.clone())),
        _ => Err(Error::Pipeline(format!("scene {name} has no ground-truth labels"))),
    }
}

fn val_loss_2d(model: &UNet, store: &ParamStore, views: &[BirdsEyeView], cfg: &Train2dConfig, weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, v) in views.iter().enumerate() {
        let v = v.pad_to_multiple(NET_ALIGNMENT);
        let mut g = Graph::new(false);
        let out = model.forward(&mut g, store, v.to_tensor(), &v.valid)?;
        let li = instance_loss_2d(&mut g, out.embeddings, &v.valid, v.gt_instance.as_ref().expect("gt"), &cfg.loss, i as u64)?;
        let ls = semantic_loss_2d(&mut g, out.logits, &v.valid, v.gt_semantic.as_ref().expect("gt"), weights)?;
        total += g.value(li.total).item() + g.value(ls).item();
    }
    Ok(total / views.len().max(1) as f64)
}

/// Stage 1: train the bird's-eye-view network on the `train` split with
/// early stopping on the `val` split. Writes `net2d.bevis`,
/// `curves_2d.csv` and `curves_2d_val.csv` into `out_dir`.
pub fn cmd_train_2d(cfg: &PipelineConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let start = Instant::now();
    create_dir(out_dir)?;
    let t = &cfg.train2d;
    let to_views = |scenes: Vec<(String, PointCloud)>| -> Result<Vec<BirdsEyeView>> {
        scenes
            .par_iter()
            .map(|(n, pc)| {
                labels_of(pc, n)?;
                scene_view(pc, &cfg.bev)
            })
            .collect()
    };
    let train = to_views(load_split(data_dir, "train")?)?;
    let val = to_views(load_split(data_dir, "val")?)?;
    if train.is_empty() {
        return Err(Error::Pipeline(format!("{}: no training scenes", data_dir.display())));
    }
    let weights = class_weights_from_labels(
        train.iter().flat_map(|v| {
            let s = v.gt_semantic.as_ref().expect("gt");
            (0..v.num_cells()).filter(|&c| v.valid[c]).map(move |c| s[c] as usize)
        }),
        NUM_CLASSES,
    );
    let mut store = ParamStore::new();
    let net = UNet::new(&mut store, t.widths, t.embed_dim, NUM_CLASSES, cfg.seed ^ 0x2d);
    let mut adam = AdamState::new(t.adam, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2d2d);
    let mut curve = CsvLog::create(out_dir.join("curves_2d.csv"), LossReport2d::CSV_HEADER)?;
    let mut val_curve = CsvLog::create(out_dir.join("curves_2d_val.csv"), "step,loss")?;
    let mut stop = EarlyStop::new(t.patience);
    let mut order: Vec<usize> = Vec::new();
    let mut step = 0;
    while step < t.steps {
        if order.is_empty() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
        }
        let view = &train[order.pop().expect("refilled")];
        let aug = if t.augment {
            Augmentation::sample(&mut rng, t.scale_range, t.crop_min)
        } else {
            Augmentation::IDENTITY
        };
        let input = aug.apply(view).pad_to_multiple(NET_ALIGNMENT);
        let report = train_step_2d(&net, &mut store, &mut adam, &[input], &t.loss, &weights, rng.next_u64())?;
        curve.line(&report.csv_row())?;
        step = report.step;
        if !val.is_empty() && step % t.val_every == 0 {
            let vl = val_loss_2d(&net, &store, &val, t, &weights)?;
            val_curve.line(&format!("{step},{vl}"))?;
            log::info!("2d step {step}: train {:.4} val {vl:.4}", report.total());
            if stop.observe(vl, step, &store) {
                break;
            }
        }
    }
    curve.finish()?;
    val_curve.finish()?;
    let (best_val_loss, best_step) = match stop.best {
        Some((l, s, best)) => {
            store = best;
            (Some(l), s)
        }
        None => (None, step),
    };
    let model = Model2d {
        net,
        store,
        bev: cfg.bev,
        widths: t.widths,
    };
    let path = out_dir.join(CHECKPOINT_2D);
    model.checkpoint().save(&path)?;
    Ok(TrainSummary {
        steps: step,
        best_step,
        best_val_loss,
        seconds: start.elapsed().as_secs_f64(),
        checkpoint: path,
    })
}

/// A scene prepared for the 3D stage.
struct Scene3d {
    cloud: PointCloud,
    inputs: Tensor,
    targets: TargetFeatures,
    semantic: Vec<usize>,
    /// Points of each GT instance that has a target, for block centring.
    instances: Vec<Vec<usize>>,
}

fn prepare_3d(model: &Model2d, scenes: Vec<(String, PointCloud)>) -> Result<Vec<Scene3d>> {
    scenes
        .into_par_iter()
        .map(|(name, cloud)| {
            let (sem, inst) = labels_of(&cloud, &name)?;
            let (view, _, feats) = model.embed(&cloud)?;
            let inputs = point_inputs(&cloud, &feats, view.ground)?;
            let targets = compute_targets(&feats, &inst)?;
            let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, &id) in inst.iter().enumerate() {
                if targets.defined[i] {
                    members.entry(id).or_default().push(i);
                }
            }
            Ok(Scene3d {
                cloud,
                inputs,
                targets,
                semantic: sem.iter().map(|&s| s as usize).collect(),
                instances: members.into_values().collect(),
            })
        })
        .collect()
}

/// A training block centred on a random point of a uniformly drawn
/// instance, so that small objects are seen as often as walls and floor.
fn make_block(s: &Scene3d, block: &BlockConfig, rng: &mut ChaCha8Rng) -> Result<Block> {
    let centre = if s.instances.is_empty() {
        rng.random_range(0..s.cloud.len())
    } else {
        let members = &s.instances[rng.random_range(0..s.instances.len())];
        members[rng.random_range(0..members.len())]
    };
    let p = s.cloud.xyz(centre);
    let center = [p[0], p[1]];
    let idx = sample_block(&s.cloud, center, block.diameter, block.points, rng.next_u64())?;
    let inputs = block_inputs(&s.inputs, &idx, center);
    let graph = block_graph(&inputs, block)?;
    Ok(Block {
        inputs,
        graph,
        targets: s.targets.select(&idx),
        semantic: idx.iter().map(|&i| s.semantic[i]).collect(),
    })
}

/// Average GT instance size (points) per class over `scenes`.
pub fn average_instance_sizes<'a>(labels: impl IntoIterator<Item = (&'a [u32], &'a [u32])>, num_classes: usize) -> Vec<f64> {
    let mut points = vec![0usize; num_classes];
    let mut instances = vec![0usize; num_classes];
    for (sem, inst) in labels {
        let classes = crate::grouping::instance_classes(inst, sem);
        for &c in classes.values() {
            instances[c as usize] += 1;
        }
        for &s in sem {
            points[s as usize] += 1;
        }
    }
    (0..num_classes)
        .map(|c| if instances[c] == 0 { 0.0 } else { points[c] as f64 / instances[c] as f64 })
        .collect()
}

/// Stage 2: train the propagation network on cylindrical blocks, with the
/// stage-1 network frozen. Requires `net2d.bevis` in `ckpt_dir`; writes
/// `net3d.bevis`, `curves_3d.csv` and `curves_3d_val.csv` there.
pub fn cmd_train_3d(cfg: &PipelineConfig, data_dir: &Path, ckpt_dir: &Path) -> Result<TrainSummary> {
    let start = Instant::now();
    let path2d = ckpt_dir.join(CHECKPOINT_2D);
    if !path2d.exists() {
        return Err(Error::Pipeline(format!(
            "stage 3d needs the stage 2d checkpoint {}",
            path2d.display()
        )));
    }
    let model2d = Model2d::load(&path2d)?;
    let t = &cfg.train3d;
    let train = prepare_3d(&model2d, load_split(data_dir, "train")?)?;
    let val = prepare_3d(&model2d, load_split(data_dir, "val")?)?;
    if train.is_empty() {
        return Err(Error::Pipeline(format!("{}: no training scenes", data_dir.display())));
    }
    let weights = class_weights_from_labels(train.iter().flat_map(|s| s.semantic.iter().copied()), NUM_CLASSES);
    let avg = average_instance_sizes(
        train.iter().map(|s| {
            (
                s.cloud.gt_semantic.as_deref().expect("gt"),
                s.cloud.gt_instance.as_deref().expect("gt"),
            )
        }),
        NUM_CLASSES,
    );
    let config = Net3dConfig {
        input_dim: NUM_FEATURES + model2d.net.embed_dim,
        edge_widths: t.edge_widths.clone(),
        head_width: t.head_width,
        embed_dim: model2d.net.embed_dim,
        num_classes: NUM_CLASSES,
    };
    let mut store = ParamStore::new();
    let net = PropagationNet::new(&mut store, config, cfg.seed ^ 0x3d);
    let mut adam = AdamState::new(t.adam, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3d3d);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3d3e);
    let val_blocks: Vec<Block> = val
        .iter()
        .flat_map(|s| (0..t.val_blocks_per_scene).map(move |_| s))
        .map(|s| make_block(s, &t.block, &mut val_rng))
        .collect::<Result<_>>()?;
    let mut curve = CsvLog::create(ckpt_dir.join("curves_3d.csv"), LossReport3d::CSV_HEADER)?;
    let mut val_curve = CsvLog::create(ckpt_dir.join("curves_3d_val.csv"), "step,loss")?;
    let mut stop = EarlyStop::new(t.patience);
    let mut order: Vec<usize> = Vec::new();
    let mut step = 0;
    while step < t.steps {
        if order.is_empty() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
        }
        let block = make_block(&train[order.pop().expect("refilled")], &t.block, &mut rng)?;
        let report = train_step_3d(&net, &mut store, &mut adam, &block, &weights)?;
        curve.line(&report.csv_row())?;
        step = report.step;
        if !val_blocks.is_empty() && step % t.val_every == 0 {
            let losses: Vec<f64> = val_blocks
                .par_iter()
                .map(|b| {
                    let mut g = Graph::new(false);
                    let out = net.forward(&mut g, &store, b.inputs.clone(), &b.graph)?;
                    let li = instance_loss_3d(&mut g, out.features, &b.targets)?;
                    let ls = g.cross_entropy(out.logits, &b.semantic, &weights)?;
                    Ok(g.value(li.value).item() + g.value(ls).item())
                })
                .collect::<Result<_>>()?;
            let vl = losses.iter().sum::<f64>() / losses.len() as f64;
            val_curve.line(&format!("{step},{vl}"))?;
            log::info!("3d step {step}: train {:.4} val {vl:.4}", report.total());
            if stop.observe(vl, step, &store) {
                break;
            }
        }
    }
    curve.finish()?;
    val_curve.finish()?;
    let (best_val_loss, best_step) = match stop.best {
        Some((l, s, best)) => {
            store = best;
            (Some(l), s)
        }
        None => (None, step),
    };
    let model = Model3d {
        net,
        store,
        block: t.block,
        avg_instance_size: avg,
    };
    let path = ckpt_dir.join(CHECKPOINT_3D);
    model.checkpoint().save(&path)?;
    Ok(TrainSummary {
        steps: step,
        best_step,
        best_val_loss,
        seconds: start.elapsed().as_secs_f64(),
        checkpoint: path,
    })
}

// ---------------------------------------------------------------------------
// Inference

/// Everything produced for one scene.
#[derive(Debug, Clone)]
pub struct SceneResult {
    pub labels: Labeling,
    pub features: Tensor,
    pub logits: Tensor,
    pub view: BirdsEyeView,
    /// Padded `[H', W', D]` BEV embeddings.
    pub embeddings_2d: Tensor,
}

pub fn infer_scene(m2: &Model2d, m3: &Model3d, cloud: &PointCloud, cfg: &PipelineConfig) -> Result<SceneResult> {
    let t0 = Instant::now();
    let (view, emb, feats) = m2.embed(cloud)?;
    let inputs = point_inputs(cloud, &feats, view.ground)?;
    let t1 = Instant::now();
    let (features, logits) = infer_full_scene(&m3.net, &m3.store, cloud, &inputs, &m3.block)?;
    let t2 = Instant::now();
    let clusters = mean_shift(&features, &cfg.mean_shift)?;
    log::info!(
        "{} points: 2d {:.2}s, 3d {:.2}s, mean shift {:.2}s",
        cloud.len(),
        (t1 - t0).as_secs_f64(),
        (t2 - t1).as_secs_f64(),
        t2.elapsed().as_secs_f64()
    );
    let mut labels = assign_semantics(&clusters, &logits)?;
    let split = SplitConfig {
        alpha: cfg.split_alpha,
        avg_size: m3.avg_instance_size.clone(),
    };
    labels.instance = split_inconsistent(&labels.instance, &labels.semantic, &split)?;
    Ok(SceneResult {
        labels,
        features,
        logits,
        view,
        embeddings_2d: emb,
    })
}

/// Write `bev.ppm`, `height.ppm`, `embed_pca.ppm`, `pred_instances.ppm`
/// and, when GT is present, `gt_instances.ppm` / `gt_semantic.ppm` with the
/// given file-name prefix.
pub fn write_renders(dir: &Path, prefix: &str, view: &BirdsEyeView, embeddings: Option<&Tensor>, pred: Option<&Labeling>) -> Result<()> {
    let p = |s: &str| dir.join(format!("{prefix}{s}.ppm"));
    render::render_bev(view).save(&p("bev"))?;
    render::render_height(view).save(&p("height"))?;
    if let Some(g) = &view.gt_instance {
        render::render_labels(view, g).save(&p("gt_instances"))?;
    }
    if let Some(g) = &view.gt_semantic {
        render::render_labels(view, g).save(&p("gt_semantic"))?;
    }
    if let Some(e) = embeddings {
        render::render_pca(view, e)?.save(&p("embed_pca"))?;
    }
    if let Some(l) = pred {
        let cells: Vec<u32> = view
            .index_map
            .iter()
            .map(|i| i.map_or(0, |i| l.instance[i as usize]))
            .collect();
        render::render_labels(view, &cells).save(&p("pred_instances"))?;
    }
    Ok(())
}

/// Run the full pipeline on the scenes of `split` in `data_dir` (or on a
/// single scene file), writing `<name>.pred.txt` and `<name>.bevpc`
/// (features and logits, no GT) into `out_dir`, plus renders on request.
pub fn cmd_infer(cfg: &PipelineConfig, input: &Path, ckpt_dir: &Path, out_dir: &Path, split: &str, renders: bool) -> Result<Vec<String>> {
    create_dir(out_dir)?;
    let m2 = Model2d::load(&ckpt_dir.join(CHECKPOINT_2D))?;
    let m3 = Model3d::load(&ckpt_dir.join(CHECKPOINT_3D))?;
    let scenes: Vec<(String, PathBuf)> = if input.is_dir() {
        split_names(&read_manifest(input)?, split)
            .into_iter()
            .map(|n| {
                let p = scene_path(input, &n);
                (n, p)
            })
            .collect()
    } else {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Pipeline(format!("{}: not a scene file", input.display())))?;
        vec![(stem.to_string(), input.to_path_buf())]
    };
    // Scenes run one after another; each uses all workers internally.
    for (name, path) in &scenes {
        let cloud = io::load(path)?;
        let r = infer_scene(&m2, &m3, &cloud, cfg)?;
        write_predictions(&out_dir.join(format!("{name}{PRED_SUFFIX}")), &r.labels)?;
        let mut out = cloud.clone();
        out.gt_semantic = None;
        out.gt_instance = None;
        out.instance_features = Some(r.features.clone());
        out.semantic_logits = Some(r.logits.clone());
        io::save(&out, &scene_path(out_dir, name))?;
        if renders {
            write_renders(out_dir, &format!("{name}."), &r.view, Some(&r.embeddings_2d), Some(&r.labels))?;
        }
    }
    Ok(scenes.into_iter().map(|(n, _)| n).collect())
}

/// Renders of one scene file: input channels and GT, plus the PCA of the
/// 2D embeddings when a checkpoint directory is given.
pub fn cmd_render(cfg: &PipelineConfig, scene: &Path, ckpt_dir: Option<&Path>, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let cloud = io::load(scene)?;
    match ckpt_dir {
        Some(d) => {
            let m2 = Model2d::load(&d.join(CHECKPOINT_2D))?;
            let (view, emb, _) = m2.embed(&cloud)?;
            write_renders(out_dir, "", &view, Some(&emb), None)
        }
        None => write_renders(out_dir, "", &scene_view(&cloud, &cfg.bev)?, None, None),
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Aggregate and per-scene metrics plus the threshold verdict.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub overall: EvalReport,
    pub per_scene: Vec<(String, EvalReport)>,
    pub failures: Vec<String>,
}

impl EvalOutcome {
    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", EvalReport::CSV_HEADER);
        writeln!(s, "{}", self.overall.csv_row("all")).unwrap();
        for (n, r) in &self.per_scene {
            writeln!(s, "{}", r.csv_row(n)).unwrap();
        }
        s
    }
}

/// Load the prediction for `name`: `<name>.pred.txt` if present, else the
/// GT labels of a labeled `<name>.bevpc` in the prediction directory (so a
/// GT directory can be scored against itself).
fn load_prediction(pred_dir: &Path, name: &str) -> Result<Labeling> {
    let txt = pred_dir.join(format!("{name}{PRED_SUFFIX}"));
    if txt.exists() {
        return crate::grouping::read_predictions(&txt);
    }
    let scene = scene_path(pred_dir, name);
    if scene.exists() {
        if let Some(l) = io::load(&scene)?.labeling() {
            return Ok(l);
        }
    }
    Err(Error::Pipeline(format!("missing prediction for scene {name} in {}", pred_dir.display())))
}

/// Score the predictions in `pred_dir` against the GT scenes of the
/// configured split in `gt_dir`. Writes `metrics.csv` into `out_dir` when
/// given. Threshold failures are listed, not raised.
pub fn cmd_eval(cfg: &PipelineConfig, pred_dir: &Path, gt_dir: &Path, out_dir: Option<&Path>) -> Result<EvalOutcome> {
    let names = split_names(&read_manifest(gt_dir)?, &cfg.eval_split);
    let pairs: Vec<(String, Labeling, Labeling)> = names
        .par_iter()
        .map(|n| {
            let gt = io::load(&scene_path(gt_dir, n))?
                .labeling()
                .ok_or_else(|| Error::Pipeline(format!("GT scene {n} has no labels")))?;
            let pred = load_prediction(pred_dir, n)?;
            if pred.len() != gt.len() {
                return Err(Error::Pipeline(format!(
                    "scene {n}: {} predicted points but {} GT points",
                    pred.len(),
                    gt.len()
                )));
            }
            Ok((n.clone(), pred, gt))
        })
        .collect::<Result<_>>()?;
    let all: Vec<(Labeling, Labeling)> = pairs.iter().map(|(_, p, g)| (p.clone(), g.clone())).collect();
    let overall = evaluate(&all, NUM_CLASSES)?;
    let per_scene = pairs
        .iter()
        .map(|(n, p, g)| Ok((n.clone(), evaluate(&[(p.clone(), g.clone())], NUM_CLASSES)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut failures = Vec::new();
    let mut check = |name: &str, value: f64, min: Option<f64>| {
        if let Some(m) = min {
            if value < m {
                failures.push(format!("{name} {value:.4} < {m}"));
            }
        }
    };
    check("AP50", overall.instance.ap50, cfg.min_ap50);
    check("AP", overall.instance.ap, cfg.min_ap);
    check("mIoU", overall.semantic.miou, cfg.min_miou);
    let outcome = EvalOutcome {
        overall,
        per_scene,
        failures,
    };
    if let Some(d) = out_dir {
        create_dir(d)?;
        let p = d.join("metrics.csv");
        std::fs::write(&p, outcome.csv()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(outcome)
}

pub fn class_names() -> Vec<&'static str> {
    SemanticClass::ALL.iter().map(|c| c.name()).collect()
}
