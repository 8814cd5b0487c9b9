//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance [-- <substring>...]` runs the criteria
//! whose names contain any of the given substrings (all by default). The
//! process exits non-zero when any selected criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevis::bev::{below_ceiling_indices, ground_level, rasterize, unproject, Augmentation, BEV_CHANNELS, NET_ALIGNMENT};
use bevis::config::Config;
use bevis::eval::{ap_at_overlap, evaluate, SceneInstances};
use bevis::grouping::{mean_shift, split_inconsistent, MeanShiftConfig, SplitConfig};
use bevis::net2d::{instance_loss_2d, PairLossConfig};
use bevis::net3d::build_knn;
use bevis::numeric::gradcheck;
use bevis::numeric::{Graph, Tensor};
use bevis::pipeline::{self, PipelineConfig};
use bevis::scene::{canonicalize_instances, generate_scene, Labeling, SceneSpec};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for seed in 0..20 {
        for r in gradcheck::check_all(seed).map_err(err)? {
            checked += 1;
            if r.rel_error > worst.0 {
                worst = (r.rel_error, format!("{} (seed {seed})", r.name));
            }
            ensure(r.rel_error < 1e-4, || format!("{} seed {seed}: relative error {:e}", r.name, r.rel_error))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s (limit 120s)"))?;
    Ok(format!(
        "{checked} checks over 20 seeds, worst {:.2e} at {}, {secs:.1}s",
        worst.0, worst.1
    ))
}

fn zero_loss_when_margins_hold() -> Outcome {
    let cfg = PairLossConfig::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, k) = (64usize, 8usize, rng.random_range(2..6u32));
        let gt: Vec<u32> = (0..n).map(|_| rng.random_range(0..k)).collect();
        // Centres 3 apart on distinct axes; members within 0.2 of them.
        let mut e = vec![0.0; n * d];
        for p in 0..n {
            e[p * d + gt[p] as usize] = 3.0;
            for c in 0..d {
                e[p * d + c] += rng.random_range(-0.035..0.035);
            }
        }
        let valid = vec![true; n];
        let mut g = Graph::new(false);
        let emb = g.constant(Tensor::new(vec![n, d], e.clone()).map_err(err)?);
        let l = instance_loss_2d(&mut g, emb, &valid, &gt, &cfg, seed).map_err(err)?;
        let v = g.value(l.total).item();
        ensure(v == 0.0, || format!("seed {seed}: loss {v:e} with both margins satisfied"))?;
        // Pulling one member 1 unit away must make the loss positive.
        e[0] += 1.0;
        let mut g = Graph::new(false);
        let emb = g.constant(Tensor::new(vec![n, d], e).map_err(err)?);
        let l = instance_loss_2d(&mut g, emb, &valid, &gt, &cfg, seed).map_err(err)?;
        ensure(g.value(l.total).item() > 0.0, || format!("seed {seed}: violated margin gives zero loss"))?;
    }
    Ok("20 labelings: exactly 0 when satisfied, > 0 when violated".into())
}

fn small_spec(rng: &mut ChaCha8Rng) -> SceneSpec {
    SceneSpec {
        width: rng.random_range(5.0..7.0),
        depth: rng.random_range(4.0..6.0),
        num_objects: rng.random_range(0..6),
        seed: rng.random(),
        density: 40.0,
        ..SceneSpec::default()
    }
}

fn bev_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cells_checked = 0usize;
    for s in 0..100 {
        let cloud = generate_scene(&small_spec(&mut rng)).map_err(err)?;
        let frac = 0.9;
        let keep = below_ceiling_indices(&cloud, frac);
        // Ceiling removal keeps exactly the points at or below the cut.
        let ground = ground_level(&cloud).expect("points");
        let top = (0..cloud.len()).map(|i| cloud.xyz(i)[2]).fold(f64::MIN, f64::max);
        let cut = ground + frac * (top - ground);
        let want: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.xyz(i)[2] <= cut).collect();
        ensure(keep == want, || format!("scene {s}: ceiling cut mismatch"))?;

        let cell = if s % 2 == 0 { 0.1 } else { 0.05 };
        let sub = cloud.select(&keep);
        let view = rasterize(&sub, cell, 4096).map_err(err)?;
        // Brute-force winner per cell: highest z, lowest index on ties.
        let mut winner: BTreeMap<usize, usize> = BTreeMap::new();
        for p in 0..sub.len() {
            let [x, y, z] = sub.xyz(p);
            let j = (((x - view.origin[0]) / cell).floor() as usize).min(view.width - 1);
            let i = (((y - view.origin[1]) / cell).floor() as usize).min(view.height - 1);
            let c = i * view.width + j;
            match winner.get(&c) {
                Some(&q) if sub.xyz(q)[2] >= z => {}
                _ => {
                    winner.insert(c, p);
                }
            }
        }
        for c in 0..view.num_cells() {
            let expect = winner.get(&c).copied();
            ensure(view.valid[c] == expect.is_some(), || format!("scene {s}: cell {c} validity"))?;
            ensure(view.index_map[c].map(|v| v as usize) == expect, || format!("scene {s}: cell {c} winner"))?;
            if let Some(p) = expect {
                let rgb = sub.rgb(p);
                let px = view.pixel(c);
                let h = (sub.xyz(p)[2] - view.ground).max(0.0);
                ensure(px[..3] == rgb[..] && px[3] == h, || format!("scene {s}: cell {c} channels"))?;
                let gt = sub.gt_instance.as_ref().expect("labels")[p];
                ensure(view.gt_instance.as_ref().expect("labels")[c] == gt, || format!("scene {s}: cell {c} GT"))?;
            } else {
                ensure(view.pixel(c).iter().all(|&v| v == 0.0), || format!("scene {s}: empty cell {c} not zero"))?;
            }
            cells_checked += 1;
        }
        // Unprojection returns each cell's vector to its winning point only.
        let codes: Vec<f64> = (0..view.num_cells()).flat_map(|c| [c as f64, -(c as f64)]).collect();
        let feats = Tensor::new(vec![view.height, view.width, 2], codes).map_err(err)?;
        let un = unproject(&view, &feats, sub.len()).map_err(err)?;
        let seen = un.seen.iter().filter(|&&b| b).count();
        ensure(seen == view.num_valid(), || format!("scene {s}: {seen} seen vs {} valid", view.num_valid()))?;
        for (&c, &p) in &winner {
            ensure(un.row(p) == [c as f64, -(c as f64)], || format!("scene {s}: unprojected row {p}"))?;
        }
        // Padding to multiples of 16 keeps the content and adds invalid cells.
        let padded = view.pad_to_multiple(NET_ALIGNMENT);
        ensure(
            padded.height % 16 == 0 && padded.width % 16 == 0 && padded.height >= view.height && padded.width >= view.width,
            || format!("scene {s}: padded to {}x{}", padded.height, padded.width),
        )?;
        for i in 0..padded.height {
            for j in 0..padded.width {
                let c = i * padded.width + j;
                if i < view.height && j < view.width {
                    let o = i * view.width + j;
                    ensure(padded.index_map[c] == view.index_map[o] && padded.pixel(c) == view.pixel(o), || {
                        format!("scene {s}: padding moved cell ({i},{j})")
                    })?;
                } else {
                    ensure(!padded.valid[c] && padded.pixel(c).iter().all(|&v| v == 0.0), || {
                        format!("scene {s}: padding cell ({i},{j}) not empty")
                    })?;
                }
            }
        }
        ensure(padded.num_cells() * BEV_CHANNELS == padded.channels.len(), || "channel layout".into())?;
        // Rotations and flips permute cells: same winners, same count;
        // four quarter turns are the identity.
        let aug = Augmentation {
            crop: Augmentation::FULL,
            quarter_turns: rng.random_range(0..4),
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
            scale: 1.0,
        };
        let a = aug.apply(&view);
        let mut before: Vec<u32> = view.index_map.iter().flatten().copied().collect();
        let mut after: Vec<u32> = a.index_map.iter().flatten().copied().collect();
        before.sort_unstable();
        after.sort_unstable();
        ensure(before == after && a.num_valid() == view.num_valid(), || format!("scene {s}: augmentation lost cells"))?;
        let turn4 = view.rot90().rot90().rot90().rot90();
        ensure(turn4 == view, || format!("scene {s}: four quarter turns differ"))?;
    }
    Ok(format!("100 scenes, {cells_checked} cells"))
}

fn same_partition(a: &[u32], b: &[u32]) -> bool {
    canonicalize_instances(a) == canonicalize_instances(b)
}

fn mean_shift_recovery() -> Outcome {
    let cfg = MeanShiftConfig::default();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let k = rng.random_range(2..7);
        let mut centers: Vec<Vec<f64>> = Vec::new();
        while centers.len() < k {
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(-6.0..6.0)).collect();
            let far = centers.iter().all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= 16.0);
            if far {
                centers.push(c);
            }
        }
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..rng.random_range(60..300) {
            let c = rng.random_range(0..k);
            truth.push(c as u32);
            data.extend(centers[c].iter().map(|v| v + rng.random_range(-0.15..0.15)));
        }
        let n = truth.len();
        let got = mean_shift(&Tensor::new(vec![n, d], data).map_err(err)?, &cfg).map_err(err)?;
        ensure(same_partition(&got, &truth), || format!("seed {seed}: planted clusters not recovered"))?;
    }
    let got = mean_shift(&Tensor::new(vec![4, 1], vec![0.0, 0.1, 5.0, 5.1]).map_err(err)?, &cfg).map_err(err)?;
    ensure(got == [0, 0, 1, 1], || format!("{{0,0.1,5,5.1}} grouped as {got:?}"))?;
    Ok("50 planted configurations and {0, 0.1, 5, 5.1} recovered".into())
}

fn knn_brute_force() -> Outcome {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse grid coordinates create many exact distance ties.
        let pts: Vec<f64> = (0..500 * 3).map(|_| rng.random_range(0..8) as f64 * 0.25).collect();
        let g = build_knn(&pts, 3, 20).map_err(err)?;
        for i in 0..500 {
            let mut all: Vec<(f64, usize)> = (0..500)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|a| (pts[i * 3 + a] - pts[j * 3 + a]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(20).map(|p| p.1).collect();
            ensure(g.row(i) == want.as_slice(), || format!("seed {seed}: row {i} differs"))?;
        }
    }
    Ok("10 seeds x 500 points, k=20, ties by index".into())
}

// Independent AP: build instances, match greedily, and integrate the
// precision envelope over recall steps.
fn reference_ap(scenes: &[(Labeling, Labeling)], threshold: f64) -> BTreeMap<u32, Option<f64>> {
    struct Inst {
        class: u32,
        members: Vec<bool>,
        size: usize,
    }
    fn insts(l: &Labeling) -> Vec<Inst> {
        let n = l.instance.len();
        let mut ids: Vec<u32> = l.instance.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.iter()
            .map(|&id| {
                let members: Vec<bool> = l.instance.iter().map(|&i| i == id).collect();
                let mut votes = [0usize; 16];
                for p in 0..n {
                    if members[p] {
                        votes[l.semantic[p] as usize] += 1;
                    }
                }
                let best = (0..16).max_by(|&a, &b| votes[a].cmp(&votes[b]).then(b.cmp(&a))).unwrap();
                Inst {
                    class: best as u32,
                    size: members.iter().filter(|&&m| m).count(),
                    members,
                }
            })
            .collect()
    }
    let mut dets: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    let mut num_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for (pred, gt) in scenes {
        let n = pred.instance.len() as f64;
        let p = insts(pred);
        let g = insts(gt);
        for gi in &g {
            *num_gt.entry(gi.class).or_default() += 1;
        }
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].size.cmp(&p[a].size).then(a.cmp(&b)));
        let mut used = vec![false; g.len()];
        for q in order {
            let mut best: Option<(f64, usize)> = None;
            for (gi, gg) in g.iter().enumerate() {
                if used[gi] || gg.class != p[q].class {
                    continue;
                }
                let inter = gg.members.iter().zip(&p[q].members).filter(|(a, b)| **a && **b).count();
                let iou = inter as f64 / (gg.size + p[q].size - inter) as f64;
                if iou >= threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
            if let Some((_, gi)) = best {
                used[gi] = true;
            }
            dets.entry(p[q].class).or_default().push((p[q].size as f64 / n, best.is_some()));
        }
    }
    let mut out = BTreeMap::new();
    let classes: std::collections::BTreeSet<u32> = dets.keys().chain(num_gt.keys()).copied().collect();
    for c in classes {
        let total = num_gt.get(&c).copied().unwrap_or(0);
        if total == 0 {
            out.insert(c, None);
            continue;
        }
        let mut d = dets.get(&c).cloned().unwrap_or_default();
        d.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let (mut tp, mut fp) = (0.0, 0.0);
        let mut curve = vec![(0.0, 1.0)];
        for &(_, hit) in &d {
            if hit {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            curve.push((tp / total as f64, tp / (tp + fp)));
        }
        let mut ap = 0.0;
        for i in 1..curve.len() {
            let envelope = curve[i..].iter().map(|x| x.1).fold(0.0, f64::max);
            ap += (curve[i].0 - curve[i - 1].0) * envelope;
        }
        out.insert(c, Some(ap));
    }
    out
}

fn random_labeling(rng: &mut ChaCha8Rng, n: usize) -> Labeling {
    let k = rng.random_range(1..=5u32);
    let classes: Vec<u32> = (0..k).map(|_| rng.random_range(0..3)).collect();
    let instance: Vec<u32> = (0..n).map(|_| rng.random_range(0..k)).collect();
    // Mostly-pure instances with some label noise.
    let semantic = instance
        .iter()
        .map(|&i| if rng.random_bool(0.85) { classes[i as usize] } else { rng.random_range(0..3) })
        .collect();
    Labeling { semantic, instance }
}

fn perturbed(rng: &mut ChaCha8Rng, gt: &Labeling) -> Labeling {
    let mut l = gt.clone();
    for p in 0..l.len() {
        if rng.random_bool(0.25) {
            l.instance[p] = rng.random_range(0..5);
        }
        if rng.random_bool(0.15) {
            l.semantic[p] = rng.random_range(0..3);
        }
    }
    l
}

fn ap_matcher() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut compared = 0;
    for trial in 0..500 {
        let scenes: Vec<(Labeling, Labeling)> = (0..rng.random_range(1..=2))
            .map(|_| {
                let gt = random_labeling(&mut rng, 60);
                let pred = if rng.random_bool(0.5) { perturbed(&mut rng, &gt) } else { random_labeling(&mut rng, 60) };
                (pred, gt)
            })
            .collect();
        let prepared: Vec<SceneInstances> = scenes
            .iter()
            .map(|(p, g)| SceneInstances::new(p, g))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        for t in [0.25, 0.5, 0.75] {
            let got = ap_at_overlap(&prepared, t);
            let want = reference_ap(&scenes, t);
            let close = got.len() == want.len()
                && got.iter().zip(&want).all(|((c1, a), (c2, b))| {
                    c1 == c2
                        && match (a, b) {
                            (Some(x), Some(y)) => (x - y).abs() < 1e-12,
                            (None, None) => true,
                            _ => false,
                        }
                });
            ensure(close, || format!("trial {trial} t={t}: {got:?} vs reference {want:?}"))?;
            compared += 1;
        }
    }
    // Ground truth against itself scores perfectly.
    let dir = tempfile::tempdir().map_err(err)?;
    let mut c = Config::new();
    c.set("gen.num_scenes", 6);
    c.set("gen.density", 40);
    c.set("eval.split", "all");
    let cfg = PipelineConfig::from_config(&c).map_err(err)?;
    pipeline::cmd_gen(&cfg, dir.path()).map_err(err)?;
    let out = pipeline::cmd_eval(&cfg, dir.path(), dir.path(), None).map_err(err)?;
    let r = &out.overall;
    ensure(
        r.instance.ap == 1.0 && r.instance.ap25 == 1.0 && r.instance.ap50 == 1.0 && r.instance.ap75 == 1.0,
        || format!("eval(gt, gt) AP {:?}", (r.instance.ap, r.instance.ap50)),
    )?;
    ensure(
        r.semantic.miou == 1.0 && r.semantic.oacc == 1.0 && r.semantic.macc == 1.0,
        || format!("eval(gt, gt) mIoU {}", r.semantic.miou),
    )?;
    let direct = evaluate(&[], 8).map_err(err)?;
    ensure(direct.instance.ap == 0.0, || "empty evaluation".into())?;
    Ok(format!("{compared} threshold comparisons agree; eval(gt, gt) = 1"))
}

fn split_rule() -> Outcome {
    let mut avg = vec![0.0; 8];
    avg[1] = 200.0;
    avg[6] = 160.0;
    let cfg = SplitConfig {
        alpha: SplitConfig::DEFAULT_ALPHA,
        avg_size: avg,
    };
    // A wall segment that swallowed a window: both parts exceed alpha x avg.
    let mut sem = vec![1u32; 100];
    sem.extend(vec![6u32; 80]);
    let out = split_inconsistent(&vec![0; 180], &sem, &cfg).map_err(err)?;
    let mut want = vec![0u32; 100];
    want.extend(vec![1u32; 80]);
    ensure(out == want, || "wall/window not split into two instances".into())?;
    // A window fragment below its threshold stays with the wall.
    let mut sem = vec![1u32; 100];
    sem.extend(vec![6u32; 30]);
    let out = split_inconsistent(&vec![0; 130], &sem, &cfg).map_err(err)?;
    ensure(out.iter().all(|&i| i == 0), || "sub-threshold fragment was split".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000 {
        let n = rng.random_range(1..200);
        let k = rng.random_range(1..6u32);
        let instance: Vec<u32> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let semantic: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let cfg = SplitConfig {
            alpha: rng.random_range(0.05..0.6),
            avg_size: (0..4).map(|_| rng.random_range(0.0..60.0)).collect(),
        };
        let once = split_inconsistent(&instance, &semantic, &cfg).map_err(err)?;
        let twice = split_inconsistent(&once, &semantic, &cfg).map_err(err)?;
        ensure(once == twice, || format!("trial {trial}: split is not idempotent"))?;
        // The split only refines: each new instance lies in one old one.
        let mut parent = BTreeMap::new();
        for (&new, &old) in once.iter().zip(&instance) {
            ensure(*parent.entry(new).or_insert(old) == old, || format!("trial {trial}: merged instances"))?;
        }
    }
    Ok("wall/window split; 1000 random labelings idempotent and refining".into())
}

// ---------------------------------------------------------------------------
// End to end

struct RunStats {
    train2d_secs: f64,
    train3d_secs: f64,
    ap50: f64,
    miou: f64,
    ap: f64,
    failures: Vec<String>,
}

fn e2e_config() -> Result<PipelineConfig, String> {
    let text = include_str!("../configs/e2e.cfg");
    PipelineConfig::from_config(&Config::parse(text, Path::new(".")).map_err(err)?).map_err(err)
}

fn full_run(root: &Path) -> Result<RunStats, String> {
    let cfg = e2e_config()?;
    let (data, ckpt, pred) = (root.join("data"), root.join("ckpt"), root.join("pred"));
    let entries = pipeline::cmd_gen(&cfg, &data).map_err(err)?;
    let test = entries.iter().filter(|e| e.split == "test").count();
    ensure(entries.len() == 40 && test == 4, || format!("{} scenes, {test} test", entries.len()))?;
    let t2 = pipeline::cmd_train_2d(&cfg, &data, &ckpt).map_err(err)?;
    let t3 = pipeline::cmd_train_3d(&cfg, &data, &ckpt).map_err(err)?;
    pipeline::cmd_infer(&cfg, &data, &ckpt, &pred, "test", true).map_err(err)?;
    let out = pipeline::cmd_eval(&cfg, &pred, &data, Some(&pred)).map_err(err)?;
    eprintln!("{}", out.overall.table(&pipeline::class_names()));
    Ok(RunStats {
        train2d_secs: t2.seconds,
        train3d_secs: t3.seconds,
        ap50: out.overall.instance.ap50,
        miou: out.overall.semantic.miou,
        ap: out.overall.instance.ap,
        failures: out.failures,
    })
}

/// Relative paths and contents of every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).expect("readable").flatten().collect();
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).expect("under root").display().to_string();
                out.insert(rel, std::fs::read(&p).expect("readable"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

struct E2e {
    first: tempfile::TempDir,
    stats: Result<RunStats, String>,
}

fn e2e_quality(run: &E2e) -> Outcome {
    let s = run.stats.as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "train2d {:.0}s, train3d {:.0}s, AP50 {:.3}, mIoU {:.3}, AP {:.3}",
        s.train2d_secs, s.train3d_secs, s.ap50, s.miou, s.ap
    );
    let mut problems = Vec::new();
    if s.train2d_secs > 300.0 {
        problems.push("2D training over 5 min".to_string());
    }
    if s.train3d_secs > 600.0 {
        problems.push("3D training over 10 min".to_string());
    }
    problems.extend(s.failures.iter().cloned());
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn e2e_repeat(run: &E2e) -> Outcome {
    run.stats.as_ref().map_err(Clone::clone)?;
    let second = tempfile::tempdir().map_err(err)?;
    full_run(second.path())?;
    let a = snapshot(run.first.path());
    let b = snapshot(second.path());
    ensure(a.keys().eq(b.keys()), || "the two runs wrote different file sets".into())?;
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("files differ: {differing:?}"))?;
    let bytes: usize = a.values().map(Vec::len).sum();
    Ok(format!("{} files, {bytes} bytes identical", a.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    let mut report = |name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {d}");
            }
        }
    };
    let run = |f: fn() -> Outcome| -> Outcome {
        std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };
    let unit: [(&str, fn() -> Outcome); 7] = [
        ("gradient_check", gradients),
        ("zero_loss_margins", zero_loss_when_margins_hold),
        ("bev_invariants", bev_invariants),
        ("mean_shift_planted", mean_shift_recovery),
        ("knn_brute_force", knn_brute_force),
        ("ap_matcher_and_self_eval", ap_matcher),
        ("split_wall_window_idempotent", split_rule),
    ];
    for (name, f) in unit {
        if selected(name) {
            let start = Instant::now();
            report(name, start, run(f));
        }
    }
    let (quality, repeat) = (selected("e2e_quality"), selected("e2e_bit_identical_repeat"));
    if quality || repeat {
        let start = Instant::now();
        let first = tempfile::tempdir().expect("temp dir");
        let stats = full_run(first.path());
        let e2e = E2e { first, stats };
        if quality {
            report("e2e_quality", start, e2e_quality(&e2e));
        }
        if repeat {
            let start = Instant::now();
            report("e2e_bit_identical_repeat", start, e2e_repeat(&e2e));
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
