//! Semantic metrics and instance average precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grouping::instance_classes;
use crate::scene::Labeling;

/// Per-class confusion counts accumulated over one or more scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCounts {
    pub num_classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub correct: u64,
    pub total: u64,
}

impl SemanticCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            correct: 0,
            total: 0,
        }
    }

    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("semantic_metrics", format!("{} predictions, {} labels", pred.len(), gt.len())));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c as usize >= k) {
            return Err(Error::InvalidArgument(format!("class {bad} out of range for {k} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.total += 1;
            if p == g {
                self.correct += 1;
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> SemanticMetrics {
        let mut iou = vec![None; self.num_classes];
        let mut acc = vec![None; self.num_classes];
        for c in 0..self.num_classes {
            let gt = self.tp[c] + self.fn_[c];
            if gt > 0 {
                iou[c] = Some(self.tp[c] as f64 / (self.tp[c] + self.fp[c] + self.fn_[c]) as f64);
                acc[c] = Some(self.tp[c] as f64 / gt as f64);
            }
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        SemanticMetrics {
            miou: mean(&iou),
            oacc: if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 },
            macc: mean(&acc),
            per_class_iou: iou,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMetrics {
    /// Mean IoU over classes present in the ground truth.
    pub miou: f64,
    pub oacc: f64,
    /// Mean per-class recall over classes present in the ground truth.
    pub macc: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn semantic_metrics(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<SemanticMetrics> {
    let mut c = SemanticCounts::new(num_classes);
    c.add(pred, gt)?;
    Ok(c.metrics())
}

/// An instance as a sorted point set with a class and a ranking score.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub class: u32,
    pub points: Vec<usize>,
    pub confidence: f64,
}

/// Instances of a labeling, in ascending id order. The class is the
/// majority semantic label of the members and the confidence is the
/// instance size divided by the number of points.
pub fn instances_of(labels: &Labeling) -> Vec<Instance> {
    let classes = instance_classes(&labels.instance, &labels.semantic);
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (p, &id) in labels.instance.iter().enumerate() {
        members.entry(id).or_default().push(p);
    }
    let n = labels.len().max(1) as f64;
    members
        .into_iter()
        .map(|(id, points)| Instance {
            id,
            class: classes[&id],
            confidence: points.len() as f64 / n,
            points,
        })
        .collect()
}

/// Intersections, unions and IoU between every predicted and GT instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub num_pred: usize,
    pub num_gt: usize,
    pub intersection: Vec<usize>,
    pub union: Vec<usize>,
}

impl MatchMatrix {
    pub fn new(pred: &[Instance], gt: &[Instance], num_points: usize) -> Self {
        let mut gt_of = vec![usize::MAX; num_points];
        for (g, inst) in gt.iter().enumerate() {
            for &p in &inst.points {
                gt_of[p] = g;
            }
        }
        let mut intersection = vec![0; pred.len() * gt.len()];
        for (q, inst) in pred.iter().enumerate() {
            for &p in &inst.points {
                if let Some(&g) = gt_of.get(p).filter(|&&g| g != usize::MAX) {
                    intersection[q * gt.len() + g] += 1;
                }
            }
        }
        let mut union = vec![0; pred.len() * gt.len()];
        for q in 0..pred.len() {
            for g in 0..gt.len() {
                let i = intersection[q * gt.len() + g];
                union[q * gt.len() + g] = pred[q].points.len() + gt[g].points.len() - i;
            }
        }
        Self {
            num_pred: pred.len(),
            num_gt: gt.len(),
            intersection,
            union,
        }
    }

    pub fn iou(&self, pred: usize, gt: usize) -> f64 {
        let u = self.union[pred * self.num_gt + gt];
        if u == 0 {
            0.0
        } else {
            self.intersection[pred * self.num_gt + gt] as f64 / u as f64
        }
    }
}

/// Detections of one class: (confidence, is true positive) and GT count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassDetections {
    pub scored: Vec<(f64, bool)>,
    pub num_gt: usize,
}

/// Greedy matching within one scene at an IoU threshold. Predictions of
/// each class are visited by descending confidence (ties → lower id); a
/// prediction is a true positive when some still unmatched GT instance of
/// the same class has IoU ≥ threshold, taking the best such IoU (ties →
/// lower GT index).
pub fn match_scene(pred: &[Instance], gt: &[Instance], m: &MatchMatrix, threshold: f64) -> BTreeMap<u32, ClassDetections> {
    let mut out: BTreeMap<u32, ClassDetections> = BTreeMap::new();
    for g in gt {
        out.entry(g.class).or_default().num_gt += 1;
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].confidence.total_cmp(&pred[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    for q in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, inst) in gt.iter().enumerate() {
            if taken[g] || inst.class != pred[q].class {
                continue;
            }
            let iou = m.iou(q, g);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.entry(pred[q].class).or_default().scored.push((pred[q].confidence, best.is_some()));
    }
    out
}

/// All-point interpolated average precision. Detections are ranked by
/// descending confidence (stable for ties); AP is the sum over true
/// positives of the best precision at that rank or later, divided by the
/// number of GT instances. No GT → `None`.
pub fn average_precision(det: &ClassDetections) -> Option<f64> {
    if det.num_gt == 0 {
        return None;
    }
    let mut scored = det.scored.clone();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(scored.len());
    for (r, &(_, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (r + 1) as f64);
    }
    let mut best_after = 0.0f64;
    let mut sum = 0.0;
    for r in (0..scored.len()).rev() {
        best_after = best_after.max(precision[r]);
        if scored[r].1 {
            sum += best_after;
        }
    }
    Some(sum / det.num_gt as f64)
}

/// One scene prepared for instance evaluation.
#[derive(Debug, Clone)]
pub struct SceneInstances {
    pub pred: Vec<Instance>,
    pub gt: Vec<Instance>,
    pub matrix: MatchMatrix,
}

impl SceneInstances {
    pub fn new(pred: &Labeling, gt: &Labeling) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "evaluation",
                format!("{} predicted points, {} GT points", pred.len(), gt.len()),
            ));
        }
        let p = instances_of(pred);
        let g = instances_of(gt);
        let matrix = MatchMatrix::new(&p, &g, gt.len());
        Ok(Self { pred: p, gt: g, matrix })
    }
}

/// Per-class AP at one threshold, pooling detections over scenes.
pub fn ap_at_overlap(scenes: &[SceneInstances], threshold: f64) -> BTreeMap<u32, Option<f64>> {
    let mut pooled: BTreeMap<u32, ClassDetections> = BTreeMap::new();
    for s in scenes {
        for (c, d) in match_scene(&s.pred, &s.gt, &s.matrix, threshold) {
            let e = pooled.entry(c).or_default();
            e.scored.extend(d.scored);
            e.num_gt += d.num_gt;
        }
    }
    pooled.into_iter().map(|(c, d)| (c, average_precision(&d))).collect()
}

/// Mean over classes that have at least one GT instance.
pub fn mean_ap(per_class: &BTreeMap<u32, Option<f64>>) -> f64 {
    let v: Vec<f64> = per_class.values().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The strict range 0.50, 0.55, …, 0.95.
pub fn strict_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    /// (threshold, per-class AP) for 0.25, 0.5, 0.75 and the strict range.
    pub per_threshold: Vec<(f64, BTreeMap<u32, Option<f64>>)>,
    /// Mean of the class-mean AP over the strict range.
    pub ap: f64,
    pub ap25: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl ApReport {
    pub fn class_mean_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold.iter().find(|(t, _)| *t == threshold).map(|(_, m)| mean_ap(m))
    }
}

/// AP over the strict range together with AP at 0.25, 0.5 and 0.75.
/// Matching only pairs instances of equal class, so a correct segment with
/// a wrong class is both a false positive and a missed GT instance.
pub fn strict_ap(scenes: &[SceneInstances]) -> ApReport {
    let mut thresholds = vec![0.25];
    thresholds.extend(strict_thresholds());
    let per_threshold: Vec<_> = thresholds.iter().map(|&t| (t, ap_at_overlap(scenes, t))).collect();
    let at = |t: f64| mean_ap(&per_threshold.iter().find(|(x, _)| *x == t).expect("evaluated").1);
    let strict: Vec<f64> = strict_thresholds().into_iter().map(at).collect();
    ApReport {
        ap: strict.iter().sum::<f64>() / strict.len() as f64,
        ap25: at(0.25),
        ap50: at(0.5),
        ap75: at(0.75),
        per_threshold,
    }
}

/// Metrics of a set of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub semantic: SemanticMetrics,
    pub instance: ApReport,
}

pub fn evaluate(pairs: &[(Labeling, Labeling)], num_classes: usize) -> Result<EvalReport> {
    let mut counts = SemanticCounts::new(num_classes);
    let mut scenes = Vec::with_capacity(pairs.len());
    for (pred, gt) in pairs {
        counts.add(&pred.semantic, &gt.semantic)?;
        scenes.push(SceneInstances::new(pred, gt)?);
    }
    Ok(EvalReport {
        semantic: counts.metrics(),
        instance: strict_ap(&scenes),
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "scope,mIoU,oAcc,mAcc,AP,AP25,AP50,AP75";

    pub fn csv_row(&self, scope: &str) -> String {
        format!(
            "{scope},{},{},{},{},{},{},{}",
            self.semantic.miou,
            self.semantic.oacc,
            self.semantic.macc,
            self.instance.ap,
            self.instance.ap25,
            self.instance.ap50,
            self.instance.ap75
        )
    }

    /// Human-readable summary with per-class IoU and AP₀.₅.
    pub fn table(&self, class_names: &[&str]) -> String {
        let mut s = String::new();
        let name = |c: usize| class_names.get(c).copied().unwrap_or("?").to_string();
        writeln!(s, "{:<10} {:>8} {:>8}", "class", "IoU", "AP50").unwrap();
        let ap50 = self
            .instance
            .per_threshold
            .iter()
            .find(|(t, _)| *t == 0.5)
            .map(|(_, m)| m.clone())
            .unwrap_or_default();
        for c in 0..self.semantic.per_class_iou.len() {
            let iou = self.semantic.per_class_iou[c];
            let ap = ap50.get(&(c as u32)).copied().flatten();
            if iou.is_none() && ap.is_none() {
                continue;
            }
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(s, "{:<10} {:>8} {:>8}", name(c), f(iou), f(ap)).unwrap();
        }
        writeln!(
            s,
            "mIoU {:.4}  oAcc {:.4}  mAcc {:.4}  AP {:.4}  AP25 {:.4}  AP50 {:.4}  AP75 {:.4}",
            self.semantic.miou,
            self.semantic.oacc,
            self.semantic.macc,
            self.instance.ap,
            self.instance.ap25,
            self.instance.ap50,
            self.instance.ap75
        )
        .unwrap();
        s
    }
}
