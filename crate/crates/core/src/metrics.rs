//! mIoU from a dataset-level confusion matrix, and Panoptic Quality with
//! thing/stuff splits. Both accumulators merge, so shards can be evaluated
//! independently.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classes::ClassTable;
use crate::error::{shape_err, Error, Result};
use crate::postprocess::{PanopticMap, SemanticMap};

/// `counts[gt * K + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &SemanticMap, gt: &SemanticMap, ignore_label: u32) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(shape_err!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height,
                pred.width,
                gt.height,
                gt.width
            ));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == ignore_label {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::Data(format!("label pair ({g}, {p}) outside 0..{}", self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(shape_err!("cannot merge {}-class and {}-class matrices", self.k, other.k));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both GT and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let gt: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
                let pr: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
                let union = gt + pr - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over present classes; 0 (with a warning) when nothing was scored.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            log::warn!("no scored pixels; mIoU defined as 0");
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
}

pub fn miou(preds: &[SemanticMap], gts: &[SemanticMap], k: usize, ignore_label: u32) -> Result<MiouResult> {
    if preds.len() != gts.len() {
        return Err(shape_err!("{} predictions for {} ground truths", preds.len(), gts.len()));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g, ignore_label)?;
    }
    Ok(MiouResult {
        miou: cm.miou(),
        class_iou: cm.class_iou(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStat {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl PqStat {
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn pq(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if den == 0.0 {
            0.0
        } else {
            self.iou_sum / den
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if den == 0.0 {
            0.0
        } else {
            self.tp as f64 / den
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub class_id: usize,
    pub is_thing: bool,
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub pq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_thing: f64,
    pub pq_stuff: f64,
    pub per_class: Vec<ClassPq>,
}

/// Per-class TP/FP/FN and IoU sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqAccumulator {
    stats: BTreeMap<usize, PqStat>,
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stat(&self, class_id: usize) -> PqStat {
        self.stats.get(&class_id).copied().unwrap_or_default()
    }

    /// Matches segments of one image pair. A pair matches when the classes
    /// agree and IoU > 0.5, where the union leaves out the prediction's
    /// pixels that fall on ground-truth void. Unmatched predictions lying
    /// mostly on void are not false positives.
    pub fn add(&mut self, pred: &PanopticMap, gt: &PanopticMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(shape_err!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height,
                pred.width,
                gt.height,
                gt.width
            ));
        }
        let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (&g, &p) in gt.ids().iter().zip(pred.ids()) {
            *inter.entry((g, p)).or_default() += 1;
        }
        let void_overlap = |p: u32| inter.get(&(0, p)).copied().unwrap_or(0);
        let mut gt_matched = BTreeMap::new();
        let mut pred_matched = BTreeMap::new();
        for (&(g, p), &n) in &inter {
            if g == 0 || p == 0 {
                continue;
            }
            let (gs, ps) = match (gt.segment(g), pred.segment(p)) {
                (Some(a), Some(b)) => (a, b),
                _ => continue,
            };
            if gs.class_id != ps.class_id {
                continue;
            }
            let union = (ps.area + gs.area) as u64 - n - void_overlap(p);
            let iou = n as f64 / union as f64;
            if iou > 0.5 {
                let st = self.stats.entry(gs.class_id).or_default();
                st.tp += 1;
                st.iou_sum += iou;
                gt_matched.insert(g, ());
                pred_matched.insert(p, ());
            }
        }
        for s in gt.segments() {
            if !gt_matched.contains_key(&s.id) {
                self.stats.entry(s.class_id).or_default().fn_ += 1;
            }
        }
        for s in pred.segments() {
            if pred_matched.contains_key(&s.id) {
                continue;
            }
            if void_overlap(s.id) as f64 / s.area as f64 > 0.5 {
                continue;
            }
            self.stats.entry(s.class_id).or_default().fp += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (&c, s) in &other.stats {
            let st = self.stats.entry(c).or_default();
            st.iou_sum += s.iou_sum;
            st.tp += s.tp;
            st.fp += s.fp;
            st.fn_ += s.fn_;
        }
    }

    /// Class means over classes that occur (TP+FP+FN > 0).
    pub fn result(&self, table: &ClassTable) -> PqResult {
        let mut per_class = Vec::new();
        let (mut pq, mut sq, mut rq) = (Vec::new(), Vec::new(), Vec::new());
        let (mut th, mut st) = (Vec::new(), Vec::new());
        for c in table.classes() {
            let s = self.stat(c.id);
            if s.is_empty() {
                continue;
            }
            pq.push(s.pq());
            sq.push(s.sq());
            rq.push(s.rq());
            if c.is_thing { &mut th } else { &mut st }.push(s.pq());
            per_class.push(ClassPq {
                class_id: c.id,
                is_thing: c.is_thing,
                iou_sum: s.iou_sum,
                tp: s.tp,
                fp: s.fp,
                fn_: s.fn_,
                pq: s.pq(),
            });
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        PqResult {
            pq: mean(&pq),
            sq: mean(&sq),
            rq: mean(&rq),
            pq_thing: mean(&th),
            pq_stuff: mean(&st),
            per_class,
        }
    }
}

pub fn panoptic_quality(preds: &[PanopticMap], gts: &[PanopticMap], table: &ClassTable) -> Result<PqResult> {
    if preds.len() != gts.len() {
        return Err(shape_err!("{} predictions for {} ground truths", preds.len(), gts.len()));
    }
    let mut acc = PqAccumulator::new();
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.result(table))
}

/// Evaluation output for the CLI: a text table and a JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum MetricsReport {
    Semantic {
        images: usize,
        #[serde(flatten)]
        result: MiouResult,
    },
    Panoptic {
        images: usize,
        #[serde(flatten)]
        result: PqResult,
        miou: f64,
    },
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self, table: &ClassTable) -> String {
        let name = |c: usize| table.classes().get(c).map_or("?", |x| x.name.as_str()).to_string();
        let mut s = String::new();
        match self {
            MetricsReport::Semantic { images, result } => {
                writeln!(s, "images: {images}").unwrap();
                writeln!(s, "{:<12} {:>8}", "class", "IoU").unwrap();
                for (c, iou) in result.class_iou.iter().enumerate() {
                    match iou {
                        Some(v) => writeln!(s, "{:<12} {:>8.2}", name(c), 100.0 * v).unwrap(),
                        None => writeln!(s, "{:<12} {:>8}", name(c), "-").unwrap(),
                    }
                }
                writeln!(s, "mIoU {:.2}", 100.0 * result.miou).unwrap();
            }
            MetricsReport::Panoptic { images, result, miou } => {
                writeln!(s, "images: {images}").unwrap();
                writeln!(s, "{:<12} {:>6} {:>8} {:>5} {:>5} {:>5}", "class", "kind", "PQ", "TP", "FP", "FN").unwrap();
                for c in &result.per_class {
                    writeln!(
                        s,
                        "{:<12} {:>6} {:>8.2} {:>5} {:>5} {:>5}",
                        name(c.class_id),
                        if c.is_thing { "thing" } else { "stuff" },
                        100.0 * c.pq,
                        c.tp,
                        c.fp,
                        c.fn_
                    )
                    .unwrap();
                }
                writeln!(
                    s,
                    "PQ {:.2}  SQ {:.2}  RQ {:.2}  PQ_th {:.2}  PQ_st {:.2}  mIoU {:.2}",
                    100.0 * result.pq,
                    100.0 * result.sq,
                    100.0 * result.rq,
                    100.0 * result.pq_thing,
                    100.0 * result.pq_stuff,
                    100.0 * miou
                )
                .unwrap();
            }
        }
        s
    }
}
