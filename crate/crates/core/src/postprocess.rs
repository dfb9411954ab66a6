//! Turns a [`SegmentPrediction`] into a per-pixel semantic label map or a
//! panoptic segment map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classes::ClassTable;
use crate::error::{shape_err, Error, Result};
use crate::head::SegmentPrediction;
use crate::tensor::{self, Interpolation, Tensor};

/// How 1/8-resolution masks reach output resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskUpsample {
    /// Bilinear on probabilities, decisions afterwards.
    #[default]
    Bilinear,
    /// Binarize at 0.5 first, then nearest-neighbour.
    ThresholdFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub object_score_threshold: f64,
    pub overlap_threshold: f64,
    pub upsample: MaskUpsample,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            object_score_threshold: 0.8,
            overlap_threshold: 0.8,
            upsample: MaskUpsample::Bilinear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    /// Row-major class ids.
    pub labels: Vec<u32>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!("{} labels for a {}x{} map", labels.len(), height, width));
        }
        Ok(Self { height, width, labels })
    }

    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        let labels = crop_plane(&self.labels, self.height, self.width, h, w)?;
        Ok(Self {
            height: h,
            width: w,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub class_id: usize,
    pub is_thing: bool,
    pub area: usize,
}

/// Segment-id map (0 = void) plus one record per segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    ids: Vec<u32>,
    segments: Vec<SegmentInfo>,
}

impl PanopticMap {
    /// Checks that every nonzero id has exactly one record with the right
    /// area, and that no stuff class owns more than one segment.
    pub fn new(height: usize, width: usize, ids: Vec<u32>, segments: Vec<SegmentInfo>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(shape_err!("{} segment ids for a {}x{} map", ids.len(), height, width));
        }
        let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
        for &id in ids.iter().filter(|&&id| id != 0) {
            *areas.entry(id).or_default() += 1;
        }
        let mut seen = BTreeMap::new();
        let mut stuff = BTreeMap::new();
        for s in &segments {
            if s.id == 0 {
                return Err(Error::Data("segment id 0 is reserved for void".into()));
            }
            if seen.insert(s.id, ()).is_some() {
                return Err(Error::Data(format!("segment id {} listed twice", s.id)));
            }
            if areas.get(&s.id) != Some(&s.area) {
                return Err(Error::Data(format!(
                    "segment {} claims {} pixels, map has {}",
                    s.id,
                    s.area,
                    areas.get(&s.id).unwrap_or(&0)
                )));
            }
            if !s.is_thing && stuff.insert(s.class_id, ()).is_some() {
                return Err(Error::Data(format!("stuff class {} has several segments", s.class_id)));
            }
        }
        if let Some(id) = areas.keys().find(|id| !seen.contains_key(id)) {
            return Err(Error::Data(format!("segment id {id} has no record")));
        }
        Ok(Self {
            height,
            width,
            ids,
            segments,
        })
    }

    /// Builds a map from a per-pixel class → segment assignment; areas are
    /// counted and ids renumbered 1.. in order of first record.
    fn from_assignment(height: usize, width: usize, raw: &[u32], info: &BTreeMap<u32, (usize, bool)>) -> Self {
        let mut relabel: BTreeMap<u32, u32> = BTreeMap::new();
        for (&old, _) in info {
            if raw.contains(&old) {
                let next = relabel.len() as u32 + 1;
                relabel.insert(old, next);
            }
        }
        let ids: Vec<u32> = raw.iter().map(|r| relabel.get(r).copied().unwrap_or(0)).collect();
        let mut areas = vec![0usize; relabel.len() + 1];
        for &id in &ids {
            areas[id as usize] += 1;
        }
        let segments = relabel
            .iter()
            .map(|(old, &id)| SegmentInfo {
                id,
                class_id: info[old].0,
                is_thing: info[old].1,
                area: areas[id as usize],
            })
            .collect();
        Self {
            height,
            width,
            ids,
            segments,
        }
    }

    /// Ground-truth panoptic map: each nonzero instance id is a thing
    /// segment, each stuff class (instance 0) one segment, ignore pixels void.
    pub fn from_labels(semantic: &SemanticMap, instances: &[u32], table: &ClassTable) -> Result<Self> {
        if instances.len() != semantic.labels.len() {
            return Err(shape_err!("instance map size differs from semantic map"));
        }
        let k = table.num_classes() as u32;
        let mut info: BTreeMap<u32, (usize, bool)> = BTreeMap::new();
        let mut raw = vec![0u32; instances.len()];
        // Stuff segments get keys 1..=K, instances K+1.. to stay disjoint.
        for (i, (&c, &inst)) in semantic.labels.iter().zip(instances).enumerate() {
            if c == table.ignore_label {
                continue;
            }
            if c >= k {
                return Err(Error::Data(format!("label {c} outside 0..{k}")));
            }
            let thing = table.is_thing(c as usize);
            let key = if inst == 0 {
                if thing {
                    // Thing pixels without an instance cannot form a segment.
                    continue;
                }
                c + 1
            } else {
                if !thing {
                    return Err(Error::Data(format!("instance {inst} labelled with stuff class {c}")));
                }
                k + inst
            };
            if let Some(&(prev, _)) = info.get(&key) {
                if prev != c as usize {
                    return Err(Error::Data(format!("instance {inst} spans classes {prev} and {c}")));
                }
            }
            info.insert(key, (c as usize, thing));
            raw[i] = key;
        }
        Ok(Self::from_assignment(semantic.height, semantic.width, &raw, &info))
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn segments(&self) -> &[SegmentInfo] {
        &self.segments
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Semantic view: segment class per pixel, `void_label` on void.
    pub fn to_semantic(&self, void_label: u32) -> SemanticMap {
        let class_of: BTreeMap<u32, u32> = self.segments.iter().map(|s| (s.id, s.class_id as u32)).collect();
        SemanticMap {
            height: self.height,
            width: self.width,
            labels: self.ids.iter().map(|id| class_of.get(id).copied().unwrap_or(void_label)).collect(),
        }
    }

    /// Per-pixel instance ids in dataset convention: thing segments keep
    /// their segment id, stuff and void are 0.
    pub fn to_instances(&self) -> Vec<u32> {
        let things: BTreeMap<u32, bool> = self.segments.iter().map(|s| (s.id, s.is_thing)).collect();
        self.ids
            .iter()
            .map(|id| if things.get(id) == Some(&true) { *id } else { 0 })
            .collect()
    }

    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        let raw = crop_plane(&self.ids, self.height, self.width, h, w)?;
        let info = self.segments.iter().map(|s| (s.id, (s.class_id, s.is_thing))).collect();
        Ok(Self::from_assignment(h, w, &raw, &info))
    }
}

fn crop_plane(src: &[u32], sh: usize, sw: usize, h: usize, w: usize) -> Result<Vec<u32>> {
    if h > sh || w > sw {
        return Err(Error::Precondition(format!("crop {h}x{w} exceeds {sh}x{sw}")));
    }
    Ok((0..h).flat_map(|y| src[y * sw..y * sw + w].iter().copied()).collect())
}

/// Masks `[N, H*W]` at output resolution.
fn upsampled_masks(pred: &SegmentPrediction, out: (usize, usize), mode: MaskUpsample) -> Result<Tensor> {
    let n = pred.num_queries();
    let (h, w) = out;
    let masks = match mode {
        MaskUpsample::Bilinear if pred.mask_size() == out => pred.masks.clone(),
        MaskUpsample::Bilinear => tensor::resize(&pred.masks, h, w, Interpolation::Bilinear)?,
        MaskUpsample::ThresholdFirst => {
            let binary = pred.masks.map(|m| if m >= 0.5 { 1.0 } else { 0.0 });
            tensor::resize(&binary, h, w, Interpolation::Nearest)?
        }
    };
    masks.into_reshaped(vec![n, h * w])
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `label(p) = argmax_k Σ_i p_i[k]·m_i(p)` over real classes.
pub fn semantic_inference(
    pred: &SegmentPrediction,
    out_size: (usize, usize),
    cfg: &PostprocessConfig,
) -> Result<SemanticMap> {
    let n = pred.num_queries();
    let k = pred.num_classes();
    let masks = upsampled_masks(pred, out_size, cfg.upsample)?;
    let real = Tensor::from_fn(vec![n, k], |i| pred.class_dists.data()[(i / k) * (k + 1) + i % k]);
    let scores = tensor::matmul_t(&real, true, &masks, false)?;
    let pixels = out_size.0 * out_size.1;
    let s = scores.data();
    let labels = (0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if s[c * pixels + p] > s[best * pixels + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    SemanticMap::new(out_size.0, out_size.1, labels)
}

/// Query filtering, per-pixel winner selection, overlap check and stuff merging.
pub fn panoptic_inference(
    pred: &SegmentPrediction,
    table: &ClassTable,
    cfg: &PostprocessConfig,
    out_size: (usize, usize),
) -> Result<PanopticMap> {
    let n = pred.num_queries();
    let k = pred.num_classes();
    if table.num_classes() != k {
        return Err(Error::Config(format!(
            "prediction has {k} classes, class table has {}",
            table.num_classes()
        )));
    }
    let (h, w) = out_size;
    let pixels = h * w;
    let masks = upsampled_masks(pred, out_size, cfg.upsample)?;
    let m = masks.data();

    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for q in 0..n {
        let row = &pred.class_dists.data()[q * (k + 1)..(q + 1) * (k + 1)];
        if argmax(row) == k {
            continue;
        }
        let c = argmax(&row[..k]);
        if row[c] >= cfg.object_score_threshold {
            kept.push((q, c, row[c]));
        }
    }

    let mut winner = vec![usize::MAX; pixels];
    if !kept.is_empty() {
        for (p, win) in winner.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &(q, _, score)) in kept.iter().enumerate() {
                let v = score * m[q * pixels + p];
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            *win = best;
        }
    }

    let mut raw = vec![0u32; pixels];
    let mut info: BTreeMap<u32, (usize, bool)> = BTreeMap::new();
    let mut stuff_key: BTreeMap<usize, u32> = BTreeMap::new();
    for (j, &(q, c, _)) in kept.iter().enumerate() {
        let mq = &m[q * pixels..(q + 1) * pixels];
        let won = winner.iter().filter(|&&x| x == j).count();
        let mask_area = mq.iter().filter(|&&v| v >= 0.5).count();
        let seg: Vec<usize> = (0..pixels).filter(|&p| winner[p] == j && mq[p] >= 0.5).collect();
        if won == 0 || mask_area == 0 || seg.is_empty() {
            continue;
        }
        if (won as f64) < cfg.overlap_threshold * mask_area as f64 {
            continue;
        }
        let thing = table.is_thing(c);
        let key = if thing {
            info.len() as u32 + 1
        } else {
            *stuff_key.entry(c).or_insert(info.len() as u32 + 1)
        };
        info.insert(key, (c, thing));
        for p in seg {
            raw[p] = key;
        }
    }
    Ok(PanopticMap::from_assignment(h, w, &raw, &info))
}
