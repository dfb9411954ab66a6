//! Synthetic records, their on-disk format, and ground-truth segment
//! extraction.
//!
//! A dataset directory holds `meta.txt` (see [`ClassTable`]) and, per record
//! `i`, `{i:04}_image.ppm` (8-bit RGB), `{i:04}_semantic.pgm` and
//! `{i:04}_instance.pgm` (16-bit gray).

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, ImageReader, Limits, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classes::ClassTable;
use crate::error::{Error, Result};
use crate::loss::GroundTruthSegment;
use crate::postprocess::{PanopticMap, SemanticMap};
use crate::tensor::Tensor;

/// Side of the grid cells shapes are drawn on; equals the mask stride.
pub const CELL: usize = 8;
const NOISE_STD: f64 = 0.04;
const MAX_DECODE_BYTES: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub semantic: SemanticMap,
    /// Row-major, 0 = no instance.
    pub instances: Vec<u32>,
}

impl DatasetRecord {
    pub fn size(&self) -> (usize, usize) {
        (self.semantic.height, self.semantic.width)
    }

    /// Checks label ranges and instance/class consistency.
    pub fn validate(&self, table: &ClassTable) -> Result<()> {
        let (h, w) = self.size();
        if self.image.shape() != [3, h, w] || self.instances.len() != h * w {
            return Err(Error::Data(format!(
                "record parts disagree: image {:?}, labels {}x{}, {} instance ids",
                self.image.shape(),
                h,
                w,
                self.instances.len()
            )));
        }
        PanopticMap::from_labels(&self.semantic, &self.instances, table).map(|_| ())
    }

    pub fn panoptic(&self, table: &ClassTable) -> Result<PanopticMap> {
        PanopticMap::from_labels(&self.semantic, &self.instances, table)
    }

    /// One segment per thing instance and per stuff class, downsampled to
    /// `1/stride` by majority vote over each `stride x stride` block.
    pub fn segments(&self, table: &ClassTable, stride: usize) -> Result<Vec<GroundTruthSegment>> {
        let (h, w) = self.size();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Precondition(format!("{h}x{w} is not divisible by {stride}")));
        }
        let pan = self.panoptic(table)?;
        let (mh, mw) = (h / stride, w / stride);
        let mut out = Vec::new();
        for seg in pan.segments() {
            let mut mask = vec![0.0; mh * mw];
            for (y, row) in mask.chunks_mut(mw).enumerate() {
                for (x, m) in row.iter_mut().enumerate() {
                    let mut inside = 0;
                    for dy in 0..stride {
                        let base = (y * stride + dy) * w + x * stride;
                        inside += pan.ids()[base..base + stride].iter().filter(|&&id| id == seg.id).count();
                    }
                    if 2 * inside > stride * stride {
                        *m = 1.0;
                    }
                }
            }
            if mask.contains(&1.0) {
                out.push(GroundTruthSegment::new(
                    Tensor::new(vec![mh, mw], mask)?,
                    seg.class_id,
                    seg.is_thing,
                )?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub table: ClassTable,
    pub records: Vec<DatasetRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub max_instances: usize,
}

/// Stuff classes come first: `max(1, K / 4)` of them, the rest are things.
pub fn synthetic_class_table(num_classes: usize) -> ClassTable {
    let stuff = (num_classes / 4).max(1).min(num_classes);
    ClassTable::synthetic(stuff, num_classes - stuff)
}

/// Well-separated RGB color for a class.
fn class_color(class: usize, k: usize) -> [f64; 3] {
    let hue = class as f64 / k.max(1) as f64 * 6.0;
    let (s, v) = (0.85, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Shape {
    y0: usize,
    x0: usize,
    hh: usize,
    ww: usize,
    ellipse: bool,
}

impl Shape {
    fn covers_cell(&self, cy: usize, cx: usize) -> bool {
        if cy < self.y0 || cx < self.x0 || cy >= self.y0 + self.hh || cx >= self.x0 + self.ww {
            return false;
        }
        if !self.ellipse {
            return true;
        }
        let ry = self.hh as f64 / 2.0;
        let rx = self.ww as f64 / 2.0;
        let dy = (cy - self.y0) as f64 + 0.5 - ry;
        let dx = (cx - self.x0) as f64 + 0.5 - rx;
        (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
    }

    /// Overlap test with a one-cell margin.
    fn near(&self, other: &Shape) -> bool {
        self.y0 <= other.y0 + other.hh
            && other.y0 <= self.y0 + self.hh
            && self.x0 <= other.x0 + other.ww
            && other.x0 <= self.x0 + self.ww
    }
}

fn synth_record(rng: &mut ChaCha8Rng, spec: &SynthSpec, table: &ClassTable) -> DatasetRecord {
    let (h, w) = (spec.height, spec.width);
    let (gh, gw) = (h / CELL, w / CELL);
    let stuff: Vec<usize> = table.stuff_ids().collect();
    let mut things: Vec<usize> = table.thing_ids().collect();
    let background = stuff[rng.random_range(0..stuff.len())];

    let mut cells = vec![(background as u32, 0u32); gh * gw];
    let max_inst = if things.is_empty() { 0 } else { spec.max_instances };
    let target = if max_inst == 0 { 0 } else { rng.random_range(1..=max_inst) };
    things.shuffle(rng);
    let min_side = 3.min(gh).min(gw);
    let max_side = (gh.min(gw) / 2).max(min_side);
    let mut shapes: Vec<Shape> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < target && attempts < 200 {
        attempts += 1;
        let hh = rng.random_range(min_side..=max_side);
        let ww = rng.random_range(min_side..=max_side);
        let s = Shape {
            y0: rng.random_range(0..=gh - hh),
            x0: rng.random_range(0..=gw - ww),
            hh,
            ww,
            ellipse: rng.random_bool(0.5),
        };
        if shapes.iter().any(|o| o.near(&s)) {
            continue;
        }
        let inst = shapes.len() as u32 + 1;
        let class = things[shapes.len() % things.len()] as u32;
        for cy in 0..gh {
            for cx in 0..gw {
                if s.covers_cell(cy, cx) {
                    cells[cy * gw + cx] = (class, inst);
                }
            }
        }
        shapes.push(s);
    }

    let mut labels = vec![0u32; h * w];
    let mut instances = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (c, i) = cells[(y / CELL) * gw + x / CELL];
            labels[y * w + x] = c;
            instances[y * w + x] = i;
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let k = table.num_classes();
    let mut image = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        for p in 0..h * w {
            let base = class_color(labels[p] as usize, k)[ch];
            let v = (base + noise.sample(rng)).clamp(0.0, 1.0);
            image[ch * h * w + p] = (v * 255.0).round() / 255.0;
        }
    }
    DatasetRecord {
        image: Tensor::new(vec![3, h, w], image).expect("sized"),
        semantic: SemanticMap::new(h, w, labels).expect("sized"),
        instances,
    }
}

/// Deterministic per seed. Record sets that miss a class are redrawn
/// (only possible when the set is large enough to hold every class).
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.height == 0 || spec.width == 0 || spec.height % 32 != 0 || spec.width % 32 != 0 {
        return Err(Error::Precondition(format!(
            "image size {}x{} must be a positive multiple of 32",
            spec.height, spec.width
        )));
    }
    if spec.num_classes == 0 || spec.num_classes > u16::MAX as usize {
        return Err(Error::Precondition(format!("unsupported class count {}", spec.num_classes)));
    }
    let table = synthetic_class_table(spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stuff = table.stuff_ids().count();
    let things = table.num_classes() - stuff;
    let can_cover = spec.count >= stuff && (things == 0 || spec.count * spec.max_instances >= things);
    for _ in 0..1000 {
        let records: Vec<DatasetRecord> = (0..spec.count).map(|_| synth_record(&mut rng, spec, &table)).collect();
        let mut seen = vec![false; table.num_classes()];
        for r in &records {
            for &l in &r.semantic.labels {
                seen[l as usize] = true;
            }
        }
        if !can_cover || spec.max_instances == 0 || seen.iter().all(|&s| s) {
            return Ok(Dataset { table, records });
        }
    }
    Err(Error::Data("could not cover every class; raise count or max_instances".into()))
}

fn record_paths(dir: &Path, i: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("{i:04}_image.ppm")),
        dir.join(format!("{i:04}_semantic.pgm")),
        dir.join(format!("{i:04}_instance.pgm")),
    ]
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Data(format!("PPM needs 3 channels, got {c}")));
    }
    let d = image.data();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| (d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Pnm).map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_pgm16(h: usize, w: usize, values: &[u32]) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(Error::Data(format!("{} values for a {}x{} map", values.len(), h, w)));
    }
    let mut raw = Vec::with_capacity(values.len());
    for &v in values {
        raw.push(u16::try_from(v).map_err(|_| Error::Data(format!("value {v} does not fit 16 bits")))?);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Pnm).map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

fn decode_pnm(bytes: &[u8]) -> Result<image::DynamicImage> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm);
    let mut limits = Limits::default();
    limits.max_alloc = Some(MAX_DECODE_BYTES);
    reader.limits(limits);
    reader.decode().map_err(|e| Error::Format(e.to_string()))
}

/// Any PNM image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let rgb = decode_pnm(bytes)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(vec![3, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + ch] as f64 / 255.0
    }))
}

/// A single-channel PGM as `(height, width, values)`; 8- and 16-bit samples
/// are returned unscaled.
pub fn decode_label_map(bytes: &[u8]) -> Result<(usize, usize, Vec<u32>)> {
    let img = decode_pnm(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::Format(format!(
                "label maps must be single-channel, got {:?}",
                other.color()
            )))
        }
    };
    Ok((h, w, values))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.txt"), dataset.table.to_text())?;
    for (i, r) in dataset.records.iter().enumerate() {
        let [img, sem, inst] = record_paths(dir, i);
        let (h, w) = r.size();
        fs::write(img, encode_ppm(&r.image)?)?;
        fs::write(sem, encode_pgm16(h, w, &r.semantic.labels)?)?;
        fs::write(inst, encode_pgm16(h, w, &r.instances)?)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta = fs::read_to_string(dir.join("meta.txt"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("meta.txt").display())))?;
    let table = ClassTable::parse(&meta)?;
    let mut records = Vec::new();
    for i in 0.. {
        let [img, sem, inst] = record_paths(dir, i);
        if !img.exists() {
            break;
        }
        let image = decode_image(&read(&img)?)?;
        let (h, w, labels) = decode_label_map(&read(&sem)?)?;
        let (ih, iw, instances) = decode_label_map(&read(&inst)?)?;
        if (h, w) != (ih, iw) || image.shape()[1..] != [h, w] {
            return Err(Error::Data(format!("record {i}: image and label sizes differ")));
        }
        let record = DatasetRecord {
            image,
            semantic: SemanticMap::new(h, w, labels)?,
            instances,
        };
        record.validate(&table).map_err(|e| Error::Data(format!("record {i}: {e}")))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no records in {}", dir.display())));
    }
    Ok(Dataset { table, records })
}

/// Number of records in which each class appears.
pub fn class_histogram(dataset: &Dataset) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for r in &dataset.records {
        let mut present: Vec<u32> = r.semantic.labels.clone();
        present.sort_unstable();
        present.dedup();
        for c in present {
            *out.entry(c).or_default() += 1;
        }
    }
    out
}
