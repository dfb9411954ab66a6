//! End-to-end checks, one test per criterion. Each prints a PASS/FAIL line
//! straight to stderr so it shows up even when output is captured.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use mfrt::bench::benchmark_latency;
use mfrt::checkpoint;
use mfrt::dataset::{decode_label_map, encode_ppm, generate_synthetic_dataset, SynthSpec};
use mfrt::eval::evaluate;
use mfrt::metrics::{panoptic_quality, MetricsReport};
use mfrt::postprocess::PostprocessConfig;
use mfrt::profile::count_flops;
use mfrt::train::{train_toy, TrainConfig};
use mfrt::{Model, ModelConfig, Tensor};
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: usize, title: &str, ok: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {n:>2} {}: {title} ({:.1}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_01_primitive_oracles() {
    let _g = serial();
    let t = Instant::now();
    let errs = forward_primitive_errors(1, 100);
    let worst = errs.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let ok = worst.1 <= 1e-6 && t.elapsed() < Duration::from_secs(60);
    verdict(
        1,
        "forward primitives vs loop oracles",
        ok,
        t.elapsed(),
        &format!("{} primitives x 100, worst {:.2e} in {}", errs.len(), worst.1, worst.0),
    );
}

#[test]
fn criterion_02_gradients() {
    let _g = serial();
    let t = Instant::now();
    let rep = model_gradcheck(11, 3, 1e-3);
    let groups = ["backbone.", "head.ffm.", "decoder.", "head."];
    let every_group = groups
        .iter()
        .all(|g| rep.per_param.iter().any(|(n, c)| n.starts_with(g) && *c > 0));
    let unchecked = rep.per_param.iter().filter(|p| p.1 == 0).count();
    let ok = rep.failures.is_empty() && every_group && unchecked == 0 && t.elapsed() < Duration::from_secs(120);
    verdict(
        2,
        "full-loss gradients vs central differences",
        ok,
        t.elapsed(),
        &format!(
            "{} entries over {} tensors, {} skipped at kinks, worst rel {:.2e}, {} failures {:?}",
            rep.checked(),
            rep.per_param.len(),
            rep.skipped,
            rep.worst_rel,
            rep.failures.len(),
            rep.failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_03_matching() {
    let _g = serial();
    let t = Instant::now();
    let bad = hungarian_disagreements(3, 1000);
    verdict(
        3,
        "assignment vs exhaustive search",
        bad == 0 && t.elapsed() < Duration::from_secs(60),
        t.elapsed(),
        &format!("1000 matrices, {bad} disagreements"),
    );
}

#[test]
fn criterion_04_panoptic_quality() {
    let _g = serial();
    let t = Instant::now();
    let bad = pq_disagreements(4, 200);

    // Class 1: A (IoU 0.8 with its prediction), a missed B and a stray
    // prediction on stuff.
    let table = mfrt::classes::ClassTable::synthetic(1, 2);
    let class_of = |pairs: &[(u32, usize)]| pairs.iter().copied().collect();
    let gt = panoptic_from_raw(1, 10, vec![1, 1, 1, 1, 1, 2, 3, 3, 3, 3], &class_of(&[(1, 1), (2, 1), (3, 0)]), &table);
    let pred = panoptic_from_raw(1, 10, vec![1, 1, 1, 1, 0, 0, 0, 0, 3, 3], &class_of(&[(1, 1), (3, 1)]), &table);
    let res = panoptic_quality(&[pred], &[gt], &table).unwrap();
    let c1 = res.per_class.iter().find(|c| c.class_id == 1).unwrap();
    let worked = (c1.tp, c1.fp, c1.fn_) == (1, 1, 1) && c1.pq == 0.4;
    verdict(
        4,
        "panoptic quality vs brute force",
        bad == 0 && worked,
        t.elapsed(),
        &format!("200 pairs, {bad} disagreements; worked example PQ {}", c1.pq),
    );
}

#[test]
fn criterion_05_output_invariants() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(5);
    let mut failures = Vec::new();
    for i in 0..50 {
        let n = [50, 100, 200][r.random_range(0..3)];
        let l = r.random_range(1..=3);
        let (h, w) = ([64, 96, 128][r.random_range(0..3)], [64, 96, 128][r.random_range(0..3)]);
        let cfg = ModelConfig {
            num_queries: n,
            num_stages: l,
            num_classes: r.random_range(2..20),
            use_f3_in_decoder: r.random_bool(0.5),
            ..ModelConfig::default()
        };
        let k = cfg.num_classes;
        let model = Model::new(cfg, i).unwrap();
        let img = rand_tensor(&mut r, &[3, h, w], 0.0, 1.0);
        let p = model.predict(&img).unwrap();
        let shape_ok = p.masks.shape() == [n, h / 8, w / 8] && p.class_dists.shape() == [n, k + 1];
        let open = p.masks.data().iter().all(|&v| v > 0.0 && v < 1.0);
        let rows = p.class_dists.data().chunks(k + 1).all(|row| {
            row.iter().all(|&v| v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-6
        });
        if !(shape_ok && open && rows) {
            failures.push(format!("N={n} L={l} {h}x{w}: shape {shape_ok} open {open} rows {rows}"));
        }
    }
    verdict(
        5,
        "mask/class output invariants over random configs",
        failures.is_empty(),
        t.elapsed(),
        &format!("50 configs, {} failures {:?}", failures.len(), failures),
    );
}

#[test]
fn criterion_06_overfit() {
    let _g = serial();
    let t = Instant::now();
    let ds = generate_synthetic_dataset(&SynthSpec {
        seed: 0,
        count: 8,
        height: 96,
        width: 96,
        num_classes: 4,
        max_instances: 3,
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 5000,
        eval_every: 100,
        target_pq: Some(0.95),
        target_miou: Some(0.95),
        log_every: 0,
        ..Default::default()
    };
    let res = train_toy(Model::new(ModelConfig::tiny(4), 0).unwrap(), &ds, &cfg).unwrap();
    let last = res.evals.last().cloned();
    let ok = last.as_ref().is_some_and(|e| e.pq >= 0.95 && e.miou >= 0.95);
    verdict(
        6,
        "overfit 8 synthetic records",
        ok,
        t.elapsed(),
        &format!(
            "lr {} wd {}; {} steps, final PQ {:.4} mIoU {:.4}, loss {:.4} -> {:.4}",
            cfg.lr,
            cfg.weight_decay,
            res.steps_run(),
            last.as_ref().map_or(0.0, |e| e.pq),
            last.as_ref().map_or(0.0, |e| e.miou),
            res.loss_curve.first().copied().unwrap_or(f64::NAN),
            res.loss_curve.last().copied().unwrap_or(f64::NAN)
        ),
    );
}

/// Best of several short latency runs, in milliseconds.
fn frame_ms(cfg: &ModelConfig, size: usize) -> f64 {
    let model = Model::new(cfg.clone(), 0).unwrap();
    (0..5)
        .map(|i| benchmark_latency(&model, size, size, 5, 1, i).unwrap().min_ms)
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_07_ablation_direction() {
    let _g = serial();
    let t = Instant::now();
    let size = 64;
    let base = ModelConfig::default();
    let flops = |c: &ModelConfig| count_flops(c, size, size).unwrap().total_flops;
    let with_f3 = ModelConfig { use_f3_in_decoder: true, ..base.clone() };
    let stages: Vec<ModelConfig> = (1..=3).map(|l| ModelConfig { num_stages: l, ..base.clone() }).collect();

    let (ms_base, ms_f3) = (frame_ms(&base, size), frame_ms(&with_f3, size));
    let ms_stages: Vec<f64> = stages.iter().map(|c| frame_ms(c, size)).collect();
    let fl_stages: Vec<u64> = stages.iter().map(flops).collect();
    let ok = ms_f3 > ms_base
        && flops(&with_f3) > flops(&base)
        && ms_stages.windows(2).all(|w| w[1] > w[0])
        && fl_stages.windows(2).all(|w| w[1] > w[0]);
    verdict(
        7,
        "cost grows with the 1/8 feature and with stages",
        ok,
        t.elapsed(),
        &format!(
            "{size}x{size} min ms: base {ms_base:.2} vs +F3 {ms_f3:.2}; L=1,2,3 {ms_stages:.2?}; FLOPs {} vs {}, {:?}",
            flops(&base),
            flops(&with_f3),
            fl_stages
        ),
    );
}

#[test]
fn criterion_08_query_count_cost() {
    let _g = serial();
    let t = Instant::now();
    let profiles: Vec<_> = [50, 100, 200]
        .iter()
        .map(|&n| count_flops(&ModelConfig { num_queries: n, ..Default::default() }, 512, 1024).unwrap())
        .collect();
    let totals: Vec<u64> = profiles.iter().map(|p| p.total_flops).collect();
    let part = |p: &mfrt::profile::CostProfile, m: &str| p.per_module_flops[m];
    let mut ok = totals.windows(2).all(|w| w[1] > w[0]);
    for w in profiles.windows(2) {
        let delta = w[1].total_flops - w[0].total_flops;
        let dh = part(&w[1], "decoder") + part(&w[1], "head") - part(&w[0], "decoder") - part(&w[0], "head");
        ok &= dh == delta;
    }
    let g: Vec<String> = totals.iter().map(|&f| format!("{:.1}G", f as f64 / 1e9)).collect();
    verdict(
        8,
        "FLOPs grow with the query count, all in decoder/head",
        ok,
        t.elapsed(),
        &format!("N=50,100,200 at 512x1024: {}", g.join(" -> ")),
    );
}

struct RunArtifacts {
    checkpoint: Vec<u8>,
    prediction_bits: Vec<u64>,
    report: String,
}

fn deterministic_run() -> RunArtifacts {
    let ds = generate_synthetic_dataset(&SynthSpec {
        seed: 9,
        count: 4,
        height: 64,
        width: 64,
        num_classes: 4,
        max_instances: 2,
    })
    .unwrap();
    let cfg = TrainConfig { steps: 5, batch_size: 4, seed: 9, log_every: 0, ..Default::default() };
    let res = train_toy(Model::new(ModelConfig::tiny(4), 9).unwrap(), &ds, &cfg).unwrap();
    let pred = res.model.predict(&ds.records[0].image).unwrap();
    let ev = evaluate(&res.model, &ds, &PostprocessConfig::default()).unwrap();
    let report = MetricsReport::Panoptic { images: ev.images, miou: ev.semantic.miou, result: ev.panoptic };
    RunArtifacts {
        checkpoint: checkpoint::to_bytes(&res.model),
        prediction_bits: pred.masks.data().iter().chain(pred.class_dists.data()).map(|v| v.to_bits()).collect(),
        report: report.to_json(),
    }
}

#[test]
fn criterion_09_determinism() {
    let _g = serial();
    let t = Instant::now();
    let (a, b) = (deterministic_run(), deterministic_run());
    let same = (a.checkpoint == b.checkpoint, a.prediction_bits == b.prediction_bits, a.report == b.report);
    verdict(
        9,
        "bit-identical reruns",
        same == (true, true, true),
        t.elapsed(),
        &format!("checkpoint/prediction/report equal: {same:?}"),
    );
}

fn mfrt(dir: &Path, args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mfrt"))
        .args(args)
        .current_dir(dir)
        .env("MFRT_SEED", "7")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.success(), text)
}

#[test]
fn criterion_10_cli_pipeline() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "[model]\npreset = \"tiny\"\n\n[train]\nlog_every = 0\n").unwrap();
    let mut r = rng(10);
    let odd = rand_tensor(&mut r, &[3, 50, 70], 0.0, 1.0);
    std::fs::write(d.join("odd.ppm"), encode_ppm(&odd).unwrap()).unwrap();

    let steps: [(&str, Vec<&str>); 6] = [
        ("synth", vec!["synth", "--count", "8", "--size", "64x64", "--out", "data"]),
        ("train", vec!["train", "--config", "run.toml", "--data", "data", "--out", "m.ckpt", "--steps", "200"]),
        ("eval", vec!["eval", "--ckpt", "m.ckpt", "--data", "data", "--json", "eval.json"]),
        ("infer", vec!["infer", "--ckpt", "m.ckpt", "--image", "odd.ppm", "--task", "panoptic", "--out", "odd.pgm"]),
        ("bench", vec!["bench", "--ckpt", "m.ckpt", "--resolution", "64x64", "--iterations", "3"]),
        ("bench-config", vec!["bench", "--config", "run.toml", "--resolution", "512x512", "--iterations", "1", "--warmup", "0"]),
    ];
    let mut log = Vec::new();
    let mut ok = true;
    for (name, args) in &steps {
        let (success, text) = mfrt(d, args);
        log.push(format!("{name}:{}", if success { "ok" } else { "failed" }));
        if !success {
            log.push(text);
            ok = false;
            break;
        }
    }
    if ok {
        let (h, w, _) = decode_label_map(&std::fs::read(d.join("odd.pgm")).unwrap()).unwrap();
        let (ih, iw, _) = decode_label_map(&std::fs::read(d.join("odd_instance.pgm")).unwrap()).unwrap();
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(d.join("eval.json")).unwrap()).unwrap();
        ok &= (h, w, ih, iw) == (50, 70, 50, 70) && report["pq"].is_number();
        log.push(format!("infer output {h}x{w}, PQ {}", report["pq"]));
        let (succeeded, text) = mfrt(d, &["eval", "--ckpt", "missing.ckpt", "--data", "data"]);
        ok &= !succeeded && text.trim().lines().count() == 1;
        log.push(format!("bad input -> {:?}", text.trim()));
    }
    ok &= t.elapsed() < Duration::from_secs(600);
    verdict(10, "CLI synth/train/eval/infer/bench", ok, t.elapsed(), &log.join("; "));
}

#[test]
fn cli_runs_are_seed_deterministic() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        assert!(mfrt(d, &["synth", "--count", "2", "--size", "64x64", "--classes", "3", "--out", out]).0);
        let ck = format!("{out}.ckpt");
        assert!(mfrt(d, &["train", "--data", out, "--out", &ck, "--steps", "2"]).0);
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/0001_image.ppm"), read("b/0001_image.ppm"));
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    let img = Tensor::zeros(vec![3, 32, 32]);
    let m = checkpoint::load(&d.join("a.ckpt")).unwrap();
    assert_eq!(m.config().num_classes, 3);
    assert!(m.predict(&img).is_ok());
}
