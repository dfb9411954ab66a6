//! Wall-clock latency of forward pass plus semantic postprocessing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::postprocess::{semantic_inference, PostprocessConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub logical_cpus: usize,
    pub threads: usize,
    pub optimized: bool,
}

impl Environment {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads: rayon::current_num_threads(),
            optimized: !cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub height: usize,
    pub width: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub fps: f64,
    pub environment: Environment,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `iterations` frames after `warmup` untimed ones, on a fixed
/// random image drawn from `seed`.
pub fn benchmark_latency(
    model: &Model,
    height: usize,
    width: usize,
    iterations: usize,
    warmup: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if iterations == 0 {
        return Err(Error::Precondition("iterations must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn(vec![3, height, width], |_| rng.random::<f64>());
    let pp = PostprocessConfig::default();
    let frame = || -> Result<()> {
        let pred = model.predict(&image)?;
        semantic_inference(&pred, (height, width), &pp)?;
        Ok(())
    };
    for _ in 0..warmup {
        frame()?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        frame()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / iterations as f64;
    samples.sort_by(f64::total_cmp);
    let median = if iterations % 2 == 1 {
        samples[iterations / 2]
    } else {
        0.5 * (samples[iterations / 2 - 1] + samples[iterations / 2])
    };
    Ok(LatencyReport {
        height,
        width,
        iterations,
        warmup,
        mean_ms: mean,
        median_ms: median,
        p95_ms: percentile(&samples, 0.95),
        min_ms: samples[0],
        fps: 1000.0 / mean,
        environment: Environment::detect(),
    })
}

impl LatencyReport {
    pub fn to_table(&self) -> String {
        format!(
            "latency {}x{} over {} frames: mean {:.2} ms, median {:.2} ms, p95 {:.2} ms, min {:.2} ms, {:.2} FPS\n\
             environment: {} {} ({}), {} logical cpus, {} threads, optimized build: {}\n",
            self.height,
            self.width,
            self.iterations,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.min_ms,
            self.fps,
            self.environment.os,
            self.environment.arch,
            self.environment.cpu,
            self.environment.logical_cpus,
            self.environment.threads,
            self.environment.optimized
        )
    }
}
