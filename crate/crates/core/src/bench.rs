//! Inference throughput across keep ratios on the physically pruned path.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hts::SparsifySchedule;
use crate::numerics::{Real, Tensor};
use crate::par::Exec;
use crate::vit::{ModelConfig, PatchConfig, Vit};

pub const DEFAULT_BATCH: usize = 32;
pub const MIN_WARMUP: usize = 2;
pub const MIN_REPS: usize = 5;
pub const SWEEP_RATIOS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const CSV_HEADER: [&str; 5] = ["p", "batch", "mean_imgs_per_s", "std", "stage_token_counts"];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub keep_ratio: f64,
    pub batch: usize,
    /// Images per second, mean and sample std over the measured reps.
    pub mean: f64,
    pub std: f64,
    /// Image tokens surviving each stage.
    pub stage_tokens: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
}

impl BenchResult {
    pub fn stage_tokens_field(&self) -> String {
        let parts: Vec<String> = self.stage_tokens.iter().map(usize::to_string).collect();
        parts.join("/")
    }

    pub fn csv_record(&self) -> [String; 5] {
        [
            format!("{}", self.keep_ratio),
            self.batch.to_string(),
            format!("{:.3}", self.mean),
            format!("{:.3}", self.std),
            self.stage_tokens_field(),
        ]
    }
}

/// Aggregate throughput of several independent inference workers sharing
/// read-only weights. Never comparable with single-stream numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiWorkerResult {
    pub keep_ratio: f64,
    pub batch: usize,
    pub workers: usize,
    pub aggregate: f64,
}

/// The reference geometry: 256×128 input, 16-pixel patches (N = 128),
/// depth 12, stages entering blocks 3, 6 and 9.
pub fn bench_model(seed: u64) -> Result<Vit<f32>> {
    let patch = PatchConfig::new(256, 128, 3, 16)?;
    let config = ModelConfig {
        embed_dim: 32,
        depth: 12,
        heads: 4,
        mlp_ratio: 2,
        num_classes: 1,
        sparsify: Some(SparsifySchedule::new(vec![3, 6, 9], 1.0)?),
        bn_neck: false,
    };
    Vit::new(patch, config, seed)
}

/// Uniform random images in [-1, 1], `[B, C, H, W]`.
pub fn bench_input<T: Real>(patch: &PatchConfig, batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(vec![batch, patch.channels, patch.height, patch.width], -1.0, 1.0, &mut rng)
}

fn stage_tokens<T: Real>(model: &Vit<T>) -> Vec<usize> {
    let n = model.num_patches();
    model
        .config
        .sparsify
        .as_ref()
        .map_or_else(Vec::new, |s| (0..s.num_stages()).map(|i| s.keep_count(i, n)).collect())
}

fn check_counts(warmup: usize, reps: usize) -> Result<()> {
    if warmup < MIN_WARMUP || reps < MIN_REPS {
        return Err(Error::config(format!(
            "benchmark needs at least {MIN_WARMUP} warmup and {MIN_REPS} measured reps, got {warmup} and {reps}"
        )));
    }
    Ok(())
}

fn time_forward<T: Real>(model: &Vit<T>, input: &Tensor<T>) -> Result<f64> {
    let start = Instant::now();
    let out = model.infer_features(input)?;
    let secs = start.elapsed().as_secs_f64();
    std::hint::black_box(out);
    Ok(input.shape()[0] as f64 / secs.max(1e-12))
}

fn summarize(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn result<T: Real>(model: &Vit<T>, batch: usize, samples: &[f64], warmup: usize) -> BenchResult {
    let (mean, std) = summarize(samples);
    BenchResult {
        keep_ratio: model.config.sparsify.as_ref().map_or(1.0, |s| s.base_ratio()),
        batch,
        mean,
        std,
        stage_tokens: stage_tokens(model),
        warmup,
        reps: samples.len(),
    }
}

/// Single-stream images/second of `model` at keep ratio `p` on `input`.
pub fn measure_throughput<T: Real>(model: &Vit<T>, p: f64, input: &Tensor<T>, warmup: usize, reps: usize) -> Result<BenchResult> {
    check_counts(warmup, reps)?;
    let model = model.with_ratio(p)?;
    for _ in 0..warmup {
        time_forward(&model, input)?;
    }
    let samples = (0..reps).map(|_| time_forward(&model, input)).collect::<Result<Vec<_>>>()?;
    Ok(result(&model, input.shape()[0], &samples, warmup))
}

/// Measures every ratio on the same input. Repetitions are interleaved
/// across ratios so slow drift in machine load hits all of them alike.
pub fn sweep<T: Real>(model: &Vit<T>, ratios: &[f64], input: &Tensor<T>, warmup: usize, reps: usize) -> Result<Vec<BenchResult>> {
    check_counts(warmup, reps)?;
    let models = ratios.iter().map(|&p| model.with_ratio(p)).collect::<Result<Vec<_>>>()?;
    for m in &models {
        for _ in 0..warmup {
            time_forward(m, input)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(reps); models.len()];
    for _ in 0..reps {
        for (m, s) in models.iter().zip(&mut samples) {
            s.push(time_forward(m, input)?);
        }
    }
    Ok(models.iter().zip(&samples).map(|(m, s)| result(m, input.shape()[0], s, warmup)).collect())
}

/// Each of `workers` runs `reps` forwards on its own copy of the input;
/// returns total images over wall time.
pub fn measure_multi_worker<T: Real>(model: &Vit<T>, p: f64, input: &Tensor<T>, workers: usize, reps: usize, exec: Exec) -> Result<MultiWorkerResult> {
    let model = model.with_ratio(p)?;
    let workers = workers.max(1);
    exec.map_range(workers, |_| model.infer_features(input).map(|_| ()))
        .into_iter()
        .collect::<Result<Vec<()>>>()?;
    let start = Instant::now();
    let done = exec.map_range(workers, |_| -> Result<()> {
        for _ in 0..reps {
            std::hint::black_box(model.infer_features(input)?);
        }
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    done.into_iter().collect::<Result<Vec<()>>>()?;
    let batch = input.shape()[0];
    Ok(MultiWorkerResult {
        keep_ratio: p,
        batch,
        workers,
        aggregate: (workers * reps * batch) as f64 / secs.max(1e-12),
    })
}

/// Throughput never rises by more than `band` (relative) as p grows.
pub fn is_monotone_within(results: &[BenchResult], band: f64) -> bool {
    let mut sorted: Vec<&BenchResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.keep_ratio.total_cmp(&b.keep_ratio));
    sorted.windows(2).all(|w| w[1].mean <= w[0].mean * (1.0 + band))
}

/// Throughput at ratio `fast` over throughput at ratio `slow`.
pub fn speedup(results: &[BenchResult], fast: f64, slow: f64) -> Option<f64> {
    let find = |p: f64| results.iter().find(|r| (r.keep_ratio - p).abs() < 1e-9).map(|r| r.mean);
    Some(find(fast)? / find(slow)?)
}

/// Appends rows to `path`, writing the header when the file is new.
pub fn append_csv(path: &Path, results: &[BenchResult]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER)?;
    }
    for r in results {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}
