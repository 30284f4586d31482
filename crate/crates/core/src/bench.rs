//! Dense vs. compacted conv-layer GEMM timing.
//!
//! A conv layer lowered to im2col is `W (N x K) * X (K x P)` with `P` patch
//! columns (batch times output positions). Row pruning shrinks `N`; column
//! pruning shrinks `K` and needs a gather of the kept patch rows first.
//! Compact times are reported with and without that gather.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gemm::{current_threads, matmul, Matrix};
use crate::groups::GroupType;
use crate::nn::NetworkSpec;

pub const MIN_REPS: usize = 50;
/// A timed sample shorter than this is repeated until it is not.
const MIN_SAMPLE: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerDims {
    /// Filters `N`.
    pub rows: usize,
    /// im2col columns `K = C·kh·kw`.
    pub cols: usize,
    /// Patch columns `P`.
    pub patch_cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { reps: MIN_REPS, warmup: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub layer_id: usize,
    pub mode: GroupType,
    pub sparsity: f64,
    /// Median dense GEMM time.
    pub dense_ms: f64,
    /// Median compact time including the gather.
    pub compact_ms: f64,
    pub speedup: f64,
    pub dense_mean_ms: f64,
    pub compact_mean_ms: f64,
    /// Median compact GEMM time excluding the gather.
    pub compact_gemm_ms: f64,
    pub compact_gemm_mean_ms: f64,
    pub reps: usize,
    /// Calls per timed sample (repetition scaling for fast kernels).
    pub inner: usize,
    pub threads: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_cols: usize,
    pub kept_rows: usize,
    pub kept_cols: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
    pub environment: String,
}

pub fn environment_note() -> String {
    format!(
        "{}-{}, {} thread(s), f32, debug_assertions={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        current_threads(),
        cfg!(debug_assertions)
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("sized")
}

fn kept_subset(total: usize, sparsity: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let keep = total - ((sparsity * total as f64).round() as usize).min(total - 1);
    let mut idx = sample(rng, total, keep).into_vec();
    idx.sort_unstable();
    idx
}

fn time_calls<F: FnMut()>(inner: usize, f: &mut F) -> f64 {
    let start = Instant::now();
    for _ in 0..inner {
        f();
    }
    start.elapsed().as_secs_f64() * 1e3 / inner as f64
}

/// Times one layer at one sparsity.
///
/// Dense and compact calls alternate within each repetition so slow drift
/// affects both. Warm-up calls are not recorded.
pub fn bench_layer(layer_id: usize, dims: LayerDims, sparsity: f64, mode: GroupType, settings: BenchSettings) -> Result<BenchRow> {
    if settings.reps < MIN_REPS {
        return Err(Error::config("reps", format!("at least {MIN_REPS} repetitions required, got {}", settings.reps)));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config("sparsity", format!("{sparsity} outside [0, 1)")));
    }
    if dims.rows == 0 || dims.cols == 0 || dims.patch_cols == 0 {
        return Err(Error::shape("bench", "zero dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let w = random_matrix(dims.rows, dims.cols, &mut rng);
    let x = random_matrix(dims.cols, dims.patch_cols, &mut rng);
    let (w_c, gather) = match mode {
        GroupType::Row => (w.gather_rows(&kept_subset(dims.rows, sparsity, &mut rng)), None),
        GroupType::Column => {
            let kept = kept_subset(dims.cols, sparsity, &mut rng);
            (w.gather_cols(&kept), Some(kept))
        }
    };
    let x_gathered = gather.as_ref().map(|g| x.gather_rows(g));

    let mut dense = || {
        std::hint::black_box(matmul(&w, &x).expect("dims"));
    };
    let mut compact = || {
        let y = match &gather {
            Some(g) => matmul(&w_c, &x.gather_rows(g)),
            None => matmul(&w_c, &x),
        };
        std::hint::black_box(y.expect("dims"));
    };
    let mut compact_gemm = || {
        std::hint::black_box(matmul(&w_c, x_gathered.as_ref().unwrap_or(&x)).expect("dims"));
    };

    for _ in 0..settings.warmup {
        dense();
        compact();
    }
    let probe = time_calls(1, &mut compact).min(time_calls(1, &mut dense));
    let inner = if probe <= 0.0 {
        1000
    } else {
        ((MIN_SAMPLE.as_secs_f64() * 1e3 / probe).ceil() as usize).clamp(1, 1000)
    };

    let (mut d, mut c, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..settings.reps {
        d.push(time_calls(inner, &mut dense));
        c.push(time_calls(inner, &mut compact));
        if gather.is_some() {
            g.push(time_calls(inner, &mut compact_gemm));
        }
    }
    if gather.is_none() {
        g = c.clone();
    }
    let (dense_mean_ms, compact_mean_ms, compact_gemm_mean_ms) = (mean(&d), mean(&c), mean(&g));
    let (dense_ms, compact_ms, compact_gemm_ms) = (median(&mut d), median(&mut c), median(&mut g));
    Ok(BenchRow {
        layer_id,
        mode,
        sparsity,
        dense_ms,
        compact_ms,
        speedup: dense_ms / compact_ms,
        dense_mean_ms,
        compact_mean_ms,
        compact_gemm_ms,
        compact_gemm_mean_ms,
        reps: settings.reps,
        inner,
        threads: current_threads(),
        rows: dims.rows,
        cols: dims.cols,
        patch_cols: dims.patch_cols,
        kept_rows: w_c.rows(),
        kept_cols: w_c.cols(),
    })
}

/// Sweeps one layer over several sparsities.
pub fn bench_sweep(
    layer_id: usize,
    dims: LayerDims,
    sparsities: &[f64],
    mode: GroupType,
    settings: BenchSettings,
) -> Result<BenchReport> {
    let rows = sparsities
        .iter()
        .map(|&s| bench_layer(layer_id, dims, s, mode, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport { rows, threads: current_threads(), environment: environment_note() })
}

/// GEMM dims of every conv layer of `spec` for a batch of `batch` samples.
pub fn network_layer_dims(spec: &NetworkSpec, batch: usize) -> Result<Vec<(usize, LayerDims)>> {
    let shapes = spec.validate()?;
    let dims = spec.weight_dims()?;
    Ok(spec
        .conv_layers()
        .into_iter()
        .map(|i| {
            let [n, c, kh, kw] = dims[i].expect("conv has weights");
            let out = shapes[i + 1];
            (i, LayerDims { rows: n, cols: c * kh * kw, patch_cols: batch * out.h * out.w })
        })
        .collect())
}

/// Benchmarks every conv layer of `spec` at each sparsity.
pub fn bench_network(
    spec: &NetworkSpec,
    batch: usize,
    sparsities: &[f64],
    mode: GroupType,
    settings: BenchSettings,
) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for (layer, dims) in network_layer_dims(spec, batch)? {
        rows.extend(bench_sweep(layer, dims, sparsities, mode, settings)?.rows);
    }
    Ok(BenchReport { rows, threads: current_threads(), environment: environment_note() })
}

/// True when each speedup is at least `(1 − noise)` times the previous one.
pub fn is_monotone_within(speedups: &[f64], noise: f64) -> bool {
    speedups.windows(2).all(|w| w[1] >= w[0] * (1.0 - noise))
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn speedups(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.speedup).collect()
    }
}
