//! Scan timing across sequence lengths.

use std::time::Instant;

use cmunet::ssm::{selective_scan, ScanMode};
use cmunet_tensor::{no_grad, par};
use serde::{Deserialize, Serialize};

use crate::checks::{random_scan_instance, rel_linf, SCAN_TOL_F32};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    /// Robust to preemption spikes on a shared machine; growth ratios use it.
    pub median_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LengthEntry {
    pub length: usize,
    pub parallel: Timing,
    pub sequential: Timing,
    /// Relative L-infinity gap between the two outputs.
    pub max_rel_diff: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub channels: usize,
    pub state: usize,
    pub batch: usize,
    pub entries: Vec<LengthEntry>,
    /// Median `time(L[i+1]) / time(L[i])` for the parallel scan.
    pub parallel_ratios: Vec<f64>,
    pub sequential_ratios: Vec<f64>,
    pub environment: String,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub channels: usize,
    pub state: usize,
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
}

fn summarize(samples: &[f64]) -> Timing {
    let reps = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 { sorted[reps / 2] } else { 0.5 * (sorted[reps / 2 - 1] + sorted[reps / 2]) };
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps.max(2) - 1) as f64;
    Timing { median_ms: median, mean_ms: mean, std_ms: var.sqrt(), reps }
}

fn millis(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

/// Times both scan modes at every length after checking they agree.
/// Fails if the outputs differ beyond the f32 tolerance.
///
/// Repetitions are interleaved across lengths, so slow drift in machine load
/// shifts every length alike instead of skewing the growth ratios.
pub fn bench_scan(cfg: &BenchConfig) -> Result<BenchReport, String> {
    let instances: Vec<_> =
        cfg.lengths.iter().map(|&l| random_scan_instance::<f32>(cfg.batch, l, cfg.channels, cfg.state, l as u64)).collect();
    let run = |i: usize, mode| {
        let (inp, a, d) = &instances[i];
        no_grad(|| selective_scan(inp, a, d, mode)).map_err(|e| e.to_string())
    };
    let mut gaps = Vec::new();
    for (i, &l) in cfg.lengths.iter().enumerate() {
        let gap = rel_linf(run(i, ScanMode::Parallel)?.data(), run(i, ScanMode::Sequential)?.data());
        if gap.is_nan() || gap > SCAN_TOL_F32 {
            return Err(format!("parallel and sequential scans disagree at L={l}: {gap:.3e}"));
        }
        gaps.push(gap);
    }
    let mut samples = vec![(Vec::new(), Vec::new()); cfg.lengths.len()];
    for rep in 0..cfg.warmup + cfg.reps {
        for (i, (par_ms, seq_ms)) in samples.iter_mut().enumerate() {
            let p = millis(|| {
                run(i, ScanMode::Parallel).expect("validated above");
            });
            let q = millis(|| {
                run(i, ScanMode::Sequential).expect("validated above");
            });
            if rep >= cfg.warmup {
                par_ms.push(p);
                seq_ms.push(q);
            }
        }
    }
    let entries: Vec<LengthEntry> = cfg
        .lengths
        .iter()
        .zip(&samples)
        .zip(gaps)
        .map(|((&length, (p, q)), gap)| LengthEntry { length, parallel: summarize(p), sequential: summarize(q), max_rel_diff: gap })
        .collect();
    let ratios = |f: fn(&LengthEntry) -> f64| entries.windows(2).map(|w| f(&w[1]) / f(&w[0])).collect::<Vec<_>>();
    Ok(BenchReport {
        channels: cfg.channels,
        state: cfg.state,
        batch: cfg.batch,
        parallel_ratios: ratios(|e| e.parallel.median_ms),
        sequential_ratios: ratios(|e| e.sequential.median_ms),
        environment: format!(
            "{} worker thread(s), deterministic={}, {} {}",
            par::num_threads(),
            par::is_deterministic(),
            std::env::consts::OS,
            std::env::consts::ARCH
        ),
        entries,
    })
}
