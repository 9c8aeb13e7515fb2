//! Batch evaluation: many seeded episodes, aggregated with bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::policy::PolicyBundle;
use crate::stack::{run_episode, EpisodeResult, ScenarioSource, StackConfig};

/// SplitMix64 finalizer; decorrelates nearby seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeds of a batch of `episodes` episodes.
pub fn episode_seeds(base: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|i| derive_seed(base, i)).collect()
}

/// Runs `episodes` episodes in parallel; results come back in seed order, so
/// the output does not depend on the thread count.
pub fn run_suite(
    source: &ScenarioSource,
    bundle: &PolicyBundle,
    cfg: &StackConfig,
    base_seed: u64,
    episodes: usize,
) -> Result<Vec<EpisodeResult>> {
    let specs = episode_seeds(base_seed, episodes)
        .into_iter()
        .map(|s| source.instantiate(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(specs
        .par_iter()
        .map(|spec| run_episode(spec, bundle, cfg))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub episodes: usize,
    /// True when there were no episodes; every statistic is then meaningless.
    pub empty: bool,
    pub success_rate: f64,
    pub crash_rate: f64,
    pub timeout_rate: f64,
    pub failed: usize,
    /// Mean arriving time over successful episodes.
    pub arriving_time: Option<f64>,
    pub arsps: Estimate,
    pub ansps: Estimate,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64) -> Estimate {
    let n = values.len();
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Estimate {
        mean,
        ci_low: at(0.025),
        ci_high: at(0.975),
    }
}

pub fn aggregate(results: &[EpisodeResult], seed: u64) -> Aggregate {
    let n = results.len();
    let count = |f: &dyn Fn(&EpisodeResult) -> bool| results.iter().filter(|r| f(r)).count();
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let times: Vec<f64> = results.iter().filter_map(|r| r.metrics.arriving_time).collect();
    let arsps: Vec<f64> = results.iter().map(|r| r.metrics.arsps).collect();
    let ansps: Vec<f64> = results.iter().map(|r| r.metrics.ansps).collect();
    Aggregate {
        episodes: n,
        empty: n == 0,
        success_rate: rate(count(&|r| r.metrics.success)),
        crash_rate: rate(count(&|r| r.metrics.crash)),
        timeout_rate: rate(count(&|r| r.metrics.timeout)),
        failed: count(&|r| r.error.is_some()),
        arriving_time: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
        arsps: bootstrap_mean(&arsps, BOOTSTRAP_RESAMPLES, derive_seed(seed, 1)),
        ansps: bootstrap_mean(&ansps, BOOTSTRAP_RESAMPLES, derive_seed(seed, 2)),
    }
}
