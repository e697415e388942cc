use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Open-loop Poisson workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub service_id: String,
    /// Requests per second.
    pub arrival_rate: f64,
    #[serde(with = "crate::serde_ms")]
    pub duration: Duration,
    pub rng_seed: u64,
    #[serde(default = "default_payload_size")]
    pub payload_size: usize,
}

fn default_payload_size() -> usize {
    256
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return Err(HarnessError::ConfigInvalid("arrival_rate must be > 0".into()));
        }
        if self.duration.is_zero() {
            return Err(HarnessError::ConfigInvalid("duration must be > 0".into()));
        }
        if self.payload_size < 8 {
            return Err(HarnessError::ConfigInvalid("payload_size must be >= 8".into()));
        }
        Ok(())
    }
}

// Independent random streams derived from one seed, so that changing how
// many values one consumer draws never shifts another consumer's values.
const ARRIVAL_STREAM: u64 = 1;
const WORK_STREAM: u64 = 2;
const PAYLOAD_STREAM: u64 = 3;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Send instants in `[0, duration)`, with i.i.d. exponential gaps of mean
/// `1 / arrival_rate`.
pub fn generate_arrivals(spec: &WorkloadSpec) -> Vec<Duration> {
    let mut rng = stream(spec.rng_seed, ARRIVAL_STREAM);
    let gap = Exp::new(spec.arrival_rate).expect("positive rate");
    let end = spec.duration.as_secs_f64();
    let mut t = 0.0;
    let mut out = Vec::with_capacity((spec.arrival_rate * end * 1.1) as usize + 16);
    loop {
        t += gap.sample(&mut rng);
        if t >= end {
            return out;
        }
        out.push(Duration::from_secs_f64(t));
    }
}

/// Per-request work factors (lognormal, median 1), one per arrival.
pub fn generate_work_factors(seed: u64, sigma: f64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, WORK_STREAM);
    if sigma == 0.0 {
        return vec![1.0; n];
    }
    let dist = LogNormal::new(0.0, sigma).expect("finite sigma");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Request payload: the work factor followed by random filler.
pub fn make_payload(work_factor: f64, size: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut p = vec![0u8; size.max(8)];
    p[..8].copy_from_slice(&work_factor.to_le_bytes());
    rng.fill(&mut p[8..]);
    p
}

pub(crate) fn payload_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, PAYLOAD_STREAM)
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest sample.
pub fn percentile<T: Copy + Ord>(samples: &[T], p: f64) -> Result<T, HarnessError> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    percentile_sorted(&sorted, p)
}

pub fn percentile_sorted<T: Copy>(sorted: &[T], p: f64) -> Result<T, HarnessError> {
    if sorted.is_empty() {
        return Err(HarnessError::EmptySamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(HarnessError::ConfigInvalid(format!("percentile {p} outside (0, 100]")));
    }
    let n = sorted.len();
    // Guard against 0.99 * 100 evaluating to 99.00000000000001.
    let rank = ((p / 100.0 * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}
