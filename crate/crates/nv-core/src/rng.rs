//! Deterministic counter-based random streams.
//!
//! Every random decision in a run is drawn from a [`RngStream`] identified by
//! `(seed, phase, entity, step)`. A stream's draws depend only on that
//! identity and the draw index, so inserting or removing one vesicle never
//! perturbs the draws of another, and any event can be replayed in isolation.

use serde::{Deserialize, Serialize};

/// Logical phase a stream belongs to. Each phase gets a disjoint id space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    Data,
    Emit,
    SpawnContent,
    SpawnLifetime,
    Move,
    Dock,
    Decay,
    SnnInput,
    PolicyEmit,
    PolicyMove,
    PolicyDock,
    PolicyRelease,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Init => 0x01,
            Phase::Data => 0x02,
            Phase::Emit => 0x03,
            Phase::SpawnContent => 0x04,
            Phase::SpawnLifetime => 0x05,
            Phase::Move => 0x06,
            Phase::Dock => 0x07,
            Phase::Decay => 0x08,
            Phase::SnnInput => 0x09,
            Phase::PolicyEmit => 0x0a,
            Phase::PolicyMove => 0x0b,
            Phase::PolicyDock => 0x0c,
            Phase::PolicyRelease => 0x0d,
        }
    }
}

/// A counter-based pseudo-random stream (splitmix64 core).
#[derive(Clone, Debug)]
pub struct RngStream {
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    /// Stream identified directly by `(seed, stream_id)`.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let id = mix64(mix64(seed ^ 0x9E3779B97F4A7C15) ^ stream_id);
        RngStream {
            stream_id: id,
            counter: mix64(id ^ 0xD1342543DE82EF95),
        }
    }

    /// Stream for a `(phase, entity, step)` triple under the run seed.
    pub fn for_event(seed: u64, phase: Phase, entity: u64, step: u64) -> Self {
        let id = mix64(phase.tag().wrapping_mul(0xA0761D6478BD642F) ^ mix64(entity))
            ^ step.wrapping_mul(0x8E9D5A8F6A09E667);
        RngStream::new(seed, id)
    }

    /// Next raw 64-bit sample.
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(0x9E3779B97F4A7C15);
        mix64(self.stream_id ^ self.counter)
    }

    /// Uniform sample in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal sample via Box-Muller (one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Exponential sample with the given mean.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        -mean * (1.0 - self.next_f64()).ln()
    }

    /// Bernoulli sample.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Poisson sample by CDF inversion. Exact for the small rates used here;
    /// the count is capped at 10_000 to bound the scan.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            return 0;
        }
        let u = self.next_f64();
        let mut k: u64 = 0;
        let mut pmf = (-lambda).exp();
        let mut cdf = pmf;
        while u >= cdf && k < 10_000 {
            k += 1;
            pmf *= lambda / k as f64;
            cdf += pmf;
        }
        k
    }
}

/// Convenience factory binding a run seed and a step index; kernels derive
/// one stream per `(phase, entity)` from it.
#[derive(Clone, Copy, Debug)]
pub struct EventRng {
    pub seed: u64,
    pub step: u64,
}

impl EventRng {
    pub fn new(seed: u64, step: u64) -> Self {
        EventRng { seed, step }
    }

    pub fn stream(&self, phase: Phase, entity: u64) -> RngStream {
        RngStream::for_event(self.seed, phase, entity, self.step)
    }
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes; used for state digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
