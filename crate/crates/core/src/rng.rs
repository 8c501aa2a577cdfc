//! The one PRNG used for splits, shuffles, initialization and dropout.
//!
//! Generator: PCG-XSH-RR 64/32 (`rand_pcg::Pcg32`), seeded through
//! `Pcg32::new(seed, stream)`. A 64-bit draw is two consecutive 32-bit outputs
//! (low word first). Every consumer picks a distinct stream constant so that
//! changing, say, the dropout pattern never perturbs the data order.
//!
//! * uniform `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * shuffle: Fisher-Yates from the back, `j = next_u64 % (i + 1)`

use rand_core::RngCore;
use rand_pcg::Pcg32;

/// Version tag recorded next to every seed.
pub const RNG_ALGORITHM: &str = "pcg32-xsh-rr/1";

pub mod stream {
    pub const SPLIT: u64 = 0x5111;
    pub const INIT: u64 = 0x1417;
    pub const DROPOUT: u64 = 0xd209;
    pub const PROBE: u64 = 0x9a0b;
    /// Per-epoch shuffles use `EPOCH_BASE + epoch`.
    pub const EPOCH_BASE: u64 = 0x1_0000;
}

pub struct Rng(Pcg32);

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Rng(Pcg32::new(seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (one output per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            xs.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
