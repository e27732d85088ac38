//! splitmix64 streams.
//!
//! Every random draw in the crate comes from a [`SplitMix64`] stream derived
//! from the user seed and a tuple of integer labels (role, layer, frame, ...),
//! so results are a pure function of the seed and reproducible bit-for-bit
//! across platforms and languages.
//!
//! Derivation: `state = seed`; for each label `l`,
//! `state = mix(state ^ mix(l + GOLDEN))`, where `mix` is the splitmix64
//! output finalizer. Uniform doubles take the top 53 bits; normals use the
//! Box-Muller cosine branch on two fresh uniforms.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels used by the simulator.
pub mod role {
    pub const TOKENS: u64 = 1;
    pub const HIDDEN: u64 = 2;
    pub const IP_TOKENS: u64 = 3;
    pub const WEIGHTS: u64 = 4;
    pub const RESERVOIR: u64 = 5;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream keyed by `seed` and an ordered list of labels.
    pub fn for_stream(seed: u64, labels: &[u64]) -> Self {
        let state = labels
            .iter()
            .fold(seed, |s, &l| mix(s ^ mix(l.wrapping_add(GOLDEN))));
        Self { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection of the biased tail.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
