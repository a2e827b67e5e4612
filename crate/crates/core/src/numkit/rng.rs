use super::Matrix;

/// Seedable pseudo-random generator with a fixed, documented algorithm.
///
/// The generator is SplitMix64 (Steele, Lea & Flood 2014): 64 bits of state,
/// a Weyl increment of `0x9E3779B97F4A7C15` and a two-round xor-multiply
/// output mix. Uniform doubles take the top 53 bits of an output word;
/// standard-normal draws use the Box-Muller transform and consume exactly
/// two output words each. None of this ever changes, so a seed pins the
/// whole draw sequence across runs, platforms and dependency upgrades.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

/// Name of the generator algorithm, recorded in run manifests.
pub const RNG_ALGORITHM: &str = "splitmix64/box-muller";

const WEYL: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(WEYL);
        mix(self.state)
    }

    /// Uniform in [0, 1): 53 significant bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a logarithm argument.
    #[inline]
    fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; consumes two `next_u64` outputs.
    ///
    /// Only the cosine branch of the pair is used, which keeps the
    /// draws-to-outputs accounting trivial (one normal = two words).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Matrix of i.i.d. normal(0, std^2) entries, filled row-major.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.next_normal())
    }

    /// Vector of i.i.d. standard-normal entries scaled by `std`.
    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.next_normal()).collect()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            // Unbiased enough for permutation counts this small: the
            // modulo bias over 64 bits is ~2^-60.
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// Derive an independent stream seed from a master seed, a label and
/// integer parts.
///
/// The derivation is documented and fixed: FNV-1a over the label bytes,
/// then each part absorbed through the SplitMix64 output mix,
/// `h = mix(h ^ part)`. Distinct (label, parts) tuples give independent
/// streams; the sweep runner checks for collisions across a whole run.
pub fn derive_seed(master: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = mix(master ^ digest64(label.as_bytes()));
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

/// FNV-1a over bytes; used for labels and content digests.
pub fn digest64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
