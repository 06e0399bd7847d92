//! Counter-based random numbers (Philox4x64-10).
//!
//! A generator is a pure function of a 128-bit key and a 256-bit counter, so
//! any number of independent streams can be derived from a seed without
//! shared state. [`KeyedStream`] fixes the key from a seed and reserves two
//! counter words for a stream id and a purpose tag; the remaining two words
//! count draws within the stream.

const MULT_0: u64 = 0xD2E7_470E_E14C_6C93;
const MULT_1: u64 = 0xCA5A_8263_9512_1157;
const WEYL_0: u64 = 0x9E37_79B9_7F4A_7C15;
const WEYL_1: u64 = 0xBB67_AE85_84CA_A73B;
const ROUNDS: usize = 10;

/// One Philox4x64 block: 10 rounds over `counter` under `key`.
#[inline]
pub fn philox4x64(counter: [u64; 4], key: [u64; 2]) -> [u64; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..ROUNDS {
        if round > 0 {
            k[0] = k[0].wrapping_add(WEYL_0);
            k[1] = k[1].wrapping_add(WEYL_1);
        }
        let p0 = (MULT_0 as u128) * (c[0] as u128);
        let p1 = (MULT_1 as u128) * (c[2] as u128);
        let (hi0, lo0) = ((p0 >> 64) as u64, p0 as u64);
        let (hi1, lo1) = ((p1 >> 64) as u64, p1 as u64);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// A sequential stream over a Philox counter range keyed by
/// `(seed, stream, purpose)`.
#[derive(Debug, Clone)]
pub struct KeyedStream {
    key: [u64; 2],
    stream: u64,
    purpose: u64,
    draw: u64,
    buffer: [u64; 4],
    used: usize,
}

/// Second key word; separates this crate's streams from a bare Philox keyed
/// by the seed alone.
const KEY_TAG: u64 = 0x4853_5053_4556_5431;

impl KeyedStream {
    pub fn new(seed: u64, stream: u64, purpose: u64) -> Self {
        KeyedStream {
            key: [seed, KEY_TAG],
            stream,
            purpose,
            draw: 0,
            buffer: [0; 4],
            used: 4,
        }
    }

    /// An independent stream sharing this stream's seed.
    pub fn split(&self, stream: u64, purpose: u64) -> Self {
        KeyedStream {
            key: self.key,
            ..KeyedStream::new(0, stream, purpose)
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        if self.used == 4 {
            self.buffer = philox4x64([self.draw, 0, self.stream, self.purpose], self.key);
            self.draw = self.draw.wrapping_add(1);
            self.used = 0;
        }
        let v = self.buffer[self.used];
        self.used += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`, safe to pass to `ln`.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference blocks from the Random123 known-answer set and numpy's Philox
    // (4x64, 10 rounds).
    #[test]
    fn known_answer_vectors() {
        assert_eq!(
            philox4x64([0; 4], [0; 2]),
            [
                0x16554d9eca36314c,
                0xdb20fe9d672d0fdc,
                0xd7e772cee186176b,
                0x7e68b68aec7ba23b
            ]
        );
        assert_eq!(
            philox4x64([u64::MAX; 4], [u64::MAX; 2]),
            [
                0x87b092c3013fe90b,
                0x438c3c67be8d0224,
                0x9cc7d7c69cd777b6,
                0xa09caebf594f0ba0
            ]
        );
        assert_eq!(
            philox4x64(
                [
                    0x243f6a8885a308d3,
                    0x13198a2e03707344,
                    0xa4093822299f31d0,
                    0x082efa98ec4e6c89
                ],
                [0x452821e638d01377, 0xbe5466cf34e90c6c]
            ),
            [
                0xa528f45403e61d95,
                0x38c72dbd566e9788,
                0xa5a1610e72fd18b5,
                0x57bd43b5e52b7fe6
            ]
        );
        assert_eq!(
            philox4x64([7, 0, 3, 1], [42, 0x5851f42d4c957f2d]),
            [
                0x9539839838f4147c,
                0xcad4658c31f5da34,
                0x17e09e8ce141dd59,
                0xe1fad96c709ea1c6
            ]
        );
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = KeyedStream::new(9, 3, 0);
        let mut b = KeyedStream::new(9, 3, 0);
        let mut c = KeyedStream::new(9, 4, 0);
        let mut d = a.split(3, 1);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        let xd: Vec<u64> = (0..16).map(|_| d.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_ne!(xa, xd);
    }

    #[test]
    fn uniform_moments() {
        let mut s = KeyedStream::new(1, 0, 0);
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
            sq += u * u;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        // σ of the mean is sqrt(1/12/n) ≈ 2.9e-4.
        assert!((mean - 0.5).abs() < 1.2e-3, "{mean}");
        assert!((var - 1.0 / 12.0).abs() < 1e-3, "{var}");
    }

    #[test]
    fn open_uniform_excludes_zero() {
        let mut s = KeyedStream::new(5, 1, 2);
        for _ in 0..10_000 {
            let u = s.uniform_open0();
            assert!(u > 0.0 && u <= 1.0);
        }
    }

    #[test]
    fn bit_balance_chi_square() {
        // 64 bit positions, each should be set half the time.
        let mut s = KeyedStream::new(77, 0, 0);
        let n = 200_000u32;
        let mut ones = [0u32; 64];
        for _ in 0..n {
            let v = s.next_u64();
            for (bit, count) in ones.iter_mut().enumerate() {
                *count += ((v >> bit) & 1) as u32;
            }
        }
        let expected = n as f64 / 2.0;
        let chi2: f64 = ones
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / (n as f64 / 4.0)
            })
            .sum();
        // 64 dof: the 0.999 quantile is about 110.
        assert!(chi2 < 110.0, "{chi2}");
    }
}
