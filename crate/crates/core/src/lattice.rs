//! Ring configurations and the local rules of the facilitated exclusion
//! process.
//!
//! A configuration is a 0/1 occupation vector on a ring of `L` sites, stored
//! bit-packed. All indices are taken modulo `L`. A particle at `x` may jump to
//! an empty neighbour only when its other neighbour is occupied, which is
//! encoded in [`rate_sym`] and [`rate_asym`].

use std::fmt;
use std::str::FromStr;

use crate::error::{FepError, Result};

const WORD: usize = 64;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    words: Vec<u64>,
    len: usize,
}

impl Configuration {
    /// All sites empty.
    pub fn empty(len: usize) -> Self {
        assert!(len > 0, "ring size must be positive");
        Self {
            words: vec![0; len.div_ceil(WORD)],
            len,
        }
    }

    /// All sites occupied.
    pub fn full(len: usize) -> Self {
        let mut c = Self::empty(len);
        for i in 0..len {
            c.set(i, true);
        }
        c
    }

    pub fn from_bits<I: IntoIterator<Item = u8>>(bits: I) -> Self {
        let bits: Vec<u8> = bits.into_iter().collect();
        let mut c = Self::empty(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            assert!(b <= 1, "occupation values must be 0 or 1");
            c.set(i, b == 1);
        }
        c
    }

    /// Ring of `len` sites whose first `bits.len()`-bit pattern is given by
    /// the low bits of `pattern` (bit `i` is site `i`).
    pub fn from_pattern(pattern: u64, len: usize) -> Self {
        assert!(len <= WORD);
        let mut c = Self::empty(len);
        c.words[0] = if len == WORD {
            pattern
        } else {
            pattern & ((1u64 << len) - 1)
        };
        c
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / WORD] >> (i % WORD)) & 1 == 1
    }

    /// Occupation at `i` as 0/1, with `i` taken modulo the ring size.
    #[inline]
    pub fn occ(&self, i: isize) -> u8 {
        self.get(self.wrap(i)) as u8
    }

    #[inline]
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.len as isize) as usize
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        let (w, b) = (i / WORD, i % WORD);
        if value {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    pub fn particles(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn bits(&self) -> impl Iterator<Item = u8> + '_ {
        (0..self.len).map(move |i| self.get(i) as u8)
    }

    /// Low `len` bits as an integer; only for rings of at most 64 sites.
    pub fn pattern(&self) -> u64 {
        assert!(self.len <= WORD);
        self.words[0]
    }

    /// Swaps the contents of `x` and `x+1` in place.
    #[inline]
    pub fn swap_in_place(&mut self, x: usize) {
        let y = if x + 1 == self.len { 0 } else { x + 1 };
        let (a, b) = (self.get(x), self.get(y));
        if a != b {
            self.set(x, b);
            self.set(y, a);
        }
    }

    /// Binary snapshot: ring size as little-endian `u64`, then the sites
    /// packed eight per byte, least significant bit first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len.div_ceil(8));
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        for chunk in 0..self.len.div_ceil(8) {
            let word = self.words[chunk * 8 / WORD];
            out.push((word >> ((chunk * 8) % WORD)) as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(FepError::Parse("snapshot shorter than its header".into()));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if len == 0 || body.len() != len.div_ceil(8) {
            return Err(FepError::Parse(format!(
                "snapshot body has {} bytes for {len} sites",
                body.len()
            )));
        }
        let mut c = Self::empty(len);
        for i in 0..len {
            c.set(i, (body[i / 8] >> (i % 8)) & 1 == 1);
        }
        Ok(c)
    }

    /// Run-length text form, e.g. `1x3 0x1 1x2`.
    pub fn run_length(&self) -> String {
        let mut runs: Vec<(u8, usize)> = Vec::new();
        for b in self.bits() {
            match runs.last_mut() {
                Some((v, n)) if *v == b => *n += 1,
                _ => runs.push((b, 1)),
            }
        }
        runs.iter()
            .map(|(v, n)| format!("{v}x{n}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len <= 128 {
            write!(f, "Configuration({self})")
        } else {
            write!(f, "Configuration(L={}, {})", self.len, self.run_length())
        }
    }
}

impl FromStr for Configuration {
    type Err = FepError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(FepError::Parse("empty configuration".into()));
        }
        if s.contains('x') {
            let mut bits = Vec::new();
            for run in s.split_whitespace() {
                let (v, n) = run
                    .split_once('x')
                    .ok_or_else(|| FepError::Parse(format!("bad run {run:?}")))?;
                let v: u8 = match v {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(FepError::Parse(format!("bad run value {v:?}"))),
                };
                let n: usize = n
                    .parse()
                    .map_err(|_| FepError::Parse(format!("bad run length {n:?}")))?;
                bits.extend(std::iter::repeat_n(v, n));
            }
            if bits.is_empty() {
                return Err(FepError::Parse("empty configuration".into()));
            }
            return Ok(Self::from_bits(bits));
        }
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(FepError::Parse(format!("unexpected character {c:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self::from_bits(bits))
    }
}

/// True iff no two cyclically adjacent sites are both empty.
pub fn is_ergodic(config: &Configuration) -> bool {
    let l = config.len();
    (0..l).all(|x| config.get(x) || config.get(if x + 1 == l { 0 } else { x + 1 }))
}

/// Symmetric bond rate `η_{x-1}η_x(1-η_{x+1}) + η_{x+2}η_{x+1}(1-η_x)`.
#[inline]
pub fn rate_sym(config: &Configuration, x: usize) -> u8 {
    let x = x as isize;
    window_rate_sym([
        config.occ(x - 1),
        config.occ(x),
        config.occ(x + 1),
        config.occ(x + 2),
    ])
}

/// Totally asymmetric bond rate `η_{x-1}η_x(1-η_{x+1})`.
#[inline]
pub fn rate_asym(config: &Configuration, x: usize) -> u8 {
    let x = x as isize;
    window_rate_asym([config.occ(x - 1), config.occ(x), config.occ(x + 1)])
}

/// Symmetric rate from the window `(η_{x-1}, η_x, η_{x+1}, η_{x+2})`.
#[inline]
pub fn window_rate_sym(w: [u8; 4]) -> u8 {
    w[0] * w[1] * (1 - w[2]) + w[3] * w[2] * (1 - w[1])
}

/// Asymmetric rate from the window `(η_{x-1}, η_x, η_{x+1})`.
#[inline]
pub fn window_rate_asym(w: [u8; 3]) -> u8 {
    w[0] * w[1] * (1 - w[2])
}

/// The configuration with sites `x` and `x+1` exchanged.
pub fn swap(config: &Configuration, x: usize) -> Configuration {
    let mut c = config.clone();
    c.swap_in_place(x % config.len());
    c
}

/// `τ_x h(η) = η_{x-1}η_x + η_xη_{x+1} − η_{x-1}η_xη_{x+1}`.
#[inline]
pub fn h_local(config: &Configuration, x: usize) -> f64 {
    let x = x as isize;
    window_h([config.occ(x - 1), config.occ(x), config.occ(x + 1)]) as f64
}

#[inline]
pub fn window_h(w: [u8; 3]) -> u8 {
    w[0] * w[1] + w[1] * w[2] - w[0] * w[1] * w[2]
}

/// Density in the `2ℓ+1` sites centred at `x`.
pub fn block_average(config: &Configuration, x: usize, half_width: usize) -> Result<f64> {
    if 2 * half_width + 1 > config.len() {
        return Err(FepError::WindowTooLarge {
            half_width,
            len: config.len(),
        });
    }
    let x = x as isize;
    let l = half_width as isize;
    let count: u32 = (-l..=l).map(|y| config.occ(x + y) as u32).sum();
    Ok(count as f64 / (2 * half_width + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(s: &str) -> Configuration {
        s.parse().unwrap()
    }

    #[test]
    fn ergodicity_examples() {
        assert!(is_ergodic(&Configuration::full(8)));
        assert!(is_ergodic(&cfg("10101010")));
        assert!(!is_ergodic(&cfg("110011")));
        // wrap-around pair
        assert!(!is_ergodic(&cfg("0110")));
    }

    #[test]
    fn symmetric_rate_windows() {
        assert_eq!(window_rate_sym([1, 1, 0, 1]), 1);
        assert_eq!(window_rate_sym([1, 1, 0, 0]), 1);
        assert_eq!(window_rate_sym([0, 1, 1, 0]), 0);
        assert_eq!(window_rate_sym([0, 0, 1, 1]), 1);
        // bond 1 of 1101 reads the window (1,1,0,1)
        assert_eq!(rate_sym(&cfg("11010"), 1), 1);
    }

    #[test]
    fn asymmetric_rate_windows() {
        assert_eq!(window_rate_asym([1, 1, 0]), 1);
        assert_eq!(window_rate_asym([0, 1, 0]), 0);
        assert_eq!(window_rate_asym([1, 1, 1]), 0);
        assert_eq!(rate_asym(&cfg("0110"), 2), 1);
    }

    #[test]
    fn swap_examples() {
        assert_eq!(swap(&cfg("10"), 0).to_string(), "01");
        assert_eq!(swap(&cfg("11"), 0).to_string(), "11");
        let c = cfg("1101101");
        assert_eq!(swap(&swap(&c, 3), 3), c);
        // the bond L-1 -> 0 wraps
        assert_eq!(swap(&cfg("0111"), 3).to_string(), "1110");
    }

    #[test]
    fn h_examples() {
        assert_eq!(window_h([1, 1, 0]), 1);
        assert_eq!(window_h([1, 1, 1]), 1);
        assert_eq!(window_h([0, 1, 0]), 0);
        assert_eq!(h_local(&cfg("0110"), 1), 1.0);
    }

    #[test]
    fn block_average_examples() {
        assert_eq!(block_average(&Configuration::full(9), 4, 3).unwrap(), 1.0);
        let alt = cfg("101010");
        assert!((block_average(&alt, 0, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((block_average(&alt, 1, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((block_average(&cfg("11011"), 2, 2).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(
            block_average(&cfg("11011"), 2, 3),
            Err(FepError::WindowTooLarge {
                half_width: 3,
                len: 5
            })
        );
    }

    #[test]
    fn gradient_identity_exhaustive() {
        for p in 0u8..16 {
            let w = [p & 1, (p >> 1) & 1, (p >> 2) & 1, (p >> 3) & 1];
            let current = window_rate_sym(w) as i32 * (w[1] as i32 - w[2] as i32);
            let grad = window_h([w[0], w[1], w[2]]) as i32 - window_h([w[1], w[2], w[3]]) as i32;
            assert_eq!(current, grad, "window {w:?}");
        }
    }

    #[test]
    fn positive_rate_moves_preserve_ergodicity() {
        for len in 3..=12usize {
            for p in 0u64..(1 << len) {
                let c = Configuration::from_pattern(p, len);
                if !is_ergodic(&c) {
                    continue;
                }
                for x in 0..len {
                    if rate_sym(&c, x) > 0 {
                        assert!(is_ergodic(&swap(&c, x)), "{c} bond {x}");
                    }
                    if rate_asym(&c, x) > 0 {
                        assert!(is_ergodic(&swap(&c, x)), "{c} bond {x}");
                    }
                }
            }
        }
    }

    #[test]
    fn text_forms_parse() {
        let c = cfg("1110110");
        assert_eq!(c.run_length(), "1x3 0x1 1x2 0x1");
        assert_eq!(cfg(&c.run_length()), c);
        assert!("10a1".parse::<Configuration>().is_err());
    }

    #[test]
    fn snapshot_layout() {
        let c = cfg("1000000011");
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], &10u64.to_le_bytes());
        assert_eq!(&bytes[8..], &[0b0000_0001, 0b0000_0011]);
    }

    proptest! {
        #[test]
        fn snapshot_roundtrip(bits in proptest::collection::vec(0u8..2, 1..300)) {
            let c = Configuration::from_bits(bits);
            prop_assert_eq!(Configuration::from_bytes(&c.to_bytes()).unwrap(), c.clone());
            prop_assert_eq!(c.to_string().parse::<Configuration>().unwrap(), c);
        }

        #[test]
        fn swap_is_involutive_and_conserves(bits in proptest::collection::vec(0u8..2, 2..200), x in 0usize..1000) {
            let c = Configuration::from_bits(bits);
            let x = x % c.len();
            let s = swap(&c, x);
            prop_assert_eq!(s.particles(), c.particles());
            prop_assert_eq!(swap(&s, x), c);
        }

        #[test]
        fn rates_are_bounded(bits in proptest::collection::vec(0u8..2, 4..100), x in 0usize..1000) {
            let c = Configuration::from_bits(bits);
            let x = x % c.len();
            prop_assert!(rate_sym(&c, x) <= 2);
            prop_assert!(rate_asym(&c, x) <= 1);
        }
    }
}
