use std::cmp::Ordering;
use std::fmt;

use serde::{Serialize, Serializer};

/// Non-negative rational `numerator / denominator`; a zero denominator reads as 0.
///
/// Equality and ordering compare values, so `1/3 == 8/24`.
#[derive(Debug, Clone, Copy)]
pub struct Score {
    num: u64,
    den: u64,
}

impl Score {
    pub const ZERO: Score = Score { num: 0, den: 0 };

    pub fn new(numerator: u64, denominator: u64) -> Self {
        if denominator == 0 {
            return Self::ZERO;
        }
        Self {
            num: numerator,
            den: denominator,
        }
    }

    pub fn numerator(&self) -> u64 {
        self.num
    }

    pub fn denominator(&self) -> u64 {
        self.den
    }

    pub fn to_f64(&self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }

    /// Lowest terms; `0/1` for zero.
    pub fn reduced(&self) -> (u64, u64) {
        if self.num == 0 {
            return (0, 1);
        }
        let g = gcd(self.num, self.den);
        (self.num / g, self.den / g)
    }

    fn effective(&self) -> (u64, u64) {
        if self.den == 0 {
            (0, 1)
        } else {
            (self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl PartialEq for Score {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = self.effective();
        let (c, d) = other.effective();
        (a as u128 * d as u128).cmp(&(c as u128 * b as u128))
    }
}

/// Reduced fraction, e.g. `1/3`.
impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, d) = self.reduced();
        write!(f, "{n}/{d}")
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn value_semantics() {
        assert_eq!(Score::new(8, 24), Score::new(1, 3));
        assert_eq!(Score::new(8, 24).to_string(), "1/3");
        assert_eq!(Score::new(0, 5), Score::ZERO);
        assert_eq!(Score::new(3, 0), Score::ZERO);
        assert_eq!(Score::ZERO.to_string(), "0/1");
        assert!(Score::new(2, 7) < Score::new(1, 3));
        assert_eq!(serde_json::to_string(&Score::new(4, 4)).unwrap(), "\"1/1\"");
    }

    proptest! {
        #[test]
        fn order_matches_big_rationals(a in 0u64..1 << 40, b in 1u64..1 << 40, c in 0u64..1 << 40, d in 1u64..1 << 40) {
            let (x, y) = (Score::new(a.min(b), b), Score::new(c.min(d), d));
            let exact = ((a.min(b)) as u128 * d as u128).cmp(&((c.min(d)) as u128 * b as u128));
            prop_assert_eq!(x.cmp(&y), exact);
        }
    }
}
