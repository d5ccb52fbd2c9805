//! Binary local-attention masks: `prev-k`, `next-k`, `band-k` and `identity`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Mask family member. Offsets/widths must be at least 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskKind {
    /// Attend to the token `k` positions before: `(i, j)` set iff `i - j == k`.
    Prev(usize),
    /// Attend to the token `k` positions after: `(i, j)` set iff `j - i == k`.
    Next(usize),
    /// Attend within `|i - j| <= k`.
    Band(usize),
    Identity,
}

impl MaskKind {
    /// The seven masks used in fully local layers, in head order.
    /// The identity mask appears twice to fill eight heads.
    pub const FULL_LOCAL_LAYER: [MaskKind; 8] = [
        MaskKind::Prev(1),
        MaskKind::Prev(2),
        MaskKind::Next(1),
        MaskKind::Next(2),
        MaskKind::Band(1),
        MaskKind::Band(2),
        MaskKind::Identity,
        MaskKind::Identity,
    ];

    pub fn validate(self) -> Result<Self> {
        match self {
            MaskKind::Prev(0) | MaskKind::Next(0) | MaskKind::Band(0) => {
                Err(Error::Config(format!("mask `{self}` needs an offset of at least 1")))
            }
            _ => Ok(self),
        }
    }

    /// Whether position `(i, j)` is kept.
    #[inline]
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            MaskKind::Prev(k) => i >= j && i - j == k,
            MaskKind::Next(k) => j >= i && j - i == k,
            MaskKind::Band(k) => i.abs_diff(j) <= k,
            MaskKind::Identity => i == j,
        }
    }

    /// Largest `|i - j|` this kind can keep.
    pub fn reach(self) -> usize {
        match self {
            MaskKind::Prev(k) | MaskKind::Next(k) | MaskKind::Band(k) => k,
            MaskKind::Identity => 0,
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::Prev(k) => write!(f, "prev{k}"),
            MaskKind::Next(k) => write!(f, "next{k}"),
            MaskKind::Band(k) => write!(f, "band{k}"),
            MaskKind::Identity => f.write_str("identity"),
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(MaskKind::Identity);
        }
        let (ctor, rest): (fn(usize) -> MaskKind, &str) = if let Some(r) = s.strip_prefix("prev") {
            (MaskKind::Prev, r)
        } else if let Some(r) = s.strip_prefix("next") {
            (MaskKind::Next, r)
        } else if let Some(r) = s.strip_prefix("band") {
            (MaskKind::Band, r)
        } else {
            return Err(Error::UnknownMask(s.to_string()));
        };
        if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::UnknownMask(s.to_string()));
        }
        let k: usize = rest.parse().map_err(|_| Error::UnknownMask(s.to_string()))?;
        ctor(k).validate()
    }
}

impl Serialize for MaskKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A `T×T` 0/1 matrix generated from a [`MaskKind`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    kind: MaskKind,
    size: usize,
    bits: Vec<bool>,
}

/// Builds the `size × size` mask for `kind`.
///
/// Offsets at or beyond `size` produce a valid all-zero mask for `prev`/`next`.
pub fn make_mask(kind: MaskKind, size: usize) -> Result<Mask> {
    let kind = kind.validate()?;
    if size == 0 {
        return Err(Error::Contract("mask size must be at least 1".into()));
    }
    if matches!(kind, MaskKind::Prev(k) | MaskKind::Next(k) if k >= size) {
        log::debug!("mask {kind} over {size} tokens is all zeros");
    }
    let mut bits = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            bits[i * size + j] = kind.allows(i, j);
        }
    }
    Ok(Mask { kind, size, bits })
}

impl Mask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn row_support(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.size).filter(move |&j| self.get(i, j))
    }

    pub fn ones_in_row(&self, i: usize) -> usize {
        self.row_support(i).count()
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(self.size, self.size, |i, j| if self.get(i, j) { T::one() } else { T::zero() })
    }

    /// Elementwise `self ⊙ m`. Multiplication by exact 0/1 introduces no rounding.
    pub fn apply<T: Scalar>(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        if m.shape() != (self.size, self.size) {
            return Err(Error::shape("mask apply", (self.size, self.size), m.shape()));
        }
        Ok(Matrix::from_fn(self.size, self.size, |i, j| if self.get(i, j) { m.get(i, j) } else { T::zero() }))
    }
}

/// Per-row union of the supports of `masks`.
pub fn union_support(masks: &[Mask]) -> Result<Vec<BTreeSet<usize>>> {
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let size = first.size;
    if let Some(bad) = masks.iter().find(|m| m.size != size) {
        return Err(Error::shape("union_support", (size, size), (bad.size, bad.size)));
    }
    Ok((0..size)
        .map(|i| masks.iter().flat_map(|m| m.row_support(i)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense(m: &Mask) -> Vec<Vec<u8>> {
        (0..m.size()).map(|i| (0..m.size()).map(|j| m.get(i, j) as u8).collect()).collect()
    }

    #[test]
    fn hand_examples() {
        assert_eq!(
            dense(&make_mask(MaskKind::Prev(1), 3).unwrap()),
            vec![vec![0, 0, 0], vec![1, 0, 0], vec![0, 1, 0]]
        );
        assert_eq!(
            dense(&make_mask(MaskKind::Band(1), 3).unwrap()),
            vec![vec![1, 1, 0], vec![1, 1, 1], vec![0, 1, 1]]
        );
        assert_eq!(dense(&make_mask(MaskKind::Identity, 2).unwrap()), vec![vec![1, 0], vec![0, 1]]);
        let next2 = make_mask(MaskKind::Next(2), 4).unwrap();
        let ones: Vec<(usize, usize)> =
            (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).filter(|&(i, j)| next2.get(i, j)).collect();
        assert_eq!(ones, vec![(0, 2), (1, 3)]);
    }

    #[test]
    fn offset_beyond_size_is_all_zero() {
        let m = make_mask(MaskKind::Prev(5), 3).unwrap();
        assert!((0..3).all(|i| m.ones_in_row(i) == 0));
        assert!(make_mask(MaskKind::Band(0), 3).is_err());
        assert!(make_mask(MaskKind::Identity, 0).is_err());
    }

    #[test]
    fn names_round_trip() {
        for name in ["prev1", "prev2", "next1", "next2", "band1", "band2", "band6", "identity"] {
            let kind: MaskKind = name.parse().unwrap();
            assert_eq!(kind.to_string(), name);
        }
        assert!("band-1".parse::<MaskKind>().is_err());
        assert!("prev0".parse::<MaskKind>().is_err());
        assert!("diag".parse::<MaskKind>().is_err());
    }

    #[test]
    fn union_examples() {
        let t = 3;
        let trio: Vec<Mask> = [MaskKind::Prev(1), MaskKind::Next(1), MaskKind::Identity]
            .iter()
            .map(|&k| make_mask(k, t).unwrap())
            .collect();
        let band = union_support(&[make_mask(MaskKind::Band(1), t).unwrap()]).unwrap();
        assert_eq!(union_support(&trio).unwrap(), band);

        let id = union_support(&[make_mask(MaskKind::Identity, 3).unwrap()]).unwrap();
        let expect: Vec<BTreeSet<usize>> = (0..3).map(|i| BTreeSet::from([i])).collect();
        assert_eq!(id, expect);

        assert!(union_support(&[make_mask(MaskKind::Identity, 3).unwrap(), make_mask(MaskKind::Identity, 4).unwrap()])
            .is_err());
    }

    #[test]
    fn union_of_prev_next_identity_family_is_band2() {
        let t = 10;
        let all: Vec<Mask> = MaskKind::FULL_LOCAL_LAYER[..7].iter().map(|&k| make_mask(k, t).unwrap()).collect();
        // enumerate band-2 independently of `allows`
        let expect: Vec<BTreeSet<usize>> = (0..t as i64)
            .map(|i| ((i - 2).max(0)..=(i + 2).min(t as i64 - 1)).map(|j| j as usize).collect())
            .collect();
        assert_eq!(union_support(&all).unwrap(), expect);
    }

    proptest! {
        #[test]
        fn family_invariants(k in 1usize..6, t in 1usize..20) {
            let prev = make_mask(MaskKind::Prev(k), t).unwrap();
            let next = make_mask(MaskKind::Next(k), t).unwrap();
            let id = make_mask(MaskKind::Identity, t).unwrap();
            let band = make_mask(MaskKind::Band(k), t).unwrap();
            for i in 0..t {
                prop_assert!(band.get(i, i));
                prop_assert!(band.ones_in_row(i) <= 2 * k + 1);
                prop_assert!(prev.ones_in_row(i) <= 1);
                prop_assert!(next.ones_in_row(i) <= 1);
                prop_assert!(id.ones_in_row(i) == 1);
                for j in 0..t {
                    prop_assert_eq!(band.get(i, j), band.get(j, i));
                    if prev.get(i, j) || next.get(i, j) || id.get(i, j) {
                        prop_assert!(band.get(i, j));
                    }
                }
            }
        }
    }
}
