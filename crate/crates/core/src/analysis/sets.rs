//! Local, non-local syntactic and unrelated position sets for each token.

use std::collections::BTreeSet;

/// Window used when none is given.
pub const DEFAULT_WINDOW: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSets {
    pub i: usize,
    /// `[i - window, i + window]` clipped to the sentence; contains `i`.
    pub local: BTreeSet<usize>,
    /// Dependency neighbours (either direction) outside `local`.
    pub syntactic: BTreeSet<usize>,
    pub unrelated: BTreeSet<usize>,
}

pub fn token_sets(i: usize, t: usize, edges: &[(usize, usize)], window: usize) -> TokenSets {
    assert!(i < t, "position {i} outside sentence of length {t}");
    let local: BTreeSet<usize> = (i.saturating_sub(window)..=(i + window).min(t - 1)).collect();
    let syntactic: BTreeSet<usize> = edges
        .iter()
        .filter_map(|&(a, b)| match (a == i, b == i) {
            (true, false) => Some(b),
            (false, true) => Some(a),
            _ => None,
        })
        .filter(|j| !local.contains(j))
        .collect();
    let unrelated = (0..t).filter(|j| !local.contains(j) && !syntactic.contains(j)).collect();
    TokenSets { i, local, syntactic, unrelated }
}

pub fn all_token_sets(t: usize, edges: &[(usize, usize)], window: usize) -> Vec<TokenSets> {
    (0..t).map(|i| token_sets(i, t, edges, window)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn examples() {
        let s = token_sets(3, 6, &[(0, 3), (3, 5)], 2);
        assert_eq!((s.local, s.syntactic, s.unrelated), (set(&[1, 2, 3, 4, 5]), set(&[0]), set(&[])));
        let s = token_sets(0, 5, &[], 2);
        assert_eq!((s.local, s.syntactic, s.unrelated), (set(&[0, 1, 2]), set(&[]), set(&[3, 4])));
    }

    proptest! {
        #[test]
        fn sets_partition_positions(
            t in 1usize..20,
            raw in proptest::collection::vec((0usize..20, 0usize..20), 0..30),
            window in 0usize..4,
        ) {
            let edges: Vec<(usize, usize)> = raw.into_iter().map(|(a, b)| (a % t, b % t)).filter(|(a, b)| a != b).collect();
            for s in all_token_sets(t, &edges, window) {
                prop_assert!(s.local.contains(&s.i));
                prop_assert!(s.local.is_disjoint(&s.syntactic));
                prop_assert!(s.local.is_disjoint(&s.unrelated));
                prop_assert!(s.syntactic.is_disjoint(&s.unrelated));
                prop_assert_eq!(s.local.len() + s.syntactic.len() + s.unrelated.len(), t);
            }
        }
    }
}
