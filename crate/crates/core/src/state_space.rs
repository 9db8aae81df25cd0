//! Mixed-cardinality discrete state spaces: mixed-radix indexing, one-hot
//! minimal sufficient statistics, and cylinder sets.
//!
//! Coordinate 0 is the most significant digit of the mixed-radix rank, so
//! enumerating flat indices 0..size lists states in lexicographic order with
//! the first coordinate varying slowest. Unit values are 0-based, `0..q_i`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

/// Dense enumeration limit. Spaces larger than this are rejected at
/// construction rather than silently subsampled.
pub const DEFAULT_ENUM_CAP: usize = 1 << 20;

/// A finite product space `{0..q_1} x ... x {0..q_n}` with `q_i >= 2`.
#[derive(Clone, PartialEq, Eq)]
pub struct StateSpace {
    cards: Vec<u32>,
    strides: Vec<usize>,
    size: usize,
    onehot_offsets: Vec<usize>,
    onehot_dim: usize,
}

impl fmt::Debug for StateSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateSpace{:?}", self.cards)
    }
}

impl fmt::Display for StateSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.cards)
    }
}

impl StateSpace {
    pub fn new(cards: &[u32]) -> Result<Self> {
        Self::with_cap(cards, DEFAULT_ENUM_CAP)
    }

    /// The space of zero units: a single (empty) state. Useful as the hidden
    /// space of a model without hidden units.
    pub fn empty() -> Self {
        Self {
            cards: Vec::new(),
            strides: Vec::new(),
            size: 1,
            onehot_offsets: Vec::new(),
            onehot_dim: 0,
        }
    }

    /// Like [`StateSpace::new`] with an explicit enumeration cap.
    pub fn with_cap(cards: &[u32], cap: usize) -> Result<Self> {
        if cards.is_empty() {
            return Err(Error::Schema(
                "state space needs at least one unit (see StateSpace::empty)".into(),
            ));
        }
        for (i, &q) in cards.iter().enumerate() {
            if q < 2 {
                return Err(Error::Schema(format!(
                    "unit {i} has cardinality {q}, need >= 2"
                )));
            }
        }
        let mut size: usize = 1;
        for &q in cards {
            size = size
                .checked_mul(q as usize)
                .filter(|&s| s <= cap)
                .ok_or_else(|| {
                    Error::Resource(format!(
                        "state space {cards:?} exceeds the enumeration cap {cap}"
                    ))
                })?;
        }
        // strides[i] = product of cards after i; coordinate 0 most significant
        let n = cards.len();
        let mut strides = vec![1usize; n];
        for i in (0..n - 1).rev() {
            strides[i] = strides[i + 1] * cards[i + 1] as usize;
        }
        let mut onehot_offsets = Vec::with_capacity(n);
        let mut onehot_dim = 0usize;
        for &q in cards {
            onehot_offsets.push(onehot_dim);
            onehot_dim += q as usize - 1;
        }
        Ok(Self {
            cards: cards.to_vec(),
            strides,
            size,
            onehot_offsets,
            onehot_dim,
        })
    }

    /// `n` units all of cardinality `q`.
    pub fn uniform(n: usize, q: u32) -> Result<Self> {
        Self::new(&vec![q; n])
    }

    pub fn num_units(&self) -> usize {
        self.cards.len()
    }

    pub fn cards(&self) -> &[u32] {
        &self.cards
    }

    pub fn card(&self, unit: usize) -> u32 {
        self.cards[unit]
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Total one-hot dimension `sum_i (q_i - 1)`.
    pub fn one_hot_dim(&self) -> usize {
        self.onehot_dim
    }

    /// Start of unit `i`'s block inside a stacked one-hot vector.
    pub fn one_hot_offset(&self, unit: usize) -> usize {
        self.onehot_offsets[unit]
    }

    /// Flat-index step when `unit`'s value increases by one.
    pub fn stride(&self, unit: usize) -> usize {
        self.strides[unit]
    }

    fn check_state(&self, state: &[u32]) -> Result<()> {
        if state.len() != self.cards.len() {
            return Err(Error::Schema(format!(
                "state has {} coordinates, space has {}",
                state.len(),
                self.cards.len()
            )));
        }
        for (i, (&v, &q)) in state.iter().zip(&self.cards).enumerate() {
            if v >= q {
                return Err(Error::InvalidCoordinate {
                    coord: i,
                    value: v,
                    card: q,
                });
            }
        }
        Ok(())
    }

    /// Mixed-radix rank of `state`, coordinate 0 most significant.
    pub fn index(&self, state: &[u32]) -> Result<usize> {
        self.check_state(state)?;
        Ok(state
            .iter()
            .zip(&self.strides)
            .map(|(&v, &s)| v as usize * s)
            .sum())
    }

    /// Inverse of [`StateSpace::index`]. Panics if `idx >= size`.
    pub fn unindex(&self, idx: usize) -> Vec<u32> {
        assert!(idx < self.size, "index {idx} out of range for {self}");
        let mut out = Vec::with_capacity(self.cards.len());
        let mut rest = idx;
        for &s in &self.strides {
            out.push((rest / s) as u32);
            rest %= s;
        }
        out
    }

    /// All states in flat-index order.
    pub fn states(&self) -> impl Iterator<Item = Vec<u32>> + '_ {
        (0..self.size).map(|i| self.unindex(i))
    }

    /// Stacked one-hot statistics of `state`: block `i` is the indicator of
    /// `state[i]` over `{1, .., q_i - 1}` (all zero iff the value is 0).
    pub fn one_hot(&self, state: &[u32]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let mut col = vec![0.0; self.onehot_dim];
        for (i, &v) in state.iter().enumerate() {
            if v > 0 {
                col[self.onehot_offsets[i] + v as usize - 1] = 1.0;
            }
        }
        Ok(col)
    }

    /// Product space of `self` and `other` (states of `self` first).
    pub fn concat(&self, other: &StateSpace) -> Result<StateSpace> {
        let mut cards = self.cards.clone();
        cards.extend_from_slice(&other.cards);
        if cards.is_empty() {
            return Ok(StateSpace::empty());
        }
        StateSpace::new(&cards)
    }

    /// Space with units reordered so that new unit `i` is old unit `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<StateSpace> {
        if perm.len() != self.cards.len() {
            return Err(Error::Schema("permutation length mismatch".into()));
        }
        let cards: Vec<u32> = perm.iter().map(|&p| self.cards[p]).collect();
        StateSpace::new(&cards)
    }

    pub(crate) fn mismatch(&self, other: &StateSpace) -> Error {
        Error::SpaceMismatch {
            left: self.to_string(),
            right: other.to_string(),
        }
    }

    pub(crate) fn expect_same(&self, other: &StateSpace) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(self.mismatch(other))
        }
    }
}

/// A cylinder set: the states agreeing with `fixed` on the fixed coordinates,
/// arbitrary on the `free` ones. `fixed` and `free` partition the units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CylinderSet {
    fixed: BTreeMap<usize, u32>,
    free: BTreeSet<usize>,
    n_units: usize,
}

impl CylinderSet {
    pub fn new(n_units: usize, fixed: BTreeMap<usize, u32>, free: BTreeSet<usize>) -> Result<Self> {
        for &c in fixed.keys() {
            if free.contains(&c) {
                return Err(Error::Schema(format!(
                    "coordinate {c} listed both fixed and free"
                )));
            }
        }
        if fixed.len() + free.len() != n_units
            || fixed.keys().chain(free.iter()).any(|&c| c >= n_units)
        {
            return Err(Error::Schema(format!(
                "fixed {:?} and free {:?} do not partition 0..{}",
                fixed.keys().collect::<Vec<_>>(),
                free,
                n_units
            )));
        }
        Ok(Self {
            fixed,
            free,
            n_units,
        })
    }

    /// Convenience constructor from `(coord, value)` pairs; everything else free.
    pub fn from_fixed(n_units: usize, fixed: &[(usize, u32)]) -> Result<Self> {
        let map: BTreeMap<usize, u32> = fixed.iter().copied().collect();
        if map.len() != fixed.len() {
            return Err(Error::Schema("duplicate fixed coordinate".into()));
        }
        let free: BTreeSet<usize> = (0..n_units).filter(|c| !map.contains_key(c)).collect();
        Self::new(n_units, map, free)
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn fixed(&self) -> &BTreeMap<usize, u32> {
        &self.fixed
    }

    pub fn free(&self) -> &BTreeSet<usize> {
        &self.free
    }

    pub fn validate(&self, space: &StateSpace) -> Result<()> {
        if self.n_units != space.num_units() {
            return Err(Error::Schema(format!(
                "cylinder over {} units used on space {space}",
                self.n_units
            )));
        }
        for (&c, &v) in &self.fixed {
            if v >= space.card(c) {
                return Err(Error::InvalidCoordinate {
                    coord: c,
                    value: v,
                    card: space.card(c),
                });
            }
        }
        Ok(())
    }

    pub fn member_count(&self, space: &StateSpace) -> usize {
        self.free
            .iter()
            .map(|&c| space.card(c) as usize)
            .product()
    }

    pub fn contains(&self, state: &[u32]) -> bool {
        self.fixed.iter().all(|(&c, &v)| state[c] == v)
    }

    /// Flat indices of all member states, in increasing order.
    pub fn enumerate(&self, space: &StateSpace) -> Result<Vec<usize>> {
        self.validate(space)?;
        let free: Vec<usize> = self.free.iter().copied().collect();
        let mut state = vec![0u32; space.num_units()];
        for (&c, &v) in &self.fixed {
            state[c] = v;
        }
        let total = self.member_count(space);
        let mut out = Vec::with_capacity(total);
        let mut assignment = vec![0u32; free.len()];
        loop {
            for (k, &c) in free.iter().enumerate() {
                state[c] = assignment[k];
            }
            out.push(space.index(&state)?);
            // odometer over the free coordinates, last fastest
            let mut pos = free.len();
            loop {
                if pos == 0 {
                    out.sort_unstable();
                    return Ok(out);
                }
                pos -= 1;
                assignment[pos] += 1;
                if assignment[pos] < space.card(free[pos]) {
                    break;
                }
                assignment[pos] = 0;
            }
        }
    }

    /// Two cylinders are disjoint iff they disagree on a commonly fixed coordinate.
    pub fn is_disjoint_with(&self, other: &CylinderSet) -> bool {
        self.fixed
            .iter()
            .any(|(c, v)| other.fixed.get(c).map(|w| w != v).unwrap_or(false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent enumeration oracle: odometer over state tuples, last
    /// coordinate fastest, so position in the list equals the expected rank.
    fn enumerate_states(cards: &[u32]) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut state = vec![0u32; cards.len()];
        loop {
            out.push(state.clone());
            let mut pos = cards.len();
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                state[pos] += 1;
                if state[pos] < cards[pos] {
                    break;
                }
                state[pos] = 0;
            }
        }
    }

    #[test]
    fn index_zero_state() {
        let s = StateSpace::new(&[2, 2, 2]).unwrap();
        assert_eq!(s.index(&[0, 0, 0]).unwrap(), 0);
    }

    #[test]
    fn index_matches_enumeration_order() {
        for cards in [vec![3, 3], vec![2, 3], vec![2, 3, 2], vec![4, 2, 3]] {
            let s = StateSpace::new(&cards).unwrap();
            let all = enumerate_states(&cards);
            assert_eq!(all.len(), s.size());
            for (rank, state) in all.iter().enumerate() {
                assert_eq!(s.index(state).unwrap(), rank, "state {state:?}");
                assert_eq!(s.unindex(rank), *state);
            }
        }
        // the spec'd spot values
        let s = StateSpace::new(&[3, 3]).unwrap();
        assert_eq!(s.index(&[1, 0]).unwrap(), 3);
        let s = StateSpace::new(&[2, 3]).unwrap();
        assert_eq!(s.index(&[1, 2]).unwrap(), 5);
    }

    #[test]
    fn index_rejects_out_of_range() {
        let s = StateSpace::new(&[2, 3]).unwrap();
        let err = s.index(&[0, 3]).unwrap_err();
        match err {
            Error::InvalidCoordinate { coord, value, card } => {
                assert_eq!((coord, value, card), (1, 3, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_tiny_cardinalities_and_oversized_spaces() {
        assert!(StateSpace::new(&[1, 2]).is_err());
        assert!(StateSpace::new(&[]).is_err());
        assert!(matches!(
            StateSpace::with_cap(&[2; 21], 1 << 20),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn empty_space_has_one_state() {
        let e = StateSpace::empty();
        assert_eq!(e.size(), 1);
        assert_eq!(e.one_hot_dim(), 0);
        assert_eq!(e.index(&[]).unwrap(), 0);
        assert_eq!(e.unindex(0), Vec::<u32>::new());
        assert_eq!(e.one_hot(&[]).unwrap(), Vec::<f64>::new());
        let s = StateSpace::new(&[2, 3]).unwrap();
        assert_eq!(s.concat(&e).unwrap(), s);
    }

    /// Per-coordinate indicator builder, independent of `one_hot`.
    fn indicator_blocks(cards: &[u32], state: &[u32]) -> Vec<f64> {
        let mut v = Vec::new();
        for (i, &q) in cards.iter().enumerate() {
            for val in 1..q {
                v.push(if state[i] == val { 1.0 } else { 0.0 });
            }
        }
        v
    }

    #[test]
    fn one_hot_worked_example() {
        // blocks ([1,0],[0,0]) for x=(1,0) on {0,1,2}^2
        let s = StateSpace::new(&[3, 3]).unwrap();
        assert_eq!(s.one_hot(&[1, 0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_zero_state_and_mixed_cards() {
        let s = StateSpace::new(&[2, 4]).unwrap();
        assert_eq!(s.one_hot(&[0, 0]).unwrap(), vec![0.0; 4]);
        assert_eq!(
            s.one_hot(&[1, 3]).unwrap(),
            indicator_blocks(&[2, 4], &[1, 3])
        );
        assert_eq!(s.one_hot(&[1, 3]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_matches_independent_indicators_everywhere() {
        let cards = [3, 2, 4];
        let s = StateSpace::new(&cards).unwrap();
        for state in s.states() {
            assert_eq!(
                s.one_hot(&state).unwrap(),
                indicator_blocks(&cards, &state)
            );
        }
    }

    #[test]
    fn cylinder_one_dim() {
        let s = StateSpace::new(&[2, 2]).unwrap();
        let c = CylinderSet::from_fixed(2, &[(1, 0)]).unwrap();
        let got = c.enumerate(&s).unwrap();
        let want = vec![
            s.index(&[0, 0]).unwrap(),
            s.index(&[1, 0]).unwrap(),
        ];
        assert_eq!(got, want);
        assert_eq!(c.member_count(&s), 2);
    }

    #[test]
    fn cylinder_full_space() {
        let s = StateSpace::new(&[3, 3]).unwrap();
        let c = CylinderSet::from_fixed(2, &[]).unwrap();
        assert_eq!(c.enumerate(&s).unwrap(), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn cylinder_matches_filter_of_full_enumeration() {
        let s = StateSpace::new(&[2, 3, 2]).unwrap();
        let c = CylinderSet::from_fixed(3, &[(0, 1), (2, 0)]).unwrap();
        let got = c.enumerate(&s).unwrap();
        let want: Vec<usize> = s
            .states()
            .enumerate()
            .filter(|(_, st)| c.contains(st))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(got, want);
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn cylinder_rejects_overlapping_fixed_and_free() {
        let fixed: BTreeMap<usize, u32> = [(0, 1)].into_iter().collect();
        let free: BTreeSet<usize> = [0, 1].into_iter().collect();
        assert!(matches!(
            CylinderSet::new(2, fixed, free),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn cylinder_disjointness_agrees_with_enumeration() {
        let s = StateSpace::new(&[2, 3, 2]).unwrap();
        let cyls = [
            CylinderSet::from_fixed(3, &[(0, 0)]).unwrap(),
            CylinderSet::from_fixed(3, &[(0, 1)]).unwrap(),
            CylinderSet::from_fixed(3, &[(1, 2), (2, 0)]).unwrap(),
            CylinderSet::from_fixed(3, &[(0, 0), (1, 2)]).unwrap(),
        ];
        for a in &cyls {
            for b in &cyls {
                let ea: BTreeSet<usize> = a.enumerate(&s).unwrap().into_iter().collect();
                let eb: BTreeSet<usize> = b.enumerate(&s).unwrap().into_iter().collect();
                let empty_intersection = ea.intersection(&eb).next().is_none();
                assert_eq!(a.is_disjoint_with(b), empty_intersection);
            }
        }
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn small_space() -> impl Strategy<Value = StateSpace> {
        proptest::collection::vec(2u32..=5, 1..=6)
            .prop_filter("size cap", |c| {
                c.iter().map(|&q| q as usize).product::<usize>() <= 1 << 16
            })
            .prop_map(|c| StateSpace::new(&c).unwrap())
    }

    proptest! {
        #[test]
        fn index_unindex_round_trip(space in small_space()) {
            for i in 0..space.size() {
                prop_assert_eq!(space.index(&space.unindex(i)).unwrap(), i);
            }
        }

        #[test]
        fn one_hot_injective_with_correct_support(space in small_space()) {
            let mut seen = std::collections::HashSet::new();
            for state in space.states() {
                let oh = space.one_hot(&state).unwrap();
                let ones = oh.iter().filter(|&&x| x == 1.0).count();
                let nonzero_coords = state.iter().filter(|&&v| v != 0).count();
                prop_assert_eq!(ones, nonzero_coords);
                let key: Vec<u8> = oh.iter().map(|&x| x as u8).collect();
                prop_assert!(seen.insert(key), "one_hot collided");
            }
        }
    }
}
