//! Exact set algebra over episode-local class universes.
//!
//! A [`LabelSet`] is a bitmask over a universe of `k <= 16` classes. The
//! canonical order (ascending cardinality, then ascending mask) fixes both the
//! fold order used when composing subset embeddings and decoder tie-breaking.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

/// Largest supported universe. The whole subset lattice (at most 2^16 sets)
/// must stay enumerable for exhaustive decoding.
pub const MAX_UNIVERSE: usize = 16;

/// A subset of an episode's `k` classes. Bit `i` set means class `i` is present.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct LabelSet {
    mask: u32,
    universe: u8,
}

impl LabelSet {
    pub fn new(mask: u32, universe_size: usize) -> Result<Self> {
        if universe_size == 0 || universe_size > MAX_UNIVERSE {
            return invalid_arg(format!(
                "universe size {universe_size} outside 1..={MAX_UNIVERSE}"
            ));
        }
        if u64::from(mask) >= 1u64 << universe_size {
            return invalid_arg(format!(
                "mask {mask:#b} does not fit a universe of {universe_size}"
            ));
        }
        Ok(Self {
            mask,
            universe: universe_size as u8,
        })
    }

    pub fn empty(universe_size: usize) -> Result<Self> {
        Self::new(0, universe_size)
    }

    pub fn singleton(index: usize, universe_size: usize) -> Result<Self> {
        if index >= universe_size {
            return invalid_arg(format!("class {index} outside universe {universe_size}"));
        }
        Self::new(1 << index, universe_size)
    }

    pub fn from_elements(elements: &[usize], universe_size: usize) -> Result<Self> {
        let mut mask = 0u32;
        for &e in elements {
            if e >= universe_size {
                return invalid_arg(format!("class {e} outside universe {universe_size}"));
            }
            mask |= 1 << e;
        }
        Self::new(mask, universe_size)
    }

    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn universe_size(&self) -> usize {
        self.universe as usize
    }

    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn contains(&self, index: usize) -> bool {
        index < 32 && self.mask & (1 << index) != 0
    }

    /// Indices of the classes present, ascending.
    pub fn canonical_elements(&self) -> Vec<usize> {
        (0..self.universe_size())
            .filter(|&i| self.mask & (1 << i) != 0)
            .collect()
    }

    /// True iff every class of `self` is also in `other`.
    pub fn is_subset(&self, other: &LabelSet) -> Result<bool> {
        self.check_same_universe(other)?;
        Ok(self.mask & !other.mask == 0)
    }

    pub fn union(&self, other: &LabelSet) -> Result<LabelSet> {
        self.check_same_universe(other)?;
        Ok(LabelSet {
            mask: self.mask | other.mask,
            universe: self.universe,
        })
    }

    /// Position-wise comparison in canonical order: cardinality, then mask.
    pub fn canonical_cmp(&self, other: &LabelSet) -> Ordering {
        (self.len(), self.mask).cmp(&(other.len(), other.mask))
    }

    fn check_same_universe(&self, other: &LabelSet) -> Result<()> {
        if self.universe != other.universe {
            return invalid_arg(format!(
                "universe mismatch: {} vs {}",
                self.universe, other.universe
            ));
        }
        Ok(())
    }
}

impl PartialOrd for LabelSet {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for LabelSet {
    fn cmp(&self, other: &Self) -> Ordering {
        self.universe
            .cmp(&other.universe)
            .then_with(|| self.canonical_cmp(other))
    }
}

/// Renders as a sorted bracket list, e.g. `[0,2,4]`.
impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, e) in self.canonical_elements().into_iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{e}")?;
        }
        f.write_str("]")
    }
}

/// Parses `"[0,2]@5"` style strings: the bracket list followed by `@k`.
impl FromStr for LabelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (list, k) = s
            .trim()
            .split_once('@')
            .ok_or_else(|| Error::InvalidArgument(format!("missing universe size in `{s}`")))?;
        let k: usize = k
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad universe size in `{s}`")))?;
        let inner = list
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| Error::InvalidArgument(format!("expected bracket list in `{s}`")))?;
        let elements = inner
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad class index `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSet::from_elements(&elements, k)
    }
}

/// All nonempty subsets of a `k`-class universe with at most `max_size`
/// members, in canonical order.
pub fn enumerate_label_sets(k: usize, max_size: usize) -> Result<Vec<LabelSet>> {
    if k == 0 || k > MAX_UNIVERSE {
        return invalid_arg(format!("k = {k} outside 1..={MAX_UNIVERSE}"));
    }
    if max_size == 0 || max_size > k {
        return invalid_arg(format!("max_size = {max_size} outside 1..={k}"));
    }
    let mut sets: Vec<LabelSet> = (1u32..(1u32 << k))
        .filter(|m| m.count_ones() as usize <= max_size)
        .map(|mask| LabelSet {
            mask,
            universe: k as u8,
        })
        .collect();
    sets.sort_by(LabelSet::canonical_cmp);
    Ok(sets)
}

/// Number of nonempty subsets of size at most `max_size`.
pub fn lattice_size(k: usize, max_size: usize) -> usize {
    (1..=max_size.min(k)).map(|l| binomial(k, l)).sum()
}

pub fn binomial(n: usize, r: usize) -> usize {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    (0..r).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// A sampled task instance: `k` distinct catalog classes in canonical order,
/// plus the exemplar used as each class's reference example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub class_ids: Vec<usize>,
    pub reference_exemplar_ids: Vec<usize>,
}

impl Episode {
    pub fn new(class_ids: Vec<usize>, reference_exemplar_ids: Vec<usize>) -> Result<Self> {
        if class_ids.is_empty() || class_ids.len() > MAX_UNIVERSE {
            return invalid_arg(format!("episode of {} classes", class_ids.len()));
        }
        if class_ids.len() != reference_exemplar_ids.len() {
            return invalid_arg("one reference exemplar per class required");
        }
        let distinct: HashSet<_> = class_ids.iter().collect();
        if distinct.len() != class_ids.len() {
            return invalid_arg("episode classes must be distinct");
        }
        Ok(Self {
            class_ids,
            reference_exemplar_ids,
        })
    }

    pub fn k(&self) -> usize {
        self.class_ids.len()
    }

    /// Catalog ids of the classes in `t`, in canonical order.
    pub fn classes_of(&self, t: &LabelSet) -> Vec<usize> {
        t.canonical_elements()
            .into_iter()
            .map(|i| self.class_ids[i])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(elements: &[usize]) -> LabelSet {
        LabelSet::from_elements(elements, 5).unwrap()
    }

    #[test]
    fn lattice_counts() {
        assert_eq!(enumerate_label_sets(5, 3).unwrap().len(), 25);
        assert_eq!(enumerate_label_sets(5, 1).unwrap().len(), 5);
        assert_eq!(enumerate_label_sets(6, 3).unwrap().len(), 41);
        for k in 1..=10 {
            for max in 1..=k {
                let expected: usize = (1..=max).map(|l| binomial(k, l)).sum();
                assert_eq!(enumerate_label_sets(k, max).unwrap().len(), expected);
                assert_eq!(lattice_size(k, max), expected);
            }
        }
    }

    #[test]
    fn enumeration_range_errors() {
        assert!(enumerate_label_sets(0, 1).is_err());
        assert!(enumerate_label_sets(17, 1).is_err());
        assert!(enumerate_label_sets(5, 0).is_err());
        assert!(enumerate_label_sets(5, 6).is_err());
        assert_eq!(enumerate_label_sets(16, 1).unwrap().len(), 16);
    }

    #[test]
    fn canonical_order_is_strict() {
        let sets = enumerate_label_sets(7, 4).unwrap();
        for w in sets.windows(2) {
            assert_eq!(w[0].canonical_cmp(&w[1]), Ordering::Less);
        }
        let singles: Vec<_> = enumerate_label_sets(5, 1).unwrap();
        assert_eq!(singles[0], set(&[0]));
        assert_eq!(singles[4], set(&[4]));
    }

    #[test]
    fn elements() {
        assert_eq!(LabelSet::new(0b00101, 5).unwrap().canonical_elements(), vec![0, 2]);
        assert!(LabelSet::new(0, 5).unwrap().canonical_elements().is_empty());
        assert_eq!(
            LabelSet::new(0b11111, 5).unwrap().canonical_elements(),
            vec![0, 1, 2, 3, 4]
        );
        assert!(LabelSet::new(0b100000, 5).is_err());
    }

    #[test]
    fn subset_and_union() {
        assert!(set(&[1]).is_subset(&set(&[1, 3])).unwrap());
        assert!(!set(&[2]).is_subset(&set(&[1, 3])).unwrap());
        assert!(set(&[2, 4]).is_subset(&set(&[2, 4])).unwrap());
        assert_eq!(set(&[1]).union(&set(&[2])).unwrap(), set(&[1, 2]));
        let a = set(&[0, 3]);
        assert_eq!(a.union(&a).unwrap(), a);
        assert_eq!(a.union(&LabelSet::empty(5).unwrap()).unwrap(), a);
        let other = LabelSet::from_elements(&[1], 6).unwrap();
        assert!(a.union(&other).is_err());
        assert!(a.is_subset(&other).is_err());
    }

    #[test]
    fn display_and_parse() {
        let t = set(&[0, 2, 4]);
        assert_eq!(t.to_string(), "[0,2,4]");
        assert_eq!("[0,2,4]@5".parse::<LabelSet>().unwrap(), t);
        assert_eq!("[]@3".parse::<LabelSet>().unwrap(), LabelSet::empty(3).unwrap());
        assert!("[0,9]@5".parse::<LabelSet>().is_err());
        assert!("0,1".parse::<LabelSet>().is_err());
    }

    #[test]
    fn episode_validation() {
        assert!(Episode::new(vec![3, 7, 9], vec![0, 0, 1]).is_ok());
        assert!(Episode::new(vec![3, 3], vec![0, 1]).is_err());
        assert!(Episode::new(vec![3, 4], vec![0]).is_err());
        let ep = Episode::new(vec![10, 20, 30], vec![0, 0, 0]).unwrap();
        let t = LabelSet::from_elements(&[0, 2], 3).unwrap();
        assert_eq!(ep.classes_of(&t), vec![10, 30]);
    }

    proptest! {
        #[test]
        fn union_laws(a in 0u32..1024, b in 0u32..1024, c in 0u32..1024) {
            let (a, b, c) = (
                LabelSet::new(a, 10).unwrap(),
                LabelSet::new(b, 10).unwrap(),
                LabelSet::new(c, 10).unwrap(),
            );
            prop_assert_eq!(a.union(&b).unwrap(), b.union(&a).unwrap());
            prop_assert_eq!(
                a.union(&b).unwrap().union(&c).unwrap(),
                a.union(&b.union(&c).unwrap()).unwrap()
            );
            prop_assert_eq!(a.union(&a).unwrap(), a);
            prop_assert!(a.is_subset(&a.union(&b).unwrap()).unwrap());
        }

        #[test]
        fn mutual_subset_is_equality(a in 0u32..256, b in 0u32..256) {
            let (a, b) = (LabelSet::new(a, 8).unwrap(), LabelSet::new(b, 8).unwrap());
            let both = a.is_subset(&b).unwrap() && b.is_subset(&a).unwrap();
            prop_assert_eq!(both, a == b);
        }
    }
}
