//! Makespan bin packing over bins of unequal speed.
//!
//! Every agent runs [`lpt_pack`] on its own copy of the global view, so all
//! tie-breaks are fixed by id order and the result is bit-identical wherever
//! the inputs are.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Largest instance the exhaustive oracle accepts.
pub const ORACLE_MAX_ITEMS: usize = 14;
pub const ORACLE_MAX_BINS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingInstance {
    /// Unit-speed seconds per item.
    pub item_weights: Vec<f64>,
    pub bin_speeds: Vec<f64>,
    /// `pinned[i] = Some(b)` fixes item i on bin b.
    #[serde(default)]
    pub pinned: Vec<Option<usize>>,
}

impl PackingInstance {
    pub fn new(item_weights: Vec<f64>, bin_speeds: Vec<f64>) -> Self {
        PackingInstance {
            item_weights,
            bin_speeds,
            pinned: Vec::new(),
        }
    }

    pub fn with_pins(mut self, pinned: Vec<Option<usize>>) -> Self {
        self.pinned = pinned;
        self
    }

    fn pin(&self, item: usize) -> Option<usize> {
        self.pinned.get(item).copied().flatten()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_speeds.is_empty() {
            return Err(Error::InvalidInstance("no bins".into()));
        }
        if self.bin_speeds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInstance("bin speeds must be positive".into()));
        }
        if self
            .item_weights
            .iter()
            .any(|w| !(*w > 0.0 && w.is_finite()))
        {
            return Err(Error::InvalidInstance(
                "item weights must be positive".into(),
            ));
        }
        if !self.pinned.is_empty() && self.pinned.len() != self.item_weights.len() {
            return Err(Error::InvalidInstance(
                "pin list length differs from item count".into(),
            ));
        }
        if self
            .pinned
            .iter()
            .flatten()
            .any(|&b| b >= self.bin_speeds.len())
        {
            return Err(Error::InvalidInstance(
                "item pinned to a missing bin".into(),
            ));
        }
        Ok(())
    }

    /// Predicted makespan of an item-to-bin map. Bin loads are summed in item
    /// order so that every solver reports comparable values.
    pub fn makespan_of(&self, bins: &[usize]) -> f64 {
        let mut loads = vec![0.0; self.bin_speeds.len()];
        for (item, &b) in bins.iter().enumerate() {
            loads[b] += self.item_weights[item];
        }
        loads
            .iter()
            .zip(&self.bin_speeds)
            .map(|(l, s)| l / s)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `bins[i]` is the bin of item i.
    pub bins: Vec<usize>,
    pub predicted_makespan: f64,
}

impl Assignment {
    fn from_bins(instance: &PackingInstance, bins: Vec<usize>) -> Self {
        let predicted_makespan = instance.makespan_of(&bins);
        Assignment {
            bins,
            predicted_makespan,
        }
    }

    /// Bit-level equality, including the makespan's representation.
    pub fn identical(&self, other: &Assignment) -> bool {
        self.bins == other.bins
            && self.predicted_makespan.to_bits() == other.predicted_makespan.to_bits()
    }
}

/// Longest processing time first: items by descending weight (lower id on
/// ties), each onto the bin whose finish time after placement is smallest
/// (lower bin id on ties). Pinned items are placed first.
pub fn lpt_pack(instance: &PackingInstance) -> Result<Assignment> {
    instance.validate()?;
    let n = instance.item_weights.len();
    let speeds = &instance.bin_speeds;
    let mut loads = vec![0.0; speeds.len()];
    let mut bins = vec![usize::MAX; n];

    for (item, bin) in bins.iter_mut().enumerate() {
        if let Some(b) = instance.pin(item) {
            *bin = b;
            loads[b] += instance.item_weights[item];
        }
    }

    let mut order: Vec<usize> = (0..n).filter(|&i| instance.pin(i).is_none()).collect();
    order.sort_by(|&a, &b| {
        instance.item_weights[b]
            .total_cmp(&instance.item_weights[a])
            .then(a.cmp(&b))
    });

    for item in order {
        let w = instance.item_weights[item];
        let mut best = 0;
        let mut best_finish = f64::INFINITY;
        for (b, (&load, &speed)) in loads.iter().zip(speeds).enumerate() {
            let finish = (load + w) / speed;
            if finish < best_finish {
                best = b;
                best_finish = finish;
            }
        }
        bins[item] = best;
        loads[best] += w;
    }
    Ok(Assignment::from_bins(instance, bins))
}

/// Exhaustive optimum by depth-first branch and bound.
///
/// Items are visited in id order and bins in id order, so the first optimal
/// map found is the lexicographically smallest one; branches whose partial
/// makespan already reaches the incumbent cannot improve on it and are cut.
/// Among equal-speed bins that are still empty only the lowest is tried,
/// which never discards the lexicographic minimum.
pub fn brute_force_pack(instance: &PackingInstance) -> Result<Assignment> {
    instance.validate()?;
    let items = instance.item_weights.len();
    let bins = instance.bin_speeds.len();
    if items > ORACLE_MAX_ITEMS || bins > ORACLE_MAX_BINS {
        return Err(Error::OracleTooLarge { items, bins });
    }
    let mut search = Search {
        inst: instance,
        loads: vec![0.0; bins],
        used: vec![0; bins],
        current: vec![0; items],
        best: None,
    };
    search.descend(0, 0.0);
    let (_, best) = search
        .best
        .expect("at least one complete assignment exists");
    Ok(Assignment::from_bins(instance, best))
}

struct Search<'a> {
    inst: &'a PackingInstance,
    loads: Vec<f64>,
    used: Vec<usize>,
    current: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
}

impl Search<'_> {
    fn descend(&mut self, item: usize, partial: f64) {
        if let Some((best, _)) = &self.best {
            if partial >= *best {
                return;
            }
        }
        if item == self.current.len() {
            self.best = Some((partial, self.current.clone()));
            return;
        }
        let w = self.inst.item_weights[item];
        let candidates: Vec<usize> = match self.inst.pin(item) {
            Some(b) => vec![b],
            None => (0..self.loads.len()).collect(),
        };
        for b in candidates {
            if self.inst.pin(item).is_none()
                && self.used[b] == 0
                && self.has_equivalent_empty_below(b)
            {
                continue;
            }
            let before = self.loads[b];
            self.loads[b] = before + w;
            self.used[b] += 1;
            self.current[item] = b;
            let finish = self.loads[b] / self.inst.bin_speeds[b];
            self.descend(item + 1, partial.max(finish));
            self.loads[b] = before;
            self.used[b] -= 1;
        }
    }

    /// An empty bin with the same speed and a lower id exists, and no later
    /// item is pinned to either bin (pins break the symmetry).
    fn has_equivalent_empty_below(&self, b: usize) -> bool {
        let pinned_to = |bin: usize| self.inst.pinned.iter().flatten().any(|&p| p == bin);
        if pinned_to(b) {
            return false;
        }
        (0..b).any(|c| {
            self.used[c] == 0 && self.inst.bin_speeds[c] == self.inst.bin_speeds[b] && !pinned_to(c)
        })
    }
}

/// Graham's bound for LPT on identical machines.
pub fn lpt_identical_bound(m: usize) -> f64 {
    4.0 / 3.0 - 1.0 / (3.0 * m as f64)
}

/// Speeds drawn for random oracle instances.
const ORACLE_SPEEDS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// A reproducible random instance with 1..=`max_items` items and
/// 1..=`max_bins` bins. Odd indices get unit-speed bins; even ones mix
/// speeds. Weights are drawn on a 0.01 grid in [0.01, 10].
pub fn random_instance(
    seed: u64,
    index: u64,
    max_items: usize,
    max_bins: usize,
) -> PackingInstance {
    let mut r = rng::substream(seed, Purpose::Oracle, index);
    let items = r.random_range(1..=max_items.max(1));
    let bins = r.random_range(1..=max_bins.max(1));
    let weights = (0..items)
        .map(|_| r.random_range(1..=1000) as f64 / 100.0)
        .collect();
    let speeds = if index % 2 == 1 {
        vec![1.0; bins]
    } else {
        (0..bins)
            .map(|_| ORACLE_SPEEDS[r.random_range(0..ORACLE_SPEEDS.len())])
            .collect()
    };
    PackingInstance::new(weights, speeds)
}

/// Heuristic versus exhaustive makespan on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub instance: PackingInstance,
    pub lpt_makespan: f64,
    pub optimal_makespan: f64,
    pub unit_speed: bool,
}

impl OracleComparison {
    pub fn ratio(&self) -> f64 {
        self.lpt_makespan / self.optimal_makespan
    }

    /// LPT never beats the optimum, and on identical bins it stays within
    /// Graham's bound.
    pub fn holds(&self) -> bool {
        let bins = self.instance.bin_speeds.len();
        self.lpt_makespan >= self.optimal_makespan
            && (!self.unit_speed
                || self.lpt_makespan
                    <= lpt_identical_bound(bins) * self.optimal_makespan * (1.0 + 1e-12))
    }
}

pub fn compare_with_oracle(instance: &PackingInstance) -> Result<OracleComparison> {
    let lpt = lpt_pack(instance)?;
    let opt = brute_force_pack(instance)?;
    Ok(OracleComparison {
        unit_speed: instance.bin_speeds.iter().all(|&s| s == 1.0),
        instance: instance.clone(),
        lpt_makespan: lpt.predicted_makespan,
        optimal_makespan: opt.predicted_makespan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(w: &[f64], s: &[f64]) -> PackingInstance {
        PackingInstance::new(w.to_vec(), s.to_vec())
    }

    #[test]
    fn lpt_two_unit_bins() {
        let i = inst(&[5.0, 4.0, 3.0, 3.0, 2.0, 2.0, 1.0], &[1.0, 1.0]);
        assert_eq!(lpt_pack(&i).unwrap().predicted_makespan, 10.0);
        assert_eq!(brute_force_pack(&i).unwrap().predicted_makespan, 10.0);
    }

    #[test]
    fn lpt_uneven_speeds() {
        let a = lpt_pack(&inst(&[6.0, 2.0], &[2.0, 1.0])).unwrap();
        assert_eq!(a.bins, vec![0, 1]);
        assert_eq!(a.predicted_makespan, 3.0);
    }

    #[test]
    fn lpt_single_bin() {
        let a = lpt_pack(&inst(&[1.0, 2.0, 4.0], &[2.0])).unwrap();
        assert_eq!(a.bins, vec![0, 0, 0]);
        assert_eq!(a.predicted_makespan, 3.5);
    }

    #[test]
    fn lpt_empty_bins_rejected() {
        assert!(matches!(
            lpt_pack(&inst(&[1.0], &[])),
            Err(Error::InvalidInstance(_))
        ));
    }

    #[test]
    fn oracle_small_cases() {
        assert_eq!(
            brute_force_pack(&inst(&[1.0, 1.0], &[1.0, 1.0]))
                .unwrap()
                .predicted_makespan,
            1.0
        );
        let a = brute_force_pack(&inst(&[3.0, 2.0, 2.0], &[1.0, 1.0])).unwrap();
        assert_eq!(a.predicted_makespan, 4.0);
        assert_eq!(a.bins, vec![0, 1, 1]);
        let a = brute_force_pack(&inst(&[4.0], &[1.0, 2.0])).unwrap();
        assert_eq!(a.bins, vec![1]);
        assert_eq!(a.predicted_makespan, 2.0);
    }

    #[test]
    fn oracle_guard() {
        let err = brute_force_pack(&inst(&[1.0; 15], &[1.0])).unwrap_err();
        assert_eq!(err, Error::OracleTooLarge { items: 15, bins: 1 });
        assert!(brute_force_pack(&inst(&[1.0], &[1.0; 5])).is_err());
    }

    #[test]
    fn pins_are_respected() {
        let i =
            inst(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0]).with_pins(vec![Some(1), Some(1), None, None]);
        for a in [lpt_pack(&i).unwrap(), brute_force_pack(&i).unwrap()] {
            assert_eq!(&a.bins[..2], &[1, 1]);
            assert_eq!(a.predicted_makespan, 2.0);
        }
        let bad = inst(&[1.0], &[1.0]).with_pins(vec![Some(3)]);
        assert!(lpt_pack(&bad).is_err());
    }

    /// Plain enumeration of every map, used to check the pruned search.
    fn enumerate(i: &PackingInstance) -> (f64, Vec<usize>) {
        let n = i.item_weights.len();
        let m = i.bin_speeds.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut code = vec![0usize; n];
        loop {
            let pinned_ok = (0..n).all(|k| i.pin(k).is_none_or(|b| b == code[k]));
            if pinned_ok {
                let ms = i.makespan_of(&code);
                if best.as_ref().is_none_or(|(b, _)| ms < *b) {
                    best = Some((ms, code.clone()));
                }
            }
            // odometer with the last item varying fastest -> lexicographic order
            let mut k = n;
            loop {
                if k == 0 {
                    return best.unwrap();
                }
                k -= 1;
                code[k] += 1;
                if code[k] < m {
                    break;
                }
                code[k] = 0;
            }
        }
    }

    #[test]
    fn branch_and_bound_matches_enumeration() {
        let cases = [
            inst(&[3.0, 1.0, 2.0, 2.0, 1.5], &[1.0, 1.0, 1.0]),
            inst(&[3.0, 1.0, 2.0, 2.0, 1.5, 0.5], &[1.0, 2.0, 1.0]),
            inst(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0]),
            inst(&[2.5, 0.7, 0.7, 3.1, 1.1], &[0.8, 2.4, 1.4, 1.0]),
            inst(&[1.0, 2.0, 3.0], &[1.0, 1.0]).with_pins(vec![None, Some(1), None]),
        ];
        for c in &cases {
            let (ms, bins) = enumerate(c);
            let a = brute_force_pack(c).unwrap();
            assert_eq!(a.predicted_makespan, ms);
            assert_eq!(a.bins, bins);
        }
    }
}
