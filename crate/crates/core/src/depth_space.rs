//! Reduced depth spaces: the positive divisors of a stack depth, and the
//! encoder × decoder grid of depth pairs that a flexible model supports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The divisors of a stack depth `D`, ascending.
///
/// Each divisor `d` corresponds to compressing every `D / d` consecutive
/// layers into one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DepthSet {
    total_depth: usize,
    depths: Vec<usize>,
}

impl DepthSet {
    /// An arbitrary subset of `1..=total` (e.g. a slice of the full LayerDrop
    /// space). Depths are sorted and deduplicated. Divisor-based strategies
    /// reject members that do not divide `total`.
    pub fn custom(total: usize, depths: &[usize]) -> Result<Self> {
        if total == 0 {
            return Err(Error::ZeroDepth);
        }
        let mut depths = depths.to_vec();
        depths.sort_unstable();
        depths.dedup();
        if let Some(&bad) = depths.iter().find(|&&d| d == 0 || d > total) {
            return Err(if bad == 0 {
                Error::ZeroDepth
            } else {
                Error::DepthOutOfRange { depth: bad, total }
            });
        }
        Ok(DepthSet {
            total_depth: total,
            depths,
        })
    }

    pub fn total_depth(&self) -> usize {
        self.total_depth
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn contains(&self, depth: usize) -> bool {
        self.depths.binary_search(&depth).is_ok()
    }

    /// `true` when the set is just `{1, D}`, i.e. `D` is prime.
    pub fn is_prime_depth(&self) -> bool {
        self.total_depth > 1 && self.depths.len() == 2
    }

    /// Sum of all depths in the set; equals the total layer-task incidence
    /// of any assignment plan built over it.
    pub fn depth_sum(&self) -> usize {
        self.depths.iter().sum()
    }
}

/// All positive divisors of `total`, ascending.
pub fn divisor_depths(total: usize) -> Result<DepthSet> {
    if total == 0 {
        return Err(Error::ZeroDepth);
    }
    let mut low = Vec::new();
    let mut high = Vec::new();
    let mut d = 1;
    while d * d <= total {
        if total.is_multiple_of(d) {
            low.push(d);
            if d != total / d {
                high.push(total / d);
            }
        }
        d += 1;
    }
    low.extend(high.into_iter().rev());
    Ok(DepthSet {
        total_depth: total,
        depths: low,
    })
}

/// One supported depth configuration: `encoder` layers by `decoder` layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Task {
    pub encoder: usize,
    pub decoder: usize,
}

impl Task {
    pub fn new(encoder: usize, decoder: usize) -> Self {
        Task { encoder, decoder }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.encoder, self.decoder)
    }
}

/// Cross product of encoder and decoder depth sets.
///
/// Tasks are ordered row-major: encoder depth ascending, then decoder depth
/// ascending. Training iterates tasks in this order, so it is part of the
/// reproducibility contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthGrid {
    encoder: DepthSet,
    decoder: DepthSet,
    tasks: Vec<Task>,
}

impl DepthGrid {
    /// Grid over explicit depth sets (e.g. a single fixed decoder depth).
    pub fn from_sets(encoder: DepthSet, decoder: DepthSet) -> Self {
        let tasks = encoder
            .depths()
            .iter()
            .flat_map(|&m| decoder.depths().iter().map(move |&n| Task::new(m, n)))
            .collect();
        DepthGrid {
            encoder,
            decoder,
            tasks,
        }
    }

    /// A grid containing only the listed tasks. Each task must use depths
    /// from the given sets; order is normalized to row-major.
    pub fn restricted(encoder: DepthSet, decoder: DepthSet, tasks: &[Task]) -> Result<Self> {
        let mut tasks = tasks.to_vec();
        for t in &tasks {
            if !encoder.contains(t.encoder) {
                return Err(Error::NotADivisor {
                    depth: t.encoder,
                    total: encoder.total_depth(),
                });
            }
            if !decoder.contains(t.decoder) {
                return Err(Error::NotADivisor {
                    depth: t.decoder,
                    total: decoder.total_depth(),
                });
            }
        }
        tasks.sort();
        tasks.dedup();
        Ok(DepthGrid {
            encoder,
            decoder,
            tasks,
        })
    }

    pub fn encoder(&self) -> &DepthSet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DepthSet {
        &self.decoder
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn full_task(&self) -> Task {
        Task::new(self.encoder.total_depth(), self.decoder.total_depth())
    }
}

/// `divisor_depths(encoder) ⊗ divisor_depths(decoder)`.
pub fn task_grid(encoder: usize, decoder: usize) -> Result<DepthGrid> {
    Ok(DepthGrid::from_sets(divisor_depths(encoder)?, divisor_depths(decoder)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn divisors_of_twelve_and_six() {
        assert_eq!(divisor_depths(12).unwrap().depths(), &[1, 2, 3, 4, 6, 12]);
        assert_eq!(divisor_depths(6).unwrap().depths(), &[1, 2, 3, 6]);
        assert_eq!(divisor_depths(1).unwrap().depths(), &[1]);
    }

    #[test]
    fn zero_depth_rejected() {
        assert!(matches!(divisor_depths(0), Err(Error::ZeroDepth)));
        assert!(matches!(task_grid(0, 3), Err(Error::ZeroDepth)));
    }

    #[test]
    fn primes_are_accepted() {
        let s = divisor_depths(13).unwrap();
        assert_eq!(s.depths(), &[1, 13]);
        assert!(s.is_prime_depth());
        assert!(!divisor_depths(12).unwrap().is_prime_depth());
        assert!(!divisor_depths(1).unwrap().is_prime_depth());
    }

    #[test]
    fn custom_sets_validate_range() {
        assert_eq!(DepthSet::custom(12, &[5, 1, 5]).unwrap().depths(), &[1, 5]);
        assert!(matches!(
            DepthSet::custom(12, &[13]),
            Err(Error::DepthOutOfRange { .. })
        ));
        assert!(matches!(DepthSet::custom(12, &[0]), Err(Error::ZeroDepth)));
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(task_grid(12, 6).unwrap().len(), 24);
        assert_eq!(task_grid(1, 1).unwrap().tasks(), &[Task::new(1, 1)]);
        let g = task_grid(4, 4).unwrap();
        let expected: Vec<Task> = [1, 2, 4]
            .iter()
            .flat_map(|&m| [1, 2, 4].iter().map(move |&n| Task::new(m, n)))
            .collect();
        assert_eq!(g.tasks(), expected.as_slice());
        assert_eq!(g.full_task(), Task::new(4, 4));
    }

    #[test]
    fn restricted_grid_validates_and_orders() {
        let e = divisor_depths(4).unwrap();
        let d = divisor_depths(2).unwrap();
        let g = DepthGrid::restricted(e.clone(), d.clone(), &[Task::new(4, 2), Task::new(1, 1)]).unwrap();
        assert_eq!(g.tasks(), &[Task::new(1, 1), Task::new(4, 2)]);
        assert!(DepthGrid::restricted(e, d, &[Task::new(3, 1)]).is_err());
    }

    proptest! {
        #[test]
        fn divisors_match_trial_division(total in 1usize..=64) {
            let set = divisor_depths(total).unwrap();
            let brute: Vec<usize> = (1..=total).filter(|d| total % d == 0).collect();
            prop_assert_eq!(set.depths(), brute.as_slice());
            prop_assert!(set.depths().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn grid_len_is_product(m in 1usize..=48, n in 1usize..=48) {
            let g = task_grid(m, n).unwrap();
            prop_assert_eq!(g.len(), divisor_depths(m).unwrap().len() * divisor_depths(n).unwrap().len());
            prop_assert!(g.tasks().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(g.tasks().iter().all(|t| m % t.encoder == 0 && n % t.decoder == 0));
        }
    }
}
