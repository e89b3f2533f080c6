//! Deterministic sub-network assignment.
//!
//! For every supported depth `d` of a `D`-layer stack, a strategy fixes
//! exactly which `d` layers run. The same sub-network is used in training
//! and at inference. Layer indices are 1-based throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::depth_space::DepthSet;
use crate::error::{Error, Result};

/// An ordered selection of layers `a_1 < a_2 < … < a_d` from a `D`-layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubNetwork {
    total_depth: usize,
    layers: Vec<usize>,
}

impl SubNetwork {
    /// Builds a sub-network from arbitrary 1-based indices; they are sorted
    /// and must be distinct and within `1..=total_depth`.
    pub fn new(total_depth: usize, mut layers: Vec<usize>) -> Result<Self> {
        layers.sort_unstable();
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > total_depth) {
            return Err(Error::DepthOutOfRange {
                depth: bad,
                total: total_depth,
            });
        }
        if layers.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format("sub-network", "duplicate layer index"));
        }
        Ok(SubNetwork { total_depth, layers })
    }

    pub fn full(total_depth: usize) -> Self {
        SubNetwork {
            total_depth,
            layers: (1..=total_depth).collect(),
        }
    }

    pub fn total_depth(&self) -> usize {
        self.total_depth
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    /// Per-layer on/off mask, position `i` describing layer `i + 1`.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total_depth];
        for &l in &self.layers {
            m[l - 1] = true;
        }
        m
    }

    /// Sum of gaps between adjacent selected layers.
    pub fn span_sum(&self) -> usize {
        self.layers.windows(2).map(|w| w[1] - w[0]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// First `d` layers.
    Head,
    /// Contiguous blocks, continuing past the layers earlier depths used.
    Seq,
    /// Leftmost layer of each chunk of `D / d` layers.
    Left,
    /// Layer `ceil(c/2) - 1` (0-based) of each chunk of `c = D / d` layers.
    MiddleLeft,
    /// Usage-balanced chunked selection with alive/dead bookkeeping.
    Optimal,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Head,
        Strategy::Seq,
        Strategy::Left,
        Strategy::MiddleLeft,
        Strategy::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Head => "head",
            Strategy::Seq => "seq",
            Strategy::Left => "left",
            Strategy::MiddleLeft => "middleleft",
            Strategy::Optimal => "optimal",
        }
    }

    /// Display name as used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Strategy::Head => "Head",
            Strategy::Seq => "Seq",
            Strategy::Left => "Left",
            Strategy::MiddleLeft => "MiddleLeft",
            Strategy::Optimal => "Optimal",
        }
    }

    pub fn assign(self, depth_set: &DepthSet) -> Result<AssignmentPlan> {
        match self {
            Strategy::Head => Ok(assign_head(depth_set)),
            Strategy::Seq => Ok(assign_seq(depth_set)),
            Strategy::Left => assign_left(depth_set),
            Strategy::MiddleLeft => assign_middle_left(depth_set),
            Strategy::Optimal => assign_optimal(depth_set),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_'))
            .collect::<String>()
            .to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == key)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// Maps every depth of a [`DepthSet`] to its sub-network under one strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentPlan {
    total_depth: usize,
    strategy: Strategy,
    map: BTreeMap<usize, SubNetwork>,
}

impl AssignmentPlan {
    fn from_map(total_depth: usize, strategy: Strategy, map: BTreeMap<usize, SubNetwork>) -> Self {
        debug_assert!(map.iter().all(|(&d, sn)| sn.depth() == d));
        AssignmentPlan {
            total_depth,
            strategy,
            map,
        }
    }

    pub fn total_depth(&self) -> usize {
        self.total_depth
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn depths(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.keys().copied()
    }

    pub fn get(&self, depth: usize) -> Option<&SubNetwork> {
        self.map.get(&depth)
    }

    /// Sub-network for `depth`, or a plan-mismatch error if the plan has none.
    pub fn sub_network(&self, depth: usize) -> Result<&SubNetwork> {
        self.map.get(&depth).ok_or_else(|| {
            Error::PlanMismatch(format!(
                "{} plan over {} layers has no depth {depth}",
                self.strategy, self.total_depth
            ))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &SubNetwork)> {
        self.map.iter().map(|(&d, sn)| (d, sn))
    }

    pub fn covers(&self, depth_set: &DepthSet) -> bool {
        self.total_depth == depth_set.total_depth() && self.map.keys().copied().eq(depth_set.depths().iter().copied())
    }

    /// How many sub-networks each layer participates in.
    pub fn usage(&self) -> LayerUsage {
        let mut usage = LayerUsage::new(self.total_depth);
        for sn in self.map.values() {
            usage.record(sn.layers());
        }
        usage
    }

    /// Structured-text form: a header with strategy and depth, then one
    /// `depth <d>: <layers…>` line per depth, ascending.
    pub fn to_text(&self) -> String {
        let mut out = format!("strategy: {}\ntotal_depth: {}\n", self.strategy, self.total_depth);
        for (d, sn) in &self.map {
            let layers: Vec<String> = sn.layers().iter().map(|l| l.to_string()).collect();
            out.push_str(&format!("depth {d}: {}\n", layers.join(" ")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::format("assignment plan", detail);
        let mut strategy = None;
        let mut total = None;
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(v) = line.strip_prefix("strategy:") {
                strategy = Some(v.trim().parse::<Strategy>()?);
            } else if let Some(v) = line.strip_prefix("total_depth:") {
                total = Some(
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| bad(format!("total_depth: {e}")))?,
                );
            } else if let Some(rest) = line.strip_prefix("depth ") {
                let total = total.ok_or_else(|| bad("depth line before total_depth".into()))?;
                let (d, layers) = rest
                    .split_once(':')
                    .ok_or_else(|| bad(format!("missing ':' in {line:?}")))?;
                let d: usize = d.trim().parse().map_err(|e| bad(format!("{line:?}: {e}")))?;
                let layers = layers
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("{line:?}: {e}")))?;
                let sn = SubNetwork::new(total, layers)?;
                if sn.depth() != d {
                    return Err(bad(format!("depth {d} lists {} layers", sn.depth())));
                }
                map.insert(d, sn);
            } else {
                return Err(bad(format!("unrecognized line {line:?}")));
            }
        }
        let strategy = strategy.ok_or_else(|| bad("missing strategy".into()))?;
        let total = total.ok_or_else(|| bad("missing total_depth".into()))?;
        Ok(AssignmentPlan::from_map(total, strategy, map))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerState {
    Alive,
    Dead,
}

/// Per-layer task counts `t(i)` and alive/dead states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerUsage {
    counts: Vec<usize>,
    states: Vec<LayerState>,
}

impl LayerUsage {
    pub fn new(total_depth: usize) -> Self {
        LayerUsage {
            counts: vec![0; total_depth],
            states: vec![LayerState::Alive; total_depth],
        }
    }

    /// Count for 1-based `layer`.
    pub fn count(&self, layer: usize) -> usize {
        self.counts[layer - 1]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn state(&self, layer: usize) -> LayerState {
        self.states[layer - 1]
    }

    pub fn is_alive(&self, layer: usize) -> bool {
        self.states[layer - 1] == LayerState::Alive
    }

    pub fn any_alive(&self) -> bool {
        self.states.contains(&LayerState::Alive)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Marks `layers` used: counts go up, states go dead.
    pub fn record(&mut self, layers: &[usize]) {
        for &l in layers {
            self.counts[l - 1] += 1;
            self.states[l - 1] = LayerState::Dead;
        }
    }

    pub fn revive_all(&mut self) {
        self.states.fill(LayerState::Alive);
    }
}

fn check_divisor(total: usize, d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::ZeroDepth);
    }
    if !total.is_multiple_of(d) {
        return Err(Error::NotADivisor { depth: d, total });
    }
    Ok(total / d)
}

fn chunked(depth_set: &DepthSet, strategy: Strategy, offset: impl Fn(usize) -> usize) -> Result<AssignmentPlan> {
    let total = depth_set.total_depth();
    let mut map = BTreeMap::new();
    for &d in depth_set.depths() {
        let chunk = check_divisor(total, d)?;
        let off = offset(chunk);
        let layers = (0..d).map(|k| 1 + k * chunk + off).collect();
        map.insert(
            d,
            SubNetwork {
                total_depth: total,
                layers,
            },
        );
    }
    Ok(AssignmentPlan::from_map(total, strategy, map))
}

pub fn assign_head(depth_set: &DepthSet) -> AssignmentPlan {
    let total = depth_set.total_depth();
    let map = depth_set
        .depths()
        .iter()
        .map(|&d| {
            (
                d,
                SubNetwork {
                    total_depth: total,
                    layers: (1..=d).collect(),
                },
            )
        })
        .collect();
    AssignmentPlan::from_map(total, Strategy::Head, map)
}

/// Contiguous blocks handed out in ascending depth order, each starting
/// where the previous one ended. A block that would run past layer `D` is
/// pulled back to end exactly at `D`, and the cursor then wraps to layer 1.
pub fn assign_seq(depth_set: &DepthSet) -> AssignmentPlan {
    let total = depth_set.total_depth();
    let mut map = BTreeMap::new();
    let mut cursor = 1;
    for &d in depth_set.depths() {
        let start = cursor.min(total + 1 - d);
        map.insert(
            d,
            SubNetwork {
                total_depth: total,
                layers: (start..start + d).collect(),
            },
        );
        cursor = start + d;
        if cursor > total {
            cursor = 1;
        }
    }
    AssignmentPlan::from_map(total, Strategy::Seq, map)
}

pub fn assign_left(depth_set: &DepthSet) -> Result<AssignmentPlan> {
    chunked(depth_set, Strategy::Left, |_| 0)
}

pub fn assign_middle_left(depth_set: &DepthSet) -> Result<AssignmentPlan> {
    chunked(depth_set, Strategy::MiddleLeft, middle_left_offset)
}

/// 0-based offset of the middle-left layer inside a chunk of `chunk` layers.
fn middle_left_offset(chunk: usize) -> usize {
    chunk.div_ceil(2) - 1
}

/// Usage-balanced assignment.
///
/// Depths are handled largest first. Every chunk of `D / d` layers gives
/// one alive layer; within a chunk the pick is the least used layer, then
/// the one farthest from the previous pick of the same sub-network, then
/// the one closest to the middle-left position, then the lowest index.
/// Picked layers die. A depth whose chunks are not all alive-covered waits
/// while smaller depths go first; when nothing fits, or every layer is
/// dead, all layers are revived.
pub fn assign_optimal(depth_set: &DepthSet) -> Result<AssignmentPlan> {
    Ok(optimal_with_usage(depth_set)?.0)
}

/// [`assign_optimal`] together with the final usage bookkeeping.
pub fn optimal_with_usage(depth_set: &DepthSet) -> Result<(AssignmentPlan, LayerUsage)> {
    let total = depth_set.total_depth();
    for &d in depth_set.depths() {
        check_divisor(total, d)?;
    }
    let mut usage = LayerUsage::new(total);
    let mut pending: Vec<usize> = depth_set.depths().iter().rev().copied().collect();
    let mut map = BTreeMap::new();
    let max_cycles = depth_set.len();
    let mut cycles = 0;

    while !pending.is_empty() {
        let placed = pending.iter().position(|&d| {
            if let Some(layers) = pick_chunked(&usage, total, d) {
                usage.record(&layers);
                map.insert(
                    d,
                    SubNetwork {
                        total_depth: total,
                        layers,
                    },
                );
                true
            } else {
                false
            }
        });
        if let Some(i) = placed {
            pending.remove(i);
        }
        if placed.is_none() || !usage.any_alive() {
            if !pending.is_empty() {
                cycles += 1;
                if cycles > max_cycles {
                    return Err(Error::AssignmentStalled {
                        pending,
                        cycles: max_cycles,
                    });
                }
            }
            usage.revive_all();
        }
    }
    Ok((AssignmentPlan::from_map(total, Strategy::Optimal, map), usage))
}

fn pick_chunked(usage: &LayerUsage, total: usize, d: usize) -> Option<Vec<usize>> {
    let chunk = total / d;
    let mut picked: Vec<usize> = Vec::with_capacity(d);
    for k in 0..d {
        let start = 1 + k * chunk;
        let middle = start + middle_left_offset(chunk);
        let prev = picked.last().copied();
        let best = (start..start + chunk).filter(|&l| usage.is_alive(l)).min_by_key(|&l| {
            let gap = prev.map_or(0, |p| l - p);
            (usage.count(l), std::cmp::Reverse(gap), l.abs_diff(middle), l)
        })?;
        picked.push(best);
    }
    Some(picked)
}

/// Inference-time pruning rule of LayerDrop: with pruning ratio
/// `p' = 1 - keep / total`, every layer whose index is a multiple of
/// `floor(1 / p')` is removed.
///
/// The floor makes the stride too small whenever `total / (total - keep)`
/// is not an integer, so the returned network can keep fewer than `keep`
/// layers; its [`SubNetwork::depth`] is the achieved depth. When
/// `floor(1 / p') == 1` (any `keep < total / 2`, including 0) nothing
/// survives and an [`Error::EmptyNetwork`] is returned.
pub fn layerdrop_inference_mask(total: usize, keep: usize) -> Result<SubNetwork> {
    if total == 0 {
        return Err(Error::ZeroDepth);
    }
    if keep > total {
        return Err(Error::DepthOutOfRange { depth: keep, total });
    }
    if keep == total {
        return Ok(SubNetwork::full(total));
    }
    // floor(1/p') = floor(total / (total - keep)), computed exactly.
    let stride = total / (total - keep);
    let layers: Vec<usize> = (1..=total).filter(|l| l % stride != 0).collect();
    if layers.is_empty() {
        return Err(Error::EmptyNetwork { total, requested: keep });
    }
    Ok(SubNetwork {
        total_depth: total,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_space::divisor_depths;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn set(d: usize) -> DepthSet {
        divisor_depths(d).unwrap()
    }

    fn layers(plan: &AssignmentPlan, d: usize) -> Vec<usize> {
        plan.get(d).unwrap().layers().to_vec()
    }

    #[test]
    fn head_takes_prefix() {
        let p = assign_head(&set(12));
        assert_eq!(layers(&p, 3), vec![1, 2, 3]);
        assert_eq!(layers(&p, 12), (1..=12).collect::<Vec<_>>());
    }

    #[test]
    fn seq_continues_cursor() {
        let p = assign_seq(&set(6));
        assert_eq!(layers(&p, 1), vec![1]);
        assert_eq!(layers(&p, 2), vec![2, 3]);
        assert_eq!(layers(&p, 3), vec![4, 5, 6]);
        assert_eq!(layers(&p, 6), (1..=6).collect::<Vec<_>>());
    }

    #[test]
    fn seq_pulls_back_overflowing_block() {
        let p = assign_seq(&set(12));
        assert_eq!(layers(&p, 4), vec![7, 8, 9, 10]);
        assert_eq!(layers(&p, 6), vec![7, 8, 9, 10, 11, 12]);
    }

    #[test]
    fn left_and_middle_left() {
        let l = assign_left(&set(12)).unwrap();
        assert_eq!(layers(&l, 2), vec![1, 7]);
        assert_eq!(layers(&l, 6), vec![1, 3, 5, 7, 9, 11]);
        let ml = assign_middle_left(&set(12)).unwrap();
        assert_eq!(layers(&ml, 1), vec![6]);
        assert_eq!(layers(&ml, 4), vec![2, 5, 8, 11]);
        assert_eq!(layers(&ml, 12), (1..=12).collect::<Vec<_>>());
    }

    #[test]
    fn optimal_d12_plan() {
        let (p, usage) = optimal_with_usage(&set(12)).unwrap();
        assert_eq!(layers(&p, 12), (1..=12).collect::<Vec<_>>());
        assert_eq!(layers(&p, 6), vec![1, 4, 6, 8, 10, 12]);
        assert_eq!(layers(&p, 4), vec![2, 5, 9, 11]);
        assert_eq!(layers(&p, 2), vec![3, 7]);
        assert_eq!(layers(&p, 3), vec![2, 8, 12]);
        assert_eq!(layers(&p, 1), vec![6]);
        assert_eq!(usage.total(), 28);
    }

    #[test]
    fn non_divisor_rejected() {
        let bogus = DepthSet::custom(12, &[1, 5, 12]).unwrap();
        for s in [Strategy::Left, Strategy::MiddleLeft, Strategy::Optimal] {
            assert!(matches!(
                s.assign(&bogus),
                Err(Error::NotADivisor { depth: 5, total: 12 })
            ));
        }
        // Head and Seq are defined for any depth.
        assert_eq!(layers(&assign_head(&bogus), 5), vec![1, 2, 3, 4, 5]);
        assert_eq!(layers(&assign_seq(&bogus), 5), vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn layerdrop_mask_examples() {
        assert_eq!(layerdrop_inference_mask(12, 6).unwrap().layers(), &[1, 3, 5, 7, 9, 11]);
        assert_eq!(layerdrop_inference_mask(12, 12).unwrap(), SubNetwork::full(12));
        assert_eq!(layerdrop_inference_mask(6, 4).unwrap().layers(), &[1, 2, 4, 5]);
        // p' = 1/4 -> floor(4) = 4 removes {4, 8, 12}: exact here.
        assert_eq!(layerdrop_inference_mask(12, 9).unwrap().depth(), 9);
        // p' = 5/12 -> floor(12/5) = 2 removes every even layer: 6 kept, not 7.
        assert_eq!(layerdrop_inference_mask(12, 7).unwrap().layers(), &[1, 3, 5, 7, 9, 11]);
        assert_eq!(layerdrop_inference_mask(12, 11).unwrap().depth(), 11);
    }

    #[test]
    fn layerdrop_mask_errors() {
        assert!(matches!(
            layerdrop_inference_mask(12, 0),
            Err(Error::EmptyNetwork { .. })
        ));
        assert!(matches!(
            layerdrop_inference_mask(12, 4),
            Err(Error::EmptyNetwork { .. })
        ));
        assert!(matches!(
            layerdrop_inference_mask(12, 13),
            Err(Error::DepthOutOfRange { .. })
        ));
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(s.title().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("Middle-Left".parse::<Strategy>().unwrap(), Strategy::MiddleLeft);
        assert!(matches!("bogus".parse::<Strategy>(), Err(Error::UnknownStrategy(_))));
    }

    #[test]
    fn plan_text_round_trip() {
        let p = assign_optimal(&set(12)).unwrap();
        let text = p.to_text();
        assert!(text.starts_with("strategy: optimal\ntotal_depth: 12\ndepth 1: 6\n"));
        assert_eq!(AssignmentPlan::from_text(&text).unwrap(), p);
        assert!(AssignmentPlan::from_text("strategy: optimal\ntotal_depth: 4\ndepth 2: 1\n").is_err());
    }

    proptest! {
        #[test]
        fn plans_are_valid_and_conserve_usage(total in 1usize..=48, which in 0usize..5) {
            let ds = set(total);
            let strategy = Strategy::ALL[which];
            let plan = strategy.assign(&ds).unwrap();
            prop_assert!(plan.covers(&ds));
            prop_assert_eq!(plan.get(total).unwrap(), &SubNetwork::full(total));
            for (d, sn) in plan.iter() {
                prop_assert_eq!(sn.depth(), d);
                prop_assert!(sn.layers().windows(2).all(|w| w[0] < w[1]));
                prop_assert!(sn.layers().iter().all(|&l| (1..=total).contains(&l)));
            }
            prop_assert_eq!(plan.usage().total(), ds.depth_sum());
            prop_assert_eq!(strategy.assign(&ds).unwrap(), plan);
        }

        #[test]
        fn chunked_strategies_take_one_layer_per_chunk(total in 1usize..=48, which in 2usize..5) {
            let ds = set(total);
            let plan = Strategy::ALL[which].assign(&ds).unwrap();
            for (d, sn) in plan.iter() {
                let chunk = total / d;
                let chunks: Vec<usize> = sn.layers().iter().map(|l| (l - 1) / chunk).collect();
                prop_assert_eq!(chunks, (0..d).collect::<Vec<_>>());
            }
        }
    }
}
