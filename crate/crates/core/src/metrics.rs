//! Plan quality metrics: task balance (dispersion of per-layer task counts,
//! lower is better) and average layer distance (mean gap between adjacent
//! layers of every sub-network, higher is better).

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentPlan, Strategy};
use crate::depth_space::divisor_depths;
use crate::error::{Error, Result};

/// Denominator used in the task-balance standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divisor {
    /// `D - 1`. Matches the published table values.
    #[default]
    Sample,
    /// `D`, the formula read literally.
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub tb: f64,
    pub ald: f64,
    pub per_layer_counts: Vec<usize>,
    pub mean_count: f64,
}

impl PlanMetrics {
    pub fn of(plan: &AssignmentPlan, divisor: Divisor) -> Result<Self> {
        let usage = plan.usage();
        let total = plan.total_depth();
        Ok(PlanMetrics {
            tb: task_balance_with(plan, divisor),
            ald: average_layer_distance(plan)?,
            per_layer_counts: usage.counts().to_vec(),
            mean_count: usage.total() as f64 / total as f64,
        })
    }
}

/// Task balance with the default `D - 1` divisor.
pub fn task_balance(plan: &AssignmentPlan) -> f64 {
    task_balance_with(plan, Divisor::Sample)
}

/// Standard deviation of the per-layer task counts `t(i)` about their mean
/// `Σd / D`.
///
/// With [`Divisor::Sample`] and `D = 1` the denominator vanishes; the
/// single count has no spread, so 0 is returned (with a warning).
pub fn task_balance_with(plan: &AssignmentPlan, divisor: Divisor) -> f64 {
    let usage = plan.usage();
    let counts = usage.counts();
    let total = counts.len();
    let mean = usage.total() as f64 / total as f64;
    let sq: f64 = counts.iter().map(|&t| (t as f64 - mean).powi(2)).sum();
    let denom = match divisor {
        Divisor::Population => total,
        Divisor::Sample if total == 1 => {
            log::warn!("task balance over a single layer: D - 1 = 0, reporting 0");
            return 0.0;
        }
        Divisor::Sample => total - 1,
    };
    (sq / denom as f64).sqrt()
}

/// `Σ_d Σ_i (a_{i+1} - a_i) / Σ_d (d - 1)`.
pub fn average_layer_distance(plan: &AssignmentPlan) -> Result<f64> {
    let (num, z) = ald_parts(plan);
    if z == 0 {
        return Err(Error::ZeroNormalizer);
    }
    Ok(num as f64 / z as f64)
}

/// Numerator and normalizer `Z` of the average layer distance.
pub fn ald_parts(plan: &AssignmentPlan) -> (usize, usize) {
    plan.iter().fold((0, 0), |(num, z), (d, sn)| {
        (num + sn.span_sum(), z + d.saturating_sub(1))
    })
}

/// One row per strategy, scoring the plan over the divisor depths of `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub total_depth: usize,
    pub divisor: Divisor,
    pub rows: Vec<(Strategy, PlanMetrics)>,
}

impl MetricsTable {
    /// Scores every strategy. Prime and unit depths are rejected because
    /// all strategies coincide there.
    pub fn compute(total: usize, divisor: Divisor) -> Result<Self> {
        let set = divisor_depths(total)?;
        if set.len() <= 2 {
            return Err(Error::NotComposite(total));
        }
        let rows = Strategy::ALL
            .iter()
            .map(|&s| Ok((s, PlanMetrics::of(&s.assign(&set)?, divisor)?)))
            .collect::<Result<_>>()?;
        Ok(MetricsTable {
            total_depth: total,
            divisor,
            rows,
        })
    }

    pub fn get(&self, strategy: Strategy) -> Option<&PlanMetrics> {
        self.rows.iter().find(|(s, _)| *s == strategy).map(|(_, m)| m)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<12} {:>8} {:>8}\n", "strategy", "TB", "ALD");
        for (s, m) in &self.rows {
            let _ = writeln!(out, "{:<12} {:>8.4} {:>8.4}", s.title(), m.tb, m.ald);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,tb,ald\n");
        for (s, m) in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", s.name(), m.tb, m.ald);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{assign_head, assign_left, Strategy};
    use crate::depth_space::{divisor_depths, DepthSet};

    fn plan(s: Strategy, d: usize) -> AssignmentPlan {
        s.assign(&divisor_depths(d).unwrap()).unwrap()
    }

    #[test]
    fn table_values_at_twelve() {
        let expected = [
            (Strategy::Head, 1.78, 1.0),
            (Strategy::Seq, 0.49, 1.0),
            (Strategy::Left, 1.50, 2.0),
            (Strategy::MiddleLeft, 0.78, 2.0),
        ];
        for (s, tb, ald) in expected {
            let p = plan(s, 12);
            assert!((task_balance(&p) - tb).abs() < 0.005, "{s}: {}", task_balance(&p));
            assert_eq!(average_layer_distance(&p).unwrap(), ald, "{s}");
        }
        let opt = plan(Strategy::Optimal, 12);
        assert!((task_balance(&opt) - 0.49).abs() < 0.005);
        assert_eq!(ald_parts(&opt), (45, 22));
    }

    #[test]
    fn literal_divisor_differs() {
        let p = assign_left(&divisor_depths(12).unwrap()).unwrap();
        // sum of squared deviations is 74/3; sqrt((74/3)/12)
        let expected = (74.0f64 / 36.0).sqrt();
        assert!((task_balance_with(&p, Divisor::Population) - expected).abs() < 1e-12);
        assert!((task_balance_with(&p, Divisor::Population) - 1.434).abs() < 5e-4);
    }

    #[test]
    fn full_depth_only_plan_is_balanced() {
        let ds = DepthSet::custom(8, &[8]).unwrap();
        let p = assign_head(&ds);
        assert_eq!(task_balance(&p), 0.0);
        assert_eq!(average_layer_distance(&p).unwrap(), 1.0);
    }

    #[test]
    fn single_layer_edge_cases() {
        let p = plan(Strategy::Optimal, 1);
        assert_eq!(task_balance(&p), 0.0);
        assert_eq!(task_balance_with(&p, Divisor::Population), 0.0);
        assert!(matches!(average_layer_distance(&p), Err(Error::ZeroNormalizer)));
    }

    #[test]
    fn metrics_bundle() {
        let m = PlanMetrics::of(&plan(Strategy::Head, 12), Divisor::Sample).unwrap();
        assert_eq!(m.per_layer_counts, vec![6, 5, 4, 3, 2, 2, 1, 1, 1, 1, 1, 1]);
        assert!((m.mean_count - 28.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn table_rejects_prime_and_unit_depths() {
        assert!(matches!(
            MetricsTable::compute(13, Divisor::Sample),
            Err(Error::NotComposite(13))
        ));
        assert!(matches!(
            MetricsTable::compute(1, Divisor::Sample),
            Err(Error::NotComposite(1))
        ));
        let t = MetricsTable::compute(12, Divisor::Sample).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert!((t.get(Strategy::MiddleLeft).unwrap().tb - 0.7785).abs() < 1e-3);
        assert_eq!(t.to_csv().lines().count(), 6);
        assert!(t.to_text().contains("MiddleLeft"));
    }
}
