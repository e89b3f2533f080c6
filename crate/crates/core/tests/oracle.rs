//! Exhaustive enumeration of chunked plans at small depths: every plan that
//! takes one layer from each of the `d` equal chunks for every depth `d`.

use std::collections::BTreeMap;

use flexdepth::assignment::{AssignmentPlan, Strategy};
use flexdepth::depth_space::divisor_depths;
use flexdepth::metrics::{ald_parts, task_balance};

/// All ways to pick one layer per chunk for depth `d` of `total`.
fn chunk_choices(total: usize, d: usize) -> Vec<Vec<usize>> {
    let c = total / d;
    let mut out = vec![Vec::new()];
    for chunk in 0..d {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (1..=c).map(move |k| {
                    let mut p = prefix.clone();
                    p.push(chunk * c + k);
                    p
                })
            })
            .collect();
    }
    out
}

/// (TB, ALD) of every chunked plan over the divisors of `total`.
fn enumerate(total: usize) -> Vec<(f64, f64)> {
    let set = divisor_depths(total).unwrap();
    let mut plans: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new()];
    for &d in set.depths() {
        let choices = chunk_choices(total, d);
        plans = plans
            .into_iter()
            .flat_map(|p| {
                choices.iter().map(move |c| {
                    let mut p = p.clone();
                    p.insert(d, c.clone());
                    p
                })
            })
            .collect();
    }
    plans
        .into_iter()
        .map(|map| {
            let mut text = format!("strategy: left\ntotal_depth: {total}\n");
            for (d, layers) in &map {
                let ls: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
                text.push_str(&format!("depth {d}: {}\n", ls.join(" ")));
            }
            let plan = AssignmentPlan::from_text(&text).unwrap();
            let (num, z) = ald_parts(&plan);
            (task_balance(&plan), num as f64 / z as f64)
        })
        .collect()
}

#[test]
fn chunked_strategies_lie_within_enumerated_bounds() {
    for total in [4, 6, 8] {
        let all = enumerate(total);
        let tb_min = all.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
        let tb_max = all.iter().map(|m| m.0).fold(0.0, f64::max);
        let ald_max = all.iter().map(|m| m.1).fold(0.0, f64::max);
        let set = divisor_depths(total).unwrap();
        for s in [Strategy::Left, Strategy::MiddleLeft, Strategy::Optimal] {
            let plan = s.assign(&set).unwrap();
            let tb = task_balance(&plan);
            let (num, z) = ald_parts(&plan);
            let ald = num as f64 / z as f64;
            assert!(
                all.iter()
                    .any(|m| (m.0 - tb).abs() < 1e-12 && (m.1 - ald).abs() < 1e-12),
                "{s} at D={total} is not a chunked plan"
            );
            assert!(tb >= tb_min - 1e-12 && tb <= tb_max + 1e-12);
            assert!(ald <= ald_max + 1e-12);
        }
        let optimal = task_balance(&Strategy::Optimal.assign(&set).unwrap());
        assert!(
            (optimal - tb_min).abs() < 1e-12,
            "D={total}: optimal TB {optimal} vs best chunked {tb_min}"
        );
    }
}

#[test]
fn contiguous_plans_have_unit_distance() {
    for total in [4, 6, 8, 12, 16] {
        let set = divisor_depths(total).unwrap();
        for s in [Strategy::Head, Strategy::Seq] {
            let plan = s.assign(&set).unwrap();
            let (num, z) = ald_parts(&plan);
            assert_eq!(num, z, "{s} at D={total}");
        }
    }
}
