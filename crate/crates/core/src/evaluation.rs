//! Accuracy over every depth configuration of a model.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentPlan;
use crate::data::Example;
use crate::depth_space::{DepthGrid, Task};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, Parameters};
use crate::training::task_gates;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Fraction of exact-match sequences.
    pub seq: f64,
    /// Matching aligned positions over the longer length of each pair.
    pub tok: f64,
}

pub fn sequence_accuracy(predictions: &[Vec<u32>], references: &[Vec<u32>]) -> Result<Accuracy> {
    if predictions.len() != references.len() {
        return Err(Error::CountMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let exact = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    let (hits, positions) = predictions.iter().zip(references).fold((0, 0), |(h, n), (p, r)| {
        let same = p.iter().zip(r).filter(|(a, b)| a == b).count();
        (h + same, n + p.len().max(r.len()))
    });
    Ok(Accuracy {
        seq: exact as f64 / predictions.len() as f64,
        tok: if positions == 0 {
            1.0
        } else {
            hits as f64 / positions as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Score(Accuracy),
    /// Decoding failed; kept distinct from a genuine zero.
    Failed(String),
}

impl Cell {
    pub fn score(&self) -> Option<Accuracy> {
        match self {
            Cell::Score(a) => Some(*a),
            Cell::Failed(_) => None,
        }
    }
}

/// Accuracy per `(encoder depth, decoder depth)` task, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub checkpoint: String,
    pub strategy: String,
    pub dataset: String,
    pub enc_depths: Vec<usize>,
    pub dec_depths: Vec<usize>,
    pub cells: Vec<(Task, Cell)>,
}

impl EvalGrid {
    pub fn get(&self, task: Task) -> Option<&Cell> {
        self.cells.iter().find(|(t, _)| *t == task).map(|(_, c)| c)
    }

    pub fn seq_acc(&self, task: Task) -> Option<f64> {
        self.get(task).and_then(Cell::score).map(|a| a.seq)
    }

    /// Mean sequence accuracy over scored cells.
    pub fn mean_seq(&self) -> f64 {
        mean(self.cells.iter().filter_map(|(_, c)| c.score()).map(|a| a.seq))
    }

    pub fn mean_tok(&self) -> f64 {
        mean(self.cells.iter().filter_map(|(_, c)| c.score()).map(|a| a.tok))
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|(_, c)| c.score().is_none()).count()
    }

    /// `m,n,seq_acc,tok_acc` rows; failed cells carry `error` in both
    /// accuracy columns.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["m", "n", "seq_acc", "tok_acc"])?;
        for (t, c) in &self.cells {
            let (s, k) = match c {
                Cell::Score(a) => (format!("{}", a.seq), format!("{}", a.tok)),
                Cell::Failed(_) => ("error".into(), "error".into()),
            };
            csv.write_record([t.encoder.to_string(), t.decoder.to_string(), s, k])?;
        }
        csv.flush().map_err(|e| Error::io("<grid>", e))?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut cells = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::format("grid csv", "short row"));
            let num = |i: usize| -> Result<usize> {
                field(i)?.parse().map_err(|e| Error::format("grid csv", format!("{e}")))
            };
            let task = Task::new(num(0)?, num(1)?);
            let cell = if field(2)? == "error" {
                Cell::Failed("error".into())
            } else {
                let f = |i: usize| -> Result<f64> {
                    field(i)?.parse().map_err(|e| Error::format("grid csv", format!("{e}")))
                };
                Cell::Score(Accuracy { seq: f(2)?, tok: f(3)? })
            };
            cells.push((task, cell));
        }
        let mut enc: Vec<usize> = cells.iter().map(|(t, _)| t.encoder).collect();
        let mut dec: Vec<usize> = cells.iter().map(|(t, _)| t.decoder).collect();
        enc.sort_unstable();
        enc.dedup();
        dec.sort_unstable();
        dec.dedup();
        Ok(EvalGrid {
            checkpoint: String::new(),
            strategy: String::new(),
            dataset: String::new(),
            enc_depths: enc,
            dec_depths: dec,
            cells,
        })
    }

    /// Sequence accuracy laid out with encoder depths as rows and decoder
    /// depths as columns.
    pub fn heatmap(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>6}", "m\\n");
        for n in &self.dec_depths {
            let _ = write!(out, "{n:>8}");
        }
        out.push('\n');
        for &m in &self.enc_depths {
            let _ = write!(out, "{m:>6}");
            for &n in &self.dec_depths {
                let cell = match self.get(Task::new(m, n)) {
                    Some(Cell::Score(a)) => format!("{:.3}", a.seq),
                    Some(Cell::Failed(_)) => "err".into(),
                    None => "-".into(),
                };
                let _ = write!(out, "{cell:>8}");
            }
            out.push('\n');
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Labels attached to a grid for reporting.
#[derive(Debug, Clone, Default)]
pub struct GridLabels {
    pub checkpoint: String,
    pub dataset: String,
}

fn score_task(
    params: &Parameters,
    task: Task,
    enc: &AssignmentPlan,
    dec: &AssignmentPlan,
    test: &[Example],
) -> Result<Accuracy> {
    let gates = task_gates(task, enc, dec)?;
    let limit = params.config().max_len.saturating_sub(1);
    let predictions = test
        .iter()
        .map(|ex| greedy_decode(params, &ex.source, &gates, limit))
        .collect::<Result<Vec<_>>>()?;
    let references: Vec<Vec<u32>> = test.iter().map(|e| e.target.clone()).collect();
    sequence_accuracy(&predictions, &references)
}

/// Greedy-decodes the test set at every task of the grid under the plans'
/// sub-networks. A failing cell is recorded and the rest still run.
pub fn evaluate_grid(
    params: &Parameters,
    grid: &DepthGrid,
    enc_plan: &AssignmentPlan,
    dec_plan: &AssignmentPlan,
    test: &[Example],
    labels: &GridLabels,
) -> EvalGrid {
    let cells = grid
        .tasks()
        .iter()
        .map(|&t| {
            let cell = match score_task(params, t, enc_plan, dec_plan, test) {
                Ok(a) => Cell::Score(a),
                Err(e) => {
                    log::warn!("cell {t} failed: {e}");
                    Cell::Failed(e.to_string())
                }
            };
            (t, cell)
        })
        .collect();
    EvalGrid {
        checkpoint: labels.checkpoint.clone(),
        strategy: if enc_plan.strategy() == dec_plan.strategy() {
            enc_plan.strategy().to_string()
        } else {
            format!("{}/{}", enc_plan.strategy(), dec_plan.strategy())
        },
        dataset: labels.dataset.clone(),
        enc_depths: grid.encoder().depths().to_vec(),
        dec_depths: grid.decoder().depths().to_vec(),
        cells,
    }
}

/// [`evaluate_grid`] applied to a model trained only at full depth: its
/// layers are forcibly removed without any adaptation.
pub fn vanilla_truncation_probe(
    pretrained: &Parameters,
    grid: &DepthGrid,
    enc_plan: &AssignmentPlan,
    dec_plan: &AssignmentPlan,
    test: &[Example],
    labels: &GridLabels,
) -> EvalGrid {
    evaluate_grid(pretrained, grid, enc_plan, dec_plan, test, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCell {
    pub task: Task,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a` in sequence accuracy.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub cells: Vec<DeltaCell>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_delta: f64,
    /// Cells where `b` is strictly better.
    pub wins: usize,
}

impl DeltaReport {
    pub fn winner_summary(&self) -> String {
        format!("{}/{}", self.wins, self.cells.len())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>6} {:>6} {:>8} {:>8} {:>8}  winner\n", "m", "n", "a", "b", "delta");
        let fmt = |v: Option<f64>| v.map_or("err".to_string(), |v| format!("{v:.4}"));
        for c in &self.cells {
            let winner = match c.delta {
                Some(d) if d > 0.0 => "b",
                Some(d) if d < 0.0 => "a",
                Some(_) => "=",
                None => "?",
            };
            let _ = writeln!(
                out,
                "{:>6} {:>6} {:>8} {:>8} {:>8}  {winner}",
                c.task.encoder,
                c.task.decoder,
                fmt(c.a),
                fmt(c.b),
                c.delta.map_or("err".into(), |d| format!("{d:+.4}"))
            );
        }
        let _ = writeln!(
            out,
            "mean a {:.4}  mean b {:.4}  mean delta {:+.4}  b wins {}",
            self.mean_a,
            self.mean_b,
            self.mean_delta,
            self.winner_summary()
        );
        out
    }
}

/// Cellwise `b - a` of sequence accuracy. Grids must cover the same tasks.
pub fn delta_report(a: &EvalGrid, b: &EvalGrid) -> Result<DeltaReport> {
    let tasks_a: Vec<Task> = a.cells.iter().map(|(t, _)| *t).collect();
    let tasks_b: Vec<Task> = b.cells.iter().map(|(t, _)| *t).collect();
    if tasks_a != tasks_b {
        return Err(Error::ShapeMismatch(format!(
            "{} cells vs {} cells or different tasks",
            tasks_a.len(),
            tasks_b.len()
        )));
    }
    let cells: Vec<DeltaCell> = a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|((t, ca), (_, cb))| {
            let (sa, sb) = (ca.score().map(|x| x.seq), cb.score().map(|x| x.seq));
            DeltaCell {
                task: *t,
                a: sa,
                b: sb,
                delta: sa.zip(sb).map(|(x, y)| y - x),
            }
        })
        .collect();
    let wins = cells.iter().filter(|c| c.delta.is_some_and(|d| d > 0.0)).count();
    Ok(DeltaReport {
        mean_a: a.mean_seq(),
        mean_b: b.mean_seq(),
        mean_delta: mean(cells.iter().filter_map(|c| c.delta)),
        wins,
        cells,
    })
}
