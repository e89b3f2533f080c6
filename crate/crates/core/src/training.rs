//! Training loops: full-depth pretraining, sequence-level distillation,
//! multi-task fine-tuning over the depth grid, and the LayerDrop baseline.
//!
//! Every loop runs one optimizer update per step. Multi-task fine-tuning
//! draws a single batch per step, runs it through the sub-network of each
//! scheduled task and sums the task gradients before updating.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentPlan;
use crate::data::{Batch, Example};
use crate::depth_space::{DepthGrid, Task};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, init_params, loss_and_grad, GateVector, Gradients, ModelConfig, Parameters};

/// Learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup to `peak` over `warmup` steps, then decay with
    /// `peak * sqrt(warmup / step)`.
    InverseSqrt {
        peak: f64,
        warmup: usize,
    },
    Constant {
        rate: f64,
    },
}

impl Schedule {
    /// Rate at 1-based `step`.
    pub fn rate(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant { rate } => rate,
            Schedule::InverseSqrt { peak, warmup } => {
                let step = step.max(1) as f64;
                let warmup = warmup.max(1) as f64;
                if step < warmup {
                    peak * step / warmup
                } else {
                    peak * (warmup / step).sqrt()
                }
            }
        }
    }
}

/// Which depth tasks contribute gradients at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AccumulationPolicy {
    /// Every task in the grid.
    FullGrid,
    /// `n_enc × n_dec` tasks resampled every step; see [`sample_tasks`].
    SampledTasks { n_enc: usize, n_dec: usize },
    /// Every task, on a batch shrunk to `fraction` of the batch size.
    BatchFraction { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub policy: AccumulationPolicy,
    /// Adam moment decay rates.
    pub betas: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            schedule: Schedule::InverseSqrt {
                peak: 3e-3,
                warmup: 100,
            },
            seed: 1,
            policy: AccumulationPolicy::FullGrid,
            betas: (0.9, 0.98),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Schedule::InverseSqrt { warmup, .. } = self.schedule {
            if self.steps > 0 && warmup > self.steps {
                return bad(format!("warmup {warmup} exceeds steps {}", self.steps));
            }
        }
        if let AccumulationPolicy::BatchFraction { fraction } = self.policy {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return bad(format!("batch fraction {fraction} outside (0, 1]"));
            }
        }
        Ok(())
    }

    fn effective_batch(&self) -> usize {
        match self.policy {
            AccumulationPolicy::BatchFraction { fraction } => {
                ((self.batch_size as f64 * fraction).round() as usize).max(1)
            }
            _ => self.batch_size,
        }
    }
}

/// Adam with decoupled per-tensor moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &Parameters, betas: (f64, f64)) -> Self {
        let zeros = || params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Adam {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &Gradients, rate: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// One loss measurement: `task` is `m-n` for a depth task, `full` for
/// pretraining and `layerdrop` for sampled-gate passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub log: Vec<LogRow>,
    /// Forward/backward passes executed at each step.
    pub passes_per_step: Vec<usize>,
    /// Active (encoder, decoder) layer counts of every pass.
    pub active_layers: Vec<(usize, usize)>,
}

impl TrainOutcome {
    pub fn total_passes(&self) -> usize {
        self.passes_per_step.iter().sum()
    }

    pub fn write_log_csv(&self, mut w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(&mut w);
        for row in &self.log {
            csv.serialize(row)?;
        }
        csv.flush().map_err(|e| Error::io("<log>", e))?;
        Ok(())
    }

    pub fn save_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_log_csv(std::io::BufWriter::new(f))
    }

    /// Mean logged loss over the last `n` steps.
    pub fn final_loss(&self, n: usize) -> Option<f64> {
        let last = self.log.last()?.step;
        let rows: Vec<f64> = self.log.iter().filter(|r| r.step + n > last).map(|r| r.loss).collect();
        Some(rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

/// Seeded generators for the independent random streams of a run.
struct Streams {
    batches: ChaCha8Rng,
    tasks: ChaCha8Rng,
    gates: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Streams {
            batches: stream(1),
            tasks: stream(2),
            gates: stream(3),
        }
    }
}

struct Pass {
    label: String,
    batch: usize,
    gates: GateVector,
}

/// Shared step loop. `plan_step` decides how many batches to draw and which
/// gated passes to run on them; gradients of all passes are summed.
fn run_steps(
    mut params: Parameters,
    pool: &[Example],
    train: &TrainConfig,
    mut plan_step: impl FnMut(&mut Streams) -> Result<(usize, Vec<Pass>)>,
) -> Result<TrainOutcome> {
    train.validate()?;
    if train.steps > 0 && pool.is_empty() {
        return Err(Error::InvalidTrainConfig("no training examples".into()));
    }
    let mut streams = Streams::new(train.seed);
    let mut adam = Adam::new(&params, train.betas);
    let mut log = Vec::new();
    let mut passes_per_step = Vec::with_capacity(train.steps);
    let mut active_layers = Vec::new();
    let batch_size = train.effective_batch();

    for step in 1..=train.steps {
        let diverged = |e| Error::Diverged {
            step,
            source: Box::new(e),
        };
        let (n_batches, passes) = plan_step(&mut streams)?;
        let batches: Vec<Batch> = (0..n_batches)
            .map(|i| {
                let id = (step as u64) << 16 | i as u64;
                Batch::sample(id, pool, batch_size, &mut streams.batches)
            })
            .collect();
        let rate = train.schedule.rate(step);
        let mut total = Gradients::zeros_like(&params);
        for pass in &passes {
            let (loss, g) = loss_and_grad(&params, &batches[pass.batch], &pass.gates).map_err(diverged)?;
            total.add_assign(&g);
            active_layers.push((pass.gates.active_encoder(), pass.gates.active_decoder()));
            log.push(LogRow {
                step,
                task: pass.label.clone(),
                loss,
                rate,
            });
        }
        passes_per_step.push(passes.len());
        adam.update(&mut params, &total, rate);
        if !params.all_finite() {
            return Err(diverged(Error::NonFiniteLoss { batch: step as u64 }));
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        passes_per_step,
        active_layers,
    })
}

/// Trains `init` at full depth (all gates on).
pub fn train_full_depth(init: Parameters, data: &[Example], train: &TrainConfig) -> Result<TrainOutcome> {
    let gates = GateVector::all_on(init.config());
    run_steps(init, data, train, |_| {
        Ok((
            1,
            vec![Pass {
                label: "full".into(),
                batch: 0,
                gates: gates.clone(),
            }],
        ))
    })
}

/// Full-depth training from a fresh initialization seeded by `train.seed`.
pub fn pretrain(config: &ModelConfig, train: &TrainConfig, data: &[Example]) -> Result<TrainOutcome> {
    train_full_depth(init_params(config, train.seed)?, data, train)
}

/// Teacher-decoded training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillCorpus {
    pub examples: Vec<Example>,
    /// Sources whose decode came back empty and were dropped.
    pub excluded: usize,
}

impl DistillCorpus {
    /// Raw references used as-is (the no-distillation arm).
    pub fn from_references(examples: Vec<Example>) -> Self {
        DistillCorpus { examples, excluded: 0 }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Tab-separated `source<TAB>target` lines of space-separated ids.
    pub fn to_tsv(&self) -> String {
        let join = |v: &[u32]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        self.examples
            .iter()
            .map(|e| format!("{}\t{}\n", join(&e.source), join(&e.target)))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let parse = |s: &str| {
            s.split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format("corpus", e.to_string()))
        };
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (s, t) = l
                    .split_once('\t')
                    .ok_or_else(|| Error::format("corpus", format!("no tab in {l:?}")))?;
                Ok(Example::new(parse(s)?, parse(t)?))
            })
            .collect::<Result<_>>()?;
        Ok(DistillCorpus { examples, excluded: 0 })
    }
}

/// Greedy-decodes every source with the full-depth teacher.
pub fn generate_distillation(teacher: &Parameters, sources: &[Vec<u32>]) -> Result<DistillCorpus> {
    let gates = GateVector::all_on(teacher.config());
    let limit = teacher.config().max_len.saturating_sub(1);
    let mut examples = Vec::with_capacity(sources.len());
    let mut excluded = 0;
    for src in sources {
        let target = greedy_decode(teacher, src, &gates, limit)?;
        if target.is_empty() {
            excluded += 1;
        } else {
            examples.push(Example::new(src.clone(), target));
        }
    }
    if excluded > 0 {
        log::info!("distillation dropped {excluded} empty decodes");
    }
    Ok(DistillCorpus { examples, excluded })
}

/// Uniformly samples `n_enc` encoder and `n_dec` decoder depths without
/// replacement, always keeping the full depth on each side, and returns
/// their cross product in grid order.
pub fn sample_tasks(grid: &DepthGrid, n_enc: usize, n_dec: usize, rng: &mut impl Rng) -> Result<Vec<Task>> {
    let (enc, dec) = (grid.encoder().depths(), grid.decoder().depths());
    if n_enc == 0 || n_dec == 0 || n_enc > enc.len() || n_dec > dec.len() {
        return Err(Error::InvalidTaskSample {
            n_enc,
            n_dec,
            enc: enc.len(),
            dec: dec.len(),
        });
    }
    let mut pick = |depths: &[usize], n: usize| -> Vec<usize> {
        let (full, rest) = depths.split_last().expect("depth sets are non-empty");
        let mut chosen: Vec<usize> = index::sample(rng, rest.len(), n - 1)
            .into_iter()
            .map(|i| rest[i])
            .collect();
        chosen.push(*full);
        chosen.sort_unstable();
        chosen
    };
    let e = pick(enc, n_enc);
    let d = pick(dec, n_dec);
    Ok(e.iter()
        .flat_map(|&m| d.iter().map(move |&n| Task::new(m, n)))
        .collect())
}

/// Checks that every grid task has a sub-network in the plans and that
/// the plans match the model's depths.
pub fn check_plans(config: &ModelConfig, grid: &DepthGrid, enc: &AssignmentPlan, dec: &AssignmentPlan) -> Result<()> {
    if enc.total_depth() != config.enc_layers || dec.total_depth() != config.dec_layers {
        return Err(Error::PlanMismatch(format!(
            "plans cover {}x{} layers, model has {}x{}",
            enc.total_depth(),
            dec.total_depth(),
            config.enc_layers,
            config.dec_layers
        )));
    }
    if grid.encoder().total_depth() != config.enc_layers || grid.decoder().total_depth() != config.dec_layers {
        return Err(Error::PlanMismatch("grid depths differ from the model".into()));
    }
    for t in grid.tasks() {
        enc.sub_network(t.encoder)?;
        dec.sub_network(t.decoder)?;
    }
    Ok(())
}

pub fn task_gates(task: Task, enc: &AssignmentPlan, dec: &AssignmentPlan) -> Result<GateVector> {
    Ok(GateVector::from_sub_networks(
        enc.sub_network(task.encoder)?,
        dec.sub_network(task.decoder)?,
    ))
}

/// Multi-task fine-tuning: per step, one batch runs through the
/// sub-network of every scheduled task, and the summed gradient drives a
/// single update.
pub fn finetune_multitask(
    init: Parameters,
    corpus: &DistillCorpus,
    grid: &DepthGrid,
    enc_plan: &AssignmentPlan,
    dec_plan: &AssignmentPlan,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    check_plans(init.config(), grid, enc_plan, dec_plan)?;
    let gates_of = |tasks: &[Task]| -> Result<Vec<Pass>> {
        tasks
            .iter()
            .map(|&t| {
                Ok(Pass {
                    label: t.to_string(),
                    batch: 0,
                    gates: task_gates(t, enc_plan, dec_plan)?,
                })
            })
            .collect()
    };
    let policy = train.policy.clone();
    if let AccumulationPolicy::SampledTasks { n_enc, n_dec } = policy {
        // Validate up front so a bad config fails before any work.
        sample_tasks(grid, n_enc, n_dec, &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    let full = gates_of(grid.tasks())?;
    run_steps(init, &corpus.examples, train, |streams| match policy {
        AccumulationPolicy::SampledTasks { n_enc, n_dec } => {
            let tasks = sample_tasks(grid, n_enc, n_dec, &mut streams.tasks)?;
            Ok((1, gates_of(&tasks)?))
        }
        _ => Ok((
            1,
            full.iter()
                .map(|p| Pass {
                    label: p.label.clone(),
                    batch: 0,
                    gates: p.gates.clone(),
                })
                .collect(),
        )),
    })
}

/// LayerDrop fine-tuning: per step, `accum` fresh batches each run with
/// independently sampled gates (each layer off with probability `p`).
pub fn finetune_layerdrop(
    init: Parameters,
    corpus: &DistillCorpus,
    p: f64,
    accum: usize,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    if accum == 0 {
        return Err(Error::InvalidTrainConfig("accum must be positive".into()));
    }
    let config = init.config().clone();
    run_steps(init, &corpus.examples, train, |streams| {
        let passes = (0..accum)
            .map(|i| {
                Ok(Pass {
                    label: "layerdrop".into(),
                    batch: i,
                    gates: GateVector::sample(p, &config, &mut streams.gates)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok((accum, passes))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_space::task_grid;

    #[test]
    fn schedule_shape() {
        let s = Schedule::InverseSqrt { peak: 1.0, warmup: 4 };
        assert_eq!(s.rate(1), 0.25);
        assert_eq!(s.rate(4), 1.0);
        assert_eq!(s.rate(16), 0.5);
        assert_eq!(Schedule::Constant { rate: 0.1 }.rate(7), 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            steps: 10,
            schedule: Schedule::InverseSqrt { peak: 1e-3, warmup: 20 },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let frac = TrainConfig {
            policy: AccumulationPolicy::BatchFraction { fraction: 0.0 },
            ..TrainConfig::default()
        };
        assert!(frac.validate().is_err());
    }

    #[test]
    fn sampled_tasks_keep_full_depth() {
        let grid = task_grid(12, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tasks = sample_tasks(&grid, 6, 2, &mut rng).unwrap();
        assert_eq!(tasks.len(), 12);
        assert!(tasks.contains(&Task::new(12, 6)));
        assert!(tasks.windows(2).all(|w| w[0] < w[1]));
        let all = sample_tasks(&grid, 6, 4, &mut rng).unwrap();
        assert_eq!(all, grid.tasks());
        assert!(sample_tasks(&grid, 0, 1, &mut rng).is_err());
        assert!(sample_tasks(&grid, 7, 1, &mut rng).is_err());
    }

    #[test]
    fn sampling_eventually_covers_grid() {
        let grid = task_grid(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            seen.extend(sample_tasks(&grid, 2, 2, &mut rng).unwrap());
        }
        assert_eq!(seen.len(), grid.len());
    }

    #[test]
    fn corpus_tsv_round_trip() {
        let c = DistillCorpus::from_references(vec![Example::new(vec![3, 4], vec![4, 3])]);
        assert_eq!(c.to_tsv(), "3 4\t4 3\n");
        assert_eq!(DistillCorpus::from_tsv(&c.to_tsv()).unwrap(), c);
        assert!(DistillCorpus::from_tsv("3 4 4 3").is_err());
    }
}
