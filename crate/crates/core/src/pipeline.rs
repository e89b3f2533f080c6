//! End-to-end experiment driver: pretrain a full-depth teacher, distill,
//! fine-tune one arm (multi-task or LayerDrop), then evaluate every depth
//! configuration against the unadapted teacher.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentPlan, Strategy};
use crate::data::{DataConfig, Dataset, Example};
use crate::depth_space::{task_grid, DepthGrid};
use crate::error::{Error, Result};
use crate::evaluation::{delta_report, evaluate_grid, vanilla_truncation_probe, DeltaReport, EvalGrid, GridLabels};
use crate::model::{save_checkpoint, ModelConfig, Parameters};
use crate::training::{
    finetune_layerdrop, finetune_multitask, generate_distillation, pretrain, DistillCorpus, Schedule, TrainConfig,
    TrainOutcome,
};

/// What the fine-tuning stage trains: multi-task learning over the grid with
/// a deterministic assignment strategy, or the LayerDrop baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    MultiTask(Strategy),
    LayerDrop,
}

impl Method {
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Method::MultiTask(s) => Some(s),
            Method::LayerDrop => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::MultiTask(s) => write!(f, "{}", s.name()),
            Method::LayerDrop => f.write_str("layerdrop"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("layerdrop") {
            Ok(Method::LayerDrop)
        } else {
            s.parse().map(Method::MultiTask)
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerDropConfig {
    /// Probability of dropping each layer.
    pub p: f64,
    /// Batches accumulated per step; `0` means one per grid task, matching
    /// the multi-task cost.
    pub accum: usize,
}

impl Default for LayerDropConfig {
    fn default() -> Self {
        LayerDropConfig { p: 0.2, accum: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test examples scored per cell (`0` = all).
    pub limit: usize,
    /// Sub-network strategy used to score the grid. Defaults to the
    /// training strategy for the multi-task arm and `left` for LayerDrop.
    pub strategy: Option<Strategy>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            limit: 100,
            strategy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    /// An assignment strategy name, or `layerdrop` for the baseline arm.
    pub strategy: Method,
    /// Fine-tune on teacher decodes instead of the raw references.
    pub distill: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub layerdrop: LayerDropConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    /// The demo run: copy task on a 4-layer encoder and 2-layer decoder.
    fn default() -> Self {
        PipelineConfig {
            name: "copy-4x2".into(),
            strategy: Method::MultiTask(Strategy::Optimal),
            distill: true,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig {
                steps: 600,
                batch_size: 16,
                schedule: Schedule::InverseSqrt { peak: 3e-3, warmup: 60 },
                seed: 1,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 200,
                batch_size: 16,
                schedule: Schedule::InverseSqrt { peak: 1e-3, warmup: 20 },
                seed: 2,
                ..TrainConfig::default()
            },
            layerdrop: LayerDropConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    /// Reseeds both training stages from one run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.finetune.seed = seed.wrapping_add(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate(self.model.vocab_size)?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.data.max_len + 1 > self.model.max_len {
            return Err(Error::InvalidTrainConfig(format!(
                "data max_len {} needs model max_len >= {}",
                self.data.max_len,
                self.data.max_len + 1
            )));
        }
        if self.strategy == Method::LayerDrop && !(self.layerdrop.p > 0.0 && self.layerdrop.p < 1.0) {
            return Err(Error::InvalidProbability(self.layerdrop.p));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<DepthGrid> {
        task_grid(self.model.enc_layers, self.model.dec_layers)
    }

    /// Plans the fine-tuning stage trains against. The LayerDrop arm has no
    /// plans of its own and reports the evaluation plans instead.
    pub fn train_plans(&self, grid: &DepthGrid) -> Result<(AssignmentPlan, AssignmentPlan)> {
        let s = self.strategy.strategy().unwrap_or_else(|| self.eval_strategy());
        Ok((s.assign(grid.encoder())?, s.assign(grid.decoder())?))
    }

    pub fn eval_strategy(&self) -> Strategy {
        self.eval
            .strategy
            .or(self.strategy.strategy())
            .unwrap_or(Strategy::Left)
    }

    pub fn eval_plans(&self, grid: &DepthGrid) -> Result<(AssignmentPlan, AssignmentPlan)> {
        let s = self.eval_strategy();
        Ok((s.assign(grid.encoder())?, s.assign(grid.decoder())?))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        self.data.generate(self.model.vocab_size)
    }

    pub fn test_slice<'a>(&self, data: &'a Dataset) -> &'a [Example] {
        let n = if self.eval.limit == 0 {
            data.test.len()
        } else {
            self.eval.limit.min(data.test.len())
        };
        &data.test[..n]
    }

    fn layerdrop_accum(&self, grid: &DepthGrid) -> usize {
        if self.layerdrop.accum == 0 {
            grid.len()
        } else {
            self.layerdrop.accum
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Fine-tuning input: teacher decodes, or the raw references.
pub fn finetune_corpus(config: &PipelineConfig, teacher: &Parameters, data: &Dataset) -> Result<DistillCorpus> {
    if config.distill {
        let sources: Vec<Vec<u32>> = data.train.iter().map(|e| e.source.clone()).collect();
        generate_distillation(teacher, &sources)
    } else {
        Ok(DistillCorpus::from_references(data.train.clone()))
    }
}

/// Runs the configured arm starting from `teacher`.
pub fn finetune_arm(config: &PipelineConfig, teacher: &Parameters, corpus: &DistillCorpus) -> Result<TrainOutcome> {
    let grid = config.grid()?;
    match config.strategy {
        Method::MultiTask(_) => {
            let (enc, dec) = config.train_plans(&grid)?;
            finetune_multitask(teacher.clone(), corpus, &grid, &enc, &dec, &config.finetune)
        }
        Method::LayerDrop => finetune_layerdrop(
            teacher.clone(),
            corpus,
            config.layerdrop.p,
            config.layerdrop_accum(&grid),
            &config.finetune,
        ),
    }
}

/// Scores `params` over the whole grid with the configured evaluation plans.
pub fn evaluate(config: &PipelineConfig, params: &Parameters, data: &Dataset, checkpoint: &str) -> Result<EvalGrid> {
    let grid = config.grid()?;
    let (enc, dec) = config.eval_plans(&grid)?;
    let labels = GridLabels {
        checkpoint: checkpoint.into(),
        dataset: format!("{}-seed{}", config.name, config.data.seed),
    };
    Ok(evaluate_grid(
        params,
        &grid,
        &enc,
        &dec,
        config.test_slice(data),
        &labels,
    ))
}

/// Scores the unadapted teacher with layers removed.
pub fn probe(config: &PipelineConfig, teacher: &Parameters, data: &Dataset) -> Result<EvalGrid> {
    let grid = config.grid()?;
    let (enc, dec) = config.eval_plans(&grid)?;
    let labels = GridLabels {
        checkpoint: "teacher".into(),
        dataset: format!("{}-seed{}", config.name, config.data.seed),
    };
    Ok(vanilla_truncation_probe(
        teacher,
        &grid,
        &enc,
        &dec,
        config.test_slice(data),
        &labels,
    ))
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub teacher: Parameters,
    pub model: Parameters,
    /// The teacher evaluated with layers removed, before any adaptation.
    pub baseline: EvalGrid,
    pub grid: EvalGrid,
    pub delta: DeltaReport,
    pub distilled: usize,
    pub excluded: usize,
    pub passes: usize,
}

impl PipelineReport {
    /// Human-readable summary; identical across reruns with equal seeds.
    pub fn summary(&self, config: &PipelineConfig) -> String {
        format!(
            "run: {}\nstrategy: {} (eval: {})\nfinetune corpus: {} examples ({} excluded)\n\
             forward passes: {}\n\nvanilla truncation (teacher):\n{}\nfine-tuned:\n{}\n\
             teacher -> fine-tuned:\n{}",
            config.name,
            config.strategy,
            config.eval_strategy(),
            self.distilled,
            self.excluded,
            self.passes,
            self.baseline.heatmap(),
            self.grid.heatmap(),
            self.delta.to_text()
        )
    }
}

/// Writes `contents` to `dir/name` and returns the path.
fn emit(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Runs every stage, writing artifacts into `out` when given:
/// `teacher.ckpt`, `pretrain_log.csv`, `corpus.tsv`, `model.ckpt`,
/// `finetune_log.csv`, `baseline_grid.{csv,txt}`, `grid.{csv,txt}`,
/// `plan_encoder.txt`, `plan_decoder.txt` and `report.txt`.
pub fn run_pipeline(config: &PipelineConfig, out: Option<&Path>) -> Result<PipelineReport> {
    stage("validate", config.validate())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let data = stage("data", config.dataset())?;
    let grid = stage("plan", config.grid())?;
    let (enc_plan, dec_plan) = stage("plan", config.train_plans(&grid))?;
    if let Some(dir) = out {
        emit(dir, "plan_encoder.txt", enc_plan.to_text())?;
        emit(dir, "plan_decoder.txt", dec_plan.to_text())?;
    }

    log::info!("pretraining {} steps", config.pretrain.steps);
    let pre = stage("pretrain", pretrain(&config.model, &config.pretrain, &data.train))?;
    if let Some(dir) = out {
        stage("pretrain", save_checkpoint(&pre.params, dir.join("teacher.ckpt")))?;
        stage("pretrain", pre.save_log(dir.join("pretrain_log.csv")))?;
    }

    let corpus = stage("distill", finetune_corpus(config, &pre.params, &data))?;
    if let Some(dir) = out {
        emit(dir, "corpus.tsv", corpus.to_tsv())?;
    }

    log::info!("fine-tuning ({}) {} steps", config.strategy, config.finetune.steps);
    let ft = stage("finetune", finetune_arm(config, &pre.params, &corpus))?;
    if let Some(dir) = out {
        stage("finetune", save_checkpoint(&ft.params, dir.join("model.ckpt")))?;
        stage("finetune", ft.save_log(dir.join("finetune_log.csv")))?;
    }

    let baseline = stage("eval-grid", probe(config, &pre.params, &data))?;
    let final_grid = stage("eval-grid", evaluate(config, &ft.params, &data, "model"))?;
    let delta = stage("report", delta_report(&baseline, &final_grid))?;
    let report = PipelineReport {
        teacher: pre.params,
        model: ft.params,
        baseline,
        grid: final_grid,
        delta,
        distilled: corpus.len(),
        excluded: corpus.excluded,
        passes: ft.passes_per_step.iter().sum(),
    };
    if let Some(dir) = out {
        emit(dir, "baseline_grid.csv", report.baseline.to_csv())?;
        emit(dir, "baseline_grid.txt", report.baseline.heatmap())?;
        emit(dir, "grid.csv", report.grid.to_csv())?;
        emit(dir, "grid.txt", report.grid.heatmap())?;
        emit(dir, "report.txt", report.summary(config))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = PipelineConfig::default();
        let text = c.to_toml();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = PipelineConfig::from_toml(
            "strategy = \"layerdrop\"\n[model]\nenc_layers = 6\n[finetune.policy]\nkind = \"sampled_tasks\"\nn_enc = 2\nn_dec = 1\n",
        )
        .unwrap();
        assert_eq!(c.strategy, Method::LayerDrop);
        assert_eq!(c.model.enc_layers, 6);
        assert_eq!(c.model.width, 32);
        assert_eq!(c.eval_strategy(), Strategy::Left);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("strategy = \"bogus\"").is_err());
        let c = PipelineConfig::from_toml("strategy = \"middle-left\"").unwrap();
        assert_eq!(c.strategy, Method::MultiTask(Strategy::MiddleLeft));
    }

    #[test]
    fn validation_catches_length_mismatch() {
        let mut c = PipelineConfig::default();
        c.model.max_len = c.data.max_len;
        assert!(c.validate().is_err());
    }

    #[test]
    fn with_seed_sets_both_stages() {
        let c = PipelineConfig::default().with_seed(10);
        assert_eq!((c.pretrain.seed, c.finetune.seed), (10, 11));
    }
}
