use flexdepth::assignment::Strategy;
use flexdepth::data::{DataConfig, Dataset, TaskKind};
use flexdepth::depth_space::{task_grid, DepthGrid};
use flexdepth::evaluation::{evaluate_grid, GridLabels};
use flexdepth::model::{greedy_decode, init_params, GateVector, ModelConfig};
use flexdepth::training::{
    finetune_layerdrop, finetune_multitask, generate_distillation, pretrain, train_full_depth, AccumulationPolicy,
    DistillCorpus, Schedule, TrainConfig,
};

fn small_model() -> ModelConfig {
    ModelConfig {
        enc_layers: 4,
        dec_layers: 2,
        width: 16,
        heads: 2,
        ffn_width: 32,
        vocab_size: 12,
        max_len: 10,
    }
}

fn copy_data() -> Dataset {
    DataConfig {
        task: TaskKind::Copy,
        min_len: 2,
        max_len: 6,
        train_size: 300,
        test_size: 20,
        ..DataConfig::default()
    }
    .generate(12)
    .unwrap()
}

fn train(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        schedule: Schedule::InverseSqrt {
            peak: 3e-3,
            warmup: 20.min(steps.max(1)),
        },
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn copy_loss_halves_within_200_steps() {
    let data = copy_data();
    let out = pretrain(&small_model(), &train(200, 1), &data.train).unwrap();
    let start = out.log[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    let end = out.final_loss(10).unwrap();
    assert!(end <= 0.5 * start, "loss {start:.3} -> {end:.3}");
}

#[test]
fn pretraining_is_deterministic_and_zero_steps_is_identity() {
    let data = copy_data();
    let a = pretrain(&small_model(), &train(15, 4), &data.train).unwrap();
    let b = pretrain(&small_model(), &train(15, 4), &data.train).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.len(), b.log.len());
    let c = pretrain(&small_model(), &train(15, 5), &data.train).unwrap();
    assert_ne!(a.params, c.params);

    let zero = TrainConfig {
        steps: 0,
        schedule: Schedule::Constant { rate: 1e-3 },
        ..TrainConfig::default()
    };
    let out = pretrain(&small_model(), &zero, &data.train).unwrap();
    assert_eq!(out.params, init_params(&small_model(), zero.seed).unwrap());
    assert!(out.log.is_empty());
}

fn full_task_only(model: &ModelConfig) -> DepthGrid {
    let grid = task_grid(model.enc_layers, model.dec_layers).unwrap();
    DepthGrid::restricted(grid.encoder().clone(), grid.decoder().clone(), &[grid.full_task()]).unwrap()
}

#[test]
fn single_task_grid_reduces_to_full_depth_training() {
    let model = small_model();
    let data = copy_data();
    let grid = full_task_only(&model);
    let enc = Strategy::Left.assign(grid.encoder()).unwrap();
    let dec = Strategy::Left.assign(grid.decoder()).unwrap();
    let corpus = DistillCorpus::from_references(data.train.clone());
    let init = init_params(&model, 9).unwrap();
    let mt = finetune_multitask(init.clone(), &corpus, &grid, &enc, &dec, &train(10, 3)).unwrap();
    let full = train_full_depth(init, &data.train, &train(10, 3)).unwrap();
    assert_eq!(mt.params, full.params);
}

#[test]
fn summed_task_gradients_drive_one_update_per_step() {
    let model = small_model();
    let grid = task_grid(4, 2).unwrap();
    let enc = Strategy::Optimal.assign(grid.encoder()).unwrap();
    let dec = Strategy::Optimal.assign(grid.decoder()).unwrap();
    let corpus = DistillCorpus::from_references(copy_data().train);
    let out = finetune_multitask(
        init_params(&model, 1).unwrap(),
        &corpus,
        &grid,
        &enc,
        &dec,
        &train(4, 2),
    )
    .unwrap();
    assert_eq!(out.passes_per_step, vec![6; 4]);
    assert_eq!(out.log.len(), 24);
    // Each step logs every task once, in grid order.
    let tasks: Vec<&str> = out.log[..6].iter().map(|r| r.task.as_str()).collect();
    assert_eq!(tasks, ["1-1", "1-2", "2-1", "2-2", "4-1", "4-2"]);

    let sampled = TrainConfig {
        policy: AccumulationPolicy::SampledTasks { n_enc: 2, n_dec: 1 },
        ..train(6, 2)
    };
    let out = finetune_multitask(init_params(&model, 1).unwrap(), &corpus, &grid, &enc, &dec, &sampled).unwrap();
    assert_eq!(out.total_passes(), 12);
    // Full depth is always among the sampled tasks.
    assert!(out
        .active_layers
        .chunks(2)
        .all(|step| step.iter().any(|&(e, _)| e == 4)));
}

#[test]
fn layerdrop_keeps_expected_fraction_of_layers() {
    let model = small_model();
    let corpus = DistillCorpus::from_references(copy_data().train);
    let t = TrainConfig {
        batch_size: 1,
        schedule: Schedule::Constant { rate: 1e-4 },
        ..train(50, 8)
    };
    let out = finetune_layerdrop(init_params(&model, 1).unwrap(), &corpus, 0.25, 8, &t).unwrap();
    assert_eq!(out.total_passes(), 400);
    let mean_enc = out.active_layers.iter().map(|&(e, _)| e as f64).sum::<f64>() / 400.0;
    assert!((mean_enc - 3.0).abs() < 0.15, "mean active encoder layers {mean_enc}");
    assert!(finetune_layerdrop(init_params(&model, 1).unwrap(), &corpus, 1.0, 8, &t).is_err());
}

#[test]
fn distillation_targets_are_teacher_decodes() {
    let data = copy_data();
    let teacher = pretrain(&small_model(), &train(150, 1), &data.train).unwrap().params;
    let sources: Vec<Vec<u32>> = data.train[..30].iter().map(|e| e.source.clone()).collect();
    let corpus = generate_distillation(&teacher, &sources).unwrap();
    assert_eq!(corpus.len() + corpus.excluded, 30);
    let reloaded = DistillCorpus::from_tsv(&corpus.to_tsv()).unwrap();
    assert_eq!(reloaded.examples, corpus.examples);
    let gates = GateVector::all_on(teacher.config());
    for e in &corpus.examples {
        assert_eq!(e.target, greedy_decode(&teacher, &e.source, &gates, 9).unwrap());
    }
}

#[test]
fn grid_evaluation_is_deterministic_and_full_depth_is_strategy_independent() {
    let data = copy_data();
    let params = pretrain(&small_model(), &train(60, 1), &data.train).unwrap().params;
    let grid = task_grid(4, 2).unwrap();
    let labels = GridLabels::default();
    let mut full_cells = Vec::new();
    for s in Strategy::ALL {
        let enc = s.assign(grid.encoder()).unwrap();
        let dec = s.assign(grid.decoder()).unwrap();
        let a = evaluate_grid(&params, &grid, &enc, &dec, &data.test, &labels);
        let b = evaluate_grid(&params, &grid, &enc, &dec, &data.test, &labels);
        assert_eq!(a, b);
        assert_eq!(a.failures(), 0);
        full_cells.push(a.get(grid.full_task()).unwrap().clone());
    }
    assert!(full_cells.windows(2).all(|w| w[0] == w[1]));
}
