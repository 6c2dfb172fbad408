mod oracle;

use std::collections::BTreeMap;

use dolphin_core::adapter::{AdapterConfig, ModalitySpec};
use dolphin_core::model::{
    overfit_smoke, train_step, FreezeSchedule, ModelConfig, ParamGroup, SmokeConfig, Stage,
    SyntheticBatch, ToyModel, BOS,
};
use dolphin_core::nn::Module;
use dolphin_core::{Error, Tape};

fn small() -> ModelConfig {
    ModelConfig {
        adapter: AdapterConfig {
            blocks: 2,
            layers_per_block: 1,
            dim: 16,
            heads: 2,
            frames: 2,
            visual: ModalitySpec {
                channels: 3,
                height: 32,
                width: 32,
                patch: 16,
            },
            audio: ModalitySpec {
                channels: 1,
                height: 32,
                width: 32,
                patch: 16,
            },
        },
        llm_dim: 24,
        vocab: 16,
        readout_layers: 1,
        readout_heads: 2,
        max_text_len: 8,
    }
}

fn snapshot(m: &ToyModel) -> BTreeMap<String, Vec<u64>> {
    m.params()
        .iter()
        .map(|p| {
            (
                p.name().to_string(),
                p.value().data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

/// Groups whose parameters all kept their bits, and groups where some changed.
fn diff(
    before: &BTreeMap<String, Vec<u64>>,
    after: &BTreeMap<String, Vec<u64>>,
) -> (Vec<ParamGroup>, Vec<ParamGroup>) {
    let mut changed = BTreeMap::new();
    for (name, bits) in before {
        let g = ParamGroup::of(name).unwrap();
        *changed.entry(g).or_insert(false) |= after[name] != *bits;
    }
    let same = changed
        .iter()
        .filter(|(_, &c)| !c)
        .map(|(&g, _)| g)
        .collect();
    let moved = changed
        .iter()
        .filter(|(_, &c)| c)
        .map(|(&g, _)| g)
        .collect();
    (same, moved)
}

fn train(stage: Stage, steps: usize) -> (Vec<ParamGroup>, Vec<ParamGroup>) {
    let cfg = small();
    let mut model = ToyModel::new(&cfg, 3).unwrap();
    let batch = SyntheticBatch::generate(&cfg, 2, 4, 3).unwrap();
    let before = snapshot(&model);
    for _ in 0..steps {
        train_step(&mut model, &batch, &FreezeSchedule::new(stage), 0.5).unwrap();
    }
    diff(&before, &snapshot(&model))
}

#[test]
fn pretraining_moves_only_the_adapter_and_projectors() {
    let (same, moved) = train(Stage::Pretrain, 10);
    assert_eq!(
        same,
        [
            ParamGroup::VisualEncoder,
            ParamGroup::AudioEncoder,
            ParamGroup::Readout
        ]
    );
    assert_eq!(moved, [ParamGroup::Adapter, ParamGroup::Projectors]);
}

#[test]
fn finetuning_keeps_only_the_encoders() {
    let (same, moved) = train(Stage::Finetune, 10);
    assert_eq!(same, [ParamGroup::VisualEncoder, ParamGroup::AudioEncoder]);
    assert_eq!(
        moved,
        [
            ParamGroup::Adapter,
            ParamGroup::Projectors,
            ParamGroup::Readout
        ]
    );
}

#[test]
fn schedule_groups() {
    let s1 = FreezeSchedule::new(Stage::Pretrain);
    assert_eq!(
        s1.trainable_groups(),
        [ParamGroup::Adapter, ParamGroup::Projectors]
    );
    let s2 = FreezeSchedule::new(Stage::Finetune);
    assert_eq!(
        s2.frozen_groups(),
        [ParamGroup::VisualEncoder, ParamGroup::AudioEncoder]
    );
    assert_eq!(Stage::try_from(2u8), Ok(Stage::Finetune));
    assert!(Stage::try_from(3u8).is_err());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = small();
    let mut model = ToyModel::new(&cfg, 1).unwrap();
    let batch = SyntheticBatch::generate(&cfg, 2, 3, 1).unwrap();
    let before = snapshot(&model);
    let a = train_step(
        &mut model,
        &batch,
        &FreezeSchedule::new(Stage::Finetune),
        0.0,
    )
    .unwrap();
    let b = train_step(
        &mut model,
        &batch,
        &FreezeSchedule::new(Stage::Finetune),
        0.0,
    )
    .unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(before, snapshot(&model));
}

#[test]
fn invalid_learning_rates_are_config_errors() {
    let cfg = small();
    let mut model = ToyModel::new(&cfg, 1).unwrap();
    let batch = SyntheticBatch::generate(&cfg, 1, 3, 1).unwrap();
    for lr in [-0.1, f64::NAN, f64::INFINITY] {
        let r = train_step(
            &mut model,
            &batch,
            &FreezeSchedule::new(Stage::Pretrain),
            lr,
        );
        assert!(matches!(r, Err(Error::Config(_))), "{lr}");
    }
}

#[test]
fn exploding_steps_are_numeric_errors() {
    let cfg = small();
    let mut model = ToyModel::new(&cfg, 1).unwrap();
    let batch = SyntheticBatch::generate(&cfg, 2, 3, 1).unwrap();
    let schedule = FreezeSchedule::new(Stage::Finetune);
    let err = (0..20)
        .find_map(|_| train_step(&mut model, &batch, &schedule, 1e300).err())
        .unwrap();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn untrained_loss_is_near_uniform() {
    let cfg = small();
    let model = ToyModel::new(&cfg, 5).unwrap();
    let batch = SyntheticBatch::generate(&cfg, 4, 5, 5).unwrap();
    let tape = Tape::new();
    let loss = model.loss(&tape, &batch).unwrap().item();
    let uniform = (cfg.vocab as f64).ln();
    assert!(
        (loss - uniform).abs() < 0.05 * uniform,
        "{loss} vs {uniform}"
    );
}

#[test]
fn logits_and_av_token_shapes() {
    let cfg = small();
    let model = ToyModel::new(&cfg, 0).unwrap();
    let batch = SyntheticBatch::generate(&cfg, 3, 5, 0).unwrap();
    let tape = Tape::new();
    assert_eq!(
        model.av_tokens(&tape, &batch).unwrap().shape(),
        [3, cfg.av_tokens(), cfg.llm_dim]
    );
    assert_eq!(
        model.forward(&tape, &batch).unwrap().shape(),
        [3, 5, cfg.vocab]
    );
    assert_eq!(
        model.forward_text_only(&tape, &batch).unwrap().shape(),
        [3, 5, cfg.vocab]
    );
}

#[test]
fn the_av_path_matters_to_the_logits() {
    let cfg = small();
    let mut model = ToyModel::new(&cfg, 0).unwrap();
    let batch = SyntheticBatch::generate(&cfg, 2, 4, 0).unwrap();
    for _ in 0..3 {
        train_step(
            &mut model,
            &batch,
            &FreezeSchedule::new(Stage::Finetune),
            0.5,
        )
        .unwrap();
    }
    let tape = Tape::new();
    let with = model.forward(&tape, &batch).unwrap().value();
    let without = model.forward_text_only(&tape, &batch).unwrap().value();
    assert_ne!(with.data(), without.data());
}

#[test]
fn batches_are_seeded_and_shifted() {
    let cfg = small();
    let a = SyntheticBatch::generate(&cfg, 3, 4, 9).unwrap();
    assert_eq!(a, SyntheticBatch::generate(&cfg, 3, 4, 9).unwrap());
    assert_ne!(a, SyntheticBatch::generate(&cfg, 3, 4, 10).unwrap());
    assert_eq!(a.frames.shape(), [3, 2, 3, 32, 32]);
    for (i, t) in a.inputs.iter().zip(&a.targets) {
        assert_eq!(i[0], BOS);
        assert_eq!(&i[1..], &t[..t.len() - 1]);
        assert!(t.iter().all(|&y| y != BOS && y < cfg.vocab));
    }
    assert!(matches!(
        SyntheticBatch::generate(&cfg, 0, 4, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn manifest_covers_every_group_with_unique_names() {
    let model = ToyModel::new(&small(), 0).unwrap();
    let manifest = model.manifest();
    let mut names: Vec<_> = manifest.iter().map(|(n, _, _)| n.clone()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), manifest.len());
    for g in ParamGroup::ALL {
        assert!(model.group_param_count(g) > 0, "{g}");
        assert!(manifest
            .iter()
            .filter(|(_, mg, _)| *mg == g)
            .all(|(n, _, _)| n.starts_with(g.prefix())));
    }
    let merge = manifest
        .iter()
        .find(|(n, _, _)| n.contains("merge"))
        .unwrap();
    assert_eq!(merge.1, ParamGroup::Projectors);
}

#[test]
fn same_seed_same_model() {
    let cfg = small();
    assert_eq!(
        snapshot(&ToyModel::new(&cfg, 4).unwrap()),
        snapshot(&ToyModel::new(&cfg, 4).unwrap())
    );
    assert_ne!(
        snapshot(&ToyModel::new(&cfg, 4).unwrap()),
        snapshot(&ToyModel::new(&cfg, 5).unwrap())
    );
}

#[test]
fn short_smoke_run_learns_and_repeats_exactly() {
    let cfg = SmokeConfig {
        model: small(),
        samples: 2,
        target_len: 3,
        steps: 30,
        stages: vec![Stage::Pretrain, Stage::Finetune],
        ..SmokeConfig::toy()
    };
    let mut t = 0.0;
    let mut clock = || {
        t += 1.0;
        t
    };
    let a = overfit_smoke(&cfg, &mut clock).unwrap();
    let b = overfit_smoke(&cfg, &mut clock).unwrap();
    assert_eq!(a.steps(), 60);
    assert_eq!(a.stages.len(), 2);
    assert!(a.final_loss() < a.initial_loss());
    assert_eq!(a.summary(), b.summary());
    assert!(a
        .trajectory
        .iter()
        .zip(&b.trajectory)
        .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()));
    let no_stages = SmokeConfig {
        stages: vec![],
        ..cfg
    };
    assert!(matches!(
        overfit_smoke(&no_stages, &mut || 0.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small();
    cfg.llm_dim = 25;
    assert!(matches!(ToyModel::new(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = small();
    cfg.vocab = 1;
    assert!(matches!(ToyModel::new(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn analytic_parameter_counts_match_the_built_model() {
    let mut configs = vec![small(), ModelConfig::toy()];
    for seed in 0..6 {
        configs.push(ModelConfig {
            adapter: oracle::random_adapter_config(seed),
            ..small()
        });
    }
    for cfg in configs {
        let model = ToyModel::new(&cfg, 0).unwrap();
        for (g, n) in cfg.param_counts() {
            assert_eq!(n, model.group_param_count(g), "{g} {cfg:?}");
        }
    }
}

/// Worked by hand for D=32, D_llm=48, vocab 64, 64×64 visual and 32×48
/// (padded to 32×64) audio, patch 16, two adapter blocks of one layer.
#[test]
fn toy_parameter_sheet() {
    let counts: BTreeMap<_, _> = ModelConfig::toy().param_counts().into_iter().collect();
    // patch 768·32+32 = 24 608, pos 16·32 = 512, two ViT blocks of 12 672.
    assert_eq!(counts[&ParamGroup::VisualEncoder], 50_464);
    // patch 256·32+32 = 8 224, pos 8·32 = 256, same blocks.
    assert_eq!(counts[&ParamGroup::AudioEncoder], 33_824);
    // pyramids 32 480 (visual stem 1 568) and 31 456 (audio stem 544), each
    // with three 288→32 downsamplers and three 32→32 projections;
    // four blocks of 3·4 192 + 32 + 8 352 = 20 960.
    assert_eq!(counts[&ParamGroup::Adapter], 32_480 + 31_456 + 4 * 20_960);
    // two attentions 8 384, 32→48 1 584, 48→48 2 352.
    assert_eq!(counts[&ParamGroup::Projectors], 12_320);
    // tables 80·48 = 3 840, two decoder blocks of 37 680, norm 96, logits 3 136.
    assert_eq!(counts[&ParamGroup::Readout], 82_432);
}
