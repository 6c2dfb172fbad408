use std::collections::BTreeSet;

use dolphin_core::avu::{
    assign_split, compute_confidence, compute_confidence_with, filter_bottom_quartile,
    multiqa_draw, rank_order, render_prompt, run_pipeline, synthetic_corpus, Backends,
    ConfidenceWeights, MockIntegrator, MockScorer, PipelineConfig, PipelineStage, SampleRecord,
    Scores, SplitConfig, SplitLabel, TemplateSet,
};
use dolphin_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Written out by hand rather than through the weights struct.
fn confidence_oracle(clip: f64, self_consistency: f64, annotation: f64) -> f64 {
    (2.0 * clip + self_consistency + 5.0 * annotation) / 8.0
}

/// FNV-1a with a 0x1f separator, SplitMix64 finalizer, top 53 bits.
fn draw_oracle(id: &str) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let bytes = b"multiqa"
        .iter()
        .chain(std::iter::once(&0x1f))
        .chain(id.as_bytes());
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^= h >> 31;
    (h >> 11) as f64 * 2f64.powi(-53)
}

/// Enumerates every label and keeps the one whose defining condition holds.
fn split_oracle(r: &SampleRecord, cfg: &SplitConfig) -> SplitLabel {
    let task = r.has_task_annotation;
    let c = r.scores.consistency.unwrap();
    let high = c >= cfg.tau_hi;
    let diverted = draw_oracle(&r.id) < cfg.multiqa_fraction;
    let matches: Vec<SplitLabel> = SplitLabel::ALL
        .into_iter()
        .filter(|label| match label {
            SplitLabel::Tasks => task,
            SplitLabel::MultiQA => !task && high && diverted,
            SplitLabel::Pretrain => !task && high && !diverted,
            SplitLabel::Specific => !task && !high && c >= cfg.tau_lo,
            SplitLabel::Negatives => !task && c < cfg.tau_lo,
        })
        .collect();
    assert_eq!(matches.len(), 1, "{c} {task}");
    matches[0]
}

fn scored(id: String, rng: &mut ChaCha8Rng) -> SampleRecord {
    let mut r = SampleRecord::new(&id, "a dog runs", "barking");
    // Coarse grid so ties in confidence and threshold hits are common.
    let mut u = || f64::from(rng.random_range(0..=20u32)) / 20.0;
    r.scores = Scores::new(u(), u(), u(), u());
    r.has_task_annotation = rng.random_bool(0.1);
    r
}

fn corpus(n: usize, seed: u64) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Ids are a shuffled permutation of input positions (7919 is prime).
    (0..n)
        .map(|i| scored(format!("r{:04}", (i * 7919) % n), &mut rng))
        .collect()
}

#[test]
fn confidence_matches_the_oracle_on_10k_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..10_000 {
        let (c, s, a) = if i < 8 {
            (
                f64::from(i & 1),
                f64::from((i >> 1) & 1),
                f64::from((i >> 2) & 1),
            )
        } else {
            (
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            )
        };
        let got = compute_confidence(&Scores::new(c, s, a, rng.random())).unwrap();
        assert_eq!(
            got.to_bits(),
            confidence_oracle(c, s, a).to_bits(),
            "{c} {s} {a}"
        );
    }
}

#[test]
fn confidence_rejects_missing_and_out_of_range_scores() {
    assert!(matches!(
        compute_confidence(&Scores::new(1.1, 0.0, 0.0, 0.0)),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        compute_confidence(&Scores::new(0.5, f64::NAN, 0.0, 0.0)),
        Err(Error::Validation(_))
    ));
    let partial = Scores {
        clip: Some(0.2),
        self_consistency: Some(0.3),
        ..Scores::default()
    };
    assert!(matches!(
        compute_confidence(&partial),
        Err(Error::Validation(_))
    ));
    let bad = ConfidenceWeights {
        clip: -1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn quartile_filter_drops_exactly_a_floor_quarter() {
    for n in 0..1000 {
        let records = corpus(n, n as u64);
        let expected = n / 4;
        let (kept, dropped) = filter_bottom_quartile(records.clone()).unwrap();
        assert_eq!(dropped.len(), expected, "n = {n}");
        assert_eq!(kept.len(), n - expected, "n = {n}");

        // Oracle: sort ascending by confidence, ties by descending id, take the head.
        let mut by_conf: Vec<(f64, &str)> = records
            .iter()
            .map(|r| {
                let s = &r.scores;
                (
                    confidence_oracle(
                        s.clip.unwrap(),
                        s.self_consistency.unwrap(),
                        s.annotation.unwrap(),
                    ),
                    r.id.as_str(),
                )
            })
            .collect();
        by_conf.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(a.1)));
        let want: BTreeSet<&str> = by_conf[..expected].iter().map(|x| x.1).collect();
        let got: BTreeSet<&str> = dropped.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(got, want, "n = {n}");
    }
}

#[test]
fn split_assignment_matches_brute_force_on_10k_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let configs = [
        SplitConfig::default(),
        SplitConfig {
            tau_hi: 0.5,
            tau_lo: 0.5,
            multiqa_fraction: 0.0,
        },
        SplitConfig {
            tau_hi: 1.0,
            tau_lo: 0.0,
            multiqa_fraction: 1.0,
        },
    ];
    for i in 0..10_000 {
        let r = scored(format!("clip-{i}"), &mut rng);
        for cfg in &configs {
            assert_eq!(
                assign_split(&r, cfg).unwrap(),
                split_oracle(&r, cfg),
                "{i} {cfg:?}"
            );
        }
        assert_eq!(multiqa_draw(&r.id).to_bits(), draw_oracle(&r.id).to_bits());
    }
}

#[test]
fn split_needs_a_consistency_score_unless_task_annotated() {
    let mut r = SampleRecord::new("x", "v", "a");
    assert!(matches!(
        assign_split(&r, &SplitConfig::default()),
        Err(Error::Validation(_))
    ));
    r.has_task_annotation = true;
    assert_eq!(
        assign_split(&r, &SplitConfig::default()).unwrap(),
        SplitLabel::Tasks
    );
    let inverted = SplitConfig {
        tau_hi: 0.2,
        tau_lo: 0.6,
        multiqa_fraction: 0.3,
    };
    assert!(inverted.validate().is_err());
}

proptest! {
    #[test]
    fn confidence_is_monotone_in_each_score(c in 0.0f64..1.0, s in 0.0f64..1.0, a in 0.0f64..1.0, d in 0.0f64..1.0) {
        let base = compute_confidence(&Scores::new(c, s, a, 0.0)).unwrap();
        for bumped in [
            Scores::new((c + d).min(1.0), s, a, 0.0),
            Scores::new(c, (s + d).min(1.0), a, 0.0),
            Scores::new(c, s, (a + d).min(1.0), 0.0),
        ] {
            prop_assert!(compute_confidence(&bumped).unwrap() >= base);
        }
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn equal_weights_give_the_plain_mean(c in 0.0f64..1.0, s in 0.0f64..1.0, a in 0.0f64..1.0, w in 0.1f64..10.0) {
        let weights = ConfidenceWeights { clip: w, self_consistency: w, annotation: w };
        let got = compute_confidence_with(&Scores::new(c, s, a, 0.0), &weights).unwrap();
        prop_assert!((got - (c + s + a) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kept_records_outrank_dropped_ones(n in 0usize..64, seed in any::<u64>()) {
        let records = corpus(n, seed);
        let order = rank_order(&records, &ConfidenceWeights::default()).unwrap();
        let (kept, dropped) = filter_bottom_quartile(records.clone()).unwrap();
        let conf = |r: &SampleRecord| compute_confidence(&r.scores).unwrap();
        let worst_kept = kept.iter().map(conf).fold(f64::INFINITY, f64::min);
        prop_assert!(dropped.iter().all(|r| conf(r) <= worst_kept));
        let ranked: Vec<&str> = order.iter().map(|&i| records[i].id.as_str()).collect();
        let tail: BTreeSet<&str> = ranked[n - n / 4..].iter().copied().collect();
        prop_assert_eq!(tail, dropped.iter().map(|r| r.id.as_str()).collect::<BTreeSet<_>>());
    }

    #[test]
    fn rendering_is_a_pure_function_of_seed_and_record(seed in any::<u64>(), i in 0usize..50) {
        let set = TemplateSet::default();
        let mut r = synthetic_corpus(i + 1, 3).pop().unwrap();
        r.av_caption = Some("a dog runs [AV] barking".into());
        for t in &set.templates {
            prop_assert_eq!(render_prompt(&set, &t.id, &r, seed).unwrap(), render_prompt(&set, &t.id, &r, seed).unwrap());
        }
    }
}

fn curate(records: Vec<SampleRecord>) -> dolphin_core::avu::PipelineOutput {
    let templates = TemplateSet::default();
    let backends = Backends {
        scorer: &mut MockScorer::new(0),
        integrator: &mut MockIntegrator,
        templates: &templates,
    };
    run_pipeline(records, backends, &PipelineConfig::default()).unwrap()
}

#[test]
fn pipeline_partitions_the_kept_records() {
    let out = curate(synthetic_corpus(100, 0));
    assert_eq!(out.stats.input, 100);
    assert_eq!(out.stats.dropped, 25);
    assert_eq!(out.stats.kept, 75);
    assert_eq!(out.stats.total().records, 75);
    assert_eq!(out.stats.splits.len(), 5);
    for r in &out.records {
        let split = r.split.unwrap();
        assert!(!r.instructions.is_empty());
        assert!(r.av_caption.is_some() && r.integrator.is_some());
        assert_eq!(assign_split(r, &SplitConfig::default()).unwrap(), split);
    }
    let ids: BTreeSet<_> = out
        .records
        .iter()
        .map(|r| r.id.clone())
        .chain(out.dropped.iter().cloned())
        .collect();
    assert_eq!(ids.len(), 100);
    assert!(out.stats.table().contains("Total"));
}

#[test]
fn pipeline_is_deterministic() {
    assert_eq!(
        curate(synthetic_corpus(60, 2)),
        curate(synthetic_corpus(60, 2))
    );
}

#[test]
fn bad_records_are_quarantined_not_fatal() {
    let mut records = synthetic_corpus(12, 1);
    records[3].scores.clip = Some(7.0);
    records[5].id = records[4].id.clone();
    records[8].audio_caption = "   ".into();
    let out = curate(records);
    let stages: Vec<PipelineStage> = out.quarantined.iter().map(|q| q.stage).collect();
    assert!(stages.contains(&PipelineStage::Ingest));
    assert_eq!(out.stats.quarantined, out.quarantined.len());
    assert_eq!(out.stats.input, 12);
    assert_eq!(
        out.stats.kept + out.stats.dropped + out.stats.quarantined,
        12
    );
}

#[test]
fn invalid_configuration_aborts() {
    let templates = TemplateSet::default();
    let backends = Backends {
        scorer: &mut MockScorer::new(0),
        integrator: &mut MockIntegrator,
        templates: &templates,
    };
    let cfg = PipelineConfig {
        splits: SplitConfig {
            multiqa_fraction: 2.0,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(run_pipeline(vec![], backends, &cfg).is_err());
}
