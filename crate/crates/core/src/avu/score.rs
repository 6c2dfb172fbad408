use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::avu::record::{check_unit, SampleRecord};
use crate::error::{Error, Result};
use crate::hash::hash_unit;

/// The four scoring passes a record goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    /// Video frames against the video caption.
    Clip,
    /// Caption against its own meta-information.
    SelfConsistency,
    /// Original annotation keywords against meta-information.
    Annotation,
    /// Video meta-information against audio meta-information.
    Consistency,
}

impl Filter {
    pub const ALL: [Filter; 4] = [
        Filter::Clip,
        Filter::SelfConsistency,
        Filter::Annotation,
        Filter::Consistency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Filter::Clip => "clip",
            Filter::SelfConsistency => "self_consistency",
            Filter::Annotation => "annotation",
            Filter::Consistency => "consistency",
        }
    }
}

/// A scoring backend. Implementations return values already mapped to `[0, 1]`
/// (see [`normalize_linear`]) and must be pure for a given record and
/// configuration.
pub trait Scorer {
    fn id(&self) -> &str;
    fn score(&mut self, filter: Filter, record: &SampleRecord) -> Result<f64>;
}

/// Hash-seeded stand-in for the real judges: the score is a pure function of
/// `(salt, record id, filter)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockScorer {
    pub salt: u64,
}

impl MockScorer {
    pub fn new(salt: u64) -> Self {
        MockScorer { salt }
    }
}

impl Scorer for MockScorer {
    fn id(&self) -> &str {
        "mock"
    }

    fn score(&mut self, filter: Filter, record: &SampleRecord) -> Result<f64> {
        Ok(hash_unit(&[
            &self.salt.to_le_bytes(),
            record.id.as_bytes(),
            filter.as_str().as_bytes(),
        ]))
    }
}

/// Maps a backend-native score in `[lo, hi]` linearly onto `[0, 1]`.
pub fn normalize_linear(value: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Validation(format!(
            "invalid score range [{lo}, {hi}]"
        )));
    }
    if !(lo..=hi).contains(&value) {
        return Err(Error::Validation(format!(
            "score {value} outside native range [{lo}, {hi}]"
        )));
    }
    Ok((value - lo) / (hi - lo))
}

/// Fills every absent score from `scorer`; scores already on the record are kept.
pub fn score_record(record: &mut SampleRecord, scorer: &mut dyn Scorer) -> Result<()> {
    for filter in Filter::ALL {
        if record.scores.get(filter).is_some() {
            continue;
        }
        let v = scorer.score(filter, record)?;
        check_unit(filter.as_str(), v).map_err(|e| Error::Backend {
            backend: String::from(scorer.id()),
            record: record.id.clone(),
            message: format!("{e}"),
            retryable: false,
        })?;
        record.scores.set(filter, v);
    }
    Ok(())
}

/// Relative importance of the three quality filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceWeights {
    pub clip: f64,
    pub self_consistency: f64,
    pub annotation: f64,
}

impl Default for ConfidenceWeights {
    fn default() -> Self {
        ConfidenceWeights {
            clip: 2.0,
            self_consistency: 1.0,
            annotation: 5.0,
        }
    }
}

impl ConfidenceWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.clip, self.self_consistency, self.annotation];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Validation(format!(
                "confidence weights must be >= 0 with a positive sum, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Weighted mean of the clip, self-consistency and annotation scores with
/// the default 2/1/5 weights.
pub fn compute_confidence(scores: &crate::avu::Scores) -> Result<f64> {
    compute_confidence_with(scores, &ConfidenceWeights::default())
}

pub fn compute_confidence_with(scores: &crate::avu::Scores, w: &ConfidenceWeights) -> Result<f64> {
    let get = |name: &str, v: Option<f64>| -> Result<f64> {
        let v = v.ok_or_else(|| Error::Validation(format!("score `{name}` is missing")))?;
        check_unit(name, v)?;
        Ok(v)
    };
    let c = get("clip", scores.clip)?;
    let s = get("self_consistency", scores.self_consistency)?;
    let a = get("annotation", scores.annotation)?;
    Ok((w.clip * c + w.self_consistency * s + w.annotation * a)
        / (w.clip + w.self_consistency + w.annotation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avu::Scores;

    #[test]
    fn confidence_examples() {
        assert_eq!(
            compute_confidence(&Scores::new(1.0, 1.0, 1.0, 0.0)).unwrap(),
            1.0
        );
        assert_eq!(
            compute_confidence(&Scores::new(0.0, 0.0, 0.0, 0.0)).unwrap(),
            0.0
        );
        let c = compute_confidence(&Scores::new(0.9, 0.5, 0.8, 0.0)).unwrap();
        assert!((c - 0.7875).abs() < 1e-15);
    }

    #[test]
    fn missing_score_is_a_validation_error() {
        let s = Scores {
            clip: Some(0.5),
            ..Scores::default()
        };
        assert!(matches!(compute_confidence(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn mock_is_deterministic_and_in_range() {
        let r = SampleRecord::new("clip-7", "a dog runs", "barking");
        let mut m = MockScorer::new(3);
        for f in Filter::ALL {
            let a = m.score(f, &r).unwrap();
            assert_eq!(a.to_bits(), m.score(f, &r).unwrap().to_bits());
            assert!((0.0..1.0).contains(&a));
        }
    }

    #[test]
    fn scoring_keeps_existing_values() {
        let mut r = SampleRecord::new("x", "v", "a");
        r.scores.clip = Some(0.25);
        score_record(&mut r, &mut MockScorer::new(0)).unwrap();
        assert_eq!(r.scores.clip, Some(0.25));
        assert!(r.scores.consistency.is_some());
    }

    #[test]
    fn judge_scale_maps_linearly() {
        assert_eq!(normalize_linear(1.0, 1.0, 5.0).unwrap(), 0.0);
        assert_eq!(normalize_linear(3.0, 1.0, 5.0).unwrap(), 0.5);
        assert!(normalize_linear(6.0, 1.0, 5.0).is_err());
    }
}
