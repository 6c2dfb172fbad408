use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::avu::score::{compute_confidence_with, ConfidenceWeights};
use crate::avu::SampleRecord;
use crate::error::Result;

/// Indices of `records` from most to least confident; equal confidences are
/// ordered by ascending id.
pub fn rank_order(records: &[SampleRecord], weights: &ConfidenceWeights) -> Result<Vec<usize>> {
    let conf = records
        .iter()
        .map(|r| compute_confidence_with(&r.scores, weights))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| {
        conf[j]
            .partial_cmp(&conf[i])
            .unwrap_or(Ordering::Equal)
            .then_with(|| records[i].id.cmp(&records[j].id))
    });
    Ok(order)
}

/// Drops the `⌊n/4⌋` least confident records. Both halves keep input order.
pub fn filter_bottom_quartile(
    records: Vec<SampleRecord>,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    filter_bottom_quartile_with(records, &ConfidenceWeights::default())
}

pub fn filter_bottom_quartile_with(
    records: Vec<SampleRecord>,
    weights: &ConfidenceWeights,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let order = rank_order(&records, weights)?;
    let cut = records.len() - records.len() / 4;
    let mut drop = alloc::vec![false; records.len()];
    for &i in &order[cut..] {
        drop[i] = true;
    }
    let (mut kept, mut dropped) = (
        Vec::with_capacity(cut),
        Vec::with_capacity(records.len() - cut),
    );
    for (r, d) in records.into_iter().zip(drop) {
        if d {
            dropped.push(r);
        } else {
            kept.push(r);
        }
    }
    Ok((kept, dropped))
}
