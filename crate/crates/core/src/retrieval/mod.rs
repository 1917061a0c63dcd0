//! Suitability ranking of warehouse parts for a slot in an incomplete object,
//! placement of the chosen part, and multi-slot sessions.
//!
//! A candidate is scored by appending its token to the query's tokens, with
//! the centroid code taken from the slot, and reading the classifier's
//! probability of the query class.

mod index;
mod session;

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use index::{build_index, IndexRecord, WarehouseIndex, MAGIC, VERSION};
pub use session::{advance_session, prepare_query, Advance, PreparedQuery, QueryPart, Session, Step};

use crate::dataprep::Part;
use crate::error::{Error, Result};
use crate::geometry::{rotation_between, PointCloud};
use crate::relnet::{log_softmax, RelNetSnapshot, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub part_id: u64,
    /// Probability of the query class with this part in the slot.
    pub suitability: f64,
    /// Natural log of `suitability`; the sort key, since probabilities near
    /// one collapse to equal floats.
    pub log_prob: f64,
    /// Raw logit of the query class, for debugging.
    pub logit: f64,
    /// Zero-based position in the ranking.
    pub rank: usize,
}

/// Where a missing part goes, in the query object's frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotTarget {
    pub centroid: [f32; 3],
    #[serde(default)]
    pub axis: Option<[f32; 3]>,
    #[serde(default)]
    pub scale: Option<f32>,
}

impl SlotTarget {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
        if !finite(&self.centroid) || !self.axis.is_none_or(|a| finite(&a)) || !self.scale.is_none_or(f32::is_finite) {
            return Err(Error::NonFinite("slot target".into()));
        }
        if let Some(a) = self.axis {
            if a.iter().map(|v| v * v).sum::<f32>() < 1e-12 {
                return Err(Error::InvalidInput("slot axis must be non-zero".into()));
            }
        }
        if self.scale.is_some_and(|s| s <= 0.0) {
            return Err(Error::InvalidInput("slot scale must be positive".into()));
        }
        Ok(())
    }
}

/// Orders by descending log-probability, then ascending part id.
fn ranking_order(a: &RankedCandidate, b: &RankedCandidate) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then(a.part_id.cmp(&b.part_id))
}

/// Scores every index part in the slot and returns the best `k` (all of them
/// when `k` exceeds the index size).
pub fn rank_candidates(
    query: &TokenSequence,
    slot: &SlotTarget,
    class_id: u16,
    index: &WarehouseIndex,
    model: &RelNetSnapshot,
    k: usize,
) -> Result<Vec<RankedCandidate>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if index.d() != model.config().d {
        return Err(Error::Config(format!(
            "index features have width {}, model expects {}",
            index.d(),
            model.config().d
        )));
    }
    let class = class_id as usize;
    if class >= model.config().classes {
        return Err(Error::InvalidInput(format!(
            "class {class_id} outside the model's {} classes",
            model.config().classes
        )));
    }
    slot.validate()?;
    let ctx = model.context(query, slot.centroid)?;
    let mut out = index
        .records()
        .par_iter()
        .map(|r| {
            let logits = model.score_candidate(&ctx, &r.feature)?;
            let lp = log_softmax(&logits)[class];
            Ok(RankedCandidate {
                part_id: r.part_id,
                suitability: lp.exp(),
                log_prob: lp,
                logit: logits[class],
                rank: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(ranking_order);
    out.truncate(k);
    for (i, c) in out.iter_mut().enumerate() {
        c.rank = i;
    }
    Ok(out)
}

/// Moves a normalized part into the object frame: aligns its canonical axis
/// with the slot axis, scales it and translates it to the slot centroid.
/// Without a slot axis the part keeps its orientation; without a slot scale
/// it keeps its own.
pub fn place_part(part: &Part, slot: &SlotTarget) -> Result<PointCloud> {
    slot.validate()?;
    let scale = slot.scale.unwrap_or(part.pose.scale) as f64;
    let c = slot.centroid.map(|v| v as f64);
    let cloud = match slot.axis {
        Some(axis) => {
            let r = rotation_between(part.pose.axis.map(|v| v as f64), axis.map(|v| v as f64));
            part.cloud.rotated(&r)
        }
        None => part.cloud.clone(),
    };
    Ok(cloud.scaled_translated(scale, c))
}

/// The slot a part occupies in its own object.
pub fn own_slot(part: &Part) -> SlotTarget {
    SlotTarget {
        centroid: part.pose.centroid,
        axis: Some(part.pose.axis),
        scale: Some(part.pose.scale),
    }
}

#[cfg(test)]
mod tests;
