//! Recurrent retrieval: fill slots one at a time, each chosen part joining
//! the context for the next ranking.

use super::{place_part, rank_candidates, RankedCandidate, SlotTarget, WarehouseIndex};
use crate::dataprep::Part;
use crate::error::{Error, Result};
use crate::geometry::{normalize_part, Normalization, PointCloud};
use crate::partencoder::{EncoderSnapshot, FeatureVec};
use crate::relnet::{assemble_tokens, RelNetSnapshot, TokenSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPart {
    /// Warehouse id for placed parts; `None` for parts of the original query.
    pub part_id: Option<u64>,
    pub feature: FeatureVec,
    pub centroid: [f32; 3],
    /// Points in the object frame.
    pub cloud: PointCloud,
    pub part_label: Option<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub slot: usize,
    pub shown: Vec<RankedCandidate>,
    pub choice: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub class_id: u16,
    pub parts: Vec<QueryPart>,
    pub slots: Vec<SlotTarget>,
    pub active: usize,
    pub history: Vec<Step>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advance {
    Placed { slot: usize },
    Complete,
}

impl Session {
    pub fn new(class_id: u16, parts: Vec<QueryPart>, slots: Vec<SlotTarget>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("session needs at least one part".into()));
        }
        for s in &slots {
            s.validate()?;
        }
        Ok(Session {
            class_id,
            parts,
            slots,
            active: 0,
            history: Vec::new(),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.active >= self.slots.len()
    }

    pub fn active_slot(&self) -> Option<&SlotTarget> {
        self.slots.get(self.active)
    }

    pub fn tokens(&self) -> Result<TokenSequence> {
        assemble_tokens(self.parts.iter().map(|p| (p.feature.as_slice(), p.centroid)))
    }

    /// Ranking for the active slot over the current context; empty once the
    /// session is complete. Does not modify the session.
    pub fn candidates(&self, index: &WarehouseIndex, model: &RelNetSnapshot, k: usize) -> Result<Vec<RankedCandidate>> {
        match self.active_slot() {
            Some(slot) => rank_candidates(&self.tokens()?, slot, self.class_id, index, model, k),
            None => Ok(Vec::new()),
        }
    }

    /// Records `ranking` as presented for the active slot. A newer ranking
    /// for the same slot replaces an unanswered one.
    pub fn show(&mut self, ranking: Vec<RankedCandidate>) {
        if self.is_complete() {
            return;
        }
        if let Some(last) = self.history.last_mut() {
            if last.slot == self.active && last.choice.is_none() {
                last.shown = ranking;
                return;
            }
        }
        self.history.push(Step {
            slot: self.active,
            shown: ranking,
            choice: None,
        });
    }
}

/// Places `part` in the active slot and moves to the next one. The part must
/// appear in the ranking last shown for this slot; otherwise the session is
/// left unchanged.
pub fn advance_session(session: &mut Session, part: &Part, index: &WarehouseIndex) -> Result<Advance> {
    if session.is_complete() {
        return Ok(Advance::Complete);
    }
    let slot_idx = session.active;
    let shown = match session.history.last() {
        Some(step) if step.slot == slot_idx && step.choice.is_none() => &step.shown,
        _ => {
            return Err(Error::RejectedChoice(format!(
                "no ranking has been shown for slot {slot_idx}"
            )))
        }
    };
    if !shown.iter().any(|c| c.part_id == part.part_id) {
        return Err(Error::RejectedChoice(format!(
            "part {} is not in the ranking shown for slot {slot_idx}",
            part.part_id
        )));
    }
    let record = index.get(part.part_id).ok_or(Error::UnknownPart(part.part_id))?;
    let slot = session.slots[slot_idx];
    let cloud = place_part(part, &slot)?;
    session.parts.push(QueryPart {
        part_id: Some(part.part_id),
        feature: record.feature.clone(),
        centroid: slot.centroid,
        cloud,
        part_label: Some(part.part_label),
    });
    if let Some(step) = session.history.last_mut() {
        step.choice = Some(part.part_id);
    }
    session.active += 1;
    Ok(Advance::Placed { slot: slot_idx })
}

/// A query object in its own frame, ready for a session.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedQuery {
    pub parts: Vec<QueryPart>,
    pub slots: Vec<SlotTarget>,
    /// Maps the caller's coordinates to the object frame.
    pub frame: Normalization,
}

/// Puts caller-supplied parts and slots into the object frame (whole object
/// centered in the unit ball, as in training) and encodes each part.
pub fn prepare_query(
    parts: Vec<(PointCloud, Option<u16>)>,
    slots: &[SlotTarget],
    encoder: &EncoderSnapshot,
) -> Result<PreparedQuery> {
    if parts.is_empty() {
        return Err(Error::InvalidInput("query needs at least one part".into()));
    }
    let whole = PointCloud::merge(parts.iter().map(|(c, _)| c))?;
    let (_, frame) = normalize_part(&whole)?;
    let inv = 1.0 / frame.scale;
    let offset = frame.centroid.map(|c| -c * inv);
    let mut out = Vec::with_capacity(parts.len());
    for (i, (cloud, label)) in parts.into_iter().enumerate() {
        let cloud = cloud.scaled_translated(inv, offset);
        let (normalized, pose) = normalize_part(&cloud).map_err(|e| Error::InvalidInput(format!("part {i}: {e}")))?;
        out.push(QueryPart {
            part_id: None,
            feature: encoder.encode(&normalized)?,
            centroid: pose.centroid.map(|v| v as f32),
            cloud,
            part_label: label,
        });
    }
    let slots = slots
        .iter()
        .map(|s| {
            s.validate()?;
            Ok(SlotTarget {
                centroid: std::array::from_fn(|k| ((s.centroid[k] as f64 - frame.centroid[k]) * inv) as f32),
                axis: s.axis,
                scale: s.scale.map(|v| (v as f64 * inv) as f32),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedQuery { parts: out, slots, frame })
}
