//! Request and response bodies.

use partfit_core::geometry::PoseMeta;
use partfit_core::retrieval::SlotTarget;
use serde::{Deserialize, Serialize};

/// Parts are point lists in any common frame; slots use the same frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub class: String,
    pub parts: Vec<PartPayload>,
    #[serde(default)]
    pub slots: Vec<SlotTarget>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartPayload {
    pub points: Vec<[f32; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub part_id: u64,
    pub revision: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPartView {
    /// Set for parts placed from the warehouse.
    pub part_id: Option<u64>,
    pub label: Option<String>,
    pub centroid: [f32; 3],
    pub points: Vec<[f32; 3]>,
    pub total_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub slot: usize,
    pub choice: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub revision: u64,
    pub class: String,
    pub complete: bool,
    pub active_slot: Option<usize>,
    pub parts: Vec<SessionPartView>,
    pub slots: Vec<SlotTarget>,
    pub history: Vec<StepView>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub part_id: u64,
    pub rank: usize,
    pub suitability: f64,
    pub log_prob: f64,
    pub label: String,
    pub object_class: String,
    /// Where the part would go, in the session's frame.
    pub placement: SlotTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePage {
    pub id: String,
    pub revision: u64,
    pub slot: Option<usize>,
    pub complete: bool,
    pub candidates: Vec<CandidateView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartView {
    pub part_id: u64,
    pub label: String,
    pub object_class: String,
    pub source_object: String,
    pub pose: PoseMeta,
    /// Normalized-frame points, decimated for transport.
    pub points: Vec<[f32; 3]>,
    pub total_points: usize,
}
