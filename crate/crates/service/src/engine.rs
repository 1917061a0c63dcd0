use std::collections::HashMap;
use std::path::Path;

use partfit_core::dataprep::{DatasetPair, LabelTables, Part};
use partfit_core::error::{Error, Result};
use partfit_core::model::TrainedModel;
use partfit_core::partencoder::EncoderSnapshot;
use partfit_core::relnet::RelNetSnapshot;
use partfit_core::retrieval::WarehouseIndex;

/// Everything a session needs, shared read-only between requests.
pub struct Engine {
    pub labels: LabelTables,
    pub encoder: EncoderSnapshot,
    pub relnet: RelNetSnapshot,
    pub index: WarehouseIndex,
    parts: HashMap<u64, Part>,
}

impl Engine {
    /// Fails if the index was built with another encoder or lists a part
    /// with no geometry in `warehouse`.
    pub fn new(model: TrainedModel, index: WarehouseIndex, warehouse: Vec<Part>) -> Result<Self> {
        let (encoder, relnet) = model.snapshots()?;
        index.check_encoder(encoder.hash())?;
        let parts: HashMap<u64, Part> = warehouse.into_iter().map(|p| (p.part_id, p)).collect();
        if let Some(r) = index.records().iter().find(|r| !parts.contains_key(&r.part_id)) {
            return Err(Error::UnknownPart(r.part_id));
        }
        Ok(Engine {
            labels: model.labels,
            encoder,
            relnet,
            index,
            parts,
        })
    }

    pub fn load(checkpoint: &Path, index: &Path, dataset: &Path) -> Result<Self> {
        let model = TrainedModel::load(checkpoint)?;
        let index = WarehouseIndex::load(index)?;
        let data = DatasetPair::load(dataset)?;
        Engine::new(model, index, data.warehouse)
    }

    pub fn part(&self, part_id: u64) -> Option<&Part> {
        self.parts.get(&part_id)
    }

    pub fn part_label(&self, id: u16) -> &str {
        self.labels.part_labels.get(id as usize).map(String::as_str).unwrap_or("?")
    }

    pub fn class_name(&self, id: u16) -> &str {
        self.labels.classes.get(id as usize).map(String::as_str).unwrap_or("?")
    }
}
