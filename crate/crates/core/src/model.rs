//! Trained model container: encoder, optional relation network, label tables
//! and kernel statistics in one checkpoint file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataprep::LabelTables;
use crate::error::{Error, Result};
use crate::gradcore::{Checkpoint, ParamStore};
use crate::partencoder::{EncoderConfig, EncoderSnapshot, PartEncoder};
use crate::relnet::{RelNet, RelNetConfig, RelNetSnapshot};
use crate::simloss::DistanceStats;

const FORMAT: &str = "partfit-model";

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    labels: LabelTables,
    encoder: EncoderConfig,
    relnet: Option<RelNetConfig>,
    stats: Option<DistanceStats>,
}

pub struct TrainedModel {
    pub labels: LabelTables,
    pub encoder: PartEncoder,
    pub relnet: Option<RelNet>,
    pub stats: Option<DistanceStats>,
}

impl TrainedModel {
    /// Digest of the encoder parameters; indexes record it.
    pub fn encoder_hash(&self) -> String {
        self.encoder.params.digest()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            format: FORMAT.into(),
            labels: self.labels.clone(),
            encoder: self.encoder.config.clone(),
            relnet: self.relnet.as_ref().map(|r| r.config.clone()),
            stats: self.stats,
        };
        let mut entries = self.encoder.params.clone().into_entries();
        if let Some(r) = &self.relnet {
            entries.extend(r.params.clone().into_entries());
        }
        Ok(Checkpoint {
            config: serde_json::to_value(meta)?,
            params: ParamStore::from_entries(entries),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_value(ck.config)
            .map_err(|e| Error::Config(format!("not a model checkpoint: {e}")))?;
        if meta.format != FORMAT {
            return Err(Error::Config(format!("unexpected checkpoint format {:?}", meta.format)));
        }
        let (enc, rel): (Vec<_>, Vec<_>) = ck
            .params
            .into_entries()
            .into_iter()
            .partition(|(name, _)| name.starts_with("enc."));
        let encoder = PartEncoder::from_params(meta.encoder, ParamStore::from_entries(enc))?;
        let relnet = match meta.relnet {
            Some(cfg) => Some(RelNet::from_params(cfg, ParamStore::from_entries(rel))?),
            None => None,
        };
        Ok(TrainedModel {
            labels: meta.labels,
            encoder,
            relnet,
            stats: meta.stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn encoder_snapshot(&self) -> EncoderSnapshot {
        self.encoder.snapshot()
    }

    /// Inference copies of both networks; fails before stage 2 has run.
    pub fn snapshots(&self) -> Result<(EncoderSnapshot, RelNetSnapshot)> {
        let rel = self
            .relnet
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no relation network; run train-relnet first".into()))?;
        Ok((self.encoder.snapshot(), rel.snapshot()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelTables {
        LabelTables {
            classes: vec!["a".into(), "b".into()],
            part_labels: vec!["x".into()],
        }
    }

    #[test]
    fn round_trip_keeps_hash_and_outputs() {
        let enc_cfg = EncoderConfig {
            point_widths: vec![8, 16],
            head_widths: vec![8],
            d: 8,
            ..Default::default()
        };
        let rel_cfg = RelNetConfig {
            d: 8,
            model_width: 8,
            heads: 2,
            layers: 1,
            ff_width: 8,
            head_hidden: 4,
            classes: 2,
        };
        let m = TrainedModel {
            labels: labels(),
            encoder: PartEncoder::new(enc_cfg, 1).unwrap(),
            relnet: Some(RelNet::new(rel_cfg, 2).unwrap()),
            stats: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pfck");
        m.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back.encoder_hash(), m.encoder_hash());
        assert_eq!(back.labels, m.labels);
        assert_eq!(
            back.relnet.unwrap().params.digest(),
            m.relnet.as_ref().unwrap().params.digest()
        );
        let stage1 = TrainedModel {
            relnet: None,
            ..TrainedModel::from_checkpoint(m.to_checkpoint().unwrap()).unwrap()
        };
        assert!(matches!(stage1.snapshots(), Err(Error::Usage(_))));
    }
}
