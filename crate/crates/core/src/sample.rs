//! Multimodal input samples.

use mres_numerics::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encodings::{ChannelDescriptor, ChannelKind};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::temporal::TimeStamps;
use crate::tensorfile::TensorFile;

pub const SAMPLE_KIND: &str = "mres-sample";

/// Per-modality metadata stored alongside the rasters of a sample file.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModalityMeta {
    name: String,
    channels: Vec<ChannelDescriptor>,
    gsd: f64,
    days: TimeStamps,
}

/// One sensor stream of a sample: `data` is `T × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityData {
    pub name: String,
    pub channels: Vec<ChannelDescriptor>,
    pub gsd: f64,
    pub days: TimeStamps,
    pub data: Tensor,
}

impl ModalityData {
    pub fn new(name: impl Into<String>, channels: Vec<ChannelDescriptor>, gsd: f64, days: TimeStamps, data: Tensor) -> Result<Self> {
        let name = name.into();
        let s = data.shape();
        if s.len() != 4 || s[0] != days.len() || s[1] != channels.len() || s[2] == 0 || s[3] == 0 {
            return Err(dim_err(format!(
                "modality `{name}`: data {s:?} for {} dates and {} channels",
                days.len(),
                channels.len()
            )));
        }
        if !(gsd > 0.0) {
            return Err(arg_err(format!("modality `{name}`: GSD must be positive, got {gsd}")));
        }
        let kind = channels[0].kind();
        if channels.iter().any(|c| c.kind() != kind) {
            return Err(arg_err(format!("modality `{name}` mixes channel kinds")));
        }
        Ok(Self { name, channels, gsd, days, data })
    }

    pub fn kind(&self) -> ChannelKind {
        self.channels[0].kind()
    }

    pub fn t(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub dataset: String,
    pub modalities: Vec<ModalityData>,
}

impl MultimodalSample {
    pub fn modality(&self, name: &str) -> Option<&ModalityData> {
        self.modalities.iter().find(|m| m.name == name)
    }

    /// The sample restricted to the named modalities, in the given order.
    pub fn subset(&self, names: &[String]) -> Result<Self> {
        let modalities = names
            .iter()
            .map(|n| {
                self.modality(n)
                    .cloned()
                    .ok_or_else(|| arg_err(format!("sample from `{}` has no modality `{n}`", self.dataset)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dataset: self.dataset.clone(), modalities })
    }

    /// Rasters are stored in 32 bits; metadata carries channels, GSD and dates.
    pub fn to_tensor_file(&self) -> TensorFile {
        let meta: Vec<ModalityMeta> = self
            .modalities
            .iter()
            .map(|m| ModalityMeta { name: m.name.clone(), channels: m.channels.clone(), gsd: m.gsd, days: m.days.clone() })
            .collect();
        TensorFile {
            metadata: json!({"kind": SAMPLE_KIND, "dataset": self.dataset, "modalities": meta}),
            tensors: self.modalities.iter().map(|m| (m.name.clone(), m.data.clone())).collect(),
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta = &file.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(SAMPLE_KIND) {
            return Err(Error::Format("file is not a sample".into()));
        }
        let dataset = meta.get("dataset").and_then(|d| d.as_str()).unwrap_or_default().to_string();
        let entries: Vec<ModalityMeta> = serde_json::from_value(meta.get("modalities").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("sample modalities: {e}")))?;
        let modalities = entries
            .into_iter()
            .map(|m| {
                let data = file
                    .get(&m.name)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("sample has no raster for `{}`", m.name)))?;
                ModalityData::new(m.name, m.channels, m.gsd, m.days, data)
            })
            .collect::<Result<Vec<_>>>()?;
        if modalities.is_empty() {
            return Err(Error::Format("sample has no modalities".into()));
        }
        Ok(Self { dataset, modalities })
    }
}
