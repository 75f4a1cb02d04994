//! On-disk dataset layout: `<root>/<provenance>/<state-id>/<condition>/<seed>.bin`
//! holding raw little-endian payloads (`u8` image planes or `f32` audio), plus
//! `<root>/index.json` describing every file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CollectionState, Condition, EnvError, LabeledDataset, Payload, Provenance, RawSample, Result};
use crate::dsp::Image;

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub provenance: Provenance,
    pub state: String,
    pub condition: Condition,
    pub seed: u64,
    pub path: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| EnvError::Store(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EnvError::Store(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EnvError::Store(e.to_string()))?;
        std::fs::write(root.join(INDEX_FILE), text + "\n")?;
        Ok(())
    }

    /// State ids listed for a provenance, each once.
    pub fn state_ids(&self, provenance: Provenance) -> Vec<String> {
        let mut seen = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.provenance == provenance) {
            seen.entry(e.state.clone()).or_insert(());
        }
        seen.into_keys().collect()
    }
}

pub fn sample_path(sample: &RawSample) -> PathBuf {
    PathBuf::from(sample.provenance.slug())
        .join(sample.state.id())
        .join(sample.condition.slug())
        .join(format!("{}.bin", sample.seed))
}

/// Writes every sample of `dataset` under `root` and returns their index
/// entries.
pub fn write_dataset(root: &Path, dataset: &LabeledDataset) -> Result<Vec<IndexEntry>> {
    dataset.samples().iter().map(|s| write_sample(root, s)).collect()
}

pub fn write_sample(root: &Path, sample: &RawSample) -> Result<IndexEntry> {
    let rel = sample_path(sample);
    let path = root.join(&rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (bytes, dtype, shape, sample_rate) = match &sample.payload {
        Payload::Image(img) => (img.data.clone(), Dtype::U8, vec![3, img.height, img.width], None),
        Payload::Audio { sample_rate, samples } => (
            samples.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Dtype::F32,
            vec![samples.len()],
            Some(*sample_rate),
        ),
    };
    std::fs::write(&path, bytes)?;
    Ok(IndexEntry {
        provenance: sample.provenance,
        state: sample.state.id(),
        condition: sample.condition,
        seed: sample.seed,
        path: rel.to_string_lossy().replace('\\', "/"),
        dtype,
        shape,
        sample_rate,
    })
}

pub fn read_sample(root: &Path, entry: &IndexEntry) -> Result<RawSample> {
    let path = root.join(&entry.path);
    let bytes = std::fs::read(&path).map_err(|e| EnvError::Store(format!("cannot read {}: {e}", path.display())))?;
    let bad = |why: &str| EnvError::Store(format!("{}: {why}", path.display()));
    let payload = match (entry.dtype, entry.shape.as_slice()) {
        (Dtype::U8, &[3, h, w]) => {
            if bytes.len() != 3 * h * w {
                return Err(bad("image size does not match index"));
            }
            Payload::Image(Image::from_data(h, w, bytes)?)
        }
        (Dtype::F32, &[n]) => {
            if bytes.len() != 4 * n {
                return Err(bad("audio length does not match index"));
            }
            Payload::Audio {
                sample_rate: entry.sample_rate.ok_or_else(|| bad("audio entry without sample rate"))?,
                samples: bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            }
        }
        _ => return Err(bad("unsupported dtype/shape")),
    };
    Ok(RawSample {
        state: entry.state.parse()?,
        condition: entry.condition,
        provenance: entry.provenance,
        seed: entry.seed,
        payload,
    })
}

/// Loads the first `shots` samples per condition of each state, in index
/// order.
pub fn load_dataset(root: &Path, provenance: Provenance, states: &[CollectionState], shots: usize) -> Result<LabeledDataset> {
    let index = DatasetIndex::load(root)?;
    let mut samples = Vec::new();
    for &state in states {
        for condition in Condition::ALL {
            let entries: Vec<&IndexEntry> = index
                .entries
                .iter()
                .filter(|e| e.provenance == provenance && e.state == state.id() && e.condition == condition)
                .take(shots)
                .collect();
            if entries.len() < shots {
                return Err(EnvError::Store(format!(
                    "{} {}/{} has {} of {shots} samples",
                    provenance.slug(),
                    state.id(),
                    condition.slug(),
                    entries.len()
                )));
            }
            for e in entries {
                samples.push(read_sample(root, e)?);
            }
        }
    }
    LabeledDataset::from_samples(states.to_vec(), shots, provenance, samples)
}
