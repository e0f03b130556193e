//! Adapter-only checkpoints: `metadata.json` plus one container file per
//! adapter tensor under `tensors/`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::finetune::LogEntry;
use super::loss::LossWeights;
use crate::backbone::{AdapterConfig, AdapterSet, LoraAdapter, Projection, TrainableBackbone};
use crate::container::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub backbone: String,
    pub base_weight_hash: String,
    pub adapter: AdapterConfig,
    pub scales: BTreeMap<Projection, f64>,
    pub weights: LossWeights,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub tensors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub adapters: AdapterSet,
}

fn tensor_file(name: &str) -> String {
    format!("tensors/{name}.dmlt")
}

/// Writes the adapters and metadata; the training log goes to `train_log.jsonl`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    adapters: &AdapterSet,
    mut meta: CheckpointMeta,
    log: &[LogEntry],
) -> Result<()> {
    let dir = dir.as_ref();
    let tensors_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensors_dir).map_err(|e| Error::io(&tensors_dir, e))?;
    meta.adapter = adapters.config.clone();
    meta.scales = adapters.layers.iter().map(|(p, l)| (*p, l.scale)).collect();
    meta.tensors.clear();
    for (name, array) in adapters.tensors() {
        let (r, c) = array.dim();
        Tensor::from_f64(vec![r, c], array.iter().copied())?.save(dir.join(tensor_file(&name)))?;
        meta.tensors.push(name);
    }
    let meta_path = dir.join("metadata.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
    let mut lines = String::new();
    for entry in log {
        lines.push_str(&serde_json::to_string(entry)?);
        lines.push('\n');
    }
    let log_path = dir.join("train_log.jsonl");
    std::fs::write(&log_path, lines).map_err(|e| Error::io(&log_path, e))
}

fn load_matrix(dir: &Path, name: &str) -> Result<Array2<f64>> {
    let t = Tensor::load(dir.join(tensor_file(name)))?;
    let [r, c] = t.dims[..] else {
        return Err(Error::Checkpoint(format!("{name} is not a matrix: {:?}", t.dims)));
    };
    Array2::from_shape_vec((r, c), t.data.iter().map(|&v| v as f64).collect())
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}

/// Reads a checkpoint. When `backbone` is given its identity and base-weight
/// hash must match and the adapters are attached to it.
pub fn load_checkpoint(dir: impl AsRef<Path>, backbone: Option<&mut dyn TrainableBackbone>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let meta_path = dir.join("metadata.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    meta.adapter.validate()?;
    let mut layers = BTreeMap::new();
    for p in &meta.adapter.targets {
        let scale = *meta
            .scales
            .get(p)
            .ok_or_else(|| Error::Checkpoint(format!("missing scale for {p}")))?;
        layers.insert(
            *p,
            LoraAdapter {
                down: load_matrix(dir, &format!("{p}.down"))?,
                up: load_matrix(dir, &format!("{p}.up"))?,
                scale,
            },
        );
    }
    let adapters = AdapterSet {
        config: meta.adapter.clone(),
        layers,
    };
    if let Some(b) = backbone {
        if b.id() != meta.backbone {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {:?}, backbone is {:?}",
                meta.backbone,
                b.id()
            )));
        }
        if b.base_weight_hash() != meta.base_weight_hash {
            return Err(Error::Checkpoint(
                "base weights differ from the ones the checkpoint was trained on".into(),
            ));
        }
        b.attach_adapters(adapters.clone())?;
    }
    Ok(Checkpoint { meta, adapters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyBackbone;

    fn meta(b: &ToyBackbone) -> CheckpointMeta {
        CheckpointMeta {
            backbone: "toy".into(),
            base_weight_hash: b.base_weight_hash(),
            adapter: AdapterConfig::default(),
            scales: BTreeMap::new(),
            weights: LossWeights::default(),
            steps: 0,
            lr: 1e-4,
            seed: 0,
            tensors: vec![],
        }
    }

    #[test]
    fn round_trip_attaches_adapters() {
        let mut toy = ToyBackbone::new("toy", 1, (8, 8));
        let mut adapters = toy.init_adapters(&AdapterConfig::default(), 4).unwrap();
        adapters.layers.get_mut(&Projection::Value).unwrap().up.fill(0.25);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &adapters, meta(&toy), &[]).unwrap();
        let ck = load_checkpoint(dir.path(), Some(&mut toy)).unwrap();
        assert_eq!(ck.meta.tensors, ["key.down", "key.up", "value.down", "value.up"]);
        let back = toy.adapters().unwrap();
        for (name, a) in adapters.tensors() {
            let b = back.tensors().into_iter().find(|(n, _)| *n == name).unwrap().1;
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn rejects_foreign_base_weights() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let adapters = toy.init_adapters(&AdapterConfig::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut m = meta(&toy);
        m.base_weight_hash = "00".into();
        save_checkpoint(dir.path(), &adapters, m, &[]).unwrap();
        let mut fresh = ToyBackbone::new("toy", 1, (8, 8));
        assert!(matches!(
            load_checkpoint(dir.path(), Some(&mut fresh)),
            Err(Error::Checkpoint(_))
        ));
    }
}
