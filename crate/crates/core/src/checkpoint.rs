//! Checkpoint directories: a JSON manifest plus one little-endian blob per
//! parameter group (`encoder`, `connector`, `decoder`, and `optimizer` when a
//! training state is saved).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::attach_lora;
use crate::model::{KeypointModel, ModelConfig};
use crate::optim::{AdamW, Moments};
use crate::synth_data::hex_digest;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Stored values are `f64`; resuming must reproduce training bit for bit.
pub const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset within the group blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedState {
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub cursor: usize,
    pub step: u64,
    pub losses: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub adapters: Vec<AdapterEntry>,
    pub tensors: Vec<TensorEntry>,
    pub groups: BTreeMap<String, GroupEntry>,
    pub state: Option<SavedState>,
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn push_tensor(blobs: &mut BTreeMap<String, Vec<u8>>, entries: &mut Vec<TensorEntry>, group: &str, name: &str, t: &Tensor) {
    let blob = blobs.entry(group.to_string()).or_default();
    entries.push(TensorEntry {
        name: name.to_string(),
        group: group.to_string(),
        shape: t.shape.clone(),
        dtype: DTYPE.to_string(),
        offset: blob.len(),
    });
    for v in &t.data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes weights, and the optimizer state when `state` is given, into `dir`.
pub fn save(dir: &Path, model: &KeypointModel, state: Option<(&TrainConfig, &TrainState)>) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut tensors = Vec::new();
    let mut adapters = Vec::new();
    model.visit(&mut |name, t| push_tensor(&mut blobs, &mut tensors, group_of(name), name, t));
    let mut probe = model.clone();
    for a in crate::lora::adapters(&mut probe) {
        adapters.push(AdapterEntry {
            target: a.target,
            rank: a.rank,
            alpha: a.alpha,
        });
    }
    let saved = state.map(|(cfg, st)| {
        for (name, m) in &st.optimizer.moments {
            let n = m.m.len();
            push_tensor(&mut blobs, &mut tensors, "optimizer", &format!("{name}#m"), &Tensor::from_vec(&[n], m.m.clone()));
            push_tensor(&mut blobs, &mut tensors, "optimizer", &format!("{name}#v"), &Tensor::from_vec(&[n], m.v.clone()));
        }
        SavedState {
            train: cfg.clone(),
            seed: st.seed,
            epoch: st.epoch,
            cursor: st.cursor,
            step: st.optimizer.step,
            losses: st.losses.clone(),
        }
    });
    let mut groups = BTreeMap::new();
    for (group, blob) in &blobs {
        let file = format!("{group}.bin");
        let path = dir.join(&file);
        fs::write(&path, blob).map_err(Error::io(&path))?;
        groups.insert(
            group.clone(),
            GroupEntry {
                file,
                bytes: blob.len(),
                sha256: hex_digest(blob),
            },
        );
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config_hash: model.config.hash(),
        model: model.config.clone(),
        adapters,
        tensors,
        groups,
        state: saved,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(Error::io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Integrity(format!("{}: missing format_version", path.display())))?;
    if found != CHECKPOINT_FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: found as u32,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    if manifest.config_hash != manifest.model.hash() {
        return Err(Error::Integrity("manifest config hash does not match its model config".into()));
    }
    Ok(manifest)
}

struct Blobs(BTreeMap<String, Vec<u8>>);

impl Blobs {
    fn read(dir: &Path, manifest: &Manifest) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (group, entry) in &manifest.groups {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(Error::io(&path))?;
            if bytes.len() != entry.bytes || hex_digest(&bytes) != entry.sha256 {
                return Err(Error::Integrity(format!("{} does not match its manifest digest", path.display())));
            }
            out.insert(group.clone(), bytes);
        }
        Ok(Blobs(out))
    }

    fn tensor(&self, e: &TensorEntry) -> Result<Tensor> {
        if e.dtype != DTYPE {
            return Err(Error::Integrity(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let blob = self
            .0
            .get(&e.group)
            .ok_or_else(|| Error::Integrity(format!("{}: missing group {}", e.name, e.group)))?;
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > blob.len() {
            return Err(Error::Integrity(format!("{}: data runs past the end of its blob", e.name)));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Tensor::from_vec(&e.shape, data))
    }
}

pub struct Loaded {
    pub manifest: Manifest,
    pub model: KeypointModel,
    pub state: Option<(TrainConfig, TrainState)>,
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    let blobs = Blobs::read(dir, &manifest)?;
    let mut model = KeypointModel::new(manifest.model.clone(), None, 0)?;
    let mut by_rank: BTreeMap<(usize, u64), Vec<String>> = BTreeMap::new();
    for a in &manifest.adapters {
        by_rank.entry((a.rank, a.alpha.to_bits())).or_default().push(a.target.clone());
    }
    for ((rank, alpha), targets) in by_rank {
        attach_lora(&mut model, &targets, rank, f64::from_bits(alpha), &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    let mut weights: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    let mut moments: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for e in &manifest.tensors {
        if e.group == "optimizer" {
            let (name, part) = e
                .name
                .rsplit_once('#')
                .ok_or_else(|| Error::Integrity(format!("bad optimizer entry {}", e.name)))?;
            let slot = moments.entry(name.to_string()).or_default();
            let data = blobs.tensor(e)?.data;
            match part {
                "m" => slot.0 = Some(data),
                "v" => slot.1 = Some(data),
                _ => return Err(Error::Integrity(format!("bad optimizer entry {}", e.name))),
            }
        } else if weights.insert(&e.name, e).is_some() {
            return Err(Error::Integrity(format!("duplicate tensor {}", e.name)));
        }
    }
    let mut result = Ok(());
    let mut seen = 0;
    model.visit_mut(&mut |name, t| {
        if result.is_err() {
            return;
        }
        result = match weights.get(name) {
            Some(e) if e.shape == t.shape => blobs.tensor(e).map(|loaded| {
                *t = loaded;
                seen += 1;
            }),
            Some(e) => Err(Error::Integrity(format!("{name}: shape {:?} expected {:?}", e.shape, t.shape))),
            None => Err(Error::Integrity(format!("checkpoint lacks tensor {name}"))),
        };
    });
    result?;
    if seen != weights.len() {
        return Err(Error::Integrity("checkpoint has tensors the model does not".into()));
    }
    let state = match &manifest.state {
        None => None,
        Some(s) => {
            let mut optimizer = AdamW {
                step: s.step,
                moments: BTreeMap::new(),
            };
            for (name, (m, v)) in moments {
                let (Some(m), Some(v)) = (m, v) else {
                    return Err(Error::Integrity(format!("incomplete moments for {name}")));
                };
                optimizer.moments.insert(name, Moments { m, v });
            }
            Some((
                s.train.clone(),
                TrainState {
                    seed: s.seed,
                    epoch: s.epoch,
                    cursor: s.cursor,
                    optimizer,
                    losses: s.losses.clone(),
                },
            ))
        }
    };
    Ok(Loaded {
        manifest,
        model,
        state,
    })
}
