//! Self-describing binary checkpoint container.
//!
//! Layout: magic `VSMC`, format version u32, entry count u32, then entries of
//! (name length u32, UTF-8 name, dtype tag u8, rank u32, extents u64 each,
//! little-endian payload). Everything needed to resume or evaluate a run is
//! stored: parameters, optimizer moments, batch-norm running statistics, the
//! memory store, RNG bookkeeping and a JSON snapshot of the config.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use vsm_core::scalar::{Dtype, Scalar};
use vsm_core::tensor::Tensor;
use vsm_core::trainer::{
    param_names, param_tensors, param_tensors_mut, Adam, TrainConfig, TrainerState,
};

const MAGIC: &[u8; 4] = b"VSMC";
const VERSION: u32 = 1;

/// One raw container entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Entry {
    fn from_tensor<E: Scalar>(t: &Tensor<E>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * E::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Entry {
            dtype: E::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    fn to_tensor<E: Scalar>(&self, name: &str) -> Result<Tensor<E>> {
        if self.dtype != E::DTYPE {
            bail!("entry {name}: dtype {:?} does not match run precision", self.dtype);
        }
        let data: Vec<E> = self
            .payload
            .chunks_exact(E::DTYPE.size())
            .map(E::read_le)
            .collect();
        Tensor::new(self.shape.clone(), data)
            .with_context(|| format!("entry {name}: shape/payload mismatch"))
    }

    fn from_i64s(values: &[i64]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * 8);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Entry {
            dtype: Dtype::I64,
            shape: vec![values.len()],
            payload,
        }
    }

    fn to_i64s(&self, name: &str) -> Result<Vec<i64>> {
        if self.dtype != Dtype::I64 {
            bail!("entry {name}: expected i64");
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn from_bytes(bytes: &[u8]) -> Self {
        Entry {
            dtype: Dtype::Bytes,
            shape: vec![bytes.len()],
            payload: bytes.to_vec(),
        }
    }
}

/// Ordered name -> entry map (BTreeMap keeps writes canonical).
pub type Container = BTreeMap<String, Entry>;

pub fn write_container(path: &Path, entries: &Container) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, entry) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(entry.dtype.tag());
        buf.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
        for &d in &entry.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&entry.payload);
    }
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("cannot create checkpoint {}", path.display()))?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("cannot open checkpoint {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            bail!("checkpoint truncated at byte {}", *pos);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        bail!("not a checkpoint container (bad magic)");
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        bail!("unsupported checkpoint version {version} (expected {VERSION})");
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut entries = Container::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .context("entry name is not UTF-8")?;
        let tag = take(&mut pos, 1)?[0];
        let dtype = Dtype::from_tag(tag)
            .with_context(|| format!("entry {name}: unknown dtype tag {tag}"))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut pos, numel * dtype.size())?.to_vec();
        entries.insert(
            name,
            Entry {
                dtype,
                shape,
                payload,
            },
        );
    }
    if pos != bytes.len() {
        bail!("trailing bytes after the last checkpoint entry");
    }
    Ok(entries)
}

/// Serialize a full trainer state.
pub fn save_state<E: Scalar>(path: &Path, state: &TrainerState<E>) -> Result<()> {
    let mut entries = Container::new();
    entries.insert(
        "config.json".into(),
        Entry::from_bytes(serde_json::to_string_pretty(&state.config)?.as_bytes()),
    );
    entries.insert(
        "meta.adam_t".into(),
        Entry::from_i64s(&[state.adam.t as i64]),
    );
    entries.insert(
        "meta.episodes_done".into(),
        Entry::from_i64s(&[state.episodes_done as i64]),
    );
    entries.insert(
        "meta.seed".into(),
        Entry::from_i64s(&[state.config.seed as i64]),
    );

    let names = param_names(&state.models);
    let tensors = param_tensors(&state.models, &state.store);
    for ((name, tensor), (m, v)) in names
        .iter()
        .zip(&tensors)
        .zip(state.adam.m.iter().zip(&state.adam.v))
    {
        entries.insert(format!("param.{name}"), Entry::from_tensor(*tensor));
        entries.insert(format!("adam_m.{name}"), Entry::from_tensor(m));
        entries.insert(format!("adam_v.{name}"), Entry::from_tensor(v));
    }
    for (i, block) in state.models.networks.encoder.blocks.iter().enumerate() {
        if let Some(bn) = &block.bn {
            entries.insert(
                format!("state.encoder.block{i}.bn_mean"),
                Entry::from_tensor(&bn.running_mean),
            );
            entries.insert(
                format!("state.encoder.block{i}.bn_var"),
                Entry::from_tensor(&bn.running_var),
            );
        }
    }

    entries.insert(
        "memory.class_ids".into(),
        Entry::from_i64s(&state.store.class_ids()),
    );
    entries.insert(
        "memory.keys".into(),
        Entry::from_tensor(&state.store.materialized_keys()),
    );
    entries.insert(
        "memory.alpha".into(),
        Entry::from_tensor(&Tensor::scalar(state.store.alpha)),
    );
    write_container(path, &entries)
}

/// Read just the config snapshot (used to pick the precision before loading
/// typed tensors).
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let entries = read_container(path)?;
    config_from(&entries)
}

fn config_from(entries: &Container) -> Result<TrainConfig> {
    let entry = entries
        .get("config.json")
        .context("checkpoint has no config snapshot")?;
    let cfg: TrainConfig =
        serde_json::from_slice(&entry.payload).context("config snapshot does not parse")?;
    Ok(cfg)
}

/// Rebuild a trainer state from a container.
pub fn load_state<E: Scalar>(path: &Path) -> Result<TrainerState<E>> {
    let entries = read_container(path)?;
    let config = config_from(&entries)?;
    config
        .validate()
        .map_err(|e| anyhow::anyhow!("checkpoint config invalid: {e}"))?;
    let mut state: TrainerState<E> =
        TrainerState::new(config).map_err(|e| anyhow::anyhow!("state rebuild failed: {e}"))?;

    let get = |name: &str| -> Result<&Entry> {
        entries
            .get(name)
            .with_context(|| format!("checkpoint is missing entry {name}"))
    };
    state.adam.t = get("meta.adam_t")?.to_i64s("meta.adam_t")?[0] as u64;
    state.episodes_done =
        get("meta.episodes_done")?.to_i64s("meta.episodes_done")?[0] as u64;

    let names = param_names(&state.models);
    {
        let mut params = param_tensors_mut(&mut state.models, &mut state.store);
        for (name, param) in names.iter().zip(params.iter_mut()) {
            **param = get(&format!("param.{name}"))?.to_tensor(name)?;
        }
    }
    let mut adam = Adam::new(
        state.config.learning_rate,
        &param_tensors(&state.models, &state.store),
    );
    adam.t = state.adam.t;
    for (i, name) in names.iter().enumerate() {
        adam.m[i] = get(&format!("adam_m.{name}"))?.to_tensor(name)?;
        adam.v[i] = get(&format!("adam_v.{name}"))?.to_tensor(name)?;
    }
    state.adam = adam;

    for (i, block) in state.models.networks.encoder.blocks.iter_mut().enumerate() {
        if let Some(bn) = block.bn.as_mut() {
            bn.running_mean = get(&format!("state.encoder.block{i}.bn_mean"))?
                .to_tensor("bn_mean")?;
            bn.running_var = get(&format!("state.encoder.block{i}.bn_var"))?
                .to_tensor("bn_var")?;
        }
    }

    let class_ids = get("memory.class_ids")?.to_i64s("memory.class_ids")?;
    let keys: Tensor<E> = get("memory.keys")?.to_tensor("memory.keys")?;
    let attention_w = state.store.attention_w.clone();
    state.store = vsm_core::memory::MemoryStore::from_keys(
        class_ids,
        keys,
        E::from_f64(state.config.alpha),
        state.config.memory_capacity,
        state.config.slot_activation,
        attention_w,
    );
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vsm_core::trainer::tests_support::micro_state;

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let state = micro_state(0xC0FFEE);
        let p1 = dir.path().join("a.vsmc");
        let p2 = dir.path().join("b.vsmc");
        save_state(&p1, &state).unwrap();
        let loaded: TrainerState<f64> = load_state(&p1).unwrap();
        save_state(&p2, &loaded).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "save(load(save(x))) must be byte-identical");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vsmc");
        let state = micro_state(1);
        save_state(&p, &state).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99;
        std::fs::write(&p, &bytes).unwrap();
        let err = load_state::<f64>(&p).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vsmc");
        let state = micro_state(2);
        save_state(&p, &state).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_state::<f64>(&p).is_err());
    }

    #[test]
    fn garbage_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.vsmc");
        std::fs::write(&p, b"NOPEnope").unwrap();
        let err = read_container(&p).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn loaded_state_matches_parameters_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.vsmc");
        let state = micro_state(3);
        save_state(&p, &state).unwrap();
        let loaded: TrainerState<f64> = load_state(&p).unwrap();
        let a = param_tensors(&state.models, &state.store);
        let b = param_tensors(&loaded.models, &loaded.store);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(state.store.class_ids(), loaded.store.class_ids());
        assert_eq!(
            state.store.materialized_keys().data(),
            loaded.store.materialized_keys().data()
        );
    }
}
