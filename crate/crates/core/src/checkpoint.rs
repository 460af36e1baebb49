//! Checkpoints: parameters (stored as `f64`), frozen flags, training stage,
//! RNG position, loss log and the full run configuration, in one container.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataio::{read_container, write_container, NamedArray};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{LogRow, StageTag, TrainLog, TrainState};

pub const KIND: &str = "hivae-checkpoint";

/// Serializable ChaCha8 stream position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("malformed rng state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: RunConfig,
    stage: Option<StageTag>,
    frozen: Vec<String>,
    rng: RngState,
    log: Vec<LogRow>,
    #[serde(default)]
    extra: Value,
}

/// Everything needed to resume or reproduce a run.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    pub stage: Option<StageTag>,
    pub params: BTreeMap<String, Tensor<T>>,
    pub frozen: Vec<String>,
    pub rng: RngState,
    pub log: Vec<LogRow>,
    /// Free-form payload (e.g. motion packer state).
    pub extra: Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_state(config: &RunConfig, state: &TrainState<T>) -> Self {
        Self::from_parts(config, state.stage, &state.store, &state.rng, &state.log)
    }

    pub fn from_parts(
        config: &RunConfig,
        stage: Option<StageTag>,
        store: &ParamStore<T>,
        rng: &ChaCha8Rng,
        log: &TrainLog,
    ) -> Self {
        // Wall-clock times would make otherwise identical runs hash differently.
        let log = log.rows.iter().map(|r| LogRow { wall_time: 0.0, ..r.clone() }).collect();
        Self {
            config: config.clone(),
            stage,
            params: store.to_named(),
            frozen: store.entries().iter().filter(|e| e.frozen).map(|e| e.name.clone()).collect(),
            rng: RngState::capture(rng),
            log,
            extra: Value::Null,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let arrays: Vec<NamedArray> = self.params.iter().map(|(n, t)| NamedArray::from_tensor_f64(n.clone(), t)).collect();
        let meta = Meta {
            kind: KIND.into(),
            config: self.config.clone(),
            stage: self.stage,
            frozen: self.frozen.clone(),
            rng: self.rng.clone(),
            log: self.log.clone(),
            extra: self.extra.clone(),
        };
        write_container(path, &arrays, &serde_json::to_value(meta)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, arrays) = read_container(path)?;
        if header.meta.get("kind").and_then(Value::as_str) != Some(KIND) {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let meta: Meta = serde_json::from_value(header.meta)?;
        let params = arrays.iter().map(|a| Ok((a.name.clone(), a.to_tensor::<T>()?))).collect::<Result<_>>()?;
        Ok(Self {
            config: meta.config,
            stage: meta.stage,
            params,
            frozen: meta.frozen,
            rng: meta.rng,
            log: meta.log,
            extra: meta.extra,
        })
    }

    /// Copy parameters and frozen flags into a store built from the same config.
    pub fn restore_store(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        store.load_named(&self.params)?;
        store.set_frozen_names(&self.frozen);
        Ok(())
    }

    pub fn into_state(self, mut store: ParamStore<T>) -> Result<TrainState<T>> {
        self.restore_store(&mut store)?;
        Ok(TrainState { store, stage: self.stage, log: TrainLog { rows: self.log }, rng: self.rng.restore()? })
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hvae");
        let mut store = ParamStore::<f64>::new();
        store.add("a.w", Tensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64 / 7.0));
        store.add("b.w", Tensor::full(&[4], 0.1));
        store.set_frozen("a.", true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let state = TrainState { store: store.clone(), stage: Some(StageTag::Stage1Global), log: TrainLog::default(), rng };
        let ck = Checkpoint::from_state(&RunConfig::default(), &state);
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back.config, RunConfig::default());
        let mut fresh = ParamStore::<f64>::new();
        fresh.add("a.w", Tensor::zeros(&[2, 3]));
        fresh.add("b.w", Tensor::zeros(&[4]));
        let mut st = back.into_state(fresh).unwrap();
        assert_eq!(st.store.hash_prefix(""), store.hash_prefix(""));
        assert!(st.store.is_frozen(st.store.id("a.w").unwrap()));
        assert!(!st.store.is_frozen(st.store.id("b.w").unwrap()));
        let mut orig = state.rng.clone();
        assert_eq!(st.rng.random::<u64>(), orig.random::<u64>());
        assert_eq!(st.stage, Some(StageTag::Stage1Global));
    }
}
