//! Binary checkpoint format.
//!
//! ```text
//! "SRN1"                      magic
//! u32 LE                      format version (1)
//! u32 LE + UTF-8              key = value block: configuration and state.* keys
//! repeated until end of file:
//!   u32 LE + UTF-8            tensor name
//!   u32 LE                    rank
//!   u64 LE × rank             dims
//!   f32 LE × prod(dims)       row-major values
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::config::{parse_pairs, Config};
use crate::error::{Error, Result};
use crate::model::SwinResNet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRN1";
pub const VERSION: u32 = 1;

/// Training progress stored alongside the parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub state: TrainState,
    /// Parameters then populated buffers, in registration order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &SwinResNet, config: &Config, state: TrainState) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        tensors.extend(
            model
                .store
                .buffers()
                .iter()
                .filter_map(|b| b.value.as_ref().map(|v| (b.name.clone(), v.clone()))),
        );
        Checkpoint {
            config: Config {
                model: model.config.clone(),
                precision: model.precision(),
                ..config.clone()
            },
            state,
            tensors,
        }
    }

    /// Rebuilds the network and installs every stored tensor. Names must
    /// match the architecture exactly.
    pub fn to_model(&self) -> Result<SwinResNet> {
        let mut model = SwinResNet::new(self.config.model.clone(), self.config.precision, 0)?;
        let store = &mut model.store;
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if let Some(id) = store.find(name) {
                store
                    .set(id, t.clone())
                    .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            } else if let Some(id) = store.find_buffer(name) {
                store.set_buffer(id, Some(t.clone()));
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name:?} for this configuration")));
            }
            seen.insert(name.as_str());
        }
        if let Some(p) = store.params().iter().find(|p| !seen.contains(p.name.as_str())) {
            return Err(Error::Checkpoint(format!("missing parameter {:?}", p.name)));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.config.to_text();
        header.push_str(&format!(
            "state.step = {}\nstate.epoch = {}\nstate.best_epoch = {}\n",
            self.state.step, self.state.epoch, self.state.best_epoch
        ));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.to_f32_vec() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        r.pos = 4;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let (mut cfg, mut state) = (Vec::new(), TrainState::default());
        for (k, v) in parse_pairs(header)? {
            let bad = || Error::Checkpoint(format!("{k}: cannot parse {v:?}"));
            match k.as_str() {
                "state.step" => state.step = v.parse().map_err(|_| bad())?,
                "state.epoch" => state.epoch = v.parse().map_err(|_| bad())?,
                "state.best_epoch" => state.best_epoch = v.parse().map_err(|_| bad())?,
                _ => cfg.push((k, v)),
            }
        }
        let config = Config::from_pairs(&cfg)?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, "dims")?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dim {d} too large")))?);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload size overflow".into()))?, &name)?;
            let vals: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::from_f32(shape, &vals)?.with_precision(config.precision);
            tensors.push((name, t));
        }
        Ok(Checkpoint { config, state, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model(path: &Path) -> Result<(SwinResNet, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    Ok((ckpt.to_model()?, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::Mode;
    use crate::tensor::Precision;

    fn tiny() -> (SwinResNet, Config) {
        let cfg = Config {
            model: ModelConfig::tiny(32),
            ..Config::default()
        };
        let mut model = SwinResNet::new(cfg.model.clone(), Precision::F32, 3).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let x = Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, Precision::F32, &mut rng);
        let p = model.predict(&x, Mode::Train).unwrap();
        model.store.apply_stat_updates(&p.updates);
        (model, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, cfg) = tiny();
        let state = TrainState {
            step: 7,
            epoch: 3,
            best_epoch: 2,
        };
        let ck = Checkpoint::from_model(&model, &cfg, state);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2), "{n1}");
        }
        assert_eq!(back.to_bytes(), bytes);
        let rebuilt = back.to_model().unwrap();
        for (a, b) in model.store.params().iter().zip(rebuilt.store.params()) {
            assert!(a.value.bit_eq(&b.value));
        }
    }

    #[test]
    fn corrupt_inputs_give_distinct_errors() {
        let (model, cfg) = tiny();
        let bytes = Checkpoint::from_model(&model, &cfg, TrainState::default()).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    }
}
