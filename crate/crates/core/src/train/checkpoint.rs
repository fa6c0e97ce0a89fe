//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "MDCG" | version u16 | config: u32 len + TOML
//! epoch u64 | step u64
//! generator params | discriminator params        (record lists)
//! generator adam | discriminator adam            (t u64, m list, v list)
//! buffers                                        (record list)
//! rng: seed [u8; 32] | stream u64 | word_pos u128
//! ```
//!
//! A record list is a u32 count followed by records of
//! `u32 name len | name | u32 rank | rank x u32 extents | f32 values`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDCG";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Position in a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub step: u64,
    pub generator: Vec<NamedTensor>,
    pub discriminator: Vec<NamedTensor>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    /// Batch-norm running statistics, prefixed `generator.` or
    /// `discriminator.`.
    pub buffers: Vec<NamedTensor>,
    pub rng: RngState,
}

fn named<'a>(items: impl Iterator<Item = (String, &'a Tensor<f32>)>, prefix: &str) -> Vec<NamedTensor> {
    items
        .map(|(name, t)| NamedTensor {
            name: format!("{prefix}{name}"),
            tensor: t.detached(),
        })
        .collect()
}

fn load_into<'a>(
    what: &str,
    targets: impl Iterator<Item = (String, &'a mut Tensor<f32>)>,
    records: &[NamedTensor],
    prefix: &str,
) -> Result<()> {
    let mut used = 0;
    for (name, t) in targets {
        let want = format!("{prefix}{name}");
        let rec = records.get(used).ok_or_else(|| Error::Checkpoint {
            offset: 0,
            reason: format!("{what}: missing record {want}"),
        })?;
        if rec.name != want || rec.tensor.shape() != t.shape() {
            return Err(Error::Checkpoint {
                offset: 0,
                reason: format!(
                    "{what}: expected {want} {:?}, found {} {:?}",
                    t.shape(),
                    rec.name,
                    rec.tensor.shape()
                ),
            });
        }
        t.data_mut().copy_from_slice(rec.tensor.data());
        used += 1;
    }
    if used != records.len() {
        return Err(Error::Checkpoint {
            offset: 0,
            reason: format!("{what}: {} records for {used} tensors", records.len()),
        });
    }
    Ok(())
}

impl Checkpoint {
    pub(crate) fn capture(tr: &Trainer) -> Self {
        let mut buffers = named(tr.generator.buffers(), "generator.");
        buffers.extend(named(tr.discriminator.buffers(), "discriminator."));
        Self {
            config: tr.config.clone(),
            epoch: tr.epoch,
            step: tr.step,
            generator: named(tr.generator.parameters(), ""),
            discriminator: named(tr.discriminator.parameters(), ""),
            adam_g: tr.adam_g.clone(),
            adam_d: tr.adam_d.clone(),
            buffers,
            rng: RngState::capture(&tr.rng),
        }
    }

    fn rebuild(&self, generator: bool) -> Result<Model<f32>> {
        let spec = if generator {
            self.config.generator_spec()?
        } else {
            self.config.discriminator_spec()?
        };
        // initial values are overwritten below
        let mut model = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let (what, params, prefix) = if generator {
            ("generator", &self.generator, "generator.")
        } else {
            ("discriminator", &self.discriminator, "discriminator.")
        };
        let names: Vec<String> = model.parameters().map(|(n, _)| n).collect();
        load_into(what, names.into_iter().zip(model.parameters_mut()), params, "")?;
        let names: Vec<String> = model.buffers().map(|(n, _)| n).collect();
        let bufs: Vec<NamedTensor> = self
            .buffers
            .iter()
            .filter(|b| b.name.starts_with(prefix))
            .cloned()
            .collect();
        load_into("buffers", names.into_iter().zip(model.buffers_mut()), &bufs, prefix)?;
        Ok(model)
    }

    pub fn generator_model(&self) -> Result<Model<f32>> {
        self.rebuild(true)
    }

    pub fn discriminator_model(&self) -> Result<Model<f32>> {
        self.rebuild(false)
    }

    /// Number of stored generator parameter values.
    pub fn generator_value_count(&self) -> usize {
        self.generator.iter().map(|r| r.tensor.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(CHECKPOINT_VERSION);
        let cfg = self.config.to_toml();
        w.u32(cfg.len() as u32);
        w.bytes(cfg.as_bytes());
        w.u64(self.epoch);
        w.u64(self.step);
        w.records(self.generator.iter().map(|r| (r.name.as_str(), &r.tensor)));
        w.records(self.discriminator.iter().map(|r| (r.name.as_str(), &r.tensor)));
        for (adam, params) in [(&self.adam_g, &self.generator), (&self.adam_d, &self.discriminator)] {
            w.u64(adam.t);
            let m_names: Vec<String> = params.iter().map(|p| format!("m.{}", p.name)).collect();
            let v_names: Vec<String> = params.iter().map(|p| format!("v.{}", p.name)).collect();
            w.records(m_names.iter().map(String::as_str).zip(&adam.m));
            w.records(v_names.iter().map(String::as_str).zip(&adam.v));
        }
        w.records(self.buffers.iter().map(|r| (r.name.as_str(), &r.tensor)));
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.fail_at(0, format!("bad magic {magic:?}, expected \"MDCG\"")));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail_at(4, format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let cfg_at = r.pos;
        let cfg_len = r.u32("config length")? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
            .map_err(|e| r.fail_at(cfg_at, format!("config is not UTF-8: {e}")))?;
        let config = TrainConfig::from_toml(cfg_text).map_err(|e| r.fail_at(cfg_at, e.to_string()))?;
        let epoch = r.u64("epoch")?;
        let step = r.u64("step")?;
        let generator = r.records()?;
        let discriminator = r.records()?;
        let mut adams = Vec::with_capacity(2);
        for params in [&generator, &discriminator] {
            let t = r.u64("adam step")?;
            let at = r.pos;
            let m = r.records()?;
            let v = r.records()?;
            let ok = |list: &[NamedTensor], p: &str| {
                list.len() == params.len()
                    && list
                        .iter()
                        .zip(params.iter())
                        .all(|(a, b)| a.name == format!("{p}.{}", b.name) && a.tensor.shape() == b.tensor.shape())
            };
            if !ok(&m, "m") || !ok(&v, "v") {
                return Err(r.fail_at(at, "optimizer moments do not match the parameters".into()));
            }
            adams.push(AdamState {
                t,
                m: m.into_iter().map(|n| n.tensor).collect(),
                v: v.into_iter().map(|n| n.tensor).collect(),
            });
        }
        let buffers = r.records()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32, "rng seed")?);
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let adam_d = adams.pop().expect("two optimizers");
        let adam_g = adams.pop().expect("two optimizers");
        Ok(Self {
            config,
            epoch,
            step,
            generator,
            discriminator,
            adam_g,
            adam_d,
            buffers,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, cp.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }

    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn records<'a>(&mut self, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>) {
        self.u32(items.len() as u32);
        for (name, t) in items {
            self.u32(name.len() as u32);
            self.bytes(name.as_bytes());
            self.u32(t.rank() as u32);
            for &d in t.shape() {
                self.u32(d as u32);
            }
            self.out.reserve(t.numel() * 4);
            for &v in t.data() {
                self.bytes(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, reason: String) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            reason,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail_at(
                self.pos,
                format!("truncated reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn records(&mut self) -> Result<Vec<NamedTensor>> {
        let count = self.u32("record count")? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = self.pos;
            let name_len = self.u32("name length")? as usize;
            let name = std::str::from_utf8(self.take(name_len, "name")?)
                .map_err(|e| self.fail_at(at, format!("record name is not UTF-8: {e}")))?
                .to_string();
            let rank = self.u32("rank")? as usize;
            if rank > 8 {
                return Err(self.fail_at(at, format!("record {name}: implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 || rank == 0)
                .ok_or_else(|| self.fail_at(at, format!("record {name}: bad extents {shape:?}")))?;
            let raw = self.take(numel.saturating_mul(4), "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = if rank == 0 {
                Tensor::scalar(f32::from_le_bytes(raw.try_into().expect("4 bytes")))
            } else {
                Tensor::new(shape, data).map_err(|e| self.fail_at(at, e.to_string()))?
            };
            out.push(NamedTensor { name, tensor });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = TrainConfig {
            scale_factor: 8,
            seed: 3,
            ..Default::default()
        };
        Trainer::new(cfg).unwrap().checkpoint()
    }

    #[test]
    fn bytes_round_trip() {
        let cp = small();
        let bytes = cp.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_located() {
        let mut bytes = small().to_bytes();
        let n = bytes.len();
        match Checkpoint::from_bytes(&bytes[..n - 5]) {
            Err(Error::Checkpoint { offset, .. }) => assert!(offset > 0 && offset < n as u64),
            other => panic!("{other:?}"),
        }
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint { offset: 4, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint { offset: 0, .. })
        ));
    }

    #[test]
    fn models_rebuild_from_records() {
        let cp = small();
        let g = cp.generator_model().unwrap();
        for ((name, t), rec) in g.parameters().zip(&cp.generator) {
            assert_eq!(name, rec.name);
            assert_eq!(t.data(), rec.tensor.data());
        }
        assert_eq!(cp.generator_value_count(), g.param_count());
    }
}
