//! Binary checkpoints of a training run.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MACO" | u32 version | u64 meta length | meta JSON
//! u32 parameter count, then per parameter:
//!     u32 name length | name | u32 rank | u64 dims[rank] | f64 values
//! u64 optimizer step | f64 first moments | f64 second moments
//! ```
//!
//! The JSON block carries the run configuration, vocabulary, epoch, step and
//! RNG position. Moments follow parameter order with the parameters' lengths.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{MacoModel, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Tensor};
use crate::train::{RngState, Trainer};

pub const MAGIC: &[u8; 4] = b"MACO";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: RunConfig,
    vocab: Vocabulary,
    epoch: usize,
    step: u64,
    rng: RngState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let meta = Meta {
        config: trainer.config.clone(),
        vocab: trainer.model.vocab.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
        rng: RngState::capture(&trainer.rng),
    };
    let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut out = Vec::with_capacity(json.len() + 24 * trainer.model.params.total_size() + 64);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    put_u32(&mut out, trainer.model.params.len() as u32);
    for p in trainer.model.params.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u64(&mut out, d as u64);
        }
        put_f64s(&mut out, p.value.data());
    }
    put_u64(&mut out, trainer.optimizer.step_count());
    let (m, v) = trainer.optimizer.moments();
    for x in m.iter().chain(v) {
        put_f64s(&mut out, x);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("missing MACO magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let n = r.len()?;
    let meta: Meta =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    meta.config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;

    let mut model = MacoModel::new(meta.config.model, meta.vocab, meta.config.seed)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, model has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let size = size.ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
        let value = Tensor::new(shape, r.f64s(size)?)?;
        model
            .params
            .set_value(&name, value)
            .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
    }
    let step = r.u64()?;
    let sizes: Vec<usize> = model.params.iter().map(|p| p.value.len()).collect();
    let m = sizes.iter().map(|&s| r.f64s(s)).collect::<Result<Vec<_>>>()?;
    let v = sizes.iter().map(|&s| r.f64s(s)).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Trainer {
        optimizer: AdamW::from_state(meta.config.train.optimizer, step, m, v),
        rng: meta.rng.restore()?,
        config: meta.config,
        model,
        epoch: meta.epoch,
        step: meta.step,
    })
}

/// Writes through a temporary sibling and renames, so an interrupted save
/// never replaces the previous checkpoint.
pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(trainer)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::State(format!("no checkpoint at {}", path.display())));
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, PairedSample};
    use crate::numerics::Tape;
    use crate::train::{forward_loss, prepare_batch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained() -> (Trainer, Vec<PairedSample>) {
        let mut c = RunConfig::default();
        c.data.train = 8;
        c.train.epochs = 2;
        c.train.batch_size = 4;
        let data = generate_corpus(&c.data.scene, 8, 5).unwrap();
        let mut t = Trainer::new(c).unwrap();
        t.train_epoch(&data).unwrap();
        (t, data)
    }

    fn forward(t: &Trainer, data: &[PairedSample]) -> Vec<u64> {
        let refs: Vec<&PairedSample> = data.iter().collect();
        let batch = prepare_batch(&t.model, &t.config, &refs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let p = t.model.bind_frozen(&mut tape);
        let (_, parts) = forward_loss(&t.model, &t.config, &batch, &mut tape, &p).unwrap();
        [parts.l_pret, parts.l_contra, parts.l_total].iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (t, data) = trained();
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(forward(&t, &data), forward(&back, &data));
        assert_eq!(back.model.params, t.model.params);
        assert_eq!(back.optimizer, t.optimizer);
        assert_eq!((back.epoch, back.step), (1, 2));
        assert_eq!(encode(&back), encode(&t));
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (t, data) = trained();
        let mut a = t.clone();
        let mut b = decode(&encode(&t)).unwrap();
        assert_eq!(a.train_epoch(&data).unwrap(), b.train_epoch(&data).unwrap());
    }

    #[test]
    fn rejects_bad_headers() {
        let (t, _) = trained();
        let bytes = encode(&t);
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::Checkpoint(m)) if m.contains("version 2")));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = std::env::temp_dir().join(format!("maco-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (t, _) = trained();
        let path = dir.join("model.ckpt");
        save(&path, &t).unwrap();
        assert!(!path.with_extension("tmp").exists());
        assert_eq!(load(&path).unwrap().model.params, t.model.params);
        assert!(matches!(load(&dir.join("absent.ckpt")), Err(Error::State(_))));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
