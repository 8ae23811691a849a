//! Versioned binary training checkpoints.
//!
//! Layout (all integers little-endian, all floats IEEE-754 f64 LE):
//!
//! ```text
//! magic    8  bytes  "WSEGCKPT"
//! version  u32       currently 1
//! epoch    u64
//! best     u8 flag + f64 (flag 0: no metric recorded yet)
//! rng      32-byte seed + u128 word position + u64 stream
//! params   u32 count, then per entry:
//!            u32 name length, name bytes,
//!            u32 rank, u64 dims...,
//!            f64 data...
//! buffers  same encoding as params
//! opt      u64 step count, u32 entry count, then per entry:
//!            u32 name length, name bytes, u64 numel,
//!            f64 first moments..., f64 second moments...
//! ```
//!
//! A restored checkpoint reproduces the next training step bit-exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::Params;
use crate::train::Adam;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"WSEGCKPT";
const VERSION: u32 = 1;

/// Complete training state at one epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    pub epoch: u64,
    pub best_metric: Option<f64>,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub buffers: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub adam_steps: u64,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
}

impl TrainingSnapshot {
    pub fn capture<M: Params<f64>>(
        model: &M,
        opt: &Adam<f64>,
        epoch: u64,
        best_metric: Option<f64>,
        rng: &ChaCha8Rng,
    ) -> Self {
        TrainingSnapshot {
            epoch,
            best_metric,
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
                .collect(),
            buffers: model
                .buffers()
                .iter()
                .map(|b| (b.name.clone(), b.shape.clone(), b.data.clone()))
                .collect(),
            adam_steps: opt.step_count(),
            moments: opt
                .moment_entries()
                .map(|(n, m, v)| (n.to_string(), m.to_vec(), v.to_vec()))
                .collect(),
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
        }
    }

    /// Writes weights and buffers back into a structurally identical
    /// model; name or shape drift is an error.
    pub fn restore_model<M: Params<f64>>(&self, model: &mut M) -> Result<()> {
        let by_name: std::collections::BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> =
            self.params.iter().map(|(n, s, d)| (n.as_str(), (s, d))).collect();
        let live = model.params_mut();
        if live.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameters, checkpoint holds {}",
                live.len(),
                self.params.len()
            )));
        }
        for p in live {
            let (shape, data) = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {:?}", p.name)))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?}: model shape {:?}, checkpoint {:?}",
                    p.name,
                    p.value.shape(),
                    shape
                )));
            }
            p.value.data_mut().copy_from_slice(data);
        }
        let by_name: std::collections::BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> =
            self.buffers.iter().map(|(n, s, d)| (n.as_str(), (s, d))).collect();
        let live = model.buffers_mut();
        if live.len() != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} buffers, checkpoint holds {}",
                live.len(),
                self.buffers.len()
            )));
        }
        for b in live {
            let (shape, data) = by_name
                .get(b.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {:?}", b.name)))?;
            if &b.shape != *shape {
                return Err(Error::Checkpoint(format!(
                    "buffer {:?}: model shape {:?}, checkpoint {:?}",
                    b.name, b.shape, shape
                )));
            }
            b.data.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut Adam<f64>) {
        opt.restore_state(self.adam_steps, self.moments.iter().cloned());
    }

    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, VERSION);
        push_u64(&mut out, self.epoch);
        out.push(self.best_metric.is_some() as u8);
        push_f64(&mut out, self.best_metric.unwrap_or(0.0));
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        push_u64(&mut out, self.rng_stream);

        for table in [&self.params, &self.buffers] {
            push_u32(&mut out, table.len() as u32);
            for (name, shape, data) in table {
                push_str(&mut out, name);
                push_u32(&mut out, shape.len() as u32);
                for &d in shape {
                    push_u64(&mut out, d as u64);
                }
                for &v in data {
                    push_f64(&mut out, v);
                }
            }
        }

        push_u64(&mut out, self.adam_steps);
        push_u32(&mut out, self.moments.len() as u32);
        for (name, m, v) in &self.moments {
            push_str(&mut out, name);
            push_u64(&mut out, m.len() as u64);
            for &x in m {
                push_f64(&mut out, x);
            }
            for &x in v {
                push_f64(&mut out, x);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let epoch = r.u64()?;
        let has_best = r.take(1)?[0] != 0;
        let best_value = r.f64()?;
        let best_metric = has_best.then_some(best_value);
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(r.take(32)?);
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let rng_stream = r.u64()?;

        let mut tables = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = r.u32()? as usize;
            let mut table = Vec::with_capacity(count);
            for _ in 0..count {
                let name = r.string()?;
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u64()? as usize);
                }
                let numel: usize = shape.iter().product();
                table.push((name, shape, r.f64_vec(numel)?));
            }
            tables.push(table);
        }
        let buffers = tables.pop().expect("two tables");
        let params = tables.pop().expect("two tables");

        let adam_steps = r.u64()?;
        let count = r.u32()? as usize;
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let numel = r.u64()? as usize;
            let m = r.f64_vec(numel)?;
            let v = r.f64_vec(numel)?;
            moments.push((name, m, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(TrainingSnapshot {
            epoch,
            best_metric,
            params,
            buffers,
            adam_steps,
            moments,
            rng_seed,
            rng_word_pos,
            rng_stream,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNormLayer, LinearLayer, Params, Parameter};
    use crate::nn::Buffer;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};

    struct TinyModule {
        lin: LinearLayer<f64>,
        bn: BatchNormLayer<f64>,
    }

    impl TinyModule {
        fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            TinyModule {
                lin: LinearLayer::new("tiny.lin", 3, 2, &mut rng),
                bn: BatchNormLayer::new("tiny.bn", 2),
            }
        }
    }

    impl Params<f64> for TinyModule {
        fn params(&self) -> Vec<&Parameter<f64>> {
            let mut v = self.lin.params();
            v.extend(self.bn.params());
            v
        }
        fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
            let mut v = self.lin.params_mut();
            v.extend(self.bn.params_mut());
            v
        }
        fn buffers(&self) -> Vec<&Buffer<f64>> {
            self.bn.buffers()
        }
        fn buffers_mut(&mut self) -> Vec<&mut Buffer<f64>> {
            self.bn.buffers_mut()
        }
    }

    fn train_one_step(model: &mut TinyModule, opt: &mut Adam<f64>, rng: &mut ChaCha8Rng) {
        let x = crate::tensor::gradcheck::randn(&[2, 4, 3], rng.gen());
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let h = model.lin.forward(&mut tape, xid).unwrap();
        let perm = tape.permute(h, &[0, 2, 1]).unwrap();
        let plane = tape.reshape(perm, &[2, 2, 2, 2]).unwrap();
        let normed = model.bn.forward(&mut tape, plane, true).unwrap();
        let loss = tape.sum_all(normed).unwrap();
        tape.backward(loss).unwrap();
        opt.step(model, &tape).unwrap();
    }

    #[test]
    fn encode_decode_round_trip_is_bit_exact() {
        let mut model = TinyModule::new(3);
        let mut opt = Adam::new(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        train_one_step(&mut model, &mut opt, &mut rng);
        train_one_step(&mut model, &mut opt, &mut rng);

        let snap = TrainingSnapshot::capture(&model, &opt, 2, Some(0.75), &rng);
        let back = TrainingSnapshot::decode(&snap.encode()).unwrap();
        assert_eq!(snap, back);
    }

    #[test]
    fn file_round_trip_and_restored_step_match_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");

        let mut model = TinyModule::new(5);
        let mut opt = Adam::new(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        train_one_step(&mut model, &mut opt, &mut rng);
        TrainingSnapshot::capture(&model, &opt, 1, None, &rng).save(&path).unwrap();

        // Continue the original run.
        train_one_step(&mut model, &mut opt, &mut rng);

        // Rebuild from disk with different initial weights, restore,
        // repeat the same step.
        let snap = TrainingSnapshot::load(&path).unwrap();
        let mut model2 = TinyModule::new(999);
        let mut opt2 = Adam::new(1e-3);
        snap.restore_model(&mut model2).unwrap();
        snap.restore_optimizer(&mut opt2);
        let mut rng2 = snap.restore_rng();
        train_one_step(&mut model2, &mut opt2, &mut rng2);

        for (a, b) in model.params().iter().zip(model2.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
        for (a, b) in model.buffers().iter().zip(model2.buffers().iter()) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(rng.gen::<u64>(), rng2.gen::<u64>());
    }

    #[test]
    fn structural_drift_is_rejected() {
        let model = TinyModule::new(1);
        let opt = Adam::new(1e-3);
        let rng = ChaCha8Rng::seed_from_u64(0);
        let snap = TrainingSnapshot::capture(&model, &opt, 0, None, &rng);

        let mut renamed = TinyModule::new(1);
        renamed.lin.weight.name = "tiny.other".into();
        assert!(snap.restore_model(&mut renamed).is_err());

        let mut reshaped = snap.clone();
        reshaped.params[0].1 = vec![1, 1, 1];
        let mut fresh = TinyModule::new(1);
        assert!(reshaped.restore_model(&mut fresh).is_err());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let model = TinyModule::new(2);
        let opt = Adam::new(1e-3);
        let rng = ChaCha8Rng::seed_from_u64(0);
        let mut bytes = TrainingSnapshot::capture(&model, &opt, 3, Some(0.5), &rng).encode();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(TrainingSnapshot::decode(&bad_magic).is_err());

        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        assert!(TrainingSnapshot::decode(&bad_version).is_err());

        let truncated = &bytes[..bytes.len() - 5];
        assert!(TrainingSnapshot::decode(truncated).is_err());

        bytes.push(0);
        assert!(TrainingSnapshot::decode(&bytes).is_err());
    }
}
