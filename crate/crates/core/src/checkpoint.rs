//! Single-file training snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CRRCKPT1"
//! u64 manifest length, manifest text ([checkpoint], [network], [train] sections)
//! u32 parameter count, then per parameter:
//!     u32 name length, name, u32 rank, u64 dims..., element data
//! main then discriminator momentum buffers, per parameter in store order:
//!     u8 present flag, element data when present
//! rng: 32-byte seed, u64 stream, u128 word position
//! sha256 of everything above
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::kv::{KvDoc, KvWriter};
use crate::network::{NetworkBundle, NetworkConfig};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"CRRCKPT1";
const DIGEST_LEN: usize = 32;

/// Text header of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub iteration: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl CheckpointManifest {
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        w.section("checkpoint")
            .kv("dtype", &self.dtype)
            .kv("iteration", self.iteration);
        w.section("network");
        self.network.write_kv(&mut w);
        w.section("train");
        self.train.write_kv(&mut w);
        w.finish()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        doc.expect_sections(&["checkpoint", "network", "train"])?;
        let mut s = doc.section("checkpoint");
        let dtype = s
            .get("dtype")?
            .ok_or_else(|| Error::CorruptCheckpoint("manifest lacks dtype".into()))?;
        let iteration = s
            .get("iteration")?
            .ok_or_else(|| Error::CorruptCheckpoint("manifest lacks iteration".into()))?;
        s.finish()?;
        Ok(Self {
            dtype,
            iteration,
            network: NetworkConfig::from_kv(&doc, "network")?,
            train: TrainConfig::from_kv(&doc, "train")?,
        })
    }

    /// Fail unless `live` describes the same network as this manifest.
    pub fn verify(&self, live: &NetworkConfig) -> Result<()> {
        if &self.network == live {
            return Ok(());
        }
        let render = |c: &NetworkConfig| {
            let mut w = KvWriter::new();
            c.write_kv(&mut w);
            w.finish()
        };
        let (ours, theirs) = (render(&self.network), render(live));
        let diffs: Vec<String> = ours
            .lines()
            .zip(theirs.lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("checkpoint `{a}` vs config `{b}`"))
            .collect();
        Err(Error::ManifestMismatch(diffs.join("; ")))
    }
}

/// Serialise the full trainer state.
pub fn encode_checkpoint<T: Scalar>(trainer: &Trainer<T>) -> Vec<u8> {
    let manifest = CheckpointManifest {
        dtype: T::DTYPE.to_string(),
        iteration: trainer.iteration,
        network: trainer.net.config().clone(),
        train: trainer.cfg.clone(),
    }
    .to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    let params = &trainer.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let t = params.get(id);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    for opt in [&trainer.optim.main, &trainer.optim.disc] {
        for id in params.ids() {
            match opt.buffer(id) {
                Some(b) => {
                    out.push(1);
                    for &v in b.data() {
                        v.write_le(&mut out);
                    }
                }
                None => out.push(0),
            }
        }
    }
    out.extend_from_slice(&trainer.rng.get_seed());
    out.extend_from_slice(&trainer.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint<T: Scalar>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    // write-then-rename so an interrupted save never leaves a truncated file
    let tmp = path.with_extension("ckpt.partial");
    fs::write(&tmp, encode_checkpoint(trainer)).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
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
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        Ok(Tensor::from_vec(shape, raw.chunks_exact(T::BYTES).map(T::read_le).collect()))
    }
}

/// Check the magic and digest and return the body without the digest.
fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    Ok(body)
}

fn read_manifest(r: &mut Reader<'_>) -> Result<CheckpointManifest> {
    r.take(MAGIC.len())?;
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::CorruptCheckpoint("manifest is not UTF-8".into()))?;
    CheckpointManifest::parse(text)
}

/// Rebuild a trainer from checkpoint bytes. With `expected`, the stored
/// network configuration must match it exactly.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<Trainer<T>> {
    let body = verified_body(bytes)?;
    let mut r = Reader { bytes: body, pos: 0 };
    let manifest = read_manifest(&mut r)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::ManifestMismatch(format!(
            "checkpoint holds {} parameters, loader expects {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    if let Some(live) = expected {
        manifest.verify(live)?;
    }

    // the layout comes from the manifest; the values are overwritten below
    let mut params = ParamStore::new();
    let net = NetworkBundle::init(manifest.network.clone(), &mut params, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32()?;
    if count != params.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} parameters stored, network defines {}",
            params.len()
        )));
    }
    for id in params.ids().collect::<Vec<_>>() {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?;
        if name != params.name(id) {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter `{name}` where `{}` was expected",
                params.name(id)
            )));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != params.get(id).shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter `{name}` has shape {shape:?}, network expects {:?}",
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = r.tensor(&shape)?;
    }
    let mut trainer = Trainer::assemble(net, params, manifest.train);
    let ids: Vec<_> = trainer.params.ids().collect();
    for which in 0..2 {
        for &id in &ids {
            if r.u8()? == 1 {
                let shape = trainer.params.get(id).shape().to_vec();
                let buf = r.tensor(&shape)?;
                let opt: &mut Sgd<T> = if which == 0 { &mut trainer.optim.main } else { &mut trainer.optim.disc };
                opt.set_buffer(id, buf);
            }
        }
    }
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    trainer.iteration = manifest.iteration;
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(trainer)
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&NetworkConfig>) -> Result<Trainer<T>> {
    decode_checkpoint(&fs::read(path).at(path)?, expected)
}

/// Read and verify only the manifest.
pub fn read_checkpoint_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).at(path)?;
    let body = verified_body(&bytes)?;
    read_manifest(&mut Reader { bytes: body, pos: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Trainer<f32>, crate::datapipe::TrainPool) {
        crate::trainer::fixtures::tiny(TrainConfig {
            batch: crate::datapipe::BatchSpec::new(2, 2).unwrap(),
            ..Default::default()
        })
    }

    #[test]
    fn roundtrip_is_bitwise_and_idempotent() {
        let (mut t, pool) = tiny();
        let b = t.sample_batch(&pool).unwrap();
        t.train_step(&b).unwrap();
        let bytes = encode_checkpoint(&t);
        let mut back: Trainer<f32> = decode_checkpoint(&bytes, Some(t.net.config())).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        for id in t.params.ids() {
            let (a, b) = (t.params.get(id).data(), back.params.get(id).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.iteration, 1);
        // the next batch drawn is the same on both sides
        let b1 = t.sample_batch(&pool).unwrap();
        let b2 = back.sample_batch(&pool).unwrap();
        assert_eq!(b1.hr_labels, b2.hr_labels);
        assert_eq!(b1.lr, b2.lr);
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let (t, _) = tiny();
        let bytes = encode_checkpoint(&t);
        let mut other = t.net.config().clone();
        other.backbone.channels = [4, 4, 8, 8, 16];
        let err = decode_checkpoint::<f32>(&bytes, Some(&other)).err().unwrap();
        assert!(matches!(err, Error::ManifestMismatch(_)), "{err}");
        assert!(matches!(decode_checkpoint::<f64>(&bytes, None), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let (t, _) = tiny();
        let mut bytes = encode_checkpoint(&t);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint::<f32>(&bytes, None), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..20], None), Err(Error::CorruptCheckpoint(_))));
    }
}
