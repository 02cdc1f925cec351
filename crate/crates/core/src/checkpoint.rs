//! Versioned binary container for model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SDLMCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      1     kind tag (1 denoiser, 2 classifier, 3 AR reference)
//! 13      3     reserved, zero
//! 16      8     payload length N (u64)
//! 24      N     payload
//! 24+N    32    SHA-256 of the payload
//! ```
//!
//! The payload holds a metadata section followed by a tensor section:
//!
//! ```text
//! u32 meta count
//!   per entry: str key, u8 type (0 u64, 1 f64, 2 str, 3 bytes), value
//! u32 tensor count
//!   per tensor: str name, u32 rank, rank × u64 dims, prod(dims) × f64
//! ```
//!
//! `str` and `bytes` are a u32 byte length followed by the bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SDLMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ContainerKind {
    Denoiser = 1,
    Classifier = 2,
    Reference = 3,
}

impl ContainerKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(ContainerKind::Denoiser),
            2 => Ok(ContainerKind::Classifier),
            3 => Ok(ContainerKind::Reference),
            t => Err(Error::CorruptCheckpoint(format!("unknown kind tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetaValue {
    U64(u64),
    F64(f64),
    Str(String),
    Bytes(Vec<u8>),
}

/// Metadata plus named tensors, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub meta: Vec<(String, MetaValue)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Container {
            kind,
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn put(&mut self, key: &str, value: MetaValue) {
        self.meta.push((key.to_string(), value));
    }

    pub fn meta(&self, key: &str) -> Result<&MetaValue> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing metadata {key:?}")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        match self.meta(key)? {
            MetaValue::U64(v) => Ok(*v),
            _ => Err(Error::CorruptCheckpoint(format!("{key:?} is not a u64"))),
        }
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        match self.meta(key)? {
            MetaValue::Str(v) => Ok(v),
            _ => Err(Error::CorruptCheckpoint(format!("{key:?} is not a string"))),
        }
    }

    pub fn meta_bytes(&self, key: &str) -> Result<&[u8]> {
        match self.meta(key)? {
            MetaValue::Bytes(v) => Ok(v),
            _ => Err(Error::CorruptCheckpoint(format!("{key:?} is not bytes"))),
        }
    }

    pub fn expect_kind(&self, kind: ContainerKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        put_u32(&mut payload, self.meta.len() as u32);
        for (key, value) in &self.meta {
            put_str(&mut payload, key.as_bytes());
            match value {
                MetaValue::U64(v) => {
                    payload.push(0);
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                MetaValue::F64(v) => {
                    payload.push(1);
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                MetaValue::Str(s) => {
                    payload.push(2);
                    put_str(&mut payload, s.as_bytes());
                }
                MetaValue::Bytes(b) => {
                    payload.push(3);
                    put_str(&mut payload, b);
                }
            }
        }
        put_u32(&mut payload, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut payload, name.as_bytes());
            put_u32(&mut payload, t.shape().len() as u32);
            for &d in t.shape() {
                payload.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut out = Vec::with_capacity(payload.len() + 56);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&[0, 0, 0]);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        let digest = Sha256::digest(&payload);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = ContainerKind::from_tag(bytes[12])?;
        let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if bytes.len() != 24 + len + 32 {
            return Err(corrupt("length does not match header"));
        }
        let payload = &bytes[24..24 + len];
        if Sha256::digest(payload).as_slice() != &bytes[24 + len..] {
            return Err(corrupt("checksum mismatch"));
        }

        let mut r = Reader { buf: payload, pos: 0 };
        let mut meta = Vec::new();
        for _ in 0..r.u32()? {
            let key = r.string()?;
            let value = match r.u8()? {
                0 => MetaValue::U64(r.u64()?),
                1 => MetaValue::F64(f64::from_le_bytes(r.take(8)?.try_into().unwrap())),
                2 => MetaValue::Str(r.string()?),
                3 => MetaValue::Bytes(r.bytes()?.to_vec()),
                t => return Err(Error::CorruptCheckpoint(format!("unknown meta type {t}"))),
            };
            meta.push((key, value));
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != payload.len() {
            return Err(corrupt("trailing bytes in payload"));
        }
        Ok(Container { kind, meta, tensors })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Stores a serde value as a JSON metadata string.
pub(crate) fn put_json<T: serde::Serialize>(c: &mut Container, key: &str, value: &T) {
    let s = serde_json::to_string(value).expect("config types serialize");
    c.put(key, MetaValue::Str(s));
}

pub(crate) fn get_json<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    serde_json::from_str(c.meta_str(key)?).map_err(|e| Error::CorruptCheckpoint(format!("{key}: {e}")))
}

/// Reads tensors `prefix<name>` for every name in `names`, in order.
pub(crate) fn take_tensors(
    tensors: &mut Vec<(String, Tensor)>,
    prefix: &str,
    names: &[String],
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let key = format!("{prefix}{name}");
        let pos = tensors
            .iter()
            .position(|(n, _)| *n == key)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {key}")))?;
        out.push(tensors.remove(pos).1);
    }
    Ok(out)
}

/// Denoiser weights plus everything needed to resume training exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub train_config: TrainConfig,
    pub optimizer: AdamW,
    pub step: u64,
    pub rng: RngState,
    pub vocab_hash: String,
}

impl Checkpoint {
    pub fn model_config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::Denoiser);
        put_json(&mut c, "model_config", self.params.config());
        put_json(&mut c, "train_config", &self.train_config);
        put_json(&mut c, "adam_config", &self.optimizer.config);
        c.put("step", MetaValue::U64(self.step));
        c.put("adam_step", MetaValue::U64(self.optimizer.step_count()));
        c.put("rng_seed", MetaValue::Bytes(self.rng.seed.to_vec()));
        c.put("rng_stream", MetaValue::U64(self.rng.stream));
        c.put("rng_word_pos", MetaValue::Bytes(self.rng.word_pos.to_le_bytes().to_vec()));
        c.put("vocab_hash", MetaValue::Str(self.vocab_hash.clone()));
        let store = self.params.store();
        for (name, t) in store.iter() {
            c.tensors.push((name.to_string(), t.clone()));
        }
        for (name, t) in store.names().iter().zip(self.optimizer.first_moments()) {
            c.tensors.push((format!("adam.m/{name}"), t.clone()));
        }
        for (name, t) in store.names().iter().zip(self.optimizer.second_moments()) {
            c.tensors.push((format!("adam.v/{name}"), t.clone()));
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind(ContainerKind::Denoiser)?;
        let model_config: ModelConfig = get_json(&c, "model_config")?;
        let train_config: TrainConfig = get_json(&c, "train_config")?;
        let adam_config: AdamWConfig = get_json(&c, "adam_config")?;
        let step = c.meta_u64("step")?;
        let adam_step = c.meta_u64("adam_step")?;
        let seed: [u8; 32] = c
            .meta_bytes("rng_seed")?
            .try_into()
            .map_err(|_| Error::CorruptCheckpoint("rng_seed must be 32 bytes".into()))?;
        let word_pos: [u8; 16] = c
            .meta_bytes("rng_word_pos")?
            .try_into()
            .map_err(|_| Error::CorruptCheckpoint("rng_word_pos must be 16 bytes".into()))?;
        let rng = RngState {
            seed,
            stream: c.meta_u64("rng_stream")?,
            word_pos: u128::from_le_bytes(word_pos),
        };
        let vocab_hash = c.meta_str("vocab_hash")?.to_string();

        let mut tensors = c.tensors;
        let names: Vec<String> = tensors
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| !n.starts_with("adam."))
            .collect();
        let mut store = ParamStore::new();
        for (name, t) in names.iter().zip(take_tensors(&mut tensors, "", &names)?) {
            store.push(name.clone(), t);
        }
        let m = take_tensors(&mut tensors, "adam.m/", &names)?;
        let v = take_tensors(&mut tensors, "adam.v/", &names)?;
        if let Some((extra, _)) = tensors.first() {
            return Err(Error::CorruptCheckpoint(format!("unexpected tensor {extra}")));
        }
        let params = ModelParameters::from_store(model_config, store)?;
        Ok(Checkpoint {
            params,
            train_config,
            optimizer: AdamW::from_state(adam_config, adam_step, m, v),
            step,
            rng,
            vocab_hash,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &[u8]) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s);
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'b [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(ContainerKind::Classifier);
        c.put("step", MetaValue::U64(42));
        c.put("lr", MetaValue::F64(1e-4));
        c.put("name", MetaValue::Str("héllo".into()));
        c.put("seed", MetaValue::Bytes(vec![1, 2, 3]));
        c.tensors.push(("w".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, 1e-300, 3.5]).unwrap()));
        c.tensors.push(("empty".into(), Tensor::zeros(&[0, 3])));
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta_u64("step").unwrap(), 42);
    }

    #[test]
    fn version_and_checksum_errors() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));

        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));

        let bytes = sample().to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"nonsense").is_err());
    }
}
