//! Binary checkpoint format.
//!
//! ```text
//! magic "PNASCKPT" | u32 version | 32-byte spec digest
//! u32 n_meta   { str key | str value }
//! u32 n_tensor { str id | u8 dtype | u32 ndim | u64 dims.. | payload }
//! u32 n_keep   { str id | u32 len | f64 values.. }
//! 32-byte SHA-256 of everything above
//! ```
//! Integers and floats are little-endian; `str` is a u32 byte length then
//! UTF-8. dtype 0 is f64, 1 is f32 (lossy, storage only). Keep logits are
//! always f64.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::ParamMap;
use crate::error::{Error, Result};
use crate::space::SearchSpaceSpec;
use crate::supernet::{KeepGranularity, SuperNet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PNASCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: SearchSpaceSpec,
    pub seed: u64,
    pub granularity: KeepGranularity,
    /// Kernels and head.
    pub weights: ParamMap,
    pub keep_logits: ParamMap,
    /// Extra tensors such as optimizer velocity, stored as tensor records.
    pub state: ParamMap,
    pub meta: BTreeMap<String, String>,
}

const STATE_PREFIX: &str = "state/";

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ckpt_err(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err("string is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n.checked_mul(8).ok_or_else(|| ckpt_err("length overflow"))?)?
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_net(net: &SuperNet) -> Self {
        let mut weights = ParamMap::new();
        let mut keep_logits = ParamMap::new();
        for (name, t) in net.params() {
            if name.ends_with("keep_logit") {
                keep_logits.insert(name, t.clone());
            } else {
                weights.insert(name, t.clone());
            }
        }
        Self {
            spec: net.spec().clone(),
            seed: net.seed(),
            granularity: net.granularity(),
            weights,
            keep_logits,
            state: ParamMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_net(&self) -> Result<SuperNet> {
        let mut all = self.weights.clone();
        all.extend(self.keep_logits.iter().map(|(k, v)| (k.clone(), v.clone())));
        SuperNet::from_parts(self.spec.clone(), self.seed, self.granularity, &all)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&hex::decode(self.spec.digest()).expect("hex digest"));

        let mut meta = self.meta.clone();
        meta.insert("spec".into(), serde_json::to_string(&self.spec).expect("spec serializes"));
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert(
            "keep_granularity".into(),
            serde_json::to_string(&self.granularity).expect("serializes"),
        );
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        for (k, v) in &meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }

        let tensors: Vec<(String, &Tensor)> = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.state.iter().map(|(k, v)| (format!("{STATE_PREFIX}{k}"), v)))
            .collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (id, t) in tensors {
            put_str(&mut out, &id);
            out.push(match dtype {
                Dtype::F64 => 0,
                Dtype::F32 => 1,
            });
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }

        out.extend_from_slice(&(self.keep_logits.len() as u32).to_le_bytes());
        for (id, t) in &self.keep_logits {
            put_str(&mut out, id);
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 32 {
            return Err(ckpt_err("file too short"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if !bytes.starts_with(MAGIC) {
            return Err(ckpt_err("bad magic"));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {version}")));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(ckpt_err("checksum mismatch"));
        }
        let digest = hex::encode(r.take(32)?);

        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let mut take_meta = |key: &str| meta.remove(key).ok_or_else(|| ckpt_err(format!("missing meta key {key}")));
        let spec: SearchSpaceSpec =
            serde_json::from_str(&take_meta("spec")?).map_err(|e| ckpt_err(format!("spec: {e}")))?;
        if spec.digest() != digest {
            return Err(ckpt_err("spec digest does not match the stored spec"));
        }
        let seed = take_meta("seed")?.parse().map_err(|_| ckpt_err("seed is not an integer"))?;
        let granularity = serde_json::from_str(&take_meta("keep_granularity")?)
            .map_err(|e| ckpt_err(format!("keep_granularity: {e}")))?;

        let mut weights = ParamMap::new();
        let mut state = ParamMap::new();
        for _ in 0..r.u32()? {
            let id = r.str()?;
            let dtype = r.u8()?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ckpt_err("dims overflow"))?;
            let data = match dtype {
                0 => r.f64s(numel)?,
                1 => r
                    .take(numel.checked_mul(4).ok_or_else(|| ckpt_err("length overflow"))?)?
                    .chunks(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => return Err(ckpt_err(format!("{id}: unknown dtype tag {other}"))),
            };
            let t = Tensor::new(dims, data).map_err(|e| ckpt_err(format!("{id}: {e}")))?;
            match id.strip_prefix(STATE_PREFIX) {
                Some(rest) => state.insert(rest.to_string(), t),
                None => weights.insert(id, t),
            };
        }
        let mut keep_logits = ParamMap::new();
        for _ in 0..r.u32()? {
            let id = r.str()?;
            let n = r.u32()? as usize;
            let t = Tensor::new(vec![n], r.f64s(n)?).map_err(|e| ckpt_err(format!("{id}: {e}")))?;
            keep_logits.insert(id, t);
        }
        if r.pos != body.len() {
            return Err(ckpt_err(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            spec,
            seed,
            granularity,
            weights,
            keep_logits,
            state,
            meta,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        write_atomic(path, &self.to_bytes(dtype))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::tests::small_spec;
    use crate::supernet::InitConfig;

    fn checkpoint() -> Checkpoint {
        let net = SuperNet::build(&small_spec(), 12, &InitConfig::default()).unwrap();
        let mut c = Checkpoint::from_net(&net);
        c.state.insert("velocity/head.bias".into(), Tensor::vector(vec![0.25, -1e-300, 3.0]));
        c.meta.insert("step".into(), "17".into());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = checkpoint();
        let bytes = c.to_bytes(Dtype::F64);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(Dtype::F64), bytes);
        let net = back.to_net().unwrap();
        assert_eq!(net.digest(), c.to_net().unwrap().digest());
    }

    #[test]
    fn f32_storage_is_lossy_but_loads() {
        let c = checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes(Dtype::F32)).unwrap();
        let (a, b) = (&c.weights["head.weight"], &back.weights["head.weight"]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(back.keep_logits, c.keep_logits);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = checkpoint().to_bytes(Dtype::F64);
        let mut flipped = bytes.clone();
        flipped[60] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        let c = checkpoint();
        c.save(&p, Dtype::F64).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
