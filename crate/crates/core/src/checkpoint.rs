//! Checkpoint container: every learnable parameter saved bit-exactly as
//! base64 little-endian f64, keyed by registry name, alongside hashes of the
//! config and vocabulary that produced it. Warm starting copies the
//! intersection of parameter names from one store into another.

use std::path::Path;

use base64::Engine;
use base64::engine::general_purpose::STANDARD as B64;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub vocab_hash: String,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config_hash: String,
    vocab_hash: String,
    params: std::collections::BTreeMap<String, TensorFile>,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    shape: [usize; 2],
    dtype: String,
    data: String,
}

pub fn sha256_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(out, "{byte:02x}").expect("hex write");
    }
    out
}

fn encode_tensor(arr: &Array2<f64>) -> TensorFile {
    let mut bytes = Vec::with_capacity(arr.len() * 8);
    for v in arr.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorFile {
        shape: [arr.nrows(), arr.ncols()],
        dtype: "f64".into(),
        data: B64.encode(bytes),
    }
}

fn decode_tensor(name: &str, t: &TensorFile) -> Result<Array2<f64>> {
    if t.dtype != "f64" {
        return Err(Error::Parse(format!(
            "tensor `{name}`: unsupported dtype `{}`",
            t.dtype
        )));
    }
    let bytes = B64
        .decode(&t.data)
        .map_err(|e| Error::Parse(format!("tensor `{name}`: bad base64: {e}")))?;
    let n = t.shape[0] * t.shape[1];
    if bytes.len() != n * 8 {
        return Err(Error::Parse(format!(
            "tensor `{name}`: {} bytes for shape {:?}",
            bytes.len(),
            t.shape
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((t.shape[0], t.shape[1]), values)
        .map_err(|e| Error::Parse(format!("tensor `{name}`: {e}")))
}

impl Checkpoint {
    pub fn new(params: ParamStore, config_hash: String, vocab_hash: String) -> Self {
        Self { config_hash, vocab_hash, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            vocab_hash: self.vocab_hash.clone(),
            params: self
                .params
                .iter()
                .map(|(name, arr)| (name.clone(), encode_tensor(arr)))
                .collect(),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint format version {} (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut params = ParamStore::new();
        for (name, tensor) in &file.params {
            params.insert(name, decode_tensor(name, tensor)?);
        }
        params.check_finite()?;
        Ok(Self { config_hash: file.config_hash, vocab_hash: file.vocab_hash, params })
    }
}

/// Copy every parameter whose name exists in both stores from `source` into
/// `target`. Returns the copied names (sorted). A name collision with a
/// different shape is a config mismatch and fails loudly.
pub fn warm_start(target: &mut ParamStore, source: &ParamStore) -> Result<Vec<String>> {
    let mut copied = Vec::new();
    let names: Vec<String> = target.names();
    for name in names {
        if let Some(src) = source.get(&name) {
            let dst = target.get_mut(&name).expect("name from target");
            if dst.dim() != src.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "warm start `{name}`: checkpoint {:?} vs model {:?}",
                    src.dim(),
                    dst.dim()
                )));
            }
            dst.assign(src);
            copied.push(name);
        }
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert("a.w", uniform_init(&mut rng, 3, 5, 0.7));
        store.insert("b.w", Array2::from_shape_fn((2, 2), |(i, j)| {
            (i as f64 + 0.1) / (j as f64 + 0.3) * 1e-17
        }));
        let ckpt = Checkpoint::new(store, "cfg".into(), "voc".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config_hash, "cfg");
        assert_eq!(loaded.vocab_hash, "voc");
        assert_eq!(loaded.params.len(), 2);
        for (name, arr) in ckpt.params.iter() {
            let got = loaded.params.get(name).unwrap();
            assert_eq!(arr.dim(), got.dim());
            for (x, y) in arr.iter().zip(got.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} drifted");
            }
        }
    }

    #[test]
    fn warm_start_copies_intersection_only() {
        let mut source = ParamStore::new();
        source.insert("enc.w", Array2::from_elem((2, 3), 1.5));
        source.insert("head.w", Array2::from_elem((4, 4), 9.0));
        let mut target = ParamStore::new();
        target.insert("enc.w", Array2::zeros((2, 3)));
        target.insert("agent.w", Array2::zeros((1, 1)));
        let copied = warm_start(&mut target, &source).unwrap();
        assert_eq!(copied, vec!["enc.w".to_string()]);
        assert_eq!(target.get("enc.w").unwrap()[[1, 2]], 1.5);
        assert_eq!(target.get("agent.w").unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn warm_start_rejects_shape_mismatch() {
        let mut source = ParamStore::new();
        source.insert("enc.w", Array2::zeros((2, 3)));
        let mut target = ParamStore::new();
        target.insert("enc.w", Array2::zeros((3, 2)));
        assert!(warm_start(&mut target, &source).is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt.json");
        std::fs::write(
            &path,
            r#"{"format_version":2,"config_hash":"x","vocab_hash":"y","params":{}}"#,
        )
        .unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
