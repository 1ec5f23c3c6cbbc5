//! Checkpoint container: `SMCK` magic, a JSON header describing the config
//! and every array (name, shape, SHA-256 of the raw bytes), then the arrays
//! themselves as little-endian 32-bit floats in header order. Digests and
//! the parameter inventory are verified on load.

use crate::footprint::param_inventory;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::AdamW;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model plus everything needed to resume: optimizer moments and
/// the training RNG position.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    t: u64,
    moments_m: Vec<ArrayEntry>,
    moments_v: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    epoch: usize,
    rng_seed: u64,
    /// u128 serialized as a decimal string (JSON numbers cap at 2^53).
    rng_word_pos: String,
    params: Vec<ArrayEntry>,
    optimizer: Option<OptimizerHeader>,
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn entry_for(name: &str, t: &Tensor<f32>, payload: &mut Vec<u8>) -> ArrayEntry {
    let bytes = le_bytes(t);
    let sha256 = sha256_hex(&bytes);
    payload.extend_from_slice(&bytes);
    ArrayEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        sha256,
    }
}

fn bad(path: &Path, msg: impl Into<String>) -> TensorError {
    TensorError::io(path.display().to_string(), msg.into())
}

/// Check that the checkpoint's tensors are exactly the config's parameter
/// inventory: same names, same shapes, same order.
fn verify_inventory(
    config: &ModelConfig,
    entries: &[(String, Vec<usize>)],
    what: &str,
) -> Result<()> {
    let expected = param_inventory(config)?;
    if entries.len() != expected.len() {
        return Err(TensorError::Invalid {
            op: "checkpoint",
            msg: format!(
                "{what}: {} arrays but the config calls for {}",
                entries.len(),
                expected.len()
            ),
        });
    }
    for (got, want) in entries.iter().zip(&expected) {
        if got.0 != want.0 || got.1 != want.1 {
            return Err(TensorError::Invalid {
                op: "checkpoint",
                msg: format!(
                    "{what}: array {:?} with shape {:?} where the config calls for {:?} {:?}",
                    got.0, got.1, want.0, want.1
                ),
            });
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let named = ckpt.params.named_tensors();
    let listed: Vec<(String, Vec<usize>)> = named
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    verify_inventory(&ckpt.config, &listed, "save")?;

    let mut payload = Vec::new();
    let params: Vec<ArrayEntry> = named
        .iter()
        .map(|(n, t)| entry_for(n, t, &mut payload))
        .collect();
    let optimizer = match &ckpt.optimizer {
        Some(opt) => {
            if opt.m.len() != named.len() {
                return Err(TensorError::Invalid {
                    op: "checkpoint",
                    msg: format!(
                        "optimizer holds {} moment slots for {} parameters",
                        opt.m.len(),
                        named.len()
                    ),
                });
            }
            let moments_m = named
                .iter()
                .zip(&opt.m)
                .map(|((n, _), t)| entry_for(n, t, &mut payload))
                .collect();
            let moments_v = named
                .iter()
                .zip(&opt.v)
                .map(|((n, _), t)| entry_for(n, t, &mut payload))
                .collect();
            Some(OptimizerHeader {
                t: opt.t,
                moments_m,
                moments_v,
            })
        }
        None => None,
    };
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        rng_seed: ckpt.rng_seed,
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        params,
        optimizer,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| bad(path, e.to_string()))?;

    let mut file = std::fs::File::create(path).map_err(|e| bad(path, e.to_string()))?;
    let write = |f: &mut std::fs::File, bytes: &[u8]| -> Result<()> {
        f.write_all(bytes).map_err(|e| bad(path, e.to_string()))
    };
    write(&mut file, CHECKPOINT_MAGIC)?;
    write(&mut file, &(header_json.len() as u64).to_le_bytes())?;
    write(&mut file, &header_json)?;
    write(&mut file, &payload)?;
    Ok(())
}

fn take_array(
    path: &Path,
    entry: &ArrayEntry,
    payload: &[u8],
    cursor: &mut usize,
) -> Result<Tensor<f32>> {
    let n: usize = entry.shape.iter().product();
    let len = n * 4;
    let end = *cursor + len;
    if end > payload.len() {
        return Err(bad(path, format!("payload truncated at array {:?}", entry.name)));
    }
    let bytes = &payload[*cursor..end];
    *cursor = end;
    if sha256_hex(bytes) != entry.sha256 {
        return Err(bad(
            path,
            format!("digest mismatch on array {:?}", entry.name),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(&entry.shape, data))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path).map_err(|e| bad(path, e.to_string()))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|e| bad(path, e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(path, format!("bad magic {magic:?}")));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| bad(path, e.to_string()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|e| bad(path, e.to_string()))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| bad(path, e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| bad(path, e.to_string()))?;

    let listed: Vec<(String, Vec<usize>)> = header
        .params
        .iter()
        .map(|e| (e.name.clone(), e.shape.clone()))
        .collect();
    verify_inventory(&header.config, &listed, "load")?;

    let mut cursor = 0usize;
    let mut arrays = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        arrays.push(take_array(path, entry, &payload, &mut cursor)?);
    }
    // Materialize a parameter record with the right structure, then overwrite
    // every tensor in walk order (the same order the inventory pins down).
    let mut throwaway = ChaCha20Rng::seed_from_u64(0);
    let mut params = ModelParams::<f32>::init(&header.config, &mut throwaway)?;
    let mut i = 0;
    params.visit_mut(&mut |_, t| {
        *t = arrays[i].clone();
        i += 1;
    });

    let optimizer = match &header.optimizer {
        Some(oh) => {
            if oh.moments_m.len() != header.params.len()
                || oh.moments_v.len() != header.params.len()
            {
                return Err(bad(path, "optimizer moment count mismatch"));
            }
            let mut m = Vec::new();
            for entry in &oh.moments_m {
                m.push(take_array(path, entry, &payload, &mut cursor)?);
            }
            let mut v = Vec::new();
            for entry in &oh.moments_v {
                v.push(take_array(path, entry, &payload, &mut cursor)?);
            }
            Some(AdamW { m, v, t: oh.t })
        }
        None => None,
    };
    if cursor != payload.len() {
        return Err(bad(
            path,
            format!(
                "{} trailing payload bytes after the last array",
                payload.len() - cursor
            ),
        ));
    }
    let rng_word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| bad(path, format!("bad rng position {:?}", header.rng_word_pos)))?;

    Ok(Checkpoint {
        config: header.config,
        params,
        optimizer,
        epoch: header.epoch,
        rng_seed: header.rng_seed,
        rng_word_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::TransformerPosition;
    use crate::data::Dataset;
    use crate::train::evaluate;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            preset: None,
            embed_dim: 16,
            depth: 2,
            ratio_n: 1,
            transformer_position: TransformerPosition::Start,
            patch_size: 8,
            tubelet_len: 1,
            image_size: 16,
            n_frames: 1,
            n_heads: 2,
            n_classes: 3,
            use_cls_token: true,
        }
    }

    fn tiny_checkpoint(seed: u64) -> Checkpoint {
        let cfg = tiny_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let mut opt = AdamW::for_params(&params);
        opt.t = 17;
        opt.m[0].data_mut()[0] = 0.125;
        opt.v[3].data_mut()[1] = 2.5;
        Checkpoint {
            config: cfg,
            params,
            optimizer: Some(opt),
            epoch: 9,
            rng_seed: seed,
            rng_word_pos: (u64::MAX as u128) + 12345,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smck");
        let ckpt = tiny_checkpoint(5);
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 9);
        assert_eq!(back.rng_seed, 5);
        assert_eq!(back.rng_word_pos, (u64::MAX as u128) + 12345);
        assert_eq!(back.config.embed_dim, 16);
        for ((an, at), (bn, bt)) in ckpt
            .params
            .named_tensors()
            .iter()
            .zip(back.params.named_tensors())
        {
            assert_eq!(*an, bn);
            assert_eq!(at.data(), bt.data(), "tensor {an} differs");
        }
        let (ao, bo) = (ckpt.optimizer.unwrap(), back.optimizer.unwrap());
        assert_eq!(ao.t, bo.t);
        for (x, y) in ao.m.iter().zip(&bo.m) {
            assert_eq!(x.data(), y.data());
        }
        for (x, y) in ao.v.iter().zip(&bo.v) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn loaded_params_evaluate_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smck");
        let ckpt = tiny_checkpoint(21);
        let images: Vec<Tensor<f32>> = (0..6)
            .map(|i| {
                let mut rng = ChaCha20Rng::seed_from_u64(100 + i);
                Tensor::randn(&[3, 16, 16], 0.5, &mut rng)
            })
            .collect();
        let ds = Dataset::new(images, vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let before = evaluate(&ckpt.config, &ckpt.params, &ds).unwrap();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let after = evaluate(&back.config, &back.params, &ds).unwrap();
        assert_eq!(before, after);
        for (img, _) in ds.images.iter().zip(0..) {
            let a = crate::train::predict_logits(&ckpt.config, &ckpt.params, img).unwrap();
            let b = crate::train::predict_logits(&back.config, &back.params, img).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corrupted_payload_fails_digest_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smck");
        save_checkpoint(&path, &tiny_checkpoint(1)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(TensorError::Io { msg, .. }) => {
                assert!(msg.contains("digest mismatch"), "got {msg:?}")
            }
            other => panic!("expected digest failure, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smck");
        save_checkpoint(&path, &tiny_checkpoint(2)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(TensorError::Io { msg, .. }) => assert!(msg.contains("magic"), "got {msg:?}"),
            other => panic!("expected magic failure, got {other:?}"),
        }
    }

    #[test]
    fn header_inventory_mismatch_rejected() {
        // Rewrite the header so it claims a different depth: the parameter
        // inventory no longer matches and the load must refuse.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smck");
        save_checkpoint(&path, &tiny_checkpoint(3)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let patched = header.replace("\"depth\":2", "\"depth\":4");
        assert_ne!(header, patched);
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        std::fs::write(&path, out).unwrap();
        match load_checkpoint(&path) {
            Err(TensorError::Invalid { msg, .. }) => {
                assert!(msg.contains("load"), "got {msg:?}")
            }
            other => panic!("expected inventory failure, got {other:?}"),
        }
    }

    #[test]
    fn save_rejects_config_param_mismatch() {
        let mut ckpt = tiny_checkpoint(4);
        ckpt.config.depth = 4;
        assert!(save_checkpoint(Path::new("/tmp/never-written.smck"), &ckpt).is_err());
    }

    #[test]
    fn checkpoint_without_optimizer_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval-only.smck");
        let mut ckpt = tiny_checkpoint(6);
        ckpt.optimizer = None;
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.optimizer.is_none());
        assert_eq!(back.params.n_params(), ckpt.params.n_params());
    }

    #[test]
    fn file_digest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.smck");
        let p2 = dir.path().join("b.smck");
        save_checkpoint(&p1, &tiny_checkpoint(7)).unwrap();
        save_checkpoint(&p2, &tiny_checkpoint(7)).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
