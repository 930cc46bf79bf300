//! Base-model checkpoint: the same header-plus-LE-f64-payload container as
//! adapter files, holding every base parameter in declaration order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_file};
use crate::math::Matrix;
use crate::model::{BaseModel, ModelConfig};

const MAGIC: &str = "lora-compose checkpoint v1";

pub fn save_checkpoint(base: &BaseModel, config_hash: &str, path: &Path) -> Result<()> {
    let cfg = &base.config;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("config: {config_hash}\n"));
    header.push_str(&format!("model: {}\n", cfg.structural_hash()));
    header.push_str(&format!(
        "dims: input={} tokens={} d_model={} heads={} blocks={} mlp={} classes={}\n",
        cfg.input_dim, cfg.tokens, cfg.d_model, cfg.heads, cfg.blocks, cfg.mlp_hidden, cfg.classes
    ));
    header.push_str(&format!("weights: {}\n", base.weights_hash()));

    let mut payload: Vec<u8> = Vec::new();
    for_each_tensor(base, |data| {
        for &x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    });
    header.push_str(&format!("payload_bytes: {}\n\n", payload.len()));
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(BaseModel, String)> {
    let bytes = read_file(path)?;
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .map(|i| i + 1)
        .ok_or_else(|| Error::Format("checkpoint has no header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let payload = &bytes[header_end + 1..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(Error::VersionMismatch {
            found: magic.to_string(),
            expected: MAGIC.to_string(),
        });
    }
    let mut config_hash = String::new();
    let mut model_hash = String::new();
    let mut weights_hash = String::new();
    let mut dims: Option<ModelConfig> = None;
    let mut payload_bytes = 0usize;
    for line in lines {
        if let Some(v) = line.strip_prefix("config: ") {
            config_hash = v.to_string();
        } else if let Some(v) = line.strip_prefix("model: ") {
            model_hash = v.to_string();
        } else if let Some(v) = line.strip_prefix("weights: ") {
            weights_hash = v.to_string();
        } else if let Some(v) = line.strip_prefix("payload_bytes: ") {
            payload_bytes = v
                .parse()
                .map_err(|_| Error::Format("bad payload_bytes".into()))?;
        } else if let Some(v) = line.strip_prefix("dims: ") {
            let mut cfg = ModelConfig::default();
            for tok in v.split_whitespace() {
                let (key, value) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("bad dims token {tok:?}")))?;
                let value: usize = value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad dims value {tok:?}")))?;
                match key {
                    "input" => cfg.input_dim = value,
                    "tokens" => cfg.tokens = value,
                    "d_model" => cfg.d_model = value,
                    "heads" => cfg.heads = value,
                    "blocks" => cfg.blocks = value,
                    "mlp" => cfg.mlp_hidden = value,
                    "classes" => cfg.classes = value,
                    other => return Err(Error::Format(format!("unknown dim {other:?}"))),
                }
            }
            dims = Some(cfg);
        }
    }
    let cfg = dims.ok_or_else(|| Error::Format("checkpoint missing dims".into()))?;
    if cfg.structural_hash() != model_hash {
        return Err(Error::HashMismatch {
            found: model_hash,
            expected: cfg.structural_hash(),
        });
    }
    if payload.len() < payload_bytes {
        return Err(Error::Truncated {
            expected: payload_bytes,
            found: payload.len(),
        });
    }

    let mut base = BaseModel::init(cfg, &mut crate::math::RngStream::from_seed(0))?;
    let mut offset = 0usize;
    let mut failed = None;
    for_each_tensor_mut(&mut base, |data| {
        let n = data.len() * 8;
        if offset + n > payload_bytes {
            failed = Some(Error::Truncated {
                expected: offset + n,
                found: payload_bytes,
            });
            return;
        }
        for (x, chunk) in data.iter_mut().zip(payload[offset..offset + n].chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        offset += n;
    });
    if let Some(err) = failed {
        return Err(err);
    }
    if offset != payload_bytes {
        return Err(Error::Format(format!(
            "payload length {payload_bytes} does not match dims ({offset} expected)"
        )));
    }
    if base.weights_hash() != weights_hash {
        return Err(Error::HashMismatch {
            found: base.weights_hash(),
            expected: weights_hash,
        });
    }
    Ok((base, config_hash))
}

fn for_each_tensor(base: &BaseModel, mut f: impl FnMut(&[f64])) {
    f(base.patch_embed.data());
    f(base.pos_embed.data());
    for b in &base.blocks {
        f(&b.attn_gain);
        f(b.wq.data());
        f(b.wk.data());
        f(b.wv.data());
        f(b.wo.data());
        f(&b.mlp_gain);
        f(b.w1.data());
        f(b.w2.data());
    }
    f(&base.final_gain);
}

fn for_each_tensor_mut(base: &mut BaseModel, mut f: impl FnMut(&mut [f64])) {
    fn fm(m: &mut Matrix, f: &mut impl FnMut(&mut [f64])) {
        f(m.data_mut());
    }
    fm(&mut base.patch_embed, &mut f);
    fm(&mut base.pos_embed, &mut f);
    for b in &mut base.blocks {
        f(&mut b.attn_gain);
        fm(&mut b.wq, &mut f);
        fm(&mut b.wk, &mut f);
        fm(&mut b.wv, &mut f);
        fm(&mut b.wo, &mut f);
        f(&mut b.mlp_gain);
        fm(&mut b.w1, &mut f);
        fm(&mut b.w2, &mut f);
    }
    f(&mut base.final_gain);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::RngStream;

    #[test]
    fn checkpoint_round_trip_preserves_weights_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let base = BaseModel::init(ModelConfig::default(), &mut RngStream::from_seed(9)).unwrap();
        save_checkpoint(&base, "cfg-hash", &path).unwrap();
        let (loaded, cfg_hash) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, base);
        assert_eq!(cfg_hash, "cfg-hash");
        assert_eq!(loaded.weights_hash(), base.weights_hash());

        // byte-identical on re-save
        let path2 = dir.path().join("base2.ckpt");
        save_checkpoint(&loaded, &cfg_hash, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn flipped_payload_bit_fails_weight_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let base = BaseModel::init(ModelConfig::micro(), &mut RngStream::from_seed(1)).unwrap();
        save_checkpoint(&base, "h", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }), "{err}");
    }
}
