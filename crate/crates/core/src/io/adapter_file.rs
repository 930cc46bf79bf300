//! Adapter file format, version 1.
//!
//! A human-readable header (one `key: value` per line plus a site table)
//! followed by a blank line and a raw little-endian f64 payload: for each
//! site in header order, the entries of `A` then `B`, row-major. Headers
//! diff cleanly; the payload round-trips losslessly. Saving what was loaded
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_file};
use crate::lora::{AdapterSet, LoraAdapter, SiteId, SiteRole};
use crate::math::Matrix;

const MAGIC: &str = "lora-compose adapter v1";

/// Provenance recorded next to the adapter payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterFileMeta {
    /// Hash of the run config that produced the artifact.
    pub config_hash: String,
    /// Structural hash of the model the adapters attach to.
    pub model_hash: String,
    /// Pipeline seed the upstream training ran with.
    pub seed: u64,
}

pub fn save_adapter(set: &AdapterSet, meta: &AdapterFileMeta, path: &Path) -> Result<()> {
    if set.provenance.contains('\n') {
        return Err(Error::Argument("provenance must be a single line".into()));
    }
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("config: {}\n", meta.config_hash));
    header.push_str(&format!("model: {}\n", meta.model_hash));
    header.push_str(&format!("task: {}\n", set.provenance));
    header.push_str(&format!("seed: {}\n", meta.seed));
    header.push_str(&format!("alpha: {}\n", set.alpha));
    header.push_str(&format!("sites: {}\n", set.adapters.len()));

    let mut payload: Vec<u8> = Vec::new();
    for (site, ad) in &set.adapters {
        header.push_str(&format!(
            "site block={} role={} d={} c={} r={}\n",
            site.block,
            site.role.tag(),
            ad.out_dim(),
            ad.in_dim(),
            ad.rank
        ));
        for &x in ad.a.data().iter().chain(ad.b.data()) {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    header.push_str(&format!("payload_bytes: {}\n\n", payload.len()));

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)
}

/// Loads and validates an adapter file against the target model's
/// structural hash.
pub fn load_adapter(path: &Path, expected_model_hash: &str) -> Result<(AdapterSet, AdapterFileMeta)> {
    let bytes = read_file(path)?;
    let header_end = find_header_end(&bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("adapter header is not UTF-8".into()))?;
    let payload = &bytes[header_end + 1..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(Error::VersionMismatch {
            found: magic.to_string(),
            expected: MAGIC.to_string(),
        });
    }

    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut site_lines: Vec<&str> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("site ") {
            site_lines.push(rest);
        } else if let Some((key, value)) = line.split_once(": ") {
            fields.insert(key, value);
        } else if !line.is_empty() {
            return Err(Error::Format(format!("unrecognized header line {line:?}")));
        }
    }
    let field = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::Format(format!("adapter header missing {key:?}")))
    };

    let model_hash = field("model")?.to_string();
    if model_hash != expected_model_hash {
        return Err(Error::HashMismatch {
            found: model_hash,
            expected: expected_model_hash.to_string(),
        });
    }
    let meta = AdapterFileMeta {
        config_hash: field("config")?.to_string(),
        model_hash,
        seed: parse_num(field("seed")?, "seed")?,
    };
    let alpha: f64 = field("alpha")?
        .parse()
        .map_err(|_| Error::Format("bad alpha".into()))?;
    let provenance = field("task")?.to_string();
    let n_sites: usize = parse_num(field("sites")?, "sites")?;
    if site_lines.len() != n_sites {
        return Err(Error::Format(format!(
            "header declares {n_sites} sites but lists {}",
            site_lines.len()
        )));
    }
    let payload_bytes: usize = parse_num(field("payload_bytes")?, "payload_bytes")?;
    if payload.len() < payload_bytes {
        return Err(Error::Truncated {
            expected: payload_bytes,
            found: payload.len(),
        });
    }

    let mut adapters = BTreeMap::new();
    let mut offset = 0usize;
    for line in site_lines {
        let kv: BTreeMap<&str, &str> = line
            .split_whitespace()
            .filter_map(|tok| tok.split_once('='))
            .collect();
        let get = |key: &str| -> Result<&str> {
            kv.get(key)
                .copied()
                .ok_or_else(|| Error::Format(format!("site line missing {key}=")))
        };
        let site = SiteId::new(
            parse_num(get("block")?, "block")?,
            SiteRole::from_tag(get("role")?)?,
        );
        let d: usize = parse_num(get("d")?, "d")?;
        let c: usize = parse_num(get("c")?, "c")?;
        let r: usize = parse_num(get("r")?, "r")?;

        let a = read_matrix(payload, &mut offset, d, r, payload_bytes)?;
        let b = read_matrix(payload, &mut offset, c, r, payload_bytes)?;
        adapters.insert(site, LoraAdapter::new(a, b, alpha)?);
    }
    if offset != payload_bytes {
        return Err(Error::Format(format!(
            "payload length {payload_bytes} does not match site table ({offset} expected)"
        )));
    }
    Ok((AdapterSet::new(adapters, provenance)?, meta))
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .map(|i| i + 1)
        .ok_or_else(|| Error::Format("adapter file has no header terminator".into()))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
}

fn read_matrix(
    payload: &[u8],
    offset: &mut usize,
    rows: usize,
    cols: usize,
    limit: usize,
) -> Result<Matrix> {
    let n = rows * cols * 8;
    if *offset + n > limit || *offset + n > payload.len() {
        return Err(Error::Truncated {
            expected: *offset + n,
            found: payload.len().min(limit),
        });
    }
    let data: Vec<f64> = payload[*offset..*offset + n]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    *offset += n;
    Matrix::from_vec(rows, cols, data)
}
