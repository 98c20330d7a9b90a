//! Binary checkpoint format.
//!
//! Layout: magic `NCR1`, little-endian u16 format version, u32 header
//! length, a structured-text header (config, vocabulary, tensor shapes in
//! declared order), raw little-endian f32 tensor data in that order, and a
//! trailing FNV-1a 64-bit checksum over header plus tensor bytes.
//! Save -> load -> save is byte-identical and a loaded model scores
//! bit-for-bit like the one saved.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NcrError, Result};
use crate::modules::{ModelIds, TwoLayerIds};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"NCR1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub store: ParamStore<f32>,
    pub ids: ModelIds,
    pub best_valid_ndcg5: f64,
    pub best_epoch: usize,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        for (k, v) in self.config.to_pairs() {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!("best_valid_ndcg5={:?}\n", self.best_valid_ndcg5));
        header.push_str(&format!("best_epoch={}\n", self.best_epoch));
        header.push_str(&format!("users={}\n", self.user_tokens.join(",")));
        header.push_str(&format!("items={}\n", self.item_tokens.join(",")));
        for id in self.store.ids() {
            let t = self.store.get(id);
            header.push_str(&format!(
                "tensor={}:{}:{}:{}\n",
                self.store.name(id),
                t.rows,
                t.cols,
                u8::from(self.store.is_trainable(id)),
            ));
        }

        let mut payload: Vec<u8> = Vec::new();
        for id in self.store.ids() {
            for &v in &self.store.get(id).data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        let mut checked = header.into_bytes();
        checked.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&checked).to_le_bytes());

        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |msg: &str| NcrError::Checkpoint(format!("{}: {msg}", path.display()));

        if bytes.len() < 4 + 2 + 4 + 8 {
            return Err(bad("truncated file"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(NcrError::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let header_start = 10;
        let header_end = header_start + header_len;
        if bytes.len() < header_end + 8 {
            return Err(bad("truncated header"));
        }
        let header = std::str::from_utf8(&bytes[header_start..header_end])
            .map_err(|_| bad("header is not utf-8"))?
            .to_string();

        let mut config_pairs = Vec::new();
        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut tensors: Vec<(String, usize, usize, bool)> = Vec::new();
        let mut best_valid_ndcg5 = 0.0f64;
        let mut best_epoch = 0usize;
        for line in header.lines() {
            let (key, value) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
            match key {
                "users" => users = value.split(',').map(str::to_string).collect(),
                "items" => items = value.split(',').map(str::to_string).collect(),
                "best_valid_ndcg5" => {
                    best_valid_ndcg5 = value.parse().map_err(|_| bad("bad best_valid_ndcg5"))?
                }
                "best_epoch" => best_epoch = value.parse().map_err(|_| bad("bad best_epoch"))?,
                "tensor" => {
                    let parts: Vec<&str> = value.split(':').collect();
                    if parts.len() != 4 {
                        return Err(bad("malformed tensor line"));
                    }
                    tensors.push((
                        parts[0].to_string(),
                        parts[1].parse().map_err(|_| bad("bad tensor rows"))?,
                        parts[2].parse().map_err(|_| bad("bad tensor cols"))?,
                        parts[3] == "1",
                    ));
                }
                _ => config_pairs.push((key.to_string(), value.to_string())),
            }
        }
        let config = TrainConfig::from_pairs(&config_pairs)?;

        let total_floats: usize = tensors.iter().map(|&(_, r, c, _)| r * c).sum();
        let payload_end = header_end + total_floats * 4;
        if bytes.len() != payload_end + 8 {
            return Err(bad(&format!(
                "tensor payload size mismatch: file has {} bytes, expected {}",
                bytes.len(),
                payload_end + 8
            )));
        }
        let stored_sum = u64::from_le_bytes(bytes[payload_end..payload_end + 8].try_into().unwrap());
        if fnv1a64(&bytes[header_start..payload_end]) != stored_sum {
            return Err(bad("checksum mismatch"));
        }

        let mut store = ParamStore::new();
        let mut off = header_end;
        for (name, rows, cols, trainable) in &tensors {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            store.add(name, Tensor::from_vec(*rows, *cols, data), *trainable);
        }

        let ids = rebuild_ids(&store, config.dim)?;
        Ok(Checkpoint {
            config,
            user_tokens: users,
            item_tokens: items,
            store,
            ids,
            best_valid_ndcg5,
            best_epoch,
        })
    }
}

/// Parameter declaration order is fixed, so ids rebuild positionally.
fn rebuild_ids(store: &ParamStore<f32>, dim: usize) -> Result<ModelIds> {
    let expect = |idx: usize, name: &str| -> Result<usize> {
        if idx >= store.len() || store.name(idx) != name {
            return Err(NcrError::Checkpoint(format!(
                "unexpected tensor order: wanted `{name}` at slot {idx}"
            )));
        }
        Ok(idx)
    };
    let two = |base: usize, prefix: &str| -> Result<TwoLayerIds> {
        Ok(TwoLayerIds {
            w1: expect(base, &format!("{prefix}.w1"))?,
            b1: expect(base + 1, &format!("{prefix}.b1"))?,
            w2: expect(base + 2, &format!("{prefix}.w2"))?,
            b2: expect(base + 3, &format!("{prefix}.b2"))?,
        })
    };
    Ok(ModelIds {
        user_table: expect(0, "user_table")?,
        item_table: expect(1, "item_table")?,
        encoder: two(2, "encoder")?,
        not_gate: two(6, "not")?,
        and_gate: two(10, "and")?,
        or_gate: two(14, "or")?,
        anchor: expect(18, "anchor")?,
        dim,
    })
}
