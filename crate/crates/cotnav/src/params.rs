//! Named parameter blocks, the optimizer, and the checkpoint archive.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::gaussian;

#[derive(Debug, Clone)]
pub struct Block {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Block {
    fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        let n = rows * cols;
        debug_assert_eq!(values.len(), n);
        Self { rows, cols, values, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn add_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (d, s) in self.grad.iter_mut().zip(g) {
            *d += s;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: BTreeMap<String, Block>,
    adam_t: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a gaussian-initialized block. Each block draws from its own
    /// stream seeded by (seed, name) so layouts can change without reshuffling
    /// everything else.
    pub fn init_gaussian(&mut self, name: &str, rows: usize, cols: usize, std: f64, seed: u64) {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
        let values = (0..rows * cols).map(|_| gaussian(&mut rng) * std).collect();
        self.blocks.insert(name.to_string(), Block::new(rows, cols, values));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.blocks.insert(name.to_string(), Block::new(rows, cols, vec![value; rows * cols]));
    }

    pub fn block(&self, name: &str) -> &Block {
        self.blocks.get(name).unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn block_mut(&mut self, name: &str) -> &mut Block {
        self.blocks.get_mut(name).unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.blocks.keys()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.values().map(|b| b.values.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for b in self.blocks.values_mut() {
            b.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.blocks
            .values()
            .map(|b| b.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Adam update with global gradient-norm clipping.
    pub fn adam_step(&mut self, lr: f64, clip: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.adam_t += 1;
        let norm = self.grad_norm();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let t = self.adam_t as i32;
        let corr = (1.0 - B2.powi(t)).sqrt() / (1.0 - B1.powi(t));
        for b in self.blocks.values_mut() {
            for i in 0..b.values.len() {
                let g = b.grad[i] * scale;
                b.m[i] = B1 * b.m[i] + (1.0 - B1) * g;
                b.v[i] = B2 * b.v[i] + (1.0 - B2) * g * g;
                b.values[i] -= lr * corr * b.m[i] / (b.v[i].sqrt() + EPS);
            }
        }
    }

    /// Parameters only, as little-endian f32, in name order.
    pub fn payload_f32(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in self.blocks.values() {
            for v in &b.values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// archive
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"NAVARCH1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    /// Arbitrary JSON the caller wants to ride along (training config, vocab hash).
    meta: serde_json::Value,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
    crc32: u32,
}

pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, t) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *t = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFFFFFF
}

impl ParamStore {
    /// Versioned archive: magic, manifest length + JSON, then raw
    /// little-endian f32 payloads per block in manifest order.
    pub fn save_archive(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut blocks = Vec::new();
        let mut payload = Vec::new();
        for (name, b) in &self.blocks {
            let mut raw = Vec::with_capacity(b.values.len() * 4);
            for v in &b.values {
                raw.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            blocks.push(BlockEntry {
                name: name.clone(),
                rows: b.rows,
                cols: b.cols,
                crc32: crc32(&raw),
            });
            payload.extend_from_slice(&raw);
        }
        let manifest = serde_json::to_vec(&Manifest { version: 1, meta, blocks })?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(manifest.len() as u64).to_le_bytes())?;
        f.write_all(&manifest)?;
        f.write_all(&payload)?;
        Ok(())
    }

    /// Load an archive; block layout replaces the current store. Returns the
    /// caller metadata stored at save time.
    pub fn load_archive(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let mut f = std::fs::File::open(path)
            .map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadArchive("bad magic".into()));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)?;
        let mlen = u64::from_le_bytes(len8) as usize;
        let mut mbytes = vec![0u8; mlen];
        f.read_exact(&mut mbytes)?;
        let manifest: Manifest = serde_json::from_slice(&mbytes)?;
        if manifest.version != 1 {
            return Err(Error::BadArchive(format!("unsupported version {}", manifest.version)));
        }
        let mut store = ParamStore::new();
        for entry in &manifest.blocks {
            let n = entry.rows * entry.cols;
            let mut raw = vec![0u8; n * 4];
            f.read_exact(&mut raw)?;
            if crc32(&raw) != entry.crc32 {
                return Err(Error::BadArchive(format!("checksum mismatch for {}", entry.name)));
            }
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.blocks.insert(entry.name.clone(), Block::new(entry.rows, entry.cols, values));
        }
        Ok((store, manifest.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_reduces_quadratic() {
        let mut p = ParamStore::new();
        p.init_gaussian("x", 1, 8, 1.0, 42);
        for _ in 0..500 {
            p.zero_grad();
            let g: Vec<f64> = p.block("x").values.iter().map(|v| 2.0 * v).collect();
            p.block_mut("x").add_grad(&g);
            p.adam_step(0.05, 1.0);
        }
        let loss: f64 = p.block("x").values.iter().map(|v| v * v).sum();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut p = ParamStore::new();
        p.init_gaussian("a.w", 3, 4, 0.1, 1);
        p.init_const("b.bias", 1, 5, 0.25);
        let meta = serde_json::json!({"note": "test", "steps": 7});
        p.save_archive(&path, meta.clone()).unwrap();
        let (q, m2) = ParamStore::load_archive(&path).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(q.param_count(), p.param_count());
        for name in ["a.w", "b.bias"] {
            for (a, b) in p.block(name).values.iter().zip(&q.block(name).values) {
                assert!((a - b).abs() < 1e-6, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn archive_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut p = ParamStore::new();
        p.init_gaussian("w", 2, 2, 0.1, 3);
        p.save_archive(&path, serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 2] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(ParamStore::load_archive(&path), Err(Error::BadArchive(_))));
    }

    #[test]
    fn init_deterministic_per_name() {
        let mut a = ParamStore::new();
        a.init_gaussian("w1", 4, 4, 0.02, 9);
        a.init_gaussian("w2", 4, 4, 0.02, 9);
        let mut b = ParamStore::new();
        b.init_gaussian("w2", 4, 4, 0.02, 9);
        b.init_gaussian("w1", 4, 4, 0.02, 9);
        assert_eq!(a.block("w1").values, b.block("w1").values);
        assert_eq!(a.block("w2").values, b.block("w2").values);
        assert_ne!(a.block("w1").values, a.block("w2").values);
    }
}
