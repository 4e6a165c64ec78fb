//! On-disk sample archive: one directory per split holding `manifest.json`
//! and one `{uid}.bin` per individual.
//!
//! Record layout: pre bitmap, post bitmap (row-major bits, MSB first,
//! `ceil(g²/8)` bytes each), SIR as `k` f32 LE, SC as `k·g²` f32 LE
//! category-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IndividualSample, IngestError, MovementGrid, Phase, SirVector, SpatialContext};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub user_id: u64,
    pub crop_offset: (u32, u32),
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub g: usize,
    pub k: usize,
    pub samples: Vec<SampleEntry>,
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (idx, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[idx / 8] |= 0x80 >> (idx % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|idx| (bytes[idx / 8] >> (7 - idx % 8)) & 1).collect()
}

fn record_len(g: usize, k: usize) -> usize {
    2 * (g * g).div_ceil(8) + 4 * k + 4 * k * g * g
}

fn encode(sample: &IndividualSample) -> Vec<u8> {
    let mut buf = Vec::with_capacity(record_len(sample.g(), sample.k()));
    buf.extend(pack_bits(&sample.v_pre.bitmap));
    buf.extend(pack_bits(&sample.v_post.bitmap));
    for &v in sample.sir.values.iter().chain(&sample.sc.values) {
        buf.extend((v as f32).to_le_bytes());
    }
    buf
}

fn decode(bytes: &[u8], entry: &SampleEntry, g: usize, k: usize) -> Result<IndividualSample, IngestError> {
    if bytes.len() != record_len(g, k) {
        return Err(IngestError::Archive(format!(
            "{}: expected {} bytes, found {}",
            entry.file,
            record_len(g, k),
            bytes.len()
        )));
    }
    let nb = (g * g).div_ceil(8);
    let grid = |phase, chunk: &[u8]| MovementGrid {
        user_id: entry.user_id,
        phase,
        g,
        crop_offset: entry.crop_offset,
        bitmap: unpack_bits(chunk, g * g),
    };
    let floats: Vec<f64> = bytes[2 * nb..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let (sir, sc) = floats.split_at(k);
    Ok(IndividualSample {
        user_id: entry.user_id,
        v_pre: grid(Phase::Pre, &bytes[..nb]),
        v_post: grid(Phase::Post, &bytes[nb..2 * nb]),
        sir: SirVector {
            user_id: entry.user_id,
            values: sir.to_vec(),
        },
        sc: SpatialContext {
            user_id: entry.user_id,
            k,
            g,
            crop_offset: entry.crop_offset,
            values: sc.to_vec(),
        },
    })
}

/// Writes `samples` into `dir` (created if missing). All samples must share
/// `g` and `k`.
pub fn write_split(dir: &Path, samples: &[IndividualSample], g: usize, k: usize) -> Result<SplitManifest, IngestError> {
    fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.g() != g || s.k() != k {
            return Err(IngestError::Archive(format!(
                "user {} has g={}, k={}; split expects g={g}, k={k}",
                s.user_id,
                s.g(),
                s.k()
            )));
        }
        let file = format!("{}.bin", s.user_id);
        let path = dir.join(&file);
        fs::write(&path, encode(s)).map_err(|e| IngestError::io(&path, e))?;
        entries.push(SampleEntry {
            user_id: s.user_id,
            crop_offset: s.v_pre.crop_offset,
            file,
        });
    }
    let manifest = SplitManifest { g, k, samples: entries };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| IngestError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_split(dir: &Path) -> Result<(SplitManifest, Vec<IndividualSample>), IngestError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| IngestError::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| IngestError::io(&path, e))?;
        samples.push(decode(&bytes, entry, manifest.g, manifest.k)?);
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(uid: u64, g: usize, k: usize) -> IndividualSample {
        let bits = |seed: usize| (0..g * g).map(|i| (i * 7 + seed).is_multiple_of(3) as u8).collect();
        let grid = |phase, seed| MovementGrid {
            user_id: uid,
            phase,
            g,
            crop_offset: (3, 4),
            bitmap: bits(seed),
        };
        IndividualSample {
            user_id: uid,
            v_pre: grid(Phase::Pre, 0),
            v_post: grid(Phase::Post, 1),
            sir: SirVector {
                user_id: uid,
                values: vec![1.0 / k as f64; k],
            },
            sc: SpatialContext {
                user_id: uid,
                k,
                g,
                crop_offset: (3, 4),
                values: (0..k * g * g).map(|i| (i % 4) as f64 * 0.25).collect(),
            },
        }
    }

    #[test]
    fn bit_packing_round_trips() {
        let bits: Vec<u8> = (0..13).map(|i| (i % 2) as u8).collect();
        let packed = pack_bits(&bits);
        assert_eq!(packed.len(), 2);
        assert_eq!(packed[0], 0b0101_0101);
        assert_eq!(unpack_bits(&packed, 13), bits);
    }

    #[test]
    fn split_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample(2, 5, 4), sample(9, 5, 4)];
        write_split(dir.path(), &samples, 5, 4).unwrap();
        let (manifest, back) = read_split(dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 2);
        // values are exactly representable in f32
        assert_eq!(back, samples);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), &[sample(1, 4, 2)], 4, 2).unwrap();
        fs::write(dir.path().join("1.bin"), [0u8; 3]).unwrap();
        assert!(matches!(read_split(dir.path()), Err(IngestError::Archive(_))));
    }
}
