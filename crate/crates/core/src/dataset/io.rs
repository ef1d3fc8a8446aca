//! On-disk dataset format: `manifest.json` + `states.bin`.
//!
//! The blob holds every float matrix back to back as little-endian f32:
//! an 8-byte header (magic `TPHD`, version u32) followed by, for each
//! sequence in manifest order, its layer matrices in ascending layer order,
//! then `dist_base` and `dist_adapted` when present. The manifest holds
//! everything else (mask, spans, labels, NLL) plus absolute byte
//! offset/length pairs into the blob. Offsets must be strictly increasing
//! and in-bounds; loading is rejected otherwise. See `FORMAT.md` at the repo
//! root for the field-by-field layout.
//!
//! Saving the same dataset twice produces byte-identical files, and a
//! save/load round trip reproduces the in-memory dataset exactly, float
//! payloads included.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, DatasetMeta, SpanAnnotation, TokenSequence};

pub const MAGIC: &[u8; 4] = b"TPHD";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "states.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Segment {
    /// Absolute byte offset into `states.bin` (header included).
    offset: u64,
    /// Payload length in bytes; always a multiple of 4.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceEntry {
    id: String,
    num_tokens: usize,
    mask: Vec<u8>,
    spans: Vec<SpanAnnotation>,
    token_labels: Vec<u8>,
    nll: Option<Vec<f32>>,
    layer_states: BTreeMap<usize, Segment>,
    dist_base: Option<Segment>,
    dist_adapted: Option<Segment>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    magic: String,
    version: u32,
    hidden_dim: usize,
    num_layers: usize,
    vocab_size: Option<usize>,
    fingerprint: String,
    sequences: Vec<SequenceEntry>,
}

/// Write `manifest.json` and `states.bin` under `dir` (created if missing).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut blob: Vec<u8> = Vec::with_capacity(8 + 4 * ds.total_tokens() * ds.meta.hidden_dim);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let append = |blob: &mut Vec<u8>, values: &[f32]| -> Segment {
        let offset = blob.len() as u64;
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        Segment { offset, len: (values.len() * 4) as u64 }
    };

    let mut entries = Vec::with_capacity(ds.sequences.len());
    for seq in &ds.sequences {
        let mut layer_states = BTreeMap::new();
        for (layer, mat) in &seq.states {
            layer_states.insert(*layer, append(&mut blob, mat));
        }
        let dist_base = seq.dist_base.as_ref().map(|m| append(&mut blob, m));
        let dist_adapted = seq.dist_adapted.as_ref().map(|m| append(&mut blob, m));
        entries.push(SequenceEntry {
            id: seq.id.clone(),
            num_tokens: seq.num_tokens,
            mask: seq.mask.clone(),
            spans: seq.spans.clone(),
            token_labels: seq.token_labels.clone(),
            nll: seq.nll.clone(),
            layer_states,
            dist_base,
            dist_adapted,
        });
    }

    let manifest = Manifest {
        magic: String::from_utf8_lossy(MAGIC).into_owned(),
        version: FORMAT_VERSION,
        hidden_dim: ds.meta.hidden_dim,
        num_layers: ds.meta.num_layers,
        vocab_size: ds.meta.vocab_size,
        fingerprint: ds.meta.fingerprint.clone(),
        sequences: entries,
    };

    fs::write(dir.join(BLOB_FILE), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`]. Checks magic and version on both
/// files, and that every segment is in-bounds, correctly sized, and strictly
/// after the previous one.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;

    if blob.len() < 8 || &blob[0..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(blob.get(0..4).unwrap_or(b"")).into_owned(),
        });
    }
    let version = u32::from_le_bytes([blob[4], blob[5], blob[6], blob[7]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if manifest.magic.as_bytes() != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: manifest.magic.clone(),
        });
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: manifest.version, expected: FORMAT_VERSION });
    }

    let blob_len = blob.len() as u64;
    let mut cursor = 8u64; // first valid payload offset
    let mut read_segment = |seq_id: &str, what: &str, seg: Segment, expected_values: usize| -> Result<Vec<f32>> {
        if seg.offset < cursor {
            return Err(Error::OffsetsNotIncreasing { sequence: seq_id.to_owned() });
        }
        if seg.offset.checked_add(seg.len).map_or(true, |end| end > blob_len) {
            return Err(Error::BlobOutOfBounds {
                sequence: seq_id.to_owned(),
                what: what.to_owned(),
                offset: seg.offset,
                len: seg.len,
                blob_len,
            });
        }
        if seg.len as usize != expected_values * 4 {
            return Err(Error::ShapeMismatch {
                context: format!("sequence `{seq_id}` {what} byte length"),
                expected: expected_values * 4,
                got: seg.len as usize,
            });
        }
        cursor = seg.offset + seg.len;
        let bytes = &blob[seg.offset as usize..(seg.offset + seg.len) as usize];
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };

    let d = manifest.hidden_dim;
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        let n = entry.num_tokens;
        let mut states = BTreeMap::new();
        for (layer, seg) in &entry.layer_states {
            let label = format!("layer {layer} states");
            states.insert(*layer, read_segment(&entry.id, &label, *seg, n * d)?);
        }
        let v = manifest.vocab_size.unwrap_or(0);
        let dist_base = match entry.dist_base {
            Some(seg) => Some(read_segment(&entry.id, "dist_base", seg, n * v)?),
            None => None,
        };
        let dist_adapted = match entry.dist_adapted {
            Some(seg) => Some(read_segment(&entry.id, "dist_adapted", seg, n * v)?),
            None => None,
        };
        sequences.push(TokenSequence {
            id: entry.id.clone(),
            num_tokens: n,
            states,
            mask: entry.mask.clone(),
            spans: entry.spans.clone(),
            token_labels: entry.token_labels.clone(),
            nll: entry.nll.clone(),
            dist_base,
            dist_adapted,
        });
    }

    Ok(Dataset {
        meta: DatasetMeta {
            hidden_dim: manifest.hidden_dim,
            num_layers: manifest.num_layers,
            vocab_size: manifest.vocab_size,
            fingerprint: manifest.fingerprint,
        },
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};
    use tempfile::TempDir;

    fn small_dataset() -> Dataset {
        let cfg = SynthConfig {
            num_sequences: 3,
            tokens_per_sequence: 16,
            hidden_dim: 4,
            num_layers: 3,
            peak_layer: 2,
            vocab_size: 5,
            ..Default::default()
        };
        generate_synthetic(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = small_dataset();
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn same_dataset_saves_byte_identical_files() {
        let ds = small_dataset();
        let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        save_dataset(&ds, a.path()).unwrap();
        save_dataset(&ds, b.path()).unwrap();
        for file in [MANIFEST_FILE, BLOB_FILE] {
            let fa = fs::read(a.path().join(file)).unwrap();
            let fb = fs::read(b.path().join(file)).unwrap();
            assert_eq!(fa, fb, "{file} differs between saves");
        }
    }

    #[test]
    fn bad_magic_is_reported() {
        let ds = small_dataset();
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mut blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        blob[0] = b'X';
        fs::write(dir.path().join(BLOB_FILE), &blob).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let ds = small_dataset();
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mut blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        blob[4] = 9;
        fs::write(dir.path().join(BLOB_FILE), &blob).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::VersionMismatch { found: 9, expected: 1 }) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_names_the_sequence() {
        let ds = small_dataset();
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        // Cut into the last sequence's payload.
        fs::write(dir.path().join(BLOB_FILE), &blob[..blob.len() - 10]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::BlobOutOfBounds { sequence, .. }) => {
                assert_eq!(sequence, ds.sequences.last().unwrap().id);
            }
            other => panic!("expected BlobOutOfBounds, got {other:?}"),
        }
    }

    #[test]
    fn reordered_offsets_are_rejected() {
        let ds = small_dataset();
        let dir = TempDir::new().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let mut manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
        // Point the second sequence's first layer at offset 8 (already used by
        // the first sequence), breaking strict ordering.
        manifest["sequences"][1]["layer_states"]["1"]["offset"] = 8u64.into();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest).unwrap(),
        )
        .unwrap();
        match load_dataset(dir.path()) {
            Err(Error::OffsetsNotIncreasing { sequence }) => {
                assert_eq!(sequence, ds.sequences[1].id);
            }
            other => panic!("expected OffsetsNotIncreasing, got {other:?}"),
        }
    }
}
