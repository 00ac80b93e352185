//! Dataset directories: `manifest.json` plus one binary file per sample.
//!
//! Sample file layout (little-endian):
//!
//! ```text
//! "UFCD" | version u32 | H u32 | W u32 | H·W f32 image | H·W u8 mask
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Sample};
use crate::error::{io_err, Error, Result};

pub const SAMPLE_MAGIC: &[u8; 4] = b"UFCD";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    spec: DatasetSpec,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: usize,
    class: u8,
    volume_id: Option<usize>,
    slice_index: Option<usize>,
    file: String,
}

fn encode_sample(s: &Sample, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + size * size * 5);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.extend_from_slice(&(size as u32).to_le_bytes());
    for v in &s.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.mask);
    out
}

fn decode_sample(bytes: &[u8], path: &Path) -> Result<(usize, Vec<f32>, Vec<u8>)> {
    let bad = |msg: &str| Error::DatasetFormat {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != SAMPLE_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (h, w) = (word(8), word(12));
    if h != w {
        return Err(bad("non-square image"));
    }
    let n = h * w;
    if bytes.len() != 16 + n * 5 {
        return Err(bad("length does not match header"));
    }
    let image = bytes[16..16 + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, image, bytes[16 + 4 * n..].to_vec()))
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let size = dataset.image_size();
    let gt = dataset.ground_truth();
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let file = format!("sample_{:05}.bin", s.id);
        let path = dir.join(&file);
        std::fs::write(&path, encode_sample(s, size)).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            id: s.id,
            class: gt.class_at(i),
            volume_id: s.volume_id,
            slice_index: s.slice_index,
            file,
        });
    }
    let manifest = Manifest {
        version: VERSION,
        spec: dataset.spec().clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json + "\n").map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let size = manifest.spec.image_size;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let path = dir.join(&e.file);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let (h, image, mask) = decode_sample(&bytes, &path)?;
        if h != size {
            return Err(Error::DatasetFormat {
                path,
                msg: format!("image size {h} differs from manifest {size}"),
            });
        }
        samples.push(Sample::new(e.id, image, mask, e.class, e.volume_id, e.slice_index));
    }
    Ok(Dataset::from_parts(manifest.spec, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_dataset;

    #[test]
    fn directory_round_trip() {
        let ds = generate_dataset(&DatasetSpec {
            n_samples: 12,
            image_size: 16,
            ..DatasetSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let bytes = std::fs::read(dir.path().join("sample_00003.bin")).unwrap();
        assert_eq!(&bytes[..4], b"UFCD");
        assert_eq!(bytes.len(), 16 + 16 * 16 * 5);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_sample_rejected() {
        let ds = generate_dataset(&DatasetSpec {
            n_samples: 4,
            image_size: 16,
            ..DatasetSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let p = dir.path().join("sample_00001.bin");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::DatasetFormat { .. })));
    }
}
