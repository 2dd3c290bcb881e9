//! On-disk sample format: raw little-endian f32 tensors behind a fixed
//! 16-byte header (magic `HZT1`, then u32 height, width, channels), plus the
//! dataset manifest schema.

use crate::error::{Error, Result};
use crate::synthdata::morphology::RaterProfile;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"HZT1";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Writes a `[H,W]` or `[C,H,W]` tensor as f32 little-endian with the fixed
/// header. Round-trips bit-exactly for values representable in f32.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = match t.shape() {
        [h, w] => (1u32, *h as u32, *w as u32),
        [c, h, w] => (*c as u32, *h as u32, *w as u32),
        other => {
            return Err(Error::shape(
                "write_tensor",
                "[H,W] or [C,H,W]",
                format!("{other:?}"),
            ))
        }
    };
    let mut buf = Vec::with_capacity(16 + t.numel() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&h.to_le_bytes());
    buf.extend_from_slice(&w.to_le_bytes());
    buf.extend_from_slice(&c.to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a tensor written by [`write_tensor`]. Single-channel files come
/// back as `[H,W]`, multi-channel as `[C,H,W]`.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let display = path.display().to_string();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(display.clone(), e))?;
    if &header[0..4] != TENSOR_MAGIC {
        return Err(Error::format(display, "bad magic (expected HZT1)"));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::format(display, "zero dimension in header"));
    }
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)
        .map_err(|e| Error::io(display.clone(), e))?;
    let want = c * h * w * 4;
    if raw.len() != want {
        return Err(Error::format(
            display,
            format!("payload is {} bytes, header implies {want}", raw.len()),
        ));
    }
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let shape = if c == 1 { vec![h, w] } else { vec![c, h, w] };
    Tensor::new(shape, data)
}

/// Per-sample record in the manifest: enough to regroup and regenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub domain: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Dataset manifest. Deliberately excludes wall-clock information so that a
/// regenerated dataset is byte-identical for the same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub num_raters: usize,
    pub counts: SplitCounts,
    pub rater_profiles: Vec<RaterProfile>,
    pub domain_bias: Vec<[f64; 3]>,
    pub domain_noise: Vec<f64>,
    pub holdout_domain: Option<usize>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                    manifest.schema_version
                ),
            ));
        }
        Ok(manifest)
    }
}

/// File name for a sample's image.
pub fn image_file(index: usize) -> String {
    format!("img_{index:06}.bin")
}

/// File name for one rater's mask of a sample.
pub fn mask_file(index: usize, rater: usize) -> String {
    format!("mask_{index:06}_r{rater}.bin")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, uniform_vec};

    #[test]
    fn tensor_roundtrip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from_seed(1);
        // Values quantized to f32 so the roundtrip is bitwise.
        let data: Vec<f64> = uniform_vec(&mut rng, 2 * 4 * 5, 0.0, 1.0)
            .into_iter()
            .map(|v| v as f32 as f64)
            .collect();
        let t = Tensor::new(vec![2, 4, 5], data).unwrap();
        let path = dir.path().join("t.bin");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());

        let flat = Tensor::full(&[3, 3], 0.5);
        let p2 = dir.path().join("m.bin");
        write_tensor(&p2, &flat).unwrap();
        assert_eq!(read_tensor(&p2).unwrap().shape(), &[3, 3]);
    }

    #[test]
    fn corrupted_files_are_rejected_with_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        let err = read_tensor(&path).unwrap_err().to_string();
        assert!(err.contains("bad.bin"), "error should carry the path: {err}");
        assert!(err.contains("magic"));

        // Truncated payload.
        let t = Tensor::full(&[4, 4], 1.0);
        let p2 = dir.path().join("short.bin");
        write_tensor(&p2, &t).unwrap();
        let bytes = std::fs::read(&p2).unwrap();
        std::fs::write(&p2, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_tensor(&p2).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_version_gate() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            seed: 7,
            image_size: 32,
            num_raters: 4,
            counts: SplitCounts {
                train: 2,
                val: 1,
                test: 1,
            },
            rater_profiles: crate::synthdata::morphology::default_profiles(),
            domain_bias: crate::synthdata::render::DOMAIN_BIAS.to_vec(),
            domain_noise: crate::synthdata::render::DOMAIN_NOISE.to_vec(),
            holdout_domain: None,
            samples: vec![SampleRecord {
                index: 0,
                split: Split::Train,
                domain: 0,
                seed: 99,
            }],
        };
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back, manifest);

        let mut bad = manifest.clone();
        bad.schema_version = 999;
        bad.save(&path).unwrap();
        assert!(Manifest::load(&path).is_err());

        // No timestamps anywhere in the serialized form.
        manifest.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("time"), "manifest must stay wall-clock free");
    }
}
