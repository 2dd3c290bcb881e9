//! Seeded synthetic multi-rater dataset: elliptical lesions rendered under
//! three synthetic scanner domains, annotated by four systematic rater
//! styles, written to disk in a fixed binary layout with a wall-clock-free
//! manifest so identical configurations produce byte-identical datasets.

pub mod io;
pub mod morphology;
pub mod render;

pub use io::{image_file, mask_file, read_tensor, write_tensor, Manifest, SampleRecord, Split, SplitCounts};
pub use morphology::{default_profiles, rater_annotate, RaterProfile};
pub use render::{
    gen_base_lesion, perturb, render_image, PerturbationConfig, PerturbationKind, SceneSpec,
    BLUR_GRID, BLUR_KERNEL, GAMMA_GRID, NOISE_GRID, NUM_DOMAINS,
};

use crate::error::{Error, Result};
use crate::metrics::AnnotationSet;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One image with its full set of rater annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRaterSample {
    pub index: usize,
    pub image: Tensor,
    pub masks: Vec<Tensor>,
    pub scene: SceneSpec,
    pub split: Split,
}

/// Majority-vote consensus of an annotation set: mean >= 0.5 keeps a pixel,
/// so an exact two-rater tie keeps both raters' foreground.
pub fn consensus_mask(annots: &AnnotationSet) -> Tensor {
    consensus_of(annots.masks())
}

/// [`consensus_mask`] over a plain slice of binary masks.
pub fn consensus_of(masks: &[Tensor]) -> Tensor {
    let n = masks.len() as f64;
    let mut acc = vec![0.0; masks[0].numel()];
    for m in masks {
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let data = acc.into_iter().map(|s| if s / n >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(masks[0].shape().to_vec(), data).expect("same shape")
}

/// Generation settings for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub num_raters: usize,
    pub image_size: usize,
    pub seed: u64,
    /// When set, train/val avoid this domain and the test split uses only it.
    pub holdout_domain: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 200,
            n_val: 20,
            n_test: 50,
            num_raters: 4,
            image_size: 32,
            seed: 7,
            holdout_domain: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "DatasetConfig::validate";
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::invalid(OP, "every split needs at least one sample".to_string()));
        }
        let max_raters = default_profiles().len();
        if self.num_raters == 0 || self.num_raters > max_raters {
            return Err(Error::invalid(
                OP,
                format!("num_raters must be in 1..={max_raters}, got {}", self.num_raters),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::invalid(OP, "image_size must be at least 16".to_string()));
        }
        if let Some(d) = self.holdout_domain {
            if d >= NUM_DOMAINS {
                return Err(Error::invalid(
                    OP,
                    format!("holdout domain {d} out of range 0..{NUM_DOMAINS}"),
                ));
            }
        }
        Ok(())
    }
}

/// Draws a random scene for one sample. Pure in `(sample_seed, image_size,
/// domain)` so loaders can reconstruct scenes from the manifest.
pub fn sample_scene(sample_seed: u64, image_size: usize, domain: usize) -> SceneSpec {
    let mut rng = rng_from_seed(derive_seed(sample_seed, &[0]));
    let size = image_size as f64;
    let a = 3.0 + 4.0 * rng.gen::<f64>();
    let b = 2.5 + (a - 2.5) * rng.gen::<f64>();
    let rotation = std::f64::consts::PI * rng.gen::<f64>();
    // The semi-major axis bounds the rotated extent, so this box keeps the
    // lesion (and its mirrored twin) strictly inside the image.
    let lo = a + 0.5;
    let hi = size - 1.5 - a;
    let cy = lo + (hi - lo) * rng.gen::<f64>();
    let cx = lo + (hi - lo) * rng.gen::<f64>();
    let second_lesion = rng.gen::<f64>() < 0.15;
    SceneSpec {
        height: image_size,
        width: image_size,
        center: (cy, cx),
        radii: (a, b),
        rotation,
        contrast: 0.25,
        texture_amplitude: 0.08,
        second_lesion,
        domain,
    }
}

/// Builds one sample fully in memory: the scene, its rendered image, and the
/// per-rater annotations.
pub fn synthesize_sample(
    sample_seed: u64,
    image_size: usize,
    domain: usize,
    profiles: &[RaterProfile],
) -> Result<(SceneSpec, Tensor, Vec<Tensor>)> {
    let scene = sample_scene(sample_seed, image_size, domain);
    let image = render_image(&scene, derive_seed(sample_seed, &[10]))?;
    let base = gen_base_lesion(&scene)?;
    let mut masks = Vec::with_capacity(profiles.len());
    for (r, profile) in profiles.iter().enumerate() {
        masks.push(rater_annotate(&base, profile, derive_seed(sample_seed, &[100 + r as u64]))?);
    }
    Ok((scene, image, masks))
}

fn domain_for(split: Split, position: usize, holdout: Option<usize>) -> usize {
    match holdout {
        None => position % NUM_DOMAINS,
        Some(d) => match split {
            Split::Test => d,
            _ => {
                let allowed: Vec<usize> = (0..NUM_DOMAINS).filter(|&x| x != d).collect();
                allowed[position % allowed.len()]
            }
        },
    }
}

/// Generates a dataset on disk: per-sample binary tensors plus
/// `manifest.json`. A pure function of the configuration — regenerating with
/// the same config yields byte-identical files.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let profiles: Vec<RaterProfile> =
        default_profiles().into_iter().take(cfg.num_raters).collect();

    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let mut samples = Vec::with_capacity(total);
    let mut split_position = [0usize; 3];
    for index in 0..total {
        let split = if index < cfg.n_train {
            Split::Train
        } else if index < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let slot = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        let domain = domain_for(split, split_position[slot], cfg.holdout_domain);
        split_position[slot] += 1;

        let sample_seed = derive_seed(cfg.seed, &[index as u64]);
        let (_, image, masks) = synthesize_sample(sample_seed, cfg.image_size, domain, &profiles)?;
        write_tensor(&out_dir.join(image_file(index)), &image)?;
        for (r, mask) in masks.iter().enumerate() {
            write_tensor(&out_dir.join(mask_file(index, r)), mask)?;
        }
        samples.push(SampleRecord {
            index,
            split,
            domain,
            seed: sample_seed,
        });
    }

    let manifest = Manifest {
        schema_version: io::MANIFEST_SCHEMA_VERSION,
        seed: cfg.seed,
        image_size: cfg.image_size,
        num_raters: cfg.num_raters,
        counts: SplitCounts {
            train: cfg.n_train,
            val: cfg.n_val,
            test: cfg.n_test,
        },
        rater_profiles: profiles,
        domain_bias: render::DOMAIN_BIAS.to_vec(),
        domain_noise: render::DOMAIN_NOISE.to_vec(),
        holdout_domain: cfg.holdout_domain,
        samples,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A dataset loaded back into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<MultiRaterSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&MultiRaterSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Loads a dataset directory written by [`gen_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        // Single-channel files read back rank-2; images are [1,H,W].
        let raw = read_tensor(&dir.join(image_file(record.index)))?;
        let image = if raw.shape().len() == 2 {
            Tensor::new(
                vec![1, raw.shape()[0], raw.shape()[1]],
                raw.data().to_vec(),
            )?
        } else {
            raw
        };
        let mut masks = Vec::with_capacity(manifest.num_raters);
        for r in 0..manifest.num_raters {
            let mask = read_tensor(&dir.join(mask_file(record.index, r)))?;
            if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::format(
                    dir.join(mask_file(record.index, r)).display().to_string(),
                    "mask is not binary",
                ));
            }
            masks.push(mask);
        }
        let scene = sample_scene(record.seed, manifest.image_size, record.domain);
        samples.push(MultiRaterSample {
            index: record.index,
            image,
            masks,
            scene,
            split: record.split,
        });
    }
    Ok(Dataset { manifest, samples })
}
