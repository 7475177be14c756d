//! Patch-localised synthetic benchmark.
//!
//! Every image is a grid of `patch_size` squares. A fixed set of distractor
//! squares carries the same pattern in every image of every class, so any
//! feature that pools the whole image sees a large shared component. Each
//! class owns `signature_patches` squares at fixed locations with fixed
//! patterns; only those squares identify the class.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, Dataset, DatasetMeta, Split};
use crate::error::{Error, Result};
use crate::image::Image;

const BACKGROUND_LEVEL: f32 = 0.5;
// Stream tags so layout, class and image RNGs never collide.
const LAYOUT_STREAM: u64 = 0x4c41_594f;
const CLASS_STREAM: u64 = 0x434c_4153;
const IMAGE_STREAM: u64 = 0x494d_4147;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub signature_patches: usize,
    pub signature_noise: f64,
    pub background_noise: f64,
    pub distractor_patches: usize,
    pub seed: u64,
    /// Global id of this dataset's first class; splits use disjoint ranges.
    #[serde(default)]
    pub class_offset: u64,
}

/// Class counts of the desk-scale train, val and test splits. Many training
/// classes keep a small model from memorising signature patterns.
pub const DESK_SPLITS: [usize; 3] = [256, 16, 20];

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: DESK_SPLITS[0],
            images_per_class: 20,
            channels: 3,
            image_size: 32,
            patch_size: 8,
            signature_patches: 2,
            signature_noise: 0.15,
            background_noise: 0.15,
            distractor_patches: 8,
            seed: 0,
            class_offset: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Grid indices of each class's signature squares, in class order.
    pub fn signature_locations(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        Ok(signature_locations(self, &layout(self).free))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| {
            Err(Error::InvalidArgument {
                op: "synthetic spec",
                reason,
            })
        };
        if self.classes == 0 || self.images_per_class == 0 || self.channels == 0 {
            return err("classes, images_per_class and channels must be positive".into());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.signature_patches == 0 {
            return err("signature_patches must be at least 1".into());
        }
        if self.signature_patches + self.distractor_patches > self.num_patches() {
            return err(format!(
                "{} signature + {} distractor patches exceed the {} available",
                self.signature_patches,
                self.distractor_patches,
                self.num_patches()
            ));
        }
        if !(self.signature_noise >= 0.0 && self.background_noise >= 0.0) {
            return err("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

struct Layout {
    distractor_locs: Vec<usize>,
    distractor_patterns: Vec<Vec<f32>>,
    free: Vec<usize>,
}

fn random_pattern(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.random::<f32>()).collect()
}

fn layout(spec: &SyntheticSpec) -> Layout {
    // Depends on the master seed only, so every split shares the distractors.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, LAYOUT_STREAM));
    let m = spec.num_patches();
    let patch_len = spec.channels * spec.patch_size * spec.patch_size;
    let mut distractor_locs = sample(&mut rng, m, spec.distractor_patches).into_vec();
    distractor_locs.sort_unstable();
    let distractor_patterns = distractor_locs
        .iter()
        .map(|_| random_pattern(&mut rng, patch_len))
        .collect();
    let free = (0..m).filter(|p| !distractor_locs.contains(p)).collect();
    Layout {
        distractor_locs,
        distractor_patterns,
        free,
    }
}

/// Signature locations for each class of the dataset. When every class fits,
/// locations are dealt out disjointly; otherwise each class draws its own
/// distinct set.
fn signature_locations(spec: &SyntheticSpec, free: &[usize]) -> Vec<Vec<usize>> {
    let s = spec.signature_patches;
    if s * spec.classes <= free.len() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed ^ spec.class_offset, LAYOUT_STREAM + 1));
        let order = sample(&mut rng, free.len(), free.len()).into_vec();
        return (0..spec.classes)
            .map(|c| order[c * s..(c + 1) * s].iter().map(|&i| free[i]).collect())
            .collect();
    }
    (0..spec.classes)
        .map(|c| {
            let gid = spec.class_offset + c as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(spec.seed, CLASS_STREAM), gid));
            sample(&mut rng, free.len(), s)
                .into_iter()
                .map(|i| free[i])
                .collect()
        })
        .collect()
}

fn paint_patch(
    img: &mut Image,
    spec: &SyntheticSpec,
    loc: usize,
    pattern: &[f32],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) {
    let ps = spec.patch_size;
    let (py, px) = (loc / spec.grid(), loc % spec.grid());
    let mut k = 0;
    for c in 0..spec.channels {
        for y in 0..ps {
            for x in 0..ps {
                let v = pattern[k] as f64 + noise.sample(rng);
                img.set(c, py * ps + y, px * ps + x, v.clamp(0.0, 1.0) as f32);
                k += 1;
            }
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let layout = layout(spec);
    let locations = signature_locations(spec, &layout.free);
    let patch_len = spec.channels * spec.patch_size * spec.patch_size;
    let bg = Normal::new(0.0, spec.background_noise).unwrap();
    let sig = Normal::new(0.0, spec.signature_noise).unwrap();

    let mut classes = Vec::with_capacity(spec.classes);
    for (c, locs) in locations.iter().enumerate() {
        let gid = spec.class_offset + c as u64;
        let mut class_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(spec.seed, CLASS_STREAM + 1), gid));
        let patterns: Vec<Vec<f32>> = locs
            .iter()
            .map(|_| random_pattern(&mut class_rng, patch_len))
            .collect();
        let mut images = Vec::with_capacity(spec.images_per_class);
        for i in 0..spec.images_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                derive_seed(spec.seed, IMAGE_STREAM),
                gid * spec.images_per_class as u64 + i as u64,
            ));
            let n = spec.channels * spec.image_size * spec.image_size;
            let data = (0..n)
                .map(|_| (BACKGROUND_LEVEL as f64 + bg.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect();
            let mut img = Image::new(spec.channels, spec.image_size, spec.image_size, data)?;
            for (&loc, pattern) in layout.distractor_locs.iter().zip(&layout.distractor_patterns) {
                paint_patch(&mut img, spec, loc, pattern, &bg, &mut rng);
            }
            for (&loc, pattern) in locs.iter().zip(&patterns) {
                paint_patch(&mut img, spec, loc, pattern, &sig, &mut rng);
            }
            images.push(img);
        }
        classes.push(images);
    }
    Dataset::new(
        classes,
        DatasetMeta {
            split,
            class_ids: (0..spec.classes as u64).map(|c| spec.class_offset + c).collect(),
            source: "synthetic".into(),
            synthetic: Some(spec.clone()),
            provenance: None,
        },
    )
}

/// Train/val/test datasets from one master spec, with consecutive disjoint
/// class-id ranges of the given sizes.
pub fn generate_splits(
    spec: &SyntheticSpec,
    classes: [usize; 3],
) -> Result<(Dataset, Dataset, Dataset)> {
    let mut offset = spec.class_offset;
    let mut make = |n: usize, split| {
        let s = SyntheticSpec {
            classes: n,
            class_offset: offset,
            ..spec.clone()
        };
        offset += n as u64;
        generate_synthetic(&s, split)
    };
    Ok((
        make(classes[0], Split::Train)?,
        make(classes[1], Split::Val)?,
        make(classes[2], Split::Test)?,
    ))
}
