//! Datasets, few-shot episode sampling, synthetic data and augmentation.

mod augment;
mod fsds;
mod synthetic;

pub use augment::{augment, AugmentParams};
pub use fsds::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use synthetic::{generate_splits, generate_synthetic, SyntheticSpec, DESK_SPLITS};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Free-form provenance stored alongside the pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub split: Split,
    /// Globally unique class identifiers, one per class, used to verify that
    /// splits do not share classes.
    pub class_ids: Vec<u64>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Run configuration of the tool that wrote the file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    classes: Vec<Vec<Image>>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(classes: Vec<Vec<Image>>, meta: DatasetMeta) -> Result<Self> {
        let first = classes
            .first()
            .and_then(|c| c.first())
            .ok_or_else(|| Error::InvalidArgument {
                op: "dataset",
                reason: "dataset has no images".into(),
            })?
            .dims();
        for (i, class) in classes.iter().enumerate() {
            if class.is_empty() {
                return Err(Error::InvalidArgument {
                    op: "dataset",
                    reason: format!("class {i} is empty"),
                });
            }
            if let Some(img) = class.iter().find(|img| img.dims() != first) {
                return Err(Error::InvalidArgument {
                    op: "dataset",
                    reason: format!("class {i} has an image of dims {:?}, expected {first:?}", img.dims()),
                });
            }
        }
        if meta.class_ids.len() != classes.len() {
            return Err(Error::InvalidArgument {
                op: "dataset",
                reason: format!(
                    "{} class ids for {} classes",
                    meta.class_ids.len(),
                    classes.len()
                ),
            });
        }
        Ok(Self { classes, meta })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> &[Image] {
        &self.classes[c]
    }

    pub fn classes(&self) -> &[Vec<Image>] {
        &self.classes
    }

    pub fn image(&self, class: usize, index: usize) -> &Image {
        &self.classes[class][index]
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        self.classes[0][0].dims()
    }

    pub fn set_provenance(&mut self, provenance: serde_json::Value) {
        self.meta.provenance = Some(provenance);
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn split(&self) -> Split {
        self.meta.split
    }

    /// Smallest per-class image count.
    pub fn min_class_size(&self) -> usize {
        self.classes.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// Errors if any two datasets share a class id.
pub fn check_disjoint(datasets: &[&Dataset]) -> Result<()> {
    let mut seen = std::collections::HashMap::new();
    for ds in datasets {
        for &id in &ds.meta.class_ids {
            if let Some(other) = seen.insert(id, ds.split()) {
                return Err(Error::InvalidArgument {
                    op: "splits",
                    reason: format!(
                        "class id {id} appears in both {} and {}",
                        other.as_str(),
                        ds.split().as_str()
                    ),
                });
            }
        }
    }
    Ok(())
}

/// One labelled image reference inside an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    /// Episode-local class in `[0, N)`.
    pub label: usize,
    pub dataset_class: usize,
    pub image: usize,
}

/// An N-way K-shot task with Q queries per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub seed: u64,
    /// Class-major: the K support items of class 0, then class 1, ...
    pub support: Vec<EpisodeItem>,
    /// Class-major: the Q query items of class 0, then class 1, ...
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn support_by_class<'a>(&self, ds: &'a Dataset) -> Vec<Vec<&'a Image>> {
        let mut out = vec![Vec::with_capacity(self.shot); self.way];
        for item in &self.support {
            out[item.label].push(ds.image(item.dataset_class, item.image));
        }
        out
    }

    pub fn query_images<'a>(&self, ds: &'a Dataset) -> Vec<&'a Image> {
        self.query
            .iter()
            .map(|item| ds.image(item.dataset_class, item.image))
            .collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|item| item.label).collect()
    }
}

/// SplitMix64 finaliser over `(master, index)`; used to give every episode or
/// class its own independent RNG stream.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Samples `way` classes without replacement, then `shot + queries` distinct
/// images per class; the first `shot` become support, the rest queries.
pub fn sample_episode(
    ds: &Dataset,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::InvalidArgument {
            op: "sample_episode",
            reason: format!("way, shot and queries must be positive ({way}, {shot}, {queries})"),
        });
    }
    if ds.num_classes() < way {
        return Err(Error::InsufficientData {
            what: "classes",
            available: ds.num_classes(),
            required: way,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = sample(&mut rng, ds.num_classes(), way).into_vec();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for (label, &c) in classes.iter().enumerate() {
        let available = ds.class(c).len();
        if available < shot + queries {
            return Err(Error::InsufficientData {
                what: "images in a sampled class",
                available,
                required: shot + queries,
            });
        }
        let picks = sample(&mut rng, available, shot + queries).into_vec();
        let item = |image| EpisodeItem {
            label,
            dataset_class: c,
            image,
        };
        support.extend(picks[..shot].iter().map(|&i| item(i)));
        query.extend(picks[shot..].iter().map(|&i| item(i)));
    }
    Ok(Episode {
        way,
        shot,
        queries_per_class: queries,
        seed,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize) -> Dataset {
        let imgs = (0..classes)
            .map(|c| {
                (0..per_class)
                    .map(|i| Image::filled(1, 2, 2, (c * 100 + i) as f32))
                    .collect()
            })
            .collect();
        Dataset::new(
            imgs,
            DatasetMeta {
                split: Split::Train,
                class_ids: (0..classes as u64).collect(),
                source: "toy".into(),
                synthetic: None,
                provenance: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn paper_protocol_shape() {
        let ds = toy(8, 20);
        let e = sample_episode(&ds, 5, 1, 10, 7).unwrap();
        assert_eq!(e.support.len(), 5);
        assert_eq!(e.query.len(), 50);
    }

    #[test]
    fn forced_two_class_episode() {
        let ds = toy(2, 2);
        let e = sample_episode(&ds, 2, 1, 1, 3).unwrap();
        let mut used: Vec<_> = e.support.iter().map(|i| i.dataset_class).collect();
        used.sort();
        assert_eq!(used, vec![0, 1]);
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = toy(10, 12);
        assert_eq!(
            sample_episode(&ds, 5, 2, 3, 42).unwrap(),
            sample_episode(&ds, 5, 2, 3, 42).unwrap()
        );
        assert_ne!(
            sample_episode(&ds, 5, 2, 3, 42).unwrap(),
            sample_episode(&ds, 5, 2, 3, 43).unwrap()
        );
    }

    #[test]
    fn labels_are_local_and_class_major() {
        let ds = toy(10, 12);
        let e = sample_episode(&ds, 4, 2, 3, 1).unwrap();
        for (i, item) in e.support.iter().enumerate() {
            assert_eq!(item.label, i / 2);
        }
        for (i, item) in e.query.iter().enumerate() {
            assert_eq!(item.label, i / 3);
        }
    }

    #[test]
    fn insufficient_data_names_deficit() {
        let ds = toy(3, 5);
        match sample_episode(&ds, 4, 1, 1, 0) {
            Err(Error::InsufficientData {
                available: 3,
                required: 4,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match sample_episode(&ds, 2, 1, 5, 0) {
            Err(Error::InsufficientData {
                available: 5,
                required: 6,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_rejects_ragged_input() {
        let meta = DatasetMeta {
            split: Split::Train,
            class_ids: vec![0, 1],
            source: String::new(),
            synthetic: None,
            provenance: None,
        };
        assert!(Dataset::new(vec![vec![Image::filled(1, 2, 2, 0.0)], vec![]], meta.clone()).is_err());
        assert!(Dataset::new(
            vec![vec![Image::filled(1, 2, 2, 0.0)], vec![Image::filled(1, 3, 2, 0.0)]],
            meta
        )
        .is_err());
    }

    #[test]
    fn disjointness_check() {
        let a = toy(3, 2);
        let mut b = toy(3, 2);
        assert!(check_disjoint(&[&a, &b]).is_err());
        b.meta.class_ids = vec![10, 11, 12];
        b.meta.split = Split::Test;
        assert!(check_disjoint(&[&a, &b]).is_ok());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(5, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
