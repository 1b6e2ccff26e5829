//! Directory-layout datasets: `root/<class>/<image>` or
//! `root/{train,test}/<class>/<image>`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::nn::INPUT_SIZE;
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub class_label: usize,
    pub split: Split,
}

impl DatasetEntry {
    /// Stable identifier: the path relative to the dataset root, `/`-separated.
    pub fn source_id(&self, root: &Path) -> String {
        let rel = self.path.strip_prefix(root).unwrap_or(&self.path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub class_names: Vec<String>,
    /// Side length every image is resized to.
    pub image_size: usize,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    /// True when the split came from `train/` and `test/` directories.
    pub split_from_layout: bool,
}

/// Fraction of each class assigned to training when the layout has no split.
pub const TRAIN_FRACTION: f64 = 0.7;

impl DatasetIndex {
    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class_label).collect()
    }

    pub fn source_id(&self, i: usize) -> String {
        self.entries[i].source_id(&self.root)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    pub fn load_image(&self, i: usize) -> Result<Tensor<f32>> {
        imageops::load_rgb(&self.entries[i].path, self.image_size)
    }

    /// Decode every entry; decoding is deterministic and order-preserving.
    pub fn load_all(&self) -> Result<Vec<Tensor<f32>>> {
        (0..self.entries.len()).map(|i| self.load_image(i)).collect()
    }

    /// Re-draw a stratified train/test split with the given seed.
    pub fn assign_random_split(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for class in 0..self.class_names.len() {
            let mut members: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].class_label == class)
                .collect();
            members.shuffle(&mut rng);
            let n_train = (members.len() as f64 * TRAIN_FRACTION).round() as usize;
            for (rank, &i) in members.iter().enumerate() {
                self.entries[i].split = if rank < n_train { Split::Train } else { Split::Test };
            }
        }
        self.split_from_layout = false;
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Index a dataset directory. Class names are the sorted subdirectory names;
/// files are ordered lexicographically. Unreadable images are recorded in
/// [`DatasetIndex::skipped`]. Without a `train/`+`test/` layout a seeded
/// 70/30 split is drawn.
pub fn load_dataset(root: &Path, split_seed: u64) -> Result<DatasetIndex> {
    let train_dir = root.join("train");
    let test_dir = root.join("test");
    let split_from_layout = train_dir.is_dir() && test_dir.is_dir();
    let parts: Vec<(PathBuf, Split)> = if split_from_layout {
        vec![(train_dir, Split::Train), (test_dir, Split::Test)]
    } else {
        vec![(root.to_path_buf(), Split::Train)]
    };

    let mut class_set = BTreeSet::new();
    for (dir, _) in &parts {
        for p in sorted_dir(dir)? {
            if p.is_dir() {
                class_set.insert(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
        }
    }
    let class_names: Vec<String> = class_set.into_iter().collect();
    if class_names.is_empty() {
        return Err(Error::config(format!("no class directories under {root:?}")));
    }

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (dir, split) in &parts {
        for (label, name) in class_names.iter().enumerate() {
            let class_dir = dir.join(name);
            if !class_dir.is_dir() {
                continue;
            }
            let mut count = 0;
            for path in sorted_dir(&class_dir)? {
                if !path.is_file() || !is_image(&path) {
                    continue;
                }
                match image::ImageReader::open(&path).and_then(|r| r.with_guessed_format()) {
                    Ok(reader) => match reader.into_dimensions() {
                        Ok(_) => {
                            entries.push(DatasetEntry {
                                path,
                                class_label: label,
                                split: *split,
                            });
                            count += 1;
                        }
                        Err(e) => skipped.push((path, e.to_string())),
                    },
                    Err(e) => skipped.push((path, e.to_string())),
                }
            }
            if count == 0 {
                log::warn!("class directory {class_dir:?} has no readable images");
            }
        }
    }
    for (path, why) in &skipped {
        log::warn!("skipping unreadable image {path:?}: {why}");
    }

    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        entries,
        class_names,
        image_size: INPUT_SIZE,
        skipped,
        split_from_layout,
    };
    if !split_from_layout {
        index.assign_random_split(split_seed);
    }
    Ok(index)
}
