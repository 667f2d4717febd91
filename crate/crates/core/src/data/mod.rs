//! Dataset ingestion (Market-1501 directory layout), identity-balanced
//! sampling, augmentation and the synthetic toy dataset.

mod augment;
mod sampler;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use augment::{augment, flip_tensor_horizontal, to_tensor, NORM_MEAN, NORM_STD};
pub use sampler::{epoch_batches, pk_sample, stream_seed};
pub use synthetic::{make_synthetic, SyntheticSpec};

use crate::error::{Error, Result};

/// Person id reserved for junk detections.
pub const JUNK_ID: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    /// Accepted directory names, canonical first.
    pub fn dir_names(&self) -> &'static [&'static str] {
        match self {
            Split::Train => &["train", "bounding_box_train"],
            Split::Query => &["query"],
            Split::Gallery => &["gallery", "bounding_box_test"],
        }
    }

    pub fn name(&self) -> &'static str {
        self.dir_names()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// `-1` marks junk.
    pub person_id: i64,
    pub camera_id: u32,
    pub split: Split,
}

/// Immutable list of records plus the train identity lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    records: Vec<ImageRecord>,
    /// Train identities to their record indices; junk excluded.
    id_to_records: BTreeMap<i64, Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub train_ids: usize,
    pub train_images: usize,
    pub query_images: usize,
    pub gallery_images: usize,
    pub junk_images: usize,
}

impl DatasetIndex {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut id_to_records: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.person_id < JUNK_ID {
                return Err(Error::Dataset(format!(
                    "{}: person id {} below -1",
                    r.path.display(),
                    r.person_id
                )));
            }
            if r.split == Split::Train && r.person_id != JUNK_ID {
                id_to_records.entry(r.person_id).or_default().push(i);
            }
        }
        Ok(Self {
            records,
            id_to_records,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn id_to_records(&self) -> &BTreeMap<i64, Vec<usize>> {
        &self.id_to_records
    }

    /// Sorted train identities.
    pub fn train_ids(&self) -> Vec<i64> {
        self.id_to_records.keys().copied().collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn census(&self) -> Census {
        let count = |s| self.records.iter().filter(|r| r.split == s).count();
        Census {
            train_ids: self.id_to_records.len(),
            train_images: count(Split::Train),
            query_images: count(Split::Query),
            gallery_images: count(Split::Gallery),
            junk_images: self.records.iter().filter(|r| r.person_id == JUNK_ID).count(),
        }
    }
}

/// Parse a Market-1501 style file name: `PID_cC[sS]_...`, e.g.
/// `0002_c1s1_000451_03.jpg` or `-1_c3s2_012345_01.jpg`. The DukeMTMC form
/// `0001_c2_f0046182.jpg` is accepted as well. Returns `(person_id, camera_id)`.
pub fn parse_market_name(file_name: &str) -> Option<(i64, u32)> {
    let stem = file_name.rsplit_once('.').map_or(file_name, |(s, _)| s);
    let mut parts = stem.split('_');
    let pid: i64 = parts.next()?.parse().ok()?;
    let cam_tok = parts.next()?;
    let digits: String = cam_tok
        .strip_prefix('c')?
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    if digits.is_empty() {
        return None;
    }
    Some((pid, digits.parse().ok()?))
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

fn find_split_dir(root: &Path, split: Split) -> Option<PathBuf> {
    split
        .dir_names()
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_dir())
}

/// Index a dataset root holding `train/`, `query/` and `gallery/` (or the
/// original `bounding_box_train/` and `bounding_box_test/`). Files whose names
/// do not follow the grammar are skipped with a warning. Records are sorted by
/// split and file name, so directory listing order does not matter.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let mut records = Vec::new();
    for split in Split::ALL {
        let dir = find_split_dir(root, split).ok_or_else(|| {
            Error::Dataset(format!(
                "{} has no {} directory (tried {:?})",
                root.display(),
                split.name(),
                split.dir_names()
            ))
        })?;
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        names.sort();
        let before = records.len();
        for path in names {
            let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
            match parse_market_name(file) {
                Some((person_id, camera_id)) if person_id >= JUNK_ID => records.push(ImageRecord {
                    path,
                    person_id,
                    camera_id,
                    split,
                }),
                _ => log::warn!("skipping {}: name does not match PID_cC..._ grammar", path.display()),
            }
        }
        if records.len() == before {
            // Nothing to score is a valid state for the query side.
            if split == Split::Query {
                log::warn!("query split at {} is empty", dir.display());
            } else {
                return Err(Error::Dataset(format!("{} split at {} is empty", split.name(), dir.display())));
            }
        }
    }
    let index = DatasetIndex::new(records)?;
    let c = index.census();
    log::info!(
        "scanned {}: {} train ids / {} train images, {} query, {} gallery, {} junk",
        root.display(),
        c.train_ids,
        c.train_images,
        c.query_images,
        c.gallery_images,
        c.junk_images
    );
    Ok(index)
}

/// Where pixel data comes from.
#[derive(Debug, Clone)]
pub enum ImageStore {
    /// Decode `record.path` on demand.
    Disk,
    /// One decoded image per record.
    Memory(Vec<RgbImage>),
}

/// An index together with access to its pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub store: ImageStore,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            index: scan_dataset(root)?,
            store: ImageStore::Disk,
        })
    }

    pub fn in_memory(index: DatasetIndex, images: Vec<RgbImage>) -> Result<Self> {
        if images.len() != index.len() {
            return Err(Error::Dataset(format!(
                "{} images for {} records",
                images.len(),
                index.len()
            )));
        }
        Ok(Self {
            index,
            store: ImageStore::Memory(images),
        })
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        let record = self
            .index
            .records
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("record {i} out of range")))?;
        match &self.store {
            ImageStore::Memory(images) => Ok(images[i].clone()),
            ImageStore::Disk => load_image(&record.path),
        }
    }

    /// Write every record under `root` in the directory layout that
    /// [`scan_dataset`] reads. In-memory datasets only.
    pub fn export(&self, root: &Path) -> Result<()> {
        let ImageStore::Memory(images) = &self.store else {
            return Err(Error::Dataset("only in-memory datasets can be exported".into()));
        };
        for split in Split::ALL {
            let dir = root.join(split.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (r, img) in self.index.records.iter().zip(images) {
            let file = r
                .path
                .file_name()
                .ok_or_else(|| Error::Dataset(format!("record without file name: {}", r.path.display())))?;
            let target = root.join(r.split.name()).join(file);
            img.save(&target).map_err(|source| Error::Image {
                path: target.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn market_file_names() {
        assert_eq!(parse_market_name("0002_c1s1_000451_03.jpg"), Some((2, 1)));
        assert_eq!(parse_market_name("-1_c3s2_012345_01.jpg"), Some((-1, 3)));
        assert_eq!(parse_market_name("0000_c6s4_002510_02.jpg"), Some((0, 6)));
        assert_eq!(parse_market_name("0001_c2_f0046182.jpg"), Some((1, 2)));
        assert_eq!(parse_market_name("Thumbs.db"), None);
        assert_eq!(parse_market_name("abcd_c1s1.jpg"), None);
        assert_eq!(parse_market_name("0002_x1s1_000451_03.jpg"), None);
        assert_eq!(parse_market_name("0002_c_0.jpg"), None);
    }

    fn touch_image(path: &Path) {
        RgbImage::new(4, 8).save(path).unwrap();
    }

    fn layout(root: &Path, files: &[(&str, &str)]) {
        for split in ["train", "query", "gallery"] {
            fs::create_dir_all(root.join(split)).unwrap();
        }
        for (split, name) in files {
            touch_image(&root.join(split).join(name));
        }
    }

    #[test]
    fn scan_small_tree() {
        let dir = tempfile::tempdir().unwrap();
        layout(
            dir.path(),
            &[
                ("train", "0002_c1s1_000451_03.jpg"),
                ("train", "0002_c2s1_000451_01.jpg"),
                ("train", "0007_c1s1_000001_01.png"),
                ("train", "garbage.jpg"),
                ("query", "0002_c1s1_000451_03.jpg"),
                ("gallery", "-1_c1s1_000001_01.jpg"),
                ("gallery", "0002_c3s1_000001_01.jpg"),
            ],
        );
        fs::write(dir.path().join("train").join("notes.txt"), "x").unwrap();
        let idx = scan_dataset(dir.path()).unwrap();
        let c = idx.census();
        assert_eq!(c.train_ids, 2);
        assert_eq!(c.train_images, 3);
        assert_eq!(c.query_images, 1);
        assert_eq!(c.gallery_images, 2);
        assert_eq!(c.junk_images, 1);
        let r = &idx.records()[0];
        assert_eq!((r.person_id, r.camera_id, r.split), (2, 1, Split::Train));
        assert_eq!(idx.id_to_records()[&2], vec![0, 1]);
    }

    #[test]
    fn single_file_parse() {
        let dir = tempfile::tempdir().unwrap();
        layout(
            dir.path(),
            &[
                ("train", "0002_c1s1_000451_03.jpg"),
                ("query", "0002_c1s1_000451_03.jpg"),
                ("gallery", "0002_c1s1_000451_03.jpg"),
            ],
        );
        let idx = scan_dataset(dir.path()).unwrap();
        let r = &idx.records()[0];
        assert_eq!((r.person_id, r.camera_id), (2, 1));
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), &[("query", "0002_c1s1_000451_03.jpg"), ("gallery", "0002_c1s1_000451_03.jpg")]);
        let err = scan_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("train split"), "{err}");
    }

    #[test]
    fn empty_query_split_is_allowed() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), &[("train", "0002_c1s1_000451_03.jpg"), ("gallery", "0002_c2s1_000451_03.jpg")]);
        fs::create_dir_all(dir.path().join("query")).unwrap();
        let index = scan_dataset(dir.path()).unwrap();
        assert!(index.split_indices(Split::Query).is_empty());
    }

    #[test]
    fn empty_gallery_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), &[("train", "0002_c1s1_000451_03.jpg"), ("query", "0002_c2s1_000451_03.jpg")]);
        fs::create_dir_all(dir.path().join("gallery")).unwrap();
        let err = scan_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("gallery split"), "{err}");
    }

    #[test]
    fn missing_root_is_an_error() {
        assert!(scan_dataset(Path::new("/nonexistent/dataset/root")).is_err());
    }

    #[test]
    fn original_market_directory_names() {
        let dir = tempfile::tempdir().unwrap();
        for d in ["bounding_box_train", "query", "bounding_box_test"] {
            fs::create_dir_all(dir.path().join(d)).unwrap();
            touch_image(&dir.path().join(d).join("0005_c2s3_000001_01.jpg"));
        }
        let idx = scan_dataset(dir.path()).unwrap();
        assert_eq!(idx.census().train_images, 1);
        assert_eq!(idx.census().gallery_images, 1);
    }

    #[test]
    fn undecodable_image_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("0001_c1s1_0_0.jpg");
        fs::write(&p, b"not an image").unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(err.to_string().contains("0001_c1s1_0_0.jpg"));
    }
}
