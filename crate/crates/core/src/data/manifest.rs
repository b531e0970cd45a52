//! Dataset manifests: directory scans, CSV manifests, seeded splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image_io::load_pair;
use super::SegDataset;
use crate::error::{Error, Result};

/// Overrides the dataset root when no path is given on the command line.
pub const DATA_ROOT_ENV: &str = "NANONET_DATA_ROOT";

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "ppm", "pgm", "pnm", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest root.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    /// (width, height) as stored on disk, when readable.
    pub original_size: Option<(u32, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    /// Images without a matching mask, relative to `root`.
    pub orphans: Vec<PathBuf>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["relative_image_path", "relative_mask_path", "split"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.write_record([rel_str(&r.image), rel_str(&r.mask), r.split.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn rel_str(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// `flag`, else the environment override, else `None`.
pub fn dataset_root(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

/// Split tags for `n` items in a seeded 80/10/10 partition.
pub fn seeded_split(n: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * 0.1).round() as usize;
    let n_test = (n as f64 * 0.1).round() as usize;
    let mut tags = vec![Split::Train; n];
    for (k, &i) in idx.iter().enumerate() {
        if k < n_val {
            tags[i] = Split::Val;
        } else if k < n_val + n_test {
            tags[i] = Split::Test;
        }
    }
    tags
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ok = p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok {
            out.push(p);
        }
    }
    out.sort_by(|a, b| a.as_os_str().as_encoded_bytes().cmp(b.as_os_str().as_encoded_bytes()));
    Ok(out)
}

/// Reads `source`: either a directory with `images/` and `masks/` paired by
/// file stem, or a CSV manifest (relative_image_path, relative_mask_path,
/// split) whose paths are relative to the CSV's directory. Directory scans
/// receive seeded 80/10/10 split tags; an empty or missing layout yields an
/// empty manifest.
pub fn scan_manifest(source: &Path, seed: u64) -> Result<Manifest> {
    if source.is_file() {
        return read_csv_manifest(source);
    }
    let root = source.to_path_buf();
    let img_dir = root.join("images");
    let mask_dir = root.join("masks");
    if !img_dir.is_dir() {
        if source.is_dir() {
            return Ok(Manifest {
                root,
                ..Manifest::default()
            });
        }
        return Err(Error::io(source, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let masks: BTreeMap<String, PathBuf> = if mask_dir.is_dir() {
        list_images(&mask_dir)?
            .into_iter()
            .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut pairs = Vec::new();
    let mut orphans = Vec::new();
    for img in list_images(&img_dir)? {
        let stem = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let rel = img.strip_prefix(&root).unwrap_or(&img).to_path_buf();
        match masks.get(&stem) {
            Some(m) => pairs.push((rel, m.strip_prefix(&root).unwrap_or(m).to_path_buf())),
            None => orphans.push(rel),
        }
    }
    let tags = seeded_split(pairs.len(), seed);
    let records = pairs
        .into_iter()
        .zip(tags)
        .map(|((image, mask), split)| SampleRecord {
            original_size: image::image_dimensions(root.join(&image)).ok(),
            image,
            mask,
            split,
        })
        .collect();
    Ok(Manifest { root, records, orphans })
}

fn read_csv_manifest(path: &Path) -> Result<Manifest> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = Vec::new();
    let mut orphans = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let image = PathBuf::from(row.get(0).unwrap_or_default());
        let mask = row.get(1).unwrap_or_default();
        if mask.is_empty() || !root.join(mask).is_file() {
            orphans.push(image);
            continue;
        }
        let split = row.get(2).unwrap_or("train").parse()?;
        records.push(SampleRecord {
            original_size: image::image_dimensions(root.join(&image)).ok(),
            image,
            mask: PathBuf::from(mask),
            split,
        });
    }
    records.sort_by(|a, b| {
        a.image
            .as_os_str()
            .as_encoded_bytes()
            .cmp(b.image.as_os_str().as_encoded_bytes())
    });
    Ok(Manifest { root, records, orphans })
}

/// Loads every record of `split` at `target` size, in parallel. Pairs that
/// fail to load are returned as (image path, reason) instead of aborting.
pub fn load_split(manifest: &Manifest, split: Split, target: (usize, usize)) -> (SegDataset, Vec<(String, String)>) {
    let recs = manifest.split(split);
    let loaded: Vec<_> = recs
        .par_iter()
        .map(|r| {
            let id = rel_str(&r.image);
            (id, load_pair(&manifest.root.join(&r.image), &manifest.root.join(&r.mask), target))
        })
        .collect();
    let mut ds = SegDataset::default();
    let mut skipped = Vec::new();
    for (id, res) in loaded {
        match res {
            Ok((im, m)) => {
                ds.ids.push(id);
                ds.images.push(im);
                ds.masks.push(m);
            }
            Err(e) => skipped.push((id, e.to_string())),
        }
    }
    (ds, skipped)
}
