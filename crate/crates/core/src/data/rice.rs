//! `<root>/cloud/*.png` + `<root>/label/*.png` (+ optional `<root>/mask/*.png`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{synth, CloudMask, ImageU8, Sample, SampleSource};
use crate::{Error, Result};

/// Matched pairs found under a dataset root, sorted by id.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    root: PathBuf,
    /// id -> file name shared by `cloud/` and `label/`.
    files: BTreeMap<String, String>,
    masks: BTreeMap<String, PathBuf>,
    skipped: usize,
}

/// Ordered train/test id lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Four fifths of `n`, rounded down: 500 -> 400 and 736 -> 588.
pub fn default_train_count(n: usize) -> usize {
    n * 4 / 5
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !entry.file_type()?.is_file() {
            continue;
        }
        if let (Some(stem), Some(name)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.file_name().and_then(|s| s.to_str()),
        ) {
            out.insert(stem.to_string(), name.to_string());
        }
    }
    Ok(out)
}

/// Index a RICE-style directory.
pub fn load_rice_layout(root: &Path) -> Result<DatasetIndex> {
    let (cloud_dir, label_dir) = (root.join("cloud"), root.join("label"));
    for d in [&cloud_dir, &label_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("missing directory {}", d.display())));
        }
    }
    let cloud = png_files(&cloud_dir)?;
    let label = png_files(&label_dir)?;
    let mut files = BTreeMap::new();
    let mut skipped = 0;
    for (id, name) in &cloud {
        if label.get(id) == Some(name) {
            files.insert(id.clone(), name.clone());
        } else {
            skipped += 1;
        }
    }
    skipped += label.keys().filter(|id| !files.contains_key(*id)).count();
    if skipped > 0 {
        log::warn!("{skipped} unmatched files skipped under {}", root.display());
    }
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no matched cloud/label pairs under {}",
            root.display()
        )));
    }
    let mask_dir = root.join("mask");
    let masks = if mask_dir.is_dir() {
        png_files(&mask_dir)?
            .into_iter()
            .filter(|(id, _)| files.contains_key(id))
            .map(|(id, name)| (id, mask_dir.join(name)))
            .collect()
    } else {
        BTreeMap::new()
    };
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        files,
        masks,
        skipped,
    })
}

impl DatasetIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> Vec<String> {
        self.files.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Files present in only one of `cloud/` and `label/`.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn has_mask(&self, id: &str) -> bool {
        self.masks.contains_key(id)
    }

    /// First `n_train` ids (sorted) for training, the rest for testing.
    pub fn split(&self, n_train: usize) -> Result<Split> {
        if n_train > self.len() {
            return Err(Error::Data(format!(
                "train size {n_train} exceeds {} samples",
                self.len()
            )));
        }
        let ids = self.ids();
        Ok(Split {
            train: ids[..n_train].to_vec(),
            test: ids[n_train..].to_vec(),
        })
    }

    pub fn default_split(&self) -> Split {
        self.split(default_train_count(self.len()))
            .expect("default count never exceeds the sample count")
    }

    /// Like [`DatasetIndex::split`] after a seeded shuffle of the ids.
    pub fn shuffled_split(&self, n_train: usize, seed: u64) -> Result<Split> {
        let mut split = self.split(n_train)?;
        let mut ids: Vec<String> = split.train.drain(..).chain(split.test.drain(..)).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = ids.split_off(n_train);
        Ok(Split { train: ids, test })
    }

    /// Read one pair; a stored mask is used when present.
    pub fn load(&self, id: &str) -> Result<Sample> {
        let name = self
            .files
            .get(id)
            .ok_or_else(|| Error::Data(format!("unknown sample id `{id}`")))?;
        let cloudy = ImageU8::load_png(&self.root.join("cloud").join(name))?;
        let cloudless = ImageU8::load_png(&self.root.join("label").join(name))?;
        let mask = self
            .masks
            .get(id)
            .map(|p| CloudMask::load_png(p))
            .transpose()?;
        Sample::new(id, cloudy, cloudless, mask)
    }

    pub fn source(&self, ids: Vec<String>) -> RiceSource {
        RiceSource {
            index: self.clone(),
            ids,
        }
    }
}

/// Lazily loaded subset of a [`DatasetIndex`].
#[derive(Clone, Debug)]
pub struct RiceSource {
    index: DatasetIndex,
    ids: Vec<String>,
}

impl SampleSource for RiceSource {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let id = self
            .ids
            .get(index)
            .ok_or_else(|| Error::Data(format!("sample index {index} out of range")))?;
        self.index.load(id)
    }
}

/// Write `count` synthetic pairs in the RICE layout plus `manifest.txt`.
///
/// Sample `i` uses seed `seed + i`. The tree is assembled in a sibling
/// temporary directory and renamed into place.
pub fn write_synthetic_dataset(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    if out.exists() {
        return Err(Error::Data(format!("{} already exists", out.display())));
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let tmp = tempfile_dir(&parent, out)?;
    let result = (|| -> Result<()> {
        for d in ["cloud", "label", "mask"] {
            fs::create_dir(tmp.join(d))?;
        }
        let digits = (count - 1).to_string().len().max(4);
        let mut manifest = fs::File::create(tmp.join("manifest.txt"))?;
        for i in 0..count {
            let s = seed.wrapping_add(i as u64);
            let sample = synth::synth_pair(s, size)?;
            let id = format!("{i:0digits$}");
            let file = format!("{id}.png");
            sample.cloudy.save_png(&tmp.join("cloud").join(&file))?;
            sample.cloudless.save_png(&tmp.join("label").join(&file))?;
            if let Some(m) = &sample.mask {
                m.save_png(&tmp.join("mask").join(&file))?;
            }
            writeln!(manifest, "{id} {s}")?;
        }
        manifest.sync_all()?;
        fs::rename(&tmp, out)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

pub(crate) fn tempfile_dir(parent: &Path, target: &Path) -> Result<PathBuf> {
    let base = target
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("out")
        .to_string();
    for n in 0u32.. {
        let candidate = parent.join(format!(".{base}.tmp{}-{n}", std::process::id()));
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}
