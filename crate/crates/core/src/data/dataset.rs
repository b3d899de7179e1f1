use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decode_image, Image};
use crate::bas::ImageBox;
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];
const SPLIT_NAMES: [&str; 3] = ["base", "val", "novel"];
const PRESET_SHUFFLE_SEED: u64 = 0;

#[derive(Clone, Debug)]
pub enum Source {
    File(PathBuf),
    Memory(Arc<Image>),
}

/// One image of a class pool; decoded on demand.
#[derive(Clone, Debug)]
pub struct Sample {
    pub source: Source,
    /// `x y w h` in pixels, from the box sidecar.
    pub bbox: Option<[f64; 4]>,
}

impl Sample {
    pub fn memory(image: Image) -> Self {
        Self {
            source: Source::Memory(Arc::new(image)),
            bbox: None,
        }
    }

    pub fn id(&self) -> String {
        match &self.source {
            Source::File(p) => p.display().to_string(),
            Source::Memory(img) => format!("memory:{:p}", Arc::as_ptr(img)),
        }
    }

    /// Decoded image carrying `global_label` and the sidecar box, if any.
    pub fn load(&self, global_label: Option<usize>) -> Result<Image> {
        let mut img = match &self.source {
            Source::File(p) => decode_image(p)?,
            Source::Memory(img) => (**img).clone(),
        };
        img.global_label = global_label;
        if let Some([x, y, w, h]) = self.bbox {
            let (height, width) = (img.height(), img.width());
            let x0 = x.max(0.0).floor() as usize;
            let y0 = y.max(0.0).floor() as usize;
            let x1 = (x + w).ceil().max(0.0) as usize;
            let y1 = (y + h).ceil().max(0.0) as usize;
            img.gt_box = ImageBox::from_xywh(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0), height, width);
        }
        Ok(img)
    }
}

#[derive(Clone, Debug)]
pub struct ClassPool {
    pub name: String,
    /// Base-category label; `None` outside the base split.
    pub global_label: Option<usize>,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, Default)]
pub struct Pool {
    pub classes: Vec<ClassPool>,
}

impl Pool {
    /// In-memory pool; base labels follow the given order when `labeled`.
    pub fn from_images(classes: Vec<(String, Vec<Image>)>, labeled: bool) -> Self {
        Self {
            classes: classes
                .into_iter()
                .enumerate()
                .map(|(i, (name, images))| ClassPool {
                    name,
                    global_label: labeled.then_some(i),
                    samples: images.into_iter().map(Sample::memory).collect(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct DatasetPools {
    pub split: SplitSpec,
    pub base: Pool,
    pub val: Pool,
    pub novel: Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPreset {
    Cub,
    Dogs,
    Cars,
    Synthetic,
}

impl SplitPreset {
    pub const ALL: [SplitPreset; 4] = [SplitPreset::Cub, SplitPreset::Dogs, SplitPreset::Cars, SplitPreset::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitPreset::Cub => "cub",
            SplitPreset::Dogs => "dogs",
            SplitPreset::Cars => "cars",
            SplitPreset::Synthetic => "synthetic",
        }
    }

    /// (base, val, novel) class counts.
    pub fn counts(self) -> (usize, usize, usize) {
        match self {
            SplitPreset::Cub => (100, 50, 50),
            SplitPreset::Dogs => (70, 20, 30),
            SplitPreset::Cars => (130, 17, 49),
            SplitPreset::Synthetic => (10, 5, 5),
        }
    }

    pub fn total(self) -> usize {
        let (a, b, c) = self.counts();
        a + b + c
    }
}

impl fmt::Display for SplitPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split preset `{s}` (expected cub, dogs, cars or synthetic)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset_id: String,
    pub base: Vec<String>,
    pub val: Vec<String>,
    pub novel: Vec<String>,
}

impl SplitSpec {
    /// Rejects duplicate or shared class names.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (split, names) in SPLIT_NAMES.iter().zip([&self.base, &self.val, &self.novel]) {
            for name in names {
                if let Some(prev) = seen.insert(name, split) {
                    return Err(Error::Data(format!(
                        "class `{name}` appears in both the {prev} and {split} splits"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.base.len(), self.val.len(), self.novel.len())
    }

    /// Seeded partition of `names` with the preset's counts.
    pub fn from_preset(preset: SplitPreset, names: &[String]) -> Result<Self> {
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != preset.total() {
            return Err(Error::Data(format!(
                "preset {preset} expects {} classes, found {}",
                preset.total(),
                unique.len()
            )));
        }
        let mut shuffled: Vec<String> = unique.into_iter().cloned().collect();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(PRESET_SHUFFLE_SEED));
        let (b, v, _) = preset.counts();
        let sorted = |range: &[String]| {
            let mut out = range.to_vec();
            out.sort();
            out
        };
        Ok(Self {
            dataset_id: preset.as_str().to_string(),
            base: sorted(&shuffled[..b]),
            val: sorted(&shuffled[b..b + v]),
            novel: sorted(&shuffled[b + v..]),
        })
    }

    /// Reads `root/splits/{base,val,novel}.txt`, one class name per line.
    pub fn read_files(root: &Path, dataset_id: &str) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<String>> {
            let path = root.join("splits").join(format!("{name}.txt"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        };
        let spec = Self {
            dataset_id: dataset_id.to_string(),
            base: read("base")?,
            val: read("val")?,
            novel: read("novel")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn write_files(&self, root: &Path) -> Result<()> {
        let dir = root.join("splits");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, list) in SPLIT_NAMES.iter().zip([&self.base, &self.val, &self.novel]) {
            let path = dir.join(format!("{name}.txt"));
            let mut text = list.join("\n");
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn class_folders(root: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && name != "splits" && !name.starts_with('.') {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Split files under `root/splits` when present, else the preset's seeded partition of the
/// class folders. A preset given alongside split files must agree on the counts.
pub fn resolve_split(root: &Path, preset: Option<SplitPreset>) -> Result<SplitSpec> {
    let id = preset.map_or("custom", |p| p.as_str());
    if root.join("splits").join("base.txt").is_file() {
        let spec = SplitSpec::read_files(root, id)?;
        if let Some(p) = preset {
            if spec.counts() != p.counts() {
                return Err(Error::Data(format!(
                    "split files give {:?} classes but preset {p} expects {:?}",
                    spec.counts(),
                    p.counts()
                )));
            }
        }
        return Ok(spec);
    }
    match preset {
        Some(p) => SplitSpec::from_preset(p, &class_folders(root)?),
        None => Err(Error::Data(format!(
            "{} has no splits/ directory; pass a split preset",
            root.display()
        ))),
    }
}

/// Parses a `filename x y w h` sidecar.
pub fn read_boxes(path: &Path) -> Result<HashMap<String, [f64; 4]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Data(format!("{}:{}: expected `filename x y w h`", path.display(), n + 1));
        if parts.len() != 5 {
            return Err(bad());
        }
        let mut v = [0.0; 4];
        for (slot, raw) in v.iter_mut().zip(&parts[1..]) {
            *slot = raw.parse().map_err(|_| bad())?;
        }
        boxes.insert(parts[0].to_string(), v);
    }
    Ok(boxes)
}

fn load_class(root: &Path, name: &str, global_label: Option<usize>) -> Result<ClassPool> {
    let dir = root.join(name);
    if !dir.is_dir() {
        return Err(Error::Data(format!("class folder {} is missing", dir.display())));
    }
    let box_path = dir.join("boxes.txt");
    let boxes = if box_path.is_file() {
        read_boxes(&box_path)?
    } else {
        HashMap::new()
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("class folder {} has no images", dir.display())));
    }
    let samples = files
        .into_iter()
        .map(|path| {
            let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            Sample {
                bbox: boxes.get(&file).copied(),
                source: Source::File(path),
            }
        })
        .collect();
    Ok(ClassPool {
        name: name.to_string(),
        global_label,
        samples,
    })
}

/// Builds the three pools. Base labels follow sorted class names.
pub fn load_dataset(root: &Path, split: &SplitSpec) -> Result<DatasetPools> {
    split.validate()?;
    let mut base_names = split.base.clone();
    base_names.sort();
    let load = |names: &[String], labeled: bool| -> Result<Pool> {
        let classes = names
            .iter()
            .enumerate()
            .map(|(i, n)| load_class(root, n, labeled.then_some(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pool { classes })
    };
    Ok(DatasetPools {
        split: split.clone(),
        base: load(&base_names, true)?,
        val: load(&split.val, false)?,
        novel: load(&split.novel, false)?,
    })
}
