use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::imageio::{read_png, write_png};
use super::render::{background_image, IMAGE_SIZE};
use super::{render_sample, Attributes, CaptionedSample, Grammar};
use crate::error::{config_err, Error, Result};
use crate::text::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn of_id(id: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|s| id.strip_prefix(s.prefix()).is_some_and(|r| r.starts_with('-')))
    }
}

/// One manifest line:
/// `id|image_path|mask_path|caption|shape|color|bg[,color2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub tokens: Vec<String>,
    pub attributes: Attributes,
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        let a = &self.attributes;
        let mut bg = a.background.clone();
        if let Some(c2) = &a.color2 {
            let _ = write!(bg, ",{c2}");
        }
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.id,
            self.image_path,
            self.mask_path,
            self.tokens.join(" "),
            a.shape,
            a.color,
            bg
        )
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 7 {
            return Err(Error::Load(format!(
                "manifest line {line_no}: expected 7 fields, found {}",
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(Error::Load(format!("manifest line {line_no}: empty id")));
        }
        let (bg, color2) = match fields[6].split_once(',') {
            Some((b, c)) => (b.to_string(), Some(c.to_string())),
            None => (fields[6].to_string(), None),
        };
        let attributes = Attributes {
            shape: fields[4].to_string(),
            color: fields[5].to_string(),
            background: bg,
            color2,
        };
        let tokens: Vec<String> = fields[3].split_whitespace().map(str::to_string).collect();
        if tokens != attributes.caption() {
            return Err(Error::Load(format!(
                "manifest line {line_no} (record {id}): caption disagrees with attributes"
            )));
        }
        Ok(Self {
            id,
            image_path: fields[1].to_string(),
            mask_path: fields[2].to_string(),
            tokens,
            attributes,
        })
    }
}

/// Handle over a corpus on disk. Images are read on access.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub grammar: Grammar,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| Split::of_id(&r.id) == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Loads record `i` and checks its invariants.
    pub fn get(&self, i: usize) -> Result<CaptionedSample> {
        let rec = self
            .records
            .get(i)
            .ok_or_else(|| Error::Load(format!("no record {i}")))?;
        let bad = |msg: &str| Error::Load(format!("record {}: {msg}", rec.id));
        self.grammar.validate(&rec.attributes).map_err(|e| bad(&e.to_string()))?;
        let image = read_png(&self.root.join(&rec.image_path)).map_err(|e| bad(&e.to_string()))?;
        let mask = read_png(&self.root.join(&rec.mask_path)).map_err(|e| bad(&e.to_string()))?;
        if image.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(bad(&format!("image shape {:?}", image.shape())));
        }
        if mask.shape() != [1, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(bad(&format!("mask shape {:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(bad("mask is not binary"));
        }
        let frac = mask.mean();
        if !(0.05..=0.6).contains(&frac) {
            return Err(bad(&format!("mask fraction {frac:.3} outside [0.05, 0.6]")));
        }
        if let Some(bg) = background_image(&self.grammar, &rec.attributes.background) {
            let n = IMAGE_SIZE * IMAGE_SIZE;
            for p in 0..n {
                if mask.data()[p] == 0.0 && (0..3).any(|c| image.data()[c * n + p] != bg.data()[c * n + p]) {
                    return Err(bad("pixel outside the mask differs from the background"));
                }
            }
        }
        Ok(CaptionedSample {
            id: rec.id.clone(),
            image,
            mask,
            tokens: rec.tokens.clone(),
            attributes: rec.attributes.clone(),
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<CaptionedSample>> {
        self.split_indices(split).into_iter().map(|i| self.get(i)).collect()
    }

    /// Vocabulary over every caption the grammar can produce.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(&self.grammar.all_captions())
    }
}

/// Per-sample seed derived from the corpus seed and a running index.
pub(crate) fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders the train/val/test splits under `root` and writes the manifest
/// and vocabulary.
pub fn make_dataset(
    root: &Path,
    grammar: &Grammar,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(config_err!("every split needs at least one sample"));
    }
    for dir in ["images", "masks"] {
        let p = root.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::storage(&p, e))?;
    }
    let mut records = Vec::with_capacity(n_train + n_val + n_test);
    let mut index = 0u64;
    for (split, n) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
        for i in 0..n {
            let s = sample_seed(seed, index);
            index += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let attributes = grammar.sample_attributes(&mut rng);
            let sample = render_sample(grammar, &attributes, rng.random())?;
            let id = format!("{}-{i:05}", split.prefix());
            let rec = ManifestRecord {
                image_path: format!("images/{id}.png"),
                mask_path: format!("masks/{id}.png"),
                id,
                tokens: sample.tokens,
                attributes,
            };
            write_png(&root.join(&rec.image_path), &sample.image)?;
            write_png(&root.join(&rec.mask_path), &sample.mask)?;
            records.push(rec);
        }
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    let manifest = root.join(MANIFEST_FILE);
    std::fs::write(&manifest, text).map_err(|e| Error::storage(&manifest, e))?;
    let ds = Dataset {
        root: root.to_path_buf(),
        grammar: grammar.clone(),
        records,
    };
    ds.vocabulary()?.save(&root.join(VOCAB_FILE))?;
    Ok(ds)
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    load_manifest_with(path, Grammar::default())
}

pub fn load_manifest_with(path: &Path, grammar: Grammar) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = ManifestRecord::parse(line, i + 1)?;
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Load(format!("manifest line {}: duplicate id {}", i + 1, rec.id)));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Load(format!("{}: no records", path.display())));
    }
    Ok(Dataset {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        grammar,
        records,
    })
}
