//! Annotation records, label vectors, zero-shot splits and batching.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::{EmbeddingFixture, InstanceArrays};
use crate::hierarchy::AttributeHierarchy;

/// Binary mask stored as alternating run lengths over the row-major grid,
/// starting with a run of zeros (which may be empty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

impl RleMask {
    pub fn encode(bits: &[bool], height: usize, width: usize) -> Self {
        debug_assert_eq!(bits.len(), height * width);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &b in bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Self {
            height,
            width,
            counts,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::encode(&vec![true; height * width], height, width)
    }

    pub fn decode(&self) -> Result<Vec<bool>> {
        let total: usize = self.counts.iter().sum();
        if total != self.height * self.width {
            return Err(Error::Usage(format!(
                "mask runs cover {total} cells, grid is {}x{}",
                self.height, self.width
            )));
        }
        let mut bits = Vec::with_capacity(total);
        for (k, &run) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(k % 2 == 1, run));
        }
        Ok(bits)
    }
}

/// One annotated object region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub image_id: String,
    pub image_height: usize,
    pub image_width: usize,
    /// `[x, y, w, h]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub mask: RleMask,
    pub object: String,
    #[serde(default)]
    pub positive_attributes: Vec<String>,
    #[serde(default)]
    pub negative_attributes: Vec<String>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidInstance {
            id: self.instance_id.clone(),
            reason,
        };
        let [x, y, w, h] = self.bbox;
        if !(x >= 0.0 && y >= 0.0 && w >= 0.0 && h >= 0.0) {
            return Err(invalid(format!("box {:?} has negative components", self.bbox)));
        }
        if x + w > self.image_width as f64 || y + h > self.image_height as f64 {
            return Err(invalid(format!(
                "box {:?} exceeds image {}x{}",
                self.bbox, self.image_height, self.image_width
            )));
        }
        if self.mask.height != self.image_height || self.mask.width != self.image_width {
            return Err(invalid(format!(
                "mask grid {}x{} differs from image {}x{}",
                self.mask.height, self.mask.width, self.image_height, self.image_width
            )));
        }
        self.mask.decode().map_err(|e| invalid(e.to_string()))?;
        let pos: BTreeSet<&str> = self.positive_attributes.iter().map(String::as_str).collect();
        let both: Vec<&str> = self
            .negative_attributes
            .iter()
            .map(String::as_str)
            .filter(|n| pos.contains(n))
            .collect();
        if !both.is_empty() {
            return Err(invalid(format!(
                "attributes both positive and negative: {}",
                both.join(", ")
            )));
        }
        Ok(())
    }
}

pub const POSITIVE: i8 = 1;
pub const NEGATIVE: i8 = 0;
pub const UNKNOWN: i8 = -1;

/// Per-attribute label in `{1, 0, -1}` (positive, negative, unknown).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn unknown(n: usize) -> Self {
        Self(vec![UNKNOWN; n])
    }

    pub fn from_values(values: Vec<i8>) -> Result<Self> {
        if values.iter().any(|v| !(-1..=1).contains(v)) {
            return Err(Error::Usage("label values must be 1, 0 or -1".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with every novel entry forced to unknown.
    pub fn restricted_to_base(&self, split: &Split) -> Self {
        Self(
            self.0
                .iter()
                .enumerate()
                .map(|(i, &v)| if split.is_novel(i) { UNKNOWN } else { v })
                .collect(),
        )
    }
}

/// Disjoint base / novel attribute index sets covering the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    n_attributes: usize,
    novel: BTreeSet<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SplitFile {
    List(Vec<String>),
    Object { novel: Vec<String> },
}

#[derive(Serialize)]
struct SplitOut<'a> {
    novel: &'a [String],
}

impl Split {
    pub fn new(n_attributes: usize, novel: impl IntoIterator<Item = usize>) -> Result<Self> {
        let novel: BTreeSet<usize> = novel.into_iter().collect();
        if let Some(&i) = novel.iter().find(|&&i| i >= n_attributes) {
            return Err(Error::Usage(format!("novel index {i} out of range")));
        }
        Ok(Self {
            n_attributes,
            novel,
        })
    }

    /// Every attribute is a base attribute.
    pub fn all_base(n_attributes: usize) -> Self {
        Self {
            n_attributes,
            novel: BTreeSet::new(),
        }
    }

    pub fn from_names(hierarchy: &AttributeHierarchy, names: &[String]) -> Result<Self> {
        let mut idx = Vec::with_capacity(names.len());
        let mut unknown = Vec::new();
        for n in names {
            match hierarchy.attribute_index(n) {
                Some(i) => idx.push(i),
                None => unknown.push(n.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownAttributes(unknown));
        }
        Self::new(hierarchy.n_attributes(), idx)
    }

    /// Reads `split.json`: either a bare list of novel attribute names or
    /// `{"novel": [...]}`.
    pub fn load(path: &Path, hierarchy: &AttributeHierarchy) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names = match serde_json::from_str(&text).map_err(|e| Error::json(path, e))? {
            SplitFile::List(v) => v,
            SplitFile::Object { novel } => novel,
        };
        Self::from_names(hierarchy, &names)
    }

    pub fn save(&self, path: &Path, hierarchy: &AttributeHierarchy) -> Result<()> {
        let names: Vec<String> = self
            .novel
            .iter()
            .map(|&i| hierarchy.attributes()[i].clone())
            .collect();
        let text = serde_json::to_string_pretty(&SplitOut { novel: &names })
            .map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn n_attributes(&self) -> usize {
        self.n_attributes
    }

    pub fn is_novel(&self, i: usize) -> bool {
        self.novel.contains(&i)
    }

    pub fn novel(&self) -> Vec<usize> {
        self.novel.iter().copied().collect()
    }

    pub fn base(&self) -> Vec<usize> {
        (0..self.n_attributes).filter(|i| !self.is_novel(*i)).collect()
    }
}

/// An instance resolved against the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub instance: Instance,
    pub labels: LabelVector,
    pub object_index: usize,
}

impl Example {
    pub fn resolve(instance: Instance, hierarchy: &AttributeHierarchy) -> Result<Self> {
        instance.validate()?;
        let labels = build_labels(&instance, hierarchy)?;
        let object_index = hierarchy
            .object_index(&instance.object)
            .ok_or_else(|| Error::InvalidInstance {
                id: instance.instance_id.clone(),
                reason: format!("unknown object category `{}`", instance.object),
            })?;
        Ok(Self {
            instance,
            labels,
            object_index,
        })
    }
}

/// `1` for listed positives, `0` for listed negatives, `-1` elsewhere.
pub fn build_labels(instance: &Instance, hierarchy: &AttributeHierarchy) -> Result<LabelVector> {
    let mut values = vec![UNKNOWN; hierarchy.n_attributes()];
    let mut unknown = Vec::new();
    for (names, v) in [
        (&instance.positive_attributes, POSITIVE),
        (&instance.negative_attributes, NEGATIVE),
    ] {
        for n in names {
            match hierarchy.attribute_index(n) {
                Some(i) => values[i] = v,
                None => unknown.push(n.clone()),
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownAttributes(unknown));
    }
    Ok(LabelVector(values))
}

/// Reads line-delimited JSON instance records. Blank lines are skipped.
pub fn load_annotations(path: &Path, hierarchy: &AttributeHierarchy) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut unknown = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        match Example::resolve(inst, hierarchy) {
            Ok(ex) => out.push(ex),
            Err(Error::UnknownAttributes(names)) => unknown.extend(names),
            Err(e) => return Err(e),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownAttributes(unknown.into_iter().collect()));
    }
    Ok(out)
}

pub fn save_annotations(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| Error::json(path, e))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub example: &'a Example,
    pub arrays: &'a InstanceArrays,
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub items: Vec<BatchItem<'a>>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Splits `examples` into batches, optionally shuffled with a seeded RNG.
/// Every instance must have fixture arrays.
pub fn assemble_batches<'a>(
    examples: &'a [Example],
    fixture: &'a EmbeddingFixture,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch<'a>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut items = Vec::with_capacity(order.len());
    for i in order {
        let ex = &examples[i];
        let arrays = fixture
            .instance(&ex.instance.instance_id)
            .ok_or_else(|| Error::MissingInstance(ex.instance.instance_id.clone()))?;
        items.push(BatchItem {
            example: ex,
            arrays,
        });
    }
    Ok(items
        .chunks(batch_size)
        .map(|c| Batch { items: c.to_vec() })
        .collect())
}
