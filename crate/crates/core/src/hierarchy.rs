//! Attribute vocabulary, super-classes and the attribute → super-class map.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Name of the catch-all super-class that carries no semantic prompt.
pub const OTHER_SUPER_CLASS: &str = "other";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HierarchyFile", into = "HierarchyFile")]
pub struct AttributeHierarchy {
    attributes: Vec<String>,
    super_classes: Vec<String>,
    delta: Vec<usize>,
    objects: Vec<String>,
    attr_index: HashMap<String, usize>,
    object_index: HashMap<String, usize>,
}

/// On-disk layout of `hierarchy.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct HierarchyFile {
    attributes: Vec<String>,
    super_classes: Vec<String>,
    delta: Vec<usize>,
    #[serde(default)]
    objects: Vec<String>,
}

impl TryFrom<HierarchyFile> for AttributeHierarchy {
    type Error = Error;

    fn try_from(f: HierarchyFile) -> Result<Self> {
        Self::new(f.attributes, f.super_classes, f.delta, f.objects)
    }
}

impl From<AttributeHierarchy> for HierarchyFile {
    fn from(h: AttributeHierarchy) -> Self {
        HierarchyFile {
            attributes: h.attributes,
            super_classes: h.super_classes,
            delta: h.delta,
            objects: h.objects,
        }
    }
}

fn index_names(kind: &str, names: &[String]) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.clone(), i).is_some() {
            return Err(Error::Hierarchy(format!("duplicate {kind} name `{n}`")));
        }
    }
    Ok(map)
}

impl AttributeHierarchy {
    pub fn new(
        attributes: Vec<String>,
        super_classes: Vec<String>,
        delta: Vec<usize>,
        objects: Vec<String>,
    ) -> Result<Self> {
        if delta.len() != attributes.len() {
            return Err(Error::Hierarchy(format!(
                "delta has {} entries for {} attributes",
                delta.len(),
                attributes.len()
            )));
        }
        if let Some((i, &j)) = delta
            .iter()
            .enumerate()
            .find(|(_, &j)| j >= super_classes.len())
        {
            return Err(Error::Hierarchy(format!(
                "attribute `{}` maps to super-class {j}, only {} exist",
                attributes[i],
                super_classes.len()
            )));
        }
        let attr_index = index_names("attribute", &attributes)?;
        index_names("super-class", &super_classes)?;
        let object_index = index_names("object", &objects)?;
        Ok(Self {
            attributes,
            super_classes,
            delta,
            objects,
            attr_index,
            object_index,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn super_classes(&self) -> &[String] {
        &self.super_classes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn delta(&self) -> &[usize] {
        &self.delta
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_super_classes(&self) -> usize {
        self.super_classes.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attr_index.get(name).copied()
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_index.get(name).copied()
    }

    pub fn super_class_index(&self, name: &str) -> Option<usize> {
        self.super_classes.iter().position(|s| s == name)
    }

    pub fn is_other(&self, super_class: usize) -> bool {
        self.super_classes[super_class] == OTHER_SUPER_CLASS
    }

    /// Attribute indices mapped to `super_class`, ascending.
    pub fn members(&self, super_class: usize) -> Vec<usize> {
        self.delta
            .iter()
            .enumerate()
            .filter(|(_, &j)| j == super_class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Same vocabulary with a different attribute → super-class map.
    pub fn with_delta(&self, delta: Vec<usize>) -> Result<Self> {
        Self::new(
            self.attributes.clone(),
            self.super_classes.clone(),
            delta,
            self.objects.clone(),
        )
    }

    pub fn super_class_indices(&self, names: &[&str]) -> BTreeSet<usize> {
        names
            .iter()
            .filter_map(|n| self.super_class_index(n))
            .collect()
    }
}

fn check_nonzero_rows(t: &Tensor, what: &'static str) -> Result<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::DegenerateEmbedding { what, row: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Assigns each attribute to the centroid with the highest cosine
/// similarity. Ties go to the lowest super-class index.
pub fn map_by_similarity(attr_text_emb: &Tensor, centroids: &Tensor) -> Result<Vec<usize>> {
    let (_, d) = attr_text_emb.expect_matrix("map_by_similarity")?;
    let (n_s, dc) = centroids.expect_matrix("map_by_similarity")?;
    if d != dc {
        return Err(Error::shape(
            "map_by_similarity",
            format!("embedding dim {d} vs centroid dim {dc}"),
        ));
    }
    if n_s == 0 {
        return Err(Error::Hierarchy("no centroids".into()));
    }
    let attr_norms = check_nonzero_rows(attr_text_emb, "attribute embeddings")?;
    let cent_norms = check_nonzero_rows(centroids, "centroids")?;
    let sims = attr_text_emb.matmul_t(centroids)?;
    Ok((0..sims.rows())
        .map(|i| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..n_s {
                let c = sims.get2(i, j) / (attr_norms[i] * cent_norms[j]);
                if c > best_sim {
                    best_sim = c;
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Centroid of each super-class: mean of its members' L2-normalised
/// embeddings.
pub fn centroids_from_reference(
    attr_text_emb: &Tensor,
    reference_delta: &[usize],
    n_super: usize,
) -> Result<Tensor> {
    let (n_a, d) = attr_text_emb.expect_matrix("centroids_from_reference")?;
    if reference_delta.len() != n_a {
        return Err(Error::shape(
            "centroids_from_reference",
            format!("{} delta entries for {n_a} embeddings", reference_delta.len()),
        ));
    }
    let norms = check_nonzero_rows(attr_text_emb, "attribute embeddings")?;
    let mut sums = Tensor::zeros(&[n_super, d]);
    let mut counts = vec![0usize; n_super];
    for (i, &j) in reference_delta.iter().enumerate() {
        if j >= n_super {
            return Err(Error::Hierarchy(format!("super-class index {j} out of range")));
        }
        counts[j] += 1;
        let row = attr_text_emb.row(i);
        for (s, v) in sums.row_mut(j).iter_mut().zip(row) {
            *s += v / norms[i];
        }
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Hierarchy(format!("super-class {j} has no members")));
    }
    for (j, &c) in counts.iter().enumerate() {
        sums.row_mut(j).iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(sums)
}

/// Fraction of attributes whose predicted super-class agrees with the
/// reference, skipping attributes whose reference super-class is excluded.
pub fn mapping_accuracy(
    predicted: &[usize],
    reference: &[usize],
    excluded: &BTreeSet<usize>,
) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::shape(
            "mapping_accuracy",
            format!("{} vs {} entries", predicted.len(), reference.len()),
        ));
    }
    let (hits, total) = predicted
        .iter()
        .zip(reference)
        .filter(|(_, r)| !excluded.contains(r))
        .fold((0usize, 0usize), |(h, t), (p, r)| (h + usize::from(p == r), t + 1));
    if total == 0 {
        return Err(Error::Usage(
            "no attributes remain after excluding super-classes".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}
