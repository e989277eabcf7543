//! Synthetic fixtures with a planted hierarchy and planted labels.
//!
//! Generative story, for a fixed seed:
//! - super-class centroids `C_j ~ N(0, I/d_q)`; attribute `i` gets
//!   `t_i = C_δ(i) + noise · N(0, I/d_q)`, so `noise = 0` puts each attribute
//!   exactly on its centroid. Super-class text embeddings are the centroids.
//! - each instance has exactly one positive attribute per super-class; every
//!   other attribute is annotated negative with probability
//!   `negative_annotation_prob` and left unknown otherwise.
//! - a fixed random "visual encoder" `M: d_q → d_v` writes `M·t_p` for the
//!   positives into the feature cells covered by the object mask; remaining
//!   cells of `f_crop` hold background distractors. `f_img` mixes object
//!   and distractor cells, so positives stay linearly decodable from every
//!   context but cleanest after masking.
//! - `ẑ` holds noisy copies of the positives' text embeddings and of the
//!   object embedding; `mask_token_feats` row `j` is a noisy fixed projection
//!   of the positive attribute's embedding in super-class `j`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingFixture, FixtureDims, InstanceArrays};
use crate::data::{Instance, RleMask, Split};
use crate::error::{Error, Result};
use crate::hierarchy::AttributeHierarchy;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_attributes: usize,
    pub n_super_classes: usize,
    pub n_objects: usize,
    pub dims: FixtureDims,
    /// Spread of attribute embeddings around their super-class centroid.
    pub noise: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_novel: usize,
    pub feature_noise: f64,
    pub zhat_noise: f64,
    pub target_noise: f64,
    pub negative_annotation_prob: f64,
    /// Pixels per feature cell along each axis.
    pub cell_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_attributes: 40,
            n_super_classes: 5,
            n_objects: 6,
            dims: FixtureDims {
                d_q: 16,
                d_v: 16,
                h: 4,
                w: 4,
                n_z: 8,
            },
            noise: 0.5,
            n_train: 400,
            n_eval: 100,
            n_novel: 8,
            feature_noise: 0.3,
            zhat_noise: 0.3,
            target_noise: 0.1,
            negative_annotation_prob: 0.5,
            cell_size: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub fixture: EmbeddingFixture,
    pub hierarchy: AttributeHierarchy,
    pub train: Vec<Instance>,
    pub eval: Vec<Instance>,
    pub split: Split,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn add_noise(v: &mut [f64], rng: &mut ChaCha8Rng, std: f64) {
    if std == 0.0 {
        return;
    }
    let noise = gaussian(rng, v.len(), std);
    for (x, n) in v.iter_mut().zip(noise) {
        *x += n;
    }
}

impl SynthSpec {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.noise < 0.0 || self.feature_noise < 0.0 || self.zhat_noise < 0.0 || self.target_noise < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if self.n_super_classes == 0 || self.n_attributes < self.n_super_classes {
            return bad("need at least one attribute per super-class");
        }
        if self.n_objects == 0 {
            return bad("need at least one object category");
        }
        if self.n_novel > self.n_attributes {
            return bad("more novel attributes than attributes");
        }
        let d = self.dims;
        if d.d_q == 0 || d.d_v == 0 || d.h == 0 || d.w == 0 || d.n_z == 0 || self.cell_size == 0 {
            return bad("dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.negative_annotation_prob) {
            return bad("negative_annotation_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Deterministic synthetic fixture, hierarchy, instances and split.
pub fn synth_fixture(spec: &SynthSpec) -> Result<SynthData> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dims;
    let (n_a, n_s) = (spec.n_attributes, spec.n_super_classes);
    let unit = 1.0 / (d.d_q as f64).sqrt();

    let delta: Vec<usize> = (0..n_a).map(|i| i % n_s).collect();
    let centroids: Vec<Vec<f64>> = (0..n_s).map(|_| gaussian(&mut rng, d.d_q, unit)).collect();
    let attr_rows: Vec<Vec<f64>> = (0..n_a)
        .map(|i| {
            let mut t = centroids[delta[i]].clone();
            add_noise(&mut t, &mut rng, spec.noise * unit);
            t
        })
        .collect();
    let obj_rows: Vec<Vec<f64>> = (0..spec.n_objects)
        .map(|_| gaussian(&mut rng, d.d_q, unit))
        .collect();
    let encoder = Tensor::matrix(d.d_v, d.d_q, gaussian(&mut rng, d.d_v * d.d_q, unit))?;
    let prompt_proj = Tensor::matrix(d.d_q, d.d_q, gaussian(&mut rng, d.d_q * d.d_q, unit))?;

    let mut novel: Vec<usize> = (0..n_a).collect();
    novel.shuffle(&mut rng);
    novel.truncate(spec.n_novel);

    let attributes: Vec<String> = (0..n_a).map(|i| format!("attr{i:03}")).collect();
    let super_classes: Vec<String> = (0..n_s).map(|j| format!("super{j}")).collect();
    let objects: Vec<String> = (0..spec.n_objects).map(|o| format!("object{o}")).collect();
    let hierarchy = AttributeHierarchy::new(attributes.clone(), super_classes, delta.clone(), objects.clone())?;
    let members: Vec<Vec<usize>> = (0..n_s).map(|j| hierarchy.members(j)).collect();

    let round = |rows: &[Vec<f64>]| Tensor::from_rows(rows).map(|t| t.round_to_f32());
    let attr_text_emb = round(&attr_rows)?;
    let super_text_emb = round(&centroids)?;
    let obj_text_emb = round(&obj_rows)?;

    let cell_std = spec.feature_noise * unit;
    let (hgt, wid) = (d.h * spec.cell_size, d.w * spec.cell_size);
    let mut instances = BTreeMap::new();
    let mut records = Vec::with_capacity(spec.n_train + spec.n_eval);
    for k in 0..spec.n_train + spec.n_eval {
        let id = format!("inst{k:05}");
        let object = rng.random_range(0..spec.n_objects);
        let positives: Vec<usize> = members
            .iter()
            .map(|m| m[rng.random_range(0..m.len())])
            .collect();
        let distractors: Vec<usize> = (0..n_a).filter(|i| !positives.contains(i)).collect();

        // Object region on the feature grid, large enough for every positive.
        let min_area = n_s.min(d.hw());
        let (r0, r1, c0, c1) = loop {
            let rh = rng.random_range(d.h.min(2)..=d.h);
            let cw = rng.random_range(d.w.min(2)..=d.w);
            if rh * cw >= min_area {
                let r0 = rng.random_range(0..=d.h - rh);
                let c0 = rng.random_range(0..=d.w - cw);
                break (r0, r0 + rh, c0, c0 + cw);
            }
        };
        let inside = |cell: usize| {
            let (r, c) = (cell / d.w, cell % d.w);
            (r0..r1).contains(&r) && (c0..c1).contains(&c)
        };

        let mut f_crop = Vec::with_capacity(d.hw() * d.d_v);
        let mut f_img = Vec::with_capacity(d.hw() * d.d_v);
        let mut slot = 0;
        for cell in 0..d.hw() {
            let src = if inside(cell) {
                slot += 1;
                positives[(slot - 1) % n_s]
            } else if distractors.is_empty() {
                positives[cell % n_s]
            } else {
                distractors[rng.random_range(0..distractors.len())]
            };
            let mut row = mat_vec(&encoder, &attr_rows[src]);
            add_noise(&mut row, &mut rng, cell_std);
            f_crop.extend(row);

            let src = if rng.random_bool(0.5) || distractors.is_empty() {
                positives[rng.random_range(0..n_s)]
            } else {
                distractors[rng.random_range(0..distractors.len())]
            };
            let mut row = mat_vec(&encoder, &attr_rows[src]);
            add_noise(&mut row, &mut rng, cell_std);
            f_img.extend(row);
        }

        let mut z_rows: Vec<Vec<f64>> = Vec::with_capacity(d.n_z);
        for &p in positives.iter().take(d.n_z) {
            let mut r = attr_rows[p].clone();
            add_noise(&mut r, &mut rng, spec.zhat_noise * unit);
            z_rows.push(r);
        }
        if z_rows.len() < d.n_z {
            let mut r = obj_rows[object].clone();
            add_noise(&mut r, &mut rng, spec.zhat_noise * unit);
            z_rows.push(r);
        }
        while z_rows.len() < d.n_z {
            z_rows.push(gaussian(&mut rng, d.d_q, 0.3 * unit));
        }
        z_rows.shuffle(&mut rng);

        let targets: Vec<Vec<f64>> = positives
            .iter()
            .map(|&p| {
                let mut r = mat_vec(&prompt_proj, &attr_rows[p]);
                add_noise(&mut r, &mut rng, spec.target_noise * unit);
                r
            })
            .collect();

        let negatives: Vec<String> = distractors
            .iter()
            .filter(|_| rng.random_bool(spec.negative_annotation_prob))
            .map(|&i| attributes[i].clone())
            .collect();

        let mut bits = vec![false; hgt * wid];
        for y in r0 * spec.cell_size..r1 * spec.cell_size {
            for x in c0 * spec.cell_size..c1 * spec.cell_size {
                bits[y * wid + x] = true;
            }
        }
        let cs = spec.cell_size as f64;
        records.push(Instance {
            instance_id: id.clone(),
            image_id: format!("image{k:05}"),
            image_height: hgt,
            image_width: wid,
            bbox: [
                c0 as f64 * cs,
                r0 as f64 * cs,
                (c1 - c0) as f64 * cs,
                (r1 - r0) as f64 * cs,
            ],
            mask: RleMask::encode(&bits, hgt, wid),
            object: objects[object].clone(),
            positive_attributes: positives.iter().map(|&i| attributes[i].clone()).collect(),
            negative_attributes: negatives,
        });
        instances.insert(
            id,
            InstanceArrays {
                f_img: Tensor::matrix(d.hw(), d.d_v, f_img)?.round_to_f32(),
                f_crop: Tensor::matrix(d.hw(), d.d_v, f_crop)?.round_to_f32(),
                z_hat: round(&z_rows)?,
                mask_token_feats: round(&targets)?,
            },
        );
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("source".to_string(), serde_json::json!("synthetic"));
    metadata.insert("seed".to_string(), serde_json::json!(spec.seed));
    let fixture = EmbeddingFixture {
        dims: d,
        attr_text_emb,
        super_text_emb,
        obj_text_emb,
        instances,
        metadata,
    };
    fixture.validate()?;
    let eval = records.split_off(spec.n_train);
    Ok(SynthData {
        split: Split::new(n_a, novel)?,
        fixture,
        hierarchy,
        train: records,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, noise: f64) -> SynthSpec {
        SynthSpec {
            seed,
            noise,
            n_train: 6,
            n_eval: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = synth_fixture(&small(3, 0.2)).unwrap();
        let b = synth_fixture(&small(3, 0.2)).unwrap();
        assert_eq!(a.fixture, b.fixture);
        assert_eq!(a.train, b.train);
        assert_eq!(a.split, b.split);
        let c = synth_fixture(&small(4, 0.2)).unwrap();
        assert_ne!(a.fixture, c.fixture);
    }

    #[test]
    fn zero_noise_puts_attributes_on_centroids() {
        let s = synth_fixture(&small(1, 0.0)).unwrap();
        for (i, &j) in s.hierarchy.delta().iter().enumerate() {
            assert_eq!(s.fixture.attr_text_emb.row(i), s.fixture.super_text_emb.row(j));
        }
    }

    #[test]
    fn instances_are_valid_and_resolve() {
        let s = synth_fixture(&small(2, 0.5)).unwrap();
        for inst in s.train.iter().chain(&s.eval) {
            inst.validate().unwrap();
            let ex = crate::data::Example::resolve(inst.clone(), &s.hierarchy).unwrap();
            assert_eq!(ex.labels.values().iter().filter(|&&v| v == 1).count(), 5);
            assert!(s.fixture.instance(&inst.instance_id).is_some());
        }
        assert_eq!(s.split.novel().len(), 8);
    }

    #[test]
    fn negative_noise_rejected() {
        assert!(synth_fixture(&small(0, -0.1)).is_err());
    }
}
