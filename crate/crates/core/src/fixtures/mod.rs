//! Frozen vision-language tensors consumed by the decoder.
//!
//! A fixture directory holds `manifest.json` and one raw little-endian f32
//! file per array. Global arrays are `attr_text_emb`, `super_text_emb` and
//! `obj_text_emb`; per-instance arrays are namespaced as
//! `f_img/<id>`, `f_crop/<id>`, `z_hat/<id>` and `mask_token_feats/<id>`.

mod format;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use format::{ArrayBundle, Manifest, ManifestEntry, FORMAT_NAME, FORMAT_VERSION, MANIFEST_FILE};
pub use synth::{synth_fixture, SynthData, SynthSpec};

use crate::error::{Error, Result};
use crate::hierarchy::AttributeHierarchy;
use crate::numerics::Tensor;

pub const ATTR_TEXT_EMB: &str = "attr_text_emb";
pub const SUPER_TEXT_EMB: &str = "super_text_emb";
pub const OBJ_TEXT_EMB: &str = "obj_text_emb";
pub const F_IMG: &str = "f_img";
pub const F_CROP: &str = "f_crop";
pub const Z_HAT: &str = "z_hat";
pub const MASK_TOKEN_FEATS: &str = "mask_token_feats";

const PER_INSTANCE: [&str; 4] = [F_IMG, F_CROP, Z_HAT, MASK_TOKEN_FEATS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureDims {
    pub d_q: usize,
    pub d_v: usize,
    pub h: usize,
    pub w: usize,
    pub n_z: usize,
}

impl Default for FixtureDims {
    fn default() -> Self {
        Self {
            d_q: 768,
            d_v: 1408,
            h: 16,
            w: 16,
            n_z: 32,
        }
    }
}

impl FixtureDims {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Per-instance frozen tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceArrays {
    /// `[hw × d_v]` whole-image feature map.
    pub f_img: Tensor,
    /// `[hw × d_v]` feature map of the box crop.
    pub f_crop: Tensor,
    /// `[N_z × d_q]` Q-Former outputs.
    pub z_hat: Tensor,
    /// `[N_s × d_q]` [MASK]-token features, one row per super-class prompt.
    pub mask_token_feats: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFixture {
    pub dims: FixtureDims,
    pub attr_text_emb: Tensor,
    pub super_text_emb: Tensor,
    pub obj_text_emb: Tensor,
    pub instances: BTreeMap<String, InstanceArrays>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Fixture {
            array: name.to_string(),
            reason: format!("shape {:?}, expected {:?}", t.shape(), shape),
        });
    }
    if !t.is_finite() {
        return Err(Error::Fixture {
            array: name.to_string(),
            reason: "non-finite values".into(),
        });
    }
    Ok(())
}

fn expect_cols(name: &str, t: &Tensor, cols: usize) -> Result<()> {
    if t.shape().len() != 2 || t.shape()[1] != cols {
        return Err(Error::Fixture {
            array: name.to_string(),
            reason: format!("shape {:?}, expected [_, {cols}]", t.shape()),
        });
    }
    Ok(())
}

impl EmbeddingFixture {
    pub fn instance(&self, id: &str) -> Option<&InstanceArrays> {
        self.instances.get(id)
    }

    pub fn n_attributes(&self) -> usize {
        self.attr_text_emb.rows()
    }

    pub fn n_super_classes(&self) -> usize {
        self.super_text_emb.rows()
    }

    /// Checks every array against the declared dims.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        expect_cols(ATTR_TEXT_EMB, &self.attr_text_emb, d.d_q)?;
        expect_cols(SUPER_TEXT_EMB, &self.super_text_emb, d.d_q)?;
        expect_cols(OBJ_TEXT_EMB, &self.obj_text_emb, d.d_q)?;
        let n_s = self.super_text_emb.rows();
        for (id, a) in &self.instances {
            expect_shape(&format!("{F_IMG}/{id}"), &a.f_img, &[d.hw(), d.d_v])?;
            expect_shape(&format!("{F_CROP}/{id}"), &a.f_crop, &[d.hw(), d.d_v])?;
            expect_shape(&format!("{Z_HAT}/{id}"), &a.z_hat, &[d.n_z, d.d_q])?;
            expect_shape(&format!("{MASK_TOKEN_FEATS}/{id}"), &a.mask_token_feats, &[n_s, d.d_q])?;
        }
        Ok(())
    }

    /// Checks vocabulary sizes against a hierarchy.
    pub fn validate_against(&self, h: &AttributeHierarchy) -> Result<()> {
        let checks = [
            (ATTR_TEXT_EMB, self.attr_text_emb.rows(), h.n_attributes()),
            (SUPER_TEXT_EMB, self.super_text_emb.rows(), h.n_super_classes()),
            (OBJ_TEXT_EMB, self.obj_text_emb.rows(), h.n_objects()),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Fixture {
                    array: name.into(),
                    reason: format!("{got} rows, hierarchy has {want} entries"),
                });
            }
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> ArrayBundle {
        let mut b = ArrayBundle {
            dims: Some(serde_json::to_value(self.dims).expect("dims serialise")),
            arrays: Vec::with_capacity(3 + 4 * self.instances.len()),
            metadata: self.metadata.clone(),
        };
        b.push(ATTR_TEXT_EMB, self.attr_text_emb.clone());
        b.push(SUPER_TEXT_EMB, self.super_text_emb.clone());
        b.push(OBJ_TEXT_EMB, self.obj_text_emb.clone());
        for (id, a) in &self.instances {
            b.push(format!("{F_IMG}/{id}"), a.f_img.clone());
            b.push(format!("{F_CROP}/{id}"), a.f_crop.clone());
            b.push(format!("{Z_HAT}/{id}"), a.z_hat.clone());
            b.push(format!("{MASK_TOKEN_FEATS}/{id}"), a.mask_token_feats.clone());
        }
        b
    }

    pub fn from_bundle(bundle: ArrayBundle) -> Result<Self> {
        let dims: FixtureDims = match bundle.dims {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Fixture {
                array: MANIFEST_FILE.into(),
                reason: format!("bad dims: {e}"),
            })?,
            None => {
                return Err(Error::Fixture {
                    array: MANIFEST_FILE.into(),
                    reason: "missing dims".into(),
                })
            }
        };
        let mut globals: BTreeMap<&'static str, Tensor> = BTreeMap::new();
        let mut partial: BTreeMap<String, [Option<Tensor>; 4]> = BTreeMap::new();
        for (name, t) in bundle.arrays {
            if let Some(g) = [ATTR_TEXT_EMB, SUPER_TEXT_EMB, OBJ_TEXT_EMB]
                .into_iter()
                .find(|g| *g == name)
            {
                globals.insert(g, t);
                continue;
            }
            let slot = name
                .split_once('/')
                .and_then(|(kind, id)| PER_INSTANCE.iter().position(|k| *k == kind).map(|k| (k, id)));
            match slot {
                Some((k, id)) => {
                    partial.entry(id.to_string()).or_default()[k] = Some(t);
                }
                None => log::warn!("ignoring unrecognised fixture array `{name}`"),
            }
        }
        let mut take = |name: &'static str| {
            globals.remove(name).ok_or_else(|| Error::Fixture {
                array: name.into(),
                reason: "missing".into(),
            })
        };
        let attr_text_emb = take(ATTR_TEXT_EMB)?;
        let super_text_emb = take(SUPER_TEXT_EMB)?;
        let obj_text_emb = take(OBJ_TEXT_EMB)?;
        let mut instances = BTreeMap::new();
        for (id, slots) in partial {
            let [f_img, f_crop, z_hat, mask_token_feats] = slots;
            let missing = |k: usize| Error::Fixture {
                array: format!("{}/{id}", PER_INSTANCE[k]),
                reason: "missing".into(),
            };
            let arrays = InstanceArrays {
                f_img: f_img.ok_or_else(|| missing(0))?,
                f_crop: f_crop.ok_or_else(|| missing(1))?,
                z_hat: z_hat.ok_or_else(|| missing(2))?,
                mask_token_feats: mask_token_feats.ok_or_else(|| missing(3))?,
            };
            instances.insert(id, arrays);
        }
        let fixture = Self {
            dims,
            attr_text_emb,
            super_text_emb,
            obj_text_emb,
            instances,
            metadata: bundle.metadata,
        };
        fixture.validate()?;
        Ok(fixture)
    }
}

/// Reads and validates a fixture directory. Values are widened from f32.
pub fn load_fixture(dir: &Path) -> Result<EmbeddingFixture> {
    EmbeddingFixture::from_bundle(ArrayBundle::read(dir)?)
}

/// Writes a fixture directory; values are narrowed to f32.
pub fn save_fixture(fixture: &EmbeddingFixture, dir: &Path) -> Result<()> {
    fixture.validate()?;
    fixture.to_bundle().write(dir)
}
