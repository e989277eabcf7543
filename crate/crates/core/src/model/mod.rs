//! Super-class query decoder head: query initialisation, per-context
//! cross-attention decoding and per-attribute logits.

mod decoder;
mod inputs;
mod params;

use serde::{Deserialize, Serialize};

pub use decoder::{decode_context, first_block_attention};
pub use inputs::{
    att_row, init_queries, init_queries_tensor, mask_feature_map, obj_row, pool_qformer, query_inputs,
    resize_mask, PoolMode,
};
pub use params::{BlockParams, ContextParams, ModelParameters};

use crate::data::{BatchItem, RleMask};
use crate::error::{Error, Result};
use crate::fixtures::{EmbeddingFixture, FixtureDims, InstanceArrays};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Feature map a decoder reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    Img,
    Crop,
    Mask,
}

impl Context {
    pub const ALL: [Context; 3] = [Context::Img, Context::Crop, Context::Mask];

    pub fn name(self) -> &'static str {
        match self {
            Context::Img => "img",
            Context::Crop => "crop",
            Context::Mask => "mask",
        }
    }
}

/// One query per super-class, or one per attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Superclass,
    Classwise,
}

impl QueryMode {
    pub fn rows(self, n_attributes: usize, n_super_classes: usize) -> usize {
        match self {
            QueryMode::Superclass => n_super_classes,
            QueryMode::Classwise => n_attributes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub heads: usize,
    pub positional_encoding: bool,
    pub query_mode: QueryMode,
    pub pool_mode: PoolMode,
    /// Off: the pooled visual vector is replaced by zeros.
    pub sqi: bool,
    /// Off: a single crop decoder.
    pub md: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            d_ff: 2048,
            blocks: 3,
            heads: 1,
            positional_encoding: false,
            query_mode: QueryMode::Superclass,
            pool_mode: PoolMode::AttObj,
            sqi: true,
            md: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ff == 0 || self.blocks == 0 {
            return Err(Error::Config("d, d_ff and blocks must be positive".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        Ok(())
    }

    pub fn contexts(&self) -> Vec<Context> {
        if self.md {
            Context::ALL.to_vec()
        } else {
            vec![Context::Crop]
        }
    }
}

/// Per-instance inputs beyond the shared fixture arrays.
#[derive(Debug, Clone, Copy)]
pub struct InstanceInput<'a> {
    pub arrays: &'a InstanceArrays,
    pub mask: &'a RleMask,
    pub object_index: usize,
}

impl<'a> From<&BatchItem<'a>> for InstanceInput<'a> {
    fn from(item: &BatchItem<'a>) -> Self {
        Self {
            arrays: item.arrays,
            mask: &item.example.instance.mask,
            object_index: item.example.object_index,
        }
    }
}

/// Tape handles for one instance.
#[derive(Debug, Clone)]
pub struct TapeOutputs {
    pub q_hat: Vec<Var>,
    pub logits: Vec<Var>,
    pub c_bar: Var,
    pub q_bar: Var,
}

/// Forward values for one instance; vectors follow `contexts` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextOutputs {
    pub contexts: Vec<Context>,
    pub q_hat: Vec<Tensor>,
    pub logits: Vec<Vec<f64>>,
    pub c_bar: Vec<f64>,
    pub q_bar: Tensor,
}

/// 1D sinusoidal encoding over `n` flattened positions.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for p in 0..n {
        for c in 0..d {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
            let a = p as f64 * freq;
            data.push(if c % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::from_parts(vec![n, d], data)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: FixtureDims,
    pub params: ModelParameters,
}

impl Model {
    pub fn new(config: ModelConfig, dims: FixtureDims, seed: u64) -> Result<Self> {
        let params = ModelParameters::new(&config, &dims, seed)?;
        Ok(Self { config, dims, params })
    }

    pub fn contexts(&self) -> Vec<Context> {
        self.params.contexts.iter().map(|c| c.context).collect()
    }

    /// `T = t · text_projᵀ`, `[N_a × d]`; shared by every instance on a tape.
    pub fn text_features(&self, tape: &mut Tape, store: &ParamStore, fixture: &EmbeddingFixture) -> Result<Var> {
        let t = tape.constant(fixture.attr_text_emb.clone())?;
        let w = tape.param(store, self.params.text_proj)?;
        tape.matmul_t(t, w)
    }

    fn check_vocab(&self, fixture: &EmbeddingFixture, delta: &[usize]) -> Result<()> {
        let (n_a, n_s) = (fixture.n_attributes(), fixture.n_super_classes());
        if delta.len() != n_a || delta.iter().any(|&j| j >= n_s) {
            return Err(Error::shape(
                "forward",
                format!("delta of length {} for {n_a} attributes and {n_s} super-classes", delta.len()),
            ));
        }
        Ok(())
    }

    fn visual_vector(&self, fixture: &EmbeddingFixture, input: &InstanceInput) -> Result<Vec<f64>> {
        if !self.config.sqi {
            return Ok(vec![0.0; self.dims.d_q]);
        }
        if input.object_index >= fixture.obj_text_emb.rows() {
            return Err(Error::shape(
                "forward",
                format!("object index {} out of range", input.object_index),
            ));
        }
        pool_qformer(
            &input.arrays.z_hat,
            fixture.obj_text_emb.row(input.object_index),
            &fixture.attr_text_emb,
            self.config.pool_mode,
        )
    }

    fn seeds<'f>(&self, fixture: &'f EmbeddingFixture) -> &'f Tensor {
        match self.config.query_mode {
            QueryMode::Superclass => &fixture.super_text_emb,
            QueryMode::Classwise => &fixture.attr_text_emb,
        }
    }

    fn feature_map(&self, ctx: Context, input: &InstanceInput) -> Result<Tensor> {
        Ok(match ctx {
            Context::Img => input.arrays.f_img.clone(),
            Context::Crop => input.arrays.f_crop.clone(),
            Context::Mask => mask_feature_map(&input.arrays.f_crop, input.mask, self.dims.h, self.dims.w)?,
        })
    }

    /// Initial query matrix of the `k`-th active context, outside any tape.
    /// Its row count is the per-context query allocation.
    pub fn initial_queries(&self, k: usize, fixture: &EmbeddingFixture, input: &InstanceInput) -> Result<Tensor> {
        let cp = self
            .params
            .contexts
            .get(k)
            .ok_or_else(|| Error::Usage(format!("no context #{k}")))?;
        let v = self.visual_vector(fixture, input)?;
        let proj = &self.params.store.get(cp.query_proj).value;
        init_queries_tensor(self.seeds(fixture), &v, proj)
    }

    /// Records the forward pass of one instance on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fixture: &EmbeddingFixture,
        delta: &[usize],
        text: Var,
        input: &InstanceInput,
    ) -> Result<TapeOutputs> {
        self.check_vocab(fixture, delta)?;
        let v = self.visual_vector(fixture, input)?;
        let seeds = self.seeds(fixture);
        let mut q_hat = Vec::with_capacity(self.params.contexts.len());
        let mut logits = Vec::with_capacity(self.params.contexts.len());
        for cp in &self.params.contexts {
            let f = tape.constant(self.feature_map(cp.context, input)?)?;
            let wf = tape.param(store, cp.feat_proj)?;
            let mut f_tilde = tape.matmul_t(f, wf)?;
            if self.config.positional_encoding {
                let pe = tape.constant(positional_encoding(self.dims.hw(), self.config.d))?;
                f_tilde = tape.add(f_tilde, pe)?;
            }
            let q0 = init_queries(tape, store, seeds, &v, cp.query_proj)?;
            let q = decode_context(tape, store, q0, f_tilde, &cp.blocks, self.config.heads)?;
            let per_attr = match self.config.query_mode {
                QueryMode::Superclass => tape.gather_rows(q, delta)?,
                QueryMode::Classwise => q,
            };
            let prod = tape.mul(text, per_attr)?;
            logits.push(tape.row_sums(prod)?);
            q_hat.push(q);
        }
        let c_bar = tape.mean_of(&logits)?;
        let q_bar = tape.mean_of(&q_hat)?;
        Ok(TapeOutputs {
            q_hat,
            logits,
            c_bar,
            q_bar,
        })
    }

    /// Forward values with the model's own parameters.
    pub fn infer(&self, fixture: &EmbeddingFixture, delta: &[usize], input: &InstanceInput) -> Result<ContextOutputs> {
        let mut tape = Tape::new();
        let store = &self.params.store;
        let text = self.text_features(&mut tape, store, fixture)?;
        let out = self.forward_on_tape(&mut tape, store, fixture, delta, text, input)?;
        Ok(ContextOutputs {
            contexts: self.contexts(),
            q_hat: out.q_hat.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: out.logits.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
            c_bar: tape.value(out.c_bar).data().to_vec(),
            q_bar: tape.value(out.q_bar).clone(),
        })
    }
}

#[cfg(test)]
mod tests;
