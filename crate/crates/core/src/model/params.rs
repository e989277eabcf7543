use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Context, ModelConfig};
use crate::error::{Error, Result};
use crate::fixtures::{ArrayBundle, FixtureDims};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// `[d_ff × d]`
    pub ffn_in: ParamId,
    /// `[d × d_ff]`
    pub ffn_out: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ContextParams {
    pub context: Context,
    /// `[d × d_v]`
    pub feat_proj: ParamId,
    /// `[d × 2·d_q]`
    pub query_proj: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Every trainable weight of the head, registered in a fixed order.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub store: ParamStore,
    /// `[d × d_q]`
    pub text_proj: ParamId,
    /// `[d_q × d]`
    pub scr_head: ParamId,
    pub contexts: Vec<ContextParams>,
}

impl ModelParameters {
    pub fn new(cfg: &ModelConfig, dims: &FixtureDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, d_ff) = (cfg.d, cfg.d_ff);
        let text_proj = store.insert_uniform("text_proj", d, dims.d_q, &mut rng)?;
        let scr_head = store.insert_uniform("scr_head", dims.d_q, d, &mut rng)?;
        let mut contexts = Vec::new();
        for ctx in cfg.contexts() {
            let p = ctx.name();
            let feat_proj = store.insert_uniform(format!("{p}.feat_proj"), d, dims.d_v, &mut rng)?;
            let query_proj = store.insert_uniform(format!("{p}.query_proj"), d, 2 * dims.d_q, &mut rng)?;
            let mut blocks = Vec::with_capacity(cfg.blocks);
            for b in 0..cfg.blocks {
                let n = |s: &str| format!("{p}.block{b}.{s}");
                blocks.push(BlockParams {
                    w_q: store.insert_uniform(n("w_q"), d, d, &mut rng)?,
                    w_k: store.insert_uniform(n("w_k"), d, d, &mut rng)?,
                    w_v: store.insert_uniform(n("w_v"), d, d, &mut rng)?,
                    w_o: store.insert_uniform(n("w_o"), d, d, &mut rng)?,
                    ffn_in: store.insert_uniform(n("ffn_in"), d_ff, d, &mut rng)?,
                    ffn_out: store.insert_uniform(n("ffn_out"), d, d_ff, &mut rng)?,
                    ln1_gain: store.insert(n("ln1_gain"), Tensor::full(&[d], 1.0))?,
                    ln1_bias: store.insert(n("ln1_bias"), Tensor::zeros(&[d]))?,
                    ln2_gain: store.insert(n("ln2_gain"), Tensor::full(&[d], 1.0))?,
                    ln2_bias: store.insert(n("ln2_bias"), Tensor::zeros(&[d]))?,
                });
            }
            contexts.push(ContextParams {
                context: ctx,
                feat_proj,
                query_proj,
                blocks,
            });
        }
        Ok(Self {
            store,
            text_proj,
            scr_head,
            contexts,
        })
    }

    pub fn to_bundle(&self) -> ArrayBundle {
        let mut b = ArrayBundle::default();
        for (_, p) in self.store.iter() {
            b.push(p.name.clone(), p.value.clone());
        }
        b
    }

    /// Overwrites values from a bundle whose names and shapes match this
    /// layout exactly.
    pub fn load_bundle(&mut self, bundle: &ArrayBundle) -> Result<()> {
        if bundle.arrays.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, model expects {}",
                bundle.arrays.len(),
                self.store.len()
            )));
        }
        for (name, t) in &bundle.arrays {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
