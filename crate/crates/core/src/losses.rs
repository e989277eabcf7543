//! Asymmetric multi-label loss, query consistency regulariser and the
//! combined training objective.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Split, NEGATIVE, POSITIVE};
use crate::error::{Error, Result};
use crate::fixtures::EmbeddingFixture;
use crate::hierarchy::AttributeHierarchy;
use crate::model::{InstanceInput, Model, QueryMode};
use crate::numerics::{log_sigmoid, sigmoid, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 0.05,
            lambda: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_pos >= 0.0
            && self.gamma_neg >= 0.0
            && (0.0..1.0).contains(&self.clip)
            && self.lambda >= 0.0
            && [self.gamma_pos, self.gamma_neg, self.lambda].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss settings out of range: gamma_pos {}, gamma_neg {}, clip {}, lambda {}",
                self.gamma_pos, self.gamma_neg, self.clip, self.lambda
            )))
        }
    }
}

/// `x^g` with `0^0 = 1`.
fn pow(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        1.0
    } else {
        x.powf(g)
    }
}

/// Loss of one entry and its derivative with respect to the logit.
fn entry(c: f64, y: i8, cfg: &LossConfig) -> (f64, f64) {
    let p = sigmoid(c);
    match y {
        POSITIVE => {
            let g = cfg.gamma_pos;
            let log_p = log_sigmoid(c);
            let q = 1.0 - p;
            let loss = -pow(q, g) * log_p;
            let focus = if g == 0.0 { 0.0 } else { g * pow(q, g) * p * log_p };
            (loss, focus - pow(q, g) * q)
        }
        NEGATIVE => {
            let pm = (p - cfg.clip).max(0.0);
            if pm == 0.0 {
                return (0.0, 0.0);
            }
            let g = cfg.gamma_neg;
            let log_1m = if cfg.clip == 0.0 {
                log_sigmoid(-c)
            } else {
                (-pm).ln_1p()
            };
            let loss = -pow(pm, g) * log_1m;
            let focus = if g == 0.0 { 0.0 } else { -g * pow(pm, g - 1.0) * log_1m };
            let d_pm = focus + pow(pm, g) / (1.0 - pm);
            (loss, d_pm * p * (1.0 - p))
        }
        _ => (0.0, 0.0),
    }
}

/// Mean asymmetric loss over entries with label `1` or `0` (0 when none),
/// with its gradient with respect to every logit.
pub fn asymmetric_loss_with_grad(logits: &[f64], labels: &[i8], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::shape(
            "asymmetric_loss",
            format!("{} logits, {} labels", logits.len(), labels.len()),
        ));
    }
    let n = labels.iter().filter(|&&y| y == POSITIVE || y == NEGATIVE).count();
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for ((g, &c), &y) in grad.iter_mut().zip(logits).zip(labels) {
        let (l, d) = entry(c, y, cfg);
        total += l;
        *g = d * inv;
    }
    Ok((total * inv, grad))
}

pub fn asymmetric_loss(logits: &[f64], labels: &[i8], cfg: &LossConfig) -> Result<f64> {
    asymmetric_loss_with_grad(logits, labels, cfg).map(|(l, _)| l)
}

pub fn asymmetric_loss_on_tape(tape: &mut Tape, logits: Var, labels: &[i8], cfg: &LossConfig) -> Result<Var> {
    let (value, grad) = asymmetric_loss_with_grad(tape.value(logits).data(), labels, cfg)?;
    let shape = tape.value(logits).shape().to_vec();
    tape.scalar_fn(logits, value, Tensor::new(shape, grad)?)
}

/// Super-classes that take part in the consistency term: not named
/// `other` and with a non-zero target row.
pub fn active_super_classes(mask_token_feats: &Tensor, hierarchy: &AttributeHierarchy) -> Vec<usize> {
    (0..mask_token_feats.rows())
        .filter(|&j| !hierarchy.is_other(j) && mask_token_feats.row(j).iter().any(|&v| v != 0.0))
        .collect()
}

/// `Σ_{j ∈ active} ‖p̂_j − scr_head·q̄_j‖₁` without recording.
pub fn scr_loss(q_bar: &Tensor, targets: &Tensor, scr_head: &Tensor, active: &[usize]) -> Result<f64> {
    let proj = q_bar.matmul_t(scr_head)?;
    if proj.shape() != targets.shape() {
        return Err(Error::shape(
            "scr_loss",
            format!("projected {:?} vs targets {:?}", proj.shape(), targets.shape()),
        ));
    }
    let mut total = 0.0;
    for &j in active {
        if j >= targets.rows() {
            return Err(Error::shape("scr_loss", format!("super-class {j} out of range")));
        }
        total += proj.row(j).iter().zip(targets.row(j)).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total)
}

pub fn scr_loss_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    q_bar: Var,
    targets: &Tensor,
    scr_head: ParamId,
    active: &[usize],
) -> Result<Var> {
    let w = tape.param(store, scr_head)?;
    let proj = tape.matmul_t(q_bar, w)?;
    if tape.value(proj).shape() != targets.shape() {
        return Err(Error::shape(
            "scr_loss",
            format!("projected {:?} vs targets {:?}", tape.value(proj).shape(), targets.shape()),
        ));
    }
    if active.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let proj = tape.gather_rows(proj, active)?;
    let t = tape.constant(targets.select_rows(active)?)?;
    let diff = tape.sub(t, proj)?;
    let a = tape.abs(diff)?;
    tape.sum(a)
}

/// Loss node for a batch plus the values of its parts, each averaged over
/// the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub total_value: f64,
    /// `Σ_x L_asym^x`
    pub asym: f64,
    pub scr: f64,
}

/// Everything the objective reads besides parameters.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub model: &'a Model,
    pub fixture: &'a EmbeddingFixture,
    pub hierarchy: &'a AttributeHierarchy,
    pub split: &'a Split,
    pub loss: &'a LossConfig,
    pub scr: bool,
}

impl Objective<'_> {
    /// `mean_batch( Σ_x L_asym^x + λ·L_SCR )` with labels restricted to base
    /// attributes. Requires superclass queries when `scr` is on.
    pub fn total_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<LossTerms> {
        if batch.is_empty() {
            return Err(Error::Usage("loss of an empty batch".into()));
        }
        let use_scr = self.scr && self.loss.lambda > 0.0;
        if use_scr && self.model.config.query_mode != QueryMode::Superclass {
            return Err(Error::Config("consistency regularisation needs superclass queries".into()));
        }
        let delta = self.hierarchy.delta();
        let text = self.model.text_features(tape, store, self.fixture)?;
        let mut per_instance = Vec::with_capacity(batch.len());
        let (mut asym_sum, mut scr_sum) = (0.0, 0.0);
        for item in &batch.items {
            let input = InstanceInput::from(item);
            let out = self.model.forward_on_tape(tape, store, self.fixture, delta, text, &input)?;
            let labels = item.example.labels.restricted_to_base(self.split);
            let mut terms = Vec::with_capacity(out.logits.len() + 1);
            for &c in &out.logits {
                let l = asymmetric_loss_on_tape(tape, c, labels.values(), self.loss)?;
                asym_sum += tape.value(l).item();
                terms.push(l);
            }
            if use_scr {
                let targets = &item.arrays.mask_token_feats;
                let active = active_super_classes(targets, self.hierarchy);
                let s = scr_loss_on_tape(tape, store, out.q_bar, targets, self.model.params.scr_head, &active)?;
                scr_sum += tape.value(s).item();
                terms.push(tape.scale(s, self.loss.lambda)?);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            per_instance.push(acc);
        }
        let total = tape.mean_of(&per_instance)?;
        let n = batch.len() as f64;
        Ok(LossTerms {
            total,
            total_value: tape.value(total).item(),
            asym: asym_sum / n,
            scr: scr_sum / n,
        })
    }
}
