//! Training loop, checkpoints, evaluation driver and gradient check.

mod config;
mod optim;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ArchConfig, FrequencyThresholds, OptimizerConfig, Paths, RunConfig, Toggles};
pub use optim::AdamW;

use crate::data::{assemble_batches, load_annotations, save_annotations, Example, Split};
use crate::error::{Error, Result};
use crate::fixtures::{load_fixture, save_fixture, synth_fixture, ArrayBundle, EmbeddingFixture, FixtureDims, SynthData, SynthSpec};
use crate::hierarchy::AttributeHierarchy;
use crate::losses::{LossConfig, Objective};
use crate::metrics::{frequency_groups, grouped_report, ScoreReport};
use crate::model::{InstanceInput, Model, ModelConfig};
use crate::numerics::{check_gradients, sigmoid, GradCheckReport, Tape};
use crate::zrse::{enhance, retrieval_scores, select};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const OPTIMIZER_FILE: &str = "optimizer.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAINING_LOG: &str = "training_log.jsonl";

/// Everything a run reads from disk.
#[derive(Debug, Clone)]
pub struct RunData {
    pub fixture: EmbeddingFixture,
    pub hierarchy: AttributeHierarchy,
    pub split: Split,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        let hierarchy = AttributeHierarchy::load(&p.hierarchy)?;
        let fixture = load_fixture(&p.fixture)?;
        fixture.validate_against(&hierarchy)?;
        let split = match &p.split {
            Some(path) => Split::load(path, &hierarchy)?,
            None => Split::all_base(hierarchy.n_attributes()),
        };
        let train = if p.train_annotations.as_os_str().is_empty() {
            Vec::new()
        } else {
            load_annotations(&p.train_annotations, &hierarchy)?
        };
        let eval = match &p.eval_annotations {
            Some(path) => load_annotations(path, &hierarchy)?,
            None => Vec::new(),
        };
        Ok(Self {
            fixture,
            hierarchy,
            split,
            train,
            eval,
        })
    }

    /// Resolves the instances of a synthetic dataset.
    pub fn from_synth(data: SynthData) -> Result<Self> {
        let resolve = |v: Vec<crate::data::Instance>, h: &AttributeHierarchy| -> Result<Vec<Example>> {
            v.into_iter().map(|i| Example::resolve(i, h)).collect()
        };
        let train = resolve(data.train, &data.hierarchy)?;
        let eval = resolve(data.eval, &data.hierarchy)?;
        Ok(Self {
            fixture: data.fixture,
            hierarchy: data.hierarchy,
            split: data.split,
            train,
            eval,
        })
    }
}

/// Writes a synthetic dataset as fixture + annotation files and returns a
/// config whose paths point at them (relative to `dir`).
pub fn write_synth_run(data: &SynthData, dir: &Path, template: &RunConfig) -> Result<RunConfig> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_fixture(&data.fixture, &dir.join("fixture"))?;
    data.hierarchy.save(&dir.join("hierarchy.json"))?;
    data.split.save(&dir.join("split.json"), &data.hierarchy)?;
    save_annotations(&dir.join("train.jsonl"), &data.train)?;
    save_annotations(&dir.join("eval.jsonl"), &data.eval)?;
    let mut cfg = template.clone();
    cfg.paths = Paths {
        fixture: "fixture".into(),
        hierarchy: "hierarchy.json".into(),
        train_annotations: "train.jsonl".into(),
        eval_annotations: Some("eval.jsonl".into()),
        split: Some("split.json".into()),
    };
    cfg.save(&dir.join("config.json"))?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Means over the epoch's batches.
    pub l_total: f64,
    pub l_asym: f64,
    pub l_scr: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub optimizer: AdamW,
    pub log: Vec<EpochLog>,
}

fn non_finite(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("non-finite value from {what}"),
        },
        other => other,
    }
}

/// Shuffle seed of a 1-based epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains from a fresh initialisation. Deterministic in `(cfg, data)`.
pub fn fit(cfg: &RunConfig, data: &RunData) -> Result<Trained> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Usage("no training instances".into()));
    }
    let mut model = Model::new(cfg.model_config(), data.fixture.dims, cfg.seed)?;
    let mut optimizer = AdamW::new(&cfg.optimizer, &model.params.store);
    let loss = LossConfig {
        lambda: cfg.effective_lambda(),
        ..cfg.loss
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch);
        let batches = assemble_batches(&data.train, &data.fixture, cfg.batch_size, Some(epoch_seed(cfg.seed, epoch)))?;
        let (mut tot, mut asym, mut scr) = (0.0, 0.0, 0.0);
        for batch in &batches {
            step += 1;
            let mut store = std::mem::take(&mut model.params.store);
            let result = (|| {
                let objective = Objective {
                    model: &model,
                    fixture: &data.fixture,
                    hierarchy: &data.hierarchy,
                    split: &data.split,
                    loss: &loss,
                    scr: cfg.toggles.scr,
                };
                store.zero_grad();
                let mut tape = Tape::new();
                let terms = objective.total_loss(&mut tape, &store, batch)?;
                if !terms.total_value.is_finite() {
                    return Err(Error::NonFinite("total loss"));
                }
                tape.backward(terms.total, &mut store)?;
                optimizer.update(&mut store, lr)?;
                Ok(terms)
            })();
            model.params.store = store;
            let terms = result.map_err(|e| non_finite(epoch, step, e))?;
            tot += terms.total_value;
            asym += terms.asym;
            scr += terms.scr;
        }
        let n = batches.len() as f64;
        let entry = EpochLog {
            epoch,
            lr,
            steps: batches.len(),
            l_total: tot / n,
            l_asym: asym / n,
            l_scr: scr / n,
        };
        log::info!(
            "epoch {epoch}: L_total {:.6} L_asym {:.6} L_scr {:.6}",
            entry.l_total,
            entry.l_asym,
            entry.l_scr
        );
        log.push(entry);
    }
    Ok(Trained { model, optimizer, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    model: ModelConfig,
    dims: FixtureDims,
}

pub fn save_checkpoint(dir: &Path, model: &Model, optimizer: &AdamW) -> Result<()> {
    model.params.to_bundle().write(dir)?;
    optimizer.save(&dir.join(OPTIMIZER_FILE))?;
    let path = dir.join(MODEL_FILE);
    let meta = ModelFile {
        model: model.config.clone(),
        dims: model.dims,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Builds the model the config describes and fills it from `dir`.
pub fn load_checkpoint(dir: &Path, cfg: &RunConfig, dims: FixtureDims) -> Result<Model> {
    let mut model = Model::new(cfg.model_config(), dims, cfg.seed)?;
    let bundle = ArrayBundle::read(dir)?;
    model.params.load_bundle(&bundle)?;
    Ok(model)
}

/// Per-instance probabilities, with retrieval enhancement when toggled.
/// Instances are scored in parallel and returned in input order.
pub fn predict(cfg: &RunConfig, model: &Model, data: &RunData, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let novel = data.split.novel();
    let candidates = cfg.toggles.zrse_novel_only.then_some(novel.as_slice());
    examples
        .par_iter()
        .map(|ex| {
            let arrays = data
                .fixture
                .instance(&ex.instance.instance_id)
                .ok_or_else(|| Error::MissingInstance(ex.instance.instance_id.clone()))?;
            let input = InstanceInput {
                arrays,
                mask: &ex.instance.mask,
                object_index: ex.object_index,
            };
            let out = model.infer(&data.fixture, data.hierarchy.delta(), &input)?;
            if cfg.toggles.zrse {
                let r = retrieval_scores(&data.fixture.attr_text_emb, &arrays.z_hat)?;
                enhance(&out.c_bar, &select(r, cfg.toggles.zrse_topk, candidates))
            } else {
                Ok(out.c_bar.into_iter().map(sigmoid).collect())
            }
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig, model: &Model, data: &RunData) -> Result<ScoreReport> {
    if data.eval.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let scores = predict(cfg, model, data, &data.eval)?;
    let labels: Vec<Vec<i8>> = data.eval.iter().map(|e| e.labels.values().to_vec()).collect();
    let ids: Vec<String> = data.eval.iter().map(|e| e.instance.instance_id.clone()).collect();
    let groups = match cfg.frequency_groups {
        Some(f) => {
            let train: Vec<Vec<i8>> = data.train.iter().map(|e| e.labels.values().to_vec()).collect();
            Some(frequency_groups(&train, data.hierarchy.n_attributes(), f.head_min, f.medium_min)?)
        }
        None => None,
    };
    grouped_report(&ids, &scores, &labels, &data.split, groups.as_deref())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
    pub report: Option<ScoreReport>,
}

/// Trains, writes `checkpoint/`, `training_log.jsonl` and, when an
/// evaluation set exists, `report.json`/`summary.csv` computed from the
/// saved checkpoint.
pub fn train(cfg: &RunConfig, data: &RunData, out_dir: &Path) -> Result<TrainOutcome> {
    let trained = fit(cfg, data)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt = out_dir.join(CHECKPOINT_DIR);
    save_checkpoint(&ckpt, &trained.model, &trained.optimizer)?;
    let log_path = out_dir.join(TRAINING_LOG);
    let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for e in &trained.log {
        let line = serde_json::to_string(e).map_err(|err| Error::json(&log_path, err))?;
        writeln!(f, "{line}").map_err(|err| Error::io(&log_path, err))?;
    }
    let report = if data.eval.is_empty() {
        None
    } else {
        let model = load_checkpoint(&ckpt, cfg, data.fixture.dims)?;
        let report = evaluate(cfg, &model, data)?;
        report.write(out_dir)?;
        Some(report)
    };
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log: trained.log,
        report,
    })
}

/// Data dimensions for the gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSpec {
    pub d_q: usize,
    pub d_v: usize,
    pub n_super_classes: usize,
    pub n_attributes: usize,
    pub n_instances: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            d_q: 16,
            d_v: 12,
            n_super_classes: 3,
            n_attributes: 6,
            n_instances: 2,
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

pub const GRADCHECK_MAX_D: usize = 16;
pub const GRADCHECK_MAX_ATTRIBUTES: usize = 8;

/// A run config small enough for [`gradcheck`].
pub fn tiny_config() -> RunConfig {
    RunConfig {
        model: ArchConfig {
            d: 8,
            d_ff: 16,
            ..ArchConfig::default()
        },
        ..RunConfig::default()
    }
}

/// Central differences against `backward` for the full objective on a
/// synthetic batch, over every parameter.
pub fn gradcheck(cfg: &RunConfig, spec: &GradcheckSpec) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.model.d > GRADCHECK_MAX_D || spec.n_attributes > GRADCHECK_MAX_ATTRIBUTES {
        return Err(Error::Config(format!(
            "gradient check needs d <= {GRADCHECK_MAX_D} and at most {GRADCHECK_MAX_ATTRIBUTES} attributes"
        )));
    }
    let synth = synth_fixture(&SynthSpec {
        seed: cfg.seed,
        n_attributes: spec.n_attributes,
        n_super_classes: spec.n_super_classes,
        n_objects: 2,
        dims: FixtureDims {
            d_q: spec.d_q,
            d_v: spec.d_v,
            h: 2,
            w: 2,
            n_z: 4,
        },
        n_train: spec.n_instances,
        n_eval: 0,
        n_novel: 1,
        ..SynthSpec::default()
    })?;
    let data = RunData::from_synth(synth)?;
    let model = Model::new(cfg.model_config(), data.fixture.dims, cfg.seed)?;
    let loss = LossConfig {
        lambda: cfg.effective_lambda(),
        ..cfg.loss
    };
    let objective = Objective {
        model: &model,
        fixture: &data.fixture,
        hierarchy: &data.hierarchy,
        split: &data.split,
        loss: &loss,
        scr: cfg.toggles.scr,
    };
    let batches = assemble_batches(&data.train, &data.fixture, spec.n_instances.max(1), None)?;
    let mut store = model.params.store.clone();
    check_gradients(&mut store, spec.eps, spec.tolerance, |s| {
        let mut tape = Tape::new();
        let terms = objective.total_loss(&mut tape, s, &batches[0])?;
        Ok((tape, terms.total))
    })
}
