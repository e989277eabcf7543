use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};
use zsattr_core::fixtures::{load_fixture, synth_fixture, SynthSpec};
use zsattr_core::hierarchy::{centroids_from_reference, map_by_similarity, mapping_accuracy, AttributeHierarchy};
use zsattr_core::train::{
    evaluate, gradcheck, load_checkpoint, tiny_config, train, write_synth_run, GradcheckSpec, RunConfig, RunData,
    CHECKPOINT_DIR,
};

#[derive(Debug, Parser)]
#[command(name = "zsattr", version, about = "Zero-shot attribute classification head")]
struct Cli {
    /// Run configuration (config.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CentroidSource {
    /// Member means under the reference hierarchy.
    Reference,
    /// Super-class text embeddings.
    Text,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and write checkpoint/, training_log.jsonl and, with an
    /// evaluation set, report.json and summary.csv.
    Train,
    /// Score the evaluation set with a checkpoint.
    Eval {
        /// Defaults to <out-dir>/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Assign attributes to super-classes by cosine similarity to centroids.
    MapSuperclass {
        /// Reference hierarchy; defaults to the config's hierarchy.
        #[arg(long)]
        hierarchy: Option<PathBuf>,
        /// Fixture directory; defaults to the config's fixture.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "reference")]
        centroids: CentroidSource,
        /// Super-classes left out of the accuracy.
        #[arg(long, default_value = "other")]
        exclude: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients on a tiny problem.
    Gradcheck {
        /// JSON with data sizes and tolerances.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Write a synthetic fixture, annotations and a config pointing at them.
    Synth {
        /// JSON generator settings; omitted fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("--config is required for this command")?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_report_summary(report: &zsattr_core::metrics::ScoreReport) {
    print!("{}", report.summary_csv());
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let data = RunData::load(&cfg)?;
            let out = train(&cfg, &data, &cli.out_dir)?;
            if let Some(last) = out.log.last() {
                println!(
                    "epoch {} L_total {:.6} L_asym {:.6} L_scr {:.6}",
                    last.epoch, last.l_total, last.l_asym, last.l_scr
                );
            }
            println!("checkpoint: {}", out.checkpoint.display());
            if let Some(r) = &out.report {
                print_report_summary(r);
            }
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(cli)?;
            let data = RunData::load(&cfg)?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| cli.out_dir.join(CHECKPOINT_DIR));
            let model = load_checkpoint(&ckpt, &cfg, data.fixture.dims)?;
            let report = evaluate(&cfg, &model, &data)?;
            report.write(&cli.out_dir)?;
            print_report_summary(&report);
        }
        Command::MapSuperclass {
            hierarchy,
            fixture,
            centroids,
            exclude,
        } => {
            let cfg = match &cli.config {
                Some(_) => Some(load_config(cli)?),
                None => None,
            };
            let pick = |flag: &Option<PathBuf>, from_cfg: fn(&RunConfig) -> PathBuf, what: &str| -> Result<PathBuf> {
                match (flag, &cfg) {
                    (Some(p), _) => Ok(p.clone()),
                    (None, Some(c)) => Ok(from_cfg(c)),
                    (None, None) => bail!("pass --{what} or --config"),
                }
            };
            let h_path = pick(hierarchy, |c| c.paths.hierarchy.clone(), "hierarchy")?;
            let f_path = pick(fixture, |c| c.paths.fixture.clone(), "fixture")?;
            let reference = AttributeHierarchy::load(&h_path)?;
            let fx = load_fixture(&f_path)?;
            fx.validate_against(&reference)?;
            let cents = match centroids {
                CentroidSource::Reference => {
                    centroids_from_reference(&fx.attr_text_emb, reference.delta(), reference.n_super_classes())?
                }
                CentroidSource::Text => fx.super_text_emb.clone(),
            };
            let delta = map_by_similarity(&fx.attr_text_emb, &cents)?;
            let names: Vec<&str> = exclude.iter().map(String::as_str).collect();
            let excluded = reference.super_class_indices(&names);
            let accuracy = mapping_accuracy(&delta, reference.delta(), &excluded)?;
            fs::create_dir_all(&cli.out_dir)?;
            reference.with_delta(delta)?.save(&cli.out_dir.join("hierarchy.json"))?;
            let summary = serde_json::json!({ "accuracy": accuracy, "excluded": exclude });
            fs::write(cli.out_dir.join("mapping.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("mapping accuracy {accuracy:.6}");
        }
        Command::Gradcheck { spec } => {
            let mut cfg = match &cli.config {
                Some(_) => load_config(cli)?,
                None => tiny_config(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let spec: GradcheckSpec = match spec {
                Some(p) => read_json(p)?,
                None => GradcheckSpec::default(),
            };
            let report = gradcheck(&cfg, &spec)?;
            fs::create_dir_all(&cli.out_dir)?;
            fs::write(cli.out_dir.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
            for p in &report.params {
                println!("{:<28} rel_err {:.3e}", p.name, p.rel_err);
            }
            println!(
                "max rel err {:.3e} (tolerance {:.0e}): {}",
                report.max_rel_err,
                report.tolerance,
                if report.passed { "PASS" } else { "FAIL" }
            );
            return Ok(report.passed);
        }
        Command::Synth { spec } => {
            let mut s: SynthSpec = match spec {
                Some(p) => read_json(p)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let data = synth_fixture(&s)?;
            let template = match &cli.config {
                Some(_) => load_config(cli)?,
                None => RunConfig {
                    seed: s.seed,
                    ..RunConfig::default()
                },
            };
            write_synth_run(&data, &cli.out_dir, &template)?;
            println!(
                "wrote {} train / {} eval instances to {}",
                data.train.len(),
                data.eval.len(),
                cli.out_dir.display()
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
