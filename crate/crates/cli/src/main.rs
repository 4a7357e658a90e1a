// SPDX-License-Identifier: MIT OR Apache-2.0

//! `lenslab` command-line runner.

use std::error::Error as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lenslab_core::experiment::{resolve_model, run, ExperimentConfig, RunMode, Summary};
use lenslab_core::fixtures::{
    build_induction_model, build_overthinking_model, gen_unnatural_dataset, FixtureSpec,
};
use lenslab_core::interventions::{HeadId, InterventionSpec};
use lenslab_core::lens::logit_lens;
use lenslab_core::model::{forward, load_model, save_model};
use lenslab_core::parallel::with_workers;
use lenslab_core::prompting::write_dataset_jsonl;
use lenslab_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lenslab",
    version,
    about = "Layerwise decoding and head ablation for few-shot prompts"
)]
struct Cli {
    /// Worker threads for prompt evaluation.
    #[arg(long, global = true, env = "LENSLAB_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Print the top tokens of every layer's lens for one prompt.
    Lens {
        model: String,
        /// JSON file holding a token list, or `{"tokens": [...]}`.
        prompt: PathBuf,
        #[arg(long, default_value_t = 3)]
        top: usize,
    },
    /// Rerun a config with heads zero-ablated.
    Ablate {
        model: String,
        config: PathBuf,
        /// Comma-separated `layer.head` pairs, e.g. `2.0,1.3`.
        #[arg(long)]
        heads: String,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Write heads.csv only.
    PmScores {
        model: String,
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Generate fixture models and datasets.
    Fixtures {
        #[command(subcommand)]
        action: FixtureAction,
    },
    /// Check a weight directory or manifest.
    Validate { manifest: PathBuf },
}

#[derive(Subcommand)]
enum FixtureAction {
    Gen {
        name: FixtureName,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureName {
    Induction,
    Overthinking,
    UnnaturalData,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match with_workers(cli.workers, || dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = e.source();
            while let Some(s) = src {
                let cause = s.to_string();
                if !msg.contains(&cause) {
                    msg.push_str(&format!("\n  caused by: {cause}"));
                }
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config, flags } => {
            let cfg = load_config(&config, None, &flags)?;
            report(&run(&cfg, RunMode::Full)?, &cfg)
        }
        Command::Ablate {
            model,
            config,
            heads,
            flags,
        } => {
            let mut cfg = load_config(&config, Some(model), &flags)?;
            let mut spec = match &cfg.interventions {
                Some(p) => InterventionSpec::from_json(&read(p)?)?,
                None => InterventionSpec::none(),
            };
            spec.zero_heads.extend(parse_heads(&heads)?);
            fs::create_dir_all(&cfg.outputs).map_err(|e| io_error(&cfg.outputs, e))?;
            let path = cfg.outputs.join("interventions.json");
            fs::write(&path, spec.to_json()?).map_err(|e| io_error(&path, e))?;
            cfg.interventions = Some(path);
            report(&run(&cfg, RunMode::Full)?, &cfg)
        }
        Command::PmScores {
            model,
            config,
            flags,
        } => {
            let cfg = load_config(&config, Some(model), &flags)?;
            run(&cfg, RunMode::HeadsOnly)?;
            println!("wrote {}", cfg.outputs.join("heads.csv").display());
            Ok(())
        }
        Command::Lens { model, prompt, top } => lens(&model, &prompt, top),
        Command::Fixtures {
            action: FixtureAction::Gen { name, out },
        } => gen_fixture(name, &out),
        Command::Validate { manifest } => {
            let b = load_model(&manifest)?;
            let c = &b.config;
            println!(
                "ok: {} layers, {} heads, d_model {}, vocab {}",
                c.n_layers, c.n_heads, c.d_model, c.vocab_size
            );
            Ok(())
        }
    }
}

fn load_config(path: &Path, model: Option<String>, flags: &RunFlags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = &flags.out {
        cfg.outputs = o.clone();
    }
    Ok(cfg)
}

fn report(summary: &Summary, cfg: &ExperimentConfig) -> Result<()> {
    for (scheme, acc) in &summary.final_accuracy {
        println!("{scheme}: final accuracy {acc:.4}");
    }
    match summary.critical_layer {
        Some(l) => println!("critical layer: {l}"),
        None => println!("critical layer: none"),
    }
    println!("top PM heads: {:?}", summary.top_heads);
    println!("outputs in {}", cfg.outputs.display());
    Ok(())
}

fn parse_heads(spec: &str) -> Result<Vec<HeadId>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let bad = || Error::Argument(format!("bad head {item:?}, expected layer.head"));
            let (l, h) = item.trim().split_once(['.', ':']).ok_or_else(bad)?;
            Ok((l.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
        })
        .collect()
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum PromptFile {
    Tokens(Vec<String>),
    Object { tokens: Vec<String> },
}

fn lens(model: &str, prompt: &Path, top: usize) -> Result<()> {
    let bundle = resolve_model(model)?;
    let tokens = match serde_json::from_str::<PromptFile>(&read(prompt)?)? {
        PromptFile::Tokens(t) | PromptFile::Object { tokens: t } => t,
    };
    let ids = bundle.tokenize(&tokens)?;
    let trace = forward(&bundle, &ids, &InterventionSpec::none())?;
    let pos = ids.len() - 1;
    for layer in 0..=trace.n_layers() {
        let r = logit_lens(&trace, &bundle, layer, pos)?;
        let mut order: Vec<usize> = (0..r.distribution.len()).collect();
        order.sort_by(|&a, &b| {
            r.distribution[b]
                .total_cmp(&r.distribution[a])
                .then(a.cmp(&b))
        });
        let shown: Vec<String> = order
            .iter()
            .take(top)
            .map(|&t| format!("{} ({:.4})", bundle.vocab[t], r.distribution[t]))
            .collect();
        println!("layer {layer}: {}", shown.join(", "));
    }
    Ok(())
}

fn gen_fixture(name: FixtureName, out: &Path) -> Result<()> {
    let spec = FixtureSpec::default();
    match name {
        FixtureName::Induction => save_model(&build_induction_model(&spec)?, out)?,
        FixtureName::Overthinking => save_model(&build_overthinking_model(&spec)?, out)?,
        FixtureName::UnnaturalData => {
            fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
            write_dataset_jsonl(&gen_unnatural_dataset(&spec)?, out.join("unnatural.jsonl"))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_specs() {
        assert_eq!(parse_heads("2.0,1:3").unwrap(), vec![(2, 0), (1, 3)]);
        assert!(parse_heads("2").is_err());
        assert!(parse_heads("a.b").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
