// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end experiment runs: sample prompts, decode every layer, score
//! heads and write CSV curves plus a JSON summary.

mod config;
mod output;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, KSpec, SchemeEntry, FIXTURE_PREFIX};
use output::OutputDir;

use crate::error::{Error, Result};
use crate::fixtures::{
    build_induction_model, build_overthinking_model, gen_unnatural_dataset, FixtureSpec,
};
use crate::interventions::{compute_head_mean_stats, HeadId, InterventionSpec};
use crate::lens::{head_lens, layer_batches};
use crate::metrics::{
    calibrated_accuracy, critical_layer, false_label_promoting_score, prefix_matching_score,
    select_top_pm_heads, HeadScoreRecord,
};
use crate::model::{forward, load_model, ModelBundle};
use crate::parallel::{try_par_map, with_workers};
use crate::prompting::{
    load_dataset_jsonl, sample_balanced_prompts, Dataset, LabelingScheme, PromptInstance,
    PromptTemplate, SchemeKind,
};

/// What `run` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunMode {
    #[default]
    Full,
    /// Only `heads.csv`.
    HeadsOnly,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_layers: usize,
    pub k: usize,
    pub n_prompts: usize,
    pub seed: u64,
    pub final_accuracy: BTreeMap<String, f64>,
    pub gap_scheme: Option<String>,
    pub critical_layer: Option<usize>,
    pub head_scheme: String,
    pub top_heads: Vec<HeadId>,
}

/// Loads a manifest directory or builds a named fixture.
pub fn resolve_model(spec: &str) -> Result<ModelBundle> {
    match spec.strip_prefix(FIXTURE_PREFIX) {
        Some("induction") => build_induction_model(&FixtureSpec::default()),
        Some("overthinking") => build_overthinking_model(&FixtureSpec::default()),
        Some(other) => Err(Error::Config(format!("unknown model fixture {other:?}"))),
        None => load_model(spec),
    }
}

/// Loads a JSONL dataset or generates a named fixture dataset.
pub fn resolve_dataset(spec: &str) -> Result<Dataset> {
    match spec.strip_prefix(FIXTURE_PREFIX) {
        Some("unnatural") => gen_unnatural_dataset(&FixtureSpec::default()),
        Some(other) => Err(Error::Config(format!("unknown dataset fixture {other:?}"))),
        None => load_dataset_jsonl(spec),
    }
}

/// Whether a scheme's labels disagree with the true classes.
pub fn is_incorrect(kind: SchemeKind) -> bool {
    !matches!(kind, SchemeKind::Correct | SchemeKind::UnrelatedCorrect)
}

/// Mean PM and FLP score of every head over `prompts`.
pub fn head_scores(
    bundle: &ModelBundle,
    prompts: &[PromptInstance],
    intervention: &InterventionSpec,
) -> Result<Vec<HeadScoreRecord>> {
    if prompts.is_empty() {
        return Err(Error::Argument(
            "head scores need at least one prompt".into(),
        ));
    }
    let cfg = &bundle.config;
    let per_prompt = try_par_map(prompts, |p| -> Result<Vec<(f64, f64)>> {
        let trace = forward(bundle, &p.rendered, intervention)?;
        let permuted = p.label_token_ids[p.permuted_class()];
        let correct = p.label_token_ids[p.query.true_class];
        let mut out = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
        for layer in 0..cfg.n_layers {
            for head in 0..cfg.n_heads {
                let pm = prefix_matching_score(&trace, p, layer, head)?;
                let contrib = head_lens(&trace, bundle, layer, head, p.query_answer_position)?;
                out.push((
                    pm,
                    false_label_promoting_score(&contrib, permuted, correct)?,
                ));
            }
        }
        Ok(out)
    })?;
    let n = prompts.len() as f64;
    let mut records = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_heads {
            let i = layer * cfg.n_heads + head;
            let (pm, flp) = per_prompt
                .iter()
                .fold((0.0, 0.0), |(a, b), s| (a + s[i].0, b + s[i].1));
            records.push(HeadScoreRecord {
                layer,
                head,
                pm_score: pm / n,
                flp_score: flp / n,
            });
        }
    }
    Ok(records)
}

/// Runs an experiment and writes its outputs. On failure every file this run
/// wrote is removed again.
pub fn run(config: &ExperimentConfig, mode: RunMode) -> Result<Summary> {
    let schemes = config.validate().map_err(|e| e.in_stage("config"))?;
    with_workers(config.workers, || {
        let mut out = OutputDir::create(&config.outputs).map_err(|e| e.in_stage("outputs"))?;
        let result = run_inner(config, &schemes, mode, &mut out);
        if result.is_err() {
            out.cleanup();
        }
        result
    })
}

struct Inputs {
    bundle: ModelBundle,
    dataset: Dataset,
    template: PromptTemplate,
    intervention: InterventionSpec,
}

fn load_inputs(config: &ExperimentConfig, schemes: &[LabelingScheme]) -> Result<Inputs> {
    let bundle = resolve_model(&config.model).map_err(|e| e.in_stage("load model"))?;
    let dataset = resolve_dataset(&config.dataset).map_err(|e| e.in_stage("load dataset"))?;
    let c = dataset.n_classes();
    for s in schemes {
        s.validate(c).map_err(|e| e.in_stage("config"))?;
    }
    let template = match &config.template {
        Some(p) => read_json(p, PromptTemplate::from_json).map_err(|e| e.in_stage("config"))?,
        None => PromptTemplate::default(),
    };
    let intervention = match &config.interventions {
        Some(p) => {
            read_json(p, InterventionSpec::from_json).map_err(|e| e.in_stage("interventions"))?
        }
        None => InterventionSpec::none(),
    };
    Ok(Inputs {
        bundle,
        dataset,
        template,
        intervention,
    })
}

fn read_json<T>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

fn sample(
    inputs: &Inputs,
    config: &ExperimentConfig,
    scheme: &LabelingScheme,
    k: usize,
) -> Result<Vec<PromptInstance>> {
    sample_balanced_prompts(
        &inputs.bundle,
        &inputs.dataset,
        config.n_prompts,
        k,
        scheme,
        &inputs.template,
        config.seed,
    )
    .map_err(|e| e.in_stage("sample prompts"))
}

/// Calibrated accuracy at every layer.
fn accuracy_curve(inputs: &Inputs, prompts: &[PromptInstance]) -> Result<Vec<f64>> {
    layer_batches(&inputs.bundle, prompts, &inputs.intervention)?
        .iter()
        .map(calibrated_accuracy)
        .collect()
}

fn run_inner(
    config: &ExperimentConfig,
    schemes: &[LabelingScheme],
    mode: RunMode,
    out: &mut OutputDir,
) -> Result<Summary> {
    let mut inputs = load_inputs(config, schemes)?;
    let k = config.k.main();
    let prompts = schemes
        .iter()
        .map(|s| sample(&inputs, config, s, k))
        .collect::<Result<Vec<_>>>()?;

    if !inputs.intervention.mean_heads.is_empty() {
        let reference: Vec<Vec<usize>> = prompts[0].iter().map(|p| p.rendered.clone()).collect();
        let stats = compute_head_mean_stats(&inputs.bundle, &reference)
            .map_err(|e| e.in_stage("interventions"))?;
        inputs.intervention.mean_stats = Some(stats);
    }
    inputs
        .intervention
        .validate(&inputs.bundle.config)
        .map_err(|e| e.in_stage("interventions"))?;

    let correct_idx = schemes.iter().position(|s| s.kind == SchemeKind::Correct);
    let gap_idx = schemes.iter().position(|s| is_incorrect(s.kind));
    let mut final_accuracy = BTreeMap::new();
    let mut gap_scheme = None;
    let mut critical = None;

    if mode == RunMode::Full {
        let mut curves = Vec::with_capacity(schemes.len());
        for (scheme, ps) in schemes.iter().zip(&prompts) {
            let curve = accuracy_curve(&inputs, ps).map_err(|e| e.in_stage("layerwise"))?;
            out.write_curve(&format!("layerwise_{}.csv", scheme.name()), "layer", &curve)?;
            final_accuracy.insert(scheme.name(), *curve.last().unwrap_or(&0.0));
            curves.push(curve);
        }
        if let (Some(ci), Some(gi)) = (correct_idx, gap_idx) {
            let gap: Vec<f64> = curves[ci]
                .iter()
                .zip(&curves[gi])
                .map(|(a, b)| a - b)
                .collect();
            out.write_curve("gap.csv", "layer", &gap)?;
            gap_scheme = Some(schemes[gi].name());
            critical = critical_layer(&gap).ok();
        }
        if config.k.is_sweep() {
            contextwise(config, schemes, &inputs, correct_idx, out)?;
        }
    }

    let head_idx = schemes
        .iter()
        .position(|s| s.kind.uses_sigma())
        .unwrap_or(0);
    let records = head_scores(&inputs.bundle, &prompts[head_idx], &inputs.intervention)
        .map_err(|e| e.in_stage("heads"))?;
    out.write_heads(&records)?;
    let top_heads = select_top_pm_heads(&records, config.top_n).map_err(|e| e.in_stage("heads"))?;

    let summary = Summary {
        n_layers: inputs.bundle.config.n_layers,
        k,
        n_prompts: config.n_prompts,
        seed: config.seed,
        final_accuracy,
        gap_scheme,
        critical_layer: critical,
        head_scheme: schemes[head_idx].name(),
        top_heads,
    };
    if mode == RunMode::Full {
        out.write(
            "summary.json",
            &format!("{}\n", serde_json::to_string_pretty(&summary)?),
        )?;
    }
    Ok(summary)
}

/// Final-layer value per demonstration count: calibrated accuracy for the
/// correct scheme, the gap to it for every other scheme.
fn contextwise(
    config: &ExperimentConfig,
    schemes: &[LabelingScheme],
    inputs: &Inputs,
    correct_idx: Option<usize>,
    out: &mut OutputDir,
) -> Result<()> {
    let ks = config.k.values();
    let mut finals = vec![Vec::with_capacity(ks.len()); schemes.len()];
    for &k in &ks {
        for (i, scheme) in schemes.iter().enumerate() {
            let ps = sample(inputs, config, scheme, k)?;
            let curve = accuracy_curve(inputs, &ps).map_err(|e| e.in_stage("contextwise"))?;
            finals[i].push(*curve.last().unwrap_or(&0.0));
        }
    }
    for (i, scheme) in schemes.iter().enumerate() {
        let values: Vec<f64> = match correct_idx {
            Some(ci) if ci != i => finals[ci]
                .iter()
                .zip(&finals[i])
                .map(|(a, b)| a - b)
                .collect(),
            _ => finals[i].clone(),
        };
        let rows: Vec<(usize, f64)> = ks.iter().copied().zip(values).collect();
        out.write_pairs(&format!("contextwise_{}.csv", scheme.name()), "pic", &rows)?;
    }
    Ok(())
}
