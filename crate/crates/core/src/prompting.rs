// SPDX-License-Identifier: MIT OR Apache-2.0

//! Datasets, labeling schemes, demonstration sampling and prompt rendering.
//!
//! Prompts are built from token strings, never free text, so the token range
//! of every demonstration label is known exactly.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;

pub const INPUT_SLOT: &str = "{input}";
pub const LABEL_SLOT: &str = "{label}";

/// One labeled input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<String>,
    pub class_id: usize,
}

/// A classification dataset over token-string inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub classes: Vec<String>,
    /// Label token strings per class; defaults to the class name as one token.
    pub label_tokens: Vec<Vec<String>>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        classes: Vec<String>,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let label_tokens = classes.iter().map(|c| vec![c.clone()]).collect();
        Self::with_labels(name, classes, label_tokens, examples)
    }

    pub fn with_labels(
        name: impl Into<String>,
        classes: Vec<String>,
        label_tokens: Vec<Vec<String>>,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            classes,
            label_tokens,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        if c == 0 {
            return Err(Error::Dataset(format!(
                "dataset {:?} has no classes",
                self.name
            )));
        }
        if self.label_tokens.len() != c || self.label_tokens.iter().any(Vec::is_empty) {
            return Err(Error::Dataset("every class needs a non-empty label".into()));
        }
        let mut counts = vec![0usize; c];
        for ex in &self.examples {
            if ex.class_id >= c {
                return Err(Error::Dataset(format!(
                    "class id {} out of range for {c} classes",
                    ex.class_id
                )));
            }
            if ex.input.is_empty() {
                return Err(Error::Dataset("example with empty input".into()));
            }
            counts[ex.class_id] += 1;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Dataset(format!(
                "class {:?} has no examples",
                self.classes[empty]
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_classes()];
        for (i, ex) in self.examples.iter().enumerate() {
            members[ex.class_id].push(i);
        }
        members
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    input: Vec<String>,
    class: String,
}

/// Reads a dataset with one `{"input": [...], "class": "..."}` object per
/// line. Classes are ordered by first appearance; blank lines are skipped.
pub fn load_dataset_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut classes: Vec<String> = Vec::new();
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let class_id = match classes.iter().position(|c| *c == rec.class) {
            Some(i) => i,
            None => {
                classes.push(rec.class);
                classes.len() - 1
            }
        };
        examples.push(Example {
            input: rec.input,
            class_id,
        });
    }
    let name = path.file_stem().map_or_else(
        || "dataset".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    Dataset::new(name, classes, examples)
}

/// Writes `dataset` in the JSONL form read by [`load_dataset_jsonl`].
pub fn write_dataset_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for ex in &dataset.examples {
        let line = serde_json::json!({"input": ex.input, "class": dataset.classes[ex.class_id]});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// How demonstration labels are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Correct,
    Permuted,
    Random,
    FractionPermuted,
    UnrelatedCorrect,
    UnrelatedPermuted,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 6] = [
        Self::Correct,
        Self::Permuted,
        Self::Random,
        Self::FractionPermuted,
        Self::UnrelatedCorrect,
        Self::UnrelatedPermuted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Correct => "correct",
            Self::Permuted => "permuted",
            Self::Random => "random",
            Self::FractionPermuted => "fraction_permuted",
            Self::UnrelatedCorrect => "unrelated_correct",
            Self::UnrelatedPermuted => "unrelated_permuted",
        }
    }

    /// Kinds that apply a cyclic permutation to some labels.
    pub fn uses_sigma(self) -> bool {
        matches!(
            self,
            Self::Permuted | Self::FractionPermuted | Self::UnrelatedPermuted
        )
    }

    pub fn is_unrelated(self) -> bool {
        matches!(self, Self::UnrelatedCorrect | Self::UnrelatedPermuted)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme kind {s:?}")))
    }
}

/// A labeling scheme: kind, permutation, corruption fraction and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingScheme {
    pub kind: SchemeKind,
    /// Cyclic permutation over class ids; `None` means the +1 rotation.
    #[serde(default)]
    pub sigma: Option<Vec<usize>>,
    /// Fraction of demonstrations to corrupt (`fraction_permuted` only).
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LabelingScheme {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            sigma: None,
            rho: 0.0,
            seed: 0,
        }
    }

    pub fn fraction_permuted(rho: f64) -> Self {
        Self {
            rho,
            ..Self::new(SchemeKind::FractionPermuted)
        }
    }

    /// Short identifier used in output file names.
    pub fn name(&self) -> String {
        match self.kind {
            SchemeKind::FractionPermuted => format!("fraction_permuted_{}", self.rho),
            k => k.as_str().to_string(),
        }
    }

    /// The permutation to use over `c` classes (identity for kinds without one).
    pub fn sigma_for(&self, c: usize) -> Result<Vec<usize>> {
        if !self.kind.uses_sigma() {
            return Ok((0..c).collect());
        }
        let sigma = match &self.sigma {
            Some(s) => s.clone(),
            None => (0..c).map(|i| (i + 1) % c).collect(),
        };
        validate_single_cycle(&sigma, c)?;
        Ok(sigma)
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if self.kind == SchemeKind::FractionPermuted && !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0, 1], got {}",
                self.rho
            )));
        }
        self.sigma_for(c).map(|_| ())
    }
}

/// Checks that `sigma` is one cycle through all `c` classes.
pub fn validate_single_cycle(sigma: &[usize], c: usize) -> Result<()> {
    if sigma.len() != c {
        return Err(Error::Config(format!(
            "permutation has {} entries for {c} classes",
            sigma.len()
        )));
    }
    let mut seen = vec![false; c];
    for &s in sigma {
        if s >= c || std::mem::replace(&mut seen[s], true) {
            return Err(Error::Config(format!("{sigma:?} is not a permutation")));
        }
    }
    if c >= 2 {
        let mut at = 0;
        for step in 1..=c {
            at = sigma[at];
            if at == 0 && step < c {
                return Err(Error::Config(format!(
                    "{sigma:?} is not a single {c}-cycle"
                )));
            }
        }
    }
    Ok(())
}

/// Token patterns for the instruction, each demonstration and the query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(default)]
    pub prefix: Vec<String>,
    pub demo_pattern: Vec<String>,
    pub query_pattern: Vec<String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|t| t.to_string()).collect();
        Self {
            prefix: Vec::new(),
            demo_pattern: s(&[INPUT_SLOT, ":", LABEL_SLOT, "."]),
            query_pattern: s(&[INPUT_SLOT, ":"]),
        }
    }
}

impl PromptTemplate {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.query_pattern.iter().any(|s| s == LABEL_SLOT) {
            return Err(Error::Config("query_pattern cannot contain {label}".into()));
        }
        Ok(t)
    }
}

/// One demonstration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub input: Vec<String>,
    pub assigned_class: usize,
    pub true_class: usize,
}

/// The query input and its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub input: Vec<String>,
    pub true_class: usize,
}

/// Token ids plus annotations produced by [`render`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub ids: Vec<usize>,
    pub label_spans: Vec<Range<usize>>,
    pub query_answer_position: usize,
}

/// A fully sampled and rendered few-shot prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInstance {
    pub instruction: Vec<String>,
    pub demos: Vec<Demo>,
    pub query: Query,
    pub scheme: SchemeKind,
    /// Permutation in effect (identity for kinds without one).
    pub sigma: Vec<usize>,
    /// Label token strings per class as rendered in this prompt.
    pub labels: Vec<Vec<String>>,
    /// Id of each class's first label token; used for classification.
    pub label_token_ids: Vec<usize>,
    pub rendered: Vec<usize>,
    pub label_spans: Vec<Range<usize>>,
    pub query_answer_position: usize,
}

impl PromptInstance {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    /// `sigma(class(query))`.
    pub fn permuted_class(&self) -> usize {
        self.sigma[self.query.true_class]
    }
}

/// Expands `template` around the demonstrations and query.
pub fn render(
    instruction: &[String],
    demos: &[Demo],
    query: &Query,
    labels: &[Vec<String>],
    template: &PromptTemplate,
    bundle: &ModelBundle,
) -> Result<Rendered> {
    let mut ids = bundle.tokenize(instruction)?;
    let mut label_spans = Vec::with_capacity(demos.len());
    for demo in demos {
        let label = labels.get(demo.assigned_class).ok_or_else(|| {
            Error::Argument(format!("no label for class {}", demo.assigned_class))
        })?;
        let mut span = None;
        for slot in &template.demo_pattern {
            match slot.as_str() {
                INPUT_SLOT => ids.extend(bundle.tokenize(&demo.input)?),
                LABEL_SLOT => {
                    let start = ids.len();
                    ids.extend(bundle.tokenize(label)?);
                    span.get_or_insert(start..ids.len());
                }
                tok => ids.push(bundle.token_id(tok)?),
            }
        }
        label_spans
            .push(span.ok_or_else(|| Error::Config("demo_pattern has no {label} slot".into()))?);
    }
    for slot in &template.query_pattern {
        match slot.as_str() {
            INPUT_SLOT => ids.extend(bundle.tokenize(&query.input)?),
            LABEL_SLOT => return Err(Error::Config("query_pattern cannot contain {label}".into())),
            tok => ids.push(bundle.token_id(tok)?),
        }
    }
    if ids.is_empty() {
        return Err(Error::Argument("rendered prompt is empty".into()));
    }
    let query_answer_position = ids.len() - 1;
    Ok(Rendered {
        ids,
        label_spans,
        query_answer_position,
    })
}

/// Samples one prompt whose query is drawn uniformly from the dataset.
pub fn sample_prompt(
    bundle: &ModelBundle,
    dataset: &Dataset,
    k: usize,
    scheme: &LabelingScheme,
    template: &PromptTemplate,
    seed: u64,
) -> Result<PromptInstance> {
    let mut rng = scheme_rng(seed, scheme);
    let query = rng.gen_range(0..dataset.examples.len());
    build_prompt(bundle, dataset, k, scheme, template, query, &mut rng)
}

/// Samples `n` prompts whose query classes cycle through the classes in
/// order, so the batch is balanced; prompt `j` uses a seed derived from
/// `(seed, j)`.
///
/// Prompts sampled with the same `(seed, j)` under different schemes share
/// their query and demonstration inputs.
pub fn sample_balanced_prompts(
    bundle: &ModelBundle,
    dataset: &Dataset,
    n: usize,
    k: usize,
    scheme: &LabelingScheme,
    template: &PromptTemplate,
    seed: u64,
) -> Result<Vec<PromptInstance>> {
    let members = dataset.class_members();
    let c = dataset.n_classes();
    (0..n)
        .map(|j| {
            let mut rng = scheme_rng(derive_seed(seed, j as u64), scheme);
            let pool = &members[j % c];
            let query = pool[rng.gen_range(0..pool.len())];
            build_prompt(bundle, dataset, k, scheme, template, query, &mut rng)
        })
        .collect()
}

fn scheme_rng(seed: u64, scheme: &LabelingScheme) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scheme.seed);
    rng
}

/// SplitMix64 mixing of a base seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_prompt(
    bundle: &ModelBundle,
    dataset: &Dataset,
    k: usize,
    scheme: &LabelingScheme,
    template: &PromptTemplate,
    query_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PromptInstance> {
    let c = dataset.n_classes();
    scheme.validate(c)?;
    let sigma = scheme.sigma_for(c)?;
    let query_ex = &dataset.examples[query_index];
    let members = dataset.class_members();

    // Same draw order for every scheme so paired prompts share inputs.
    let mut demos = Vec::with_capacity(k);
    for _ in 0..k {
        let class = rng.gen_range(0..c);
        let pool: Vec<usize> = members[class]
            .iter()
            .copied()
            .filter(|&i| dataset.examples[i].input != query_ex.input)
            .collect();
        if pool.is_empty() {
            return Err(Error::Dataset(format!(
                "class {:?} has no input other than the query",
                dataset.classes[class]
            )));
        }
        let pick = pool[rng.gen_range(0..pool.len())];
        demos.push(Demo {
            input: dataset.examples[pick].input.clone(),
            assigned_class: class,
            true_class: class,
        });
    }

    match scheme.kind {
        SchemeKind::Correct | SchemeKind::UnrelatedCorrect => {}
        SchemeKind::Permuted | SchemeKind::UnrelatedPermuted => {
            for d in &mut demos {
                d.assigned_class = sigma[d.true_class];
            }
        }
        SchemeKind::Random => {
            for d in &mut demos {
                d.assigned_class = rng.gen_range(0..c);
            }
        }
        SchemeKind::FractionPermuted => {
            let m = corrupted_count(scheme.rho, k);
            for i in sample(rng, k, m).into_iter() {
                demos[i].assigned_class = sigma[demos[i].true_class];
            }
        }
    }

    let labels = if scheme.kind.is_unrelated() {
        abstract_labels(c)?
    } else {
        dataset.label_tokens.clone()
    };
    let query = Query {
        input: query_ex.input.clone(),
        true_class: query_ex.class_id,
    };
    let rendered = render(&template.prefix, &demos, &query, &labels, template, bundle)?;
    if rendered.ids.len() > bundle.config.max_seq {
        return Err(Error::Capacity(format!(
            "k = {k} renders {} tokens, max_seq is {}",
            rendered.ids.len(),
            bundle.config.max_seq
        )));
    }
    let label_token_ids = labels
        .iter()
        .map(|l| bundle.token_id(&l[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptInstance {
        instruction: template.prefix.clone(),
        demos,
        query,
        scheme: scheme.kind,
        sigma,
        labels,
        label_token_ids,
        rendered: rendered.ids,
        label_spans: rendered.label_spans,
        query_answer_position: rendered.query_answer_position,
    })
}

/// `round_half_even(rho * k)`, clamped to `k`.
pub fn corrupted_count(rho: f64, k: usize) -> usize {
    ((rho * k as f64).round_ties_even() as usize).min(k)
}

/// Labels `"A"`, `"B"`, ... in class order.
pub fn abstract_labels(c: usize) -> Result<Vec<Vec<String>>> {
    if c > 26 {
        return Err(Error::Dataset(format!(
            "{c} classes exceed the 26 abstract labels"
        )));
    }
    Ok((0..c)
        .map(|i| vec![char::from(b'A' + i as u8).to_string()])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{build_induction_model, gen_unnatural_dataset, FixtureSpec};

    fn setup() -> (ModelBundle, Dataset) {
        let spec = FixtureSpec::default();
        (
            build_induction_model(&spec).unwrap(),
            gen_unnatural_dataset(&spec).unwrap(),
        )
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_shot_renders_query_stem_only() {
        let (b, ds) = setup();
        let p = sample_prompt(
            &b,
            &ds,
            0,
            &LabelingScheme::new(SchemeKind::Correct),
            &PromptTemplate::default(),
            1,
        )
        .unwrap();
        assert!(p.demos.is_empty());
        let mut expect = p.query.input.clone();
        expect.push(":".into());
        assert_eq!(b.detokenize(&p.rendered).unwrap(), expect);
        assert_eq!(p.query_answer_position, p.rendered.len() - 1);
    }

    #[test]
    fn permuted_uses_sigma_label() {
        let (b, ds) = setup();
        let scheme = LabelingScheme {
            sigma: Some(vec![1, 2, 0]),
            ..LabelingScheme::new(SchemeKind::Permuted)
        };
        let p = sample_prompt(&b, &ds, 10, &scheme, &PromptTemplate::default(), 5).unwrap();
        for (d, span) in p.demos.iter().zip(&p.label_spans) {
            assert_eq!(d.assigned_class, (d.true_class + 1) % 3);
            let shown = b.detokenize(&p.rendered[span.clone()]).unwrap();
            assert_eq!(shown, ds.label_tokens[d.assigned_class]);
        }
    }

    #[test]
    fn half_of_forty_are_corrupted() {
        let (b, ds) = setup();
        let mut big = b.clone();
        big.config.max_seq = 200;
        big.positional_embedding = crate::numerics::Matrix::zeros(200, big.config.d_model);
        let p = sample_prompt(
            &big,
            &ds,
            40,
            &LabelingScheme::fraction_permuted(0.5),
            &PromptTemplate::default(),
            9,
        )
        .unwrap();
        let wrong = p
            .demos
            .iter()
            .filter(|d| d.assigned_class != d.true_class)
            .count();
        assert_eq!(wrong, 20);
        assert_eq!(corrupted_count(0.5, 5), 2);
        assert_eq!(corrupted_count(0.5, 7), 4);
    }

    #[test]
    fn render_examples() {
        let (b, _) = setup();
        let demo = Demo {
            input: strs(&["hockey"]),
            assigned_class: 1,
            true_class: 1,
        };
        let query = Query {
            input: strs(&["tiger"]),
            true_class: 2,
        };
        let labels = vec![
            strs(&["plant/vegetable"]),
            strs(&["sport"]),
            strs(&["animal"]),
        ];
        let r = render(
            &[],
            std::slice::from_ref(&demo),
            &query,
            &labels,
            &PromptTemplate::default(),
            &b,
        )
        .unwrap();
        assert_eq!(
            b.detokenize(&r.ids[..4]).unwrap(),
            strs(&["hockey", ":", "sport", "."])
        );
        assert_eq!(r.label_spans, vec![2..3]);
        assert_eq!(r.query_answer_position, 5);

        let veg = Demo {
            assigned_class: 0,
            true_class: 0,
            input: strs(&["onions"]),
        };
        let r = render(&[], &[veg], &query, &labels, &PromptTemplate::default(), &b).unwrap();
        assert_eq!(r.label_spans[0].len(), 1);

        let bad = vec![strs(&["nonsense"]), strs(&["sport"]), strs(&["animal"])];
        let bad_demo = Demo {
            assigned_class: 0,
            ..demo
        };
        let err = render(
            &[],
            &[bad_demo],
            &query,
            &bad,
            &PromptTemplate::default(),
            &b,
        )
        .unwrap_err();
        assert!(err.to_string().contains("nonsense"));
    }

    #[test]
    fn capacity_error_when_prompt_too_long() {
        let (b, ds) = setup();
        let err = sample_prompt(
            &b,
            &ds,
            100,
            &LabelingScheme::new(SchemeKind::Correct),
            &PromptTemplate::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn unrelated_labels_are_letters() {
        let (b, ds) = setup();
        let p = sample_prompt(
            &b,
            &ds,
            6,
            &LabelingScheme::new(SchemeKind::UnrelatedPermuted),
            &PromptTemplate::default(),
            2,
        )
        .unwrap();
        for (d, span) in p.demos.iter().zip(&p.label_spans) {
            let shown = b.detokenize(&p.rendered[span.clone()]).unwrap();
            let letter = char::from(b'A' + d.assigned_class as u8).to_string();
            assert_eq!(shown, vec![letter]);
            assert_ne!(d.assigned_class, d.true_class);
        }
    }

    #[test]
    fn sigma_validation() {
        assert!(validate_single_cycle(&[1, 2, 0], 3).is_ok());
        assert!(validate_single_cycle(&[2, 0, 1], 3).is_ok());
        assert!(validate_single_cycle(&[1, 0, 2], 3).is_err());
        assert!(validate_single_cycle(&[0, 1, 2], 3).is_err());
        assert!(validate_single_cycle(&[1, 1, 0], 3).is_err());
        assert!("bogus".parse::<SchemeKind>().is_err());
        assert_eq!(
            "fraction_permuted".parse::<SchemeKind>().unwrap(),
            SchemeKind::FractionPermuted
        );
    }

    #[test]
    fn jsonl_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"input\":[\"a\"],\"class\":\"x\"}\n{\"input\":[\"b\"],\"class\":\"y\"}\n",
        )
        .unwrap();
        let ds = load_dataset_jsonl(&p).unwrap();
        assert_eq!(ds.classes, strs(&["x", "y"]));

        fs::write(
            &p,
            "{\"input\":[\"a\"],\"class\":\"x\"}\n{\"input\":[\"b\"]}\n",
        )
        .unwrap();
        match load_dataset_jsonl(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        fs::write(&p, "{\"input\":[\"a\"],\"class\":\"x\",\"extra\":1}\n").unwrap();
        assert!(matches!(
            load_dataset_jsonl(&p),
            Err(Error::Parse { line: 1, .. })
        ));

        fs::write(&p, "").unwrap();
        assert!(matches!(load_dataset_jsonl(&p), Err(Error::Dataset(_))));
    }

    #[test]
    fn balanced_batch_cycles_query_classes() {
        let (b, ds) = setup();
        let ps = sample_balanced_prompts(
            &b,
            &ds,
            9,
            4,
            &LabelingScheme::new(SchemeKind::Correct),
            &PromptTemplate::default(),
            3,
        )
        .unwrap();
        let classes: Vec<usize> = ps.iter().map(|p| p.query.true_class).collect();
        assert_eq!(classes, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        for p in &ps {
            assert!(p.demos.iter().all(|d| d.input != p.query.input));
        }
    }
}
