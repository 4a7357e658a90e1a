// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic hand-wired models and toy datasets.
//!
//! The wired models use a residual stream split into feature groups, each
//! holding a *centered* one-hot code (`e_i - 1/n`), so every residual row has
//! zero mean and layer norm only rescales it:
//!
//! | group   | size          | written by                               |
//! |---------|---------------|------------------------------------------|
//! | `tok`   | vocab         | token embedding                          |
//! | `pos`   | max_seq       | positional embedding                     |
//! | `cls`   | classes + 1   | previous-item heads (last slot = none)   |
//! | `out`   | vocab         | zero-shot MLP and the induction head     |
//!
//! Layer-norm gains are set to the expected row scale of each stage so the
//! normalized rows reproduce the raw feature codes, and the unembedding reads
//! only the `out` group.
//!
//! Block 0 of both wired models has two identical *previous-item* heads. From
//! position `i` each attends to the nearest item token at `i-1` or `i-2`
//! (falling back to itself) and writes half of that item's class code into
//! `cls`; non-item tokens write the `none` slot. After block 0, the query's
//! final `:` and every demonstration label carry the class of the item just
//! before them.
//!
//! The induction head scores keys by `2A * [same class] + A * [is label]`
//! and copies the attended token into `out`, so from the query position it
//! attends to labels that followed same-class items and promotes them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::HeadId;
use crate::model::{BlockWeights, LayerNormParams, ModelBundle, ModelConfig};
use crate::numerics::{Matrix, LN_EPS};
use crate::prompting::{abstract_labels, Dataset, Example};

/// Attention logit margin used by every wired head.
const ATTN_MARGIN: f32 = 20.0;
/// Heads per block in the wired models.
const WIRED_HEADS: usize = 4;
/// Largest residual width a wired model may need.
pub const MAX_FIXTURE_D_MODEL: usize = 2048;
/// Residual magnitude of the zero-shot write relative to the copy write.
const ZERO_SHOT_SHARE: f32 = 0.5;
/// MLP pre-activation scale of the zero-shot pathway.
const ZERO_SHOT_GATE: f32 = 4.0;

/// Head that copies labels in [`build_induction_model`].
pub const INDUCTION_MODEL_HEAD: HeadId = (1, 0);
/// False-induction head in [`build_overthinking_model`].
pub const OVERTHINKING_MODEL_HEAD: HeadId = (2, 0);
/// Residual index at which the overthinking model's predictions diverge.
pub const OVERTHINKING_DIVERGENCE_LAYER: usize = 3;
/// Last residual index that only sees the zero-shot pathway.
pub const OVERTHINKING_ZERO_SHOT_LAYER: usize = 1;

/// Description of a toy classification task and its wiring strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub classes: Vec<String>,
    /// `items_per_class[c]` are the item tokens of class `c`.
    pub items_per_class: Vec<Vec<String>>,
    /// One label token per class.
    pub label_tokens: Vec<String>,
    pub seed: u64,
    /// Logit scale of the copy pathway.
    pub circuit_strength: f32,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
}

fn default_max_seq() -> usize {
    48
}

impl Default for FixtureSpec {
    /// Three classes named after the Unnatural task, four items each.
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        Self {
            classes: s(&["plant/vegetable", "sport", "animal"]),
            items_per_class: vec![
                s(&["onions", "carrots", "potatoes", "lettuce"]),
                s(&["hockey", "tennis", "soccer", "golf"]),
                s(&["horse", "tiger", "rabbit", "eagle"]),
            ],
            label_tokens: s(&["plant/vegetable", "sport", "animal"]),
            seed: 0,
            circuit_strength: 20.0,
            max_seq: default_max_seq(),
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        if c < 2 {
            return Err(Error::Dataset(format!("need at least 2 classes, got {c}")));
        }
        if self.items_per_class.len() != c || self.label_tokens.len() != c {
            return Err(Error::Dataset(
                "items_per_class and label_tokens need one entry per class".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for (class, items) in self.classes.iter().zip(&self.items_per_class) {
            if items.is_empty() {
                return Err(Error::Dataset(format!("class {class:?} has no items")));
            }
            for it in items {
                if !seen.insert(it.as_str()) {
                    return Err(Error::Dataset(format!(
                        "item {it:?} appears more than once"
                    )));
                }
            }
        }
        for l in &self.label_tokens {
            if !seen.insert(l.as_str()) {
                return Err(Error::Dataset(format!(
                    "label {l:?} repeats or collides with an item"
                )));
            }
        }
        if !self.circuit_strength.is_finite() || self.circuit_strength < 0.0 {
            return Err(Error::Dataset(
                "circuit_strength must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Fixture vocabulary: `:`, `.`, labels, abstract labels, then items.
    pub fn vocab(&self) -> Result<Vec<String>> {
        self.validate()?;
        let mut vocab = vec![":".to_string(), ".".to_string()];
        vocab.extend(self.label_tokens.iter().cloned());
        for l in abstract_labels(self.n_classes())? {
            vocab.extend(l);
        }
        for items in &self.items_per_class {
            vocab.extend(items.iter().cloned());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = vocab.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::Dataset(format!(
                "token {dup:?} collides with a reserved token"
            )));
        }
        Ok(vocab)
    }
}

/// Items paired with their classes, shuffled by `spec.seed`.
pub fn gen_unnatural_dataset(spec: &FixtureSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut examples: Vec<Example> = spec
        .items_per_class
        .iter()
        .enumerate()
        .flat_map(|(c, items)| {
            items.iter().map(move |it| Example {
                input: vec![it.clone()],
                class_id: c,
            })
        })
        .collect();
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Dataset::with_labels(
        "unnatural",
        spec.classes.clone(),
        spec.label_tokens.iter().map(|l| vec![l.clone()]).collect(),
        examples,
    )
}

/// Offsets of the feature groups in a wired model's residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureLayout {
    pub vocab: usize,
    pub max_seq: usize,
    pub classes: usize,
    pub tok: usize,
    pub pos: usize,
    pub cls: usize,
    pub out: usize,
    pub d_model: usize,
    pub d_head: usize,
}

impl FixtureLayout {
    fn new(vocab: usize, max_seq: usize, classes: usize) -> Result<Self> {
        let tok = 0;
        let pos = tok + vocab;
        let cls = pos + max_seq;
        let out = cls + classes + 1;
        let used = out + vocab;
        // positional keys need max_seq + 2 slots plus one constant slot
        let d_head = (max_seq + 3)
            .max(vocab)
            .max(classes + 2)
            .max(used.div_ceil(WIRED_HEADS));
        let d_model = d_head * WIRED_HEADS;
        if d_model > MAX_FIXTURE_D_MODEL {
            return Err(Error::Capacity(format!(
                "fixture needs d_model = {d_model}, budget is {MAX_FIXTURE_D_MODEL}"
            )));
        }
        Ok(Self {
            vocab,
            max_seq,
            classes,
            tok,
            pos,
            cls,
            out,
            d_model,
            d_head,
        })
    }

    pub fn none_slot(&self) -> usize {
        self.cls + self.classes
    }

    fn tok_sumsq(&self) -> f32 {
        1.0 - 1.0 / self.vocab as f32
    }

    fn pos_sumsq(&self) -> f32 {
        1.0 - 1.0 / self.max_seq as f32
    }

    fn cls_sumsq(&self) -> f32 {
        1.0 - 1.0 / (self.classes + 1) as f32
    }

    /// Layer-norm gain that maps a row with squared norm `sumsq` back to
    /// its raw feature code.
    fn gain_for(&self, sumsq: f32) -> f32 {
        (sumsq / self.d_model as f32 + LN_EPS).sqrt()
    }
}

/// Token ids and roles derived from a [`FixtureSpec`].
struct Wiring {
    layout: FixtureLayout,
    vocab: Vec<String>,
    /// Class of each token id, if it is an item.
    item_class: Vec<Option<usize>>,
    is_label: Vec<bool>,
    /// Token id of each class's label.
    label_id: Vec<usize>,
}

impl Wiring {
    fn new(spec: &FixtureSpec) -> Result<Self> {
        let vocab = spec.vocab()?;
        let c = spec.n_classes();
        let layout = FixtureLayout::new(vocab.len(), spec.max_seq, c)?;
        let id = |t: &str| vocab.iter().position(|v| v == t).expect("token in vocab");
        let mut item_class = vec![None; vocab.len()];
        for (class, items) in spec.items_per_class.iter().enumerate() {
            for it in items {
                item_class[id(it)] = Some(class);
            }
        }
        let mut is_label = vec![false; vocab.len()];
        let label_id: Vec<usize> = spec.label_tokens.iter().map(|l| id(l)).collect();
        for &l in &label_id {
            is_label[l] = true;
        }
        for l in abstract_labels(c)? {
            is_label[id(&l[0])] = true;
        }
        Ok(Self {
            layout,
            vocab,
            item_class,
            is_label,
            label_id,
        })
    }

    fn config(&self, n_layers: usize, d_mlp: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            n_heads: WIRED_HEADS,
            d_model: self.layout.d_model,
            d_head: self.layout.d_head,
            d_mlp,
            vocab_size: self.vocab.len(),
            max_seq: self.layout.max_seq,
            ln_eps: LN_EPS,
        }
    }

    fn embeddings(&self) -> (Matrix, Matrix) {
        let l = &self.layout;
        let mut w_e = Matrix::zeros(l.vocab, l.d_model);
        for t in 0..l.vocab {
            write_centered(w_e.row_mut(t), l.tok, l.vocab, t, 1.0);
        }
        let mut w_pos = Matrix::zeros(l.max_seq, l.d_model);
        for p in 0..l.max_seq {
            write_centered(w_pos.row_mut(p), l.pos, l.max_seq, p, 1.0);
        }
        (w_e, w_pos)
    }

    fn ln(&self, sumsq: f32) -> LayerNormParams {
        LayerNormParams {
            gain: vec![self.layout.gain_for(sumsq); self.layout.d_model],
            bias: vec![0.0; self.layout.d_model],
        }
    }

    /// Turns `block` into the previous-item block: heads 0 and 1 each write
    /// half of the class code of the nearest preceding item.
    fn wire_previous_item_heads(&self, block: &mut BlockWeights) {
        let l = &self.layout;
        let dh = l.d_head as f32;
        let s = l.max_seq;
        // window (i-1, i-2) and self score 2*margin, item tokens add margin
        let w_pos = (2.0 * ATTN_MARGIN * dh.sqrt()).sqrt();
        let w_item = ATTN_MARGIN * dh.sqrt();
        let n_items = self.item_class.iter().filter(|c| c.is_some()).count() as f32;
        let none = l.classes;
        for h in 0..2 {
            let hw = &mut block.heads[h];
            for p in 0..s {
                hw.w_q.set(l.pos + p, p, w_pos);
                hw.b_q[p] = w_pos / s as f32;
                for shift in 0..3 {
                    hw.w_k.set(l.pos + p, p + shift, w_pos);
                }
            }
            hw.b_q[s + 2] = 1.0;
            for (t, class) in self.item_class.iter().enumerate() {
                if class.is_some() {
                    hw.w_k.set(l.tok + t, s + 2, w_item);
                }
                hw.w_v.set(l.tok + t, class.unwrap_or(none), 1.0);
            }
            hw.b_k[s + 2] = w_item * n_items / l.vocab as f32;
            for t in 0..l.vocab {
                let slot = self.item_class[t].unwrap_or(none);
                hw.b_v[slot] += 1.0 / l.vocab as f32;
            }
            for slot in 0..=l.classes {
                let row = h * l.d_head + slot;
                write_centered(block.w_o.row_mut(row), l.cls, l.classes + 1, slot, 0.5);
            }
        }
    }

    /// Wires head 0 of `block` as the label-copying induction head.
    fn wire_induction_head(&self, block: &mut BlockWeights) {
        let l = &self.layout;
        let dh = l.d_head as f32;
        let g = (l.classes + 1) as f32;
        let c = l.classes;
        let w_cls = (2.0 * ATTN_MARGIN * dh.sqrt()).sqrt();
        let w_label = ATTN_MARGIN * dh.sqrt();
        let n_labels = self.is_label.iter().filter(|&&b| b).count() as f32;
        let hw = &mut block.heads[0];
        for class in 0..c {
            hw.w_q.set(l.cls + class, class, w_cls);
            hw.b_q[class] = w_cls / g;
            hw.w_k.set(l.cls + class, class, w_cls);
        }
        hw.b_q[c] = 1.0;
        for (t, &lab) in self.is_label.iter().enumerate() {
            if lab {
                hw.w_k.set(l.tok + t, c, w_label);
            }
        }
        hw.b_k[c] = w_label * n_labels / l.vocab as f32;
        for t in 0..l.vocab {
            hw.w_v.set(l.tok + t, t, 1.0);
            hw.b_v[t] = 1.0 / l.vocab as f32;
            write_centered(block.w_o.row_mut(t), l.out, l.vocab, t, 1.0);
        }
    }

    /// MLP that maps the class code to the class's true label in `out`.
    fn wire_zero_shot_mlp(&self, block: &mut BlockWeights) {
        let l = &self.layout;
        let g = (l.classes + 1) as f32;
        let gate = crate::numerics::gelu_scalar(ZERO_SHOT_GATE);
        for class in 0..l.classes {
            block.w_in.set(l.cls + class, class, ZERO_SHOT_GATE);
            block.b_in[class] = ZERO_SHOT_GATE / g;
            write_centered(
                block.w_out.row_mut(class),
                l.out,
                l.vocab,
                self.label_id[class],
                ZERO_SHOT_SHARE / gate,
            );
        }
    }

    fn unembedding(&self, strength: f32) -> Matrix {
        let l = &self.layout;
        let mut w_u = Matrix::zeros(l.d_model, l.vocab);
        for t in 0..l.vocab {
            w_u.set(l.out + t, t, strength);
        }
        w_u
    }
}

/// Writes `scale * (e_index - 1/size)` into `row[offset..offset + size]`.
fn write_centered(row: &mut [f32], offset: usize, size: usize, index: usize, scale: f32) {
    let off = scale / size as f32;
    for (i, v) in row[offset..offset + size].iter_mut().enumerate() {
        *v += if i == index { scale - off } else { -off };
    }
}

/// Two-block attention-only model whose head (1, 0) copies the label that
/// followed earlier items of the query's class.
pub fn build_induction_model(spec: &FixtureSpec) -> Result<ModelBundle> {
    let w = Wiring::new(spec)?;
    let l = w.layout;
    let cfg = w.config(2, 1);
    let (w_e, w_pos) = w.embeddings();
    let s0 = l.tok_sumsq() + l.pos_sumsq();
    let s1 = s0 + l.cls_sumsq();
    let s2 = s1 + l.tok_sumsq();

    let mut b0 = BlockWeights::zeros(&cfg);
    b0.ln1 = w.ln(s0);
    w.wire_previous_item_heads(&mut b0);
    let mut b1 = BlockWeights::zeros(&cfg);
    b1.ln1 = w.ln(s1);
    w.wire_induction_head(&mut b1);

    ModelBundle::new(
        cfg,
        w_e,
        w_pos,
        vec![b0, b1],
        w.ln(s2),
        w.unembedding(spec.circuit_strength),
        None,
        w.vocab.clone(),
    )
}

/// Three-block model: block 0 holds a zero-shot pathway (previous-item heads
/// plus an MLP writing the true label), block 1 is empty and block 2 holds a
/// false-induction head whose copy signal is twice the zero-shot signal.
pub fn build_overthinking_model(spec: &FixtureSpec) -> Result<ModelBundle> {
    let w = Wiring::new(spec)?;
    let l = w.layout;
    let cfg = w.config(3, l.classes);
    let (w_e, w_pos) = w.embeddings();
    let s0 = l.tok_sumsq() + l.pos_sumsq();
    let s1 = s0 + l.cls_sumsq();
    let zs = ZERO_SHOT_SHARE * ZERO_SHOT_SHARE * l.tok_sumsq();
    let s2 = s1 + zs;
    let s3 = s2 + l.tok_sumsq();

    let mut b0 = BlockWeights::zeros(&cfg);
    b0.ln1 = w.ln(s0);
    w.wire_previous_item_heads(&mut b0);
    b0.ln2 = w.ln(s1);
    w.wire_zero_shot_mlp(&mut b0);
    let b1 = BlockWeights::zeros(&cfg);
    let mut b2 = BlockWeights::zeros(&cfg);
    b2.ln1 = w.ln(s2);
    w.wire_induction_head(&mut b2);

    ModelBundle::new(
        cfg,
        w_e,
        w_pos,
        vec![b0, b1, b2],
        w.ln(s3),
        w.unembedding(spec.circuit_strength),
        None,
        w.vocab.clone(),
    )
}

/// Shape and seed of a randomly initialized model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for RandomModelSpec {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            d_mlp: 64,
            vocab_size: 50,
            max_seq: 32,
            seed: 0,
        }
    }
}

impl RandomModelSpec {
    fn config(&self) -> Result<ModelConfig> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Argument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let cfg = ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_model / self.n_heads,
            d_mlp: self.d_mlp,
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
            ln_eps: LN_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn vocab(&self) -> Vec<String> {
        (0..self.vocab_size).map(|i| format!("t{i}")).collect()
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, center: f32, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| center + rng.gen_range(-scale..scale))
        .collect()
}

/// Seeded random weights, including biases and non-trivial layer norms.
pub fn random_model(spec: &RandomModelSpec) -> Result<ModelBundle> {
    let cfg = spec.config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let s = (3.0 / d as f32).sqrt();
    let w_e = random_matrix(&mut rng, cfg.vocab_size, d, 1.0);
    let w_pos = random_matrix(&mut rng, cfg.max_seq, d, 0.5);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let mut b = BlockWeights::zeros(&cfg);
        b.ln1 = LayerNormParams {
            gain: random_vec(&mut rng, d, 1.0, 0.2),
            bias: random_vec(&mut rng, d, 0.0, 0.1),
        };
        for hw in &mut b.heads {
            hw.w_q = random_matrix(&mut rng, d, dh, 2.0 * s);
            hw.w_k = random_matrix(&mut rng, d, dh, 2.0 * s);
            hw.w_v = random_matrix(&mut rng, d, dh, s);
            hw.b_q = random_vec(&mut rng, dh, 0.0, 0.1);
            hw.b_k = random_vec(&mut rng, dh, 0.0, 0.1);
            hw.b_v = random_vec(&mut rng, dh, 0.0, 0.1);
        }
        b.w_o = random_matrix(&mut rng, d, d, s);
        b.b_o = random_vec(&mut rng, d, 0.0, 0.1);
        b.ln2 = LayerNormParams {
            gain: random_vec(&mut rng, d, 1.0, 0.2),
            bias: random_vec(&mut rng, d, 0.0, 0.1),
        };
        b.w_in = random_matrix(&mut rng, d, cfg.d_mlp, s);
        b.b_in = random_vec(&mut rng, cfg.d_mlp, 0.0, 0.1);
        b.w_out = random_matrix(&mut rng, cfg.d_mlp, d, (3.0 / cfg.d_mlp as f32).sqrt());
        b.b_out = random_vec(&mut rng, d, 0.0, 0.1);
        blocks.push(b);
    }
    let final_ln = LayerNormParams {
        gain: random_vec(&mut rng, d, 1.0, 0.2),
        bias: random_vec(&mut rng, d, 0.0, 0.1),
    };
    let w_u = random_matrix(&mut rng, d, cfg.vocab_size, 1.0);
    let b_u = random_vec(&mut rng, cfg.vocab_size, 0.0, 0.1);
    ModelBundle::new(
        cfg,
        w_e,
        w_pos,
        blocks,
        final_ln,
        w_u,
        Some(b_u),
        spec.vocab(),
    )
}

/// Random embeddings, final norm and unembedding, but every block zero.
pub fn zero_block_model(spec: &RandomModelSpec) -> Result<ModelBundle> {
    let mut bundle = random_model(spec)?;
    let zero = BlockWeights::zeros(&bundle.config);
    for b in &mut bundle.blocks {
        *b = zero.clone();
    }
    Ok(bundle)
}
