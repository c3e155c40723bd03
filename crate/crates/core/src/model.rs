//! The grid classifier: BiLSTM token encoder, biaffine span features with
//! intra-span linear attention, criss-cross attention across the grid, and a
//! per-cell softmax over the label set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelId;
use crate::error::{Error, Result};
use crate::kernel::{criss_cross_cells, criss_cross_weights, span_range, span_weights};
use crate::kernel::{Graph, Tensor, Var};
use crate::tagging::GridLabelMatrix;

fn default_dropout() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden width of each LSTM direction; token vectors are twice this wide.
    pub lstm_hidden: usize,
    /// Query/key width of the criss-cross attention; defaults to half the token width.
    #[serde(default)]
    pub d_prime: Option<usize>,
    pub num_labels: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Read precomputed token vectors of width `embed_dim` instead of an embedding table.
    #[serde(default)]
    pub pretrained_vectors: bool,
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn d_prime(&self) -> usize {
        self.d_prime.unwrap_or((self.d() / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.pretrained_vectors && self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.embed_dim == 0 || self.lstm_hidden == 0 {
            return bad("embed_dim and lstm_hidden must be positive".into());
        }
        if self.d_prime() == 0 || self.d_prime() > self.d() {
            return bad(format!(
                "d_prime {} must be in 1..={}",
                self.d_prime(),
                self.d()
            ));
        }
        if self.num_labels < 3 {
            return bad(format!(
                "num_labels {} leaves no entity type",
                self.num_labels
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Every parameter with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, h, d, dp, c) = (
            self.embed_dim,
            self.lstm_hidden,
            self.d(),
            self.d_prime(),
            self.num_labels,
        );
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: &str, shape: &[usize]| out.push((name.to_string(), shape.to_vec()));
        if !self.pretrained_vectors {
            add("encoder.embedding", &[self.vocab_size, e]);
        }
        for dir in ["fwd", "bwd"] {
            add(&format!("encoder.lstm_{dir}.w_ih"), &[e, 4 * h]);
            add(&format!("encoder.lstm_{dir}.w_hh"), &[h, 4 * h]);
            add(&format!("encoder.lstm_{dir}.b"), &[4 * h]);
        }
        for mlp in ["intra.mlp_head", "intra.mlp_tail"] {
            add(&format!("{mlp}.w1"), &[d, d]);
            add(&format!("{mlp}.b1"), &[d]);
            add(&format!("{mlp}.w2"), &[d, d]);
            add(&format!("{mlp}.b2"), &[d]);
        }
        add("intra.biaffine.u1", &[d, d, d]);
        add("intra.biaffine.u2", &[2 * d, d]);
        add("intra.biaffine.b", &[d]);
        for side in ["upper", "lower"] {
            add(&format!("intra.reg_{side}.w"), &[d, 1]);
            add(&format!("intra.reg_{side}.b"), &[1]);
        }
        add("inter.mlp.w1", &[2 * d, d]);
        add("inter.mlp.b1", &[d]);
        add("inter.mlp.w2", &[d, d]);
        add("inter.mlp.b2", &[d]);
        add("inter.query.w", &[d, dp]);
        add("inter.query.b", &[dp]);
        add("inter.key.w", &[d, dp]);
        add("inter.key.b", &[dp]);
        add("inter.value.w", &[d, d]);
        add("inter.value.b", &[d]);
        add("classifier.w", &[d, c]);
        add("classifier.b", &[c]);
        out
    }
}

/// Parameter group of a parameter name: `encoder`, `intra`, `inter` or `classifier`.
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParamStore { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameters placed on a graph as leaves.
#[derive(Debug, Clone)]
pub struct Bound<'m> {
    store: &'m ParamStore,
    vars: Vec<Var>,
}

impl<'m> Bound<'m> {
    /// Wraps already created leaves, one per parameter in store order.
    pub fn from_vars(store: &'m ParamStore, vars: Vec<Var>) -> Self {
        assert_eq!(store.len(), vars.len(), "one var per parameter");
        Bound { store, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"));
        self.vars[i]
    }
}

/// Forward-pass mode. Training applies dropout with the given generator.
pub enum Mode<'r> {
    Train(&'r mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) => Ok(g.dropout(x, rate, *rng)?),
            Mode::Eval => Ok(x),
        }
    }
}

/// Encoder input: vocabulary ids or precomputed vectors (`[n, embed_dim]`).
#[derive(Debug, Clone)]
pub enum ModelInput {
    Tokens(Vec<usize>),
    Vectors(Tensor),
}

impl ModelInput {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Tokens(ids) => ids.len(),
            ModelInput::Vectors(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_vectors(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(ModelInput::Vectors(Tensor::new(
            vec![rows.len(), width],
            data,
        )?))
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    /// Token representations `[n, d]`.
    pub tokens: Var,
    /// Biaffine boundary features `[n, n, d]`.
    pub span: Var,
    /// Linear-attention regularity features `[n, n, d]`.
    pub reg: Var,
    pub upper_scores: Var,
    pub lower_scores: Var,
    /// `[span; reg]`, `[n, n, 2d]`.
    pub grid: Var,
    /// Reduced grid `[n, n, d]`.
    pub reduced: Var,
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub attended: Var,
    pub enhanced: Var,
    pub logits: Var,
    /// Per-cell label distribution `[n, n, |C|]`.
    pub probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let bound = if name == "encoder.embedding" {
        3f64.sqrt() / (shape[1] as f64).sqrt()
    } else if shape.len() == 1 {
        return Tensor::zeros(shape);
    } else {
        let fan_out = *shape.last().unwrap();
        let fan_in = numel / fan_out;
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    };
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Model {
    /// Fresh model with seeded uniform initialization; biases start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        Ok(Model {
            config,
            params: ParamStore { entries },
        })
    }

    /// Assembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{got_name}` {:?} where `{name}` {shape:?} was expected",
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound<'_> {
        let vars = self
            .params
            .tensors()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect();
        Bound {
            store: &self.params,
            vars,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound<'_>,
        input: &ModelInput,
        mode: &mut Mode<'_>,
    ) -> Result<Trace> {
        let tokens = encode_tokens(g, p, &self.config, input, mode)?;
        let intra = intra_span_features(g, p, tokens)?;
        let inter = inter_span_enhance(g, p, &self.config, intra.grid, mode)?;
        let (logits, probs) = classify_grid(g, p, inter.enhanced)?;
        Ok(Trace {
            tokens,
            span: intra.span,
            reg: intra.reg,
            upper_scores: intra.upper_scores,
            lower_scores: intra.lower_scores,
            grid: intra.grid,
            reduced: inter.reduced,
            query: inter.query,
            key: inter.key,
            value: inter.value,
            attended: inter.attended,
            enhanced: inter.enhanced,
            logits,
            probs,
        })
    }

    /// Label distribution `[n, n, |C|]` in evaluation mode.
    pub fn probabilities(&self, input: &ModelInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let trace = self.forward(&mut g, &p, input, &mut Mode::Eval)?;
        Ok(g.value(trace.probs).clone())
    }

    /// Most probable label per cell, restricted to the labels the cell's
    /// region can hold (see [`constrained_argmax`]).
    pub fn predict_grid(&self, input: &ModelInput) -> Result<GridLabelMatrix> {
        Ok(constrained_argmax(&self.probabilities(input)?))
    }

    /// Attention weights of one evaluation-mode pass.
    pub fn attention(&self, input: &ModelInput) -> Result<AttentionView> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let trace = self.forward(&mut g, &p, input, &mut Mode::Eval)?;
        Ok(AttentionView {
            n: input.len(),
            upper_scores: g.value(trace.upper_scores).data().to_vec(),
            lower_scores: g.value(trace.lower_scores).data().to_vec(),
            query: g.value(trace.query).clone(),
            key: g.value(trace.key).clone(),
        })
    }
}

/// Argmax per cell where cells above the diagonal choose among
/// None/Frag/Gap, cells below among None and the entity types, and diagonal
/// cells among all labels.
pub fn constrained_argmax(probs: &Tensor) -> GridLabelMatrix {
    let n = probs.shape()[0];
    let c = probs.last_dim();
    let mut grid = GridLabelMatrix::new(n);
    for i in 0..n {
        for j in 0..n {
            let cell = &probs.data()[(i * n + j) * c..(i * n + j + 1) * c];
            let allowed = |k: usize| match i.cmp(&j) {
                std::cmp::Ordering::Less => k <= LabelId::GAP.0,
                std::cmp::Ordering::Greater => k == LabelId::NONE.0 || k > LabelId::GAP.0,
                std::cmp::Ordering::Equal => true,
            };
            let mut best = 0;
            for k in (0..c).filter(|&k| allowed(k)) {
                if cell[k] > cell[best] {
                    best = k;
                }
            }
            grid.set(i, j, LabelId(best));
        }
    }
    grid
}

fn mlp(g: &mut Graph, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = p.get(&format!("{prefix}.w1"));
    let b1 = p.get(&format!("{prefix}.b1"));
    let w2 = p.get(&format!("{prefix}.w2"));
    let b2 = p.get(&format!("{prefix}.b2"));
    let hidden = g.affine(x, w1, Some(b1))?;
    let hidden = g.tanh(hidden);
    Ok(g.affine(hidden, w2, Some(b2))?)
}

/// Runs one LSTM direction over `order`, returning the hidden state per position.
fn lstm_pass(
    g: &mut Graph,
    x_proj: Var,
    w_hh: Var,
    hidden: usize,
    order: impl Iterator<Item = usize>,
    n: usize,
) -> Result<Vec<Var>> {
    let mut states: Vec<Option<Var>> = vec![None; n];
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    for t in order {
        let xt = g.gather_rows(x_proj, &[t])?;
        // A zero initial state contributes nothing to the gates or the cell.
        let gates = match h {
            Some(h) => {
                let rec = g.affine(h, w_hh, None)?;
                g.add(xt, rec)?
            }
            None => xt,
        };
        let gate = |g: &mut Graph, k: usize| g.slice_last(gates, k * hidden, hidden);
        let (i, f, cand, o) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let fresh = g.mul(i, cand)?;
        let cell = match c {
            Some(c) => {
                let kept = g.mul(f, c)?;
                g.add(kept, fresh)?
            }
            None => fresh,
        };
        let squashed = g.tanh(cell);
        let out = g.mul(o, squashed)?;
        states[t] = Some(out);
        h = Some(out);
        c = Some(cell);
    }
    Ok(states
        .into_iter()
        .map(|s| s.expect("every position visited"))
        .collect())
}

/// Token representations `[n, d]`: embeddings (or supplied vectors) through a
/// bidirectional LSTM, forward and backward states concatenated per token.
pub fn encode_tokens(
    g: &mut Graph,
    p: &Bound<'_>,
    config: &ModelConfig,
    input: &ModelInput,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let n = input.len();
    if n == 0 {
        return Err(Error::InvalidSentence(
            "cannot encode an empty sentence".into(),
        ));
    }
    let x = match input {
        ModelInput::Tokens(ids) => {
            if config.pretrained_vectors {
                return Err(Error::Invalid(
                    "model expects precomputed token vectors".into(),
                ));
            }
            if let Some(bad) = ids.iter().find(|&&id| id >= config.vocab_size) {
                return Err(Error::Invalid(format!(
                    "token id {bad} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            g.gather_rows(p.get("encoder.embedding"), ids)?
        }
        ModelInput::Vectors(t) => {
            if !config.pretrained_vectors {
                return Err(Error::Invalid(
                    "model was built for token ids, not vectors".into(),
                ));
            }
            if t.rank() != 2 || t.shape()[1] != config.embed_dim {
                return Err(Error::Invalid(format!(
                    "token vectors {:?} do not match embed_dim {}",
                    t.shape(),
                    config.embed_dim
                )));
            }
            g.constant(t.clone())
        }
    };
    let hidden = config.lstm_hidden;
    let mut halves = Vec::with_capacity(2);
    for dir in ["fwd", "bwd"] {
        let w_ih = p.get(&format!("encoder.lstm_{dir}.w_ih"));
        let w_hh = p.get(&format!("encoder.lstm_{dir}.w_hh"));
        let b = p.get(&format!("encoder.lstm_{dir}.b"));
        let x_proj = g.affine(x, w_ih, Some(b))?;
        let states = if dir == "fwd" {
            lstm_pass(g, x_proj, w_hh, hidden, 0..n, n)?
        } else {
            lstm_pass(g, x_proj, w_hh, hidden, (0..n).rev(), n)?
        };
        let stacked = g.stack(&states)?;
        halves.push(g.reshape(stacked, vec![n, hidden])?);
    }
    let h = g.concat(&halves)?;
    mode.dropout(g, h, config.dropout)
}

#[derive(Debug, Clone, Copy)]
pub struct IntraSpan {
    pub span: Var,
    pub reg: Var,
    pub upper_scores: Var,
    pub lower_scores: Var,
    pub grid: Var,
}

/// Boundary and regularity features of every cell, concatenated to `[n, n, 2d]`.
pub fn intra_span_features(g: &mut Graph, p: &Bound<'_>, tokens: Var) -> Result<IntraSpan> {
    let d = g.value(tokens).last_dim();
    let head = mlp(g, p, "intra.mlp_head", tokens)?;
    let tail = mlp(g, p, "intra.mlp_tail", tokens)?;
    let bilinear = g.bilinear_grid(head, p.get("intra.biaffine.u1"), tail)?;
    // [head; tail] U2 splits into head U2[..d] + tail U2[d..].
    let u2 = p.get("intra.biaffine.u2");
    let top: Vec<usize> = (0..d).collect();
    let bottom: Vec<usize> = (d..2 * d).collect();
    let u2_head = g.gather_rows(u2, &top)?;
    let u2_tail = g.gather_rows(u2, &bottom)?;
    let head_lin = g.affine(head, u2_head, Some(p.get("intra.biaffine.b")))?;
    let tail_lin = g.affine(tail, u2_tail, None)?;
    let linear = g.pair_add(head_lin, tail_lin)?;
    let span = g.add(bilinear, linear)?;

    let upper_scores = g.affine(
        tokens,
        p.get("intra.reg_upper.w"),
        Some(p.get("intra.reg_upper.b")),
    )?;
    let lower_scores = g.affine(
        tokens,
        p.get("intra.reg_lower.w"),
        Some(p.get("intra.reg_lower.b")),
    )?;
    let reg = g.span_attention(tokens, upper_scores, lower_scores)?;
    let grid = g.concat(&[span, reg])?;
    Ok(IntraSpan {
        span,
        reg,
        upper_scores,
        lower_scores,
        grid,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct InterSpan {
    pub reduced: Var,
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub attended: Var,
    pub enhanced: Var,
}

/// Reduces the grid to width `d`, then adds criss-cross attention over it.
pub fn inter_span_enhance(
    g: &mut Graph,
    p: &Bound<'_>,
    config: &ModelConfig,
    grid: Var,
    mode: &mut Mode<'_>,
) -> Result<InterSpan> {
    let reduced = mlp(g, p, "inter.mlp", grid)?;
    let reduced = mode.dropout(g, reduced, config.dropout)?;
    let query = g.affine(
        reduced,
        p.get("inter.query.w"),
        Some(p.get("inter.query.b")),
    )?;
    let key = g.affine(reduced, p.get("inter.key.w"), Some(p.get("inter.key.b")))?;
    let value = g.affine(
        reduced,
        p.get("inter.value.w"),
        Some(p.get("inter.value.b")),
    )?;
    let attended = g.criss_cross(query, key, value)?;
    let enhanced = g.add(attended, reduced)?;
    Ok(InterSpan {
        reduced,
        query,
        key,
        value,
        attended,
        enhanced,
    })
}

/// Per-cell logits and label probabilities.
pub fn classify_grid(g: &mut Graph, p: &Bound<'_>, enhanced: Var) -> Result<(Var, Var)> {
    let logits = g.affine(enhanced, p.get("classifier.w"), Some(p.get("classifier.b")))?;
    let probs = g.softmax(logits, 2)?;
    Ok((logits, probs))
}

/// Attention scores captured from a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionView {
    n: usize,
    upper_scores: Vec<f64>,
    lower_scores: Vec<f64>,
    query: Tensor,
    key: Tensor,
}

impl AttentionView {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Linear-attention weight of every token inside cell `(i, j)`'s span.
    pub fn linear(&self, i: usize, j: usize) -> Result<Vec<(usize, f64)>> {
        self.check(i, j)?;
        let w = span_weights(&self.upper_scores, &self.lower_scores, i, j);
        Ok(span_range(i, j).zip(w).collect())
    }

    /// Criss-cross weight of every cell in row `i` and column `j`.
    pub fn criss_cross(&self, i: usize, j: usize) -> Result<Vec<((usize, usize), f64)>> {
        self.check(i, j)?;
        let w = criss_cross_weights(&self.query, &self.key, i, j);
        Ok(criss_cross_cells(self.n, i, j).zip(w).collect())
    }

    fn check(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::Invalid(format!(
                "cell ({i}, {j}) outside a {0}x{0} grid",
                self.n
            )));
        }
        Ok(())
    }
}
