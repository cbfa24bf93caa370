//! The caption model: a mapping network from image embedding to a k-vector
//! language-model prefix, an autoregressive language-model interface, and
//! hard (greedy / beam) plus Gumbel-Softmax differentiable decoding.
//!
//! All forward passes run on the autodiff graph so the three decoding paths
//! share one logits computation; hard decoders simply never call backward.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::backend::EmbeddingVector;
use crate::error::{Error, Result};
use crate::gumbel::{self, EstimatorMode, GumbelNoise, Temperature};
use crate::params::{BoundParams, Param, ParamStore};
use crate::rng::{substream, SeededRng};
use crate::tokens::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperKind {
    Mlp,
    Transformer,
}

/// Hidden-layer nonlinearity of the MLP mapper. `Identity` exists so a
/// square identity-initialized mapper is exactly the identity map, which
/// pins down the weight layout in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingNetworkConfig {
    pub kind: MapperKind,
    /// k, the number of prefix vectors handed to the language model.
    pub prefix_length: usize,
    /// Dimension of the incoming image embedding.
    pub input_dim: usize,
    /// Width of the language model's input space (also the transformer
    /// mapper's working width).
    pub lm_dim: usize,
    pub mlp_hidden: usize,
    pub tf_layers: usize,
    pub tf_heads: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for MappingNetworkConfig {
    fn default() -> Self {
        MappingNetworkConfig {
            kind: MapperKind::Mlp,
            prefix_length: 10,
            input_dim: 512,
            lm_dim: 512,
            mlp_hidden: 512,
            tf_layers: 8,
            tf_heads: 8,
            activation: Activation::Tanh,
        }
    }
}

impl MappingNetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_length < 1 {
            return Err(Error::Parameter("prefix_length must be >= 1".into()));
        }
        if self.input_dim < 1 || self.lm_dim < 1 || self.mlp_hidden < 1 {
            return Err(Error::Parameter("mapper dimensions must be >= 1".into()));
        }
        if let MapperKind::Transformer = self.kind {
            if self.tf_layers < 1 || self.tf_heads < 1 {
                return Err(Error::Parameter(
                    "transformer mapper needs >= 1 layer and >= 1 head".into(),
                ));
            }
            if self.lm_dim % self.tf_heads != 0 {
                return Err(Error::Parameter(format!(
                    "tf_heads ({}) must divide the transformer width ({})",
                    self.tf_heads, self.lm_dim
                )));
            }
        }
        Ok(())
    }
}

/// The k prefix vectors p_1..p_k, as plain values detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixEmbeddings {
    values: Vec<f64>,
    k: usize,
    lm_dim: usize,
}

impl PrefixEmbeddings {
    pub fn new(values: Vec<f64>, k: usize, lm_dim: usize) -> Result<Self> {
        if values.len() != k * lm_dim {
            return Err(Error::Shape(format!(
                "prefix expects {k}x{lm_dim} = {} values, got {}",
                k * lm_dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateVector(
                "prefix contains non-finite entries".into(),
            ));
        }
        Ok(PrefixEmbeddings { values, k, lm_dim })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lm_dim(&self) -> usize {
        self.lm_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self, graph: &Graph) -> Tensor {
        graph.tensor(self.k, self.lm_dim, self.values.clone())
    }
}

/// Per-step soft token rows from differentiable decoding, plus the hard
/// (argmax) path they rode on. Rows cover content tokens only; the end
/// emission terminates decoding without producing a row.
pub struct SoftTokenSequence {
    rows: Vec<Tensor>,
    hard: TokenSequence,
}

impl SoftTokenSequence {
    pub fn rows(&self) -> &[Tensor] {
        &self.rows
    }

    pub fn hard(&self) -> &TokenSequence {
        &self.hard
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// An autoregressive language model exposed to the captioner.
///
/// Implementations may be trainable (register parameter groups under "lm.*"
/// and read them from the per-pass binding) or frozen (keep weights
/// internally and bind them as graph constants).
pub trait LanguageModel: Send + Sync {
    fn vocabulary_size(&self) -> usize;
    fn lm_dim(&self) -> usize;
    fn finetunable(&self) -> bool;
    /// Longest input-row sequence the model accepts, when bounded.
    fn max_positions(&self) -> Option<usize> {
        None
    }
    /// Register trainable "lm.*" groups; frozen models register nothing.
    fn init_params(&self, store: &mut ParamStore);
    /// Embedding row (1 x lm_dim) for one hard token.
    fn token_embedding(&self, graph: &Graph, params: &BoundParams, token: u32) -> Result<Tensor>;
    /// Probability-weighted mixture of embedding rows for a soft token.
    fn embed_soft(&self, graph: &Graph, params: &BoundParams, soft: &Tensor) -> Result<Tensor>;
    /// Next-token logits (1 x vocabulary_size) given all input rows so far
    /// (prefix vectors followed by embedded caption tokens).
    fn next_logits(&self, graph: &Graph, params: &BoundParams, inputs: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocabulary_size: usize,
    pub lm_dim: usize,
    pub hidden: usize,
    pub max_positions: usize,
    pub seed: u64,
}

/// Small trainable language model for desk-scale runs.
///
/// Input rows get learned positional embeddings added, then the head reads
/// the concatenation of the mean row and the last row through one tanh
/// hidden layer to produce vocabulary logits. Weights are a pure function of
/// the config seed; in frozen mode they stay internal, in finetune mode the
/// same tensors are registered as trainable "lm.*" groups.
pub struct ToyLm {
    cfg: ToyLmConfig,
    finetune: bool,
    frozen: Option<ParamStore>,
}

impl ToyLm {
    pub fn new(cfg: ToyLmConfig, finetune: bool) -> Result<Self> {
        if cfg.vocabulary_size < 2 {
            return Err(Error::Parameter("toy LM vocabulary must be >= 2".into()));
        }
        if cfg.lm_dim < 1 || cfg.hidden < 1 || cfg.max_positions < 1 {
            return Err(Error::Parameter("toy LM dimensions must be >= 1".into()));
        }
        let frozen = (!finetune).then(|| Self::build_params(&cfg));
        Ok(ToyLm {
            cfg,
            finetune,
            frozen,
        })
    }

    fn build_params(cfg: &ToyLmConfig) -> ParamStore {
        let (v, d, h, p) = (cfg.vocabulary_size, cfg.lm_dim, cfg.hidden, cfg.max_positions);
        let mut store = ParamStore::new();
        let shapes: [(&str, usize, usize, f64); 6] = [
            ("lm.tok_emb", v, d, 0.5),
            ("lm.pos_emb", p, d, 0.1),
            ("lm.head.w1", 2 * d, h, 1.0 / (2.0 * d as f64).sqrt()),
            ("lm.head.b1", 1, h, 0.0),
            ("lm.head.w2", h, v, 1.0 / (h as f64).sqrt()),
            ("lm.head.b2", 1, v, 0.0),
        ];
        for (name, rows, cols, scale) in shapes {
            let param = if scale == 0.0 {
                Param::zeros(rows, cols)
            } else {
                let mut rng = substream(cfg.seed, &format!("init.{name}"));
                Param::normal(rows, cols, scale, &mut rng)
            };
            store.insert(name, param);
        }
        store
    }

    fn table(&self, graph: &Graph, params: &BoundParams, name: &str) -> Tensor {
        if self.finetune {
            params.get(name).clone()
        } else {
            let p = self
                .frozen
                .as_ref()
                .and_then(|s| s.get(name))
                .expect("frozen toy LM owns all its groups");
            let values: Vec<f64> = p.values.iter().map(|&x| x as f64).collect();
            graph.tensor(p.rows, p.cols, values)
        }
    }
}

impl LanguageModel for ToyLm {
    fn vocabulary_size(&self) -> usize {
        self.cfg.vocabulary_size
    }

    fn lm_dim(&self) -> usize {
        self.cfg.lm_dim
    }

    fn finetunable(&self) -> bool {
        self.finetune
    }

    fn max_positions(&self) -> Option<usize> {
        Some(self.cfg.max_positions)
    }

    fn init_params(&self, store: &mut ParamStore) {
        if self.finetune {
            for (name, p) in Self::build_params(&self.cfg).iter() {
                store.insert(name.clone(), p.clone());
            }
        }
    }

    fn token_embedding(&self, graph: &Graph, params: &BoundParams, token: u32) -> Result<Tensor> {
        if token as usize >= self.cfg.vocabulary_size {
            return Err(Error::Vocabulary {
                token,
                vocab: self.cfg.vocabulary_size,
            });
        }
        Ok(self.table(graph, params, "lm.tok_emb").slice_row(token as usize))
    }

    fn embed_soft(&self, graph: &Graph, params: &BoundParams, soft: &Tensor) -> Result<Tensor> {
        if soft.rows() != 1 || soft.cols() != self.cfg.vocabulary_size {
            return Err(Error::Shape(format!(
                "soft token must be 1x{}, got {}x{}",
                self.cfg.vocabulary_size,
                soft.rows(),
                soft.cols()
            )));
        }
        Ok(soft.matmul(&self.table(graph, params, "lm.tok_emb")))
    }

    fn next_logits(&self, graph: &Graph, params: &BoundParams, inputs: &Tensor) -> Result<Tensor> {
        let t = inputs.rows();
        if inputs.cols() != self.cfg.lm_dim {
            return Err(Error::Shape(format!(
                "toy LM expects rows of width {}, got {}",
                self.cfg.lm_dim,
                inputs.cols()
            )));
        }
        if t > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "sequence of {t} rows exceeds the toy LM's {} positions",
                self.cfg.max_positions
            )));
        }
        let pos = self.table(graph, params, "lm.pos_emb");
        let pos_rows: Vec<Tensor> = (0..t).map(|i| pos.slice_row(i)).collect();
        let x = inputs.add(&graph.concat_rows(&pos_rows));
        let feat = graph.concat_cols(&[x.mean_rows(), x.slice_row(t - 1)]);
        let hidden = feat
            .matmul(&self.table(graph, params, "lm.head.w1"))
            .add_bias_row(&self.table(graph, params, "lm.head.b1"))
            .tanh();
        Ok(hidden
            .matmul(&self.table(graph, params, "lm.head.w2"))
            .add_bias_row(&self.table(graph, params, "lm.head.b2")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionModelConfig {
    pub mapper: MappingNetworkConfig,
    pub finetune_lm: bool,
    /// Hard cap on generated caption length (content tokens).
    pub max_caption_length: usize,
    pub end_token: u32,
}

pub struct CaptionModel {
    cfg: CaptionModelConfig,
    lm: Box<dyn LanguageModel>,
}

impl CaptionModel {
    pub fn new(cfg: CaptionModelConfig, lm: Box<dyn LanguageModel>) -> Result<Self> {
        cfg.mapper.validate()?;
        if cfg.max_caption_length < 1 {
            return Err(Error::Parameter("max_caption_length must be >= 1".into()));
        }
        if lm.lm_dim() != cfg.mapper.lm_dim {
            return Err(Error::Shape(format!(
                "mapper emits width {} but the LM consumes width {}",
                cfg.mapper.lm_dim,
                lm.lm_dim()
            )));
        }
        if cfg.end_token as usize >= lm.vocabulary_size() {
            return Err(Error::Vocabulary {
                token: cfg.end_token,
                vocab: lm.vocabulary_size(),
            });
        }
        if cfg.finetune_lm && !lm.finetunable() {
            return Err(Error::Capability {
                backend: "language model".into(),
                capability: "finetuning".into(),
            });
        }
        if let Some(p) = lm.max_positions() {
            let needed = cfg.mapper.prefix_length + cfg.max_caption_length;
            if p < needed {
                return Err(Error::Parameter(format!(
                    "LM supports {p} positions but prefix + max caption needs {needed}"
                )));
            }
        }
        Ok(CaptionModel { cfg, lm })
    }

    pub fn config(&self) -> &CaptionModelConfig {
        &self.cfg
    }

    pub fn lm(&self) -> &dyn LanguageModel {
        self.lm.as_ref()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.lm.vocabulary_size()
    }

    pub fn end_token(&self) -> u32 {
        self.cfg.end_token
    }

    /// Fresh parameter store: mapper groups drawn from per-group substreams
    /// of `seed`, plus the LM's trainable groups when finetuning.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let m = &self.cfg.mapper;
        let (k, din, w) = (m.prefix_length, m.input_dim, m.lm_dim);
        let add_normal = |store: &mut ParamStore, name: String, rows: usize, cols: usize, scale: f64| {
            let mut rng = substream(seed, &format!("init.{name}"));
            store.insert(name, Param::normal(rows, cols, scale, &mut rng));
        };
        match m.kind {
            MapperKind::Mlp => {
                let h = m.mlp_hidden;
                add_normal(&mut store, "mapper.mlp.w1".into(), din, h, 1.0 / (din as f64).sqrt());
                store.insert("mapper.mlp.b1", Param::zeros(1, h));
                add_normal(&mut store, "mapper.mlp.w2".into(), h, k * w, 1.0 / (h as f64).sqrt());
                store.insert("mapper.mlp.b2", Param::zeros(1, k * w));
            }
            MapperKind::Transformer => {
                add_normal(&mut store, "mapper.tf.in_proj.w".into(), din, w, 1.0 / (din as f64).sqrt());
                store.insert("mapper.tf.in_proj.b", Param::zeros(1, w));
                add_normal(&mut store, "mapper.tf.queries".into(), k, w, 0.02);
                for layer in 0..m.tf_layers {
                    let pre = format!("mapper.tf.{layer}");
                    store.insert(format!("{pre}.ln1.g"), Param::ones(1, w));
                    store.insert(format!("{pre}.ln1.b"), Param::zeros(1, w));
                    for name in ["wq", "wk", "wv", "wo"] {
                        add_normal(&mut store, format!("{pre}.attn.{name}"), w, w, 1.0 / (w as f64).sqrt());
                    }
                    for name in ["bq", "bk", "bv", "bo"] {
                        store.insert(format!("{pre}.attn.{name}"), Param::zeros(1, w));
                    }
                    store.insert(format!("{pre}.ln2.g"), Param::ones(1, w));
                    store.insert(format!("{pre}.ln2.b"), Param::zeros(1, w));
                    add_normal(&mut store, format!("{pre}.ffn.w1"), w, 4 * w, 1.0 / (w as f64).sqrt());
                    store.insert(format!("{pre}.ffn.b1"), Param::zeros(1, 4 * w));
                    add_normal(&mut store, format!("{pre}.ffn.w2"), 4 * w, w, 1.0 / (4.0 * w as f64).sqrt());
                    store.insert(format!("{pre}.ffn.b2"), Param::zeros(1, w));
                }
                store.insert("mapper.tf.ln_f.g", Param::ones(1, w));
                store.insert("mapper.tf.ln_f.b", Param::zeros(1, w));
            }
        }
        self.lm.init_params(&mut store);
        store
    }

    /// Graph form of the mapping network: image embedding row -> k x lm_dim.
    pub fn map_prefix_graph(
        &self,
        graph: &Graph,
        params: &BoundParams,
        v: &Tensor,
    ) -> Result<Tensor> {
        let m = &self.cfg.mapper;
        if v.rows() != 1 || v.cols() != m.input_dim {
            return Err(Error::Shape(format!(
                "mapper expects a 1x{} image embedding, got {}x{}",
                m.input_dim,
                v.rows(),
                v.cols()
            )));
        }
        match m.kind {
            MapperKind::Mlp => {
                let hidden = v
                    .matmul(params.get("mapper.mlp.w1"))
                    .add_bias_row(params.get("mapper.mlp.b1"));
                let hidden = match m.activation {
                    Activation::Tanh => hidden.tanh(),
                    Activation::Identity => hidden,
                };
                Ok(hidden
                    .matmul(params.get("mapper.mlp.w2"))
                    .add_bias_row(params.get("mapper.mlp.b2"))
                    .reshape(m.prefix_length, m.lm_dim))
            }
            MapperKind::Transformer => self.transformer_forward(graph, params, v),
        }
    }

    /// Pre-LN encoder over [projected image; k learned queries]; the k query
    /// output positions become the prefix.
    fn transformer_forward(
        &self,
        graph: &Graph,
        params: &BoundParams,
        v: &Tensor,
    ) -> Result<Tensor> {
        let m = &self.cfg.mapper;
        let (k, w, heads) = (m.prefix_length, m.lm_dim, m.tf_heads);
        let head_dim = w / heads;
        let projected = v
            .matmul(params.get("mapper.tf.in_proj.w"))
            .add_bias_row(params.get("mapper.tf.in_proj.b"));
        let mut x = graph.concat_rows(&[projected, params.get("mapper.tf.queries").clone()]);
        for layer in 0..m.tf_layers {
            let pre = format!("mapper.tf.{layer}");
            let normed = x.layer_norm(
                params.get(&format!("{pre}.ln1.g")),
                params.get(&format!("{pre}.ln1.b")),
                1e-5,
            );
            let q = normed
                .matmul(params.get(&format!("{pre}.attn.wq")))
                .add_bias_row(params.get(&format!("{pre}.attn.bq")));
            let key = normed
                .matmul(params.get(&format!("{pre}.attn.wk")))
                .add_bias_row(params.get(&format!("{pre}.attn.bk")));
            let val = normed
                .matmul(params.get(&format!("{pre}.attn.wv")))
                .add_bias_row(params.get(&format!("{pre}.attn.bv")));
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = q.slice_cols(h * head_dim, head_dim);
                let kh = key.slice_cols(h * head_dim, head_dim);
                let vh = val.slice_cols(h * head_dim, head_dim);
                let scores = qh
                    .matmul(&kh.transpose())
                    .scale(1.0 / (head_dim as f64).sqrt());
                head_outs.push(scores.row_softmax().matmul(&vh));
            }
            let attn = graph
                .concat_cols(&head_outs)
                .matmul(params.get(&format!("{pre}.attn.wo")))
                .add_bias_row(params.get(&format!("{pre}.attn.bo")));
            x = x.add(&attn);
            let normed2 = x.layer_norm(
                params.get(&format!("{pre}.ln2.g")),
                params.get(&format!("{pre}.ln2.b")),
                1e-5,
            );
            let ffn = normed2
                .matmul(params.get(&format!("{pre}.ffn.w1")))
                .add_bias_row(params.get(&format!("{pre}.ffn.b1")))
                .tanh()
                .matmul(params.get(&format!("{pre}.ffn.w2")))
                .add_bias_row(params.get(&format!("{pre}.ffn.b2")));
            x = x.add(&ffn);
        }
        let x = x.layer_norm(
            params.get("mapper.tf.ln_f.g"),
            params.get("mapper.tf.ln_f.b"),
            1e-5,
        );
        let prefix_rows: Vec<Tensor> = (1..=k).map(|i| x.slice_row(i)).collect();
        Ok(graph.concat_rows(&prefix_rows))
    }

    /// Value form of [`Self::map_prefix_graph`] for decoding entry points.
    pub fn map_prefix(&self, store: &ParamStore, v: &EmbeddingVector) -> Result<PrefixEmbeddings> {
        let graph = Graph::new();
        let bound = store.bind(&graph);
        let vt = graph.row(v.to_f64());
        let prefix = self.map_prefix_graph(&graph, &bound, &vt)?;
        PrefixEmbeddings::new(
            prefix.value().as_ref().clone(),
            self.cfg.mapper.prefix_length,
            self.cfg.mapper.lm_dim,
        )
    }

    /// Graph form: logits for the token following `tokens`, conditioned on
    /// the prefix. `tokens` may be empty (first caption token).
    pub fn next_token_logits_graph(
        &self,
        graph: &Graph,
        params: &BoundParams,
        prefix: &Tensor,
        tokens: &TokenSequence,
    ) -> Result<Tensor> {
        self.check_prefix_shape(prefix)?;
        tokens.check_vocabulary(self.lm.vocabulary_size())?;
        let input = if tokens.is_empty() {
            prefix.clone()
        } else {
            let mut rows = Vec::with_capacity(1 + tokens.len());
            rows.push(prefix.clone());
            for &t in tokens.ids() {
                rows.push(self.lm.token_embedding(graph, params, t)?);
            }
            graph.concat_rows(&rows)
        };
        self.lm.next_logits(graph, params, &input)
    }

    /// Value form of [`Self::next_token_logits_graph`].
    pub fn next_token_logits(
        &self,
        store: &ParamStore,
        prefix: &PrefixEmbeddings,
        tokens: &TokenSequence,
    ) -> Result<Vec<f64>> {
        let graph = Graph::new();
        let bound = store.bind(&graph);
        let pt = prefix.to_tensor(&graph);
        let logits = self.next_token_logits_graph(&graph, &bound, &pt, tokens)?;
        Ok(logits.value().as_ref().clone())
    }

    fn check_prefix_shape(&self, prefix: &Tensor) -> Result<()> {
        let m = &self.cfg.mapper;
        if prefix.rows() != m.prefix_length || prefix.cols() != m.lm_dim {
            return Err(Error::Shape(format!(
                "prefix must be {}x{}, got {}x{}",
                m.prefix_length,
                m.lm_dim,
                prefix.rows(),
                prefix.cols()
            )));
        }
        Ok(())
    }

    /// Repeated argmax decoding; ties go to the lowest token id.
    pub fn generate_greedy(
        &self,
        store: &ParamStore,
        prefix: &PrefixEmbeddings,
        max_len: usize,
    ) -> Result<TokenSequence> {
        if max_len < 1 {
            return Err(Error::Parameter("max_len must be >= 1".into()));
        }
        let graph = Graph::new();
        let bound = store.bind(&graph);
        let pt = prefix.to_tensor(&graph);
        let mut rows = vec![pt];
        let mut out = TokenSequence::new(Vec::new());
        for _ in 0..max_len {
            let input = if rows.len() == 1 {
                rows[0].clone()
            } else {
                graph.concat_rows(&rows)
            };
            let logits = self.lm.next_logits(&graph, &bound, &input)?;
            let token = gumbel::argmax(&logits.value()) as u32;
            if token == self.cfg.end_token {
                break;
            }
            rows.push(self.lm.token_embedding(&graph, &bound, token)?);
            out.push(token);
        }
        Ok(out)
    }

    /// Length-normalized beam search.
    ///
    /// A hypothesis finishing via the end token scores
    /// (Σ log p + log p(end)) / (m + 1); one cut off at max_len scores
    /// Σ log p / max_len. Ties break toward the lexicographically smaller
    /// emission sequence (the end emission compares as its token id), which
    /// makes width 1 coincide with greedy decoding exactly.
    pub fn generate_beam(
        &self,
        store: &ParamStore,
        prefix: &PrefixEmbeddings,
        beam_width: usize,
        max_len: usize,
    ) -> Result<TokenSequence> {
        if beam_width < 1 {
            return Err(Error::Parameter("beam_width must be >= 1".into()));
        }
        if max_len < 1 {
            return Err(Error::Parameter("max_len must be >= 1".into()));
        }
        let graph = Graph::new();
        let bound = store.bind(&graph);
        let pt = prefix.to_tensor(&graph);
        let vocab = self.lm.vocabulary_size();
        let end = self.cfg.end_token;

        // Token-embedding tensors are shared across hypotheses.
        let mut emb_cache: Vec<Option<Tensor>> = vec![None; vocab];

        struct Hyp {
            tokens: Vec<u32>,
            sum_logp: f64,
        }
        struct Scored {
            tokens: Vec<u32>,
            score: f64,
            /// Emission sequence used for tie-breaking (end included as id).
            emissions: Vec<u32>,
        }

        let mut live = vec![Hyp {
            tokens: Vec::new(),
            sum_logp: 0.0,
        }];
        let mut finished: Vec<Scored> = Vec::new();

        for _ in 0..max_len {
            let mut candidates: Vec<(Vec<u32>, f64, bool)> = Vec::new();
            for hyp in &live {
                let mut rows = Vec::with_capacity(1 + hyp.tokens.len());
                rows.push(pt.clone());
                for &t in &hyp.tokens {
                    let slot = &mut emb_cache[t as usize];
                    if slot.is_none() {
                        *slot = Some(self.lm.token_embedding(&graph, &bound, t)?);
                    }
                    rows.push(slot.clone().unwrap());
                }
                let input = if rows.len() == 1 {
                    rows[0].clone()
                } else {
                    graph.concat_rows(&rows)
                };
                let log_probs = self
                    .lm
                    .next_logits(&graph, &bound, &input)?
                    .row_log_softmax();
                let lp = log_probs.value();
                for t in 0..vocab {
                    let mut emissions = hyp.tokens.clone();
                    emissions.push(t as u32);
                    candidates.push((emissions, hyp.sum_logp + lp[t], t as u32 == end));
                }
            }
            candidates.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .expect("log-probabilities are finite")
                    .then_with(|| a.0.cmp(&b.0))
            });
            let mut next_live = Vec::new();
            for (emissions, sum_logp, is_end) in candidates.into_iter().take(beam_width) {
                if is_end {
                    let len = emissions.len(); // content tokens + end emission
                    finished.push(Scored {
                        tokens: emissions[..len - 1].to_vec(),
                        score: sum_logp / len as f64,
                        emissions,
                    });
                } else {
                    next_live.push(Hyp {
                        tokens: emissions,
                        sum_logp,
                    });
                }
            }
            live = next_live;
            if live.is_empty() {
                break;
            }
        }
        for hyp in live {
            finished.push(Scored {
                score: hyp.sum_logp / hyp.tokens.len() as f64,
                emissions: hyp.tokens.clone(),
                tokens: hyp.tokens,
            });
        }
        let best = finished
            .into_iter()
            .max_by(|a, b| {
                a.score
                    .partial_cmp(&b.score)
                    .expect("scores are finite")
                    .then_with(|| b.emissions.cmp(&a.emissions))
            })
            .expect("at least one hypothesis always completes");
        Ok(TokenSequence::new(best.tokens))
    }

    /// Gumbel-Softmax decoding on the live graph. One soft row per content
    /// token; decoding stops when the hard argmax hits the end token or at
    /// max_len. `rng: None` fixes the Gumbel noise to zero.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_differentiable(
        &self,
        graph: &Graph,
        params: &BoundParams,
        prefix: &Tensor,
        max_len: usize,
        tau: Temperature,
        mode: EstimatorMode,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<SoftTokenSequence> {
        if max_len < 1 {
            return Err(Error::Parameter("max_len must be >= 1".into()));
        }
        self.check_prefix_shape(prefix)?;
        let vocab = self.lm.vocabulary_size();
        let mut input_rows = vec![prefix.clone()];
        let mut rows = Vec::new();
        let mut hard = TokenSequence::new(Vec::new());
        for _ in 0..max_len {
            let input = if input_rows.len() == 1 {
                input_rows[0].clone()
            } else {
                graph.concat_rows(&input_rows)
            };
            let logits = self.lm.next_logits(graph, params, &input)?;
            let noise = match rng.as_deref_mut() {
                Some(r) => gumbel::sample_gumbel(vocab, r),
                None => GumbelNoise::zeros(vocab),
            };
            let soft = gumbel::gumbel_softmax_graph(&logits, tau, &noise)?;
            let token = gumbel::argmax(&soft.value()) as u32;
            if token == self.cfg.end_token {
                break;
            }
            let feedback = match mode {
                EstimatorMode::StraightThrough => {
                    self.lm.embed_soft(graph, params, &soft.straight_through()?)?
                }
                EstimatorMode::Soft => self.lm.embed_soft(graph, params, &soft)?,
            };
            input_rows.push(feedback);
            hard.push(token);
            rows.push(soft);
        }
        Ok(SoftTokenSequence { rows, hard })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn lm_cfg(vocab: usize, lm_dim: usize, seed: u64) -> ToyLmConfig {
        ToyLmConfig {
            vocabulary_size: vocab,
            lm_dim,
            hidden: 8,
            max_positions: 24,
            seed,
        }
    }

    fn model_cfg(kind: MapperKind, k: usize, input_dim: usize, lm_dim: usize, end: u32) -> CaptionModelConfig {
        CaptionModelConfig {
            mapper: MappingNetworkConfig {
                kind,
                prefix_length: k,
                input_dim,
                lm_dim,
                mlp_hidden: 8,
                tf_layers: 2,
                tf_heads: 2,
                activation: Activation::Tanh,
            },
            finetune_lm: false,
            max_caption_length: 8,
            end_token: end,
        }
    }

    fn toy_model(seed: u64, vocab: usize, kind: MapperKind) -> (CaptionModel, ParamStore) {
        let lm = ToyLm::new(lm_cfg(vocab, 6, seed ^ 0x5eed), false).unwrap();
        let model = CaptionModel::new(
            model_cfg(kind, 3, 4, 6, (vocab - 1) as u32),
            Box::new(lm),
        )
        .unwrap();
        let params = model.init_params(seed);
        (model, params)
    }

    fn unit_image(dim: usize) -> EmbeddingVector {
        let mut values = vec![0.0f32; dim];
        values[0] = 0.6;
        values[1] = 0.8;
        EmbeddingVector::new(values).unwrap()
    }

    /// Scripted LM: logits are a pure function of the decoded content
    /// tokens. lm_dim equals the vocabulary and token embeddings are one-hot
    /// rows, so the script can recover ids from input rows.
    struct RiggedLm {
        vocab: usize,
        prefix_k: usize,
        script: Box<dyn Fn(&[u32]) -> Vec<f64> + Send + Sync>,
    }

    impl LanguageModel for RiggedLm {
        fn vocabulary_size(&self) -> usize {
            self.vocab
        }
        fn lm_dim(&self) -> usize {
            self.vocab
        }
        fn finetunable(&self) -> bool {
            false
        }
        fn init_params(&self, _store: &mut ParamStore) {}
        fn token_embedding(&self, graph: &Graph, _p: &BoundParams, token: u32) -> Result<Tensor> {
            let mut row = vec![0.0; self.vocab];
            row[token as usize] = 1.0;
            Ok(graph.row(row))
        }
        fn embed_soft(&self, _g: &Graph, _p: &BoundParams, soft: &Tensor) -> Result<Tensor> {
            Ok(soft.clone())
        }
        fn next_logits(&self, graph: &Graph, _p: &BoundParams, inputs: &Tensor) -> Result<Tensor> {
            let values = inputs.value();
            let tokens: Vec<u32> = (self.prefix_k..inputs.rows())
                .map(|r| {
                    let row = &values[r * self.vocab..(r + 1) * self.vocab];
                    gumbel::argmax(row) as u32
                })
                .collect();
            Ok(graph.row((self.script)(&tokens)))
        }
    }

    fn rigged_model(
        vocab: usize,
        end: u32,
        max_len: usize,
        script: impl Fn(&[u32]) -> Vec<f64> + Send + Sync + 'static,
    ) -> (CaptionModel, ParamStore, PrefixEmbeddings) {
        let k = 2;
        let lm = RiggedLm {
            vocab,
            prefix_k: k,
            script: Box::new(script),
        };
        let mut cfg = model_cfg(MapperKind::Mlp, k, 4, vocab, end);
        cfg.max_caption_length = max_len;
        let model = CaptionModel::new(cfg, Box::new(lm)).unwrap();
        let params = model.init_params(1);
        let prefix = PrefixEmbeddings::new(vec![0.0; k * vocab], k, vocab).unwrap();
        (model, params, prefix)
    }

    #[test]
    fn zero_mlp_mapper_yields_zero_prefix() {
        let (model, mut params) = toy_model(5, 6, MapperKind::Mlp);
        for name in ["mapper.mlp.w1", "mapper.mlp.b1", "mapper.mlp.w2", "mapper.mlp.b2"] {
            let p = params.get_mut(name).unwrap();
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
        assert!(prefix.values().iter().all(|&v| v == 0.0));
        assert_eq!(prefix.k(), 3);
        assert_eq!(prefix.lm_dim(), 6);
    }

    #[test]
    fn map_prefix_is_deterministic() {
        for kind in [MapperKind::Mlp, MapperKind::Transformer] {
            let (model, params) = toy_model(9, 6, kind);
            let a = model.map_prefix(&params, &unit_image(4)).unwrap();
            let b = model.map_prefix(&params, &unit_image(4)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identity_initialized_mlp_reproduces_input() {
        let lm = ToyLm::new(lm_cfg(6, 4, 3), false).unwrap();
        let mut cfg = model_cfg(MapperKind::Mlp, 1, 4, 4, 5);
        cfg.mapper.mlp_hidden = 4;
        cfg.mapper.activation = Activation::Identity;
        let model = CaptionModel::new(cfg, Box::new(lm)).unwrap();
        let mut params = model.init_params(0);
        params.insert("mapper.mlp.w1", Param::identity(4));
        params.insert("mapper.mlp.b1", Param::zeros(1, 4));
        params.insert("mapper.mlp.w2", Param::identity(4));
        params.insert("mapper.mlp.b2", Param::zeros(1, 4));
        let v = EmbeddingVector::new(vec![0.25, -0.5, 1.0, 2.0]).unwrap();
        let prefix = model.map_prefix(&params, &v).unwrap();
        assert_eq!(prefix.values(), &[0.25, -0.5, 1.0, 2.0]);
    }

    #[test]
    fn prefix_shape_holds_for_both_mapper_kinds() {
        for kind in [MapperKind::Mlp, MapperKind::Transformer] {
            let (model, params) = toy_model(11, 7, kind);
            let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
            assert_eq!(prefix.values().len(), 3 * 6);
        }
    }

    #[test]
    fn mapper_rejects_wrong_image_dimension() {
        let (model, params) = toy_model(13, 6, MapperKind::Mlp);
        assert!(matches!(
            model.map_prefix(&params, &unit_image(5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_head_toy_lm_gives_zero_logits() {
        let lm = ToyLm::new(lm_cfg(6, 6, 21), true).unwrap();
        let model = CaptionModel::new(model_cfg(MapperKind::Mlp, 3, 4, 6, 5), Box::new(lm)).unwrap();
        let mut params = model.init_params(21);
        for name in ["lm.head.w2", "lm.head.b2"] {
            let p = params.get_mut(name).unwrap();
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
        let logits = model
            .next_token_logits(&params, &prefix, &TokenSequence::new(vec![1, 4]))
            .unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn next_token_logits_is_deterministic_and_softmax_normalized() {
        for seed in 0..20 {
            let (model, params) = toy_model(seed, 6, MapperKind::Mlp);
            let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
            let tokens = TokenSequence::new(vec![0, 3, 2]);
            let a = model.next_token_logits(&params, &prefix, &tokens).unwrap();
            let b = model.next_token_logits(&params, &prefix, &tokens).unwrap();
            assert_eq!(a, b);

            let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = a.iter().map(|l| (l - max).exp()).sum();
            let probs: f64 = a.iter().map(|l| (l - max).exp() / sum).sum();
            assert!((probs - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn next_token_logits_rejects_out_of_range_token() {
        let (model, params) = toy_model(2, 6, MapperKind::Mlp);
        let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
        assert!(matches!(
            model.next_token_logits(&params, &prefix, &TokenSequence::new(vec![6])),
            Err(Error::Vocabulary { token: 6, .. })
        ));
    }

    #[test]
    fn greedy_stops_immediately_when_end_dominates() {
        let (model, params, prefix) = rigged_model(4, 3, 8, |_| vec![0.0, 0.0, 0.0, 10.0]);
        let out = model.generate_greedy(&params, &prefix, 8).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_respects_length_cap() {
        let (model, params, prefix) = rigged_model(4, 3, 8, |_| vec![10.0, 0.0, 0.0, 0.0]);
        let one = model.generate_greedy(&params, &prefix, 1).unwrap();
        assert_eq!(one.ids(), &[0]);
        let three = model.generate_greedy(&params, &prefix, 3).unwrap();
        assert_eq!(three.ids(), &[0, 0, 0]);
    }

    #[test]
    fn greedy_follows_stepwise_argmax() {
        // token (step mod 3) dominates each step; end token 4 never wins
        let (model, params, prefix) = rigged_model(5, 4, 3, |tokens| {
            let mut l = vec![0.0; 5];
            l[tokens.len() % 3] = 10.0;
            l
        });
        let out = model.generate_greedy(&params, &prefix, 3).unwrap();
        assert_eq!(out.ids(), &[0, 1, 2]);
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_id() {
        let (model, params, prefix) = rigged_model(4, 3, 2, |tokens| {
            if tokens.is_empty() {
                vec![5.0, 5.0, 0.0, 0.0]
            } else {
                vec![0.0, 0.0, 0.0, 10.0]
            }
        });
        let out = model.generate_greedy(&params, &prefix, 2).unwrap();
        assert_eq!(out.ids(), &[0]);
    }

    #[test]
    fn decoding_rejects_degenerate_limits() {
        let (model, params) = toy_model(3, 6, MapperKind::Mlp);
        let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
        assert!(matches!(
            model.generate_greedy(&params, &prefix, 0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            model.generate_beam(&params, &prefix, 0, 4),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            model.generate_beam(&params, &prefix, 2, 0),
            Err(Error::Parameter(_))
        ));
        let g = Graph::new();
        let bound = params.bind(&g);
        let pt = prefix.to_tensor(&g);
        assert!(matches!(
            model.generate_differentiable(
                &g,
                &bound,
                &pt,
                0,
                Temperature::default(),
                EstimatorMode::StraightThrough,
                None,
            ),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn beam_width_one_equals_greedy_on_random_models() {
        for seed in 0..100 {
            let vocab = 4 + (seed % 4) as usize;
            let (model, params) = toy_model(seed, vocab, MapperKind::Mlp);
            let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
            let greedy = model.generate_greedy(&params, &prefix, 6).unwrap();
            let beam = model.generate_beam(&params, &prefix, 1, 6).unwrap();
            assert_eq!(greedy, beam, "seed {seed}");
        }
    }

    /// Exhaustive search over content sequences, scored identically to
    /// generate_beam (independent of its hypothesis bookkeeping).
    fn enumerate_best(
        model: &CaptionModel,
        params: &ParamStore,
        prefix: &PrefixEmbeddings,
        max_len: usize,
    ) -> (Vec<u32>, f64) {
        let vocab = model.vocabulary_size();
        let end = model.end_token();
        let log_probs = |tokens: &[u32]| -> Vec<f64> {
            let logits = model
                .next_token_logits(params, prefix, &TokenSequence::new(tokens.to_vec()))
                .unwrap();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            logits.iter().map(|l| l - lse).collect()
        };
        let content: Vec<u32> = (0..vocab as u32).filter(|&t| t != end).collect();
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut consider = |tokens: Vec<u32>, score: f64| {
            let better = match &best {
                None => true,
                Some((bt, bs)) => score > *bs || (score == *bs && tokens < *bt),
            };
            if better {
                best = Some((tokens, score));
            }
        };
        let mut stack: Vec<Vec<u32>> = vec![Vec::new()];
        while let Some(seq) = stack.pop() {
            let mut sum = 0.0;
            for j in 0..seq.len() {
                sum += log_probs(&seq[..j])[seq[j] as usize];
            }
            if seq.len() < max_len {
                let end_lp = log_probs(&seq)[end as usize];
                consider(seq.clone(), (sum + end_lp) / (seq.len() + 1) as f64);
                for &t in &content {
                    let mut next = seq.clone();
                    next.push(t);
                    stack.push(next);
                }
            } else {
                consider(seq.clone(), sum / max_len as f64);
            }
        }
        best.unwrap()
    }

    #[test]
    fn wide_beam_attains_enumerated_optimum() {
        for seed in 0..15 {
            let vocab = 3 + (seed % 2) as usize;
            let max_len = 3;
            let (model, params) = toy_model(1000 + seed, vocab, MapperKind::Mlp);
            let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
            let width = vocab.pow(max_len as u32);
            let beam = model.generate_beam(&params, &prefix, width, max_len).unwrap();
            let (best_tokens, best_score) = enumerate_best(&model, &params, &prefix, max_len);
            assert_eq!(
                beam.ids(),
                best_tokens.as_slice(),
                "seed {seed}: beam missed the enumerated optimum {best_score}"
            );
        }
    }

    #[test]
    fn beam_escapes_a_greedy_trap() {
        // a=0, b=1, end=2. Greedy takes a then ends; the higher-scoring
        // completion starts with b.
        let (model, params, prefix) = rigged_model(3, 2, 2, |tokens| {
            let p: [f64; 3] = match tokens {
                [] => [0.48, 0.47, 0.05],
                [0] => [0.10, 0.10, 0.80],
                [1] => [0.90, 0.05, 0.05],
                _ => [0.05, 0.05, 0.90],
            };
            p.iter().map(|x| x.ln()).collect()
        });
        let greedy = model.generate_greedy(&params, &prefix, 2).unwrap();
        assert_eq!(greedy.ids(), &[0]);
        let beam = model.generate_beam(&params, &prefix, 2, 2).unwrap();
        assert_eq!(beam.ids(), &[1, 0]);
        let (best_tokens, _) = enumerate_best(&model, &params, &prefix, 2);
        assert_eq!(beam.ids(), best_tokens.as_slice());
    }

    #[test]
    fn straight_through_decoding_with_zero_noise_matches_greedy() {
        for seed in 0..20 {
            let (model, params) = toy_model(300 + seed, 6, MapperKind::Mlp);
            let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
            let greedy = model.generate_greedy(&params, &prefix, 5).unwrap();

            let g = Graph::new();
            let bound = params.bind(&g);
            let pt = prefix.to_tensor(&g);
            for tau in [1.0, 0.01] {
                let soft = model
                    .generate_differentiable(
                        &g,
                        &bound,
                        &pt,
                        5,
                        Temperature::new(tau).unwrap(),
                        EstimatorMode::StraightThrough,
                        None,
                    )
                    .unwrap();
                assert_eq!(soft.hard(), &greedy, "seed {seed}, tau {tau}");
            }
        }
    }

    #[test]
    fn soft_rows_are_normalized_probability_vectors() {
        let (model, params) = toy_model(41, 6, MapperKind::Mlp);
        let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
        let g = Graph::new();
        let bound = params.bind(&g);
        let pt = prefix.to_tensor(&g);
        let mut rng = SeededRng::from_seed_u64(7);
        let soft = model
            .generate_differentiable(
                &g,
                &bound,
                &pt,
                5,
                Temperature::default(),
                EstimatorMode::StraightThrough,
                Some(&mut rng),
            )
            .unwrap();
        assert_eq!(soft.len(), soft.hard().len());
        for row in soft.rows() {
            let v = row.value();
            let sum: f64 = v.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn differentiable_decoding_is_reproducible_from_the_seed() {
        let (model, params) = toy_model(43, 6, MapperKind::Mlp);
        let prefix = model.map_prefix(&params, &unit_image(4)).unwrap();
        let run = |seed: u64| -> (Vec<Vec<f64>>, TokenSequence) {
            let g = Graph::new();
            let bound = params.bind(&g);
            let pt = prefix.to_tensor(&g);
            let mut rng = SeededRng::from_seed_u64(seed);
            let soft = model
                .generate_differentiable(
                    &g,
                    &bound,
                    &pt,
                    6,
                    Temperature::default(),
                    EstimatorMode::StraightThrough,
                    Some(&mut rng),
                )
                .unwrap();
            (
                soft.rows().iter().map(|r| r.value().as_ref().clone()).collect(),
                soft.hard().clone(),
            )
        };
        let (rows_a, hard_a) = run(99);
        let (rows_b, hard_b) = run(99);
        assert_eq!(rows_a, rows_b);
        assert_eq!(hard_a, hard_b);
        let (rows_c, _) = run(100);
        assert_ne!(rows_a, rows_c);
    }

    #[test]
    fn immediate_end_yields_empty_soft_sequence() {
        let (model, params, prefix) = rigged_model(4, 3, 8, |_| vec![0.0, 0.0, 0.0, 10.0]);
        let g = Graph::new();
        let bound = params.bind(&g);
        let pt = prefix.to_tensor(&g);
        let soft = model
            .generate_differentiable(
                &g,
                &bound,
                &pt,
                8,
                Temperature::default(),
                EstimatorMode::StraightThrough,
                None,
            )
            .unwrap();
        assert!(soft.is_empty());
        assert!(soft.hard().is_empty());
    }

    /// Finite-difference check of d(loss)/d(mapper params) through the soft
    /// decoding path, parameters held as f64 tensors.
    fn fd_check_mapper(kind: MapperKind, tol: f64) {
        let vocab = 6;
        let lm = ToyLm::new(lm_cfg(vocab, 6, 77), false).unwrap();
        let mut cfg = model_cfg(kind, 2, 4, 6, (vocab - 1) as u32);
        cfg.mapper.mlp_hidden = 5;
        cfg.mapper.tf_layers = 1;
        let model = CaptionModel::new(cfg, Box::new(lm)).unwrap();
        let store = model.init_params(123);
        let image = unit_image(4);
        let noise_rng = SeededRng::from_seed_u64(5);
        let noise_state = noise_rng.state();

        // Flatten the store to f64 so perturbations are exact.
        let groups: Vec<(String, usize, usize, Vec<f64>)> = store
            .iter()
            .map(|(n, p)| {
                (
                    n.clone(),
                    p.rows,
                    p.cols,
                    p.values.iter().map(|&v| v as f64).collect(),
                )
            })
            .collect();

        let forward = |vals: &[Vec<f64>], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
            let g = Graph::new();
            let mut bound = BoundParams::empty();
            let mut handles = Vec::new();
            for ((name, rows, cols, _), v) in groups.iter().zip(vals) {
                let t = g.tensor(*rows, *cols, v.clone());
                bound.insert(name.clone(), t.clone());
                handles.push(t);
            }
            let vt = g.row(image.to_f64());
            let prefix = model.map_prefix_graph(&g, &bound, &vt).unwrap();
            let mut rng = SeededRng::restore(&noise_state);
            let soft = model
                .generate_differentiable(
                    &g,
                    &bound,
                    &prefix,
                    3,
                    Temperature::default(),
                    EstimatorMode::Soft,
                    Some(&mut rng),
                )
                .unwrap();
            assert!(!soft.is_empty());
            let mut loss: Option<Tensor> = None;
            for (i, row) in soft.rows().iter().enumerate() {
                let w: Vec<f64> = (0..vocab).map(|j| ((i * vocab + j) as f64 * 0.37).sin()).collect();
                let term = row.dot(&g.row(w));
                loss = Some(match loss {
                    None => term,
                    Some(prev) => prev.add(&term),
                });
            }
            let loss = loss.unwrap();
            if !want_grads {
                return (loss.scalar_value(), Vec::new());
            }
            let grads = g.backward(&loss);
            let out = handles
                .iter()
                .map(|h| grads.get(h).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; h.shape().numel()]))
                .collect();
            (loss.scalar_value(), out)
        };

        let base: Vec<Vec<f64>> = groups.iter().map(|(_, _, _, v)| v.clone()).collect();
        let (_, analytic) = forward(&base, true);

        let h = 1e-5;
        let mut rng = SeededRng::from_seed_u64(91);
        for (gi, (name, _, _, vals)) in groups.iter().enumerate() {
            if !name.starts_with("mapper.") {
                continue;
            }
            // spot-check a few coordinates per group
            for _ in 0..3.min(vals.len()) {
                let ci = rng.below(vals.len() as u64) as usize;
                let mut plus = base.clone();
                plus[gi][ci] += h;
                let mut minus = base.clone();
                minus[gi][ci] -= h;
                let numeric = (forward(&plus, false).0 - forward(&minus, false).0) / (2.0 * h);
                let a = analytic[gi][ci];
                let denom = numeric.abs().max(a.abs()).max(1e-8);
                assert!(
                    (numeric - a).abs() / denom < tol,
                    "{name}[{ci}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn mapper_gradients_match_finite_differences_mlp() {
        fd_check_mapper(MapperKind::Mlp, 1e-3);
    }

    #[test]
    fn mapper_gradients_match_finite_differences_transformer() {
        fd_check_mapper(MapperKind::Transformer, 1e-3);
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        assert!(MappingNetworkConfig {
            kind: MapperKind::Transformer,
            lm_dim: 6,
            tf_heads: 4,
            ..Default::default()
        }
        .validate()
        .is_err());

        let lm = ToyLm::new(lm_cfg(6, 6, 0), false).unwrap();
        // end token outside the vocabulary
        assert!(CaptionModel::new(model_cfg(MapperKind::Mlp, 3, 4, 6, 6), Box::new(lm)).is_err());

        // finetune requested on a frozen LM
        let lm = ToyLm::new(lm_cfg(6, 6, 0), false).unwrap();
        let mut cfg = model_cfg(MapperKind::Mlp, 3, 4, 6, 5);
        cfg.finetune_lm = true;
        assert!(matches!(
            CaptionModel::new(cfg, Box::new(lm)),
            Err(Error::Capability { .. })
        ));

        // prefix + caption exceeding LM positions
        let lm = ToyLm::new(
            ToyLmConfig {
                max_positions: 5,
                ..lm_cfg(6, 6, 0)
            },
            false,
        )
        .unwrap();
        assert!(CaptionModel::new(model_cfg(MapperKind::Mlp, 3, 4, 6, 5), Box::new(lm)).is_err());
    }

    #[test]
    fn prefix_embeddings_validate_shape_and_finiteness() {
        assert!(PrefixEmbeddings::new(vec![0.0; 5], 2, 3).is_err());
        assert!(PrefixEmbeddings::new(vec![0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0], 2, 3).is_err());
        assert!(PrefixEmbeddings::new(vec![0.0; 6], 2, 3).is_ok());
    }
}
