//! The two training objectives.
//!
//! Supervised: next-token cross-entropy summed over the batch and over
//! caption positions (a double sum, no averaging). Unsupervised: the
//! negative sum of image-caption cosine similarities, with the image
//! embedding treated as a constant so gradients flow only through the
//! generated caption.

use std::collections::BTreeMap;

use crate::autodiff::{cosine, Graph, Tensor};
use crate::backend::{cosine_similarity, EmbeddingVector, JointEmbeddingBackend};
use crate::captioner::CaptionModel;
use crate::error::{Error, Result};
use crate::gumbel::{EstimatorMode, Temperature};
use crate::params::{BoundParams, ParamStore};
use crate::rng::SeededRng;
use crate::tokens::TokenSequence;

pub struct SupervisedItem {
    pub image: EmbeddingVector,
    /// Target token sequence; the data layer appends the end token before
    /// batching, so stopping is learned like any other prediction.
    pub caption: TokenSequence,
}

pub struct SupervisedBatch {
    items: Vec<SupervisedItem>,
}

impl SupervisedBatch {
    pub fn new(items: Vec<SupervisedItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Parameter(
                "supervised batch must contain at least one item".into(),
            ));
        }
        for (i, item) in items.iter().enumerate() {
            if item.caption.is_empty() {
                return Err(Error::EmptyCaption(format!(
                    "supervised batch item {i} has an empty caption"
                )));
            }
        }
        Ok(SupervisedBatch { items })
    }

    pub fn items(&self) -> &[SupervisedItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty batches
    }
}

/// L = −Σᵢ Σⱼ log p(cⱼⁱ | prefixⁱ, c₁ⁱ…c_{j−1}ⁱ), on the live graph.
pub fn supervised_loss_graph(
    model: &CaptionModel,
    graph: &Graph,
    params: &BoundParams,
    batch: &SupervisedBatch,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for item in batch.items() {
        let vt = graph.row(item.image.to_f64());
        let prefix = model.map_prefix_graph(graph, params, &vt)?;
        let ids = item.caption.ids();
        for j in 0..ids.len() {
            let history = TokenSequence::new(ids[..j].to_vec());
            let logits = model.next_token_logits_graph(graph, params, &prefix, &history)?;
            let lp = logits.row_log_softmax().get(0, ids[j] as usize);
            total = Some(match total {
                None => lp,
                Some(acc) => acc.add(&lp),
            });
        }
    }
    Ok(total.expect("batch is nonempty").neg())
}

/// Value form of [`supervised_loss_graph`] on a scratch graph.
pub fn supervised_loss(
    model: &CaptionModel,
    store: &ParamStore,
    batch: &SupervisedBatch,
) -> Result<f64> {
    let graph = Graph::new();
    let bound = store.bind(&graph);
    Ok(supervised_loss_graph(model, &graph, &bound, batch)?.scalar_value())
}

/// Matched (image, generated-caption) embedding pairs.
pub struct UnsupervisedBatch {
    items: Vec<(EmbeddingVector, EmbeddingVector)>,
}

impl UnsupervisedBatch {
    pub fn new(items: Vec<(EmbeddingVector, EmbeddingVector)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Parameter(
                "unsupervised batch must contain at least one pair".into(),
            ));
        }
        let d = items[0].0.dim();
        for (i, (v, c)) in items.iter().enumerate() {
            if v.dim() != d || c.dim() != d {
                return Err(Error::Shape(format!(
                    "pair {i} has dimensions {}x{}, expected {d}",
                    v.dim(),
                    c.dim()
                )));
            }
        }
        Ok(UnsupervisedBatch { items })
    }

    pub fn items(&self) -> &[(EmbeddingVector, EmbeddingVector)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty batches
    }
}

/// L = −Σᵢ cos(vⁱ, cⁱ).
pub fn unsupervised_loss(batch: &UnsupervisedBatch) -> Result<f64> {
    let mut total = 0.0;
    for (v, c) in batch.items() {
        total += cosine_similarity(v, c)?;
    }
    Ok(-total)
}

/// Outcome of one unsupervised optimization step over a batch of images.
pub struct UnsupervisedStep {
    /// −Σ cos over the images that produced nonempty captions.
    pub loss: f64,
    /// Mean cosine over the same images (0.0 when all were skipped).
    pub mean_cosine: f64,
    /// Number of images contributing to the loss.
    pub used: usize,
    /// Ids of images whose generation ended immediately; excluded from N.
    pub skipped: Vec<String>,
    /// Gradient per parameter group; empty when `used` is 0.
    pub gradients: BTreeMap<String, Vec<f64>>,
}

/// One differentiable generate-then-score pass: map_prefix →
/// generate_differentiable → encode_text_soft → unsupervised loss, returning
/// the loss and its gradient for every bound parameter group.
#[allow(clippy::too_many_arguments)]
pub fn batched_unsupervised_step(
    model: &CaptionModel,
    store: &ParamStore,
    images: &[(String, EmbeddingVector)],
    backend: &dyn JointEmbeddingBackend,
    max_len: usize,
    tau: Temperature,
    mode: EstimatorMode,
    rng: &mut SeededRng,
) -> Result<UnsupervisedStep> {
    if images.is_empty() {
        return Err(Error::Parameter(
            "unsupervised step needs at least one image".into(),
        ));
    }
    if !backend.descriptor().differentiable_text {
        return Err(Error::Capability {
            backend: backend.descriptor().name.clone(),
            capability: "differentiable text encoding".into(),
        });
    }
    let graph = Graph::new();
    let bound = store.bind(&graph);
    let mut cos_terms: Vec<Tensor> = Vec::with_capacity(images.len());
    let mut skipped = Vec::new();
    for (id, image) in images {
        let vt = graph.row(image.to_f64());
        let prefix = model.map_prefix_graph(&graph, &bound, &vt)?;
        let soft =
            model.generate_differentiable(&graph, &bound, &prefix, max_len, tau, mode, Some(rng))?;
        if soft.is_empty() {
            skipped.push(id.clone());
            continue;
        }
        let caption = backend.encode_text_soft(&graph, soft.rows())?;
        cos_terms.push(cosine(&vt, &caption)?);
    }
    if cos_terms.is_empty() {
        return Ok(UnsupervisedStep {
            loss: 0.0,
            mean_cosine: 0.0,
            used: 0,
            skipped,
            gradients: BTreeMap::new(),
        });
    }
    let used = cos_terms.len();
    let cos_sum: f64 = cos_terms.iter().map(Tensor::scalar_value).sum();
    let mut total = cos_terms[0].clone();
    for term in &cos_terms[1..] {
        total = total.add(term);
    }
    let loss_t = total.neg();
    let loss = loss_t.scalar_value();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "unsupervised step produced loss {loss}"
        )));
    }
    let grads = graph.backward(&loss_t);
    Ok(UnsupervisedStep {
        loss,
        mean_cosine: cos_sum / used as f64,
        used,
        skipped,
        gradients: bound.gradients(&grads),
    })
}
