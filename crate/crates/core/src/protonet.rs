//! Prototypical few-shot classifier over the samples a collection plan
//! gathers.
//!
//! Every plan state contributes one `3 x 120 x 160` image; a sample is the
//! channel-wise stack of those images in plan order. Class prototypes are
//! mean embeddings of the support samples and queries are scored by negative
//! squared distance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::{
    derive_seed, field_perturb, generate_sample, shot_seed, CollectionState, Condition, EnvError, FieldPerturbation,
    Provenance, RawSample,
};
use crate::tensor::{
    fingerprint, read_weights, write_weights, Graph, LayerSpec, Mode, NamedTensor, Network, Optimizer,
    OptimizerKind, Tensor, TensorError,
};

pub const EMBEDDING_DIM: usize = 128;
pub const INPUT_HEIGHT: usize = 120;
pub const INPUT_WIDTH: usize = 160;
const CONV_CHANNELS: [usize; 4] = [16, 32, 32, 64];
const HIDDEN: usize = 256;
const OUTPUT_INIT_SCALE: f32 = 0.1;
const PROTOTYPES: &str = "prototypes";

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("cannot stack: {0}")]
    Stack(String),
    #[error("class {0} has no support samples")]
    EmptySupport(usize),
    #[error("not enough samples to form an episode: {0}")]
    InsufficientSamples(String),
    #[error("embedding has {got} values, prototypes have {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Model(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ProtoError>;

/// Stacks per-state samples along channels: `k x [3, H, W] -> [3k, H, W]`.
pub fn stack_multimodal(samples: &[&Tensor]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| ProtoError::Stack("no samples".into()))?;
    if first.rank() != 3 || first.shape()[0] != 3 {
        return Err(ProtoError::Stack(format!("expected [3, H, W], got {:?}", first.shape())));
    }
    if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
        return Err(ProtoError::Stack(format!("{:?} does not match {:?}", bad.shape(), first.shape())));
    }
    Ok(Tensor::concat(&samples.iter().map(|&s| s.clone()).collect::<Vec<_>>())?)
}

/// Four conv/batch-norm/relu/pool blocks, then two linear layers down to
/// [`EMBEDDING_DIM`].
#[derive(Clone, Debug)]
pub struct EmbeddingNetwork {
    net: Network,
    stacked: usize,
}

impl EmbeddingNetwork {
    /// Network for inputs stacking `stacked` plan states.
    pub fn new<R: Rng + ?Sized>(stacked: usize, rng: &mut R) -> Result<Self> {
        if stacked == 0 {
            return Err(ProtoError::Config("at least one stacked input".into()));
        }
        let mut specs = Vec::new();
        let mut in_channels = 3 * stacked;
        for out_channels in CONV_CHANNELS {
            specs.push(LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            specs.push(LayerSpec::batch_norm(out_channels));
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::MaxPool2x2);
            in_channels = out_channels;
        }
        specs.push(LayerSpec::Flatten);
        let mut shape = vec![1, 3 * stacked, INPUT_HEIGHT, INPUT_WIDTH];
        for spec in &specs {
            shape = spec.output_shape(&shape)?;
        }
        let flat = shape[1];
        specs.extend([
            LayerSpec::Linear {
                in_features: flat,
                out_features: HIDDEN,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                in_features: HIDDEN,
                out_features: EMBEDDING_DIM,
            },
        ]);
        let mut net = Network::new(specs, rng)?;
        // Start with embeddings close together so an untrained model is
        // near-uniform over classes.
        for p in net.parameters_mut().into_iter().rev().take(2) {
            p.value.data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
        }
        Ok(Self { net, stacked })
    }

    pub fn stacked(&self) -> usize {
        self.stacked
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    fn batch(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let expected = [3 * self.stacked, INPUT_HEIGHT, INPUT_WIDTH];
        if let Some(bad) = inputs.iter().find(|t| t.shape() != expected) {
            return Err(ProtoError::Stack(format!("expected {expected:?}, got {:?}", bad.shape())));
        }
        Ok(Tensor::stack(&inputs.iter().map(|&t| t.clone()).collect::<Vec<_>>())?)
    }

    /// `[N, 128]` embeddings using batch-norm running statistics.
    pub fn embed(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(self.net.predict(&self.batch(inputs)?)?)
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.net.named_tensors()
    }
}

/// Mean embedding per class. `labels[i]` is the class of row `i`.
pub fn prototypes(embeddings: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let (n, d) = rows(embeddings)?;
    if labels.len() != n {
        return Err(ProtoError::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    let mut sums = vec![0.0f64; classes * d];
    let mut counts = vec![0usize; classes];
    for (row, &label) in embeddings.data().chunks(d).zip(labels) {
        if label >= classes {
            return Err(ProtoError::Config(format!("label {label} out of {classes} classes")));
        }
        counts[label] += 1;
        sums[label * d..(label + 1) * d].iter_mut().zip(row).for_each(|(s, &v)| *s += v as f64);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(ProtoError::EmptySupport(empty));
    }
    let data = sums
        .chunks(d)
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |&s| (s / c as f64) as f32))
        .collect();
    Ok(Tensor::new(vec![classes, d], data)?)
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(ProtoError::Stack(format!("expected [N, D], got {:?}", t.shape()))),
    }
}

/// Log-probabilities over classes from negative squared distances.
pub fn classify(query: &[f32], prototypes: &Tensor) -> Result<Vec<f64>> {
    let (c, d) = rows(prototypes)?;
    if query.len() != d || c == 0 {
        return Err(ProtoError::Dimension {
            expected: d,
            got: query.len(),
        });
    }
    let logits: Vec<f64> = prototypes
        .data()
        .chunks(d)
        .map(|p| -p.iter().zip(query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&l| l - lse).collect())
}

/// First index of the largest value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.iter().any(|r| r.len() != counts.len()) {
            return Err(ProtoError::Config("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

/// Per-class precision `TP / (TP + FP)` and recall `TP / (TP + FN)`, zero
/// when the denominator is zero, and their unweighted means.
pub fn precision_recall(confusion: &ConfusionMatrix) -> Result<Metrics> {
    let m = confusion.classes();
    if m == 0 {
        return Err(ProtoError::EmptyMatrix);
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<ClassMetrics> = (0..m)
        .map(|k| {
            let tp = confusion.get(k, k);
            let predicted: u64 = (0..m).map(|t| confusion.get(t, k)).sum();
            let actual: u64 = confusion.counts[k].iter().sum();
            ClassMetrics {
                precision: ratio(tp, predicted),
                recall: ratio(tp, actual),
            }
        })
        .collect();
    Ok(Metrics {
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / m as f64,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / m as f64,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Augmented queries drawn per class in each episode.
    pub queries_per_class: usize,
    /// Augmented copies generated per class ahead of training.
    pub query_pool: usize,
    /// Field shots per condition used for evaluation.
    pub eval_shots: usize,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 2e-4,
            queries_per_class: 2,
            query_pool: 6,
            eval_shots: 3,
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.queries_per_class == 0 || self.eval_shots == 0 {
            return Err(ProtoError::Config("epochs, queries and shots must be positive".into()));
        }
        if self.query_pool < self.queries_per_class {
            return Err(ProtoError::InsufficientSamples(format!(
                "pool of {} cannot supply {} queries per class",
                self.query_pool, self.queries_per_class
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ProtoError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One support example per condition plus a pool of augmented queries.
#[derive(Clone, Debug)]
pub struct FewShotTask {
    pub states: Vec<CollectionState>,
    /// Stacked Virtual sample per condition.
    pub support: Vec<Tensor>,
    /// Per condition, stacked field-perturbed copies of the support sample.
    pub queries: Vec<Vec<Tensor>>,
}

impl FewShotTask {
    /// Virtual data for `states` under `seed`, with `pool` augmented queries
    /// per condition drawn from a stream disjoint from Field captures.
    pub fn generate(states: &[CollectionState], seed: u64, pool: usize) -> Result<Self> {
        if states.is_empty() {
            return Err(ProtoError::InsufficientSamples("no plan states".into()));
        }
        let field = FieldPerturbation::default();
        let mut support = Vec::new();
        let mut queries = Vec::new();
        for condition in Condition::ALL {
            let raw: Vec<RawSample> = states
                .iter()
                .map(|&s| generate_sample(s, condition, Provenance::Virtual, seed))
                .collect();
            support.push(stack_preprocessed(&raw)?);
            let mut copies = Vec::with_capacity(pool);
            for copy in 0..pool {
                let perturbed: Vec<RawSample> = raw
                    .iter()
                    .map(|r| {
                        let stream = derive_seed(seed, &[0xA06, r.state.index() as u64, condition.index() as u64, copy as u64]);
                        RawSample {
                            payload: field_perturb(&r.payload, stream, &field),
                            ..r.clone()
                        }
                    })
                    .collect();
                copies.push(stack_preprocessed(&perturbed)?);
            }
            queries.push(copies);
        }
        Ok(Self {
            states: states.to_vec(),
            support,
            queries,
        })
    }
}

fn stack_preprocessed(raw: &[RawSample]) -> Result<Tensor> {
    let tensors = raw.iter().map(RawSample::preprocess).collect::<std::result::Result<Vec<_>, _>>()?;
    stack_multimodal(&tensors.iter().collect::<Vec<_>>())
}

/// Stacked Field captures of `states`: `shots` per condition, labelled by
/// condition index.
pub fn field_queries(states: &[CollectionState], seed: u64, shots: usize) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::with_capacity(Condition::ALL.len() * shots);
    for condition in Condition::ALL {
        for shot in 0..shots {
            let raw: Vec<RawSample> = states
                .iter()
                .map(|&s| generate_sample(s, condition, Provenance::Field, shot_seed(seed, shot)))
                .collect();
            out.push((stack_preprocessed(&raw)?, condition.index()));
        }
    }
    Ok(out)
}

/// A trained embedding network with the prototypes of its support set.
#[derive(Clone, Debug)]
pub struct ProtoModel {
    pub network: EmbeddingNetwork,
    pub prototypes: Tensor,
}

impl ProtoModel {
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = self.network.named_tensors();
        out.push(NamedTensor::new(PROTOTYPES, self.prototypes.clone()));
        out
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.named_tensors())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_weights(path, &self.named_tensors())?)
    }

    /// Loads a model stacking `stacked` plan states.
    pub fn load(path: &Path, stacked: usize) -> Result<Self> {
        let entries = read_weights(path).map_err(|e| ProtoError::Model(format!("{}: {e}", path.display())))?;
        Self::from_named(&entries, stacked)
    }

    pub fn from_named(entries: &[NamedTensor], stacked: usize) -> Result<Self> {
        let (protos, weights): (Vec<_>, Vec<_>) = entries.iter().cloned().partition(|e| e.name == PROTOTYPES);
        let prototypes = protos
            .into_iter()
            .next()
            .ok_or_else(|| ProtoError::Model("no prototypes tensor".into()))?
            .tensor;
        if prototypes.shape() != [Condition::ALL.len(), EMBEDDING_DIM] {
            return Err(ProtoError::Model(format!("prototypes have shape {:?}", prototypes.shape())));
        }
        let mut network = EmbeddingNetwork::new(stacked, &mut ChaCha8Rng::seed_from_u64(0))?;
        network
            .net
            .load_named(&weights)
            .map_err(|e| ProtoError::Model(e.to_string()))?;
        Ok(Self { network, prototypes })
    }

    /// Log-probabilities of each condition for one stacked sample.
    pub fn log_probs(&self, input: &Tensor) -> Result<Vec<f64>> {
        let emb = self.network.embed(&[input])?;
        classify(emb.data(), &self.prototypes)
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(argmax(&self.log_probs(input)?))
    }
}

#[derive(Clone, Debug)]
pub struct ProtoTraining {
    pub model: ProtoModel,
    /// Query loss of each epoch.
    pub losses: Vec<f64>,
}

/// Episodic training: every epoch embeds the support set with a fresh draw
/// of queries, builds prototypes, and steps Adam on the query NLL.
pub fn train_protonet(task: &FewShotTask, config: &ProtoConfig, seed: u64) -> Result<ProtoTraining> {
    config.validate()?;
    let classes = task.support.len();
    if classes == 0 || task.queries.iter().any(|q| q.len() < config.queries_per_class) {
        return Err(ProtoError::InsufficientSamples(format!(
            "need {} queries for each of {classes} classes",
            config.queries_per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7047]));
    let mut network = EmbeddingNetwork::new(task.states.len(), &mut rng)?;
    let mut optimizer = Optimizer::new(OptimizerKind::adam_fewshot(), config.learning_rate);
    let support_groups: Vec<Vec<usize>> = (0..classes).map(|c| vec![c]).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut inputs: Vec<&Tensor> = task.support.iter().collect();
        let mut targets = Vec::new();
        for (class, pool) in task.queries.iter().enumerate() {
            for i in sample_indices(&mut rng, pool.len(), config.queries_per_class) {
                inputs.push(&pool[i]);
                targets.push(class);
            }
        }
        let query_rows: Vec<usize> = (classes..inputs.len()).collect();
        let batch = network.batch(&inputs)?;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let (emb, binding) = network.net.forward(&mut g, x, Mode::Train)?;
        let protos = g.group_means(emb, &support_groups)?;
        let queries = g.select_rows(emb, &query_rows)?;
        let dist = g.sq_dist(queries, protos)?;
        let logits = g.scale(dist, -1.0)?;
        let log_probs = g.log_softmax(logits)?;
        let loss = g.nll_loss(log_probs, &targets)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(ProtoError::Config(format!("loss diverged to {value}")));
        }
        losses.push(value);
        g.backward(loss)?;
        network.net.absorb_grads(&g, &binding);
        optimizer.step(&mut network.net.parameters_mut())?;
        network.net.zero_grad();
    }
    let support: Vec<&Tensor> = task.support.iter().collect();
    let embeddings = network.embed(&support)?;
    let prototypes = prototypes(&embeddings, &(0..classes).collect::<Vec<_>>(), classes)?;
    Ok(ProtoTraining {
        model: ProtoModel { network, prototypes },
        losses,
    })
}

/// Metrics of one model on labelled stacked samples, shaped for reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub precision: f64,
    pub recall: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(model: &ProtoModel, queries: &[(Tensor, usize)]) -> Result<EvaluationReport> {
    let classes = model.prototypes.shape()[0];
    let mut confusion = ConfusionMatrix::new(classes);
    for (input, truth) in queries {
        confusion.record(*truth, model.predict(input)?);
    }
    let metrics = precision_recall(&confusion)?;
    Ok(EvaluationReport {
        precision: metrics.macro_precision,
        recall: metrics.macro_recall,
        per_class: Condition::ALL
            .iter()
            .zip(&metrics.per_class)
            .map(|(c, m)| (c.slug().to_string(), *m))
            .collect(),
        confusion,
    })
}
