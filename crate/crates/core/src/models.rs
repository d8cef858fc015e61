//! Encoders, classifier and discriminator.
//!
//! The encoder is a bag of embeddings: token rows are looked up, mean-pooled
//! over the sequence, then passed through two ReLU affine layers. Source and
//! target encoders have identical shapes so one can be copied into the other.
//! The discriminator keeps a 1:4 hidden width ratio:
//! `h -> 4h -> leaky_relu(0.01) -> 4h -> leaky_relu(0.01) -> 1 -> sigmoid`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const DISCRIMINATOR_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            embed_dim: 32,
            hidden_dim: 64,
            num_classes: 2,
            max_seq_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_classes", self.num_classes),
            ("max_seq_len", self.max_seq_len),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::invalid(format!("model dimension {name} must be >= 1"))),
            None => Ok(()),
        }
    }
}

/// Glorot-uniform bound for a `fan_in x fan_out` matrix.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot(name: String, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Param {
    let s = glorot_bound(fan_in, fan_out);
    let values = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..=s)).collect();
    Param::new(name, Tensor::param([fan_in, fan_out], values).expect("shape matches"))
}

fn zeros(name: String, n: usize) -> Param {
    Param::new(name, Tensor::param([n], vec![0.0; n]).expect("shape matches"))
}

/// Fully connected layer; weight is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    fn init(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: glorot(format!("{prefix}.weight"), fan_in, fan_out, rng),
            bias: zeros(format!("{prefix}.bias"), fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.tensor)?.add_bias(&self.bias.tensor)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    fn renamed_copy(&self, from: &str, to: &str) -> Linear {
        let copy = |p: &Param| Param::new(p.name.replacen(from, to, 1), p.tensor.deep_copy());
        Linear {
            weight: copy(&self.weight),
            bias: copy(&self.bias),
        }
    }
}

/// Anything that maps a batch of token sequences to `[batch, dim]`.
pub trait SequenceEncoder {
    fn encode_batch(&self, batch: &[&[u32]]) -> Result<Tensor>;
    fn output_dim(&self) -> usize;
    fn params(&self) -> Vec<Param>;

    fn encode(&self, tokens: &[u32]) -> Result<Tensor> {
        let dim = self.output_dim();
        self.encode_batch(&[tokens])?.reshape([dim])
    }
}

/// Mean-pooled embeddings followed by two ReLU layers.
#[derive(Clone, Debug)]
pub struct BagEncoder {
    prefix: String,
    pub embedding: Param,
    pub hidden: Linear,
    pub output: Linear,
    pub max_seq_len: usize,
}

impl BagEncoder {
    fn init(prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        BagEncoder {
            prefix: prefix.to_string(),
            embedding: glorot(format!("{prefix}.embedding"), cfg.vocab_size, cfg.embed_dim, rng),
            hidden: Linear::init(&format!("{prefix}.hidden"), cfg.embed_dim, cfg.hidden_dim, rng),
            output: Linear::init(&format!("{prefix}.output"), cfg.hidden_dim, cfg.hidden_dim, rng),
            max_seq_len: cfg.max_seq_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.tensor.shape()[0]
    }

    /// Independent deep copy whose parameter names carry `prefix`.
    pub fn copy_as(&self, prefix: &str) -> BagEncoder {
        let from = self.prefix.as_str();
        BagEncoder {
            prefix: prefix.to_string(),
            embedding: Param::new(
                self.embedding.name.replacen(from, prefix, 1),
                self.embedding.tensor.deep_copy(),
            ),
            hidden: self.hidden.renamed_copy(from, prefix),
            output: self.output.renamed_copy(from, prefix),
            max_seq_len: self.max_seq_len,
        }
    }
}

impl SequenceEncoder for BagEncoder {
    fn encode_batch(&self, batch: &[&[u32]]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::invalid("encode: empty batch"));
        }
        let vocab = self.vocab_size();
        let mut ids = Vec::with_capacity(batch.iter().map(|s| s.len()).sum());
        let mut offsets = Vec::with_capacity(batch.len() + 1);
        offsets.push(0);
        for (i, seq) in batch.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::invalid(format!("encode: sequence {i} is empty")));
            }
            if seq.len() > self.max_seq_len {
                return Err(Error::invalid(format!(
                    "encode: sequence {i} has {} tokens, limit is {}",
                    seq.len(),
                    self.max_seq_len
                )));
            }
            for &t in seq.iter() {
                if t as usize >= vocab {
                    return Err(Error::invalid(format!(
                        "encode: token id {t} in sequence {i} is outside vocabulary of {vocab}"
                    )));
                }
                ids.push(t as usize);
            }
            offsets.push(ids.len());
        }
        let pooled = self.embedding.tensor.gather_rows(&ids)?.segment_mean(&offsets)?;
        let h = self.hidden.forward(&pooled)?.relu();
        Ok(self.output.forward(&h)?.relu())
    }

    fn output_dim(&self) -> usize {
        self.output.out_dim()
    }

    fn params(&self) -> Vec<Param> {
        let mut p = vec![self.embedding.clone()];
        p.extend(self.hidden.params());
        p.extend(self.output.params());
        p
    }
}

/// Promotes a single representation `[h]` to `[1, h]`.
fn as_batch(rep: &Tensor, dim: usize, what: &'static str) -> Result<(Tensor, bool)> {
    match rep.shape() {
        [d] if *d == dim => Ok((rep.reshape([1, dim])?, true)),
        [_, d] if *d == dim => Ok((rep.clone(), false)),
        _ => Err(Error::Shape {
            op: what,
            shapes: vec![rep.shape().to_vec(), vec![dim]],
        }),
    }
}

/// Affine map from representation to class logits (no softmax).
#[derive(Clone, Debug)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    /// Logits `[B, K]` for `[B, h]` input, or `[K]` for a single `[h]`.
    pub fn logits(&self, rep: &Tensor) -> Result<Tensor> {
        let (x, single) = as_batch(rep, self.linear.in_dim(), "classify_logits")?;
        let z = self.linear.forward(&x)?;
        if single {
            z.reshape([self.linear.out_dim()])
        } else {
            Ok(z)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn params(&self) -> Vec<Param> {
        self.linear.params()
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: [Linear; 3],
}

impl Discriminator {
    /// Probability that each representation came from the source domain:
    /// `[B]` for `[B, h]` input, scalar for a single `[h]`.
    pub fn probability(&self, rep: &Tensor) -> Result<Tensor> {
        let (x, single) = as_batch(rep, self.layers[0].in_dim(), "discriminate")?;
        let a = self.layers[0].forward(&x)?.leaky_relu(DISCRIMINATOR_SLOPE);
        let b = self.layers[1].forward(&a)?.leaky_relu(DISCRIMINATOR_SLOPE);
        let logit = self.layers[2].forward(&b)?;
        let rows = logit.shape()[0];
        let p = logit.sigmoid();
        if single {
            p.reshape(Vec::<usize>::new())
        } else {
            p.reshape([rows])
        }
    }

    /// Layer widths from input to output, e.g. `[h, 4h, 4h, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim()];
        w.extend(self.layers.iter().map(Linear::out_dim));
        w
    }

    pub fn params(&self) -> Vec<Param> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    SourceEncoder,
    TargetEncoder,
    Classifier,
    Discriminator,
}

/// Every trainable piece of one run, plus per-component freeze flags.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub source: BagEncoder,
    pub target: BagEncoder,
    pub classifier: Classifier,
    pub discriminator: Discriminator,
    frozen: [bool; 4],
}

fn slot(c: Component) -> usize {
    match c {
        Component::SourceEncoder => 0,
        Component::TargetEncoder => 1,
        Component::Classifier => 2,
        Component::Discriminator => 3,
    }
}

impl ModelBundle {
    /// Glorot-uniform weights, zero biases; each component draws from its
    /// own stream of `seed`. The target encoder starts as a copy of the
    /// source encoder.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let source = BagEncoder::init("source", cfg, &mut rng::stream(seed, &[tag::INIT_SOURCE]));
        let target = source.copy_as("target");
        let mut crng = rng::stream(seed, &[tag::INIT_CLASSIFIER]);
        let classifier = Classifier {
            linear: Linear::init("classifier", cfg.hidden_dim, cfg.num_classes, &mut crng),
        };
        let mut drng = rng::stream(seed, &[tag::INIT_DISCRIMINATOR]);
        let wide = 4 * cfg.hidden_dim;
        let discriminator = Discriminator {
            layers: [
                Linear::init("discriminator.l1", cfg.hidden_dim, wide, &mut drng),
                Linear::init("discriminator.l2", wide, wide, &mut drng),
                Linear::init("discriminator.l3", wide, 1, &mut drng),
            ],
        };
        Ok(ModelBundle {
            config: cfg.clone(),
            source,
            target,
            classifier,
            discriminator,
            frozen: [false; 4],
        })
    }

    pub fn params_of(&self, c: Component) -> Vec<Param> {
        match c {
            Component::SourceEncoder => self.source.params(),
            Component::TargetEncoder => self.target.params(),
            Component::Classifier => self.classifier.params(),
            Component::Discriminator => self.discriminator.params(),
        }
    }

    /// Parameters of `c`, or nothing when it is frozen.
    pub fn trainable(&self, c: Component) -> Vec<Param> {
        if self.is_frozen(c) {
            Vec::new()
        } else {
            self.params_of(c)
        }
    }

    pub fn all_params(&self) -> Vec<Param> {
        [
            Component::SourceEncoder,
            Component::TargetEncoder,
            Component::Classifier,
            Component::Discriminator,
        ]
        .into_iter()
        .flat_map(|c| self.params_of(c))
        .collect()
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.frozen[slot(c)]
    }

    /// Freezing drops gradient tracking on the component's leaves, so graphs
    /// built afterwards never produce gradients for it.
    pub fn set_frozen(&mut self, c: Component, frozen: bool) {
        self.frozen[slot(c)] = frozen;
        for p in self.params_of(c) {
            p.tensor.set_requires_grad(!frozen);
            p.tensor.zero_grad();
        }
    }

    /// Re-initialises the target encoder as a deep copy of the source.
    pub fn copy_source_to_target(&mut self) {
        self.target = self.source.copy_as("target");
        let frozen = self.is_frozen(Component::TargetEncoder);
        self.set_frozen(Component::TargetEncoder, frozen);
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.all_params())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Overwrites parameter values from a checkpoint; names and shapes must
    /// match exactly.
    pub fn load(&self, path: &Path) -> Result<()> {
        Checkpoint::load(path)?.apply(&self.all_params())
    }
}

/// Snapshot of a component's parameter values, for drift checks.
pub fn snapshot(params: &[Param]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.tensor.to_vec()).collect()
}

/// Largest absolute elementwise difference between current values and a
/// snapshot.
pub fn max_drift(params: &[Param], before: &[Vec<f64>]) -> f64 {
    params
        .iter()
        .zip(before)
        .flat_map(|(p, b)| {
            let now = p.tensor.to_vec();
            now.into_iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Flat `(name, shape, row-major values)` list, stored as JSON. Floats are
/// written in shortest round-trip form and parsed exactly, so save/load is
/// bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Free-form provenance (tool version, seeds, config); ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    pub params: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_params(params: &[Param]) -> Self {
        Checkpoint {
            meta: None,
            params: params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn apply(&self, params: &[Param]) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (entry, p) in self.params.iter().zip(params) {
            if entry.name != p.name || entry.shape != p.tensor.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint entry {} {:?} does not match parameter {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        for (entry, p) in self.params.iter().zip(params) {
            p.tensor.values_mut().copy_from_slice(&entry.values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            embed_dim: 4,
            hidden_dim: 6,
            num_classes: 2,
            max_seq_len: 128,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ModelBundle::init(&small(), 3).unwrap();
        let b = ModelBundle::init(&small(), 3).unwrap();
        assert_eq!(a.checkpoint(), b.checkpoint());
        let c = ModelBundle::init(&small(), 4).unwrap();
        assert_ne!(a.checkpoint(), c.checkpoint());
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_bound() {
        let m = ModelBundle::init(&small(), 1).unwrap();
        for p in m.all_params() {
            let v = p.tensor.to_vec();
            if p.name.ends_with(".bias") {
                assert!(v.iter().all(|&x| x == 0.0), "{}", p.name);
            } else {
                let shape = p.tensor.shape();
                let s = glorot_bound(shape[0], shape[1]);
                assert!(v.iter().all(|x| x.abs() <= s), "{}", p.name);
            }
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut cfg = small();
        cfg.hidden_dim = 0;
        assert!(ModelBundle::init(&cfg, 0).is_err());
    }

    #[test]
    fn encoder_pooling_properties() {
        let m = ModelBundle::init(&small(), 2).unwrap();
        let one = m.source.encode(&[7]).unwrap().to_vec();
        let three = m.source.encode(&[7, 7, 7]).unwrap().to_vec();
        for (x, y) in one.iter().zip(&three) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
        let a = m.source.encode(&[1, 2, 3, 4]).unwrap().to_vec();
        let b = m.source.encode(&[4, 2, 1, 3]).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn encoder_rejects_bad_input() {
        let m = ModelBundle::init(&small(), 2).unwrap();
        assert!(m.source.encode(&[]).is_err());
        assert!(m.source.encode(&[50]).is_err());
        assert!(m.source.encode(&[1; 129]).is_err());
    }

    #[test]
    fn batch_of_64_has_rep_rows() {
        let m = ModelBundle::init(&small(), 2).unwrap();
        let seqs: Vec<Vec<u32>> = (0..64).map(|i| vec![i % 50, (i + 1) % 50]).collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        assert_eq!(m.source.encode_batch(&refs).unwrap().shape(), &[64, 6]);
    }

    #[test]
    fn classifier_zero_weights_and_bias_shift() {
        let m = ModelBundle::init(&small(), 2).unwrap();
        m.classifier.linear.weight.tensor.values_mut().fill(0.0);
        let rep = Tensor::vector(vec![0.5; 6]);
        assert_eq!(m.classifier.logits(&rep).unwrap().to_vec(), vec![0.0, 0.0]);
        m.classifier.linear.bias.tensor.values_mut()[1] += 0.25;
        assert_eq!(m.classifier.logits(&rep).unwrap().to_vec(), vec![0.0, 0.25]);
        assert!(m.classifier.logits(&Tensor::vector(vec![0.0; 5])).is_err());
    }

    #[test]
    fn discriminator_topology_and_range() {
        let m = ModelBundle::init(&small(), 5).unwrap();
        assert_eq!(m.discriminator.widths(), vec![6, 24, 24, 1]);
        let reps = Tensor::new([3, 6], (0..18).map(|i| i as f64 - 9.0).collect()).unwrap();
        for p in m.discriminator.probability(&reps).unwrap().to_vec() {
            assert!(p > 0.0 && p < 1.0);
        }
        m.discriminator.layers[2].weight.tensor.values_mut().fill(0.0);
        let p = m.discriminator.probability(&Tensor::vector(vec![3.0; 6])).unwrap();
        assert_eq!(p.item(), 0.5);
    }

    #[test]
    fn target_copy_is_independent() {
        let mut m = ModelBundle::init(&small(), 9).unwrap();
        m.copy_source_to_target();
        let x = [3u32, 4, 5];
        assert_eq!(
            m.source.encode(&x).unwrap().to_vec(),
            m.target.encode(&x).unwrap().to_vec()
        );
        let before = m.source.encode(&x).unwrap().to_vec();
        m.target
            .embedding
            .tensor
            .values_mut()
            .iter_mut()
            .for_each(|v| *v += 1.0);
        assert_eq!(m.source.encode(&x).unwrap().to_vec(), before);
        assert!(m.target.params().iter().all(|p| p.name.starts_with("target.")));
    }

    #[test]
    fn freezing_stops_gradients() {
        let mut m = ModelBundle::init(&small(), 9).unwrap();
        m.set_frozen(Component::Classifier, true);
        let rep = m.source.encode(&[1, 2]).unwrap();
        m.classifier.logits(&rep).unwrap().sum().backward().unwrap();
        assert!(m.classifier.params().iter().all(|p| p.tensor.grad().is_none()));
        assert!(m.source.embedding.tensor.grad().is_some());
        assert!(m.trainable(Component::Classifier).is_empty());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let a = ModelBundle::init(&small(), 11).unwrap();
        a.source.embedding.tensor.values_mut()[0] = 0.1 + 0.2;
        a.save(&path).unwrap();
        let b = ModelBundle::init(&small(), 12).unwrap();
        b.load(&path).unwrap();
        for (x, y) in a.all_params().iter().zip(b.all_params()) {
            let xb: Vec<u64> = x.tensor.to_vec().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.tensor.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb, "{}", x.name);
        }
    }
}
