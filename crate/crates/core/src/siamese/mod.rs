//! Siamese verification over flattened face-model weights.
//!
//! Both members of a pair pass through the same fully connected network
//! `G_W` (tanh hidden layers, linear embedding). The energy of a pair is the
//! Euclidean distance between the two embeddings, and training minimizes
//!
//! ```text
//! L = Y·(2/Q)·E² + (1 − Y)·2Q·exp(−2.77·E/Q)
//! ```
//!
//! which pulls same-identity pairs (`Y = 1`) together and pushes
//! different-identity pairs apart, with `Q` the upper bound on the energy.

mod pairs;
mod roc;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::facemodel::FlatWeights;

pub use pairs::{
    generate_pairs, load_pairs, read_pairs, save_pairs, split_pairs, write_pairs, Identity, LabeledPair, PairSpec,
    PAIRS_MAGIC,
};
pub use roc::{accuracy_at, eval_roc, pair_scores, roc_from_scores, EvalReport, RocRow};

/// Decay constant of the different-identity loss.
pub const DIFF_DECAY: f64 = 2.77;
pub const NET_MAGIC: [u8; 4] = *b"NSIA";
pub const NET_VERSION: u16 = 1;
const MAX_LANES: usize = 8;

#[derive(Debug, Error)]
pub enum SiameseError {
    #[error("siamese: input has {found} values, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("siamese: invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("siamese: cannot build pairs: {0}")]
    InfeasiblePairs(String),
    #[error("siamese: evaluation needs both same and different pairs")]
    SingleClass,
    #[error("siamese: no pairs given")]
    NoPairs,
    #[error("siamese: malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error("siamese: cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("siamese: {0}")]
    Model(#[from] crate::facemodel::ModelError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SiameseError + '_ {
    move |source| SiameseError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

/// The shared embedding network `G_W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseNet {
    layers: Vec<Dense>,
    /// Pairs scoring below this are declared the same identity.
    pub threshold: f64,
}

/// Parameter-shaped storage for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    fn zeros_like(net: &SiameseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Flat view in layer order, weights (column-major) before biases.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl SiameseNet {
    /// Random network with `sizes = [input, hidden.., embedding]`, weights
    /// uniform in `±1/√fan_in`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self, SiameseError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(SiameseError::InvalidConfig(format!(
                "layer sizes {sizes:?} need an input and at least one nonempty layer"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..=bound)),
                    bias: DVector::from_fn(w[1], |_, _| rng.gen_range(-bound..=bound)),
                }
            })
            .collect();
        Ok(Self { layers, threshold: 0.0 })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self, SiameseError> {
        let mut net = Self::new(sizes, 0)?;
        for l in net.layers.iter_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weights.ncols()];
        sizes.extend(self.layers.iter().map(|l| l.weights.nrows()));
        sizes
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn embedding_size(&self) -> usize {
        self.layers.last().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    /// Parameters in the order of [`Gradients::to_vec`].
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        for l in self.layers.iter_mut() {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("parameter vector too short");
            }
        }
    }

    fn check_input(&self, len: usize) -> Result<(), SiameseError> {
        if len != self.input_size() {
            return Err(SiameseError::DimensionMismatch { expected: self.input_size(), found: len });
        }
        Ok(())
    }

    /// Activations of every layer, input first.
    fn activations(&self, input: &[f64]) -> Vec<DVector<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(DVector::from_column_slice(input));
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * acts.last().unwrap() + &l.bias;
            if i < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn embed(&self, p: &FlatWeights) -> Result<DVector<f64>, SiameseError> {
        self.embed_slice(&p.values)
    }

    pub fn embed_slice(&self, input: &[f64]) -> Result<DVector<f64>, SiameseError> {
        self.check_input(input.len())?;
        Ok(self.activations(input).pop().unwrap())
    }

    /// Accumulates `∂L/∂W` for one branch given `∂L/∂(embedding)`.
    fn backward(&self, acts: &[DVector<f64>], grad_out: DVector<f64>, grads: &mut Gradients) {
        let mut delta = grad_out;
        for i in (0..self.layers.len()).rev() {
            // delta is ∂L/∂z for layer i
            grads.weights[i].ger(1.0, &delta, &acts[i], 1.0);
            grads.biases[i] += &delta;
            if i > 0 {
                let mut back = self.layers[i].weights.tr_mul(&delta);
                // acts[i] = tanh(z_{i-1})
                back.zip_apply(&acts[i], |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.layer_sizes();
        let mut out = Vec::new();
        out.extend_from_slice(&NET_MAGIC);
        out.extend_from_slice(&NET_VERSION.to_le_bytes());
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        out.extend_from_slice(&[0u8; 6]);
        for s in &sizes {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.threshold.to_le_bytes());
        for v in self.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SiameseError> {
        let bad = |reason: String| SiameseError::Format { kind: "network", reason };
        if bytes.len() < 16 {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[0..4] != NET_MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != NET_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut pos = 16;
        let sizes_end = pos + count * 4;
        if count < 2 || bytes.len() < sizes_end + 8 {
            return Err(bad("truncated layer table".into()));
        }
        let sizes: Vec<usize> =
            bytes[pos..sizes_end].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        pos = sizes_end;
        let threshold = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        let mut net = Self::zeros(&sizes)?;
        let n_params: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let payload = &bytes[pos..];
        if payload.len() != n_params * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, layer sizes {sizes:?} need {}",
                payload.len(),
                n_params * 8
            )));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite weight".into()));
        }
        net.set_params(&values);
        net.threshold = threshold;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), SiameseError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, SiameseError> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

/// Euclidean distance between two embeddings.
pub fn energy(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64, SiameseError> {
    if a.len() != b.len() {
        return Err(SiameseError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    Ok((a - b).norm())
}

/// `(2/Q)·E²`
pub fn same_loss(e: f64, q: f64) -> f64 {
    2.0 / q * e * e
}

/// `2Q·exp(−2.77·E/Q)`
pub fn diff_loss(e: f64, q: f64) -> f64 {
    2.0 * q * (-(DIFF_DECAY * e / q)).exp()
}

pub fn pair_loss(e: f64, same: bool, q: f64) -> f64 {
    if same {
        same_loss(e, q)
    } else {
        diff_loss(e, q)
    }
}

/// `dL/dE` of [`pair_loss`].
pub fn pair_loss_derivative(e: f64, same: bool, q: f64) -> f64 {
    if same {
        4.0 / q * e
    } else {
        -2.0 * DIFF_DECAY * (-DIFF_DECAY / q * e).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseConfig {
    /// Upper bound of the energy.
    pub q: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Sizes after the input layer; the last is the embedding size.
    pub layers: Vec<usize>,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        Self { q: 5.0, learning_rate: 0.01, epochs: 50, batch_size: 32, seed: 0, layers: vec![256, 64, 16] }
    }
}

impl SiameseConfig {
    pub fn validate(&self) -> Result<(), SiameseError> {
        let bad = |m: &str| Err(SiameseError::InvalidConfig(m.to_string()));
        if !(self.q > 0.0) {
            return bad("q must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.layers.is_empty() || self.layers.contains(&0) {
            return bad("layers must list at least one nonzero size");
        }
        Ok(())
    }
}

fn pair_gradient(net: &SiameseNet, pair: &LabeledPair, q: f64, grads: &mut Gradients) -> f64 {
    let acts_a = net.activations(&pair.a.values);
    let acts_b = net.activations(&pair.b.values);
    let diff = acts_a.last().unwrap() - acts_b.last().unwrap();
    let e = diff.norm();
    let loss = pair_loss(e, pair.same, q);
    // ∂E/∂g is undefined at E = 0; the zero subgradient is used there
    if e > 0.0 {
        let scale = pair_loss_derivative(e, pair.same, q) / e;
        net.backward(&acts_a, &diff * scale, grads);
        net.backward(&acts_b, &diff * -scale, grads);
    }
    loss
}

fn check_pairs(net: &SiameseNet, pairs: &[LabeledPair]) -> Result<(), SiameseError> {
    if pairs.is_empty() {
        return Err(SiameseError::NoPairs);
    }
    for p in pairs {
        net.check_input(p.a.len())?;
        net.check_input(p.b.len())?;
    }
    Ok(())
}

/// Summed loss over `pairs` and its gradient with respect to the shared
/// weights, accumulated through both branches.
pub fn loss_and_gradient(net: &SiameseNet, pairs: &[LabeledPair], q: f64) -> Result<(f64, Gradients), SiameseError> {
    check_pairs(net, pairs)?;
    Ok(batch_gradient(net, pairs, q))
}

fn batch_gradient(net: &SiameseNet, pairs: &[LabeledPair], q: f64) -> (f64, Gradients) {
    let chunk = pairs.len().div_ceil(MAX_LANES).max(1);
    let partials: Vec<(f64, Gradients)> = pairs
        .par_chunks(chunk)
        .map(|ps| {
            let mut g = Gradients::zeros_like(net);
            let loss = ps.iter().map(|p| pair_gradient(net, p, q, &mut g)).sum();
            (loss, g)
        })
        .collect();
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.add(g);
    }
    (loss, total)
}

/// Summed loss over all pairs.
pub fn total_loss(net: &SiameseNet, pairs: &[LabeledPair], q: f64) -> Result<f64, SiameseError> {
    check_pairs(net, pairs)?;
    Ok(pairs
        .par_iter()
        .map(|p| {
            let e = (net.embed_slice(&p.a.values).unwrap() - net.embed_slice(&p.b.values).unwrap()).norm();
            pair_loss(e, p.same, q)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum())
}

/// Minibatch gradient descent on the mean pair loss of each batch. Returns
/// the network and the mean loss seen during each epoch.
pub fn train_siamese(pairs: &[LabeledPair], config: &SiameseConfig) -> Result<(SiameseNet, Vec<f64>), SiameseError> {
    config.validate()?;
    let first = pairs.first().ok_or(SiameseError::NoPairs)?;
    let mut sizes = vec![first.a.len()];
    sizes.extend(&config.layers);
    let net = SiameseNet::new(&sizes, config.seed)?;
    train_siamese_from(net, pairs, config)
}

/// As [`train_siamese`], continuing from an existing network.
pub fn train_siamese_from(
    mut net: SiameseNet,
    pairs: &[LabeledPair],
    config: &SiameseConfig,
) -> Result<(SiameseNet, Vec<f64>), SiameseError> {
    config.validate()?;
    check_pairs(&net, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_5a1a);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| pairs[i].clone()));
            let (loss, grads) = batch_gradient(&net, &batch, config.q);
            epoch_loss += loss;
            let step = config.learning_rate / batch.len() as f64;
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
                layer.weights -= gw * step;
                layer.bias -= gb * step;
            }
        }
        history.push(epoch_loss / pairs.len() as f64);
    }
    Ok((net, history))
}

/// Energy between two weight vectors and the decision `score < threshold`.
pub fn verify(net: &SiameseNet, a: &FlatWeights, b: &FlatWeights, threshold: f64) -> Result<(bool, f64), SiameseError> {
    let score = energy(&net.embed(a)?, &net.embed(b)?)?;
    Ok((score < threshold, score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facemodel::{param_count, FaceModel, Permutation};
    use proptest::prelude::*;
    use rand::Rng;

    fn flat(values: Vec<f64>) -> FlatWeights {
        FlatWeights { hidden_count: (values.len() - 1) / 4, values }
    }

    fn random_flat(len: usize, rng: &mut impl Rng) -> FlatWeights {
        flat((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_net_embeds_to_zero() {
        let net = SiameseNet::zeros(&[9, 4, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = net.embed(&random_flat(9, &mut rng)).unwrap();
        assert_eq!(e, DVector::zeros(3));
    }

    #[test]
    fn embedding_is_deterministic_and_checked() {
        let net = SiameseNet::new(&[9, 6, 2], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_flat(9, &mut rng);
        assert_eq!(net.embed(&p).unwrap(), net.embed(&p).unwrap());
        assert!(matches!(
            net.embed(&random_flat(13, &mut rng)),
            Err(SiameseError::DimensionMismatch { expected: 9, found: 13 })
        ));
    }

    #[test]
    fn permuted_rows_embed_differently() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = FaceModel::from_values(&random_flat(param_count(4), &mut rng).values).unwrap();
        let swapped = crate::facemodel::permute_augment(&model, &Permutation::swap(4, 0, 3).unwrap()).unwrap();
        let net = SiameseNet::new(&[17, 8, 4], 4).unwrap();
        let a = net.embed(&model.flatten()).unwrap();
        let b = net.embed(&swapped.flatten()).unwrap();
        assert!(energy(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn energy_examples() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(energy(&a, &a).unwrap(), 0.0);
        assert_eq!(energy(&a, &b).unwrap(), 1.0);
        assert_eq!(energy(&a, &b).unwrap(), energy(&b, &a).unwrap());
        assert!(energy(&a, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn pair_loss_examples() {
        let q = 5.0;
        assert_eq!(pair_loss(0.0, true, q), 0.0);
        assert_eq!(pair_loss(0.0, false, q), 2.0 * q);
        assert_eq!(pair_loss(q, true, q), 2.0 * q);
        // 10·e^(−2.77) from mpmath at 30 digits
        assert!((pair_loss(q, false, q) - 0.626_620_047_421_531_5).abs() < 1e-15);
    }

    #[test]
    fn loss_branches_are_monotone() {
        let q = 5.0;
        let grid: Vec<f64> = (0..1000).map(|i| i as f64 * 2.0 * q / 999.0).collect();
        for w in grid.windows(2) {
            assert!(same_loss(w[1], q) > same_loss(w[0], q));
            assert!(diff_loss(w[1], q) < diff_loss(w[0], q));
        }
    }

    #[test]
    fn loss_derivative_matches_differences() {
        for &same in &[true, false] {
            for e in [0.1, 1.0, 3.7] {
                let h = 1e-6;
                let fd = (pair_loss(e + h, same, 5.0) - pair_loss(e - h, same, 5.0)) / (2.0 * h);
                assert!((fd - pair_loss_derivative(e, same, 5.0)).abs() < 1e-7);
            }
        }
    }

    /// Central differences of the summed loss, treating the network as a
    /// black box.
    fn numeric_gradient(net: &SiameseNet, pairs: &[LabeledPair], q: f64) -> Vec<f64> {
        let base = net.params();
        let h = 1e-6;
        (0..base.len())
            .map(|i| {
                let mut probe = net.clone();
                let mut v = base.clone();
                v[i] = base[i] + h;
                probe.set_params(&v);
                let fp = total_loss(&probe, pairs, q).unwrap();
                v[i] = base[i] - h;
                probe.set_params(&v);
                let fm = total_loss(&probe, pairs, q).unwrap();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = SiameseNet::new(&[5, 3, 2], 6).unwrap();
        let pairs: Vec<LabeledPair> = (0..4)
            .map(|i| LabeledPair { a: random_flat(5, &mut rng), b: random_flat(5, &mut rng), same: i % 2 == 0 })
            .collect();
        let (loss, g) = loss_and_gradient(&net, &pairs, 5.0).unwrap();
        assert!((loss - total_loss(&net, &pairs, 5.0).unwrap()).abs() < 1e-12);
        assert!(relative_error(&g.to_vec(), &numeric_gradient(&net, &pairs, 5.0)) < 1e-5);
    }

    #[test]
    fn positive_pair_pulls_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pair = LabeledPair { a: random_flat(9, &mut rng), b: random_flat(9, &mut rng), same: true };
        let cfg = SiameseConfig { layers: vec![6, 3], epochs: 10, learning_rate: 0.01, ..SiameseConfig::default() };
        let (_, hist) = train_siamese(&[pair], &cfg).unwrap();
        assert!(hist.windows(2).all(|w| w[1] < w[0]), "{hist:?}");
    }

    #[test]
    fn negative_pair_pushes_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pair = LabeledPair { a: random_flat(9, &mut rng), b: random_flat(9, &mut rng), same: false };
        let cfg = SiameseConfig { layers: vec![6, 3], epochs: 10, learning_rate: 0.01, ..SiameseConfig::default() };
        let start = SiameseNet::new(&[9, 6, 3], cfg.seed).unwrap();
        let e0 = energy(&start.embed(&pair.a).unwrap(), &start.embed(&pair.b).unwrap()).unwrap();
        let (net, hist) = train_siamese(std::slice::from_ref(&pair), &cfg).unwrap();
        let e1 = energy(&net.embed(&pair.a).unwrap(), &net.embed(&pair.b).unwrap()).unwrap();
        assert!(e1 > e0);
        assert!(hist.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn training_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs: Vec<LabeledPair> = (0..20)
            .map(|i| LabeledPair { a: random_flat(9, &mut rng), b: random_flat(9, &mut rng), same: i % 3 == 0 })
            .collect();
        let cfg = SiameseConfig { layers: vec![5, 2], epochs: 3, batch_size: 4, ..SiameseConfig::default() };
        let (a, ha) = train_siamese(&pairs, &cfg).unwrap();
        let (b, hb) = train_siamese(&pairs, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ha, hb);
        let other = train_siamese(&pairs, &SiameseConfig { seed: 1, ..cfg }).unwrap().0;
        assert_ne!(a, other);
    }

    #[test]
    fn training_rejects_mixed_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pairs = vec![
            LabeledPair { a: random_flat(9, &mut rng), b: random_flat(9, &mut rng), same: true },
            LabeledPair { a: random_flat(9, &mut rng), b: random_flat(13, &mut rng), same: false },
        ];
        assert!(matches!(
            train_siamese(&pairs, &SiameseConfig::default()),
            Err(SiameseError::DimensionMismatch { .. })
        ));
        assert!(matches!(train_siamese(&[], &SiameseConfig::default()), Err(SiameseError::NoPairs)));
    }

    #[test]
    fn verify_examples() {
        let net = SiameseNet::new(&[9, 5, 3], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_flat(9, &mut rng);
        let q = random_flat(9, &mut rng);
        assert_eq!(verify(&net, &p, &p, 1e-9).unwrap(), (true, 0.0));
        assert!(!verify(&net, &p, &q, 0.0).unwrap().0);
        assert_eq!(verify(&net, &p, &p, 0.0).unwrap(), (false, 0.0));
        assert_eq!(verify(&net, &p, &q, 0.7).unwrap(), verify(&net, &q, &p, 0.7).unwrap());
    }

    #[test]
    fn network_file_round_trip() {
        let mut net = SiameseNet::new(&[9, 5, 3], 13).unwrap();
        net.threshold = 0.625;
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"NSIA");
        let back = SiameseNet::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);
        assert!(SiameseNet::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(SiameseNet::from_bytes(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn gradient_oracle_on_tiny_nets(seed in any::<u64>(), hidden in 1usize..5, emb in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = SiameseNet::new(&[5, hidden, emb], seed).unwrap();
            let pairs: Vec<LabeledPair> = (0..4).map(|i| LabeledPair {
                a: random_flat(5, &mut rng), b: random_flat(5, &mut rng), same: i % 2 == 1,
            }).collect();
            let (_, g) = loss_and_gradient(&net, &pairs, 5.0).unwrap();
            prop_assert!(relative_error(&g.to_vec(), &numeric_gradient(&net, &pairs, 5.0)) < 1e-5);
        }
    }
}
