//! Mini-batch SGD over an in-memory dataset.
//!
//! Each batch is split into fixed-size chunks processed in parallel; chunk
//! gradients are summed in chunk order, so results do not depend on the
//! number of worker threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{argmax, softmax_ce};
use super::network::{NetError, NetGradients, Network};
use crate::tensor::Tensor4;

/// Samples per parallel work unit.
pub const CHUNK: usize = 8;

/// Images stored item-major as `f64`, one label per item.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dims: [usize; 3],
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: [usize; 3], images: Vec<f64>, labels: Vec<usize>) -> Result<Self, NetError> {
        let item: usize = dims.iter().product();
        if item == 0 || images.len() != item * labels.len() {
            return Err(NetError::Config(format!(
                "{} values do not form {} items of {:?}",
                images.len(),
                labels.len(),
                dims
            )));
        }
        Ok(Dataset { dims, images, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let n = self.item_len();
        &self.images[i * n..(i + 1) * n]
    }

    fn item_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// First `n` items (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dims: self.dims,
            images: self.images[..n * self.item_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn gather(&self, indices: &[usize]) -> Tensor4 {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let [c, h, w] = self.dims;
        Tensor4::from_vec([indices.len(), c, h, w], data).expect("sized from dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, batch_size: 32, epochs: 3, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(NetError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NetError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Summed loss gradient, summed loss and correct count over `indices`.
pub fn batch_gradients(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
) -> Result<(NetGradients, f64, usize), NetError> {
    let parts: Vec<Result<(NetGradients, f64, usize), NetError>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let x = data.gather(chunk);
            let (logits, trace) = net.forward_trace(&x)?;
            let classes = logits.item_len();
            let mut grad = Tensor4::zeros(logits.dims());
            let mut loss = 0.0;
            let mut correct = 0;
            for (b, &i) in chunk.iter().enumerate() {
                let label = data.labels[i];
                if label >= classes {
                    return Err(NetError::Label { label, classes });
                }
                let z = logits.item(b);
                let (l, g) = softmax_ce(z, label);
                loss += l;
                correct += (argmax(z) == label) as usize;
                grad.data_mut()[b * classes..(b + 1) * classes].copy_from_slice(&g);
            }
            Ok((net.backward(&trace, grad)?, loss, correct))
        })
        .collect();
    let mut total = NetGradients::zeros_like(net);
    let mut loss = 0.0;
    let mut correct = 0;
    for part in parts {
        let (g, l, c) = part?;
        total.add_assign(&g);
        loss += l;
        correct += c;
    }
    Ok((total, loss, correct))
}

/// One pass of mini-batch SGD with the batch-mean cross-entropy gradient.
/// The visiting order is a shuffle seeded by `(config.seed, epoch)`.
/// Reported loss and accuracy are computed on each batch before its update.
pub fn sgd_epoch(
    net: &mut Network,
    data: &Dataset,
    config: &TrainConfig,
    epoch: u64,
) -> Result<EpochMetrics, NetError> {
    config.validate()?;
    if data.is_empty() {
        return Err(NetError::Config("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);

    let mut loss = 0.0;
    let mut correct = 0;
    for batch in order.chunks(config.batch_size) {
        let (mut grads, l, c) = batch_gradients(net, data, batch)?;
        grads.scale(1.0 / batch.len() as f64);
        net.apply_update(&grads, config.learning_rate)?;
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics { mean_loss: loss / n, accuracy: correct as f64 / n })
}

/// Mean loss and accuracy of `net` on `data` without updating it.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<EpochMetrics, NetError> {
    if data.is_empty() {
        return Err(NetError::Config("empty evaluation set".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Result<(f64, usize), NetError>> = indices
        .par_chunks(64)
        .map(|chunk| {
            let logits = net.forward(&data.gather(chunk))?;
            let classes = logits.item_len();
            let mut loss = 0.0;
            let mut correct = 0;
            for (b, &i) in chunk.iter().enumerate() {
                let label = data.labels[i];
                if label >= classes {
                    return Err(NetError::Label { label, classes });
                }
                let z = logits.item(b);
                loss += softmax_ce(z, label).0;
                correct += (argmax(z) == label) as usize;
            }
            Ok((loss, correct))
        })
        .collect();
    let (mut loss, mut correct) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics { mean_loss: loss / n, accuracy: correct as f64 / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acl::AclLayer;
    use crate::arrangement::parse_pattern;
    use crate::conv::ConvHyper;
    use crate::kernels::KernelSize;
    use crate::nn::layers::Linear;
    use crate::nn::network::Node;

    fn tiny_net(seed: u64) -> Network {
        let arr = parse_pattern("(1x4)G1Lg1Tf1P1").unwrap().bind(1, 4).unwrap();
        let acl = AclLayer::with_seed(arr, KernelSize::square(3), ConvHyper::padded(1), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::new(
            [1, 6, 6],
            vec![
                Node::Acl(acl),
                Node::Relu,
                Node::MaxPool { kernel: 2, stride: 2 },
                Node::Flatten,
                Node::Linear(Linear::new(36, 3, &mut rng)),
            ],
        )
        .unwrap()
    }

    fn toy_data(n: usize) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 3;
            for r in 0..6 {
                for c in 0..6 {
                    let v = match label {
                        0 => (r == 2) as u8 as f64,
                        1 => (c == 3) as u8 as f64,
                        _ => (r == c) as u8 as f64,
                    };
                    images.push(v + 0.01 * ((i * 7 + r * 3 + c) % 5) as f64);
                }
            }
            labels.push(label);
        }
        Dataset::new([1, 6, 6], images, labels).unwrap()
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut net = tiny_net(1);
        let before = net.flat_params();
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: 4, epochs: 1, seed: 2 };
        sgd_epoch(&mut net, &toy_data(12), &cfg, 0).unwrap();
        assert_eq!(net.flat_params(), before);
    }

    #[test]
    fn training_reduces_loss() {
        let mut net = tiny_net(4);
        let data = toy_data(60);
        let cfg = TrainConfig { learning_rate: 0.1, batch_size: 6, epochs: 1, seed: 5 };
        let start = evaluate(&net, &data).unwrap().mean_loss;
        for e in 0..15 {
            sgd_epoch(&mut net, &data, &cfg, e).unwrap();
        }
        let end = evaluate(&net, &data).unwrap();
        assert!(end.mean_loss < start * 0.5, "{start} -> {}", end.mean_loss);
        assert!(end.accuracy > 0.9);
    }

    #[test]
    fn epochs_are_reproducible() {
        let data = toy_data(30);
        let cfg = TrainConfig { learning_rate: 0.05, batch_size: 7, epochs: 1, seed: 9 };
        let run = || {
            let mut net = tiny_net(3);
            let m = sgd_epoch(&mut net, &data, &cfg, 0).unwrap();
            (net.flat_params(), m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_config_and_labels() {
        let mut net = tiny_net(1);
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(sgd_epoch(&mut net, &toy_data(3), &bad, 0).is_err());
        let data = Dataset::new([1, 6, 6], vec![0.0; 36], vec![7]).unwrap();
        assert_eq!(evaluate(&net, &data).unwrap_err(), NetError::Label { label: 7, classes: 3 });
        assert!(Dataset::new([1, 6, 6], vec![0.0; 35], vec![0]).is_err());
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let net = tiny_net(11);
        let data = toy_data(4);
        let idx = [0, 1, 2, 3];
        let (grads, _, _) = batch_gradients(&net, &data, &idx).unwrap();
        let analytic = grads.flatten();
        let params = net.flat_params();
        let loss = |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat_params(p).unwrap();
            batch_gradients(&n, &data, &idx).unwrap().1
        };
        let h = 1e-6;
        for i in (0..params.len()).step_by(3) {
            let mut p = params.clone();
            p[i] += h;
            let lp = loss(&p);
            p[i] -= 2.0 * h;
            let lm = loss(&p);
            let numeric = (lp - lm) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / analytic[i].abs().max(1e-3);
            assert!(err < 1e-4, "param {i}: {numeric} vs {}", analytic[i]);
        }
    }
}
