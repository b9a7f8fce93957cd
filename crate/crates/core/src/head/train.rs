use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{loss_and_grad, TrainBatch};
use super::linalg::Matrix;
use super::weights::HeadWeights;
use crate::error::{Error, Result};
use crate::math;

/// Optimizer settings. The learning rate is multiplied by `decay_factor`
/// from epoch `floor(decay_at * epochs)` on.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay_at: f64,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Shuffle batch order every epoch with this seed; `None` keeps input order.
    pub shuffle_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            decay_at: 0.8,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle_seed: Some(0),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let boundary = math::floor(self.decay_at * self.epochs as f64) as usize;
        if epoch >= boundary {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: HeadWeights,
    /// Token-weighted mean loss of each epoch, measured before each update.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(w: &HeadWeights) -> Self {
        let zeros = || {
            w.params()
                .iter()
                .map(|p| Matrix::zeros(p.rows, p.cols))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut HeadWeights, g: &HeadWeights, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for (k, (p, gp)) in w.params_mut().into_iter().zip(g.params()).enumerate() {
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            for i in 0..p.data.len() {
                let gi = gp.data[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= lr * mh / (math::sqrt(vh) + cfg.eps);
            }
        }
    }
}

/// Adam over the batches, one step per batch. Deterministic for a given
/// configuration.
pub fn train(initial: &HeadWeights, dataset: &[TrainBatch], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() || dataset.iter().all(TrainBatch::is_empty) {
        return Err(Error::arg("training set is empty"));
    }
    let mut w = initial.clone();
    let mut adam = Adam::new(&w);
    let mut order: Vec<usize> = (0..dataset.len()).filter(|&i| !dataset[i].is_empty()).collect();
    let mut rng = cfg.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        for &b in &order {
            let (loss, grad) = loss_and_grad(&w, &dataset[b])?;
            total += loss * dataset[b].len() as f64;
            count += dataset[b].len();
            adam.step(&mut w, &grad, lr, cfg);
        }
        losses.push(total / count as f64);
    }
    Ok(TrainOutcome { weights: w, losses })
}

#[cfg(test)]
mod tests {
    use super::super::attention::forward;
    use super::super::weights::HeadShape;
    use super::*;
    use alloc::vec;
    use rand::Rng;

    fn shape() -> HeadShape {
        HeadShape {
            input: 20,
            hidden: 16,
            heads: 4,
            mlp_hidden: 8,
        }
    }

    /// Label = finest-scale path mean above 0.5.
    fn separable(seed: u64, batches: usize) -> Vec<TrainBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..batches)
            .map(|_| {
                let n = 8;
                let mut data = Vec::with_capacity(n * 20);
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut row: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let mu: f64 = rng.random_range(0.0..1.0);
                    row[11] = mu;
                    labels.push(f64::from(mu > 0.5));
                    data.extend(row);
                }
                TrainBatch {
                    features: Matrix::from_vec(n, 20, data),
                    groups: vec![0..4, 4..8],
                    labels,
                }
            })
            .collect()
    }

    fn accuracy(w: &HeadWeights, set: &[TrainBatch]) -> f64 {
        let mut hit = 0;
        let mut n = 0;
        for b in set {
            let z = forward(w, &b.features, &b.groups).unwrap();
            for (z, y) in z.iter().zip(&b.labels) {
                hit += usize::from((*z > 0.0) == (*y == 1.0));
                n += 1;
            }
        }
        hit as f64 / n as f64
    }

    #[test]
    fn learns_a_separable_rule() {
        let train_set = separable(1, 60);
        let held_out = separable(2, 20);
        let cfg = TrainConfig {
            epochs: 40,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let w0 = HeadWeights::init(shape(), 3).unwrap();
        let out = train(&w0, &train_set, &cfg).unwrap();
        assert!(out.losses.last().unwrap() < &out.losses[0]);
        assert!(accuracy(&out.weights, &train_set) >= 0.98);
        assert!(accuracy(&out.weights, &held_out) >= 0.9);
    }

    #[test]
    fn zero_epochs_keep_weights() {
        let w0 = HeadWeights::init(shape(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&w0, &separable(1, 2), &cfg).unwrap();
        assert_eq!(out.weights, w0);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn repeatable() {
        let w0 = HeadWeights::init(shape(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let set = separable(4, 5);
        let a = train(&w0, &set, &cfg).unwrap();
        let b = train(&w0, &set, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_decays_at_eighty_percent() {
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(39), 1e-3);
        assert!((cfg.lr_at(40) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn empty_dataset_rejected() {
        let w0 = HeadWeights::init(shape(), 3).unwrap();
        assert!(train(&w0, &[], &TrainConfig::default()).is_err());
    }
}
