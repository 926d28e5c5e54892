//! Network container, forward/backward orchestration and SGD training.
//!
//! The training loop is sequential (step t+1 depends on step t); within a
//! batch, per-sample gradients are independent read-only evaluations and fan
//! out through [`crate::par`], then reduce in index order so trajectories are
//! bit-identical regardless of thread count.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{
    flatten_backward, flatten_forward, global_avg_pool_backward, global_avg_pool_forward,
    relu_backward, relu_forward, ConvLayer, DenseLayer, Layer, LayerGrads,
};
use crate::loss::{accuracy, cross_entropy_grad, cross_entropy_loss};
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub rng_seed: u64,
}

/// Options for [`Network::train_epochs`]. Batches are fixed-size with the
/// last partial batch dropped; the shuffle is reseeded per epoch.
#[derive(Debug, Clone, Copy)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-epoch mean batch loss plus the number of SGD steps taken.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl Network {
    pub fn new(layers: Vec<Layer>, rng_seed: u64) -> Result<Self> {
        validate_composition(&layers)?;
        Ok(Network { layers, rng_seed })
    }

    /// Indices of layers that carry prunable filters.
    pub fn prunable_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| match l {
                Layer::Conv(c) => c.prunable,
                Layer::Dense(d) => d.prunable,
                _ => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut value = input.clone();
        for layer in &self.layers {
            value = apply_layer(layer, &value)?;
        }
        Ok(value)
    }

    fn forward_cached(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let next = apply_layer(layer, acts.last().unwrap())?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Names the first layer whose output is non-finite for `input`, if any.
    fn first_non_finite_layer(&self, input: &Tensor) -> Option<(usize, &'static str)> {
        let mut value = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            value = apply_layer(layer, &value).ok()?;
            if !value.is_finite() {
                return Some((i, layer.kind_name()));
            }
        }
        None
    }

    /// Loss and per-layer parameter gradients for one sample.
    fn sample_gradients(
        &self,
        input: &Tensor,
        label: usize,
    ) -> Result<(Vec<Option<LayerGrads>>, f64)> {
        let acts = self.forward_cached(input)?;
        let logits = acts.last().unwrap();
        if logits.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                expected: "rank-1 logits at the network output".into(),
                actual: format!("{:?}", logits.shape()),
            });
        }
        let classes = logits.shape()[0];
        let row = Tensor::from_vec(&[1, classes], logits.data().to_vec())?;
        let loss = cross_entropy_loss(&row, &[label])?;
        let grad_row = cross_entropy_grad(&row, &[label])?;
        let mut grad = Tensor::from_vec(&[classes], grad_row.data().to_vec())?;

        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Conv(conv) => {
                    let (g, gin) = conv.backward(&acts[i], &grad)?;
                    grads[i] = Some(g);
                    grad = gin;
                }
                Layer::Dense(dense) => {
                    let (g, gin) = dense.backward(&acts[i], &grad)?;
                    grads[i] = Some(g);
                    grad = gin;
                }
                Layer::Relu => grad = relu_backward(&acts[i], &grad),
                Layer::GlobalAvgPool => grad = global_avg_pool_backward(&acts[i], &grad)?,
                Layer::Flatten => grad = flatten_backward(&acts[i], &grad)?,
            }
        }
        Ok((grads, loss))
    }

    /// Mean loss and mean parameter gradients over a batch of dataset rows.
    pub fn batch_gradients(
        &self,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<(Vec<Option<LayerGrads>>, f64)> {
        let per_sample = par::map_indices(indices.len(), |i| {
            let sample = data.sample(indices[i]);
            self.sample_gradients(&sample, data.labels[indices[i]])
        });
        self.reduce_batch(per_sample, indices, data)
    }

    /// Sequential twin of [`Network::batch_gradients`] for benchmarks.
    pub fn batch_gradients_seq(
        &self,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<(Vec<Option<LayerGrads>>, f64)> {
        let per_sample = par::map_indices_seq(indices.len(), |i| {
            let sample = data.sample(indices[i]);
            self.sample_gradients(&sample, data.labels[indices[i]])
        });
        self.reduce_batch(per_sample, indices, data)
    }

    fn reduce_batch(
        &self,
        per_sample: Vec<Result<(Vec<Option<LayerGrads>>, f64)>>,
        indices: &[usize],
        data: &Dataset,
    ) -> Result<(Vec<Option<LayerGrads>>, f64)> {
        let mut total: Vec<Option<LayerGrads>> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Some(LayerGrads::zeros_like_conv(c)),
                Layer::Dense(d) => Some(LayerGrads::zeros_like_dense(d)),
                _ => None,
            })
            .collect();
        let mut loss_sum = 0.0f64;
        for (k, res) in per_sample.into_iter().enumerate() {
            let (grads, loss) = res?;
            if !loss.is_finite() {
                let sample = data.sample(indices[k]);
                let (layer_index, layer_kind) = self
                    .first_non_finite_layer(&sample)
                    .unwrap_or((self.layers.len(), "loss"));
                return Err(Error::NonFinite {
                    layer_index,
                    layer_kind: layer_kind.to_string(),
                });
            }
            loss_sum += loss;
            for (acc, g) in total.iter_mut().zip(&grads) {
                if let (Some(acc), Some(g)) = (acc, g) {
                    acc.add_assign(g);
                }
            }
        }
        let scale = 1.0 / indices.len() as f64;
        for acc in total.iter_mut().flatten() {
            acc.scale(scale);
        }
        Ok((total, loss_sum * scale))
    }

    /// One SGD step on a batch. Frozen filters keep their exact zeros;
    /// every filter that receives an update is unmasked.
    pub fn sgd_step(&mut self, data: &Dataset, indices: &[usize], lr: f64) -> Result<f64> {
        let (grads, loss) = self.batch_gradients(data, indices)?;
        for (layer, g) in self.layers.iter_mut().zip(&grads) {
            match (layer, g) {
                (Layer::Conv(conv), Some(g)) => conv.apply_grads(g, lr),
                (Layer::Dense(dense), Some(g)) => dense.apply_grads(g, lr),
                _ => {}
            }
        }
        Ok(loss)
    }

    /// One epoch over shuffled fixed-size batches (last partial batch
    /// dropped). Returns (mean batch loss, steps taken).
    pub fn train_one_epoch(
        &mut self,
        data: &Dataset,
        lr: f64,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<(f64, u64)> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng: ChaCha8Rng = rng::rng_from(shuffle_seed);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut steps = 0u64;
        for chunk in order.chunks_exact(batch_size) {
            epoch_loss += self.sgd_step(data, chunk, lr)?;
            steps += 1;
        }
        let mean = if steps > 0 {
            epoch_loss / steps as f64
        } else {
            0.0
        };
        Ok((mean, steps))
    }

    /// Trains for `opts.epochs` epochs with a seeded per-epoch shuffle.
    /// `epochs == 0` leaves the network untouched.
    pub fn train_epochs(&mut self, data: &Dataset, opts: &TrainOpts) -> Result<TrainTrace> {
        let mut trace = TrainTrace::default();
        for epoch in 0..opts.epochs {
            let (loss, steps) = self.train_one_epoch(
                data,
                opts.lr,
                opts.batch_size,
                rng::epoch_seed(opts.seed, epoch),
            )?;
            trace.epoch_losses.push(loss);
            trace.steps += steps;
        }
        Ok(trace)
    }

    /// Logits for a set of dataset rows, `[len(indices), classes]`.
    pub fn logits_for(&self, data: &Dataset, indices: &[usize]) -> Result<Tensor> {
        let rows = par::map_indices(indices.len(), |i| self.forward(&data.sample(indices[i])));
        let mut out: Option<Tensor> = None;
        for (k, row) in rows.into_iter().enumerate() {
            let row = row?;
            let classes = row.shape()[0];
            let t = out.get_or_insert_with(|| Tensor::zeros(&[indices.len(), classes]));
            t.data_mut()[k * classes..(k + 1) * classes].copy_from_slice(row.data());
        }
        out.ok_or_else(|| Error::Dataset("cannot evaluate an empty index set".into()))
    }

    /// Mean cross-entropy over the given rows.
    pub fn eval_loss(&self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        let logits = self.logits_for(data, indices)?;
        let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
        cross_entropy_loss(&logits, &labels)
    }

    /// Classification accuracy over the given rows.
    pub fn eval_accuracy(&self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        let logits = self.logits_for(data, indices)?;
        let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
        accuracy(&logits, &labels)
    }
}

fn apply_layer(layer: &Layer, value: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Conv(conv) => conv.forward(value),
        Layer::Dense(dense) => dense.forward(value),
        Layer::Relu => Ok(relu_forward(value)),
        Layer::GlobalAvgPool => global_avg_pool_forward(value),
        Layer::Flatten => flatten_forward(value),
    }
}

/// Checks channel composability where it is statically determinable.
fn validate_composition(layers: &[Layer]) -> Result<()> {
    let mut channels: Option<usize> = None;
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Conv(conv) => {
                if let Some(c) = channels {
                    if c != conv.in_channels() {
                        return Err(Error::ShapeMismatch {
                            expected: format!("layer {i} consuming {c} channels"),
                            actual: format!("conv expecting {} channels", conv.in_channels()),
                        });
                    }
                }
                channels = Some(conv.filter_count());
            }
            Layer::Dense(dense) => {
                if let Some(c) = channels {
                    if c != dense.in_dim() {
                        return Err(Error::ShapeMismatch {
                            expected: format!("layer {i} consuming {c} features"),
                            actual: format!("dense expecting {} inputs", dense.in_dim()),
                        });
                    }
                }
                channels = Some(dense.out_dim());
            }
            Layer::Relu | Layer::GlobalAvgPool => {}
            // feature width after flattening depends on spatial size, which
            // is only known at forward time
            Layer::Flatten => channels = None,
        }
    }
    Ok(())
}

/// Kaiming-uniform conv layer: weights from U(-b, b) with b = sqrt(6/fan_in),
/// fan_in = c*k*k; bias starts at zero.
pub fn init_conv(
    rng: &mut ChaCha8Rng,
    filters: usize,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> ConvLayer {
    let fan_in = (in_channels * kernel * kernel) as f64;
    let bound = (6.0 / fan_in).sqrt() as f32;
    let data: Vec<f32> = (0..filters * in_channels * kernel * kernel)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    let filters_t = Tensor::from_vec(&[filters, in_channels, kernel, kernel], data).unwrap();
    ConvLayer::new(filters_t, Some(Tensor::zeros(&[filters])), stride, padding)
}

/// Kaiming-uniform dense layer, same convention as [`init_conv`].
pub fn init_dense(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> DenseLayer {
    let bound = (6.0 / in_dim as f64).sqrt() as f32;
    let data: Vec<f32> = (0..out_dim * in_dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    DenseLayer::new(
        Tensor::from_vec(&[out_dim, in_dim], data).unwrap(),
        Tensor::zeros(&[out_dim]),
    )
}
