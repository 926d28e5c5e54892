//! Shared test support: an independent f64 reference forward pass and a
//! central finite-difference gradient oracle. Deliberately reimplements the
//! math (plain nested loops, all f64) so it checks the production path
//! rather than mirroring it.

#![allow(dead_code)]

use prunekit::data::Dataset;
use prunekit::layer::Layer;
use prunekit::network::Network;
use prunekit::tensor::Tensor;

/// f64 mirror of one layer's parameters.
#[derive(Clone)]
pub enum RefLayer {
    Conv {
        weights: Vec<f64>,
        bias: Vec<f64>,
        m: usize,
        c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        weights: Vec<f64>,
        bias: Vec<f64>,
        out: usize,
        inp: usize,
    },
    Relu,
    Gap,
    Flatten,
}

pub fn to_ref(net: &Network) -> Vec<RefLayer> {
    net.layers
        .iter()
        .map(|l| match l {
            Layer::Conv(conv) => RefLayer::Conv {
                weights: conv.filters.data().iter().map(|v| *v as f64).collect(),
                bias: conv
                    .bias
                    .as_ref()
                    .map(|b| b.data().iter().map(|v| *v as f64).collect())
                    .unwrap_or_default(),
                m: conv.filter_count(),
                c: conv.in_channels(),
                k: conv.kernel_size(),
                stride: conv.stride,
                padding: conv.padding,
            },
            Layer::Dense(dense) => RefLayer::Dense {
                weights: dense.weights.data().iter().map(|v| *v as f64).collect(),
                bias: dense.bias.data().iter().map(|v| *v as f64).collect(),
                out: dense.out_dim(),
                inp: dense.in_dim(),
            },
            Layer::Relu => RefLayer::Relu,
            Layer::GlobalAvgPool => RefLayer::Gap,
            Layer::Flatten => RefLayer::Flatten,
        })
        .collect()
}

enum Value {
    Map { data: Vec<f64>, c: usize, h: usize, w: usize },
    Vec(Vec<f64>),
}

fn ref_forward(layers: &[RefLayer], input: &[f64], (c0, h0, w0): (usize, usize, usize)) -> Vec<f64> {
    let mut value = Value::Map {
        data: input.to_vec(),
        c: c0,
        h: h0,
        w: w0,
    };
    for layer in layers {
        value = match (layer, value) {
            (
                RefLayer::Conv {
                    weights,
                    bias,
                    m,
                    c,
                    k,
                    stride,
                    padding,
                },
                Value::Map { data, c: ic, h, w },
            ) => {
                assert_eq!(*c, ic);
                let oh = (h + 2 * padding - k) / stride + 1;
                let ow = (w + 2 * padding - k) / stride + 1;
                let mut out = vec![0.0f64; m * oh * ow];
                for fm in 0..*m {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = if bias.is_empty() { 0.0 } else { bias[*&fm] };
                            for ch in 0..*c {
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let wv = weights
                                            [((fm * c + ch) * k + ky) * k + kx];
                                        let iv =
                                            data[(ch * h + iy as usize) * w + ix as usize];
                                        acc += wv * iv;
                                    }
                                }
                            }
                            out[(fm * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                Value::Map {
                    data: out,
                    c: *m,
                    h: oh,
                    w: ow,
                }
            }
            (RefLayer::Dense { weights, bias, out, inp }, Value::Vec(v)) => {
                assert_eq!(v.len(), *inp);
                let mut o = vec![0.0f64; *out];
                for r in 0..*out {
                    let mut acc = bias[r];
                    for i in 0..*inp {
                        acc += weights[r * inp + i] * v[i];
                    }
                    o[r] = acc;
                }
                Value::Vec(o)
            }
            (RefLayer::Relu, Value::Map { data, c, h, w }) => Value::Map {
                data: data.iter().map(|v| v.max(0.0)).collect(),
                c,
                h,
                w,
            },
            (RefLayer::Relu, Value::Vec(v)) => {
                Value::Vec(v.iter().map(|x| x.max(0.0)).collect())
            }
            (RefLayer::Gap, Value::Map { data, c, h, w }) => {
                let mut o = vec![0.0f64; c];
                for ch in 0..c {
                    o[ch] = data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>()
                        / (h * w) as f64;
                }
                Value::Vec(o)
            }
            (RefLayer::Flatten, Value::Map { data, .. }) => Value::Vec(data),
            _ => panic!("reference net: layer/value rank mismatch"),
        };
    }
    match value {
        Value::Vec(v) => v,
        _ => panic!("reference net must end in a rank-1 value"),
    }
}

/// `-log softmax(logits)[label]` in f64.
pub fn ref_loss(
    layers: &[RefLayer],
    input: &[f64],
    shape: (usize, usize, usize),
    label: usize,
) -> f64 {
    let logits = ref_forward(layers, input, shape);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    -((logits[label] - max) - denom.ln())
}

/// Largest relative disagreement between the implementation's analytic
/// gradient and the oracle's central finite differences, over every
/// parameter of every parameterized layer.
pub fn max_gradient_mismatch(net: &Network, input: &Tensor, label: usize, eps: f64) -> f64 {
    let shape = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
    );
    let data = Dataset::from_parts(
        Tensor::from_vec(
            &[1, shape.0, shape.1, shape.2],
            input.data().to_vec(),
        )
        .unwrap(),
        vec![label],
        label + 1,
    )
    .unwrap();
    let (grads, _) = net.batch_gradients(&data, &[0]).unwrap();

    let reference = to_ref(net);
    let input64: Vec<f64> = input.data().iter().map(|v| *v as f64).collect();
    let mut worst = 0.0f64;

    for (li, layer_grads) in grads.iter().enumerate() {
        let Some(layer_grads) = layer_grads else {
            continue;
        };
        let n_weights = layer_grads.weights.len();
        let n_bias = layer_grads.bias.len();
        for p in 0..n_weights + n_bias {
            let probe = |delta: f64| -> f64 {
                let mut layers = reference.clone();
                match &mut layers[li] {
                    RefLayer::Conv { weights, bias, .. }
                    | RefLayer::Dense { weights, bias, .. } => {
                        if p < n_weights {
                            weights[p] += delta;
                        } else {
                            bias[p - n_weights] += delta;
                        }
                    }
                    _ => unreachable!(),
                }
                ref_loss(&layers, &input64, shape, label)
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let analytic = if p < n_weights {
                layer_grads.weights[p]
            } else {
                layer_grads.bias[p - n_weights]
            };
            let diff = (analytic - fd).abs();
            if diff > 1e-8 {
                worst = worst.max(diff / analytic.abs().max(fd.abs()).max(1e-8));
            }
        }
    }
    worst
}

/// Random conv -> relu -> gap -> dense instance with relu pre-activations
/// kept away from the kink so finite differences stay valid. Returns None
/// when the draw lands too close to a kink.
pub fn random_conv_instance(seed: u64) -> Option<(Network, Tensor, usize)> {
    use prunekit::network::{init_conv, init_dense};
    use rand::Rng;
    let mut r = prunekit::rng::rng_from(seed);
    let c = r.gen_range(1..=2);
    let m = r.gen_range(2..=3);
    let k = r.gen_range(1..=3);
    let stride = r.gen_range(1..=2);
    let padding = r.gen_range(0..=1);
    let h = r.gen_range(k.max(3)..=6);
    let classes = 3;
    let conv = init_conv(&mut r, m, c, k, stride, padding);
    let dense = init_dense(&mut r, classes, m);
    let net = Network::new(
        vec![
            Layer::Conv(conv),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense(dense),
        ],
        seed,
    )
    .unwrap();
    let input = Tensor::from_vec(
        &[c, h, h],
        (0..c * h * h).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let label = r.gen_range(0..classes);
    let conv_out = match &net.layers[0] {
        Layer::Conv(conv) => conv.forward(&input).unwrap(),
        _ => unreachable!(),
    };
    if conv_out.data().iter().any(|v| v.abs() < 0.05) {
        return None;
    }
    Some((net, input, label))
}

/// Random flatten -> dense instance.
pub fn random_dense_instance(seed: u64) -> (Network, Tensor, usize) {
    use prunekit::network::init_dense;
    use rand::Rng;
    let mut r = prunekit::rng::rng_from(seed);
    let inp = r.gen_range(2..=5);
    let out = r.gen_range(2..=4);
    let dense = init_dense(&mut r, out, inp);
    let net = Network::new(vec![Layer::Flatten, Layer::Dense(dense)], seed).unwrap();
    let input = Tensor::from_vec(
        &[inp, 1, 1],
        (0..inp).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let label = r.gen_range(0..out);
    (net, input, label)
}

/// Dense grid-refinement oracle for the geometric median: repeatedly grid
/// the bounding box and zoom on the best cell until cells are below 1e-3
/// (at least 3 levels). Returns (argmin, objective).
pub fn gm_grid_oracle(f: &prunekit::fpgm::FilterMatrix) -> (Vec<f64>, f64) {
    use prunekit::fpgm::sum_distances;
    let dim = f.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for m in 0..f.rows() {
        for (d, v) in f.row(m).iter().enumerate() {
            lo[d] = lo[d].min(*v);
            hi[d] = hi[d].max(*v);
        }
    }
    const POINTS: usize = 17;
    let mut best_x = lo.clone();
    let mut best_obj = f64::INFINITY;
    let mut level = 0;
    loop {
        let steps: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l) / (POINTS - 1) as f64)
            .collect();
        let mut idx = vec![0usize; dim];
        loop {
            let x: Vec<f64> = idx
                .iter()
                .zip(&lo)
                .zip(&steps)
                .map(|((i, l), s)| l + *i as f64 * s)
                .collect();
            let obj = sum_distances(f, &x);
            if obj < best_obj {
                best_obj = obj;
                best_x = x;
            }
            let mut d = 0;
            loop {
                if d == dim {
                    break;
                }
                idx[d] += 1;
                if idx[d] < POINTS {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == dim {
                break;
            }
        }
        level += 1;
        let max_step = steps.iter().cloned().fold(0.0f64, f64::max);
        if level >= 3 && max_step <= 1e-3 {
            return (best_x, best_obj);
        }
        for d in 0..dim {
            let margin = 2.0 * steps[d];
            lo[d] = (best_x[d] - margin).max(lo[d]);
            hi[d] = (best_x[d] + margin).min(hi[d]);
        }
    }
}

/// Strips volatile fields from a run report so two runs can be compared for
/// bit-identical content.
pub fn report_without_timing(path: &std::path::Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    v
}

/// bo_history.csv with the wall-clock column removed.
pub fn history_without_seconds(path: &std::path::Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.pop();
            cols.join(",")
        })
        .collect()
}
