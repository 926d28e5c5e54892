//! Convolution and dense layers with per-filter masks.
//!
//! A filter whose `mask` entry is false has all weights (and its bias entry)
//! exactly 0.0. A frozen filter is additionally excluded from gradient
//! updates; only masked filters may be frozen. Soft pruning clears masks but
//! leaves filters trainable, so the next update both changes the weights and
//! restores the mask.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2-D convolution layer. Filters are `[M, c, k, k]`, inputs `[c, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub mask: Vec<bool>,
    pub frozen: Vec<bool>,
    pub prunable: bool,
}

/// Fully connected layer. Weights are `[out, in]`; the prunable unit is an
/// output row.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub mask: Vec<bool>,
    pub frozen: Vec<bool>,
    pub prunable: bool,
}

/// One step of a network: a parameterized layer or an activation marker.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Dense(DenseLayer),
    Relu,
    GlobalAvgPool,
    Flatten,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
        }
    }
}

/// Parameter gradients for one layer, in the same layout as the parameters.
/// Accumulated in f64 so batch sums are order-exact at f32 scale.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like_conv(layer: &ConvLayer) -> Self {
        LayerGrads {
            weights: vec![0.0; layer.filters.numel()],
            bias: vec![0.0; layer.bias.as_ref().map_or(0, Tensor::numel)],
        }
    }

    pub fn zeros_like_dense(layer: &DenseLayer) -> Self {
        LayerGrads {
            weights: vec![0.0; layer.weights.numel()],
            bias: vec![0.0; layer.bias.numel()],
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.weights {
            *v *= s;
        }
        for v in &mut self.bias {
            *v *= s;
        }
    }
}

impl ConvLayer {
    pub fn new(filters: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        assert_eq!(filters.shape().len(), 4, "conv filters must be [M, c, k, k]");
        assert_eq!(
            filters.shape()[2],
            filters.shape()[3],
            "conv kernels must be square"
        );
        assert!(stride >= 1);
        let m = filters.shape()[0];
        if let Some(b) = &bias {
            assert_eq!(b.shape(), &[m]);
        }
        ConvLayer {
            filters,
            bias,
            stride,
            padding,
            mask: vec![true; m],
            frozen: vec![false; m],
            prunable: true,
        }
    }

    pub fn filter_count(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.filters.shape()[2]
    }

    /// Weight + bias entries per filter.
    pub fn params_per_filter(&self) -> usize {
        self.in_channels() * self.kernel_size() * self.kernel_size()
            + usize::from(self.bias.is_some())
    }

    pub fn param_count(&self) -> usize {
        self.filter_count() * self.params_per_filter()
    }

    fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::ShapeMismatch {
                expected: format!("padded input of at least {k}x{k}"),
                actual: format!("{hp}x{wp} (input {h}x{w}, padding {})", self.padding),
            });
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    /// Cross-correlation of `input` `[c, H, W]` with the filter bank,
    /// yielding `[M, H', W']` with `H' = (H + 2*padding - k)/stride + 1`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = check_rank3(input)?;
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("input with {} channels", self.in_channels()),
                actual: format!("{:?}", input.shape()),
            });
        }
        let (oh, ow) = self.out_spatial(h, w)?;
        let m = self.filter_count();
        let k = self.kernel_size();
        let mut out = Tensor::zeros(&[m, oh, ow]);

        let fdata = self.filters.data();
        let idata = input.data();
        let odata = out.data_mut();
        for fm in 0..m {
            let fbase = fm * c * k * k;
            let bias = self.bias.as_ref().map_or(0.0, |b| b.data()[fm]) as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ch in 0..c {
                        let chbase = fbase + ch * k * k;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = (ch * h + iy as usize) * w;
                            let frow = chbase + ky * k;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += fdata[frow + kx] as f64 * idata[irow + ix as usize] as f64;
                            }
                        }
                    }
                    odata[(fm * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar loss wrt filters, bias and input, given the
    /// loss gradient at the output.
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
    ) -> Result<(LayerGrads, Tensor)> {
        let (c, h, w) = check_rank3(input)?;
        let (m, oh, ow) = check_rank3(grad_out)?;
        debug_assert_eq!(m, self.filter_count());
        let k = self.kernel_size();
        let mut grads = LayerGrads::zeros_like_conv(self);
        let mut grad_in = Tensor::zeros(&[c, h, w]);

        let fdata = self.filters.data();
        let idata = input.data();
        let gdata = grad_out.data();
        let gin = grad_in.data_mut();
        for fm in 0..m {
            let fbase = fm * c * k * k;
            let mut gbias = 0.0f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gdata[(fm * oh + oy) * ow + ox] as f64;
                    if g == 0.0 {
                        continue;
                    }
                    gbias += g;
                    for ch in 0..c {
                        let chbase = fbase + ch * k * k;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let ioff = (ch * h + iy as usize) * w;
                            let foff = chbase + ky * k;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ii = ioff + ix as usize;
                                grads.weights[foff + kx] += g * idata[ii] as f64;
                                gin[ii] += (g * fdata[foff + kx] as f64) as f32;
                            }
                        }
                    }
                }
            }
            if !grads.bias.is_empty() {
                grads.bias[fm] = gbias;
            }
        }
        Ok((grads, grad_in))
    }

    /// SGD update. Frozen filters stay untouched; every updated filter is
    /// live again, so its mask is restored.
    pub fn apply_grads(&mut self, grads: &LayerGrads, lr: f64) {
        let m = self.filter_count();
        let per = self.in_channels() * self.kernel_size() * self.kernel_size();
        let wdata = self.filters.data_mut();
        for fm in 0..m {
            if self.frozen[fm] {
                continue;
            }
            for i in fm * per..(fm + 1) * per {
                wdata[i] = (wdata[i] as f64 - lr * grads.weights[i]) as f32;
            }
            if let Some(b) = self.bias.as_mut() {
                let bd = b.data_mut();
                bd[fm] = (bd[fm] as f64 - lr * grads.bias[fm]) as f32;
            }
            self.mask[fm] = true;
        }
    }

    /// Zeroes filter `m`'s weights and bias and clears its mask.
    pub fn zero_filter(&mut self, fm: usize, freeze: bool) {
        let per = self.in_channels() * self.kernel_size() * self.kernel_size();
        for v in &mut self.filters.data_mut()[fm * per..(fm + 1) * per] {
            *v = 0.0;
        }
        if let Some(b) = self.bias.as_mut() {
            b.data_mut()[fm] = 0.0;
        }
        self.mask[fm] = false;
        if freeze {
            self.frozen[fm] = true;
        }
    }
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Self {
        assert_eq!(weights.shape().len(), 2, "dense weights must be [out, in]");
        let out = weights.shape()[0];
        assert_eq!(bias.shape(), &[out]);
        DenseLayer {
            weights,
            bias,
            mask: vec![true; out],
            frozen: vec![false; out],
            prunable: true,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn params_per_row(&self) -> usize {
        self.in_dim() + 1
    }

    pub fn param_count(&self) -> usize {
        self.out_dim() * self.params_per_row()
    }

    /// Affine map of a rank-1 input. Masked rows hold zero weights and bias,
    /// so they output 0.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 1 || input.shape()[0] != self.in_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}]", self.in_dim()),
                actual: format!("{:?}", input.shape()),
            });
        }
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        let mut out = Tensor::zeros(&[out_dim]);
        let wdata = self.weights.data();
        let idata = input.data();
        let odata = out.data_mut();
        for o in 0..out_dim {
            let row = &wdata[o * in_dim..(o + 1) * in_dim];
            let mut acc = self.bias.data()[o] as f64;
            for (wv, iv) in row.iter().zip(idata) {
                acc += *wv as f64 * *iv as f64;
            }
            odata[o] = acc as f32;
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(LayerGrads, Tensor)> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        debug_assert_eq!(grad_out.shape(), &[out_dim]);
        let mut grads = LayerGrads::zeros_like_dense(self);
        let mut grad_in = vec![0.0f64; in_dim];
        let wdata = self.weights.data();
        let idata = input.data();
        for o in 0..out_dim {
            let g = grad_out.data()[o] as f64;
            grads.bias[o] = g;
            if g == 0.0 {
                continue;
            }
            let row = o * in_dim;
            for i in 0..in_dim {
                grads.weights[row + i] = g * idata[i] as f64;
                grad_in[i] += g * wdata[row + i] as f64;
            }
        }
        let grad_in = Tensor::from_vec(&[in_dim], grad_in.iter().map(|v| *v as f32).collect())?;
        Ok((grads, grad_in))
    }

    pub fn apply_grads(&mut self, grads: &LayerGrads, lr: f64) {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        let wdata = self.weights.data_mut();
        let bdata = self.bias.data_mut();
        for o in 0..out_dim {
            if self.frozen[o] {
                continue;
            }
            for i in o * in_dim..(o + 1) * in_dim {
                wdata[i] = (wdata[i] as f64 - lr * grads.weights[i]) as f32;
            }
            bdata[o] = (bdata[o] as f64 - lr * grads.bias[o]) as f32;
            self.mask[o] = true;
        }
    }

    pub fn zero_filter(&mut self, row: usize, freeze: bool) {
        let in_dim = self.in_dim();
        for v in &mut self.weights.data_mut()[row * in_dim..(row + 1) * in_dim] {
            *v = 0.0;
        }
        self.bias.data_mut()[row] = 0.0;
        self.mask[row] = false;
        if freeze {
            self.frozen[row] = true;
        }
    }
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    // Subgradient 1 at exactly 0: a soft-pruned filter outputs all zeros,
    // and it can only regrow in later training if gradient still passes
    // through the activation.
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(x, g)| if *x >= 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// `[C, H, W]` -> `[C]` mean over the spatial grid.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_rank3(input)?;
    let area = (h * w) as f64;
    let mut out = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut acc = 0.0f64;
        for v in &input.data()[ch * h * w..(ch + 1) * h * w] {
            acc += *v as f64;
        }
        out.data_mut()[ch] = (acc / area) as f32;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_rank3(input)?;
    let area = (h * w) as f32;
    let mut grad_in = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let g = grad_out.data()[ch] / area;
        for v in &mut grad_in.data_mut()[ch * h * w..(ch + 1) * h * w] {
            *v = g;
        }
    }
    Ok(grad_in)
}

/// Rank-3 `[c, H, W]` -> rank-1 `[c*H*W]`, row-major.
pub fn flatten_forward(input: &Tensor) -> Result<Tensor> {
    check_rank3(input)?;
    Tensor::from_vec(&[input.numel()], input.data().to_vec())
}

pub fn flatten_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(input.shape(), grad_out.data().to_vec())
}

fn check_rank3(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            expected: "rank-3 tensor [c, H, W]".into(),
            actual: format!("{:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(filters: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> ConvLayer {
        ConvLayer::new(filters, bias, stride, padding)
    }

    #[test]
    fn identity_kernel_passes_value_through() {
        let layer = conv(
            Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(),
            None,
            1,
            0,
        );
        let input = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let out = layer.forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn masked_filter_outputs_zero_map() {
        let mut layer = conv(
            Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(),
            Some(Tensor::from_vec(&[1], vec![0.7]).unwrap()),
            1,
            0,
        );
        layer.zero_filter(0, false);
        let input = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let out = layer.forward(&input).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
        assert!(!layer.mask[0]);
    }

    // Direct sliding-window oracle for the [DERIVED] conv example.
    fn sliding_window_oracle(
        input: &[f32],
        (h, w): (usize, usize),
        kernel: &[f32],
        k: usize,
    ) -> Vec<f32> {
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += kernel[ky * k + kx] as f64 * input[(oy + ky) * w + ox + kx] as f64;
                    }
                }
                out[oy * ow + ox] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn ones_kernel_matches_sliding_window_oracle() {
        let input: Vec<f32> = vec![1.0; 9];
        let kernel: Vec<f32> = vec![1.0; 4];
        let expected = sliding_window_oracle(&input, (3, 3), &kernel, 2);
        assert_eq!(expected, vec![4.0; 4]);

        let layer = conv(
            Tensor::from_vec(&[1, 1, 2, 2], kernel).unwrap(),
            None,
            1,
            0,
        );
        let out = layer
            .forward(&Tensor::from_vec(&[1, 3, 3], input).unwrap())
            .unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let layer = conv(Tensor::zeros(&[1, 2, 3, 3]), None, 1, 0);
        let err = layer
            .forward(&Tensor::zeros(&[1, 5, 5]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("2 channels"), "{err}");
        assert!(err.contains("[1, 5, 5]"), "{err}");
    }

    #[test]
    fn conv_rejects_too_small_input() {
        let layer = conv(Tensor::zeros(&[1, 1, 3, 3]), None, 1, 0);
        assert!(layer.forward(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn dense_identity() {
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let layer = DenseLayer::new(eye, Tensor::zeros(&[3]));
        let out = layer
            .forward(&Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dense_all_rows_masked_gives_zero_vector() {
        let mut layer = DenseLayer::new(
            Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 2.0, 0.0]).unwrap(),
            Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap(),
        );
        layer.zero_filter(0, false);
        layer.zero_filter(1, false);
        let out = layer
            .forward(&Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn dense_hand_matrix_multiply() {
        // rows [[1,1],[2,0]], bias (0.5, -0.5), input (1,1):
        // row0 = 1+1+0.5 = 2.5, row1 = 2+0-0.5 = 1.5
        let layer = DenseLayer::new(
            Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 2.0, 0.0]).unwrap(),
            Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap(),
        );
        let out = layer
            .forward(&Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[2.5, 1.5]);
    }

    #[test]
    fn dense_rejects_length_mismatch() {
        let layer = DenseLayer::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2]));
        assert!(layer.forward(&Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn global_avg_pool_means() {
        let input = Tensor::from_vec(&[2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let out = global_avg_pool_forward(&input).unwrap();
        assert_eq!(out.data(), &[2.0, 15.0]);
    }

    mod shape_algebra {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // H' = (H + 2*padding - k)/stride + 1 for every feasible combo.
            #[test]
            fn conv_output_shape_formula(
                h in 1usize..12,
                w in 1usize..12,
                k in 1usize..5,
                stride in 1usize..3,
                padding in 0usize..3,
            ) {
                prop_assume!(h + 2 * padding >= k && w + 2 * padding >= k);
                let layer = ConvLayer::new(Tensor::zeros(&[2, 1, k, k]), None, stride, padding);
                let out = layer.forward(&Tensor::zeros(&[1, h, w])).unwrap();
                let oh = (h + 2 * padding - k) / stride + 1;
                let ow = (w + 2 * padding - k) / stride + 1;
                prop_assert_eq!(out.shape(), &[2, oh, ow]);
            }
        }
    }
}
