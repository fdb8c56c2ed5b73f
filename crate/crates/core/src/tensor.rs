//! Dense row-major `f64` tensors and the raw numeric kernels shared by the
//! autodiff graph and the pruned (graph-free) inference path.
//!
//! Both paths call the same kernels so that a pruned network and a hard-masked
//! super-network accumulate in the same order; masked-out terms add an exact
//! zero and the results agree bitwise.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor. Panics on empty input.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Raw forward/backward kernels over flat slices.
pub mod kernels {
    use super::Tensor;
    use crate::error::{Error, Result};

    pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// `y = x W + b` for `x: [B, I]`, `W: [I, O]`, `b: [O]`.
    pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let (batch, inputs, outputs) = (xs[0], xs[1], ws[1]);
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; batch * outputs];
        for r in 0..batch {
            let row = &mut out[r * outputs..(r + 1) * outputs];
            for i in 0..inputs {
                let xv = xd[r * inputs + i];
                let wrow = &wd[i * outputs..(i + 1) * outputs];
                for (o, acc) in row.iter_mut().enumerate() {
                    *acc += xv * wrow[o];
                }
            }
            for (acc, bias) in row.iter_mut().zip(bd) {
                *acc += bias;
            }
        }
        Tensor::new(vec![batch, outputs], out)
    }

    /// Cross-correlation of `x: [B, K, H, W]` with `kernel: [K, C, s, s]`.
    pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (xs, ks) = (x.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] || ks[2] != ks[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (batch, in_ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, size) = (ks[1], ks[2]);
        let oh = conv_output_dim(h, size, stride, pad)
            .ok_or_else(|| Error::InvalidArgument(format!("kernel {size} too large for height {h}")))?;
        let ow = conv_output_dim(w, size, stride, pad)
            .ok_or_else(|| Error::InvalidArgument(format!("kernel {size} too large for width {w}")))?;
        let xd = x.data();
        let kd = kernel.data();
        let mut out = vec![0.0; batch * out_ch * oh * ow];
        for b in 0..batch {
            for k in 0..in_ch {
                let plane = &xd[(b * in_ch + k) * h * w..(b * in_ch + k + 1) * h * w];
                for c in 0..out_ch {
                    let dst = &mut out[(b * out_ch + c) * oh * ow..(b * out_ch + c + 1) * oh * ow];
                    for u in 0..size {
                        for v in 0..size {
                            let wv = kd[((k * out_ch + c) * size + u) * size + v];
                            for oi in 0..oh {
                                let ii = (oi * stride + u) as isize - pad as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                                let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                                for (oj, acc) in dst_row.iter_mut().enumerate() {
                                    let jj = (oj * stride + v) as isize - pad as isize;
                                    if jj >= 0 && jj < w as isize {
                                        *acc += wv * src_row[jj as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![batch, out_ch, oh, ow], out)
    }

    /// Gradients of [`conv2d`] with respect to its input and kernel.
    pub fn conv2d_backward(
        x: &Tensor,
        kernel: &Tensor,
        grad_out: &Tensor,
        stride: usize,
        pad: usize,
    ) -> (Tensor, Tensor) {
        let (xs, ks, gs) = (x.shape(), kernel.shape(), grad_out.shape());
        let (batch, in_ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, size) = (ks[1], ks[2]);
        let (oh, ow) = (gs[2], gs[3]);
        let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());
        let mut gx = vec![0.0; xd.len()];
        let mut gk = vec![0.0; kd.len()];
        for b in 0..batch {
            for k in 0..in_ch {
                let base_x = (b * in_ch + k) * h * w;
                for c in 0..out_ch {
                    let base_g = (b * out_ch + c) * oh * ow;
                    for u in 0..size {
                        for v in 0..size {
                            let widx = ((k * out_ch + c) * size + u) * size + v;
                            let wv = kd[widx];
                            let mut wgrad = 0.0;
                            for oi in 0..oh {
                                let ii = (oi * stride + u) as isize - pad as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for oj in 0..ow {
                                    let jj = (oj * stride + v) as isize - pad as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let xi = base_x + ii as usize * w + jj as usize;
                                    let g = gd[base_g + oi * ow + oj];
                                    wgrad += xd[xi] * g;
                                    gx[xi] += wv * g;
                                }
                            }
                            gk[widx] += wgrad;
                        }
                    }
                }
            }
        }
        (
            Tensor::new(xs.to_vec(), gx).expect("shape preserved"),
            Tensor::new(ks.to_vec(), gk).expect("shape preserved"),
        )
    }

    pub fn relu(x: &Tensor) -> Tensor {
        x.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let area = s[2] * s[3];
        let data = x
            .data()
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        Tensor::new(vec![s[0], s[1]], data)
    }

    /// Row-wise softmax probabilities and per-row negative log-likelihoods.
    pub fn softmax_nll(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = logits.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s.to_vec(),
                right: vec![labels.len()],
            });
        }
        let classes = s[1];
        let mut probs = Vec::with_capacity(logits.len());
        let mut nll = Vec::with_capacity(labels.len());
        for (row, &label) in logits.data().chunks(classes).zip(labels) {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
            nll.push(log_z - row[label]);
        }
        Ok((probs, nll))
    }

    /// Index of the largest logit in each row; the first wins on ties.
    pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
        let classes = logits.shape()[1];
        logits
            .data()
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Copies channels `keep` of `x: [B, K, H, W]` into a `[B, keep.len(), H, W]` tensor.
    pub fn gather_channels(x: &Tensor, keep: &[usize]) -> Tensor {
        let s = x.shape();
        let (batch, in_ch, area) = (s[0], s[1], s[2] * s[3]);
        let mut out = Vec::with_capacity(batch * keep.len() * area);
        for b in 0..batch {
            for &k in keep {
                let start = (b * in_ch + k) * area;
                out.extend_from_slice(&x.data()[start..start + area]);
            }
        }
        Tensor::new(vec![batch, keep.len(), s[2], s[3]], out).expect("gathered shape")
    }

    /// Rows `keep` of a `[K, ...]` tensor.
    pub fn gather_rows(t: &Tensor, keep: &[usize]) -> Tensor {
        let row: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(keep.len() * row);
        for &k in keep {
            out.extend_from_slice(&t.data()[k * row..(k + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = keep.len();
        Tensor::new(shape, out).expect("gathered shape")
    }
}
