//! Forward construction of tape operations.
//!
//! Every method computes the op's value eagerly, pushes a node recording how
//! it was produced, and returns the handle. Shape checks happen here;
//! backward can then assume well-formed operands.

use rand::Rng;

use super::kernels as k;
use super::{Mode, Op, Tape, Var};
use crate::error::{Error, Result};

impl Tape {
    fn binary_elementwise(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("div", a, b)?;
        if self.data(b).iter().any(|&y| y == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::MulScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Relu(a))
    }

    /// Exact gelu: x * Phi(x) with the Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * k::norm_cdf(x)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| k::sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("log of non-positive {bad}")));
        }
        let data: Vec<f64> = self.data(a).iter().map(|x| x.ln()).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), data, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.push(vec![1], vec![s / n], Op::Mean(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa, sb) {
            ([m, ka], [kb, n]) if ka == kb => {
                let (m, kk, n) = (*m, *ka, *n);
                let data = k::matmul(self.data(a), self.data(b), m, kk, n);
                Ok(self.push(vec![m, n], data, Op::Matmul { a, b, m, k: kk, n }))
            }
            _ => Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            }),
        }
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        match self.shape(x) {
            [r, c] => {
                let (r, c) = (*r, *c);
                let data = k::transpose(self.data(x), r, c);
                Ok(self.push(vec![c, r], data, Op::Transpose2 { x, rows: r, cols: c }))
            }
            other => Err(Error::config(
                "transpose",
                format!("expected rank-2 tensor, got {other:?}"),
            )),
        }
    }

    /// Cross-correlation with per-output-channel bias. Accepts [C,H,W] or
    /// [N,C,H,W]; output rank matches input rank.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c_in, h, wd) = k::image_dims(self.shape(x)).ok_or_else(|| {
            Error::config("conv2d", format!("input rank must be 3 or 4, got {:?}", self.shape(x)))
        })?;
        let ws = self.shape(w).to_vec();
        let [c_out, wc_in, kh, kw] = match ws[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::config("conv2d", format!("weight rank must be 4, got {ws:?}"))),
        };
        if wc_in != c_in || self.shape(bias) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d", "stride must be positive"));
        }
        let ho = k::conv_out_dim(h, kh, stride, padding)
            .ok_or_else(|| Error::config("conv2d", format!("non-integral output height for H={h} kh={kh} stride={stride} pad={padding}")))?;
        let wo = k::conv_out_dim(wd, kw, stride, padding)
            .ok_or_else(|| Error::config("conv2d", format!("non-integral output width for W={wd} kw={kw} stride={stride} pad={padding}")))?;
        let mut out = vec![0.0; n * c_out * ho * wo];
        let in_sz = c_in * h * wd;
        let out_sz = c_out * ho * wo;
        for i in 0..n {
            let w_data = &self.nodes[w.0].data;
            let b_data = &self.nodes[bias.0].data;
            let x_data = &self.nodes[x.0].data[i * in_sz..(i + 1) * in_sz];
            k::conv2d_single(
                x_data,
                w_data,
                b_data,
                c_in,
                h,
                wd,
                c_out,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                &mut out[i * out_sz..(i + 1) * out_sz],
            );
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![c_out, ho, wo]
        } else {
            vec![n, c_out, ho, wo]
        };
        Ok(self.push(out_shape, out, Op::Conv2d { x, w, bias, stride, padding }))
    }

    /// Depthwise cross-correlation: weight [C,1,kh,kw], one filter per channel.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = k::image_dims(self.shape(x)).ok_or_else(|| {
            Error::config("depthwise_conv2d", format!("input rank must be 3 or 4, got {:?}", self.shape(x)))
        })?;
        let ws = self.shape(w).to_vec();
        let [wc, one, kh, kw] = match ws[..] {
            [a, b, cc, d] => [a, b, cc, d],
            _ => {
                return Err(Error::config(
                    "depthwise_conv2d",
                    format!("weight rank must be 4, got {ws:?}"),
                ))
            }
        };
        if wc != c || one != 1 || self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        let ho = k::conv_out_dim(h, kh, stride, padding)
            .ok_or_else(|| Error::config("depthwise_conv2d", "non-integral output height"))?;
        let wo = k::conv_out_dim(wd, kw, stride, padding)
            .ok_or_else(|| Error::config("depthwise_conv2d", "non-integral output width"))?;
        let mut out = vec![0.0; n * c * ho * wo];
        let in_sz = c * h * wd;
        let out_sz = c * ho * wo;
        for i in 0..n {
            let w_data = &self.nodes[w.0].data;
            let b_data = &self.nodes[bias.0].data;
            let x_data = &self.nodes[x.0].data[i * in_sz..(i + 1) * in_sz];
            k::depthwise_single(
                x_data,
                w_data,
                b_data,
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                &mut out[i * out_sz..(i + 1) * out_sz],
            );
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![c, ho, wo]
        } else {
            vec![n, c, ho, wo]
        };
        Ok(self.push(out_shape, out, Op::DepthwiseConv2d { x, w, bias, stride, padding }))
    }

    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let (n, c, h, wd, ho, wo) = self.pool_dims("avg_pool2d", x, kh, kw, stride)?;
        let mut out = vec![0.0; n * c * ho * wo];
        let inv = 1.0 / (kh * kw) as f64;
        for i in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for dh in 0..kh {
                            for dw in 0..kw {
                                acc += self.nodes[x.0].data
                                    [((i * c + ch) * h + oh * stride + dh) * wd + ow * stride + dw];
                            }
                        }
                        out[((i * c + ch) * ho + oh) * wo + ow] = acc * inv;
                    }
                }
            }
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![c, ho, wo]
        } else {
            vec![n, c, ho, wo]
        };
        Ok(self.push(out_shape, out, Op::AvgPool2d { x, kh, kw, stride }))
    }

    /// Max pool; gradient routes to the first maximum in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let (n, c, h, wd, ho, wo) = self.pool_dims("max_pool2d", x, kh, kw, stride)?;
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for i in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let idx = ((i * c + ch) * h + oh * stride + dh) * wd
                                    + ow * stride
                                    + dw;
                                let v = self.nodes[x.0].data[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((i * c + ch) * ho + oh) * wo + ow;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![c, ho, wo]
        } else {
            vec![n, c, ho, wo]
        };
        Ok(self.push(out_shape, out, Op::MaxPool2d { x, argmax }))
    }

    fn pool_dims(
        &self,
        op: &'static str,
        x: Var,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (n, c, h, wd) = k::image_dims(self.shape(x))
            .ok_or_else(|| Error::config(op, format!("input rank must be 3 or 4, got {:?}", self.shape(x))))?;
        if stride == 0 {
            return Err(Error::config(op, "stride must be positive"));
        }
        if kh > h || kw > wd {
            return Err(Error::config(
                op,
                format!("window {kh}x{kw} larger than input {h}x{wd}"),
            ));
        }
        let ho = k::conv_out_dim(h, kh, stride, 0)
            .ok_or_else(|| Error::config(op, "non-integral output height"))?;
        let wo = k::conv_out_dim(wd, kw, stride, 0)
            .ok_or_else(|| Error::config(op, "non-integral output width"))?;
        Ok((n, c, h, wd, ho, wo))
    }

    /// Mean over all spatial positions: [C,H,W] -> [C], [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, wd) = k::image_dims(self.shape(x)).ok_or_else(|| {
            Error::config("global_avg_pool", format!("input rank must be 3 or 4, got {:?}", self.shape(x)))
        })?;
        let inv = 1.0 / (h * wd) as f64;
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            let s: f64 = self.nodes[x.0].data[i * h * wd..(i + 1) * h * wd].iter().sum();
            out[i] = s * inv;
        }
        let out_shape = if self.shape(x).len() == 3 { vec![c] } else { vec![n, c] };
        Ok(self.push(out_shape, out, Op::GlobalAvgPool(x)))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, wd) = k::image_dims(self.shape(x)).ok_or_else(|| {
            Error::config("global_max_pool", format!("input rank must be 3 or 4, got {:?}", self.shape(x)))
        })?;
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n * c {
            let base = i * h * wd;
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = base;
            for j in 0..h * wd {
                let v = self.nodes[x.0].data[base + j];
                if v > best {
                    best = v;
                    best_idx = base + j;
                }
            }
            out[i] = best;
            argmax[i] = best_idx;
        }
        let out_shape = if self.shape(x).len() == 3 { vec![c] } else { vec![n, c] };
        Ok(self.push(out_shape, out, Op::GlobalMaxPool { x, argmax }))
    }

    /// Mean across channels: [C,H,W] -> [1,H,W], [N,C,H,W] -> [N,1,H,W].
    pub fn channel_mean_map(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, wd) = k::image_dims(self.shape(x)).ok_or_else(|| {
            Error::config("channel_mean_map", format!("input rank must be 3 or 4, got {:?}", self.shape(x)))
        })?;
        let hw = h * wd;
        let inv = 1.0 / c as f64;
        let mut out = vec![0.0; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += self.nodes[x.0].data[(i * c + ch) * hw + p];
                }
                out[i * hw + p] = acc * inv;
            }
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![1, h, wd]
        } else {
            vec![n, 1, h, wd]
        };
        Ok(self.push(out_shape, out, Op::ChannelMeanMap(x)))
    }

    pub fn channel_max_map(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, wd) = k::image_dims(self.shape(x)).ok_or_else(|| {
            Error::config("channel_max_map", format!("input rank must be 3 or 4, got {:?}", self.shape(x)))
        })?;
        let hw = h * wd;
        let mut out = vec![0.0; n * hw];
        let mut argmax = vec![0usize; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ch in 0..c {
                    let idx = (i * c + ch) * hw + p;
                    let v = self.nodes[x.0].data[idx];
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                out[i * hw + p] = best;
                argmax[i * hw + p] = best_idx;
            }
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![1, h, wd]
        } else {
            vec![n, 1, h, wd]
        };
        Ok(self.push(out_shape, out, Op::ChannelMaxMap { x, argmax }))
    }

    /// Nearest-neighbor upsampling by an integer factor on the spatial dims.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::config("upsample_nearest", "factor must be positive"));
        }
        let (n, c, h, wd) = k::image_dims(self.shape(x)).ok_or_else(|| {
            Error::config("upsample_nearest", format!("input rank must be 3 or 4, got {:?}", self.shape(x)))
        })?;
        let (ho, wo) = (h * factor, wd * factor);
        let mut out = vec![0.0; n * c * ho * wo];
        for i in 0..n * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    out[(i * ho + oh) * wo + ow] =
                        self.nodes[x.0].data[(i * h + oh / factor) * wd + ow / factor];
                }
            }
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![c, ho, wo]
        } else {
            vec![n, c, ho, wo]
        };
        Ok(self.push(out_shape, out, Op::UpsampleNearest { x, factor }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::config(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = k::lane_dims(&shape, axis);
        let mut out = vec![0.0; self.data(x).len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(self.nodes[x.0].data[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (self.nodes[x.0].data[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    /// Mean over the batch of -log softmax(logits)[label], computed in the
    /// log-sum-exp form. Logits [n,K], labels length n.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, kk] = match shape[..] {
            [a, b] => [a, b],
            _ => {
                return Err(Error::config(
                    "cross_entropy",
                    format!("logits must be rank 2, got {shape:?}"),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::config(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= kk) {
            return Err(Error::domain(
                "cross_entropy",
                format!("label {bad} out of range for {kk} classes"),
            ));
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &self.nodes[logits.0].data[i * kk..(i + 1) * kk];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / n as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::config("concat", "no operands"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::config(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut cursor = 0;
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = &self.nodes[p.0].data[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + cursor) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
                cursor += len;
            }
        }
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(p));
            reshaped.push(self.reshape(p, &s)?);
        }
        self.concat(&reshaped, 0)
    }

    /// Selects index `i` along the leading axis, dropping that axis.
    pub fn index_axis0(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::config("index_axis0", "needs rank >= 2"));
        }
        if index >= shape[0] {
            return Err(Error::config(
                "index_axis0",
                format!("index {index} out of range {}", shape[0]),
            ));
        }
        let rest: usize = shape[1..].iter().product();
        let data = self.nodes[x.0].data[index * rest..(index + 1) * rest].to_vec();
        Ok(self.push(shape[1..].to_vec(), data, Op::IndexAxis0 { x, index }))
    }

    /// Mean along the leading axis: [T, rest..] -> [rest..].
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::config("mean_axis0", "needs rank >= 2"));
        }
        let t = shape[0];
        let rest: usize = shape[1..].iter().product();
        let inv = 1.0 / t as f64;
        let mut out = vec![0.0; rest];
        for j in 0..t {
            for r in 0..rest {
                out[r] += self.nodes[x.0].data[j * rest + r];
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        Ok(self.push(shape[1..].to_vec(), out, Op::MeanAxis0(x)))
    }

    /// Extracts element [row, col] of a rank-2 tensor as a scalar node.
    pub fn select_rc(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        match self.shape(x) {
            &[r, c] if row < r && col < c => {
                let v = self.nodes[x.0].data[row * c + col];
                Ok(self.push(vec![1], vec![v], Op::SelectRC { x, row, col }))
            }
            other => Err(Error::config(
                "select_rc",
                format!("index ({row},{col}) invalid for shape {other:?}"),
            )),
        }
    }

    /// [n,d] + [d], broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        match (&sx[..], &sb[..]) {
            ([_, d], [db]) if d == db => {
                let d = *d;
                let data: Vec<f64> = self
                    .nodes[x.0]
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + self.nodes[b.0].data[i % d])
                    .collect();
                Ok(self.push(sx, data, Op::AddRowBias { x, b }))
            }
            _ => Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx,
                rhs: sb,
            }),
        }
    }

    /// [n,d] * [d], broadcasting the scale over rows.
    pub fn mul_row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        match (&sx[..], &ss[..]) {
            ([_, d], [ds]) if d == ds => {
                let d = *d;
                let data: Vec<f64> = self
                    .nodes[x.0]
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * self.nodes[s.0].data[i % d])
                    .collect();
                Ok(self.push(sx, data, Op::MulRowScale { x, s }))
            }
            _ => Err(Error::ShapeMismatch {
                op: "mul_row_scale",
                lhs: sx,
                rhs: ss,
            }),
        }
    }

    /// Per-sample channel gate: x [N,C,H,W] * gate [N,C] broadcast over H,W.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gate).to_vec();
        match (&sx[..], &sg[..]) {
            ([n, c, h, w], [gn, gc]) if n == gn && c == gc => {
                let hw = h * w;
                let data: Vec<f64> = self
                    .nodes[x.0]
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * self.nodes[gate.0].data[i / hw])
                    .collect();
                Ok(self.push(sx, data, Op::MulChannelGate { x, gate }))
            }
            _ => Err(Error::ShapeMismatch {
                op: "mul_channel_gate",
                lhs: sx,
                rhs: sg,
            }),
        }
    }

    /// Spatial gate: x [C,H,W] * gate [1,H,W], or x [N,C,H,W] * gate [N,1,H,W],
    /// broadcast over channels.
    pub fn mul_spatial_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gate).to_vec();
        let ok = match (&sx[..], &sg[..]) {
            ([_, h, w], [1, gh, gw]) => h == gh && w == gw,
            ([n, _, h, w], [gn, 1, gh, gw]) => n == gn && h == gh && w == gw,
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "mul_spatial_gate",
                lhs: sx,
                rhs: sg,
            });
        }
        let (n, c, h, w) = k::image_dims(&sx).expect("validated");
        let hw = h * w;
        let mut data = vec![0.0; n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(i * c + ch) * hw + p] = self.nodes[x.0].data[(i * c + ch) * hw + p]
                        * self.nodes[gate.0].data[i * hw + p];
                }
            }
        }
        Ok(self.push(sx, data, Op::MulSpatialGate { x, gate }))
    }

    /// Per-channel scale shared across the batch: x [(N,)C,H,W] * s [C].
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        let (n, c, h, w) = match k::image_dims(&sx) {
            Some(dims) => dims,
            None => {
                return Err(Error::ShapeMismatch {
                    op: "scale_channels",
                    lhs: sx,
                    rhs: ss,
                })
            }
        };
        if ss != [c] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: sx,
                rhs: ss,
            });
        }
        let hw = h * w;
        let mut data = vec![0.0; n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                let sv = self.nodes[s.0].data[ch];
                for p in 0..hw {
                    data[(i * c + ch) * hw + p] = self.nodes[x.0].data[(i * c + ch) * hw + p] * sv;
                }
            }
        }
        Ok(self.push(sx, data, Op::ScaleChannels { x, s }))
    }

    /// Per-channel bias shared across the batch: x [(N,)C,H,W] + b [C].
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        let (n, c, h, w) = match k::image_dims(&sx) {
            Some(dims) => dims,
            None => {
                return Err(Error::ShapeMismatch {
                    op: "add_channel_bias",
                    lhs: sx,
                    rhs: sb,
                })
            }
        };
        if sb != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let hw = h * w;
        let mut data = vec![0.0; n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                let bv = self.nodes[b.0].data[ch];
                for p in 0..hw {
                    data[(i * c + ch) * hw + p] = self.nodes[x.0].data[(i * c + ch) * hw + p] + bv;
                }
            }
        }
        Ok(self.push(sx, data, Op::AddChannelBias { x, b }))
    }

    /// Training-mode batch normalization over batch statistics.
    ///
    /// Rank-2 input [n,d] normalizes each feature over the batch; rank-4
    /// [N,C,H,W] normalizes each channel over batch and spatial positions.
    /// Returns the output together with the biased batch mean/variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        let (channels, count, stat_index): (usize, usize, Box<dyn Fn(usize) -> usize>) =
            match shape[..] {
                [n, d] => {
                    if n < 2 {
                        return Err(Error::contract(
                            "batch_norm",
                            "training mode requires batch size >= 2",
                        ));
                    }
                    (d, n, Box::new(move |i| i % d))
                }
                [n, c, h, w] => {
                    if n < 2 {
                        return Err(Error::contract(
                            "batch_norm",
                            "training mode requires batch size >= 2",
                        ));
                    }
                    let hw = h * w;
                    (c, n * hw, Box::new(move |i| (i / hw) % c))
                }
                _ => {
                    return Err(Error::config(
                        "batch_norm",
                        format!("input rank must be 2 or 4, got {shape:?}"),
                    ))
                }
            };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let numel = self.data(x).len();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for i in 0..numel {
            mean[stat_index(i)] += self.nodes[x.0].data[i];
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for i in 0..numel {
            let d = self.nodes[x.0].data[i] - mean[stat_index(i)];
            var[stat_index(i)] += d * d;
        }
        for v in &mut var {
            *v /= count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; numel];
        let mut out = vec![0.0; numel];
        for i in 0..numel {
            let c = stat_index(i);
            xhat[i] = (self.nodes[x.0].data[i] - mean[c]) * inv_std[c];
            out[i] = self.nodes[gamma.0].data[c] * xhat[i] + self.nodes[beta.0].data[c];
        }
        let var_out = var.clone();
        let v = self.push(
            shape,
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                count,
            },
        );
        Ok((v, mean, var_out))
    }

    /// Layer normalization over the last dimension, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::config("layer_norm", "empty shape"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.data(x).len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = self.nodes[gamma.0].data[j] * xh + self.nodes[beta.0].data[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Layer normalization across the channel axis of [(N,)C,H,W] images,
    /// per spatial position, then per-channel affine.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = k::image_dims(&shape)
            .ok_or_else(|| Error::config("layer_norm_channels", format!("input rank must be 3 or 4, got {shape:?}")))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_channels",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let hw = h * w;
        let numel = n * c * hw;
        let mut xhat = vec![0.0; numel];
        let mut inv_std = vec![0.0; n * hw];
        let mut out = vec![0.0; numel];
        for i in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (i * c + ch) * hw + p;
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += self.nodes[x.0].data[at(ch)];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = self.nodes[x.0].data[at(ch)] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[i * hw + p] = istd;
                for ch in 0..c {
                    let xh = (self.nodes[x.0].data[at(ch)] - mean) * istd;
                    xhat[at(ch)] = xh;
                    out[at(ch)] = self.nodes[gamma.0].data[ch] * xh + self.nodes[beta.0].data[ch];
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNormChannels {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. Identity in evaluation mode or at rate 0; in
    /// training mode zeroes each element with probability `rate` and scales
    /// survivors by 1/(1-rate), drawing the mask from the tape's RNG.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("dropout", format!("rate {rate} not in [0,1)")));
        }
        if self.mode() == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let n = self.data(x).len();
        let keep_scale = 1.0 / (1.0 - rate);
        let rng = self
            .rng_mut()
            .ok_or_else(|| Error::contract("dropout", "training-mode tape has no RNG"))?;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f64> = self
            .nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::Dropout { x, mask }))
    }

    /// Cuts [C,H,W] into non-overlapping p x p patches, row-major over the
    /// patch grid, each flattened in (channel, row, col) order:
    /// output [T, C*p*p] with T = (H/p)*(W/p).
    pub fn patch_extract(&mut self, x: Var, patch: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [c, h, w] = match shape[..] {
            [a, b, cc] => [a, b, cc],
            _ => {
                return Err(Error::config(
                    "patch_extract",
                    format!("input rank must be 3, got {shape:?}"),
                ))
            }
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::config(
                "patch_extract",
                format!("patch {patch} does not divide {h}x{w}"),
            ));
        }
        let (gh, gw) = (h / patch, w / patch);
        let t = gh * gw;
        let d = c * patch * patch;
        let mut out = vec![0.0; t * d];
        for ph in 0..gh {
            for pw in 0..gw {
                let token = ph * gw + pw;
                for ch in 0..c {
                    for dh in 0..patch {
                        for dw in 0..patch {
                            let src = (ch * h + ph * patch + dh) * w + pw * patch + dw;
                            let dst = token * d + (ch * patch + dh) * patch + dw;
                            out[dst] = self.nodes[x.0].data[src];
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![t, d], out, Op::PatchExtract { x, patch }))
    }
}
