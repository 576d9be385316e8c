//! Vector-Jacobian products for every recorded op.

use super::kernels as k;
use super::{Op, Tape};

impl Tape {
    pub(crate) fn backward_node(&mut self, id: usize) {
        let op = self.nodes[id].op.clone();
        let d_out = self.nodes[id]
            .grad
            .clone()
            .expect("backward_node called without gradient");
        match op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                self.accumulate(a, &d_out);
                self.accumulate(b, &d_out);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, &d_out);
                let neg: Vec<f64> = d_out.iter().map(|g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g / y)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = d_out
                        .iter()
                        .enumerate()
                        .map(|(i, g)| {
                            let x = self.nodes[a.0].data[i];
                            let y = self.nodes[b.0].data[i];
                            -g * x / (y * y)
                        })
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::AddScalar(a) => self.accumulate(a, &d_out),
            Op::MulScalar(a, c) => {
                let da: Vec<f64> = d_out.iter().map(|g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| g * (k::norm_cdf(x) + x * k::norm_pdf(x)))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[id].data)
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| g / x)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[id].data)
                    .map(|(g, &y)| g * y)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sum(a) => {
                let da = vec![d_out[0]; self.nodes[a.0].data.len()];
                self.accumulate(a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len();
                let da = vec![d_out[0] / n as f64; n];
                self.accumulate(a, &da);
            }

            Op::Matmul { a, b, m, k: kk, n } => {
                if self.needs(a) {
                    // dA = dC * B^T
                    let bt = k::transpose(&self.nodes[b.0].data, kk, n);
                    let da = k::matmul(&d_out, &bt, m, n, kk);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    // dB = A^T * dC
                    let at = k::transpose(&self.nodes[a.0].data, m, kk);
                    let db = k::matmul(&at, &d_out, kk, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose2 { x, rows, cols } => {
                let dx = k::transpose(&d_out, cols, rows);
                debug_assert_eq!(dx.len(), rows * cols);
                self.accumulate(x, &dx);
            }

            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let (n, c_in, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let ws = &self.nodes[w.0].shape;
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = {
                    let os = &self.nodes[id].shape;
                    (os[os.len() - 2], os[os.len() - 1])
                };
                let in_sz = c_in * h * wd;
                let out_sz = c_out * ho * wo;
                let mut dx = if self.needs(x) { Some(vec![0.0; n * in_sz]) } else { None };
                let mut dw = if self.needs(w) {
                    Some(vec![0.0; self.nodes[w.0].data.len()])
                } else {
                    None
                };
                let mut db = if self.needs(bias) { Some(vec![0.0; c_out]) } else { None };
                for i in 0..n {
                    k::conv2d_single_backward(
                        &self.nodes[x.0].data[i * in_sz..(i + 1) * in_sz],
                        &self.nodes[w.0].data,
                        &d_out[i * out_sz..(i + 1) * out_sz],
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
                        dx.as_mut().map(|v| &mut v[i * in_sz..(i + 1) * in_sz]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    self.accumulate(x, &dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(w, &dw);
                }
                if let Some(db) = db {
                    self.accumulate(bias, &db);
                }
            }
            Op::DepthwiseConv2d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let ws = &self.nodes[w.0].shape;
                let (kh, kw) = (ws[2], ws[3]);
                let (ho, wo) = {
                    let os = &self.nodes[id].shape;
                    (os[os.len() - 2], os[os.len() - 1])
                };
                let in_sz = c * h * wd;
                let out_sz = c * ho * wo;
                let mut dx = if self.needs(x) { Some(vec![0.0; n * in_sz]) } else { None };
                let mut dw = if self.needs(w) {
                    Some(vec![0.0; self.nodes[w.0].data.len()])
                } else {
                    None
                };
                let mut db = if self.needs(bias) { Some(vec![0.0; c]) } else { None };
                for i in 0..n {
                    k::depthwise_single_backward(
                        &self.nodes[x.0].data[i * in_sz..(i + 1) * in_sz],
                        &self.nodes[w.0].data,
                        &d_out[i * out_sz..(i + 1) * out_sz],
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        padding,
                        ho,
                        wo,
                        dx.as_mut().map(|v| &mut v[i * in_sz..(i + 1) * in_sz]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    self.accumulate(x, &dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(w, &dw);
                }
                if let Some(db) = db {
                    self.accumulate(bias, &db);
                }
            }

            Op::AvgPool2d { x, kh, kw, stride } => {
                let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let os = &self.nodes[id].shape;
                let (ho, wo) = (os[os.len() - 2], os[os.len() - 1]);
                let inv = 1.0 / (kh * kw) as f64;
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for i in 0..n {
                    for ch in 0..c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let g = d_out[((i * c + ch) * ho + oh) * wo + ow] * inv;
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        dx[((i * c + ch) * h + oh * stride + dh) * wd
                                            + ow * stride
                                            + dw] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::MaxPool2d { x, argmax, .. } => {
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += d_out[o];
                }
                self.accumulate(x, &dx);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let inv = 1.0 / (h * wd) as f64;
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for i in 0..n * c {
                    let g = d_out[i] * inv;
                    for p in 0..h * wd {
                        dx[i * h * wd + p] = g;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += d_out[o];
                }
                self.accumulate(x, &dx);
            }
            Op::ChannelMeanMap(x) => {
                let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let hw = h * wd;
                let inv = 1.0 / c as f64;
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(i * c + ch) * hw + p] = d_out[i * hw + p] * inv;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::ChannelMaxMap { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += d_out[o];
                }
                self.accumulate(x, &dx);
            }
            Op::UpsampleNearest { x, factor } => {
                let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let (ho, wo) = (h * factor, wd * factor);
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for i in 0..n * c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            dx[(i * h + oh / factor) * wd + ow / factor] +=
                                d_out[(i * ho + oh) * wo + ow];
                        }
                    }
                }
                self.accumulate(x, &dx);
            }

            Op::Softmax { x, axis } => {
                let shape = self.nodes[id].shape.clone();
                let (outer, len, inner) = k::lane_dims(&shape, axis);
                let y = &self.nodes[id].data;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += d_out[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (d_out[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::CrossEntropyLogits { logits, labels } => {
                let kk = self.nodes[logits.0].shape[1];
                let n = labels.len();
                let scale = d_out[0] / n as f64;
                let mut dl = vec![0.0; n * kk];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &self.nodes[logits.0].data[i * kk..(i + 1) * kk];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..kk {
                        let e = (row[j] - mx).exp();
                        dl[i * kk + j] = e;
                        denom += e;
                    }
                    for j in 0..kk {
                        dl[i * kk + j] /= denom;
                    }
                    dl[i * kk + label] -= 1.0;
                    for j in 0..kk {
                        dl[i * kk + j] *= scale;
                    }
                }
                self.accumulate(logits, &dl);
            }

            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut cursor = 0;
                for &p in &parts {
                    let len = self.nodes[p.0].shape[axis];
                    if self.needs(p) {
                        let mut dp = vec![0.0; self.nodes[p.0].data.len()];
                        for o in 0..outer {
                            let src_start = (o * axis_total + cursor) * inner;
                            dp[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&d_out[src_start..src_start + len * inner]);
                        }
                        self.accumulate(p, &dp);
                    }
                    cursor += len;
                }
            }
            Op::Reshape(x) => self.accumulate(x, &d_out),
            Op::IndexAxis0 { x, index } => {
                let rest = self.nodes[id].data.len();
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                dx[index * rest..(index + 1) * rest].copy_from_slice(&d_out);
                self.accumulate(x, &dx);
            }
            Op::MeanAxis0(x) => {
                let t = self.nodes[x.0].shape[0];
                let rest = self.nodes[id].data.len();
                let inv = 1.0 / t as f64;
                let mut dx = vec![0.0; t * rest];
                for j in 0..t {
                    for r in 0..rest {
                        dx[j * rest + r] = d_out[r] * inv;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SelectRC { x, row, col } => {
                let cols = self.nodes[x.0].shape[1];
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                dx[row * cols + col] = d_out[0];
                self.accumulate(x, &dx);
            }

            Op::AddRowBias { x, b } => {
                self.accumulate(x, &d_out);
                if self.needs(b) {
                    let d = self.nodes[b.0].data.len();
                    let mut db = vec![0.0; d];
                    for (i, g) in d_out.iter().enumerate() {
                        db[i % d] += g;
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::MulRowScale { x, s } => {
                let d = self.nodes[s.0].data.len();
                if self.needs(x) {
                    let dx: Vec<f64> = d_out
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * self.nodes[s.0].data[i % d])
                        .collect();
                    self.accumulate(x, &dx);
                }
                if self.needs(s) {
                    let mut ds = vec![0.0; d];
                    for (i, g) in d_out.iter().enumerate() {
                        ds[i % d] += g * self.nodes[x.0].data[i];
                    }
                    self.accumulate(s, &ds);
                }
            }
            Op::MulChannelGate { x, gate } => {
                let hw = {
                    let s = &self.nodes[x.0].shape;
                    s[2] * s[3]
                };
                if self.needs(x) {
                    let dx: Vec<f64> = d_out
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * self.nodes[gate.0].data[i / hw])
                        .collect();
                    self.accumulate(x, &dx);
                }
                if self.needs(gate) {
                    let mut dg = vec![0.0; self.nodes[gate.0].data.len()];
                    for (i, g) in d_out.iter().enumerate() {
                        dg[i / hw] += g * self.nodes[x.0].data[i];
                    }
                    self.accumulate(gate, &dg);
                }
            }
            Op::MulSpatialGate { x, gate } => {
                let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let hw = h * wd;
                if self.needs(x) {
                    let mut dx = vec![0.0; n * c * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(i * c + ch) * hw + p] = d_out[(i * c + ch) * hw + p]
                                    * self.nodes[gate.0].data[i * hw + p];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.needs(gate) {
                    let mut dg = vec![0.0; n * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dg[i * hw + p] += d_out[(i * c + ch) * hw + p]
                                    * self.nodes[x.0].data[(i * c + ch) * hw + p];
                            }
                        }
                    }
                    self.accumulate(gate, &dg);
                }
            }
            Op::ScaleChannels { x, s } => {
                let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let hw = h * wd;
                if self.needs(x) {
                    let mut dx = vec![0.0; n * c * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            let sv = self.nodes[s.0].data[ch];
                            for p in 0..hw {
                                dx[(i * c + ch) * hw + p] = d_out[(i * c + ch) * hw + p] * sv;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.needs(s) {
                    let mut ds = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                ds[ch] += d_out[(i * c + ch) * hw + p]
                                    * self.nodes[x.0].data[(i * c + ch) * hw + p];
                            }
                        }
                    }
                    self.accumulate(s, &ds);
                }
            }
            Op::AddChannelBias { x, b } => {
                self.accumulate(x, &d_out);
                if self.needs(b) {
                    let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                    let hw = h * wd;
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                db[ch] += d_out[(i * c + ch) * hw + p];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }

            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                count,
            } => {
                let shape = self.nodes[x.0].shape.clone();
                let channels = self.nodes[gamma.0].data.len();
                let stat_index: Box<dyn Fn(usize) -> usize> = match shape[..] {
                    [_, d] => Box::new(move |i| i % d),
                    [_, c, h, w] => {
                        let hw = h * w;
                        Box::new(move |i| (i / hw) % c)
                    }
                    _ => unreachable!("validated at forward"),
                };
                let numel = d_out.len();
                let mut sum_dy = vec![0.0; channels];
                let mut sum_dy_xhat = vec![0.0; channels];
                for i in 0..numel {
                    let c = stat_index(i);
                    sum_dy[c] += d_out[i];
                    sum_dy_xhat[c] += d_out[i] * xhat[i];
                }
                if self.needs(x) {
                    let m = count as f64;
                    let gdata = self.nodes[gamma.0].data.clone();
                    let dx: Vec<f64> = (0..numel)
                        .map(|i| {
                            let c = stat_index(i);
                            gdata[c] * inv_std[c] / m
                                * (m * d_out[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c])
                        })
                        .collect();
                    self.accumulate(x, &dx);
                }
                if self.needs(gamma) {
                    self.accumulate(gamma, &sum_dy_xhat);
                }
                if self.needs(beta) {
                    self.accumulate(beta, &sum_dy);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[gamma.0].data.len();
                let rows = d_out.len() / d;
                if self.needs(x) {
                    let gdata = self.nodes[gamma.0].data.clone();
                    let mut dx = vec![0.0; d_out.len()];
                    for r in 0..rows {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = d_out[r * d + j] * gdata[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        let m = d as f64;
                        for j in 0..d {
                            let dxh = d_out[r * d + j] * gdata[j];
                            dx[r * d + j] = inv_std[r] / m
                                * (m * dxh - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.needs(gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += d_out[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(gamma, &dg);
                }
                if self.needs(beta) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += d_out[r * d + j];
                        }
                    }
                    self.accumulate(beta, &db);
                }
            }
            Op::LayerNormChannels {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, wd) = k::image_dims(&self.nodes[x.0].shape).expect("checked");
                let hw = h * wd;
                if self.needs(x) {
                    let gdata = self.nodes[gamma.0].data.clone();
                    let mut dx = vec![0.0; d_out.len()];
                    for i in 0..n {
                        for p in 0..hw {
                            let at = |ch: usize| (i * c + ch) * hw + p;
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for ch in 0..c {
                                let dxh = d_out[at(ch)] * gdata[ch];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat[at(ch)];
                            }
                            let m = c as f64;
                            let istd = inv_std[i * hw + p];
                            for ch in 0..c {
                                let dxh = d_out[at(ch)] * gdata[ch];
                                dx[at(ch)] =
                                    istd / m * (m * dxh - sum_dxhat - xhat[at(ch)] * sum_dxhat_xhat);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.needs(gamma) {
                    let mut dg = vec![0.0; c];
                    for (i, g) in d_out.iter().enumerate() {
                        let ch = (i / hw) % c;
                        dg[ch] += g * xhat[i];
                    }
                    self.accumulate(gamma, &dg);
                }
                if self.needs(beta) {
                    let mut db = vec![0.0; c];
                    for (i, g) in d_out.iter().enumerate() {
                        let ch = (i / hw) % c;
                        db[ch] += g;
                    }
                    self.accumulate(beta, &db);
                }
            }

            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = d_out.iter().zip(&mask).map(|(g, m)| g * m).collect();
                self.accumulate(x, &dx);
            }
            Op::PatchExtract { x, patch } => {
                let [c, h, w] = match self.nodes[x.0].shape[..] {
                    [a, b, cc] => [a, b, cc],
                    _ => unreachable!("validated at forward"),
                };
                let (gh, gw) = (h / patch, w / patch);
                let d = c * patch * patch;
                let mut dx = vec![0.0; c * h * w];
                for ph in 0..gh {
                    for pw in 0..gw {
                        let token = ph * gw + pw;
                        for ch in 0..c {
                            for dh in 0..patch {
                                for dw in 0..patch {
                                    let src = (ch * h + ph * patch + dh) * w + pw * patch + dw;
                                    let dst = token * d + (ch * patch + dh) * patch + dw;
                                    dx[src] += d_out[dst];
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
        }
    }
}
