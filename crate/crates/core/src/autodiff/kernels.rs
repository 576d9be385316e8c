//! Raw f64 kernels shared by forward construction and backward rules.

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Shape of a conv/pool output dimension; `None` when not integral.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return None;
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

/// Cross-correlation (no kernel flip) over one image [C,H,W] into [Co,Ho,Wo].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_single(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    for co in 0..c_out {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for dh in 0..kh {
                        let ih = (oh * stride + dh) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dw in 0..kw {
                            let iw = (ow * stride + dw) as isize - padding as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            acc += x[(ci * h + ih as usize) * wd + iw as usize]
                                * w[((co * c_in + ci) * kh + dh) * kw + dw];
                        }
                    }
                }
                out[(co * ho + oh) * wo + ow] = acc;
            }
        }
    }
}

/// Backward for one image of cross-correlation: accumulates dx, dw, db.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_single_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dw = dw;
    let mut db = db;
    for co in 0..c_out {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = d_out[(co * ho + oh) * wo + ow];
                if g == 0.0 {
                    continue;
                }
                if let Some(db) = db.as_deref_mut() {
                    db[co] += g;
                }
                for ci in 0..c_in {
                    for dh in 0..kh {
                        let ih = (oh * stride + dh) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dwi in 0..kw {
                            let iw = (ow * stride + dwi) as isize - padding as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            let xi = (ci * h + ih as usize) * wd + iw as usize;
                            let wi = ((co * c_in + ci) * kh + dh) * kw + dwi;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] += g * w[wi];
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[wi] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise cross-correlation over one image: each channel convolved with
/// its own [kh,kw] filter.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_single(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    for ch in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = bias[ch];
                for dh in 0..kh {
                    let ih = (oh * stride + dh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for dw in 0..kw {
                        let iw = (ow * stride + dw) as isize - padding as isize;
                        if iw < 0 || iw >= wd as isize {
                            continue;
                        }
                        acc += x[(ch * h + ih as usize) * wd + iw as usize]
                            * w[(ch * kh + dh) * kw + dw];
                    }
                }
                out[(ch * ho + oh) * wo + ow] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_single_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dw = dw;
    let mut db = db;
    for ch in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = d_out[(ch * ho + oh) * wo + ow];
                if g == 0.0 {
                    continue;
                }
                if let Some(db) = db.as_deref_mut() {
                    db[ch] += g;
                }
                for dh in 0..kh {
                    let ih = (oh * stride + dh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for dwi in 0..kw {
                        let iw = (ow * stride + dwi) as isize - padding as isize;
                        if iw < 0 || iw >= wd as isize {
                            continue;
                        }
                        let xi = (ch * h + ih as usize) * wd + iw as usize;
                        let wi = (ch * kh + dh) * kw + dwi;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi] += g * w[wi];
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
}

/// Splits a rank-3 [C,H,W] or rank-4 [N,C,H,W] shape into (n, c, h, w) with
/// n = 1 for the unbatched case.
pub fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match shape {
        [c, h, w] => Some((1, *c, *h, *w)),
        [n, c, h, w] => Some((*n, *c, *h, *w)),
        _ => None,
    }
}

/// Softmax geometry: (outer, axis_len, inner) strides around `axis`.
pub fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

/// exp(x) for gelu/sigmoid backward helpers.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF, the exact gelu gate.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
