//! Layer primitives with exact hand-written backward passes. Activations are
//! `(channels, height, width)` tensors stored row-major.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Range of output positions `o` for which `o + d − pad` is a valid input
/// index, as a half-open interval.
fn valid_range(len: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d).min(len);
    let hi = (len + pad).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

/// Same-padded, stride-1 cross-correlation. `kernel` is laid out
/// `(out, in, k, k)`.
pub fn conv2d_forward(input: &Tensor3, kernel: &[f64], bias: &[f64], k: usize) -> Tensor3 {
    let out_c = bias.len();
    assert_eq!(kernel.len(), out_c * input.c * k * k, "kernel size");
    assert!(k % 2 == 1, "kernel must be odd");
    let pad = k / 2;
    let (h, w) = (input.h, input.w);
    let mut out = Tensor3::zeros(out_c, h, w);
    for o in 0..out_c {
        let plane = out.plane_mut(o);
        plane.fill(bias[o]);
        for i in 0..input.c {
            let src = input.plane(i);
            for ky in 0..k {
                let (y0, y1) = valid_range(h, ky, pad);
                for kx in 0..k {
                    let wgt = kernel[((o * input.c + i) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(w, kx, pad);
                    if x0 == x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Tensor3,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(input: &Tensor3, kernel: &[f64], k: usize, grad_out: &Tensor3) -> ConvGrads {
    let out_c = grad_out.c;
    let pad = k / 2;
    let (h, w) = (input.h, input.w);
    let mut g_in = Tensor3::zeros(input.c, h, w);
    let mut g_k = vec![0.0; kernel.len()];
    let g_b: Vec<f64> = (0..out_c).map(|o| grad_out.plane(o).iter().sum()).collect();
    for o in 0..out_c {
        let go = grad_out.plane(o);
        for i in 0..input.c {
            let src = input.plane(i);
            for ky in 0..k {
                let (y0, y1) = valid_range(h, ky, pad);
                for kx in 0..k {
                    let idx = ((o * input.c + i) * k + ky) * k + kx;
                    let wgt = kernel[idx];
                    let (x0, x1) = valid_range(w, kx, pad);
                    if x0 == x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    let gi = g_in.plane_mut(i);
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let g = &go[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        let d = &mut gi[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += wgt * gv;
                        }
                    }
                    g_k[idx] += acc;
                }
            }
        }
    }
    ConvGrads {
        input: g_in,
        kernel: g_k,
        bias: g_b,
    }
}

/// Saved statistics of a channel normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub normalized: Tensor3,
    pub inv_std: Vec<f64>,
}

/// Per-channel normalization over spatial positions followed by the affine
/// map `γ x̂ + β`.
pub fn channelnorm_forward(
    x: &Tensor3,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Tensor3, NormCache) {
    let n = (x.h * x.w) as f64;
    let mut y = Tensor3::zeros(x.c, x.h, x.w);
    let mut xhat = Tensor3::zeros(x.c, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let p = x.plane(c);
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.plane_mut(c);
        for (d, v) in xh.iter_mut().zip(p) {
            *d = (v - mean) * is;
        }
        for (d, v) in y.plane_mut(c).iter_mut().zip(xhat.plane(c)) {
            *d = gamma[c] * v + beta[c];
        }
    }
    (
        y,
        NormCache {
            normalized: xhat,
            inv_std,
        },
    )
}

pub struct NormGrads {
    pub input: Tensor3,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn channelnorm_backward(cache: &NormCache, gamma: &[f64], grad_y: &Tensor3) -> NormGrads {
    let xhat = &cache.normalized;
    let n = (xhat.h * xhat.w) as f64;
    let mut g_in = Tensor3::zeros(xhat.c, xhat.h, xhat.w);
    let mut g_gamma = Vec::with_capacity(xhat.c);
    let mut g_beta = Vec::with_capacity(xhat.c);
    for c in 0..xhat.c {
        let dy = grad_y.plane(c);
        let xh = xhat.plane(c);
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        g_beta.push(sum_dy);
        g_gamma.push(sum_dy_xh);
        let scale = gamma[c] * cache.inv_std[c] / n;
        for ((d, g), x) in g_in.plane_mut(c).iter_mut().zip(dy).zip(xh) {
            *d = scale * (n * g - sum_dy - x * sum_dy_xh);
        }
    }
    NormGrads {
        input: g_in,
        gamma: g_gamma,
        beta: g_beta,
    }
}

/// `y = W x + b` with `W` stored row-major as `(out, in)`.
pub fn dense_forward(weight: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let n = input.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            b + weight[r * n..(r + 1) * n]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
        .collect()
}

pub struct DenseGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
}

/// The bias gradient equals `grad_out`.
pub fn dense_backward(weight: &[f64], input: &[f64], grad_out: &[f64]) -> DenseGrads {
    let n = input.len();
    let mut g_in = vec![0.0; n];
    let mut g_w = vec![0.0; weight.len()];
    for (r, &g) in grad_out.iter().enumerate() {
        for c in 0..n {
            g_w[r * n + c] = g * input[c];
            g_in[c] += g * weight[r * n + c];
        }
    }
    DenseGrads {
        input: g_in,
        weight: g_w,
    }
}

pub fn leaky_relu_forward(x: &Tensor3, slope: f64) -> Tensor3 {
    let data = x
        .data
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    Tensor3::from_vec(x.c, x.h, x.w, data)
}

pub fn leaky_relu_backward(pre: &Tensor3, slope: f64, grad: &Tensor3) -> Tensor3 {
    let data = pre
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
        .collect();
    Tensor3::from_vec(pre.c, pre.h, pre.w, data)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Source taps for bilinear ×2 along one axis, half-pixel centers
/// (align-corners false): `(lower, upper, weight of upper)`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x_forward(x: &Tensor3) -> Tensor3 {
    let ty = upsample_taps(x.h);
    let tx = upsample_taps(x.w);
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut out = Tensor3::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * x.w + x0] + fx * src[y0 * x.w + x1];
                let bot = (1.0 - fx) * src[y1 * x.w + x0] + fx * src[y1 * x.w + x1];
                dst[oy * w2 + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

/// Exact transpose of [`upsample2x_forward`]; `h` and `w` are the input
/// dimensions of the forward pass.
pub fn upsample2x_backward(grad: &Tensor3, h: usize, w: usize) -> Tensor3 {
    assert_eq!((grad.h, grad.w), (2 * h, 2 * w));
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Tensor3::zeros(grad.c, h, w);
    for c in 0..grad.c {
        let g = grad.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * grad.w + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                dst[y0 * w + x1] += (1.0 - fy) * fx * v;
                dst[y1 * w + x0] += fy * (1.0 - fx) * v;
                dst[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    out
}
