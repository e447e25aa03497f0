//! Convolutional generator mapping trainable parameters to a density image.
//!
//! Layout: trainable latent → dense → `(c₀, h₀, w₀)` → four blocks of
//! conv 5×5 / channel norm / leaky ReLU, the first `upsamples` of them
//! followed by bilinear ×2 → conv 5×5 to one channel → sigmoid.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamBlock, ParamSet};
use layers::{
    channelnorm_backward, channelnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, leaky_relu_backward, leaky_relu_forward, sigmoid, upsample2x_backward,
    upsample2x_forward, NormCache, Tensor3,
};

pub const NUM_CONV: usize = 5;

const MIN_COARSE: usize = 4;

pub type CnnParams = ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnArch {
    pub latent_size: usize,
    /// Channels produced by the dense layer.
    pub dense_channels: usize,
    /// Output channels of each convolution; the last must be 1.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Number of leading conv blocks followed by a ×2 upsampling.
    pub upsamples: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    /// Output image width (elements along x).
    pub out_w: usize,
    /// Output image height (elements along y).
    pub out_h: usize,
}

impl CnnArch {
    /// Default architecture for an `nx × ny` grid: as many ×2 stages (up
    /// to three) as divide both sides while keeping the coarse image at
    /// least 4 wide, so 200×200 starts from 25×25.
    pub fn for_grid(nx: usize, ny: usize) -> Self {
        let upsamples = (0..=3)
            .rev()
            .find(|&u| {
                nx.is_multiple_of(1 << u)
                    && ny.is_multiple_of(1 << u)
                    && (nx >> u) >= MIN_COARSE
                    && (ny >> u) >= MIN_COARSE
            })
            .unwrap_or(0);
        Self {
            latent_size: 128,
            dense_channels: 32,
            channels: vec![32, 32, 16, 8, 1],
            kernel: 5,
            upsamples,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
            out_w: nx,
            out_h: ny,
        }
    }

    /// Small network for gradient checks.
    pub fn toy(nx: usize, ny: usize) -> Self {
        Self {
            latent_size: 4,
            dense_channels: 3,
            channels: vec![3, 3, 2, 2, 1],
            upsamples: 2,
            ..Self::for_grid(nx, ny)
        }
    }

    pub fn coarse_size(&self) -> (usize, usize) {
        (self.out_h >> self.upsamples, self.out_w >> self.upsamples)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_CONV {
            return Err(Error::config(format!(
                "architecture needs exactly {NUM_CONV} convolution layers, got {}",
                self.channels.len()
            )));
        }
        if self.channels[NUM_CONV - 1] != 1 {
            return Err(Error::config("last convolution must produce one channel"));
        }
        if self.channels.contains(&0) || self.dense_channels == 0 || self.latent_size == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel size {} must be odd",
                self.kernel
            )));
        }
        if self.upsamples > NUM_CONV - 1 {
            return Err(Error::config("at most four upsampling stages"));
        }
        let f = 1usize << self.upsamples;
        if self.out_w == 0
            || self.out_h == 0
            || !self.out_w.is_multiple_of(f)
            || !self.out_h.is_multiple_of(f)
        {
            return Err(Error::config(format!(
                "output {}x{} is not divisible by 2^{}",
                self.out_w, self.out_h, self.upsamples
            )));
        }
        if !(self.leaky_slope.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::config(
                "leaky slope must be finite and norm eps positive",
            ));
        }
        Ok(())
    }

    fn conv_in(&self, k: usize) -> usize {
        if k == 0 {
            self.dense_channels
        } else {
            self.channels[k - 1]
        }
    }

    fn dense_out(&self) -> usize {
        let (h, w) = self.coarse_size();
        self.dense_channels * h * w
    }

    /// Block names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![
            ("latent".to_string(), vec![self.latent_size]),
            (
                "dense.weight".to_string(),
                vec![self.dense_out(), self.latent_size],
            ),
            ("dense.bias".to_string(), vec![self.dense_out()]),
        ];
        for k in 0..NUM_CONV {
            v.push((
                format!("conv{}.weight", k + 1),
                vec![self.channels[k], self.conv_in(k), self.kernel, self.kernel],
            ));
            v.push((format!("conv{}.bias", k + 1), vec![self.channels[k]]));
        }
        for k in 0..NUM_CONV - 1 {
            v.push((format!("norm{}.gamma", k + 1), vec![self.channels[k]]));
            v.push((format!("norm{}.beta", k + 1), vec![self.channels[k]]));
        }
        v
    }

    pub fn zeros(&self) -> CnnParams {
        ParamSet::new(
            self.layout()
                .into_iter()
                .map(|(n, s)| ParamBlock::zeros(n, s))
                .collect(),
        )
    }

    pub fn check(&self, params: &CnnParams) -> Result<()> {
        self.zeros().check_layout(params)
    }

    /// Glorot-normal weights, zero biases, unit scales, standard-normal
    /// latent; a pure function of `seed`.
    pub fn init_params(&self, seed: u64) -> Result<CnnParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.zeros();
        for block in &mut p.blocks {
            let name = block.name.as_str();
            if name == "latent" {
                for v in &mut block.data {
                    *v = StandardNormal.sample(&mut rng);
                }
            } else if name.ends_with(".weight") {
                let std = glorot_std(&block.shape);
                let dist = Normal::new(0.0, std).expect("finite std");
                for v in &mut block.data {
                    *v = dist.sample(&mut rng);
                }
            } else if name.ends_with(".gamma") {
                block.data.fill(1.0);
            }
        }
        Ok(p)
    }
}

/// `√(2 / (fan_in + fan_out))` for dense `(out, in)` or conv
/// `(out, in, k, k)` shapes.
pub fn glorot_std(shape: &[usize]) -> f64 {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

// Storage indices into the block list produced by `CnnArch::layout`.
const LATENT: usize = 0;
const DENSE_W: usize = 1;
const DENSE_B: usize = 2;
fn conv_w(k: usize) -> usize {
    3 + 2 * k
}
fn conv_b(k: usize) -> usize {
    4 + 2 * k
}
fn norm_g(k: usize) -> usize {
    3 + 2 * NUM_CONV + 2 * k
}
fn norm_b(k: usize) -> usize {
    4 + 2 * NUM_CONV + 2 * k
}

#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Input to each convolution.
    conv_inputs: Vec<Tensor3>,
    norm_caches: Vec<NormCache>,
    /// Normalization outputs (leaky ReLU inputs).
    pre_activations: Vec<Tensor3>,
    /// Sigmoid output, `(1, out_h, out_w)`.
    output: Tensor3,
}

impl ForwardTape {
    pub fn output(&self) -> &Tensor3 {
        &self.output
    }
}

/// Runs the generator; the returned image is `out_h × out_w`, row `y`
/// holding elements with grid index `j = y`.
pub fn forward(arch: &CnnArch, params: &CnnParams) -> Result<(Vec<f64>, ForwardTape)> {
    arch.validate()?;
    arch.check(params)
        .map_err(|e| Error::config(format!("parameters do not match architecture: {e}")))?;
    let b = &params.blocks;
    let (h0, w0) = arch.coarse_size();

    let dense = dense_forward(&b[DENSE_W].data, &b[DENSE_B].data, &b[LATENT].data);
    let mut t = Tensor3::from_vec(arch.dense_channels, h0, w0, dense);

    let mut conv_inputs = Vec::with_capacity(NUM_CONV);
    let mut norm_caches = Vec::with_capacity(NUM_CONV - 1);
    let mut pre_activations = Vec::with_capacity(NUM_CONV - 1);
    for k in 0..NUM_CONV - 1 {
        let z = conv2d_forward(&t, &b[conv_w(k)].data, &b[conv_b(k)].data, arch.kernel);
        conv_inputs.push(t);
        let (y, cache) =
            channelnorm_forward(&z, &b[norm_g(k)].data, &b[norm_b(k)].data, arch.norm_eps);
        norm_caches.push(cache);
        t = leaky_relu_forward(&y, arch.leaky_slope);
        pre_activations.push(y);
        if k < arch.upsamples {
            t = upsample2x_forward(&t);
        }
    }
    let last = NUM_CONV - 1;
    let mut z = conv2d_forward(
        &t,
        &b[conv_w(last)].data,
        &b[conv_b(last)].data,
        arch.kernel,
    );
    conv_inputs.push(t);
    for v in &mut z.data {
        *v = sigmoid(*v);
    }
    let image = z.data.clone();
    Ok((
        image,
        ForwardTape {
            conv_inputs,
            norm_caches,
            pre_activations,
            output: z,
        },
    ))
}

/// Reverse-mode gradient of a scalar with respect to every parameter block,
/// given its gradient with respect to the output image.
pub fn backward(
    arch: &CnnArch,
    params: &CnnParams,
    tape: &ForwardTape,
    grad_image: &[f64],
) -> CnnParams {
    let b = &params.blocks;
    let mut grads = arch.zeros();
    let out = &tape.output;
    assert_eq!(grad_image.len(), out.data.len(), "image gradient size");

    let dz: Vec<f64> = out
        .data
        .iter()
        .zip(grad_image)
        .map(|(s, g)| g * s * (1.0 - s))
        .collect();
    let mut g = Tensor3::from_vec(1, out.h, out.w, dz);

    for k in (0..NUM_CONV).rev() {
        if k < NUM_CONV - 1 {
            if k < arch.upsamples {
                let pre = &tape.pre_activations[k];
                g = upsample2x_backward(&g, pre.h, pre.w);
            }
            g = leaky_relu_backward(&tape.pre_activations[k], arch.leaky_slope, &g);
            let ng = channelnorm_backward(&tape.norm_caches[k], &b[norm_g(k)].data, &g);
            grads.blocks[norm_g(k)].data = ng.gamma;
            grads.blocks[norm_b(k)].data = ng.beta;
            g = ng.input;
        }
        let cg = conv2d_backward(&tape.conv_inputs[k], &b[conv_w(k)].data, arch.kernel, &g);
        grads.blocks[conv_w(k)].data = cg.kernel;
        grads.blocks[conv_b(k)].data = cg.bias;
        g = cg.input;
    }

    let dg = dense_backward(&b[DENSE_W].data, &b[LATENT].data, &g.data);
    grads.blocks[DENSE_B].data = g.data;
    grads.blocks[DENSE_W].data = dg.weight;
    grads.blocks[LATENT].data = dg.input;
    grads
}
