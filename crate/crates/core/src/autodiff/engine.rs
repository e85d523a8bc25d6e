//! Forward evaluation, forward-mode JVPs and reverse-mode gradient rows.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{Activation, ArchDescriptor, Layer};
use super::dual::{Dual, Scalar};
use crate::error::{EllaError, Result};

/// The flattened parameter vector θ together with the architecture it
/// belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    arch: Arc<ArchDescriptor>,
}

impl FlatParams {
    pub fn new(arch: Arc<ArchDescriptor>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.num_params() {
            return Err(EllaError::Shape(format!(
                "architecture has {} parameters, got {}",
                arch.num_params(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EllaError::NonFinite(format!("parameter {i} = {}", values[i])));
        }
        Ok(Self { values, arch })
    }

    /// Uniform `±1/√fan_in` initialization for dense and conv layers, unit
    /// scale and zero shift for batchnorm.
    pub fn init(arch: Arc<ArchDescriptor>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; arch.num_params()];
        for (i, layer) in arch.layers().iter().enumerate() {
            let range = arch.param_range(i);
            let slot = &mut values[range];
            match layer {
                Layer::Dense { inputs, .. } => {
                    let bound = 1.0 / (*inputs as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                Layer::Conv2d {
                    in_channels, kernel, ..
                } => {
                    let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                Layer::BatchNorm { channels, .. } => {
                    slot[..*channels].iter_mut().for_each(|v| *v = 1.0);
                }
                Layer::Activation { .. } | Layer::Flatten => {}
            }
        }
        Self { values, arch }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn arch(&self) -> &Arc<ArchDescriptor> {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), values)
    }

    /// Same values under a different architecture with an identical
    /// parameter layout (e.g. after recalibrating batchnorm statistics).
    pub fn with_arch(&self, arch: Arc<ArchDescriptor>) -> Result<Self> {
        Self::new(arch, self.values.clone())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_len() {
            return Err(EllaError::Shape(format!(
                "input has {} entries, architecture expects shape {:?}",
                x.len(),
                self.arch.input_shape()
            )));
        }
        Ok(())
    }
}

/// Primal/tangent pair produced by one forward-mode pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualBatch {
    pub primal: Vec<f64>,
    pub tangent: Vec<f64>,
}

impl DualBatch {
    fn from_duals(duals: &[Dual]) -> Self {
        Self {
            primal: duals.iter().map(|d| d.re).collect(),
            tangent: duals.iter().map(|d| d.eps).collect(),
        }
    }
}

/// Evaluate `g_θ(x)`.
pub fn forward(params: &FlatParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_input(x)?;
    Ok(run(&params.arch, &params.values, x.to_vec()))
}

/// One forward pass carrying the tangent `v` on the parameters: returns
/// `g_θ(x)` and `J_θ(x)·v`.
pub fn jvp(params: &FlatParams, x: &[f64], v: &[f64]) -> Result<DualBatch> {
    params.check_input(x)?;
    if v.len() != params.len() {
        return Err(EllaError::Shape(format!(
            "tangent has {} entries, expected {}",
            v.len(),
            params.len()
        )));
    }
    if let Some(i) = v.iter().position(|t| !t.is_finite()) {
        return Err(EllaError::NonFinite(format!("tangent entry {i} = {}", v[i])));
    }
    let theta: Vec<Dual> = params
        .values
        .iter()
        .zip(v)
        .map(|(&p, &t)| Dual::new(p, t))
        .collect();
    let input: Vec<Dual> = x.iter().map(|&xi| Dual::constant(xi)).collect();
    Ok(DualBatch::from_duals(&run(&params.arch, &theta, input)))
}

/// Reverse pass: returns `g_θ(x)` and `J_θ(x)ᵀ·cotangent`.
pub fn vjp(params: &FlatParams, x: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = forward_trace(params, x)?;
    let mut grad = vec![0.0; params.len()];
    backward(params, &trace, cotangent, &mut grad)?;
    Ok((trace.last().unwrap().clone(), grad))
}

/// Gradient of output `class` with respect to all parameters, `J_θ(x, class)`.
pub fn grad_row(params: &FlatParams, x: &[f64], class: usize) -> Result<Vec<f64>> {
    let c = params.arch.num_outputs();
    if class >= c {
        return Err(EllaError::OutOfRange {
            what: "output index",
            index: class,
            len: c,
        });
    }
    let mut e = vec![0.0; c];
    e[class] = 1.0;
    Ok(vjp(params, x, &e)?.1)
}

/// Dense `C × P` Jacobian at one input, built from `C` reverse passes.
pub fn jacobian(params: &FlatParams, x: &[f64]) -> Result<DMatrix<f64>> {
    let trace = forward_trace(params, x)?;
    let c = params.arch.num_outputs();
    let mut jac = DMatrix::zeros(c, params.len());
    let mut row = vec![0.0; params.len()];
    for i in 0..c {
        let mut e = vec![0.0; c];
        e[i] = 1.0;
        row.iter_mut().for_each(|r| *r = 0.0);
        backward(params, &trace, &e, &mut row)?;
        for (j, r) in row.iter().enumerate() {
            jac[(i, j)] = *r;
        }
    }
    Ok(jac)
}

/// Forward pass recording the tensor entering every layer plus the output.
pub fn forward_trace(params: &FlatParams, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    params.check_input(x)?;
    let arch = &params.arch;
    let mut trace = Vec::with_capacity(arch.layers().len() + 1);
    trace.push(x.to_vec());
    for (i, layer) in arch.layers().iter().enumerate() {
        let p = &params.values[arch.param_range(i)];
        let next = apply(layer, arch.shape(i), arch.shape(i + 1), p, trace.last().unwrap());
        trace.push(next);
    }
    Ok(trace)
}

/// Accumulate `J_θ(x)ᵀ·cotangent` into `grad` given a recorded trace.
pub fn backward(
    params: &FlatParams,
    trace: &[Vec<f64>],
    cotangent: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let arch = &params.arch;
    if cotangent.len() != arch.num_outputs() {
        return Err(EllaError::Shape(format!(
            "cotangent has {} entries, expected {}",
            cotangent.len(),
            arch.num_outputs()
        )));
    }
    let mut g = cotangent.to_vec();
    for (i, layer) in arch.layers().iter().enumerate().rev() {
        let range = arch.param_range(i);
        let need_input_grad = i > 0;
        g = layer_backward(
            layer,
            arch.shape(i),
            arch.shape(i + 1),
            &params.values[range.clone()],
            &trace[i],
            &trace[i + 1],
            &g,
            &mut grad[range],
            need_input_grad,
        );
    }
    Ok(())
}

fn run<T: Scalar>(arch: &ArchDescriptor, theta: &[T], x: Vec<T>) -> Vec<T> {
    let mut h = x;
    for (i, layer) in arch.layers().iter().enumerate() {
        h = apply(layer, arch.shape(i), arch.shape(i + 1), &theta[arch.param_range(i)], &h);
    }
    h
}

fn apply<T: Scalar>(layer: &Layer, in_shape: &[usize], out_shape: &[usize], p: &[T], x: &[T]) -> Vec<T> {
    match layer {
        Layer::Dense { inputs, outputs } => {
            let (w, b) = p.split_at(outputs * inputs);
            (0..*outputs)
                .map(|o| {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let mut acc = T::zero();
                    for (wi, xi) in row.iter().zip(x) {
                        acc = acc + *wi * *xi;
                    }
                    acc + b[o]
                })
                .collect()
        }
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (h, w) = (in_shape[1] as isize, in_shape[2] as isize);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let k = *kernel;
            let (weights, bias) = p.split_at(out_channels * in_channels * k * k);
            let mut out = Vec::with_capacity(out_channels * oh * ow);
            for o in 0..*out_channels {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = T::zero();
                        for c in 0..*in_channels {
                            for ki in 0..k {
                                let r = (i * stride + ki) as isize - *padding as isize;
                                if r < 0 || r >= h {
                                    continue;
                                }
                                for kj in 0..k {
                                    let s = (j * stride + kj) as isize - *padding as isize;
                                    if s < 0 || s >= w {
                                        continue;
                                    }
                                    let wv = weights[((o * in_channels + c) * k + ki) * k + kj];
                                    let xv = x[(c * h as usize + r as usize) * w as usize + s as usize];
                                    acc = acc + wv * xv;
                                }
                            }
                        }
                        out.push(acc + bias[o]);
                    }
                }
            }
            out
        }
        Layer::BatchNorm {
            channels,
            mean,
            var,
            eps,
        } => {
            let spatial = x.len() / channels;
            let (gamma, beta) = p.split_at(*channels);
            let mut out = Vec::with_capacity(x.len());
            for c in 0..*channels {
                let mu = T::constant(mean[c]);
                let scale = T::constant(1.0 / (var[c] + eps).sqrt());
                for xv in &x[c * spatial..(c + 1) * spatial] {
                    out.push(gamma[c] * ((*xv - mu) * scale) + beta[c]);
                }
            }
            out
        }
        Layer::Activation { kind } => match kind {
            Activation::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Activation::Relu => x.iter().map(|v| v.relu()).collect(),
        },
        Layer::Flatten => x.to_vec(),
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    layer: &Layer,
    in_shape: &[usize],
    out_shape: &[usize],
    p: &[f64],
    x: &[f64],
    y: &[f64],
    gy: &[f64],
    gp: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    match layer {
        Layer::Dense { inputs, outputs } => {
            let (w, _) = p.split_at(outputs * inputs);
            let (gw, gb) = gp.split_at_mut(outputs * inputs);
            let mut gx = vec![0.0; if need_input_grad { *inputs } else { 0 }];
            for o in 0..*outputs {
                let go = gy[o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let grow = &mut gw[o * inputs..(o + 1) * inputs];
                for (g, xi) in grow.iter_mut().zip(x) {
                    *g += go * xi;
                }
                if need_input_grad {
                    let wrow = &w[o * inputs..(o + 1) * inputs];
                    for (g, wi) in gx.iter_mut().zip(wrow) {
                        *g += wi * go;
                    }
                }
            }
            gx
        }
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (h, w) = (in_shape[1] as isize, in_shape[2] as isize);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let k = *kernel;
            let nw = out_channels * in_channels * k * k;
            let weights = &p[..nw];
            let (gw, gb) = gp.split_at_mut(nw);
            let mut gx = vec![0.0; if need_input_grad { x.len() } else { 0 }];
            for o in 0..*out_channels {
                for i in 0..oh {
                    for j in 0..ow {
                        let go = gy[(o * oh + i) * ow + j];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for c in 0..*in_channels {
                            for ki in 0..k {
                                let r = (i * stride + ki) as isize - *padding as isize;
                                if r < 0 || r >= h {
                                    continue;
                                }
                                for kj in 0..k {
                                    let s = (j * stride + kj) as isize - *padding as isize;
                                    if s < 0 || s >= w {
                                        continue;
                                    }
                                    let widx = ((o * in_channels + c) * k + ki) * k + kj;
                                    let xidx = (c * h as usize + r as usize) * w as usize + s as usize;
                                    gw[widx] += go * x[xidx];
                                    if need_input_grad {
                                        gx[xidx] += weights[widx] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gx
        }
        Layer::BatchNorm {
            channels,
            mean,
            var,
            eps,
        } => {
            let spatial = x.len() / channels;
            let gamma = &p[..*channels];
            let (ggamma, gbeta) = gp.split_at_mut(*channels);
            let mut gx = vec![0.0; if need_input_grad { x.len() } else { 0 }];
            for c in 0..*channels {
                let scale = 1.0 / (var[c] + eps).sqrt();
                for t in c * spatial..(c + 1) * spatial {
                    ggamma[c] += gy[t] * ((x[t] - mean[c]) * scale);
                    gbeta[c] += gy[t];
                    if need_input_grad {
                        gx[t] = gy[t] * gamma[c] * scale;
                    }
                }
            }
            gx
        }
        Layer::Activation { kind } => match kind {
            Activation::Tanh => gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
            Activation::Relu => gy
                .iter()
                .zip(x)
                .map(|(g, xi)| if *xi > 0.0 { *g } else { 0.0 })
                .collect(),
        },
        Layer::Flatten => gy.to_vec(),
    }
}
