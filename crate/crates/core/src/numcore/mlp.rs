use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm_a_bt, gemm_ab, gemm_at_b_acc, zeros_like, Mat, ParamTensor};
use crate::rng::LabRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    SiLU,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::SiLU => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::SiLU => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub feature_layer_index: usize,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, feature_layer_index: usize) -> Result<Self> {
        let s = MlpSpec { layer_widths, activation, feature_layer_index };
        s.validate()?;
        Ok(s)
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn n_hidden(&self) -> usize {
        self.layer_widths.len().saturating_sub(2)
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::arg("an MLP needs at least an input and an output width"));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::arg(format!("layer width {i} is zero")));
        }
        let nh = self.n_hidden();
        if (nh == 0 && self.feature_layer_index != 0) || (nh > 0 && self.feature_layer_index >= nh) {
            return Err(Error::arg(format!(
                "feature layer {} out of range for {} hidden layers",
                self.feature_layer_index, nh
            )));
        }
        Ok(())
    }

    /// Expected parameter shapes, weights stored `[in][out]`.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            let (i, o) = (self.layer_widths[l], self.layer_widths[l + 1]);
            out.push((format!("l{l}.w"), vec![i, o]));
            out.push((format!("l{l}.b"), vec![o]));
        }
        out
    }

    pub fn check_params(&self, params: &[ParamTensor]) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::dim(format!("expected {} parameter tensors, got {}", shapes.len(), params.len())));
        }
        for (p, (name, shape)) in params.iter().zip(&shapes) {
            if &p.shape != shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::dim(format!(
                    "layer parameter `{}` has shape {:?}, expected `{}` {:?}",
                    p.name, p.shape, name, shape
                )));
            }
        }
        Ok(())
    }
}

/// Activations recorded by a batched forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Mat,
    /// Pre-activation of every layer; the last one is the network output.
    pub pre: Vec<Mat>,
    /// Post-activation of every hidden layer.
    pub post: Vec<Mat>,
}

impl Trace {
    pub fn output(&self) -> &Mat {
        self.pre.last().unwrap()
    }

    pub fn hidden(&self, i: usize) -> &Mat {
        &self.post[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<ParamTensor>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases.
    pub fn init(spec: MlpSpec, rng: &mut LabRng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for (name, shape) in spec.param_shapes() {
            let mut p = ParamTensor::zeros(name, &shape);
            if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                for x in p.data.iter_mut() {
                    *x = rng.gen_range(-a..a);
                }
            }
            params.push(p);
        }
        Ok(Mlp { spec, params })
    }

    pub fn from_parts(spec: MlpSpec, params: Vec<ParamTensor>) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        Ok(Mlp { spec, params })
    }

    pub fn weight(&self, l: usize) -> &ParamTensor {
        &self.params[2 * l]
    }

    pub fn bias(&self, l: usize) -> &ParamTensor {
        &self.params[2 * l + 1]
    }

    fn layer(&self, l: usize, x: &Mat) -> Mat {
        let o = self.spec.layer_widths[l + 1];
        let mut y = Mat::zeros(x.rows, o);
        gemm_ab(x, &self.weight(l).data, o, &mut y);
        let b = &self.bias(l).data;
        for r in 0..y.rows {
            for (v, bj) in y.row_mut(r).iter_mut().zip(b) {
                *v += bj;
            }
        }
        y
    }

    fn activate(&self, pre: &Mat) -> Mat {
        let act = self.spec.activation;
        Mat { rows: pre.rows, cols: pre.cols, data: pre.data.iter().map(|&v| act.apply(v)).collect() }
    }

    pub fn forward_batch(&self, x: &Mat) -> Result<Trace> {
        if x.cols != self.spec.input_width() {
            return Err(Error::dim(format!(
                "layer 0 expects input width {}, got {}",
                self.spec.input_width(),
                x.cols
            )));
        }
        let nl = self.spec.n_layers();
        let mut pre = Vec::with_capacity(nl);
        let mut post = Vec::with_capacity(nl - 1);
        for l in 0..nl {
            let p = self.layer(l, if l == 0 { x } else { &post[l - 1] });
            if l + 1 < nl {
                post.push(self.activate(&p));
            }
            pre.push(p);
        }
        Ok(Trace { input: x.clone(), pre, post })
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward_batch(x)?.pre.pop().unwrap())
    }

    /// Continue a forward pass from hidden layer `i` (post-activation).
    pub fn forward_from_hidden(&self, i: usize, h: &Mat) -> Result<Mat> {
        if i >= self.spec.n_hidden() {
            return Err(Error::dim(format!("hidden layer {i} does not exist")));
        }
        if h.cols != self.spec.layer_widths[i + 1] {
            return Err(Error::dim(format!("hidden layer {i} has width {}, got {}", self.spec.layer_widths[i + 1], h.cols)));
        }
        let nl = self.spec.n_layers();
        let mut cur = h.clone();
        for l in i + 1..nl {
            let p = self.layer(l, &cur);
            cur = if l + 1 < nl { self.activate(&p) } else { p };
        }
        Ok(cur)
    }

    /// Backpropagate `dy` through a recorded trace.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the
    /// gradient with respect to the input batch is returned.
    pub fn backward_batch(&self, trace: &Trace, dy: &Mat, mut grads: Option<&mut [ParamTensor]>) -> Result<Mat> {
        let out = trace.output();
        if dy.rows != out.rows || dy.cols != out.cols {
            return Err(Error::dim(format!(
                "upstream gradient is {}x{}, output is {}x{}",
                dy.rows, dy.cols, out.rows, out.cols
            )));
        }
        let nl = self.spec.n_layers();
        let act = self.spec.activation;
        let mut delta = dy.clone();
        for l in (0..nl).rev() {
            if l + 1 < nl {
                for (d, &z) in delta.data.iter_mut().zip(&trace.pre[l].data) {
                    *d *= act.derivative(z);
                }
            }
            let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            if let Some(g) = grads.as_deref_mut() {
                gemm_at_b_acc(input, &delta, &mut g[2 * l].data);
                let gb = &mut g[2 * l + 1].data;
                for r in 0..delta.rows {
                    for (acc, v) in gb.iter_mut().zip(delta.row(r)) {
                        *acc += v;
                    }
                }
            }
            let mut dx = Mat::zeros(delta.rows, self.spec.layer_widths[l]);
            gemm_a_bt(&delta, &self.weight(l).data, self.spec.layer_widths[l], &mut dx);
            delta = dx;
        }
        Ok(delta)
    }

    pub fn zero_grads(&self) -> Vec<ParamTensor> {
        zeros_like(&self.params)
    }
}

/// Single-input forward pass: output and every hidden activation.
pub fn mlp_forward(spec: &MlpSpec, params: &[ParamTensor], input: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    spec.validate()?;
    spec.check_params(params)?;
    let net = Mlp { spec: spec.clone(), params: params.to_vec() };
    let tr = net.forward_batch(&Mat::from_vec(1, input.len(), input.to_vec()))?;
    let hiddens = tr.post.iter().map(|h| h.data.clone()).collect();
    Ok((tr.output().data.clone(), hiddens))
}

/// Gradients of `upstream · output` with respect to every parameter and the input.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &[ParamTensor],
    input: &[f64],
    upstream_grad: &[f64],
) -> Result<(Vec<ParamTensor>, Vec<f64>)> {
    spec.validate()?;
    spec.check_params(params)?;
    if upstream_grad.len() != spec.output_width() {
        return Err(Error::dim(format!(
            "upstream gradient has length {}, output layer has width {}",
            upstream_grad.len(),
            spec.output_width()
        )));
    }
    let net = Mlp { spec: spec.clone(), params: params.to_vec() };
    let tr = net.forward_batch(&Mat::from_vec(1, input.len(), input.to_vec()))?;
    let mut grads = net.zero_grads();
    let dx = net.backward_batch(&tr, &Mat::from_vec(1, upstream_grad.len(), upstream_grad.to_vec()), Some(&mut grads))?;
    Ok((grads, dx.data))
}
