use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::io::FORMAT_VERSION;
use crate::numcore::{gemm_a_bt, gemm_ab, gemm_at_b_acc, zeros_like, AdamWState, Mat, ParamTensor};
use crate::rng::LabRng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub blocks: usize,
    /// Number of base words receiving an offset.
    pub n_outputs: usize,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub norm_eps: f64,
}

impl ProjectorSpec {
    pub fn new(feature_dim: usize, embed_dim: usize) -> Self {
        ProjectorSpec {
            feature_dim,
            embed_dim,
            width: 64,
            blocks: 5,
            n_outputs: 1,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            norm_eps: 1e-5,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.n_outputs * self.embed_dim
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (f, m, w) = (self.feature_dim, self.embed_dim, self.width);
        let mut s = vec![("in.w".to_string(), vec![f + m, w]), ("in.b".to_string(), vec![w])];
        for r in 0..self.blocks {
            s.push((format!("blk{r}.w1"), vec![w, w]));
            s.push((format!("blk{r}.b1"), vec![w]));
            s.push((format!("blk{r}.bn_g"), vec![w]));
            s.push((format!("blk{r}.bn_b"), vec![w]));
            s.push((format!("blk{r}.w2"), vec![w, w]));
            s.push((format!("blk{r}.b2"), vec![w]));
        }
        s.push(("ada.wg".to_string(), vec![m, w]));
        s.push(("ada.bg".to_string(), vec![w]));
        s.push(("ada.wb".to_string(), vec![m, w]));
        s.push(("ada.bb".to_string(), vec![w]));
        s.push(("out.w".to_string(), vec![w, self.output_dim()]));
        s.push(("out.b".to_string(), vec![self.output_dim()]));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.width == 0 || self.n_outputs == 0 {
            return Err(Error::arg("projector widths must be positive"));
        }
        Ok(())
    }
}

/// How batch normalization gets its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch; optionally fold them into the running averages.
    Batch { update_running: bool },
    /// Frozen running statistics.
    Running,
}

// Parameter slots.
const IN_W: usize = 0;
const IN_B: usize = 1;
const PER_BLOCK: usize = 6;
fn blk(r: usize, j: usize) -> usize {
    2 + PER_BLOCK * r + j
}
const W1: usize = 0;
const B1: usize = 1;
const G: usize = 2;
const BETA: usize = 3;
const W2: usize = 4;
const B2: usize = 5;

/// Maps a sample's feature `h` and the pooled prompt `c` to base-word offsets.
///
/// Input linear layer, residual blocks `x += W2 silu(bn(W1 x))`, then an
/// AdaIN layer (per-sample normalization whose scale and shift are affine in
/// `c`) and a zero-initialized output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub spec: ProjectorSpec,
    pub params: Vec<ParamTensor>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorCheckpoint {
    pub version: u32,
    pub spec: ProjectorSpec,
    pub params: Vec<ParamTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_state: Option<AdamWState>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

/// Intermediate values of a forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ProjectorCache {
    mode: BnMode,
    input: Mat,
    cond: Mat,
    xs: Vec<Mat>,
    uhat: Vec<Mat>,
    inv_std: Vec<Vec<f64>>,
    act_in: Vec<Mat>,
    xhat: Mat,
    row_inv_std: Vec<f64>,
    gamma: Mat,
    y: Mat,
    pub output: Mat,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn affine(x: &Mat, w: &ParamTensor, b: &ParamTensor) -> Mat {
    let o = b.data.len();
    let mut y = Mat::zeros(x.rows, o);
    gemm_ab(x, &w.data, o, &mut y);
    for r in 0..y.rows {
        for (v, bj) in y.row_mut(r).iter_mut().zip(&b.data) {
            *v += bj;
        }
    }
    y
}

fn colsum_acc(m: &Mat, acc: &mut [f64]) {
    for r in 0..m.rows {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

fn linear_backward(input: &Mat, dy: &Mat, w: &ParamTensor, gw: &mut ParamTensor, gb: &mut ParamTensor, want_dx: bool) -> Option<Mat> {
    gemm_at_b_acc(input, dy, &mut gw.data);
    colsum_acc(dy, &mut gb.data);
    want_dx.then(|| {
        let mut dx = Mat::zeros(dy.rows, input.cols);
        gemm_a_bt(dy, &w.data, input.cols, &mut dx);
        dx
    })
}

impl Projector {
    pub fn init(spec: ProjectorSpec, rng: &mut LabRng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for (name, shape) in spec.shapes() {
            let mut p = ParamTensor::zeros(name.clone(), &shape);
            if name.ends_with(".bn_g") {
                p.data.fill(1.0);
            } else if shape.len() == 2 && !name.starts_with("ada.") && !name.starts_with("out.") {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                for x in p.data.iter_mut() {
                    *x = rng.gen_range(-a..a);
                }
            }
            params.push(p);
        }
        let w = spec.width;
        Ok(Projector {
            running_mean: vec![vec![0.0; w]; spec.blocks],
            running_var: vec![vec![1.0; w]; spec.blocks],
            spec,
            params,
        })
    }

    pub fn checkpoint(&self, optimizer_state: Option<AdamWState>) -> ProjectorCheckpoint {
        ProjectorCheckpoint {
            version: FORMAT_VERSION,
            spec: self.spec.clone(),
            params: self.params.clone(),
            optimizer_state,
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
        }
    }

    pub fn from_checkpoint(ck: ProjectorCheckpoint) -> Result<Self> {
        if ck.version != FORMAT_VERSION {
            return Err(Error::arg(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.spec.validate()?;
        let shapes = ck.spec.shapes();
        if shapes.len() != ck.params.len() || shapes.iter().zip(&ck.params).any(|((n, s), p)| *n != p.name || *s != p.shape) {
            return Err(Error::dim("projector parameters do not match the projector shape"));
        }
        for p in &ck.params {
            p.validate()?;
        }
        let (b, w) = (ck.spec.blocks, ck.spec.width);
        if ck.running_mean.len() != b || ck.running_var.len() != b || ck.running_mean.iter().chain(&ck.running_var).any(|v| v.len() != w) {
            return Err(Error::dim("projector running statistics do not match the projector shape"));
        }
        Ok(Projector { spec: ck.spec, params: ck.params, running_mean: ck.running_mean, running_var: ck.running_var })
    }

    pub fn zero_grads(&self) -> Vec<ParamTensor> {
        zeros_like(&self.params)
    }

    fn check_inputs(&self, h: &Mat, c: &Mat) -> Result<()> {
        if h.cols != self.spec.feature_dim || c.cols != self.spec.embed_dim || h.rows != c.rows {
            return Err(Error::dim(format!(
                "projector expects features of width {} and conditions of width {} per row, got {}x{} and {}x{}",
                self.spec.feature_dim, self.spec.embed_dim, h.rows, h.cols, c.rows, c.cols
            )));
        }
        if h.rows == 0 {
            return Err(Error::arg("projector batch is empty"));
        }
        Ok(())
    }

    /// Offsets for a batch; one row per sample, `n_outputs * embed_dim` wide.
    pub fn forward(&mut self, h: &Mat, c: &Mat, mode: BnMode) -> Result<ProjectorCache> {
        self.check_inputs(h, c)?;
        let cache = self.forward_impl(h, c, mode);
        if let BnMode::Batch { update_running: true } = mode {
            if self.spec.batch_norm {
                self.update_running(&cache);
            }
        }
        Ok(cache)
    }

    /// Forward pass that never touches the running statistics.
    pub fn evaluate(&self, h: &Mat, c: &Mat, mode: BnMode) -> Result<Mat> {
        self.check_inputs(h, c)?;
        let mode = match mode {
            BnMode::Batch { .. } => BnMode::Batch { update_running: false },
            m => m,
        };
        Ok(self.forward_impl(h, c, mode).output)
    }

    fn update_running(&mut self, cache: &ProjectorCache) {
        let mom = self.spec.bn_momentum;
        let n = cache.input.rows as f64;
        for r in 0..self.spec.blocks {
            // Batch moments are recovered from the cached normalization.
            let u = self.block_pre(r, &cache.xs[r]);
            for j in 0..self.spec.width {
                let mean = (0..u.rows).map(|i| u.row(i)[j]).sum::<f64>() / n;
                let var = (0..u.rows).map(|i| (u.row(i)[j] - mean).powi(2)).sum::<f64>() / n;
                let unbiased = if u.rows > 1 { var * n / (n - 1.0) } else { var };
                self.running_mean[r][j] = (1.0 - mom) * self.running_mean[r][j] + mom * mean;
                self.running_var[r][j] = (1.0 - mom) * self.running_var[r][j] + mom * unbiased;
            }
        }
    }

    fn block_pre(&self, r: usize, x: &Mat) -> Mat {
        affine(x, &self.params[blk(r, W1)], &self.params[blk(r, B1)])
    }

    fn forward_impl(&self, h: &Mat, c: &Mat, mode: BnMode) -> ProjectorCache {
        let s = &self.spec;
        let (n, w) = (h.rows, s.width);
        let mut input = Mat::zeros(n, s.feature_dim + s.embed_dim);
        for i in 0..n {
            let row = input.row_mut(i);
            row[..s.feature_dim].copy_from_slice(h.row(i));
            row[s.feature_dim..].copy_from_slice(c.row(i));
        }
        let mut x = affine(&input, &self.params[IN_W], &self.params[IN_B]);
        let mut xs = Vec::with_capacity(s.blocks + 1);
        let mut uhats = Vec::with_capacity(s.blocks);
        let mut inv_stds = Vec::with_capacity(s.blocks);
        let mut act_ins = Vec::with_capacity(s.blocks);
        for r in 0..s.blocks {
            let u = self.block_pre(r, &x);
            let (uhat, inv_std, act_in) = if s.batch_norm {
                let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
                    BnMode::Batch { .. } => {
                        let mean: Vec<f64> = (0..w).map(|j| (0..n).map(|i| u.row(i)[j]).sum::<f64>() / n as f64).collect();
                        let var = (0..w).map(|j| (0..n).map(|i| (u.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).collect();
                        (mean, var)
                    }
                    BnMode::Running => (self.running_mean[r].clone(), self.running_var[r].clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + s.bn_eps).sqrt()).collect();
                let mut uhat = u.clone();
                let mut a = u.clone();
                let (g, b) = (&self.params[blk(r, G)].data, &self.params[blk(r, BETA)].data);
                for i in 0..n {
                    for j in 0..w {
                        let v = (u.row(i)[j] - mean[j]) * inv_std[j];
                        uhat.row_mut(i)[j] = v;
                        a.row_mut(i)[j] = g[j] * v + b[j];
                    }
                }
                (uhat, inv_std, a)
            } else {
                (Mat::zeros(0, 0), Vec::new(), u)
            };
            let act = Mat { rows: n, cols: w, data: act_in.data.iter().map(|&v| silu(v)).collect() };
            let branch = affine(&act, &self.params[blk(r, W2)], &self.params[blk(r, B2)]);
            xs.push(x.clone());
            for (xv, bv) in x.data.iter_mut().zip(&branch.data) {
                *xv += bv;
            }
            uhats.push(uhat);
            inv_stds.push(inv_std);
            act_ins.push(act_in);
        }
        xs.push(x.clone());
        let na = 2 + PER_BLOCK * s.blocks;
        let gamma = affine(c, &self.params[na], &self.params[na + 1]);
        let beta = affine(c, &self.params[na + 2], &self.params[na + 3]);
        let mut xhat = x.clone();
        let mut row_inv_std = Vec::with_capacity(n);
        let mut y = Mat::zeros(n, w);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + s.norm_eps).sqrt();
            row_inv_std.push(is);
            for j in 0..w {
                let v = (row[j] - mean) * is;
                xhat.row_mut(i)[j] = v;
                y.row_mut(i)[j] = v * (1.0 + gamma.row(i)[j]) + beta.row(i)[j];
            }
        }
        let output = affine(&y, &self.params[na + 4], &self.params[na + 5]);
        ProjectorCache {
            mode,
            input,
            cond: c.clone(),
            xs,
            uhat: uhats,
            inv_std: inv_stds,
            act_in: act_ins,
            xhat,
            row_inv_std,
            gamma,
            y,
            output,
        }
    }

    /// Parameter gradients of `sum(dout * output)`.
    pub fn backward(&self, cache: &ProjectorCache, dout: &Mat) -> Result<Vec<ParamTensor>> {
        let out = &cache.output;
        if dout.rows != out.rows || dout.cols != out.cols {
            return Err(Error::dim(format!("upstream gradient is {}x{}, output is {}x{}", dout.rows, dout.cols, out.rows, out.cols)));
        }
        let s = &self.spec;
        let (n, w) = (out.rows, s.width);
        let na = 2 + PER_BLOCK * s.blocks;
        let mut g = self.zero_grads();
        let (lo, hi) = g.split_at_mut(na + 5);
        let dy = linear_backward(&cache.y, dout, &self.params[na + 4], &mut lo[na + 4], &mut hi[0], true).unwrap();

        // AdaIN
        let dbeta = dy.clone();
        let mut dgamma = Mat::zeros(n, w);
        let mut dxhat = Mat::zeros(n, w);
        for i in 0..n {
            for j in 0..w {
                dgamma.row_mut(i)[j] = dy.row(i)[j] * cache.xhat.row(i)[j];
                dxhat.row_mut(i)[j] = dy.row(i)[j] * (1.0 + cache.gamma.row(i)[j]);
            }
        }
        {
            let (a, b) = g.split_at_mut(na + 1);
            linear_backward(&cache.cond, &dgamma, &self.params[na], &mut a[na], &mut b[0], false);
        }
        {
            let (a, b) = g.split_at_mut(na + 3);
            linear_backward(&cache.cond, &dbeta, &self.params[na + 2], &mut a[na + 2], &mut b[0], false);
        }
        let mut dx = Mat::zeros(n, w);
        for i in 0..n {
            let xh = cache.xhat.row(i);
            let d = dxhat.row(i);
            let sum_d: f64 = d.iter().sum();
            let sum_dx: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
            let is = cache.row_inv_std[i];
            let wf = w as f64;
            for j in 0..w {
                dx.row_mut(i)[j] = is / wf * (wf * d[j] - sum_d - xh[j] * sum_dx);
            }
        }

        for r in (0..s.blocks).rev() {
            let act_in = &cache.act_in[r];
            let act = Mat { rows: n, cols: w, data: act_in.data.iter().map(|&v| silu(v)).collect() };
            let ds = {
                let (a, b) = g.split_at_mut(blk(r, B2));
                linear_backward(&act, &dx, &self.params[blk(r, W2)], &mut a[blk(r, W2)], &mut b[0], true).unwrap()
            };
            let mut da = ds;
            for (d, &v) in da.data.iter_mut().zip(&act_in.data) {
                *d *= silu_grad(v);
            }
            let du = if s.batch_norm {
                let uhat = &cache.uhat[r];
                let gam = &self.params[blk(r, G)].data;
                for i in 0..n {
                    for j in 0..w {
                        g[blk(r, G)].data[j] += da.row(i)[j] * uhat.row(i)[j];
                        g[blk(r, BETA)].data[j] += da.row(i)[j];
                    }
                }
                let inv = &cache.inv_std[r];
                let mut du = Mat::zeros(n, w);
                match cache.mode {
                    BnMode::Batch { .. } => {
                        let nf = n as f64;
                        for j in 0..w {
                            let mut sum_d = 0.0;
                            let mut sum_du = 0.0;
                            for i in 0..n {
                                let d = da.row(i)[j] * gam[j];
                                sum_d += d;
                                sum_du += d * uhat.row(i)[j];
                            }
                            for i in 0..n {
                                let d = da.row(i)[j] * gam[j];
                                du.row_mut(i)[j] = inv[j] / nf * (nf * d - sum_d - uhat.row(i)[j] * sum_du);
                            }
                        }
                    }
                    BnMode::Running => {
                        for i in 0..n {
                            for j in 0..w {
                                du.row_mut(i)[j] = da.row(i)[j] * gam[j] * inv[j];
                            }
                        }
                    }
                }
                du
            } else {
                da
            };
            let dx_branch = {
                let (a, b) = g.split_at_mut(blk(r, B1));
                linear_backward(&cache.xs[r], &du, &self.params[blk(r, W1)], &mut a[blk(r, W1)], &mut b[0], true).unwrap()
            };
            for (a, b) in dx.data.iter_mut().zip(&dx_branch.data) {
                *a += b;
            }
        }
        let (a, b) = g.split_at_mut(IN_B);
        linear_backward(&cache.input, &dx, &self.params[IN_W], &mut a[IN_W], &mut b[0], false);
        Ok(g)
    }

    /// Split an output row into one offset per base word.
    pub fn split_offsets(&self, row: &[f64]) -> Vec<Vec<f64>> {
        row.chunks(self.spec.embed_dim).map(|c| c.to_vec()).collect()
    }
}
