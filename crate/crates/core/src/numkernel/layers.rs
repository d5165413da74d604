use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::Rng;
use crate::error::{dim_err, Error, Result};

/// A learnable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    #[serde(skip, default = "empty_grad")]
    pub grad: Matrix,
}

fn empty_grad() -> Matrix {
    Matrix::zeros(0, 0)
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        if !self.grad.same_shape(&self.value) {
            self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
        } else {
            self.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything owning trainable parameters.
pub trait ParamSet {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

impl ParamSet for Parameter {
    fn params(&self) -> Vec<&Parameter> {
        vec![self]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![self]
    }
}

impl ParamSet for Vec<Parameter> {
    fn params(&self) -> Vec<&Parameter> {
        self.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

/// `y = x·Wᵀ + b` with `W` stored out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl AffineLayer {
    /// He-initialized layer: weights ~ N(0, 2/fan_in), bias zero.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Parameter::new(format!("{name}.weight"), rng.normal_matrix(fan_out, fan_in, std)),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Matrix::zeros(1, fan_out))),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.fan_in() {
            return Err(dim_err(
                "affine",
                format!("input width {} vs fan_in {}", x.cols(), self.fan_in()),
            ));
        }
        let mut y = x.matmul_t(&self.weight.value)?;
        if let Some(b) = &self.bias {
            let b = b.value.data();
            for r in 0..y.rows() {
                for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
        let dw = grad_out.t_matmul(x)?;
        self.weight.grad.add_assign(&dw)?;
        if let Some(b) = &mut self.bias {
            for (g, s) in b.grad.data_mut().iter_mut().zip(grad_out.column_sums()) {
                *g += s;
            }
        }
        grad_out.matmul(&self.weight.value)
    }

    /// Input gradient only, leaving parameter gradients untouched (frozen layers).
    pub fn backward_input(&self, grad_out: &Matrix) -> Result<Matrix> {
        grad_out.matmul(&self.weight.value)
    }
}

impl ParamSet for AffineLayer {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

/// Per-channel parametric ReLU. At exactly `x = 0` the gradient takes the positive branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PReLU {
    pub slope: Parameter,
}

impl PReLU {
    pub fn new(name: &str, channels: usize, init: f64) -> Self {
        Self {
            slope: Parameter::new(format!("{name}.slope"), Matrix::filled(1, channels, init)),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let slope = self.slope.value.data();
        if x.cols() != slope.len() {
            return Err(dim_err(
                "prelu",
                format!("input width {} vs {} channels", x.cols(), slope.len()),
            ));
        }
        let mut y = x.clone();
        for r in 0..y.rows() {
            for (v, a) in y.row_mut(r).iter_mut().zip(slope) {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix) -> Matrix {
        let mut dx = grad_out.clone();
        let slope = self.slope.value.data().to_vec();
        let ds = self.slope.grad.data_mut();
        for r in 0..x.rows() {
            for (c, (d, &xv)) in dx.row_mut(r).iter_mut().zip(x.row(r)).enumerate() {
                if xv < 0.0 {
                    ds[c] += *d * xv;
                    *d *= slope[c];
                }
            }
        }
        dx
    }
}

impl ParamSet for PReLU {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.slope]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.slope]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the rows of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

/// Saved activations for [`BatchNorm::backward`].
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Matrix::filled(1, channels, 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Matrix::zeros(1, channels)),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.channels() {
            return Err(dim_err(
                "batchnorm",
                format!("input width {} vs {} channels", x.cols(), self.channels()),
            ));
        }
        Ok(())
    }

    /// Applies the layer in its current mode. Train mode normalizes with batch
    /// statistics and folds them into the running estimates.
    pub fn apply(&mut self, x: &Matrix) -> Result<(Matrix, BatchNormCache)> {
        self.check_width(x)?;
        match self.mode {
            Mode::Eval => Ok(self.eval_forward(x)),
            Mode::Train => {
                let n = x.rows();
                if n < 2 {
                    return Err(Error::InsufficientBatch { rows: n });
                }
                let c = self.channels();
                let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n as f64).collect();
                let mut var = vec![0.0; c];
                for row in x.row_iter() {
                    for ((v, xv), m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (xv - m) * (xv - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let mut xhat = x.clone();
                for r in 0..n {
                    for (j, v) in xhat.row_mut(r).iter_mut().enumerate() {
                        *v = (*v - mean[j]) * inv_std[j];
                    }
                }
                let unbiased = n as f64 / (n as f64 - 1.0);
                for j in 0..c {
                    self.running_mean[j] =
                        (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
                    self.running_var[j] = (1.0 - self.momentum) * self.running_var[j]
                        + self.momentum * var[j] * unbiased;
                }
                let y = self.affine(&xhat);
                Ok((
                    y,
                    BatchNormCache {
                        xhat,
                        inv_std,
                        mode: Mode::Train,
                    },
                ))
            }
        }
    }

    /// Eval-mode forward on a shared reference.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_width(x)?;
        Ok(self.eval_forward(x).0)
    }

    fn eval_forward(&self, x: &Matrix) -> (Matrix, BatchNormCache) {
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let mut xhat = x.clone();
        for r in 0..x.rows() {
            for (j, v) in xhat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.running_mean[j]) * inv_std[j];
            }
        }
        let y = self.affine(&xhat);
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                mode: Mode::Eval,
            },
        )
    }

    fn affine(&self, xhat: &Matrix) -> Matrix {
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = g[j] * *v + b[j];
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache, grad_out: &Matrix) -> Matrix {
        let n = grad_out.rows();
        let c = self.channels();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for r in 0..n {
            for ((j, g), xh) in grad_out.row(r).iter().enumerate().zip(cache.xhat.row(r)) {
                dgamma[j] += g * xh;
                dbeta[j] += g;
            }
        }
        for (acc, d) in self.gamma.grad.data_mut().iter_mut().zip(&dgamma) {
            *acc += d;
        }
        for (acc, d) in self.beta.grad.data_mut().iter_mut().zip(&dbeta) {
            *acc += d;
        }
        let gamma = self.gamma.value.data();
        let mut dx = Matrix::zeros(n, c);
        for r in 0..n {
            for j in 0..c {
                let g = grad_out.get(r, j);
                let v = match cache.mode {
                    Mode::Eval => g * gamma[j] * cache.inv_std[j],
                    // dx = γ/(nσ) · (n·g − Σg − x̂·Σ(g·x̂))
                    Mode::Train => {
                        gamma[j] * cache.inv_std[j] / n as f64
                            * (n as f64 * g - dbeta[j] - cache.xhat.get(r, j) * dgamma[j])
                    }
                };
                dx.set(r, j, v);
            }
        }
        dx
    }
}

impl ParamSet for BatchNorm {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
