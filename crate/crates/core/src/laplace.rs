//! Kronecker-factored Laplace posterior over a trained network.
//!
//! Each layer's weights and bias are stacked into a homogeneous matrix
//! `W̄ = [W; bᵀ]` of shape `(fan_in + 1) × fan_out`, matching the activation
//! extended by a constant one. The posterior over `W̄` is matrix normal with row
//! precision `√N·E[ā āᵀ] + √τ·I` and column precision `√N·E[g gᵀ] + √τ·I`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bnn::{forward_with_noise, preactivation_grads, CdpParams, Layer, Variant};
use crate::dataio::{self, Item};
use crate::error::{Error, Result};
use crate::numerics::{cholesky, solve_lower_transpose, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    /// `E[ā āᵀ]`, `(fan_in + 1)²`.
    pub activations: Matrix,
    /// `E[g gᵀ]`, `fan_out²`.
    pub gradients: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfacFactors {
    pub layers: Vec<LayerFactors>,
    pub samples: usize,
}

/// Homogeneous input `[a; 1]`.
pub fn homogeneous(a: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.push(1.0);
    v
}

/// Running means of `ā āᵀ` and `g gᵀ` per layer, masks off, with `g` the gradient of
/// the NLL at the observed label with respect to the layer's pre-activation.
pub fn accumulate_kfac<'a>(params: &CdpParams, items: impl IntoIterator<Item = &'a Item>) -> Result<KfacFactors> {
    let mut layers: Vec<LayerFactors> = params
        .layers
        .iter()
        .map(|l| LayerFactors {
            activations: Matrix::zeros(l.fan_in() + 1, l.fan_in() + 1),
            gradients: Matrix::zeros(l.fan_out(), l.fan_out()),
        })
        .collect();
    let mut n = 0usize;
    for it in items {
        if it.y >= params.c {
            return Err(Error::invalid(format!("label {} >= C={}", it.y, params.c)));
        }
        let (_, trace) = forward_with_noise(params, &it.x, None, 1.0)?;
        let deltas = preactivation_grads(params, &trace, it.y);
        n += 1;
        // incremental mean: m += (x - m) / n, applied as m *= (n-1)/n then += x/n
        let keep = (n - 1) as f64 / n as f64;
        let w = 1.0 / n as f64;
        for ((f, lt), g) in layers.iter_mut().zip(&trace.layers).zip(&deltas) {
            let abar = homogeneous(&lt.input);
            f.activations.as_mut_slice().iter_mut().for_each(|v| *v *= keep);
            f.activations.add_outer(&abar, &abar, w);
            f.gradients.as_mut_slice().iter_mut().for_each(|v| *v *= keep);
            f.gradients.add_outer(g, g, w);
        }
    }
    if n == 0 {
        return Err(Error::Empty("K-FAC accumulation data"));
    }
    Ok(KfacFactors { layers, samples: n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPosterior {
    /// Mean `[W*; b*ᵀ]`.
    pub mean: Matrix,
    /// Cholesky factor of the row precision `√N·E[A] + √τ·I`.
    pub row_chol: Matrix,
    /// Cholesky factor of the column precision `√N·E[G] + √τ·I`.
    pub col_chol: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    pub layers: Vec<LayerPosterior>,
    pub n_scale: f64,
    pub tau: f64,
    pub d: usize,
    pub c: usize,
}

pub fn posterior(factors: &KfacFactors, params: &CdpParams, n_scale: f64, tau: f64) -> Result<LaplacePosterior> {
    if !(n_scale > 0.0 && n_scale.is_finite()) {
        return Err(Error::invalid("n_scale must be positive"));
    }
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau must be non-negative"));
    }
    if factors.layers.len() != params.layers.len() {
        return Err(Error::Shape {
            context: "posterior layer count",
            expected: params.layers.len(),
            got: factors.layers.len(),
        });
    }
    let (sn, st) = (n_scale.sqrt(), tau.sqrt());
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, (f, layer)) in factors.layers.iter().zip(&params.layers).enumerate() {
        let row = f.activations.scale(sn).add_diagonal(st);
        let col = f.gradients.scale(sn).add_diagonal(st);
        let row_chol = pd_factor(&row, l, "row (activation)")?;
        let col_chol = pd_factor(&col, l, "column (gradient)")?;
        layers.push(LayerPosterior {
            mean: stacked_mean(layer),
            row_chol,
            col_chol,
        });
    }
    Ok(LaplacePosterior {
        layers,
        n_scale,
        tau,
        d: params.d,
        c: params.c,
    })
}

fn pd_factor(m: &Matrix, layer: usize, factor: &'static str) -> Result<Matrix> {
    cholesky(m).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, .. } => Error::PosteriorNotPd { layer, factor, pivot },
        other => other,
    })
}

fn stacked_mean(layer: &Layer) -> Matrix {
    let mut m = Matrix::zeros(layer.fan_in() + 1, layer.fan_out());
    for i in 0..layer.fan_in() {
        m.row_mut(i).copy_from_slice(layer.w.row(i));
    }
    m.row_mut(layer.fan_in()).copy_from_slice(&layer.b);
    m
}

/// One matrix-normal draw per layer: `W̄ = M + L_R⁻ᵀ Z L_C⁻¹` with `Z` iid standard normal.
pub fn sample_weights(post: &LaplacePosterior, stream: RngStream) -> Vec<Matrix> {
    post.layers
        .iter()
        .enumerate()
        .map(|(l, lp)| {
            let (r, c) = (lp.mean.rows(), lp.mean.cols());
            let z = Matrix::from_vec(r, c, stream.derive(l as u64).std_normal(r * c)).expect("sized by construction");
            let left = solve_lower_transpose(&lp.row_chol, &z);
            let dev = solve_lower_transpose(&lp.col_chol, &left.transpose()).transpose();
            lp.mean.add(&dev).expect("same shape")
        })
        .collect()
}

impl LaplacePosterior {
    /// A dropout-free network carrying one posterior weight draw.
    pub fn sample_params(&self, stream: RngStream) -> CdpParams {
        let layers = sample_weights(self, stream).into_iter().map(unstack).collect();
        CdpParams {
            layers,
            d: self.d,
            c: self.c,
            variant: Variant::Plain,
        }
    }

    /// The posterior mean as a dropout-free network.
    pub fn mean_params(&self) -> CdpParams {
        CdpParams {
            layers: self.layers.iter().map(|lp| unstack(lp.mean.clone())).collect(),
            d: self.d,
            c: self.c,
            variant: Variant::Plain,
        }
    }
}

fn unstack(m: Matrix) -> Layer {
    let fan_in = m.rows() - 1;
    let mut w = Matrix::zeros(fan_in, m.cols());
    for i in 0..fan_in {
        w.row_mut(i).copy_from_slice(m.row(i));
    }
    Layer {
        w,
        b: m.row(fan_in).to_vec(),
        rho: None,
    }
}

#[derive(Serialize, Deserialize)]
struct LayerPosteriorFile {
    mean: Vec<Vec<f64>>,
    row_chol: Vec<Vec<f64>>,
    col_chol: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PosteriorFile {
    layers: Vec<LayerPosteriorFile>,
    n_scale: f64,
    tau: f64,
    d: usize,
    c: usize,
}

pub fn save_posterior(path: &Path, post: &LaplacePosterior) -> Result<()> {
    let file = PosteriorFile {
        layers: post
            .layers
            .iter()
            .map(|lp| LayerPosteriorFile {
                mean: lp.mean.to_rows(),
                row_chol: lp.row_chol.to_rows(),
                col_chol: lp.col_chol.to_rows(),
            })
            .collect(),
        n_scale: post.n_scale,
        tau: post.tau,
        d: post.d,
        c: post.c,
    };
    dataio::write_json(path, &file)
}

pub fn load_posterior(path: &Path) -> Result<LaplacePosterior> {
    let file: PosteriorFile = dataio::read_json(path)?;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (l, lf) in file.layers.into_iter().enumerate() {
        let field = |name: &str| format!("layers[{l}].{name}");
        let mean = Matrix::from_rows(&lf.mean).map_err(|e| Error::schema(path, field("mean"), e.to_string()))?;
        let row_chol = Matrix::from_rows(&lf.row_chol).map_err(|e| Error::schema(path, field("row_chol"), e.to_string()))?;
        let col_chol = Matrix::from_rows(&lf.col_chol).map_err(|e| Error::schema(path, field("col_chol"), e.to_string()))?;
        if row_chol.rows() != mean.rows() || col_chol.rows() != mean.cols() {
            return Err(Error::schema(path, field("row_chol"), "factor sizes do not match the mean"));
        }
        for (name, f) in [("row_chol", &row_chol), ("col_chol", &col_chol)] {
            let lower_pos = (0..f.rows()).all(|i| f[(i, i)] > 0.0 && (i + 1..f.cols()).all(|j| f[(i, j)] == 0.0));
            if !lower_pos {
                return Err(Error::schema(path, field(name), "not lower-triangular with positive diagonal"));
            }
        }
        layers.push(LayerPosterior { mean, row_chol, col_chol });
    }
    Ok(LaplacePosterior {
        layers,
        n_scale: file.n_scale,
        tau: file.tau,
        d: file.d,
        c: file.c,
    })
}
