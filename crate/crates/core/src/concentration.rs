//! Weighted Gaussian fitting of similarity maps and the part-concentration
//! loss.
//!
//! Map positions are integer `(row, col)` grid coordinates starting at
//! `(0, 0)`; the thresholds `t_μ` and `t_σ` are in those units.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this value of `Σγs − 1` the covariance term of a prototype is
/// skipped for that sample.
pub const SIGMA_DENOM_GUARD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    /// Center in (row, col) grid units.
    pub mu: [f64; 2],
    pub sigma: [[f64; 2]; 2],
    /// `Σ γ_i s_i`.
    pub weight: f64,
}

impl GaussianFit {
    pub fn trace(&self) -> f64 {
        self.sigma[0][0] + self.sigma[1][1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PPCConfig {
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
    pub t_mu: f64,
    pub t_sigma: f64,
    /// Covariance term skipped when `Σγs − 1` is at or below this.
    pub sigma_guard: f64,
}

impl Default for PPCConfig {
    fn default() -> Self {
        PPCConfig {
            lambda_mu: 0.5,
            lambda_sigma: 0.1,
            t_mu: 2.0,
            t_sigma: 1.0,
            sigma_guard: SIGMA_DENOM_GUARD,
        }
    }
}

impl PPCConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mu", self.lambda_mu),
            ("lambda_sigma", self.lambda_sigma),
            ("t_mu", self.t_mu),
            ("t_sigma", self.t_sigma),
            ("sigma_guard", self.sigma_guard),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Param(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `(row, col)` coordinates of a `g×g` grid in raster order, as `g²×2`.
pub fn grid_positions(g: usize) -> Tensor {
    let data = (0..g * g).flat_map(|i| [(i / g) as f64, (i % g) as f64]).collect();
    Tensor::new(&[g * g, 2], data).unwrap()
}

/// Fit of one prototype's map, living on a tape.
#[derive(Clone, Debug)]
pub struct FitVars {
    /// `1×2` center.
    pub mu: Var,
    /// `2×2` covariance; `None` when `Σγs − 1` is at or below the guard.
    pub sigma: Option<Var>,
    pub weight: f64,
}

/// Weighted mean and covariance of one similarity column `s_col` (`N×1`)
/// over the positions kept by `keep`:
///
/// `μ̂ = Σγsx / Σγs`, `Σ̂ = Σγs(x−μ̂)(x−μ̂)ᵀ / (Σγs − 1)`.
///
/// Differentiable with respect to `s_col`. `Σ̂` is omitted when
/// `Σγs − 1 <= min_denominator`.
pub fn fit_on_tape(tape: &mut Tape, s_col: Var, keep: &[bool], positions: &Tensor, min_denominator: f64) -> Result<FitVars> {
    let (n, one) = tape.value(s_col).dims2()?;
    if one != 1 || positions.shape() != [n, 2] || keep.len() != n {
        return Err(Error::Shape {
            op: "fit_gaussian",
            lhs: tape.shape(s_col).to_vec(),
            rhs: positions.shape().to_vec(),
        });
    }
    let gamma = tape.constant(Tensor::new(&[n, 1], keep.iter().map(|&k| k as u8 as f64).collect())?);
    let w = tape.mul(s_col, gamma)?;
    let total = tape.sum(w);
    let weight = tape.value(total).item();
    if !(weight > 0.0) {
        return Err(Error::DegenerateFit(weight));
    }
    let pos = tape.constant(positions.clone());
    let pos_t = tape.transpose(pos)?;
    let moment = tape.matmul(pos_t, w)?;
    let mu_col = tape.div_scalar(moment, total)?;
    let mu = tape.transpose(mu_col)?;
    if weight - 1.0 <= min_denominator {
        return Ok(FitVars { mu, sigma: None, weight });
    }
    let neg_mu = tape.scale(mu, -1.0);
    let centered = tape.add_row(pos, neg_mu)?;
    let centered_t = tape.transpose(centered)?;
    let w_row = tape.transpose(w)?;
    let weighted = tape.mul_row(centered_t, w_row)?;
    let scatter = tape.matmul(weighted, centered)?;
    let denom = tape.add_scalar(total, -1.0);
    let sigma = tape.div_scalar(scatter, denom)?;
    Ok(FitVars {
        mu,
        sigma: Some(sigma),
        weight,
    })
}

fn read_fit(tape: &Tape, f: &FitVars) -> GaussianFit {
    let mu = tape.data(f.mu);
    let s = f.sigma.map(|v| tape.data(v).to_vec()).unwrap_or_else(|| vec![0.0; 4]);
    GaussianFit {
        mu: [mu[0], mu[1]],
        sigma: [[s[0], s[1]], [s[2], s[3]]],
        weight: f.weight,
    }
}

/// Fits a Gaussian to a row-major `g×g` similarity map under `keep`.
///
/// Fails with [`Error::DegenerateFit`] when `Σγs − 1 <= 0`.
pub fn fit_gaussian(map: &[f64], keep: &[bool], grid: usize) -> Result<GaussianFit> {
    if map.len() != grid * grid {
        return Err(Error::Shape {
            op: "fit_gaussian",
            lhs: vec![map.len()],
            rhs: vec![grid, grid],
        });
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(&[map.len(), 1], map.to_vec())?);
    let f = fit_on_tape(&mut tape, s, keep, &grid_positions(grid), 0.0)?;
    if f.sigma.is_none() {
        return Err(Error::DegenerateFit(f.weight));
    }
    Ok(read_fit(&tape, &f))
}

/// `(1/m²) Σ_{i≠j} max(t_μ − ‖μ_i − μ_j‖², 0)` over the given `1×2` centers.
pub fn ppc_mu_on_tape(tape: &mut Tape, centers: &[Var], t_mu: f64) -> Result<Var> {
    let m = centers.len();
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let d = tape.sub(centers[i], centers[j])?;
            let sq = tape.mul(d, d)?;
            let dist = tape.sum(sq);
            let gap = tape.scale(dist, -1.0);
            let gap = tape.add_scalar(gap, t_mu);
            let hinge = tape.relu(gap);
            acc = tape.add(acc, hinge)?;
        }
    }
    Ok(if m > 0 { tape.scale(acc, 1.0 / (m * m) as f64) } else { acc })
}

/// `tr(max(0, Σ̂ − t_σ))`, the max taken elementwise.
pub fn ppc_sigma_on_tape(tape: &mut Tape, sigma: Var, t_sigma: f64) -> Result<Var> {
    let shifted = tape.add_scalar(sigma, -t_sigma);
    let hinge = tape.relu(shifted);
    let eye = tape.constant(Tensor::eye(2));
    let diag = tape.mul(hinge, eye)?;
    Ok(tape.sum(diag))
}

pub fn ppc_mu(fits: &[GaussianFit], t_mu: f64) -> f64 {
    let mut tape = Tape::new();
    let centers: Vec<Var> = fits
        .iter()
        .map(|f| tape.constant(Tensor::new(&[1, 2], f.mu.to_vec()).unwrap()))
        .collect();
    let v = ppc_mu_on_tape(&mut tape, &centers, t_mu).unwrap();
    tape.value(v).item()
}

pub fn ppc_sigma(fit: &GaussianFit, t_sigma: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(&[2, 2], fit.sigma.iter().flatten().copied().collect()).unwrap());
    let v = ppc_sigma_on_tape(&mut tape, s, t_sigma).unwrap();
    tape.value(v).item()
}

/// Per-sample loss terms on a tape.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub ppc_mu: Var,
    /// Mean of the covariance hinge over the sample's prototypes; skipped
    /// prototypes contribute 0.
    pub ppc_sigma: Var,
}

/// `CE(z_c, label) + λ_μ·L^μ + λ_σ·mean(L^σ)` for one sample, where `fits`
/// are the fits of the label class's local prototypes.
pub fn total_loss(tape: &mut Tape, logits: Var, label: usize, fits: &[FitVars], cfg: &PPCConfig) -> Result<LossTerms> {
    let ce = tape.cross_entropy(logits, label)?;
    let centers: Vec<Var> = fits.iter().map(|f| f.mu).collect();
    let ppc_mu = ppc_mu_on_tape(tape, &centers, cfg.t_mu)?;
    let mut sig = tape.constant(Tensor::scalar(0.0));
    for f in fits {
        if let Some(s) = f.sigma {
            let term = ppc_sigma_on_tape(tape, s, cfg.t_sigma)?;
            sig = tape.add(sig, term)?;
        }
    }
    let ppc_sigma = if fits.is_empty() {
        sig
    } else {
        tape.scale(sig, 1.0 / fits.len() as f64)
    };
    let a = tape.scale(ppc_mu, cfg.lambda_mu);
    let b = tape.scale(ppc_sigma, cfg.lambda_sigma);
    let total = tape.add(ce, a)?;
    let total = tape.add(total, b)?;
    Ok(LossTerms {
        total,
        ce,
        ppc_mu,
        ppc_sigma,
    })
}
