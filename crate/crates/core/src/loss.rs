//! Closed-form KL divergence between batch statistics of latent points and
//! the target Gaussians.
//!
//! For a batch `Z` with per-coordinate population mean `m` and variance `v`,
//! scored against `N(mu * 1_p, sigma^2 I_p)`:
//!
//! ```text
//! KL = 1/2 [ log(sigma^(2p) / prod_i v_i) - p + sum_i v_i / sigma^2 + |mu 1_p - m|^2 / sigma^2 ]
//! ```
//!
//! This is `KL(N(m, diag v) || N(mu 1_p, sigma^2 I))`. The mean term uses the
//! squared norm, which is what the general quadratic form reduces to for an
//! isotropic covariance.

use crate::autodiff::{Axis, Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::target::{PairLabel, TargetGaussian, TargetSpec};

/// Lower bound applied to every batch variance before taking its log.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var_diag: Vec<f64>,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss_m: f64,
    pub loss_n: f64,
    pub total: f64,
}

/// Tape handles for the three loss values.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss_m: NodeId,
    pub loss_n: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |id| tape.value(id).as_scalar().expect("loss nodes are scalar");
        LossBreakdown {
            loss_m: v(self.loss_m),
            loss_n: v(self.loss_n),
            total: v(self.total),
        }
    }
}

/// Per-coordinate population mean and floored variance of a `b x p` batch.
pub fn batch_moments(z: &Matrix) -> Result<BatchMoments> {
    if z.rows() < 2 {
        return Err(Error::InsufficientBatch {
            needed: 2,
            got: z.rows(),
        });
    }
    let mean = z.column_means();
    let n = z.rows() as f64;
    let mut var = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for ((v, x), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    for v in &mut var {
        *v = v.max(VARIANCE_FLOOR);
    }
    Ok(BatchMoments {
        mean,
        var_diag: var,
        batch_size: z.rows(),
    })
}

/// Diagonal-covariance KL of the batch moments against one target.
pub fn kl_diag(moments: &BatchMoments, target: TargetGaussian) -> Result<f64> {
    let p = moments.mean.len();
    if p != target.p || moments.var_diag.len() != p {
        return Err(Error::shape(
            "kl_diag",
            format!("moments have {p} coordinates, target has {}", target.p),
        ));
    }
    let s2 = target.sigma * target.sigma;
    let mut log_ratio = p as f64 * s2.ln();
    let mut trace = 0.0;
    let mut mean_sq = 0.0;
    for (i, (&m, &v)) in moments.mean.iter().zip(&moments.var_diag).enumerate() {
        if !(v > 0.0) || !v.is_finite() || !m.is_finite() {
            return Err(Error::NonFinite {
                op: "kl_diag",
                index: i,
            });
        }
        log_ratio -= v.ln();
        trace += v / s2;
        mean_sq += (target.mu - m).powi(2) / s2;
    }
    let kl = 0.5 * (log_ratio - p as f64 + trace + mean_sq);
    if !kl.is_finite() {
        return Err(Error::NonFinite {
            op: "kl_diag",
            index: 0,
        });
    }
    Ok(kl)
}

/// General multivariate Gaussian KL, `KL(N(mean, cov) || target)`.
///
/// Evaluated through a Cholesky factor of `cov`. Used as a reference for
/// [`kl_diag`]; the training path never calls it.
pub fn kl_full(mean: &[f64], cov: &Matrix, target: TargetGaussian) -> Result<f64> {
    let p = mean.len();
    if cov.shape() != (p, p) || p != target.p {
        return Err(Error::shape(
            "kl_full",
            format!(
                "mean of length {p}, covariance {:?}, target dimension {}",
                cov.shape(),
                target.p
            ),
        ));
    }
    let chol = cholesky(cov)?;
    let log_det_sample: f64 = (0..p).map(|i| 2.0 * chol.get(i, i).ln()).sum();
    let s2 = target.sigma * target.sigma;
    let log_det_target = p as f64 * s2.ln();
    // Σ⁻¹ = I / sigma², so the trace and the quadratic form need no inverse.
    let trace: f64 = (0..p).map(|i| cov.get(i, i)).sum::<f64>() / s2;
    let quad: f64 = mean.iter().map(|m| (target.mu - m).powi(2)).sum::<f64>() / s2;
    Ok(0.5 * (log_det_target - log_det_sample - p as f64 + trace + quad))
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("cholesky", format!("{:?} is not square", a.shape())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Records the diagonal KL of the rows of `z` against `target` on the tape.
pub fn kl_diag_node(tape: &mut Tape, z: NodeId, target: TargetGaussian) -> Result<NodeId> {
    let (rows, p) = tape.value(z).shape();
    if rows < 2 {
        return Err(Error::InsufficientBatch { needed: 2, got: rows });
    }
    if p != target.p {
        return Err(Error::shape(
            "kl_diag",
            format!("latent batch has {p} columns, target has {}", target.p),
        ));
    }
    let s2 = target.sigma * target.sigma;

    let mean = tape.mean(z, Axis::Batch)?;
    let var = tape.var(z, Axis::Batch)?;
    let var = tape.floor_at(var, VARIANCE_FLOOR)?;

    let log_var = tape.log(var)?;
    let sum_log_var = tape.sum(log_var)?;
    let sum_var = tape.sum(var)?;

    let mu = tape.leaf(Matrix::filled(1, p, target.mu))?;
    let diff = tape.sub(mu, mean)?;
    let diff_sq = tape.square(diff)?;
    let mean_term = tape.sum(diff_sq)?;

    let neg_log = tape.scale(sum_log_var, -1.0)?;
    let trace = tape.scale(sum_var, 1.0 / s2)?;
    let quad = tape.scale(mean_term, 1.0 / s2)?;
    let acc = tape.add(neg_log, trace)?;
    let acc = tape.add(acc, quad)?;
    let acc = tape.add_scalar(acc, p as f64 * s2.ln() - p as f64)?;
    tape.scale(acc, 0.5)
}

/// `L = L_m + L_n` over the matching and non-matching halves of a batch.
pub fn total_loss(
    tape: &mut Tape,
    z_matching: NodeId,
    z_non_matching: NodeId,
    target: &TargetSpec,
) -> Result<LossNodes> {
    let loss_m = kl_diag_node(tape, z_matching, target.side(PairLabel::Matching))?;
    let loss_n = kl_diag_node(tape, z_non_matching, target.side(PairLabel::NonMatching))?;
    let total = tape.add(loss_m, loss_n)?;
    Ok(LossNodes {
        loss_m,
        loss_n,
        total,
    })
}

/// Evaluates [`total_loss`] on plain matrices.
pub fn total_loss_value(z_m: &Matrix, z_n: &Matrix, target: &TargetSpec) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let a = tape.leaf(z_m.clone())?;
    let b = tape.leaf(z_n.clone())?;
    Ok(total_loss(&mut tape, a, b, target)?.breakdown(&tape))
}
