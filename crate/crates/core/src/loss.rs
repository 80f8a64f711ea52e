//! The four training losses and their unweighted sum, differentiable through
//! the tensor tape.
//!
//! All functions accept tensors so gradients flow back to the heads; ground
//! truth may be passed as untracked constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::diffgeom;
use crate::tensor::Tensor;

/// Scalar values of one loss evaluation.
///
/// `future` is the normalized term that enters `total`; `future_raw` is the
/// plain time-summed value. `total` is always the exact sum
/// pose + reg + inner_prod + future, accumulated in that order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pose: f64,
    pub reg: f64,
    pub inner_prod: f64,
    pub future: f64,
    pub future_raw: f64,
    pub total: f64,
}

/// The loss tensors of one step, kept on the tape so `total` can be swept.
pub struct LossTerms {
    pub pose: Tensor,
    pub reg: Tensor,
    pub inner_prod: Tensor,
    pub future: Tensor,
    pub future_raw: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            pose: self.pose.to_scalar()?,
            reg: self.reg.to_scalar()?,
            inner_prod: self.inner_prod.to_scalar()?,
            future: self.future.to_scalar()?,
            future_raw: self.future_raw.to_scalar()?,
            total: self.total.to_scalar()?,
        })
    }
}

/// Pose loss: mean over model points of the squared distance between points
/// transformed by the estimated and the ground-truth pose.
pub fn pose_loss(
    q_est: &Tensor,
    t_est: &Tensor,
    q_gt: &Tensor,
    t_gt: &Tensor,
    points: &[[f64; 3]],
) -> Result<Tensor> {
    if points.is_empty() {
        return Err(Error::EmptyInput("pose_loss"));
    }
    let a = diffgeom::transform_points(q_est, t_est, points)?;
    let b = diffgeom::transform_points(q_gt, t_gt, points)?;
    let diff = a.sub(&b)?;
    diff.mul(&diff)?.sum()?.scale(1.0 / points.len() as f64)
}

/// Regularization toward unit quaternions: |1 - norm(q)|.
pub fn reg_loss(q_est: &Tensor) -> Result<Tensor> {
    diffgeom::quat_norm(q_est)?
        .scale(-1.0)?
        .add_scalar(1.0)?
        .abs()
}

/// Cosine-style quaternion loss: 1 - <q_est, q_gt>.
pub fn inner_prod_loss(q_est: &Tensor, q_gt: &Tensor) -> Result<Tensor> {
    q_est.mul(q_gt)?.sum()?.scale(-1.0)?.add_scalar(1.0)
}

/// Future-feature loss over one clip, inputs shaped [t, n, d]:
/// sum over t of ||z_hat_t - z_tilde_{t+1}||^2.
///
/// Returns (raw, normalized); the normalized value divides by n*d so the
/// magnitude is comparable across feature sizes. Training consumes the
/// normalized term.
pub fn future_loss(z_hat: &Tensor, z_tilde: &Tensor) -> Result<(Tensor, Tensor)> {
    if z_hat.shape() != z_tilde.shape() {
        return Err(Error::ShapeMismatch {
            op: "future_loss",
            lhs: z_hat.shape().to_vec(),
            rhs: z_tilde.shape().to_vec(),
        });
    }
    if z_hat.shape().len() != 3 {
        return Err(Error::InvalidInput {
            op: "future_loss",
            msg: format!("expected [t, n, d], got {:?}", z_hat.shape()),
        });
    }
    let (t, n, d) = (z_hat.shape()[0], z_hat.shape()[1], z_hat.shape()[2]);
    if t < 2 {
        return Err(Error::InsufficientContext { need: 2, got: t });
    }
    let pred = z_hat.slice(0, 0, t - 1)?;
    let target = z_tilde.slice(0, 1, t - 1)?;
    let diff = pred.sub(&target)?;
    let raw = diff.mul(&diff)?.sum()?;
    let normalized = raw.scale(1.0 / (n * d) as f64)?;
    Ok((raw, normalized))
}

/// Unweighted sum of the four terms, in a fixed accumulation order.
pub fn total_loss(
    pose: Tensor,
    reg: Tensor,
    inner_prod: Tensor,
    future: Tensor,
    future_raw: Tensor,
) -> Result<LossTerms> {
    let total = pose.add(&reg)?.add(&inner_prod)?.add(&future)?;
    Ok(LossTerms {
        pose,
        reg,
        inner_prod,
        future,
        future_raw,
        total,
    })
}
