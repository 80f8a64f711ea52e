//! Tape-aware counterparts of the geometry ops, for use inside the training
//! graph. The plain f64 versions in [`crate::geom`] stay the evaluation
//! oracle; these mirror them on [`Tensor`]s so gradients flow.

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, MIN_QUAT_NORM};
use crate::tensor::Tensor;

/// Euclidean norm of a quaternion held as a 4-vector tensor (w, x, y, z).
pub fn quat_norm(q: &Tensor) -> Result<Tensor> {
    expect_shape(q, &[4], "quat_norm")?;
    q.mul(q)?.sum()?.sqrt()
}

/// Complete a quaternion from predicted (x, y, z): w = 1 - norm(x, y, z).
/// Output is the raw, unnormalized 4-vector.
pub fn complete_quaternion(xyz: &Tensor) -> Result<Tensor> {
    expect_shape(xyz, &[3], "complete_quaternion")?;
    let w = xyz.mul(xyz)?.sum()?.sqrt()?.scale(-1.0)?.add_scalar(1.0)?;
    Tensor::concat(&[&w, xyz], 0)
}

/// 3x3 rotation matrix from a quaternion 4-vector, normalizing first.
pub fn quat_to_rotmat(q: &Tensor) -> Result<Tensor> {
    expect_shape(q, &[4], "quat_to_rotmat")?;
    let norm_val = q.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_val <= MIN_QUAT_NORM {
        return Err(Error::DegenerateRotation {
            norm: norm_val,
            min: MIN_QUAT_NORM,
        });
    }
    let inv_norm = quat_norm(q)?.powf(-1.0)?;
    let qn = q.mul(&inv_norm)?;
    let w = qn.slice(0, 0, 1)?;
    let x = qn.slice(0, 1, 1)?;
    let y = qn.slice(0, 2, 1)?;
    let z = qn.slice(0, 3, 1)?;

    let two = 2.0;
    let r00 = y.mul(&y)?.add(&z.mul(&z)?)?.scale(-two)?.add_scalar(1.0)?;
    let r01 = x.mul(&y)?.sub(&w.mul(&z)?)?.scale(two)?;
    let r02 = x.mul(&z)?.add(&w.mul(&y)?)?.scale(two)?;
    let r10 = x.mul(&y)?.add(&w.mul(&z)?)?.scale(two)?;
    let r11 = x.mul(&x)?.add(&z.mul(&z)?)?.scale(-two)?.add_scalar(1.0)?;
    let r12 = y.mul(&z)?.sub(&w.mul(&x)?)?.scale(two)?;
    let r20 = x.mul(&z)?.sub(&w.mul(&y)?)?.scale(two)?;
    let r21 = y.mul(&z)?.add(&w.mul(&x)?)?.scale(two)?;
    let r22 = x.mul(&x)?.add(&y.mul(&y)?)?.scale(-two)?.add_scalar(1.0)?;

    Tensor::concat(
        &[&r00, &r01, &r02, &r10, &r11, &r12, &r20, &r21, &r22],
        0,
    )?
    .reshape(&[3, 3])
}

/// Apply x -> R(q) x + t to a fixed point set. `points` is constant; the
/// pose tensors carry the gradient.
pub fn transform_points(q: &Tensor, t: &Tensor, points: &[[f64; 3]]) -> Result<Tensor> {
    expect_shape(t, &[3], "transform_points")?;
    let m = points.len();
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let pts = Tensor::constant(&[m, 3], flat)?;
    let r = quat_to_rotmat(q)?;
    // (R p)^T rows == p^T R^T
    pts.matmul(&r.transpose(0, 1)?)?.add(t)
}

/// Recover the full translation from the head outputs, differentiable
/// through delta_c and t_z. The detected center c is a constant input.
pub fn recover_translation(
    c: &[f64; 2],
    delta_c: &Tensor,
    t_z: &Tensor,
    k: &CameraIntrinsics,
) -> Result<Tensor> {
    expect_shape(delta_c, &[2], "recover_translation")?;
    expect_shape(t_z, &[1], "recover_translation")?;
    let tz_val = t_z.data()[0];
    if tz_val <= 0.0 {
        return Err(Error::InvalidDepth(tz_val));
    }
    let tx = delta_c
        .slice(0, 0, 1)?
        .add_scalar(c[0] - k.p_x)?
        .mul(t_z)?
        .scale(1.0 / k.f_x)?;
    let ty = delta_c
        .slice(0, 1, 1)?
        .add_scalar(c[1] - k.p_y)?
        .mul(t_z)?
        .scale(1.0 / k.f_y)?;
    Tensor::concat(&[&tx, &ty, t_z], 0)
}

fn expect_shape(t: &Tensor, want: &[usize], op: &'static str) -> Result<()> {
    if t.shape() != want {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}
