//! Forward kinematics on tensors, so position losses can back-propagate
//! into predicted 6D rotations.

use candle_core::{Device, Tensor, D};
use choreo_core::motion::{SkeletonTemplate, NUM_JOINTS, ROTATION_WIDTH};

/// Guards the Gram-Schmidt normalizations against zero vectors.
const NORM_EPS: f64 = 1e-12;

fn normalize(v: &Tensor) -> candle_core::Result<Tensor> {
    v.broadcast_div(&(v.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?)
}

fn component(v: &Tensor, i: usize) -> candle_core::Result<Tensor> {
    v.narrow(D::Minus1, i, 1)
}

fn cross(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let (a0, a1, a2) = (component(a, 0)?, component(a, 1)?, component(a, 2)?);
    let (b0, b1, b2) = (component(b, 0)?, component(b, 1)?, component(b, 2)?);
    Tensor::cat(
        &[
            ((&a1 * &b2)? - (&a2 * &b1)?)?,
            ((&a2 * &b0)? - (&a0 * &b2)?)?,
            ((&a0 * &b1)? - (&a1 * &b0)?)?,
        ],
        D::Minus1,
    )
}

/// `(..., 6)` 6D rotations to `(..., 3, 3)` matrices whose columns are the
/// Gram-Schmidt basis.
pub fn rot6d_to_matrix(r: &Tensor) -> candle_core::Result<Tensor> {
    let b1 = normalize(&r.narrow(D::Minus1, 0, 3)?)?;
    let a2 = r.narrow(D::Minus1, 3, 3)?;
    let b2 = normalize(&(&a2 - b1.broadcast_mul(&(&b1 * &a2)?.sum_keepdim(D::Minus1)?)?)?)?;
    let b3 = cross(&b1, &b2)?;
    Tensor::stack(&[b1, b2, b3], D::Minus1)
}

/// `m @ v` for `(..., 3, 3)` matrices and a constant 3-vector, as a `(..., 3)` tensor.
fn apply_const(m: &Tensor, v: [f64; 3]) -> candle_core::Result<Tensor> {
    let mut out = (m.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)? * v[0])?;
    for (c, s) in v.iter().enumerate().skip(1) {
        out = (out + (m.narrow(D::Minus1, c, 1)?.squeeze(D::Minus1)? * *s)?)?;
    }
    Ok(out)
}

/// Joint positions `(B, T, 24, 3)` from pose rows `(B, T, w)` where the first
/// 144 channels are rotations and the next three the root translation.
pub fn forward_kinematics(pose: &Tensor, skeleton: &SkeletonTemplate) -> candle_core::Result<Tensor> {
    let (b, t, _) = pose.dims3()?;
    let local = rot6d_to_matrix(&pose.narrow(2, 0, ROTATION_WIDTH)?.reshape((b, t, NUM_JOINTS, 6))?)?;
    let root = pose.narrow(2, ROTATION_WIDTH, 3)?;
    let mut world: Vec<Tensor> = Vec::with_capacity(NUM_JOINTS);
    let mut pos: Vec<Tensor> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let r = local.narrow(2, j, 1)?.squeeze(2)?.contiguous()?;
        match skeleton.parent_index[j] {
            None => {
                pos.push(root.clone());
                world.push(r);
            }
            Some(p) => {
                let o = skeleton.rest_offsets[j];
                pos.push((&pos[p] + apply_const(&world[p], [o.x, o.y, o.z])?)?);
                world.push(world[p].matmul(&r)?);
            }
        }
    }
    Tensor::stack(&pos, 2)
}

/// Host positions (frame-major, 24 joints) as a `(1, T, 24, 3)` f32 tensor.
pub fn positions_tensor(data: &[nalgebra::Vector3<f64>], device: &Device) -> candle_core::Result<Tensor> {
    let flat: Vec<f32> = data.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    Tensor::from_vec(flat, (1, data.len() / NUM_JOINTS, NUM_JOINTS, 3), device)
}
