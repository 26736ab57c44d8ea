//! Sparse deformable sequencing.
//!
//! Tokens are ranked by their angle to an anchor token, the closest
//! `ceil(λ·N)` are kept, and that similarity order becomes the scan order
//! fed to a Mamba block. The block output is written back into the
//! selected rows on top of an identity skip, so unselected tokens pass
//! through untouched.
//!
//! Selection is hard: gradients flow through the gathered token values,
//! never through the angles.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mamba::{mamba_block_forward, MambaBlockVars};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseSelection {
    /// Selected token positions, most similar first. Always starts with
    /// the anchor.
    pub indices: Vec<usize>,
    /// Angle of every token to the anchor, radians in `[0, π]`.
    pub angles: Vec<f32>,
    pub lambda: f64,
    pub anchor_index: usize,
}

impl SparseSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.angles.len()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("sparsity ratio must lie in (0, 1], got {lambda}")))
    }
}

/// `ceil(λ·N)`, at least one. A small slack keeps products such as
/// `0.3 · 10` from rounding up past the exact integer.
pub fn selected_count(total: usize, lambda: f64) -> usize {
    let raw = lambda * total as f64;
    ((raw - 1e-9).ceil() as usize).clamp(1, total.max(1))
}

/// Angle between `anchor` and every row of `tokens: [N, d]`.
///
/// A zero-norm token (or anchor) has no direction and is assigned `π/2`.
pub fn angular_attention(tokens: &Tensor, anchor: &[f32]) -> Result<Tensor> {
    let shape = tokens.shape();
    if shape.len() != 2 || shape[1] != anchor.len() {
        return Err(Error::dim("angular_attention", shape, &[anchor.len()]));
    }
    let anchor_sq = dot(anchor, anchor);
    let angles = (0..shape[0])
        .map(|i| {
            let token = tokens.row(i);
            let token_sq = dot(token, token);
            if anchor_sq == 0.0 || token_sq == 0.0 {
                return FRAC_PI_2 as f32;
            }
            // atan2 of (|t||a| sin, |t||a| cos) stays accurate near 0 and π,
            // where acos of the cosine loses half its digits.
            let cos = dot(token, anchor);
            let sin = (anchor_sq * token_sq - cos * cos).max(0.0).sqrt();
            sin.atan2(cos) as f32
        })
        .collect();
    Tensor::new(&[shape[0]], angles)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Keeps the `ceil(λ·N)` tokens with the smallest angle, in ascending
/// angle order. The anchor's own angle is pinned to zero and it wins any
/// tie, so it always leads the sequence; remaining ties keep index order.
pub fn select_sparse(angles: &Tensor, lambda: f64, anchor_index: usize) -> Result<SparseSelection> {
    check_lambda(lambda)?;
    let total = angles.numel();
    if anchor_index >= total {
        return Err(Error::Index {
            op: "select_sparse",
            index: anchor_index,
            extent: total,
        });
    }
    let mut angles = angles.data().to_vec();
    angles[anchor_index] = 0.0;
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        angles[a]
            .total_cmp(&angles[b])
            .then_with(|| (a != anchor_index).cmp(&(b != anchor_index)))
            .then_with(|| a.cmp(&b))
    });
    order.truncate(selected_count(total, lambda));
    Ok(SparseSelection {
        indices: order,
        angles,
        lambda,
        anchor_index,
    })
}

/// Flat index of the centre token of an `h × w` grid.
pub fn spatial_anchor(height: usize, width: usize) -> usize {
    (height / 2) * width + width / 2
}

/// Uniform channel index drawn from a generator seeded with `seed`.
pub fn spectral_anchor(channels: usize, seed: u64) -> usize {
    if channels <= 1 {
        return 0;
    }
    ChaCha8Rng::seed_from_u64(seed).gen_range(0..channels)
}

/// Angles to the token at `anchor_index`, then [`select_sparse`].
pub fn sparse_deformable_selection(
    tokens: &Tensor,
    anchor_index: usize,
    lambda: f64,
) -> Result<SparseSelection> {
    let rows = tokens.shape()[0];
    if anchor_index >= rows {
        return Err(Error::Index {
            op: "sparse_deformable_selection",
            index: anchor_index,
            extent: rows,
        });
    }
    let angles = angular_attention(tokens, tokens.row(anchor_index))?;
    select_sparse(&angles, lambda, anchor_index)
}

/// `tokens + scatter(block(gather(tokens, sel)), sel)`.
pub fn sequence_and_restore<'t>(
    tokens: Var<'t>,
    sel: &SparseSelection,
    block: &MambaBlockVars<'t>,
) -> Result<Var<'t>> {
    let shape = tokens.shape();
    if sel.total_tokens() != shape[0] {
        return Err(Error::dim("sequence_and_restore", &shape, &[sel.total_tokens()]));
    }
    let gathered = tokens.gather_rows(&sel.indices)?;
    let processed = mamba_block_forward(block, gathered)?;
    let zeros = tokens.tape().constant(Tensor::zeros(&shape));
    let residual = zeros.scatter_rows(&sel.indices, processed)?;
    tokens.add(residual)
}
