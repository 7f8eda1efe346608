//! Bilinear resize matrices for square patches and the weight resizing rules
//! built on them.
//!
//! A patch of side `p` is flattened row-major into a vector of length `p²`.
//! [`ResizePlan::b`] maps such a vector to the bilinearly resampled patch of
//! side `p_dst`; [`ResizePlan::b_pinv`] is its Moore-Penrose pseudo-inverse.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use super::Tensor;
use crate::error::{Error, Result};

/// Singular values below this are treated as zero when inverting
/// rank-deficient (downsampling) plans.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub p_src: usize,
    pub p_dst: usize,
    /// `p_dst² × p_src²`
    pub b: Tensor,
    /// `p_src² × p_dst²`
    pub b_pinv: Tensor,
}

/// 1-D interpolation weights, `p_dst × p_src`, half-pixel centers, edge clamped.
fn linear_weights(p_src: usize, p_dst: usize) -> Vec<Vec<f64>> {
    let scale = p_src as f64 / p_dst as f64;
    (0..p_dst)
        .map(|j| {
            let mut row = vec![0.0; p_src];
            let x = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (p_src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(p_src - 1);
            let t = x - i0 as f64;
            row[i0] += 1.0 - t;
            row[i1] += t;
            row
        })
        .collect()
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Moore-Penrose pseudo-inverse. Full column rank goes through the normal
/// equations; anything else falls back to SVD.
pub fn pseudo_inverse(a: &Tensor) -> Result<Tensor> {
    let m = to_dmatrix(a);
    if m.nrows() >= m.ncols() {
        let gram = m.transpose() * &m;
        if let Some(chol) = gram.clone().cholesky() {
            let sol = chol.solve(&m.transpose());
            // Cholesky succeeds on numerically singular Gram matrices too;
            // check the solution before trusting it.
            let check = &sol * &m;
            let err = (check - DMatrix::identity(m.ncols(), m.ncols())).amax();
            if err < 1e-10 {
                return Ok(from_dmatrix(&sol));
            }
        }
    }
    let pinv = m
        .svd(true, true)
        .pseudo_inverse(RANK_TOL)
        .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
    Ok(from_dmatrix(&pinv))
}

pub fn build_resize_matrix(p_src: usize, p_dst: usize) -> Result<ResizePlan> {
    if p_src == 0 || p_dst == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch sizes must be positive, got {p_src} -> {p_dst}"
        )));
    }
    if p_src == p_dst {
        let n = p_src * p_src;
        return Ok(ResizePlan {
            p_src,
            p_dst,
            b: Tensor::eye(n),
            b_pinv: Tensor::eye(n),
        });
    }
    let w = linear_weights(p_src, p_dst);
    let (ns, nd) = (p_src * p_src, p_dst * p_dst);
    let b = Tensor::from_fn(nd, ns, |o, s| {
        let (oy, ox) = (o / p_dst, o % p_dst);
        let (sy, sx) = (s / p_src, s % p_src);
        w[oy][sy] * w[ox][sx]
    });
    let b_pinv = pseudo_inverse(&b)?;
    Ok(ResizePlan {
        p_src,
        p_dst,
        b,
        b_pinv,
    })
}

impl ResizePlan {
    /// Memoized [`build_resize_matrix`]; plans are immutable and shared.
    pub fn cached(p_src: usize, p_dst: usize) -> Result<Arc<ResizePlan>> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<ResizePlan>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(plan) = cache.lock().expect("plan cache poisoned").get(&(p_src, p_dst)) {
            return Ok(plan.clone());
        }
        // Built outside the lock; a racing duplicate is identical.
        let plan = Arc::new(build_resize_matrix(p_src, p_dst)?);
        cache
            .lock()
            .expect("plan cache poisoned")
            .insert((p_src, p_dst), plan.clone());
        Ok(plan)
    }

    pub fn is_identity(&self) -> bool {
        self.p_src == self.p_dst
    }

    /// Resample one flattened patch of side `p_src`.
    pub fn apply(&self, patch: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::new(vec![patch.len(), 1], patch.to_vec())?;
        Ok(self.b.matmul(&x)?.into_data())
    }
}

fn check_cols(t: &Tensor, want: usize, what: &str) -> Result<()> {
    if t.shape().len() != 2 || t.cols() != want {
        return Err(Error::Shape(format!(
            "{what}: expected D x {want}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Pseudo-inverse resize of patch-embedding weights `w` (`D × p_src²`).
///
/// Returns `w·B⁺`, so that `w·x == resized·(B·x)` whenever `B` has full
/// column rank (`p_dst ≥ p_src`).
pub fn pi_resize_embed_weights(w: &Tensor, plan: &ResizePlan) -> Result<Tensor> {
    check_cols(w, plan.p_src * plan.p_src, "pi_resize_embed_weights")?;
    if plan.is_identity() {
        return Ok(w.clone());
    }
    w.matmul(&plan.b_pinv)
}

/// Bilinear resize of decoder projection weights `v` (`D × p_src²`): `v·Bᵀ`.
pub fn resize_decoder_weights(v: &Tensor, plan: &ResizePlan) -> Result<Tensor> {
    check_cols(v, plan.p_src * plan.p_src, "resize_decoder_weights")?;
    if plan.is_identity() {
        return Ok(v.clone());
    }
    v.matmul(&plan.b.transpose())
}
