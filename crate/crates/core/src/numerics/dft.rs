//! Separable 2-D discrete Fourier transform of real fields and the
//! magnitude-spectrum L1 distance.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use super::Tensor;
use crate::error::{Error, Result};

/// Complex spectrum stored as separate real and imaginary planes, row-major.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// 1-D transform along one axis of a complex `h × w` plane.
fn pass(
    re: &[f64],
    im: &[f64],
    h: usize,
    w: usize,
    along_rows: bool,
    sign: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (n, lanes) = if along_rows { (w, h) } else { (h, w) };
    let dir = if sign < 0.0 { FftDirection::Forward } else { FftDirection::Inverse };
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft(n, dir));
    let at = |lane: usize, j: usize| if along_rows { lane * w + j } else { j * w + lane };
    let mut buf: Vec<Complex<f64>> = (0..lanes)
        .flat_map(|lane| (0..n).map(move |j| (lane, j)))
        .map(|(lane, j)| Complex::new(re[at(lane, j)], im[at(lane, j)]))
        .collect();
    fft.process(&mut buf);
    let mut ore = vec![0.0; h * w];
    let mut oim = vec![0.0; h * w];
    for (i, v) in buf.iter().enumerate() {
        let idx = at(i / n, i % n);
        ore[idx] = v.re;
        oim[idx] = v.im;
    }
    (ore, oim)
}

/// Forward DFT, `F[ky,kx] = Σ x[y,x]·exp(-2πi(ky·y/h + kx·x/w))`.
pub fn dft2(field: &[f64], h: usize, w: usize) -> Spectrum {
    debug_assert_eq!(field.len(), h * w);
    let zeros = vec![0.0; h * w];
    let (r1, i1) = pass(field, &zeros, h, w, true, -1.0);
    let (re, im) = pass(&r1, &i1, h, w, false, -1.0);
    Spectrum { h, w, re, im }
}

/// Real part of the unnormalized inverse transform. This is the adjoint of
/// [`dft2`] restricted to real inputs, which is what backpropagation needs.
pub fn dft2_adjoint_real(spec: &Spectrum) -> Vec<f64> {
    let (r1, i1) = pass(&spec.re, &spec.im, spec.h, spec.w, true, 1.0);
    let (re, _) = pass(&r1, &i1, spec.h, spec.w, false, 1.0);
    re
}

/// Extract channel `c` of an `H × W × C` tensor as a row-major plane.
pub(crate) fn channel_plane(t: &Tensor, c: usize) -> Vec<f64> {
    let ch = t.shape()[2];
    t.data().iter().skip(c).step_by(ch).copied().collect()
}

/// Mean absolute difference between the DFT magnitude spectra of `pred` and
/// `target` (`H × W × C`), averaged over frequencies and channels.
pub fn dft2_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "dft2_l1 expects matching H x W x C, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (h, w, c) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let mut total = 0.0;
    for ch in 0..c {
        let mp = dft2(&channel_plane(pred, ch), h, w).magnitude();
        let mt = dft2(&channel_plane(target, ch), h, w).magnitude();
        total += mp.iter().zip(&mt).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / (h * w * c) as f64)
}
