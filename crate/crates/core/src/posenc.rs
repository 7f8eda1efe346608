//! Positional signals measured in ground meters: 2-D ALiBi attention biases
//! for the encoder, sinusoidal encodings for the decoder, and cyclic
//! encodings of periodic scalar targets.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::geometry::TokenGrid;
use crate::numerics::Tensor;

/// `m(h) = 2^(-8h/H)` for `h = 1..=H`.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / n_heads as f64))
        .collect()
}

/// Additive attention bias over the concatenated tokens of several grids.
#[derive(Debug, Clone)]
pub struct AlibiBias {
    pub slopes: Vec<f64>,
    pub max_patch_m: f64,
    /// Center distance divided by `max_patch_m`, `N × N`.
    scaled_dist: Tensor,
}

impl AlibiBias {
    pub fn n_tokens(&self) -> usize {
        self.scaled_dist.rows()
    }

    pub fn n_heads(&self) -> usize {
        self.slopes.len()
    }

    /// `N × N` bias for head `h` (0-based).
    pub fn head(&self, h: usize) -> Tensor {
        let m = self.slopes[h];
        self.scaled_dist.map(|d| 0.0 - d * m)
    }

    pub fn entry(&self, h: usize, i: usize, j: usize) -> f64 {
        0.0 - self.scaled_dist.at(i, j) * self.slopes[h]
    }

    /// Restrict to a subset of tokens, keeping their order.
    pub fn select(&self, tokens: &[usize]) -> AlibiBias {
        let d = &self.scaled_dist;
        AlibiBias {
            slopes: self.slopes.clone(),
            max_patch_m: self.max_patch_m,
            scaled_dist: Tensor::from_fn(tokens.len(), tokens.len(), |a, b| d.at(tokens[a], tokens[b])),
        }
    }

    /// Reorder tokens: output token `k` is input token `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> AlibiBias {
        self.select(perm)
    }
}

/// Two co-registered grids over a 640 m square: 10 m pixels in 8 px patches
/// (8×8 tokens) and 20 m pixels in 4 px patches (4×4 tokens).
pub fn paired_demo_grids() -> Vec<TokenGrid> {
    vec![
        TokenGrid::new(1, 8, 8, 8, 10.0).expect("static grid"),
        TokenGrid::new(2, 4, 4, 4, 20.0).expect("static grid"),
    ]
}

/// Bias for tokens ordered grid by grid, row-major within each grid.
pub fn build_alibi_bias(grids: &[TokenGrid], n_heads: usize) -> Result<AlibiBias> {
    if grids.is_empty() {
        return Err(Error::InvalidArgument("ALiBi needs at least one grid".into()));
    }
    if n_heads == 0 {
        return Err(Error::InvalidArgument("ALiBi needs at least one head".into()));
    }
    let max_patch_m = grids
        .iter()
        .map(TokenGrid::patch_footprint_m)
        .fold(0.0, f64::max);
    let centers: Vec<(f64, f64)> = grids.iter().flat_map(TokenGrid::patch_centers).collect();
    let n = centers.len();
    let scaled_dist = Tensor::from_fn(n, n, |i, j| {
        let (a, b) = (centers[i], centers[j]);
        (a.0 - b.0).hypot(a.1 - b.1) / max_patch_m
    });
    Ok(AlibiBias {
        slopes: alibi_slopes(n_heads),
        max_patch_m,
        scaled_dist,
    })
}

/// Memoized [`build_alibi_bias`] keyed on the exact grid geometry.
pub fn build_alibi_bias_cached(grids: &[TokenGrid], n_heads: usize) -> Result<Arc<AlibiBias>> {
    type Key = (Vec<(usize, usize, usize, u64, u64, u64)>, usize);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<AlibiBias>>>> = OnceLock::new();
    const CAPACITY: usize = 256;
    let key: Key = (
        grids
            .iter()
            .map(|g| {
                (
                    g.patch_px,
                    g.rows,
                    g.cols,
                    g.gsd_m.to_bits(),
                    g.origin_m.0.to_bits(),
                    g.origin_m.1.to_bits(),
                )
            })
            .collect(),
        n_heads,
    );
    let cache = CACHE.get_or_init(Default::default);
    if let Some(b) = cache.lock().expect("alibi cache poisoned").get(&key) {
        return Ok(b.clone());
    }
    let bias = Arc::new(build_alibi_bias(grids, n_heads)?);
    let mut guard = cache.lock().expect("alibi cache poisoned");
    if guard.len() >= CAPACITY {
        guard.clear();
    }
    guard.insert(key, bias.clone());
    Ok(bias)
}

/// Interleaved `[sin, cos]` pairs for one axis position; length `d`.
fn axis_encoding(g: f64, pos: f64, d: usize, out: &mut Vec<f64>) {
    for i in 0..d / 2 {
        let a = g * (pos + 0.5) / 10000f64.powf(2.0 * i as f64 / d as f64);
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Encoding of one position with per-axis width `d`; returns `2d` values,
/// x-axis block first.
pub fn sinusoidal_at(g: f64, pos_x: f64, pos_y: f64, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * d);
    axis_encoding(g, pos_x, d, &mut out);
    axis_encoding(g, pos_y, d, &mut out);
    out
}

/// GSD-aware sinusoidal encoding of every token of `grid` (`N × 2d`).
///
/// Positions are patch centers in pixels of `grid`, shifted by one half so
/// that `g·(pos + 0.5)` is the center in meters when `g` is the grid GSD.
pub fn gsd_sinusoidal(grid: &TokenGrid, g: f64, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("per-axis width {d} must be even and positive")));
    }
    let rows: Vec<Vec<f64>> = grid
        .patch_centers()
        .into_iter()
        .map(|(x, y)| sinusoidal_at(g, x / grid.gsd_m - 0.5, y / grid.gsd_m - 0.5, d))
        .collect();
    Tensor::from_rows(&rows)
}

/// `[sin(2πx/s) | cos(2πx/s)]`, mapping `B × C` to `B × 2C`.
pub fn cyclic_encoding(x: &Tensor, s: f64) -> Result<Tensor> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("period {s} must be positive")));
    }
    let (b, c) = (x.rows(), x.cols());
    let w = 2.0 * PI / s;
    Ok(Tensor::from_fn(b, 2 * c, |i, j| {
        if j < c {
            (w * x.at(i, j)).sin()
        } else {
            (w * x.at(i, j - c)).cos()
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn slopes() {
        let s = alibi_slopes(8);
        let want: Vec<f64> = (1..=8).map(|k| 0.5f64.powi(k)).collect();
        assert_eq!(s, want);
        assert_eq!(alibi_slopes(1), vec![1.0 / 256.0]);
        let s = alibi_slopes(5);
        assert!(s.windows(2).all(|w| w[0] > w[1] && w[1] > 0.0));
    }

    #[test]
    fn two_group_layout() {
        let bias = build_alibi_bias(&paired_demo_grids(), 8).unwrap();
        assert_eq!(bias.n_tokens(), 80);
        assert_eq!(bias.max_patch_m, 80.0);
        for h in 0..8 {
            let m = bias.head(h);
            for i in 0..80 {
                assert_eq!(m.at(i, i), 0.0);
                for j in 0..80 {
                    assert_eq!(m.at(i, j), m.at(j, i));
                    assert!(m.at(i, j) <= 0.0);
                }
            }
        }
        // horizontally adjacent 10 m tokens, 80 m apart
        assert_eq!(bias.entry(0, 0, 1), -0.5);
        assert_eq!(bias.entry(3, 9, 10), -bias.slopes[3]);
        // token (0,0) of each grid is centered at (40, 40)
        assert_eq!(bias.entry(0, 0, 64), 0.0);
        assert_eq!(bias.entry(5, 1, 65), 0.0);
    }

    #[test]
    fn empty_grid_list_rejected() {
        assert!(build_alibi_bias(&[], 4).is_err());
    }

    #[test]
    fn larger_grid_contains_smaller() {
        let small = build_alibi_bias(&[TokenGrid::new(1, 6, 8, 8, 10.0).unwrap()], 4).unwrap();
        let big = build_alibi_bias(&[TokenGrid::new(1, 6, 16, 16, 10.0).unwrap()], 4).unwrap();
        let idx: Vec<usize> = (0..8).flat_map(|r| (0..8).map(move |c| r * 16 + c)).collect();
        let sub = big.select(&idx);
        for h in 0..4 {
            assert_eq!(sub.head(h), small.head(h));
        }
    }

    #[test]
    fn footprint_scaling_keeps_row_order() {
        let a = build_alibi_bias(&paired_demo_grids(), 2).unwrap();
        let scaled: Vec<TokenGrid> = paired_demo_grids()
            .into_iter()
            .map(|mut g| {
                g.gsd_m *= 3.0;
                g
            })
            .collect();
        let b = build_alibi_bias(&scaled, 2).unwrap();
        // normalized by max(p), so the bias is unchanged up to rounding
        assert!(a.head(0).max_abs_diff(&b.head(0)) < 1e-12);
    }

    #[test]
    fn cached_bias_shared() {
        let a = build_alibi_bias_cached(&paired_demo_grids(), 3).unwrap();
        let b = build_alibi_bias_cached(&paired_demo_grids(), 3).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn sinusoidal_depends_on_product() {
        let a = sinusoidal_at(20.0, 1.75, 1.75, 16);
        let b = sinusoidal_at(10.0, 4.0, 4.0, 16);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoidal_edge_cases() {
        let v = sinusoidal_at(10.0, -0.5, -0.5, 8);
        for pair in v.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        // slowest frequency in the small-angle regime
        let d = 64;
        let v = sinusoidal_at(0.01, 0.0, 0.0, d);
        let i = d / 2 - 1;
        let want = 0.01 * 0.5 / 10000f64.powf(2.0 * i as f64 / d as f64);
        assert!((v[2 * i] - want).abs() < 1e-15);
    }

    #[test]
    fn grid_encoding_shape_and_norm() {
        let grid = TokenGrid::new(1, 4, 3, 5, 20.0).unwrap();
        let pe = gsd_sinusoidal(&grid, 20.0, 8).unwrap();
        assert_eq!(pe.shape(), &[15, 16]);
        for i in 0..15 {
            for pair in pe.row(i).chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
        }
        // first x angle is the center in meters
        assert!((pe.at(1, 0) - (120.0f64).sin()).abs() < 1e-12);
        assert!(gsd_sinusoidal(&grid, 20.0, 7).is_err());
    }

    #[test]
    fn cyclic_cases() {
        let x = Tensor::new(vec![2, 1], vec![3.0, 0.0]).unwrap();
        let e = cyclic_encoding(&x, 12.0).unwrap();
        assert_eq!(e.shape(), &[2, 2]);
        assert!((e.at(0, 0) - 1.0).abs() < 1e-15 && e.at(0, 1).abs() < 1e-15);
        assert_eq!(e.row(1), &[0.0, 1.0]);
        let shifted = cyclic_encoding(&x.map(|v| v + 12.0), 12.0).unwrap();
        assert!(shifted.max_abs_diff(&e) < 1e-12);
    }

    proptest! {
        #[test]
        fn cyclic_pairs_on_unit_circle(v in prop::collection::vec(-1e3f64..1e3, 1..6), s in 0.1f64..400.0) {
            let x = Tensor::new(vec![1, v.len()], v.clone()).unwrap();
            let e = cyclic_encoding(&x, s).unwrap();
            let c = v.len();
            for j in 0..c {
                prop_assert!((e.at(0, j).powi(2) + e.at(0, j + c).powi(2) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn slowest_frequency_separates_products(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let d = 16;
            let period = 2.0 * PI * 10000f64.powf((d - 2) as f64 / d as f64);
            // products g·(pos+0.5) = a·period and b·period with g = 1
            let ea = sinusoidal_at(1.0, a * period - 0.5, 0.0, d);
            let eb = sinusoidal_at(1.0, b * period - 0.5, 0.0, d);
            let diff: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).sum();
            prop_assert!(diff > 0.0);
        }
    }
}
