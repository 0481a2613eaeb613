//! Dense kernels shared by the direct encoder functions and the tape.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{Array2, ArrayView2, Axis, Zip};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Given `y = softmax(x)` row-wise and `dy`, return `dx`.
pub fn softmax_rows_backward(y: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.raw_dim());
    Zip::from(dx.rows_mut()).and(y.rows()).and(dy.rows()).for_each(|mut dx, y, dy| {
        let dot = y.dot(&dy);
        Zip::from(&mut dx).and(&y).and(&dy).for_each(|d, &yv, &g| *d = yv * (g - dot));
    });
    dx
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Vec<f64>,
}

/// `(x − mean)/sqrt(var + eps)` per row, population variance.
pub fn normalize_rows(x: ArrayView2<f64>, eps: f64) -> LayerNormCache {
    let p = x.ncols() as f64;
    let mut normalized = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in normalized.rows_mut() {
        let mean = row.sum() / p;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / p;
        let inv = 1.0 / (var + eps).sqrt();
        row *= inv;
        inv_std.push(inv);
    }
    LayerNormCache { normalized, inv_std }
}

/// `gamma`, `beta` are `1 × P` rows.
pub fn layer_norm(x: ArrayView2<f64>, gamma: ArrayView2<f64>, beta: ArrayView2<f64>, eps: f64) -> Array2<f64> {
    let cache = normalize_rows(x, eps);
    cache.normalized * gamma + beta
}

pub struct LayerNormGrads {
    pub dx: Array2<f64>,
    pub dgamma: Array2<f64>,
    pub dbeta: Array2<f64>,
}

pub fn layer_norm_backward(cache: &LayerNormCache, gamma: ArrayView2<f64>, dy: ArrayView2<f64>) -> LayerNormGrads {
    let p = dy.ncols() as f64;
    let dgamma = (&cache.normalized * &dy).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let g = dxhat.row(i);
        let xh = cache.normalized.row(i);
        let mean_g = g.sum() / p;
        let mean_gx = g.dot(&xh) / p;
        let inv = cache.inv_std[i];
        Zip::from(&mut row).and(&g).and(&xh).for_each(|d, &gv, &xv| *d = inv * (gv - mean_g - xv * mean_gx));
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        // Φ(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.2, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let y = softmax_rows(array![[1000.0, 1000.0], [0.0, -1e9], [1.0, 2.0]].view());
        assert_eq!(y.row(0).to_vec(), vec![0.5, 0.5]);
        assert_eq!(y.row(1).to_vec(), vec![1.0, 0.0]);
        assert!((y.row(2).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_basics() {
        let one = array![[1.0, 1.0]];
        let zero = array![[0.0, 0.0]];
        let c = layer_norm(array![[3.0, 3.0, 3.0]].view(), array![[1.0, 1.0, 1.0]].view(), array![[0.0, 0.0, 0.0]].view(), 1e-6);
        assert!(c.iter().all(|&v| v == 0.0));
        let y = layer_norm(array![[1.0, -1.0]].view(), one.view(), zero.view(), 1e-300);
        assert_eq!(y, array![[1.0, -1.0]]);
    }
}
