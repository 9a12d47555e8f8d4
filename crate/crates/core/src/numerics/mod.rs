//! Dense `f64` matrices and a small reverse-mode autodiff graph.

mod graph;
mod matrix;
mod param;

pub use graph::{
    cosine_matrix, gelu, sigmoid, sigmoid_matrix, softmax_rows, ste_sign_forward, Gradients, Graph, NodeId, SteMode,
};
pub(crate) use graph::log_sum_exp;
pub use matrix::Matrix;
pub use param::{Binder, Param};

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn finite_diff(mut f: impl FnMut(&Matrix) -> f64, theta: &Matrix, h: f64) -> Matrix {
    let mut probe = theta.clone();
    let mut out = Matrix::zeros(theta.rows(), theta.cols());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let theta = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 5.5]]).unwrap();
        let g = finite_diff(|m| m.sum(), &theta, 1e-3);
        assert!(g.max_abs_diff(&Matrix::filled(2, 2, 1.0)) < 1e-9);
    }

    #[test]
    fn finite_diff_of_half_norm() {
        let g = finite_diff(|m| 0.5 * m.sum_squares(), &Matrix::scalar(3.0), 1e-3);
        assert!((g.get(0, 0) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_of_quadratic_form() {
        let a = Matrix::from_rows(&[vec![2.0, -1.0, 0.5], vec![0.0, 1.0, 3.0], vec![4.0, 0.2, -2.0]]).unwrap();
        let theta = Matrix::column_vector(&[0.7, -1.2, 0.4]);
        let quad = |t: &Matrix| t.transpose().matmul(&a).unwrap().matmul(t).unwrap().get(0, 0);
        let numeric = finite_diff(quad, &theta, 1e-3);
        let sym = a.zip_map(&a.transpose(), |x, y| x + y);
        let analytic = sym.matmul(&theta).unwrap();
        assert!(numeric.max_abs_diff(&analytic) < 1e-5);
    }
}
