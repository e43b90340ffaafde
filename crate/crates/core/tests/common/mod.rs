//! Independent oracles shared by the integration tests. These deliberately
//! avoid the library's recursion path: the gradient below materializes the
//! full Jacobian chain product with dense matrices.

use ndarray::Array2;

use icgd_core::activation::Activation;
use icgd_core::network::{forward_all, Dataset, NetworkParams};

/// Gradient via the dense chain product
/// A_i(j) = (R(N-1) V_N ... R(j-1) [I (x) p(j-1)^T])^T u,
/// stacked over layers and averaged with the 1/2n prefactor.
#[allow(dead_code)] // each test binary compiles its own copy of this module
pub fn chain_product_gradient(
    params: &NetworkParams,
    act: Activation,
    data: &Dataset,
) -> Vec<f64> {
    let shape = params.shape;
    let depth = shape.depth;
    let offsets = shape.layer_offsets();
    let mut grad = vec![0.0; shape.param_count()];
    for (x, y) in &data.examples {
        let p = forward_all(params, act, x).expect("forward");
        // R(j) = diag(r'(v_{j+1,k}^T p(j)))
        let r_mats: Vec<Array2<f64>> = (0..depth)
            .map(|j| {
                let width = shape.layer_width(j + 1);
                let mut m = Array2::zeros((width, width));
                for k in 0..width {
                    let z: f64 = params
                        .row(j + 1, k)
                        .iter()
                        .zip(&p[j])
                        .map(|(a, b)| a * b)
                        .sum();
                    m[(k, k)] = act.derivative(z);
                }
                m
            })
            .collect();
        let v_mats: Vec<Array2<f64>> = (1..=depth)
            .map(|j| {
                let rows = shape.layer_width(j);
                let cols = shape.row_len(j);
                let mut m = Array2::zeros((rows, cols));
                for k in 0..rows {
                    for (c, v) in params.row(j, k).iter().enumerate() {
                        m[(k, c)] = *v;
                    }
                }
                m
            })
            .collect();
        let u: Vec<f64> = p[depth].iter().zip(y).map(|(t, yi)| 2.0 * (t - yi)).collect();
        let u = ndarray::Array1::from(u);
        for j in 1..=depth {
            let width = shape.layer_width(j);
            let prev_len = p[j - 1].len();
            // [I (x) p(j-1)^T]: width x (width * prev_len)
            let mut kron = Array2::zeros((width, width * prev_len));
            for k in 0..width {
                for (c, v) in p[j - 1].iter().enumerate() {
                    kron[(k, k * prev_len + c)] = *v;
                }
            }
            // J = R(N-1) V_N ... R(j-1) [I (x) p(j-1)^T]
            let mut jac = r_mats[j - 1].dot(&kron);
            for jj in j..depth {
                jac = r_mats[jj].dot(&v_mats[jj].dot(&jac));
            }
            let block = jac.t().dot(&u);
            let base = offsets[j - 1];
            for (idx, v) in block.iter().enumerate() {
                grad[base + idx] += v;
            }
        }
    }
    let inv = 1.0 / (2.0 * data.len() as f64);
    for g in &mut grad {
        *g *= inv;
    }
    grad
}
