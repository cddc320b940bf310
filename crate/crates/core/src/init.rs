//! Seeded parameter initializers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform in `[-1/sqrt(fan), 1/sqrt(fan)]`.
pub fn uniform_scaled<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Random orthogonal `n x n` matrix: Q of the QR factorization of a Gaussian
/// matrix, with column signs fixed so the draw is Haar distributed.
pub fn orthogonal<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor<T> {
    let gaussian = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut *rng));
    let qr = gaussian.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let data = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| T::lit(q[(i, j)]))
        .collect();
    Tensor::matrix(n, n, data).expect("n x n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Tensor<f64> = orthogonal(6, &mut rng);
        let qtq = q.transpose().unwrap().matmul(&q).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(6)) < 1e-12);
    }

    #[test]
    fn uniform_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Tensor<f64> = uniform_scaled(&[16, 16], 16, &mut rng);
        assert!(w.norm_inf() <= 0.25);
    }
}
