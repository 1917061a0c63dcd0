//! Small reverse-mode differentiation engine used for training.
//!
//! Training runs in `f64` on a [`Tape`]; trained parameters are exported to
//! `f32` snapshots for inference elsewhere in the crate.

pub mod check;
pub mod checkpoint;
mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{lr_schedule, Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{ParamId, ParamStore, Tensor};


#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape
            .constant(t(vec![3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]))
            .unwrap();
        let a = tape
            .constant(t(vec![3, 2], &[1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 2], &[0., 0.])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape
            .constant(t(vec![2, 3], &[100., -3., 7., 1e-3, 0.5, -40.]))
            .unwrap();
        let y = tape.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reduce_max_unmasked() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 2, 2], &[1., 5., 2., 3.])).unwrap();
        let y = tape.reduce_max(x, &[1., 1.]).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 5.]);
    }

    #[test]
    fn fully_masked_reductions_fail() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 2, 1], &[1., 2.])).unwrap();
        assert!(tape.reduce_max(x, &[0., 0.]).is_err());
        assert!(tape.reduce_mean(x, &[0., 0.]).is_err());
        assert!(tape.reduce_max(x, &[0.5, 1.]).is_err());
    }

    #[test]
    fn squared_norm_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(vec![1, 2], &[1., 2.])).unwrap();
        let xx = tape.matmul_nt(x, x).unwrap();
        let loss = tape.reshape(xx, vec![1]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn masked_rows_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape
            .variable(t(vec![1, 3, 2], &[1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let m = tape.reduce_mean(x, &[1., 0., 1.]).unwrap();
        let z = tape.constant(Tensor::zeros(vec![1, 2])).unwrap();
        let loss = tape.squared_error(m, z).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.wrt(x).unwrap().data();
        assert_eq!(&gx[2..4], &[0.0, 0.0]);
        assert!(gx[0] != 0.0 && gx[4] != 0.0);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(vec![2, 4], &[1., 2., 3., 10., -5., 0.5, 0.25, 8.]))
            .unwrap();
        let g = tape.constant(t(vec![4], &[1.; 4])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![4])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_misuse_is_a_usage_error() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        let foreign = other.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.backward(foreign),
            Err(crate::error::Error::Usage(_))
        ));
        let x = tape.variable(Tensor::scalar(3.0)).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(crate::error::Error::Usage(_))
        ));
        let mut t2 = Tape::new();
        let v = t2.variable(Tensor::zeros(vec![2])).unwrap();
        assert!(t2.backward(v).is_err());
    }

    #[test]
    fn non_finite_values_fault() {
        let mut tape = Tape::new();
        assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
        let x = tape.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(
            tape.scale(x, 1e300),
            Err(crate::error::Error::NonFinite(_))
        ));
    }
}
