//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
mod graph;
mod kernels;
mod tensor;

pub use checkpoint::{read_tensors, write_tensors, CHECKPOINT_VERSION};
pub use graph::{Graph, Primitive, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
///
/// Returns the norm measured before clipping. Every tensor must carry a
/// populated, finite gradient.
pub fn clip_global_grad_norm<'a, I>(params: I, max_norm: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let mut grads: Vec<&mut [f64]> = Vec::new();
    for t in params {
        let g = t
            .grad_mut()
            .ok_or_else(|| Error::Graph("parameter has no gradient slot".into()))?;
        grads.push(g);
    }
    let mut sq = 0.0;
    for g in &grads {
        for v in g.iter() {
            if !v.is_finite() {
                return Err(Error::Numerical("non-finite gradient before clipping".into()));
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(g: &[f64]) -> Tensor {
        let mut t = Tensor::from_vec(vec![0.0; g.len()]).with_grad();
        t.accumulate_grad(g).unwrap();
        t
    }

    #[test]
    fn below_threshold_is_untouched() {
        let mut t = with_grad(&[3.0, 4.0]);
        let norm = clip_global_grad_norm([&mut t], 10.0).unwrap();
        assert_eq!(norm, 5.0);
        assert_eq!(t.grad().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn above_threshold_is_rescaled() {
        let mut t = with_grad(&[3.0, 4.0]);
        let norm = clip_global_grad_norm([&mut t], 0.5).unwrap();
        assert_eq!(norm, 5.0);
        let g = t.grad().unwrap();
        assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_untouched() {
        let mut t = with_grad(&[0.0, 0.0]);
        assert_eq!(clip_global_grad_norm([&mut t], 0.5).unwrap(), 0.0);
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn norm_is_joint_over_tensors() {
        let mut a = with_grad(&[3.0]);
        let mut b = with_grad(&[4.0]);
        let norm = clip_global_grad_norm([&mut a, &mut b], 1.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn missing_or_non_finite_gradients_fail() {
        let mut t = Tensor::from_vec(vec![1.0]);
        assert!(clip_global_grad_norm([&mut t], 1.0).is_err());
        let mut t = with_grad(&[f64::NAN]);
        assert!(matches!(clip_global_grad_norm([&mut t], 1.0), Err(Error::Numerical(_))));
    }
}
