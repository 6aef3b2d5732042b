//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numkernel::graph::{Graph, NodeId};
use crate::scalar::Real;

/// Builds a scalar loss from a flat parameter vector.
///
/// The builder returns the loss node and the leaves that hold `theta`, in an
/// order whose row-major concatenation reproduces `theta` exactly.
pub trait LossBuilder<T> {
    fn build(&self, graph: &mut Graph<T>, theta: &[T]) -> Result<(NodeId, Vec<NodeId>)>;
}

impl<T, F> LossBuilder<T> for F
where
    F: Fn(&mut Graph<T>, &[T]) -> Result<(NodeId, Vec<NodeId>)>,
{
    fn build(&self, graph: &mut Graph<T>, theta: &[T]) -> Result<(NodeId, Vec<NodeId>)> {
        self(graph, theta)
    }
}

fn loss_at<T: Real>(build: &impl LossBuilder<T>, theta: &[T]) -> Result<T> {
    let mut g = Graph::new();
    let (loss, _) = build.build(&mut g, theta)?;
    Ok(g.value(loss).item())
}

/// Reverse-mode gradient of the builder's loss at `theta`.
pub fn analytic_gradient<T: Real>(build: &impl LossBuilder<T>, theta: &[T]) -> Result<(T, Vec<T>)> {
    let mut g = Graph::new();
    let (loss, leaves) = build.build(&mut g, theta)?;
    g.backward(loss)?;
    let mut grad = Vec::with_capacity(theta.len());
    for leaf in leaves {
        match g.grad(leaf) {
            Some(t) => grad.extend_from_slice(t.data()),
            None => grad.extend(std::iter::repeat_n(T::zero(), g.value(leaf).len())),
        }
    }
    if grad.len() != theta.len() {
        return Err(Error::Oracle(format!(
            "builder leaves hold {} values but theta has {}",
            grad.len(),
            theta.len()
        )));
    }
    Ok((g.value(loss).item(), grad))
}

/// Max over coordinates of `|analytic − fd| / max(1, |analytic|, |fd|)`, where
/// `fd = (L(θ + h·eᵢ) − L(θ − h·eᵢ)) / 2h`.
///
/// Fails with [`Error::Oracle`] when two builds at the same `theta` disagree.
pub fn check_gradient<T: Real>(build: impl LossBuilder<T>, theta: &[T], h: T) -> Result<T> {
    if h <= T::zero() {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let (l0, analytic) = analytic_gradient(&build, theta)?;
    let l1 = loss_at(&build, theta)?;
    if l0.bits() != l1.bits() {
        return Err(Error::Oracle(format!(
            "loss builder is not deterministic: {l0} vs {l1}"
        )));
    }
    let two_h = h + h;
    let mut worst = T::zero();
    let mut probe = theta.to_vec();
    for (i, &a) in analytic.iter().enumerate() {
        probe[i] = theta[i] + h;
        let up = loss_at(&build, &probe)?;
        probe[i] = theta[i] - h;
        let down = loss_at(&build, &probe)?;
        probe[i] = theta[i];
        let fd = (up - down) / two_h;
        let denom = T::one().max(a.abs()).max(fd.abs());
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor2;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares() {
        let err = check_gradient(
            |g: &mut Graph<f64>, th: &[f64]| {
                let x = g.param(Tensor2::row_vector(th));
                let y = g.square(x)?;
                Ok((g.sum(y)?, vec![x]))
            },
            &[1.0, 2.0],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let err = check_gradient(
            |g: &mut Graph<f64>, th: &[f64]| {
                let x = g.param(Tensor2::row_vector(th));
                let c = g.scalar(3.0);
                Ok((g.sum(c)?, vec![x]))
            },
            &[0.5, -0.5, 2.0],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nondeterministic_builder_is_detected() {
        let calls = Cell::new(0.0);
        let err = check_gradient(
            |g: &mut Graph<f64>, th: &[f64]| {
                calls.set(calls.get() + 1.0);
                let x = g.param(Tensor2::row_vector(th));
                let c = g.scalar(calls.get());
                let y = g.mul(x, c)?;
                Ok((g.sum(y)?, vec![x]))
            },
            &[1.0],
            1e-4,
        );
        assert!(matches!(err, Err(Error::Oracle(_))));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let r = check_gradient(
            |g: &mut Graph<f64>, th: &[f64]| {
                let x = g.param(Tensor2::row_vector(th));
                Ok((g.sum(x)?, vec![x]))
            },
            &[1.0],
            0.0,
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
