use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Grad, Tensor};

/// Relative error floor: components whose magnitude is below this are
/// compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares every pullback component against central finite differences.
///
/// `op` must return one pullback gradient per tensor of `point`, in order.
/// Vector-valued outputs are reduced to a scalar by a fixed pseudo-random
/// projection so every output component participates. Returns the maximum
/// relative error `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(op: F, point: &[Tensor], step: f64) -> f64
where
    F: Fn(&[Tensor]) -> Grad,
{
    let base = op(point);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let proj: Vec<f64> = (0..base.value.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream = Tensor::new(base.value.shape().to_vec(), proj.clone()).expect("shape");
    let analytic = base.backward(&upstream);
    assert_eq!(analytic.len(), point.len(), "pullback arity differs from point arity");

    let project = |xs: &[Tensor]| -> f64 { op(xs).value.data().iter().zip(&proj).map(|(a, b)| a * b).sum() };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = point.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), point[ti].shape(), "gradient shape differs from input shape");
        for j in 0..point[ti].len() {
            let orig = point[ti].data()[j];
            probe[ti].data_mut()[j] = orig + step;
            let up = project(&probe);
            probe[ti].data_mut()[j] = orig - step;
            let down = project(&probe);
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    worst
}
