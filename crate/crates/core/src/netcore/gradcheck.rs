//! Central finite differences, used as an independent oracle for the
//! hand-written backward passes.

use super::{Mlp, MlpGrads};
use crate::error::{Error, Result};

/// Anything whose parameters can be viewed as one flat vector.
pub trait Parameters {
    fn flatten(&self) -> Vec<f64>;
    fn load_flat(&mut self, flat: &[f64]) -> Result<()>;
}

impl Parameters for Mlp {
    fn flatten(&self) -> Vec<f64> {
        Mlp::flatten(self)
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        Mlp::load_flat(self, flat)
    }
}

/// `(loss(p + eps e_i) - loss(p - eps e_i)) / (2 eps)` for every scalar parameter.
pub fn finite_diff_flat<P, F>(loss_fn: F, params: &P, eps: f64) -> Result<Vec<f64>>
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    if eps <= 0.0 {
        return Err(Error::config("finite difference step must be positive"));
    }
    let base = params.flatten();
    let mut work = params.clone();
    let mut flat = base.clone();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        flat[i] = base[i] + eps;
        work.load_flat(&flat)?;
        let up = loss_fn(&work);
        flat[i] = base[i] - eps;
        work.load_flat(&flat)?;
        let down = loss_fn(&work);
        flat[i] = base[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("loss while perturbing parameter {i}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

pub fn finite_diff_grad<F>(loss_fn: F, params: &Mlp, eps: f64) -> Result<MlpGrads>
where
    F: Fn(&Mlp) -> f64,
{
    let flat = finite_diff_flat(loss_fn, params, eps)?;
    MlpGrads::from_flat(params, &flat)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Batch, Dense};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = Mlp::zeros(2, 3, 1, 1);
        let g = finite_diff_grad(|_| 4.2, &net, 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_of_squares_at_three() {
        let net = Mlp::from_layers(vec![Dense::new(2, 1, vec![3.0, 3.0], vec![3.0]).unwrap()], vec![]).unwrap();
        let g = finite_diff_grad(|p| p.flatten().iter().map(|v| v * v).sum(), &net, 1e-5).unwrap();
        for v in g.iter() {
            assert!((v - 6.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn non_finite_loss_is_error() {
        let net = Mlp::zeros(1, 1, 0, 1);
        assert!(matches!(finite_diff_grad(|_| f64::NAN, &net, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_matches_finite_differences_on_random_nets() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let net = Mlp::new(4, 6, 2, 3, &mut rng);
            let x = [0.3, -0.7, 1.1, 0.05];
            let cot = [0.5, -1.0, 2.0];
            let (g, gx) = net.backward(&x, &cot).unwrap();
            let scalar = |p: &Mlp| {
                let y = p.forward(&x).unwrap();
                y.iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = finite_diff_grad(scalar, &net, 1e-6).unwrap();
            assert!(max_relative_error(&g.flatten(), &fd.flatten(), 1e-3) < 1e-4);

            // input gradient against perturbing the input itself
            let mut fd_x = Vec::new();
            for i in 0..4 {
                let mut up = x;
                let mut dn = x;
                up[i] += 1e-6;
                dn[i] -= 1e-6;
                let f = |v: &[f64]| -> f64 {
                    let y = net.forward_batch(&Batch::from_row(v)).unwrap();
                    y.data().iter().zip(&cot).map(|(a, b)| a * b).sum()
                };
                fd_x.push((f(&up) - f(&dn)) / 2e-6);
            }
            assert!(max_relative_error(&gx, &fd_x, 1e-3) < 1e-4);
        }
    }
}
