//! Central-difference gradient verification.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences with step `h`, returning the maximum over elements of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let tracked = x.clone().with_requires_grad(true);
    let v = tape.leaf(&tracked);
    let loss = f(&mut tape, v)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::usage(
            "grad_check requires a scalar-valued function",
        ));
    }
    tape.backward(loss)?;
    let g_ad = tape
        .grad(v)
        .ok_or_else(|| Error::usage("function does not depend on its input"))?
        .to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let pv = t.leaf(&probe);
        let out = f(&mut t, pv)?;
        Ok(t.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let fp = eval(&data)?;
        data[i] = orig - h;
        let fm = eval(&data)?;
        data[i] = orig;
        let g_fd = (fp - fm) / (2.0 * h);
        let denom = (g_ad[i].abs() + g_fd.abs()).max(1e-8);
        worst = worst.max((g_ad[i] - g_fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_matches_analytic_gradient() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn conv_sigmoid_mse_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[1, 8, 8], -1.0, 1.0, &mut rng);
        let kernel = Tensor::rand_uniform(&[2, 1, 3, 3], -0.5, 0.5, &mut rng);
        let bias = Tensor::rand_uniform(&[2], -0.1, 0.1, &mut rng);
        let target = Tensor::rand_uniform(&[2, 6, 6], 0.0, 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let k = t.leaf(&kernel);
                let b = t.leaf(&bias);
                let y = t.conv2d(v, k, Some(b), 1, 0)?;
                let a = t.activate(y, Activation::Sigmoid);
                let tv = t.leaf(&target);
                t.mse(a, tv)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let res = grad_check(|t, v| t.add(v, v), &x, 1e-4);
        assert!(matches!(res, Err(Error::Usage(_))));
    }

    #[test]
    fn random_dense_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::rand_uniform(&[3, 5], -0.8, 0.8, &mut rng);
        let b = Tensor::rand_uniform(&[3], -0.2, 0.2, &mut rng);
        for trial in 0..5 {
            let x = Tensor::rand_uniform(&[5], -1.0, 1.0, &mut rng);
            let err = grad_check(
                |t, v| {
                    let wv = t.leaf(&w);
                    let bv = t.leaf(&b);
                    let y = t.dense(v, wv, bv)?;
                    let a = t.activate(y, Activation::Tanh);
                    Ok(t.mean(a))
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-6, "trial {trial}: relative error {err}");
        }
        let _ = rng.gen::<f64>();
    }
}
