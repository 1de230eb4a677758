//! Finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, Var};

/// Compare analytic gradients of a scalar-valued tensor function against
/// central finite differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per input tensor (bound in order)
/// and must return the scalar loss. Returns the maximum over all input
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor], track: bool| -> Result<(f64, Option<Vec<Option<Tensor>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if track {
            let grads = tape.backward(loss)?;
            let per_input = vars.iter().map(|&v| grads.get(v).cloned()).collect();
            Ok((value, Some(per_input)))
        } else {
            Ok((value, None))
        }
    };

    let (_, grads) = eval(point, true)?;
    let grads = grads.expect("tracked evaluation returns gradients");

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = point.to_vec();
    for (ti, tensor) in point.iter().enumerate() {
        let analytic = grads[ti].clone().unwrap_or_else(|| {
            let (r, c) = tensor.shape();
            Tensor::zeros(r, c)
        });
        for k in 0..tensor.len() {
            let orig = tensor.data()[k];
            work[ti].data_mut()[k] = orig + h;
            let (up, _) = eval(&work, false)?;
            work[ti].data_mut()[k] = orig - h;
            let (down, _) = eval(&work, false)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    fn scalarize(tape: &mut Tape, x: Var) -> Result<Var> {
        let (r, c) = tape.value(x).shape();
        let left = tape.constant(Tensor::filled(1, r, 1.0));
        let right = tape.constant(Tensor::filled(c, 1, 1.0));
        let xr = tape.matmul(x, right)?;
        tape.matmul(left, xr)
    }

    #[test]
    fn sum_of_squares_is_tight() {
        let point = [Tensor::new(2, 3, vec![0.7, -1.1, 0.3, 2.0, -0.4, 1.6])];
        let err = grad_check(
            |tape, vars| {
                let sq = tape.multiply(vars[0], vars[0])?;
                scalarize(tape, sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn nll_of_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_tensor(&mut rng, 4, 3);
        let err = grad_check(
            |tape, vars| {
                let lp = tape.log_softmax(vars[0]);
                tape.nll_loss(lp, &[0, 2, 1, 1])
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Keep every coordinate at least 10h from the kink at zero.
        let h = 1e-5;
        let mut x = random_tensor(&mut rng, 3, 3);
        for v in x.data_mut() {
            if v.abs() < 10.0 * h {
                *v += 0.01_f64.copysign(*v + 1e-16);
            }
        }
        let err = grad_check(
            |tape, vars| {
                let y = tape.leaky_relu(vars[0], 0.2);
                let sq = tape.multiply(y, y)?;
                scalarize(tape, sq)
            },
            &[x],
            h,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    // Every primitive's vector-Jacobian product, checked at randomized points
    // (kinks excluded by construction where relevant).
    #[test]
    fn primitive_vjps_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        let tol = 1e-4;

        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 4, 2);
        let err = grad_check(
            |tape, v| {
                let c = tape.matmul(v[0], v[1])?;
                scalarize(tape, c)
            },
            &[a.clone(), b],
            h,
        )
        .unwrap();
        assert!(err < tol, "matmul {err}");

        let err = grad_check(
            |tape, v| {
                let t = tape.transpose(v[0]);
                let sq = tape.multiply(t, t)?;
                scalarize(tape, sq)
            },
            &[a.clone()],
            h,
        )
        .unwrap();
        assert!(err < tol, "transpose {err}");

        let bias = random_tensor(&mut rng, 1, 4);
        let err = grad_check(
            |tape, v| {
                let s = tape.add(v[0], v[1])?;
                let sq = tape.multiply(s, s)?;
                scalarize(tape, sq)
            },
            &[a.clone(), bias],
            h,
        )
        .unwrap();
        assert!(err < tol, "add-broadcast {err}");

        let col = random_tensor(&mut rng, 3, 1);
        let err = grad_check(
            |tape, v| {
                let p = tape.multiply(v[0], v[1])?;
                scalarize(tape, p)
            },
            &[a.clone(), col],
            h,
        )
        .unwrap();
        assert!(err < tol, "multiply-broadcast {err}");

        let parts = [random_tensor(&mut rng, 3, 2), random_tensor(&mut rng, 3, 3)];
        let err = grad_check(
            |tape, v| {
                let c = tape.concat(&[v[0], v[1]], 1)?;
                let sq = tape.multiply(c, c)?;
                scalarize(tape, sq)
            },
            &parts,
            h,
        )
        .unwrap();
        assert!(err < tol, "concat {err}");

        // elu / relu / exp / log with kink-free points
        let mut pos = random_tensor(&mut rng, 2, 5);
        for v in pos.data_mut() {
            *v = v.abs() + 0.05;
        }
        let err = grad_check(
            |tape, v| {
                let l = tape.log(v[0]);
                let e = tape.exp(l);
                let u = tape.elu(e);
                let r = tape.relu(u);
                scalarize(tape, r)
            },
            &[pos],
            h,
        )
        .unwrap();
        assert!(err < tol, "elu/relu/exp/log {err}");

        // elu on the negative side
        let mut neg = random_tensor(&mut rng, 2, 5);
        for v in neg.data_mut() {
            *v = -v.abs() - 0.05;
        }
        let err = grad_check(
            |tape, v| {
                let u = tape.elu(v[0]);
                let sq = tape.multiply(u, u)?;
                scalarize(tape, sq)
            },
            &[neg],
            h,
        )
        .unwrap();
        assert!(err < tol, "elu-negative {err}");

        let x = random_tensor(&mut rng, 7, 2);
        let segments = vec![0, 1, 0, 2, 1, 2, 0];
        let err = grad_check(
            |tape, v| {
                let sm = tape.segment_softmax(v[0], &segments, 3)?;
                let sq = tape.multiply(sm, sm)?;
                scalarize(tape, sq)
            },
            &[x.clone()],
            h,
        )
        .unwrap();
        assert!(err < tol, "segment_softmax {err}");

        let err = grad_check(
            |tape, v| {
                let s = tape.segment_sum(v[0], &segments, 3)?;
                let sq = tape.multiply(s, s)?;
                scalarize(tape, sq)
            },
            &[x.clone()],
            h,
        )
        .unwrap();
        assert!(err < tol, "segment_sum {err}");

        let scale = random_tensor(&mut rng, 1, 4);
        let offset = random_tensor(&mut rng, 1, 4);
        let err = grad_check(
            |tape, v| {
                let ln = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let sq = tape.multiply(ln, ln)?;
                scalarize(tape, sq)
            },
            &[a.clone(), scale.clone(), offset.clone()],
            h,
        )
        .unwrap();
        assert!(err < tol, "layer_norm {err}");

        let err = grad_check(
            |tape, v| {
                let (bn, _, _) = tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                let sq = tape.multiply(bn, bn)?;
                scalarize(tape, sq)
            },
            &[a.clone(), scale.clone(), offset.clone()],
            h,
        )
        .unwrap();
        assert!(err < tol, "batch_norm_train {err}");

        let mean = vec![0.1, -0.2, 0.3, 0.0];
        let var = vec![1.1, 0.9, 1.3, 0.7];
        let err = grad_check(
            |tape, v| {
                let bn = tape.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
                let sq = tape.multiply(bn, bn)?;
                scalarize(tape, sq)
            },
            &[a.clone(), scale, offset],
            h,
        )
        .unwrap();
        assert!(err < tol, "batch_norm_eval {err}");

        let ids = vec![2, 0, 1, 0];
        let err = grad_check(
            |tape, v| {
                let g = tape.gather_rows(v[0], &ids)?;
                let sq = tape.multiply(g, g)?;
                scalarize(tape, sq)
            },
            &[a.clone()],
            h,
        )
        .unwrap();
        assert!(err < tol, "gather_rows {err}");

        let err = grad_check(
            |tape, v| {
                let s = tape.scatter_add_rows(v[0], &[1, 0, 1], 2)?;
                let sq = tape.multiply(s, s)?;
                scalarize(tape, sq)
            },
            &[a],
            h,
        )
        .unwrap();
        assert!(err < tol, "scatter_add_rows {err}");
    }
}
