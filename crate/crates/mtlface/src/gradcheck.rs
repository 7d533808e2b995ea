//! Central finite-difference gradient checking against the autodiff engine.
//!
//! Checks run in `f64` so that the comparison tolerance reflects the
//! correctness of the backward formulas rather than accumulation roundoff.

use crate::tensor::{Graph, Var};
use ndarray::ArrayD;

/// Builds a scalar loss from named inputs. Called repeatedly with perturbed
/// inputs, so it must be a pure function of them.
pub type LossBuilder = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic input gradients with central finite differences.
///
/// `rel_tol` is applied as `|a - fd| <= rel_tol * max(1, |a|, |fd|)`.
pub fn check_gradients(
    inputs: &[ArrayD<f64>],
    build: &LossBuilder,
    step: f64,
    rel_tol: f64,
) -> GradCheckReport {
    // analytic pass
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| g.leaf(x.clone(), None, true))
        .collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);

    let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|x| g.leaf(x.clone(), None, true))
            .collect();
        let loss = build(&mut g, &vars);
        g.scalar(loss)
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .unwrap_or_else(|| panic!("no gradient for input {i}"));
        let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
        for flat in 0..x.len() {
            let orig = *x.iter().nth(flat).unwrap();
            set_flat(&mut work[i], flat, orig + step);
            let fp = eval(&work);
            set_flat(&mut work[i], flat, orig - step);
            let fm = eval(&work);
            set_flat(&mut work[i], flat, orig);
            let fd = (fp - fm) / (2.0 * step);
            let a = *analytic.iter().nth(flat).unwrap();
            let denom = 1.0f64.max(a.abs()).max(fd.abs());
            let rel = (a - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            assert!(
                rel <= rel_tol,
                "gradient mismatch at input {i} flat {flat}: analytic {a}, fd {fd}, rel {rel}"
            );
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        checked,
    }
}

fn set_flat(arr: &mut ArrayD<f64>, flat: usize, v: f64) {
    *arr.iter_mut().nth(flat).unwrap() = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        check_gradients(
            &[a, b],
            &|g, v| {
                let s = g.add(v[0], v[1]);
                let m = g.mul(s, v[0]);
                let t = g.tanh(m);
                let sq = g.square(t);
                g.mean_all(sq)
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn broadcast_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[2, 3, 4, 4]);
        let b = randn(&mut rng, &[1, 3, 1, 1]);
        check_gradients(
            &[a, b],
            &|g, v| {
                let m = g.mul_b(v[0], v[1]);
                let s = g.add_b(m, v[1]);
                let r = g.sigmoid(s);
                g.mean_all(r)
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn matmul_both_orients() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 2]);
        let c = randn(&mut rng, &[4, 5]);
        check_gradients(
            &[a, b, c],
            &|g, v| {
                let ab = g.matmul(v[0], v[1]);
                let s1 = g.sum_all(ab);
                let ac = g.matmul_tb(v[0], v[2]);
                let sm = g.softmax1(ac);
                let s2 = g.mean_all(sm);
                g.add(s1, s2)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn conv_strides_and_padding() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 3, 7), (1, 0, 1)] {
            let x = randn(&mut rng, &[2, 3, 6, 6]);
            let w = randn(&mut rng, &[4, 3, k, k]);
            check_gradients(
                &[x, w],
                &|g, v| {
                    let y = g.conv2d(v[0], v[1], stride, pad);
                    let a = g.leaky_relu(y, 0.2);
                    g.mean_all(a)
                },
                1e-5,
                1e-6,
            );
        }
    }

    #[test]
    fn norm_pool_resize() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        check_gradients(
            &[x],
            &|g, v| {
                let n = g.instance_norm(v[0], 1e-5);
                let u = g.upsample2x(n);
                let p = g.global_avg_pool(u);
                let sq = g.square(p);
                g.sum_all(sq)
            },
            1e-5,
            1e-6,
        );
        let x = randn(&mut rng, &[2, 4, 3, 3]);
        check_gradients(
            &[x],
            &|g, v| {
                let cm = g.channel_mean(v[0]);
                let cx = g.channel_max(v[0]);
                let cat = g.concat1(&[cm, cx]);
                let r = g.relu(cat);
                g.mean_all(r)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn narrow_softmax_ce() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let bank = randn(&mut rng, &[6, 2, 3, 3]);
        let x = randn(&mut rng, &[1, 2, 4, 4]);
        check_gradients(
            &[bank, x],
            &|g, v| {
                let w = g.narrow0(v[0], 1, 4);
                let y = g.conv2d(v[1], w, 1, 1);
                let p = g.global_avg_pool(y);
                g.cross_entropy(p, &[2])
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn grad_reverse_negates() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 3]);

        let mut g = Graph::<f64>::new();
        let v = g.leaf(x.clone(), None, true);
        let r = g.grad_reverse(v, 1.5);
        assert_eq!(g.value(r), &x, "forward must be identity");
        let sq = g.square(r);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        let got = grads.get(v).unwrap();

        // baseline without the reversal layer
        let mut g2 = Graph::<f64>::new();
        let v2 = g2.leaf(x.clone(), None, true);
        let sq2 = g2.square(v2);
        let loss2 = g2.sum_all(sq2);
        let baseline = g2.backward(loss2);
        let base = baseline.get(v2).unwrap();

        let expect = base.mapv(|v| -1.5 * v);
        let diff = (got - &expect).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }
}
