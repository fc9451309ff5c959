use attribank::autodiff::{finite_difference_check, Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn vec_in(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

/// Away from zero so norms and |.| stay smooth under the FD step.
fn vec_away_from_zero(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-2.0f64..-0.1, 0.1f64..2.0], len)
}

fn check(at: Tensor, f: impl Fn(&mut Tape, Var) -> attribank::autodiff::Result<Var>) -> f64 {
    finite_difference_check(f, &at, H).unwrap().max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_central_differences(a in vec_in(6), b in vec_in(12), w in vec_in(8)) {
        let bm = Tensor::matrix(3, 4, b).unwrap();
        let wm = Tensor::matrix(2, 4, w).unwrap();
        let err = check(Tensor::matrix(2, 3, a).unwrap(), |t, x| {
            let bv = t.constant(bm.clone());
            let wv = t.constant(wm.clone());
            let y = t.matmul(x, bv)?;
            let p = t.mul(y, wv)?;
            t.sum(p)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_rows_and_mean_rows_match(a in vec_in(12), w in vec_in(4)) {
        let wv = Tensor::vector(w);
        let err = check(Tensor::matrix(3, 4, a).unwrap(), |t, x| {
            let s = t.softmax_rows(x)?;
            let m = t.mean_rows(s)?;
            let c = t.constant(wv.clone());
            let p = t.mul(m, c)?;
            t.sum(p)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn cosine_and_norm_match(a in vec_away_from_zero(5), b in vec_away_from_zero(5)) {
        let bv = Tensor::vector(b);
        let err = check(Tensor::vector(a), |t, x| {
            let c = t.constant(bv.clone());
            let cs = t.cosine_sim(x, c)?;
            let n = t.l2norm(x)?;
            let u = t.div_scalar(x, n)?;
            let s = t.sum(u)?;
            t.add(cs, s)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn neg_log_prob_matches(logits in vec_in(5), target in 0usize..5) {
        let err = check(Tensor::vector(logits), |t, x| t.neg_log_prob(x, target));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn abs_relu_concat_transpose_match(a in vec_away_from_zero(6)) {
        let err = check(Tensor::matrix(2, 3, a).unwrap(), |t, x| {
            let xt = t.transpose(x)?;
            let r = t.reshape(xt, &[2, 3])?;
            let c = t.concat(&[x, r])?;
            let ab = t.abs(c)?;
            let sh = t.offset(c, 0.05)?;
            let re = t.relu(sh)?;
            let s1 = t.sum(ab)?;
            let s2 = t.sum(re)?;
            let s2 = t.scale(s2, 0.5)?;
            t.add(s1, s2)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(a in vec_in(4), b in vec_in(4), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(a));
        let c = t.constant(Tensor::vector(b));
        let p = t.mul(x, x)?;
        let f = t.sum(p)?;
        let q = t.mul(x, c)?;
        let g = t.sum(q)?;
        let fa = t.scale(f, alpha)?;
        let gb = t.scale(g, beta)?;
        let h = t.add(fa, gb)?;
        let gf = t.backward(f)?.wrt(x).into_data();
        let gg = t.backward(g)?.wrt(x).into_data();
        let gh = t.backward(h)?.wrt(x).into_data();
        for i in 0..4 {
            let want = alpha * gf[i] + beta * gg[i];
            prop_assert!((gh[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(a in vec_in(6), shift in -50.0f64..50.0) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, a.clone()).unwrap());
        let shifted = t.offset(x, shift)?;
        let s0 = t.softmax_rows(x)?;
        let s1 = t.softmax_rows(shifted)?;
        for (u, v) in t.value(s0).data().iter().zip(t.value(s1).data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
        let l0 = t.constant(Tensor::vector(a.clone()));
        let l1 = t.offset(l0, shift)?;
        let n0 = t.neg_log_prob(l0, 2)?;
        let n1 = t.neg_log_prob(l1, 2)?;
        prop_assert!((t.value(n0).item() - t.value(n1).item()).abs() < 1e-10);
    }
}
