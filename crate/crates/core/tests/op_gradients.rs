//! Central-difference checks of every differentiable tape op on random inputs.

use pmae_core::tensor::{grad_check, Tape, Var};
use pmae_core::{Result, Tensor};
use proptest::prelude::*;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

/// Fixed weights so the scalar output depends on every coordinate differently.
fn weights(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i * 7919) % 13) as f64 / 6.0 - 1.0)
}

fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = t.constant(weights(&shape));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check(
    x: &Tensor,
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> std::result::Result<(), TestCaseError> {
    let r = grad_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y)
        },
        x,
        EPS,
    )
    .unwrap();
    prop_assert!(
        r.max_rel_err < TOL || (r.analytic - r.numeric).abs() < 1e-8,
        "relative error {:e} at {} (analytic {}, numeric {})",
        r.max_rel_err,
        r.worst_index,
        r.analytic,
        r.numeric
    );
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise(x in tensor(vec![3, 4])) {
        check(&x, |t, v| t.gelu(v))?;
        check(&x, |t, v| t.exp(v))?;
        check(&x, |t, v| t.square(v))?;
        check(&x, |t, v| { let s = t.square(v)?; let s = t.add_scalar(s, 0.5)?; t.sqrt(s) })?;
        check(&x, |t, v| { let s = t.square(v)?; let s = t.add_scalar(s, 0.5)?; t.log(s) })?;
        check(&x, |t, v| { let a = t.scale(v, -1.5)?; let b = t.neg(v)?; let c = t.mul(a, v)?; t.sub(c, b) })?;
    }

    #[test]
    fn normalizers(x in tensor(vec![2, 3, 5])) {
        check(&x, |t, v| t.softmax(v))?;
        check(&x, |t, v| t.log_softmax(v))?;
        check(&x, |t, v| t.layer_norm(v, 1e-5))?;
    }

    #[test]
    fn products(x in tensor(vec![2, 3, 4]), w in tensor(vec![4, 5]), b in tensor(vec![5])) {
        check(&x, |t, v| { let w = t.constant(w.clone()); t.matmul(v, w) })?;
        check(&w, |t, v| { let x = t.constant(x.clone()); t.matmul(x, v) })?;
        check(&b, |t, v| { let x = t.constant(x.clone()); let w = t.constant(w.clone()); t.linear(x, w, v) })?;
        check(&x, |t, v| { let vt = t.transpose(v)?; t.bmm(v, vt) })?;
    }

    #[test]
    fn shape_ops(x in tensor(vec![2, 4, 3])) {
        check(&x, |t, v| t.permute(v, &[2, 0, 1]))?;
        check(&x, |t, v| { let a = t.slice(v, 1, 1, 2)?; let b = t.slice(v, 1, 0, 1)?; t.concat(&[a, b, a], 1) })?;
        check(&x, |t, v| t.sum_axis(v, 1))?;
        check(&x, |t, v| t.mean_axis(v, 2))?;
        check(&x, |t, v| { let r = t.reshape(v, &[8, 3])?; t.expand(r, &[2]) })?;
        let index = vec![vec![3, 0], vec![1, 2]];
        check(&x, |t, v| { let g = t.gather_rows(v, &index)?; t.scatter_rows(g, &index, 5) })?;
    }
}
