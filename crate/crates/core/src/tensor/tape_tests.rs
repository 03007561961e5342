use super::*;
use crate::gradcheck::check;
use crate::rng::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, Rng::new(seed).normals(n)).unwrap()
}

/// Random weights for a scalar readout so every output coordinate matters.
fn readout<'t>(tape: &'t Tape, v: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.leaf(&rand_t(&v.shape(), seed));
    Ok(v.mul(&w)?.sum())
}

const TOL: f64 = 1e-5;

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let a = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(&*a.matmul(&b).unwrap().value(), &[3.0, 4.0]);

    let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
    let b = tape.leaf(&t(&[2, 1], &[0.0, 0.0]));
    assert_eq!(&*a.matmul(&b).unwrap().value(), &[0.0]);

    let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    assert_eq!(&*a.matmul(&b).unwrap().value(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]));
    let b = tape.leaf(&Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_rank3_left_operand() {
    let tape = Tape::new();
    let a = tape.leaf(&rand_t(&[2, 3, 4], 1));
    let b = tape.leaf(&rand_t(&[4, 5], 2));
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), vec![2, 3, 5]);
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = |v: &[f64]| tape.leaf(&t(&[v.len()], v)).softmax(0).unwrap().value().to_vec();
    assert_eq!(s(&[0.0, 0.0]), vec![0.5, 0.5]);
    assert_eq!(s(&[1000.0, 1000.0]), vec![0.5, 0.5]);
    let p = s(&[0.0, 3f64.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rows_sum_to_one_on_any_axis() {
    let tape = Tape::new();
    let x = tape.leaf(&rand_t(&[3, 4, 5], 5).reshape(&[3, 4, 5]).unwrap());
    for axis in 0..3 {
        let y = x.scale(30.0).softmax(axis).unwrap();
        let s = y.sum_axis(axis).unwrap();
        for v in s.value().iter() {
            assert!((v - 1.0).abs() <= 1e-12);
        }
        assert!(y.value().iter().all(|&p| p > 0.0));
    }
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let ones = tape.leaf(&Tensor::full(&[3], 1.0));
    let zeros = tape.leaf(&Tensor::zeros(&[3]));
    let c = tape.leaf(&Tensor::full(&[2, 3], 4.2));
    let y = c.layer_norm(Some(&ones), Some(&zeros), 1e-6).unwrap();
    assert!(y.value().iter().all(|&v| v == 0.0));

    let g = tape.leaf(&Tensor::full(&[2], 1.0));
    let b = tape.leaf(&Tensor::zeros(&[2]));
    let x = tape.leaf(&t(&[2], &[1.0, -1.0]));
    let y = x.layer_norm(Some(&g), Some(&b), 0.0).unwrap();
    assert_eq!(&*y.value(), &[1.0, -1.0]);

    let g0 = tape.leaf(&Tensor::zeros(&[4]));
    let bc = tape.leaf(&Tensor::full(&[4], 0.7));
    let x = tape.leaf(&rand_t(&[3, 4], 8));
    let y = x.layer_norm(Some(&g0), Some(&bc), 1e-6).unwrap();
    assert!(y.value().iter().all(|&v| v == 0.7));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let w = tape.leaf(&rand_t(&[2, 3], 1).with_grad());
    let grads = tape.backward(w.sum()).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);

    let tape = Tape::new();
    let w = tape.leaf(&t(&[1], &[3.0]).with_grad());
    let grads = tape.backward(w.mul(&w).unwrap().sum()).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[6.0]);

    let err = check(&[rand_t(&[3, 3], 2), rand_t(&[3, 3], 3)], |_, v| {
        Ok(v[0].matmul(&v[1])?.sum())
    })
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::zeros(&[2]).with_grad());
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    let tape = Tape::new();
    let w = tape.leaf(&t(&[1], &[2.0]).with_grad());
    let y = w.add(&w).unwrap().add(&w.scale(3.0)).unwrap().sum();
    assert_eq!(tape.backward(y).unwrap().get(w).unwrap(), &[5.0]);
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let tape = Tape::new();
    let w = tape.leaf(&t(&[1], &[2.0]).with_grad());
    let c = tape.leaf(&t(&[1], &[5.0]));
    let grads = tape.backward(w.mul(&c).unwrap().sum()).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(w).unwrap(), &[5.0]);
}

#[test]
fn gradcheck_elementwise_and_broadcast() {
    let cases: Vec<(&str, Vec<Tensor>)> = vec![
        ("same", vec![rand_t(&[2, 3, 4], 1), rand_t(&[2, 3, 4], 2)]),
        ("suffix", vec![rand_t(&[2, 3, 4], 3), rand_t(&[4], 4)]),
        ("middle", vec![rand_t(&[2, 3, 4], 5), rand_t(&[2, 1, 4], 6)]),
    ];
    for (name, inputs) in cases {
        for op in 0..3 {
            let err = check(&inputs, |tape, v| {
                let y = match op {
                    0 => v[0].add(&v[1])?,
                    1 => v[0].sub(&v[1])?,
                    _ => v[0].mul(&v[1])?,
                };
                readout(tape, &y, 99)
            })
            .unwrap();
            assert!(err <= TOL, "{name} op {op}: {err}");
        }
    }
}

#[test]
fn gradcheck_unary() {
    let x = rand_t(&[3, 5], 11);
    let pos = Tensor::new(&[3, 5], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    for kind in 0..8 {
        let input = if kind == 5 { pos.clone() } else { x.clone() };
        let err = check(&[input], |tape, v| {
            let y = match kind {
                0 => v[0].gelu(),
                1 => v[0].tanh(),
                2 => v[0].silu(),
                3 => v[0].abs(),
                4 => v[0].exp(),
                5 => v[0].ln(),
                6 => v[0].square(),
                _ => v[0].scale(-2.5).add_scalar(1.0),
            };
            readout(tape, &y, 7)
        })
        .unwrap();
        assert!(err <= TOL, "unary {kind}: {err}");
    }
}

#[test]
fn gradcheck_matmul_and_bmm() {
    let err = check(&[rand_t(&[2, 3, 4], 1), rand_t(&[4, 5], 2)], |tape, v| {
        readout(tape, &v[0].matmul(&v[1])?, 3)
    })
    .unwrap();
    assert!(err <= TOL, "matmul {err}");
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let a = if ta { rand_t(&[2, 4, 3], 4) } else { rand_t(&[2, 3, 4], 4) };
        let b = if tb { rand_t(&[2, 5, 4], 5) } else { rand_t(&[2, 4, 5], 5) };
        let err = check(&[a, b], |tape, v| readout(tape, &v[0].bmm(&v[1], ta, tb)?, 6)).unwrap();
        assert!(err <= TOL, "bmm ta={ta} tb={tb}: {err}");
    }
}

#[test]
fn gradcheck_shape_ops() {
    let x = rand_t(&[2, 3, 4], 21);
    let err = check(&[x.clone()], |tape, v| readout(tape, &v[0].permute(&[2, 0, 1])?, 1)).unwrap();
    assert!(err <= TOL, "permute {err}");
    let err = check(&[x.clone()], |tape, v| readout(tape, &v[0].reshape(&[6, 4])?, 2)).unwrap();
    assert!(err <= TOL, "reshape {err}");
    let err = check(&[x.clone()], |tape, v| readout(tape, &v[0].slice_last(1, 2)?, 3)).unwrap();
    assert!(err <= TOL, "slice {err}");
    for axis in 0..3 {
        let err = check(&[x.clone()], |tape, v| readout(tape, &v[0].sum_axis(axis)?, 4)).unwrap();
        assert!(err <= TOL, "sum_axis {axis}: {err}");
    }
    let err = check(&[x.clone()], |_, v| Ok(v[0].mean())).unwrap();
    assert!(err <= TOL, "mean {err}");
}

#[test]
fn gradcheck_normalizers() {
    let x = rand_t(&[2, 3, 5], 31);
    for axis in 0..3 {
        let err = check(&[x.clone()], |tape, v| readout(tape, &v[0].softmax(axis)?, 5)).unwrap();
        assert!(err <= TOL, "softmax {axis}: {err}");
    }
    let err = check(&[x.clone()], |tape, v| readout(tape, &v[0].log_softmax(), 6)).unwrap();
    assert!(err <= TOL, "log_softmax {err}");
    let err = check(&[x.clone(), rand_t(&[5], 1), rand_t(&[5], 2)], |tape, v| {
        readout(tape, &v[0].layer_norm(Some(&v[1]), Some(&v[2]), 1e-6)?, 7)
    })
    .unwrap();
    assert!(err <= TOL, "layer_norm {err}");
    let err = check(&[x], |tape, v| readout(tape, &v[0].layer_norm(None, None, 1e-6)?, 8)).unwrap();
    assert!(err <= TOL, "layer_norm plain {err}");
}

#[test]
fn gradcheck_indexing() {
    let table = rand_t(&[5, 3], 41);
    let err = check(&[table], |tape, v| readout(tape, &v[0].gather_rows(&[4, 0, 4, 2])?, 1)).unwrap();
    assert!(err <= TOL, "gather {err}");
    let m = rand_t(&[4, 3], 42);
    let err = check(&[m], |tape, v| readout(tape, &v[0].pick_per_row(&[2, 0, 1, 1])?, 2)).unwrap();
    assert!(err <= TOL, "pick {err}");
}

#[test]
fn gather_rejects_out_of_range() {
    let tape = Tape::new();
    let table = tape.leaf(&Tensor::zeros(&[3, 2]));
    assert!(matches!(table.gather_rows(&[3]), Err(Error::Argument(_))));
}
