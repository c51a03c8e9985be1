use qfsum_core::attention::{local_head, HeadLayout, PromptKv};
use qfsum_core::config::Activation;
use qfsum_core::peft::{lora_apply, padapter_apply, prompt_contribution, Lora, PAdapter};
use qfsum_core::Error;
use qfsum_tensor::{Rng, Tape, Tensor};

fn matmul_t_loop(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[0];
    Tensor::from_fn(&[n, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        (0..k).map(|a| x.at2(i, a) * w.at2(j, a)).sum()
    })
}

#[test]
fn lora_with_zero_b_is_the_frozen_projection() {
    let tape = Tape::<f64>::new();
    let mut rng = Rng::seed(1);
    let x = tape.constant(rng.normal_tensor(&[3, 6], 1.0));
    let w = tape.constant(rng.normal_tensor(&[5, 6], 1.0));
    let l = Lora {
        a: tape.param(rng.normal_tensor(&[2, 6], 1.0)),
        b: tape.param(Tensor::zeros(&[5, 2])),
        scale: 1.0,
    };
    let base = x.matmul_t(w).unwrap().value();
    assert_eq!(lora_apply(x, w, Some(&l)).unwrap().value(), base);
    assert_eq!(lora_apply(x, w, None).unwrap().value(), base);
}

#[test]
fn lora_full_rank_matches_dense_delta() {
    let tape = Tape::<f64>::new();
    let mut rng = Rng::seed(2);
    for _ in 0..10 {
        let (d, k) = (5, 4);
        let r = d.min(k);
        let x = rng.normal_tensor::<f64>(&[3, k], 1.0);
        let w = rng.normal_tensor::<f64>(&[d, k], 1.0);
        let a = rng.normal_tensor::<f64>(&[r, k], 1.0);
        let b = rng.normal_tensor::<f64>(&[d, r], 1.0);
        let scale = 0.5 + rng.uniform();
        let dense = Tensor::from_fn(&[d, k], |idx| {
            let (i, j) = (idx / k, idx % k);
            w.at2(i, j) + scale * (0..r).map(|c| b.at2(i, c) * a.at2(c, j)).sum::<f64>()
        });
        let l = Lora {
            a: tape.constant(a),
            b: tape.constant(b),
            scale,
        };
        let out = lora_apply(tape.constant(x.clone()), tape.constant(w), Some(&l)).unwrap().value();
        assert!(out.max_abs_diff(&matmul_t_loop(&x, &dense)).unwrap() <= 1e-10);
    }
}

#[test]
fn lora_gradients_skip_frozen_weight() {
    let tape = Tape::<f64>::new();
    let mut rng = Rng::seed(3);
    let x = tape.constant(rng.normal_tensor(&[3, 6], 1.0));
    let w = tape.constant(rng.normal_tensor(&[5, 6], 1.0));
    let l = Lora {
        a: tape.param(rng.normal_tensor(&[2, 6], 1.0)),
        b: tape.param(rng.normal_tensor(&[5, 2], 1.0)),
        scale: 1.0,
    };
    let g = lora_apply(x, w, Some(&l)).unwrap().sum().backward().unwrap();
    assert!(g.get(l.a).is_some());
    assert!(g.get(l.b).is_some());
    assert!(g.get(w).is_none());
}

#[test]
fn lora_shape_mismatch() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 6]));
    let w = tape.constant(Tensor::zeros(&[5, 6]));
    let l = Lora {
        a: tape.constant(Tensor::zeros(&[2, 6])),
        b: tape.constant(Tensor::zeros(&[5, 3])),
        scale: 1.0,
    };
    assert!(matches!(lora_apply(x, w, Some(&l)), Err(Error::Config(_))));
}

#[test]
fn padapter_examples() {
    let tape = Tape::<f64>::new();
    let mut rng = Rng::seed(4);
    let h = tape.constant(rng.normal_tensor(&[3, 4], 1.0));
    let ffn = tape.constant(rng.normal_tensor(&[3, 4], 1.0));
    let zero = PAdapter {
        l1: tape.constant(rng.normal_tensor(&[2, 4], 1.0)),
        l2: tape.constant(Tensor::zeros(&[4, 2])),
        act: Activation::Relu,
    };
    assert_eq!(padapter_apply(h, ffn, &zero).unwrap().value(), ffn.value());

    let ident = PAdapter {
        l1: tape.constant(Tensor::eye(4)),
        l2: tape.constant(Tensor::eye(4)),
        act: Activation::Identity,
    };
    let out = padapter_apply(h, ffn, &ident).unwrap().value();
    assert!(out.max_abs_diff(&ffn.value().add(&h.value()).unwrap()).unwrap() <= 1e-15);
}

#[test]
fn padapter_matches_loop_oracle() {
    let tape = Tape::<f64>::new();
    let mut rng = Rng::seed(5);
    for _ in 0..10 {
        let h = rng.normal_tensor::<f64>(&[3, 6], 1.0);
        let f = rng.normal_tensor::<f64>(&[3, 6], 1.0);
        let l1 = rng.normal_tensor::<f64>(&[2, 6], 1.0);
        let l2 = rng.normal_tensor::<f64>(&[6, 2], 1.0);
        let pa = PAdapter {
            l1: tape.constant(l1.clone()),
            l2: tape.constant(l2.clone()),
            act: Activation::Relu,
        };
        let out = padapter_apply(tape.constant(h.clone()), tape.constant(f.clone()), &pa)
            .unwrap()
            .value();
        for i in 0..3 {
            for j in 0..6 {
                let mut acc = f.at2(i, j);
                for c in 0..2 {
                    let inner: f64 = (0..6).map(|a| l1.at2(c, a) * h.at2(i, a)).sum();
                    acc += l2.at2(j, c) * inner.max(0.0);
                }
                assert!((out.at2(i, j) - acc).abs() <= 1e-10);
            }
        }
    }
}

fn head_out(gate: f64, rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>) {
    let tape = Tape::<f64>::new();
    let layout = HeadLayout {
        n_heads: 1,
        d_key: 4,
        d_value: 3,
    };
    let q = tape.constant(rng.normal_tensor(&[3, 4], 1.0));
    let k = tape.constant(rng.normal_tensor(&[3, 4], 1.0));
    let v = tape.constant(rng.normal_tensor(&[3, 3], 1.0));
    let p = PromptKv {
        pk: tape.constant(rng.normal_tensor(&[2, 4], 1.0)),
        pv: tape.constant(rng.normal_tensor(&[2, 3], 1.0)),
        gate: tape.constant(Tensor::full(&[1, 1], gate)),
    };
    let with = local_head(layout, 0, q, k, v, 0, 8, Some(&p)).unwrap().value();
    let without = local_head(layout, 0, q, k, v, 0, 8, None).unwrap().value();
    (with, without)
}

#[test]
fn zero_gate_prompt_is_inert() {
    let mut rng = Rng::seed(6);
    let (with, without) = head_out(0.0, &mut rng);
    assert!(with.max_abs_diff(&without).unwrap() <= 1e-12);
}

#[test]
fn prompt_contribution_grows_with_gate() {
    let tape = Tape::<f64>::new();
    let mut rng = Rng::seed(7);
    let q = tape.constant(rng.normal_tensor(&[3, 4], 1.0));
    let pk = tape.constant(rng.normal_tensor(&[1, 4], 1.0));
    let v = rng.normal_tensor::<f64>(&[1, 3], 1.0);
    let pv = tape.constant(v.clone());
    let mut last = -1.0;
    for g in [0.0, 1.0, 4.0] {
        let c = prompt_contribution(q, pk, pv, tape.constant(Tensor::full(&[1, 1], g)), 0.5)
            .unwrap()
            .value();
        // one prompt row: the softmax is 1, so every row is exactly g·v
        for i in 0..3 {
            for j in 0..3 {
                assert!((c.at2(i, j) - g * v.at2(0, j)).abs() <= 1e-12);
            }
        }
        let n = c.sq_norm();
        assert!(n > last);
        last = n;
    }
}

#[test]
fn prompt_rows_do_not_alter_token_causality() {
    // Changing a later token's key/value leaves earlier rows of a prompted
    // head untouched.
    let tape = Tape::<f64>::new();
    let mut rng = Rng::seed(8);
    let layout = HeadLayout {
        n_heads: 1,
        d_key: 4,
        d_value: 3,
    };
    let q = tape.constant(rng.normal_tensor(&[4, 4], 1.0));
    let k = rng.normal_tensor::<f64>(&[4, 4], 1.0);
    let v = rng.normal_tensor::<f64>(&[4, 3], 1.0);
    let p = PromptKv {
        pk: tape.constant(rng.normal_tensor(&[2, 4], 1.0)),
        pv: tape.constant(rng.normal_tensor(&[2, 3], 1.0)),
        gate: tape.constant(Tensor::full(&[1, 1], 2.0)),
    };
    let a = local_head(layout, 0, q, tape.constant(k.clone()), tape.constant(v.clone()), 0, 8, Some(&p))
        .unwrap()
        .value();
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 0..4 {
        k2.data_mut()[3 * 4 + j] += 5.0;
    }
    for j in 0..3 {
        v2.data_mut()[3 * 3 + j] -= 5.0;
    }
    let b = local_head(layout, 0, q, tape.constant(k2), tape.constant(v2), 0, 8, Some(&p))
        .unwrap()
        .value();
    assert_eq!(a.slice_rows(0, 3).unwrap(), b.slice_rows(0, 3).unwrap());
    assert_ne!(a.slice_rows(3, 4).unwrap(), b.slice_rows(3, 4).unwrap());
}
