//! Finite-difference falsification of every backward rule.
//!
//! Each op builds a scalar loss sum(output * fixed_random_weights) so no
//! gradient component can hide behind a symmetric reduction; the analytic
//! input gradient is then compared against central differences (h = 1e-3,
//! relative error <= 1e-3) over 20 seeds on tensors of at most 64 elements.
//! Graphs run at f64, where the difference quotient is numerically clean.

use lczlab_core::gradcheck::GradCheck;
use lczlab_core::tensor::{
    multi_head_attention, AttentionNodes, AttentionParams, BnMode, BnState, NodeId, Padding, Tape,
};
use lczlab_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;

/// Loss head: elementwise-multiply by a fixed weight tensor, then sum.
fn weighted_sum(tape: &mut Tape<f64>, out: NodeId, weights: &Tensor<f64>) -> NodeId {
    let w = tape.leaf(weights.clone());
    let prod = tape.eltwise_mul(out, w).expect("weight shape");
    tape.sum(prod)
}

/// Check d(loss)/d(input) for a graph builder, probing every element.
fn check<B>(shape: &[usize], data: &[f64], build: B)
where
    B: Fn(&mut Tape<f64>, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(shape, data.to_vec()).unwrap().with_grad());
    let loss = build(&mut tape, x);
    assert_eq!(tape.value(loss).numel(), 1, "loss must be scalar");
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).unwrap().to_vec();
    GradCheck::default()
        .verify(data, &analytic, &[], |xs| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(shape, xs.to_vec()).unwrap());
            let loss = build(&mut tape, x);
            tape.value(loss).item()
        })
        .unwrap_or_else(|m| panic!("{m}"));
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Standard normal but bounded away from zero, for kinked ops.
fn randn_off_zero(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, rng);
    for v in &mut t.data {
        if v.abs() < margin {
            *v = margin.copysign(*v + 0.5 * margin);
        }
    }
    t
}

/// Values with distinct gaps inside every 2x2 pool window.
fn pool_safe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    loop {
        let t = Tensor::<f64>::randn(shape, rng);
        let (h, w) = (shape[2], shape[3]);
        let mut ok = true;
        for plane in t.data.chunks(h * w) {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut vals = [
                        plane[2 * oy * w + 2 * ox],
                        plane[2 * oy * w + 2 * ox + 1],
                        plane[(2 * oy + 1) * w + 2 * ox],
                        plane[(2 * oy + 1) * w + 2 * ox + 1],
                    ];
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals[0] - vals[1] < 0.02 {
                        ok = false;
                    }
                }
            }
        }
        if ok {
            return t;
        }
    }
}

#[test]
fn conv2d_same_and_valid_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[1, 2, 5, 5], &mut rng);
        let w = randn(&[2, 2, 3, 3], &mut rng);
        let b = randn(&[2], &mut rng);
        for padding in [Padding::Same, Padding::Valid] {
            let out_hw = if padding == Padding::Same { 5 } else { 3 };
            let weights = randn(&[1, 2, out_hw, out_hw], &mut rng);
            let (w, b, weights) = (w.clone(), b.clone(), weights.clone());
            // input gradient
            check(&[1, 2, 5, 5], &x.data.clone(), move |tape, xn| {
                let wn = tape.leaf(w.clone());
                let bn = tape.leaf(b.clone());
                let y = tape.conv2d(xn, wn, bn, padding).unwrap();
                weighted_sum(tape, y, &weights)
            });
        }
        // kernel and bias gradients
        let x2 = x.clone();
        let weights = randn(&[1, 2, 5, 5], &mut rng);
        let b2 = b.clone();
        check(&[2, 2, 3, 3], &w.data.clone(), move |tape, wn| {
            let xn = tape.leaf(x2.clone());
            let bn = tape.leaf(b2.clone());
            let y = tape.conv2d(xn, wn, bn, Padding::Same).unwrap();
            weighted_sum(tape, y, &weights)
        });
        let x3 = x.clone();
        let w3 = w.clone();
        let weights = randn(&[1, 2, 5, 5], &mut rng);
        check(&[2], &b.data.clone(), move |tape, bn| {
            let xn = tape.leaf(x3.clone());
            let wn = tape.leaf(w3.clone());
            let y = tape.conv2d(xn, wn, bn, Padding::Same).unwrap();
            weighted_sum(tape, y, &weights)
        });
    }
}

#[test]
fn batchnorm_train_and_infer_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = [2, 2, 4, 2];
        let x = randn(&shape, &mut rng);
        let gamma = randn(&[2], &mut rng);
        let beta = randn(&[2], &mut rng);
        let weights = randn(&shape, &mut rng);
        for mode in [BnMode::Train, BnMode::Infer] {
            let (g, be, wt) = (gamma.clone(), beta.clone(), weights.clone());
            check(&shape, &x.data.clone(), move |tape, xn| {
                let gn = tape.leaf(g.clone());
                let bn = tape.leaf(be.clone());
                let mut state = BnState::new(2);
                state.running_mean = vec![0.3, -0.2];
                state.running_var = vec![1.4, 0.6];
                let y = tape.batchnorm2d(xn, gn, bn, &mut state, mode).unwrap();
                weighted_sum(tape, y, &wt)
            });
        }
        // affine parameter gradients (train mode)
        let (x2, b2, wt) = (x.clone(), beta.clone(), weights.clone());
        check(&[2], &gamma.data.clone(), move |tape, gn| {
            let xn = tape.leaf(x2.clone());
            let bn = tape.leaf(b2.clone());
            let mut state = BnState::new(2);
            let y = tape
                .batchnorm2d(xn, gn, bn, &mut state, BnMode::Train)
                .unwrap();
            weighted_sum(tape, y, &wt)
        });
    }
}

#[test]
fn dropout_gradient_through_a_fixed_mask() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = [2, 6, 2, 2];
        let x = randn(&shape, &mut rng);
        let weights = randn(&shape, &mut rng);
        check(&shape, &x.data.clone(), move |tape, xn| {
            // reseeding per evaluation keeps the mask fixed for the
            // difference quotient
            let mut mask_rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let y = tape.spatial_dropout(xn, 0.4, true, &mut mask_rng).unwrap();
            weighted_sum(tape, y, &weights)
        });
    }
}

#[test]
fn relu_and_maxpool_gradients_away_from_kinks() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = randn_off_zero(&[2, 2, 4, 2], &mut rng, 0.05);
        let weights = randn(&[2, 2, 4, 2], &mut rng);
        check(&[2, 2, 4, 2], &x.data.clone(), move |tape, xn| {
            let y = tape.relu(xn);
            weighted_sum(tape, y, &weights)
        });

        let xp = pool_safe(&[1, 2, 4, 4], &mut rng);
        let weights = randn(&[1, 2, 2, 2], &mut rng);
        check(&[1, 2, 4, 4], &xp.data.clone(), move |tape, xn| {
            let y = tape.maxpool2d(xn, 2).unwrap();
            weighted_sum(tape, y, &weights)
        });
    }
}

#[test]
fn pooling_dense_softmax_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = randn(&[2, 3, 3, 3], &mut rng);
        let weights = randn(&[2, 3], &mut rng);
        check(&[2, 3, 3, 3], &x.data.clone(), move |tape, xn| {
            let y = tape.global_avg_pool(xn).unwrap();
            weighted_sum(tape, y, &weights)
        });

        let x = randn(&[4, 5], &mut rng);
        let w = randn(&[5, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        let weights = randn(&[4, 3], &mut rng);
        let (w2, b2, wt) = (w.clone(), b.clone(), weights.clone());
        check(&[4, 5], &x.data.clone(), move |tape, xn| {
            let wn = tape.leaf(w2.clone());
            let bn = tape.leaf(b2.clone());
            let y = tape.dense(xn, wn, bn).unwrap();
            weighted_sum(tape, y, &wt)
        });
        let (x2, b3, wt) = (x.clone(), b.clone(), weights.clone());
        check(&[5, 3], &w.data.clone(), move |tape, wn| {
            let xn = tape.leaf(x2.clone());
            let bn = tape.leaf(b3.clone());
            let y = tape.dense(xn, wn, bn).unwrap();
            weighted_sum(tape, y, &wt)
        });

        let x = randn(&[3, 7], &mut rng);
        let weights = randn(&[3, 7], &mut rng);
        check(&[3, 7], &x.data.clone(), move |tape, xn| {
            let y = tape.softmax(xn);
            weighted_sum(tape, y, &weights)
        });
    }
}

#[test]
fn shape_plumbing_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);

        let x = randn(&[2, 3, 2, 2], &mut rng);
        let other = randn(&[2, 2, 2, 2], &mut rng);
        let weights = randn(&[2, 5, 2, 2], &mut rng);
        let (o2, wt) = (other.clone(), weights.clone());
        check(&[2, 3, 2, 2], &x.data.clone(), move |tape, xn| {
            let on = tape.leaf(o2.clone());
            let y = tape.concat(&[xn, on], 1).unwrap();
            weighted_sum(tape, y, &wt)
        });

        let x = randn(&[2, 4, 2, 2], &mut rng);
        let weights = randn(&[2, 2, 2, 2], &mut rng);
        check(&[2, 4, 2, 2], &x.data.clone(), move |tape, xn| {
            let y = tape.select_channels(xn, &[3, 1]).unwrap();
            weighted_sum(tape, y, &weights)
        });

        let x = randn(&[2, 3, 4], &mut rng);
        let weights = randn(&[4, 2, 3], &mut rng);
        check(&[2, 3, 4], &x.data.clone(), move |tape, xn| {
            let y = tape.permute(xn, &[2, 0, 1]).unwrap();
            weighted_sum(tape, y, &weights)
        });

        let x = randn(&[1, 2, 3, 3], &mut rng);
        let weights = randn(&[1, 2, 6, 6], &mut rng);
        check(&[1, 2, 3, 3], &x.data.clone(), move |tape, xn| {
            let y = tape.upsample_nearest2(xn).unwrap();
            weighted_sum(tape, y, &weights)
        });

        let a = randn(&[2, 3, 4], &mut rng);
        let b = randn(&[2, 4, 2], &mut rng);
        let weights = randn(&[2, 3, 2], &mut rng);
        let (b2, wt) = (b.clone(), weights.clone());
        check(&[2, 3, 4], &a.data.clone(), move |tape, an| {
            let bn = tape.leaf(b2.clone());
            let y = tape.matmul_bat(an, bn).unwrap();
            weighted_sum(tape, y, &wt)
        });
        let (a2, wt) = (a.clone(), weights.clone());
        check(&[2, 4, 2], &b.data.clone(), move |tape, bn| {
            let an = tape.leaf(a2.clone());
            let y = tape.matmul_bat(an, bn).unwrap();
            weighted_sum(tape, y, &wt)
        });

        let x = randn(&[6], &mut rng);
        let y_fixed = randn(&[6], &mut rng);
        let weights = randn(&[6], &mut rng);
        let (y2, wt) = (y_fixed.clone(), weights.clone());
        check(&[6], &x.data.clone(), move |tape, xn| {
            let yn = tape.leaf(y2.clone());
            let m = tape.eltwise_mul(xn, yn).unwrap();
            let a = tape.add(m, yn).unwrap();
            let s = tape.scale(a, -1.7);
            weighted_sum(tape, s, &wt)
        });
    }
}

#[test]
fn cross_entropy_gradient_through_softmax() {
    // Probing raw probabilities would break the row-sum precondition, so the
    // checked surface is the softmax composition, which is also how the loss
    // is consumed by every model head.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let n = 3;
        let k = 5;
        let logits = randn(&[n, k], &mut rng);
        let mut targets = Tensor::<f64>::zeros(&[n, k]);
        for row in 0..n {
            let hot = rng.gen_range(0..k);
            targets.data[row * k + hot] = 1.0;
        }
        check(&[n, k], &logits.data.clone(), move |tape, xn| {
            let p = tape.softmax(xn);
            tape.cross_entropy(p, &targets).unwrap()
        });
    }
}

#[test]
fn attention_gradients_for_self_and_cross() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let (n, l, d, heads) = (1, 4, 8, 2);
        let params = AttentionParams::<f64>::init(d, heads, &mut rng).unwrap();
        let q_src = randn(&[n, l, d], &mut rng);
        let kv_src = randn(&[n, l, d], &mut rng);
        let weights = randn(&[n, l, d], &mut rng);

        let bind = |tape: &mut Tape<f64>, p: &AttentionParams<f64>| AttentionNodes {
            wq: tape.leaf(p.wq.tensor.clone()),
            bq: tape.leaf(p.bq.tensor.clone()),
            wk: tape.leaf(p.wk.tensor.clone()),
            bk: tape.leaf(p.bk.tensor.clone()),
            wv: tape.leaf(p.wv.tensor.clone()),
            bv: tape.leaf(p.bv.tensor.clone()),
            wo: tape.leaf(p.wo.tensor.clone()),
            bo: tape.leaf(p.bo.tensor.clone()),
            heads: p.heads,
        };

        // self-attention: query source gradient
        let (p2, wt) = (params.clone(), weights.clone());
        check(&[n, l, d], &q_src.data.clone(), move |tape, xn| {
            let nodes = bind(tape, &p2);
            let y = multi_head_attention(tape, xn, xn, &nodes).unwrap();
            weighted_sum(tape, y, &wt)
        });

        // cross-attention: gradient w.r.t. the query source
        let (p3, kv2, wt) = (params.clone(), kv_src.clone(), weights.clone());
        check(&[n, l, d], &q_src.data.clone(), move |tape, xn| {
            let nodes = bind(tape, &p3);
            let kvn = tape.leaf(kv2.clone());
            let y = multi_head_attention(tape, xn, kvn, &nodes).unwrap();
            weighted_sum(tape, y, &wt)
        });

        // cross-attention: gradient w.r.t. the key/value source
        let (p4, q2, wt) = (params.clone(), q_src.clone(), weights.clone());
        check(&[n, l, d], &kv_src.data.clone(), move |tape, xn| {
            let nodes = bind(tape, &p4);
            let qn = tape.leaf(q2.clone());
            let y = multi_head_attention(tape, qn, xn, &nodes).unwrap();
            weighted_sum(tape, y, &wt)
        });

        // projection weight gradient
        let (p5, q3, kv3, wt) = (params.clone(), q_src.clone(), kv_src.clone(), weights.clone());
        check(&[d, d], &params.wq.tensor.data.clone(), move |tape, wq| {
            let mut nodes = bind(tape, &p5);
            nodes.wq = wq;
            let qn = tape.leaf(q3.clone());
            let kvn = tape.leaf(kv3.clone());
            let y = multi_head_attention(tape, qn, kvn, &nodes).unwrap();
            weighted_sum(tape, y, &wt)
        });
    }
}
