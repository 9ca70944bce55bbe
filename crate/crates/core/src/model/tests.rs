use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ops::{self, Activation, BnMode};

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[b, h, w], 1.0, &mut rng)
}

fn small(kind_layers: usize, t: usize, mode: ReadoutMode) -> ModelConfig {
    let mut c = ModelConfig::recurrent(kind_layers, 4, t, mode);
    c.input_shape = (15, 15);
    c.num_neurons = 3;
    c.seed = 7;
    c
}

/// Perturbs normalization state away from the identity so eval mode is exercised.
fn randomize_bn(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // buffers alternate running mean and running variance
    for (i, buf) in model.buffers_mut().into_iter().enumerate() {
        for x in buf.iter_mut() {
            *x = if i % 2 == 1 { rng.gen_range(0.5..1.5) } else { rng.gen_range(-0.3..0.3) };
        }
    }
    for p in model.params_mut() {
        if p.ndim() == 1 {
            for x in p.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
}

#[test]
fn block_layouts() {
    let m = build_model::<f64>(&ModelConfig::feedforward(3, 16)).unwrap();
    assert_eq!(m.blocks.len(), 3);
    let Block::Conv(first) = &m.blocks[0] else { panic!() };
    assert_eq!(first.kernel.shape(), &[16, 1, 9, 9]);
    for b in &m.blocks[1..] {
        let Block::Conv(cb) = b else { panic!() };
        assert_eq!(cb.kernel.shape(), &[16, 16, 3, 3]);
    }
    let r = build_model::<f64>(&ModelConfig::recurrent(2, 16, 4, ReadoutMode::NoAvg)).unwrap();
    assert_eq!(r.recurrent_blocks().count(), 2);
    assert!(r.recurrent_blocks().all(|b| b.bns.len() == 4));
}

#[test]
fn seed_determinism() {
    let c = small(1, 3, ReadoutMode::TwoAvg);
    let a = build_model::<f64>(&c).unwrap();
    let b = build_model::<f64>(&c).unwrap();
    assert_eq!(a, b);
    let mut c2 = c.clone();
    c2.seed += 1;
    assert_ne!(build_model::<f64>(&c2).unwrap(), a);
}

#[test]
fn parameter_counts() {
    let f = build_model::<f64>(&ModelConfig::feedforward(3, 16)).unwrap();
    let r = build_model::<f64>(&ModelConfig::recurrent(1, 16, 3, ReadoutMode::NoAvg)).unwrap();
    let Block::Conv(cb) = &f.blocks[1] else { panic!() };
    assert_eq!(cb.kernel.len(), 2304);
    let rb = r.recurrent_blocks().next().unwrap();
    assert_eq!(rb.ff_kernel.len() + rb.lateral_kernel.len(), 4608);
    for c in [8, 16, 32, 48, 64] {
        for layers in [1, 2] {
            let rc = ModelConfig::recurrent(layers, c, 3, ReadoutMode::TwoAvg);
            let rm = build_model::<f64>(&rc).unwrap();
            let fm = build_model::<f64>(&rc.matched_feedforward()).unwrap();
            assert_eq!(rm.param_count().conv, fm.param_count().conv);
        }
    }
}

#[test]
fn parameter_count_matches_reflection_walk() {
    let cfg = ModelConfig::recurrent(2, 8, 3, ReadoutMode::LateAvg);
    let mut m = build_model::<f64>(&cfg).unwrap();
    let (c, n) = (8, cfg.num_neurons);
    let (hp, wp) = cfg.pooled_shape();
    let bn = 2 * (1 + c + 2 * 3 * c);
    let conv = c * 81 + 2 * 2 * c * c * 9;
    let readout = n * hp * wp + n * c + n;
    let count = m.param_count();
    assert_eq!(count.total, bn + conv + readout);
    assert_eq!(count.excluding_bn, conv + readout);
    assert_eq!(count.conv, conv);
    let walked: usize = m.params_mut().iter().map(|t| t.len()).sum();
    assert_eq!(walked, count.total);
}

#[test]
fn readout_is_rank_one() {
    let m = build_model::<f64>(&small(1, 2, ReadoutMode::NoAvg)).unwrap();
    let w = m.readout.effective_weights(1);
    let s = w.shape().to_vec();
    for c in 0..s[0] {
        for d in 0..s[0] {
            for p in 0..s[1] * s[2] {
                for q in 0..s[1] * s[2] {
                    let at = |ch: usize, i: usize| w.at(&[ch, i / s[2], i % s[2]]);
                    let lhs = at(c, p) * at(d, q);
                    let rhs = at(c, q) * at(d, p);
                    assert!((lhs - rhs).abs() < 1e-15);
                }
            }
        }
    }
}

fn eval_bn(x: &Tensor<f64>, p: &ops::BatchNormParams<f64>) -> Tensor<f64> {
    let mut q = p.clone();
    ops::batchnorm(x, &mut q, BnMode::Eval).unwrap()
}

fn readout_loop(x: &Tensor<f64>, r: &FactorizedReadout<f64>, act: Activation) -> Tensor<f64> {
    let s = x.shape();
    let n = r.bias.len();
    let mut out = Tensor::zeros(&[s[0], n]);
    for b in 0..s[0] {
        for j in 0..n {
            let mut acc = r.bias.data()[j];
            for c in 0..s[1] {
                for y in 0..s[2] {
                    for xx in 0..s[3] {
                        acc += x.at(&[b, c, y, xx]) * r.spatial_mask.at(&[j, y, xx]) * r.feature_weights.at(&[j, c]);
                    }
                }
            }
            out.set(&[b, j], act.apply(acc));
        }
    }
    out
}

#[test]
fn recurrent_forward_matches_manual_chain() {
    for mode in ReadoutMode::ALL {
        let mut m = build_model::<f64>(&small(1, 3, mode)).unwrap();
        randomize_bn(&mut m, 3);
        let x = images(2, 15, 15, 11).reshape(&[2, 1, 15, 15]).unwrap();
        let act = m.config.activation;
        let Block::Conv(first) = &m.blocks[0] else { panic!() };
        let xn = eval_bn(&x, &m.input_bn);
        let y1 = ops::activation(&eval_bn(&ops::conv2d(&xn, &first.kernel, Padding::Valid).unwrap(), &first.bn), act);
        let Block::Recurrent(rb) = &m.blocks[1] else { panic!() };
        let mut ys: Vec<Tensor<f64>> = Vec::new();
        for t in 0..3 {
            let mut pre = ops::conv2d(&y1, &rb.ff_kernel, Padding::Same).unwrap();
            if let Some(prev) = ys.last() {
                let l = ops::conv2d(prev, &rb.lateral_kernel, Padding::Same).unwrap();
                for (a, b) in pre.data_mut().iter_mut().zip(l.data()) {
                    *a += b;
                }
            }
            ys.push(ops::activation(&eval_bn(&pre, &rb.bns[t]), act));
        }
        let head = |y: &Tensor<f64>| readout_loop(&ops::avgpool(y).unwrap(), &m.readout, act);
        let avg = |ts: &[Tensor<f64>]| {
            let mut s = Tensor::zeros(ts[0].shape());
            for t in ts {
                for (a, b) in s.data_mut().iter_mut().zip(t.data()) {
                    *a += b / ts.len() as f64;
                }
            }
            s
        };
        let expected = match mode {
            ReadoutMode::NoAvg => head(&ys[2]),
            ReadoutMode::EarlyAvg => head(&avg(&ys)),
            ReadoutMode::LateAvg => avg(&ys.iter().map(head).collect::<Vec<_>>()),
            ReadoutMode::TwoAvg => avg(&(1..=3).map(|t| head(&avg(&ys[..t]))).collect::<Vec<_>>()),
        };
        let trace = m.infer(&x).unwrap();
        assert!(trace.prediction.max_abs_diff(&expected) < 1e-12, "{mode:?}");
        for (t, y) in ys.iter().enumerate() {
            assert!(trace.layer_outputs[1][t].max_abs_diff(y) < 1e-12);
        }
    }
}

#[test]
fn single_iteration_is_the_chain() {
    for layers in [1, 2] {
        for mode in ReadoutMode::ALL {
            let mut m = build_model::<f64>(&small(layers, 1, mode)).unwrap();
            randomize_bn(&mut m, 5);
            let chain = m.chain_equivalent().unwrap();
            let mp = m.to_multipath(&[]).unwrap();
            let x = images(4, 15, 15, 2);
            let p = m.predict(&x).unwrap();
            assert_eq!(p, chain.predict(&x).unwrap());
            assert_eq!(p, mp.predict(&x).unwrap());
        }
    }
}

#[test]
fn constant_iterations_make_modes_agree() {
    let mut preds = Vec::new();
    for mode in ReadoutMode::ALL {
        let mut m = build_model::<f64>(&small(1, 3, mode)).unwrap();
        for rb in m.recurrent_blocks_mut() {
            rb.lateral_kernel = Tensor::zeros(rb.lateral_kernel.shape());
        }
        preds.push(m.predict(&images(3, 15, 15, 4)).unwrap());
    }
    for p in &preds[1..] {
        assert!(p.max_abs_diff(&preds[0]) < 1e-12);
    }
}

#[test]
fn zero_lateral_multipath_equals_recurrent_for_relu() {
    for layers in [1, 2] {
        for mode in ReadoutMode::ALL {
            let mut cfg = small(layers, 3, mode);
            cfg.activation = Activation::Relu;
            let mut m = build_model::<f64>(&cfg).unwrap();
            for rb in m.recurrent_blocks_mut() {
                rb.lateral_kernel = Tensor::zeros(rb.lateral_kernel.shape());
            }
            let x = images(2, 15, 15, 9);
            let mp = m.to_multipath(&[]).unwrap();
            let d = m.predict(&x).unwrap().max_abs_diff(&mp.predict(&x).unwrap());
            assert!(d < 1e-12, "layers {layers} {mode:?}: {d}");
        }
    }
}

#[test]
fn single_surviving_path_is_a_chain() {
    let m = build_model::<f64>(&small(1, 3, ReadoutMode::NoAvg)).unwrap();
    let mp = m.to_multipath(&[2, 3]).unwrap();
    let mut chain = m.chain_equivalent().unwrap();
    // the surviving length-1 path enters at the last iteration
    let Block::Recurrent(rb) = &m.blocks[1] else { panic!() };
    let Block::Conv(cb) = &mut chain.blocks[1] else { panic!() };
    cb.bn = rb.bns[2].clone();
    let x = images(3, 15, 15, 1);
    assert_eq!(mp.predict(&x).unwrap(), chain.predict(&x).unwrap());
}

#[test]
fn selector_readout() {
    let mut cfg = ModelConfig::feedforward(1, 2);
    cfg.input_shape = (12, 12);
    cfg.num_neurons = 1;
    let mut m = build_model::<f64>(&cfg).unwrap();
    m.readout.spatial_mask = Tensor::zeros(&[1, 1, 1]);
    m.readout.spatial_mask.set(&[0, 0, 0], 1.0);
    m.readout.feature_weights = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
    m.readout.bias = Tensor::from_vec(&[1], vec![0.25]).unwrap();
    let x = images(1, 12, 12, 3);
    let trace = m.infer(&x).unwrap();
    let pooled = ops::avgpool(&trace.readout_inputs[0]).unwrap();
    let expected = Activation::Softplus.apply(pooled.at(&[0, 1, 0, 0]) + 0.25);
    assert!((trace.prediction.at(&[0, 0]) - expected).abs() < 1e-14);
}

#[test]
fn zero_readout_gives_activated_bias() {
    let mut m = build_model::<f64>(&small(1, 2, ReadoutMode::LateAvg)).unwrap();
    m.readout.spatial_mask = Tensor::zeros(m.readout.spatial_mask.shape());
    m.readout.bias = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    let p = m.predict(&images(2, 15, 15, 0)).unwrap();
    for b in 0..2 {
        for (n, bias) in [-1.0, 0.0, 2.0].into_iter().enumerate() {
            assert!((p.at(&[b, n]) - ops::softplus(bias)).abs() < 1e-15);
        }
    }
}

#[test]
fn bn_after_act_first_block() {
    let mut cfg = small(1, 2, ReadoutMode::NoAvg);
    cfg.bn_act_order = BnActOrder::BnAfterAct;
    let mut m = build_model::<f64>(&cfg).unwrap();
    randomize_bn(&mut m, 8);
    let x = images(1, 15, 15, 6).reshape(&[1, 1, 15, 15]).unwrap();
    let Block::Conv(first) = &m.blocks[0] else { panic!() };
    let xn = eval_bn(&x, &m.input_bn);
    let c = ops::conv2d(&xn, &first.kernel, Padding::Valid).unwrap();
    let y1 = eval_bn(&ops::activation(&c, cfg.activation), &first.bn);
    let trace = m.infer(&x).unwrap();
    assert!(trace.layer_outputs[0][0].max_abs_diff(&y1) < 1e-14);
}

#[test]
fn input_shape_checked() {
    let m = build_model::<f64>(&small(1, 2, ReadoutMode::NoAvg)).unwrap();
    assert!(m.predict(&images(1, 16, 15, 0)).is_err());
    let hidden = m.probe(&images(1, 20, 20, 0)).unwrap();
    assert_eq!(hidden[1][1].shape(), &[1, 4, 12, 12]);
}

#[test]
fn train_mode_updates_running_statistics() {
    use crate::autodiff::Graph;
    for kind in [ModelKind::Recurrent, ModelKind::Multipath] {
        let mut m = build_model::<f64>(&small(2, 2, ReadoutMode::TwoAvg)).unwrap();
        if kind == ModelKind::Multipath {
            m = m.to_multipath(&[]).unwrap();
        }
        let before = m.clone();
        let mut g = Graph::new();
        let vars = m.bind(&mut g, true);
        let x = g.constant(images(4, 15, 15, 1).reshape(&[4, 1, 15, 15]).unwrap());
        let pass = m.forward(&mut g, &vars, x, BnMode::Train).unwrap();
        m.apply_bn_updates(&g, &pass.bn_nodes);
        assert_eq!(before.params().len(), m.params().len());
        let changed = before
            .buffers()
            .iter()
            .zip(m.buffers())
            .filter(|((_, a), (_, b))| a != b)
            .count();
        assert!(changed > 0);
        assert!(m.is_finite());
    }
}

#[test]
fn branch_keys_cover_every_state() {
    let cfg = small(2, 3, ReadoutMode::NoAvg);
    let keys = forward::branch_keys(&cfg);
    // layer 1: t paths at each t; layer 2: t(t+1)/2 at each t
    assert_eq!(keys.len(), (1 + 2 + 3) + (1 + 3 + 6));
    assert_eq!(forward::parse_branch_key("l2.e1-3.t5"), (2, 5));
}

#[test]
fn cast_round_trip() {
    let m = build_model::<f64>(&small(1, 2, ReadoutMode::NoAvg)).unwrap();
    let p32 = m.cast::<f32>().predict(&images(1, 15, 15, 0).cast()).unwrap();
    let p64 = m.predict(&images(1, 15, 15, 0)).unwrap();
    assert!(p32.cast::<f64>().max_abs_diff(&p64) < 1e-4);
}
