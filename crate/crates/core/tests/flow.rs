mod common;

use anchorflow::datasets::{gen_2d, ToyDistribution, ToyKind};
use anchorflow::flow::*;
use anchorflow::metrics::sc_residual;
use anchorflow::rng::SeededRng;
use anchorflow::schedule::{NoiseSchedule, StepSampler};
use anchorflow::tensor::{grad_check, Graph, Tensor};
use common::{close, Analytic, Field};

fn linear() -> NoiseSchedule {
    NoiseSchedule::new(1000, 1.0).unwrap()
}

fn small_net(dt_embed: bool, seed: u64) -> VelocityNet {
    let cfg = NetConfig { widths: vec![8, 8], emb_dim: 8, dt_embed };
    VelocityNet::new(cfg, &[2], 1000, &mut SeededRng::new(seed)).unwrap()
}

#[test]
fn interpolate_examples() {
    let mut rng = SeededRng::new(0);
    let x0 = rng.normal_tensor([3, 2]);
    let x1 = rng.normal_tensor([3, 2]);
    let u = x1.sub(&x0).unwrap();
    assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), (x0.clone(), u.clone()));
    assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), (x1.clone(), u));
    let (xt, ut) = interpolate(&Tensor::zeros([1, 1]), &Tensor::full([1, 1], 2.0), 0.5).unwrap();
    assert_eq!((xt.data()[0], ut.data()[0]), (1.0, 2.0));
    assert!(interpolate(&x0, &Tensor::zeros([2, 2]), 0.5).is_err());
}

fn fm_value<M: VelocityModel>(model: &M, x0: &Tensor, x1: &Tensor, t: &[usize]) -> f64 {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let l = fm_loss_at(&mut g, model, &p, &NoiseSchedule::default(), x0, x1, None, t).unwrap();
    g.scalar(l)
}

#[test]
fn fm_loss_oracles() {
    let mut rng = SeededRng::new(1);
    // quarter-integer values keep x1 - x0 exact
    let x0 = rng.normal_tensor([5, 2]).map(|v| (v * 4.0).round() / 4.0);
    let x1 = x0.map(|v| v + 0.75);
    let t = [1, 250, 500, 999, 1000];
    assert_eq!(fm_value(&Analytic::new(Field::Constant(0.75), &[2], 1000), &x0, &x1, &t), 0.0);

    let x1 = rng.normal_tensor([5, 2]);
    let zero = fm_value(&Analytic::new(Field::Constant(0.0), &[2], 1000), &x0, &x1, &t);
    let direct: f64 = (0..5)
        .map(|b| x0.row(b).iter().zip(x1.row(b)).map(|(a, c)| (c - a) * (c - a)).sum::<f64>())
        .sum::<f64>()
        / 5.0;
    assert!(close(zero, direct, 1e-12));

    let net = small_net(true, 2);
    assert!(fm_value(&net, &x0, &x1, &t) >= 0.0);
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, false);
    let empty = Tensor::zeros([0, 2]);
    assert!(fm_loss(&mut g, &net, &p, &NoiseSchedule::default(), &empty, &empty, None, &mut rng).is_err());
}

#[test]
fn fm_loss_uses_the_zero_step_field() {
    let sched = NoiseSchedule::default();
    let net = small_net(true, 3);
    let mut rng = SeededRng::new(4);
    let x0 = rng.normal_tensor([4, 2]);
    let x1 = rng.normal_tensor([4, 2]);
    let t = [10, 400, 700, 1000];
    let xt = noisy_states(&sched, &x0, &x1, &t).unwrap();
    let v = net.predict(&xt, &t, &[0; 4], None).unwrap();
    let target = x1.sub(&x0).unwrap();
    let by_hand = v.sub(&target).unwrap().sq_norm() / 4.0;
    assert!(close(fm_value(&net, &x0, &x1, &t), by_hand, 1e-12));

    // one Euler step from pure noise is x + sigma(N) * s(x, N, 0)
    let mut r1 = SeededRng::new(9);
    let out = sample_euler(&net, 1, &sched, 3, &mut r1, None).unwrap();
    let mut r2 = SeededRng::new(9);
    let x = r2.normal_tensor([3, 2]);
    let v = net.predict(&x, &[1000; 3], &[0; 3], None).unwrap();
    let expect = x.zip_map(&v, |a, b| a + b).unwrap();
    assert_eq!(out, expect);
}

#[test]
fn shortcut_step_examples() {
    let sched = linear();
    let x = Tensor::zeros([1, 2]);
    let two = Analytic::new(Field::Constant(2.0), &[2], 1000);
    assert_eq!(shortcut_step(&two, &sched, &x, &[1000], &[0], None).unwrap(), x);
    let half = shortcut_step(&two, &sched, &x, &[1000], &[500], None).unwrap();
    assert_eq!(half.data(), &[1.0, 1.0]);
    let x = Tensor::from_vec(vec![0.5, -1.0]).reshape([1, 2]).unwrap();
    let v = Analytic::new(Field::Constant(-0.25), &[2], 1000);
    let full = shortcut_step(&v, &NoiseSchedule::default(), &x, &[1000], &[1000], None).unwrap();
    assert_eq!(full.data(), &[0.25, -1.25]);
    assert!(shortcut_step(&v, &sched, &x, &[10], &[11], None).is_err());
}

fn target_of<M: VelocityModel>(model: &M, sched: &NoiseSchedule, x: &Tensor, t: &[usize], d: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = consistency_target(&mut g, model, &p, sched, xv, t, d, None).unwrap();
    g.value(out).clone()
}

#[test]
fn consistency_target_examples() {
    let mut rng = SeededRng::new(5);
    let x = rng.normal_tensor([3, 2]);
    let c = Analytic::new(Field::Constant(1.3), &[2], 1000);
    let tgt = target_of(&c, &NoiseSchedule::default(), &x, &[800, 600, 2], &[400, 1, 1]);
    assert!(tgt.data().iter().all(|&v| close(v, 1.3, 1e-15)));

    // linear-in-index field under a linear schedule: (T - dT/2) / N
    let idx = Analytic::new(Field::Index, &[2], 1000);
    for (t, d) in [(800, 400), (700, 175), (500, 1), (1000, 500)] {
        let tgt = target_of(&idx, &linear(), &x.gather_rows(&[0]), &[t], &[d]);
        let expect = (t as f64 - d as f64 / 2.0) / 1000.0;
        assert!(tgt.data().iter().all(|&v| close(v, expect, 1e-15)), "{t} {d}");
    }

    // shifted schedule: half steps weighted by their noise spans
    let sig = |t: f64| 3.0 * (t / 1000.0) / (1.0 + 2.0 * (t / 1000.0));
    for (t, d) in [(800, 400), (600, 150), (500, 62)] {
        let (tf, df) = (t as f64, d as f64);
        let h1 = sig(tf) - sig(tf - df);
        let h2 = sig(tf - df) - sig(tf - 2.0 * df);
        let expect = (h1 * tf / 1000.0 + h2 * (tf - df) / 1000.0) / (h1 + h2);
        let tgt = target_of(&idx, &NoiseSchedule::default(), &x.gather_rows(&[0]), &[t], &[d]);
        assert!(close(tgt.data()[0], expect, 1e-14), "{t} {d}");
    }

    let mut g = Graph::new();
    let xv = g.constant(x.gather_rows(&[0]));
    assert!(consistency_target(&mut g, &c, &[], &linear(), xv, &[10], &[6], None).is_err());
}

#[test]
fn consistency_target_carries_no_gradient() {
    let net = small_net(true, 6);
    let x = SeededRng::new(7).normal_tensor([2, 2]);
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let xv = g.constant(x.clone());
    let tgt = consistency_target(&mut g, &net, &p, &NoiseSchedule::default(), xv, &[800, 600], &[200, 150], None).unwrap();
    let loss = g.sum(tgt).unwrap();
    let grads = g.backward(loss).unwrap();
    for v in &p {
        assert_eq!(grads.get(*v).map(|t| t.max_abs()).unwrap_or(0.0), 0.0);
    }
}

#[test]
fn frozen_target_matches_constant_target() {
    // gradient with the stop-gradient target equals the gradient with the
    // target precomputed and fed in as a constant
    let net = small_net(true, 8);
    let sched = NoiseSchedule::default();
    let x = SeededRng::new(9).normal_tensor([2, 2]);
    let (t, h) = ([800, 700], [200, 87]);
    let d2 = [400, 174];
    let frozen = target_of(&net, &sched, &x, &t, &h);
    let params = net.params().tensors().to_vec();
    let grad_with = |use_sg: bool| {
        let mut g = Graph::new();
        let p: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
        let xv = g.constant(x.clone());
        let tgt = if use_sg {
            consistency_target(&mut g, &net, &p, &sched, xv, &t, &h, None).unwrap()
        } else {
            g.constant(frozen.clone())
        };
        let pred = net.forward(&mut g, &p, xv, &t, &d2, None).unwrap();
        let diff = g.sub(pred, tgt).unwrap();
        let r = g.row_sq_norm(diff).unwrap();
        let l = g.mean(r).unwrap();
        let mut gr = g.backward(l).unwrap();
        p.iter().map(|v| gr.take(*v).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(grad_with(true), grad_with(false));
}

fn anc_value<M: VelocityModel>(model: &M, sched: &NoiseSchedule, x0: &Tensor, x1: &Tensor, pairs: &[ConsistencyPair]) -> f64 {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let r = anc_loss_at(&mut g, model, &p, sched, x0, x1, None, pairs).unwrap();
    g.scalar(r.loss)
}

#[test]
fn anc_loss_examples() {
    let mut rng = SeededRng::new(10);
    let x0 = rng.normal_tensor([3, 2]);
    let x1 = rng.normal_tensor([3, 2]);
    let sched = NoiseSchedule::default();
    let settings = AncSettings { sampler: StepSampler::default(), calibration: Some(0.5) };
    let pairs: Vec<_> = (0..3).map(|_| draw_pair(&settings, &sched, &mut rng).unwrap()).collect();
    assert!(pairs.iter().all(|q| q.half >= 1 && q.weight > 0.0));
    let c = Analytic::new(Field::Constant(-0.4), &[2], 1000);
    assert_eq!(anc_value(&c, &sched, &x0, &x1, &pairs), 0.0);

    // single row, linear field, linear schedule:
    // pred T/N, target (T - h/2)/N, weight sqrt(2h/N)
    let idx = Analytic::new(Field::Index, &[2], 1000);
    let (t, h) = (700usize, 87usize);
    let w = (2.0 * h as f64 / 1000.0).sqrt();
    let q = ConsistencyPair { t, half: h, weight: linear().calibration_weight(t, 2 * h, 0.5).unwrap() };
    assert!(close(q.weight, w, 1e-15));
    let gap = h as f64 / 2000.0;
    let expect = w * 2.0 * gap * gap;
    let got = anc_value(&idx, &linear(), &x0.gather_rows(&[0]), &x1.gather_rows(&[0]), &[q]);
    assert!(close(got, expect, 1e-15), "{got} vs {expect}");
}

#[test]
fn sampler_never_yields_unit_half_steps() {
    // T=1 anchors only give dT=1, which halves to zero and must be redrawn
    let sched = NoiseSchedule::default();
    let s = AncSettings {
        sampler: StepSampler { anchors: vec![8], k: 4, ..StepSampler::default() },
        calibration: Some(0.5),
    };
    let mut rng = SeededRng::new(11);
    for _ in 0..500 {
        let q = draw_pair(&s, &sched, &mut rng).unwrap();
        assert!(q.half >= 1 && 2 * q.half <= q.t);
    }
    let dead = AncSettings {
        sampler: StepSampler { anchors: vec![1], k: 3, ..StepSampler::default() },
        calibration: None,
    };
    assert!(draw_pair(&dead, &sched, &mut rng).is_err());
}

#[test]
fn loss_gradients_pass_grad_check() {
    let sched = NoiseSchedule::default();
    let mut rng = SeededRng::new(12);
    let x0 = rng.normal_tensor([3, 2]);
    let x1 = rng.normal_tensor([3, 2]);
    let net = small_net(true, 13);
    let params = net.params().tensors().to_vec();

    let fm = grad_check(
        |g, p| fm_loss_at(g, &net, p, &sched, &x0, &x1, None, &[120, 640, 1000]),
        &params,
        1e-5,
    )
    .unwrap();
    assert!(fm.max_rel_err < 1e-4, "fm {}", fm.max_rel_err);

    let pairs = [
        ConsistencyPair { t: 800, half: 200, weight: 0.7 },
        ConsistencyPair { t: 600, half: 37, weight: 0.3 },
        ConsistencyPair { t: 500, half: 125, weight: 1.0 },
    ];
    // finite differences see the target frozen at the current weights
    let anc = grad_check(
        |g, p| {
            let frozen = net.params().bind(g, false);
            Ok(anc_loss_split(g, &net, p, &frozen, &sched, &x0, &x1, None, &pairs)?.loss)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(anc.max_rel_err < 1e-4, "anc {}", anc.max_rel_err);

    // and the training loss has exactly that gradient
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let l = anc_loss_at(&mut g, &net, &p, &sched, &x0, &x1, None, &pairs).unwrap().loss;
    let mut grads = g.backward(l).unwrap();
    for (v, a) in p.iter().zip(&anc.analytic) {
        let gv = grads.take(*v).unwrap();
        assert!(gv.sub(a).unwrap().max_abs() < 1e-14);
    }
}

#[test]
fn embedding_examples() {
    let e = embed_time(0, 0, 1000, 8).unwrap();
    assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0]);
    assert!(embed_time(1, 1, 1000, 7).is_err());
    let a = embed_time(500, 100, 1000, 64).unwrap();
    let b = embed_time(100, 500, 1000, 64).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn embedding_collision_scan() {
    let grid: Vec<usize> = (0..100).map(|i| i * 10).collect();
    let mut embs = Vec::with_capacity(10_000);
    for &t in &grid {
        for &d in &grid {
            embs.push(embed_time(t, d, 1000, 8).unwrap());
        }
    }
    let mut min_gap = f64::INFINITY;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let gap = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            min_gap = min_gap.min(gap);
        }
    }
    assert!(min_gap > 1e-9, "min gap {min_gap}");
}

#[test]
fn net_output_matches_state_and_is_deterministic() {
    let net = VelocityNet::new(NetConfig { widths: vec![6], emb_dim: 4, dt_embed: true }, &[2, 3, 4], 1000, &mut SeededRng::new(1)).unwrap();
    let x = SeededRng::new(2).normal_tensor([5, 2, 3, 4]);
    let a = net.predict(&x, &[1, 2, 3, 4, 5], &[0, 1, 0, 1, 0], None).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert_eq!(a, net.predict(&x, &[1, 2, 3, 4, 5], &[0, 1, 0, 1, 0], None).unwrap());
}

#[test]
fn unit_span_shortcuts_equal_euler_when_step_is_ignored() {
    let sched = NoiseSchedule::new(40, 3.0).unwrap();
    let cfg = NetConfig { widths: vec![8], emb_dim: 8, dt_embed: false };
    let net = VelocityNet::new(cfg, &[2], sched.n, &mut SeededRng::new(3)).unwrap();
    let a = sample_fewstep(&net, 40, &sched, 6, &mut SeededRng::new(4), None).unwrap();
    let b = sample_euler(&net, 40, &sched, 6, &mut SeededRng::new(4), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_step_sampler_is_one_full_span_step() {
    let sched = NoiseSchedule::default();
    let net = small_net(true, 14);
    let out = sample_fewstep(&net, 1, &sched, 4, &mut SeededRng::new(5), None).unwrap();
    let x = SeededRng::new(5).normal_tensor([4, 2]);
    assert_eq!(out, shortcut_step(&net, &sched, &x, &[1000; 4], &[1000; 4], None).unwrap());
}

#[test]
fn constant_field_is_integrated_exactly() {
    let sched = NoiseSchedule::default();
    let c = Analytic::new(Field::Constant(1.5), &[2], 1000);
    let one = sample_fewstep(&c, 1, &sched, 8, &mut SeededRng::new(6), None).unwrap();
    let fifty = sample_euler(&c, 50, &sched, 8, &mut SeededRng::new(6), None).unwrap();
    let x = SeededRng::new(6).normal_tensor([8, 2]);
    for ((a, b), x) in one.data().iter().zip(fifty.data()).zip(x.data()) {
        assert!(close(*a, x + 1.5, 1e-12) && close(*b, x + 1.5, 1e-12));
    }
}

#[test]
fn euler_on_decay_field_converges_first_order() {
    for sched in [linear(), NoiseSchedule::default()] {
        let m = Analytic::new(Field::Decay, &[1], 1000);
        let err = |n: usize| {
            let out = sample_euler(&m, n, &sched, 16, &mut SeededRng::new(7), None).unwrap();
            let x = SeededRng::new(7).normal_tensor([16, 1]);
            out.data()
                .iter()
                .zip(x.data())
                .map(|(o, x)| (o - x * (-1f64).exp()).abs() / x.abs())
                .fold(0.0, f64::max)
        };
        let (e10, e100) = (err(10), err(100));
        assert!(e100 < e10, "{e100} vs {e10}");
        assert!(e10 < 1.0 / 10.0 && e100 < 1.0 / 100.0, "{e10} {e100}");
    }
}

#[test]
fn sampling_is_deterministic() {
    let net = small_net(true, 15);
    let sched = NoiseSchedule::default();
    let a = sample_fewstep(&net, 4, &sched, 16, &mut SeededRng::new(8), None).unwrap();
    let b = sample_fewstep(&net, 4, &sched, 16, &mut SeededRng::new(8), None).unwrap();
    assert_eq!(a, b);
    assert!(sample_fewstep(&net, 4, &sched, 0, &mut SeededRng::new(8), None).is_err());
}

fn moons(n: usize, seed: u64) -> Tensor {
    gen_2d(&ToyDistribution { kind: ToyKind::TwoMoons, n, seed }).unwrap()
}

fn anc() -> AncSettings {
    AncSettings { sampler: StepSampler::default(), calibration: Some(0.5) }
}

#[test]
fn alternation_parity() {
    let net = small_net(true, 16);
    let cfg = TrainConfig { steps: 10, batch: 16, ..TrainConfig::default() };
    let mut st = TrainState::new(net, cfg.adamw(), SeededRng::new(1));
    let data = TensorSource { data: moons(64, 1) };
    train_alternating(&mut st, &data, &NoiseSchedule::default(), &anc(), &cfg).unwrap();
    let fm = st.history.iter().filter(|r| r.phase == Phase::Fm).count();
    let sc = st.history.iter().filter(|r| r.phase == Phase::Anc).count();
    assert_eq!((fm, sc), (5, 5));
    for r in &st.history {
        assert_eq!(r.phase == Phase::Fm, r.step % 2 == 0);
        assert_eq!(r.lambda_mean.is_some(), r.phase == Phase::Anc);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let cfg = TrainConfig { steps: 30, batch: 32, ..TrainConfig::default() };
        let mut st = TrainState::new(small_net(true, 17), cfg.adamw(), SeededRng::new(2));
        train_alternating(&mut st, &TensorSource { data: moons(256, 2) }, &NoiseSchedule::default(), &anc(), &cfg).unwrap();
        (st.model.params().checksum(), st.ema.clone(), st.history.clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn budgeted_training_lowers_held_out_losses() {
    let sched = NoiseSchedule::default();
    let cfg = TrainConfig { steps: 600, batch: 128, ..TrainConfig::default() };
    let net = VelocityNet::new(NetConfig { widths: vec![32, 32], emb_dim: 16, dt_embed: true }, &[2], 1000, &mut SeededRng::new(3)).unwrap();
    let mut st = TrainState::new(net, cfg.adamw(), SeededRng::new(3));

    let held = moons(256, 99);
    let noise = SeededRng::new(4).normal_tensor([256, 2]);
    let t: Vec<usize> = (0..256).map(|i| 1 + (i * 997) % 1000).collect();
    let fm_held = |m: &VelocityNet| fm_value(m, &noise, &held, &t);
    let sampler = StepSampler::default();
    let resid = |m: &VelocityNet| sc_residual(m, &sched, &sampler, &noise, &held, None).unwrap();
    let (fm0, sc0) = (fm_held(&st.model), resid(&st.model));

    train_alternating(&mut st, &TensorSource { data: moons(4096, 3) }, &sched, &anc(), &cfg).unwrap();
    let m = st.ema_model();
    let (fm1, sc1) = (fm_held(&m), resid(&m));
    assert!(fm1 < fm0, "fm {fm0} -> {fm1}");
    assert!(sc1 < sc0, "sc {sc0} -> {sc1}");
    assert!(sc1 >= 0.0);
}

#[test]
fn constant_field_has_zero_residual() {
    let c = Analytic::new(Field::Constant(0.9), &[2], 1000);
    let x = moons(32, 5);
    let noise = SeededRng::new(6).normal_tensor([32, 2]);
    let r = sc_residual(&c, &NoiseSchedule::default(), &StepSampler::default(), &noise, &x, None).unwrap();
    assert_eq!(r, 0.0);
}

#[test]
fn non_finite_loss_aborts() {
    let mut net = small_net(true, 18);
    net.params_mut().tensors_mut()[0].data_mut()[0] = f64::NAN;
    let cfg = TrainConfig { steps: 2, batch: 4, ..TrainConfig::default() };
    let mut st = TrainState::new(net, cfg.adamw(), SeededRng::new(1));
    let err = train_alternating(&mut st, &TensorSource { data: moons(16, 1) }, &NoiseSchedule::default(), &anc(), &cfg)
        .unwrap_err();
    assert!(err.is_numerical(), "{err}");
}
