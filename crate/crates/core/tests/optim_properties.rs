use chexopt::model::{ParamKind, ParamStore};
use chexopt::optim::{
    cosine_lr, step_with_scaled_grads, AdamWConfig, CosineSchedule, EmaState, LossScaler, LossScalerConfig,
    Optimizer, OptimizerKind,
};
use chexopt::rng::{substream, Stream};
use chexopt::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

fn store(values: Vec<f64>) -> ParamStore {
    let mut p = ParamStore::new();
    p.push("w", ParamKind::Weight, Tensor::from_vec(values));
    p
}

/// Scalar Adam written out with running bias-correction products.
struct ScalarAdam {
    m: f64,
    v: f64,
    b1t: f64,
    b2t: f64,
}

impl ScalarAdam {
    fn new() -> Self {
        Self { m: 0.0, v: 0.0, b1t: 1.0, b2t: 1.0 }
    }

    fn step(&mut self, theta: f64, g: f64, lr: f64, wd: f64, c: &AdamWConfig) -> f64 {
        self.b1t *= c.beta1;
        self.b2t *= c.beta2;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let mh = self.m / (1.0 - self.b1t);
        let vh = self.v / (1.0 - self.b2t);
        theta - lr * mh / (vh.sqrt() + c.eps) - lr * wd * theta
    }
}

fn run_both(kind_wd: f64, steps: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let cfg = AdamWConfig {
        lr: 1e-3,
        weight_decay: kind_wd,
        ..AdamWConfig::default()
    };
    let mut rng = substream(seed, Stream::Data, &[]);
    let init: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut p = store(init.clone());
    let mut opt = Optimizer::new(OptimizerKind::AdamW, cfg, &p, false).unwrap();
    let mut oracle: Vec<ScalarAdam> = (0..8).map(|_| ScalarAdam::new()).collect();
    let mut theta = init;
    for _ in 0..steps {
        let g: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        p.zero_grads();
        p.tensor_mut(0).accumulate_grad(&g).unwrap();
        opt.step(&mut p, cfg.lr).unwrap();
        for i in 0..8 {
            theta[i] = oracle[i].step(theta[i], g[i], cfg.lr, kind_wd, &cfg);
        }
    }
    (p.tensor(0).data().to_vec(), theta)
}

#[test]
fn adam_matches_scalar_oracle_over_100_steps() {
    let (got, want) = run_both(0.0, 100, 3);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
}

#[test]
fn decoupled_decay_matches_scalar_oracle() {
    let (got, want) = run_both(1e-2, 100, 4);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
}

#[test]
fn first_step_closed_form() {
    // Step 1: m̂ = g, v̂ = g², so the move is lr·g/(|g| + ε) plus decay.
    let cfg = AdamWConfig::default();
    let mut p = store(vec![0.75, -0.5]);
    let mut opt = Optimizer::new(OptimizerKind::AdamW, cfg, &p, false).unwrap();
    p.tensor_mut(0).accumulate_grad(&[0.3, -2.0]).unwrap();
    opt.step(&mut p, cfg.lr).unwrap();
    let lr = cfg.lr;
    let wd = cfg.weight_decay;
    let e0 = 0.75 - lr * 0.3 / (0.3 + cfg.eps) - lr * wd * 0.75;
    let e1 = -0.5 + lr * 2.0 / (2.0 + cfg.eps) + lr * wd * 0.5;
    let d = p.tensor(0).data();
    assert!((d[0] - e0).abs() < 1e-12);
    assert!((d[1] - e1).abs() < 1e-12);
}

#[test]
fn l2_coupled_variant_differs_once_decay_is_on() {
    let cfg = AdamWConfig {
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let mut a = store(vec![1.0, -1.0]);
    let mut b = a.clone();
    let mut oa = Optimizer::new(OptimizerKind::AdamW, cfg, &a, false).unwrap();
    let mut ob = Optimizer::new(OptimizerKind::Adam, cfg, &b, false).unwrap();
    for _ in 0..3 {
        a.zero_grads();
        b.zero_grads();
        a.tensor_mut(0).accumulate_grad(&[0.5, 0.5]).unwrap();
        b.tensor_mut(0).accumulate_grad(&[0.5, 0.5]).unwrap();
        oa.step(&mut a, 1e-2).unwrap();
        ob.step(&mut b, 1e-2).unwrap();
    }
    assert_ne!(a.tensor(0).data(), b.tensor(0).data());
}

#[test]
fn cosine_endpoints_and_midpoint() {
    let s = CosineSchedule {
        eta_max: 1e-4,
        eta_min: 1e-6,
        total_epochs: 50,
    };
    assert_eq!(cosine_lr(0, &s).unwrap(), 1e-4);
    assert_eq!(cosine_lr(50, &s).unwrap(), 1e-6);
    let mid = cosine_lr(25, &s).unwrap();
    assert!((mid - 0.5 * (1e-4 + 1e-6)).abs() <= 1e-15);
    assert!(cosine_lr(51, &s).is_err());
}

#[test]
fn ema_of_constant_target_decays_geometrically() {
    let decay = 0.97;
    let mut p = store(vec![0.0, 1.0]);
    let mut ema = EmaState::new(&p, decay).unwrap();
    p.tensor_mut(0).data_mut().copy_from_slice(&[2.0, -3.0]);
    for _ in 0..100 {
        ema.update(&p).unwrap();
    }
    let ak = decay.powi(100);
    let s = ema.shadow()[0].data();
    // s_k − θ = αᵏ (s_0 − θ)
    assert!((s[0] - (2.0 + ak * (0.0 - 2.0))).abs() <= 1e-12);
    assert!((s[1] - (-3.0 + ak * (1.0 + 3.0))).abs() <= 1e-12);
}

#[test]
fn scaler_grows_after_interval() {
    let cfg = LossScalerConfig {
        growth_interval: 5,
        ..LossScalerConfig::default()
    };
    let mut scaler = LossScaler::new(cfg).unwrap();
    let mut p = store(vec![1.0]);
    let mut opt = Optimizer::new(OptimizerKind::AdamW, AdamWConfig::default(), &p, false).unwrap();
    for _ in 0..5 {
        let g = vec![Some(vec![scaler.scale * 0.1])];
        assert!(step_with_scaled_grads(g, &mut p, &mut opt, &mut scaler, 1e-3).unwrap().stepped);
    }
    assert_eq!(scaler.scale, 2.0 * cfg.init_scale);
    assert_eq!(scaler.good_steps, 0);
}

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zero_gradient_step_is_pure_decay(
        theta in finite_vec(6).prop_map(|v| v.into_iter().map(|x| x / 5.0).collect::<Vec<_>>()),
        lr in 1e-6f64..1e-2,
        wd in 0.0f64..0.1,
    ) {
        let cfg = AdamWConfig { lr, weight_decay: wd, ..AdamWConfig::default() };
        let mut p = store(theta.clone());
        let mut opt = Optimizer::new(OptimizerKind::AdamW, cfg, &p, false).unwrap();
        p.tensor_mut(0).accumulate_grad(&[0.0; 6]).unwrap();
        opt.step(&mut p, lr).unwrap();
        for (a, b) in p.tensor(0).data().iter().zip(&theta) {
            prop_assert!((a - b * (1.0 - lr * wd)).abs() <= 1e-15);
        }
    }

    #[test]
    fn ema_stays_in_hull(
        shadow in finite_vec(5),
        target in finite_vec(5),
        decay in 0.0f64..0.99999,
        warmup in any::<bool>(),
    ) {
        let mut p = store(shadow.clone());
        let mut ema = EmaState::new(&p, decay).unwrap().with_warmup(warmup);
        p.tensor_mut(0).data_mut().copy_from_slice(&target);
        ema.update(&p).unwrap();
        for ((s, &a), &b) in ema.shadow()[0].data().iter().zip(&shadow).zip(&target) {
            prop_assert!(*s >= a.min(b) && *s <= a.max(b));
        }
    }

    #[test]
    fn cosine_is_monotone_and_bounded(total in 1usize..200, hi in 1e-6f64..1.0, frac in 0.0f64..1.0) {
        let s = CosineSchedule { eta_max: hi, eta_min: hi * frac, total_epochs: total };
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = cosine_lr(t, &s).unwrap();
            prop_assert!(lr <= prev);
            prop_assert!(lr >= s.eta_min && lr <= s.eta_max);
            prev = lr;
        }
        prop_assert_eq!(cosine_lr(0, &s).unwrap(), s.eta_max);
        prop_assert_eq!(cosine_lr(total, &s).unwrap(), s.eta_min);
    }

    #[test]
    fn non_finite_gradient_skips_step_without_side_effects(
        theta in finite_vec(4),
        grads in finite_vec(4),
        bad_at in 0usize..4,
        bad in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)],
        warm_steps in 0usize..4,
    ) {
        let mut p = store(theta);
        let mut opt = Optimizer::new(OptimizerKind::AdamW, AdamWConfig::default(), &p, false).unwrap();
        let mut scaler = LossScaler::new(LossScalerConfig::default()).unwrap();
        for _ in 0..warm_steps {
            let g = grads.iter().map(|v| v * scaler.scale).collect();
            step_with_scaled_grads(vec![Some(g)], &mut p, &mut opt, &mut scaler, 1e-3).unwrap();
        }
        let before_params: Vec<u64> = p.tensor(0).data().iter().map(|v| v.to_bits()).collect();
        let before_state = opt.state.clone();
        let before_scale = scaler.scale;
        let mut g = grads.clone();
        g[bad_at] = bad;
        let out = step_with_scaled_grads(vec![Some(g)], &mut p, &mut opt, &mut scaler, 1e-3).unwrap();
        prop_assert!(!out.stepped);
        let after: Vec<u64> = p.tensor(0).data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(after, before_params);
        prop_assert_eq!(&opt.state, &before_state);
        prop_assert_eq!(scaler.scale, before_scale * 0.5);
        prop_assert_eq!(scaler.good_steps, 0);
    }

    #[test]
    fn decay_mask_exempts_norm_and_bias(theta in finite_vec(3), wd in 1e-3f64..0.1) {
        let cfg = AdamWConfig { weight_decay: wd, ..AdamWConfig::default() };
        let mut p = ParamStore::new();
        p.push("w", ParamKind::Weight, Tensor::from_vec(theta.clone()));
        p.push("b", ParamKind::Bias, Tensor::from_vec(theta.clone()));
        p.push("gamma", ParamKind::NormScale, Tensor::from_vec(theta.clone()));
        p.push("beta", ParamKind::NormShift, Tensor::from_vec(theta.clone()));
        let mut opt = Optimizer::new(OptimizerKind::AdamW, cfg, &p, true).unwrap();
        for i in 0..4 {
            p.tensor_mut(i).accumulate_grad(&[0.0; 3]).unwrap();
        }
        opt.step(&mut p, 1e-2).unwrap();
        for i in 1..4 {
            prop_assert_eq!(p.tensor(i).data(), &theta[..]);
        }
        for (a, b) in p.tensor(0).data().iter().zip(&theta) {
            prop_assert!((a - b * (1.0 - 1e-2 * wd)).abs() <= 1e-14);
        }
    }
}
