use nalab::optim::{clip_grad_norm, global_grad_norm, Adam, AdamConfig};
use nalab::{ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn store_of(values: &[&[f64]]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (i, v) in values.iter().enumerate() {
        store.add(format!("p{i}"), Tensor::new(vec![v.len()], v.to_vec()).unwrap());
    }
    store
}

fn set_grads(store: &mut ParamStore<f64>, grads: &[Vec<f64>]) {
    for ((_, t), g) in store.tensors_mut().zip(grads) {
        t.grad = Some(g.clone());
    }
}

fn values(store: &ParamStore<f64>) -> Vec<Vec<f64>> {
    store.iter().map(|(_, t)| t.data().to_vec()).collect()
}

/// Textbook scalar Adam, one parameter at a time.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, p: f64, g: f64, c: &AdamConfig) -> f64 {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let m_hat = self.m / (1.0 - c.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - c.beta2.powi(self.t));
        p - c.lr * m_hat / (v_hat.sqrt() + c.eps)
    }
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut store = store_of(&[&[1.0, -2.0], &[0.5]]);
    let before = values(&store);
    let mut adam = Adam::new(AdamConfig::default(), &store);
    for _ in 0..5 {
        set_grads(&mut store, &[vec![0.0, 0.0], vec![0.0]]);
        adam.step(&mut store).unwrap();
    }
    assert_eq!(values(&store), before);
    assert_eq!(adam.t, 5);
}

#[test]
fn first_step_moves_by_lr_against_the_gradient_sign() {
    let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
    let mut store = store_of(&[&[1.0, 1.0, 1.0]]);
    let mut adam = Adam::new(cfg, &store);
    set_grads(&mut store, &[vec![3.0, -0.2, 1e-3]]);
    adam.step(&mut store).unwrap();
    let p = &values(&store)[0];
    for (pi, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((pi - (1.0 + sign * cfg.lr)).abs() < 1e-7, "{pi}");
    }
}

#[test]
fn three_steps_on_a_square_match_the_scalar_trace() {
    let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut store = store_of(&[&[1.0]]);
    let mut adam = Adam::new(cfg, &store);
    let mut oracle = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
    let mut p = 1.0;
    for _ in 0..3 {
        let current = values(&store)[0][0];
        set_grads(&mut store, &[vec![2.0 * current]]);
        adam.step(&mut store).unwrap();
        p = oracle.step(p, 2.0 * p, &cfg);
        assert!((values(&store)[0][0] - p).abs() < 1e-10);
    }
    assert!(p < 1.0);
}

#[test]
fn hundred_steps_on_random_quadratics_match_the_scalar_trace() {
    let mut rng = Rng::new(11);
    for _ in 0..5 {
        let n = 6;
        let curv: Vec<f64> = (0..n).map(|_| 0.1 + 3.0 * rng.uniform()).collect();
        let centre: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let start: Vec<f64> = (0..n).map(|_| 2.0 * rng.normal()).collect();
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut store = store_of(&[&start]);
        let mut adam = Adam::new(cfg, &store);
        let mut oracles: Vec<ScalarAdam> = (0..n).map(|_| ScalarAdam { m: 0.0, v: 0.0, t: 0 }).collect();
        let mut p = start.clone();
        for _ in 0..100 {
            let cur = values(&store)[0].clone();
            let g: Vec<f64> = (0..n).map(|i| curv[i] * (cur[i] - centre[i])).collect();
            set_grads(&mut store, &[g]);
            adam.step(&mut store).unwrap();
            for i in 0..n {
                p[i] = oracles[i].step(p[i], curv[i] * (p[i] - centre[i]), &cfg);
            }
            for (a, b) in values(&store)[0].iter().zip(&p) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn decoupled_weight_decay_shrinks_before_the_update() {
    let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() };
    let mut store = store_of(&[&[2.0]]);
    let mut adam = Adam::new(cfg, &store);
    set_grads(&mut store, &[vec![0.0]]);
    adam.step(&mut store).unwrap();
    assert!((values(&store)[0][0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_is_named_and_nothing_changes() {
    let mut store = store_of(&[&[1.0], &[2.0, 3.0]]);
    let mut adam = Adam::new(AdamConfig::default(), &store);
    set_grads(&mut store, &[vec![0.5], vec![1.0, f64::NAN]]);
    let before = (values(&store), adam.clone());
    let err = adam.step(&mut store).unwrap_err();
    assert_eq!((err.name.as_str(), err.index), ("p1", 1));
    assert!(err.to_string().contains("p1"));
    assert_eq!((values(&store), adam), before);
}

#[test]
fn clipping_examples() {
    let mut store = store_of(&[&[0.0, 0.0]]);
    set_grads(&mut store, &[vec![3.0, 4.0]]);
    assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
    let g = store.iter().next().unwrap().1.grad.clone().unwrap();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

    set_grads(&mut store, &[vec![0.3, 0.4]]);
    clip_grad_norm(&mut store, 1.0);
    assert_eq!(store.iter().next().unwrap().1.grad.clone().unwrap(), vec![0.3, 0.4]);
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(g1 in prop::collection::vec(-50.0f64..50.0, 1..20),
                               g2 in prop::collection::vec(-50.0f64..50.0, 1..20),
                               max_norm in 0.01f64..10.0) {
        let mut store = store_of(&[&vec![0.0; g1.len()], &vec![0.0; g2.len()]]);
        set_grads(&mut store, &[g1.clone(), g2.clone()]);
        let before = clip_grad_norm(&mut store, max_norm);
        let direct = g1.iter().chain(&g2).map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((before - direct).abs() <= 1e-12 * direct.max(1.0));
        let recomputed = store.iter().flat_map(|(_, t)| t.grad.clone().unwrap()).map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(recomputed <= max_norm + 1e-6);
        prop_assert!((global_grad_norm(&store) - recomputed).abs() < 1e-12);
    }
}
