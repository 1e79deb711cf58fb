use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn loss_of(inputs: &[(usize, usize, Vec<f64>)], build: &Build, seed: u64) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(r, c, d)| g.variable(*r, *c, d.clone()).unwrap())
        .collect();
    let out = build(&mut g, &vars);
    let len = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random_vec(&mut rng, len);
    let weights: Vec<f64> = (0..len).map(|_| 0.5 + rng.random::<f64>()).collect();
    let loss = g.weighted_sse(out, &target, &weights, 1.0).unwrap();
    (g, vars, loss)
}

/// Largest relative error between analytic and central-difference gradients.
fn max_grad_error(inputs: Vec<(usize, usize, Vec<f64>)>, build: &Build, seed: u64) -> f64 {
    let (mut g, vars, loss) = loss_of(&inputs, build, seed);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, (r, c, _))| {
            let gr = g.grad(*v);
            if gr.is_empty() {
                vec![0.0; r * c]
            } else {
                gr.to_vec()
            }
        })
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].2.len() {
            let mut plus = inputs.clone();
            plus[i].2[j] += h;
            let mut minus = inputs.clone();
            minus[i].2[j] -= h;
            let (gp, _, lp) = loss_of(&plus, build, seed);
            let (gm, _, lm) = loss_of(&minus, build, seed);
            let numeric = (gp.value(lp)[0] - gm.value(lm)[0]) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn input(rng: &mut ChaCha8Rng, r: usize, c: usize) -> (usize, usize, Vec<f64>) {
    (r, c, random_vec(rng, r * c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grad(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![input(&mut rng, m, k), input(&mut rng, k, n)];
        let err = max_grad_error(inputs, &|g, v| g.matmul(v[0], v[1]).unwrap(), seed);
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn bias_add_relu_grad(m in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![input(&mut rng, m, n), input(&mut rng, 1, n), input(&mut rng, m, n)];
        let build = |g: &mut Graph, v: &[Var]| {
            let a = g.add_bias(v[0], v[1]).unwrap();
            let b = g.add(a, v[2]).unwrap();
            g.relu(b)
        };
        let err = max_grad_error(inputs, &build, seed);
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn softmax_grad(m in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = max_grad_error(vec![input(&mut rng, m, n)], &|g, v| g.softmax_rows(v[0]), seed);
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn layer_norm_grad(m in 1usize..=8, n in 2usize..=8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![input(&mut rng, m, n), input(&mut rng, 1, n), input(&mut rng, 1, n)];
        let err = max_grad_error(inputs, &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(), seed);
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn dropout_grad(m in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let build = move |g: &mut Graph, v: &[Var]| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            g.dropout(v[0], 0.2, &mut r).unwrap()
        };
        let err = max_grad_error(vec![input(&mut rng, m, n)], &build, seed);
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn attention_grad(m in 1usize..=8, n in 1usize..=8, heads in 1usize..=2, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let inputs = vec![input(&mut rng, m, d), input(&mut rng, n, d), input(&mut rng, n, d)];
        let err = max_grad_error(inputs, &move |g, v| g.attention(v[0], v[1], v[2], heads).unwrap(), seed);
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn select_row_grad(m in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = max_grad_error(vec![input(&mut rng, m, n)], &move |g, v| g.select_row(v[0], m - 1).unwrap(), seed);
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn softmax_rows_normalize(m in 1usize..=8, n in 1usize..=8, scale in 0.1f64..50.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = random_vec(&mut rng, m * n).iter().map(|x| x * scale).collect();
        let mut g = Graph::new();
        let x = g.input(m, n, data).unwrap();
        let y = g.softmax_rows(x);
        for row in g.value(y).chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(m in 1usize..=8, n in 2usize..=16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = random_vec(&mut rng, m * n).iter().map(|x| 3.0 * x + 7.0).collect();
        let mut g = Graph::new();
        let x = g.input(m, n, data.clone()).unwrap();
        let gamma = g.input(1, n, vec![1.0; n]).unwrap();
        let beta = g.input(1, n, vec![0.0; n]).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for (row, raw) in g.value(y).chunks(n).zip(data.chunks(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rm = raw.iter().sum::<f64>() / n as f64;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - rv / (rv + graph::LAYER_NORM_EPS)).abs() < 1e-8);
        }
    }
}

#[test]
fn composite_attention_block_grad() {
    // Projection, attention over all rows, last-row pooling, layer norm.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        input(&mut rng, 6, 3),
        input(&mut rng, 3, 4),
        input(&mut rng, 4, 4),
        input(&mut rng, 1, 4),
        input(&mut rng, 1, 4),
    ];
    let build = |g: &mut Graph, v: &[Var]| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let k = g.matmul(h, v[2]).unwrap();
        let last = g.select_row(h, 5).unwrap();
        let a = g.attention(last, k, h, 2).unwrap();
        let r = g.add(a, last).unwrap();
        g.layer_norm(r, v[3], v[4]).unwrap()
    };
    assert!(max_grad_error(inputs, &build, 5) < 1e-4);
}

#[test]
fn softmax_concentrates_on_scaled_one_hot() {
    let mut g = Graph::new();
    let x = g.input(1, 4, vec![0.0, 0.0, 60.0, 0.0]).unwrap();
    let y = g.softmax_rows(x);
    assert!(g.value(y)[2] > 1.0 - 1e-20_f64.max(1e-12));
    assert!((g.value(y).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn single_token_attention_returns_v() {
    let mut g = Graph::new();
    let q = g.input(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let k = g.input(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let v = g.input(1, 4, vec![3.0, -1.0, 2.5, 7.0]).unwrap();
    let o = g.attention(q, k, v, 2).unwrap();
    assert_eq!(g.value(o), &[3.0, -1.0, 2.5, 7.0]);
}

#[test]
fn dropout_identity_and_reproducibility() {
    let data: Vec<f64> = (0..1000).map(|i| i as f64).collect();
    let mut g = Graph::new();
    let x = g.input(10, 100, data.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let same = g.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(same, x);
    let a = g.dropout(x, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = g.dropout(x, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let zeros = g.value(a).iter().zip(&data).filter(|(y, x)| **y == 0.0 && **x != 0.0).count();
    assert!((150..250).contains(&zeros), "{zeros} dropped of 999");
    for (y, x) in g.value(a).iter().zip(&data) {
        assert!(*y == 0.0 || (*y - x * 1.25).abs() < 1e-9);
    }
    assert!(g.dropout(x, 1.0, &mut rng).is_err());
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(2, 3, vec![0.0; 6]).unwrap();
    let b = g.input(2, 3, vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            a: (2, 3),
            b: (2, 3)
        }
    );
    assert!(err.to_string().contains("(2, 3)"));
    assert!(g.input(2, 2, vec![0.0; 3]).is_err());
}

#[test]
fn backward_is_repeatable_and_accumulates_params() {
    let mut set = ParamSet::default();
    set.push(Tensor2D::from_vec("w", 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let mut g = Graph::new();
    let x = g.input(1, 2, vec![1.0, -1.0]).unwrap();
    let w = g.param(&set, 0);
    let y = g.matmul(x, w).unwrap();
    let l = g.weighted_sse(y, &[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
    g.backward(l).unwrap();
    let first = g.grad(w).to_vec();
    g.backward(l).unwrap();
    assert_eq!(first, g.grad(w));
    // y = [-2, -2]; dL/dW = xᵀ · 2y.
    assert_eq!(first, vec![-4.0, -4.0, 4.0, 4.0]);
    g.accumulate_into(&mut set);
    g.accumulate_into(&mut set);
    assert_eq!(set.blocks[0].grad.as_ref().unwrap(), &vec![-8.0, -8.0, 8.0, 8.0]);
    assert!(g.grad(x).is_empty());
}

#[test]
fn lr_schedule_values() {
    let s = LrSchedule::default();
    let close = |a: f64, b: f64| (a - b).abs() / b < 1e-4;
    assert!(close(lr_at(&s, 1).unwrap(), 1.3975e-6));
    assert!(close(lr_at(&s, 2000).unwrap(), 2.7951e-3));
    assert!(close(lr_at(&s, 8000).unwrap(), 1.3975e-3));
    // Independent evaluation of the two branches at the peak.
    let peak_a = 0.125 * 2000f64.powf(-0.5);
    let peak_b = 0.125 * 2000.0 * 2000f64.powf(-1.5);
    assert!((peak_a - peak_b).abs() < 1e-15);
    assert_eq!(lr_at(&s, 0), Err(TensorError::StepZero));
}

fn scalar(name: &str, value: f64, grad: f64) -> Tensor2D {
    let mut t = Tensor2D::from_vec(name, 1, 1, vec![value]);
    t.grad = Some(vec![grad]);
    t
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = vec![scalar("w", 0.0, 1.0)];
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &mut st, 1e-3).unwrap();
    assert!((p[0].data[0] + 1e-3).abs() < 1e-12);
    assert_eq!(st.step_count, 1);
}

#[test]
fn adam_zero_grad_without_decay_is_identity() {
    let mut p = vec![scalar("w", 0.7, 0.0), scalar("b", -2.0, 0.0)];
    let mut st = AdamState::new(&p);
    st.weight_decay = 0.0;
    let before = p.clone();
    adam_step(&mut p, &mut st, 1e-2).unwrap();
    assert_eq!(p[0].data, before[0].data);
    assert_eq!(p[1].data, before[1].data);
}

#[test]
fn adam_rejects_non_finite_and_names_block() {
    let mut p = vec![scalar("ok", 1.0, 1.0), scalar("head.w2", 1.0, f64::NAN)];
    let mut st = AdamState::new(&p);
    let err = adam_step(&mut p, &mut st, 1e-3).unwrap_err();
    assert_eq!(err, TensorError::NonFiniteGradient { block: "head.w2".into() });
    assert_eq!(p[0].data[0], 1.0);
}

proptest! {
    #[test]
    fn adam_is_order_invariant_and_deterministic(vals in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..6), steps in 1usize..5) {
        let blocks: Vec<Tensor2D> = vals.iter().enumerate().map(|(i, (v, g))| scalar(&format!("p{i}"), *v, *g)).collect();
        let mut fwd = blocks.clone();
        let mut rev: Vec<Tensor2D> = blocks.iter().rev().cloned().collect();
        let mut again = blocks.clone();
        let (mut s1, mut s2, mut s3) = (AdamState::new(&fwd), AdamState::new(&rev), AdamState::new(&again));
        for _ in 0..steps {
            adam_step(&mut fwd, &mut s1, 1e-2).unwrap();
            adam_step(&mut rev, &mut s2, 1e-2).unwrap();
            adam_step(&mut again, &mut s3, 1e-2).unwrap();
        }
        rev.reverse();
        prop_assert_eq!(&fwd, &rev);
        prop_assert_eq!(&fwd, &again);
    }
}
