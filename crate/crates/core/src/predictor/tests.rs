use proptest::prelude::*;

use super::*;
use crate::tensor_nn::{Graph, LrSchedule};
use crate::trace_model::{PacketRecord, QueueMark, SharpChangeThresholds};

fn rec(i: usize, flow: u32, lat: Option<f64>) -> PacketRecord {
    PacketRecord {
        flow_id: flow,
        receiver_id: flow % 2,
        seq: i as u64,
        send_time_ms: i as f64 * 0.5,
        packet_size_bytes: 1000 + (i as u32 % 7) * 50,
        queue_mark: if flow % 3 == 0 { QueueMark::Classic } else { QueueMark::L4S },
        latency_ms: lat,
    }
}

/// Baseline 20 ms with a 60 ms spike on every tenth packet.
fn planted(n: usize) -> Vec<PacketRecord> {
    (0..n)
        .map(|i| rec(i, (i % 4) as u32, Some(if i % 10 == 9 { 60.0 } else { 20.0 })))
        .collect()
}

fn tiny_config(window: usize, horizon: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 2,
        ff_width: 12,
        n_features: N_FEATURES,
        horizon,
        window,
    }
}

#[test]
fn loss_examples() {
    let cfg = LossConfig::default();
    assert_eq!(change_point_loss(&[50.0], &[60.0], 30.0, &cfg).unwrap(), 1000.0);
    assert_eq!(change_point_loss(&[50.0], &[60.0], 55.0, &cfg).unwrap(), 100.0);
    assert_eq!(change_point_loss(&[1.0, 2.0, 90.0], &[1.0, 2.0, 90.0], 0.0, &cfg).unwrap(), 0.0);
    assert!(change_point_loss(&[1.0, 2.0], &[1.0], 0.0, &cfg).is_err());
    assert!(LossConfig { alpha: 0.5, ..cfg }.check().is_err());
}

#[test]
fn weights_skip_missing_targets() {
    let cfg = LossConfig::default();
    // 20 -> (missing) -> 60: the step is measured from the last known target.
    let w = change_point_weights(&[Some(20.0), None, Some(60.0), Some(61.0)], Some(20.0), &cfg);
    assert_eq!(w, vec![1.0, 0.0, 10.0, 1.0]);
}

proptest! {
    #[test]
    fn alpha_one_is_mse(
        pairs in prop::collection::vec((0.0f64..300.0, 0.0f64..300.0), 1..20),
        prev in 0.0f64..300.0,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let got = change_point_loss(&p, &t, prev, &LossConfig::mse()).unwrap();
        let mse = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        prop_assert!((got - mse).abs() <= 1e-12 * mse.abs().max(1e-300));
    }
}

#[test]
fn default_parameter_count_in_budget() {
    let m = ModelParams::init(ModelConfig::default(), NormStats::default(), 1).unwrap();
    let n = m.param_count();
    assert!((80_000..=120_000).contains(&n), "{n}");
    assert!(m.params.all_finite());
    // input 7*64+64, per layer 4*(64*64+64) + 2*128 + (64*256+256) + (256*64+64) + 128, head 64*64+64 + 64*8+8
    let d = 64;
    let layer = 4 * (d * d + d) + (d * 256 + 256) + (256 * d + d) + 4 * d;
    assert_eq!(n, 7 * d + d + 2 * layer + d * d + d + d * 8 + 8);
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = tiny_config(4, 3);
    let stream: Vec<PacketRecord> = (0..12)
        .map(|i| rec(i, (i % 3) as u32, Some(20.0 + ((i * 37) % 11) as f64 * 4.0)))
        .collect();
    let norm = NormStats::fit(&stream, 4, 1);
    let mut m = ModelParams::init(cfg, norm, 7).unwrap();
    let data = Dataset::from_bases(&stream, &[3, 6], 4, 3, Visibility::AsRecorded);
    let loss_cfg = LossConfig::default();
    let total = |m: &ModelParams| mean_loss(m, &data, &loss_cfg).unwrap() * data.len() as f64;

    m.params.zero_grad();
    for s in &data.samples {
        let weights = change_point_weights(&s.targets, s.prev, &loss_cfg);
        let z: Vec<f64> = s.targets.iter().map(|t| m.norm.latency_to_model(t.unwrap())).collect();
        let mut g = Graph::new();
        let out = m.forward(&mut g, s.window.to_matrix(&m.norm), None, 0.0).unwrap();
        let l = g.weighted_sse(out, &z, &weights, s.targets.len() as f64).unwrap();
        g.backward(l).unwrap();
        g.accumulate_into(&mut m.params);
    }
    let analytic: Vec<Vec<f64>> = m.params.blocks.iter().map(|b| b.grad.clone().unwrap()).collect();
    let h = 1e-5;
    let mut checked = 0;
    for bi in 0..m.params.blocks.len() {
        let n = m.params.blocks[bi].data.len();
        for j in (0..n).step_by(n.div_ceil(5).max(1)) {
            let orig = m.params.blocks[bi].data[j];
            m.params.blocks[bi].data[j] = orig + h;
            let up = total(&m);
            m.params.blocks[bi].data[j] = orig - h;
            let down = total(&m);
            m.params.blocks[bi].data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[bi][j];
            let scale = a.abs().max(fd.abs());
            // Key biases have an identically zero gradient (softmax shift invariance).
            let ok = if scale < 1e-7 {
                (a - fd).abs() < 1e-9
            } else {
                (a - fd).abs() / scale < 1e-4
            };
            assert!(ok, "{} [{j}]: analytic {a} fd {fd}", m.params.blocks[bi].name);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn featurize_boundary_and_causality() {
    let (w, b) = (6, 3);
    let stream = planted(w + b);
    assert_eq!(featurize(&stream, w, b, Visibility::AsRecorded).len(), 1);
    assert!(featurize(&stream[..w + b - 1], w, b, Visibility::AsRecorded).is_empty());

    let long = planted(40);
    let mut altered = long.clone();
    for r in altered.iter_mut().take(20) {
        r.latency_ms = Some(999.0);
        r.packet_size_bytes = 1;
        r.send_time_ms -= 5.0;
    }
    for base in 20 + w - 1..40 {
        assert_eq!(
            build_window(&long, base, w, Visibility::AsRecorded),
            build_window(&altered, base, w, Visibility::AsRecorded)
        );
    }
}

#[test]
fn short_history_is_left_padded() {
    let stream = planted(3);
    let win = build_window(&stream, 2, 5, Visibility::AsRecorded);
    assert_eq!(win.pad, 2);
    assert_eq!(win.rows[0], FeatureRow::default());
    let m = win.to_matrix(&NormStats::fit(&stream, 5, 1));
    assert!(m[..2 * N_FEATURES].iter().all(|x| *x == 0.0));
}

#[test]
fn unacked_rows_carry_zero_latency() {
    let mut stream = planted(10);
    stream[8].latency_ms = None;
    let norm = NormStats::fit(&stream, 5, 1);
    let win = build_window(&stream, 9, 5, Visibility::AsRecorded);
    assert_eq!(win.rows[3].acked, 0.0);
    assert_eq!(win.rows[3].latency_ms, 0.0);
    assert_eq!(win.to_matrix(&norm)[3 * N_FEATURES], 0.0);
    // Decision-time visibility hides ACKs that have not come back yet.
    let hidden = build_window(&stream, 9, 5, Visibility::DecisionTime { return_delay_ms: 1000.0 });
    assert!(hidden.rows.iter().all(|r| r.acked == 0.0));
}

#[test]
fn normalization_standardizes_training_latency() {
    let stream: Vec<PacketRecord> = (0..500)
        .map(|i| rec(i, (i % 5) as u32, Some(10.0 + ((i * 7919) % 113) as f64)))
        .collect();
    let norm = NormStats::fit(&stream, 20, 3);
    let z: Vec<f64> = stream.iter().map(|r| norm.latency_to_model(r.latency_ms.unwrap())).collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let std = (z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64).sqrt();
    assert!(mean.abs() < 1e-9, "{mean}");
    assert!((std - 1.0).abs() < 1e-6, "{std}");
    assert_eq!(norm.mean[5], 0.0);
    assert_eq!(norm.std[6], 1.0);
}

#[test]
fn predict_shapes_and_determinism() {
    let stream = planted(64);
    let norm = NormStats::fit(&stream, 16, 1);
    for b in [1, 4, 8, 16, 32] {
        let cfg = ModelConfig {
            horizon: b,
            window: 16,
            ..ModelConfig::default()
        };
        let m = ModelParams::init(cfg, norm.clone(), 3).unwrap();
        let win = build_window(&stream, 30, 16, Visibility::AsRecorded);
        let p1 = predict(&m, &win, 30).unwrap();
        let p2 = predict(&m, &win, 30).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.predicted_latency_ms.len(), b);
        assert_eq!(p1.base_index, 30);
        let wrong = build_window(&stream, 30, 15, Visibility::AsRecorded);
        assert!(predict(&m, &wrong, 30).is_err());
    }
}

#[test]
fn padded_rows_do_not_depend_on_padding_content() {
    let stream = planted(5);
    let norm = NormStats::fit(&stream, 8, 1);
    let m = ModelParams::init(tiny_config(8, 2), norm, 4).unwrap();
    let win = build_window(&stream, 4, 8, Visibility::AsRecorded);
    let mut other = win.clone();
    other.rows[0] = FeatureRow {
        latency_ms: 77.0,
        ..FeatureRow::default()
    };
    assert_eq!(predict(&m, &win, 4).unwrap(), predict(&m, &other, 4).unwrap());
}

fn small_train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        schedule: LrSchedule {
            d_model: 64,
            warmup_steps: 20,
        },
        loss: LossConfig::default(),
        dropout: 0.0,
        seed: 11,
    }
}

#[test]
fn training_descends_on_planted_pattern() {
    let stream = planted(260);
    let (w, b) = (16, 8);
    let norm = NormStats::fit(&stream, w, 1);
    let cfg = ModelConfig {
        window: w,
        horizon: b,
        ..ModelConfig::default()
    };
    let m = ModelParams::init(cfg, norm, 5).unwrap();
    let bases: Vec<usize> = (w - 1..w - 1 + 200).collect();
    let data = Dataset::from_bases(&stream, &bases, w, b, Visibility::AsRecorded);
    assert_eq!(data.len(), 200);
    let (_, report) = train(m, &data, &small_train_cfg(12)).unwrap();
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < 0.5 * report.initial_loss, "{} -> {last}", report.initial_loss);
}

#[test]
fn zero_epochs_and_determinism() {
    let stream = planted(80);
    let norm = NormStats::fit(&stream, 8, 1);
    let m = ModelParams::init(tiny_config(8, 4), norm, 9).unwrap();
    let bases: Vec<usize> = (7..60).collect();
    let data = Dataset::from_bases(&stream, &bases, 8, 4, Visibility::AsRecorded);
    let (same, report) = train(m.clone(), &data, &small_train_cfg(0)).unwrap();
    assert_eq!(same, m);
    assert!(report.epoch_losses.is_empty());
    let mut cfg = small_train_cfg(2);
    cfg.dropout = 0.2;
    let (a, ra) = train(m.clone(), &data, &cfg).unwrap();
    let (b, rb) = train(m.clone(), &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_ne!(a, m);
}

#[test]
fn mismatched_horizon_is_rejected() {
    let stream = planted(40);
    let m = ModelParams::init(tiny_config(8, 4), NormStats::default(), 1).unwrap();
    let data = Dataset::from_bases(&stream, &[10], 8, 3, Visibility::AsRecorded);
    assert!(train(m, &data, &small_train_cfg(1)).is_err());
}

fn encoder_blocks(m: &ModelParams) -> Vec<(String, Vec<u64>)> {
    m.params
        .blocks
        .iter()
        .filter(|b| !HEAD_BLOCKS.contains(&b.name.as_str()))
        .map(|b| (b.name.clone(), b.data.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn fine_tune_freezes_encoder_and_adapts_to_shift() {
    let (w, b) = (16, 8);
    let stream = planted(400);
    let norm = NormStats::fit(&stream, w, 1);
    let cfg = ModelConfig {
        window: w,
        horizon: b,
        ..ModelConfig::default()
    };
    let m = ModelParams::init(cfg, norm, 5).unwrap();
    let bases: Vec<usize> = (w - 1..w - 1 + 160).collect();
    let data = Dataset::from_bases(&stream, &bases, w, b, Visibility::AsRecorded);
    let (m, _) = train(m, &data, &small_train_cfg(4)).unwrap();

    let shifted: Vec<PacketRecord> = stream
        .iter()
        .map(|r| PacketRecord {
            latency_ms: r.latency_ms.map(|l| l + 30.0),
            ..*r
        })
        .collect();
    let tune = Dataset::from_bases(&shifted, &(w - 1..200).collect::<Vec<_>>(), w, b, Visibility::AsRecorded);
    let held = Dataset::from_bases(&shifted, &(220..380).collect::<Vec<_>>(), w, b, Visibility::AsRecorded);
    let ft = FineTuneConfig {
        steps: 150,
        batch_size: 16,
        lr: 3e-3,
        loss: LossConfig::mse(),
        dropout: 0.0,
        seed: 2,
    };
    let before = mean_loss(&m, &held, &LossConfig::mse()).unwrap();
    let tuned = fine_tune(m.clone(), &tune, &ft).unwrap();
    let after = mean_loss(&tuned, &held, &LossConfig::mse()).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert_eq!(encoder_blocks(&m), encoder_blocks(&tuned));
    assert_ne!(m, tuned);
    assert_eq!(fine_tune(tuned.clone(), &tune, &FineTuneConfig { steps: 0, ..ft.clone() }).unwrap(), tuned);
    assert_eq!(fine_tune(m.clone(), &tune, &ft).unwrap(), tuned);
    assert!(fine_tune(m, &Dataset::default(), &ft).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let stream = planted(50);
    let m = ModelParams::init(ModelConfig::default(), NormStats::fit(&stream, 20, 2), 13).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back, m);
    for (a, b) in back.params.blocks.iter().zip(&m.params.blocks) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for cut in [0, 3, 7, buf.len() / 2, buf.len() - 1] {
        assert!(read_checkpoint(&buf[..cut]).is_err(), "cut at {cut}");
    }
    let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let header = String::from_utf8(buf[8..8 + hlen].to_vec()).unwrap();
    let bumped = header.replacen("\"schema_version\":1", "\"schema_version\":999", 1);
    let mut v999 = Vec::new();
    v999.extend_from_slice(CHECKPOINT_MAGIC);
    v999.extend_from_slice(&(bumped.len() as u32).to_le_bytes());
    v999.extend_from_slice(bumped.as_bytes());
    v999.extend_from_slice(&buf[8 + hlen..]);
    assert!(matches!(read_checkpoint(&v999[..]), Err(PredictorError::UnsupportedVersion(999))));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&bad[..]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.swq");
    save_checkpoint(&m, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), m);
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn describe_reports_budget_and_digest() {
    let m = ModelParams::init(ModelConfig::default(), NormStats::default(), 1).unwrap();
    let d = describe(&m);
    assert_eq!(d.trainable_parameters, m.param_count());
    assert_eq!(d.schema_version, SCHEMA_VERSION);
    assert_eq!(d.norm_digest.len(), 64);
    let mut other = m.clone();
    other.norm.mean[0] = 1.0;
    assert_ne!(describe(&other).norm_digest, d.norm_digest);
}

#[test]
fn embedding_export_shape_and_labels() {
    let stream = planted(60);
    let (w, b) = (8, 2);
    let m = ModelParams::init(ModelConfig { window: w, horizon: b, ..ModelConfig::default() }, NormStats::fit(&stream, w, 1), 2)
        .unwrap();
    let bases: Vec<usize> = (w - 1..40).collect();
    let data = Dataset::from_bases(&stream, &bases, w, b, Visibility::AsRecorded);
    let th = SharpChangeThresholds::default();
    let mut out = Vec::new();
    assert_eq!(export_embeddings(&m, &data, &th, &mut out).unwrap(), data.len());
    let mut again = Vec::new();
    export_embeddings(&m, &data, &th, &mut again).unwrap();
    assert_eq!(out, again);

    let mut rdr = csv::Reader::from_reader(&out[..]);
    assert_eq!(rdr.headers().unwrap().len(), 65);
    let labels: Vec<u8> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            assert_eq!(r.len(), 65);
            r[64].parse().unwrap()
        })
        .collect();
    assert_eq!(labels.len(), data.len());
    let events = crate::trace_model::detect_sharp_changes(
        &stream.iter().map(|r| r.latency_ms.unwrap()).collect::<Vec<_>>(),
        &th,
    );
    for (base, label) in bases.iter().zip(labels) {
        let expected = events.iter().any(|e| e.index == base + 1);
        assert_eq!(label == 1, expected, "base {base}");
    }
}
