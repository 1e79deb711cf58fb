use swq_core::evalkit::experiments::*;
use swq_core::predictor::ModelConfig;
use swq_core::SimConfig;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        sim: SimConfig {
            duration_s: 24.0,
            flow_start_window_s: 2.0,
            ..SimConfig::default()
        },
        train_span_s: [2.0, 12.0],
        test_span_s: [12.0, 24.0],
        finetune_span_s: 2.0,
        model: ModelConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            ff_width: 16,
            window: 16,
            ..ModelConfig::default()
        },
        train_windows: 24,
        finetune_windows: 16,
        eval_segments: 8,
        segment_len: 32,
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 1;
    cfg.finetune.steps = 2;
    cfg
}

#[test]
fn batch_size_ablation_emits_one_row_per_grid_value() {
    let rows = run_ablation(AblationKind::BatchSize, &tiny(), &AblationGrid::default()).unwrap();
    let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["1", "2", "4", "8", "16", "32"]);
    assert!(rows.iter().all(|r| r.status == "ok" && r.ablation == "batch_size"));
}

#[test]
fn loss_ablation_emits_two_rows() {
    let rows = run_ablation(AblationKind::LossFunction, &tiny(), &AblationGrid::default()).unwrap();
    let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["mse", "change_point"]);
}

#[test]
fn interval_grid_matches_defaults_and_five_minutes_is_present() {
    let grid = AblationGrid::default();
    assert_eq!(grid.finetune_intervals_min, [0.5, 1.0, 2.0, 5.0, 10.0]);
    let small = AblationGrid {
        finetune_intervals_min: vec![0.05, 0.2],
        ..AblationGrid::default()
    };
    let rows = run_ablation(AblationKind::FinetuneInterval, &tiny(), &small).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.status == "ok"), "{rows:?}");
}

#[test]
fn default_sweep_enumerates_the_grids() {
    let spec = SweepSpec::default();
    let values: Vec<(SweepDimension, Vec<&str>)> = spec
        .axes
        .iter()
        .map(|a| (a.dimension, a.values.iter().map(String::as_str).collect()))
        .collect();
    assert_eq!(values[0], (SweepDimension::Flows, vec!["10", "20", "50", "100", "500"]));
    assert_eq!(values[1], (SweepDimension::QueueBdp, vec!["2", "5", "10", "15", "20"]));
    assert_eq!(values[2], (SweepDimension::DelayMs, vec!["20", "40", "100", "150", "200"]));
}

fn small_spec() -> SweepSpec {
    SweepSpec {
        axes: vec![
            SweepAxis {
                dimension: SweepDimension::QueueBdp,
                values: vec!["5".into(), "bogus".into()],
            },
            SweepAxis {
                dimension: SweepDimension::DelayMs,
                values: vec!["40".into()],
            },
        ],
        models: vec![ModelKind::LastValue, ModelKind::Ewma],
        closed_loop: true,
        closed_loop_duration_s: 6.0,
        experiment: tiny(),
        ..SweepSpec::default()
    }
}

#[test]
fn sweep_records_failed_cells_and_is_reproducible_across_job_counts() {
    let spec = small_spec();
    let a = run_sensitivity(&spec, 1);
    let b = run_sensitivity(&spec, 3);
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    let failed: Vec<_> = a.iter().filter(|r| r.status != "ok").collect();
    assert_eq!(failed.len(), 2);
    assert!(failed.iter().all(|r| r.value == "bogus" && r.f1.is_none()));
    let ok: Vec<_> = a.iter().filter(|r| r.status == "ok").collect();
    assert!(ok.iter().all(|r| r.f1.is_some() && r.p99_reduction_pct.is_some()));
    // Sorted by dimension, then value, then model.
    let keys: Vec<(String, String, String)> = a.iter().map(|r| (r.dimension.clone(), r.value.clone(), r.model.clone())).collect();
    assert_eq!(keys[0], ("delay_ms".into(), "40".into(), "ewma".into()));
    assert_eq!(keys[1], ("delay_ms".into(), "40".into(), "last-value".into()));
    assert_eq!(keys[2].0, "queue_bdp");
    let mut x = Vec::new();
    let mut y = Vec::new();
    write_rows_csv(&a, &mut x).unwrap();
    write_rows_csv(&b, &mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn single_cell_sweep_equals_one_simulation_and_score() {
    let spec = SweepSpec {
        axes: vec![SweepAxis {
            dimension: SweepDimension::DelayMs,
            values: vec!["40".into()],
        }],
        models: vec![ModelKind::LastValue],
        closed_loop: false,
        experiment: tiny(),
        ..SweepSpec::default()
    };
    let rows = run_sensitivity(&spec, 1);
    assert_eq!(rows.len(), 1);
    let mut cfg = tiny();
    cfg.sim.propagation_delay_ms = 40.0;
    let prep = prepare(&cfg).unwrap();
    let lv = swq_core::LastValue {
        horizon: cfg.model.horizon,
        window: cfg.model.window,
    };
    let e = evaluate_on(&prep, &cfg, &lv, &test_bases(&prep, &cfg, cfg.model.horizon)).unwrap();
    assert_eq!(rows[0].f1, Some(e.score.f1));
    assert_eq!(rows[0].true_events, Some(e.score.true_count));
    assert_eq!(rows[0].p99_reduction_pct, None);
}

#[test]
fn closed_loop_default_policy_leaves_the_run_unchanged() {
    let sim = SimConfig {
        duration_s: 5.0,
        flow_start_window_s: 1.0,
        ..SimConfig::l4s_selection()
    };
    let sel = swq_core::SelectorConfig::default();
    let a = run_closed_loop(&sim, Policy::Default, &sel, false).unwrap();
    let b = swq_core::netsim::run_simulation(&sim, None).unwrap();
    assert_eq!(a.trace, b);
    assert!(a.stats.is_none());
    let oracle = run_closed_loop(&sim, Policy::Oracle(recorded_latencies(&a.trace)), &sel, false).unwrap();
    let s = oracle.stats.unwrap();
    assert!(s.decisions > 0 && s.inferences > 0);
    assert!(oracle.report.conserved());
}

#[test]
fn experiment_config_rejects_overlapping_spans() {
    let mut cfg = tiny();
    cfg.test_span_s = [10.0, 24.0];
    assert!(matches!(prepare(&cfg), Err(ExperimentError::Config(_))));
    let mut cfg = tiny();
    cfg.test_span_s = [12.0, 30.0];
    assert!(matches!(prepare(&cfg), Err(ExperimentError::Config(_))));
}
