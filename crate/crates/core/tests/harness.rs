use mvedge::dataset::{generate_synthetic, SyntheticSpec};
use mvedge::harness::{
    prepare, run_experiment, run_one, run_prepared, sweep_threshold, write_csv, Backend, DatasetSource, DroppedPolicy,
    Execution, ExperimentConfig, SweepPoint, CSV_HEADER,
};
use mvedge::models::{Backbone, ToyModel, ToyModelParams};
use mvedge::network::{payload_wire_bytes, round_overhead, MessageCatalogue};
use mvedge::schemes::SchemeId;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetSource::Synthetic(SyntheticSpec {
        instances_per_class: 3,
        ..SyntheticSpec::default()
    });
    cfg.repeats = 2;
    cfg
}

#[test]
fn clean_ci_is_always_right() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::Ci];
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r.accuracy_pct, 100.0, "N={}", r.n);
        assert_eq!(r.transmission_gain_pct, 0.0);
        assert_eq!(r.rounds, 2 * 30);
    }
}

#[test]
fn dropped_accounting_and_gain_bounds() {
    let mut cfg = small();
    cfg.gammas = vec![0.2, 0.4, 1.0];
    let rows = run_experiment(&cfg).unwrap();
    for r in &rows {
        let exclude = r.accuracy_exclude_pct.unwrap_or(100.0);
        assert!(r.accuracy_count_as_error_pct <= exclude + 1e-9, "{r:?}");
        assert!((0.0..=100.0).contains(&r.transmission_gain_pct));
        assert!(r.transmitted_views <= r.n as f64);
        if !r.scheme.is_selective() || r.scheme.uses_histogram_context() {
            assert_eq!(r.dropped_rate, 0.0, "{r:?}");
        }
    }
}

#[test]
fn exclude_policy_reports_answered_rounds_only() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::SciE];
    cfg.n_values = vec![1];
    cfg.dropped = DroppedPolicy::Exclude;
    let row = &run_experiment(&cfg).unwrap()[0];
    assert!(row.dropped_rate > 0.0);
    assert_eq!(Some(row.accuracy_pct), row.accuracy_exclude_pct);
    assert!(row.accuracy_count_as_error_pct < row.accuracy_pct);
}

#[test]
fn overhead_matches_closed_form_for_ci() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::Ci];
    let prepared = prepare(&cfg).unwrap();
    let cat = MessageCatalogue::default();
    let per_node = payload_wire_bytes(cat.view_bytes(), &cfg.transport) + payload_wire_bytes(1, &cfg.transport);
    for n in 1..=6 {
        let point = SweepPoint {
            scheme: SchemeId::Ci,
            n,
            gamma: None,
            snr_db: None,
            failed: 0,
        };
        let out = run_one(&cfg, &prepared, &point, 0, n).unwrap();
        assert_eq!(round_overhead(&out.trace, &cfg.transport), n as u64 * per_node);
    }
    let rows = run_prepared(&cfg, &prepared).unwrap();
    for r in rows {
        assert_eq!(r.overhead_bytes, r.n as f64 * per_node as f64);
        assert_eq!(r.overhead_std, 0.0);
    }
}

#[test]
fn fewer_transmissions_never_cost_more() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::SciE, SchemeId::SciCh, SchemeId::SeiE, SchemeId::SeiCh];
    let groups = sweep_threshold(&cfg, &[0.4, 0.7, 1.0]).unwrap();
    assert_eq!(groups.iter().map(|g| g.0).collect::<Vec<_>>(), vec![0.4, 0.7, 1.0]);
    let at = |g: usize, s: SchemeId, n: usize| groups[g].1.iter().find(|r| r.scheme == s && r.n == n).unwrap().clone();
    for s in &cfg.schemes {
        for n in 1..=6 {
            for g in 0..2 {
                let (lo, hi) = (at(g, *s, n), at(g + 1, *s, n));
                assert!(lo.overhead_bytes <= hi.overhead_bytes + 1e-9, "{s} N={n}");
                assert!(lo.transmitted_views <= hi.transmitted_views + 1e-9, "{s} N={n}");
            }
        }
    }
}

#[test]
fn latency_trends() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::Ci, SchemeId::Ei];
    cfg.repeats = 4;
    let rows = run_experiment(&cfg).unwrap();
    let lat = |s: SchemeId| rows.iter().filter(|r| r.scheme == s).map(|r| r.latency_ms).collect::<Vec<_>>();
    let ci = lat(SchemeId::Ci);
    assert!(ci.windows(2).all(|w| w[1] > w[0]), "{ci:?}");
    let ei = lat(SchemeId::Ei);
    let (lo, hi) = ei.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 1.05, "{ei:?}");
}

#[test]
fn flops_follow_placement() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::Ci, SchemeId::Ei];
    cfg.n_values = vec![3];
    let rows = run_experiment(&cfg).unwrap();
    let ci = &rows[0];
    assert_eq!(ci.controller_flops, 3.0 * 30.7e9 + 0.3e6 + 239.4e6);
    assert_eq!(ci.source_flops, 0.0);
    let ei = &rows[1];
    assert_eq!(ei.source_flops, 30.7e9 + 239.4e6);
    assert_eq!(ei.controller_flops, 0.0);
}

#[test]
fn failed_nodes_shrink_the_round() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::Ci];
    cfg.n_values = vec![4];
    cfg.failures = vec![0, 1, 3];
    let rows = run_experiment(&cfg).unwrap();
    let views: Vec<_> = rows.iter().map(|r| (r.failed, r.transmitted_views)).collect();
    assert_eq!(views, vec![(0, 4.0), (1, 3.0), (3, 1.0)]);
}

#[test]
fn sequential_and_parallel_agree() {
    let mut cfg = small();
    cfg.snr_db = vec![None, Some(15.0)];
    cfg.execution = Execution::Sequential;
    let a = run_experiment(&cfg).unwrap();
    cfg.execution = Execution::Parallel;
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn noise_lowers_single_view_accuracy() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::Ci];
    cfg.n_values = vec![1];
    cfg.snr_db = vec![None, Some(20.0), Some(5.0)];
    let rows = run_experiment(&cfg).unwrap();
    let acc: Vec<_> = rows.iter().map(|r| (r.snr_db, r.accuracy_pct)).collect();
    assert_eq!(acc[0].0, Some(20.0));
    assert_eq!(acc[2].0, None);
    assert!(acc[1].1 < acc[0].1 && acc[0].1 <= acc[2].1, "{acc:?}");
}

#[test]
fn precomputed_backend_reads_sidecars() {
    let spec = SyntheticSpec {
        instances_per_class: 2,
        views_per_instance: 6,
        ..SyntheticSpec::default()
    };
    let mut data = generate_synthetic(&spec).unwrap();
    let toy = ToyModel::new(ToyModelParams::default()).unwrap();
    for s in &mut data.samples {
        s.embeddings = Some(s.views.iter().map(|v| toy.extract(v).unwrap()).collect());
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = data.write(dir.path()).unwrap();

    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetSource::Manifest(manifest);
    cfg.backend = Backend::Precomputed;
    cfg.schemes = vec![SchemeId::Ci, SchemeId::Ei];
    cfg.n_values = vec![1, 3];
    cfg.repeats = 1;
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r.accuracy_pct >= 90.0, "{r:?}");
    }

    cfg.n_values = vec![4];
    assert!(run_experiment(&cfg).is_err(), "6 views leave 3 after the context split");
}

#[test]
fn csv_has_one_line_per_point() {
    let mut cfg = small();
    cfg.schemes = vec![SchemeId::Ci, SchemeId::SeiCh];
    cfg.n_values = vec![2];
    let rows = run_experiment(&cfg).unwrap();
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert!(lines[1].starts_with("CI,2,,,0,2,"));
    assert!(lines[2].starts_with("SEI-CH,2,0.700000,,0,2,"));
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.conf");
    std::fs::write(
        &path,
        "schemes = all\nn = 2,5\nrepeats = 1\nseed = 9\nexecution = sequential\ndropped = exclude\n\
         transport.mss = 1000\nradio.total_rbs = 25\nsynthetic.instances_per_class = 1\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::from_file(&path).unwrap();
    assert_eq!(cfg.schemes.len(), 6);
    assert_eq!(cfg.n_values, vec![2, 5]);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.execution, Execution::Sequential);
    assert_eq!(cfg.dropped, DroppedPolicy::Exclude);
    assert_eq!(cfg.transport.mss, 1000);
    assert_eq!(cfg.radio.total_rbs, 25);
    cfg.validate().unwrap();
    assert!(ExperimentConfig::from_file(&dir.path().join("missing.conf")).is_err());
}
