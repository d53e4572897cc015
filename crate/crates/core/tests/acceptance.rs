//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvedge::dataset::SyntheticSpec;
use mvedge::descriptors::{cosine, hist, nhi, srgb_to_lab};
use mvedge::harness::{
    default_gamma_grid, prepare, run_experiment, run_one, sweep_threshold, DatasetSource, ExperimentConfig, MetricsRow,
    SweepPoint,
};
use mvedge::models::PrecomputedBackbone;
use mvedge::network::{payload_wire_bytes, round_flops, round_overhead, ComputeCostModel, MessageCatalogue};
use mvedge::schemes::{consensus, quality_gate, run_round, Gate, SchemeConfig, SchemeId};
use mvedge::types::{CaptureId, Context, Embedding, MultiViewInstance, NodeId, Prediction, View};

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn point(scheme: SchemeId, n: usize, gamma: Option<f64>) -> SweepPoint {
    SweepPoint {
        scheme,
        n,
        gamma,
        snr_db: None,
        failed: 0,
    }
}

fn catalogue_sizes() -> Check {
    let cat = MessageCatalogue::default();
    let got = [cat.view_bytes(), cat.embedding_bytes(), cat.histogram_bytes(), cat.prediction_bytes()];
    ensure!(got == [602_112, 100_352, 4_096, 1], "payloads {got:?}");
    let ctx_e = Context::Embedding(Embedding::new(vec![0.0; 25_088]).map_err(|e| e.to_string())?);
    ensure!(cat.context_bytes(&ctx_e) == 100_352, "embedding context {}", cat.context_bytes(&ctx_e));
    let h = hist(&View::uniform(2, 2, [0; 3]).unwrap(), 32).map_err(|e| e.to_string())?;
    ensure!(cat.context_bytes(&Context::Histogram(h)) == 4_096, "histogram context");
    Ok(())
}

fn overhead_calibration() -> Check {
    let cfg = ExperimentConfig {
        schemes: vec![SchemeId::Ci],
        ..ExperimentConfig::default()
    };
    let prepared = prepare(&cfg).map_err(|e| e.to_string())?;
    let total = |n: usize| -> Result<u64, String> {
        let out = run_one(&cfg, &prepared, &point(SchemeId::Ci, n, None), 0, 0).map_err(|e| e.to_string())?;
        Ok(round_overhead(&out.trace, &cfg.transport))
    };
    let one = total(1)?;
    let dev = (one as f64 / 623_580.0 - 1.0) * 100.0;
    ensure!(dev.abs() <= 3.0, "CI N=1 overhead {one} B is {dev:+.2}% off");
    let prediction = payload_wire_bytes(1, &cfg.transport);
    for n in 2..=6 {
        let got = total(n)?;
        let per_node = n as u64 * one;
        ensure!(
            got == per_node || got + prediction == per_node || got == per_node + prediction,
            "N={n}: {got} B vs {per_node} B"
        );
    }
    Ok(())
}

fn clean_ci_accuracy() -> Check {
    let cfg = ExperimentConfig {
        schemes: vec![SchemeId::Ci],
        repeats: 3,
        ..ExperimentConfig::default()
    };
    for r in run_experiment(&cfg).map_err(|e| e.to_string())? {
        ensure!(r.accuracy_pct == 100.0, "CI N={} accuracy {}", r.n, r.accuracy_pct);
    }
    Ok(())
}

fn monotone_in_gamma() -> Check {
    let cfg = ExperimentConfig {
        schemes: vec![SchemeId::SciE, SchemeId::SciCh, SchemeId::SeiE, SchemeId::SeiCh],
        repeats: 12,
        ..ExperimentConfig::default()
    };
    let mut grid = vec![0.0];
    grid.extend(default_gamma_grid());
    let groups = sweep_threshold(&cfg, &grid).map_err(|e| e.to_string())?;
    let key = |r: &MetricsRow| (r.scheme, r.n);
    let mut prev: BTreeMap<(SchemeId, usize), MetricsRow> = BTreeMap::new();
    for (gamma, rows) in &groups {
        for r in rows {
            if let Some(p) = prev.get(&key(r)) {
                let eps = 1e-9;
                ensure!(
                    r.accuracy_count_as_error_pct + eps >= p.accuracy_count_as_error_pct,
                    "{} N={} accuracy falls at gamma {gamma}: {} -> {}",
                    r.scheme,
                    r.n,
                    p.accuracy_count_as_error_pct,
                    r.accuracy_count_as_error_pct
                );
                ensure!(
                    r.transmitted_views + eps >= p.transmitted_views,
                    "{} N={} V' falls at gamma {gamma}",
                    r.scheme,
                    r.n
                );
            }
            prev.insert(key(r), r.clone());
        }
    }
    Ok(())
}

fn full_threshold_matches_baseline() -> Check {
    let cfg = ExperimentConfig {
        schemes: vec![SchemeId::Ci, SchemeId::Ei, SchemeId::SciE, SchemeId::SeiE],
        repeats: 2,
        ..ExperimentConfig::default()
    };
    let prepared = prepare(&cfg).map_err(|e| e.to_string())?;
    let pairs = [(SchemeId::SciE, SchemeId::Ci), (SchemeId::SeiE, SchemeId::Ei)];
    let mut compared = 0;
    for (selective, baseline) in pairs {
        for n in 1..=6 {
            for repeat in 0..cfg.repeats {
                for sample in 0..prepared.dataset.samples.len() {
                    let a = run_one(&cfg, &prepared, &point(selective, n, Some(1.0)), repeat, sample);
                    let b = run_one(&cfg, &prepared, &point(baseline, n, None), repeat, sample);
                    let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
                    ensure!(
                        a.prediction() == b.prediction(),
                        "{selective} vs {baseline} N={n} sample {sample}: {:?} vs {:?}",
                        a.prediction(),
                        b.prediction()
                    );
                    compared += 1;
                }
            }
        }
    }
    ensure!(compared > 0, "nothing compared");
    Ok(())
}

fn strict_gate() -> Check {
    for gamma in [0.0, 0.4, 0.7, 1.0] {
        ensure!(quality_gate(gamma, gamma) == Gate::Discard, "similarity == {gamma} kept");
        let below = f64::from_bits(gamma.to_bits().wrapping_sub(1));
        if gamma > 0.0 {
            ensure!(quality_gate(below, gamma) == Gate::Keep, "similarity just below {gamma} discarded");
        }
        ensure!(quality_gate(gamma + 1e-12, gamma) == Gate::Discard, "similarity above {gamma} kept");
        ensure!(quality_gate(-1.0, gamma) == Gate::Keep || gamma <= -1.0, "similarity -1 discarded at {gamma}");
    }

    // A view identical to the context has cosine 1: gamma 1 must still discard it.
    let mut fx = common::Fixture::new(4, 4);
    fx.view([10, 20, 30], common::unit(4, 1));
    let instance = fx.instance(1);
    let ctx = Context::Embedding(Embedding::new(common::unit(4, 1)).unwrap());
    let cfg = SchemeConfig::new(SchemeId::SciE).with_gamma(1.0);
    let out = run_round(&instance, &cfg, &fx.pipeline(), &ctx).map_err(|e| e.to_string())?;
    ensure!(out.transmitted_views == 0, "identical view transmitted at gamma 1");
    Ok(())
}

fn ch_single_node_never_drops() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut backbone = PrecomputedBackbone::new(4);
    let head = mvedge::models::CentroidHead::new((0..4).map(|k| Embedding::new(common::unit(4, k)).unwrap()).collect())
        .map_err(|e| e.to_string())?;
    let mut instances = Vec::new();
    for i in 0..100u32 {
        let (w, h) = (rng.random_range(1..=24u32), rng.random_range(1..=24u32));
        let pixels: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
        let capture = CaptureId { instance: i, view: 0 };
        let e: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        backbone.insert(capture, Embedding::new(e).unwrap()).map_err(|e| e.to_string())?;
        let view = View::new(w, h, pixels)
            .map_err(|e| e.to_string())?
            .with_node(NodeId::source(0))
            .with_capture(capture);
        instances.push(MultiViewInstance {
            instance_id: format!("r{i}"),
            true_label: Prediction::new(0, 4).unwrap(),
            views: vec![view],
            context_views: Vec::new(),
        });
    }
    let pipeline = mvedge::pipeline::Pipeline::new(&backbone, &head);
    for (i, inst) in instances.iter().enumerate() {
        let gamma: f64 = if i % 10 == 0 { [0.0, 1.0][i / 10 % 2] } else { rng.random() };
        for scheme in [SchemeId::SciCh, SchemeId::SeiCh] {
            let cfg = SchemeConfig::new(scheme).with_gamma(gamma);
            let out = run_round(inst, &cfg, &pipeline, &Context::Empty).map_err(|e| e.to_string())?;
            ensure!(
                !out.verdict.is_dropped() && out.transmitted_views == 1,
                "{scheme} dropped view {i} at gamma {gamma}"
            );
        }
    }
    Ok(())
}

fn random_view(rng: &mut ChaCha8Rng) -> View {
    let pixels: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
    View::new(16, 16, pixels).unwrap()
}

fn descriptors() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (v1, v2) = (random_view(&mut rng), random_view(&mut rng));
        for bins in [4, 8, 32] {
            let (h1, h2) = (hist(&v1, bins).unwrap(), hist(&v2, bins).unwrap());
            ensure!((h1.mass() - 1.0).abs() <= 1e-6, "mass {}", h1.mass());
            ensure!((nhi(&h1, &h1).unwrap() - 1.0).abs() <= 1e-12, "nhi(h,h) != 1");
            ensure!(nhi(&h1, &h2).unwrap() == nhi(&h2, &h1).unwrap(), "nhi not symmetric");
        }
        for (coarse, fine) in [(4, 8), (8, 32)] {
            let (hc, hf) = (hist(&v1, coarse).unwrap(), hist(&v1, fine).unwrap());
            let r = fine / coarse;
            for a in 0..coarse {
                for b in 0..coarse {
                    let merged: f64 = (0..r)
                        .flat_map(|i| (0..r).map(move |j| (a * r + i, b * r + j)))
                        .map(|(i, j)| hf.get(i, j))
                        .sum();
                    ensure!((merged - hc.get(a, b)).abs() <= 1e-9, "{coarse}->{fine} bucket ({a},{b}) differs");
                }
            }
        }
    }
    let white = srgb_to_lab([255; 3]);
    let black = srgb_to_lab([0; 3]);
    ensure!(
        (white.l - 100.0).abs() <= 0.5 && white.a.abs() <= 0.5 && white.b.abs() <= 0.5,
        "white {white:?}"
    );
    ensure!(black.l.abs() <= 0.5 && black.a.abs() <= 0.5 && black.b.abs() <= 0.5, "black {black:?}");
    for _ in 0..50 {
        let c = Embedding::new((0..64).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let e = Embedding::new((0..64).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let k = rng.random_range(1e-3..1e3);
        let base = cosine(&c, &e).unwrap();
        ensure!((cosine(&c, &e.scaled(k)).unwrap() - base).abs() <= 1e-12, "cosine not scale invariant ({k})");
        ensure!((cosine(&c.scaled(k), &e).unwrap() - base).abs() <= 1e-12, "cosine not scale invariant ({k})");
    }
    Ok(())
}

fn consensus_oracle() -> Check {
    const K: usize = 4;
    fn oracle(labels: &[usize]) -> usize {
        let mut counts = [0usize; K];
        labels.iter().for_each(|&l| counts[l] += 1);
        let best = *counts.iter().max().unwrap();
        counts.iter().position(|&c| c == best).unwrap()
    }
    // Non-decreasing sequences enumerate multisets; every rotation of each
    // is also checked so input order cannot matter.
    fn walk(prefix: &mut Vec<usize>, checked: &mut usize) -> Check {
        if !prefix.is_empty() {
            let want = oracle(prefix);
            for shift in 0..prefix.len() {
                let mut seq = prefix.clone();
                seq.rotate_left(shift);
                let preds: Vec<_> = seq.iter().map(|&l| Prediction::new(l, K).unwrap()).collect();
                let got = consensus(&preds).map_err(|e| e.to_string())?.label();
                ensure!(got == want, "{seq:?}: consensus {got}, oracle {want}");
                *checked += 1;
            }
        }
        if prefix.len() == 5 {
            return Ok(());
        }
        let start = prefix.last().copied().unwrap_or(0);
        for l in start..K {
            prefix.push(l);
            walk(prefix, checked)?;
            prefix.pop();
        }
        Ok(())
    }
    ensure!(consensus(&[]).is_err(), "empty input accepted");
    let mut checked = 0;
    walk(&mut Vec::new(), &mut checked)?;
    ensure!(checked > 0, "nothing checked");
    Ok(())
}

fn latency_trends() -> Check {
    let cfg = ExperimentConfig {
        schemes: vec![SchemeId::Ci, SchemeId::Ei],
        repeats: 12,
        ..ExperimentConfig::default()
    };
    let rows = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let lat = |s: SchemeId| rows.iter().filter(|r| r.scheme == s).map(|r| r.latency_ms).collect::<Vec<_>>();
    let ci = lat(SchemeId::Ci);
    ensure!(ci.windows(2).all(|w| w[1] > w[0]), "CI latency not increasing: {ci:.2?}");
    let ei = lat(SchemeId::Ei);
    let lo = ei.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ei.iter().copied().fold(0.0, f64::max);
    ensure!((hi - lo) / lo < 0.05, "EI latency spread {:.1}%: {ei:.2?}", (hi - lo) / lo * 100.0);
    Ok(())
}

fn noise_ordering() -> Check {
    let snrs = [20.0, 15.0, 10.0];
    let (mut ch_wins, mut central_wins) = (0, 0);
    for seed in 0..12u64 {
        let mut cfg = ExperimentConfig {
            seed,
            repeats: 1,
            schemes: SchemeId::ALL.to_vec(),
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                seed: seed + 1,
                ..SyntheticSpec::default()
            }),
            ..ExperimentConfig::default()
        };
        cfg.snr_db = std::iter::once(None).chain(snrs.iter().map(|&s| Some(s))).collect();
        let rows = run_experiment(&cfg).map_err(|e| e.to_string())?;
        // Mean accuracy over N for each (scheme, snr).
        let mean = |s: SchemeId, snr: Option<f64>| {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.scheme == s && r.snr_db == snr)
                .map(|r| r.accuracy_count_as_error_pct)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let degradation = |s: SchemeId| snrs.iter().map(|&db| mean(s, None) - mean(s, Some(db))).sum::<f64>();
        let avg = |ss: &[SchemeId]| ss.iter().map(|&s| degradation(s)).sum::<f64>() / ss.len() as f64;
        use SchemeId::*;
        ch_wins += usize::from(avg(&[SciCh, SeiCh]) <= avg(&[SciE, SeiE]));
        central_wins += usize::from(avg(&[Ci, SciE, SciCh]) <= avg(&[Ei, SeiE, SeiCh]));
    }
    ensure!(
        ch_wins >= 9 && central_wins >= 9,
        "CH <= E in {ch_wins}/12 seeds, centralized <= ensemble in {central_wins}/12"
    );
    Ok(())
}

fn deterministic_cli() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_mvedge"))
            .args(["run", "--synthetic", "--scheme", "all", "--repeats", "2", "--snr", "clean,15", "--seed", "3"])
            .arg("--out")
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        ensure!(status.success(), "mvedge run exited with {status}");
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let (a, b) = (run("a.csv")?, run("b.csv")?);
    ensure!(!a.is_empty(), "empty CSV");
    ensure!(a == b, "CSV outputs differ");
    Ok(())
}

fn flop_accounting() -> Check {
    let cost = ComputeCostModel::default();
    let cfg = ExperimentConfig {
        schemes: vec![SchemeId::Ci, SchemeId::Ei],
        ..ExperimentConfig::default()
    };
    let prepared = prepare(&cfg).map_err(|e| e.to_string())?;
    for n in 1..=6 {
        let ci = run_one(&cfg, &prepared, &point(SchemeId::Ci, n, None), 0, n).map_err(|e| e.to_string())?;
        let t = round_flops(&ci, &cost);
        let want = ci.transmitted_views as u64 * 30_700_000_000 + 300_000 + 239_400_000;
        ensure!(t.controller == want, "CI N={n}: controller {} != {want}", t.controller);
        ensure!(t.source_total() == 0, "CI N={n}: sources ran {}", t.source_total());

        let ei = run_one(&cfg, &prepared, &point(SchemeId::Ei, n, None), 0, n).map_err(|e| e.to_string())?;
        let t = round_flops(&ei, &cost);
        ensure!(t.controller == 0, "EI N={n}: controller ran {}", t.controller);
        ensure!(t.per_source.len() == n, "EI N={n}: {} sources computed", t.per_source.len());
        for (node, f) in &t.per_source {
            ensure!(*f == 30_700_000_000 + 239_400_000, "EI N={n}: {node} ran {f}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("message catalogue sizes", catalogue_sizes),
        ("overhead calibration", overhead_calibration),
        ("clean CI accuracy, gamma monotonicity, full-threshold equivalence", || {
            clean_ci_accuracy()?;
            monotone_in_gamma()?;
            full_threshold_matches_baseline()
        }),
        ("strict quality gate", strict_gate),
        ("CH single-node rounds never drop", ch_single_node_never_drops),
        ("descriptor correctness", descriptors),
        ("consensus oracle equivalence", consensus_oracle),
        ("latency trends", latency_trends),
        ("noise sensitivity ordering", noise_ordering),
        ("deterministic CSV output", deterministic_cli),
        ("FLOP accounting", flop_accounting),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("PASS {:>2} {name} ({secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
