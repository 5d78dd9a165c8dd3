use std::path::PathBuf;

use flocksim::harness::{
    parse_metrics_csv, preset, report, run_scenario, summarize, AggregatorKind, ScenarioConfig, Simulation,
    PRESETS,
};
use flocksim::learning::{fedavg, local_train, ModelShape, ParamVector};
use flocksim::rng;
use flocksim::Error;

fn small(name: &str, rounds: usize) -> ScenarioConfig {
    let mut cfg = preset(name).unwrap();
    cfg.rounds = rounds;
    cfg.data.samples_per_domain = 500;
    cfg
}

#[test]
fn zero_epochs_keep_the_global_and_the_metrics_flat() {
    for agg in ["flock", "fedavg", "fedadam", "local_only"] {
        let mut cfg = small("attack-comparison", 1).with_override("aggregator", agg).unwrap();
        cfg.trainer.local_epochs = 0;
        cfg.rounds = 3;
        let mut sim = Simulation::new(cfg).unwrap();
        let before = sim.models();
        let rows: Vec<_> = (0..3).map(|_| sim.step().unwrap()).collect();
        assert_eq!(sim.models()[0], before[0], "{agg}");
        for r in &rows[1..] {
            assert_eq!((r.accuracy, r.loss, r.asr), (rows[0].accuracy, rows[0].loss, rows[0].asr), "{agg}");
        }
    }
}

#[test]
fn single_round_run_emits_one_row() {
    let mut cfg = small("cross-domain", 1);
    cfg.trainer.local_epochs = 0;
    let r = run_scenario(&cfg).unwrap();
    assert_eq!(r.metrics.len(), 1);
    assert_eq!(r.metrics[0].round, 1);
    assert_eq!(r.ledger.as_ref().unwrap().len(), 1);
}

#[test]
fn identical_configs_give_byte_identical_outputs() {
    let cfg = small("attack-comparison", 6);
    let a = run_scenario(&cfg).unwrap();
    let b = run_scenario(&cfg).unwrap();
    assert_eq!(a.metrics_csv().unwrap(), b.metrics_csv().unwrap());
    assert_eq!(a.cross_domain_csv().unwrap(), b.cross_domain_csv().unwrap());
    assert_eq!(a.ledger.as_ref().unwrap().head_digest(), b.ledger.as_ref().unwrap().head_digest());

    let mut other = cfg.clone();
    other.master_seed = 2;
    assert_ne!(run_scenario(&other).unwrap().metrics_csv().unwrap(), a.metrics_csv().unwrap());
}

#[test]
fn fedavg_pipeline_equals_a_plain_reference_loop() {
    let mut cfg = small("cross-domain", 12);
    cfg.aggregator = AggregatorKind::Fedavg;
    cfg.pretrain = None;
    cfg.master_seed = 21;
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    let data = sim.data().trainer_data.clone();
    let sizes: Vec<f64> = data.iter().map(|d| d.len() as f64).collect();
    let shape = ModelShape::new(cfg.data.features, cfg.data.classes, cfg.trainer.model);
    let mut global = ParamVector::init(shape, &mut rng::stream(cfg.master_seed, "init", &[]));
    assert_eq!(sim.models()[0], global);
    for round in 0..12u64 {
        let locals: Vec<ParamVector> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let mut s = rng::stream(cfg.master_seed, "local", &[i as u64, round]);
                local_train(&global, d, &cfg.trainer, &mut s).unwrap()
            })
            .collect();
        global = fedavg(&locals, &sizes).unwrap();
        sim.step().unwrap();
        assert_eq!(sim.models()[0], global, "round {round}");
    }
}

#[test]
fn every_aggregator_emits_one_finite_row_per_round() {
    for agg in ["flock", "fedavg", "scaffold", "fedadam", "local_only"] {
        let cfg = small("attack-comparison", 5).with_override("aggregator", agg).unwrap();
        let r = run_scenario(&cfg).unwrap();
        assert_eq!(r.metrics.iter().map(|m| m.round).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        for m in &r.metrics {
            assert!(m.accuracy.is_finite() && m.loss.is_finite() && m.asr.is_some_and(f64::is_finite));
            assert!(m.consensus.iter().all(|c| c.is_finite()));
        }
        assert_eq!(r.ledger.is_some(), agg == "flock");
        // the CSV carries the same rows
        let text = String::from_utf8(r.metrics_csv().unwrap()).unwrap();
        assert_eq!(parse_metrics_csv(&text).unwrap().len(), 5);
    }
    let clean = run_scenario(&small("cross-domain", 2)).unwrap();
    assert!(clean.metrics.iter().all(|m| m.asr.is_none()));
}

#[test]
fn report_summaries_match_the_raw_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("attack-comparison", 45).with_override("aggregator", "fedavg").unwrap();
    let result = run_scenario(&cfg).unwrap();
    let run_dir = dir.path().join("fedavg");
    result.write_outputs(&run_dir).unwrap();
    let csv = run_dir.join("metrics.csv");

    let one = report(std::slice::from_ref(&csv)).unwrap();
    assert_eq!(one.summaries.len(), 1);
    let s = &one.summaries[0];
    assert_eq!(s.scenario, "fedavg");
    assert_eq!(s.rounds, 45);
    assert_eq!(s.asr_at_40, result.metrics[39].asr);
    assert_eq!(s.final_asr, result.metrics[44].asr);
    assert_eq!(s.final_accuracy, result.metrics[44].accuracy);
    assert_eq!(s.cross_domain.as_ref().unwrap().rows(), 1);

    let copy = dir.path().join("copy.csv");
    std::fs::copy(&csv, &copy).unwrap();
    let two = report(&[csv.clone(), copy]).unwrap();
    let line = |r: &flocksim::harness::Report, k: usize| r.summary_csv().lines().nth(k + 1).unwrap().to_string();
    let strip = |l: String| l.split_once(',').unwrap().1.to_string();
    assert_eq!(strip(line(&two, 0)), strip(line(&two, 1)));
    assert_eq!(strip(line(&one, 0)), strip(line(&two, 0)));

    two.write(&dir.path().join("report")).unwrap();
    for f in ["summary.csv", "summary.md", "plot.csv"] {
        assert!(dir.path().join("report").join(f).exists());
    }
    assert!(matches!(report(&[]), Err(Error::Empty(_))));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "round,accuracy\nx,y\n").unwrap();
    assert!(summarize(&bad).is_err());
}

#[test]
fn isolated_vs_global_comparison_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths: Vec<PathBuf> = Vec::new();
    for name in ["cross-domain", "local-vs-fed"] {
        let r = run_scenario(&small(name, 3)).unwrap();
        r.write_outputs(&dir.path().join(name)).unwrap();
        paths.push(dir.path().join(name).join("metrics.csv"));
    }
    let rep = report(&paths).unwrap();
    assert_eq!(rep.comparisons.len(), 1);
    assert_eq!(rep.comparisons[0].global, "cross-domain");
    assert_eq!(rep.comparisons[0].isolated, "local-vs-fed");
}

#[test]
fn presets_match_their_documented_shape() {
    let a = preset("attack-comparison").unwrap();
    assert_eq!((a.trainers.len(), a.validators.len(), a.rounds), (8, 4, 200));
    assert_eq!(a.attack.as_ref().unwrap().attackers, vec![0]);
    let c = preset("cross-domain").unwrap();
    assert_eq!((c.data.domains, c.trainers.len()), (8, 8));
    assert!(c.attack.is_none());
    let l = preset("local-vs-fed").unwrap();
    assert_eq!(l.aggregator, AggregatorKind::LocalOnly);
    assert!(matches!(preset("attack-sideways"), Err(Error::Config { .. })));
    for p in PRESETS {
        let cfg = preset(p).unwrap();
        assert_eq!(ScenarioConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
    }
}

#[test]
fn unprotected_fedavg_asr_trends_up_past_eighty_percent_by_round_forty() {
    let mut at40 = Vec::new();
    for seed in 1..=5u64 {
        let mut cfg = preset("attack-comparison").unwrap().with_override("aggregator", "fedavg").unwrap();
        cfg.rounds = 40;
        cfg.master_seed = seed;
        let asr: Vec<f64> = run_scenario(&cfg).unwrap().metrics.iter().map(|m| m.asr.unwrap()).collect();
        let early = asr[..10].iter().sum::<f64>() / 10.0;
        let late = asr[30..].iter().sum::<f64>() / 10.0;
        assert!(late > early, "seed {seed}: ASR falls from {early} to {late}");
        at40.push(asr[39]);
    }
    at40.sort_by(f64::total_cmp);
    assert!(at40[2] >= 0.8, "round-40 ASR by seed (sorted): {at40:?}");
}

#[test]
fn config_errors_name_the_field() {
    let cfg = preset("attack-comparison").unwrap();
    let err = cfg.with_override("rounds", "0").unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path == "rounds"), "{err}");
    let err = cfg.with_override("attack.attackers", "[9]").unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path == "attack.attackers"), "{err}");
    let err = cfg.with_override("filter.kappa", "-1").unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path.contains("kappa")), "{err}");
    let err = ScenarioConfig::from_json("{\"name\": 3}").unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}
