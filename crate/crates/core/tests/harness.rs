use std::path::Path;
use std::process::Command;

use fedfmc::federation::Phase;
use fedfmc::harness::{
    emit_metrics, load_checkpoint, load_model, load_preset, parse_config, parse_config_str,
    run_experiment, save_checkpoint, save_model, write_metrics, Algorithm, Checkpoint,
    CheckpointError, ConfigError, Experiment, HarnessError, RunConfig, HEADER, MAGIC, PRESETS,
};
use fedfmc::learner::ModelParams;
use proptest::prelude::*;

const MINIMAL: &str = "\
algorithm = fedfmc
dataset = synthetic
archetypes = 0@1.0 ; 1@1.0 ; 2@1.0
rounds = 25
participants_per_round = 6
";

/// A quick FedFMC run: small shards, a small model, a threshold low enough to fork.
fn quick(extra: &str) -> RunConfig {
    let text = format!(
        "{MINIMAL}per_class = 300\ntest_per_class = 50\nsamples_per_device = 60\n\
         hidden_layers = 8\nlocal_epochs = 1\nh_f = 1.0\nmax_rounds_per_group = 6\n{extra}"
    );
    parse_config_str(&text, None).unwrap()
}

fn csv_bytes(rows: &[fedfmc::harness::MetricsRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_metrics(rows, &mut out).unwrap();
    out
}

#[test]
fn minimal_config_gets_documented_defaults() {
    let cfg = parse_config_str(MINIMAL, None).unwrap();
    assert_eq!(cfg.fork.warmup_rounds, 5);
    assert_eq!(cfg.fork.cooldown_from_end, 5);
    assert_eq!(cfg.fork.min_gap, 4);
    assert_eq!(cfg.merge.window, 5);
    assert_eq!(cfg.merge.accuracy_gap, 1.0);
    assert_eq!(cfg.merge.participation_fraction, 0.5);
    assert!(cfg.merge.ewc_enabled);
    assert_eq!(cfg.devices_per_archetype, 4);
    assert_eq!(cfg.num_devices(), 12);

    // every effective value is echoed
    let echoed = cfg.to_config_string();
    for line in [
        "warmup_rounds = 5",
        "cooldown_from_end = 5",
        "min_gap = 4",
        "window = 5",
        "accuracy_gap = 1.0",
        "h_f = 2.0",
    ] {
        assert!(echoed.lines().any(|l| l == line), "missing {line:?}");
    }
}

#[test]
fn config_errors_name_the_problem() {
    let too_many = format!("{MINIMAL}devices_per_archetype = 1\n");
    match parse_config_str(&too_many, None) {
        Err(ConfigError::Constraint { key, line, .. }) => {
            assert_eq!(key, "participants_per_round");
            assert_eq!(line, Some(5));
        }
        other => panic!("{other:?}"),
    }

    let dup = format!("{MINIMAL}rounds = 30\n");
    match parse_config_str(&dup, None) {
        Err(ConfigError::DuplicateKey { key, first, second }) => {
            assert_eq!((key.as_str(), first, second), ("rounds", 4, 6));
        }
        other => panic!("{other:?}"),
    }

    let unknown = format!("{MINIMAL}round = 3\n");
    assert!(matches!(
        parse_config_str(&unknown, None),
        Err(ConfigError::UnknownKey { line: 6, .. })
    ));

    let missing = MINIMAL.replace("rounds = 25\n", "");
    assert!(matches!(
        parse_config_str(&missing, None),
        Err(ConfigError::Missing("rounds"))
    ));

    for bad in [
        "h_f = 0",
        "h_f = abc",
        "ewc_enabled = maybe",
        "validation_fraction = 1.0",
    ] {
        let text = format!("{MINIMAL}{bad}\n");
        assert!(parse_config_str(&text, None).is_err(), "{bad} accepted");
    }
    assert!(matches!(
        parse_config(Path::new("/nonexistent/run.conf")),
        Err(ConfigError::Io { .. })
    ));
}

#[test]
fn relative_data_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(
        &path,
        "algorithm = fedavg\ndataset = csv\ndata_path = d.csv\narchetypes = 0\n\
         rounds = 1\nparticipants_per_round = 1\n",
    )
    .unwrap();
    let cfg = parse_config(&path).unwrap();
    match cfg.dataset {
        fedfmc::harness::DatasetSource::Csv { path: p } => assert_eq!(p, dir.path().join("d.csv")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn presets_encode_the_archetypes() {
    let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
    assert_eq!(names, ["three-archetypes", "grouped-archetypes"]);
    let labels = |cfg: &RunConfig| -> Vec<(Vec<usize>, f64)> {
        cfg.archetypes
            .iter()
            .map(|a| (a.labels().iter().copied().collect(), a.bias()))
            .collect()
    };
    let three = load_preset("three-archetypes").unwrap().unwrap();
    assert_eq!(
        labels(&three),
        vec![(vec![0], 1.0), (vec![1], 1.0), (vec![2], 1.0)]
    );
    assert_eq!(
        (
            three.num_devices(),
            three.rounds,
            three.participants_per_round
        ),
        (12, 25, 6)
    );
    let grouped = load_preset("grouped-archetypes").unwrap().unwrap();
    assert_eq!(
        labels(&grouped),
        vec![
            (vec![0, 1, 2, 3], 1.0),
            (vec![4, 5, 6], 1.0),
            (vec![7, 8, 9], 1.0)
        ]
    );
    assert!(load_preset("nope").is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_string_round_trips(
        lr in 1e-4f64..1.0,
        h_f in 0.01f64..10.0,
        sep in 0.1f64..10.0,
        gap in 0.0f64..5.0,
        frac in 0.01f64..=1.0,
        seed in any::<u64>(),
        hidden in prop::collection::vec(1usize..64, 0..3),
        fedavg in any::<bool>(),
        ewc in any::<bool>(),
    ) {
        let mut cfg = parse_config_str(MINIMAL, None).unwrap();
        cfg.train.learning_rate = lr;
        cfg.fork.h_f = h_f;
        cfg.merge.accuracy_gap = gap;
        cfg.merge.participation_fraction = frac;
        cfg.merge.ewc_enabled = ewc;
        cfg.master_seed = seed;
        cfg.hidden_layers = hidden;
        if fedavg {
            cfg.algorithm = Algorithm::FedAvg;
        }
        if let fedfmc::harness::DatasetSource::Synthetic { separation, .. } = &mut cfg.dataset {
            *separation = sep;
        }
        let back = parse_config_str(&cfg.to_config_string(), None).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn model_files_round_trip(dims in prop::collection::vec(1usize..6, 2..4), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = fedfmc::learner::param_count(&dims);
        let values: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 1e6 - 5e5).collect();
        let model = ModelParams::from_values(&dims, values).unwrap();
        let bytes = Checkpoint::model_only(model.clone()).to_bytes();
        prop_assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap().model;
        for (a, b) in back.values().iter().zip(model.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.layer_dims(), model.layer_dims());
    }
}

#[test]
fn one_fedavg_round_on_three_devices() {
    let cfg = parse_config_str(
        "algorithm = fedavg\ndataset = synthetic\narchetypes = 0 ; 1 ; 2\n\
         devices_per_archetype = 1\nrounds = 1\nparticipants_per_round = 2\nper_class = 300\n\
         test_per_class = 50\n",
        None,
    )
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.rows.len(), 1);
    let text = String::from_utf8(csv_bytes(&out.rows)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "round,phase,group_count,device_id,group_id,val_loss,val_acc,archetype_id,\
         archetype_test_acc,global_test_acc,updates_delta,transfers_delta"
    );
    assert_eq!(lines[0].split(',').collect::<Vec<_>>(), HEADER);
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells.len(), HEADER.len());
    assert_eq!(&cells[..5], ["1", "fedavg", "1", "0;1;2", "0;0;0"]);
    // 2 local epochs on 2 devices; 2K + N transfers
    assert_eq!(&cells[10..], ["4", "7"]);
    assert!(out.costs.passed());
}

#[test]
fn fedfmc_run_rows_and_determinism() {
    let cfg = quick("");
    let a = run_experiment(&cfg).unwrap();
    let phases: Vec<Phase> = a.rows.iter().map(|r| r.phase).collect();
    assert!(phases[..25].iter().all(|&p| p == Phase::Fork));
    assert!(phases[25..].iter().all(|&p| p == Phase::Merge));
    let switches = phases.windows(2).filter(|w| w[0] != w[1]).count();
    if a.fork_groups.len() > 1 {
        assert_eq!(switches, 1);
    }
    assert!(a.rows.windows(2).all(|w| w[1].round == w[0].round + 1));
    assert!(a.costs.updates_ok());
    assert!(a.costs.passed(), "{}", a.report());

    let b = run_experiment(&cfg).unwrap();
    assert_eq!(csv_bytes(&a.rows), csv_bytes(&b.rows));
    assert_eq!(a.final_model, b.final_model);
    assert_eq!(a.report(), b.report());

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    emit_metrics(&a.rows, &p1).unwrap();
    emit_metrics(&a.rows, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert!(emit_metrics(&[], &p1).is_err());

    let report = a.report();
    assert!(report.contains("h_f = 1.0"));
    assert!(report.contains(&format!("{}", a.costs.updates_expected)));
}

#[test]
fn different_seeds_differ() {
    let a = run_experiment(&quick("master_seed = 1\n")).unwrap();
    let b = run_experiment(&quick("master_seed = 2\n")).unwrap();
    assert_ne!(csv_bytes(&a.rows), csv_bytes(&b.rows));
}

#[test]
fn checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::new(quick("")).unwrap();
    exp.run_fork().unwrap();
    let ckpt = exp.checkpoint();
    let path = dir.path().join("fork.fmc");
    save_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

    let model_path = dir.path().join("m.fmc");
    save_model(&model_path, &ckpt.model).unwrap();
    assert_eq!(load_model(&model_path).unwrap(), ckpt.model);

    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}"));
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(load_checkpoint(&p).is_err(), "cut at {cut} accepted");
    }
    let mut versioned = bytes.clone();
    versioned[4] = 9;
    let p = dir.path().join("v9");
    std::fs::write(&p, &versioned).unwrap();
    assert!(matches!(
        load_checkpoint(&p),
        Err(CheckpointError::Version { found: 9 })
    ));
    let mut trailing = bytes;
    trailing.push(0);
    std::fs::write(&p, &trailing).unwrap();
    assert!(matches!(
        load_checkpoint(&p),
        Err(CheckpointError::TrailingBytes(1))
    ));

    // a checkpoint from a different architecture does not restore
    let mut other = quick("");
    other.hidden_layers = vec![4];
    assert!(matches!(
        Experiment::restore(other, &ckpt),
        Err(HarnessError::Checkpoint(CheckpointError::Layout(_)))
    ));
}

#[test]
fn resume_after_fork_matches_uninterrupted_run() {
    for seed in 0..2 {
        let cfg = quick(&format!("master_seed = {seed}\n"));
        let full = run_experiment(&cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fork.fmc");
        let mut first = Experiment::new(cfg.clone()).unwrap();
        first.run_fork().unwrap();
        save_checkpoint(&path, &first.checkpoint()).unwrap();
        drop(first);

        let mut resumed = Experiment::restore(cfg, &load_checkpoint(&path).unwrap()).unwrap();
        let model = resumed.run_merge().unwrap();
        assert_eq!(model, full.final_model, "seed {seed}");
        let merge_rows: Vec<_> = full
            .rows
            .iter()
            .filter(|r| r.phase == Phase::Merge)
            .cloned()
            .collect();
        assert_eq!(csv_bytes(resumed.rows()), csv_bytes(&merge_rows));
    }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedfmc"))
}

#[test]
fn cli_end_to_end() {
    let out = cli().args(["presets", "list"]).output().unwrap();
    assert!(out.status.success());
    let listing = String::from_utf8(out.stdout).unwrap();
    assert!(listing.contains("three-archetypes") && listing.contains("grouped-archetypes"));

    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, quick("").to_config_string()).unwrap();
    let out_dir = dir.path().join("out");
    let out = cli()
        .args([
            "run",
            conf.to_str().unwrap(),
            "--seed",
            "3",
            "--no-ewc",
            "--out",
        ])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.contains("master_seed = 3"));
    assert!(report.contains("ewc_enabled = false"));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), report);
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("round,phase,"));
    assert!(load_model(&out_dir.join("final.fmc")).is_ok());

    let out = cli()
        .args(["verify-costs", conf.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "algorithm = fedavg\nbogus = 1\n").unwrap();
    let out = cli().args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("bogus"));
    let out = cli().args(["run", "preset:missing"]).output().unwrap();
    assert!(!out.status.success());
}
