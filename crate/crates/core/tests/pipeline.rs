//! End-to-end training, evaluation and command-line behaviour.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;

use semix::config::RunConfig;
use semix::corpus::RawRecord;
use semix::encoder::{self, ModelConfig, ParamStore};
use semix::evalkit::{self, DataSource, OodTarget, RecordPool, Stage1Cache, Synthetic};
use semix::rundir::{self, RunDir};
use semix::trainer::{self, SelectionPolicy, Subset};
use semix::Error;

fn small(extra: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("dataset", "synthetic"),
        ("embed_dim", "16"),
        ("hidden_dim", "16"),
        ("stage1_epochs", "6"),
        ("stage2_epochs", "4"),
        ("stage1_lr", "1e-2"),
        ("stage2_lr", "2e-3"),
        ("batch_size", "4"),
        ("synth_dev_size", "60"),
        ("synth_test_size", "60"),
        ("seed", "3"),
    ]
    .iter()
    .chain(extra)
    {
        c.set(k, v).unwrap();
    }
    c
}

/// Two classes with disjoint vocabularies: separable by the model class.
fn separable_pool(n_per_class: usize) -> RecordPool {
    let mut pool = Vec::new();
    for i in 0..n_per_class {
        let a: Vec<String> = (0..4).map(|k| format!("a{}", (i + k) % 5)).collect();
        let b: Vec<String> = (0..4).map(|k| format!("b{}", (i * 3 + k) % 5)).collect();
        pool.push(RawRecord::new("pos", a.join(" ")));
        pool.push(RawRecord::new("neg", b.join(" ")));
    }
    RecordPool {
        name: "separable".into(),
        pool,
        official_test: vec![],
    }
}

#[test]
fn separable_data_is_learned_within_50_epochs() {
    let cfg = small(&[("dataset", "files"), ("stage1_epochs", "50"), ("stage2_epochs", "0")]);
    let src = separable_pool(40);
    let data = src.load_for_test(&cfg);
    let init = ParamStore::init(&cfg.model_config(data.vocab.len(), data.labels.len()).unwrap(), 3).unwrap();
    let out = trainer::train_stage1(&cfg.train_config().unwrap(), &data.split, init).unwrap();
    assert_eq!(out.record.best_dev_accuracy, 1.0, "{:?}", out.record.epochs);
    assert!(out.record.epochs.iter().any(|e| e.dev_accuracy == 1.0));
}

trait LoadForTest {
    fn load_for_test(&self, cfg: &RunConfig) -> evalkit::PreparedData;
}

impl<T: evalkit::DataSource> LoadForTest for T {
    fn load_for_test(&self, cfg: &RunConfig) -> evalkit::PreparedData {
        self.load(cfg, cfg.seed()).unwrap()
    }
}

#[test]
fn zero_epochs_keep_initial_parameters() {
    let cfg = small(&[("stage1_epochs", "0")]);
    let data = Synthetic.load_for_test(&cfg);
    let mc = cfg.model_config(data.vocab.len(), 2).unwrap();
    let init = ParamStore::init(&mc, 3).unwrap();
    let out = trainer::train_stage1(&cfg.train_config().unwrap(), &data.split, init.clone()).unwrap();
    assert_eq!(out.record.best_epoch, 0);
    assert!(out.record.epochs.is_empty());
    assert_eq!(out.best_params, init);
}

#[test]
fn empty_training_set_is_rejected() {
    let cfg = small(&[]);
    let mut data = Synthetic.load_for_test(&cfg);
    data.split.train.clear();
    let init = ParamStore::init(&cfg.model_config(data.vocab.len(), 2).unwrap(), 3).unwrap();
    assert!(matches!(
        trainer::train_stage1(&cfg.train_config().unwrap(), &data.split, init),
        Err(Error::Data(_))
    ));
}

#[test]
fn pipeline_is_bitwise_deterministic() {
    let cfg = small(&[]);
    let a = evalkit::run_pipeline(&cfg, &Synthetic, None).unwrap();
    let b = evalkit::run_pipeline(&cfg, &Synthetic, None).unwrap();
    assert_eq!(rundir::metrics_tsv(&a), rundir::metrics_tsv(&b));
    assert_eq!(
        encoder::checkpoint_bytes(a.final_params(), &a.model_config),
        encoder::checkpoint_bytes(b.final_params(), &b.model_config)
    );
    assert_eq!(a.stage2.batch_log, b.stage2.batch_log);
}

fn stage2_losses(cfg: &RunConfig) -> Vec<f64> {
    let run = evalkit::run_pipeline(cfg, &Synthetic, None).unwrap();
    run.stage2.batch_log.iter().map(|e| e.loss).collect()
}

#[test]
fn unit_lambda_mixup_degenerates_to_plain_fine_tuning() {
    let base = [("selection_policy", "random"), ("smoothing", "none"), ("lambda_dist", "fixed:1")];
    let plain = stage2_losses(&small(&[base[0], base[1], base[2], ("mix_variant", "none")]));
    assert!(!plain.is_empty());
    for variant in ["span", "embed", "hidden"] {
        let mixed = stage2_losses(&small(&[base[0], base[1], base[2], ("mix_variant", variant)]));
        assert_eq!(mixed, plain, "{variant}");
    }
}

#[test]
fn curriculum_batches_follow_policy_and_never_cross_pools() {
    for policy in ["easy_to_hard", "hard_to_easy"] {
        let cfg = small(&[("selection_policy", policy)]);
        let run = evalkit::run_pipeline(&cfg, &Synthetic, None).unwrap();
        let part = run.stage2.partition.clone().unwrap();
        let p: SelectionPolicy = policy.parse().unwrap();
        assert!(trainer::curriculum_order_holds(&run.stage2.batch_log, p));
        for e in &run.stage2.batch_log {
            let pool = match e.subset {
                Subset::Easy => &part.easy,
                Subset::Hard => &part.hard,
                Subset::All => panic!("pooled policy logged an unpooled batch"),
            };
            assert!(e.anchor_ids.iter().all(|id| pool.contains(id)));
        }
        // Every anchor exactly once per epoch.
        let all: BTreeSet<usize> = run.data.split.train.iter().map(|e| e.id).collect();
        for epoch in 1..=4 {
            let mut seen: Vec<usize> = run
                .stage2
                .batch_log
                .iter()
                .filter(|e| e.epoch == epoch)
                .flat_map(|e| e.anchor_ids.clone())
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, all.iter().copied().collect::<Vec<_>>());
        }
    }
}

#[test]
fn random_policy_logs_unpooled_batches() {
    let run = evalkit::run_pipeline(&small(&[("selection_policy", "random")]), &Synthetic, None).unwrap();
    assert!(run.stage2.batch_log.iter().all(|e| e.subset == Subset::All));
}

#[test]
fn singleton_pools_train_without_mixup() {
    let cfg = small(&[("shots_per_class", "1"), ("rescore_every_epoch", "true"), ("append_originals", "true")]);
    let run = evalkit::run_pipeline(&cfg, &Synthetic, None).unwrap();
    let part = run.stage2.partition.unwrap();
    assert_eq!(part.easy.len() + part.hard.len(), 2);
    assert_eq!(run.stage2.record.epochs.len(), 4);
}

#[test]
fn multi_seed_aggregation_contracts() {
    let cfg = small(&[("stage1_epochs", "2"), ("stage2_epochs", "1")]);
    let mut cache = Stage1Cache::default();
    let one = evalkit::multi_seed(&cfg, &[1], &Synthetic, &mut cache).unwrap();
    let direct = evalkit::run_pipeline(&cfg.clone().with("seed", 1).unwrap(), &Synthetic, None).unwrap();
    assert_eq!(one.sd, 0.0);
    assert_eq!(one.mean, direct.test_accuracy().unwrap());

    let a = evalkit::multi_seed(&cfg, &[1, 2, 3], &Synthetic, &mut Stage1Cache::default()).unwrap();
    let b = evalkit::multi_seed(&cfg, &[3, 1, 2], &Synthetic, &mut Stage1Cache::default()).unwrap();
    let c = evalkit::multi_seed(&cfg, &[1, 2, 3], &Synthetic, &mut cache).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c, "cached stage 1 must not change results");
    assert!(a.is_consistent());
    assert!(matches!(
        evalkit::multi_seed(&cfg, &[], &Synthetic, &mut cache),
        Err(Error::Config(_))
    ));

    let axes = vec![("selection_policy".to_string(), vec!["easy_to_hard".to_string()])];
    let table = evalkit::ablation_matrix(&cfg, &axes, &[1, 2, 3], &Synthetic, &mut cache).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].report, a);
}

#[test]
fn ood_self_target_and_random_model() {
    let cfg = small(&[]);
    let run = evalkit::run_pipeline(&cfg, &Synthetic, None).unwrap();
    let labels = &run.data.labels;
    let test_records: Vec<RawRecord> = run
        .data
        .split
        .test
        .iter()
        .map(|e| RawRecord::new(labels.name(e.label).unwrap(), semix::corpus::decode(e, &run.data.vocab)))
        .collect();
    let target = OodTarget {
        name: "self".into(),
        records: test_records.clone(),
    };
    let acc = evalkit::ood_eval(run.final_params(), &run.data.vocab, labels, 128, &[target], None).unwrap();
    assert_eq!(acc[0].1, run.test_accuracy().unwrap());

    // A random-init model on a balanced binary target whose labels are
    // shuffled independently of the texts: correct predictions are then
    // Binomial(n, 1/2), so accuracy must sit inside a 99.9% interval.
    let mut texts = Vec::new();
    for k in 0..4 {
        let d = Synthetic.load(&cfg.clone().with("synth_test_size", 400).unwrap(), 100 + k).unwrap();
        texts.extend(d.split.test.iter().map(|e| semix::corpus::decode(e, &d.vocab)));
    }
    let mut names: Vec<&str> = (0..texts.len()).map(|i| if i % 2 == 0 { "neg" } else { "pos" }).collect();
    names.shuffle(&mut semix::rng::stream(99, &[1]));
    let big: Vec<RawRecord> = texts.into_iter().zip(names).map(|(t, l)| RawRecord::new(l, t)).collect();
    let mc = ModelConfig {
        vocab_size: run.data.vocab.len(),
        ..run.model_config
    };
    let random = ParamStore::init(&mc, 77).unwrap();
    let n = big.len() as f64;
    let t = OodTarget {
        name: "big".into(),
        records: big,
    };
    let acc = evalkit::ood_eval(&random, &run.data.vocab, labels, 128, &[t], None).unwrap()[0].1;
    let half_width = 3.29 * (0.25 / n).sqrt();
    assert!((acc - 0.5).abs() <= half_width, "accuracy {acc} over {n} examples");

    let three = OodTarget {
        name: "three".into(),
        records: vec![
            RawRecord::new("a", "e1"),
            RawRecord::new("b", "e2"),
            RawRecord::new("c", "e3"),
        ],
    };
    assert!(matches!(
        evalkit::ood_eval(run.final_params(), &run.data.vocab, labels, 128, &[three], None),
        Err(Error::Config(_))
    ));
}

#[test]
fn run_directory_is_written_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("stage1_epochs", "1"), ("stage2_epochs", "1")]);
    let run = evalkit::run_pipeline(&cfg, &Synthetic, None).unwrap();
    let rd = RunDir::create(dir.path(), "r").unwrap();
    rd.write_run(&cfg, &run).unwrap();
    for f in [
        rundir::CONFIG_FILE,
        rundir::METRICS_FILE,
        rundir::BEST_CKPT,
        rundir::STAGE1_CKPT,
        rundir::BATCHLOG_FILE,
    ] {
        assert!(rd.path().join(f).exists(), "{f}");
    }
    let echoed = RunConfig::load(&rd.path().join(rundir::CONFIG_FILE)).unwrap();
    assert_eq!(echoed, cfg);
    let (params, mc) = encoder::load_checkpoint(&rd.path().join(rundir::BEST_CKPT)).unwrap();
    assert_eq!(&params, run.final_params());
    assert_eq!(mc, run.model_config);
    assert!(RunDir::create(dir.path(), "r").is_err());
}

// ---- command line ----

fn semix(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_semix"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn write_dataset(dir: &Path, per_class: usize) {
    let mut tsv = String::new();
    for i in 0..per_class {
        tsv.push_str(&format!("good\tgreat fun film number {i}\n"));
        tsv.push_str(&format!("bad\tdull boring film number {i}\n"));
    }
    std::fs::write(dir.join("train.tsv"), tsv).unwrap();
}

#[test]
fn cli_prepare_is_deterministic_and_guards_shots() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 30);
    let args = ["prepare", "--train_path=train.tsv", "--shots_per_class=10", "--seed=5"];
    assert!(semix(dir.path(), &args).status.success());
    let first = std::fs::read_to_string(dir.path().join("prepared/manifest.tsv")).unwrap();
    let train_rows = first.lines().filter(|l| l.starts_with("train\t")).count();
    assert_eq!(train_rows, 20);
    assert!(semix(dir.path(), &args).status.success());
    assert_eq!(first, std::fs::read_to_string(dir.path().join("prepared/manifest.tsv")).unwrap());

    let out = semix(dir.path(), &["prepare", "--train_path=train.tsv", "--shots_per_class=31"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"bad\"") || err.contains("\"good\""), "{err}");
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(semix(dir.path(), &["train", "--no_such_key=1"]).status.code(), Some(2));
    assert_eq!(semix(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let missing = semix(dir.path(), &["train"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("prepare"));
    let report = semix(dir.path(), &["report"]);
    assert_eq!(report.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&report.stderr).contains("no runs found"));
}

#[test]
fn cli_train_report_and_ood() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 30);
    let common = [
        "--embed_dim=8",
        "--hidden_dim=8",
        "--stage1_epochs=3",
        "--stage2_epochs=0",
        "--shots_per_class=4",
    ];
    let mut prep = vec!["prepare", "--train_path=train.tsv"];
    prep.extend(common);
    assert!(semix(dir.path(), &prep).status.success());
    let mut train = vec!["train", "--name=base"];
    train.extend(common);
    let out = semix(dir.path(), &train);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // A completed run is never overwritten.
    assert_eq!(semix(dir.path(), &train).status.code(), Some(2));

    let metrics = std::fs::read_to_string(dir.path().join("run/base/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("epoch\tsplit\tmetric\tvalue\n"));
    assert!(metrics.contains("best\tdev\tstage2_best_epoch\t0"));

    let report = semix(dir.path(), &["report"]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("base"));

    let ood = semix(dir.path(), &["ood", "--ckpt=run/base", "--targets=self,copy=train.tsv"]);
    assert!(ood.status.success(), "{}", String::from_utf8_lossy(&ood.stderr));
    let text = String::from_utf8_lossy(&ood.stdout).to_string();
    let self_acc: f64 = text
        .lines()
        .find(|l| l.starts_with("self"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    let test_acc: f64 = metrics
        .lines()
        .find(|l| l.starts_with("best\ttest\tstage2_accuracy"))
        .and_then(|l| l.split('\t').nth(3))
        .unwrap()
        .parse()
        .unwrap();
    assert!((self_acc - test_acc).abs() < 1e-6);

    std::fs::write(dir.path().join("axes.txt"), "alpha=0.1,0.2\n").unwrap();
    let mut abl = vec!["ablate", "--axes=axes.txt", "--name=sweep", "--seeds=1,2"];
    abl.extend(common);
    let out = semix(dir.path(), &abl);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("run/sweep/ablation.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("alpha\tmean\tsd\tn_seeds\tfingerprint"));
}
