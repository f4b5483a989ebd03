//! `semix` command-line tool.
//!
//! ```text
//! semix prepare [--config=PATH] [--seed=N] [--key=value ...]
//! semix train   [--config=PATH] [--out=DIR] [--seed=N] [--key=value ...]
//! semix ablate  --axes=PATH [--config=PATH] [--out=DIR] [--key=value ...]
//! semix ood     --ckpt=RUN_DIR --targets=NAME=PATH[,NAME=PATH...] [--label_map=PATH]
//! semix report  [--runs=DIR]
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use semix::config::RunConfig;
use semix::corpus::{self, LabelMap, RawRecord, Vocab};
use semix::encoder;
use semix::evalkit::{self, OodTarget, Stage1Cache, LABELS_FILE, MANIFEST_FILE, RECORDS_FILE, VOCAB_FILE};
use semix::rundir::{self, RunDir};
use semix::{Error, Result};

const USAGE: &str = "usage: semix <prepare|train|ablate|ood|report> [--config=PATH] [--out=DIR] [--seed=N] [--key=value ...]";

/// Flags that belong to a command rather than to the run config.
const COMMAND_FLAGS: &[&str] = &["config", "out", "axes", "ckpt", "targets", "label_map", "runs"];

struct Args {
    command: String,
    flags: Vec<(String, String)>,
}

impl Args {
    fn parse(argv: &[String]) -> Result<Self> {
        let (command, rest) = argv
            .split_first()
            .ok_or_else(|| Error::Config(USAGE.to_string()))?;
        let mut flags = Vec::new();
        for a in rest {
            let body = a
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("unexpected argument {a:?}; flags look like --key=value")))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("flag {a:?} needs a value (--key=value)")))?;
            flags.push((k.to_string(), v.to_string()));
        }
        Ok(Self {
            command: command.clone(),
            flags,
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.flags.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("`{}` needs --{key}=...", self.command)))
    }

    fn out(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("run"))
    }

    /// Config file (if any) overlaid with every non-command flag.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match self.get("config") {
            Some(p) => RunConfig::load(Path::new(p))?,
            None => RunConfig::default(),
        };
        for (k, v) in &self.flags {
            if !COMMAND_FLAGS.contains(&k.as_str()) {
                cfg.set(k, v)?;
            }
        }
        cfg.train_config()?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn records_tsv(records: &[RawRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{}\t{}\n", r.label_name, r.text.replace(['\t', '\n'], " ")))
        .collect()
}

fn prepare(args: &Args) -> Result<()> {
    let cfg = args.config()?;
    let train_path = cfg.get("train_path");
    if train_path.is_empty() {
        return Err(Error::Config("prepare needs --train_path=FILE".into()));
    }
    let pool = corpus::load_dataset(Path::new(train_path), cfg.format())?.records;
    let test: Vec<RawRecord> = match cfg.get("test_path") {
        "" => vec![],
        p => corpus::load_dataset(Path::new(p), cfg.format())?.records,
    };
    let vocab = Vocab::build(&pool, cfg.uint("min_freq"))?;
    let labels = LabelMap::from_records(&pool);
    let mut manifest = corpus::sample_few_shot(&pool, cfg.uint("shots_per_class"), cfg.real("dev_fraction"), cfg.seed())?;
    let mut all = pool.clone();
    if !test.is_empty() {
        manifest = manifest.with_official_test(pool.len(), test.len());
        all.extend(test);
    }
    let dir = PathBuf::from(cfg.get("split_dir"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join(RECORDS_FILE), &records_tsv(&all))?;
    write_file(&dir.join(VOCAB_FILE), &vocab.to_text())?;
    write_file(&dir.join(LABELS_FILE), &(labels.names().join("\n") + "\n"))?;
    write_file(&dir.join(MANIFEST_FILE), &manifest.to_tsv())?;
    println!(
        "prepared {}: {} train, {} dev, {} test, vocab {}",
        dir.display(),
        manifest.train.len(),
        manifest.dev.len(),
        manifest.test.len(),
        vocab.len()
    );
    Ok(())
}

fn train(args: &Args) -> Result<()> {
    let cfg = args.config()?;
    let run_dir = RunDir::create(&args.out(), cfg.get("name"))?;
    let source = evalkit::source_for(&cfg);
    let run = evalkit::run_pipeline(&cfg, source.as_ref(), None)?;
    run_dir.write_run(&cfg, &run)?;
    println!(
        "{}: stage1 dev {:.4}, stage2 dev {:.4}, test {}",
        run_dir.path().display(),
        run.stage1.record.best_dev_accuracy,
        run.dev_accuracy(),
        run.test_accuracy().map_or("n/a".to_string(), |t| format!("{t:.4}"))
    );
    Ok(())
}

fn ablate(args: &Args) -> Result<()> {
    let cfg = args.config()?;
    let axes = evalkit::parse_axes(&read_file(Path::new(args.require("axes")?))?)?;
    evalkit::ablation_points(&cfg, &axes)?;
    let dir = args.out().join(cfg.get("name"));
    let table_path = dir.join("ablation.tsv");
    if table_path.exists() {
        return Err(Error::Config(format!("{} exists; choose another --name", table_path.display())));
    }
    let source = evalkit::source_for(&cfg);
    let mut cache = Stage1Cache::default();
    let table = evalkit::ablation_matrix(&cfg, &axes, &cfg.seeds(), source.as_ref(), &mut cache)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join(rundir::CONFIG_FILE), &cfg.to_text())?;
    let tsv = table.to_tsv();
    write_file(&table_path, &tsv)?;
    write_file(&dir.join("ablation_seeds.tsv"), &table.seeds_tsv())?;
    print!("{}", evalkit::render_table(&tsv));
    for row in &table.rows {
        for (seed, msg) in &row.report.failures {
            eprintln!("warning: {:?} seed {seed} failed: {msg}", row.point);
        }
    }
    Ok(())
}

fn ood(args: &Args) -> Result<()> {
    let run = PathBuf::from(args.require("ckpt")?);
    let cfg = RunConfig::load(&run.join(rundir::CONFIG_FILE))?;
    let (params, model_config) = encoder::load_checkpoint(&run.join(rundir::BEST_CKPT))?;
    let vocab = Vocab::from_text(&read_file(&run.join(VOCAB_FILE))?)?;
    let labels = LabelMap::from_names(read_file(&run.join(LABELS_FILE))?.lines().map(str::to_string).collect())?;
    if vocab.len() != model_config.vocab_size || labels.len() != model_config.num_classes {
        return Err(Error::Checkpoint("run directory artifacts disagree with the checkpoint".into()));
    }
    let mapping = match args.get("label_map") {
        Some(p) => Some(evalkit::parse_label_map(&read_file(Path::new(p))?)?),
        None => None,
    };
    let mut targets = Vec::new();
    for spec in args.require("targets")?.split(',') {
        if spec == "self" {
            // The run's own test split, rebuilt exactly as in training.
            let data = evalkit::source_for(&cfg).load(&cfg, cfg.seed())?;
            let records = data
                .split
                .test
                .iter()
                .map(|e| RawRecord::new(labels.name(e.label).unwrap_or_default(), corpus::decode(e, &data.vocab)))
                .collect();
            targets.push(OodTarget {
                name: "self".into(),
                records,
            });
            continue;
        }
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("target {spec:?}: expected NAME=PATH or self")))?;
        let records = corpus::load_dataset(Path::new(path), cfg.format())?.records;
        targets.push(OodTarget {
            name: name.to_string(),
            records,
        });
    }
    let results = evalkit::ood_eval(&params, &vocab, &labels, model_config.max_len, &targets, mapping.as_ref())?;
    let mut tsv = String::from("target\taccuracy\n");
    for (name, acc) in results {
        tsv.push_str(&format!("{name}\t{acc:.6}\n"));
    }
    print!("{}", evalkit::render_table(&tsv));
    Ok(())
}

fn metric(metrics: &str, epoch: &str, split: &str, name: &str) -> String {
    metrics
        .lines()
        .map(|l| l.split('\t').collect::<Vec<_>>())
        .find(|f| f.len() == 4 && f[0] == epoch && f[1] == split && f[2] == name)
        .and_then(|f| f[3].parse::<f64>().ok())
        .map_or("-".into(), |v| format!("{v:.4}"))
}

fn report(args: &Args) -> Result<()> {
    let root = PathBuf::from(args.get("runs").or(args.get("out")).unwrap_or("run"));
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&root) {
        Ok(entries) => entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect(),
        Err(_) => vec![],
    };
    dirs.sort();
    let mut runs = String::from("run\tstage1_dev\tstage2_dev\ttest\n");
    let mut n_runs = 0;
    let mut tables = Vec::new();
    for d in &dirs {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let metrics_path = d.join(rundir::METRICS_FILE);
        if RunDir::is_complete(d) && metrics_path.exists() {
            let m = read_file(&metrics_path)?;
            runs.push_str(&format!(
                "{name}\t{}\t{}\t{}\n",
                metric(&m, "best", "dev", "stage1_accuracy"),
                metric(&m, "best", "dev", "stage2_accuracy"),
                metric(&m, "best", "test", "stage2_accuracy"),
            ));
            n_runs += 1;
        }
        let table = d.join("ablation.tsv");
        if table.exists() {
            tables.push((name, read_file(&table)?));
        }
    }
    if n_runs == 0 && tables.is_empty() {
        return Err(Error::Data(format!("no runs found under {}", root.display())));
    }
    if n_runs > 0 {
        print!("{}", evalkit::render_table(&runs));
    }
    for (name, tsv) in tables {
        println!("\n[{name}]");
        print!("{}", evalkit::render_table(&tsv));
    }
    Ok(())
}

fn run(argv: &[String]) -> Result<()> {
    let args = Args::parse(argv)?;
    match args.command.as_str() {
        "prepare" => prepare(&args),
        "train" => train(&args),
        "ablate" => ablate(&args),
        "ood" => ood(&args),
        "report" => report(&args),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command {other:?}\n{USAGE}"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semix: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
