//! Run directory artifacts.
//!
//! ```text
//! <out>/<name>/config.txt        resolved key=value config
//!              metrics.tsv       epoch, split, metric, value
//!              ckpt_stage1.semx  best stage-1 parameters
//!              ckpt_best.semx    best stage-2 parameters (the final model)
//!              batchlog.tsv      stage-2 batch order
//!              difficulty.tsv    stage-2 difficulty scores
//!              vocab.txt, labels.txt
//! ```
//!
//! A directory that already holds `ckpt_best.semx` is a completed run and is
//! never written to again.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::difficulty;
use crate::encoder;
use crate::error::{Error, Result};
use crate::evalkit::{PipelineRun, LABELS_FILE, VOCAB_FILE};
use crate::trainer::{self, RunRecord};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const BEST_CKPT: &str = "ckpt_best.semx";
pub const STAGE1_CKPT: &str = "ckpt_stage1.semx";
pub const BATCHLOG_FILE: &str = "batchlog.tsv";
pub const DIFFICULTY_FILE: &str = "difficulty.tsv";

fn push_record(out: &mut String, stage: &str, record: &RunRecord) {
    for e in &record.epochs {
        let _ = writeln!(out, "{}\ttrain\t{stage}_loss\t{}", e.epoch, e.train_loss);
        let _ = writeln!(out, "{}\tdev\t{stage}_accuracy\t{}", e.epoch, e.dev_accuracy);
    }
    let _ = writeln!(out, "best\tdev\t{stage}_best_epoch\t{}", record.best_epoch);
    let _ = writeln!(out, "best\tdev\t{stage}_accuracy\t{}", record.best_dev_accuracy);
    if let Some(t) = record.test_accuracy {
        let _ = writeln!(out, "best\ttest\t{stage}_accuracy\t{t}");
    }
}

/// `epoch<TAB>split<TAB>metric<TAB>value` rows for both stages.
pub fn metrics_tsv(run: &PipelineRun) -> String {
    let mut out = String::from("epoch\tsplit\tmetric\tvalue\n");
    push_record(&mut out, "stage1", &run.stage1.record);
    push_record(&mut out, "stage2", &run.stage2.record);
    out
}

#[derive(Clone, Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_complete(path: &Path) -> bool {
        path.join(BEST_CKPT).exists()
    }

    /// Create `<out>/<name>`, refusing to touch a completed run.
    pub fn create(out: &Path, name: &str) -> Result<Self> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Config(format!("invalid run name {name:?}")));
        }
        let path = out.join(name);
        if Self::is_complete(&path) {
            return Err(Error::Config(format!(
                "{} already holds a completed run; choose another --name",
                path.display()
            )));
        }
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    /// Write every artifact; the final checkpoint goes last so that its
    /// presence marks a complete run.
    pub fn write_run(&self, config: &RunConfig, run: &PipelineRun) -> Result<()> {
        self.write(CONFIG_FILE, config.to_text().as_bytes())?;
        self.write(VOCAB_FILE, run.data.vocab.to_text().as_bytes())?;
        self.write(LABELS_FILE, (run.data.labels.names().join("\n") + "\n").as_bytes())?;
        self.write(METRICS_FILE, metrics_tsv(run).as_bytes())?;
        self.write(BATCHLOG_FILE, trainer::batchlog_tsv(&run.stage2.batch_log).as_bytes())?;
        self.write(DIFFICULTY_FILE, difficulty::scores_to_tsv(&run.stage2.scores).as_bytes())?;
        self.write(
            STAGE1_CKPT,
            &encoder::checkpoint_bytes(&run.stage1.best_params, &run.model_config),
        )?;
        self.write(BEST_CKPT, &encoder::checkpoint_bytes(run.final_params(), &run.model_config))
    }
}
