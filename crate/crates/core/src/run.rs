//! Run configuration (TOML) and file-backed training runs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::target::TargetSpec;
use crate::trainer::{TrainConfig, TrainSummary, Trainer, LOG_HEADER};

pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub target: TargetSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode run config: {e}")))
    }

    /// Reads a config file. Relative dataset and output paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.target.validate()?;
        self.train.validate()?;
        if self.model.p != self.target.p {
            return Err(Error::Config(format!(
                "model.p = {} but target.p = {}",
                self.model.p, self.target.p
            )));
        }
        Ok(())
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.bmnck")
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: TrainSummary,
    pub final_checkpoint: PathBuf,
}

/// Trains from `config`, writing the log and numbered checkpoints into
/// `config.output`. With `resume`, parameters, step and epoch come from that
/// checkpoint and the log is appended to.
pub fn train_run(config: &RunConfig, resume: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let dataset = Dataset::read(&config.dataset)?;
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load_expecting(path, &config.model)?;
            log::info!("resuming from {} at step {} (epoch {})", path.display(), ck.step, ck.epoch);
            Trainer::resume(ck.params, config.target, config.train.clone(), ck.step, ck.epoch, ck.warmup_active)?
        }
        None => Trainer::new(ModelParams::init(&config.model)?, config.target, config.train.clone())?,
    };

    let log_path = out.join(LOG_FILE);
    let fresh = resume.is_none() || !log_path.exists();
    let file = if fresh {
        File::create(&log_path)
    } else {
        OpenOptions::new().append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log_out = BufWriter::new(file);
    if fresh {
        writeln!(log_out, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }

    let save = |t: &Trainer| -> Result<PathBuf> {
        let path = out.join(checkpoint_name(t.step));
        Checkpoint {
            params: t.params.clone(),
            target: t.target,
            train: t.config.clone(),
            step: t.step,
            epoch: t.epoch,
            warmup_active: t.warmup_active(),
        }
        .save(&path)?;
        Ok(path)
    };

    let every = config.train.checkpoint_every;
    let result = trainer.run(&dataset, |row, t| {
        writeln!(log_out, "{}", row.csv_line()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && row.step % every == 0 {
            log_out.flush().map_err(|e| Error::io(&log_path, e))?;
            let path = save(t)?;
            log::info!("step {}: total loss {:.4}, saved {}", row.step, row.total, path.display());
        }
        Ok(())
    });
    log_out.flush().map_err(|e| Error::io(&log_path, e))?;
    let summary = result?;
    let final_checkpoint = save(&trainer)?;
    log::info!(
        "finished after {} steps ({:?}); final checkpoint {}",
        summary.steps,
        summary.stop,
        final_checkpoint.display()
    );
    Ok(RunOutcome {
        summary,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    const MINIMAL: &str = r#"
dataset = "data.bmnds"
output = "run"

[model]
input_dim = 16
d = 16
p = 1
encoder_hidden = [24]
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL, Path::new("run.toml")).unwrap();
        assert_eq!(cfg.target, TargetSpec::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.model.dropout_keep, 0.8);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::from_toml(MINIMAL, Path::new("run.toml")).unwrap();
        cfg.train.lr0 = 0.003;
        cfg.target.mu_n = 12.5;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("x")).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for extra in ["bogus = 1\n", "[train]\nlearning_rate = 0.1\n", "[target]\nmu = 3.0\n"] {
            let text = format!("{extra}{MINIMAL}");
            let text = if extra.starts_with('[') { format!("{MINIMAL}{extra}") } else { text };
            assert!(matches!(RunConfig::from_toml(&text, Path::new("r")), Err(Error::Parse { .. })), "{extra}");
        }
    }

    #[test]
    fn mismatched_p_rejected() {
        let text = format!("{MINIMAL}[target]\nmu_m = 0.0\nmu_n = 40.0\nsigma_m = 1.0\nsigma_n = 1.0\np = 3\n");
        assert!(matches!(RunConfig::from_toml(&text, Path::new("r")), Err(Error::Config(_))));
    }

    fn small_run(dir: &Path, iterations: u64) -> RunConfig {
        let ds = generate_synthetic(&SyntheticSpec { n_identities: 5, images_per_identity: 6, ..SyntheticSpec::benchmark() }).unwrap();
        ds.write(&dir.join("data.bmnds")).unwrap();
        let mut cfg = RunConfig::from_toml(MINIMAL, Path::new("run.toml")).unwrap();
        cfg.dataset = dir.join("data.bmnds");
        cfg.output = dir.join("run");
        cfg.train.max_iterations = iterations;
        cfg.train.checkpoint_every = 4;
        cfg
    }

    #[test]
    fn run_writes_log_and_numbered_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run(dir.path(), 10);
        let out = train_run(&cfg, None).unwrap();
        assert_eq!(out.summary.steps, 10);
        let log = fs::read_to_string(cfg.output.join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 11);
        for step in [4, 8, 10] {
            assert!(cfg.output.join(checkpoint_name(step)).exists(), "{step}");
        }
        assert_eq!(out.final_checkpoint, cfg.output.join(checkpoint_name(10)));
        let ck = Checkpoint::load(&out.final_checkpoint).unwrap();
        assert_eq!(ck.step, 10);
    }

    #[test]
    fn same_config_same_checkpoint_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train_run(&small_run(a.path(), 6), None).unwrap();
        let rb = train_run(&small_run(b.path(), 6), None).unwrap();
        assert_eq!(fs::read(ra.final_checkpoint).unwrap(), fs::read(rb.final_checkpoint).unwrap());
    }

    #[test]
    fn resume_continues_step_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_run(dir.path(), 4);
        let first = train_run(&cfg, None).unwrap();
        cfg.train.max_iterations = 7;
        let second = train_run(&cfg, Some(&first.final_checkpoint)).unwrap();
        assert_eq!(second.summary.steps, 7);
        let log = fs::read_to_string(cfg.output.join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 8);
        assert_eq!(log.lines().last().unwrap().split(',').next(), Some("7"));
    }
}
