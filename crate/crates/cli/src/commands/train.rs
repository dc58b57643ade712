use std::sync::Mutex;

use fbkws_core::checkpoint;
use fbkws_core::data::Split;
use fbkws_core::train::{run_seeds, train_with, RunRecord};

use super::{seed_dir, write_file, Corpus, CHECKPOINT_FILE, CONFIG_FILE, RECORD_FILE};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Outcome of one `train` invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub skipped: Vec<u64>,
    pub trained: Vec<RunRecord>,
}

/// The stored config with seeds ignored: reruns may change the seed list
/// but nothing else.
fn same_run(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let strip = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.train.seeds.clear();
        c.jobs = 0;
        c
    };
    strip(a) == strip(b)
}

/// Trains every seed of `cfg` that has no finished run directory yet.
pub fn run(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let run_dir = cfg.run_dir();
    let config_path = run_dir.join(CONFIG_FILE);
    if config_path.is_file() {
        let text = std::fs::read_to_string(&config_path).map_err(CliError::io(&config_path))?;
        let stored = ExperimentConfig::from_toml(&config_path, &text)?;
        if !same_run(&stored, cfg) {
            return Err(CliError::Invalid(format!(
                "`{}` was created by a different config; choose another run name",
                run_dir.display()
            )));
        }
    }
    let (done, pending): (Vec<u64>, Vec<u64>) = cfg.train.seeds.iter().partition(|&&s| {
        let d = seed_dir(&run_dir, s);
        d.join(RECORD_FILE).is_file() && d.join(CHECKPOINT_FILE).is_file()
    });
    for s in &done {
        println!("seed {s}: already complete, skipping");
    }
    if pending.is_empty() {
        return Ok(TrainSummary {
            skipped: done,
            trained: Vec::new(),
        });
    }
    let corpus = Corpus::open(&cfg.data, None)?;
    let train_set = corpus.split(Split::Train)?;
    let val_set = corpus.split(Split::Val)?;
    write_file(&config_path, &cfg.to_toml()?)?;
    println!(
        "run {}: arm {} K={} {} on {} train / {} validation utterances, seeds {:?}",
        cfg.run_name(),
        cfg.train.arm,
        cfg.train.filters,
        cfg.train.variant,
        train_set.len(),
        val_set.len(),
        pending
    );
    let console = Mutex::new(());
    let records = run_seeds(&pending, cfg.jobs, |seed| {
        let mut report = |e: &fbkws_core::train::EpochRecord| {
            let _g = console.lock();
            println!(
                "seed {seed} epoch {:>3}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            );
        };
        let run = train_with(&cfg.train, &train_set, &val_set, seed, &mut report)?;
        let dir = seed_dir(&run_dir, seed);
        // the record goes last: its presence marks the seed complete
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &run.model, &run.meta)?;
        fbkws_core::atomic::write_atomic(&dir.join(RECORD_FILE), run.record.to_csv()?.as_bytes())?;
        Ok(run.record)
    })?;
    for r in &records {
        println!(
            "seed {}: best epoch {} of {} (stopped at {})",
            r.seed,
            r.best_epoch,
            cfg.train.max_epochs,
            r.stopped_epoch
        );
    }
    Ok(TrainSummary {
        skipped: done,
        trained: records,
    })
}
