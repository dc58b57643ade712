use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fbkws_core::checkpoint;
use fbkws_core::data::manifest::NO_NOISE;
use fbkws_core::data::Split;
use fbkws_core::dsp::bin_hz;
use fbkws_core::eval::{
    accuracy_breakdown, average_response, compare_arms, energy_ratio, filterbank_response_report,
    long_term_spectrum, relative_accuracy_loss, significance_csv, AccuracyTable, CellKey, SignificanceRow,
};
use fbkws_core::frontend::FilterbankLayer;
use fbkws_core::model::{count_multiplications, KwsModel, MultReport};
use fbkws_core::train::{predict, run_seeds};
use fbkws_core::Tensor;

use super::{completed_seeds, write_file, Corpus, CHECKPOINT_FILE, CONFIG_FILE};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub runs: Vec<PathBuf>,
    /// Test manifest; defaults to the first run's.
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    /// Expected `K` of every checkpoint.
    pub filters: Option<usize>,
    pub jobs: usize,
}

struct LoadedRun {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
    models: Vec<KwsModel>,
}

impl LoadedRun {
    fn arm(&self) -> String {
        self.cfg.train.arm.to_string()
    }

    fn filters(&self) -> usize {
        self.cfg.train.filters
    }

    fn load(dir: &Path, filters: Option<usize>) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let cfg = ExperimentConfig::from_toml(&path, &text)?;
        let done = completed_seeds(dir)?;
        if done.is_empty() {
            return Err(CliError::Invalid(format!("`{}` has no finished seeds", dir.display())));
        }
        let mut seeds = Vec::new();
        let mut models = Vec::new();
        for (seed, sd) in done {
            let (model, meta) = checkpoint::load(&sd.join(CHECKPOINT_FILE))?;
            let k = model.channels();
            let want = filters.unwrap_or(cfg.train.filters);
            if k != want || k != cfg.train.filters {
                return Err(CliError::Invalid(format!(
                    "checkpoint `{}` has K = {k} but K = {want} was requested",
                    sd.display()
                )));
            }
            if meta.arm != cfg.train.arm.name() {
                return Err(CliError::Invalid(format!(
                    "checkpoint `{}` is arm `{}` but its run is `{}`",
                    sd.display(),
                    meta.arm,
                    cfg.train.arm
                )));
            }
            seeds.push(seed);
            models.push(model);
        }
        Ok(LoadedRun { cfg, seeds, models })
    }
}

/// One row of `energy.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRow {
    pub reference: (String, usize),
    pub arm: (String, usize),
    pub reference_mult: u64,
    pub mult: u64,
    pub energy_ratio: f64,
    pub reference_accuracy: f64,
    pub accuracy: f64,
    /// `None` when the reference accuracy is zero.
    pub relative_accuracy_loss: Option<f64>,
}

fn energy_csv(rows: &[EnergyRow]) -> String {
    let mut out = String::from(
        "reference_arm,reference_K,arm,K,reference_mult,mult,energy_ratio,reference_accuracy,accuracy,relative_accuracy_loss_pct\n",
    );
    for r in rows {
        let loss = r.relative_accuracy_loss.map(|v| format!("{v:.4}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{loss}\n",
            r.reference.0, r.reference.1, r.arm.0, r.arm.1, r.reference_mult, r.mult, r.energy_ratio,
            r.reference_accuracy, r.accuracy
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub table: AccuracyTable,
    /// `None` when no two runs share `K`.
    pub significance: Option<Vec<SignificanceRow>>,
    pub energy: Vec<EnergyRow>,
    pub written: Vec<PathBuf>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn run(req: &EvalRequest) -> Result<EvalSummary> {
    if req.runs.is_empty() {
        return Err(CliError::Invalid("no run directories to evaluate".into()));
    }
    let runs = req
        .runs
        .iter()
        .map(|d| LoadedRun::load(d, req.filters))
        .collect::<Result<Vec<_>>>()?;
    for (i, a) in runs.iter().enumerate() {
        if let Some(b) = runs[..i].iter().find(|b| b.arm() == a.arm() && b.filters() == a.filters()) {
            return Err(CliError::Invalid(format!(
                "two runs are arm `{}` at K = {}",
                b.arm(),
                b.filters()
            )));
        }
    }
    let corpus = Corpus::open(&runs[0].cfg.data, req.manifest.as_deref())?;
    for r in &runs[1..] {
        let c = r.cfg.data.class_map(corpus.manifest.entries.iter().map(|e| e.label.as_str()))?;
        if c != corpus.classes {
            return Err(CliError::Invalid("runs disagree on the keyword list".into()));
        }
    }
    let test = corpus.split(Split::Test)?;
    let batch = runs[0].cfg.eval.batch_size;
    let jobs: Vec<(usize, usize)> = runs
        .iter()
        .enumerate()
        .flat_map(|(r, run)| (0..run.models.len()).map(move |m| (r, m)))
        .collect();
    let ids: Vec<u64> = (0..jobs.len() as u64).collect();
    let decisions = run_seeds(&ids, req.jobs, |i| {
        let (r, m) = jobs[i as usize];
        predict(&runs[r].models[m], &test, batch)
    })?;

    let grid: Vec<CellKey> = test.entries.iter().map(CellKey::of).collect::<BTreeSet<_>>().into_iter().collect();
    let mut table = AccuracyTable::default();
    let mut next = decisions.into_iter();
    for run in &runs {
        let reps: Vec<Vec<usize>> = next.by_ref().take(run.models.len()).collect();
        table.extend(accuracy_breakdown(&run.arm(), run.filters(), &reps, &test.labels, &test.entries, &grid)?);
    }
    let mut written = Vec::new();
    let mut emit = |name: String, text: String| -> Result<()> {
        let p = req.out.join(name);
        write_file(&p, &text)?;
        written.push(p);
        Ok(())
    };
    emit("accuracy_table.csv".into(), table.to_csv())?;
    let overall: Vec<f64> = runs.iter().map(|r| mean(&table.overall(&r.arm(), r.filters()))).collect();
    for (r, acc) in runs.iter().zip(&overall) {
        println!(
            "{} K={}: mean test accuracy {acc:.2}% over seeds {:?}",
            r.arm(),
            r.filters(),
            r.seeds
        );
    }

    let alpha = runs[0].cfg.eval.alpha;
    let mut sig = Vec::new();
    let mut paired = false;
    for (j, b) in runs.iter().enumerate() {
        for a in runs[..j].iter().filter(|a| a.filters() == b.filters()) {
            paired = true;
            let rows = compare_arms(&table, (&b.arm(), b.filters()), (&a.arm(), a.filters()), alpha)?;
            for row in rows.iter().filter(|r| r.test.significant) {
                println!(
                    "{} vs {} at K={} differ in cell {}/{} (p = {:.4})",
                    b.arm(),
                    a.arm(),
                    b.filters(),
                    row.cell.snr,
                    row.cell.condition,
                    row.test.p
                );
            }
            sig.extend(rows);
        }
    }
    let significance = if paired {
        emit("significance.csv".into(), significance_csv(&sig))?;
        Some(sig)
    } else {
        println!("significance skipped: no two arms share a filter count");
        None
    };

    let reports: Vec<MultReport> = runs
        .iter()
        .map(|r| count_multiplications(&r.models[0].acoustic.config))
        .collect::<std::result::Result<_, _>>()?;
    let mut seen = BTreeSet::new();
    for m in &reports {
        if seen.insert((m.variant.name(), m.filters)) {
            emit(format!("mult_{}_K{}.csv", m.variant, m.filters), m.to_csv())?;
        }
    }
    let mut energy = Vec::new();
    for i in 0..runs.len() {
        for j in 0..runs.len() {
            if runs[i].filters() <= runs[j].filters() {
                continue;
            }
            let row = EnergyRow {
                reference: (runs[i].arm(), runs[i].filters()),
                arm: (runs[j].arm(), runs[j].filters()),
                reference_mult: reports[i].total,
                mult: reports[j].total,
                energy_ratio: energy_ratio(&reports[i], &reports[j])?,
                reference_accuracy: overall[i],
                accuracy: overall[j],
                relative_accuracy_loss: relative_accuracy_loss(overall[i], overall[j]).ok(),
            };
            println!(
                "{} K={} -> {} K={}: {:.2}x fewer multiplications, relative accuracy loss {}",
                row.reference.0,
                row.reference.1,
                row.arm.0,
                row.arm.1,
                row.energy_ratio,
                row.relative_accuracy_loss.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "n/a".into())
            );
            energy.push(row);
        }
    }
    if energy.is_empty() {
        println!("energy ratios skipped: every run has the same filter count");
    } else {
        emit("energy.csv".into(), energy_csv(&energy))?;
    }

    for r in runs.iter().filter(|r| r.cfg.train.arm.trains_frontend()) {
        let ws: Vec<&Tensor> = r.models.iter().map(|m| m.frontend.filterbank.weights()).collect();
        let avg = average_response(&ws)?;
        let mel = FilterbankLayer::init_from_mel(r.filters())?;
        let report = filterbank_response_report(&avg, mel.weights(), &r.cfg.eval.bands)?;
        emit(format!("filterbank_K{}_{}.csv", r.filters(), r.arm()), report.curves_csv())?;
        emit(format!("filterbank_bands_K{}_{}.csv", r.filters(), r.arm()), report.bands_csv())?;
        for b in &report.bands {
            println!(
                "{} K={}: band {} holds {:.4} of the learned response vs {:.4} for Mel",
                r.arm(),
                r.filters(),
                b.band.name,
                b.learned_share,
                b.mel_share
            );
        }
    }

    let noises: BTreeSet<&str> = test.entries.iter().map(|e| e.noise.as_str()).filter(|n| *n != NO_NOISE).collect();
    for name in noises {
        let rec = corpus
            .bank
            .get(name)
            .ok_or_else(|| CliError::Invalid(format!("noise `{name}` missing from the bank")))?;
        let lts = long_term_spectrum(&rec.samples)?;
        let peaks: Vec<String> = lts.default_peaks().iter().take(3).map(|&f| format!("{:.0} Hz", bin_hz(f))).collect();
        println!("noise {name}: spectral peaks {}", if peaks.is_empty() { "none".into() } else { peaks.join(", ") });
        emit(format!("noise_spectrum_{name}.csv"), lts.to_csv())?;
    }
    Ok(EvalSummary {
        table,
        significance,
        energy,
        written,
    })
}
