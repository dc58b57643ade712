//! End-to-end runs of the `fbkws` binary on tiny synthetic corpora.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fbkws_core::checkpoint::{self, CheckpointMeta};
use fbkws_core::data::Manifest;
use fbkws_core::dsp::{bin_hz, mel_filterbank, NUM_BINS};
use fbkws_core::model::{MultReport, Variant};
use fbkws_core::train::{Arm, TrainConfig};
use fbkws_core::SAMPLE_RATE;

fn fbkws(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbkws"))
        .args(args)
        .current_dir(dir)
        .env_remove("FBKWS_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"
seed = 3
[synth]
classes = [{ name = "lo", base_hz = 400.0 }, { name = "hi", base_hz = 1500.0 }]
per_class = { train = 4, val = 2, test = 2 }
harmonics = 2
noises = [{ name = "nb", kind = "narrowband", center_hz = 2700.0, seconds = 2.0 }]
test = { noises = ["nb"], snrs = [0, 10] }
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// A tiny corpus under `<dir>/data` and an experiment file over the desk profile.
fn setup(dir: &Path) {
    write(dir, "data.toml", TINY);
    ok(&fbkws(dir, &["synth", "--config", "data.toml", "--out", "data"]));
}

fn experiment(dir: &Path, file: &str, arm: &str, filters: usize, seeds: &str) {
    let text = format!(
        "[data]\nroot = \"data\"\n[train]\narm = \"{arm}\"\nfilters = {filters}\nmax_epochs = 1\nbatch_size = 4\nseeds = {seeds}\n"
    );
    write(dir, file, &text);
}

#[test]
fn synth_writes_one_manifest_row_per_clip_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let m = Manifest::read(&d.join("data/manifest.csv")).unwrap();
    let clips: Vec<_> = ["lo", "hi", "filler"]
        .iter()
        .flat_map(|l| std::fs::read_dir(d.join("data").join(l)).unwrap())
        .collect();
    let distinct: std::collections::BTreeSet<&str> = m.entries.iter().map(|e| e.path.as_str()).collect();
    assert_eq!(distinct.len(), clips.len());
    // partitioned cells: every row has a clip of its own
    assert_eq!(m.len(), clips.len());
    let first = std::fs::read(d.join("data/manifest.csv")).unwrap();
    ok(&fbkws(d, &["synth", "--config", "data.toml", "--out", "data"]));
    assert_eq!(std::fs::read(d.join("data/manifest.csv")).unwrap(), first);
}

#[test]
fn synth_rejects_duplicate_class_frequencies() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "dup.toml", &TINY.replace("1500.0", "400.0"));
    let out = fbkws(dir.path(), &["synth", "--config", "dup.toml", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spec"));
}

#[test]
fn train_fails_before_training_without_dataset() {
    let dir = tempfile::tempdir().unwrap();
    experiment(dir.path(), "exp.toml", "logmel", 8, "[1]");
    let out = fbkws(dir.path(), &["--profile", "desk", "train", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth"));
    assert!(!dir.path().join("work/runs").exists());
}

#[test]
fn train_is_resumable_and_dropout_arm_gets_its_rate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    experiment(d, "exp.toml", "learned+dropout", 5, "[1, 2]");
    ok(&fbkws(d, &["--profile", "desk", "train", "--config", "exp.toml"]));
    let run = d.join("work/runs/learned+dropout_K5");
    for s in [1, 2] {
        assert!(run.join(format!("seed{s}/record.csv")).is_file());
    }
    let (model, meta) = checkpoint::load(&run.join("seed1/checkpoint.fbkws")).unwrap();
    assert_eq!(model.frontend.filterbank.dropout_rate(), 0.4);
    assert_eq!(meta.arm, "learned+dropout");
    let before = std::fs::read(run.join("seed2/record.csv")).unwrap();
    let again = ok(&fbkws(d, &["--profile", "desk", "train", "--config", "exp.toml"]));
    assert!(again.contains("seed 1: already complete"));
    assert!(!again.contains("epoch"));
    assert_eq!(std::fs::read(run.join("seed2/record.csv")).unwrap(), before);
    // a changed config may not reuse the run directory
    experiment(d, "other.toml", "learned+dropout", 5, "[1, 2]");
    let other = std::fs::read_to_string(d.join("other.toml")).unwrap().replace("batch_size = 4", "batch_size = 2");
    write(d, "other.toml", &other);
    let out = fbkws(d, &["--profile", "desk", "train", "--config", "other.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_significance_energy_and_filterbanks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    experiment(d, "a.toml", "logmel", 8, "[1, 2]");
    experiment(d, "b.toml", "learned", 8, "[1, 2]");
    experiment(d, "c.toml", "learned", 40, "[1, 2]");
    for f in ["a.toml", "b.toml", "c.toml"] {
        ok(&fbkws(d, &["--profile", "desk", "train", "--config", f]));
    }
    let runs = d.join("work/runs");

    let single = ok(&fbkws(d, &["eval", "work/runs/logmel_K8", "--out", "single"]));
    assert!(single.contains("significance skipped"));
    assert!(!d.join("single/significance.csv").exists());

    let text = ok(&fbkws(
        d,
        &["eval", "work/runs/logmel_K8", "work/runs/learned_K8", "work/runs/learned_K40", "--out", "res"],
    ));
    let res = d.join("res");
    let acc = std::fs::read_to_string(res.join("accuracy_table.csv")).unwrap();
    // clean plus two SNRs of one seen noise
    let cells = 3;
    assert_eq!(acc.lines().count(), 1 + 3 * 2 * cells);
    let sig = std::fs::read_to_string(res.join("significance.csv")).unwrap();
    assert_eq!(sig.lines().count(), 1 + cells, "{sig}");
    assert!(sig.lines().skip(1).all(|l| l.starts_with("learned,8,logmel,8,")));
    let energy = std::fs::read_to_string(res.join("energy.csv")).unwrap();
    let rows: Vec<&str> = energy.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.starts_with("learned,40,")));
    assert!(text.contains("fewer multiplications, relative accuracy loss"));
    for f in [
        "mult_res8-narrow-like_K8.csv",
        "mult_res8-narrow-like_K40.csv",
        "filterbank_K8_learned.csv",
        "filterbank_K40_learned.csv",
        "filterbank_bands_K8_learned.csv",
        "noise_spectrum_nb.csv",
    ] {
        assert!(res.join(f).is_file(), "{f}");
    }
    let m = MultReport::from_csv(&std::fs::read_to_string(res.join("mult_res8-narrow-like_K40.csv")).unwrap()).unwrap();
    assert_eq!(m.filters, 40);

    let mismatch = fbkws(d, &["eval", "work/runs/learned_K40", "--filters", "8"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("K = 40"));
    assert!(runs.join("learned_K40/config.toml").is_file());
}

fn parse_export(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn export_of_fresh_checkpoint_is_the_mel_filterbank() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let k = 6;
    let model = TrainConfig::new(Arm::Learned, k, Variant::Res8NarrowLike).init_model(1).unwrap();
    let meta = CheckpointMeta {
        arm: "learned".into(),
        seed: 1,
        epoch: 0,
        val_loss: 0.0,
    };
    checkpoint::save(&d.join("fresh.fbkws"), &model, &meta).unwrap();
    let text = ok(&fbkws(d, &["export-fb", "fresh.fbkws", "--mel"]));
    let (header, rows) = parse_export(&text);
    assert_eq!(header.len(), 2 + 2 * k);
    assert_eq!(rows.len(), NUM_BINS);
    let mel = mel_filterbank(k, NUM_BINS, SAMPLE_RATE).unwrap();
    for (b, row) in rows.iter().enumerate() {
        assert_eq!(row[0] as usize, b);
        assert_eq!(row[1], bin_hz(b));
        assert!((row[1] - b as f64 * 16000.0 / 480.0).abs() < 1e-9);
        for c in 0..k {
            let w = mel.weights()[b * k + c];
            assert_eq!(row[2 + c] as f32, w);
            assert_eq!(row[2 + k + c] as f32, w);
        }
    }
    assert_eq!(rows.last().unwrap()[1], 8000.0);
}

#[test]
fn export_averages_seeds_and_names_corrupt_sections() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = d.join("run");
    let k = 4;
    let mut expect = vec![0.0f64; NUM_BINS * k];
    for seed in 1..=5u64 {
        let mut model = TrainConfig::new(Arm::Learned, k, Variant::Res8NarrowLike).init_model(seed).unwrap();
        for (i, w) in model.frontend.filterbank.weights_mut().data_mut().iter_mut().enumerate() {
            *w += ((i as u64 * 7 + seed * 13) % 11) as f32 * 0.05 - 0.2;
        }
        for (e, w) in expect.iter_mut().zip(model.frontend.filterbank.weights().data()) {
            *e += w.max(0.0) as f64 / 5.0;
        }
        let meta = CheckpointMeta {
            arm: "learned".into(),
            seed,
            epoch: 1,
            val_loss: 1.0,
        };
        let sd = run.join(format!("seed{seed}"));
        checkpoint::save(&sd.join("checkpoint.fbkws"), &model, &meta).unwrap();
        std::fs::write(sd.join("record.csv"), "").unwrap();
    }
    let text = ok(&fbkws(d, &["export-fb", "run", "--avg-seeds", "--out", "avg.csv"]));
    assert!(text.is_empty());
    let (_, rows) = parse_export(&std::fs::read_to_string(d.join("avg.csv")).unwrap());
    for (b, row) in rows.iter().enumerate() {
        for c in 0..k {
            assert!((row[2 + c] - expect[b * k + c]).abs() < 1e-6);
        }
    }

    let mut bytes = std::fs::read(run.join("seed1/checkpoint.fbkws")).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    std::fs::write(d.join("bad.fbkws"), &bytes).unwrap();
    let out = fbkws(d, &["export-fb", "bad.fbkws"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint section `data`"));
}

#[test]
fn count_csv_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&fbkws(dir.path(), &["count", "--filters", "40", "--csv"]));
    let r = MultReport::from_csv(&text).unwrap();
    assert_eq!((r.variant, r.filters, r.frames), (Variant::Res15Like, 40, 98));
    let table = ok(&fbkws(dir.path(), &["count", "--filters", "40,8"]));
    let ratio: f64 = table
        .lines()
        .find_map(|l| l.strip_prefix("total(K=40) / total(K=8) = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((ratio - 6.34).abs() <= 0.3 * 6.34);
}
