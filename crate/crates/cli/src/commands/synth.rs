use std::path::Path;

use fbkws_core::data::{build_manifest, scan_root, synth_dataset, NoiseBank};

use super::write_file;
use crate::config::DatasetConfig;
use crate::error::{CliError, Result};

/// Writes the synthetic corpus under `out`, or the manifest of an ingested
/// corpus to `out/manifest.csv`.
pub fn run(cfg: &DatasetConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    if let Some(spec) = &cfg.synth {
        let ds = synth_dataset(spec, cfg.seed)?;
        ds.write(out)?;
        println!(
            "wrote {} clips, {} noise recordings and {} manifest rows to {}",
            ds.clips.len(),
            ds.noises.iter().count(),
            ds.manifest.len(),
            out.display()
        );
    } else if let Some(ing) = &cfg.ingest {
        let utts = scan_root(&ing.speech_root)?;
        if utts.is_empty() {
            return Err(CliError::Invalid(format!(
                "no `<label>/<clip>.wav` files under `{}`",
                ing.speech_root.display()
            )));
        }
        let bank = NoiseBank::load_dir(&ing.noise_dir, &ing.protocol.unseen_noises())?;
        let manifest = build_manifest(&utts, &bank, &ing.protocol)?;
        let path = out.join("manifest.csv");
        write_file(&path, &manifest.to_csv()?)?;
        println!(
            "indexed {} utterances and {} noise recordings; wrote {} manifest rows to {}",
            utts.len(),
            bank.iter().count(),
            manifest.len(),
            path.display()
        );
    }
    Ok(())
}
