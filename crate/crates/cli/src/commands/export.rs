use std::path::{Path, PathBuf};

use fbkws_core::checkpoint;
use fbkws_core::dsp::bin_hz;
use fbkws_core::eval::average_response;
use fbkws_core::frontend::FilterbankLayer;
use fbkws_core::Tensor;

use super::{completed_seeds, CHECKPOINT_FILE};
use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct ExportRequest {
    /// A checkpoint, or with `avg_seeds` a run directory.
    pub path: PathBuf,
    pub avg_seeds: bool,
    pub mel: bool,
}

fn load_weights(path: &Path) -> Result<Tensor> {
    let (model, _) = checkpoint::load(path)?;
    Ok(model.frontend.filterbank.weights().clone())
}

/// `g(W)` of the checkpoint, or the element-wise mean over a run's seeds.
pub fn response(req: &ExportRequest) -> Result<Tensor> {
    if !req.avg_seeds {
        return Ok(load_weights(&req.path)?.map(|v| v.max(0.0)));
    }
    let seeds = completed_seeds(&req.path)?;
    if seeds.is_empty() {
        return Err(CliError::Invalid(format!("`{}` has no finished seeds", req.path.display())));
    }
    let ws = seeds
        .iter()
        .map(|(_, d)| load_weights(&d.join(CHECKPOINT_FILE)))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_response(&ws.iter().collect::<Vec<_>>())?)
}

/// `bin,hz,g_0..` and with `mel` the `mel_0..` columns of the same `K`.
/// Values print in shortest round-trip form.
pub fn render(req: &ExportRequest) -> Result<String> {
    let g = response(req)?;
    let (bins, k) = (g.dim(0), g.dim(1));
    let mel = if req.mel {
        Some(FilterbankLayer::init_from_mel(k)?.weights().clone())
    } else {
        None
    };
    let mut out = String::from("bin,hz");
    for c in 0..k {
        out.push_str(&format!(",g_{c}"));
    }
    if mel.is_some() {
        for c in 0..k {
            out.push_str(&format!(",mel_{c}"));
        }
    }
    out.push('\n');
    for b in 0..bins {
        out.push_str(&format!("{b},{}", bin_hz(b)));
        for t in std::iter::once(&g).chain(mel.as_ref()) {
            for c in 0..k {
                out.push_str(&format!(",{}", t.data()[b * k + c]));
            }
        }
        out.push('\n');
    }
    Ok(out)
}
