use fbkws_core::model::{count_multiplications, ModelConfig, MultReport, Variant};

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct CountRequest {
    pub variant: Variant,
    pub filters: Vec<usize>,
    pub frames: usize,
    pub csv: bool,
}

pub fn reports(req: &CountRequest) -> Result<Vec<MultReport>> {
    if req.filters.is_empty() {
        return Err(CliError::Invalid("at least one filter count is required".into()));
    }
    req.filters
        .iter()
        .map(|&k| Ok(count_multiplications(&ModelConfig::for_variant(req.variant, req.frames, k))?))
        .collect()
}

/// Human-readable table, or with `csv` one report block per `K` separated by
/// a blank line; each block parses with [`MultReport::from_csv`].
pub fn render(req: &CountRequest) -> Result<String> {
    let reps = reports(req)?;
    if req.csv {
        return Ok(reps.iter().map(MultReport::to_csv).collect::<Vec<_>>().join("\n"));
    }
    let mut out = String::new();
    for r in &reps {
        out.push_str(&format!("{} K={} T={}\n", r.variant, r.filters, r.frames));
        for l in &r.layers {
            out.push_str(&format!("  {:<12} {:>14}\n", l.name, l.multiplications));
        }
        out.push_str(&format!("  {:<12} {:>14}\n", "total", r.total));
        out.push_str(&format!("  {:<12} {:>14}  (not in total)\n", "filterbank", r.filterbank));
    }
    for w in reps.windows(2) {
        out.push_str(&format!(
            "total(K={}) / total(K={}) = {:.4}\n",
            w[0].filters,
            w[1].filters,
            w[0].total as f64 / w[1].total as f64
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(filters: Vec<usize>, csv: bool) -> CountRequest {
        CountRequest {
            variant: Variant::Res15Like,
            filters,
            frames: 98,
            csv,
        }
    }

    #[test]
    fn csv_blocks_parse_back() {
        let text = render(&req(vec![40, 8], true)).unwrap();
        let blocks: Vec<&str> = text.split("\n\n").collect();
        assert_eq!(blocks.len(), 2);
        let expect = reports(&req(vec![40, 8], false)).unwrap();
        for (b, e) in blocks.iter().zip(&expect) {
            assert_eq!(&MultReport::from_csv(b).unwrap(), e);
        }
    }

    #[test]
    fn table_prints_adjacent_ratios() {
        let text = render(&req(vec![40, 8, 5], false)).unwrap();
        assert!(text.contains("total(K=40) / total(K=8) = "));
        assert!(text.contains("total(K=8) / total(K=5) = "));
    }

    #[test]
    fn one_filter_is_the_cheapest() {
        let totals: Vec<u64> = reports(&req(vec![1, 5, 8, 40], false)).unwrap().iter().map(|r| r.total).collect();
        assert!(totals.windows(2).all(|w| w[0] < w[1]));
    }
}
