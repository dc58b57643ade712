//! Accuracy tables, Welch t-tests, energy arithmetic and spectral analysis
//! of noises and learned filterbanks.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::manifest::{Condition, ManifestEntry};
use crate::data::mix::Snr;
use crate::dsp::{bin_hz, mean_power, Stft};
use crate::error::{Error, Result};
use crate::model::MultReport;
use crate::tensor::Tensor;
use crate::CLIP_LEN;

/// One test condition: an SNR crossed with seen/unseen/clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub snr: Snr,
    pub condition: Condition,
}

impl CellKey {
    pub fn of(entry: &ManifestEntry) -> Self {
        CellKey {
            snr: entry.snr_db,
            condition: entry.seen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CellCount {
    pub correct: usize,
    pub total: usize,
}

impl CellCount {
    /// Accuracy in percent; `None` for an empty cell.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

/// Correct/total counts per cell. Cells listed in `grid` appear even when
/// no entry falls into them.
pub fn cell_counts(
    decisions: &[usize],
    labels: &[usize],
    entries: &[ManifestEntry],
    grid: &[CellKey],
) -> Result<BTreeMap<CellKey, CellCount>> {
    if decisions.len() != labels.len() || labels.len() != entries.len() {
        return Err(Error::shape(
            "cell_counts",
            &[decisions.len(), labels.len()],
            &[entries.len(), entries.len()],
        ));
    }
    let mut out: BTreeMap<CellKey, CellCount> = grid.iter().map(|&k| (k, CellCount::default())).collect();
    for ((d, l), e) in decisions.iter().zip(labels).zip(entries) {
        let c = out.entry(CellKey::of(e)).or_default();
        c.total += 1;
        c.correct += usize::from(d == l);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub arm: String,
    pub filters: usize,
    pub cell: CellKey,
    pub rep: usize,
    pub count: CellCount,
}

impl AccuracyRow {
    pub fn accuracy(&self) -> Option<f64> {
        self.count.accuracy()
    }
}

/// Accuracy per (arm, K, cell, repetition).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyTable {
    pub fn extend(&mut self, other: AccuracyTable) {
        self.rows.extend(other.rows);
    }

    /// `(arm, K)` pairs in first-seen order.
    pub fn arms(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for r in &self.rows {
            if !out.iter().any(|(a, k)| a == &r.arm && *k == r.filters) {
                out.push((r.arm.clone(), r.filters));
            }
        }
        out
    }

    pub fn cells(&self) -> Vec<CellKey> {
        self.rows.iter().map(|r| r.cell).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Non-missing repetition accuracies of one cell, in repetition order.
    pub fn values(&self, arm: &str, filters: usize, cell: CellKey) -> Vec<f64> {
        let mut rows: Vec<&AccuracyRow> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm && r.filters == filters && r.cell == cell)
            .collect();
        rows.sort_by_key(|r| r.rep);
        rows.iter().filter_map(|r| r.accuracy()).collect()
    }

    /// Mean over repetitions; `None` when the cell is missing.
    pub fn average(&self, arm: &str, filters: usize, cell: CellKey) -> Option<f64> {
        let v = self.values(arm, filters, cell);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Accuracy over all cells pooled, per repetition.
    pub fn overall(&self, arm: &str, filters: usize) -> Vec<f64> {
        let mut per: BTreeMap<usize, CellCount> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.arm == arm && r.filters == filters) {
            let c = per.entry(r.rep).or_default();
            c.correct += r.count.correct;
            c.total += r.count.total;
        }
        per.values().filter_map(CellCount::accuracy).collect()
    }

    /// Columns `arm,K,snr_db,condition,rep,accuracy`; missing cells leave
    /// the accuracy field empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,K,snr_db,condition,rep,accuracy\n");
        for r in &self.rows {
            let acc = r.accuracy().map(|a| format!("{a:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.arm, r.filters, r.cell.snr, r.cell.condition, r.rep, acc
            ));
        }
        out
    }
}

/// Per-cell accuracy of every repetition's decisions on one test set.
pub fn accuracy_breakdown(
    arm: &str,
    filters: usize,
    reps: &[Vec<usize>],
    labels: &[usize],
    entries: &[ManifestEntry],
    grid: &[CellKey],
) -> Result<AccuracyTable> {
    let mut table = AccuracyTable::default();
    for (rep, decisions) in reps.iter().enumerate() {
        for (cell, count) in cell_counts(decisions, labels, entries, grid)? {
            table.rows.push(AccuracyRow {
                arm: arm.to_string(),
                filters,
                cell,
                rep,
                count,
            });
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub alpha: f64,
    pub significant: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's two-sided two-sample t-test.
///
/// Two constant samples have no spread: equal means give `t = 0, p = 1`,
/// different means give an infinite `t` and `p = 0`.
pub fn welch_ttest(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Contract("t-test input is not finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let result = |t: f64, df: f64, p: f64| TTestResult {
        t,
        df,
        p,
        alpha,
        significant: p < alpha,
    };
    if se2 == 0.0 {
        let df = (a.len() + b.len() - 2) as f64;
        return Ok(if ma == mb {
            result(0.0, df, 1.0)
        } else {
            result(if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY }, df, 0.0)
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    Ok(result(t, df, t_two_sided_p(t, df)))
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

pub const BETA_TOLERANCE: f64 = 1e-10;

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)`, by Lentz's continued fraction.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    // the fraction converges fast only below the mean of the distribution
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - regularized_beta(1.0 - x, b, a);
    }
    ln_front.exp() * beta_fraction(x, a, b) / a
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < BETA_TOLERANCE {
            break;
        }
    }
    h
}

/// One comparison of two arms in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceRow {
    pub arm: (String, usize),
    pub reference: (String, usize),
    pub cell: CellKey,
    pub mean_arm: f64,
    pub mean_reference: f64,
    pub test: TTestResult,
}

/// Welch tests of `arm` against `reference` in every cell both have.
pub fn compare_arms(
    table: &AccuracyTable,
    arm: (&str, usize),
    reference: (&str, usize),
    alpha: f64,
) -> Result<Vec<SignificanceRow>> {
    let mut out = Vec::new();
    for cell in table.cells() {
        let a = table.values(arm.0, arm.1, cell);
        let b = table.values(reference.0, reference.1, cell);
        if a.len() < 2 || b.len() < 2 {
            continue;
        }
        out.push(SignificanceRow {
            arm: (arm.0.to_string(), arm.1),
            reference: (reference.0.to_string(), reference.1),
            cell,
            mean_arm: a.iter().sum::<f64>() / a.len() as f64,
            mean_reference: b.iter().sum::<f64>() / b.len() as f64,
            test: welch_ttest(&a, &b, alpha)?,
        });
    }
    Ok(out)
}

pub fn significance_csv(rows: &[SignificanceRow]) -> String {
    let mut out = String::from(
        "arm,K,reference,reference_K,snr_db,condition,mean_arm,mean_reference,t,df,p,significant\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.6},{:.4},{:.6},{}\n",
            r.arm.0,
            r.arm.1,
            r.reference.0,
            r.reference.1,
            r.cell.snr,
            r.cell.condition,
            r.mean_arm,
            r.mean_reference,
            r.test.t,
            r.test.df,
            r.test.p,
            r.test.significant
        ));
    }
    out
}

/// `total_a / total_b`.
pub fn energy_ratio(a: &MultReport, b: &MultReport) -> Result<f64> {
    energy_ratio_totals(a.total as f64, b.total as f64)
}

pub fn energy_ratio_totals(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Contract(format!("energy ratio needs positive totals, got {a} and {b}")));
    }
    Ok(a / b)
}

/// `100 · (reference − new) / reference`; negative values are gains.
pub fn relative_accuracy_loss(reference: f64, new: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::Contract(format!("reference accuracy must be positive, got {reference}")));
    }
    Ok(100.0 * (reference - new) / reference)
}

/// Mean power spectrum of a recording and its prominent peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTermSpectrum {
    pub power: Vec<f64>,
    pub frames: usize,
}

impl LongTermSpectrum {
    /// Local maxima at least `threshold_db` above the median bin and within
    /// `range_db` of the strongest bin, strongest first.
    pub fn peaks(&self, threshold_db: f64, range_db: f64) -> Vec<usize> {
        let p = &self.power;
        let mut sorted = p.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let max = sorted[sorted.len() - 1];
        let floor = (median * 10f64.powf(threshold_db / 10.0)).max(max * 10f64.powf(-range_db / 10.0));
        let mut out: Vec<usize> = (0..p.len())
            .filter(|&f| {
                let left = f == 0 || p[f] > p[f - 1];
                let right = f + 1 == p.len() || p[f] >= p[f + 1];
                left && right && p[f] > floor
            })
            .collect();
        out.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        out
    }

    /// Peaks with the default thresholds (10 dB over the median, within 30 dB of the maximum).
    pub fn default_peaks(&self) -> Vec<usize> {
        self.peaks(10.0, 30.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,hz,power,power_db\n");
        for (f, &v) in self.power.iter().enumerate() {
            out.push_str(&format!("{f},{:.4},{v:.6e},{:.4}\n", bin_hz(f), 10.0 * v.max(1e-300).log10()));
        }
        out
    }
}

pub fn long_term_spectrum(samples: &[f32]) -> Result<LongTermSpectrum> {
    if samples.len() < CLIP_LEN {
        return Err(Error::Contract(format!(
            "long-term spectrum needs at least {CLIP_LEN} samples, got {}",
            samples.len()
        )));
    }
    if mean_power(samples) == 0.0 {
        return Err(Error::Degenerate("long-term spectrum of silence".into()));
    }
    let spec = Stft::new().power(samples)?;
    let mut power = vec![0.0f64; spec.bins()];
    for t in 0..spec.frames() {
        for (acc, &v) in power.iter_mut().zip(spec.frame(t)) {
            *acc += v as f64;
        }
    }
    let n = spec.frames() as f64;
    power.iter_mut().for_each(|v| *v /= n);
    Ok(LongTermSpectrum {
        power,
        frames: spec.frames(),
    })
}

/// Frequency band `[lo_hz, hi_hz]`, both ends inclusive.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Band {
    pub name: String,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl Band {
    pub fn new(name: &str, lo_hz: f64, hi_hz: f64) -> Self {
        Band {
            name: name.to_string(),
            lo_hz,
            hi_hz,
        }
    }

    pub fn contains(&self, hz: f64) -> bool {
        (self.lo_hz..=self.hi_hz).contains(&hz)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSummary {
    pub band: Band,
    /// Integrated `g(W)` per channel inside the band.
    pub learned: Vec<f64>,
    pub mel: Vec<f64>,
    /// Share of the whole filterbank's response that falls inside the band.
    pub learned_share: f64,
    pub mel_share: f64,
}

impl BandSummary {
    /// Per-channel learned/Mel ratio; `None` where the Mel response is zero.
    pub fn channel_ratios(&self) -> Vec<Option<f64>> {
        self.learned
            .iter()
            .zip(&self.mel)
            .map(|(l, m)| (*m > 0.0).then(|| l / m))
            .collect()
    }

    pub fn share_ratio(&self) -> f64 {
        self.learned_share / self.mel_share
    }
}

/// Per-bin `g(W)` of a learned and a Mel filterbank, plus band integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankReport {
    pub learned: Tensor,
    pub mel: Tensor,
    pub bands: Vec<BandSummary>,
}

impl FilterbankReport {
    /// `bin,hz,learned_0..,mel_0..` with one row per frequency bin.
    pub fn curves_csv(&self) -> String {
        let (f, k) = (self.learned.dim(0), self.learned.dim(1));
        let mut out = String::from("bin,hz");
        for c in 0..k {
            out.push_str(&format!(",learned_{c}"));
        }
        for c in 0..k {
            out.push_str(&format!(",mel_{c}"));
        }
        out.push('\n');
        for b in 0..f {
            out.push_str(&format!("{b},{:.4}", bin_hz(b)));
            for t in [&self.learned, &self.mel] {
                for c in 0..k {
                    out.push_str(&format!(",{:.6}", t.data()[b * k + c]));
                }
            }
            out.push('\n');
        }
        out
    }

    /// `band,lo_hz,hi_hz,channel,learned,mel,ratio`, with channel `all` for the shares.
    pub fn bands_csv(&self) -> String {
        let mut out = String::from("band,lo_hz,hi_hz,channel,learned,mel,ratio\n");
        for s in &self.bands {
            let head = format!("{},{},{}", s.band.name, s.band.lo_hz, s.band.hi_hz);
            for (c, r) in s.channel_ratios().iter().enumerate() {
                let r = r.map(|v| format!("{v:.6}")).unwrap_or_default();
                out.push_str(&format!("{head},{c},{:.6},{:.6},{r}\n", s.learned[c], s.mel[c]));
            }
            out.push_str(&format!(
                "{head},all,{:.6},{:.6},{:.6}\n",
                s.learned_share,
                s.mel_share,
                s.share_ratio()
            ));
        }
        out
    }
}

fn band_integrals(g: &Tensor, band: &Band) -> (Vec<f64>, f64) {
    let (f, k) = (g.dim(0), g.dim(1));
    let mut per = vec![0.0; k];
    let mut total = 0.0;
    for b in 0..f {
        for c in 0..k {
            let v = g.data()[b * k + c] as f64;
            total += v;
            if band.contains(bin_hz(b)) {
                per[c] += v;
            }
        }
    }
    let share = if total > 0.0 { per.iter().sum::<f64>() / total } else { 0.0 };
    (per, share)
}

/// Compares `g(W_learned)` with `g(W_mel)` over `bands`. Both use the
/// rectified weights, so negative entries count as zero response.
pub fn filterbank_response_report(
    w_learned: &Tensor,
    w_mel: &Tensor,
    bands: &[Band],
) -> Result<FilterbankReport> {
    if w_learned.shape() != w_mel.shape() || w_learned.rank() != 2 {
        return Err(Error::shape("filterbank_response_report", w_learned.shape(), w_mel.shape()));
    }
    let learned = w_learned.map(|v| v.max(0.0));
    let mel = w_mel.map(|v| v.max(0.0));
    let bands = bands
        .iter()
        .map(|band| {
            let (l, ls) = band_integrals(&learned, band);
            let (m, ms) = band_integrals(&mel, band);
            BandSummary {
                band: band.clone(),
                learned: l,
                mel: m,
                learned_share: ls,
                mel_share: ms,
            }
        })
        .collect();
    Ok(FilterbankReport { learned, mel, bands })
}

/// Element-wise mean of several `g(W)`.
pub fn average_response(weights: &[&Tensor]) -> Result<Tensor> {
    let first = weights
        .first()
        .ok_or_else(|| Error::Contract("no filterbanks to average".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for w in weights {
        if w.shape() != first.shape() {
            return Err(Error::shape("average_response", w.shape(), first.shape()));
        }
        for (a, v) in acc.iter_mut().zip(w.data()) {
            *a += v.max(0.0) as f64;
        }
    }
    let n = weights.len() as f64;
    Tensor::new(first.shape(), acc.into_iter().map(|v| (v / n) as f32).collect())
}
