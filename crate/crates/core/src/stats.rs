//! Paired-bootstrap confidence intervals, TOST equivalence, block
//! bootstrap, all-pairs reports, and seed variance summaries.
//!
//! Resampling draws from a ChaCha8 stream seeded directly; confidence
//! bounds are percentile-method with linear interpolation between order
//! statistics. The independent bootstrap is the block bootstrap at block
//! size one, so both share one seed-stream contract. Determinism holds
//! within this implementation, not across languages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 42;

/// Circular moving-block resample means.
pub(crate) fn bootstrap_means(
    diffs: &[f64],
    block: usize,
    resamples: usize,
    seed: u64,
) -> Vec<f64> {
    let n = diffs.len();
    let n_blocks = n.div_ceil(block);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..n_blocks {
            let start = rng.gen_range(0..n);
            let take = block.min(n - count);
            for j in 0..take {
                sum += diffs[(start + j) % n];
            }
            count += take;
        }
        means.push(sum / n as f64);
    }
    means
}

/// Percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let r = sorted.len();
    if r == 1 {
        return sorted[0];
    }
    let pos = q * (r - 1) as f64;
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    if k + 1 >= r {
        sorted[r - 1]
    } else {
        sorted[k] + frac * (sorted[k + 1] - sorted[k])
    }
}

/// Percentile CI from circular moving-block resampling. Block size one is
/// the independent bootstrap.
pub fn block_bootstrap_ci(
    diffs: &[f64],
    block: usize,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    if diffs.len() < 2 {
        return Err(Error::Stats(format!("need at least 2 samples, got {}", diffs.len())));
    }
    if block == 0 || block > diffs.len() {
        return Err(Error::Stats(format!(
            "block size {block} outside 1..={}",
            diffs.len()
        )));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Stats(format!("level {level} outside (0, 1)")));
    }
    if resamples == 0 {
        return Err(Error::Stats("resamples must be positive".to_string()));
    }
    let mut means = bootstrap_means(diffs, block, resamples, seed);
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - level) / 2.0;
    let lo = percentile(&means, tail);
    let hi = percentile(&means, 1.0 - tail);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Ok((mean, lo, hi))
}

/// Independent paired bootstrap: percentile CI over resampled means of the
/// per-batch differences.
pub fn paired_bootstrap_ci(
    diffs: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    block_bootstrap_ci(diffs, 1, resamples, level, seed)
}

/// Two one-sided tests: equivalent iff the whole 90% CI lies inside the
/// closed interval [−margin, +margin].
pub fn tost(
    diffs: &[f64],
    margin: f64,
    resamples: usize,
    seed: u64,
) -> Result<(bool, f64, f64)> {
    if margin <= 0.0 {
        return Err(Error::Stats(format!("margin {margin} must be positive")));
    }
    let (_, lo, hi) = paired_bootstrap_ci(diffs, resamples, 0.90, seed)?;
    Ok((lo >= -margin && hi <= margin, lo, hi))
}

/// Per-pair CI and TOST verdicts, one entry per margin.
#[derive(Clone, Debug)]
pub struct PairReport {
    pub label_a: String,
    pub label_b: String,
    pub mean_diff: f64,
    pub ci95: (f64, f64),
    pub ci90: (f64, f64),
    /// Aligned with the report's margins.
    pub verdicts: Vec<bool>,
}

/// Block-bootstrap robustness rerun at one block size.
#[derive(Clone, Debug)]
pub struct BlockSection {
    pub block: usize,
    /// [pair][margin].
    pub pair_verdicts: Vec<Vec<bool>>,
    pub counts_per_margin: Vec<(f64, usize)>,
}

/// All-pairs equivalence report over labeled per-batch loss vectors.
#[derive(Clone, Debug)]
pub struct EquivReport {
    pub labels: Vec<String>,
    pub margins: Vec<f64>,
    pub pairs: Vec<PairReport>,
    pub counts_per_margin: Vec<(f64, usize)>,
    pub block_sections: Vec<BlockSection>,
    pub n_batches: usize,
}

impl EquivReport {
    /// Machine-readable line records.
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.push(format!(
            "variants={} batches={} pairs={}",
            self.labels.len(),
            self.n_batches,
            self.pairs.len()
        ));
        for p in &self.pairs {
            let verdicts: Vec<String> = self
                .margins
                .iter()
                .zip(&p.verdicts)
                .map(|(m, v)| format!("tost@{m}={}", if *v { "equivalent" } else { "different" }))
                .collect();
            out.push(format!(
                "pair={}|{} mean_diff={} ci95=[{},{}] ci90=[{},{}] {}",
                p.label_a,
                p.label_b,
                p.mean_diff,
                p.ci95.0,
                p.ci95.1,
                p.ci90.0,
                p.ci90.1,
                verdicts.join(" ")
            ));
        }
        for (m, c) in &self.counts_per_margin {
            out.push(format!("margin={m} equivalent_pairs={c}/{}", self.pairs.len()));
        }
        for section in &self.block_sections {
            for (m, c) in &section.counts_per_margin {
                out.push(format!(
                    "block={} margin={m} equivalent_pairs={c}/{}",
                    section.block,
                    self.pairs.len()
                ));
            }
        }
        out
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<28} {:>10} {:>22} {:>22}",
            "pair", "mean diff", "95% CI", "90% CI"
        ));
        for m in &self.margins {
            s.push_str(&format!(" {:>12}", format!("TOST δ={m}")));
        }
        s.push('\n');
        for p in &self.pairs {
            s.push_str(&format!(
                "{:<28} {:>10.5} [{:>9.5}, {:>9.5}] [{:>9.5}, {:>9.5}]",
                format!("{} vs {}", p.label_a, p.label_b),
                p.mean_diff,
                p.ci95.0,
                p.ci95.1,
                p.ci90.0,
                p.ci90.1
            ));
            for v in &p.verdicts {
                s.push_str(&format!(" {:>12}", if *v { "equivalent" } else { "different" }));
            }
            s.push('\n');
        }
        for (m, c) in &self.counts_per_margin {
            s.push_str(&format!("equivalent at δ={m}: {c}/{} pairs\n", self.pairs.len()));
        }
        for section in &self.block_sections {
            for (m, c) in &section.counts_per_margin {
                s.push_str(&format!(
                    "block bootstrap b={}: equivalent at δ={m}: {c}/{} pairs\n",
                    section.block,
                    self.pairs.len()
                ));
            }
        }
        s
    }
}

/// Every unordered pair of variants gets paired CIs and TOST verdicts at
/// each margin; block sizes add robustness sections.
pub fn all_pairs_report(
    variants: &[(String, Vec<f64>)],
    margins: &[f64],
    blocks: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<EquivReport> {
    if variants.len() < 2 {
        return Err(Error::Stats("need at least 2 variants".to_string()));
    }
    if margins.is_empty() {
        return Err(Error::Stats("need at least one margin".to_string()));
    }
    let n = variants[0].1.len();
    for (label, losses) in variants {
        if losses.len() != n {
            return Err(Error::Stats(format!(
                "variant '{label}' has {} batches, expected {n} (misaligned inputs)",
                losses.len()
            )));
        }
    }
    if n < 2 {
        return Err(Error::Stats("need at least 2 aligned batches".to_string()));
    }
    let mut pairs = Vec::new();
    let mut pair_diffs = Vec::new();
    for i in 0..variants.len() {
        for j in (i + 1)..variants.len() {
            let diffs: Vec<f64> = variants[i]
                .1
                .iter()
                .zip(&variants[j].1)
                .map(|(a, b)| a - b)
                .collect();
            let (mean, lo95, hi95) = paired_bootstrap_ci(&diffs, resamples, 0.95, seed)?;
            let (_, lo90, hi90) = paired_bootstrap_ci(&diffs, resamples, 0.90, seed)?;
            let verdicts: Vec<bool> =
                margins.iter().map(|&m| lo90 >= -m && hi90 <= m).collect();
            pairs.push(PairReport {
                label_a: variants[i].0.clone(),
                label_b: variants[j].0.clone(),
                mean_diff: mean,
                ci95: (lo95, hi95),
                ci90: (lo90, hi90),
                verdicts,
            });
            pair_diffs.push(diffs);
        }
    }
    let counts_per_margin: Vec<(f64, usize)> = margins
        .iter()
        .enumerate()
        .map(|(mi, &m)| (m, pairs.iter().filter(|p| p.verdicts[mi]).count()))
        .collect();
    let mut block_sections = Vec::new();
    for &block in blocks {
        let mut pair_verdicts = Vec::new();
        for diffs in &pair_diffs {
            let (_, lo90, hi90) = block_bootstrap_ci(diffs, block, resamples, 0.90, seed)?;
            pair_verdicts
                .push(margins.iter().map(|&m| lo90 >= -m && hi90 <= m).collect::<Vec<bool>>());
        }
        let counts: Vec<(f64, usize)> = margins
            .iter()
            .enumerate()
            .map(|(mi, &m)| {
                (m, pair_verdicts.iter().filter(|v| v[mi]).count())
            })
            .collect();
        block_sections.push(BlockSection { block, pair_verdicts, counts_per_margin: counts });
    }
    Ok(EquivReport {
        labels: variants.iter().map(|(l, _)| l.clone()).collect(),
        margins: margins.to_vec(),
        pairs,
        counts_per_margin,
        block_sections,
        n_batches: n,
    })
}

/// Per-variant spread statistics over per-seed final losses.
#[derive(Clone, Debug)]
pub struct SeedVariance {
    /// (label, mean, sample std).
    pub per_variant: Vec<(String, f64, f64)>,
    /// max mean − min mean across variants.
    pub spread_of_means: f64,
    pub avg_std: f64,
    /// None when the average intra-variant std is zero (flagged).
    pub spread_to_noise: Option<f64>,
}

pub fn seed_variance(runs: &[(String, Vec<f64>)]) -> Result<SeedVariance> {
    if runs.is_empty() {
        return Err(Error::Stats("no variants".to_string()));
    }
    let mut per_variant = Vec::new();
    for (label, values) in runs {
        if values.len() < 2 {
            return Err(Error::Stats(format!(
                "variant '{label}' needs at least 2 seeds, got {}",
                values.len()
            )));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (values.len() - 1) as f64;
        per_variant.push((label.clone(), mean, var.sqrt()));
    }
    let means: Vec<f64> = per_variant.iter().map(|(_, m, _)| *m).collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max)
        - means.iter().cloned().fold(f64::MAX, f64::min);
    let avg_std =
        per_variant.iter().map(|(_, _, s)| s).sum::<f64>() / per_variant.len() as f64;
    let ratio = if avg_std > 0.0 { Some(spread / avg_std) } else { None };
    Ok(SeedVariance { per_variant, spread_of_means: spread, avg_std, spread_to_noise: ratio })
}
