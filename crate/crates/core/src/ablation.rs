//! The seven-row toggle grid over pseudo labels, sequential perturbations,
//! intra-modal and inter-modal contrastive losses.

use std::fmt::Write as _;

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, MetricTable};
use crate::trainer::{continue_training, pretrain, TrainOutcome};

/// `(use_pseudo, use_perturb, use_intra_cl, use_inter_cl)` per row; row 1 is
/// the labeled-only baseline and row 7 the full configuration.
pub const ABLATION_ROWS: [(bool, bool, bool, bool); 7] = [
    (false, false, false, false),
    (true, false, false, false),
    (true, true, false, false),
    (true, true, true, false),
    (true, false, false, true),
    (true, true, false, true),
    (true, true, true, true),
];

pub const ABLATION_SEEDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// 1-based row number.
    pub row: usize,
    pub toggles: (bool, bool, bool, bool),
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricTable>,
    pub median: MetricTable,
}

/// Element-wise median; the mean of the two middle values for even counts.
pub fn median_table(tables: &[MetricTable]) -> Result<MetricTable> {
    if tables.is_empty() {
        return Err(Error::Precondition("median of no metric tables".into()));
    }
    let mut values = [[0.0; 4]; 2];
    for (i, row) in values.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut xs: Vec<f64> = tables.iter().map(|t| t.values[i][j]).collect();
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            *cell = if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) };
        }
    }
    Ok(MetricTable { values })
}

/// Seeds used for a base seed: `seed, seed + 1, ...`.
pub fn ablation_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Pretraining outcome of every seed. Pretraining does not depend on the
/// toggles, so all rows share it.
pub fn pretrain_seeds(
    config: &TrainConfig,
    seeds: &[u64],
    train_data: &Dataset,
    validation: Option<&Dataset>,
) -> Result<Vec<(u64, TrainOutcome)>> {
    seeds
        .iter()
        .map(|&seed| Ok((seed, pretrain(&TrainConfig { seed, ..config.clone() }, train_data, validation)?)))
        .collect()
}

fn row_toggles(row: usize) -> Result<(bool, bool, bool, bool)> {
    ABLATION_ROWS
        .get(row.wrapping_sub(1))
        .copied()
        .ok_or_else(|| Error::Config(format!("ablation row {row} outside 1..=7")))
}

/// Continues every pretrained seed with one row's toggles and scores the
/// best-validation parameters on `test`.
pub fn run_row_pretrained(
    config: &TrainConfig,
    row: usize,
    pretrained: &[(u64, TrainOutcome)],
    train_data: &Dataset,
    validation: Option<&Dataset>,
    test: &Dataset,
) -> Result<AblationRow> {
    let toggles = row_toggles(row)?;
    let mut per_seed = Vec::with_capacity(pretrained.len());
    for (seed, outcome) in pretrained {
        let cfg = TrainConfig {
            seed: *seed,
            ..config.with_toggles(toggles)
        };
        let outcome = continue_training(outcome, &cfg, train_data, validation)?;
        let metrics = evaluate_model(&outcome.state.model, &outcome.best.params, test, cfg.nms_threshold)?;
        log::info!("ablation row {row} seed {seed}: R@1,IoU=0.5 {:.2}", metrics.primary());
        per_seed.push(metrics);
    }
    Ok(AblationRow {
        row,
        toggles,
        seeds: pretrained.iter().map(|(s, _)| *s).collect(),
        median: median_table(&per_seed)?,
        per_seed,
    })
}

/// Trains one row for every seed from scratch.
pub fn run_row(
    config: &TrainConfig,
    row: usize,
    seeds: &[u64],
    train_data: &Dataset,
    validation: Option<&Dataset>,
    test: &Dataset,
) -> Result<AblationRow> {
    row_toggles(row)?;
    let pretrained = pretrain_seeds(config, seeds, train_data, validation)?;
    run_row_pretrained(config, row, &pretrained, train_data, validation, test)
}

/// Runs the given rows of the grid on shared pretraining.
pub fn run_rows(
    config: &TrainConfig,
    rows: &[usize],
    seeds: &[u64],
    train_data: &Dataset,
    validation: Option<&Dataset>,
    test: &Dataset,
) -> Result<Vec<AblationRow>> {
    for &row in rows {
        row_toggles(row)?;
    }
    let pretrained = pretrain_seeds(config, seeds, train_data, validation)?;
    rows.iter()
        .map(|&row| run_row_pretrained(config, row, &pretrained, train_data, validation, test))
        .collect()
}

/// Runs every row of the grid.
pub fn run_ablation(
    config: &TrainConfig,
    seeds: &[u64],
    train_data: &Dataset,
    validation: Option<&Dataset>,
    test: &Dataset,
) -> Result<Vec<AblationRow>> {
    let rows: Vec<usize> = (1..=ABLATION_ROWS.len()).collect();
    run_rows(config, &rows, seeds, train_data, validation, test)
}

fn flag(b: bool) -> u8 {
    u8::from(b)
}

/// One line per row with the toggles and the median of every grid cell.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let names: Vec<String> = MetricTable { values: [[0.0; 4]; 2] }
        .entries()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut s = format!("row,pseudo,perturb,intra_cl,inter_cl,seeds,{}\n", names.join(","));
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let cells: Vec<String> = r.median.entries().into_iter().map(|(_, v)| format!("{v:.4}")).collect();
        let (p, q, a, e) = r.toggles;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.row,
            flag(p),
            flag(q),
            flag(a),
            flag(e),
            seeds.join(" "),
            cells.join(",")
        );
    }
    s
}

/// Aligned table of toggles and median R@1 values.
pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    let mut s = format!(
        "{:<4}{:>8}{:>9}{:>7}{:>7}{:>10}{:>10}{:>10}{:>10}\n",
        "row", "pseudo", "perturb", "intra", "inter", "R1@0.1", "R1@0.3", "R1@0.5", "R1@0.7"
    );
    for r in rows {
        let (p, q, a, e) = r.toggles;
        let _ = write!(s, "{:<4}{:>8}{:>9}{:>7}{:>7}", r.row, mark(p), mark(q), mark(a), mark(e));
        for v in r.median.values[0] {
            let _ = write!(s, "{v:>10.2}");
        }
        s.push('\n');
    }
    s
}
