//! Counterfactual markets over the (class, type) match grid.
//!
//! The observed market is summarized by per-gender match moments: mean,
//! variance, and count of log wages in every (firm class, worker type)
//! cell. A separable market reallocates each gender's workers by a
//! diagonal rule, top classes hiring top types, while wages keep coming
//! from baseline cell moments. Comparing expected wages across these
//! allocations splits the gender gap into complementarity, sorting, and
//! bargaining, with an explicit residual. Gaps are female minus male.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::FirmClassing;
use crate::error::{Error, Result};
use crate::panel::{BiennialPanel, Gender};
use crate::util::{self, Accumulator};

/// Moments of one match cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMoment {
    pub mean: f64,
    /// Population variance of the cell's log wages.
    pub var: f64,
    pub count: f64,
}

/// One gender's side of the match grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderMoments {
    /// Cell moments indexed [class][type]; None where no worker-year
    /// observation landed.
    pub cells: Vec<Vec<Option<CellMoment>>>,
    /// P(class); sums to 1.
    pub class_marginal: Vec<f64>,
    /// P(type); sums to 1.
    pub type_marginal: Vec<f64>,
    /// Worker-year observations behind the grid.
    pub total: f64,
    /// Cells with fewer than 5 observations.
    pub low_support: Vec<(usize, usize)>,
}

impl GenderMoments {
    fn empty(class_count: usize, type_count: usize) -> Self {
        GenderMoments {
            cells: vec![vec![None; type_count]; class_count],
            class_marginal: vec![0.0; class_count],
            type_marginal: vec![0.0; type_count],
            total: 0.0,
            low_support: Vec::new(),
        }
    }

    /// Expected log wage over the grid: Σ share · mean.
    pub fn expected_wage(&self) -> f64 {
        let mut acc = Accumulator::new();
        for row in &self.cells {
            for cell in row.iter().flatten() {
                acc.add(cell.count * cell.mean);
            }
        }
        acc.value() / self.total
    }

    fn class_counts(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|row| row.iter().flatten().map(|c| c.count).sum())
            .collect()
    }

    fn type_counts(&self) -> Vec<f64> {
        let l = self.type_marginal.len();
        let mut out = vec![0.0; l];
        for row in &self.cells {
            for (t, cell) in row.iter().enumerate() {
                if let Some(c) = cell {
                    out[t] += c.count;
                }
            }
        }
        out
    }
}

/// Both genders' match grids plus bookkeeping shared by the
/// counterfactual constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchMoments {
    pub class_count: usize,
    pub type_count: usize,
    pub female: GenderMoments,
    pub male: GenderMoments,
    /// Observations skipped because a firm had no class.
    pub skipped_unclassed: usize,
    /// Notes accumulated while building or reallocating the grid.
    pub warnings: Vec<String>,
}

impl MatchMoments {
    pub fn gender(&self, g: Gender) -> &GenderMoments {
        match g {
            Gender::F => &self.female,
            Gender::M => &self.male,
        }
    }

    /// Pooled-moment mean of a cell over both genders, if either side
    /// observed it.
    pub fn pooled_mean(&self, class: usize, ty: usize) -> Option<f64> {
        let f = self.female.cells[class][ty];
        let m = self.male.cells[class][ty];
        match (f, m) {
            (Some(a), Some(b)) => Some((a.count * a.mean + b.count * b.mean) / (a.count + b.count)),
            (Some(a), None) => Some(a.mean),
            (None, Some(b)) => Some(b.mean),
            (None, None) => None,
        }
    }

    fn pooled_moment(&self, class: usize, ty: usize) -> Option<CellMoment> {
        let f = self.female.cells[class][ty];
        let m = self.male.cells[class][ty];
        match (f, m) {
            (Some(a), Some(b)) => {
                let count = a.count + b.count;
                let mean = (a.count * a.mean + b.count * b.mean) / count;
                // Combine within and between pieces of the variance.
                let var = (a.count * (a.var + (a.mean - mean).powi(2))
                    + b.count * (b.var + (b.mean - mean).powi(2)))
                    / count;
                Some(CellMoment { mean, var, count })
            }
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        }
    }
}

/// Tabulate per-gender match moments from worker-year observations. Each
/// panel row contributes both periods at its assigned type; rows whose
/// firm has no class are skipped and counted.
pub fn match_moments(
    panel: &BiennialPanel,
    classing: &FirmClassing,
    types: &[usize],
    type_count: usize,
) -> Result<MatchMoments> {
    if types.len() != panel.rows.len() {
        return Err(Error::config(format!(
            "type assignment covers {} rows, panel has {}",
            types.len(),
            panel.rows.len()
        )));
    }
    let k = classing.class_count;
    // Accumulate count, sum, and sum of squares per cell and gender.
    let mut sums = vec![vec![vec![[0.0f64; 3]; type_count]; k]; 2];
    let mut skipped = 0usize;
    for (row, &ty) in panel.rows.iter().zip(types) {
        if ty >= type_count {
            return Err(Error::config(format!("type index {ty} out of range")));
        }
        let gi = match row.first.gender {
            Gender::F => 0,
            Gender::M => 1,
        };
        for obs in [&row.first, &row.second] {
            match classing.class_of(obs.firm_id) {
                Some(class) => {
                    let cell = &mut sums[gi][class][ty];
                    cell[0] += 1.0;
                    cell[1] += obs.log_wage;
                    cell[2] += obs.log_wage * obs.log_wage;
                }
                None => skipped += 1,
            }
        }
    }

    let build = |grid: &Vec<Vec<[f64; 3]>>| -> GenderMoments {
        let mut gm = GenderMoments::empty(k, type_count);
        for (class, row) in grid.iter().enumerate() {
            for (ty, &[n, s, ss]) in row.iter().enumerate() {
                if n == 0.0 {
                    continue;
                }
                let mean = s / n;
                let var = (ss / n - mean * mean).max(0.0);
                gm.cells[class][ty] = Some(CellMoment { mean, var, count: n });
                gm.class_marginal[class] += n;
                gm.type_marginal[ty] += n;
                gm.total += n;
                if n < 5.0 {
                    gm.low_support.push((class, ty));
                }
            }
        }
        if gm.total > 0.0 {
            for v in gm.class_marginal.iter_mut().chain(&mut gm.type_marginal) {
                *v /= gm.total;
            }
        }
        gm
    };

    Ok(MatchMoments {
        class_count: k,
        type_count,
        female: build(&sums[0]),
        male: build(&sums[1]),
        skipped_unclassed: skipped,
        warnings: Vec::new(),
    })
}

/// Assortative reallocation: walk classes from the top down, filling each
/// class's slots with the highest remaining types. Preserves both
/// marginals exactly. Counts may be fractional after scaling.
pub(crate) fn diagonal_fill(
    type_counts: &[f64],
    class_counts: &[f64],
    warnings: &mut Vec<String>,
) -> Vec<Vec<f64>> {
    let k = class_counts.len();
    let l = type_counts.len();
    let workers: f64 = type_counts.iter().sum();
    let slots: f64 = class_counts.iter().sum();
    let mut class_rem = class_counts.to_vec();
    if (workers - slots).abs() > 1e-9 * workers.max(slots).max(1.0) {
        let scale = workers / slots;
        for c in &mut class_rem {
            *c *= scale;
        }
        warnings.push(format!(
            "class slots ({slots:.3}) and workers ({workers:.3}) disagree; slots scaled by {scale:.6}"
        ));
    }
    let mut type_rem = type_counts.to_vec();
    let mut alloc = vec![vec![0.0; l]; k];
    let eps = 1e-9;
    let mut ci = k; // walk classes descending: ci-1 is the current class
    let mut ti = l;
    while ci > 0 && ti > 0 {
        if class_rem[ci - 1] <= eps {
            ci -= 1;
            continue;
        }
        if type_rem[ti - 1] <= eps {
            ti -= 1;
            continue;
        }
        let amount = class_rem[ci - 1].min(type_rem[ti - 1]);
        alloc[ci - 1][ti - 1] += amount;
        class_rem[ci - 1] -= amount;
        type_rem[ti - 1] -= amount;
    }
    alloc
}

/// Cell mean for gender `g` with the fallback chain: the gender's own
/// cell, then the pooled cell, else an error. Fallbacks are recorded.
fn cell_mean_with_fallback(
    moments: &MatchMoments,
    g: Gender,
    class: usize,
    ty: usize,
    warnings: &mut Vec<String>,
) -> Result<CellMoment> {
    if let Some(cell) = moments.gender(g).cells[class][ty] {
        return Ok(cell);
    }
    if let Some(cell) = moments.pooled_moment(class, ty) {
        warnings.push(format!(
            "cell (class {}, type {}) unobserved for gender {}; pooled moments used",
            class + 1,
            ty + 1,
            g.label()
        ));
        return Ok(cell);
    }
    Err(Error::data(format!(
        "separable allocation reaches cell (class {}, type {}) that neither gender observed",
        class + 1,
        ty + 1
    )))
}

/// Build the separable market: per-gender diagonal reallocation with cell
/// moments inherited from the baseline grid.
pub fn separable_market(moments: &MatchMoments) -> Result<MatchMoments> {
    let mut warnings = Vec::new();
    let mut out = moments.clone();
    for g in [Gender::F, Gender::M] {
        let side = moments.gender(g);
        if side.total == 0.0 {
            return Err(Error::data(format!(
                "no observations for gender {}",
                g.label()
            )));
        }
        let alloc = diagonal_fill(&side.type_counts(), &side.class_counts(), &mut warnings);
        let mut gm = GenderMoments::empty(moments.class_count, moments.type_count);
        for class in 0..moments.class_count {
            for ty in 0..moments.type_count {
                let n = alloc[class][ty];
                if n <= 0.0 {
                    continue;
                }
                let source = cell_mean_with_fallback(moments, g, class, ty, &mut warnings)?;
                gm.cells[class][ty] = Some(CellMoment {
                    mean: source.mean,
                    var: source.var,
                    count: n,
                });
                gm.class_marginal[class] += n;
                gm.type_marginal[ty] += n;
                gm.total += n;
                if n < 5.0 {
                    gm.low_support.push((class, ty));
                }
            }
        }
        for v in gm.class_marginal.iter_mut().chain(&mut gm.type_marginal) {
            *v /= gm.total;
        }
        match g {
            Gender::F => out.female = gm,
            Gender::M => out.male = gm,
        }
    }
    out.warnings = warnings;
    Ok(out)
}

/// How expected wages are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    /// Exact cell-weighted means; the default.
    Expectation,
    /// Simulate workers: cells drawn by share, wages drawn from the cell
    /// Gaussian. Converges to expectation mode at the usual 1/sqrt(n).
    Draws { draws: usize, seed: u64 },
}

/// The gap split. All components are levels in log points; shares divide
/// by the baseline gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDecomposition {
    pub baseline_gap: f64,
    pub separable_gap: f64,
    /// baseline − separable.
    pub complementarity: f64,
    /// Separable-gap change when the female class distribution is
    /// replaced by the male one.
    pub sorting: f64,
    /// Separable-gap change when both genders' cell moments are replaced
    /// by pooled ones.
    pub bargaining: f64,
    /// baseline − complementarity − sorting − bargaining.
    pub residual: f64,
    /// Shares of baseline: complementarity, sorting, bargaining,
    /// residual. Zero when the baseline gap is degenerate.
    pub shares: [f64; 4],
    /// True when |baseline| was too small for meaningful shares.
    pub shares_degenerate: bool,
    pub warnings: Vec<String>,
}

/// Expected wage of an allocation, either exactly or by simulation.
/// `stream` tags the RNG substream so each evaluation is independent.
fn allocation_wage(cells: &[(f64, f64, f64)], total: f64, mode: Mode, stream: u64) -> f64 {
    match mode {
        Mode::Expectation => {
            let mut acc = Accumulator::new();
            for &(n, mean, _) in cells {
                acc.add(n * mean);
            }
            acc.value() / total
        }
        Mode::Draws { draws, seed } => {
            let mut rng = util::substream2(seed, 0x6366, stream);
            let mut cum = Vec::with_capacity(cells.len());
            let mut running = 0.0;
            for &(n, _, _) in cells {
                running += n / total;
                cum.push(running);
            }
            let mut acc = Accumulator::new();
            for _ in 0..draws {
                let u: f64 = rng.gen::<f64>() * running;
                let idx = cum.partition_point(|&c| c < u).min(cells.len() - 1);
                let (_, mean, var) = cells[idx];
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                acc.add(mean + z * var.sqrt());
            }
            acc.value() / draws as f64
        }
    }
}

fn grid_cells(gm: &GenderMoments) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for row in &gm.cells {
        for cell in row.iter().flatten() {
            out.push((cell.count, cell.mean, cell.var));
        }
    }
    out
}

/// Decompose the gender gap with exact expectations.
pub fn decompose_gap(moments: &MatchMoments) -> Result<GapDecomposition> {
    decompose_gap_with(moments, Mode::Expectation)
}

/// Decompose the gender gap into complementarity, sorting, and
/// bargaining, leaving the rest on an explicit residual line.
pub fn decompose_gap_with(moments: &MatchMoments, mode: Mode) -> Result<GapDecomposition> {
    for g in [Gender::F, Gender::M] {
        if moments.gender(g).total == 0.0 {
            return Err(Error::data(format!(
                "gap decomposition needs both genders; {} is absent",
                g.label()
            )));
        }
    }
    let mut warnings = moments.warnings.clone();

    let baseline_f = allocation_wage(&grid_cells(&moments.female), moments.female.total, mode, 1);
    let baseline_m = allocation_wage(&grid_cells(&moments.male), moments.male.total, mode, 2);
    let baseline_gap = baseline_f - baseline_m;

    let separable = separable_market(moments)?;
    warnings.extend(separable.warnings.iter().cloned());
    let sep_f = allocation_wage(&grid_cells(&separable.female), separable.female.total, mode, 3);
    let sep_m = allocation_wage(&grid_cells(&separable.male), separable.male.total, mode, 4);
    let separable_gap = sep_f - sep_m;
    let complementarity = baseline_gap - separable_gap;

    // Sorting: female workers spread over the male class distribution
    // (scaled to the female headcount), wages still female.
    let male_class_counts = moments.male.class_counts();
    let male_total: f64 = male_class_counts.iter().sum();
    let scaled: Vec<f64> = male_class_counts
        .iter()
        .map(|&c| c * moments.female.total / male_total)
        .collect();
    let alloc = diagonal_fill(&moments.female.type_counts(), &scaled, &mut warnings);
    let mut sort_cells = Vec::new();
    let mut sort_total = 0.0;
    for class in 0..moments.class_count {
        for ty in 0..moments.type_count {
            let n = alloc[class][ty];
            if n <= 0.0 {
                continue;
            }
            let cell = cell_mean_with_fallback(moments, Gender::F, class, ty, &mut warnings)?;
            sort_cells.push((n, cell.mean, cell.var));
            sort_total += n;
        }
    }
    let sorted_f = allocation_wage(&sort_cells, sort_total, mode, 5);
    let sorting = separable_gap - (sorted_f - sep_m);

    // Bargaining: both genders keep their separable allocations but draw
    // wages from pooled cell moments.
    let pooled_wage = |gm: &GenderMoments, stream: u64| -> Result<f64> {
        let mut cells = Vec::new();
        for (class, row) in gm.cells.iter().enumerate() {
            for (ty, cell) in row.iter().enumerate() {
                if let Some(c) = cell {
                    let pooled = moments.pooled_moment(class, ty).ok_or_else(|| {
                        Error::data(format!(
                            "no pooled moments for cell (class {}, type {})",
                            class + 1,
                            ty + 1
                        ))
                    })?;
                    cells.push((c.count, pooled.mean, pooled.var));
                }
            }
        }
        Ok(allocation_wage(&cells, gm.total, mode, stream))
    };
    let pooled_f = pooled_wage(&separable.female, 6)?;
    let pooled_m = pooled_wage(&separable.male, 7)?;
    let bargaining = separable_gap - (pooled_f - pooled_m);

    let residual = baseline_gap - complementarity - sorting - bargaining;
    let shares_degenerate = baseline_gap.abs() < 1e-12;
    let shares = if shares_degenerate {
        warnings.push("baseline gap is ~0; shares reported as 0".into());
        [0.0; 4]
    } else {
        [
            complementarity / baseline_gap,
            sorting / baseline_gap,
            bargaining / baseline_gap,
            residual / baseline_gap,
        ]
    };

    Ok(GapDecomposition {
        baseline_gap,
        separable_gap,
        complementarity,
        sorting,
        bargaining,
        residual,
        shares,
        shares_degenerate,
        warnings,
    })
}

/// Panel partitions for subgroup decompositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubgroupKey {
    Education,
    /// Period-1 age bands: 30 and under, 31 to 50, 51 and over.
    AgeBand,
    /// Period-1 firm size bands: under 10, 10 to 50, over 50 workers.
    FirmSize,
    /// Period-1 occupation code.
    Occupation,
}

impl SubgroupKey {
    pub fn label(self) -> &'static str {
        match self {
            SubgroupKey::Education => "education",
            SubgroupKey::AgeBand => "age",
            SubgroupKey::FirmSize => "size",
            SubgroupKey::Occupation => "occupation",
        }
    }
}

/// A subgroup's decomposition, keyed by a human-readable label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub label: String,
    pub decomposition: GapDecomposition,
}

/// Partition the panel by a period-1 attribute and decompose each piece.
/// Subgroups missing a gender are skipped and listed.
pub fn subgroup_decompose(
    panel: &BiennialPanel,
    classing: &FirmClassing,
    types: &[usize],
    type_count: usize,
    key: SubgroupKey,
    mode: Mode,
) -> Result<(Vec<SubgroupReport>, Vec<String>)> {
    if types.len() != panel.rows.len() {
        return Err(Error::config("type assignment does not cover the panel"));
    }
    let sizes = panel.firm_sizes_period1();
    let label_of = |row: &crate::panel::WorkerPair| -> String {
        match key {
            SubgroupKey::Education => row.first.education.label().to_string(),
            SubgroupKey::AgeBand => {
                let age = row.first.age;
                if age <= 30 {
                    "age<=30".into()
                } else if age <= 50 {
                    "age31-50".into()
                } else {
                    "age>=51".into()
                }
            }
            SubgroupKey::FirmSize => {
                let size = sizes.get(&row.first.firm_id).copied().unwrap_or(0);
                if size < 10 {
                    "size<10".into()
                } else if size <= 50 {
                    "size10-50".into()
                } else {
                    "size>50".into()
                }
            }
            SubgroupKey::Occupation => format!("occ_{}", row.first.occupation),
        }
    };

    let mut groups: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, row) in panel.rows.iter().enumerate() {
        groups.entry(label_of(row)).or_default().push(i);
    }

    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for (label, rows) in groups {
        let sub_panel = BiennialPanel {
            years: panel.years,
            rows: rows.iter().map(|&i| panel.rows[i].clone()).collect(),
            empty_warning: false,
            filter: Default::default(),
        };
        let sub_types: Vec<usize> = rows.iter().map(|&i| types[i]).collect();
        let moments = match_moments(&sub_panel, classing, &sub_types, type_count)?;
        if moments.female.total == 0.0 || moments.male.total == 0.0 {
            skipped.push(format!("{label}: only one gender present"));
            continue;
        }
        let decomposition = decompose_gap_with(&moments, mode)?;
        reports.push(SubgroupReport {
            label,
            decomposition,
        });
    }
    Ok((reports, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::testkit::{obs, pair_panel};
    use crate::panel::WorkerPair;
    use crate::synth::{self, MarketBuilder};
    use std::collections::BTreeMap;

    fn truth_classing(truth: &synth::GroundTruth) -> FirmClassing {
        FirmClassing {
            class_count: truth.spec.class_count,
            assignment: truth.firm_classes.clone(),
            centroids: Vec::new(),
            objective: 0.0,
            class_mean_wage: Vec::new(),
            objective_trace: Vec::new(),
            chosen_restart: 0,
            cuts: Vec::new(),
        }
    }

    /// Hand-built one-cell-per-entry grid. Cells listed as
    /// (class, type, mean, var, count).
    fn grid(class_count: usize, type_count: usize, cells: &[(usize, usize, f64, f64, f64)]) -> GenderMoments {
        let mut gm = GenderMoments::empty(class_count, type_count);
        for &(k, l, mean, var, count) in cells {
            gm.cells[k][l] = Some(CellMoment { mean, var, count });
            gm.class_marginal[k] += count;
            gm.type_marginal[l] += count;
            gm.total += count;
            if count < 5.0 {
                gm.low_support.push((k, l));
            }
        }
        for v in gm.class_marginal.iter_mut().chain(&mut gm.type_marginal) {
            *v /= gm.total;
        }
        gm
    }

    fn moments_of(f: GenderMoments, m: GenderMoments, k: usize, l: usize) -> MatchMoments {
        MatchMoments {
            class_count: k,
            type_count: l,
            female: f,
            male: m,
            skipped_unclassed: 0,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn single_worker_cell_has_zero_variance_and_low_support_flag() {
        let rows = vec![
            (1u64, 1u64, 1u64, 1.5, 1.5, Gender::F),
            (2, 1, 1, 2.5, 2.5, Gender::M),
        ];
        let panel = pair_panel(&rows);
        let mut assignment = BTreeMap::new();
        assignment.insert(1u64, 0usize);
        let classing = FirmClassing {
            class_count: 1,
            assignment,
            centroids: Vec::new(),
            objective: 0.0,
            class_mean_wage: Vec::new(),
            objective_trace: Vec::new(),
            chosen_restart: 0,
            cuts: Vec::new(),
        };
        let m = match_moments(&panel, &classing, &[0, 0], 1).unwrap();
        let cell = m.female.cells[0][0].unwrap();
        assert_eq!(cell.count, 2.0); // both periods of the one female worker
        assert_eq!(cell.var, 0.0);
        assert!(m.female.low_support.contains(&(0, 0)));
    }

    /// Oracle: Monte Carlo cell means against spec mu + gender offset.
    #[test]
    fn cell_means_track_spec_within_three_se() {
        let spec = MarketBuilder::new(2, 2)
            .seed(3)
            .firms_per_class(15)
            .firm_size_law(4.2, 0.3)
            .mover_share(0.3)
            .sigma(0.08)
            .additive_wages(1.0, 0.5, 0.3, 0.0)
            .gender_offsets(-0.07, 0.0)
            .build();
        let (panel, truth) = synth::generate_market(&spec).unwrap();
        let classing = truth_classing(&truth);
        let m = match_moments(&panel, &classing, &truth.worker_types, 2).unwrap();
        for (g, offset) in [(Gender::F, -0.07), (Gender::M, 0.0)] {
            for k in 0..2 {
                for l in 0..2 {
                    if let Some(cell) = m.gender(g).cells[k][l] {
                        if cell.count < 30.0 {
                            continue;
                        }
                        let want = truth.spec.mu[k][l][0] + offset;
                        let se = (cell.var / cell.count).sqrt();
                        // Both periods share the same mean here.
                        assert!(
                            (cell.mean - want).abs() < 3.0 * se + 1e-9,
                            "cell ({k},{l}) gender {}: {} vs {want}",
                            g.label(),
                            cell.mean
                        );
                    }
                }
            }
        }
        // Marginals are simplexes.
        for gm in [&m.female, &m.male] {
            assert!((gm.class_marginal.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((gm.type_marginal.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn baseline_gap_from_moments_matches_panel() {
        let spec = MarketBuilder::new(2, 2)
            .seed(9)
            .firms_per_class(10)
            .firm_size_law(3.6, 0.3)
            .mover_share(0.4)
            .sigma(0.1)
            .additive_wages(1.0, 0.5, 0.3, 0.0)
            .gender_offsets(-0.1, 0.0)
            .build();
        let (panel, truth) = synth::generate_market(&spec).unwrap();
        let classing = truth_classing(&truth);
        let m = match_moments(&panel, &classing, &truth.worker_types, 2).unwrap();
        let mut f = Vec::new();
        let mut mm = Vec::new();
        for row in &panel.rows {
            let target = if row.first.gender == Gender::F { &mut f } else { &mut mm };
            target.push(row.first.log_wage);
            target.push(row.second.log_wage);
        }
        let direct = util::mean(&f) - util::mean(&mm);
        let via = m.female.expected_wage() - m.male.expected_wage();
        assert!((direct - via).abs() < 1e-12);
    }

    #[test]
    fn diagonal_fill_preserves_both_marginals() {
        use rand::Rng;
        let mut rng = util::substream(31, 2);
        for _ in 0..50 {
            let k = rng.gen_range(1..6);
            let l = rng.gen_range(1..6);
            let types: Vec<f64> = (0..l).map(|_| rng.gen_range(0..40) as f64).collect();
            let total: f64 = types.iter().sum();
            if total == 0.0 {
                continue;
            }
            // Random class split of the same total.
            let mut classes = vec![0.0; k];
            let mut rem = total;
            for c in 0..k - 1 {
                let take = (rng.gen::<f64>() * rem).floor();
                classes[c] = take;
                rem -= take;
            }
            classes[k - 1] = rem;
            let mut warnings = Vec::new();
            let alloc = diagonal_fill(&types, &classes, &mut warnings);
            assert!(warnings.is_empty());
            for (c, row) in alloc.iter().enumerate() {
                let got: f64 = row.iter().sum();
                assert!((got - classes[c]).abs() < 1e-9, "class {c}");
            }
            for t in 0..l {
                let got: f64 = alloc.iter().map(|row| row[t]).sum();
                assert!((got - types[t]).abs() < 1e-9, "type {t}");
            }
        }
    }

    #[test]
    fn diagonal_fill_is_assortative() {
        // Two classes with equal slots, two types with equal counts:
        // the top type must land entirely in the top class.
        let mut warnings = Vec::new();
        let alloc = diagonal_fill(&[10.0, 10.0], &[10.0, 10.0], &mut warnings);
        assert_eq!(alloc[1][1], 10.0);
        assert_eq!(alloc[0][0], 10.0);
        assert_eq!(alloc[0][1], 0.0);
        assert_eq!(alloc[1][0], 0.0);
    }

    #[test]
    fn mismatched_totals_are_scaled_with_warning() {
        let mut warnings = Vec::new();
        let alloc = diagonal_fill(&[6.0, 6.0], &[4.0, 4.0], &mut warnings);
        assert_eq!(warnings.len(), 1);
        let total: f64 = alloc.iter().flatten().sum();
        assert!((total - 12.0).abs() < 1e-9);
    }

    #[test]
    fn additive_means_give_zero_complementarity() {
        // mu_kl = a_l + b_k on a full grid; allocation change cannot move
        // the expected wage beyond the marginals.
        let a = [0.0, 0.4];
        let b = [0.0, 0.7];
        let mut cells_f = Vec::new();
        let mut cells_m = Vec::new();
        for k in 0..2 {
            for l in 0..2 {
                let mu = 1.0 + a[l] + b[k];
                cells_f.push((k, l, mu - 0.1, 0.01, (3 + k * 2 + l) as f64 * 7.0));
                cells_m.push((k, l, mu, 0.01, (2 + k + l * 2) as f64 * 9.0));
            }
        }
        let m = moments_of(grid(2, 2, &cells_f), grid(2, 2, &cells_m), 2, 2);
        let d = decompose_gap(&m).unwrap();
        assert!(
            d.complementarity.abs() < 1e-9,
            "complementarity {}",
            d.complementarity
        );
        assert!((d.baseline_gap - d.separable_gap - d.complementarity).abs() < 1e-12);
    }

    #[test]
    fn identical_gender_sides_zero_every_component() {
        let cells = [
            (0usize, 0usize, 1.0, 0.01, 20.0),
            (0, 1, 1.6, 0.01, 10.0),
            (1, 0, 1.4, 0.01, 10.0),
            (1, 1, 2.3, 0.01, 20.0),
        ];
        let m = moments_of(grid(2, 2, &cells), grid(2, 2, &cells), 2, 2);
        let d = decompose_gap(&m).unwrap();
        assert!(d.baseline_gap.abs() < 1e-12);
        assert!(d.complementarity.abs() < 1e-12);
        assert!(d.sorting.abs() < 1e-12);
        assert!(d.bargaining.abs() < 1e-12);
        assert!(d.residual.abs() < 1e-12);
        assert!(d.shares_degenerate);
    }

    /// Oracle: every quantity of a 2x2 market computed by hand.
    #[test]
    fn two_by_two_matches_enumeration() {
        // Female: 6 workers of type 1, 4 of type 2; class slots 5 and 5.
        // Male: 4 and 6; class slots 5 and 5. Non-additive means.
        let f = grid(
            2,
            2,
            &[
                (0, 0, 1.00, 0.0, 4.0),
                (1, 0, 1.30, 0.0, 2.0),
                (0, 1, 1.50, 0.0, 1.0),
                (1, 1, 2.40, 0.0, 3.0),
            ],
        );
        let m = grid(
            2,
            2,
            &[
                (0, 0, 1.10, 0.0, 3.0),
                (1, 0, 1.45, 0.0, 1.0),
                (0, 1, 1.65, 0.0, 2.0),
                (1, 1, 2.60, 0.0, 4.0),
            ],
        );
        let moments = moments_of(f, m, 2, 2);
        let d = decompose_gap(&moments).unwrap();

        // Baseline by hand.
        let base_f = (4.0 * 1.00 + 2.0 * 1.30 + 1.0 * 1.50 + 3.0 * 2.40) / 10.0;
        let base_m = (3.0 * 1.10 + 1.0 * 1.45 + 2.0 * 1.65 + 4.0 * 2.60) / 10.0;
        assert!((d.baseline_gap - (base_f - base_m)).abs() < 1e-12);

        // Separable female: slots (5,5) from class counts, types (6,4).
        // Descending fill: class 2 takes all 4 type-2 workers and 1
        // type-1; class 1 takes the remaining 5 type-1 workers.
        let sep_f = (5.0 * 1.00 + 1.0 * 1.30 + 4.0 * 2.40) / 10.0;
        // Male: types (4,6), slots (5,5): class 2 takes 5 type-2; class 1
        // takes 1 type-2 and 4 type-1.
        let sep_m = (4.0 * 1.10 + 1.0 * 1.65 + 5.0 * 2.60) / 10.0;
        assert!((d.separable_gap - (sep_f - sep_m)).abs() < 1e-12);
        assert!((d.complementarity - (d.baseline_gap - d.separable_gap)).abs() < 1e-12);

        // Sorting: female classes scaled to male shares (5,5) -> same
        // slot counts here, so the counterfactual equals the separable
        // allocation and sorting is 0.
        assert!(d.sorting.abs() < 1e-12);

        // Bargaining by hand: pooled cell means on separable allocations.
        let pooled = |k: usize, l: usize| moments.pooled_mean(k, l).unwrap();
        let pf = (5.0 * pooled(0, 0) + 1.0 * pooled(1, 0) + 4.0 * pooled(1, 1)) / 10.0;
        let pm = (4.0 * pooled(0, 0) + 1.0 * pooled(0, 1) + 5.0 * pooled(1, 1)) / 10.0;
        let bargaining = (sep_f - sep_m) - (pf - pm);
        assert!((d.bargaining - bargaining).abs() < 1e-12, "{}", d.bargaining);

        let residual = d.baseline_gap - d.complementarity - d.sorting - d.bargaining;
        assert!((d.residual - residual).abs() < 1e-12);
    }

    #[test]
    fn missing_gender_cell_falls_back_to_pooled_with_warning() {
        // Female grid lacks (1,1); male observes it. The female separable
        // allocation reaches it, so the pooled (= male) moment is used.
        let f = grid(2, 2, &[(0, 0, 1.0, 0.0, 5.0), (1, 0, 1.3, 0.0, 3.0), (0, 1, 1.5, 0.0, 2.0)]);
        let m = grid(
            2,
            2,
            &[
                (0, 0, 1.1, 0.0, 4.0),
                (1, 1, 2.5, 0.0, 4.0),
                (0, 1, 1.6, 0.0, 2.0),
            ],
        );
        let moments = moments_of(f, m, 2, 2);
        let sep = separable_market(&moments).unwrap();
        assert!(sep
            .warnings
            .iter()
            .any(|w| w.contains("pooled moments used")), "{:?}", sep.warnings);
        let cell = sep.female.cells[1][1].unwrap();
        assert_eq!(cell.mean, 2.5);
    }

    #[test]
    fn unreachable_cell_for_both_genders_is_an_error() {
        // Both genders observe only off-diagonal cells; the diagonal fill
        // needs (1,1) which nobody has.
        let f = grid(2, 2, &[(0, 1, 1.5, 0.0, 5.0), (1, 0, 1.2, 0.0, 5.0)]);
        let m = grid(2, 2, &[(0, 1, 1.6, 0.0, 5.0), (1, 0, 1.3, 0.0, 5.0)]);
        let moments = moments_of(f, m, 2, 2);
        assert!(matches!(separable_market(&moments), Err(Error::Data(_))));
    }

    #[test]
    fn draws_mode_converges_to_expectation() {
        let f = grid(
            2,
            2,
            &[
                (0, 0, 1.00, 0.04, 40.0),
                (1, 0, 1.30, 0.04, 20.0),
                (0, 1, 1.50, 0.04, 10.0),
                (1, 1, 2.40, 0.04, 30.0),
            ],
        );
        let m = grid(
            2,
            2,
            &[
                (0, 0, 1.10, 0.04, 30.0),
                (1, 0, 1.45, 0.04, 10.0),
                (0, 1, 1.65, 0.04, 20.0),
                (1, 1, 2.60, 0.04, 40.0),
            ],
        );
        let moments = moments_of(f, m, 2, 2);
        let exact = decompose_gap(&moments).unwrap();
        let draws = 200_000usize;
        let sim = decompose_gap_with(&moments, Mode::Draws { draws, seed: 77 }).unwrap();
        let tol = 3.0 / (draws as f64).sqrt();
        assert!((sim.baseline_gap - exact.baseline_gap).abs() < tol);
        assert!((sim.separable_gap - exact.separable_gap).abs() < tol);
        assert!((sim.sorting - exact.sorting).abs() < 2.0 * tol);
        assert!((sim.bargaining - exact.bargaining).abs() < 2.0 * tol);
        // Same seed, same answer.
        let again = decompose_gap_with(&moments, Mode::Draws { draws, seed: 77 }).unwrap();
        assert_eq!(sim.baseline_gap, again.baseline_gap);
        assert_eq!(sim.sorting, again.sorting);
    }

    #[test]
    fn subgroups_split_additive_from_interacted() {
        // Education Dropout: additive wages. College: interaction bump on
        // the top cell. Complementarity should be ~0 only for Dropout.
        use crate::panel::Education;
        let mut rows = Vec::new();
        let mut id = 1u64;
        // Women sit further off the diagonal than men, so reallocating
        // moves more female than male mass into the bumped cell.
        let counts_f = [(0, 0, 4), (1, 1, 2), (0, 1, 4), (1, 0, 4)];
        let counts_m = [(0, 0, 5), (1, 1, 5), (0, 1, 1), (1, 0, 3)];
        for edu in [Education::Dropout, Education::College] {
            let bump = if edu == Education::College { 0.5 } else { 0.0 };
            for (g, counts) in [(Gender::F, &counts_f), (Gender::M, &counts_m)] {
                for &(k, l, n) in counts.iter() {
                    for _ in 0..n {
                        let mu = 1.0 + 0.4 * l as f64 + 0.7 * k as f64
                            + if k == 1 && l == 1 { bump } else { 0.0 }
                            + if g == Gender::F { -0.05 } else { 0.0 };
                        let mut first = obs(id, (k + 1) as u64, 2014, mu, g);
                        first.education = edu;
                        // Types encoded by worker order; both periods stay put.
                        let mut second = first.clone();
                        second.year = 2016;
                        second.age += 2;
                        rows.push((WorkerPair { first, second }, l));
                        id += 1;
                    }
                }
            }
        }
        let types: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        let panel = BiennialPanel {
            years: (2014, 2016),
            rows: rows.into_iter().map(|(r, _)| r).collect(),
            empty_warning: false,
            filter: Default::default(),
        };
        let mut assignment = BTreeMap::new();
        assignment.insert(1u64, 0usize);
        assignment.insert(2, 1);
        let classing = FirmClassing {
            class_count: 2,
            assignment,
            centroids: Vec::new(),
            objective: 0.0,
            class_mean_wage: Vec::new(),
            objective_trace: Vec::new(),
            chosen_restart: 0,
            cuts: Vec::new(),
        };
        let (reports, skipped) = subgroup_decompose(
            &panel,
            &classing,
            &types,
            2,
            SubgroupKey::Education,
            Mode::Expectation,
        )
        .unwrap();
        assert!(skipped.is_empty());
        let by_label: BTreeMap<&str, &GapDecomposition> = reports
            .iter()
            .map(|r| (r.label.as_str(), &r.decomposition))
            .collect();
        let additive = by_label["Dropout"];
        let interacted = by_label["College"];
        assert!(additive.complementarity.abs() < 1e-9);
        assert!(
            interacted.complementarity.abs() > 0.01,
            "complementarity {}",
            interacted.complementarity
        );
    }

    #[test]
    fn one_gender_subgroup_is_skipped_with_warning() {
        let rows = vec![
            (1u64, 1u64, 1u64, 1.0, 1.0, Gender::F),
            (2, 1, 1, 1.2, 1.2, Gender::M),
        ];
        let mut panel = pair_panel(&rows);
        // Make worker 1 young and worker 2 old so the bands split them.
        panel.rows[0].first.age = 25;
        panel.rows[0].second.age = 27;
        panel.rows[1].first.age = 55;
        panel.rows[1].second.age = 57;
        let mut assignment = BTreeMap::new();
        assignment.insert(1u64, 0usize);
        let classing = FirmClassing {
            class_count: 1,
            assignment,
            centroids: Vec::new(),
            objective: 0.0,
            class_mean_wage: Vec::new(),
            objective_trace: Vec::new(),
            chosen_restart: 0,
            cuts: Vec::new(),
        };
        let (reports, skipped) = subgroup_decompose(
            &panel,
            &classing,
            &[0, 0],
            1,
            SubgroupKey::AgeBand,
            Mode::Expectation,
        )
        .unwrap();
        assert!(reports.is_empty());
        assert_eq!(skipped.len(), 2);
    }
}
