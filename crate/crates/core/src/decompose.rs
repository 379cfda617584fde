//! Wage-gap decompositions on the biennial panel.
//!
//! Four instruments: a Mincer-style gap decomposition into explained and
//! unexplained parts, a worker/class fixed-effects fit whose class premia
//! split the firm share of the gap into sorting and bargaining, a variance
//! decomposition over the fitted effect series, and the Theil index of a
//! match-count grid, plus the weighted two-way fit on match cell means
//! that backs the additive benchmark.
//!
//! Sign convention everywhere: gaps are female minus male.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cluster::FirmClassing;
use crate::error::{Error, Result};
use crate::panel::{BiennialPanel, Education, Gender, Observation, Sector};
use crate::util::{self, Accumulator};

// ---------------------------------------------------------------------------
// Least squares with deterministic collinearity handling.
// ---------------------------------------------------------------------------

/// Tolerance for declaring a column inside the span of earlier ones.
const COLLINEAR_TOL: f64 = 1e-8;
/// Normal equations must hold to this relative residual.
const NORMAL_EQ_TOL: f64 = 1e-8;

/// Least-squares fit over explicit columns (no intercept; center first if
/// one is wanted). Collinear columns are dropped deterministically, the
/// leftmost of any dependent group surviving.
#[derive(Debug, Clone)]
pub struct LsFit {
    /// Coefficient per input column; dropped columns hold 0.
    pub beta: Vec<f64>,
    pub dropped: Vec<usize>,
    pub residuals: Vec<f64>,
}

/// Modified Gram-Schmidt least squares. Columns whose residual norm after
/// projection falls below `COLLINEAR_TOL` times their original norm are
/// dropped (zero columns always drop). Verifies the normal equations on
/// the kept set before returning.
pub fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Result<LsFit> {
    let n = y.len();
    let p = columns.len();
    for (j, c) in columns.iter().enumerate() {
        if c.len() != n {
            return Err(Error::data(format!(
                "design column {j} has {} rows, expected {n}",
                c.len()
            )));
        }
    }

    // MGS QR with column dropping: q holds orthonormal kept columns,
    // r[jk] the projection coefficients of original column k on q_j.
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    let mut r: Vec<Vec<f64>> = Vec::new(); // r[i] = row for q_i over kept columns

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        let mut acc = Accumulator::new();
        for (x, y) in a.iter().zip(b) {
            acc.add(x * y);
        }
        acc.value()
    };

    for j in 0..p {
        let orig_norm = norm(&columns[j]);
        if orig_norm == 0.0 {
            dropped.push(j);
            continue;
        }
        let mut v = columns[j].clone();
        let mut coefs = Vec::with_capacity(q.len());
        for qi in &q {
            let c = dot(qi, &v);
            for (vk, qk) in v.iter_mut().zip(qi) {
                *vk -= c * qk;
            }
            coefs.push(c);
        }
        let vn = norm(&v);
        if vn <= COLLINEAR_TOL * orig_norm {
            dropped.push(j);
            continue;
        }
        for x in &mut v {
            *x /= vn;
        }
        for (row, &c) in r.iter_mut().zip(&coefs) {
            row.push(c);
        }
        let mut new_row = vec![0.0; kept.len()];
        new_row.push(vn);
        r.push(new_row);
        q.push(v);
        kept.push(j);
    }

    // beta_kept solves R beta = Q'y by back substitution.
    let m = kept.len();
    let qty: Vec<f64> = q.iter().map(|qi| dot(qi, y)).collect();
    let mut beta_kept = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = qty[i];
        for k in (i + 1)..m {
            s -= r[i][k] * beta_kept[k];
        }
        beta_kept[i] = s / r[i][i];
    }

    let mut beta = vec![0.0; p];
    for (bi, &j) in kept.iter().enumerate() {
        beta[j] = beta_kept[bi];
    }
    let mut residuals = y.to_vec();
    for (bi, &j) in kept.iter().enumerate() {
        let b = beta_kept[bi];
        if b == 0.0 {
            continue;
        }
        for (res, x) in residuals.iter_mut().zip(&columns[j]) {
            *res -= b * x;
        }
    }

    // Normal-equation check on the kept columns.
    let mut grad_norm = 0.0f64;
    let mut rhs_norm = 0.0f64;
    for &j in &kept {
        grad_norm += dot(&columns[j], &residuals).powi(2);
        rhs_norm += dot(&columns[j], y).powi(2);
    }
    if grad_norm.sqrt() > NORMAL_EQ_TOL * rhs_norm.sqrt().max(1.0) {
        return Err(Error::numerical(format!(
            "normal equations violated: gradient norm {:.3e}",
            grad_norm.sqrt()
        )));
    }

    Ok(LsFit {
        beta,
        dropped,
        residuals,
    })
}

// ---------------------------------------------------------------------------
// Mincer design and gap decomposition.
// ---------------------------------------------------------------------------

/// Column layout shared by both genders: age, age squared, then one-hot
/// dummies with the first level dropped. Occupation levels are whatever
/// codes the panel contains, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MincerDesign {
    pub names: Vec<String>,
    pub occupation_levels: Vec<u32>,
}

impl MincerDesign {
    /// Pool the dummy levels across the whole panel so both genders share
    /// one column layout.
    pub fn from_panel(panel: &BiennialPanel) -> Self {
        let mut occ: Vec<u32> = panel
            .rows
            .iter()
            .flat_map(|r| [r.first.occupation, r.second.occupation])
            .collect();
        occ.sort_unstable();
        occ.dedup();
        let mut names = vec!["age".to_string(), "age_sq".to_string()];
        for edu in &Education::ALL[1..] {
            names.push(format!("edu_{}", edu.label()));
        }
        for code in occ.iter().skip(1) {
            names.push(format!("occ_{code}"));
        }
        for sec in &Sector::ALL[1..] {
            names.push(format!("sector_{}", sec.label()));
        }
        MincerDesign {
            names,
            occupation_levels: occ,
        }
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    /// Covariate vector for one observation, matching `names`.
    pub fn row(&self, obs: &Observation) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        out.push(obs.age as f64);
        out.push((obs.age as f64) * (obs.age as f64));
        for edu in &Education::ALL[1..] {
            out.push(if obs.education == *edu { 1.0 } else { 0.0 });
        }
        for code in self.occupation_levels.iter().skip(1) {
            out.push(if obs.occupation == *code { 1.0 } else { 0.0 });
        }
        for sec in &Sector::ALL[1..] {
            out.push(if obs.sector == *sec { 1.0 } else { 0.0 });
        }
        out
    }
}

/// One gender's regression pieces: centered fit plus raw means.
#[derive(Debug, Clone)]
struct GenderOls {
    intercept: f64,
    beta: Vec<f64>,
    col_means: Vec<f64>,
    y_mean: f64,
    dropped: Vec<usize>,
}

fn gender_columns(design: &MincerDesign, obs: &[&Observation]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let p = design.width();
    let mut cols = vec![Vec::with_capacity(obs.len()); p];
    let mut y = Vec::with_capacity(obs.len());
    for o in obs {
        let row = design.row(o);
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
        y.push(o.log_wage);
    }
    (cols, y)
}

/// Centered per-gender OLS with an optional forced-drop set, so both
/// genders can be refit on a common kept layout.
fn fit_gender(
    cols: &[Vec<f64>],
    y: &[f64],
    force_drop: &[usize],
) -> Result<GenderOls> {
    let n = y.len() as f64;
    let col_means: Vec<f64> = cols.iter().map(|c| util::mean(c)).collect();
    let y_mean = util::mean(y);
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| {
            if force_drop.contains(&j) {
                vec![0.0; y.len()]
            } else {
                c.iter().map(|&v| v - col_means[j]).collect()
            }
        })
        .collect();
    let y_centered: Vec<f64> = y.iter().map(|&v| v - y_mean).collect();
    let fit = least_squares(&centered, &y_centered)?;
    let intercept = y_mean
        - fit
            .beta
            .iter()
            .zip(&col_means)
            .map(|(b, m)| b * m)
            .sum::<f64>();
    debug_assert!(n >= 1.0);
    Ok(GenderOls {
        intercept,
        beta: fit.beta,
        col_means,
        y_mean,
        dropped: fit.dropped,
    })
}

/// Mincer-style gap decomposition at the female coefficient vector.
///
/// gap = mean female log wage − mean male log wage;
/// explained = (X̄_F − X̄_M)·β̂_F;
/// unexplained = X̄_M·(β̂_F − β̂_M) plus the intercept difference.
/// The three satisfy gap = explained + unexplained by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MincerKobReport {
    pub gap: f64,
    pub explained: f64,
    pub unexplained: f64,
    /// Names of columns dropped as collinear in either gender's fit.
    pub dropped_columns: Vec<String>,
    pub names: Vec<String>,
    pub beta_female: Vec<f64>,
    pub beta_male: Vec<f64>,
    pub intercept_female: f64,
    pub intercept_male: f64,
    pub observations_female: usize,
    pub observations_male: usize,
}

/// Decompose the gender wage gap over the extended Mincer covariates
/// (age, age squared, education, occupation, sector) on worker-year
/// observations pooled over both panel periods.
pub fn mincer_kob(panel: &BiennialPanel) -> Result<MincerKobReport> {
    let design = MincerDesign::from_panel(panel);
    let mut female: Vec<&Observation> = Vec::new();
    let mut male: Vec<&Observation> = Vec::new();
    for row in &panel.rows {
        for obs in [&row.first, &row.second] {
            match obs.gender {
                Gender::F => female.push(obs),
                Gender::M => male.push(obs),
            }
        }
    }
    if female.is_empty() || male.is_empty() {
        return Err(Error::data(
            "gap decomposition needs observations from both genders",
        ));
    }

    let (cols_f, y_f) = gender_columns(&design, &female);
    let (cols_m, y_m) = gender_columns(&design, &male);

    let first_f = fit_gender(&cols_f, &y_f, &[])?;
    let first_m = fit_gender(&cols_m, &y_m, &[])?;
    let mut union: Vec<usize> = first_f
        .dropped
        .iter()
        .chain(&first_m.dropped)
        .copied()
        .collect();
    union.sort_unstable();
    union.dedup();

    // Refit on the shared kept set so the means arithmetic lines up.
    let (fit_f, fit_m) = if union.is_empty() {
        (first_f, first_m)
    } else {
        (
            fit_gender(&cols_f, &y_f, &union)?,
            fit_gender(&cols_m, &y_m, &union)?,
        )
    };

    let gap = fit_f.y_mean - fit_m.y_mean;
    let mut explained = 0.0;
    let mut unexplained = fit_f.intercept - fit_m.intercept;
    for j in 0..design.width() {
        explained += (fit_f.col_means[j] - fit_m.col_means[j]) * fit_f.beta[j];
        unexplained += fit_m.col_means[j] * (fit_f.beta[j] - fit_m.beta[j]);
    }

    Ok(MincerKobReport {
        gap,
        explained,
        unexplained,
        dropped_columns: union.iter().map(|&j| design.names[j].clone()).collect(),
        names: design.names,
        beta_female: fit_f.beta,
        beta_male: fit_m.beta,
        intercept_female: fit_f.intercept,
        intercept_male: fit_m.intercept,
        observations_female: female.len(),
        observations_male: male.len(),
    })
}

// ---------------------------------------------------------------------------
// Worker/class fixed effects and the firm share of the gap.
// ---------------------------------------------------------------------------

/// Covariates entering the fixed-effects fit alongside worker and class
/// effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CakmCovariates {
    None,
    /// Age and age squared.
    AgeQuad,
}

/// Aligned per-observation effect vectors; `y = worker + firm + xb + resid`
/// row by row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectSeries {
    pub y: Vec<f64>,
    pub worker: Vec<f64>,
    pub firm: Vec<f64>,
    pub xb: Vec<f64>,
    pub resid: Vec<f64>,
}

impl EffectSeries {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// One gender's worker-plus-class-effects fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectsFit {
    pub gender: Gender,
    /// Class premia; index 0 is the reference and exactly 0.
    pub psi: Vec<f64>,
    /// Worker effect per worker id.
    pub alpha: BTreeMap<u64, f64>,
    pub covariate_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Worker-year share of each class for this gender.
    pub class_shares: Vec<f64>,
    pub mean_wage: f64,
    pub series: EffectSeries,
    /// Classes whose dummy column was dropped (no variation after worker
    /// demeaning beyond collinearity); their psi reads 0.
    pub dropped_classes: Vec<usize>,
    pub observations: usize,
}

fn class_connectivity(
    moves: &[(usize, usize)],
    observed: &[bool],
) -> Vec<Vec<usize>> {
    let k = observed.len();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in moves {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in 0..k {
        if observed[c] {
            let root = find(&mut parent, c);
            groups.entry(root).or_default().push(c);
        }
    }
    groups.into_values().collect()
}

/// Fit log wages on worker effects, class effects, and optional covariates
/// for one gender.
///
/// Solved exactly in one pass: demeaning within worker sweeps out the
/// worker effects, a least-squares fit on the demeaned class dummies and
/// covariates gives psi and beta, and worker means of the remainder
/// recover the effects. This is the fixed point the alternating
/// worker/class sweep converges to, reached directly.
pub fn cakm_fit(
    panel: &BiennialPanel,
    classing: &FirmClassing,
    gender: Gender,
    covariates: CakmCovariates,
) -> Result<FixedEffectsFit> {
    let k = classing.class_count;

    struct Obs {
        worker: u64,
        y: f64,
        class: usize,
        age: f64,
    }
    let mut data: Vec<Obs> = Vec::new();
    let mut moves: Vec<(usize, usize)> = Vec::new();
    for row in &panel.rows {
        if row.first.gender != gender {
            continue;
        }
        let k1 = classing.class_of(row.first.firm_id).ok_or_else(|| {
            Error::data(format!("firm {} has no class", row.first.firm_id))
        })?;
        let k2 = classing.class_of(row.second.firm_id).ok_or_else(|| {
            Error::data(format!("firm {} has no class", row.second.firm_id))
        })?;
        data.push(Obs {
            worker: row.first.worker_id,
            y: row.first.log_wage,
            class: k1,
            age: row.first.age as f64,
        });
        data.push(Obs {
            worker: row.second.worker_id,
            y: row.second.log_wage,
            class: k2,
            age: row.second.age as f64,
        });
        if k1 != k2 {
            moves.push((k1, k2));
        }
    }
    if data.is_empty() {
        return Err(Error::data(format!(
            "no observations for gender {}",
            gender.label()
        )));
    }

    let mut observed = vec![false; k];
    for o in &data {
        observed[o.class] = true;
    }
    let components = class_connectivity(&moves, &observed);
    if components.len() > 1 {
        return Err(Error::data(format!(
            "class mobility graph for gender {} splits into {} components {:?}; \
             restrict the panel to one connected set (see the graph module's \
             connected_sets and largest_dual_connected)",
            gender.label(),
            components.len(),
            components
        )));
    }

    // Design: class dummies 2..K plus covariates, worker-demeaned.
    let n = data.len();
    let mut names: Vec<String> = (1..k).map(|c| format!("class_{}", c + 1)).collect();
    match covariates {
        CakmCovariates::None => {}
        CakmCovariates::AgeQuad => {
            names.push("age".into());
            names.push("age_sq".into());
        }
    }
    let p = names.len();
    let mut cols: Vec<Vec<f64>> = vec![vec![0.0; n]; p];
    let mut y: Vec<f64> = Vec::with_capacity(n);
    for (i, o) in data.iter().enumerate() {
        if o.class > 0 {
            cols[o.class - 1][i] = 1.0;
        }
        if covariates == CakmCovariates::AgeQuad {
            cols[k - 1][i] = o.age;
            cols[k][i] = o.age * o.age;
        }
        y.push(o.y);
    }

    // Worker demeaning. Observations of one worker are consecutive only
    // per row, so group by id.
    let mut worker_rows: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, o) in data.iter().enumerate() {
        worker_rows.entry(o.worker).or_default().push(i);
    }
    let mut y_dm = y.clone();
    let mut cols_dm = cols.clone();
    for rows in worker_rows.values() {
        let m = rows.len() as f64;
        let ym: f64 = rows.iter().map(|&i| y[i]).sum::<f64>() / m;
        for &i in rows {
            y_dm[i] -= ym;
        }
        for (col, col_dm) in cols.iter().zip(cols_dm.iter_mut()) {
            let cm: f64 = rows.iter().map(|&i| col[i]).sum::<f64>() / m;
            for &i in rows {
                col_dm[i] -= cm;
            }
        }
    }

    let ls = least_squares(&cols_dm, &y_dm)?;

    let mut psi = vec![0.0; k];
    let mut dropped_classes = Vec::new();
    for c in 1..k {
        psi[c] = ls.beta[c - 1];
    }
    for &j in &ls.dropped {
        if j < k - 1 {
            dropped_classes.push(j + 1);
        }
    }
    let beta: Vec<f64> = ls.beta[(k - 1)..].to_vec();
    let covariate_names: Vec<String> = names[(k - 1)..].to_vec();

    // Recover worker effects from the undemeaned data.
    let xb_of = |i: usize| -> f64 {
        let mut v = psi[data[i].class];
        if covariates == CakmCovariates::AgeQuad {
            v += beta[0] * data[i].age + beta[1] * data[i].age * data[i].age;
        }
        v
    };
    let mut alpha: BTreeMap<u64, f64> = BTreeMap::new();
    for (id, rows) in &worker_rows {
        let m = rows.len() as f64;
        let a: f64 = rows.iter().map(|&i| y[i] - xb_of(i)).sum::<f64>() / m;
        alpha.insert(*id, a);
    }

    let mut series = EffectSeries::default();
    let mut class_counts = vec![0.0f64; k];
    for (i, o) in data.iter().enumerate() {
        let worker = alpha[&o.worker];
        let firm = psi[o.class];
        let xb = xb_of(i) - firm;
        let resid = o.y - worker - firm - xb;
        series.y.push(o.y);
        series.worker.push(worker);
        series.firm.push(firm);
        series.xb.push(xb);
        series.resid.push(resid);
        class_counts[o.class] += 1.0;
    }
    let total: f64 = class_counts.iter().sum();
    let class_shares: Vec<f64> = class_counts.iter().map(|c| c / total).collect();

    Ok(FixedEffectsFit {
        gender,
        psi,
        alpha,
        covariate_names,
        beta,
        class_shares,
        mean_wage: util::mean(&y),
        series,
        dropped_classes,
        observations: n,
    })
}

/// Firm share of the gap, split into sorting and bargaining. Both pieces
/// average the two admissible reference choices, which makes the split
/// invariant to shifting every class premium by a constant, and their sum
/// telescopes exactly to E_F[psi_F] − E_M[psi_M].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmGapKob {
    /// Overall gap, female minus male mean log wage.
    pub gap: f64,
    pub firm_component: f64,
    pub sorting: f64,
    pub bargaining: f64,
    /// gap − firm_component: the part the class premia do not carry.
    pub other: f64,
    /// Classes observed for exactly one gender; the missing side enters
    /// with share 0 and premium 0.
    pub one_gender_classes: Vec<usize>,
}

pub fn cakm_kob(fit_f: &FixedEffectsFit, fit_m: &FixedEffectsFit) -> Result<FirmGapKob> {
    if fit_f.psi.len() != fit_m.psi.len() {
        return Err(Error::config(
            "fixed-effects fits disagree on the class count",
        ));
    }
    let k = fit_f.psi.len();
    let mut one_gender = Vec::new();
    for c in 0..k {
        let in_f = fit_f.class_shares[c] > 0.0;
        let in_m = fit_m.class_shares[c] > 0.0;
        if in_f != in_m {
            one_gender.push(c);
        }
    }

    let mut sorting = 0.0;
    let mut bargaining = 0.0;
    for c in 0..k {
        let ds = fit_f.class_shares[c] - fit_m.class_shares[c];
        let dpsi = fit_f.psi[c] - fit_m.psi[c];
        sorting += 0.5 * (fit_f.psi[c] + fit_m.psi[c]) * ds;
        bargaining += 0.5 * (fit_f.class_shares[c] + fit_m.class_shares[c]) * dpsi;
    }
    let firm_component: f64 = (0..k)
        .map(|c| fit_f.class_shares[c] * fit_f.psi[c] - fit_m.class_shares[c] * fit_m.psi[c])
        .sum();
    debug_assert!((sorting + bargaining - firm_component).abs() < 1e-10);

    let gap = fit_f.mean_wage - fit_m.mean_wage;
    Ok(FirmGapKob {
        gap,
        firm_component,
        sorting,
        bargaining,
        other: gap - firm_component,
        one_gender_classes: one_gender,
    })
}

// ---------------------------------------------------------------------------
// Variance decomposition.
// ---------------------------------------------------------------------------

/// Variance of log wages split over the fitted effects. On a least-squares
/// fit the residual is orthogonal to every other piece in sample, so the
/// seven components sum to Var(w); `orthogonality_gap` records the
/// difference actually observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarDecompReport {
    pub var_w: f64,
    pub var_worker: f64,
    pub var_firm: f64,
    pub var_xb: f64,
    pub cov2_worker_firm: f64,
    pub cov2_worker_xb: f64,
    pub cov2_firm_xb: f64,
    pub var_resid: f64,
    pub orthogonality_gap: f64,
    /// Each component divided by Var(w), in component order.
    pub shares: [f64; 7],
}

pub fn variance_decomposition(series: &EffectSeries) -> Result<VarDecompReport> {
    if series.is_empty() {
        return Err(Error::data("variance decomposition over an empty series"));
    }
    let n = series.len();
    for v in [&series.worker, &series.firm, &series.xb, &series.resid] {
        if v.len() != n {
            return Err(Error::data("effect series lengths disagree"));
        }
    }
    for i in 0..n {
        let sum = series.worker[i] + series.firm[i] + series.xb[i] + series.resid[i];
        if (series.y[i] - sum).abs() > 1e-10 * series.y[i].abs().max(1.0) {
            return Err(Error::data(format!(
                "row {i}: effects sum to {sum}, observed {}",
                series.y[i]
            )));
        }
    }

    let var_w = util::population_variance(&series.y);
    let var_worker = util::population_variance(&series.worker);
    let var_firm = util::population_variance(&series.firm);
    let var_xb = util::population_variance(&series.xb);
    let cov2_worker_firm = 2.0 * util::population_covariance(&series.worker, &series.firm);
    let cov2_worker_xb = 2.0 * util::population_covariance(&series.worker, &series.xb);
    let cov2_firm_xb = 2.0 * util::population_covariance(&series.firm, &series.xb);
    let var_resid = util::population_variance(&series.resid);

    let components = [
        var_worker,
        var_firm,
        var_xb,
        cov2_worker_firm,
        cov2_worker_xb,
        cov2_firm_xb,
        var_resid,
    ];
    let total: f64 = components.iter().sum();
    let shares = components.map(|c| if var_w != 0.0 { c / var_w } else { 0.0 });

    Ok(VarDecompReport {
        var_w,
        var_worker,
        var_firm,
        var_xb,
        cov2_worker_firm,
        cov2_worker_xb,
        cov2_firm_xb,
        var_resid,
        orthogonality_gap: var_w - total,
        shares,
    })
}

// ---------------------------------------------------------------------------
// Theil index.
// ---------------------------------------------------------------------------

/// Theil index of a count grid: T = (1/M) Σ (N_m/N̄) ln(N_m/N̄), where N̄
/// is the mean count over all M cells. Empty cells contribute zero, the
/// x·ln(x) limit at zero.
pub fn theil_index(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::data("Theil index of an empty grid"));
    }
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::data("Theil index needs finite non-negative counts"));
    }
    let mean = util::mean(counts);
    if mean == 0.0 {
        return Err(Error::data("Theil index undefined when every cell is empty"));
    }
    let m = counts.len() as f64;
    let mut acc = Accumulator::new();
    for &c in counts {
        if c > 0.0 {
            let ratio = c / mean;
            acc.add(ratio * ratio.ln());
        }
    }
    Ok(acc.value() / m)
}

// ---------------------------------------------------------------------------
// Weighted two-way fit on match-cell means.
// ---------------------------------------------------------------------------

/// One (class, type) cell of the match grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwCell {
    pub class: usize,
    pub ty: usize,
    pub mean: f64,
    pub weight: f64,
}

/// Additive fit mu_kl ≈ alpha_l + psi_k minimizing the weighted squared
/// error, with psi[0] = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveFit {
    pub class_count: usize,
    pub type_count: usize,
    pub type_effects: Vec<f64>,
    /// Class premia, reference class 0 pinned to 0.
    pub class_effects: Vec<f64>,
    /// Residual match effects mu − alpha − psi; None where the cell is
    /// unobserved.
    pub match_effects: Vec<Vec<Option<f64>>>,
    pub weighted_sse: f64,
}

impl AdditiveFit {
    pub fn fitted(&self, class: usize, ty: usize) -> f64 {
        self.type_effects[ty] + self.class_effects[class]
    }
}

/// Minimize Σ n_kl (mu_kl − alpha_l − psi_k)² by weighted normal
/// equations. Requires the bipartite support graph over classes and types
/// to be connected and the reference class to be observed.
pub fn weighted_tw_fe(cells: &[TwCell]) -> Result<AdditiveFit> {
    let active: Vec<&TwCell> = cells.iter().filter(|c| c.weight > 0.0).collect();
    if active.is_empty() {
        return Err(Error::data("two-way fit needs at least one weighted cell"));
    }
    let k = active.iter().map(|c| c.class).max().unwrap() + 1;
    let l = active.iter().map(|c| c.ty).max().unwrap() + 1;
    let mut seen = vec![vec![false; l]; k];
    for c in &active {
        if seen[c.class][c.ty] {
            return Err(Error::data(format!(
                "duplicate cell ({}, {})",
                c.class, c.ty
            )));
        }
        seen[c.class][c.ty] = true;
    }
    if !(0..l).any(|t| seen[0][t]) {
        return Err(Error::data(
            "reference class (index 0) has no weighted cells; relabel classes",
        ));
    }

    // Bipartite connectivity: nodes 0..k are classes, k..k+l types.
    let mut parent: Vec<usize> = (0..k + l).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for c in &active {
        let (a, b) = (find(&mut parent, c.class), find(&mut parent, k + c.ty));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut touched: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for c in &active {
        let root = find(&mut parent, c.class);
        let entry = touched.entry(root).or_default();
        let class_tag = format!("class {}", c.class + 1);
        let type_tag = format!("type {}", c.ty + 1);
        if !entry.contains(&class_tag) {
            entry.push(class_tag);
        }
        if !entry.contains(&type_tag) {
            entry.push(type_tag);
        }
    }
    if touched.len() > 1 {
        let listing: Vec<String> = touched
            .values()
            .map(|names| format!("{{{}}}", names.join(", ")))
            .collect();
        return Err(Error::data(format!(
            "match support graph is disconnected: components {}",
            listing.join(" | ")
        )));
    }

    // Parameters: alpha_0..alpha_{l-1}, then psi_1..psi_{k-1}.
    let dim = l + k - 1;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    for c in &active {
        let ia = c.ty;
        a[(ia, ia)] += c.weight;
        b[ia] += c.weight * c.mean;
        if c.class > 0 {
            let ip = l + c.class - 1;
            a[(ip, ip)] += c.weight;
            a[(ia, ip)] += c.weight;
            a[(ip, ia)] += c.weight;
            b[ip] += c.weight * c.mean;
        }
    }
    let theta = Cholesky::new(a.clone())
        .map(|ch| ch.solve(&b))
        .or_else(|| a.clone().svd(true, true).solve(&b, 1e-12).ok())
        .ok_or_else(|| Error::numerical("two-way normal equations are singular"))?;

    let type_effects: Vec<f64> = (0..l).map(|t| theta[t]).collect();
    let mut class_effects = vec![0.0; k];
    for c in 1..k {
        class_effects[c] = theta[l + c - 1];
    }

    let mut match_effects = vec![vec![None; l]; k];
    let mut sse = Accumulator::new();
    for c in &active {
        let m = c.mean - type_effects[c.ty] - class_effects[c.class];
        match_effects[c.class][c.ty] = Some(m);
        sse.add(c.weight * m * m);
    }

    Ok(AdditiveFit {
        class_count: k,
        type_count: l,
        type_effects,
        class_effects,
        match_effects,
        weighted_sse: sse.value(),
    })
}
