//! Worker typing: a bilinear Gaussian mixture over mover wage pairs fitted
//! by EM, a proportions-only EM for stayers, and MAP type assignment.
//!
//! Movers identify the wage parameters: a worker of latent type l moving
//! from class k to class k' draws period-1 pay from N(mu1[k][l], sd1[k][l])
//! and period-2 pay from N(mu2[k'][l], sd2[k'][l]), with cell-specific type
//! proportions p[k][k'][l]. Stayers then pin down per-class proportions
//! q[k][l] with the period-1 densities held fixed. Estimation never reads
//! the gender field; gender splits happen downstream.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::FirmClassing;
use crate::error::{Error, Result};
use crate::panel::BiennialPanel;
use crate::util::{self, Accumulator};

/// EM controls. Defaults match the estimator's reference configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when |loglik - prev| < rel_tol * |prev|.
    pub rel_tol: f64,
    /// Lower bound on every fitted standard deviation, log-wage units.
    pub sigma_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 2000,
            rel_tol: 1e-8,
            sigma_floor: 1e-3,
        }
    }
}

/// Movers with both endpoint firms classed, columnar for the E-step.
#[derive(Debug, Clone, Default)]
pub struct MoverSample {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub origin: Vec<usize>,
    pub dest: Vec<usize>,
    /// Index of each mover in `BiennialPanel::rows`.
    pub row_index: Vec<usize>,
    /// Movers dropped because an endpoint firm has no class.
    pub skipped_unclassed: usize,
}

impl MoverSample {
    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }
}

/// Stayers whose firm is classed, columnar.
#[derive(Debug, Clone, Default)]
pub struct StayerSample {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub class: Vec<usize>,
    pub row_index: Vec<usize>,
    pub skipped_unclassed: usize,
}

impl StayerSample {
    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }
}

/// Pull the mover rows out of a panel. Gender is deliberately not read.
pub fn extract_movers(panel: &BiennialPanel, classing: &FirmClassing) -> MoverSample {
    let mut out = MoverSample::default();
    for (i, row) in panel.rows.iter().enumerate() {
        if !row.is_mover() {
            continue;
        }
        match (
            classing.class_of(row.first.firm_id),
            classing.class_of(row.second.firm_id),
        ) {
            (Some(k1), Some(k2)) => {
                out.w1.push(row.first.log_wage);
                out.w2.push(row.second.log_wage);
                out.origin.push(k1);
                out.dest.push(k2);
                out.row_index.push(i);
            }
            _ => out.skipped_unclassed += 1,
        }
    }
    out
}

/// Pull the stayer rows out of a panel. Gender is deliberately not read.
pub fn extract_stayers(panel: &BiennialPanel, classing: &FirmClassing) -> StayerSample {
    let mut out = StayerSample::default();
    for (i, row) in panel.rows.iter().enumerate() {
        if row.is_mover() {
            continue;
        }
        match classing.class_of(row.first.firm_id) {
            Some(k) => {
                out.w1.push(row.first.log_wage);
                out.w2.push(row.second.log_wage);
                out.class.push(k);
                out.row_index.push(i);
            }
            None => out.skipped_unclassed += 1,
        }
    }
    out
}

/// Fit diagnostics: restart outcomes and sample-coverage counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    /// Final mover loglik per restart; NaN marks an aborted restart.
    pub restart_logliks: Vec<f64>,
    /// Loglik after every iteration, per restart.
    pub histories: Vec<Vec<f64>>,
    pub chosen_restart: usize,
    pub aborted_restarts: Vec<usize>,
    /// Mover counts per (origin, destination) cell.
    pub mover_cell_counts: Vec<Vec<usize>>,
    /// Observed cells with fewer than 10 movers; kept in the likelihood.
    pub sparse_cells: Vec<(usize, usize)>,
    pub stayer_class_counts: Vec<usize>,
    /// Classes whose q row fell back to the mover marginal.
    pub zero_stayer_classes: Vec<usize>,
    pub skipped_unclassed_movers: usize,
    pub skipped_unclassed_stayers: usize,
    pub mover_loglik: f64,
    pub stayer_loglik: Option<f64>,
}

/// The fitted mixture. Arrays are zero-indexed: classes by ascending class
/// mean wage (from the firm classing), types by ascending pooled expected
/// wage (canonical relabeling applied after fitting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub class_count: usize,
    pub type_count: usize,
    /// Type proportions per (origin, destination) cell; each a simplex
    /// over types. Cells with no movers hold the uniform vector.
    pub p: Vec<Vec<Vec<f64>>>,
    /// Stayers' type proportions per class; uniform until `fit_stayers`.
    pub q: Vec<Vec<f64>>,
    /// Period-1 wage mean and sd per (origin class, type).
    pub mu1: Vec<Vec<f64>>,
    pub sd1: Vec<Vec<f64>>,
    /// Period-2 wage mean and sd per (destination class, type).
    pub mu2: Vec<Vec<f64>>,
    pub sd2: Vec<Vec<f64>>,
    /// Objective of the most recent fit: the mover loglik after
    /// `fit_movers`, mover plus stayer after `fit_stayers`.
    pub loglik: f64,
    pub diagnostics: EmDiagnostics,
}

/// Per-worker type posteriors, aligned with `BiennialPanel::rows`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAssignment {
    /// Posterior over types per row; each sums to 1.
    pub posteriors: Vec<Vec<f64>>,
    /// MAP type per row, lowest index on ties.
    pub types: Vec<usize>,
    /// Movers whose destination firm has no class; these fall back to a
    /// stayer-style posterior from the period-1 wage and the q prior.
    pub unclassed_destination: usize,
}

struct EmProblem<'a> {
    sample: &'a MoverSample,
    k: usize,
    l: usize,
    opts: &'a EmOptions,
}

struct EmState {
    p: Vec<Vec<Vec<f64>>>,
    mu1: Vec<Vec<f64>>,
    sd1: Vec<Vec<f64>>,
    mu2: Vec<Vec<f64>>,
    sd2: Vec<Vec<f64>>,
    loglik: f64,
    history: Vec<f64>,
}

/// Per-chunk E-step partials, folded in chunk order so the reduction is
/// independent of thread count.
struct Partials {
    loglik: Accumulator,
    /// r sums per (origin, destination, type).
    p_num: Vec<f64>,
    /// Period-1 moment sums per (origin, type): r, r*w, r*w^2.
    m1: Vec<[f64; 3]>,
    /// Period-2 moment sums per (destination, type).
    m2: Vec<[f64; 3]>,
}

impl Partials {
    fn new(k: usize, l: usize) -> Self {
        Partials {
            loglik: Accumulator::new(),
            p_num: vec![0.0; k * k * l],
            m1: vec![[0.0; 3]; k * l],
            m2: vec![[0.0; 3]; k * l],
        }
    }

    fn absorb(&mut self, other: &Partials) {
        self.loglik.add(other.loglik.value());
        for (a, b) in self.p_num.iter_mut().zip(&other.p_num) {
            *a += b;
        }
        for (a, b) in self.m1.iter_mut().zip(&other.m1) {
            for j in 0..3 {
                a[j] += b[j];
            }
        }
        for (a, b) in self.m2.iter_mut().zip(&other.m2) {
            for j in 0..3 {
                a[j] += b[j];
            }
        }
    }
}

const E_STEP_CHUNK: usize = 8192;

impl<'a> EmProblem<'a> {
    /// One E accumulation pass. Chunked in fixed-size blocks whose partial
    /// sums are folded in index order, so results do not depend on the
    /// worker-thread count.
    fn accumulate(&self, state: &EmState) -> Partials {
        let (k, l) = (self.k, self.l);
        let n = self.sample.len();
        let idx: Vec<usize> = (0..n).collect();
        let chunks: Vec<Partials> = idx
            .par_chunks(E_STEP_CHUNK)
            .map(|chunk| {
                let mut part = Partials::new(k, l);
                let mut logs = vec![0.0f64; l];
                for &i in chunk {
                    let (w1, w2) = (self.sample.w1[i], self.sample.w2[i]);
                    let (k1, k2) = (self.sample.origin[i], self.sample.dest[i]);
                    for t in 0..l {
                        let prior = state.p[k1][k2][t];
                        logs[t] = if prior > 0.0 {
                            prior.ln()
                                + util::normal_log_pdf(w1, state.mu1[k1][t], state.sd1[k1][t])
                                + util::normal_log_pdf(w2, state.mu2[k2][t], state.sd2[k2][t])
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    let ll = util::log_sum_exp(&logs);
                    part.loglik.add(ll);
                    for t in 0..l {
                        let r = (logs[t] - ll).exp();
                        if r == 0.0 {
                            continue;
                        }
                        part.p_num[(k1 * k + k2) * l + t] += r;
                        let a = &mut part.m1[k1 * l + t];
                        a[0] += r;
                        a[1] += r * w1;
                        a[2] += r * w1 * w1;
                        let b = &mut part.m2[k2 * l + t];
                        b[0] += r;
                        b[1] += r * w2;
                        b[2] += r * w2 * w2;
                    }
                }
                part
            })
            .collect();
        let mut total = Partials::new(k, l);
        for part in &chunks {
            total.absorb(part);
        }
        total
    }

    fn m_step(&self, part: &Partials, cell_counts: &[Vec<usize>], state: &mut EmState) {
        let (k, l) = (self.k, self.l);
        for k1 in 0..k {
            for k2 in 0..k {
                let n_cell = cell_counts[k1][k2];
                if n_cell == 0 {
                    continue;
                }
                for t in 0..l {
                    state.p[k1][k2][t] = part.p_num[(k1 * k + k2) * l + t] / n_cell as f64;
                }
            }
        }
        let floor2 = self.opts.sigma_floor * self.opts.sigma_floor;
        let update = |mom: &[[f64; 3]], mu: &mut Vec<Vec<f64>>, sd: &mut Vec<Vec<f64>>| {
            for kk in 0..k {
                for t in 0..l {
                    let [r, rw, rww] = mom[kk * l + t];
                    if r <= 1e-12 {
                        continue; // dead component keeps its previous params
                    }
                    let m = rw / r;
                    let var = (rww / r - m * m).max(floor2);
                    mu[kk][t] = m;
                    sd[kk][t] = var.sqrt();
                }
            }
        };
        update(&part.m1, &mut state.mu1, &mut state.sd1);
        update(&part.m2, &mut state.mu2, &mut state.sd2);
    }

    /// Quantile-slice initialization. Restart 0 uses the slices as-is;
    /// later restarts add Gaussian jitter so starts explore the space.
    fn init(&self, restart: usize, seed: u64) -> EmState {
        use rand::Rng;
        let (k, l) = (self.k, self.l);
        let mut rng = util::substream2(seed, STREAM_EM_INIT, restart as u64);

        let mut pooled1: Vec<f64> = self.sample.w1.clone();
        pooled1.sort_by(f64::total_cmp);
        let mut pooled2: Vec<f64> = self.sample.w2.clone();
        pooled2.sort_by(f64::total_cmp);

        let slice_params = |wages_by_class: Vec<Vec<f64>>, pooled: &[f64]| {
            let mut mu = vec![vec![0.0; l]; k];
            let mut sd = vec![vec![0.0; l]; k];
            for kk in 0..k {
                let mut w = wages_by_class[kk].clone();
                w.sort_by(f64::total_cmp);
                let source: &[f64] = if w.is_empty() { pooled } else { &w };
                let spread = util::population_variance(source).sqrt();
                let scale = (spread / l as f64).max(self.opts.sigma_floor * 10.0);
                for t in 0..l {
                    mu[kk][t] = util::quantile_sorted(source, (t as f64 + 0.5) / l as f64);
                    sd[kk][t] = scale;
                }
            }
            (mu, sd)
        };

        let mut by_origin = vec![Vec::new(); k];
        let mut by_dest = vec![Vec::new(); k];
        for i in 0..self.sample.len() {
            by_origin[self.sample.origin[i]].push(self.sample.w1[i]);
            by_dest[self.sample.dest[i]].push(self.sample.w2[i]);
        }
        let (mut mu1, sd1) = slice_params(by_origin, &pooled1);
        let (mut mu2, sd2) = slice_params(by_dest, &pooled2);

        if restart > 0 {
            let jitter = |mu: &mut Vec<Vec<f64>>, sd: &Vec<Vec<f64>>, rng: &mut rand_chacha::ChaCha8Rng| {
                for kk in 0..k {
                    for t in 0..l {
                        let u: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                        mu[kk][t] += u * sd[kk][t] * l as f64;
                    }
                }
            };
            jitter(&mut mu1, &sd1, &mut rng);
            jitter(&mut mu2, &sd2, &mut rng);
        }

        EmState {
            p: vec![vec![vec![1.0 / l as f64; l]; k]; k],
            mu1,
            sd1,
            mu2,
            sd2,
            loglik: f64::NEG_INFINITY,
            history: Vec::new(),
        }
    }

    fn run(&self, restart: usize, seed: u64, cell_counts: &[Vec<usize>]) -> Option<EmState> {
        let mut state = self.init(restart, seed);
        for _ in 0..self.opts.max_iter {
            let part = self.accumulate(&state);
            let ll = part.loglik.value();
            if !ll.is_finite() {
                return None;
            }
            state.history.push(ll);
            let prev = state.loglik;
            state.loglik = ll;
            self.m_step(&part, cell_counts, &mut state);
            if prev.is_finite() && (ll - prev).abs() < self.opts.rel_tol * prev.abs() {
                break;
            }
        }
        Some(state)
    }
}

const STREAM_EM_INIT: u64 = 0x656d;

fn cell_counts(sample: &MoverSample, k: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; k]; k];
    for i in 0..sample.len() {
        counts[sample.origin[i]][sample.dest[i]] += 1;
    }
    counts
}

/// Fit the mover mixture with `reps` independent EM starts, keeping the
/// best final loglik (ties to the lower restart index). Types in the
/// returned model are relabeled so pooled expected wage rises with the
/// type index.
pub fn fit_movers(
    panel: &BiennialPanel,
    classing: &FirmClassing,
    type_count: usize,
    reps: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<MixtureModel> {
    if type_count == 0 {
        return Err(Error::config("type count must be positive"));
    }
    if reps == 0 {
        return Err(Error::config("at least one EM restart is required"));
    }
    let sample = extract_movers(panel, classing);
    fit_movers_on_sample(&sample, classing.class_count, type_count, reps, seed, opts)
}

/// Fitting core, exposed for tests that construct samples directly.
pub fn fit_movers_on_sample(
    sample: &MoverSample,
    class_count: usize,
    type_count: usize,
    reps: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<MixtureModel> {
    if sample.is_empty() {
        return Err(Error::data("no movers with classed endpoint firms"));
    }
    if type_count == 0 || reps == 0 {
        return Err(Error::config("type count and restarts must be positive"));
    }
    let counts = cell_counts(sample, class_count);
    let problem = EmProblem {
        sample,
        k: class_count,
        l: type_count,
        opts,
    };

    let runs: Vec<(usize, Option<EmState>)> = (0..reps)
        .into_par_iter()
        .map(|r| (r, problem.run(r, seed, &counts)))
        .collect();

    let mut diagnostics = EmDiagnostics {
        mover_cell_counts: counts.clone(),
        skipped_unclassed_movers: sample.skipped_unclassed,
        ..EmDiagnostics::default()
    };
    for k1 in 0..class_count {
        for k2 in 0..class_count {
            if counts[k1][k2] > 0 && counts[k1][k2] < 10 {
                diagnostics.sparse_cells.push((k1, k2));
            }
        }
    }

    let mut best: Option<(usize, EmState)> = None;
    for (r, outcome) in runs {
        match outcome {
            Some(state) => {
                diagnostics.restart_logliks.push(state.loglik);
                diagnostics.histories.push(state.history.clone());
                let better = match &best {
                    None => true,
                    Some((_, b)) => state.loglik > b.loglik,
                };
                if better {
                    best = Some((r, state));
                }
            }
            None => {
                diagnostics.restart_logliks.push(f64::NAN);
                diagnostics.histories.push(Vec::new());
                diagnostics.aborted_restarts.push(r);
            }
        }
    }
    let (chosen, state) = best.ok_or_else(|| {
        Error::numerical("every EM restart produced a non-finite likelihood")
    })?;
    diagnostics.chosen_restart = chosen;
    diagnostics.mover_loglik = state.loglik;

    let mut model = MixtureModel {
        class_count,
        type_count,
        p: state.p,
        q: vec![vec![1.0 / type_count as f64; type_count]; class_count],
        mu1: state.mu1,
        sd1: state.sd1,
        mu2: state.mu2,
        sd2: state.sd2,
        loglik: state.loglik,
        diagnostics,
    };
    relabel_types(&mut model, sample);
    Ok(model)
}

/// Reorder types so the pooled (responsibility-weighted, both-period)
/// expected wage increases in the type index.
fn relabel_types(model: &mut MixtureModel, sample: &MoverSample) {
    let l = model.type_count;
    if l <= 1 {
        return;
    }
    let mut wage_mass = vec![0.0; l];
    let mut mass = vec![0.0; l];
    let mut logs = vec![0.0; l];
    for i in 0..sample.len() {
        let (k1, k2) = (sample.origin[i], sample.dest[i]);
        for t in 0..l {
            let prior = model.p[k1][k2][t];
            logs[t] = if prior > 0.0 {
                prior.ln()
                    + util::normal_log_pdf(sample.w1[i], model.mu1[k1][t], model.sd1[k1][t])
                    + util::normal_log_pdf(sample.w2[i], model.mu2[k2][t], model.sd2[k2][t])
            } else {
                f64::NEG_INFINITY
            };
        }
        let ll = util::log_sum_exp(&logs);
        for t in 0..l {
            let r = (logs[t] - ll).exp();
            mass[t] += 2.0 * r;
            wage_mass[t] += r * (sample.w1[i] + sample.w2[i]);
        }
    }
    let pooled: Vec<f64> = (0..l)
        .map(|t| if mass[t] > 0.0 { wage_mass[t] / mass[t] } else { f64::INFINITY })
        .collect();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]).then(a.cmp(&b)));
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return;
    }
    let permute_row = |row: &Vec<f64>| -> Vec<f64> { order.iter().map(|&o| row[o]).collect() };
    for k1 in 0..model.class_count {
        for k2 in 0..model.class_count {
            model.p[k1][k2] = permute_row(&model.p[k1][k2]);
        }
        model.q[k1] = permute_row(&model.q[k1]);
        model.mu1[k1] = permute_row(&model.mu1[k1]);
        model.sd1[k1] = permute_row(&model.sd1[k1]);
        model.mu2[k1] = permute_row(&model.mu2[k1]);
        model.sd2[k1] = permute_row(&model.sd2[k1]);
    }
}

/// Fit the stayers' type proportions with the mover model's period-1
/// densities held fixed. The likelihood is concave in q, so a single EM
/// run from the uniform start finds the maximum; no restarts are needed.
pub fn fit_stayers(
    panel: &BiennialPanel,
    classing: &FirmClassing,
    mover_model: &MixtureModel,
) -> Result<MixtureModel> {
    let sample = extract_stayers(panel, classing);
    fit_stayers_on_sample(&sample, mover_model)
}

/// Stayer-fitting core, exposed for tests that construct samples directly.
pub fn fit_stayers_on_sample(
    sample: &StayerSample,
    mover_model: &MixtureModel,
) -> Result<MixtureModel> {
    let (k, l) = (mover_model.class_count, mover_model.type_count);
    let opts = EmOptions::default();
    let mut model = mover_model.clone();
    model.diagnostics.skipped_unclassed_stayers = sample.skipped_unclassed;

    let mut class_counts = vec![0usize; k];
    for &c in &sample.class {
        class_counts[c] += 1;
    }
    model.diagnostics.stayer_class_counts = class_counts.clone();

    // Cache the per-observation log densities; they never change.
    let dens: Vec<f64> = (0..sample.len())
        .flat_map(|i| {
            let c = sample.class[i];
            (0..l)
                .map(|t| util::normal_log_pdf(sample.w1[i], model.mu1[c][t], model.sd1[c][t]))
                .collect::<Vec<f64>>()
        })
        .collect();

    let mut q = vec![vec![1.0 / l as f64; l]; k];
    let mut prev = f64::NEG_INFINITY;
    let mut loglik = f64::NEG_INFINITY;
    for _ in 0..opts.max_iter {
        let mut ll = Accumulator::new();
        let mut num = vec![vec![0.0f64; l]; k];
        let mut logs = vec![0.0f64; l];
        for i in 0..sample.len() {
            let c = sample.class[i];
            for t in 0..l {
                logs[t] = if q[c][t] > 0.0 {
                    q[c][t].ln() + dens[i * l + t]
                } else {
                    f64::NEG_INFINITY
                };
            }
            let lse = util::log_sum_exp(&logs);
            ll.add(lse);
            for t in 0..l {
                num[c][t] += (logs[t] - lse).exp();
            }
        }
        loglik = ll.value();
        if !loglik.is_finite() {
            return Err(Error::numerical("stayer likelihood became non-finite"));
        }
        for c in 0..k {
            if class_counts[c] > 0 {
                for t in 0..l {
                    q[c][t] = num[c][t] / class_counts[c] as f64;
                }
            }
        }
        if prev.is_finite() && (loglik - prev).abs() < opts.rel_tol * prev.abs() {
            break;
        }
        prev = loglik;
    }

    // Classes with no stayers inherit the mover origin-marginal.
    for c in 0..k {
        if class_counts[c] > 0 {
            continue;
        }
        model.diagnostics.zero_stayer_classes.push(c);
        q[c] = mover_origin_marginal(mover_model, c);
    }

    model.q = q;
    model.diagnostics.stayer_loglik = Some(loglik);
    model.loglik = model.diagnostics.mover_loglik + loglik;
    Ok(model)
}

/// Type distribution of movers leaving class k: destination cells of p
/// weighted by their mover counts. Uniform when the class has no movers.
pub fn mover_origin_marginal(model: &MixtureModel, k: usize) -> Vec<f64> {
    let l = model.type_count;
    let counts = &model.diagnostics.mover_cell_counts;
    let mut out = vec![0.0; l];
    let mut total = 0.0;
    if let Some(row) = counts.get(k) {
        for (k2, &n) in row.iter().enumerate() {
            if n == 0 {
                continue;
            }
            total += n as f64;
            for t in 0..l {
                out[t] += n as f64 * model.p[k][k2][t];
            }
        }
    }
    if total > 0.0 {
        for v in &mut out {
            *v /= total;
        }
    } else {
        out = vec![1.0 / l as f64; l];
    }
    out
}

/// Softmax of log weights; the shift by the max makes it invariant to any
/// common additive constant, i.e. to rescaling all densities at once.
pub(crate) fn posterior_from_logs(logs: &[f64]) -> Vec<f64> {
    let lse = util::log_sum_exp(logs);
    if !lse.is_finite() {
        // All components impossible: fall back to uniform.
        return vec![1.0 / logs.len() as f64; logs.len()];
    }
    logs.iter().map(|&a| (a - lse).exp()).collect()
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// MAP-assign a type to every panel row.
///
/// Stayers use the q prior for their class and both periods' densities at
/// that class. Movers use their (origin, destination) cell of p,
/// renormalized over types, with period-1 densities at the origin and
/// period-2 densities at the destination. A mover whose destination firm
/// has no class falls back to the stayer form on the period-1 wage alone.
pub fn map_assign(
    panel: &BiennialPanel,
    classing: &FirmClassing,
    model: &MixtureModel,
) -> Result<TypeAssignment> {
    let l = model.type_count;
    let mut posteriors = Vec::with_capacity(panel.rows.len());
    let mut types = Vec::with_capacity(panel.rows.len());
    let mut unclassed_destination = 0usize;
    let mut logs = vec![0.0f64; l];

    for row in &panel.rows {
        let k1 = classing.class_of(row.first.firm_id).ok_or_else(|| {
            Error::data(format!(
                "firm {} has no class; classing must cover every period-1 firm",
                row.first.firm_id
            ))
        })?;
        let k2 = if row.is_mover() {
            classing.class_of(row.second.firm_id)
        } else {
            Some(k1)
        };

        match k2 {
            Some(k2) => {
                let prior: Vec<f64> = if row.is_mover() {
                    let cell = &model.p[k1][k2];
                    let total: f64 = cell.iter().sum();
                    if total > 0.0 {
                        cell.iter().map(|&x| x / total).collect()
                    } else {
                        vec![1.0 / l as f64; l]
                    }
                } else {
                    model.q[k1].clone()
                };
                for t in 0..l {
                    logs[t] = if prior[t] > 0.0 {
                        prior[t].ln()
                            + util::normal_log_pdf(row.first.log_wage, model.mu1[k1][t], model.sd1[k1][t])
                            + util::normal_log_pdf(row.second.log_wage, model.mu2[k2][t], model.sd2[k2][t])
                    } else {
                        f64::NEG_INFINITY
                    };
                }
            }
            None => {
                unclassed_destination += 1;
                for t in 0..l {
                    logs[t] = if model.q[k1][t] > 0.0 {
                        model.q[k1][t].ln()
                            + util::normal_log_pdf(row.first.log_wage, model.mu1[k1][t], model.sd1[k1][t])
                    } else {
                        f64::NEG_INFINITY
                    };
                }
            }
        }

        let post = posterior_from_logs(&logs);
        types.push(argmax_lowest(&post));
        posteriors.push(post);
    }

    Ok(TypeAssignment {
        posteriors,
        types,
        unclassed_destination,
    })
}

/// Mover log-likelihood of a model on a sample, in log-sum-exp form.
pub fn mover_loglik(model: &MixtureModel, sample: &MoverSample) -> f64 {
    let l = model.type_count;
    let mut acc = Accumulator::new();
    let mut logs = vec![0.0f64; l];
    for i in 0..sample.len() {
        let (k1, k2) = (sample.origin[i], sample.dest[i]);
        for t in 0..l {
            logs[t] = if model.p[k1][k2][t] > 0.0 {
                model.p[k1][k2][t].ln()
                    + util::normal_log_pdf(sample.w1[i], model.mu1[k1][t], model.sd1[k1][t])
                    + util::normal_log_pdf(sample.w2[i], model.mu2[k2][t], model.sd2[k2][t])
            } else {
                f64::NEG_INFINITY
            };
        }
        acc.add(util::log_sum_exp(&logs));
    }
    acc.value()
}

/// Stayer log-likelihood: q prior and period-1 densities only, matching
/// the objective `fit_stayers` maximizes.
pub fn stayer_loglik(model: &MixtureModel, sample: &StayerSample) -> f64 {
    let l = model.type_count;
    let mut acc = Accumulator::new();
    let mut logs = vec![0.0f64; l];
    for i in 0..sample.len() {
        let c = sample.class[i];
        for t in 0..l {
            logs[t] = if model.q[c][t] > 0.0 {
                model.q[c][t].ln()
                    + util::normal_log_pdf(sample.w1[i], model.mu1[c][t], model.sd1[c][t])
            } else {
                f64::NEG_INFINITY
            };
        }
        acc.add(util::log_sum_exp(&logs));
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align;
    use crate::synth::{self, MarketBuilder};
    use std::collections::BTreeMap;

    /// A classing taken straight from ground truth, bypassing k-means.
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

    fn small_market(k: usize, l: usize, seed: u64) -> (crate::panel::BiennialPanel, synth::GroundTruth) {
        let spec = MarketBuilder::new(k, l)
            .seed(seed)
            .firms_per_class(12)
            .firm_size_law(3.4, 0.3)
            .mover_share(0.5)
            .sigma(0.05)
            .additive_wages(1.0, 1.0, 0.35, 0.0)
            .build();
        synth::generate_market(&spec).unwrap()
    }

    #[test]
    fn l1_mover_fit_is_classwise_means() {
        let (panel, truth) = small_market(2, 1, 5);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 1, 1, 9, &EmOptions::default()).unwrap();
        let sample = extract_movers(&panel, &classing);
        for k in 0..2 {
            let wages: Vec<f64> = (0..sample.len())
                .filter(|&i| sample.origin[i] == k)
                .map(|i| sample.w1[i])
                .collect();
            assert!((model.mu1[k][0] - util::mean(&wages)).abs() < 1e-10);
            let sd = util::population_variance(&wages).sqrt();
            assert!((model.sd1[k][0] - sd.max(1e-3)).abs() < 1e-10);
        }
        for k1 in 0..2 {
            for k2 in 0..2 {
                if model.diagnostics.mover_cell_counts[k1][k2] > 0 {
                    assert!((model.p[k1][k2][0] - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn l1_stayer_q_is_one() {
        let (panel, truth) = small_market(2, 1, 6);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 1, 1, 9, &EmOptions::default()).unwrap();
        let full = fit_stayers(&panel, &classing, &model).unwrap();
        for k in 0..2 {
            assert!((full.q[k][0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_assigns_everyone_type_one() {
        let (panel, truth) = small_market(2, 1, 7);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 1, 1, 9, &EmOptions::default()).unwrap();
        let full = fit_stayers(&panel, &classing, &model).unwrap();
        let assign = map_assign(&panel, &classing, &full).unwrap();
        assert!(assign.types.iter().all(|&t| t == 0));
        assert!(assign.posteriors.iter().all(|p| (p[0] - 1.0).abs() < 1e-12));
    }

    /// Bayes arithmetic: equal priors and a 10:1 density ratio give a
    /// posterior of (10/11, 1/11).
    #[test]
    fn posterior_matches_bayes_ratio() {
        let sd = 0.3f64;
        let d = 1.0f64;
        // Solve phi(w; 0, sd) / phi(w; d, sd) = 10 for w.
        let w = (d * d - 2.0 * sd * sd * 10f64.ln()) / (2.0 * d);
        let logs = vec![
            0.5f64.ln() + util::normal_log_pdf(w, 0.0, sd),
            0.5f64.ln() + util::normal_log_pdf(w, d, sd),
        ];
        let post = posterior_from_logs(&logs);
        assert!((post[0] - 10.0 / 11.0).abs() < 1e-12);
        assert!((post[1] - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_invariant_to_common_rescaling() {
        let logs = vec![-3.0, -1.5, -7.2];
        let base = posterior_from_logs(&logs);
        assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for shift in [-50.0, 0.1, 123.0] {
            let shifted: Vec<f64> = logs.iter().map(|&a| a + shift).collect();
            let post = posterior_from_logs(&shifted);
            for (a, b) in base.iter().zip(&post) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Oracle: direct summation without log-sum-exp on 100 rows.
    #[test]
    fn loglik_matches_direct_summation() {
        use rand::Rng;
        let (k, l) = (3, 2);
        let mut rng = util::substream(17, 4);
        let mut sample = MoverSample::default();
        for i in 0..100 {
            sample.w1.push(rng.gen_range(0.0..3.0));
            sample.w2.push(rng.gen_range(0.0..3.0));
            sample.origin.push(rng.gen_range(0..k));
            sample.dest.push(rng.gen_range(0..k));
            sample.row_index.push(i);
        }
        let model = MixtureModel {
            class_count: k,
            type_count: l,
            p: vec![vec![vec![0.3, 0.7]; k]; k],
            q: vec![vec![0.5, 0.5]; k],
            mu1: vec![vec![0.5, 2.0]; k],
            sd1: vec![vec![0.4, 0.6]; k],
            mu2: vec![vec![0.7, 2.2]; k],
            sd2: vec![vec![0.5, 0.3]; k],
            loglik: 0.0,
            diagnostics: EmDiagnostics::default(),
        };
        let fast = mover_loglik(&model, &sample);
        let mut direct = 0.0f64;
        for i in 0..100 {
            let (k1, k2) = (sample.origin[i], sample.dest[i]);
            let mut density = 0.0f64;
            for t in 0..l {
                density += model.p[k1][k2][t]
                    * util::normal_log_pdf(sample.w1[i], model.mu1[k1][t], model.sd1[k1][t]).exp()
                    * util::normal_log_pdf(sample.w2[i], model.mu2[k2][t], model.sd2[k2][t]).exp();
            }
            direct += density.ln();
        }
        assert!(
            (fast - direct).abs() <= 1e-10 * direct.abs(),
            "lse {fast} vs direct {direct}"
        );
    }

    #[test]
    fn em_loglik_never_decreases() {
        let (panel, truth) = small_market(2, 2, 11);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 2, 4, 21, &EmOptions::default()).unwrap();
        assert_eq!(model.diagnostics.histories.len(), 4);
        for history in &model.diagnostics.histories {
            assert!(!history.is_empty());
            for pair in history.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9,
                    "loglik fell from {} to {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn recovers_separated_market_parameters() {
        let (panel, truth) = small_market(3, 2, 13);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 2, 3, 31, &EmOptions::default()).unwrap();
        let full = fit_stayers(&panel, &classing, &model).unwrap();

        let spec = &truth.spec;
        let mu_true: Vec<Vec<f64>> = (0..3)
            .map(|k| (0..2).map(|l| spec.mu[k][l][0]).collect())
            .collect();
        let perm = align::align_by_means(&full.mu1, &mu_true).unwrap();
        // With canonical relabeling and monotone type effects the aligned
        // permutation is the identity.
        assert_eq!(perm, vec![0, 1]);

        for k in 0..3 {
            for l in 0..2 {
                assert!(
                    (full.mu1[k][perm[l]] - mu_true[k][l]).abs() < 0.02,
                    "mu1[{k}][{l}]"
                );
            }
        }
        let p_true = synth::realized_mover_shares(&panel, &truth);
        let q_true = synth::realized_stayer_shares(&panel, &truth);
        for k1 in 0..3 {
            for k2 in 0..3 {
                if full.diagnostics.mover_cell_counts[k1][k2] == 0 {
                    continue;
                }
                for l in 0..2 {
                    assert!(
                        (full.p[k1][k2][perm[l]] - p_true[k1][k2][l]).abs() < 0.05,
                        "p[{k1}][{k2}][{l}]"
                    );
                }
            }
            for l in 0..2 {
                assert!(
                    (full.q[k1][perm[l]] - q_true[k1][l]).abs() < 0.05,
                    "q[{k1}][{l}]"
                );
            }
        }
    }

    #[test]
    fn pooled_expected_wage_rises_with_type_index() {
        let (panel, truth) = small_market(2, 3, 19);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 3, 3, 41, &EmOptions::default()).unwrap();
        let sample = extract_movers(&panel, &classing);
        // Recompute pooled expected wages from the fitted model.
        let l = 3;
        let mut wage = vec![0.0; l];
        let mut mass = vec![0.0; l];
        for i in 0..sample.len() {
            let (k1, k2) = (sample.origin[i], sample.dest[i]);
            let logs: Vec<f64> = (0..l)
                .map(|t| {
                    model.p[k1][k2][t].max(1e-300).ln()
                        + util::normal_log_pdf(sample.w1[i], model.mu1[k1][t], model.sd1[k1][t])
                        + util::normal_log_pdf(sample.w2[i], model.mu2[k2][t], model.sd2[k2][t])
                })
                .collect();
            let lse = util::log_sum_exp(&logs);
            for t in 0..l {
                let r = (logs[t] - lse).exp();
                mass[t] += 2.0 * r;
                wage[t] += r * (sample.w1[i] + sample.w2[i]);
            }
        }
        let pooled: Vec<f64> = (0..l).map(|t| wage[t] / mass[t]).collect();
        for pair in pooled.windows(2) {
            assert!(pair[0] <= pair[1], "pooled wages not ascending: {pooled:?}");
        }
    }

    #[test]
    fn stayer_q_matches_mover_marginal_on_shared_data() {
        let (panel, truth) = small_market(2, 2, 23);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 2, 3, 43, &EmOptions::default()).unwrap();
        // Hand the movers' period-1 rows to the stayer stage verbatim.
        let movers = extract_movers(&panel, &classing);
        let artificial = StayerSample {
            w1: movers.w1.clone(),
            w2: movers.w2.clone(),
            class: movers.origin.clone(),
            row_index: movers.row_index.clone(),
            skipped_unclassed: 0,
        };
        let full = fit_stayers_on_sample(&artificial, &model).unwrap();
        for k in 0..2 {
            let marginal = mover_origin_marginal(&model, k);
            for l in 0..2 {
                assert!(
                    (full.q[k][l] - marginal[l]).abs() < 0.02,
                    "q[{k}][{l}] = {} vs marginal {}",
                    full.q[k][l],
                    marginal[l]
                );
            }
        }
    }

    #[test]
    fn map_accuracy_beats_ninety_percent_at_three_sigma() {
        // Type separation exactly 3 sigma: steps of 0.15 with sd 0.05.
        let spec = MarketBuilder::new(2, 3)
            .seed(29)
            .firms_per_class(12)
            .firm_size_law(3.4, 0.3)
            .mover_share(0.5)
            .sigma(0.05)
            .additive_wages(1.0, 1.0, 0.15, 0.0)
            .build();
        let (panel, truth) = synth::generate_market(&spec).unwrap();
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 3, 3, 47, &EmOptions::default()).unwrap();
        let full = fit_stayers(&panel, &classing, &model).unwrap();
        let assign = map_assign(&panel, &classing, &full).unwrap();
        let acc = align::aligned_accuracy(&assign.types, &truth.worker_types, &[0, 1, 2]);
        assert!(acc >= 0.9, "accuracy {acc}");
        for post in &assign.posteriors {
            assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mover_to_unclassed_destination_falls_back() {
        use crate::panel::testkit::pair_panel;
        use crate::panel::Gender;
        let mut rows = vec![
            (1u64, 1u64, 1u64, 1.0, 1.0, Gender::F),
            (2, 1, 1, 1.1, 1.1, Gender::M),
            (3, 2, 2, 2.0, 2.0, Gender::F),
            (4, 2, 2, 2.1, 2.1, Gender::M),
            (5, 1, 2, 1.0, 2.0, Gender::F),
            (6, 2, 1, 2.0, 1.0, Gender::M),
        ];
        rows.push((7, 1, 9, 1.0, 1.05, Gender::F)); // firm 9 never classed
        let panel = pair_panel(&rows);
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
        let sample = extract_movers(&panel, &classing);
        assert_eq!(sample.len(), 2);
        assert_eq!(sample.skipped_unclassed, 1);
        let model = fit_movers(&panel, &classing, 1, 1, 3, &EmOptions::default()).unwrap();
        let full = fit_stayers(&panel, &classing, &model).unwrap();
        let assign = map_assign(&panel, &classing, &full).unwrap();
        assert_eq!(assign.unclassed_destination, 1);
        assert_eq!(assign.types.len(), panel.rows.len());
    }

    #[test]
    fn sparse_cells_are_flagged_not_dropped() {
        let (panel, truth) = small_market(2, 2, 37);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 2, 1, 3, &EmOptions::default()).unwrap();
        for &(k1, k2) in &model.diagnostics.sparse_cells {
            let n = model.diagnostics.mover_cell_counts[k1][k2];
            assert!(n > 0 && n < 10);
            // Still a simplex: pooled into the likelihood, not deleted.
            let s: f64 = model.p[k1][k2].iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (panel, truth) = small_market(2, 2, 41);
        let classing = truth_classing(&truth);
        assert!(matches!(
            fit_movers(&panel, &classing, 2, 0, 1, &EmOptions::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            fit_movers(&panel, &classing, 0, 5, 1, &EmOptions::default()),
            Err(Error::Config(_))
        ));
        let empty = MoverSample::default();
        assert!(matches!(
            fit_movers_on_sample(&empty, 2, 2, 1, 1, &EmOptions::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn all_restarts_aborting_is_numerical_error() {
        let sample = MoverSample {
            w1: vec![f64::NAN, 1.0],
            w2: vec![1.0, 1.0],
            origin: vec![0, 0],
            dest: vec![0, 0],
            row_index: vec![0, 1],
            skipped_unclassed: 0,
        };
        assert!(matches!(
            fit_movers_on_sample(&sample, 1, 1, 2, 1, &EmOptions::default()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn model_simplex_invariants_hold_after_fit() {
        let (panel, truth) = small_market(2, 2, 43);
        let classing = truth_classing(&truth);
        let model = fit_movers(&panel, &classing, 2, 2, 7, &EmOptions::default()).unwrap();
        let full = fit_stayers(&panel, &classing, &model).unwrap();
        for k1 in 0..2 {
            for k2 in 0..2 {
                if full.diagnostics.mover_cell_counts[k1][k2] > 0 {
                    let s: f64 = full.p[k1][k2].iter().sum();
                    assert!((s - 1.0).abs() < 1e-10, "p[{k1}][{k2}] sums to {s}");
                }
            }
            let s: f64 = full.q[k1].iter().sum();
            assert!((s - 1.0).abs() < 1e-10, "q[{k1}] sums to {s}");
            for l in 0..2 {
                assert!(full.sd1[k1][l] >= 1e-3 && full.sd2[k1][l] >= 1e-3);
            }
        }
    }
}
