//! Firm classing: size-weighted k-means on firm wage eCDFs evaluated at the
//! pooled ventiles, plus the gap statistic for choosing the class count.
//!
//! Each firm is represented by its empirical wage CDF sampled at the 19
//! ventile cut points of the pooled period-1 wage distribution. Classing
//! minimizes sum_j n_j * ||ecdf_j - centroid_{k(j)}||^2 over assignments,
//! the weighted Lloyd objective, with k-means++ seeding and independent
//! restarts. Class labels are ordered by class mean wage, ascending.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{BiennialPanel, FirmId};
use crate::util;

/// Number of interior ventile cuts.
pub const GRID_POINTS: usize = 19;

/// One firm's eCDF evaluated on the shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmEcdf {
    pub firm_id: FirmId,
    /// F_j(cut) for each grid cut, non-decreasing in the cut.
    pub values: Vec<f64>,
    /// Period-1 workforce size, the k-means weight.
    pub weight: f64,
    /// Mean period-1 log wage of the firm's workers.
    pub mean_wage: f64,
}

/// Shared evaluation grid and per-firm eCDF vectors, sorted by firm id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfGrid {
    /// Pooled ventile cut points, ascending.
    pub cuts: Vec<f64>,
    pub firms: Vec<FirmEcdf>,
    /// Firms present only in period 2; they carry no eCDF and no class.
    pub skipped_no_period1: Vec<FirmId>,
}

/// Evaluate every firm's period-1 wage eCDF at the pooled ventiles.
pub fn compute_ecdfs(panel: &BiennialPanel) -> Result<EcdfGrid> {
    if panel.rows.is_empty() {
        return Err(Error::data("cannot build eCDFs from an empty panel"));
    }
    let mut pooled: Vec<f64> = panel.rows.iter().map(|r| r.first.log_wage).collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cuts: Vec<f64> = (1..=GRID_POINTS)
        .map(|i| util::quantile_sorted(&pooled, i as f64 / 20.0))
        .collect();

    let mut by_firm: BTreeMap<FirmId, Vec<f64>> = BTreeMap::new();
    for row in &panel.rows {
        by_firm.entry(row.first.firm_id).or_default().push(row.first.log_wage);
    }
    let firms: Vec<FirmEcdf> = by_firm
        .into_iter()
        .map(|(firm_id, mut wages)| {
            wages.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = wages.len() as f64;
            // Two-pointer sweep: wages and cuts are both ascending.
            let mut values = Vec::with_capacity(GRID_POINTS);
            let mut idx = 0usize;
            for &cut in &cuts {
                while idx < wages.len() && wages[idx] <= cut {
                    idx += 1;
                }
                values.push(idx as f64 / n);
            }
            FirmEcdf {
                firm_id,
                values,
                weight: n,
                mean_wage: util::mean(&wages),
            }
        })
        .collect();

    let firm_set: std::collections::BTreeSet<FirmId> = firms.iter().map(|f| f.firm_id).collect();
    let skipped: Vec<FirmId> = panel
        .rows
        .iter()
        .map(|r| r.second.firm_id)
        .filter(|f| !firm_set.contains(f))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    Ok(EcdfGrid {
        cuts,
        firms,
        skipped_no_period1: skipped,
    })
}

/// Result of classing the firms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmClassing {
    pub class_count: usize,
    /// firm id -> zero-based class index; labels ascend in class mean wage.
    pub assignment: BTreeMap<FirmId, usize>,
    /// Class centroids on the grid, row per class.
    pub centroids: Vec<Vec<f64>>,
    /// Weighted within-class objective at the optimum found.
    pub objective: f64,
    /// Worker-weighted mean log wage per class, ascending by construction.
    pub class_mean_wage: Vec<f64>,
    /// Objective after each assignment step of the winning restart.
    pub objective_trace: Vec<f64>,
    /// Index of the winning restart (ties to the lower index).
    pub chosen_restart: usize,
    /// The shared ventile grid, carried for downstream artifacts.
    pub cuts: Vec<f64>,
}

impl FirmClassing {
    pub fn class_of(&self, firm: FirmId) -> Option<usize> {
        self.assignment.get(&firm).copied()
    }

    /// Class sizes in firms.
    pub fn class_firm_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &k in self.assignment.values() {
            counts[k] += 1;
        }
        counts
    }
}

struct KmeansData {
    /// Row-major points, `dim` values per firm.
    data: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
    n: usize,
}

impl KmeansData {
    fn from_grid(grid: &EcdfGrid) -> Self {
        let dim = grid.cuts.len();
        let mut data = Vec::with_capacity(grid.firms.len() * dim);
        let mut weights = Vec::with_capacity(grid.firms.len());
        for firm in &grid.firms {
            data.extend_from_slice(&firm.values);
            weights.push(firm.weight);
        }
        KmeansData {
            n: grid.firms.len(),
            data,
            weights,
            dim,
        }
    }

    #[inline]
    fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

struct RestartResult {
    assignment: Vec<usize>,
    centroids: Vec<f64>,
    objective: f64,
    trace: Vec<f64>,
}

/// Weighted k-means++ seeding: the first centroid is drawn with probability
/// proportional to weight, later ones proportional to weight times squared
/// distance to the nearest chosen centroid. When every remaining candidate
/// has zero mass (duplicate points), the lowest-index unchosen firm is
/// taken, so seeding always returns k centroids.
fn seed_centroids(data: &KmeansData, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; data.n];

    let draw = |w: &[f64], rng: &mut dyn rand::RngCore| -> Option<usize> {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut u = rng.gen::<f64>() * total;
        for (i, &x) in w.iter().enumerate() {
            u -= x;
            if u <= 0.0 {
                return Some(i);
            }
        }
        Some(w.len() - 1)
    };

    for round in 0..k {
        let mass: Vec<f64> = if round == 0 {
            data.weights.clone()
        } else {
            (0..data.n)
                .map(|i| {
                    if chosen.contains(&i) {
                        0.0
                    } else {
                        data.weights[i] * nearest[i]
                    }
                })
                .collect()
        };
        let pick = draw(&mass, rng)
            .or_else(|| (0..data.n).find(|i| !chosen.contains(i)))
            .expect("seeding requires k <= n");
        chosen.push(pick);
        let p = data.point(pick).to_vec();
        for i in 0..data.n {
            let d = sq_dist(data.point(i), &p);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }

    let mut centroids = Vec::with_capacity(k * data.dim);
    for &i in &chosen {
        centroids.extend_from_slice(data.point(i));
    }
    centroids
}

const MAX_LLOYD_ITERS: usize = 500;

fn run_restart(data: &KmeansData, k: usize, rng: &mut impl Rng) -> RestartResult {
    let dim = data.dim;
    let mut centroids = seed_centroids(data, k, rng);
    let mut assignment = vec![usize::MAX; data.n];
    let mut trace = Vec::new();
    let mut objective = f64::INFINITY;

    for _ in 0..MAX_LLOYD_ITERS {
        // Assignment step; the weight scales the objective, not the argmin.
        let mut changed = false;
        let mut obj = util::Accumulator::new();
        for i in 0..data.n {
            let p = data.point(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
            obj.add(data.weights[i] * best_d);
        }
        let mut obj = obj.value();

        // Empty-cluster repair: hand the firm with the largest weighted
        // distance contribution to each empty cluster. Its contribution
        // drops to zero, so the objective strictly decreases.
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..data.n)
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| {
                    let da = data.weights[a] * sq_dist(data.point(a), &centroids[assignment[a] * dim..(assignment[a] + 1) * dim]);
                    let db = data.weights[b] * sq_dist(data.point(b), &centroids[assignment[b] * dim..(assignment[b] + 1) * dim]);
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                });
            if let Some(i) = donor {
                obj -= data.weights[i]
                    * sq_dist(data.point(i), &centroids[assignment[i] * dim..(assignment[i] + 1) * dim]);
                counts[assignment[i]] -= 1;
                assignment[i] = c;
                counts[c] = 1;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(data.point(i));
                changed = true;
            }
        }

        debug_assert!(
            trace.last().map_or(true, |&prev| obj <= prev + 1e-9),
            "Lloyd objective increased: {:?} -> {obj}",
            trace.last()
        );
        trace.push(obj);
        let converged = !changed && (objective - obj).abs() <= f64::EPSILON * obj.abs();
        objective = obj;
        if converged {
            break;
        }

        // Update step: weighted centroid of each cluster.
        let mut sums = vec![0.0; k * dim];
        let mut mass = vec![0.0; k];
        for i in 0..data.n {
            let c = assignment[i];
            let w = data.weights[i];
            mass[c] += w;
            let p = data.point(i);
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += w * x;
            }
        }
        for c in 0..k {
            if mass[c] > 0.0 {
                for s in &mut sums[c * dim..(c + 1) * dim] {
                    *s /= mass[c];
                }
            } else {
                sums[c * dim..(c + 1) * dim].copy_from_slice(&centroids[c * dim..(c + 1) * dim]);
            }
        }
        centroids = sums;
    }

    RestartResult {
        assignment,
        centroids,
        objective,
        trace,
    }
}

const STREAM_KMEANS: u64 = 0x6b6d;

fn best_restart(
    data: &KmeansData,
    k: usize,
    restarts: usize,
    seed: u64,
    salt: u64,
) -> (usize, RestartResult) {
    let results: Vec<(usize, RestartResult)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = util::substream2(seed, STREAM_KMEANS ^ salt, r as u64);
            (r, run_restart(data, k, &mut rng))
        })
        .collect();
    results
        .into_iter()
        .min_by(|(ia, a), (ib, b)| {
            a.objective
                .partial_cmp(&b.objective)
                .unwrap()
                .then(ia.cmp(ib))
        })
        .expect("at least one restart")
}

/// Class firms by weighted k-means with `restarts` independent starts.
///
/// The returned classing relabels clusters so that class mean wage is
/// ascending in the class index; ties across restarts resolve to the lower
/// restart index.
pub fn kmeans_classes(grid: &EcdfGrid, k: usize, restarts: usize, seed: u64) -> Result<FirmClassing> {
    if k == 0 {
        return Err(Error::config("class count must be positive"));
    }
    if restarts == 0 {
        return Err(Error::config("at least one restart is required"));
    }
    if grid.firms.is_empty() {
        return Err(Error::data("no firms to class"));
    }
    if k > grid.firms.len() {
        return Err(Error::config(format!(
            "class count {k} exceeds the {} firms available",
            grid.firms.len()
        )));
    }

    let data = KmeansData::from_grid(grid);
    let (chosen_restart, best) = best_restart(&data, k, restarts, seed, 0);

    // Order classes by worker-weighted mean wage.
    let mut wage_mass = vec![0.0; k];
    let mut mass = vec![0.0; k];
    for (i, firm) in grid.firms.iter().enumerate() {
        let c = best.assignment[i];
        wage_mass[c] += firm.weight * firm.mean_wage;
        mass[c] += firm.weight;
    }
    let mut order: Vec<usize> = (0..k).collect();
    let mean_wage: Vec<f64> = (0..k)
        .map(|c| if mass[c] > 0.0 { wage_mass[c] / mass[c] } else { f64::INFINITY })
        .collect();
    order.sort_by(|&a, &b| mean_wage[a].partial_cmp(&mean_wage[b]).unwrap().then(a.cmp(&b)));
    let mut relabel = vec![0usize; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }

    let assignment: BTreeMap<FirmId, usize> = grid
        .firms
        .iter()
        .enumerate()
        .map(|(i, f)| (f.firm_id, relabel[best.assignment[i]]))
        .collect();
    let centroids: Vec<Vec<f64>> = order
        .iter()
        .map(|&old| best.centroids[old * data.dim..(old + 1) * data.dim].to_vec())
        .collect();
    let class_mean_wage: Vec<f64> = order.iter().map(|&old| mean_wage[old]).collect();

    Ok(FirmClassing {
        class_count: k,
        assignment,
        centroids,
        objective: best.objective,
        class_mean_wage,
        objective_trace: best.trace,
        chosen_restart,
        cuts: grid.cuts.clone(),
    })
}

/// Weighted k-means objective of an explicit assignment, for diagnostics
/// and tests. Centroids are the weighted means implied by the assignment.
pub fn assignment_objective(grid: &EcdfGrid, assignment: &BTreeMap<FirmId, usize>, k: usize) -> f64 {
    let dim = grid.cuts.len();
    let mut sums = vec![0.0; k * dim];
    let mut mass = vec![0.0; k];
    for firm in &grid.firms {
        let c = assignment[&firm.firm_id];
        mass[c] += firm.weight;
        for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&firm.values) {
            *s += firm.weight * x;
        }
    }
    for c in 0..k {
        if mass[c] > 0.0 {
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s /= mass[c];
            }
        }
    }
    let mut obj = util::Accumulator::new();
    for firm in &grid.firms {
        let c = assignment[&firm.firm_id];
        obj.add(firm.weight * sq_dist(&firm.values, &sums[c * dim..(c + 1) * dim]));
    }
    obj.value()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub k: usize,
    /// Weighted within-class objective on the observed data.
    pub w_k: f64,
    /// Mean over reference draws of log W minus log of the observed W.
    pub gap: f64,
    /// Standard deviation of log W across the reference draws.
    pub s_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStatisticReport {
    pub rows: Vec<GapRow>,
    pub chosen_k: usize,
    pub reference_draws: usize,
}

const STREAM_GAP_REF: u64 = 0x6761;

fn log_floor(w: f64) -> f64 {
    w.max(1e-300).ln()
}

pub(crate) fn gap_rows_from_objectives(
    ks: &[usize],
    w_obs: &[f64],
    w_ref: &[Vec<f64>],
) -> Vec<GapRow> {
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            let logs: Vec<f64> = w_ref[i].iter().map(|&w| log_floor(w)).collect();
            let mean_log = util::mean(&logs);
            let sd = util::population_variance(&logs).sqrt();
            GapRow {
                k,
                w_k: w_obs[i],
                gap: mean_log - log_floor(w_obs[i]),
                s_k: sd,
            }
        })
        .collect()
}

pub(crate) fn choose_k(rows: &[GapRow]) -> usize {
    for pair in rows.windows(2) {
        if pair[0].gap >= pair[1].gap - pair[1].s_k {
            return pair[0].k;
        }
    }
    rows.last().map(|r| r.k).unwrap_or(0)
}

/// Gap statistic over a class-count range.
///
/// For each candidate k, the observed objective W_k is compared against
/// `b` reference datasets drawn uniformly over the observed per-coordinate
/// ranges of the eCDF vectors; reference points keep the observed firm
/// weights. Gap(k) = mean_b log(W_kb) - log(W_k), s_k is the standard
/// deviation of log(W_kb), and the chosen k is the smallest with
/// Gap(k) >= Gap(k+1) - s_{k+1}, defaulting to the top of the range.
pub fn gap_statistic(
    grid: &EcdfGrid,
    k_range: std::ops::RangeInclusive<usize>,
    b: usize,
    restarts: usize,
    seed: u64,
) -> Result<GapStatisticReport> {
    let (kmin, kmax) = (*k_range.start(), *k_range.end());
    if kmin == 0 || kmin > kmax {
        return Err(Error::config(format!("bad class-count range {kmin}..={kmax}")));
    }
    if b == 0 {
        return Err(Error::config("at least one reference draw is required"));
    }
    if kmax > grid.firms.len() {
        return Err(Error::config(format!(
            "class-count range ends at {kmax} but only {} firms exist",
            grid.firms.len()
        )));
    }

    let data = KmeansData::from_grid(grid);
    let dim = data.dim;
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for i in 0..data.n {
        for (d, &x) in data.point(i).iter().enumerate() {
            lo[d] = lo[d].min(x);
            hi[d] = hi[d].max(x);
        }
    }

    let reference = |bi: u64| -> KmeansData {
        let mut rng = util::substream2(seed, STREAM_GAP_REF, bi);
        let mut ref_data = Vec::with_capacity(data.n * dim);
        for _ in 0..data.n {
            for d in 0..dim {
                let span = hi[d] - lo[d];
                ref_data.push(lo[d] + rng.gen::<f64>() * span);
            }
        }
        KmeansData {
            data: ref_data,
            weights: data.weights.clone(),
            dim,
            n: data.n,
        }
    };

    let ks: Vec<usize> = (kmin..=kmax).collect();
    let w_obs: Vec<f64> = ks
        .par_iter()
        .map(|&k| best_restart(&data, k, restarts, seed, (k as u64) << 32).1.objective)
        .collect();
    let w_ref: Vec<Vec<f64>> = ks
        .par_iter()
        .map(|&k| {
            (1..=b as u64)
                .map(|bi| {
                    let ref_data = reference(bi);
                    best_restart(&ref_data, k, restarts, seed, ((k as u64) << 32) | bi)
                        .1
                        .objective
                })
                .collect()
        })
        .collect();

    let rows = gap_rows_from_objectives(&ks, &w_obs, &w_ref);
    let chosen_k = choose_k(&rows);
    Ok(GapStatisticReport {
        rows,
        chosen_k,
        reference_draws: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::testkit::pair_panel;
    use crate::panel::Gender;

    fn two_class_panel() -> BiennialPanel {
        // Firms 1-3 pay around 1.0, firms 4-6 around 3.0; 8 workers each.
        let mut rows = Vec::new();
        let mut w = 1u64;
        for f in 1..=6u64 {
            let base = if f <= 3 { 1.0 } else { 3.0 };
            for i in 0..8 {
                let wage = base + (i as f64 - 3.5) * 0.02;
                rows.push((w, f, f, wage, wage, if i % 2 == 0 { Gender::F } else { Gender::M }));
                w += 1;
            }
        }
        pair_panel(&rows)
    }

    #[test]
    fn single_firm_ecdf_is_order_statistic_ladder() {
        // One firm, 20 distinct wages: F(cut_i) = i/20 at the i-th order stat.
        let rows: Vec<(u64, u64, u64, f64, f64, Gender)> = (0..20)
            .map(|i| (i as u64 + 1, 1, 1, (i + 1) as f64, (i + 1) as f64, Gender::F))
            .collect();
        let panel = pair_panel(&rows);
        let grid = compute_ecdfs(&panel).unwrap();
        assert_eq!(grid.firms.len(), 1);
        for (i, &cut) in grid.cuts.iter().enumerate() {
            assert_eq!(cut, (i + 1) as f64);
            let expected = (i + 1) as f64 / 20.0;
            assert!((grid.firms[0].values[i] - expected).abs() < 1e-12);
        }
    }

    /// Oracle: direct share counting on a 5-firm panel.
    #[test]
    fn ecdf_matches_direct_counting() {
        use rand::Rng;
        let mut rng = crate::util::substream(3, 1);
        let mut rows = Vec::new();
        let mut w = 1u64;
        for f in 1..=5u64 {
            for _ in 0..20 {
                let wage = rng.gen_range(0.5..4.0);
                rows.push((w, f, f, wage, wage, Gender::F));
                w += 1;
            }
        }
        let panel = pair_panel(&rows);
        let grid = compute_ecdfs(&panel).unwrap();
        for firm in &grid.firms {
            let wages: Vec<f64> = panel
                .rows
                .iter()
                .filter(|r| r.first.firm_id == firm.firm_id)
                .map(|r| r.first.log_wage)
                .collect();
            assert_eq!(firm.weight, wages.len() as f64);
            for (d, &cut) in grid.cuts.iter().enumerate() {
                let share = wages.iter().filter(|&&x| x <= cut).count() as f64 / wages.len() as f64;
                assert!((firm.values[d] - share).abs() < 1e-12);
            }
            // Monotone in the cut.
            for pair in firm.values.windows(2) {
                assert!(pair[0] <= pair[1]);
            }
        }
    }

    #[test]
    fn recovers_two_separated_classes_exactly() {
        let panel = two_class_panel();
        let grid = compute_ecdfs(&panel).unwrap();
        let classing = kmeans_classes(&grid, 2, 10, 7).unwrap();
        for f in 1..=6u64 {
            let expected = if f <= 3 { 0 } else { 1 };
            assert_eq!(classing.class_of(f), Some(expected), "firm {f}");
        }
        // Labels ascend in class mean wage.
        assert!(classing.class_mean_wage[0] < classing.class_mean_wage[1]);
        // Objective trace is non-increasing.
        for pair in classing.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn weighted_objective_counts_workers_not_firms() {
        let panel = two_class_panel();
        let grid = compute_ecdfs(&panel).unwrap();
        let classing = kmeans_classes(&grid, 2, 10, 7).unwrap();
        // Independent recomputation of the objective from the assignment.
        let direct = assignment_objective(&grid, &classing.assignment, 2);
        assert!((classing.objective - direct).abs() < 1e-9);
    }

    #[test]
    fn input_order_does_not_change_best_objective() {
        let panel = two_class_panel();
        let mut grid = compute_ecdfs(&panel).unwrap();
        let a = kmeans_classes(&grid, 2, 30, 11).unwrap();
        grid.firms.reverse();
        let b = kmeans_classes(&grid, 2, 30, 11).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-12);
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn k_equal_to_firm_count_reaches_zero_objective() {
        let panel = two_class_panel();
        let grid = compute_ecdfs(&panel).unwrap();
        let classing = kmeans_classes(&grid, 6, 20, 5).unwrap();
        assert!(classing.objective < 1e-18, "objective {}", classing.objective);
    }

    #[test]
    fn k_above_firm_count_is_config_error() {
        let panel = two_class_panel();
        let grid = compute_ecdfs(&panel).unwrap();
        assert!(matches!(
            kmeans_classes(&grid, 7, 5, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_firms_collapse_to_one_effective_cluster() {
        // All firms share one wage: every eCDF is the same step function.
        let rows: Vec<(u64, u64, u64, f64, f64, Gender)> = (0..12)
            .map(|i| (i as u64 + 1, (i % 4) as u64 + 1, (i % 4) as u64 + 1, 2.0, 2.0, Gender::M))
            .collect();
        let panel = pair_panel(&rows);
        let grid = compute_ecdfs(&panel).unwrap();
        let classing = kmeans_classes(&grid, 3, 5, 2).unwrap();
        assert!(classing.objective < 1e-18);
    }

    #[test]
    fn gap_formula_is_zero_on_self_reference() {
        let rows = gap_rows_from_objectives(&[2], &[5.0], &[vec![5.0, 5.0, 5.0]]);
        assert!(rows[0].gap.abs() < 1e-12);
        assert_eq!(rows[0].s_k, 0.0);
    }

    #[test]
    fn chosen_k_rule_picks_first_satisfying_k() {
        let rows = vec![
            GapRow { k: 1, w_k: 0.0, gap: 0.2, s_k: 0.01 },
            GapRow { k: 2, w_k: 0.0, gap: 0.5, s_k: 0.01 },
            GapRow { k: 3, w_k: 0.0, gap: 0.45, s_k: 0.01 },
        ];
        // Gap(1) < Gap(2) - s: not chosen; Gap(2) >= Gap(3) - s: chosen.
        assert_eq!(choose_k(&rows), 2);
        let single = vec![GapRow { k: 4, w_k: 0.0, gap: 0.1, s_k: 0.0 }];
        assert_eq!(choose_k(&single), 4);
    }

    #[test]
    fn gap_statistic_finds_two_classes() {
        let panel = two_class_panel();
        let grid = compute_ecdfs(&panel).unwrap();
        let report = gap_statistic(&grid, 1..=4, 10, 10, 99).unwrap();
        assert_eq!(report.chosen_k, 2, "rows: {:?}", report.rows);
    }

    #[test]
    fn period2_only_firms_are_reported_not_classed() {
        let mut rows = vec![
            (1u64, 1u64, 1u64, 1.0, 1.0, Gender::F),
            (2, 1, 1, 1.1, 1.1, Gender::M),
            (3, 2, 2, 3.0, 3.0, Gender::F),
            (4, 2, 2, 3.1, 3.1, Gender::M),
        ];
        rows.push((5, 1, 9, 1.05, 1.0, Gender::F)); // firm 9 exists only in period 2
        let panel = pair_panel(&rows);
        let grid = compute_ecdfs(&panel).unwrap();
        assert_eq!(grid.skipped_no_period1, vec![9]);
        assert!(grid.firms.iter().all(|f| f.firm_id != 9));
    }
}
