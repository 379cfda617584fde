//! Synthetic labor market generator with known two-sided heterogeneity.
//!
//! Workers carry a latent type, firms a latent class; log wages are Gaussian
//! within each (class, type, period) cell with an additive gender offset.
//! Mobility is exogenous: a worker moves with a fixed probability and the
//! destination class depends only on the worker's type and origin class.
//! The generator returns both the balanced panel and the realized ground
//! truth, which recovery tests compare against.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{
    BiennialPanel, Education, FirmId, Gender, Observation, PairFilterReport, Sector, WorkerPair,
};
use crate::util;

/// Per-gender container used throughout the generator and decompositions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderPair<T> {
    pub female: T,
    pub male: T,
}

impl<T> GenderPair<T> {
    pub fn get(&self, g: Gender) -> &T {
        match g {
            Gender::F => &self.female,
            Gender::M => &self.male,
        }
    }

    pub fn get_mut(&mut self, g: Gender) -> &mut T {
        match g {
            Gender::F => &mut self.female,
            Gender::M => &mut self.male,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GenderPair<U> {
        GenderPair {
            female: f(&self.female),
            male: f(&self.male),
        }
    }
}

/// Full parameterization of a synthetic market.
///
/// Dimensions: `class_count` = K firm classes, `type_count` = L worker
/// types. Indexing is zero-based everywhere; serialized artifacts label
/// classes and types 1..=K and 1..=L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub class_count: usize,
    pub type_count: usize,
    /// Firms in each class; sizes drawn per firm from the log-normal law.
    pub firms_per_class: Vec<usize>,
    /// Log-normal location of firm size draws.
    pub firm_size_log_mean: f64,
    /// Log-normal scale of firm size draws.
    pub firm_size_log_sd: f64,
    /// Probability a worker is female.
    pub female_share: f64,
    /// P(type = l) per gender; simplex over L.
    pub type_marginals: GenderPair<Vec<f64>>,
    /// P(class = k | type = l) per gender; row simplexes over K.
    pub class_attachment: GenderPair<Vec<Vec<f64>>>,
    /// Probability a worker changes employer between the two years.
    pub mover_share: f64,
    /// P(destination class = k' | type = l, origin class = k); rows over K.
    pub transition_kernel: Vec<Vec<Vec<f64>>>,
    /// Mean log wage per [class][type][period].
    pub mu: Vec<Vec<[f64; 2]>>,
    /// Within-cell standard deviation per [class][type][period].
    pub sigma: Vec<Vec<[f64; 2]>>,
    /// Additive mean shift applied to each gender's wages.
    pub gender_wage_offsets: GenderPair<f64>,
    /// Panel years; must be (t, t+2).
    pub years: (i32, i32),
    pub seed: u64,
}

/// Smallest admissible within-cell standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

const SIMPLEX_TOL: f64 = 1e-9;

/// Realized latent structure behind a generated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: MarketSpec,
    /// True type per panel row, aligned with `BiennialPanel::rows`.
    pub worker_types: Vec<usize>,
    /// True class per firm.
    pub firm_classes: BTreeMap<FirmId, usize>,
}

impl MarketSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: MarketSpec =
            toml::from_str(text).map_err(|e| Error::config(format!("market spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let (k, l) = (self.class_count, self.type_count);
        if k == 0 || l == 0 {
            return Err(Error::config("class_count and type_count must be positive"));
        }
        if self.firms_per_class.len() != k {
            return Err(Error::config(format!(
                "firms_per_class has {} entries, expected {k}",
                self.firms_per_class.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.female_share) {
            return Err(Error::config("female_share must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mover_share) {
            return Err(Error::config("mover_share must lie in [0, 1]"));
        }
        if self.years.1 != self.years.0 + 2 {
            return Err(Error::config("years must be of the form (t, t+2)"));
        }
        if !(self.firm_size_log_sd >= 0.0 && self.firm_size_log_mean.is_finite()) {
            return Err(Error::config("firm size law parameters must be finite, sd >= 0"));
        }

        for (g, marg) in [("female", &self.type_marginals.female), ("male", &self.type_marginals.male)] {
            check_simplex(marg, l, &format!("type_marginals.{g}"))?;
        }
        for (g, attach) in [
            ("female", &self.class_attachment.female),
            ("male", &self.class_attachment.male),
        ] {
            if attach.len() != l {
                return Err(Error::config(format!("class_attachment.{g} needs {l} rows")));
            }
            for (li, row) in attach.iter().enumerate() {
                check_simplex(row, k, &format!("class_attachment.{g}[{li}]"))?;
            }
        }
        if self.transition_kernel.len() != l {
            return Err(Error::config(format!("transition_kernel needs {l} type slices")));
        }
        for (li, slice) in self.transition_kernel.iter().enumerate() {
            if slice.len() != k {
                return Err(Error::config(format!(
                    "transition_kernel[{li}] needs {k} origin rows"
                )));
            }
            for (ki, row) in slice.iter().enumerate() {
                check_simplex(row, k, &format!("transition_kernel[{li}][{ki}]"))?;
            }
        }
        for (name, grid) in [("mu", &self.mu), ("sigma", &self.sigma)] {
            if grid.len() != k || grid.iter().any(|row| row.len() != l) {
                return Err(Error::config(format!("{name} must be a {k} x {l} x 2 grid")));
            }
        }
        for row in &self.sigma {
            for cell in row {
                for &s in cell {
                    if !(s >= SIGMA_FLOOR) {
                        return Err(Error::config(format!(
                            "sigma entries must be >= {SIGMA_FLOOR}, found {s}"
                        )));
                    }
                }
            }
        }
        for row in &self.mu {
            for cell in row {
                if cell.iter().any(|m| !m.is_finite()) {
                    return Err(Error::config("mu entries must be finite"));
                }
            }
        }

        // A class that workers can reach must contain a firm; lateral moves
        // within a class need a second firm to move to.
        for ki in 0..k {
            let reachable = Gender::BOTH.iter().any(|&g| {
                self.class_attachment
                    .get(g)
                    .iter()
                    .zip(self.type_marginals.get(g))
                    .any(|(row, &ml)| ml > 0.0 && row[ki] > 0.0)
            });
            if reachable && self.firms_per_class[ki] == 0 {
                return Err(Error::config(format!(
                    "class {} has positive attachment mass but zero firms",
                    ki + 1
                )));
            }
            let lateral = self
                .transition_kernel
                .iter()
                .any(|slice| slice[ki][ki] > 0.0);
            if self.mover_share > 0.0 && lateral && self.firms_per_class[ki] < 2 {
                return Err(Error::config(format!(
                    "class {} allows lateral moves but has fewer than two firms",
                    ki + 1
                )));
            }
        }
        Ok(())
    }

    /// Expected type shares per mover cell (origin, destination):
    /// P(l | mover, k -> k') marginalized over gender. Recovery tests use
    /// this as the population reference for the mixture's `p`.
    pub fn mover_cell_type_shares(&self) -> Vec<Vec<Vec<f64>>> {
        let (k, l) = (self.class_count, self.type_count);
        let mut cells = vec![vec![vec![0.0; l]; k]; k];
        for (g, share) in [
            (Gender::F, self.female_share),
            (Gender::M, 1.0 - self.female_share),
        ] {
            let marg = self.type_marginals.get(g);
            let attach = self.class_attachment.get(g);
            for li in 0..l {
                for ki in 0..k {
                    let mass = share * marg[li] * attach[li][ki];
                    for (kj, w) in self.transition_kernel[li][ki].iter().enumerate() {
                        cells[ki][kj][li] += mass * w;
                    }
                }
            }
        }
        for row in cells.iter_mut().flatten() {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for v in row {
                    *v /= total;
                }
            }
        }
        cells
    }

    /// Expected type shares among stayers of each class, P(l | stayer, k).
    pub fn stayer_class_type_shares(&self) -> Vec<Vec<f64>> {
        let (k, l) = (self.class_count, self.type_count);
        let mut rows = vec![vec![0.0; l]; k];
        for (g, share) in [
            (Gender::F, self.female_share),
            (Gender::M, 1.0 - self.female_share),
        ] {
            let marg = self.type_marginals.get(g);
            let attach = self.class_attachment.get(g);
            for li in 0..l {
                for ki in 0..k {
                    rows[ki][li] += share * marg[li] * attach[li][ki];
                }
            }
        }
        for row in &mut rows {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for v in row {
                    *v /= total;
                }
            }
        }
        rows
    }
}

fn check_simplex(row: &[f64], len: usize, name: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::config(format!("{name} needs {len} entries, found {}", row.len())));
    }
    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::config(format!("{name} entries must lie in [0, 1]")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::config(format!("{name} sums to {total}, expected 1")));
    }
    Ok(())
}

// Substream labels; fixed so regenerating any part is order-independent.
const STREAM_FIRM_SIZES: u64 = 1;
const STREAM_WORKER: u64 = 2;

struct FirmTable {
    /// Class of each firm, indexed by firm id - 1.
    class_of: Vec<usize>,
    /// Per class: (firm ids, cumulative size weights) for weighted draws.
    by_class: Vec<(Vec<FirmId>, Vec<f64>)>,
    total_weight: f64,
}

/// Draw a firm from a class proportionally to its size weight, excluding
/// `exclude` (0 = none). Walks the cumulative weight table by binary search.
fn draw_firm(table: &FirmTable, class: usize, exclude: FirmId, rng: &mut impl Rng) -> FirmId {
    let (ids, cum) = &table.by_class[class];
    debug_assert!(!ids.is_empty());
    loop {
        let u: f64 = rng.gen::<f64>() * cum[cum.len() - 1];
        let idx = match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
        .min(ids.len() - 1);
        let firm = ids[idx];
        if firm != exclude {
            return firm;
        }
        // Single-firm classes never reach here with exclude set: validation
        // guarantees a second firm wherever a lateral move is possible.
    }
}

/// Generate a balanced biennial panel with known ground truth.
///
/// Firm size draws set sampling weights: each worker picks a firm within
/// the attached class with probability proportional to the firm's drawn
/// size, so realized workforces follow the size law at the configured
/// scale while type marginals, class attachment and the transition kernel
/// hold exactly in expectation. Movers always change firm id.
pub fn generate_market(spec: &MarketSpec) -> Result<(BiennialPanel, GroundTruth)> {
    spec.validate()?;
    let (k_count, l_count) = (spec.class_count, spec.type_count);

    // Firm universe: ids are class-major and 1-based.
    let size_law = LogNormal::new(spec.firm_size_log_mean, spec.firm_size_log_sd)
        .map_err(|e| Error::config(format!("firm size law: {e}")))?;
    let mut class_of = Vec::new();
    let mut by_class = Vec::with_capacity(k_count);
    let mut total_weight = 0.0;
    let mut next_id: FirmId = 1;
    for (k, &firms) in spec.firms_per_class.iter().enumerate() {
        let mut ids = Vec::with_capacity(firms);
        let mut cum = Vec::with_capacity(firms);
        let mut running = 0.0;
        for _ in 0..firms {
            let mut rng = util::substream2(spec.seed, STREAM_FIRM_SIZES, next_id);
            let size = size_law.sample(&mut rng).ceil().max(2.0);
            ids.push(next_id);
            running += size;
            cum.push(running);
            class_of.push(k);
            total_weight += size;
            next_id += 1;
        }
        by_class.push((ids, cum));
    }
    let table = FirmTable {
        class_of,
        by_class,
        total_weight,
    };
    let n_workers = table.total_weight.round() as usize;
    if n_workers == 0 {
        return Err(Error::config("market has no workers: all classes empty"));
    }

    // Joint (gender, type) draw tables per gender.
    let type_dists = spec.type_marginals.map(|m| {
        WeightedIndex::new(m.iter().map(|&p| p.max(0.0))).ok()
    });
    let attach_dists = spec.class_attachment.map(|rows| {
        rows.iter()
            .map(|row| WeightedIndex::new(row.iter().map(|&p| p.max(0.0))).ok())
            .collect::<Vec<_>>()
    });
    let kernel_dists: Vec<Vec<Option<WeightedIndex<f64>>>> = spec
        .transition_kernel
        .iter()
        .map(|slice| {
            slice
                .iter()
                .map(|row| WeightedIndex::new(row.iter().map(|&p| p.max(0.0))).ok())
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(n_workers);
    let mut worker_types = Vec::with_capacity(n_workers);
    for worker in 1..=n_workers as u64 {
        let mut rng = util::substream2(spec.seed, STREAM_WORKER, worker);
        let gender = if rng.gen::<f64>() < spec.female_share {
            Gender::F
        } else {
            Gender::M
        };
        let l = match type_dists.get(gender) {
            Some(d) => d.sample(&mut rng),
            None => 0,
        };
        let k1 = match &attach_dists.get(gender)[l] {
            Some(d) => d.sample(&mut rng),
            None => 0,
        };
        let firm1 = draw_firm(&table, k1, 0, &mut rng);
        let is_mover = rng.gen::<f64>() < spec.mover_share;
        let (k2, firm2) = if is_mover {
            let k2 = match &kernel_dists[l][k1] {
                Some(d) => d.sample(&mut rng),
                None => k1,
            };
            (k2, draw_firm(&table, k2, firm1, &mut rng))
        } else {
            (k1, firm1)
        };

        let offset = *spec.gender_wage_offsets.get(gender);
        let draw_wage = |rng: &mut rand_chacha::ChaCha8Rng, k: usize, period: usize| {
            let mu = spec.mu[k][l][period] + offset;
            let sd = spec.sigma[k][l][period];
            Normal::new(mu, sd).unwrap().sample(rng)
        };
        let w1 = draw_wage(&mut rng, k1, 0);
        let w2 = draw_wage(&mut rng, k2, 1);

        // Demographics: correlated with type/class so covariate
        // decompositions have signal, irrelevant to the wage draw itself.
        let u = if l_count > 1 {
            l as f64 / (l_count - 1) as f64
        } else {
            0.5
        };
        let age: u32 = rng.gen_range(19..=61);
        let education = {
            let w = [(0.55 - 0.35 * u).max(0.05), 0.35, (0.10 + 0.35 * u).max(0.05)];
            let d = WeightedIndex::new(w).unwrap();
            Education::ALL[d.sample(&mut rng)]
        };
        let occupation = {
            let center = 1.0 + 4.0 * u;
            let w: Vec<f64> = (1..=5).map(|c| (-((c as f64 - center).abs())).exp()).collect();
            1 + WeightedIndex::new(w).unwrap().sample(&mut rng) as u32
        };
        let sector = {
            let pos = if k_count > 1 {
                4.0 * k1 as f64 / (k_count - 1) as f64
            } else {
                2.0
            };
            let w: Vec<f64> = (0..5).map(|s| (-((s as f64 - pos).abs())).exp()).collect();
            Sector::ALL[WeightedIndex::new(w).unwrap().sample(&mut rng)]
        };
        let tenure1 = rng.gen_range(0.0..12.0);
        let tenure2 = if is_mover { rng.gen_range(0.0..2.0) } else { tenure1 + 2.0 };

        let base = Observation {
            worker_id: worker,
            firm_id: firm1,
            year: spec.years.0,
            log_wage: w1,
            hours: 40.0,
            gender,
            age,
            education,
            occupation,
            sector,
            tenure: tenure1,
            contract_span: 365,
        };
        let mut second = base.clone();
        second.firm_id = firm2;
        second.year = spec.years.1;
        second.log_wage = w2;
        second.age = age + 2;
        second.tenure = tenure2;

        rows.push(WorkerPair {
            first: base,
            second,
        });
        worker_types.push(l);
    }

    let firm_classes: BTreeMap<FirmId, usize> = table
        .class_of
        .iter()
        .enumerate()
        .map(|(i, &k)| (i as u64 + 1, k))
        .collect();

    let panel = BiennialPanel {
        years: spec.years,
        empty_warning: rows.is_empty(),
        rows,
        filter: PairFilterReport::default(),
    };
    let truth = GroundTruth {
        spec: spec.clone(),
        worker_types,
        firm_classes,
    };
    Ok((panel, truth))
}

/// Realized type shares per mover cell from ground truth, indexed
/// [origin][destination][type]; rows of unobserved cells are all zero.
pub fn realized_mover_shares(
    panel: &BiennialPanel,
    truth: &GroundTruth,
) -> Vec<Vec<Vec<f64>>> {
    let k = truth.spec.class_count;
    let l = truth.spec.type_count;
    let mut counts = vec![vec![vec![0.0; l]; k]; k];
    for (row, &wt) in panel.rows.iter().zip(&truth.worker_types) {
        if row.is_mover() {
            let k1 = truth.firm_classes[&row.first.firm_id];
            let k2 = truth.firm_classes[&row.second.firm_id];
            counts[k1][k2][wt] += 1.0;
        }
    }
    for row in counts.iter_mut().flatten() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row {
                *v /= total;
            }
        }
    }
    counts
}

/// Realized type shares among stayers per class, indexed [class][type].
pub fn realized_stayer_shares(panel: &BiennialPanel, truth: &GroundTruth) -> Vec<Vec<f64>> {
    let k = truth.spec.class_count;
    let l = truth.spec.type_count;
    let mut counts = vec![vec![0.0; l]; k];
    for (row, &wt) in panel.rows.iter().zip(&truth.worker_types) {
        if !row.is_mover() {
            counts[truth.firm_classes[&row.first.firm_id]][wt] += 1.0;
        }
    }
    for row in &mut counts {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row {
                *v /= total;
            }
        }
    }
    counts
}

/// Compact builder for test markets: additive or interacted wage grids over
/// K classes and L types with uniform attachment defaults.
pub struct MarketBuilder {
    spec: MarketSpec,
}

impl MarketBuilder {
    pub fn new(class_count: usize, type_count: usize) -> Self {
        let uniform_l = vec![1.0 / type_count as f64; type_count];
        let uniform_k = vec![vec![1.0 / class_count as f64; class_count]; type_count];
        let kernel = vec![vec![vec![1.0 / class_count as f64; class_count]; class_count]; type_count];
        let mu = (0..class_count)
            .map(|k| {
                (0..type_count)
                    .map(|l| {
                        let base = 1.0 + k as f64 + 0.3 * l as f64;
                        [base, base + 0.05]
                    })
                    .collect()
            })
            .collect();
        let sigma = vec![vec![[0.05, 0.05]; type_count]; class_count];
        MarketBuilder {
            spec: MarketSpec {
                class_count,
                type_count,
                firms_per_class: vec![20; class_count],
                firm_size_log_mean: 3.0,
                firm_size_log_sd: 0.4,
                female_share: 0.5,
                type_marginals: GenderPair {
                    female: uniform_l.clone(),
                    male: uniform_l,
                },
                class_attachment: GenderPair {
                    female: uniform_k.clone(),
                    male: uniform_k,
                },
                mover_share: 0.5,
                transition_kernel: kernel,
                mu,
                sigma,
                gender_wage_offsets: GenderPair {
                    female: 0.0,
                    male: 0.0,
                },
                years: (2010, 2012),
                seed: 1,
            },
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.spec.seed = seed;
        self
    }

    pub fn firms_per_class(mut self, firms: usize) -> Self {
        self.spec.firms_per_class = vec![firms; self.spec.class_count];
        self
    }

    pub fn firm_size_law(mut self, log_mean: f64, log_sd: f64) -> Self {
        self.spec.firm_size_log_mean = log_mean;
        self.spec.firm_size_log_sd = log_sd;
        self
    }

    pub fn mover_share(mut self, share: f64) -> Self {
        self.spec.mover_share = share;
        self
    }

    pub fn sigma(mut self, sd: f64) -> Self {
        self.spec.sigma = vec![vec![[sd, sd]; self.spec.type_count]; self.spec.class_count];
        self
    }

    /// Additive wage grid mu[k][l] = class_step * k + type_step * l + base,
    /// identical across periods except for `period_shift`.
    pub fn additive_wages(mut self, base: f64, class_step: f64, type_step: f64, period_shift: f64) -> Self {
        self.spec.mu = (0..self.spec.class_count)
            .map(|k| {
                (0..self.spec.type_count)
                    .map(|l| {
                        let m = base + class_step * k as f64 + type_step * l as f64;
                        [m, m + period_shift]
                    })
                    .collect()
            })
            .collect();
        self
    }

    /// Add an interaction bump to one (class, type) cell in both periods.
    pub fn interaction(mut self, class: usize, ty: usize, bump: f64) -> Self {
        self.spec.mu[class][ty][0] += bump;
        self.spec.mu[class][ty][1] += bump;
        self
    }

    pub fn gender_offsets(mut self, female: f64, male: f64) -> Self {
        self.spec.gender_wage_offsets = GenderPair { female, male };
        self
    }

    /// Sorted attachment: higher types concentrate in higher classes, with
    /// optional extra tilt for men (creating a sorting gap).
    pub fn sorted_attachment(mut self, concentration: f64, male_tilt: f64) -> Self {
        let (k_count, l_count) = (self.spec.class_count, self.spec.type_count);
        let build = |tilt: f64| -> Vec<Vec<f64>> {
            (0..l_count)
                .map(|l| {
                    let anchor = if l_count > 1 {
                        (k_count - 1) as f64 * l as f64 / (l_count - 1) as f64
                    } else {
                        (k_count - 1) as f64 / 2.0
                    } + tilt;
                    let mut row: Vec<f64> = (0..k_count)
                        .map(|k| (-concentration * (k as f64 - anchor).abs()).exp())
                        .collect();
                    let total: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= total);
                    row
                })
                .collect()
        };
        self.spec.class_attachment = GenderPair {
            female: build(0.0),
            male: build(male_tilt),
        };
        self
    }

    /// Type-dependent transition kernel: type l drifts toward classes near
    /// its anchor, keeping every destination reachable.
    pub fn drifting_kernel(mut self, pull: f64) -> Self {
        let (k_count, l_count) = (self.spec.class_count, self.spec.type_count);
        self.spec.transition_kernel = (0..l_count)
            .map(|l| {
                let anchor = if l_count > 1 {
                    (k_count - 1) as f64 * l as f64 / (l_count - 1) as f64
                } else {
                    (k_count - 1) as f64 / 2.0
                };
                (0..k_count)
                    .map(|k| {
                        let mut row: Vec<f64> = (0..k_count)
                            .map(|kp| {
                                let target = 0.5 * (k as f64 + anchor);
                                0.05 + (-pull * (kp as f64 - target).abs()).exp()
                            })
                            .collect();
                        let total: f64 = row.iter().sum();
                        row.iter_mut().for_each(|v| *v /= total);
                        row
                    })
                    .collect()
            })
            .collect();
        self
    }

    pub fn build(self) -> MarketSpec {
        self.spec
    }
}
