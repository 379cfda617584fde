//! Mobility-graph machinery.
//!
//! Firms are linked by movers: a worker employed at two different firms
//! across the periods puts an undirected edge between them. On top of
//! that sit connected components, the largest dual connected set (firms
//! reachable through movers of both genders), an exact small-instance
//! oracle for limited-mobility bias in two-way fixed-effect variance
//! components, a connectivity-versus-size simulation, and a residual
//! diagnostic for exogenous mobility.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::FirmClassing;
use crate::decompose::FixedEffectsFit;
use crate::error::{Error, Result};
use crate::panel::{BiennialPanel, FirmId, Gender};
use crate::util::{self, Accumulator};

/// Substream salt for connectivity simulation replications.
const STREAM_CONN: u64 = 0x636e;
/// Dense bias oracle refuses designs wider than this.
const BIAS_COLUMN_CAP: usize = 2000;

/// One undirected firm graph: nodes plus mover-count edges.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FirmGraph {
    pub nodes: BTreeSet<FirmId>,
    /// Keys normalized to (low, high); counts are mover counts, always
    /// at least 1.
    pub edges: BTreeMap<(FirmId, FirmId), usize>,
}

impl FirmGraph {
    fn add_node(&mut self, firm: FirmId) {
        self.nodes.insert(firm);
    }

    fn add_edge(&mut self, a: FirmId, b: FirmId) {
        debug_assert_ne!(a, b);
        let key = (a.min(b), a.max(b));
        *self.edges.entry(key).or_insert(0) += 1;
        self.nodes.insert(a);
        self.nodes.insert(b);
    }

    /// The subgraph induced on `keep`: nodes and edges wholly inside it.
    pub fn induced(&self, keep: &BTreeSet<FirmId>) -> FirmGraph {
        FirmGraph {
            nodes: self.nodes.intersection(keep).copied().collect(),
            edges: self
                .edges
                .iter()
                .filter(|((a, b), _)| keep.contains(a) && keep.contains(b))
                .map(|(&k, &v)| (k, v))
                .collect(),
        }
    }
}

/// Mover graph over the whole panel plus the per-gender subgraphs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MobilityGraph {
    pub full: FirmGraph,
    pub female: FirmGraph,
    pub male: FirmGraph,
}

/// Build the mover graph. Every firm employing anyone becomes a node;
/// every worker whose two firms differ becomes an edge. Gender subgraphs
/// keep the firms that employ that gender and the edges its movers make.
pub fn mover_graph(panel: &BiennialPanel) -> MobilityGraph {
    let mut g = MobilityGraph::default();
    for row in &panel.rows {
        let (a, b) = (row.first.firm_id, row.second.firm_id);
        let side = match row.first.gender {
            Gender::F => &mut g.female,
            Gender::M => &mut g.male,
        };
        if a == b {
            side.add_node(a);
            g.full.add_node(a);
        } else {
            side.add_edge(a, b);
            g.full.add_edge(a, b);
        }
    }
    g
}

/// Disjoint-set forest with path halving and union by size.
pub(crate) struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Partition of the firms into connected components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentPartition {
    /// Sorted by size descending, ties by smallest member id; each
    /// component's firms ascend.
    pub components: Vec<Vec<FirmId>>,
}

impl ComponentPartition {
    /// The largest component; empty slice when there are no nodes.
    pub fn largest(&self) -> &[FirmId] {
        self.components.first().map(|c| c.as_slice()).unwrap_or(&[])
    }
}

/// Connected components of a firm graph. The result depends only on the
/// node and edge sets, not on construction order.
pub fn connected_sets(graph: &FirmGraph) -> ComponentPartition {
    let ids: Vec<FirmId> = graph.nodes.iter().copied().collect();
    let index: BTreeMap<FirmId, usize> = ids.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let mut uf = UnionFind::new(ids.len());
    for &(a, b) in graph.edges.keys() {
        uf.union(index[&a], index[&b]);
    }
    let mut by_root: BTreeMap<usize, Vec<FirmId>> = BTreeMap::new();
    for (i, &firm) in ids.iter().enumerate() {
        by_root.entry(uf.find(i)).or_default().push(firm);
    }
    // BTreeMap iteration gives members in ascending firm order already.
    let mut components: Vec<Vec<FirmId>> = by_root.into_values().collect();
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    ComponentPartition { components }
}

/// Largest dual connected set plus how it was reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdcsReport {
    /// Firms in the stabilized set, ascending.
    pub firms: Vec<FirmId>,
    /// Intersection passes until the fixed point.
    pub iterations: usize,
    /// Set when the result is empty.
    pub diagnostic: Option<String>,
}

/// Largest dual connected set: intersect the largest female-mover and
/// male-mover components, then recompute on the intersection until
/// stable.
pub fn largest_dual_connected(panel: &BiennialPanel) -> Result<LdcsReport> {
    let graph = mover_graph(panel);
    if graph.female.nodes.is_empty() || graph.male.nodes.is_empty() {
        return Err(Error::data(
            "dual connected set needs both genders in the panel",
        ));
    }
    let mut keep: BTreeSet<FirmId> = graph.full.nodes.clone();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let lf: BTreeSet<FirmId> = connected_sets(&graph.female.induced(&keep))
            .largest()
            .iter()
            .copied()
            .collect();
        let lm: BTreeSet<FirmId> = connected_sets(&graph.male.induced(&keep))
            .largest()
            .iter()
            .copied()
            .collect();
        let next: BTreeSet<FirmId> = lf.intersection(&lm).copied().collect();
        if next == keep {
            break;
        }
        let empty = next.is_empty();
        keep = next;
        if empty {
            break;
        }
    }
    let diagnostic = if keep.is_empty() {
        Some(
            "largest female and male components do not overlap; no firm is reachable by movers of both genders"
                .to_string(),
        )
    } else {
        None
    };
    Ok(LdcsReport {
        firms: keep.into_iter().collect(),
        iterations,
        diagnostic,
    })
}

/// Which variance component the bias oracle targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadraticForm {
    /// Employment-weighted variance of firm effects.
    FirmVariance,
    /// Employment-weighted covariance of worker and firm effects.
    WorkerFirmCovariance,
}

/// A small two-way fixed-effects design: one (worker, firm) pair per
/// observation, indices zero-based and dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDesign {
    pub obs: Vec<(usize, usize)>,
    pub worker_count: usize,
    pub firm_count: usize,
}

/// Exact limited-mobility bias of a plug-in quadratic form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasComputation {
    pub observations: usize,
    pub worker_count: usize,
    pub firm_count: usize,
    /// Effect columns: workers plus firms minus the reference firm.
    pub columns: usize,
    pub form: QuadraticForm,
    pub noise_variance: f64,
    /// E[plug-in estimate] minus the truth; linear in the noise variance.
    pub bias: f64,
}

/// Exact bias of the plug-in quadratic form gamma_hat' Q gamma_hat under
/// homoskedastic noise: sigma^2 * trace((A'A)^-1 Q), with A the worker
/// and firm incidence design (firm 0 the reference). Dense linear
/// algebra; instances are capped at 2000 columns because this exists to
/// check the theory at desk scale.
pub fn exact_lmb_bias(
    design: &BiasDesign,
    form: QuadraticForm,
    noise_variance: f64,
) -> Result<BiasComputation> {
    if design.obs.is_empty() || design.worker_count == 0 || design.firm_count == 0 {
        return Err(Error::config("bias oracle needs a non-empty design"));
    }
    if !(noise_variance.is_finite() && noise_variance >= 0.0) {
        return Err(Error::config("noise variance must be finite and >= 0"));
    }
    let w = design.worker_count;
    let p = w + design.firm_count - 1;
    if p > BIAS_COLUMN_CAP {
        return Err(Error::config(format!(
            "design has {p} effect columns; the dense oracle is capped at {BIAS_COLUMN_CAP}"
        )));
    }
    for &(wi, fi) in &design.obs {
        if wi >= w || fi >= design.firm_count {
            return Err(Error::config(format!(
                "observation ({wi}, {fi}) outside the declared design"
            )));
        }
    }
    // Identification is exactly one-component connectivity of the
    // worker-firm bipartite graph; Cholesky alone can accept a singular
    // matrix through rounding.
    let mut uf = UnionFind::new(w + design.firm_count);
    for &(wi, fi) in &design.obs {
        uf.union(wi, w + fi);
    }
    let root = uf.find(0);
    if (1..w + design.firm_count).any(|node| uf.find(node) != root) {
        return Err(Error::data(
            "design is rank-deficient: the mover graph is disconnected; run connected_sets on it",
        ));
    }
    let n = design.obs.len();
    let a = design_matrix(design);
    let ata = a.transpose() * &a;
    let chol = Cholesky::new(ata)
        .ok_or_else(|| Error::numerical("normal equations of the bias design failed to factor"))?;
    let q = quadratic_form_matrix(design, form);
    // trace((A'A)^-1 Q) column by column.
    let solved = chol.solve(&q);
    let mut trace = Accumulator::new();
    for i in 0..p {
        trace.add(solved[(i, i)]);
    }
    Ok(BiasComputation {
        observations: n,
        worker_count: w,
        firm_count: design.firm_count,
        columns: p,
        form,
        noise_variance,
        bias: noise_variance * trace.value(),
    })
}

/// Incidence design: worker dummies then firm dummies 1..J-1.
pub(crate) fn design_matrix(design: &BiasDesign) -> DMatrix<f64> {
    let n = design.obs.len();
    let p = design.worker_count + design.firm_count - 1;
    let mut a = DMatrix::zeros(n, p);
    for (i, &(wi, fi)) in design.obs.iter().enumerate() {
        a[(i, wi)] = 1.0;
        if fi > 0 {
            a[(i, design.worker_count + fi - 1)] = 1.0;
        }
    }
    a
}

/// The p x p matrix Q with gamma' Q gamma equal to the target
/// observation-weighted moment. Both forms center over observations, so
/// Q = S1' C S2 / n with C the centering matrix and S1, S2 the selector
/// matrices of the two effect blocks.
pub(crate) fn quadratic_form_matrix(design: &BiasDesign, form: QuadraticForm) -> DMatrix<f64> {
    let n = design.obs.len();
    let p = design.worker_count + design.firm_count - 1;
    let firm_col = |fi: usize| -> Option<usize> {
        (fi > 0).then(|| design.worker_count + fi - 1)
    };
    // Selector cross-products without materializing n x n centering.
    let mut stst: DMatrix<f64> = DMatrix::zeros(p, p); // S1'S2
    let mut s1_ones: nalgebra::DVector<f64> = nalgebra::DVector::zeros(p);
    let mut s2_ones: nalgebra::DVector<f64> = nalgebra::DVector::zeros(p);
    for &(wi, fi) in &design.obs {
        let (c1, c2) = match form {
            QuadraticForm::FirmVariance => (firm_col(fi), firm_col(fi)),
            QuadraticForm::WorkerFirmCovariance => (Some(wi), firm_col(fi)),
        };
        if let Some(c) = c1 {
            s1_ones[c] += 1.0;
        }
        if let Some(c) = c2 {
            s2_ones[c] += 1.0;
        }
        if let (Some(i), Some(j)) = (c1, c2) {
            stst[(i, j)] += 1.0;
        }
    }
    let nf = n as f64;
    let raw: DMatrix<f64> = (stst - &s1_ones * s2_ones.transpose() / nf) / nf;
    // Symmetrize; exact for the variance form, required for covariance.
    (&raw + raw.transpose()) * 0.5
}

/// Simulated connectivity of a market with the given firm sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub firm_sizes: Vec<usize>,
    pub move_prob: f64,
    pub reps: usize,
    /// Per firm: share of replications with at least one outgoing mover.
    pub outgoing_mover_frequency: Vec<f64>,
    /// Per firm: share of replications where the firm belongs to the
    /// largest component and that component has at least two firms.
    pub inclusion_frequency: Vec<f64>,
}

/// Estimate each firm's chance of joining the largest connected set.
/// Every worker moves with probability `move_prob`, to a destination
/// uniform over the other firms. Replications run on independent seeded
/// substreams.
pub fn connectivity_simulation(
    firm_sizes: &[usize],
    move_prob: f64,
    reps: usize,
    seed: u64,
) -> Result<ConnectivityReport> {
    if firm_sizes.is_empty() {
        return Err(Error::config("connectivity simulation needs firms"));
    }
    if !(0.0..=1.0).contains(&move_prob) {
        return Err(Error::config("move probability must lie in [0, 1]"));
    }
    if reps == 0 {
        return Err(Error::config("at least one replication required"));
    }
    let j = firm_sizes.len();
    let counts: (Vec<u64>, Vec<u64>) = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = util::substream2(seed, STREAM_CONN, rep as u64);
            let mut uf = UnionFind::new(j);
            let mut out = vec![0u64; j];
            let mut included = vec![0u64; j];
            for (firm, &size) in firm_sizes.iter().enumerate() {
                for _ in 0..size {
                    if rng.gen::<f64>() < move_prob && j > 1 {
                        let mut dest = rng.gen_range(0..j - 1);
                        if dest >= firm {
                            dest += 1;
                        }
                        uf.union(firm, dest);
                        out[firm] = 1;
                    }
                }
            }
            // Largest component, ties to the one holding the lowest firm.
            let roots: Vec<usize> = (0..j).map(|f| uf.find(f)).collect();
            let mut sizes = vec![0usize; j];
            for &r in &roots {
                sizes[r] += 1;
            }
            let mut best = 0usize;
            for f in 0..j {
                if sizes[roots[f]] > sizes[roots[best]] {
                    best = f;
                }
            }
            let best_root = roots[best];
            if sizes[best_root] >= 2 {
                for f in 0..j {
                    if roots[f] == best_root {
                        included[f] = 1;
                    }
                }
            }
            (out, included)
        })
        .reduce(
            || (vec![0u64; j], vec![0u64; j]),
            |mut acc, item| {
                for (a, b) in acc.0.iter_mut().zip(item.0) {
                    *a += b;
                }
                for (a, b) in acc.1.iter_mut().zip(item.1) {
                    *a += b;
                }
                acc
            },
        );
    let freq = |v: &[u64]| -> Vec<f64> { v.iter().map(|&c| c as f64 / reps as f64).collect() };
    Ok(ConnectivityReport {
        firm_sizes: firm_sizes.to_vec(),
        move_prob,
        reps,
        outgoing_mover_frequency: freq(&counts.0),
        inclusion_frequency: freq(&counts.1),
    })
}

/// Class-to-class movement direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoveDirection {
    Upward,
    Downward,
    Lateral,
}

impl MoveDirection {
    pub fn label(self) -> &'static str {
        match self {
            MoveDirection::Upward => "upward",
            MoveDirection::Downward => "downward",
            MoveDirection::Lateral => "lateral",
        }
    }
}

/// One (origin class, destination class) cell of the residual table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryCell {
    pub origin: usize,
    pub dest: usize,
    pub gender: Gender,
    pub count: usize,
    /// Mean period-2 minus period-1 residual among these movers.
    pub mean_change: f64,
    pub direction: MoveDirection,
}

/// Residual-change table across all movers of the fit's gender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryTable {
    pub gender: Gender,
    pub cells: Vec<SymmetryCell>,
    pub grand_mean: f64,
    /// Population sd of the per-mover residual changes.
    pub grand_sd: f64,
    pub mover_count: usize,
    /// Movers skipped: unclassed firm or worker absent from the fit.
    pub skipped: usize,
}

/// Exogenous-mobility diagnostic: under exogenous mobility, residual
/// changes around a move average zero in every direction. Residuals are
/// rebuilt from the fit's effects so the table does not depend on the
/// fit's internal observation order.
pub fn mobility_symmetry_diagnostic(
    fit: &FixedEffectsFit,
    panel: &BiennialPanel,
    classing: &FirmClassing,
) -> SymmetryTable {
    let age_quad = fit.covariate_names.iter().any(|n| n == "age");
    let xb = |age: f64| -> f64 {
        if age_quad && fit.beta.len() >= 2 {
            fit.beta[0] * age + fit.beta[1] * age * age
        } else {
            0.0
        }
    };
    let mut sums: BTreeMap<(usize, usize), (usize, Accumulator)> = BTreeMap::new();
    let mut deltas = Vec::new();
    let mut skipped = 0usize;
    for row in &panel.rows {
        if row.first.gender != fit.gender || !row.is_mover() {
            continue;
        }
        let (Some(k1), Some(k2)) = (
            classing.class_of(row.first.firm_id),
            classing.class_of(row.second.firm_id),
        ) else {
            skipped += 1;
            continue;
        };
        let Some(&alpha) = fit.alpha.get(&row.worker_id()) else {
            skipped += 1;
            continue;
        };
        let r1 = row.first.log_wage - alpha - fit.psi[k1] - xb(row.first.age as f64);
        let r2 = row.second.log_wage - alpha - fit.psi[k2] - xb(row.second.age as f64);
        let d = r2 - r1;
        deltas.push(d);
        let entry = sums.entry((k1, k2)).or_default();
        entry.0 += 1;
        entry.1.add(d);
    }
    let cells = sums
        .into_iter()
        .map(|((origin, dest), (count, acc))| SymmetryCell {
            origin,
            dest,
            gender: fit.gender,
            count,
            mean_change: acc.value() / count as f64,
            direction: match dest.cmp(&origin) {
                std::cmp::Ordering::Greater => MoveDirection::Upward,
                std::cmp::Ordering::Less => MoveDirection::Downward,
                std::cmp::Ordering::Equal => MoveDirection::Lateral,
            },
        })
        .collect();
    let grand_mean = if deltas.is_empty() {
        0.0
    } else {
        util::mean(&deltas)
    };
    let grand_sd = if deltas.is_empty() {
        0.0
    } else {
        util::population_variance(&deltas).sqrt()
    };
    SymmetryTable {
        gender: fit.gender,
        cells,
        grand_mean,
        grand_sd,
        mover_count: deltas.len(),
        skipped,
    }
}
