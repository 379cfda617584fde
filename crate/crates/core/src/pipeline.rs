//! End-to-end orchestration with reproducible configuration.
//!
//! A `PipelineConfig` names every input, parameter, and seed. Running it
//! executes the stages in order (panel, cluster, gap statistic,
//! estimate, assign, decompose, counterfactual, graph, tables), persists
//! each intermediate artifact as versioned JSON or CSV, and records a
//! manifest with per-stage wall time and output digests. A stage failure
//! is recorded and the stages after it are skipped; the manifest is
//! still written. All randomness flows from the named seeds, so two runs
//! of the same config produce byte-identical artifacts regardless of the
//! thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{self, FirmClassing};
use crate::counterfactual::{self, MatchMoments, Mode, SubgroupKey};
use crate::decompose::{self, CakmCovariates, FixedEffectsFit};
use crate::error::{Error, Result};
use crate::graph;
use crate::ingest::{self, IngestConfig};
use crate::mixture::{self, EmOptions, MixtureModel, TypeAssignment};
use crate::panel::{self, BiennialPanel, Gender, SummaryStats};
use crate::synth::{self, MarketSpec};
use crate::util;

/// Version stamped into every JSON artifact.
pub const ARTIFACT_VERSION: u32 = 1;

/// Canonical artifact file names inside the output directory.
pub mod files {
    pub const CONFIG_ECHO: &str = "config.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const PANEL: &str = "panel.csv";
    pub const GROUND_TRUTH: &str = "ground_truth.json";
    pub const INGEST_REPORT: &str = "ingest_report.json";
    pub const SUMMARY: &str = "summary.json";
    pub const CLASSING: &str = "classing.json";
    pub const GAPSTAT: &str = "gapstat.json";
    pub const MODEL: &str = "model.json";
    pub const ASSIGNMENT: &str = "assignment.json";
    pub const MINCER: &str = "mincer_kob.json";
    pub const CAKM_FEMALE: &str = "cakm_female.json";
    pub const CAKM_MALE: &str = "cakm_male.json";
    pub const FIRM_GAP: &str = "firm_gap_kob.json";
    pub const VARIANCE: &str = "variance.json";
    pub const MOMENTS: &str = "match_moments.json";
    pub const COUNTERFACTUAL: &str = "counterfactual.json";
    pub const THEIL: &str = "theil.json";
    pub const COMPONENTS: &str = "components.json";
    pub const LDCS: &str = "ldcs.json";
    pub const SYMMETRY: &str = "symmetry.json";
    pub const TABLE_SUMMARY: &str = "table_summary.csv";
    pub const TABLE_MINCER: &str = "table_mincer.csv";
    pub const TABLE_FIRM_GAP: &str = "table_firm_gap.csv";
    pub const TABLE_VARIANCE: &str = "table_variance.csv";
    pub const TABLE_DECOMPOSITION: &str = "table_decomposition.csv";
    pub const TABLE_SEGREGATION: &str = "table_segregation.csv";
    pub const TABLE_SYMMETRY: &str = "table_symmetry.csv";
}

/// Shorthand market description that expands through `MarketBuilder`.
/// Class and type counts default to the estimation K and L; a
/// `spec_path` pointing at a full market spec TOML overrides everything
/// else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub class_count: Option<usize>,
    pub type_count: Option<usize>,
    pub firms_per_class: usize,
    pub firm_size_log_mean: f64,
    pub firm_size_log_sd: f64,
    pub mover_share: f64,
    pub sigma: f64,
    pub wage_base: f64,
    pub wage_class_step: f64,
    pub wage_type_step: f64,
    pub period_shift: f64,
    /// Extra (class, type, bump) wage interactions.
    pub interactions: Vec<(usize, usize, f64)>,
    pub gender_offset_female: f64,
    pub gender_offset_male: f64,
    /// (concentration, male_tilt) of type-to-class attachment.
    pub sorted_attachment: Option<(f64, f64)>,
    /// Pull of mover destinations toward the origin class.
    pub drifting_kernel: Option<f64>,
    /// Explicit seed; defaults to a stream of the master seed.
    pub seed: Option<u64>,
    /// Full market spec TOML; overrides the shorthand fields.
    pub spec_path: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            class_count: None,
            type_count: None,
            firms_per_class: 12,
            firm_size_log_mean: 3.6,
            firm_size_log_sd: 0.35,
            mover_share: 0.35,
            sigma: 0.1,
            wage_base: 1.0,
            wage_class_step: 0.4,
            wage_type_step: 0.3,
            period_shift: 0.0,
            interactions: Vec::new(),
            gender_offset_female: 0.0,
            gender_offset_male: 0.0,
            sorted_attachment: None,
            drifting_kernel: None,
            seed: None,
            spec_path: None,
        }
    }
}

impl SimulateConfig {
    /// Expand into a full market spec.
    pub fn to_spec(&self, default_k: usize, default_l: usize, default_seed: u64) -> Result<MarketSpec> {
        if let Some(path) = &self.spec_path {
            return MarketSpec::load(path);
        }
        let k = self.class_count.unwrap_or(default_k);
        let l = self.type_count.unwrap_or(default_l);
        let mut b = synth::MarketBuilder::new(k, l)
            .seed(self.seed.unwrap_or(default_seed))
            .firms_per_class(self.firms_per_class)
            .firm_size_law(self.firm_size_log_mean, self.firm_size_log_sd)
            .mover_share(self.mover_share)
            .sigma(self.sigma)
            .additive_wages(
                self.wage_base,
                self.wage_class_step,
                self.wage_type_step,
                self.period_shift,
            )
            .gender_offsets(self.gender_offset_female, self.gender_offset_male);
        for &(class, ty, bump) in &self.interactions {
            b = b.interaction(class, ty, bump);
        }
        if let Some((conc, tilt)) = self.sorted_attachment {
            b = b.sorted_attachment(conc, tilt);
        }
        if let Some(pull) = self.drifting_kernel {
            b = b.drifting_kernel(pull);
        }
        Ok(b.build())
    }
}

/// Where the panel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputConfig {
    Simulate(SimulateConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        ingest: IngestConfig,
        /// Biennial (t, t+2) pairs to build.
        pairs: Vec<(i32, i32)>,
        /// Which built pair the pipeline runs on.
        #[serde(default)]
        pair_index: usize,
    },
}

/// Optional per-stage seed overrides; anything unset derives from the
/// master seed, so every seed is still explicit in the config echo.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSeeds {
    pub simulate: Option<u64>,
    pub cluster: Option<u64>,
    pub gap_statistic: Option<u64>,
    pub em: Option<u64>,
    pub draws: Option<u64>,
}

/// Fully resolved stage seeds, echoed in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub simulate: u64,
    pub cluster: u64,
    pub gap_statistic: u64,
    pub em: u64,
    pub draws: u64,
}

/// Gap-statistic stage settings; the stage is skipped when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStatConfig {
    pub min_k: usize,
    pub max_k: usize,
    /// Reference datasets per candidate K.
    pub reference_draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateChoice {
    None,
    AgeQuad,
}

impl From<CovariateChoice> for CakmCovariates {
    fn from(c: CovariateChoice) -> CakmCovariates {
        match c {
            CovariateChoice::None => CakmCovariates::None,
            CovariateChoice::AgeQuad => CakmCovariates::AgeQuad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    Expectation,
    Draws,
}

/// Counterfactual stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    pub mode: ModeChoice,
    /// Simulated workers per evaluation in draws mode.
    pub draws: usize,
    /// Subgroup partitions: education, age, size, occupation.
    pub subgroups: Vec<String>,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        CounterfactualConfig {
            mode: ModeChoice::Expectation,
            draws: 100_000,
            subgroups: Vec::new(),
        }
    }
}

pub fn parse_subgroup(name: &str) -> Result<SubgroupKey> {
    match name {
        "education" => Ok(SubgroupKey::Education),
        "age" => Ok(SubgroupKey::AgeBand),
        "size" => Ok(SubgroupKey::FirmSize),
        "occupation" => Ok(SubgroupKey::Occupation),
        other => Err(Error::config(format!(
            "unknown subgroup '{other}' (expected education, age, size, or occupation)"
        ))),
    }
}

/// The full run description. `out_dir` and `threads` are environment,
/// not science: they are excluded from the config hash and echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Size of the local thread pool; default lets rayon decide.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Master seed; every stage seed derives from it unless overridden.
    pub seed: u64,
    /// Firm classes to estimate.
    pub class_count: usize,
    /// Worker types to estimate.
    pub type_count: usize,
    #[serde(default = "default_kmeans_restarts")]
    pub kmeans_restarts: usize,
    #[serde(default = "default_em_restarts")]
    pub em_restarts: usize,
    pub input: InputConfig,
    #[serde(default)]
    pub seeds: StageSeeds,
    #[serde(default)]
    pub gap_statistic: Option<GapStatConfig>,
    #[serde(default = "default_covariates")]
    pub covariates: CovariateChoice,
    #[serde(default)]
    pub counterfactual: CounterfactualConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("matchgap-out")
}
fn default_kmeans_restarts() -> usize {
    25
}
fn default_em_restarts() -> usize {
    10
}
fn default_covariates() -> CovariateChoice {
    CovariateChoice::AgeQuad
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("pipeline config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.type_count == 0 {
            return Err(Error::config("class_count and type_count must be >= 1"));
        }
        if self.kmeans_restarts == 0 || self.em_restarts == 0 {
            return Err(Error::config("restart counts must be >= 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be >= 1 when set"));
        }
        if let Some(g) = &self.gap_statistic {
            if g.min_k == 0 || g.min_k > g.max_k || g.reference_draws == 0 {
                return Err(Error::config(
                    "gap statistic needs 1 <= min_k <= max_k and reference_draws >= 1",
                ));
            }
        }
        if self.counterfactual.mode == ModeChoice::Draws && self.counterfactual.draws == 0 {
            return Err(Error::config("draws mode needs draws >= 1"));
        }
        for name in &self.counterfactual.subgroups {
            parse_subgroup(name)?;
        }
        if let InputConfig::Csv { pairs, pair_index, .. } = &self.input {
            if pairs.is_empty() {
                return Err(Error::config("csv input needs at least one year pair"));
            }
            if *pair_index >= pairs.len() {
                return Err(Error::config("pair_index outside the pairs list"));
            }
        }
        Ok(())
    }

    pub fn resolved_seeds(&self) -> ResolvedSeeds {
        let derive = |tag: u64| util::splitmix64(self.seed ^ tag);
        ResolvedSeeds {
            simulate: self.seeds.simulate.unwrap_or_else(|| derive(0x73696d)),
            cluster: self.seeds.cluster.unwrap_or_else(|| derive(0x636c75)),
            gap_statistic: self.seeds.gap_statistic.unwrap_or_else(|| derive(0x676170)),
            em: self.seeds.em.unwrap_or_else(|| derive(0x656d66)),
            draws: self.seeds.draws.unwrap_or_else(|| derive(0x647277)),
        }
    }

    /// The config without environment fields, used for the echo artifact
    /// and the hash, so identical science in different directories or
    /// thread counts hashes identically.
    pub fn hashable_echo(&self) -> Result<Vec<u8>> {
        let mut value = serde_json::to_value(self)
            .map_err(|e| Error::config(format!("config not serializable: {e}")))?;
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
            map.remove("threads");
        }
        let mut bytes = serde_json::to_vec_pretty(&value)
            .map_err(|e| Error::config(format!("config not serializable: {e}")))?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// One persisted output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// File name relative to the output directory.
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
    /// Not run because an earlier stage failed.
    Skipped,
    /// Not configured for this run.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub wall_ms: u64,
    pub outputs: Vec<Artifact>,
    pub error: Option<String>,
    /// Exit code the error maps to, when failed.
    pub error_code: Option<i32>,
}

/// What a run produced, stage by stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    /// Hash of the environment-stripped config echo.
    pub config_sha256: String,
    pub seeds: ResolvedSeeds,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn first_failure(&self) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.status == StageStatus::Failed)
    }

    /// All artifact digests keyed by file name, for determinism checks.
    pub fn digests(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .stages
            .iter()
            .flat_map(|s| s.outputs.iter().map(|a| (a.file.clone(), a.sha256.clone())))
            .collect();
        out.sort();
        out
    }
}

/// JSON envelope carrying the artifact version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub version: u32,
    pub data: T,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

fn persist(dir: &Path, name: &str, bytes: &[u8]) -> Result<Artifact> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(Artifact {
        file: name.to_string(),
        sha256: sha256_hex(bytes),
    })
}

/// Write a versioned JSON artifact and return its digest record.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, data: &T) -> Result<Artifact> {
    let bytes = serde_json::to_vec(&Versioned {
        version: ARTIFACT_VERSION,
        data,
    })
    .map_err(|e| Error::config(format!("{name}: {e}")))?;
    persist(dir, name, &bytes)
}

/// Read a versioned JSON artifact, rejecting version mismatches.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let wrapped: Versioned<T> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if wrapped.version != ARTIFACT_VERSION {
        return Err(Error::data(format!(
            "{}: artifact version {} but this build reads {}",
            path.display(),
            wrapped.version,
            ARTIFACT_VERSION
        )));
    }
    Ok(wrapped.data)
}

/// Write rows as a CSV table with a header derived from the row type.
pub fn write_table<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<Artifact> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::data(format!("{name}: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::data(format!("{name}: {e}")))?;
    persist(dir, name, &bytes)
}

/// Read a CSV table written by `write_table`.
pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Row of the gap-decomposition table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub group: String,
    pub baseline: f64,
    pub separable: f64,
    pub complementarity: f64,
    pub sorting: f64,
    pub bargaining: f64,
    pub residual: f64,
    pub share_complementarity: f64,
    pub share_sorting: f64,
    pub share_bargaining: f64,
    pub share_residual: f64,
}

impl DecompositionRow {
    pub fn from_parts(group: &str, d: &counterfactual::GapDecomposition) -> Self {
        DecompositionRow {
            group: group.to_string(),
            baseline: d.baseline_gap,
            separable: d.separable_gap,
            complementarity: d.complementarity,
            sorting: d.sorting,
            bargaining: d.bargaining,
            residual: d.residual,
            share_complementarity: d.shares[0],
            share_sorting: d.shares[1],
            share_bargaining: d.shares[2],
            share_residual: d.shares[3],
        }
    }
}

/// Row of the per-gender descriptive table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub gender: String,
    pub workers: usize,
    pub worker_years: usize,
    pub mean_log_wage: f64,
    pub var_log_wage: f64,
    pub mean_tenure: f64,
    pub share_dropout: f64,
    pub share_highschool: f64,
    pub share_college: f64,
}

/// Row of the Mincer gap table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MincerRow {
    pub gap: f64,
    pub explained: f64,
    pub unexplained: f64,
}

/// Row of the firm-premium gap table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmGapRow {
    pub gap: f64,
    pub firm_component: f64,
    pub sorting: f64,
    pub bargaining: f64,
    pub other: f64,
}

/// Row of the variance-decomposition table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub gender: String,
    pub var_total: f64,
    pub var_worker: f64,
    pub var_firm: f64,
    pub var_covariates: f64,
    pub cov_worker_firm_x2: f64,
    pub cov_worker_covariates_x2: f64,
    pub cov_firm_covariates_x2: f64,
    pub var_residual: f64,
}

/// Row of the segregation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheilRow {
    pub scope: String,
    pub theil: f64,
}

/// Row of the mobility-symmetry table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryRow {
    pub gender: String,
    pub origin_class: usize,
    pub dest_class: usize,
    pub direction: String,
    pub movers: usize,
    pub mean_residual_change: f64,
}

/// Everything the table emitter can publish. Empty fields emit nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub summary: Vec<SummaryRow>,
    pub mincer: Vec<MincerRow>,
    pub firm_gap: Vec<FirmGapRow>,
    pub variance: Vec<VarianceRow>,
    pub decomposition: Vec<DecompositionRow>,
    pub theil: Vec<TheilRow>,
    pub symmetry: Vec<SymmetryRow>,
}

/// Publish the delimited tables; an empty report set writes no files.
pub fn emit_tables(out_dir: &Path, reports: &ReportSet) -> Result<Vec<Artifact>> {
    let mut artifacts = Vec::new();
    if !reports.summary.is_empty() {
        artifacts.push(write_table(out_dir, files::TABLE_SUMMARY, &reports.summary)?);
    }
    if !reports.mincer.is_empty() {
        artifacts.push(write_table(out_dir, files::TABLE_MINCER, &reports.mincer)?);
    }
    if !reports.firm_gap.is_empty() {
        artifacts.push(write_table(out_dir, files::TABLE_FIRM_GAP, &reports.firm_gap)?);
    }
    if !reports.variance.is_empty() {
        artifacts.push(write_table(out_dir, files::TABLE_VARIANCE, &reports.variance)?);
    }
    if !reports.decomposition.is_empty() {
        artifacts.push(write_table(
            out_dir,
            files::TABLE_DECOMPOSITION,
            &reports.decomposition,
        )?);
    }
    if !reports.theil.is_empty() {
        artifacts.push(write_table(out_dir, files::TABLE_SEGREGATION, &reports.theil)?);
    }
    if !reports.symmetry.is_empty() {
        artifacts.push(write_table(out_dir, files::TABLE_SYMMETRY, &reports.symmetry)?);
    }
    Ok(artifacts)
}

fn summary_rows(stats: &SummaryStats) -> Vec<SummaryRow> {
    [
        ("F", &stats.female),
        ("M", &stats.male),
    ]
    .into_iter()
    .map(|(g, s)| SummaryRow {
        gender: g.to_string(),
        workers: s.workers,
        worker_years: s.worker_years,
        mean_log_wage: s.mean_log_wage,
        var_log_wage: s.var_log_wage,
        mean_tenure: s.mean_tenure,
        share_dropout: s.education_shares[0],
        share_highschool: s.education_shares[1],
        share_college: s.education_shares[2],
    })
    .collect()
}

fn variance_row(gender: Gender, v: &decompose::VarDecompReport) -> VarianceRow {
    VarianceRow {
        gender: gender.label().to_string(),
        var_total: v.var_w,
        var_worker: v.var_worker,
        var_firm: v.var_firm,
        var_covariates: v.var_xb,
        cov_worker_firm_x2: v.cov2_worker_firm,
        cov_worker_covariates_x2: v.cov2_worker_xb,
        cov_firm_covariates_x2: v.cov2_firm_xb,
        var_residual: v.var_resid,
    }
}

fn symmetry_rows(table: &graph::SymmetryTable) -> Vec<SymmetryRow> {
    table
        .cells
        .iter()
        .map(|c| SymmetryRow {
            gender: c.gender.label().to_string(),
            origin_class: c.origin + 1,
            dest_class: c.dest + 1,
            direction: c.direction.label().to_string(),
            movers: c.count,
            mean_residual_change: c.mean_change,
        })
        .collect()
}

/// Theil indexes of the per-cell worker counts: one per gender plus the
/// pooled grid.
pub fn theil_rows(moments: &MatchMoments) -> Result<Vec<TheilRow>> {
    let counts_of = |g: Gender| -> Vec<f64> {
        let gm = moments.gender(g);
        gm.cells
            .iter()
            .flatten()
            .map(|c| c.map(|m| m.count).unwrap_or(0.0))
            .collect()
    };
    let f = counts_of(Gender::F);
    let m = counts_of(Gender::M);
    let pooled: Vec<f64> = f.iter().zip(&m).map(|(a, b)| a + b).collect();
    Ok(vec![
        TheilRow {
            scope: "female".into(),
            theil: decompose::theil_index(&f)?,
        },
        TheilRow {
            scope: "male".into(),
            theil: decompose::theil_index(&m)?,
        },
        TheilRow {
            scope: "pooled".into(),
            theil: decompose::theil_index(&pooled)?,
        },
    ])
}

/// Clone a fixed-effects fit without the bulky per-observation series.
pub fn strip_series(fit: &FixedEffectsFit) -> FixedEffectsFit {
    FixedEffectsFit {
        series: Default::default(),
        ..fit.clone()
    }
}

/// The counterfactual stage's JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualArtifact {
    pub overall: counterfactual::GapDecomposition,
    pub subgroups: Vec<(String, Vec<counterfactual::SubgroupReport>)>,
    pub skipped: Vec<String>,
}

fn run_stage<T>(
    records: &mut Vec<StageRecord>,
    halted: &mut bool,
    name: &str,
    body: impl FnOnce() -> Result<(Vec<Artifact>, T)>,
) -> Option<T> {
    if *halted {
        records.push(StageRecord {
            name: name.into(),
            status: StageStatus::Skipped,
            wall_ms: 0,
            outputs: Vec::new(),
            error: None,
            error_code: None,
        });
        return None;
    }
    let start = Instant::now();
    match body() {
        Ok((outputs, value)) => {
            records.push(StageRecord {
                name: name.into(),
                status: StageStatus::Completed,
                wall_ms: start.elapsed().as_millis() as u64,
                outputs,
                error: None,
                error_code: None,
            });
            Some(value)
        }
        Err(e) => {
            *halted = true;
            records.push(StageRecord {
                name: name.into(),
                status: StageStatus::Failed,
                wall_ms: start.elapsed().as_millis() as u64,
                outputs: Vec::new(),
                error: Some(e.to_string()),
                error_code: Some(e.exit_code()),
            });
            None
        }
    }
}

fn record_disabled(records: &mut Vec<StageRecord>, name: &str) {
    records.push(StageRecord {
        name: name.into(),
        status: StageStatus::Disabled,
        wall_ms: 0,
        outputs: Vec::new(),
        error: None,
        error_code: None,
    });
}

/// Run every stage, persist artifacts, and write the manifest. Stage
/// failures are reported in the returned manifest, not as an `Err`; the
/// error path here is reserved for being unable to run at all.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    match config.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            pool.install(|| run_pipeline_inner(config))
        }
        None => run_pipeline_inner(config),
    }
}

fn run_pipeline_inner(config: &PipelineConfig) -> Result<RunManifest> {
    let out = config.out_dir.clone();
    let seeds = config.resolved_seeds();
    let echo = config.hashable_echo()?;
    let config_artifact = persist(&out, files::CONFIG_ECHO, &echo)?;
    let config_sha256 = config_artifact.sha256.clone();

    let mut records: Vec<StageRecord> = Vec::new();
    let mut halted = false;
    let mut reports = ReportSet::default();

    // Stage: panel.
    let panel: Option<BiennialPanel> = run_stage(&mut records, &mut halted, "panel", || {
        let (mut artifacts, panel, stats) = materialize_panel(config, &out, &seeds)?;
        artifacts.insert(0, config_artifact.clone());
        reports.summary = summary_rows(&stats);
        Ok((artifacts, panel))
    });

    // Stage: cluster.
    let classing: Option<FirmClassing> = run_stage(&mut records, &mut halted, "cluster", || {
        let panel = panel.as_ref().expect("panel stage completed");
        let grid = cluster::compute_ecdfs(panel)?;
        let classing = cluster::kmeans_classes(
            &grid,
            config.class_count,
            config.kmeans_restarts,
            seeds.cluster,
        )?;
        let artifact = write_json(&out, files::CLASSING, &classing)?;
        Ok((vec![artifact], classing))
    });

    // Stage: gap statistic (optional).
    if let Some(gap) = &config.gap_statistic {
        run_stage(&mut records, &mut halted, "gapstat", || {
            let panel = panel.as_ref().expect("panel stage completed");
            let grid = cluster::compute_ecdfs(panel)?;
            let report = cluster::gap_statistic(
                &grid,
                gap.min_k..=gap.max_k,
                gap.reference_draws,
                config.kmeans_restarts,
                seeds.gap_statistic,
            )?;
            let artifact = write_json(&out, files::GAPSTAT, &report)?;
            Ok((vec![artifact], ()))
        });
    } else {
        record_disabled(&mut records, "gapstat");
    }

    // Stage: estimate.
    let model: Option<MixtureModel> = run_stage(&mut records, &mut halted, "estimate", || {
        let panel = panel.as_ref().expect("panel stage completed");
        let classing = classing.as_ref().expect("cluster stage completed");
        let movers = mixture::fit_movers(
            panel,
            classing,
            config.type_count,
            config.em_restarts,
            seeds.em,
            &EmOptions::default(),
        )?;
        let model = mixture::fit_stayers(panel, classing, &movers)?;
        let artifact = write_json(&out, files::MODEL, &model)?;
        Ok((vec![artifact], model))
    });

    // Stage: assign.
    let assignment: Option<TypeAssignment> = run_stage(&mut records, &mut halted, "assign", || {
        let panel = panel.as_ref().expect("panel stage completed");
        let classing = classing.as_ref().expect("cluster stage completed");
        let model = model.as_ref().expect("estimate stage completed");
        let assignment = mixture::map_assign(panel, classing, model)?;
        let artifact = write_json(&out, files::ASSIGNMENT, &assignment)?;
        Ok((vec![artifact], assignment))
    });

    // Stage: decompose.
    let fits: Option<(FixedEffectsFit, FixedEffectsFit)> =
        run_stage(&mut records, &mut halted, "decompose", || {
            let panel = panel.as_ref().expect("panel stage completed");
            let classing = classing.as_ref().expect("cluster stage completed");
            let mut artifacts = Vec::new();

            let mincer = decompose::mincer_kob(panel)?;
            reports.mincer = vec![MincerRow {
                gap: mincer.gap,
                explained: mincer.explained,
                unexplained: mincer.unexplained,
            }];
            artifacts.push(write_json(&out, files::MINCER, &mincer)?);

            let covariates: CakmCovariates = config.covariates.into();
            let fit_f = decompose::cakm_fit(panel, classing, Gender::F, covariates)?;
            let fit_m = decompose::cakm_fit(panel, classing, Gender::M, covariates)?;
            artifacts.push(write_json(&out, files::CAKM_FEMALE, &strip_series(&fit_f))?);
            artifacts.push(write_json(&out, files::CAKM_MALE, &strip_series(&fit_m))?);

            let firm_gap = decompose::cakm_kob(&fit_f, &fit_m)?;
            reports.firm_gap = vec![FirmGapRow {
                gap: firm_gap.gap,
                firm_component: firm_gap.firm_component,
                sorting: firm_gap.sorting,
                bargaining: firm_gap.bargaining,
                other: firm_gap.other,
            }];
            artifacts.push(write_json(&out, files::FIRM_GAP, &firm_gap)?);

            let var_f = decompose::variance_decomposition(&fit_f.series)?;
            let var_m = decompose::variance_decomposition(&fit_m.series)?;
            reports.variance = vec![
                variance_row(Gender::F, &var_f),
                variance_row(Gender::M, &var_m),
            ];
            artifacts.push(write_json(
                &out,
                files::VARIANCE,
                &serde_json::json!({ "female": var_f, "male": var_m }),
            )?);
            Ok((artifacts, (fit_f, fit_m)))
        });

    // Stage: counterfactual.
    run_stage(&mut records, &mut halted, "counterfactual", || {
        let panel = panel.as_ref().expect("panel stage completed");
        let classing = classing.as_ref().expect("cluster stage completed");
        let assignment = assignment.as_ref().expect("assign stage completed");
        let mut artifacts = Vec::new();

        let moments =
            counterfactual::match_moments(panel, classing, &assignment.types, config.type_count)?;
        artifacts.push(write_json(&out, files::MOMENTS, &moments)?);

        let mode = match config.counterfactual.mode {
            ModeChoice::Expectation => Mode::Expectation,
            ModeChoice::Draws => Mode::Draws {
                draws: config.counterfactual.draws,
                seed: seeds.draws,
            },
        };
        let overall = counterfactual::decompose_gap_with(&moments, mode)?;
        reports.decomposition = vec![DecompositionRow::from_parts("all", &overall)];

        let mut subgroup_out = Vec::new();
        let mut skipped_all = Vec::new();
        for name in &config.counterfactual.subgroups {
            let key = parse_subgroup(name)?;
            let (sub_reports, skipped) = counterfactual::subgroup_decompose(
                panel,
                classing,
                &assignment.types,
                config.type_count,
                key,
                mode,
            )?;
            for r in &sub_reports {
                reports
                    .decomposition
                    .push(DecompositionRow::from_parts(&r.label, &r.decomposition));
            }
            skipped_all.extend(skipped.iter().map(|s| format!("{name}: {s}")));
            subgroup_out.push((name.clone(), sub_reports));
        }
        let artifact_payload = CounterfactualArtifact {
            overall,
            subgroups: subgroup_out,
            skipped: skipped_all,
        };
        artifacts.push(write_json(&out, files::COUNTERFACTUAL, &artifact_payload)?);

        reports.theil = theil_rows(&moments)?;
        artifacts.push(write_json(&out, files::THEIL, &reports.theil)?);
        Ok((artifacts, ()))
    });

    // Stage: graph.
    run_stage(&mut records, &mut halted, "graph", || {
        let panel = panel.as_ref().expect("panel stage completed");
        let classing = classing.as_ref().expect("cluster stage completed");
        let (fit_f, fit_m) = fits.as_ref().expect("decompose stage completed");
        let mut artifacts = Vec::new();

        let mobility = graph::mover_graph(panel);
        let components = graph::connected_sets(&mobility.full);
        artifacts.push(write_json(&out, files::COMPONENTS, &components)?);

        let ldcs = graph::largest_dual_connected(panel)?;
        artifacts.push(write_json(&out, files::LDCS, &ldcs)?);

        let sym_f = graph::mobility_symmetry_diagnostic(fit_f, panel, classing);
        let sym_m = graph::mobility_symmetry_diagnostic(fit_m, panel, classing);
        reports.symmetry = symmetry_rows(&sym_f);
        reports.symmetry.extend(symmetry_rows(&sym_m));
        artifacts.push(write_json(
            &out,
            files::SYMMETRY,
            &serde_json::json!({ "female": sym_f, "male": sym_m }),
        )?);
        Ok((artifacts, ()))
    });

    // Stage: tables.
    run_stage(&mut records, &mut halted, "tables", || {
        let artifacts = emit_tables(&out, &reports)?;
        Ok((artifacts, ()))
    });

    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION,
        config_sha256,
        seeds,
        stages: records,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest: {e}")))?;
    let path = out.join(files::MANIFEST);
    std::fs::write(&path, manifest_bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Build the configured input panel, persist it alongside its reports
/// (ground truth or ingestion counters, then summary statistics), and
/// return the panel with its summary.
pub fn materialize_panel(
    config: &PipelineConfig,
    out: &Path,
    seeds: &ResolvedSeeds,
) -> Result<(Vec<Artifact>, BiennialPanel, SummaryStats)> {
    let mut artifacts = Vec::new();
    let panel = match &config.input {
        InputConfig::Simulate(sim) => {
            let spec = sim.to_spec(config.class_count, config.type_count, seeds.simulate)?;
            let (panel, truth) = synth::generate_market(&spec)?;
            ingest::write_panel(&out.join(files::PANEL), &panel)?;
            artifacts.push(digest_file(out, files::PANEL)?);
            artifacts.push(write_json(out, files::GROUND_TRUTH, &truth)?);
            panel
        }
        InputConfig::Csv {
            path,
            ingest: ingest_config,
            pairs,
            pair_index,
        } => {
            let (raw, ingest_report) = ingest::read_contracts(path, ingest_config)?;
            let (clean, clean_report) = panel::clean_contracts(&raw);
            let panels = panel::build_biennials(&clean, pairs)?;
            let panel = panels
                .into_iter()
                .nth(*pair_index)
                .ok_or_else(|| Error::config("pair_index outside the pairs list"))?;
            artifacts.push(write_json(
                out,
                files::INGEST_REPORT,
                &serde_json::json!({
                    "ingest": ingest_report,
                    "clean": clean_report,
                    "pair_filter": panel.filter,
                }),
            )?);
            ingest::write_panel(&out.join(files::PANEL), &panel)?;
            artifacts.push(digest_file(out, files::PANEL)?);
            panel
        }
    };
    let stats = panel::summary_stats(&panel)?;
    artifacts.push(write_json(out, files::SUMMARY, &stats)?);
    Ok((artifacts, panel, stats))
}

/// Reconstruct the working panel from the canonical `panel.csv` in an
/// output directory, so later stages can run in separate processes.
pub fn load_panel(out: &Path) -> Result<BiennialPanel> {
    let path = out.join(files::PANEL);
    let config = IngestConfig {
        wage_scale: ingest::WageScale::Log,
        ..IngestConfig::default()
    };
    let (raw, _) = ingest::read_contracts(&path, &config)?;
    let (clean, _) = panel::clean_contracts(&raw);
    let mut years: Vec<i32> = clean.iter().map(|o| o.year).collect();
    years.sort_unstable();
    years.dedup();
    let [first, second] = years.as_slice() else {
        return Err(Error::data(format!(
            "{}: expected exactly two panel years, found {:?}",
            path.display(),
            years
        )));
    };
    let panels = panel::build_biennials(&clean, &[(*first, *second)])?;
    panels
        .into_iter()
        .next()
        .ok_or_else(|| Error::data(format!("{}: no worker pairs", path.display())))
}

/// Digest an already-written file in the output directory.
fn digest_file(dir: &Path, name: &str) -> Result<Artifact> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Artifact {
        file: name.to_string(),
        sha256: sha256_hex(&bytes),
    })
}
