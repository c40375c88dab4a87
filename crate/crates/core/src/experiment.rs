//! Experiment orchestration: configuration parsing, the (noise, seed,
//! regularizer) run matrix, metric aggregation and CSV report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::basis::{select_mode_count, BasisFamily, SpectralBasis, TruncationConfig};
use crate::cgm::{
    cost, error_ths, noise_threshold, run_cgm, CgmConfig, InversionReport, Regularizer,
    Stopping,
};
use crate::error::{Error, Result};
use crate::field::{mean_std, Field};
use crate::grid::{Grid1D, MaterialParams, TimeGrid};
use crate::model::{
    assemble_matrices, initial_state, lift_temperature, project_observations, BoundaryFluxes,
    Propagator, Trajectory,
};
use crate::reference::{
    add_noise, noise_recordings, noisy_velocity, solve_reference, FluxSpec, NoiseModel,
    PiecewiseLinearSource, SourceSpec, TestCase, VelocitySpec, DEFAULT_NODES, DEFAULT_STEPS,
};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaseSelector {
    Case1,
    Case2,
    Custom(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeCount {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerChoice {
    None,
    Tsvd,
    Tikhonov,
}

impl std::fmt::Display for RegularizerChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegularizerChoice::None => write!(f, "none"),
            RegularizerChoice::Tsvd => write!(f, "tsvd"),
            RegularizerChoice::Tikhonov => write!(f, "tikhonov"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoppingChoice {
    /// Threshold from projected noise recordings.
    NoiseProjection,
    /// Classic `J < tau sigma^2` with the analytic default `tau`.
    Discrepancy,
}

/// Full description of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig<T: Scalar> {
    pub case: CaseSelector,
    pub nodes: usize,
    pub steps: usize,
    pub refine: usize,
    pub basis: BasisFamily,
    pub modes: ModeCount,
    /// Noise levels; empty list means a single noiseless run.
    pub sigmas: Vec<T>,
    pub seeds: Vec<u64>,
    pub velocity_noise_fraction: T,
    pub regularizers: Vec<RegularizerChoice>,
    pub tsvd_energy: T,
    pub tikhonov_alpha: T,
    pub max_iterations: usize,
    pub restart_period: usize,
    pub stopping: StoppingChoice,
    /// Evaluation instant for profiles and `error_ths`, seconds.
    pub eval_time: T,
    pub truncation_multiplier: T,
    pub truncation_tolerance: T,
    pub truncation_max_modes: usize,
    pub out_dir: PathBuf,
    /// Worker pool size; 0 uses the global default.
    pub jobs: usize,
}

impl<T: Scalar> Default for ExperimentConfig<T> {
    fn default() -> Self {
        Self {
            case: CaseSelector::Case1,
            nodes: DEFAULT_NODES,
            steps: DEFAULT_STEPS,
            refine: 4,
            basis: BasisFamily::Fourier,
            modes: ModeCount::Auto,
            sigmas: vec![lit(0.3)],
            seeds: vec![1],
            velocity_noise_fraction: lit(0.02),
            regularizers: vec![RegularizerChoice::Tsvd],
            tsvd_energy: lit(0.95),
            tikhonov_alpha: lit(1e-4),
            max_iterations: 800,
            restart_period: 200,
            stopping: StoppingChoice::NoiseProjection,
            eval_time: lit(20.0),
            truncation_multiplier: lit(1.05),
            truncation_tolerance: lit(0.01),
            truncation_max_modes: 60,
            out_dir: PathBuf::from("out"),
            jobs: 0,
        }
    }
}

impl<T: Scalar> ExperimentConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.regularizers.is_empty() {
            return Err(Error::invalid("at least one regularizer is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must be listed explicitly"));
        }
        if self.refine < 1 {
            return Err(Error::invalid("refine factor must be at least 1"));
        }
        if self.sigmas.iter().any(|s| *s < T::zero()) {
            return Err(Error::invalid("noise levels must be >= 0"));
        }
        if let ModeCount::Fixed(n) = self.modes {
            if n == 0 {
                return Err(Error::invalid("mode count must be positive"));
            }
        }
        Ok(())
    }

    /// Parses the sectioned key=value format documented in the README.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (section, key, value) in iter_config(text)? {
            let unknown = || Error::Parse(format!("unknown key [{section}] {key}"));
            match (section.as_str(), key.as_str()) {
                ("case", "name") => {
                    cfg.case = match value.as_str() {
                        "tc1" => CaseSelector::Case1,
                        "tc2" => CaseSelector::Case2,
                        other => match other.strip_prefix("custom:") {
                            Some(path) => CaseSelector::Custom(PathBuf::from(path)),
                            None => {
                                return Err(Error::Parse(format!(
                                    "case name must be tc1, tc2 or custom:<path>, got {other:?}"
                                )))
                            }
                        },
                    }
                }
                ("case", "nodes") => cfg.nodes = parse_num(&section, &key, &value)?,
                ("case", "steps") => cfg.steps = parse_num(&section, &key, &value)?,
                ("case", "refine") => cfg.refine = parse_num(&section, &key, &value)?,
                ("basis", "family") => {
                    cfg.basis = match value.as_str() {
                        "fourier" => BasisFamily::Fourier,
                        "branch" => BasisFamily::Branch,
                        other => {
                            return Err(Error::Parse(format!(
                                "basis family must be fourier or branch, got {other:?}"
                            )))
                        }
                    }
                }
                ("basis", "modes") => {
                    cfg.modes = if value == "auto" {
                        ModeCount::Auto
                    } else {
                        ModeCount::Fixed(parse_num(&section, &key, &value)?)
                    }
                }
                ("noise", "sigmas") => cfg.sigmas = parse_scalar_list(&value)?,
                ("noise", "seeds") => {
                    cfg.seeds = value
                        .split_whitespace()
                        .map(|v| {
                            v.parse::<u64>()
                                .map_err(|e| Error::Parse(format!("bad seed {v:?}: {e}")))
                        })
                        .collect::<Result<_>>()?
                }
                ("noise", "velocity_noise_fraction") => {
                    cfg.velocity_noise_fraction = parse_scalar(&value)?
                }
                ("inversion", "regularizers") => {
                    cfg.regularizers = value
                        .split_whitespace()
                        .map(|v| match v {
                            "none" => Ok(RegularizerChoice::None),
                            "tsvd" => Ok(RegularizerChoice::Tsvd),
                            "tikhonov" => Ok(RegularizerChoice::Tikhonov),
                            other => Err(Error::Parse(format!("unknown regularizer {other:?}"))),
                        })
                        .collect::<Result<_>>()?
                }
                ("inversion", "tsvd_energy") => cfg.tsvd_energy = parse_scalar(&value)?,
                ("inversion", "tikhonov_alpha") => cfg.tikhonov_alpha = parse_scalar(&value)?,
                ("inversion", "max_iterations") => {
                    cfg.max_iterations = parse_num(&section, &key, &value)?
                }
                ("inversion", "restart_period") => {
                    cfg.restart_period = parse_num(&section, &key, &value)?
                }
                ("inversion", "stopping") => {
                    cfg.stopping = match value.as_str() {
                        "noise_projection" => StoppingChoice::NoiseProjection,
                        "discrepancy" => StoppingChoice::Discrepancy,
                        other => {
                            return Err(Error::Parse(format!("unknown stopping rule {other:?}")))
                        }
                    }
                }
                ("inversion", "eval_time") => cfg.eval_time = parse_scalar(&value)?,
                ("truncation", "threshold_multiplier") => {
                    cfg.truncation_multiplier = parse_scalar(&value)?
                }
                ("truncation", "relative_tolerance") => {
                    cfg.truncation_tolerance = parse_scalar(&value)?
                }
                ("truncation", "max_modes") => {
                    cfg.truncation_max_modes = parse_num(&section, &key, &value)?
                }
                ("output", "dir") => cfg.out_dir = PathBuf::from(value),
                ("output", "jobs") => cfg.jobs = parse_num(&section, &key, &value)?,
                _ => return Err(unknown()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Builds the test case the experiment runs on.
    pub fn test_case(&self) -> Result<TestCase<T>> {
        match &self.case {
            CaseSelector::Case1 => TestCase::case_1(self.nodes, self.steps),
            CaseSelector::Case2 => TestCase::case_2(self.nodes, self.steps),
            CaseSelector::Custom(path) => parse_custom_case(&std::fs::read_to_string(path)?),
        }
    }

    /// Flat key=value rendering, echoed into every run summary.
    pub fn echo(&self) -> String {
        let case = match &self.case {
            CaseSelector::Case1 => "tc1".to_string(),
            CaseSelector::Case2 => "tc2".to_string(),
            CaseSelector::Custom(p) => format!("custom:{}", p.display()),
        };
        let modes = match self.modes {
            ModeCount::Auto => "auto".to_string(),
            ModeCount::Fixed(n) => n.to_string(),
        };
        let regs: Vec<String> = self.regularizers.iter().map(|r| r.to_string()).collect();
        format!(
            "case={case} nodes={} steps={} refine={} basis={} modes={modes} \
             velocity_noise_fraction={} regularizers={} tsvd_energy={} tikhonov_alpha={} \
             max_iterations={} restart_period={} stopping={:?} eval_time={}",
            self.nodes,
            self.steps,
            self.refine,
            self.basis,
            fmt_scalar(self.velocity_noise_fraction),
            regs.join("+"),
            fmt_scalar(self.tsvd_energy),
            fmt_scalar(self.tikhonov_alpha),
            self.max_iterations,
            self.restart_period,
            self.stopping,
            fmt_scalar(self.eval_time),
        )
    }
}

fn iter_config(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
        if section.is_empty() {
            return Err(Error::Parse(format!(
                "line {}: key outside of any [section]",
                lineno + 1
            )));
        }
        out.push((
            section.clone(),
            key.trim().to_string(),
            value.trim().to_string(),
        ));
    }
    Ok(out)
}

fn parse_num<N: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Parse(format!("[{section}] {key} = {value:?}: {e}")))
}

fn parse_scalar<T: Scalar>(value: &str) -> Result<T> {
    let x: f64 = value
        .parse()
        .map_err(|e| Error::Parse(format!("bad number {value:?}: {e}")))?;
    T::from_f64(x).ok_or_else(|| Error::Parse(format!("value {x} not representable")))
}

fn parse_scalar_list<T: Scalar>(value: &str) -> Result<Vec<T>> {
    value.split_whitespace().map(parse_scalar).collect()
}

fn fmt_scalar<T: Scalar>(x: T) -> String {
    format!("{}", x.to_f64().unwrap_or(f64::NAN))
}

/// Parses a custom test case description (sectioned key=value, see README).
pub fn parse_custom_case<T: Scalar>(text: &str) -> Result<TestCase<T>> {
    let mut length: T = lit(1.5);
    let mut nodes = DEFAULT_NODES;
    let mut t_final: T = lit(40.0);
    let mut steps = DEFAULT_STEPS;
    let mut heat_capacity: T = lit(1.0);
    let mut conductivity: T = lit(0.03);
    let mut initial_temperature = T::zero();
    let mut flux_left = FluxSpec::Zero;
    let mut flux_right = FluxSpec::Zero;
    let mut velocity = VelocitySpec::Zero;
    let mut source = SourceSpec::Zero;

    for (section, key, value) in iter_config(text)? {
        match (section.as_str(), key.as_str()) {
            ("geometry", "length") => length = parse_scalar(&value)?,
            ("geometry", "nodes") => nodes = parse_num(&section, &key, &value)?,
            ("geometry", "t_final") => t_final = parse_scalar(&value)?,
            ("geometry", "steps") => steps = parse_num(&section, &key, &value)?,
            ("material", "heat_capacity") => heat_capacity = parse_scalar(&value)?,
            ("material", "conductivity") => conductivity = parse_scalar(&value)?,
            ("conditions", "initial_temperature") => initial_temperature = parse_scalar(&value)?,
            ("conditions", "flux_left") => flux_left = parse_flux(&value)?,
            ("conditions", "flux_right") => flux_right = parse_flux(&value)?,
            ("conditions", "velocity") => velocity = parse_velocity(&value)?,
            ("conditions", "source") => source = parse_source(&value)?,
            _ => return Err(Error::Parse(format!("unknown key [{section}] {key}"))),
        }
    }
    Ok(TestCase {
        name: "custom".to_string(),
        grid: Grid1D::uniform(length, nodes)?,
        tg: TimeGrid::new(t_final, steps)?,
        mat: MaterialParams::new(heat_capacity, conductivity)?,
        initial_temperature,
        velocity,
        source,
        flux_left,
        flux_right,
    })
}

fn parse_flux<T: Scalar>(value: &str) -> Result<FluxSpec<T>> {
    if value == "zero" {
        return Ok(FluxSpec::Zero);
    }
    if let Some(rest) = value.strip_prefix("exp:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() == 2 {
            return Ok(FluxSpec::Exponential {
                amp: parse_scalar(parts[0])?,
                rate: parse_scalar(parts[1])?,
            });
        }
    }
    Err(Error::Parse(format!(
        "flux must be zero or exp:<amp>:<rate>, got {value:?}"
    )))
}

fn parse_velocity<T: Scalar>(value: &str) -> Result<VelocitySpec<T>> {
    match value {
        "zero" => Ok(VelocitySpec::Zero),
        "tanh" => Ok(VelocitySpec::TanhRamp),
        other => match other.strip_prefix("uniform:") {
            Some(v) => Ok(VelocitySpec::Uniform(parse_scalar(v)?)),
            None => Err(Error::Parse(format!(
                "velocity must be zero, tanh or uniform:<v>, got {other:?}"
            ))),
        },
    }
}

fn parse_source<T: Scalar>(value: &str) -> Result<SourceSpec<T>> {
    match value {
        "zero" => return Ok(SourceSpec::Zero),
        "gaussian" => return Ok(SourceSpec::TransientGaussian),
        _ => {}
    }
    if let Some(v) = value.strip_prefix("uniform:") {
        return Ok(SourceSpec::Uniform(parse_scalar(v)?));
    }
    if let Some(rest) = value.strip_prefix("piecewise:") {
        let mut xs = Vec::new();
        let mut vs = Vec::new();
        for pair in rest.split(',') {
            let (x, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad piecewise pair {pair:?}")))?;
            xs.push(parse_scalar(x.trim())?);
            vs.push(parse_scalar(v.trim())?);
        }
        return Ok(SourceSpec::PiecewiseLinear(PiecewiseLinearSource::new(
            xs, vs,
        )?));
    }
    Err(Error::Parse(format!(
        "source must be zero, gaussian, uniform:<q> or piecewise:x=v,..., got {value:?}"
    )))
}

/// One executed cell of the run matrix.
#[derive(Debug, Clone)]
pub enum CellResult<T: Scalar> {
    Report(Box<InversionReport<T>>),
    Failed {
        sigma: T,
        seed: u64,
        regularizer: String,
        message: String,
    },
}

/// Aggregated outcome of a full experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome<T: Scalar> {
    pub results: Vec<CellResult<T>>,
    /// Rows of the comparison table: (sigma, regularizer) with medians.
    pub table: Vec<TableRow<T>>,
    pub all_converged: bool,
}

impl<T: Scalar> ExperimentOutcome<T> {
    pub fn reports(&self) -> impl Iterator<Item = &InversionReport<T>> {
        self.results.iter().filter_map(|r| match r {
            CellResult::Report(rep) => Some(rep.as_ref()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TableRow<T: Scalar> {
    pub sigma: T,
    pub regularizer: String,
    pub runs: usize,
    pub failures: usize,
    pub j_min_median: T,
    pub iterations_median: usize,
    pub error_ths_median: Option<T>,
}

fn median<T: Scalar>(mut values: Vec<T>) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Shared per-experiment inputs, computed once.
struct CaseData<T: Scalar> {
    tc: TestCase<T>,
    clean: Field<T>,
    fluxes: BoundaryFluxes<T>,
    source: Field<T>,
    eval_index: usize,
}

/// Runs every (sigma, seed, regularizer) cell of the experiment.
pub fn run_experiment<T: Scalar + Send + Sync>(
    cfg: &ExperimentConfig<T>,
) -> Result<ExperimentOutcome<T>> {
    cfg.validate()?;
    let tc = cfg.test_case()?;
    let clean = solve_reference(&tc, cfg.refine)?;
    let fluxes = tc.boundary_fluxes();
    let source = tc.source_field();
    let eval_index = tc.tg.nearest_index(cfg.eval_time);
    let data = CaseData {
        tc,
        clean,
        fluxes,
        source,
        eval_index,
    };

    // empty noise list = one noiseless run
    let sigmas: Vec<T> = if cfg.sigmas.is_empty() {
        vec![T::zero()]
    } else {
        cfg.sigmas.clone()
    };
    let cells: Vec<(T, u64)> = sigmas
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |seed| (*s, *seed)))
        .collect();

    let run_all = || -> Vec<Vec<CellResult<T>>> {
        cells
            .par_iter()
            .map(|(sigma, seed)| run_cell(cfg, &data, *sigma, *seed))
            .collect()
    };
    let nested: Vec<Vec<CellResult<T>>> = if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?
            .install(run_all)
    } else {
        run_all()
    };
    let results: Vec<CellResult<T>> = nested.into_iter().flatten().collect();

    // aggregate medians per (sigma, regularizer)
    let mut groups: BTreeMap<(String, String), Vec<&InversionReport<T>>> = BTreeMap::new();
    let mut failures: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in &results {
        match r {
            CellResult::Report(rep) => groups
                .entry((fmt_scalar(rep.sigma), rep.regularizer.clone()))
                .or_default()
                .push(rep),
            CellResult::Failed {
                sigma,
                regularizer,
                ..
            } => {
                *failures
                    .entry((fmt_scalar(*sigma), regularizer.clone()))
                    .or_default() += 1;
            }
        }
    }
    let mut keys: Vec<(String, String)> = groups
        .keys()
        .cloned()
        .chain(failures.keys().cloned())
        .collect();
    keys.sort();
    keys.dedup();
    let mut table = Vec::new();
    for key in keys {
        let reps = groups.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let fail = failures.get(&key).copied().unwrap_or(0);
        let sigma = reps
            .first()
            .map(|r| r.sigma)
            .unwrap_or_else(|| parse_scalar(&key.0).unwrap_or_else(|_| T::zero()));
        let errors: Vec<T> = reps.iter().filter_map(|r| r.error_ths).collect();
        table.push(TableRow {
            sigma,
            regularizer: key.1.clone(),
            runs: reps.len() + fail,
            failures: fail,
            j_min_median: if reps.is_empty() {
                T::zero()
            } else {
                median(reps.iter().map(|r| r.j_min).collect())
            },
            iterations_median: if reps.is_empty() {
                0
            } else {
                let mut it: Vec<usize> = reps.iter().map(|r| r.iterations).collect();
                it.sort_unstable();
                it[it.len() / 2]
            },
            error_ths_median: if errors.len() == reps.len() && !errors.is_empty() {
                Some(median(errors))
            } else {
                None
            },
        });
    }
    let all_converged = results.iter().all(|r| match r {
        CellResult::Report(rep) => rep.converged,
        CellResult::Failed { .. } => false,
    });
    Ok(ExperimentOutcome {
        results,
        table,
        all_converged,
    })
}

/// Executes all regularizers for one (sigma, seed) pair.
fn run_cell<T: Scalar>(
    cfg: &ExperimentConfig<T>,
    data: &CaseData<T>,
    sigma: T,
    seed: u64,
) -> Vec<CellResult<T>> {
    match prepare_cell(cfg, data, sigma, seed) {
        Ok(prepared) => cfg
            .regularizers
            .iter()
            .map(|reg| match invert_cell(cfg, data, &prepared, *reg) {
                Ok(report) => CellResult::Report(Box::new(report)),
                Err(e) => CellResult::Failed {
                    sigma,
                    seed,
                    regularizer: reg.to_string(),
                    message: e.to_string(),
                },
            })
            .collect(),
        Err(e) => cfg
            .regularizers
            .iter()
            .map(|reg| CellResult::Failed {
                sigma,
                seed,
                regularizer: reg.to_string(),
                message: e.to_string(),
            })
            .collect(),
    }
}

/// Per-(sigma, seed) data shared across the regularizer runs.
struct PreparedCell<T: Scalar> {
    sigma: T,
    seed: u64,
    mode_count: usize,
    mode_selection_capped: bool,
    observations: Field<T>,
    basis: SpectralBasis<T>,
    matrices: crate::model::ModelMatrices<T>,
    observed: Trajectory<T>,
    z0: nalgebra::DVector<T>,
    threshold: Option<Stopping<T>>,
}

fn prepare_cell<T: Scalar>(
    cfg: &ExperimentConfig<T>,
    data: &CaseData<T>,
    sigma: T,
    seed: u64,
) -> Result<PreparedCell<T>> {
    let tc = &data.tc;
    let nm = NoiseModel::new(sigma, seed, cfg.velocity_noise_fraction)?;
    let observations = add_noise(&data.clean, &nm);
    let velocity = noisy_velocity(&tc.velocity_field(), &nm);
    let v0 = tc.mean_velocity();

    // truncation order
    let (mode_count, capped) = match cfg.modes {
        ModeCount::Fixed(n) => (n, false),
        ModeCount::Auto => {
            let probe = SpectralBasis::build(
                cfg.basis,
                tc.grid.clone(),
                tc.mat,
                v0,
                cfg.truncation_max_modes,
            )?;
            let tcfg = TruncationConfig::new(
                cfg.truncation_multiplier,
                cfg.truncation_tolerance,
                sigma,
                cfg.truncation_max_modes,
            )?;
            let sel = select_mode_count(&observations, &probe, &tcfg)?;
            (sel.mode_count, sel.capped)
        }
    };

    let basis = SpectralBasis::build(cfg.basis, tc.grid.clone(), tc.mat, v0, mode_count)?;
    let matrices = assemble_matrices(&basis, tc.mat, &velocity, &data.fluxes, &tc.tg)?;
    let observed = project_observations(&observations, &basis, tc.mat, &data.fluxes, &tc.tg)?;
    let z0 = initial_state(&basis, tc.mat, &data.fluxes, tc.initial_temperature)?;

    let threshold = if sigma > T::zero() {
        Some(match cfg.stopping {
            StoppingChoice::NoiseProjection => {
                let recordings = noise_recordings(&data.clean, &nm);
                Stopping::NoiseProjection {
                    j_e: noise_threshold(&recordings, &basis, &tc.tg)?,
                }
            }
            StoppingChoice::Discrepancy => Stopping::Discrepancy {
                tau: crate::cgm::discrepancy_tau_default(&basis, &tc.tg),
                sigma,
            },
        })
    } else {
        None
    };

    Ok(PreparedCell {
        sigma,
        seed,
        mode_count,
        mode_selection_capped: capped,
        observations,
        basis,
        matrices,
        observed,
        z0,
        threshold,
    })
}

fn invert_cell<T: Scalar>(
    cfg: &ExperimentConfig<T>,
    data: &CaseData<T>,
    cell: &PreparedCell<T>,
    choice: RegularizerChoice,
) -> Result<InversionReport<T>> {
    let tc = &data.tc;
    let regularizer = match choice {
        RegularizerChoice::None => Regularizer::None,
        RegularizerChoice::Tsvd => Regularizer::Tsvd {
            energy: cfg.tsvd_energy,
        },
        RegularizerChoice::Tikhonov => Regularizer::Tikhonov {
            alpha: cfg.tikhonov_alpha,
        },
    };
    let cgm_cfg = CgmConfig {
        max_iterations: cfg.max_iterations,
        stopping: cell.threshold,
        regularizer,
        restart_period: cfg.restart_period,
    };
    let prop = Propagator::new(&cell.matrices, &tc.tg)?;
    let run = run_cgm(&prop, &cell.observed, &cell.z0, &cgm_cfg, None)?;

    // reconstructed source field
    let mut q_hat = Field::zeros(&tc.grid, &tc.tg);
    for k in 0..tc.tg.sample_count() {
        let profile = cell.basis.reconstruct_source(run.control.step(k))?;
        q_hat.set_profile(k, &profile);
    }
    let t_model = lift_temperature(&run.states, &cell.basis, tc.mat, &data.fluxes)?;

    let eval = data.eval_index;
    let q_exact_eval = data.source.profile(eval);
    let err = error_ths(&q_hat.profile(eval), &q_exact_eval).ok();
    let t_data_eval = cell.observations.profile(eval);
    let t_model_eval = t_model.profile(eval);
    let residual: Vec<T> = t_data_eval
        .iter()
        .zip(t_model_eval.iter())
        .map(|(a, b)| *a - *b)
        .collect();
    let (residual_mean, residual_std) = mean_std(&residual);

    let j_min = cost(&cell.observed, &run.states)?.total;
    Ok(InversionReport {
        case: tc.name.clone(),
        basis: cell.basis.family().to_string(),
        regularizer: choice.to_string(),
        sigma: cell.sigma,
        seed: cell.seed,
        mode_count: cell.mode_count,
        b_hat: run.control,
        q_hat,
        j_history: run.j_history,
        rho_history: run.rho_history,
        gamma_history: run.gamma_history,
        rank_history: run.rank_history,
        spectrum_history: run.spectrum_history,
        iterations: run.iterations,
        converged: run.converged,
        stop: run.stop,
        j_min,
        error_ths: err,
        eval_index: eval,
        residual_mean,
        residual_std,
        q_exact_eval: Some(q_exact_eval),
        t_data_eval,
        t_model_eval,
        config_echo: format!(
            "{} sigma={} seed={} modes={} mode_selection_capped={}",
            cfg.echo(),
            fmt_scalar(cell.sigma),
            cell.seed,
            cell.mode_count,
            cell.mode_selection_capped
        ),
    })
}

/// Number with 15 significant digits, the report CSV convention.
fn fmt15<T: Scalar>(x: T) -> String {
    format!("{:.14e}", x.to_f64().unwrap_or(f64::NAN))
}

/// Writes the per-run CSV artifacts: source reconstruction and temperature
/// profiles at the evaluation instant plus the convergence curve.
pub fn emit_reconstruction<T: Scalar>(
    report: &InversionReport<T>,
    grid: &Grid1D<T>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let eval = report.eval_index;

    let mut rec = String::from("x,q_exact,q_hat,difference\n");
    let q_hat = report.q_hat.profile(eval);
    for i in 0..grid.node_count() {
        let exact = report
            .q_exact_eval
            .as_ref()
            .map(|q| q[i])
            .unwrap_or_else(T::zero);
        let _ = writeln!(
            rec,
            "{},{},{},{}",
            fmt15(grid.nodes()[i]),
            fmt15(exact),
            fmt15(q_hat[i]),
            fmt15(q_hat[i] - exact)
        );
    }
    std::fs::write(dir.join("reconstruction.csv"), rec)?;

    let mut temp = String::from("x,t_data,t_model,residual\n");
    for i in 0..grid.node_count() {
        let d = report.t_data_eval[i];
        let m = report.t_model_eval[i];
        let _ = writeln!(
            temp,
            "{},{},{},{}",
            fmt15(grid.nodes()[i]),
            fmt15(d),
            fmt15(m),
            fmt15(d - m)
        );
    }
    std::fs::write(dir.join("temperature.csv"), temp)?;

    let mut conv = String::from("iteration,j\n");
    for (k, j) in report.j_history.iter().enumerate() {
        let _ = writeln!(conv, "{k},{}", fmt15(*j));
    }
    std::fs::write(dir.join("convergence.csv"), conv)?;

    report.q_hat.write_csv(dir.join("source_field.csv"))?;

    if !report.spectrum_history.is_empty() {
        let n = report.spectrum_history[0].len();
        let mut spectrum = String::from("iteration,rank");
        for i in 0..n {
            let _ = write!(spectrum, ",lambda_sq_{i}");
        }
        spectrum.push('\n');
        for (k, eigs) in report.spectrum_history.iter().enumerate() {
            let _ = write!(spectrum, "{},{}", k + 1, report.rank_history[k]);
            for e in eigs {
                let _ = write!(spectrum, ",{}", fmt15(*e));
            }
            spectrum.push('\n');
        }
        std::fs::write(dir.join("tsvd_spectrum.csv"), spectrum)?;
    }

    std::fs::write(dir.join("summary.txt"), summary_text(report))?;
    Ok(())
}

fn summary_text<T: Scalar>(report: &InversionReport<T>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "case={}", report.case);
    let _ = writeln!(s, "basis={}", report.basis);
    let _ = writeln!(s, "regularizer={}", report.regularizer);
    let _ = writeln!(s, "sigma={}", fmt_scalar(report.sigma));
    let _ = writeln!(s, "seed={}", report.seed);
    let _ = writeln!(s, "modes={}", report.mode_count);
    let _ = writeln!(s, "iterations={}", report.iterations);
    let _ = writeln!(s, "converged={}", report.converged);
    let _ = writeln!(s, "stop={:?}", report.stop);
    let _ = writeln!(s, "j_min={}", fmt15(report.j_min));
    let _ = writeln!(
        s,
        "error_ths={}",
        report
            .error_ths
            .map(fmt15)
            .unwrap_or_else(|| "n/a".to_string())
    );
    let _ = writeln!(s, "residual_mean={}", fmt15(report.residual_mean));
    let _ = writeln!(s, "residual_std={}", fmt15(report.residual_std));
    let _ = writeln!(s, "config={}", report.config_echo);
    s
}

/// Writes every run's artifacts plus the comparison table under `dir`.
pub fn write_outputs<T: Scalar>(
    outcome: &ExperimentOutcome<T>,
    grid: &Grid1D<T>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for result in &outcome.results {
        match result {
            CellResult::Report(report) => {
                let sub = dir
                    .join(format!("{}_{}", report.case, report.basis))
                    .join(format!(
                        "sigma{}_seed{}_{}",
                        fmt_scalar(report.sigma),
                        report.seed,
                        report.regularizer
                    ));
                emit_reconstruction(report, grid, &sub)?;
            }
            CellResult::Failed {
                sigma,
                seed,
                regularizer,
                message,
            } => {
                let sub = dir.join("failed");
                std::fs::create_dir_all(&sub)?;
                std::fs::write(
                    sub.join(format!(
                        "sigma{}_seed{seed}_{regularizer}.txt",
                        fmt_scalar(*sigma)
                    )),
                    message,
                )?;
            }
        }
    }
    let mut table = String::from(
        "sigma,regularizer,runs,failures,j_min_median,iterations_median,error_ths_median\n",
    );
    for row in &outcome.table {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{}",
            fmt_scalar(row.sigma),
            row.regularizer,
            row.runs,
            row.failures,
            fmt15(row.j_min_median),
            row.iterations_median,
            row.error_ths_median
                .map(fmt15)
                .unwrap_or_else(|| "n/a".to_string())
        );
    }
    std::fs::write(dir.join("comparison.csv"), table)?;
    Ok(())
}

/// Emits the data-generation artifacts of the `forward` subcommand.
pub fn write_forward_data<T: Scalar>(
    cfg: &ExperimentConfig<T>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let tc = cfg.test_case()?;
    let clean = solve_reference(&tc, cfg.refine)?;
    clean.write_csv(dir.join("temperature_clean.csv"))?;
    tc.source_field().write_csv(dir.join("source.csv"))?;
    tc.velocity_field().write_csv(dir.join("velocity.csv"))?;
    for sigma in &cfg.sigmas {
        for seed in &cfg.seeds {
            let nm = NoiseModel::new(*sigma, *seed, cfg.velocity_noise_fraction)?;
            let noisy = add_noise(&clean, &nm);
            noisy.write_csv(dir.join(format!(
                "temperature_sigma{}_seed{}.csv",
                fmt_scalar(*sigma),
                seed
            )))?;
            let vel = noisy_velocity(&tc.velocity_field(), &nm);
            vel.write_csv(dir.join(format!(
                "velocity_sigma{}_seed{}.csv",
                fmt_scalar(*sigma),
                seed
            )))?;
        }
    }
    Ok(())
}

/// Emits the basis inspection and truncation report of the `modes`
/// subcommand. Returns the selected mode count per noise level.
pub fn write_mode_report<T: Scalar>(
    cfg: &ExperimentConfig<T>,
    dir: impl AsRef<Path>,
) -> Result<Vec<(T, usize)>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let tc = cfg.test_case()?;
    let clean = solve_reference(&tc, cfg.refine)?;
    let v0 = tc.mean_velocity();
    let basis = SpectralBasis::build(
        cfg.basis,
        tc.grid.clone(),
        tc.mat,
        v0,
        cfg.truncation_max_modes,
    )?;
    basis.write_modes_csv(dir.join("modes.csv"))?;

    let mut selections = Vec::new();
    let mut report = String::new();
    let _ = writeln!(report, "basis={}", cfg.basis);
    let _ = writeln!(report, "max_modes={}", cfg.truncation_max_modes);
    let sigmas: Vec<T> = if cfg.sigmas.is_empty() {
        vec![T::zero()]
    } else {
        cfg.sigmas.clone()
    };
    for sigma in sigmas {
        let seed = cfg.seeds[0];
        let nm = NoiseModel::new(sigma, seed, cfg.velocity_noise_fraction)?;
        let data = add_noise(&clean, &nm);
        let tcfg = TruncationConfig::new(
            cfg.truncation_multiplier,
            cfg.truncation_tolerance,
            sigma,
            cfg.truncation_max_modes,
        )?;
        let sel = select_mode_count(&data, &basis, &tcfg)?;
        let _ = writeln!(
            report,
            "sigma={} seed={} selected={} criterion={} capped={}",
            fmt_scalar(sigma),
            seed,
            sel.mode_count,
            sel.criterion,
            sel.capped
        );
        for (n, tau) in sel.residuals.iter().enumerate() {
            let _ = writeln!(report, "  tau[{}]={}", n + 1, fmt15(*tau));
        }
        selections.push((sigma, sel.mode_count));
    }
    std::fs::write(dir.join("truncation_report.txt"), report)?;
    Ok(selections)
}
