//! End-to-end experiment harness: reference trajectory, synthetic
//! observations, filter runs, and CSV artifacts.
//!
//! An [`Experiment`] is fully determined by its [`TestCaseConfig`]; every
//! random draw comes from a named substream of the configured seed, so a run
//! replayed from the `resolved_config.json` it wrote produces byte-identical
//! CSV files.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augenkf::{self, AugStepRecord, AugmentedEnsemble};
use crate::config::TestCaseConfig;
use crate::darcy;
use crate::direct_filter::ParticleSet;
use crate::error::Result;
use crate::forward::ForwardModel;
use crate::mesh::{DofMap, Mesh};
use crate::observe::ObservationModel;
use crate::rng::substream;
use crate::stats;
use crate::united::{self, FilterState};

/// A prepared experiment: forward models, reference trajectory, and the
/// synthetic observation records the filters assimilate.
pub struct Experiment {
    pub cfg: TestCaseConfig,
    /// The model the filters step. For transport runs it rides the perturbed
    /// flow field.
    pub model: ForwardModel,
    /// Generator of the reference trajectory when it differs from `model`
    /// (transport runs keep the clean flow field here).
    reference_model: Option<ForwardModel>,
    pub obs: ObservationModel,
    /// `nt_filter + 1` snapshots of the true trajectory; entry 0 is the
    /// initial state.
    pub reference: Vec<Vec<f64>>,
    /// One noisy observation record per assimilation step.
    pub observations: Vec<Vec<f64>>,
    /// Steady flow solution in dof order (transport runs only).
    pub darcy_state: Option<Vec<f64>>,
}

/// Per-step summary of a united-filter run, small enough to keep for every
/// step (the state ensembles themselves are discarded as the run advances).
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    /// State error against the reference snapshot of the same step.
    pub rmse: f64,
    pub theta_mean: Vec<f64>,
    /// Per-component (5%, 50%, 95%) quantiles of the particle cloud.
    pub theta_quantiles: Vec<[f64; 3]>,
    /// Parameter cloud after this step, one vector per particle.
    pub particles: Vec<Vec<f64>>,
    /// Inner iterations whose particle weighting degenerated.
    pub degenerate_weightings: usize,
}

/// Result of a united-filter run: per-step records plus the final state.
pub struct UnitedRun {
    pub records: Vec<StepRecord>,
    pub final_state: FilterState,
}

/// Everything a finished run produced, including the paths written.
pub struct ExperimentOutput {
    pub experiment: Experiment,
    pub united: Option<UnitedRun>,
    pub augenkf: Option<Vec<AugStepRecord>>,
    pub files: Vec<PathBuf>,
}

impl Experiment {
    /// Builds the forward model(s), solves the reference trajectory at the
    /// fine step, and generates the observation records.
    pub fn prepare(cfg: TestCaseConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = cfg.mesh()?;
        let mut model =
            ForwardModel::new(mesh, cfg.variant, cfg.medium, cfg.boundary(), cfg.sources());
        let mut reference_model = None;
        let mut darcy_state = None;

        if let Some(darcy_bc) = cfg.darcy_boundary() {
            let coeffs = cfg
                .darcy_coefficients(&model.mesh)
                .expect("transport configs define flow coefficients");
            let clean = darcy::solve_darcy(
                &model.mesh,
                &model.dofs,
                &coeffs,
                cfg.medium.delta,
                &darcy_bc,
            )
            .map_err(|e| e.in_module("steady flow"))?;
            let clean_advection = darcy::advective_operator(&model.mesh, &model.dofs, &clean)?;
            if cfg.darcy_perturbation > 0.0 {
                // The filters advect on a slightly perturbed flow field; the
                // reference trajectory keeps the clean one.
                let mut rng = substream(cfg.seed, "darcy/perturb", &[]);
                let noisy = darcy::perturb_velocities(
                    &model.mesh,
                    &model.dofs,
                    &darcy_bc,
                    &clean,
                    cfg.darcy_perturbation,
                    &mut rng,
                );
                let noisy_advection =
                    darcy::advective_operator(&model.mesh, &model.dofs, &noisy)?;
                reference_model = Some(
                    ForwardModel::new(
                        model.mesh.clone(),
                        cfg.variant,
                        cfg.medium,
                        cfg.boundary(),
                        cfg.sources(),
                    )
                    .with_advection(clean_advection),
                );
                model = model.with_advection(noisy_advection);
            } else {
                model = model.with_advection(clean_advection);
            }
            darcy_state = Some(clean);
        }

        let init = vec![0.0; model.n_dofs()];
        let generator = reference_model.as_ref().unwrap_or(&model);
        let reference = generator
            .reference_solve(
                &cfg.truth,
                &init,
                0.0,
                cfg.t_end,
                cfg.dt_ref(),
                cfg.nt_filter,
            )
            .map_err(|e| e.in_module("reference trajectory"))?;
        let obs = ObservationModel::build(cfg.observation, &model.dofs, cfg.obs_noise_std(), cfg.seed);
        let observations = obs.generate_data(&reference[1..], cfg.seed);

        Ok(Experiment {
            cfg,
            model,
            reference_model,
            obs,
            reference,
            observations,
            darcy_state,
        })
    }

    /// Model generating the reference trajectory (the filter model unless a
    /// separate clean-flow model exists).
    pub fn reference_generator(&self) -> &ForwardModel {
        self.reference_model.as_ref().unwrap_or(&self.model)
    }

    /// Initial state ensemble: `count` members drawn i.i.d. from
    /// N(0, init_spread^2) per component, from the `init/state` substream.
    /// Smaller ensembles are prefixes of larger ones.
    pub fn initial_ensemble(&self, count: usize) -> Vec<Vec<f64>> {
        let dim = self.model.n_dofs();
        let normal =
            Normal::new(0.0, self.cfg.init_spread).expect("spread is validated nonnegative");
        let mut rng = substream(self.cfg.seed, "init/state", &[]);
        (0..count)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    }

    /// Runs the united filter over all observation records, keeping per-step
    /// summaries and the final state only. This mirrors the batch driver
    /// exactly (same substreams, same order) without retaining every
    /// intermediate ensemble.
    pub fn run_united(&self) -> Result<UnitedRun> {
        let cfg = &self.cfg;
        let ucfg = cfg.united();
        let particles =
            ParticleSet::from_guess(&cfg.guess, cfg.n_particles, cfg.particle_bounds())?;
        let mut state = FilterState::initial(self.initial_ensemble(cfg.ensemble_size), particles)?;
        let mut noise = cfg.parameter_noise();
        let dt = cfg.dt_filter();
        let mut solver = |z: &[f64], theta: &[f64]| self.model.step(z, theta, dt, dt);
        let mut records = Vec::with_capacity(self.observations.len());
        for (i, y) in self.observations.iter().enumerate() {
            let step = i + 1;
            let mut next =
                united::assimilation_step(&state, y, &self.obs, &mut solver, &noise, &ucfg)
                    .map_err(|e| e.at_step(step, 0))?;
            next.diagnostics.rmse = Some(united::rmse(&next.state_mean, &self.reference[step])?);
            noise.shrink();
            records.push(step_record(&next, step as f64 * dt));
            state = next;
        }
        Ok(UnitedRun {
            records,
            final_state: state,
        })
    }

    /// Runs the augmented-ensemble Kalman baseline on the same observations,
    /// observation model, and initial ensemble stream.
    pub fn run_augenkf(&self) -> Result<Vec<AugStepRecord>> {
        let cfg = &self.cfg;
        let acfg = cfg.augenkf();
        let initial = AugmentedEnsemble::from_states(
            &self.initial_ensemble(cfg.enkf_ensemble),
            &cfg.guess,
            cfg.particle_bounds(),
        )?;
        let dt = cfg.dt_filter();
        let mut solver = |z: &[f64], theta: &[f64]| self.model.step(z, theta, dt, dt);
        augenkf::run_aug_enkf(
            initial,
            &self.observations,
            Some(&self.reference[1..]),
            &self.obs,
            &mut solver,
            &cfg.parameter_noise(),
            &acfg,
        )
    }
}

fn step_record(fs: &FilterState, time: f64) -> StepRecord {
    let theta_quantiles = (0..fs.theta_mean.len())
        .map(|c| {
            let values: Vec<f64> = fs.particles.particles.iter().map(|p| p[c]).collect();
            [
                stats::quantile(&values, 0.05),
                stats::quantile(&values, 0.50),
                stats::quantile(&values, 0.95),
            ]
        })
        .collect();
    StepRecord {
        step: fs.step,
        time,
        rmse: fs.diagnostics.rmse.unwrap_or(f64::NAN),
        theta_mean: fs.theta_mean.clone(),
        theta_quantiles,
        particles: fs.particles.particles.clone(),
        degenerate_weightings: fs.diagnostics.degenerate_weightings,
    }
}

/// Prepares the experiment, runs the filters selected by the configuration,
/// and writes all CSV artifacts into `out_dir`.
pub fn run_experiment(cfg: TestCaseConfig, out_dir: impl AsRef<Path>) -> Result<ExperimentOutput> {
    let expt = Experiment::prepare(cfg)?;
    let united = if expt.cfg.filter.runs_united() {
        Some(expt.run_united().map_err(|e| e.in_module("united filter"))?)
    } else {
        None
    };
    let augenkf = if expt.cfg.filter.runs_augenkf() {
        Some(
            expt.run_augenkf()
                .map_err(|e| e.in_module("kalman baseline"))?,
        )
    } else {
        None
    };
    let files = write_artifacts(&expt, united.as_ref(), augenkf.as_deref(), out_dir.as_ref())?;
    Ok(ExperimentOutput {
        experiment: expt,
        united,
        augenkf,
        files,
    })
}

// ---------------------------------------------------------------------------
// CSV artifacts

/// One persisted observation reading: assimilation step (1-based), observed
/// state dof, and the noisy value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsRow {
    pub step: usize,
    pub dof: usize,
    pub value: f64,
}

#[derive(Serialize)]
struct RmseRow<'a> {
    step: usize,
    time: f64,
    rmse: f64,
    filter: &'a str,
}

#[derive(Serialize)]
struct ParamRow {
    step: usize,
    component: usize,
    mean: f64,
    p05: f64,
    p50: f64,
    p95: f64,
    truth: f64,
}

#[derive(Serialize)]
struct ParticleRow {
    step: usize,
    particle: usize,
    c0: f64,
    c1: f64,
    c2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub pressure: f64,
    pub ux: f64,
    pub uy: f64,
}

#[derive(Serialize)]
struct ProfileRow<'a> {
    y: f64,
    series: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct ComparisonRow {
    step: usize,
    time: f64,
    united: f64,
    augenkf: f64,
}

/// Writes every CSV artifact for the runs that were performed and returns
/// the list of files written (the resolved configuration first).
pub fn write_artifacts(
    expt: &Experiment,
    united: Option<&UnitedRun>,
    augenkf: Option<&[AugStepRecord]>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let cfg = &expt.cfg;
    let dt = cfg.dt_filter();
    let mut files = Vec::new();

    let path = dir.join("resolved_config.json");
    cfg.save(&path)?;
    files.push(path);

    let path = dir.join("observations.csv");
    let rows: Vec<ObsRow> = expt
        .observations
        .iter()
        .enumerate()
        .flat_map(|(i, record)| {
            expt.obs
                .indices
                .iter()
                .zip(record)
                .map(move |(&dof, &value)| ObsRow {
                    step: i + 1,
                    dof,
                    value,
                })
        })
        .collect();
    write_observation_rows(&path, &rows)?;
    files.push(path);

    let path = dir.join("rmse.csv");
    let mut w = csv::Writer::from_path(&path)?;
    if let Some(run) = united {
        for r in &run.records {
            w.serialize(RmseRow {
                step: r.step,
                time: r.time,
                rmse: r.rmse,
                filter: "united",
            })?;
        }
    }
    if let Some(records) = augenkf {
        for r in records {
            if let Some(rmse) = r.rmse {
                w.serialize(RmseRow {
                    step: r.step,
                    time: r.step as f64 * dt,
                    rmse,
                    filter: "augenkf",
                })?;
            }
        }
    }
    w.flush()?;
    files.push(path);

    if let Some(run) = united {
        let path = dir.join("params.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for c in 0..cfg.guess.len() {
            w.serialize(initial_param_row(cfg, c))?;
        }
        for r in &run.records {
            for c in 0..r.theta_mean.len() {
                w.serialize(ParamRow {
                    step: r.step,
                    component: c,
                    mean: r.theta_mean[c],
                    p05: r.theta_quantiles[c][0],
                    p50: r.theta_quantiles[c][1],
                    p95: r.theta_quantiles[c][2],
                    truth: cfg.truth[c],
                })?;
            }
        }
        w.flush()?;
        files.push(path);

        let path = dir.join("particles.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for p in 0..cfg.n_particles {
            w.serialize(ParticleRow {
                step: 0,
                particle: p,
                c0: cfg.guess[0],
                c1: cfg.guess[1],
                c2: cfg.guess[2],
            })?;
        }
        for r in &run.records {
            for (p, theta) in r.particles.iter().enumerate() {
                w.serialize(ParticleRow {
                    step: r.step,
                    particle: p,
                    c0: theta[0],
                    c1: theta[1],
                    c2: theta[2],
                })?;
            }
        }
        w.flush()?;
        files.push(path);

        let path = dir.join(format!("fields_step_{}.csv", cfg.nt_filter));
        write_field_csv(&expt.model, &run.final_state.state_mean, &path)?;
        files.push(path);
    }

    if let Some(records) = augenkf {
        let path = dir.join("params_augenkf.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for r in records {
            for c in 0..r.theta_mean.len() {
                w.serialize(ParamRow {
                    step: r.step,
                    component: c,
                    mean: r.theta_mean[c],
                    p05: r.param_quantiles[c][0],
                    p50: r.param_quantiles[c][1],
                    p95: r.param_quantiles[c][2],
                    truth: cfg.truth[c],
                })?;
            }
        }
        w.flush()?;
        files.push(path);

        if let Some(last) = records.last() {
            let path = dir.join(format!("fields_step_{}_augenkf.csv", cfg.nt_filter));
            write_field_csv(&expt.model, &last.state_mean, &path)?;
            files.push(path);
        }
    }

    let path = dir.join("fields_reference.csv");
    let final_reference = expt.reference.last().expect("reference is never empty");
    write_field_csv(expt.reference_generator(), final_reference, &path)?;
    files.push(path);

    let path = dir.join("fracture_profile.csv");
    let mut w = csv::Writer::from_path(&path)?;
    write_profile_series(&mut w, &expt.model, final_reference, "reference")?;
    if let Some(run) = united {
        write_profile_series(&mut w, &expt.model, &run.final_state.state_mean, "united")?;
    }
    if let Some(last) = augenkf.and_then(|r| r.last()) {
        write_profile_series(&mut w, &expt.model, &last.state_mean, "augenkf")?;
    }
    w.flush()?;
    files.push(path);

    if let (Some(run), Some(records)) = (united, augenkf) {
        let path = dir.join("comparison.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let baseline = records.iter().filter(|r| r.rmse.is_some());
        for (u, a) in run.records.iter().zip(baseline) {
            w.serialize(ComparisonRow {
                step: u.step,
                time: u.time,
                united: u.rmse,
                augenkf: a.rmse.expect("filtered on Some"),
            })?;
        }
        w.flush()?;
        files.push(path);
    }

    Ok(files)
}

/// Parameter-trace row for step 0: every particle still sits at the guess.
fn initial_param_row(cfg: &TestCaseConfig, component: usize) -> ParamRow {
    let g = cfg.guess[component];
    ParamRow {
        step: 0,
        component,
        mean: g,
        p05: g,
        p50: g,
        p95: g,
        truth: cfg.truth[component],
    }
}

/// Reads an `observations.csv` back into rows.
pub fn read_observations(path: impl AsRef<Path>) -> Result<Vec<ObsRow>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path.as_ref())?.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Writes observation rows; `read_observations` of the result is the
/// identity, and re-serializing parsed rows reproduces the bytes.
pub fn write_observation_rows(path: impl AsRef<Path>, rows: &[ObsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Cell-center snapshot of a full state: lattice indices, centroid, cell
/// pressure, and reconstructed cell-center velocity.
pub fn field_rows(model: &ForwardModel, state: &[f64]) -> Vec<FieldRow> {
    let mesh = &model.mesh;
    mesh.cells
        .iter()
        .enumerate()
        .map(|(ci, cell)| {
            let i = ((cell.centroid[0] / mesh.dx).floor() as usize).min(mesh.nx - 1);
            let j = ((cell.centroid[1] / mesh.dy).floor() as usize).min(mesh.ny - 1);
            let [ux, uy] = cell_center_velocity(mesh, &model.dofs, state, ci);
            FieldRow {
                i,
                j,
                x: cell.centroid[0],
                y: cell.centroid[1],
                pressure: state[model.dofs.cell_pressure[ci]],
                ux,
                uy,
            }
        })
        .collect()
}

fn write_field_csv(model: &ForwardModel, state: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in field_rows(model, state) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a fields CSV back into rows.
pub fn read_fields(path: impl AsRef<Path>) -> Result<Vec<FieldRow>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path.as_ref())?.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn write_profile_series(
    w: &mut csv::Writer<std::fs::File>,
    model: &ForwardModel,
    state: &[f64],
    series: &str,
) -> Result<()> {
    for (seg, &edge) in model.mesh.interface_edges.iter().enumerate() {
        w.serialize(ProfileRow {
            y: model.mesh.edges[edge].midpoint[1],
            series,
            value: state[model.dofs.fracture_pressure[seg]],
        })?;
    }
    Ok(())
}

/// Constant-vector least-squares fit to the outward normal velocities on a
/// cell's faces; exact for uniform flow on both cell kinds.
pub fn cell_center_velocity(mesh: &Mesh, dofs: &DofMap, state: &[f64], cell: usize) -> [f64; 2] {
    let c = &mesh.cells[cell];
    let (mut a11, mut a12, mut a22) = (0.0, 0.0, 0.0);
    let (mut b1, mut b2) = (0.0, 0.0);
    for local in 0..c.edges.len() {
        let edge = &mesh.edges[c.edges[local]];
        let (dof, s) = darcy::outward_flux_dof(mesh, dofs, cell, local);
        let w = s * state[dof];
        let n = [
            c.signs[local] * edge.normal[0],
            c.signs[local] * edge.normal[1],
        ];
        let l = edge.length;
        a11 += l * n[0] * n[0];
        a12 += l * n[0] * n[1];
        a22 += l * n[1] * n[1];
        b1 += l * w * n[0];
        b2 += l * w * n[1];
    }
    let det = a11 * a22 - a12 * a12;
    if det.abs() < f64::MIN_POSITIVE {
        return [0.0, 0.0];
    }
    [
        (a22 * b1 - a12 * b2) / det,
        (a11 * b2 - a12 * b1) / det,
    ]
}
