//! Experiment configuration: problem geometry and physics, data-generation
//! settings, and filter hyperparameters, serializable to JSON so a finished
//! run can be replayed exactly from its resolved configuration.
//!
//! Three families of built-in presets cover the shipped test problems:
//!
//! * `testcase1` — parabolic flow with an isotropic conductive fracture,
//!   driven through the fracture column (pressure 1 at its bottom end, 0 at
//!   the top) with Dirichlet strips on the lower fifth of both lateral
//!   sides. True parameters (k1, k2, alpha_gamma) = (1, 1, 2).
//! * `testcase2` — anisotropic, heterogeneous fracture with Robin coupling,
//!   driven by a horizontal unit pressure drop; the central band conducts
//!   across the fracture, the outer quarters along it. True parameters
//!   (k1, k2, k_f) = (1, 1, 2000).
//! * `testcase3` — advective-diffusive transport of a concentration entering
//!   at the bottom, riding a frozen Darcy field computed once from tabulated
//!   conductivities. The estimated parameters are the reciprocals of the
//!   molecular diffusivities.
//!
//! Each `*-small` variant coarsens the mesh and shrinks the ensembles enough
//! to run on a desk machine in minutes while keeping the same physics.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augenkf::AugEnkfConfig;
use crate::bc::{BoundaryData, EdgeBc, FractureBc, Sources};
use crate::direct_filter::{LikelihoodConfig, ParameterNoise};
use crate::ensf::DiffusionSchedule;
use crate::error::{FfError, Result};
use crate::mesh::{build_mesh, BoundarySide, CellKind, Mesh};
use crate::model::{Coefficients, Medium, ModelVariant, RobinCoupling};
use crate::observe::ObservationKind;
use crate::united::UnitedFilterConfig;

/// Score evaluations are chunked; this batch width best fits the cache on
/// the machines this targets.
pub const SCORE_BATCH: usize = 24;

/// Which filters an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterChoice {
    United,
    AugEnkf,
    Both,
}

impl FilterChoice {
    pub fn runs_united(self) -> bool {
        matches!(self, FilterChoice::United | FilterChoice::Both)
    }

    pub fn runs_augenkf(self) -> bool {
        matches!(self, FilterChoice::AugEnkf | FilterChoice::Both)
    }
}

/// Steady flow problem that drives the transport scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarcySpec {
    /// Subdomain hydraulic conductivity.
    pub conductivity: f64,
    /// Isotropic fracture hydraulic conductivity; the tangential
    /// transmissivity is this times the aperture.
    pub fracture_conductivity: f64,
    /// Bottom boundary pressure at the fracture; the top is held at zero.
    pub pressure_drop: f64,
    /// Relative slope of the bottom pressure away from the fracture:
    /// p(x) = pressure_drop * (1 + ramp_slope * |x - x_gamma|).
    pub ramp_slope: f64,
}

/// Boundary driver of a test problem. All drivers are constant in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum Scenario {
    /// Flow up the fracture column: fixed pressures at the fracture
    /// endpoints, Dirichlet strips on the lower part of both lateral sides,
    /// no flow elsewhere.
    FractureColumn {
        strip_height: f64,
        left_pressure: f64,
        right_pressure: f64,
        fracture_bottom: f64,
        fracture_top: f64,
    },
    /// Horizontal pressure drop across the whole domain; top, bottom and the
    /// fracture endpoints are sealed.
    CrossFracture {
        left_pressure: f64,
        right_pressure: f64,
    },
    /// Concentration enters at the bottom, leaves at the top, and is
    /// advected by the frozen Darcy field.
    Transport {
        inlet_concentration: f64,
        darcy: DarcySpec,
    },
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCaseConfig {
    /// Label used in file names and logs.
    pub name: String,
    pub scenario: Scenario,
    pub variant: ModelVariant,
    pub cell_kind: CellKind,
    /// Domain extent (width, height).
    pub domain: [f64; 2],
    /// x-coordinate of the vertical fracture.
    pub x_gamma: f64,
    /// Mesh size; the grid has domain/h cells per direction.
    pub h: f64,
    pub medium: Medium,
    pub t_end: f64,
    /// The reference solve uses t_end / ref_divisor as its fine time step.
    pub ref_divisor: usize,
    /// Number of assimilation steps (and observation records).
    pub nt_filter: usize,
    /// Parameters of the reference solution.
    pub truth: [f64; 3],
    /// Initial parameter guess; all particles start here.
    pub guess: [f64; 3],
    /// Per-component parameter box, inclusive.
    pub bounds: [[f64; 2]; 3],
    pub observation: ObservationKind,
    /// Observation noise std is obs_noise * sqrt(dt_filter).
    pub obs_noise: f64,
    /// State-model noise std is model_noise * sqrt(dt_filter).
    pub model_noise: f64,
    /// Std of the one-time velocity perturbation applied to the Darcy field
    /// the filters see (transport scenario only; the reference stays clean).
    pub darcy_perturbation: f64,
    /// Spread of the initial assimilation ensemble around zero.
    pub init_spread: f64,
    pub filter: FilterChoice,
    /// State ensemble size J.
    pub ensemble_size: usize,
    /// Parameter particle count M.
    pub n_particles: usize,
    /// Inner iteration count R.
    pub r_iterations: usize,
    /// Ensemble size of the Kalman baseline.
    pub enkf_ensemble: usize,
    /// Reverse-SDE step count.
    pub sde_steps: usize,
    /// Master seed; every random draw of a run derives from it.
    pub seed: u64,
}

impl TestCaseConfig {
    /// Built-in presets: `testcase1`, `testcase2`, `testcase3` and their
    /// `-small` desk-scale variants.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = match name.trim_end_matches("-small") {
            "testcase1" => Self::testcase1(),
            "testcase2" => Self::testcase2(),
            "testcase3" => Self::testcase3(),
            _ => {
                return Err(FfError::Config(format!(
                    "unknown preset {name:?}; expected testcase1|testcase2|testcase3, \
                     optionally with a -small suffix"
                )))
            }
        };
        if name.ends_with("-small") {
            cfg.name = name.to_string();
            cfg.sde_steps = 50;
            match name.trim_end_matches("-small") {
                // The desk-scale run of the first problem keeps the full
                // ensemble and iteration counts; only the mesh and the
                // reverse-SDE resolution come down.
                "testcase1" => cfg.h = 1.0 / 20.0,
                "testcase2" => {
                    cfg.h = 1.0 / 12.0;
                    cfg.ensemble_size = 100;
                    cfg.n_particles = 30;
                    cfg.r_iterations = 2;
                }
                _ => {
                    cfg.h = 1.0 / 20.0;
                    cfg.ensemble_size = 100;
                    cfg.n_particles = 30;
                    cfg.r_iterations = 2;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn testcase1() -> Self {
        TestCaseConfig {
            name: "testcase1".into(),
            scenario: Scenario::FractureColumn {
                strip_height: 0.2,
                left_pressure: 0.0,
                right_pressure: 1.0,
                fracture_bottom: 1.0,
                fracture_top: 0.0,
            },
            variant: ModelVariant::ContinuousPressure,
            cell_kind: CellKind::Triangle,
            domain: [2.0, 1.0],
            x_gamma: 1.0,
            h: 1.0 / 40.0,
            medium: Medium::unit(1e-3),
            t_end: 1.0,
            ref_divisor: 800,
            nt_filter: 50,
            truth: [1.0, 1.0, 2.0],
            guess: [8.0, 8.0, 8.0],
            bounds: [[1e-6, 8.0]; 3],
            observation: ObservationKind::Full,
            obs_noise: 1e-3,
            model_noise: 1e-3,
            darcy_perturbation: 0.0,
            init_spread: 0.1,
            filter: FilterChoice::United,
            ensemble_size: 200,
            n_particles: 30,
            r_iterations: 3,
            enkf_ensemble: 100,
            sde_steps: 200,
            seed: 7,
        }
    }

    fn testcase2() -> Self {
        TestCaseConfig {
            name: "testcase2".into(),
            scenario: Scenario::CrossFracture {
                left_pressure: 1.0,
                right_pressure: 0.0,
            },
            variant: ModelVariant::GeneralInterface {
                xi: 1.0,
                across_band: [0.25, 0.75],
            },
            cell_kind: CellKind::Triangle,
            domain: [2.0, 1.0],
            x_gamma: 1.0,
            h: 1.0 / 40.0,
            medium: Medium::unit(1e-3),
            t_end: 1.0,
            ref_divisor: 800,
            nt_filter: 50,
            truth: [1.0, 1.0, 2000.0],
            guess: [8.0, 8.0, 3000.0],
            bounds: [[1e-6, 8.0], [1e-6, 8.0], [1.0, 6000.0]],
            observation: ObservationKind::MixedArctan { fraction: 0.5 },
            obs_noise: 1e-3,
            model_noise: 1e-3,
            darcy_perturbation: 0.0,
            init_spread: 0.1,
            filter: FilterChoice::United,
            ensemble_size: 200,
            n_particles: 50,
            r_iterations: 4,
            enkf_ensemble: 100,
            sde_steps: 200,
            seed: 7,
        }
    }

    fn testcase3() -> Self {
        TestCaseConfig {
            name: "testcase3".into(),
            scenario: Scenario::Transport {
                inlet_concentration: 1.0,
                darcy: DarcySpec {
                    conductivity: 9.92e-6,
                    fracture_conductivity: 3.15e-5,
                    pressure_drop: 1000.0,
                    ramp_slope: 0.05,
                },
            },
            variant: ModelVariant::AdvectionDiffusion,
            cell_kind: CellKind::Rectangle,
            domain: [2.0, 1.0],
            x_gamma: 1.0,
            h: 1.0 / 40.0,
            medium: Medium {
                porosity: [0.05, 0.05],
                fracture_porosity: 0.1,
                delta: 0.1,
            },
            t_end: 5.0,
            ref_divisor: 800,
            nt_filter: 50,
            truth: [1.0 / 3.15e-4, 1.0 / 3.15e-4, 1.0 / 9.92e-4],
            guess: [2000.0; 3],
            bounds: [[1.0, 10_000.0]; 3],
            observation: ObservationKind::MixedArctan { fraction: 0.5 },
            obs_noise: 1e-3,
            model_noise: 1e-3,
            darcy_perturbation: 1e-4,
            init_spread: 0.1,
            filter: FilterChoice::United,
            ensemble_size: 200,
            n_particles: 40,
            r_iterations: 4,
            enkf_ensemble: 100,
            sde_steps: 200,
            seed: 7,
        }
    }

    /// Reads and validates a configuration from a JSON file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TestCaseConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON rendering, the replay artifact of a run.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn dt_filter(&self) -> f64 {
        self.t_end / self.nt_filter as f64
    }

    pub fn dt_ref(&self) -> f64 {
        self.t_end / self.ref_divisor as f64
    }

    pub fn model_noise_std(&self) -> f64 {
        self.model_noise * self.dt_filter().sqrt()
    }

    pub fn obs_noise_std(&self) -> f64 {
        self.obs_noise * self.dt_filter().sqrt()
    }

    fn cells_along(&self, extent: f64, field: &str) -> Result<usize> {
        let n = extent / self.h;
        let rounded = n.round();
        if rounded < 1.0 || (n - rounded).abs() > 1e-9 * n.max(1.0) {
            return Err(FfError::Config(format!(
                "{field}: mesh size h={} does not divide the extent {extent}",
                self.h
            )));
        }
        Ok(rounded as usize)
    }

    pub fn mesh(&self) -> Result<Mesh> {
        let nx = self.cells_along(self.domain[0], "h")?;
        let ny = self.cells_along(self.domain[1], "h")?;
        build_mesh(
            self.domain[0],
            self.domain[1],
            nx,
            ny,
            self.x_gamma,
            self.cell_kind,
        )
    }

    /// Boundary data of the transport or flow problem the filters estimate.
    pub fn boundary(&self) -> BoundaryData {
        match self.scenario {
            Scenario::FractureColumn {
                strip_height,
                left_pressure,
                right_pressure,
                fracture_bottom,
                fracture_top,
            } => BoundaryData {
                outer: Arc::new(move |side, pos, _| match side {
                    BoundarySide::Left if pos[1] < strip_height => {
                        EdgeBc::Pressure(left_pressure)
                    }
                    BoundarySide::Right if pos[1] < strip_height => {
                        EdgeBc::Pressure(right_pressure)
                    }
                    _ => EdgeBc::NoFlow,
                }),
                fracture: [
                    FractureBc::constant(fracture_bottom),
                    FractureBc::constant(fracture_top),
                ],
            },
            Scenario::CrossFracture {
                left_pressure,
                right_pressure,
            } => BoundaryData {
                outer: Arc::new(move |side, _, _| match side {
                    BoundarySide::Left => EdgeBc::Pressure(left_pressure),
                    BoundarySide::Right => EdgeBc::Pressure(right_pressure),
                    _ => EdgeBc::NoFlow,
                }),
                fracture: [FractureBc::NoFlow, FractureBc::NoFlow],
            },
            Scenario::Transport {
                inlet_concentration,
                ..
            } => BoundaryData {
                outer: Arc::new(move |side, _, _| match side {
                    BoundarySide::Bottom => EdgeBc::Pressure(inlet_concentration),
                    BoundarySide::Top => EdgeBc::Pressure(0.0),
                    _ => EdgeBc::NoFlow,
                }),
                fracture: [
                    FractureBc::constant(inlet_concentration),
                    FractureBc::constant(0.0),
                ],
            },
        }
    }

    /// Volume sources; all built-in problems are boundary-driven.
    pub fn sources(&self) -> Sources {
        Sources::none()
    }

    /// Boundary data of the steady flow problem behind the transport
    /// scenario.
    pub fn darcy_boundary(&self) -> Option<BoundaryData> {
        let Scenario::Transport { darcy, .. } = self.scenario else {
            return None;
        };
        let x_gamma = self.x_gamma;
        Some(BoundaryData {
            outer: Arc::new(move |side, pos, _| match side {
                BoundarySide::Bottom => EdgeBc::Pressure(
                    darcy.pressure_drop
                        * (1.0 + darcy.ramp_slope * (pos[0] - x_gamma).abs()),
                ),
                BoundarySide::Top => EdgeBc::Pressure(0.0),
                _ => EdgeBc::NoFlow,
            }),
            fracture: [
                FractureBc::constant(darcy.pressure_drop),
                FractureBc::constant(0.0),
            ],
        })
    }

    /// Flow coefficients of the steady problem behind the transport
    /// scenario.
    pub fn darcy_coefficients(&self, mesh: &Mesh) -> Option<Coefficients> {
        let Scenario::Transport { darcy, .. } = self.scenario else {
            return None;
        };
        let n_seg = mesh.interface_edges.len();
        let delta = self.medium.delta;
        Some(Coefficients {
            k: [darcy.conductivity; 2],
            alpha_gamma: vec![darcy.fracture_conductivity * delta; n_seg],
            robin: Some(RobinCoupling {
                xi: 1.0,
                kappa: vec![2.0 * darcy.fracture_conductivity / delta; n_seg],
            }),
        })
    }

    /// Settings of the nested filter for this configuration.
    pub fn united(&self) -> UnitedFilterConfig {
        UnitedFilterConfig {
            r_iterations: self.r_iterations,
            ensemble_size: self.ensemble_size,
            n_particles: self.n_particles,
            schedule: DiffusionSchedule::new(self.sde_steps),
            batch_size: Some(SCORE_BATCH),
            model_noise_std: self.model_noise_std(),
            observation_noise_std: self.obs_noise_std(),
            guidance_floor: 1.0,
            likelihood: LikelihoodConfig::new(self.model_noise_std()),
            seed: self.seed,
        }
    }

    /// Settings of the Kalman baseline for this configuration.
    pub fn augenkf(&self) -> AugEnkfConfig {
        AugEnkfConfig::new(
            self.enkf_ensemble,
            self.model_noise_std(),
            self.obs_noise_std(),
            self.seed,
        )
    }

    /// Exploration noise for the parameter particles, derived from the
    /// guess.
    pub fn parameter_noise(&self) -> ParameterNoise {
        ParameterNoise::from_guess(&self.guess)
    }

    pub fn particle_bounds(&self) -> Vec<(f64, f64)> {
        self.bounds.iter().map(|b| (b[0], b[1])).collect()
    }

    fn aligned(&self, value: f64, field: &str) -> Result<()> {
        let cells = value / self.h;
        if (cells - cells.round()).abs() > 1e-9 * cells.abs().max(1.0) {
            return Err(FfError::Config(format!(
                "{field}: {value} must lie on a mesh line (h = {})",
                self.h
            )));
        }
        Ok(())
    }

    /// Checks every field, naming the offending one in the error.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| -> Result<()> {
            Err(FfError::Config(format!("{field}: {why}")))
        };
        if !(self.domain[0] > 0.0 && self.domain[1] > 0.0)
            || !self.domain.iter().all(|d| d.is_finite())
        {
            return fail("domain", format!("extent must be positive, got {:?}", self.domain));
        }
        if !(self.x_gamma > 0.0 && self.x_gamma < self.domain[0]) {
            return fail(
                "x_gamma",
                format!("fracture at {} outside the open domain", self.x_gamma),
            );
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return fail("h", format!("mesh size must be positive, got {}", self.h));
        }
        self.cells_along(self.domain[0], "h")?;
        self.cells_along(self.domain[1], "h")?;
        self.aligned(self.x_gamma, "x_gamma")?;
        if let ModelVariant::GeneralInterface { across_band, .. } = self.variant {
            self.aligned(across_band[0], "variant.across_band")?;
            self.aligned(across_band[1], "variant.across_band")?;
        }
        if let Scenario::FractureColumn { strip_height, .. } = self.scenario {
            self.aligned(strip_height, "scenario.strip_height")?;
        }
        let is_transport = matches!(self.scenario, Scenario::Transport { .. });
        let is_adv = self.variant == ModelVariant::AdvectionDiffusion;
        if is_transport != is_adv {
            return fail(
                "scenario",
                "the transport scenario and the advection-diffusion variant \
                 require each other"
                    .into(),
            );
        }
        if let Scenario::Transport { darcy, .. } = self.scenario {
            if !(darcy.conductivity > 0.0 && darcy.fracture_conductivity > 0.0) {
                return fail("scenario.darcy", "conductivities must be positive".into());
            }
            if !(darcy.pressure_drop.is_finite() && darcy.ramp_slope.is_finite()) {
                return fail("scenario.darcy", "pressure data must be finite".into());
            }
        }
        if !(self.medium.delta > 0.0 && self.medium.delta.is_finite()) {
            return fail(
                "medium.delta",
                format!("aperture must be positive, got {}", self.medium.delta),
            );
        }
        if self.medium.porosity.iter().any(|p| !(*p >= 0.0))
            || !(self.medium.fracture_porosity >= 0.0)
        {
            return fail("medium.porosity", "porosities must be nonnegative".into());
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return fail("t_end", format!("must be positive, got {}", self.t_end));
        }
        if self.nt_filter == 0 {
            return fail("nt_filter", "need at least one assimilation step".into());
        }
        if self.ref_divisor == 0 || self.ref_divisor % self.nt_filter != 0 {
            return fail(
                "ref_divisor",
                format!(
                    "the fine step t_end/{} must divide the filter step t_end/{}",
                    self.ref_divisor, self.nt_filter
                ),
            );
        }
        for (i, ((&t, &g), b)) in self
            .truth
            .iter()
            .zip(&self.guess)
            .zip(&self.bounds)
            .enumerate()
        {
            if !(t > 0.0 && t.is_finite()) {
                return fail("truth", format!("component {i} must be positive, got {t}"));
            }
            if !(b[0].is_finite() && b[1].is_finite() && b[0] < b[1]) {
                return fail("bounds", format!("component {i}: invalid box {b:?}"));
            }
            if !(g >= b[0] && g <= b[1]) {
                return fail(
                    "guess",
                    format!("component {i}: {g} outside the box {b:?}"),
                );
            }
            if !(t >= b[0] && t <= b[1]) {
                return fail(
                    "truth",
                    format!("component {i}: {t} outside the box {b:?}"),
                );
            }
        }
        match self.observation {
            ObservationKind::Full => {}
            ObservationKind::RandomMask { fraction }
            | ObservationKind::MixedArctan { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return fail(
                        "observation.fraction",
                        format!("must lie in (0, 1], got {fraction}"),
                    );
                }
            }
        }
        for (field, value) in [
            ("obs_noise", self.obs_noise),
            ("model_noise", self.model_noise),
            ("darcy_perturbation", self.darcy_perturbation),
            ("init_spread", self.init_spread),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return fail(field, format!("amplitude must be nonnegative, got {value}"));
            }
        }
        if self.darcy_perturbation != 0.0 && !is_transport {
            return fail(
                "darcy_perturbation",
                "only applies to the transport scenario".into(),
            );
        }
        if self.ensemble_size < 2 {
            return fail("ensemble_size", "need at least two members".into());
        }
        if self.n_particles == 0 {
            return fail("n_particles", "need at least one particle".into());
        }
        if self.r_iterations == 0 {
            return fail("r_iterations", "need at least one inner iteration".into());
        }
        if self.enkf_ensemble < 2 {
            return fail("enkf_ensemble", "need at least two members".into());
        }
        if self.sde_steps < 2 {
            return fail("sde_steps", "reverse SDE needs at least two steps".into());
        }
        Ok(())
    }
}
