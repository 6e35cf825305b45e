//! High-level forward model: variant + mesh + data, with cached factorized
//! operators.
//!
//! Filters step many ensemble members with the same parameter vector and time
//! step, so factorizations are cached by the bit patterns of (theta, dt) and
//! evicted least-recently-used. The model is deliberately single-threaded;
//! determinism of whole experiments is a hard requirement.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::assemble::{advance, assemble_operator, AdvectionOperator, Operator};
use crate::bc::{BoundaryData, Sources};
use crate::error::{FfError, Result};
use crate::mesh::{build_dof_map, DofMap, Mesh};
use crate::model::{Medium, ModelVariant};

const CACHE_CAPACITY: usize = 128;

type CacheKey = (u64, u64, u64, u64);

struct Cache {
    map: BTreeMap<CacheKey, (u64, Rc<Operator>)>,
    stamp: u64,
}

pub struct ForwardModel {
    pub mesh: Mesh,
    pub dofs: DofMap,
    pub variant: ModelVariant,
    pub medium: Medium,
    pub bc: BoundaryData,
    pub sources: Sources,
    pub advection: Option<AdvectionOperator>,
    cache: RefCell<Cache>,
}

impl ForwardModel {
    pub fn new(
        mesh: Mesh,
        variant: ModelVariant,
        medium: Medium,
        bc: BoundaryData,
        sources: Sources,
    ) -> Self {
        let dofs = build_dof_map(&mesh);
        ForwardModel {
            mesh,
            dofs,
            variant,
            medium,
            bc,
            sources,
            advection: None,
            cache: RefCell::new(Cache {
                map: BTreeMap::new(),
                stamp: 0,
            }),
        }
    }

    pub fn with_advection(mut self, advection: AdvectionOperator) -> Self {
        self.advection = Some(advection);
        self
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.n_dofs
    }

    /// Factorized one-step operator for (theta, dt), cached.
    pub fn operator(&self, theta: &[f64], dt: f64) -> Result<Rc<Operator>> {
        crate::error::check_len("parameter vector", 3, theta.len())?;
        let key = (
            theta[0].to_bits(),
            theta[1].to_bits(),
            theta[2].to_bits(),
            dt.to_bits(),
        );
        {
            let mut cache = self.cache.borrow_mut();
            cache.stamp += 1;
            let stamp = cache.stamp;
            if let Some(entry) = cache.map.get_mut(&key) {
                entry.0 = stamp;
                return Ok(entry.1.clone());
            }
        }
        let coeffs = self
            .variant
            .coefficients(&self.mesh, theta, self.medium.delta)?;
        let op = Rc::new(assemble_operator(
            &self.mesh,
            &self.dofs,
            &coeffs,
            &self.medium,
            dt,
            &self.bc,
            self.advection.as_ref(),
        )?);
        let mut cache = self.cache.borrow_mut();
        let stamp = cache.stamp;
        cache.map.insert(key, (stamp, op.clone()));
        if cache.map.len() > CACHE_CAPACITY {
            let oldest = cache
                .map
                .iter()
                .min_by_key(|(_, (s, _))| *s)
                .map(|(&k, _)| k)
                .expect("cache is non-empty");
            cache.map.remove(&oldest);
        }
        Ok(op)
    }

    /// One backward-Euler step from `prev` to time `t` with step `dt`.
    pub fn step(&self, prev: &[f64], theta: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
        let op = self.operator(theta, dt)?;
        advance(
            &self.mesh,
            &self.dofs,
            &op,
            &self.bc,
            &self.sources,
            self.advection.as_ref(),
            prev,
            t,
        )
    }

    /// Runs the model at a fine step and keeps `nt` evenly spaced snapshots.
    ///
    /// Returns `nt + 1` states; entry 0 is the initial state at `t0` and
    /// entry i the state at t0 + i (t_end - t0) / nt. The span of a snapshot
    /// must be a whole number of fine steps.
    pub fn reference_solve(
        &self,
        theta: &[f64],
        init: &[f64],
        t0: f64,
        t_end: f64,
        dt_fine: f64,
        nt: usize,
    ) -> Result<Vec<Vec<f64>>> {
        crate::error::check_len("initial state", self.n_dofs(), init.len())?;
        if nt == 0 || !(t_end > t0) {
            return Err(FfError::Config(format!(
                "need a positive span and at least one snapshot, got [{t0}, {t_end}] with {nt}"
            )));
        }
        let span = (t_end - t0) / nt as f64;
        let per = span / dt_fine;
        let steps_per = per.round() as usize;
        if steps_per == 0 || (per - steps_per as f64).abs() > 1e-9 * per.max(1.0) {
            return Err(FfError::Config(format!(
                "fine step {dt_fine} does not divide the snapshot interval {span}"
            )));
        }
        let mut snapshots = Vec::with_capacity(nt + 1);
        snapshots.push(init.to_vec());
        let mut state = init.to_vec();
        for i in 0..nt {
            for s in 0..steps_per {
                let step_index = i * steps_per + s + 1;
                let t = t0 + step_index as f64 * dt_fine;
                state = self.step(&state, theta, t, dt_fine)?;
            }
            snapshots.push(state.clone());
        }
        Ok(snapshots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bc::BoundaryData;
    use crate::mesh::{build_mesh, CellKind};

    fn small_model() -> ForwardModel {
        let mesh = build_mesh(2.0, 1.0, 4, 2, 1.0, CellKind::Triangle).unwrap();
        ForwardModel::new(
            mesh,
            ModelVariant::ContinuousPressure,
            Medium::unit(1e-3),
            BoundaryData::uniform_pressure(1.0),
            Sources::none(),
        )
    }

    #[test]
    fn operators_are_cached_and_reused() {
        let model = small_model();
        let a = model.operator(&[1.0, 1.0, 2.0], 0.1).unwrap();
        let b = model.operator(&[1.0, 1.0, 2.0], 0.1).unwrap();
        assert!(Rc::ptr_eq(&a, &b));
        let c = model.operator(&[1.0, 1.0, 2.0], 0.2).unwrap();
        assert!(!Rc::ptr_eq(&a, &c));
    }

    #[test]
    fn reference_snapshots_subsample_the_fine_run() {
        let model = small_model();
        let theta = [1.0, 1.0, 2.0];
        let init = vec![0.0; model.n_dofs()];
        // 50 snapshots over [0, 1] at a fine step of 1/800: every 16th step.
        let snaps = model
            .reference_solve(&theta, &init, 0.0, 1.0, 1.0 / 800.0, 50)
            .unwrap();
        assert_eq!(snaps.len(), 51);

        let mut state = init.clone();
        for n in 1..=32 {
            state = model
                .step(&state, &theta, n as f64 / 800.0, 1.0 / 800.0)
                .unwrap();
        }
        for (a, b) in snaps[2].iter().zip(&state) {
            assert_eq!(a, b, "snapshot 2 must equal fine step 32 exactly");
        }
    }

    #[test]
    fn misaligned_fine_step_is_rejected() {
        let model = small_model();
        let init = vec![0.0; model.n_dofs()];
        let err = model.reference_solve(&[1.0, 1.0, 2.0], &init, 0.0, 1.0, 0.003, 50);
        assert!(matches!(err, Err(FfError::Config(_))));
    }
}
