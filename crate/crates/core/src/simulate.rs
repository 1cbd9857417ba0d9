//! Implicit Euler integration of the reaction-diffusion system.
//!
//! Each outer step solves `v⁺ = (I + hD L)⁻¹ (v + h f(v⁺))` by fixed-point
//! iteration; the linear part is applied per species with the spectral
//! solver. Steady state is declared when `‖f(v) − D L v‖_∞ ≤ eps_outer`,
//! checked every `check_interval` time units.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{laplacian_into, SpectralOperator, SpectralWorkspace, TorusGrid};
use crate::model::{GiererMeinhardt, GmParams, ReactionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub h: f64,
    pub eps_inner: f64,
    pub eps_outer: f64,
    pub t_final: f64,
    pub check_interval: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
    pub max_inner_iters: usize,
    pub max_halvings: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            h: 0.2,
            eps_inner: 1e-3,
            eps_outer: 1e-6,
            t_final: 2000.0,
            check_interval: 100.0,
            noise_amplitude: 0.01,
            seed: 0,
            max_inner_iters: 100,
            max_halvings: 6,
        }
    }
}

impl SimConfig {
    /// Defaults with the final time used for a given grid side
    /// (2000 up to 64×64, 5000 beyond).
    pub fn for_grid(side: usize) -> Self {
        Self {
            t_final: if side > 64 { 5000.0 } else { 2000.0 },
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("eps_inner", self.eps_inner),
            ("eps_outer", self.eps_outer),
            ("t_final", self.t_final),
            ("check_interval", self.check_interval),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.check_interval > self.t_final {
            return Err(Error::Config("check_interval must not exceed t_final".into()));
        }
        if !(self.noise_amplitude >= 0.0) {
            return Err(Error::Config("noise_amplitude must be nonnegative".into()));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::Config("max_inner_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Species concentrations on a torus grid at some model time.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternField {
    pub grid: TorusGrid,
    pub species: Vec<Vec<f64>>,
    pub params: GmParams,
    pub elapsed_time: f64,
    pub converged: bool,
}

impl PatternField {
    pub fn new(grid: TorusGrid, species: Vec<Vec<f64>>, params: GmParams) -> Result<Self> {
        let field = Self {
            grid,
            species,
            params,
            elapsed_time: 0.0,
            converged: false,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.is_empty() {
            return Err(Error::Format("pattern has no species".into()));
        }
        for s in &self.species {
            if s.len() != self.grid.len() {
                return Err(Error::shape(self.grid.len(), s.len()));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("pattern contains non-finite values".into()));
            }
        }
        Ok(())
    }

    pub fn species(&self, index: usize) -> Result<&[f64]> {
        self.species.get(index).map(Vec::as_slice).ok_or(Error::Index {
            index,
            len: self.species.len(),
        })
    }

    /// Spatial standard deviation over the mean of one species.
    pub fn coefficient_of_variation(&self, index: usize) -> Result<f64> {
        Ok(coefficient_of_variation(self.species(index)?))
    }
}

pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean.abs()
}

/// `u_i(v) = u_i* (1 + η ξ_v)` with `ξ_v` uniform on `[−1, 1]`.
pub fn initial_condition(
    model: &dyn ReactionModel,
    params: &GmParams,
    grid: TorusGrid,
    noise_amplitude: f64,
    seed: u64,
) -> Result<PatternField> {
    let u_star = model.equilibrium()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let species = u_star
        .iter()
        .map(|&u| {
            (0..grid.len())
                .map(|_| u * (1.0 + noise_amplitude * rng.gen_range(-1.0..=1.0)))
                .collect()
        })
        .collect();
    PatternField::new(grid, species, *params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepFailure {
    NonFinite,
    InnerNotConverged,
}

/// Fixed-point implicit Euler stepper for one step size.
pub struct Integrator<'m> {
    model: &'m dyn ReactionModel,
    grid: TorusGrid,
    h: f64,
    diffusion: Vec<f64>,
    ops: Vec<SpectralOperator>,
    ws: Vec<SpectralWorkspace>,
    rhs: Vec<f64>,
    node_u: Vec<f64>,
    node_f: Vec<f64>,
}

impl<'m> Integrator<'m> {
    pub fn new(model: &'m dyn ReactionModel, grid: TorusGrid, h: f64) -> Result<Self> {
        let diffusion = model.diffusion();
        let ops = diffusion
            .iter()
            .map(|d| SpectralOperator::new(grid, h * d))
            .collect::<Result<Vec<_>>>()?;
        let ws = ops.iter().map(SpectralWorkspace::new).collect();
        let n = model.species_count();
        Ok(Self {
            model,
            grid,
            h,
            diffusion,
            ops,
            ws,
            rhs: vec![0.0; grid.len()],
            node_u: vec![0.0; n],
            node_f: vec![0.0; n],
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    fn reaction_field(&mut self, state: &[Vec<f64>], out: &mut [Vec<f64>]) {
        for v in 0..self.grid.len() {
            for (i, s) in state.iter().enumerate() {
                self.node_u[i] = s[v];
            }
            self.model.reaction_unchecked(&self.node_u, &mut self.node_f);
            for (i, o) in out.iter_mut().enumerate() {
                o[v] = self.node_f[i];
            }
        }
    }

    /// One fixed-point update `(I + hδ_i L)⁻¹ (v_i + h f_i(iterate))` for every
    /// species; writes into `out`.
    pub fn inner_step(
        &mut self,
        state: &[Vec<f64>],
        iterate: &[Vec<f64>],
        out: &mut [Vec<f64>],
    ) -> std::result::Result<(), StepFailure> {
        self.reaction_field(iterate, out);
        for i in 0..state.len() {
            for ((r, &s), &f) in self.rhs.iter_mut().zip(&state[i]).zip(&out[i]) {
                *r = s + self.h * f;
            }
            self.ops[i]
                .solve_into(&self.rhs, &mut out[i], &mut self.ws[i])
                .expect("buffers sized to the grid");
        }
        if out.iter().flatten().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(StepFailure::NonFinite)
        }
    }

    /// Iterates [`Self::inner_step`] from `state` until the relative change
    /// drops to `eps_inner`. Returns the new state and the iteration count.
    pub fn outer_step(
        &mut self,
        state: &[Vec<f64>],
        eps_inner: f64,
        max_inner_iters: usize,
    ) -> std::result::Result<(Vec<Vec<f64>>, usize), StepFailure> {
        let mut iterate = state.to_vec();
        let mut next = state.to_vec();
        for l in 1..=max_inner_iters {
            self.inner_step(state, &iterate, &mut next)?;
            let (mut diff, mut norm) = (0.0, 0.0);
            for (a, b) in next.iter().flatten().zip(iterate.iter().flatten()) {
                diff += (a - b) * (a - b);
                norm += b * b;
            }
            std::mem::swap(&mut iterate, &mut next);
            if diff.sqrt() <= eps_inner * norm.sqrt() {
                return Ok((iterate, l));
            }
        }
        Err(StepFailure::InnerNotConverged)
    }

    /// `‖f(v) − D L v‖_∞`, the steady-state residual (`L` positive semidefinite).
    pub fn steady_residual(&mut self, state: &[Vec<f64>]) -> f64 {
        let mut f = vec![vec![0.0; self.grid.len()]; state.len()];
        self.reaction_field(state, &mut f);
        let mut lap = vec![0.0; self.grid.len()];
        let mut worst = 0.0f64;
        for (i, s) in state.iter().enumerate() {
            laplacian_into(&self.grid, s, &mut lap);
            for (fv, lv) in f[i].iter().zip(&lap) {
                worst = worst.max((fv - self.diffusion[i] * lv).abs());
            }
        }
        worst
    }
}

/// Integrates from a perturbed equilibrium until steady state or `t_final`.
pub fn simulate(
    model: &dyn ReactionModel,
    params: &GmParams,
    grid: TorusGrid,
    config: &SimConfig,
) -> Result<PatternField> {
    config.validate()?;
    let init = initial_condition(model, params, grid, config.noise_amplitude, config.seed)?;
    simulate_from(model, init, config)
}

/// Same as [`simulate`] but from a given initial field.
pub fn simulate_from(model: &dyn ReactionModel, init: PatternField, config: &SimConfig) -> Result<PatternField> {
    config.validate()?;
    if init.species.len() != model.species_count() {
        return Err(Error::shape(model.species_count(), init.species.len()));
    }
    let grid = init.grid;
    let params = init.params;
    let mut state = init.species;
    let mut integrator = Integrator::new(model, grid, config.h)?;
    let mut halvings = 0u32;
    let mut t = 0.0f64;
    let mut next_check = config.check_interval;
    let mut converged = false;
    let t_end = config.t_final * (1.0 - 1e-12);

    while t < t_end {
        match integrator.outer_step(&state, config.eps_inner, config.max_inner_iters) {
            Ok((next, _iters)) => {
                state = next;
                t += integrator.h();
            }
            Err(failure) => {
                halvings += 1;
                if halvings > config.max_halvings {
                    return Err(Error::SimulationFailure {
                        time: t,
                        halvings: halvings - 1,
                        last_state: Box::new(PatternField {
                            grid,
                            species: state,
                            params,
                            elapsed_time: t,
                            converged: false,
                        }),
                    });
                }
                let h = integrator.h() / 2.0;
                debug!("{failure:?} at t = {t}; halving step to {h}");
                integrator = Integrator::new(model, grid, h)?;
                continue;
            }
        }
        if t >= next_check * (1.0 - 1e-12) {
            next_check += config.check_interval;
            let residual = integrator.steady_residual(&state);
            if residual <= config.eps_outer {
                converged = true;
                break;
            }
        }
    }

    let negatives = state.iter().flatten().filter(|&&x| x <= 0.0).count();
    if negatives > 0 {
        warn!("{negatives} nonpositive concentrations at t = {t} for {params:?}");
    }
    Ok(PatternField {
        grid,
        species: state,
        params,
        elapsed_time: t,
        converged,
    })
}

/// [`simulate`] for the Gierer-Meinhardt model.
pub fn simulate_gm(params: &GmParams, grid: TorusGrid, config: &SimConfig) -> Result<PatternField> {
    let model = GiererMeinhardt::new(*params)?;
    simulate(&model, params, grid, config)
}
