//! Ground-truth data generation: FitzHugh-Nagumo reaction-diffusion on a
//! 1-D cable with configurable stimulation protocols, injected sparse
//! abnormal stimulations, and additive Gaussian noise.

mod protocol;

pub use protocol::{
    add_noise, inject_anomalies, make_protocol, AnomalyGroundTruth, ProtocolCase, StimEvent,
    StimKind, StimulationSchedule, ANOMALY_DURATION_FRAMES, ANOMALY_WIDTH_CELLS,
    STIM_DURATION_MS, STIM_WIDTH_CELLS,
};

use crate::field::SpatioTemporalField;
use crate::{Error, Result};

/// FitzHugh-Nagumo reaction parameters:
/// du/dt = D d2u/ds2 + u - cubic_scale*u^3 - v + c(t,s)
/// dv/dt = epsilon*(u + beta - gamma*v)
#[derive(Debug, Clone, PartialEq)]
pub struct FhnParams {
    pub epsilon: f64,
    pub beta: f64,
    pub gamma: f64,
    pub cubic_scale: f64,
}

impl Default for FhnParams {
    fn default() -> Self {
        // classical textbook constants
        FhnParams {
            epsilon: 0.08,
            beta: 0.7,
            gamma: 0.8,
            cubic_scale: 1.0 / 3.0,
        }
    }
}

impl FhnParams {
    /// Resting fixed point (u0, v0): the intersection of the nullclines,
    /// found by Newton iteration on u - c*u^3 - (u+beta)/gamma.
    pub fn rest_state(&self) -> (f64, f64) {
        let mut u: f64 = -1.2;
        for _ in 0..100 {
            let f = u - self.cubic_scale * u.powi(3) - (u + self.beta) / self.gamma;
            let df = 1.0 - 3.0 * self.cubic_scale * u * u - 1.0 / self.gamma;
            let step = f / df;
            u -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        (u, (u + self.beta) / self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CableConfig {
    pub n_cells: usize,
    /// Integration step, ms.
    pub dt_internal: f64,
    /// Recording step, ms.
    pub dt_record: f64,
    /// Diffusion coefficient in cell^2/ms (unit cell spacing).
    pub diffusion: f64,
    pub fhn: FhnParams,
    /// Total simulated time, ms.
    pub duration: f64,
    pub rng_seed: u64,
}

impl Default for CableConfig {
    fn default() -> Self {
        // Diffusion calibrated via the wave-speed oracle: a pulse crosses
        // 1500 cells in roughly 500 ms at these constants.
        CableConfig {
            n_cells: 1500,
            dt_internal: 0.0025,
            dt_record: 1.0,
            diffusion: 18.0,
            fhn: FhnParams::default(),
            duration: 1000.0,
            rng_seed: 0,
        }
    }
}

impl CableConfig {
    pub fn stability_ratio(&self) -> f64 {
        self.diffusion * self.dt_internal // ds = 1 cell
    }

    pub fn steps_per_record(&self) -> usize {
        (self.dt_record / self.dt_internal).round() as usize
    }

    pub fn n_frames(&self) -> usize {
        (self.duration / self.dt_record).round() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells < 3 {
            return Err(Error::Config("cable needs at least 3 cells".into()));
        }
        if self.dt_internal <= 0.0 || self.dt_record <= 0.0 || self.duration <= 0.0 {
            return Err(Error::Config("time steps and duration must be positive".into()));
        }
        if self.dt_internal > self.dt_record {
            return Err(Error::Config("dt_internal must not exceed dt_record".into()));
        }
        let ratio = self.dt_record / self.dt_internal;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::Config(
                "dt_record must be an integer multiple of dt_internal".into(),
            ));
        }
        if self.stability_ratio() >= 0.5 {
            return Err(Error::Config(format!(
                "stability bound violated: D*dt/ds^2 = {} >= 0.5",
                self.stability_ratio()
            )));
        }
        Ok(())
    }
}

const BLOWUP_BOUND: f64 = 1e3;

/// Explicit-Euler FitzHugh-Nagumo cable with central differences in space
/// and zero-flux (Neumann) boundaries, recorded at the dt_record cadence.
pub fn simulate(
    config: &CableConfig,
    schedule: &StimulationSchedule,
) -> Result<SpatioTemporalField> {
    config.validate()?;
    schedule.validate(config)?;
    let n = config.n_cells;
    let (u0, v0) = config.fhn.rest_state();
    let mut u = vec![u0; n];
    let mut v = vec![v0; n];
    let mut u_next = vec![0.0; n];

    let n_frames = config.n_frames();
    let ratio = config.steps_per_record();
    let mut field = SpatioTemporalField::zeros(n_frames, n, config.dt_record);
    field.frame_mut(0).copy_from_slice(&u);

    let dt = config.dt_internal;
    let d = config.diffusion;
    let FhnParams {
        epsilon,
        beta,
        gamma,
        cubic_scale,
    } = config.fhn;

    let mut stim = vec![0.0; n];
    for frame in 1..n_frames {
        for sub in 0..ratio {
            let t_now = ((frame - 1) * ratio + sub) as f64 * dt;

            stim.iter_mut().for_each(|x| *x = 0.0);
            for ev in schedule.active_at(t_now) {
                for s in ev.cell_start..(ev.cell_start + ev.n_cells).min(n) {
                    stim[s] += ev.amplitude;
                }
            }

            for s in 0..n {
                let left = u[s.saturating_sub(1)];
                let right = u[(s + 1).min(n - 1)];
                let lap = left - 2.0 * u[s] + right;
                let us = u[s];
                let du = d * lap + us - cubic_scale * us * us * us - v[s] + stim[s];
                u_next[s] = us + dt * du;
                v[s] += dt * epsilon * (us + beta - gamma * v[s]);
            }
            std::mem::swap(&mut u, &mut u_next);
        }
        if u.iter().any(|x| x.abs() > BLOWUP_BOUND) {
            return Err(Error::Instability {
                bound: BLOWUP_BOUND,
                ratio: config.stability_ratio(),
            });
        }
        field.frame_mut(frame).copy_from_slice(&u);
    }
    Ok(field)
}

/// Wall-clock comparable single recorded step of the FD simulator: advances
/// the given state by dt_record (all internal sub-steps), no stimulus.
pub fn step_once(config: &CableConfig, u: &mut [f64], v: &mut [f64]) {
    let n = u.len();
    let dt = config.dt_internal;
    let d = config.diffusion;
    let FhnParams {
        epsilon,
        beta,
        gamma,
        cubic_scale,
    } = config.fhn;
    let mut u_next = vec![0.0; n];
    for _ in 0..config.steps_per_record() {
        for s in 0..n {
            let left = u[s.saturating_sub(1)];
            let right = u[(s + 1).min(n - 1)];
            let lap = left - 2.0 * u[s] + right;
            let us = u[s];
            let du = d * lap + us - cubic_scale * us * us * us - v[s];
            u_next[s] = us + dt * du;
            v[s] += dt * epsilon * (us + beta - gamma * v[s]);
        }
        u.copy_from_slice(&u_next);
    }
}
