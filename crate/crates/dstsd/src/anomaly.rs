//! Buffer-window inverse problem: given a trained model and a short window
//! of observations, estimate sparse anomaly coefficients per window step by
//! proximal gradient (gradient step + soft threshold) on the windowed
//! squared loss. The model is frozen; within the window its inputs are the
//! observed frames (measured but not yet adjudicated) and the mean estimate
//! is rebased to the last adjudicated observation, which makes the loss
//! quadratic in the coefficients.

use crate::field::SpatioTemporalField;
use crate::metamodel::{InferState, Metamodel};
use crate::phase1::soft_threshold;
use crate::spline::SplineBasis;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Estimated anomaly coefficients theta_{a,t} for t = start .. start+w.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyCoefficients {
    pub start: usize,
    pub theta: Vec<Vec<f64>>,
}

impl AnomalyCoefficients {
    pub fn zeros(start: usize, steps: usize, m: usize) -> Self {
        AnomalyCoefficients {
            start,
            theta: vec![vec![0.0; m]; steps],
        }
    }

    /// Fraction of exactly-zero entries.
    pub fn sparsity(&self) -> f64 {
        let total: usize = self.theta.iter().map(|t| t.len()).sum();
        if total == 0 {
            return 1.0;
        }
        let zeros: usize = self
            .theta
            .iter()
            .flat_map(|t| t.iter())
            .filter(|v| **v == 0.0)
            .count();
        zeros as f64 / total as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,basis_index,value")?;
        for (i, row) in self.theta.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                writeln!(w, "{},{},{}", self.start + i, j, v)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One buffer-window instance: adjudicate frame `start` (= T) with w extra
/// lookahead frames. `observations` carries y_{T-1} .. y_{T+w} (w+2
/// frames); `regular` carries the known stimulus increments r_T .. r_{T+w};
/// `warm` is the model state before consuming y_{T-1}.
pub struct WindowProblem {
    pub start: usize,
    pub observations: SpatioTemporalField,
    pub regular: SpatioTemporalField,
    pub warm: InferState,
}

impl WindowProblem {
    /// Buffer width w.
    pub fn width(&self) -> Result<usize> {
        if self.observations.n_time < 2 {
            return Err(Error::InvalidArgument(
                "window needs at least 2 observation frames".into(),
            ));
        }
        let w = self.observations.n_time - 2;
        if self.regular.n_time != w + 1 {
            return Err(Error::ShapeMismatch(format!(
                "regular increments cover {} frames, window needs {}",
                self.regular.n_time,
                w + 1
            )));
        }
        Ok(w)
    }
}

/// Anomaly-free window residuals e_t = y_t - mu_t|theta=0 for t = T..T+w,
/// with mu rebased to y_{T-1} and the model fed observed frames.
pub fn anomaly_free_residuals(
    problem: &WindowProblem,
    model: &Metamodel,
) -> Result<Vec<Vec<f64>>> {
    let w = problem.width()?;
    let p = problem.observations.n_space;
    let mut state = problem.warm.clone();
    let mut mu = problem.observations.frame(0).to_vec();
    let mut out = Vec::with_capacity(w + 1);
    for i in 0..=w {
        let g = model.infer_step(&mut state, problem.observations.frame(i))?;
        let r = problem.regular.frame(i);
        let y_next = problem.observations.frame(i + 1);
        let mut e = vec![0.0; p];
        for s in 0..p {
            mu[s] += g[s] + r[s];
            e[s] = y_next[s] - mu[s];
        }
        out.push(e);
    }
    Ok(out)
}

/// Windowed squared loss sum_t ||y_t - mu_t(theta)||^2 evaluated on a tape;
/// also returns the gradient with respect to every theta_{a,t}. Slow path,
/// kept as the reference the fast quadratic solver is checked against.
pub fn windowed_loss_grad(
    problem: &WindowProblem,
    coeffs: &AnomalyCoefficients,
    model: &Metamodel,
    basis: &SplineBasis,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let w = problem.width()?;
    if coeffs.theta.len() != w + 1 {
        return Err(Error::ShapeMismatch(format!(
            "coefficients cover {} steps, window needs {}",
            coeffs.theta.len(),
            w + 1
        )));
    }
    let p = problem.observations.n_space;
    if basis.p != p {
        return Err(Error::ShapeMismatch("basis rows must match cable size".into()));
    }
    let mut tape = Tape::new();
    let ids = model.register_params(&mut tape);
    let mut state = model.state_from_infer(&mut tape, &problem.warm)?;
    let b_mat = tape.leaf(Tensor::new(vec![p, basis.m], basis.matrix.clone())?);

    let mut mu = tape.leaf(Tensor::vector(problem.observations.frame(0).to_vec()));
    let mut theta_ids = Vec::with_capacity(w + 1);
    let mut loss = None;
    for i in 0..=w {
        let input = tape.leaf(Tensor::vector(problem.observations.frame(i).to_vec()));
        let g = model.step(&mut tape, &ids, &mut state, input)?;
        let th = tape.leaf(Tensor::vector(coeffs.theta[i].clone()));
        theta_ids.push(th);
        let a = tape.matvec(b_mat, th)?;
        let r = tape.leaf(Tensor::vector(problem.regular.frame(i).to_vec()));
        let mu_g = tape.add(mu, g)?;
        let mu_a = tape.add(mu_g, a)?;
        mu = tape.add(mu_a, r)?;
        let y = tape.leaf(Tensor::vector(problem.observations.frame(i + 1).to_vec()));
        let d = tape.sub(y, mu)?;
        let term = tape.sum_sq(d);
        loss = Some(match loss {
            Some(l) => tape.add(l, term)?,
            None => term,
        });
    }
    let loss = loss.expect("window has at least one step");
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let theta_grads = theta_ids
        .iter()
        .map(|id| grads.wrt_or_zero(*id, &[basis.m]).data)
        .collect();
    Ok((value, theta_grads))
}

pub fn windowed_loss(
    problem: &WindowProblem,
    coeffs: &AnomalyCoefficients,
    model: &Metamodel,
    basis: &SplineBasis,
) -> Result<f64> {
    windowed_loss_grad(problem, coeffs, model, basis).map(|(v, _)| v)
}

/// Proximal-gradient solve of min_theta sum_t ||e_t - B S_t||^2 +
/// gamma sum_t ||theta_t||_1 with S_t the running coefficient sum. One
/// iteration per epoch: theta <- S_{c*gamma}(theta - c * grad), the exact
/// proximal step for the L1 term at step size c (S_{gamma/2} at c = 1/2).
/// Returns the iterates' penalized objective trace (monitored, not
/// guaranteed to be monotone).
pub fn prox_solve(
    e: &[Vec<f64>],
    basis: &SplineBasis,
    gamma: f64,
    c: f64,
    epochs: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if gamma <= 0.0 || c <= 0.0 {
        return Err(Error::InvalidArgument(
            "prox solve needs gamma > 0 and step c > 0".into(),
        ));
    }
    let n = e.len();
    let m = basis.m;
    let mut theta = vec![vec![0.0; m]; n];
    let mut trace = Vec::with_capacity(epochs + 1);

    let objective = |theta: &[Vec<f64>]| -> f64 {
        let mut s = vec![0.0; m];
        let mut acc = 0.0;
        for (t, th) in theta.iter().enumerate() {
            for (si, v) in s.iter_mut().zip(th) {
                *si += v;
            }
            let fit = basis.apply(&s);
            acc += e[t]
                .iter()
                .zip(&fit)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            acc += gamma * th.iter().map(|v| v.abs()).sum::<f64>();
        }
        acc
    };
    trace.push(objective(&theta));

    for _ in 0..epochs {
        // residual projections d_t = B^T (e_t - B S_t)
        let mut s = vec![0.0; m];
        let mut d = Vec::with_capacity(n);
        for (t, th) in theta.iter().enumerate() {
            for (si, v) in s.iter_mut().zip(th) {
                *si += v;
            }
            let fit = basis.apply(&s);
            let resid: Vec<f64> = e[t].iter().zip(&fit).map(|(a, b)| a - b).collect();
            d.push(basis.apply_transpose(&resid));
        }
        // suffix sums: grad_tau = -2 sum_{t >= tau} d_t
        let mut suffix = vec![0.0; m];
        for tau in (0..n).rev() {
            for (sf, dv) in suffix.iter_mut().zip(&d[tau]) {
                *sf += dv;
            }
            for (th, sf) in theta[tau].iter_mut().zip(&suffix) {
                let stepped = *th + 2.0 * c * sf;
                *th = soft_threshold(stepped, c * gamma);
                if !th.is_finite() {
                    return Err(Error::Numerical("non-finite proximal iterate".into()));
                }
            }
        }
        trace.push(objective(&theta));
    }
    Ok((theta, trace))
}

/// Full window estimation: anomaly-free residuals via the fast value path,
/// then the proximal iteration. Coefficients start all-zero.
pub fn estimate_window(
    problem: &WindowProblem,
    model: &Metamodel,
    basis: &SplineBasis,
    gamma: f64,
    c: f64,
    epochs: usize,
) -> Result<(AnomalyCoefficients, Vec<f64>)> {
    let e = anomaly_free_residuals(problem, model)?;
    let (theta, trace) = prox_solve(&e, basis, gamma, c, epochs)?;
    Ok((
        AnomalyCoefficients {
            start: problem.start,
            theta,
        },
        trace,
    ))
}
