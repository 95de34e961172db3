//! Offline (Phase-I) robust training: the penalized decomposition loss, its
//! Huber reformulation, outlier coefficient extraction, the smoothness
//! penalty, and the lambda/gamma tuning procedures.

use crate::field::SpatioTemporalField;
use crate::metamodel::Metamodel;
use crate::spline::SplineBasis;
use crate::tensor::{clip_grad_norm, OptimizerKind, OptimizerState, Tape, Tensor};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Huber loss: x^2 for |x| <= gamma/2, else gamma|x| - gamma^2/4.
pub fn huber(x: f64, gamma: f64) -> f64 {
    debug_assert!(gamma > 0.0);
    if x.abs() <= gamma / 2.0 {
        x * x
    } else {
        gamma * x.abs() - gamma * gamma / 4.0
    }
}

/// Soft thresholding S_tau(x) = sgn(x) (|x| - tau)_+.
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    x.signum() * (x.abs() - tau).max(0.0)
}

pub fn soft_threshold_slice(xs: &mut [f64], tau: f64) {
    for x in xs {
        *x = soft_threshold(*x, tau);
    }
}

/// The banded second-order difference operator D with rows (1, -2, 1),
/// applied as an operator; R = D^T D.
pub struct SecondDiffOperator;

impl SecondDiffOperator {
    /// D mu: length p-2.
    pub fn apply(mu: &[f64]) -> Vec<f64> {
        (0..mu.len().saturating_sub(2))
            .map(|i| mu[i] - 2.0 * mu[i + 1] + mu[i + 2])
            .collect()
    }
}

/// lambda * mu^T D^T D mu = lambda * sum of squared second differences.
pub fn smoothness_penalty(mu: &[f64], lambda: f64) -> Result<f64> {
    if mu.len() < 3 {
        return Err(Error::InvalidArgument(
            "smoothness penalty needs at least 3 spatial points".into(),
        ));
    }
    Ok(lambda
        * SecondDiffOperator::apply(mu)
            .iter()
            .map(|d| d * d)
            .sum::<f64>())
}

/// Entrywise S_{gamma/2} of a residual frame: the closed-form Phase-I
/// outlier coefficients for the identity basis.
pub fn extract_outliers(residual: &[f64], gamma: f64) -> Vec<f64> {
    residual
        .iter()
        .map(|&r| soft_threshold(r, gamma / 2.0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Phase1Config {
    /// Smoothness weight on the recursive mean estimate.
    pub lambda: f64,
    /// Huber width / sparsity parameter.
    pub gamma: f64,
    pub sgd_epochs: usize,
    pub adamw_epochs: usize,
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub adamw_lr: f64,
    pub clip_max_norm: f64,
    /// Contiguous sub-sequence length per gradient step (also the
    /// truncated-backpropagation length).
    pub chunk_len: usize,
    pub rng_seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            lambda: 1e-4,
            gamma: 1.0,
            sgd_epochs: 10,
            adamw_epochs: 10,
            sgd_lr: 0.001,
            sgd_momentum: 0.9,
            adamw_lr: 0.001,
            clip_max_norm: 0.01,
            chunk_len: 64,
            rng_seed: 0,
        }
    }
}

impl Phase1Config {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be > 0".into()));
        }
        Ok(())
    }
}

/// One chunk's robust loss: the Huber residual term plus the smoothness
/// penalty, accumulated over the recursive mean estimate seeded at the
/// chunk's first observed frame.
fn chunk_loss(
    tape: &mut Tape,
    model: &Metamodel,
    param_ids: &[crate::tensor::NodeId],
    y: &SpatioTemporalField,
    r_inc: &SpatioTemporalField,
    t0: usize,
    len: usize,
    cfg: &Phase1Config,
) -> Result<crate::tensor::NodeId> {
    let p = y.n_space;
    let mut state = model.initial_state(tape, p, y, t0)?;
    let mut mu = tape.leaf(Tensor::vector(y.frame(t0).to_vec()));
    let mut loss: Option<crate::tensor::NodeId> = None;

    for t in t0..t0 + len {
        // g takes the observed frame (teacher forcing); the mean estimate
        // follows its own recursion.
        let y_t = tape.leaf(Tensor::vector(y.frame(t).to_vec()));
        let g = model.step(tape, param_ids, &mut state, y_t)?;
        let r_next = tape.leaf(Tensor::vector(r_inc.frame(t + 1).to_vec()));
        let mu_g = tape.add(mu, g)?;
        let mu_next = tape.add(mu_g, r_next)?;
        let y_next = tape.leaf(Tensor::vector(y.frame(t + 1).to_vec()));
        let resid = tape.sub(y_next, mu_next)?;
        let mut term = tape.huber_sum(resid, cfg.gamma)?;
        if cfg.lambda > 0.0 {
            let dd = tape.second_diff(mu_next)?;
            let pen = tape.sum_sq(dd);
            let pen = tape.scale(pen, cfg.lambda);
            term = tape.add(term, pen)?;
        }
        loss = Some(match loss {
            Some(l) => tape.add(l, term)?,
            None => term,
        });
        mu = mu_next;
    }
    Ok(loss.expect("chunk has at least one step"))
}

/// Robust Phase-I training: SGD-momentum epochs followed by AdamW epochs,
/// gradient clipping, deterministic given the seed. Sequences must share
/// spatial size; schedules carry the regular stimulation only.
pub fn train_phase1(
    sequences: &[SpatioTemporalField],
    regular_increments: &[SpatioTemporalField],
    model: &mut Metamodel,
    cfg: &Phase1Config,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("no training sequences".into()));
    }
    if sequences.len() != regular_increments.len() {
        return Err(Error::InvalidArgument(
            "sequence/schedule count mismatch".into(),
        ));
    }
    let p = sequences[0].n_space;
    if sequences.iter().any(|s| s.n_space != p) {
        return Err(Error::ShapeMismatch(
            "training sequences must share spatial size".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut epoch_losses = Vec::new();

    let total_epochs = cfg.sgd_epochs + cfg.adamw_epochs;
    let mut opt = OptimizerState::new(
        OptimizerKind::SgdMomentum {
            lr: cfg.sgd_lr,
            momentum: cfg.sgd_momentum,
        },
        model.params(),
    );
    for epoch in 0..total_epochs {
        if epoch == cfg.sgd_epochs {
            // switch trigger replaced by a fixed epoch count
            opt = OptimizerState::new(OptimizerKind::adamw(cfg.adamw_lr), model.params());
        }
        // chunk layout: contiguous windows in a shuffled order
        let mut chunks: Vec<(usize, usize, usize)> = Vec::new(); // (seq, t0, len)
        for (si, seq) in sequences.iter().enumerate() {
            let horizon = model.min_history();
            let mut t0 = horizon;
            while t0 + 1 < seq.n_time {
                let len = cfg.chunk_len.min(seq.n_time - 1 - t0);
                if len > 0 {
                    chunks.push((si, t0, len));
                }
                t0 += cfg.chunk_len;
            }
        }
        chunks.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (si, t0, len) in chunks {
            let mut tape = Tape::new();
            let param_ids = model.register_params(&mut tape);
            let loss_id = chunk_loss(
                &mut tape,
                model,
                &param_ids,
                &sequences[si],
                &regular_increments[si],
                t0,
                len,
                cfg,
            )?;
            let loss_val = tape.value(loss_id).item();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "NaN loss at epoch {epoch}, chunk ({si}, {t0})"
                )));
            }
            epoch_loss += loss_val;
            let grads = tape.backward(loss_id)?;
            let mut g: Vec<Tensor> = param_ids
                .iter()
                .zip(model.params())
                .map(|(id, par)| grads.wrt_or_zero(*id, &par.shape))
                .collect();
            clip_grad_norm(&mut g, cfg.clip_max_norm);
            opt.step(model.params_mut(), &g)?;
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(epoch_losses)
}

/// One-step residuals over a sequence under the trained model and the
/// recursive mean estimate, for gamma selection and outlier extraction.
pub fn phase1_residuals(
    sequence: &SpatioTemporalField,
    regular_increments: &SpatioTemporalField,
    model: &Metamodel,
) -> Result<SpatioTemporalField> {
    let p = sequence.n_space;
    let t0 = model.min_history();
    let mut tape = Tape::new();
    let param_ids = model.register_params(&mut tape);
    let mut state = model.initial_state(&mut tape, p, sequence, t0)?;
    let mut mu = sequence.frame(t0).to_vec();
    let n_res = sequence.n_time - 1 - t0;
    let mut out = SpatioTemporalField::zeros(n_res, p, sequence.dt);
    for (i, t) in (t0..sequence.n_time - 1).enumerate() {
        let y_t = tape.leaf(Tensor::vector(sequence.frame(t).to_vec()));
        let g = model.step(&mut tape, &param_ids, &mut state, y_t)?;
        let gv = tape.value(g).data.clone();
        let r = regular_increments.frame(t + 1);
        for s in 0..p {
            mu[s] += gv[s] + r[s];
            out.frame_mut(i)[s] = sequence.frame(t + 1)[s] - mu[s];
        }
    }
    Ok(out)
}

/// Cross-validated smoothness weight: random validation entries are zeroed
/// in the inputs, a short training run recovers the trend, and the lambda
/// with the smallest reconstruction error at the masked points wins.
pub fn select_lambda(
    sequence: &SpatioTemporalField,
    regular_increments: &SpatioTemporalField,
    template: &Metamodel,
    candidates: &[f64],
    base: &Phase1Config,
    mask_fraction: f64,
    seed: u64,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty lambda candidate set".into()));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sequence.values.len();
    let n_mask = ((n as f64) * mask_fraction).round().max(1.0) as usize;
    let mut mask: Vec<usize> = (0..n).collect();
    mask.shuffle(&mut rng);
    mask.truncate(n_mask);

    let mut masked = sequence.clone();
    for &i in &mask {
        masked.values[i] = 0.0;
    }

    let mut best = (f64::INFINITY, candidates[0]);
    for &lambda in candidates {
        let mut model = template.clone();
        let mut cfg = base.clone();
        cfg.lambda = lambda;
        train_phase1(
            std::slice::from_ref(&masked),
            std::slice::from_ref(regular_increments),
            &mut model,
            &cfg,
        )?;
        // recovered trend = recursive mean estimate over the masked inputs
        let resid = phase1_residuals(&masked, regular_increments, &model)?;
        let t0 = model.min_history();
        let mut err = 0.0;
        for &i in &mask {
            let (t, s) = (i / sequence.n_space, i % sequence.n_space);
            if t > t0 && t - t0 - 1 < resid.n_time {
                let mu = masked.frame(t)[s] - resid.frame(t - t0 - 1)[s];
                let d = sequence.values[i] - mu;
                err += d * d;
            }
        }
        if err < best.0 {
            best = (err, lambda);
        }
    }
    Ok(best.1)
}

/// Sparsity width selection at a fixed false discovery rate: returns gamma
/// such that the requested fraction of residual coefficients B^T e (the
/// quantities the window solver thresholds) is flagged nonzero by
/// S_{gamma/2}.
pub fn select_gamma(
    residuals: &SpatioTemporalField,
    target_fdr: f64,
    basis: &SplineBasis,
) -> Result<f64> {
    if residuals.values.is_empty() {
        return Err(Error::InvalidArgument("empty residuals".into()));
    }
    if target_fdr >= 1.0 {
        return Ok(0.0);
    }
    let mut mags: Vec<f64> = Vec::new();
    for t in 0..residuals.n_time {
        let coeffs = basis.apply_transpose(residuals.frame(t));
        mags.extend(coeffs.iter().map(|c| c.abs()));
    }
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = (1.0 - target_fdr).clamp(0.0, 1.0);
    let idx = ((mags.len() as f64 - 1.0) * q).round() as usize;
    Ok(2.0 * mags[idx])
}
