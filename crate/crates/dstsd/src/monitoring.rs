//! Online detection: the likelihood-ratio statistic, Monte-Carlo control
//! limit calibration by bisection, the streaming monitor with its buffer
//! window sweep, and the two baseline detectors (Hotelling T-squared on
//! time differences, residual norm with Otsu localization).

use crate::anomaly::prox_solve;
use crate::field::SpatioTemporalField;
use crate::metamodel::Metamodel;
use crate::spline::SplineBasis;
use crate::{Error, Result};
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MonitoringRecord {
    pub t: usize,
    /// Chart statistic at t: the largest window statistic over the buffer
    /// sweep (alarms break the sweep early, so it is the triggering value).
    pub stat: f64,
    pub alarm: bool,
    /// Buffer width that raised the alarm, zero otherwise.
    pub w_used: usize,
    /// (frame, cell) pairs where the reconstructed anomaly over the alarmed
    /// window exceeds half its peak, empty without an alarm.
    pub support: Vec<(usize, usize)>,
}

pub fn write_records_csv(records: &[MonitoringRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,stat,alarm,w_used,support")?;
    for r in records {
        let cells: Vec<String> = r.support.iter().map(|(t, s)| format!("{t}:{s}")).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            r.t,
            r.stat,
            r.alarm as u8,
            r.w_used,
            cells.join(";")
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlLimit {
    pub limit: f64,
    pub target_arl0: f64,
    pub achieved_arl0: f64,
    pub std_error: f64,
    pub n_replications: usize,
}

/// Likelihood-ratio statistic T = 2 theta^T B^T r - theta^T B^T B theta.
pub fn lrt_statistic(theta: &[f64], residual: &[f64], basis: &SplineBasis) -> Result<f64> {
    if theta.len() != basis.m || residual.len() != basis.p {
        return Err(Error::ShapeMismatch(format!(
            "lrt: theta {} vs m {}, residual {} vs p {}",
            theta.len(),
            basis.m,
            residual.len(),
            basis.p
        )));
    }
    let fit = basis.apply(theta);
    let mut t = 0.0;
    for (f, r) in fit.iter().zip(residual) {
        t += 2.0 * f * r - f * f;
    }
    Ok(t)
}

/// Run-length record: strictly increasing prefix maxima of one statistic
/// stream, enough to answer "first exceedance of L" for any L.
fn prefix_records(stream: &[f64]) -> Vec<(usize, f64)> {
    let mut records = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for (i, &v) in stream.iter().enumerate() {
        if v > best {
            records.push((i, v));
            best = v;
        }
    }
    records
}

/// Censored-geometric run-length estimate at limit L: total watched time
/// over the number of alarms. Returns (arl, n_alarms).
fn arl_at(records: &[Vec<(usize, f64)>], cap: usize, limit: f64) -> (f64, usize) {
    let mut total = 0usize;
    let mut alarms = 0usize;
    for rec in records {
        match rec.iter().find(|(_, v)| *v > limit) {
            Some((i, _)) => {
                total += i + 1;
                alarms += 1;
            }
            None => total += cap,
        }
    }
    if alarms == 0 {
        (f64::INFINITY, 0)
    } else {
        (total as f64 / alarms as f64, alarms)
    }
}

/// Bisection calibration of the control limit against a Monte-Carlo ARL0
/// target. `stream_for` must be deterministic in the replication index so
/// every candidate limit sees common random numbers; runs are truncated at
/// `run_cap` with the standard censoring correction.
pub fn calibrate_control_limit<F>(
    mut stream_for: F,
    target_arl0: f64,
    tolerance: f64,
    n_replications: usize,
    run_cap: usize,
) -> Result<ControlLimit>
where
    F: FnMut(usize) -> Vec<f64>,
{
    if target_arl0 < 1.0 || tolerance <= 0.0 || n_replications == 0 {
        return Err(Error::InvalidArgument(
            "calibration needs target >= 1, tolerance > 0, replications > 0".into(),
        ));
    }
    let mut records = Vec::with_capacity(n_replications);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for rep in 0..n_replications {
        let stream = stream_for(rep);
        if stream.len() < run_cap {
            return Err(Error::InvalidArgument(format!(
                "replication {rep} shorter than the run cap"
            )));
        }
        let rec = prefix_records(&stream[..run_cap]);
        if let (Some(first), Some(last)) = (rec.first(), rec.last()) {
            lo = lo.min(first.1);
            hi = hi.max(last.1);
        }
        records.push(rec);
    }
    lo -= 1.0;
    let (arl_lo, _) = arl_at(&records, run_cap, lo);
    let (arl_hi, _) = arl_at(&records, run_cap, hi);
    if arl_lo > target_arl0 + tolerance || arl_hi < target_arl0 - tolerance {
        return Err(Error::Numerical(format!(
            "target ARL0 {target_arl0} unreachable in bracket [{lo}, {hi}] \
             (ARL {arl_lo} to {arl_hi})"
        )));
    }
    let mut limit = None;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (arl, _) = arl_at(&records, run_cap, mid);
        if (arl - target_arl0).abs() <= tolerance {
            limit = Some(mid);
            break;
        }
        if arl < target_arl0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // with a discrete jump straddling the target, take the closer endpoint
    let limit = limit.unwrap_or_else(|| {
        let d_lo = (arl_at(&records, run_cap, lo).0 - target_arl0).abs();
        let d_hi = (arl_at(&records, run_cap, hi).0 - target_arl0).abs();
        if d_lo <= d_hi {
            lo
        } else {
            hi
        }
    });
    let (achieved, alarms) = arl_at(&records, run_cap, limit);
    // a coarse discrete statistic can leave the target in an unbridgeable
    // jump; accept the nearest endpoint only when it is in the right ballpark
    if (achieved - target_arl0).abs() > tolerance
        && !(0.5..=2.0).contains(&(achieved / target_arl0))
    {
        return Err(Error::Numerical(format!(
            "statistic too coarse near target ARL0 {target_arl0}: nearest achievable {achieved}"
        )));
    }
    let std_error = if alarms > 0 {
        achieved / (alarms as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(ControlLimit {
        limit,
        target_arl0,
        achieved_arl0: achieved,
        std_error,
        n_replications,
    })
}

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub limit: f64,
    pub w_max: usize,
    pub gamma: f64,
    pub step_c: f64,
    pub epochs: usize,
    /// Frames consumed before adjudication starts.
    pub warmup: usize,
    pub stop_on_alarm: bool,
}

impl MonitorConfig {
    /// Step size guaranteeing descent on the windowed quadratic:
    /// 1 / (2 (w_max+1) lambda_max(B^T B)).
    pub fn safe_step(basis: &SplineBasis, w_max: usize) -> f64 {
        let lam = basis.gram_lambda_max().max(1e-12);
        1.0 / (2.0 * (w_max as f64 + 1.0) * lam)
    }
}

/// One-step increments g_t predicted for each frame t >= 1 in filtering
/// mode: the model consumes the observed frame t-1. Row t-1 of the result
/// is the increment entering frame t.
pub fn filtering_increments(
    stream: &SpatioTemporalField,
    model: &Metamodel,
) -> Result<SpatioTemporalField> {
    let p = stream.n_space;
    let mut state = model.infer_state(p);
    let mut out = SpatioTemporalField::zeros(stream.n_time - 1, p, stream.dt);
    for t in 1..stream.n_time {
        let g = model.infer_step(&mut state, stream.frame(t - 1))?;
        out.frame_mut(t - 1).copy_from_slice(&g);
    }
    Ok(out)
}

/// Streaming monitor: at each stream time t the buffer-window sweep
/// adjudicates T = t-w for w = 0..w_max, solving the window inverse problem
/// and testing the likelihood-ratio statistic of theta_{a,T} against the
/// control limit. `regular` holds the known stimulus increment entering
/// each frame (same length as the stream; row t for frame t).
pub fn monitor_stream(
    stream: &SpatioTemporalField,
    model: &Metamodel,
    basis: &SplineBasis,
    regular: &SpatioTemporalField,
    cfg: &MonitorConfig,
) -> Result<Vec<MonitoringRecord>> {
    let p = stream.n_space;
    if basis.p != p || regular.n_space != p || regular.n_time != stream.n_time {
        return Err(Error::ShapeMismatch(
            "stream, basis, and stimulus increments must agree".into(),
        ));
    }
    if stream.n_time <= cfg.warmup + 1 || cfg.warmup == 0 {
        return Err(Error::InvalidArgument(
            "stream shorter than the warm-up prefix".into(),
        ));
    }
    let g = filtering_increments(stream, model)?;

    // e(T, i) = y_{T+i} - y_{T-1} - sum_{tau=T..T+i} (g_tau + r_tau)
    let resid = |tt: usize, i: usize| -> Vec<f64> {
        let mut acc = vec![0.0; p];
        for tau in tt..=tt + i {
            let gi = g.frame(tau - 1);
            let ri = regular.frame(tau);
            for s in 0..p {
                acc[s] += gi[s] + ri[s];
            }
        }
        let y = stream.frame(tt + i);
        let y0 = stream.frame(tt - 1);
        (0..p).map(|s| y[s] - y0[s] - acc[s]).collect()
    };

    let mut out = Vec::new();
    for t in cfg.warmup..stream.n_time {
        let mut record = MonitoringRecord {
            t,
            stat: f64::NEG_INFINITY,
            alarm: false,
            w_used: 0,
            support: Vec::new(),
        };
        for w in 0..=cfg.w_max {
            if t < cfg.warmup + w {
                break;
            }
            let tt = t - w;
            let e: Vec<Vec<f64>> = (0..=w).map(|i| resid(tt, i)).collect();
            let (theta, _) = prox_solve(&e, basis, cfg.gamma, cfg.step_c, cfg.epochs)?;
            let stat = lrt_statistic(&theta[0], &e[0], basis)?;
            record.stat = record.stat.max(stat);
            if stat > cfg.limit {
                record.alarm = true;
                record.w_used = w;
                record.support = window_support(&theta, basis, tt);
                break;
            }
        }
        let stop = record.alarm && cfg.stop_on_alarm;
        out.push(record);
        if stop {
            break;
        }
    }
    Ok(out)
}

/// (frame, cell) pairs where the reconstructed anomaly over a window
/// starting at frame `start` exceeds half the window-wide peak magnitude.
fn window_support(
    theta: &[Vec<f64>],
    basis: &SplineBasis,
    start: usize,
) -> Vec<(usize, usize)> {
    let recon: Vec<Vec<f64>> = theta.iter().map(|th| basis.apply(th)).collect();
    let peak = recon
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Vec::new();
    }
    let mut pairs = Vec::new();
    for (i, row) in recon.iter().enumerate() {
        for (s, v) in row.iter().enumerate() {
            if v.abs() > 0.5 * peak {
                pairs.push((start + i, s));
            }
        }
    }
    pairs
}

/// Per-frame detector output shared by the baselines: the scalar statistic
/// and the per-cell scores localization thresholds on.
#[derive(Debug, Clone)]
pub struct FrameScores {
    pub stats: Vec<f64>,
    /// Row-major (frames x cells); rows align with `stats`.
    pub cell_scores: SpatioTemporalField,
    /// Stream index of the first scored frame.
    pub t0: usize,
}

/// Hotelling T-squared on first time differences with diagonal covariance
/// estimated on the warm-up prefix (variances floored at 1e-8).
pub fn hotelling_t2_baseline(
    stream: &SpatioTemporalField,
    warmup: usize,
) -> Result<FrameScores> {
    let p = stream.n_space;
    if stream.n_time <= warmup + 1 || warmup < 2 {
        return Err(Error::InvalidArgument(
            "hotelling needs warmup >= 2 and frames beyond it".into(),
        ));
    }
    let diff = |t: usize, s: usize| stream.frame(t)[s] - stream.frame(t - 1)[s];
    let mut mean = vec![0.0; p];
    let n0 = warmup - 1;
    for t in 1..warmup {
        for (s, m) in mean.iter_mut().enumerate() {
            *m += diff(t, s) / n0 as f64;
        }
    }
    let mut var = vec![0.0; p];
    for t in 1..warmup {
        for (s, v) in var.iter_mut().enumerate() {
            let d = diff(t, s) - mean[s];
            *v += d * d / n0 as f64;
        }
    }
    for v in &mut var {
        *v = v.max(1e-8);
    }
    let n_scored = stream.n_time - warmup;
    let mut stats = Vec::with_capacity(n_scored);
    let mut scores = SpatioTemporalField::zeros(n_scored, p, stream.dt);
    for (i, t) in (warmup..stream.n_time).enumerate() {
        let mut acc = 0.0;
        for s in 0..p {
            let z2 = (diff(t, s) - mean[s]).powi(2) / var[s];
            scores.frame_mut(i)[s] = z2;
            acc += z2;
        }
        stats.push(acc);
    }
    Ok(FrameScores {
        stats,
        cell_scores: scores,
        t0: warmup,
    })
}

/// Signed one-step prediction residuals e_t = y_t - y_{t-1} - g_{t-1} - r_t
/// for t = warmup..n, the same quantities the window solver decomposes at
/// w = 0. Row i holds the residual entering frame warmup + i.
pub fn filtering_residuals(
    stream: &SpatioTemporalField,
    model: &Metamodel,
    regular: &SpatioTemporalField,
    warmup: usize,
) -> Result<SpatioTemporalField> {
    let p = stream.n_space;
    if stream.n_time <= warmup + 1 || warmup == 0 {
        return Err(Error::InvalidArgument(
            "residuals need frames beyond the warm-up".into(),
        ));
    }
    let g = filtering_increments(stream, model)?;
    let mut out = SpatioTemporalField::zeros(stream.n_time - warmup, p, stream.dt);
    for (i, t) in (warmup..stream.n_time).enumerate() {
        let gi = g.frame(t - 1);
        let ri = regular.frame(t);
        for s in 0..p {
            out.frame_mut(i)[s] = stream.frame(t)[s] - stream.frame(t - 1)[s] - gi[s] - ri[s];
        }
    }
    Ok(out)
}

/// Residual-norm detector: squared one-step prediction residual under the
/// trained model, localized by the per-cell absolute residuals.
pub fn residual_baseline(
    stream: &SpatioTemporalField,
    model: &Metamodel,
    regular: &SpatioTemporalField,
    warmup: usize,
) -> Result<FrameScores> {
    let residuals = filtering_residuals(stream, model, regular, warmup)?;
    let p = stream.n_space;
    let n_scored = residuals.n_time;
    let mut stats = Vec::with_capacity(n_scored);
    let mut scores = SpatioTemporalField::zeros(n_scored, p, stream.dt);
    for i in 0..n_scored {
        let e = residuals.frame(i);
        scores.frame_mut(i).copy_from_slice(&e.iter().map(|v| v.abs()).collect::<Vec<f64>>());
        stats.push(e.iter().map(|v| v * v).sum());
    }
    Ok(FrameScores {
        stats,
        cell_scores: scores,
        t0: warmup,
    })
}

/// Otsu's threshold over a 256-bin histogram: the cut maximizing
/// between-class variance. A constant input returns the constant.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return lo;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let centers: Vec<f64> = (0..BINS)
        .map(|b| lo + (b as f64 + 0.5) * width)
        .collect();
    let global_sum: f64 = hist
        .iter()
        .zip(&centers)
        .map(|(&n, &c)| n as f64 * c)
        .sum();
    let mut best = (f64::NEG_INFINITY, lo);
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for b in 0..BINS - 1 {
        w0 += hist[b] as f64;
        sum0 += hist[b] as f64 * centers[b];
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        let mu0 = sum0 / w0;
        let mu1 = (global_sum - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, lo + (b as f64 + 1.0) * width);
        }
    }
    best.1
}

/// Detected (time, cell) pairs of a baseline detector: frames whose
/// statistic exceeds `limit`, cells whose score clears the frame's Otsu
/// threshold.
pub fn baseline_detections(scores: &FrameScores, limit: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &stat) in scores.stats.iter().enumerate() {
        if stat <= limit {
            continue;
        }
        let row = scores.cell_scores.frame(i);
        let thr = otsu_threshold(row);
        for (s, &v) in row.iter().enumerate() {
            if v > thr {
                out.push((scores.t0 + i, s));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
