use super::CableConfig;
use crate::field::SpatioTemporalField;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Paper protocol constants: stimuli last 2 ms and span 3 consecutive cells.
pub const STIM_DURATION_MS: f64 = 2.0;
pub const STIM_WIDTH_CELLS: usize = 3;
pub const ANOMALY_WIDTH_CELLS: usize = 3;
pub const ANOMALY_DURATION_FRAMES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StimKind {
    Regular,
    Abnormal,
}

impl std::fmt::Display for StimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StimKind::Regular => write!(f, "regular"),
            StimKind::Abnormal => write!(f, "abnormal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimEvent {
    pub t_start: f64,
    pub cell_start: usize,
    pub n_cells: usize,
    pub duration: f64,
    pub amplitude: f64,
    pub kind: StimKind,
}

impl StimEvent {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_start + self.duration
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StimulationSchedule {
    pub events: Vec<StimEvent>,
}

impl StimulationSchedule {
    pub fn active_at(&self, t: f64) -> impl Iterator<Item = &StimEvent> {
        self.events.iter().filter(move |e| e.active_at(t))
    }

    pub fn filtered(&self, kind: StimKind) -> StimulationSchedule {
        StimulationSchedule {
            events: self
                .events
                .iter()
                .filter(|e| e.kind == kind)
                .cloned()
                .collect(),
        }
    }

    pub fn validate(&self, config: &CableConfig) -> Result<()> {
        for ev in &self.events {
            if ev.t_start < 0.0 || ev.t_start + ev.duration > config.duration + 1e-9 {
                return Err(Error::Config(format!(
                    "event at t={} ms exceeds the simulation window",
                    ev.t_start
                )));
            }
            if ev.cell_start + ev.n_cells > config.n_cells {
                return Err(Error::Config(format!(
                    "event at cell {} exceeds the cable",
                    ev.cell_start
                )));
            }
        }
        Ok(())
    }

    /// Per-frame stimulus increments as seen by the Euler recursion: entry
    /// (k, s) is the total charge amplitude*dt_internal injected into cell s
    /// by the internal steps that produce recorded frame k. Matches the
    /// simulator's discrete injection exactly.
    pub fn frame_increments(
        &self,
        n_frames: usize,
        n_space: usize,
        dt_record: f64,
        dt_internal: f64,
    ) -> SpatioTemporalField {
        let ratio = (dt_record / dt_internal).round() as usize;
        let mut out = SpatioTemporalField::zeros(n_frames, n_space, dt_record);
        for ev in &self.events {
            // internal step n covers time n*dt_internal and feeds frame n/ratio + 1
            let first = (ev.t_start / dt_internal).ceil() as usize;
            let mut n = first;
            while (n as f64) * dt_internal < ev.t_start {
                n += 1;
            }
            loop {
                let t = n as f64 * dt_internal;
                if t >= ev.t_start + ev.duration {
                    break;
                }
                let frame = n / ratio + 1;
                if frame >= n_frames {
                    break;
                }
                let row = out.frame_mut(frame);
                for s in ev.cell_start..(ev.cell_start + ev.n_cells).min(n_space) {
                    row[s] += ev.amplitude * dt_internal;
                }
                n += 1;
            }
        }
        out
    }

    /// One event per line, fields comma-separated in declaration order.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for e in &self.events {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.t_start, e.cell_start, e.n_cells, e.duration, e.amplitude, e.kind
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |d: &str| Error::Format {
                what: "schedule file",
                detail: format!("line {}: {}", i + 1, d),
            };
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let kind = match parts[5].trim() {
                "regular" => StimKind::Regular,
                "abnormal" => StimKind::Abnormal,
                other => return Err(bad(&format!("unknown kind '{other}'"))),
            };
            events.push(StimEvent {
                t_start: parts[0].trim().parse().map_err(|_| bad("t_start"))?,
                cell_start: parts[1].trim().parse().map_err(|_| bad("cell_start"))?,
                n_cells: parts[2].trim().parse().map_err(|_| bad("n_cells"))?,
                duration: parts[3].trim().parse().map_err(|_| bad("duration"))?,
                amplitude: parts[4].trim().parse().map_err(|_| bad("amplitude"))?,
                kind,
            });
        }
        Ok(StimulationSchedule { events })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolCase {
    Case1,
    Case2,
}

/// Periodic regular stimulation at the given sites: one site for Case 1,
/// two for Case 2. Each event lasts 2 ms at amplitude r0.
pub fn make_protocol(
    case: ProtocolCase,
    cycle_ms: f64,
    sites: &[usize],
    duration: f64,
    r0: f64,
) -> Result<StimulationSchedule> {
    let expected = match case {
        ProtocolCase::Case1 => 1,
        ProtocolCase::Case2 => 2,
    };
    if sites.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{case:?} needs {expected} site(s), got {}",
            sites.len()
        )));
    }
    if !(200.0..=1000.0).contains(&cycle_ms) {
        return Err(Error::InvalidArgument(format!(
            "cycle length {cycle_ms} ms outside the 200-1000 ms protocol range"
        )));
    }
    let mut events = Vec::new();
    for &site in sites {
        let mut t = 0.0;
        while t + STIM_DURATION_MS <= duration {
            events.push(StimEvent {
                t_start: t,
                cell_start: site,
                n_cells: STIM_WIDTH_CELLS,
                duration: STIM_DURATION_MS,
                amplitude: r0,
                kind: StimKind::Regular,
            });
            t += cycle_ms;
        }
    }
    events.sort_by(|a, b| a.t_start.partial_cmp(&b.t_start).unwrap());
    Ok(StimulationSchedule { events })
}

/// Abnormal-stimulation ground truth: 3 consecutive cells for 2 recorded
/// steps at relative intensity delta.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyGroundTruth {
    pub cells: Vec<usize>,
    pub times: Vec<usize>,
    pub delta: f64,
}

impl AnomalyGroundTruth {
    /// Cell-time support pairs.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &t in &self.times {
            for &s in &self.cells {
                out.push((t, s));
            }
        }
        out
    }

    pub fn write_text(list: &[AnomalyGroundTruth], path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for gt in list {
            let cells: Vec<String> = gt.cells.iter().map(|c| c.to_string()).collect();
            let times: Vec<String> = gt.times.iter().map(|t| t.to_string()).collect();
            writeln!(w, "{},{},{}", cells.join(";"), times.join(";"), gt.delta)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<Vec<AnomalyGroundTruth>> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format {
                what: "ground truth file",
                detail: format!("line {}", i + 1),
            };
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let cells = parts[0]
                .split(';')
                .map(|c| c.trim().parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?;
            let times = parts[1]
                .split(';')
                .map(|t| t.trim().parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?;
            let delta = parts[2].trim().parse().map_err(|_| bad())?;
            out.push(AnomalyGroundTruth { cells, times, delta });
        }
        Ok(out)
    }
}

/// Append randomly placed abnormal stimulations of amplitude delta*r0 over
/// 3 consecutive cells x 2 recorded steps, with mutually disjoint supports.
/// Anomaly start frames are drawn from `frame_range` (recorded-step indices).
#[allow(clippy::too_many_arguments)]
pub fn inject_anomalies<R: Rng>(
    schedule: &StimulationSchedule,
    n_anomalies: usize,
    delta: f64,
    r0: f64,
    n_space: usize,
    frame_range: std::ops::Range<usize>,
    dt_record: f64,
    rng: &mut R,
) -> Result<(StimulationSchedule, Vec<AnomalyGroundTruth>)> {
    let mut out = schedule.clone();
    let mut truths: Vec<AnomalyGroundTruth> = Vec::new();
    if delta == 0.0 || n_anomalies == 0 {
        return Ok((out, truths));
    }
    if n_space < ANOMALY_WIDTH_CELLS || n_space < n_anomalies * ANOMALY_WIDTH_CELLS {
        return Err(Error::InvalidArgument(
            "cable too small for requested anomaly count".into(),
        ));
    }
    let mut attempts = 0;
    while truths.len() < n_anomalies {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidArgument(
                "could not place non-overlapping anomalies".into(),
            ));
        }
        let s0 = rng.gen_range(0..=n_space - ANOMALY_WIDTH_CELLS);
        let t0 = rng.gen_range(frame_range.clone());
        let cells: Vec<usize> = (s0..s0 + ANOMALY_WIDTH_CELLS).collect();
        let times: Vec<usize> = (t0..t0 + ANOMALY_DURATION_FRAMES).collect();
        let overlaps = truths.iter().any(|gt| {
            gt.cells.iter().any(|c| cells.contains(c))
                && gt.times.iter().any(|t| times.contains(t))
        });
        if overlaps {
            continue;
        }
        out.events.push(StimEvent {
            // the event feeds recorded frames t0 and t0+1
            t_start: (t0 as f64 - 1.0) * dt_record,
            cell_start: s0,
            n_cells: ANOMALY_WIDTH_CELLS,
            duration: STIM_DURATION_MS,
            amplitude: delta * r0,
            kind: StimKind::Abnormal,
        });
        truths.push(AnomalyGroundTruth {
            cells,
            times,
            delta,
        });
    }
    Ok((out, truths))
}

/// Add i.i.d. Gaussian N(0, sigma^2) noise per entry; sigma = 0 is identity.
pub fn add_noise<R: Rng>(
    field: &SpatioTemporalField,
    sigma: f64,
    rng: &mut R,
) -> SpatioTemporalField {
    if sigma == 0.0 {
        return field.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
    let mut out = field.clone();
    for v in &mut out.values {
        *v += normal.sample(rng);
    }
    out
}
