//! Dilated causal convolution stack: d layers of (2 x kernel_s) kernels
//! with temporal dilation doubling per layer, spatial replication padding,
//! a scalar bias and a parametric rectifier after each layer. A window of
//! 2^d frames collapses to a single predicted increment; the incremental
//! stepper reuses per-layer ring buffers so one new frame costs one spatial
//! convolution per layer.

use super::{clamp_idx, receptive_field, uniform_tensor};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::Result;
use rand::Rng;
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveNetConfig {
    pub depth: usize,
    pub kernel_s: usize,
}

impl Default for WaveNetConfig {
    fn default() -> Self {
        WaveNetConfig {
            depth: 7,
            kernel_s: 17,
        }
    }
}

impl WaveNetConfig {
    pub fn window(&self) -> usize {
        1 << self.depth
    }
}

/// Per layer: kernel [2, ks], bias [1], rectifier slope [1].
pub(super) fn init_params<R: Rng>(cfg: &WaveNetConfig, rng: &mut R) -> Vec<Tensor> {
    let mut params = Vec::with_capacity(3 * cfg.depth);
    for _ in 0..cfg.depth {
        params.push(uniform_tensor(vec![2, cfg.kernel_s], 2 * cfg.kernel_s, rng));
        params.push(Tensor::zeros(vec![1]));
        params.push(Tensor::scalar(0.25));
    }
    params
}

/// Batch taped forward over a [w_r, p] window -> [p] increment.
pub(super) fn taped_forward(
    tape: &mut Tape,
    cfg: &WaveNetConfig,
    ids: &[NodeId],
    window: NodeId,
) -> Result<NodeId> {
    let w_r = receptive_field(cfg.depth)?;
    let shape = tape.value(window).shape.clone();
    if shape.len() != 2 || shape[0] != w_r {
        return Err(crate::Error::ShapeMismatch(format!(
            "window must be [{w_r}, p], got {shape:?}"
        )));
    }
    let p = shape[1];
    let mut h = window;
    for l in 0..cfg.depth {
        let dilation = 1 << l;
        h = tape.conv_ts(h, ids[3 * l], dilation)?;
        h = tape.shift(h, ids[3 * l + 1])?;
        h = tape.prelu(h, ids[3 * l + 2])?;
    }
    tape.reshape(h, vec![p])
}

/// Spatial correlation of one layer given its two input frames (older,
/// newer), plus bias and rectifier. Mirrors the taped op arithmetic.
fn layer_value(
    older: &[f64],
    newer: &[f64],
    kernel: &[f64],
    ks: usize,
    bias: f64,
    alpha: f64,
) -> Vec<f64> {
    let p = older.len();
    let half = (ks - 1) / 2;
    let mut out = vec![0.0; p];
    for (frame, row) in [(older, &kernel[..ks]), (newer, &kernel[ks..])] {
        for (s, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &wj) in row.iter().enumerate() {
                acc += wj * frame[clamp_idx(s as isize + j as isize - half as isize, p)];
            }
            *o += acc;
        }
    }
    for v in &mut out {
        let x = *v + bias;
        *v = x.max(0.0) + alpha * x.min(0.0);
    }
    out
}

/// Incremental inference state: ring buffer per layer holding the last
/// dilation+1 input frames of that layer.
#[derive(Debug, Clone)]
pub struct WaveNetStepper {
    cfg: WaveNetConfig,
    p: usize,
    bufs: Vec<VecDeque<Vec<f64>>>,
    /// Last w_r - 1 raw input frames, oldest first; kept so a taped window
    /// can be reconstructed from a warm stepper.
    history: VecDeque<Vec<f64>>,
}

impl WaveNetStepper {
    pub fn new(cfg: WaveNetConfig, p: usize) -> Self {
        let bufs = (0..cfg.depth)
            .map(|l| VecDeque::with_capacity((1usize << l) + 1))
            .collect();
        WaveNetStepper {
            cfg,
            p,
            bufs,
            history: VecDeque::new(),
        }
    }

    fn warm(&self) -> bool {
        self.bufs
            .iter()
            .enumerate()
            .all(|(l, b)| b.len() == (1usize << l))
    }

    /// Advance by one frame and return the increment. An empty (cold)
    /// stepper first backfills its buffers by replicating the frame, which
    /// matches the batch forward on a constant-extended history.
    pub fn push(&mut self, params: &[Tensor], frame: &[f64]) -> Vec<f64> {
        debug_assert_eq!(frame.len(), self.p);
        let w_r = self.cfg.window();
        if self.bufs[0].is_empty() {
            // replicate to fill: w_r - 1 virtual past frames
            for _ in 0..w_r - 1 {
                self.advance(params, frame.to_vec());
                self.history.push_back(frame.to_vec());
            }
            debug_assert!(self.warm());
        }
        let out = self
            .advance(params, frame.to_vec())
            .expect("warm stepper yields one output per frame");
        self.history.push_back(frame.to_vec());
        while self.history.len() > w_r - 1 {
            self.history.pop_front();
        }
        out
    }

    /// Feed one frame; returns the network output once all buffers are full.
    fn advance(&mut self, params: &[Tensor], frame: Vec<f64>) -> Option<Vec<f64>> {
        let ks = self.cfg.kernel_s;
        let mut cur = frame;
        for l in 0..self.cfg.depth {
            let dilation = 1usize << l;
            self.bufs[l].push_back(cur);
            if self.bufs[l].len() < dilation + 1 {
                return None;
            }
            let older = self.bufs[l].front().expect("buffer non-empty");
            let newer = self.bufs[l].back().expect("buffer non-empty");
            let out = layer_value(
                older,
                newer,
                &params[3 * l].data,
                ks,
                params[3 * l + 1].data[0],
                params[3 * l + 2].data[0],
            );
            self.bufs[l].pop_front();
            cur = out;
        }
        Some(cur)
    }

    /// The w_r - 1 most recent raw input frames implied by the buffered
    /// state, oldest first; only valid for a warm stepper. Used to seed a
    /// taped window whose gradients stop at the window start.
    pub fn pending_frames(&self) -> Vec<Vec<f64>> {
        self.history.iter().cloned().collect()
    }
}
