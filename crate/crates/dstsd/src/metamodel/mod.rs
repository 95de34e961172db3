//! The deep spatio-temporal architectures g(.; theta) predicting the
//! one-step mean increment: a gated convolutional recurrence, a dilated
//! causal convolution stack, and a plain linear map for oracle tests. Each
//! has a taped forward (for gradients) and a value-only fast path (for
//! monitoring and rollout).

mod convlstm;
mod wavenet;

pub use convlstm::ConvLstmConfig;
pub use wavenet::{WaveNetConfig, WaveNetStepper};

use crate::field::SpatioTemporalField;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Number of past frames that can influence one output of a depth-d
/// dilated causal stack.
pub fn receptive_field(depth: usize) -> Result<usize> {
    if depth < 1 {
        return Err(Error::InvalidArgument("depth must be >= 1".into()));
    }
    Ok(1 << depth)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    ConvLstm(ConvLstmConfig),
    ConvWaveNet(WaveNetConfig),
    /// g(x) = W x; exists for closed-form oracles and toy recoveries.
    Linear { p: usize },
}

impl Architecture {
    pub fn tag(&self) -> u8 {
        match self {
            Architecture::ConvLstm(_) => 0,
            Architecture::ConvWaveNet(_) => 1,
            Architecture::Linear { .. } => 2,
        }
    }
}

/// Recurrent state carried on a tape during training or windowed
/// estimation.
pub enum MetamodelState {
    Lstm { h: NodeId, c: NodeId },
    /// Last w_r - 1 input frames, oldest first.
    Window(VecDeque<NodeId>),
    Stateless,
}

/// Value-only state for the fast inference path.
#[derive(Debug, Clone)]
pub enum InferState {
    Lstm { h: Vec<f64>, c: Vec<f64> },
    WaveNet(WaveNetStepper),
    Stateless,
}

#[derive(Debug, Clone)]
pub struct Metamodel {
    pub arch: Architecture,
    params: Vec<Tensor>,
}

const MAGIC: &[u8; 7] = b"STSDMDL";
const VERSION: u32 = 1;

impl Metamodel {
    /// Fresh model with uniform +-1/sqrt(fan-in) weights, zero biases and
    /// peepholes, and the usual 0.25 starting slope for the parametric
    /// rectifier.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &arch {
            Architecture::ConvLstm(cfg) => convlstm::init_params(cfg, &mut rng),
            Architecture::ConvWaveNet(cfg) => wavenet::init_params(cfg, &mut rng),
            Architecture::Linear { p } => {
                let bound = 1.0 / (*p as f64).sqrt();
                let data = (0..p * p).map(|_| rng.gen_range(-bound..bound)).collect();
                vec![Tensor::new(vec![*p, *p], data).unwrap()]
            }
        };
        Metamodel { arch, params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Record every parameter as a tape leaf, in declaration order.
    pub fn register_params(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Frames of history the model wants before its first prediction; zero
    /// for all architectures (the causal stack replicates the earliest
    /// frame when history is shorter than its receptive window).
    pub fn min_history(&self) -> usize {
        0
    }

    /// Taped recurrent state at stream position t0 of `y`.
    pub fn initial_state(
        &self,
        tape: &mut Tape,
        p: usize,
        y: &SpatioTemporalField,
        t0: usize,
    ) -> Result<MetamodelState> {
        match &self.arch {
            Architecture::ConvLstm(cfg) => {
                let h = tape.leaf(Tensor::zeros(vec![cfg.channels, p]));
                let c = tape.leaf(Tensor::zeros(vec![cfg.channels, p]));
                Ok(MetamodelState::Lstm { h, c })
            }
            Architecture::ConvWaveNet(cfg) => {
                let w_r = receptive_field(cfg.depth)?;
                let mut window = VecDeque::with_capacity(w_r);
                for i in 0..w_r - 1 {
                    // frames t0-w_r+1 .. t0-1, earliest replicated
                    let t = (t0 + i + 1).saturating_sub(w_r);
                    window.push_back(tape.leaf(Tensor::vector(y.frame(t.min(y.n_time - 1)).to_vec())));
                }
                Ok(MetamodelState::Window(window))
            }
            Architecture::Linear { .. } => Ok(MetamodelState::Stateless),
        }
    }

    /// Warm taped state mirroring a value-only state, for windowed
    /// estimation: gradients never flow past the window start.
    pub fn state_from_infer(&self, tape: &mut Tape, infer: &InferState) -> Result<MetamodelState> {
        match (&self.arch, infer) {
            (Architecture::ConvLstm(cfg), InferState::Lstm { h, c }) => {
                let p = h.len() / cfg.channels;
                Ok(MetamodelState::Lstm {
                    h: tape.leaf(Tensor::new(vec![cfg.channels, p], h.clone())?),
                    c: tape.leaf(Tensor::new(vec![cfg.channels, p], c.clone())?),
                })
            }
            (Architecture::ConvWaveNet(_), InferState::WaveNet(stepper)) => {
                let mut window = VecDeque::new();
                for frame in stepper.pending_frames() {
                    window.push_back(tape.leaf(Tensor::vector(frame)));
                }
                Ok(MetamodelState::Window(window))
            }
            (Architecture::Linear { .. }, InferState::Stateless) => Ok(MetamodelState::Stateless),
            _ => Err(Error::InvalidArgument(
                "inference state does not match architecture".into(),
            )),
        }
    }

    /// One taped forward step: consumes the current frame node ([p]) and
    /// returns the predicted increment g ([p]).
    pub fn step(
        &self,
        tape: &mut Tape,
        param_ids: &[NodeId],
        state: &mut MetamodelState,
        input: NodeId,
    ) -> Result<NodeId> {
        match (&self.arch, state) {
            (Architecture::ConvLstm(cfg), MetamodelState::Lstm { h, c }) => {
                convlstm::taped_step(tape, cfg, param_ids, h, c, input)
            }
            (Architecture::ConvWaveNet(cfg), MetamodelState::Window(window)) => {
                window.push_back(input);
                let rows: Vec<NodeId> = window.iter().copied().collect();
                window.pop_front();
                let stacked = tape.stack_rows(&rows)?;
                wavenet::taped_forward(tape, cfg, param_ids, stacked)
            }
            (Architecture::Linear { .. }, MetamodelState::Stateless) => {
                tape.matvec(param_ids[0], input)
            }
            _ => Err(Error::InvalidArgument(
                "state does not match architecture".into(),
            )),
        }
    }

    /// Cold value-only state.
    pub fn infer_state(&self, p: usize) -> InferState {
        match &self.arch {
            Architecture::ConvLstm(cfg) => InferState::Lstm {
                h: vec![0.0; cfg.channels * p],
                c: vec![0.0; cfg.channels * p],
            },
            Architecture::ConvWaveNet(cfg) => {
                InferState::WaveNet(WaveNetStepper::new(cfg.clone(), p))
            }
            Architecture::Linear { .. } => InferState::Stateless,
        }
    }

    /// One value-only step: same arithmetic as the taped path, no graph.
    pub fn infer_step(&self, state: &mut InferState, frame: &[f64]) -> Result<Vec<f64>> {
        match (&self.arch, state) {
            (Architecture::ConvLstm(cfg), InferState::Lstm { h, c }) => {
                Ok(convlstm::value_step(cfg, &self.params, h, c, frame))
            }
            (Architecture::ConvWaveNet(_), InferState::WaveNet(stepper)) => {
                Ok(stepper.push(&self.params, frame))
            }
            (Architecture::Linear { p }, InferState::Stateless) => {
                let w = &self.params[0].data;
                Ok((0..*p)
                    .map(|i| {
                        w[i * p..(i + 1) * p]
                            .iter()
                            .zip(frame)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect())
            }
            _ => Err(Error::InvalidArgument(
                "state does not match architecture".into(),
            )),
        }
    }

    /// Autoregressive long-term prediction: warm up on the full history,
    /// then feed predictions back for `steps` steps. `increments[i]` is the
    /// known stimulus charge entering predicted frame i+1 (zero field for
    /// the no-future-stimulus default).
    pub fn rollout(
        &self,
        history: &SpatioTemporalField,
        steps: usize,
        increments: &SpatioTemporalField,
    ) -> Result<SpatioTemporalField> {
        if steps < 1 {
            return Err(Error::InvalidArgument("rollout needs steps >= 1".into()));
        }
        if history.n_time == 0 {
            return Err(Error::InvalidArgument("rollout needs history".into()));
        }
        if increments.n_time < steps || increments.n_space != history.n_space {
            return Err(Error::ShapeMismatch(
                "increment field must cover the rollout".into(),
            ));
        }
        let p = history.n_space;
        let mut state = self.infer_state(p);
        for t in 0..history.n_time - 1 {
            self.infer_step(&mut state, history.frame(t))?;
        }
        let mut mu = history.frame(history.n_time - 1).to_vec();
        let mut out = SpatioTemporalField::zeros(steps, p, history.dt);
        for i in 0..steps {
            let g = self.infer_step(&mut state, &mu)?;
            let inc = increments.frame(i);
            for s in 0..p {
                mu[s] += g[s] + inc[s];
                if !mu[s].is_finite() {
                    return Err(Error::Numerical(format!(
                        "rollout diverged at step {i}"
                    )));
                }
            }
            out.frame_mut(i).copy_from_slice(&mu);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.arch.tag()])?;
        match &self.arch {
            Architecture::ConvLstm(cfg) => {
                for v in [cfg.channels, cfg.kernel, cfg.head_channels, cfg.head_kernel] {
                    w.write_all(&(v as u32).to_le_bytes())?;
                }
            }
            Architecture::ConvWaveNet(cfg) => {
                for v in [cfg.depth, cfg.kernel_s] {
                    w.write_all(&(v as u32).to_le_bytes())?;
                }
            }
            Architecture::Linear { p } => {
                w.write_all(&(*p as u32).to_le_bytes())?;
            }
        }
        w.write_all(&(self.n_params() as u64).to_le_bytes())?;
        for t in &self.params {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let bad = |detail: String| Error::Format {
            what: "model checkpoint",
            detail,
        };
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let arch = match tag[0] {
            0 => Architecture::ConvLstm(ConvLstmConfig {
                channels: read_u32(&mut r)?,
                kernel: read_u32(&mut r)?,
                head_channels: read_u32(&mut r)?,
                head_kernel: read_u32(&mut r)?,
            }),
            1 => Architecture::ConvWaveNet(WaveNetConfig {
                depth: read_u32(&mut r)?,
                kernel_s: read_u32(&mut r)?,
            }),
            2 => Architecture::Linear {
                p: read_u32(&mut r)?,
            },
            t => return Err(bad(format!("unknown architecture tag {t}"))),
        };
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut model = Metamodel::new(arch, 0);
        if n != model.n_params() {
            return Err(bad(format!(
                "parameter count {} does not match architecture ({})",
                n,
                model.n_params()
            )));
        }
        let mut flat = vec![0.0; n];
        for v in &mut flat {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        model.set_flat_params(&flat)?;
        Ok(model)
    }
}

pub(crate) fn uniform_tensor<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape, data }
}

pub(crate) fn clamp_idx(i: isize, len: usize) -> usize {
    i.max(0).min(len as isize - 1) as usize
}

/// Multi-channel spatial correlation with replication padding on plain
/// slices; mirrors the taped op bit for bit.
pub(crate) fn conv_mc_value(
    x: &[f64],
    cin: usize,
    p: usize,
    w: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let half = (k - 1) / 2;
    let mut out = vec![0.0; cout * p];
    for co in 0..cout {
        for ci in 0..cin {
            let wk = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
            let xs = &x[ci * p..(ci + 1) * p];
            let os = &mut out[co * p..(co + 1) * p];
            let lo = half.min(p);
            let hi = p.saturating_sub(half).max(lo);
            for (i, o) in os.iter_mut().enumerate().take(lo) {
                let mut acc = 0.0;
                for (j, &wj) in wk.iter().enumerate() {
                    acc += wj * xs[clamp_idx(i as isize + j as isize - half as isize, p)];
                }
                *o += acc;
            }
            for i in lo..hi {
                let base = i - half;
                let mut acc = 0.0;
                for (j, &wj) in wk.iter().enumerate() {
                    acc += wj * xs[base + j];
                }
                os[i] += acc;
            }
            for (i, o) in os.iter_mut().enumerate().skip(hi) {
                let mut acc = 0.0;
                for (j, &wj) in wk.iter().enumerate() {
                    acc += wj * xs[clamp_idx(i as isize + j as isize - half as isize, p)];
                }
                *o += acc;
            }
        }
    }
    out
}
