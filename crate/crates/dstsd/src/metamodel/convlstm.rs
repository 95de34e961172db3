//! Gated convolutional recurrence over the cable. Gates follow the usual
//! five-equation form with per-channel peephole weights on the cell state;
//! a two-layer convolutional head maps the hidden state to the predicted
//! increment.

use super::{conv_mc_value, uniform_tensor};
#[cfg(test)]
use super::clamp_idx;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::Result;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmConfig {
    pub channels: usize,
    pub kernel: usize,
    pub head_channels: usize,
    pub head_kernel: usize,
}

impl Default for ConvLstmConfig {
    fn default() -> Self {
        // recurrent kernel 15 over 10 channels, head conv3(5ch)+ReLU -> conv3(1ch)
        ConvLstmConfig {
            channels: 10,
            kernel: 15,
            head_channels: 5,
            head_kernel: 3,
        }
    }
}

// Parameter declaration order. Gates f, i, candidate, o; peepholes are
// per-channel scalars (spatially invariant); head follows.
pub(super) const W_F: usize = 0;
pub(super) const U_F: usize = 1;
pub(super) const V_F: usize = 2;
pub(super) const B_F: usize = 3;
pub(super) const W_I: usize = 4;
pub(super) const U_I: usize = 5;
pub(super) const V_I: usize = 6;
pub(super) const B_I: usize = 7;
pub(super) const W_C: usize = 8;
pub(super) const U_C: usize = 9;
pub(super) const B_C: usize = 10;
pub(super) const W_O: usize = 11;
pub(super) const U_O: usize = 12;
pub(super) const V_O: usize = 13;
pub(super) const B_O: usize = 14;
pub(super) const HEAD1_W: usize = 15;
pub(super) const HEAD1_B: usize = 16;
pub(super) const HEAD2_W: usize = 17;
pub(super) const HEAD2_B: usize = 18;
pub(super) const N_PARAMS: usize = 19;

pub(super) fn init_params<R: Rng>(cfg: &ConvLstmConfig, rng: &mut R) -> Vec<Tensor> {
    let c = cfg.channels;
    let k = cfg.kernel;
    let (hc, hk) = (cfg.head_channels, cfg.head_kernel);
    let mut params = Vec::with_capacity(N_PARAMS);
    let gate = |params: &mut Vec<Tensor>, peephole: bool, rng: &mut R| {
        params.push(uniform_tensor(vec![c, 1, k], k, rng));
        params.push(uniform_tensor(vec![c, c, k], c * k, rng));
        if peephole {
            params.push(Tensor::zeros(vec![c]));
        }
        params.push(Tensor::zeros(vec![c]));
    };
    gate(&mut params, true, rng); // f
    gate(&mut params, true, rng); // i
    gate(&mut params, false, rng); // candidate
    gate(&mut params, true, rng); // o
    params.push(uniform_tensor(vec![hc, c, hk], c * hk, rng));
    params.push(Tensor::zeros(vec![hc]));
    params.push(uniform_tensor(vec![1, hc, hk], hc * hk, rng));
    params.push(Tensor::zeros(vec![1]));
    params
}

/// One taped step: updates (h, c) in place, returns the increment g ([p]).
pub(super) fn taped_step(
    tape: &mut Tape,
    _cfg: &ConvLstmConfig,
    ids: &[NodeId],
    h: &mut NodeId,
    c: &mut NodeId,
    input: NodeId,
) -> Result<NodeId> {
    let p = tape.value(input).numel();
    let x2 = tape.reshape(input, vec![1, p])?;

    let pre = |tape: &mut Tape, w, u, peep: Option<(usize, NodeId)>, b| -> Result<NodeId> {
        let a = tape.conv_mc(x2, ids[w])?;
        let bpart = tape.conv_mc(*h, ids[u])?;
        let mut acc = tape.add(a, bpart)?;
        if let Some((v, cell)) = peep {
            let pp = tape.scale_channel(cell, ids[v])?;
            acc = tape.add(acc, pp)?;
        }
        tape.bias_channel(acc, ids[b])
    };

    let zf_pre = pre(tape, W_F, U_F, Some((V_F, *c)), B_F)?;
    let z_f = tape.sigmoid(zf_pre);
    let zi_pre = pre(tape, W_I, U_I, Some((V_I, *c)), B_I)?;
    let z_i = tape.sigmoid(zi_pre);
    let cand_pre = pre(tape, W_C, U_C, None, B_C)?;
    let cand = tape.tanh(cand_pre);

    let keep = tape.mul(z_f, *c)?;
    let write = tape.mul(z_i, cand)?;
    let c_new = tape.add(keep, write)?;

    let zo_pre = pre(tape, W_O, U_O, Some((V_O, c_new)), B_O)?;
    let z_o = tape.sigmoid(zo_pre);
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(z_o, c_act)?;

    let t1 = tape.conv_mc(h_new, ids[HEAD1_W])?;
    let t1 = tape.bias_channel(t1, ids[HEAD1_B])?;
    let t1 = tape.relu(t1);
    let t2 = tape.conv_mc(t1, ids[HEAD2_W])?;
    let t2 = tape.bias_channel(t2, ids[HEAD2_B])?;
    let g = tape.reshape(t2, vec![p])?;

    *h = h_new;
    *c = c_new;
    Ok(g)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Value-only step with the same arithmetic as the taped path.
pub(super) fn value_step(
    cfg: &ConvLstmConfig,
    params: &[Tensor],
    h: &mut [f64],
    c: &mut [f64],
    frame: &[f64],
) -> Vec<f64> {
    let ch = cfg.channels;
    let p = frame.len();
    let k = cfg.kernel;

    let pre = |w: usize, u: usize, peep: Option<(usize, &[f64])>, b: usize| -> Vec<f64> {
        let mut acc = conv_mc_value(frame, 1, p, &params[w].data, ch, k);
        let hid = conv_mc_value(h, ch, p, &params[u].data, ch, k);
        for (a, v) in acc.iter_mut().zip(&hid) {
            *a += v;
        }
        if let Some((v, cell)) = peep {
            for ci in 0..ch {
                let vc = params[v].data[ci];
                for (a, cv) in acc[ci * p..(ci + 1) * p].iter_mut().zip(&cell[ci * p..(ci + 1) * p]) {
                    *a += vc * cv;
                }
            }
        }
        for ci in 0..ch {
            let bc = params[b].data[ci];
            for a in &mut acc[ci * p..(ci + 1) * p] {
                *a += bc;
            }
        }
        acc
    };

    let mut z_f = pre(W_F, U_F, Some((V_F, c)), B_F);
    z_f.iter_mut().for_each(|x| *x = sigmoid(*x));
    let mut z_i = pre(W_I, U_I, Some((V_I, c)), B_I);
    z_i.iter_mut().for_each(|x| *x = sigmoid(*x));
    let mut cand = pre(W_C, U_C, None, B_C);
    cand.iter_mut().for_each(|x| *x = x.tanh());

    let c_new: Vec<f64> = (0..ch * p)
        .map(|i| z_f[i] * c[i] + z_i[i] * cand[i])
        .collect();

    let mut z_o = pre(W_O, U_O, Some((V_O, &c_new)), B_O);
    z_o.iter_mut().for_each(|x| *x = sigmoid(*x));
    let h_new: Vec<f64> = (0..ch * p).map(|i| z_o[i] * c_new[i].tanh()).collect();

    let hk = cfg.head_kernel;
    let mut t1 = conv_mc_value(&h_new, ch, p, &params[HEAD1_W].data, cfg.head_channels, hk);
    for ci in 0..cfg.head_channels {
        let bc = params[HEAD1_B].data[ci];
        for v in &mut t1[ci * p..(ci + 1) * p] {
            *v = (*v + bc).max(0.0);
        }
    }
    let mut g = conv_mc_value(&t1, cfg.head_channels, p, &params[HEAD2_W].data, 1, hk);
    let b2 = params[HEAD2_B].data[0];
    for v in &mut g {
        *v += b2;
    }

    h.copy_from_slice(&h_new);
    c.copy_from_slice(&c_new);
    g
}

/// Straight-line scalar re-implementation of the five gate equations for a
/// single step, used only as an independent oracle in tests.
#[cfg(test)]
pub(super) fn oracle_step(
    cfg: &ConvLstmConfig,
    params: &[Tensor],
    h: &[f64],
    c: &[f64],
    frame: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ch = cfg.channels;
    let p = frame.len();
    let k = cfg.kernel;
    let half = (k - 1) / 2;
    let kv = |w: &Tensor, co: usize, ci: usize, j: usize| w.data[(co * w.shape[1] + ci) * k + j];
    let conv_in = |w: &Tensor, co: usize, s: usize| -> f64 {
        (0..k)
            .map(|j| {
                kv(w, co, 0, j) * frame[clamp_idx(s as isize + j as isize - half as isize, p)]
            })
            .sum()
    };
    let conv_hid = |w: &Tensor, co: usize, s: usize| -> f64 {
        let mut acc = 0.0;
        for ci in 0..ch {
            for j in 0..k {
                acc += kv(w, co, ci, j)
                    * h[ci * p + clamp_idx(s as isize + j as isize - half as isize, p)];
            }
        }
        acc
    };
    let mut c_new = vec![0.0; ch * p];
    let mut h_new = vec![0.0; ch * p];
    for co in 0..ch {
        for s in 0..p {
            let zf = sigmoid(
                conv_in(&params[W_F], co, s)
                    + conv_hid(&params[U_F], co, s)
                    + params[V_F].data[co] * c[co * p + s]
                    + params[B_F].data[co],
            );
            let zi = sigmoid(
                conv_in(&params[W_I], co, s)
                    + conv_hid(&params[U_I], co, s)
                    + params[V_I].data[co] * c[co * p + s]
                    + params[B_I].data[co],
            );
            let cand = (conv_in(&params[W_C], co, s)
                + conv_hid(&params[U_C], co, s)
                + params[B_C].data[co])
                .tanh();
            c_new[co * p + s] = zf * c[co * p + s] + zi * cand;
        }
    }
    for co in 0..ch {
        for s in 0..p {
            let zo = sigmoid(
                conv_in(&params[W_O], co, s)
                    + conv_hid(&params[U_O], co, s)
                    + params[V_O].data[co] * c_new[co * p + s]
                    + params[B_O].data[co],
            );
            h_new[co * p + s] = zo * c_new[co * p + s].tanh();
        }
    }
    // head
    let hk = cfg.head_kernel;
    let hhalf = (hk - 1) / 2;
    let mut t1 = vec![0.0; cfg.head_channels * p];
    for co in 0..cfg.head_channels {
        for s in 0..p {
            let mut acc = params[HEAD1_B].data[co];
            for ci in 0..ch {
                for j in 0..hk {
                    acc += params[HEAD1_W].data[(co * ch + ci) * hk + j]
                        * h_new[ci * p + clamp_idx(s as isize + j as isize - hhalf as isize, p)];
                }
            }
            t1[co * p + s] = acc.max(0.0);
        }
    }
    let mut g = vec![0.0; p];
    for (s, gs) in g.iter_mut().enumerate() {
        let mut acc = params[HEAD2_B].data[0];
        for ci in 0..cfg.head_channels {
            for j in 0..hk {
                acc += params[HEAD2_W].data[ci * hk + j]
                    * t1[ci * p + clamp_idx(s as isize + j as isize - hhalf as isize, p)];
            }
        }
        *gs = acc;
    }
    (g, h_new, c_new)
}
