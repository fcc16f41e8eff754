//! Skeleto-temporal tensor operators: graph convolution over joints, width-3
//! convolution over frames, their sum, and average pooling / unpooling over
//! both axes. Tensors are `frames x joints x channels`; every operator is a
//! composition of differentiable tape ops so gradients come for free.

use crate::skeleton::{SkeletonTopology, ValidatedStage};
use crate::tape::{Tape, Var};
use ndarray::Array2;

/// A tape tensor of shape `frames x joints x channels` tagged with the pooling
/// stage whose topology it lives on (`0` = base skeleton).
#[derive(Debug, Clone, Copy)]
pub struct STTensor {
    pub var: Var,
    pub stage: usize,
}

impl STTensor {
    pub fn new(var: Var, stage: usize) -> Self {
        STTensor { var, stage }
    }
}

/// Row-stochastic-by-neighborhood matrix `M[j, n] = 1/|N(j)|` for `n` adjacent
/// to `j`; an isolated joint yields an all-zero row (neighbor term vanishes).
pub fn neighbor_mean_matrix(topology: &SkeletonTopology) -> Array2<f64> {
    let j = topology.n_joints();
    let mut m = Array2::zeros((j, j));
    for (i, ns) in topology.neighbors.iter().enumerate() {
        if ns.is_empty() {
            continue;
        }
        let w = 1.0 / ns.len() as f64;
        for &n in ns {
            m[[i, n]] = w;
        }
    }
    m
}

/// Frame shift by `offset` (+1 pulls the next frame, -1 the previous one)
/// with zero fill at the boundary.
pub fn shift_matrix(frames: usize, offset: isize) -> Array2<f64> {
    let mut m = Array2::zeros((frames, frames));
    for t in 0..frames as isize {
        let s = t + offset;
        if s >= 0 && s < frames as isize {
            m[[t as usize, s as usize]] = 1.0;
        }
    }
    m
}

/// Pairwise frame averaging, `(frames/2) x frames`.
pub fn temporal_pool_matrix(frames: usize) -> Array2<f64> {
    assert_eq!(frames % 2, 0, "temporal pooling needs an even frame count");
    let mut m = Array2::zeros((frames / 2, frames));
    for i in 0..frames / 2 {
        m[[i, 2 * i]] = 0.5;
        m[[i, 2 * i + 1]] = 0.5;
    }
    m
}

/// Linear-interpolation upsampling to double length, `(2n) x n`. Pooled
/// samples sit at the centers of their 2-frame windows, so output frame `t`
/// reads input position `t/2 - 1/4`, clamped at the ends.
pub fn temporal_unpool_matrix(frames_in: usize) -> Array2<f64> {
    let n_out = 2 * frames_in;
    let mut m = Array2::zeros((n_out, frames_in));
    for t in 0..n_out {
        let pos = (t as f64 + 0.5) / 2.0 - 0.5;
        let pos = pos.clamp(0.0, frames_in as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(frames_in - 1);
        let frac = pos - lo as f64;
        m[[t, lo]] += 1.0 - frac;
        m[[t, hi]] += frac;
    }
    m
}

/// Group averaging over joints, `groups x joints`.
pub fn joint_pool_matrix(stage: &ValidatedStage) -> Array2<f64> {
    let mut m = Array2::zeros((stage.groups.len(), stage.assignment.len()));
    for (g, members) in stage.groups.iter().enumerate() {
        let w = 1.0 / members.len() as f64;
        for &j in members {
            m[[g, j]] = w;
        }
    }
    m
}

/// Copies each group feature back to all its member joints, `joints x groups`.
/// Each joint derives from exactly one group, so the sum over source groups
/// reduces to a copy.
pub fn joint_unpool_matrix(stage: &ValidatedStage) -> Array2<f64> {
    let mut m = Array2::zeros((stage.assignment.len(), stage.groups.len()));
    for (j, &g) in stage.assignment.iter().enumerate() {
        m[[j, g]] = 1.0;
    }
    m
}

/// `SkelConv(h^j) = theta1(h^j) + (1/|N(j)|) sum_{n in N(j)} theta2(h^n)`.
/// `theta1`/`theta2` are `channels_in x channels_out` weight Vars; biases, the
/// activation, and the residual belong to the caller.
pub fn skel_conv(
    tape: &Tape,
    h: STTensor,
    theta1: Var,
    theta2: Var,
    topology: &SkeletonTopology,
) -> STTensor {
    let own = tape.matmul(h.var, theta1);
    let pooled = tape.axis_apply(&neighbor_mean_matrix(topology), h.var, 1);
    let nb = tape.matmul(pooled, theta2);
    STTensor::new(tape.add(own, nb), h.stage)
}

/// Width-3 temporal convolution shared across joints, zero-padded to preserve
/// the frame count. `weights[k]` is the `channels_in x channels_out` map for
/// frame offset `k - 1`.
pub fn temp_conv(tape: &Tape, h: STTensor, weights: [Var; 3]) -> STTensor {
    let frames = tape.shape(h.var)[0];
    let mut acc: Option<Var> = None;
    for (k, w) in weights.into_iter().enumerate() {
        let offset = k as isize - 1;
        let shifted = if offset == 0 {
            h.var
        } else {
            tape.axis_apply(&shift_matrix(frames, offset), h.var, 0)
        };
        let term = tape.matmul(shifted, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    STTensor::new(acc.unwrap(), h.stage)
}

/// `STConv(h) = SkelConv(h) + TempConv(h)`.
pub fn st_conv(
    tape: &Tape,
    h: STTensor,
    theta1: Var,
    theta2: Var,
    temp_weights: [Var; 3],
    topology: &SkeletonTopology,
) -> STTensor {
    let s = skel_conv(tape, h, theta1, theta2, topology);
    let t = temp_conv(tape, h, temp_weights);
    STTensor::new(tape.add(s.var, t.var), h.stage)
}

/// Average-pools joints into their groups and frames pairwise. The two axis
/// reductions act on independent axes, so they commute.
pub fn st_pool(tape: &Tape, h: STTensor, stage: &ValidatedStage) -> STTensor {
    let frames = tape.shape(h.var)[0];
    let t = tape.axis_apply(&temporal_pool_matrix(frames), h.var, 0);
    let s = tape.axis_apply(&joint_pool_matrix(stage), t, 1);
    STTensor::new(s, h.stage + 1)
}

/// Inverse of `st_pool` up to averaging loss: group features are copied to
/// member joints and the frame axis is linearly interpolated to double length.
pub fn st_unpool(tape: &Tape, h: STTensor, stage: &ValidatedStage) -> STTensor {
    let frames = tape.shape(h.var)[0];
    let s = tape.axis_apply(&joint_unpool_matrix(stage), h.var, 1);
    let t = tape.axis_apply(&temporal_unpool_matrix(frames), s, 0);
    STTensor::new(t, h.stage - 1)
}
