//! Motion sequences as per-joint feature blocks, the `.salm` binary file
//! format, a deterministic synthetic caption-paired corpus, and reconstruction
//! metrics.
//!
//! Per-joint channel layout (made explicit here because the file header only
//! carries widths):
//! - root (width 7): height, horizontal velocity (x, z), angular velocity
//!   around the up axis, 3-D velocity (x, y, z)
//! - other joints (width 12): 3-D local position, 3-D velocity, 6-D rotation
//! - foot/toe joints (width 13): the same plus a trailing contact label

use crate::error::{Error, Result};
use crate::par;
use crate::skeleton::SkeletonTopology;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MOTION_MAGIC: &[u8; 4] = b"SALM";
pub const MOTION_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    /// One `frames x D_j` block per joint, in topology order.
    pub blocks: Vec<Array2<f64>>,
    pub fps: f64,
}

impl MotionSequence {
    pub fn frames(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn n_joints(&self) -> usize {
        self.blocks.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.ncols()).collect()
    }

    /// Checks block widths against the topology feature widths.
    pub fn validate_against(&self, topology: &SkeletonTopology) -> Result<()> {
        if self.widths() != topology.feature_dim {
            return Err(Error::Shape(format!(
                "block widths {:?} do not match topology feature dims {:?}",
                self.widths(),
                topology.feature_dim
            )));
        }
        Ok(())
    }

    /// Flattens to a `frames x sum(D_j)` matrix, blocks in joint order.
    pub fn compose(&self) -> Array2<f64> {
        let n = self.frames();
        let w: usize = self.widths().iter().sum();
        let mut out = Array2::zeros((n, w));
        let mut col = 0;
        for b in &self.blocks {
            out.slice_mut(ndarray::s![.., col..col + b.ncols()]).assign(b);
            col += b.ncols();
        }
        out
    }

    /// Inverse of [`compose`](Self::compose) for a full sequence.
    pub fn decompose(flat: &Array2<f64>, topology: &SkeletonTopology, fps: f64) -> Result<Self> {
        let w = topology.flat_width();
        if flat.ncols() != w {
            return Err(Error::Shape(format!(
                "flat width {} does not match topology width {w}",
                flat.ncols()
            )));
        }
        let mut blocks = Vec::with_capacity(topology.n_joints());
        let mut col = 0;
        for &d in &topology.feature_dim {
            blocks.push(flat.slice(ndarray::s![.., col..col + d]).to_owned());
            col += d;
        }
        Ok(MotionSequence { blocks, fps })
    }

    /// Crops or loop-pads to exactly `n` frames (training windows are fixed
    /// length; n must stay a multiple of 4 for the VAE, but that is not
    /// enforced here).
    pub fn fit_to_window(&self, n: usize) -> MotionSequence {
        let cur = self.frames();
        let blocks = self
            .blocks
            .iter()
            .map(|b| Array2::from_shape_fn((n, b.ncols()), |(t, c)| b[[t % cur, c]]))
            .collect();
        MotionSequence { blocks, fps: self.fps }
    }
}

/// Splits a single flat pose vector into per-joint feature slices.
pub fn decompose_pose(flat_pose: ArrayView1<f64>, topology: &SkeletonTopology) -> Result<Vec<Array1<f64>>> {
    let w = topology.flat_width();
    if flat_pose.len() != w {
        return Err(Error::Shape(format!(
            "pose width {} does not match topology width {w}",
            flat_pose.len()
        )));
    }
    let mut out = Vec::with_capacity(topology.n_joints());
    let mut col = 0;
    for &d in &topology.feature_dim {
        out.push(flat_pose.slice(ndarray::s![col..col + d]).to_owned());
        col += d;
    }
    Ok(out)
}

pub fn compose_pose(blocks: &[Array1<f64>]) -> Array1<f64> {
    let w: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = Array1::zeros(w);
    let mut col = 0;
    for b in blocks {
        out.slice_mut(ndarray::s![col..col + b.len()]).assign(b);
        col += b.len();
    }
    out
}

/// Channel ranges within a joint block. Root has no local positions.
pub fn position_channels(topology: &SkeletonTopology, joint: usize) -> Option<std::ops::Range<usize>> {
    if topology.parent[joint].is_none() {
        None
    } else {
        Some(0..3)
    }
}

pub fn velocity_channels(topology: &SkeletonTopology, joint: usize) -> std::ops::Range<usize> {
    if topology.parent[joint].is_none() {
        4..7
    } else {
        3..6
    }
}

/// Contact-label channel for foot/toe joints (the last channel).
pub fn contact_channel(topology: &SkeletonTopology, joint: usize) -> Option<usize> {
    if topology.foot[joint] && topology.parent[joint].is_some() {
        Some(topology.feature_dim[joint] - 1)
    } else {
        None
    }
}

/// Mean per-joint position error in meters: the Euclidean distance between
/// position channels, averaged over frames and position-bearing joints.
pub fn mpjpe(a: &MotionSequence, b: &MotionSequence) -> Result<f64> {
    if a.widths() != b.widths() || a.frames() != b.frames() {
        return Err(Error::Shape("mpjpe operands differ in shape".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (ba, bb) in a.blocks.iter().zip(&b.blocks) {
        // Root blocks are width 7 and carry no positions.
        if ba.ncols() < 12 {
            continue;
        }
        for t in 0..ba.nrows() {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = ba[[t, c]] - bb[[t, c]];
                d2 += d * d;
            }
            total += d2.sqrt();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone)]
pub struct CaptionedClip {
    pub motion: MotionSequence,
    pub caption_text: String,
    pub caption: Vec<String>,
}

/// Procedural motion family for the synthetic corpus.
#[derive(Debug, Clone, Copy)]
enum Action {
    Walk,
    Jump,
    Wave,
}

/// Deterministic synthetic caption-paired corpus: sinusoidal gaits, jump arcs,
/// and arm waves with templated captions naming the action, body part, and
/// direction. Clip generation is independent per index and runs in parallel
/// when enabled.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_clips: usize,
    topology: &SkeletonTopology,
    parallel: bool,
) -> Vec<CaptionedClip> {
    let n_clips = n_clips.max(1);
    par::indexed_map(n_clips, parallel, |i| {
        let clip_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        generate_clip(clip_seed, topology)
    })
}

fn generate_clip(seed: u64, topology: &SkeletonTopology) -> CaptionedClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fps = 20.0;
    let n = 48 + 4 * rng.gen_range(0..9usize); // multiples of 4 in [48, 80]
    let action = match rng.gen_range(0..3u8) {
        0 => Action::Walk,
        1 => Action::Jump,
        _ => Action::Wave,
    };
    let dir_idx = rng.gen_range(0..4usize);
    let (dir_word, dir_vec) = [
        ("forward", (0.0, 1.0)),
        ("backward", (0.0, -1.0)),
        ("left", (-1.0, 0.0)),
        ("right", (1.0, 0.0)),
    ][dir_idx];
    let wave_left = rng.gen_bool(0.5);
    let gait_hz = rng.gen_range(0.8..1.4);
    let amp = rng.gen_range(0.15..0.35);
    let speed = match action {
        Action::Walk => rng.gen_range(0.8..1.4),
        Action::Jump => rng.gen_range(0.2..0.5),
        Action::Wave => 0.0,
    };

    // Root trajectory in world space; everything else lives in root space.
    let dt = 1.0 / fps;
    let mut traj = Vec::with_capacity(n + 1);
    for t in 0..=n {
        let time = t as f64 * dt;
        let (dx, dz) = dir_vec;
        let bounce = match action {
            Action::Jump => (2.0 * std::f64::consts::PI * gait_hz * 0.5 * time).sin().max(0.0) * 0.3,
            _ => 0.02 * (2.0 * std::f64::consts::PI * gait_hz * 2.0 * time).sin().abs(),
        };
        traj.push([speed * dx * time, 0.9 + bounce, speed * dz * time]);
    }

    let nj = topology.n_joints();
    let mut blocks = Vec::with_capacity(nj);
    for j in 0..nj {
        let d = topology.feature_dim[j];
        let mut block = Array2::zeros((n, d));
        if topology.parent[j].is_none() {
            for t in 0..n {
                block[[t, 0]] = traj[t][1];
                block[[t, 1]] = (traj[t + 1][0] - traj[t][0]) / dt;
                block[[t, 2]] = (traj[t + 1][2] - traj[t][2]) / dt;
                block[[t, 3]] = 0.0;
                for c in 0..3 {
                    block[[t, 4 + c]] = (traj[t + 1][c] - traj[t][c]) / dt;
                }
            }
        } else {
            let rest = rest_offset(topology, j);
            let (ax, ay, az, phase) = joint_motion(topology, j, action, amp, wave_left, &mut rng);
            // Local positions, then velocities as exact forward differences of
            // the generated positions (last frame repeats the previous one).
            // Positions are rounded through f32 first so that the velocity
            // channels are exact finite differences of the stored values.
            let mut pos = vec![[0.0; 3]; n + 1];
            for (t, p) in pos.iter_mut().enumerate() {
                let ph = 2.0 * std::f64::consts::PI * gait_hz * t as f64 * dt + phase;
                p[0] = (rest[0] + ax * ph.sin()) as f32 as f64;
                p[1] = (rest[1] + ay * (ph * 0.5).sin()) as f32 as f64;
                p[2] = (rest[2] + az * ph.cos()) as f32 as f64;
            }
            for t in 0..n {
                for c in 0..3 {
                    block[[t, c]] = pos[t][c];
                    block[[t, 3 + c]] = (pos[t + 1][c] - pos[t][c]) / dt;
                }
                // 6-D rotation around identity with a small sway.
                let sway = 0.1 * (2.0 * std::f64::consts::PI * gait_hz * t as f64 * dt + phase).sin();
                let rot = [1.0, sway, 0.0, -sway, 1.0, 0.0];
                for (c, r) in rot.iter().enumerate() {
                    block[[t, 6 + c]] = *r;
                }
                if topology.foot[j] {
                    let ph = gait_hz * t as f64 * dt + phase / (2.0 * std::f64::consts::PI);
                    let stance = match action {
                        Action::Jump => ph.fract() < 0.6,
                        _ => ph.fract() < 0.5,
                    };
                    block[[t, d - 1]] = if stance { 1.0 } else { 0.0 };
                }
            }
        }
        // Round through f32 so .salm files round-trip bit-exactly.
        block.mapv_inplace(|v| v as f32 as f64);
        blocks.push(block);
    }

    let body_part = match (action, wave_left) {
        (Action::Wave, true) => "the left arm",
        (Action::Wave, false) => "the right arm",
        (Action::Jump, _) => "both legs",
        (Action::Walk, _) => "the legs",
    };
    let caption_text = match action {
        Action::Walk => format!("a person walks {dir_word} swinging {body_part}"),
        Action::Jump => format!("a person jumps {dir_word} pushing off {body_part}"),
        Action::Wave => format!("a person waves {body_part} while standing {dir_word}"),
    };
    let caption = crate::text::tokenize(&caption_text);
    CaptionedClip { motion: MotionSequence { blocks, fps }, caption_text, caption }
}

/// Rough rest-pose offset of a joint in root space, scaled by tree depth.
fn rest_offset(topology: &SkeletonTopology, j: usize) -> [f64; 3] {
    let mut depth = 0usize;
    let mut cur = j;
    while let Some(p) = topology.parent[cur] {
        depth += 1;
        cur = p;
    }
    let side = match topology.side_tag[j] {
        crate::skeleton::Side::Left => -0.15,
        crate::skeleton::Side::Right => 0.15,
        crate::skeleton::Side::Center => 0.0,
    };
    let name = &topology.joint_names[j];
    let vertical = if name.contains("hip")
        || name.contains("knee")
        || name.contains("ankle")
        || name.contains("toe")
        || name.contains("leg")
        || name.contains("foot")
    {
        -0.25 * depth as f64
    } else {
        0.2 * depth as f64
    };
    [side * (1.0 + 0.2 * depth as f64), vertical, 0.05 * depth as f64]
}

/// Per-joint sinusoid amplitudes and phase for an action.
fn joint_motion(
    topology: &SkeletonTopology,
    j: usize,
    action: Action,
    amp: f64,
    wave_left: bool,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, f64, f64) {
    let name = topology.joint_names[j].to_lowercase();
    let is_left = matches!(topology.side_tag[j], crate::skeleton::Side::Left);
    let is_leg = name.contains("hip")
        || name.contains("knee")
        || name.contains("ankle")
        || name.contains("toe")
        || name.contains("leg")
        || name.contains("foot");
    let is_arm = name.contains("shoulder")
        || name.contains("elbow")
        || name.contains("wrist")
        || name.contains("collar")
        || name.contains("arm");
    let phase = if is_left { 0.0 } else { std::f64::consts::PI };
    let jitter = rng.gen_range(0.8..1.2);
    match action {
        Action::Walk => {
            if is_leg || is_arm {
                (0.0, amp * 0.3 * jitter, amp * jitter, phase)
            } else {
                (0.0, amp * 0.05 * jitter, amp * 0.05, 0.0)
            }
        }
        Action::Jump => (0.0, amp * jitter, amp * 0.2, 0.0),
        Action::Wave => {
            let active = is_arm && (is_left == wave_left);
            if active {
                (amp * jitter, amp * jitter, 0.0, phase)
            } else {
                (0.0, amp * 0.02, 0.0, phase)
            }
        }
    }
}

pub fn write_motion_file(path: &Path, motion: &MotionSequence) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MOTION_MAGIC)?;
    w.write_u16::<LittleEndian>(MOTION_VERSION)?;
    w.write_u32::<LittleEndian>(motion.frames() as u32)?;
    w.write_f32::<LittleEndian>(motion.fps as f32)?;
    w.write_u16::<LittleEndian>(motion.n_joints() as u16)?;
    for width in motion.widths() {
        w.write_u16::<LittleEndian>(width as u16)?;
    }
    for t in 0..motion.frames() {
        for b in &motion.blocks {
            for c in 0..b.ncols() {
                w.write_f32::<LittleEndian>(b[[t, c]] as f32)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_motion_file(path: &Path) -> Result<MotionSequence> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MOTION_MAGIC {
        return Err(Error::MotionFormat(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != MOTION_VERSION {
        return Err(Error::MotionFormat(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let fps = r.read_f32::<LittleEndian>()? as f64;
    let nj = r.read_u16::<LittleEndian>()? as usize;
    if nj == 0 {
        return Err(Error::MotionFormat("zero joints".into()));
    }
    let mut widths = Vec::with_capacity(nj);
    for _ in 0..nj {
        let d = r.read_u16::<LittleEndian>()? as usize;
        if d == 0 {
            return Err(Error::MotionFormat("zero-width joint block".into()));
        }
        widths.push(d);
    }
    let row: usize = widths.iter().sum();
    let mut payload = vec![0f32; n * row];
    for (i, v) in payload.iter_mut().enumerate() {
        *v = r.read_f32::<LittleEndian>().map_err(|_| {
            Error::MotionFormat(format!(
                "truncated payload: expected {} floats, got {i}",
                n * row
            ))
        })?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::MotionFormat("trailing bytes after payload".into()));
    }
    let mut blocks: Vec<Array2<f64>> =
        widths.iter().map(|&d| Array2::zeros((n, d))).collect();
    let mut idx = 0;
    for t in 0..n {
        for (b, &d) in blocks.iter_mut().zip(&widths) {
            for c in 0..d {
                b[[t, c]] = payload[idx] as f64;
                idx += 1;
            }
        }
    }
    Ok(MotionSequence { blocks, fps })
}

/// One caption per line, aligned with clip indices.
pub fn write_caption_sidecar(path: &Path, clips: &[CaptionedClip]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for clip in clips {
        writeln!(w, "{}", clip.caption_text)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_caption_sidecar(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().map(|l| l.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{build_topology, default_skeleton, JointSpec, Side};
    use ndarray::Array1;
    use rand::Rng;
    use rand::SeedableRng;

    fn toy_topology() -> SkeletonTopology {
        // root(7), mid(12), foot(13) -> flat width 32
        build_topology(&[
            JointSpec { name: "root".into(), parent: "".into(), side: Side::Center, foot: false },
            JointSpec { name: "mid".into(), parent: "root".into(), side: Side::Center, foot: false },
            JointSpec { name: "foot".into(), parent: "mid".into(), side: Side::Center, foot: true },
        ])
        .unwrap()
    }

    #[test]
    fn decompose_slices_by_feature_dims() {
        let t = toy_topology();
        let pose = Array1::from_iter((0..32).map(|i| i as f64));
        let blocks = decompose_pose(pose.view(), &t).unwrap();
        assert_eq!(blocks[0].to_vec(), (0..7).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(blocks[1].to_vec(), (7..19).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(blocks[2].to_vec(), (19..32).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn compose_decompose_roundtrip() {
        let t = toy_topology();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pose = Array1::from_shape_fn(32, |_| rng.gen_range(-1.0..1.0));
        let blocks = decompose_pose(pose.view(), &t).unwrap();
        assert_eq!(compose_pose(&blocks), pose);
    }

    #[test]
    fn width_mismatch_rejected() {
        let t = toy_topology();
        let pose = Array1::zeros(31);
        assert!(decompose_pose(pose.view(), &t).is_err());
    }

    #[test]
    fn corpus_is_deterministic() {
        let (t, _) = default_skeleton();
        let a = generate_synthetic_corpus(0, 4, &t, false);
        let b = generate_synthetic_corpus(0, 4, &t, true);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.caption_text, y.caption_text);
            assert_eq!(x.motion, y.motion);
            assert_eq!(x.motion.frames() % 4, 0);
        }
    }

    #[test]
    fn contact_channels_are_binary() {
        let (t, _) = default_skeleton();
        for clip in generate_synthetic_corpus(3, 6, &t, false) {
            for j in 0..t.n_joints() {
                if let Some(c) = contact_channel(&t, j) {
                    for v in clip.motion.blocks[j].column(c) {
                        assert!(*v == 0.0 || *v == 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn velocity_channels_match_finite_differences() {
        // Oracle: recompute forward differences of the generated positions.
        let (t, _) = default_skeleton();
        for clip in generate_synthetic_corpus(11, 4, &t, false) {
            let fps = clip.motion.fps;
            for j in 0..t.n_joints() {
                let Some(pr) = position_channels(&t, j) else { continue };
                let vr = velocity_channels(&t, j);
                let b = &clip.motion.blocks[j];
                for tframe in 0..b.nrows() - 1 {
                    for (pc, vc) in pr.clone().zip(vr.clone()) {
                        let fd = (b[[tframe + 1, pc]] - b[[tframe, pc]]) * fps;
                        assert!(
                            (fd - b[[tframe, vc]]).abs() < 1e-5,
                            "joint {j} frame {tframe}: fd {fd} vs vel {}",
                            b[[tframe, vc]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mpjpe_identity_and_offset() {
        let (t, _) = default_skeleton();
        let clip = &generate_synthetic_corpus(5, 1, &t, false)[0];
        assert_eq!(mpjpe(&clip.motion, &clip.motion).unwrap(), 0.0);
        let mut shifted = clip.motion.clone();
        for (j, b) in shifted.blocks.iter_mut().enumerate() {
            if position_channels(&t, j).is_some() {
                b.column_mut(0).mapv_inplace(|v| v + 1.0);
            }
        }
        assert!((mpjpe(&clip.motion, &shifted).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_matches_bruteforce_on_random_case() {
        let t = toy_topology();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| MotionSequence {
            blocks: t
                .feature_dim
                .iter()
                .map(|&d| Array2::from_shape_fn((2, d), |_| rng.gen_range(-1.0..1.0)))
                .collect(),
            fps: 20.0,
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        // Brute force: mean of per-(frame, joint) norms over position-bearing joints.
        let mut acc = 0.0;
        let mut cnt = 0;
        for j in 1..3 {
            for tf in 0..2 {
                let d2: f64 = (0..3)
                    .map(|c| (a.blocks[j][[tf, c]] - b.blocks[j][[tf, c]]).powi(2))
                    .sum();
                acc += d2.sqrt();
                cnt += 1;
            }
        }
        assert!((mpjpe(&a, &b).unwrap() - acc / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_is_symmetric() {
        let (t, _) = default_skeleton();
        let clips = generate_synthetic_corpus(2, 2, &t, false);
        let a = clips[0].motion.fit_to_window(48);
        let b = clips[1].motion.fit_to_window(48);
        let d1 = mpjpe(&a, &b).unwrap();
        let d2 = mpjpe(&b, &a).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 >= 0.0);
    }

    #[test]
    fn motion_file_roundtrip_bit_exact() {
        let (t, _) = default_skeleton();
        let clip = &generate_synthetic_corpus(7, 1, &t, false)[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.salm");
        write_motion_file(&path, &clip.motion).unwrap();
        let back = read_motion_file(&path).unwrap();
        assert_eq!(back.blocks, clip.motion.blocks);
        assert_eq!(back.fps as f32, clip.motion.fps as f32);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.salm");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        assert!(matches!(read_motion_file(&path), Err(Error::MotionFormat(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let (t, _) = default_skeleton();
        let clip = &generate_synthetic_corpus(7, 1, &t, false)[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.salm");
        write_motion_file(&path, &clip.motion).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 263 * 4]).unwrap();
        match read_motion_file(&path) {
            Err(Error::MotionFormat(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn fit_to_window_crops_and_loops() {
        let (t, _) = default_skeleton();
        let clip = &generate_synthetic_corpus(1, 1, &t, false)[0];
        let n = clip.motion.frames();
        let crop = clip.motion.fit_to_window(n - 4);
        assert_eq!(crop.frames(), n - 4);
        let pad = clip.motion.fit_to_window(n + 4);
        assert_eq!(pad.frames(), n + 4);
        assert_eq!(pad.blocks[0].row(n), clip.motion.blocks[0].row(0));
    }
}
