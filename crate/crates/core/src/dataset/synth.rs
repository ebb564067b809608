//! Procedural skeleton motion: labeled primitives separated by idle spans.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GroundTruthSegment, SkeletonSequence, SkeletonTopology, MAX_JOINTS};
use crate::error::{Error, Result};
use crate::geometry::{rotate_about_vertical, Vec3};

const PRIMITIVES: [&str; 8] = [
    "raise_arms", "gait", "squat", "wave", "kick", "jump", "twist", "punch",
];

pub const PRIMITIVE_BANK_SIZE: usize = PRIMITIVES.len();

/// Names of the first `k` primitives, i.e. the class vocabulary.
pub fn primitive_names(k: usize) -> Result<Vec<String>> {
    if k > PRIMITIVE_BANK_SIZE {
        return Err(Error::InvalidArgument(format!(
            "{k} classes requested but the primitive bank defines {PRIMITIVE_BANK_SIZE}"
        )));
    }
    Ok(PRIMITIVES[..k].iter().map(|s| s.to_string()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub joints: usize,
    pub sequences: usize,
    pub frames: usize,
    pub fps: f64,
    /// Inclusive frame-length ranges.
    pub action_frames: (usize, usize),
    pub idle_frames: (usize, usize),
    /// Half-width of the uniform per-coordinate jitter.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            joints: MAX_JOINTS,
            sequences: 20,
            frames: 384,
            fps: 30.0,
            action_frames: (64, 112),
            idle_frames: (24, 56),
            noise: 0.004,
        }
    }
}

/// Joint angles driving the kinematic body model, all in radians except the
/// root offset.
#[derive(Clone, Copy, Default)]
struct Pose {
    root: [f64; 3],
    lean: f64,
    twist: f64,
    /// Per side (left, right): forward raise, lateral raise, elbow flexion.
    arm: [[f64; 3]; 2],
    /// Per side: hip flexion, knee flexion.
    leg: [[f64; 2]; 2],
}

impl Pose {
    fn lerp(&self, other: &Pose, t: f64) -> Pose {
        let m = |a: f64, b: f64| a + (b - a) * t;
        let mut out = *self;
        for i in 0..3 {
            out.root[i] = m(self.root[i], other.root[i]);
        }
        out.lean = m(self.lean, other.lean);
        out.twist = m(self.twist, other.twist);
        for s in 0..2 {
            for i in 0..3 {
                out.arm[s][i] = m(self.arm[s][i], other.arm[s][i]);
            }
            for i in 0..2 {
                out.leg[s][i] = m(self.leg[s][i], other.leg[s][i]);
            }
        }
        out
    }
}

fn rot_x(v: Vec3<f64>, a: f64) -> Vec3<f64> {
    // positive angle swings a downward vector forward (+z)
    let (s, c) = a.sin_cos();
    [v[0], v[1] * c - v[2] * s, v[1] * s + v[2] * c]
}

fn rot_z(v: Vec3<f64>, a: f64) -> Vec3<f64> {
    let (s, c) = a.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
}

fn offset(p: Vec3<f64>, d: Vec3<f64>, len: f64) -> Vec3<f64> {
    [p[0] + d[0] * len, p[1] + d[1] * len, p[2] + d[2] * len]
}

/// Body-frame joints: `+x` is the subject's left, `+z` is forward.
fn body_joints(pose: &Pose, scale: f64) -> [Vec3<f64>; MAX_JOINTS] {
    let r = pose.root;
    let pelvis = [r[0], 1.0 + r[1], r[2]];
    let upper = |p: Vec3<f64>| {
        let rel = [p[0], p[1], p[2]];
        let leaned = rot_x(rel, -pose.lean);
        let twisted = rotate_about_vertical(leaned, pose.twist);
        [
            pelvis[0] + twisted[0] * scale,
            pelvis[1] + twisted[1] * scale,
            pelvis[2] + twisted[2] * scale,
        ]
    };
    let mut j = [[0.0; 3]; MAX_JOINTS];
    j[0] = pelvis;
    j[13] = upper([0.0, 0.5, 0.0]);
    j[14] = upper([0.0, 0.66, 0.02]);
    for (side, sign) in [(0usize, 1.0), (1, -1.0)] {
        let [fwd, lat, elbow] = pose.arm[side];
        let shoulder = upper([0.2 * sign, 0.45, 0.0]);
        let down = rot_x(rot_z([0.0, -1.0, 0.0], lat * sign), fwd);
        let fore = rot_x(rot_z([0.0, -1.0, 0.0], lat * sign), fwd + elbow);
        let tw = |d: Vec3<f64>| rotate_about_vertical(rot_x(d, -pose.lean), pose.twist);
        let el = offset(shoulder, tw(down), 0.28 * scale);
        let hand = offset(el, tw(fore), 0.26 * scale);
        j[3 + side] = shoulder;
        j[5 + side] = el;
        j[7 + side] = hand;

        let [hip_flex, knee] = pose.leg[side];
        let hip = [pelvis[0] + 0.1 * sign * scale, pelvis[1] - 0.05 * scale, pelvis[2]];
        let thigh = rot_x([0.0, -1.0, 0.0], hip_flex);
        let shin = rot_x([0.0, -1.0, 0.0], hip_flex - knee);
        let kn = offset(hip, thigh, 0.45 * scale);
        let ft = offset(kn, shin, 0.45 * scale);
        j[1 + side] = hip;
        j[9 + side] = kn;
        j[11 + side] = ft;
    }
    j
}

/// Smooth 0→1→0 pulse over a cycle phase.
fn pulse(phase: f64) -> f64 {
    0.5 - 0.5 * phase.cos()
}

fn idle_pose(t: f64, sway: f64) -> Pose {
    let mut p = Pose::default();
    p.lean = 0.03 * (t * 0.7 + sway).sin();
    p.arm[0][1] = 0.12;
    p.arm[1][1] = 0.12;
    p.arm[0][2] = 0.15;
    p.arm[1][2] = 0.15;
    p
}

/// Pose of primitive `class` at phase `ph` (radians) with amplitude `amp`.
fn primitive_pose(class: usize, ph: f64, amp: f64, base: Pose) -> Pose {
    let mut p = base;
    match class {
        // both arms raised sideways overhead
        0 => {
            let a = 2.6 * amp * (0.4 + 0.6 * pulse(ph));
            p.arm[0][1] = 0.12 + a;
            p.arm[1][1] = 0.12 + a;
        }
        // marching in place, elbows bent, arms counter-swinging
        1 => {
            let s = ph.sin();
            p.leg[0] = [1.1 * amp * s.max(0.0), 1.6 * amp * s.max(0.0)];
            p.leg[1] = [1.1 * amp * (-s).max(0.0), 1.6 * amp * (-s).max(0.0)];
            p.arm[0] = [-0.6 * amp * s, 0.12, 1.3];
            p.arm[1] = [0.6 * amp * s, 0.12, 1.3];
        }
        // squat with arms forward for balance
        2 => {
            let d = amp * (0.35 + 0.65 * pulse(ph));
            p.leg[0] = [1.1 * d, 2.0 * d];
            p.leg[1] = [1.1 * d, 2.0 * d];
            p.root[1] = -0.35 * d;
            p.lean = 0.35 * d;
            p.arm[0][0] = 1.4 * d;
            p.arm[1][0] = 1.4 * d;
        }
        // right hand raised, forearm waving
        3 => {
            p.arm[1][1] = 2.3 * amp;
            p.arm[1][2] = -(0.3 + 0.6 * (2.0 * ph).sin()) * amp;
        }
        // right leg kick forward
        4 => {
            let k = 0.3 + 0.7 * pulse(ph);
            p.leg[1] = [1.3 * amp * k, 0.8 * amp * (1.0 - k)];
            p.arm[0][1] = 0.8 * amp;
            p.arm[1][1] = 0.8 * amp;
            p.lean = -0.15 * k;
        }
        // jumping jacks style hop
        5 => {
            let k = 0.25 + 0.75 * pulse(ph);
            p.root[1] = 0.2 * amp * ph.sin().max(0.0);
            p.arm[0][1] = 0.12 + 2.4 * amp * k;
            p.arm[1][1] = 0.12 + 2.4 * amp * k;
            p.leg[0][1] = 0.5 * (1.0 - k);
            p.leg[1][1] = 0.5 * (1.0 - k);
        }
        // torso twist with arms held out
        6 => {
            p.twist = 0.8 * amp * ph.sin();
            p.arm[0][1] = FRAC_PI_2 * amp;
            p.arm[1][1] = FRAC_PI_2 * amp;
        }
        // alternating forward punches
        7 => {
            let l = ph.sin().max(0.0);
            let r = (-ph.sin()).max(0.0);
            p.arm[0] = [FRAC_PI_2 * amp, 0.0, 1.9 * (1.0 - l)];
            p.arm[1] = [FRAC_PI_2 * amp, 0.0, 1.9 * (1.0 - r)];
        }
        _ => unreachable!("primitive index checked by the caller"),
    }
    p
}

/// Cycles per second of each primitive.
const BASE_RATE: [f64; PRIMITIVE_BANK_SIZE] = [0.6, 1.0, 0.5, 1.2, 0.7, 1.0, 0.6, 1.3];

const RAMP_FRAMES: f64 = 4.0;

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            cfg.classes
        )));
    }
    primitive_names(cfg.classes)?;
    if cfg.sequences == 0 {
        return Err(Error::InvalidArgument("need at least one sequence".into()));
    }
    let (a0, a1) = cfg.action_frames;
    let (i0, i1) = cfg.idle_frames;
    if a0 == 0 || a0 > a1 || i0 > i1 {
        return Err(Error::InvalidArgument("invalid segment length ranges".into()));
    }
    if cfg.frames < a0 + 2 * i0 {
        return Err(Error::InvalidArgument(format!(
            "{} frames cannot hold one action of {a0} frames plus idle borders",
            cfg.frames
        )));
    }
    if !(cfg.fps > 0.0) || !(cfg.noise >= 0.0) {
        return Err(Error::InvalidArgument("fps must be positive and noise non-negative".into()));
    }
    Ok(())
}

/// Generates labeled sequences. Classes are drawn from reshuffled decks so
/// every class appears once per `K` segments across the whole set; the
/// result is audited and an error is returned if some class never appears.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SkeletonSequence>> {
    validate(cfg)?;
    let topology = SkeletonTopology::standard(cfg.joints)?;
    let names = primitive_names(cfg.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut deck: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(cfg.sequences);

    for s in 0..cfg.sequences {
        let n = cfg.frames;
        let yaw = rng.gen_range(0.0..TAU);
        let scale = rng.gen_range(0.9..1.1);
        let sway = rng.gen_range(0.0..TAU);
        let mut segments = Vec::new();
        let mut cursor = rng.gen_range(cfg.idle_frames.0..=cfg.idle_frames.1);
        loop {
            let len = rng.gen_range(cfg.action_frames.0..=cfg.action_frames.1);
            if cursor + len + cfg.idle_frames.0 > n {
                break;
            }
            if deck.is_empty() {
                deck = (0..cfg.classes).collect();
                deck.shuffle(&mut rng);
            }
            let class = deck.pop().unwrap_or(0);
            segments.push(GroundTruthSegment { class, start: cursor, end: cursor + len });
            cursor += len + rng.gen_range(cfg.idle_frames.0..=cfg.idle_frames.1);
        }
        if segments.is_empty() {
            // the leading idle span was too long; fall back to the shortest
            let len = cfg.action_frames.0;
            let class = deck.pop().unwrap_or_else(|| rng.gen_range(0..cfg.classes));
            segments.push(GroundTruthSegment {
                class,
                start: cfg.idle_frames.0,
                end: cfg.idle_frames.0 + len,
            });
        }
        let params: Vec<(f64, f64)> = segments
            .iter()
            .map(|_| (rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.05)))
            .collect();

        let mut positions = Vec::with_capacity(n * cfg.joints);
        for f in 0..n {
            let t = f as f64 / cfg.fps;
            let base = idle_pose(t, sway);
            let mut pose = base;
            for (seg, &(rate, amp)) in segments.iter().zip(&params) {
                if (seg.start..seg.end).contains(&f) {
                    let local = (f - seg.start) as f64 / cfg.fps;
                    let ph = TAU * BASE_RATE[seg.class] * rate * local;
                    let target = primitive_pose(seg.class, ph, amp, base);
                    let edge = ((f - seg.start) as f64 + 1.0)
                        .min((seg.end - f) as f64)
                        .min(RAMP_FRAMES)
                        / RAMP_FRAMES;
                    pose = base.lerp(&target, edge);
                }
            }
            let joints = body_joints(&pose, scale);
            for p in joints.iter().take(cfg.joints) {
                let mut q = rotate_about_vertical(*p, yaw);
                for c in &mut q {
                    *c += rng.gen_range(-cfg.noise..=cfg.noise);
                    // stored at the on-disk precision so reloads are exact
                    *c = *c as f32 as f64;
                }
                positions.push(q);
            }
        }
        out.push(SkeletonSequence::new(
            format!("seq{s:04}"),
            cfg.fps,
            topology.clone(),
            names.clone(),
            positions,
            segments,
        )?);
    }

    let mut seen = vec![false; cfg.classes];
    for seq in &out {
        for seg in &seq.segments {
            seen[seg.class] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::InvalidArgument(format!(
            "generated set has no instance of class {missing}; add sequences or frames"
        )));
    }
    Ok(out)
}
