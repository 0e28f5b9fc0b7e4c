//! Procedural toy motions on a five-joint skeleton and their templated
//! descriptions.
//!
//! Coordinates: `y` up; in the root frame `x` points to the character's left
//! and `z` forward. Positive heading change is a turn to the left.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureLayout, MotionError, MotionSequence, TOY_JOINTS};
use crate::semgraph::{
    detokenize, tokenize, GraphEdge, GraphNode, Level, NodeId, Relation, SemanticGraph, Span,
};

pub const TOY_FPS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Walk,
    Turn,
    Jump,
    Stop,
    Wave,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [ActionKind::Walk, ActionKind::Turn, ActionKind::Jump, ActionKind::Stop, ActionKind::Wave];

    pub fn verb(self) -> &'static str {
        match self {
            ActionKind::Walk => "walks",
            ActionKind::Turn => "turns",
            ActionKind::Jump => "jumps",
            ActionKind::Stop => "stops",
            ActionKind::Wave => "waves",
        }
    }

    pub fn takes_direction(self) -> bool {
        matches!(self, ActionKind::Walk | ActionKind::Turn | ActionKind::Jump)
    }

    pub fn takes_speed(self) -> bool {
        !matches!(self, ActionKind::Stop)
    }

    pub fn takes_path(self) -> bool {
        matches!(self, ActionKind::Walk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Forward, Direction::Backward, Direction::Left, Direction::Right];

    fn phrase(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Left => "to the left",
            Direction::Right => "to the right",
        }
    }

    /// Unit displacement in the root frame `(x = left, z = forward)`.
    fn local(self) -> (f64, f64) {
        match self {
            Direction::Forward => (0.0, 1.0),
            Direction::Backward => (0.0, -1.0),
            Direction::Left => (1.0, 0.0),
            Direction::Right => (-1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speed {
    Slow,
    Fast,
}

impl Speed {
    fn phrase(self) -> &'static str {
        match self {
            Speed::Slow => "slowly",
            Speed::Fast => "quickly",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathShape {
    Straight,
    Circle,
}

impl PathShape {
    fn phrase(self) -> &'static str {
        match self {
            PathShape::Straight => "in a straight line",
            PathShape::Circle => "in a circle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAction {
    pub kind: ActionKind,
    pub direction: Option<Direction>,
    pub speed: Option<Speed>,
    pub path: Option<PathShape>,
    pub frames: usize,
}

impl ToyAction {
    pub fn new(kind: ActionKind, frames: usize) -> Self {
        ToyAction { kind, direction: None, speed: None, path: None, frames }
    }

    pub fn direction(mut self, d: Direction) -> Self {
        self.direction = Some(d);
        self
    }

    pub fn speed(mut self, s: Speed) -> Self {
        self.speed = Some(s);
        self
    }

    pub fn path(mut self, p: PathShape) -> Self {
        self.path = Some(p);
        self
    }

    fn speed_factor(&self) -> f64 {
        match self.speed {
            Some(Speed::Slow) => 0.6,
            None => 1.0,
            Some(Speed::Fast) => 1.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMotionParams {
    pub actions: Vec<ToyAction>,
}

impl ToyMotionParams {
    pub fn new(actions: Vec<ToyAction>) -> Self {
        ToyMotionParams { actions }
    }

    pub fn total_frames(&self) -> usize {
        self.actions.iter().map(|a| a.frames).sum()
    }

    pub fn check(&self) -> Result<(), MotionError> {
        if !(1..=3).contains(&self.actions.len()) {
            return Err(MotionError::Invalid(format!("expected 1-3 actions, got {}", self.actions.len())));
        }
        for (i, a) in self.actions.iter().enumerate() {
            let bad = |what: &str| Err(MotionError::Invalid(format!("action {i} ({:?}) cannot take {what}", a.kind)));
            if a.frames == 0 {
                return Err(MotionError::Invalid(format!("action {i} has zero frames")));
            }
            if a.direction.is_some() && !a.kind.takes_direction() {
                return bad("a direction");
            }
            if a.kind == ActionKind::Turn && matches!(a.direction, Some(Direction::Forward | Direction::Backward)) {
                return bad("a forward/backward direction");
            }
            if a.speed.is_some() && !a.kind.takes_speed() {
                return bad("a speed");
            }
            if a.path.is_some() && !a.kind.takes_path() {
                return bad("a path");
            }
        }
        Ok(())
    }
}

/// Per-sample style variation drawn from the noise seed.
struct Style {
    amplitude: f64,
    phase: f64,
    pace: f64,
    height: f64,
}

impl Style {
    fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Style {
            amplitude: rng.random_range(0.9..1.1),
            phase: rng.random_range(-0.4..0.4),
            pace: rng.random_range(0.95..1.05),
            height: rng.random_range(0.97..1.03),
        }
    }
}

const ROOT_HEIGHT: f64 = 0.9;
const STEP_LIFT: f64 = 0.08;

/// Pose of one frame: world root placement plus root-frame joint positions and
/// swing angles.
#[derive(Clone)]
struct Pose {
    x: f64,
    z: f64,
    heading: f64,
    joints: [[f64; 3]; TOY_JOINTS],
    swing: [f64; TOY_JOINTS],
}

struct Kinematics {
    x: f64,
    z: f64,
    heading: f64,
    gait: f64,
}

impl Kinematics {
    fn step_world(&mut self, local_x: f64, local_z: f64) {
        let (s, c) = self.heading.sin_cos();
        // root frame: forward = (sin h, cos h), left = (cos h, -sin h)
        self.x += local_z * s + local_x * c;
        self.z += local_z * c - local_x * s;
    }
}

fn neutral(height: f64) -> [[f64; 3]; TOY_JOINTS] {
    [
        [0.0, height, 0.0],
        [0.2, height + 0.1, 0.0],
        [-0.2, height + 0.1, 0.0],
        [0.1, 0.0, 0.0],
        [-0.1, 0.0, 0.0],
    ]
}

fn pose_for(a: &ToyAction, k: usize, style: &Style, kin: &mut Kinematics) -> Pose {
    let n = a.frames as f64;
    let u = k as f64 / n;
    let s = a.speed_factor() * style.pace;
    let base = ROOT_HEIGHT * style.height;
    let mut joints = neutral(base);
    let mut swing = [0.0; TOY_JOINTS];
    let pose = |kin: &Kinematics, joints, swing| Pose { x: kin.x, z: kin.z, heading: kin.heading, joints, swing };

    match a.kind {
        ActionKind::Walk => {
            let dir = a.direction.unwrap_or(Direction::Forward);
            let (dx, dz) = dir.local();
            let v = 0.12 * s * if dir == Direction::Backward { 0.7 } else { 1.0 };
            let phi = kin.gait + style.phase;
            let stride = 0.2 * style.amplitude;
            let sw = phi.sin();
            joints[0][1] = base + 0.02 * (2.0 * phi).cos().abs();
            joints[3] = [0.1 + dx * stride * sw, STEP_LIFT * sw.max(0.0), dz * stride * sw];
            joints[4] = [-0.1 - dx * stride * sw, STEP_LIFT * (-sw).max(0.0), -dz * stride * sw];
            joints[1][2] = -0.15 * sw * style.amplitude;
            joints[2][2] = 0.15 * sw * style.amplitude;
            swing = [0.0, -0.4 * sw, 0.4 * sw, 0.5 * sw, -0.5 * sw];
            let p = pose(kin, joints, swing);
            kin.gait += TAU * 0.1 * a.speed_factor();
            kin.step_world(dx * v, dz * v);
            if a.path == Some(PathShape::Circle) {
                kin.heading += TAU / n;
            }
            p
        }
        ActionKind::Turn => {
            let sign = if a.direction == Some(Direction::Right) { -1.0 } else { 1.0 };
            let span = if a.speed == Some(Speed::Fast) { 0.5 } else { 1.0 };
            let rate = if a.speed == Some(Speed::Slow) { 0.6 } else { 1.0 };
            let total = sign * PI / 2.0 * rate;
            let phi = TAU * 2.0 * u + style.phase;
            let sw = phi.sin();
            joints[3][1] = 0.5 * STEP_LIFT * sw.max(0.0);
            joints[4][1] = 0.5 * STEP_LIFT * (-sw).max(0.0);
            swing = [0.0, 0.0, 0.0, 0.3 * sw, -0.3 * sw];
            let p = pose(kin, joints, swing);
            if u < span {
                kin.heading += total / (span * n);
            }
            p
        }
        ActionKind::Jump => {
            let hops = if a.speed == Some(Speed::Fast) { 2.0 } else { 1.0 };
            let h = if a.speed == Some(Speed::Slow) { 0.25 } else { 0.35 } * style.amplitude;
            let w = (u * hops).fract();
            let lift = h * 4.0 * w * (1.0 - w);
            joints[0][1] = base + lift;
            for f in [3, 4] {
                joints[f][1] = lift;
            }
            joints[1][1] = base + 0.3 + lift;
            joints[2][1] = base + 0.3 + lift;
            swing = [0.0, 1.2, 1.2, -0.3 * (lift / h), -0.3 * (lift / h)];
            let p = pose(kin, joints, swing);
            if let Some(d) = a.direction {
                let (dx, dz) = d.local();
                let v = 0.08 * s;
                kin.step_world(dx * v, dz * v);
            }
            p
        }
        ActionKind::Stop => pose(kin, joints, swing),
        ActionKind::Wave => {
            let cycles = match a.speed {
                Some(Speed::Slow) => 1.0,
                None => 2.0,
                Some(Speed::Fast) => 3.0,
            };
            let osc = (TAU * cycles * u + style.phase).sin();
            joints[2] = [-0.25 + 0.15 * osc * style.amplitude, base + 0.7, 0.1];
            swing = [0.0, 0.0, 2.6 + 0.3 * osc, 0.0, 0.0];
            pose(kin, joints, swing)
        }
    }
}

fn poses(params: &ToyMotionParams, style: &Style) -> Vec<Pose> {
    let mut kin = Kinematics { x: 0.0, z: 0.0, heading: 0.0, gait: 0.0 };
    let mut out = Vec::with_capacity(params.total_frames() + 1);
    for a in &params.actions {
        for k in 0..a.frames {
            out.push(pose_for(a, k, style, &mut kin));
        }
    }
    // one extra frame closes the last velocity
    let last = params.actions.last().unwrap();
    out.push(pose_for(last, last.frames, style, &mut kin));
    out
}

fn rotation_6d(angle: f64) -> [f64; 6] {
    // first two columns of a rotation about the x axis
    let (s, c) = angle.sin_cos();
    [1.0, 0.0, 0.0, 0.0, c, s]
}

/// Synthesizes a motion for `params`; deterministic in `noise_seed`.
pub fn synthesize_toy_motion(params: &ToyMotionParams, noise_seed: u64) -> Result<MotionSequence, MotionError> {
    params.check()?;
    let style = Style::draw(noise_seed);
    let layout = FeatureLayout::new(TOY_JOINTS);
    let ps = poses(params, &style);
    let len = ps.len() - 1;
    let w = layout.width();
    let mut frames = vec![0.0; len * w];
    for t in 0..len {
        let (p, q) = (&ps[t], &ps[t + 1]);
        let f = &mut frames[t * w..(t + 1) * w];
        f[layout.root_angular_velocity()] = q.heading - p.heading;
        let (wx, wz) = (q.x - p.x, q.z - p.z);
        let (s, c) = p.heading.sin_cos();
        f[layout.root_velocity_x()] = wx * c - wz * s;
        f[layout.root_velocity_z()] = wx * s + wz * c;
        f[layout.root_height()] = p.joints[0][1];
        let jp = layout.joint_positions().start;
        let jv = layout.joint_velocities().start;
        let jr = layout.joint_rotations().start;
        for j in 0..TOY_JOINTS {
            for d in 0..3 {
                f[jp + 3 * j + d] = p.joints[j][d];
                f[jv + 3 * j + d] = q.joints[j][d] - p.joints[j][d];
            }
            f[jr + 6 * j..jr + 6 * j + 6].copy_from_slice(&rotation_6d(p.swing[j]));
        }
        let c0 = layout.contacts().start;
        for (side, foot) in [3, 4].into_iter().enumerate() {
            let grounded = if p.joints[foot][1] < 1e-9 { 1.0 } else { 0.0 };
            f[c0 + 2 * side] = grounded;
            f[c0 + 2 * side + 1] = grounded;
        }
    }
    MotionSequence::new(frames, TOY_FPS, layout)
}

/// Integrates root velocities into a world-space `(x, z)` trajectory starting
/// at the origin facing `+z`; one point per frame boundary.
pub fn root_trajectory(m: &MotionSequence) -> Vec<(f64, f64)> {
    let l = m.layout;
    let (mut x, mut z, mut h) = (0.0, 0.0, 0.0);
    let mut out = vec![(x, z)];
    for f in m.frames() {
        let (vx, vz) = (f[l.root_velocity_x()], f[l.root_velocity_z()]);
        let (s, c) = f64::sin_cos(h);
        x += vz * s + vx * c;
        z += vz * c - vx * s;
        h += f[l.root_angular_velocity()];
        out.push((x, z));
    }
    out
}

/// Final world `x` displacement; positive is to the character's initial left.
pub fn lateral_displacement(m: &MotionSequence) -> f64 {
    root_trajectory(m).last().map_or(0.0, |p| p.0)
}

/// Builds the templated sentence for `params` and its gold graph.
pub fn describe_toy_motion(params: &ToyMotionParams) -> (String, SemanticGraph) {
    let mut tokens: Vec<String> = tokenize("a person");
    let root = NodeId::new("m");
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let n = params.actions.len();
    for (i, a) in params.actions.iter().enumerate() {
        if i > 0 {
            if n > 2 {
                tokens.push(",".into());
            }
            if i == n - 1 {
                tokens.push("and".into());
            }
        }
        let aid = NodeId(format!("a{i}"));
        nodes.push(GraphNode {
            id: aid.clone(),
            level: Level::Action,
            text: a.kind.verb().into(),
            span: Span::new(tokens.len(), tokens.len() + 1),
            masked: false,
        });
        edges.push(GraphEdge { src: root.clone(), dst: aid.clone(), relation: Relation::ArgmMa, weight: 1.0 });
        tokens.push(a.kind.verb().into());
        let phrases = [
            a.speed.map(|s| (s.phrase(), Relation::ArgmMnr)),
            a.direction.map(|d| (d.phrase(), Relation::ArgmDir)),
            a.path.map(|p| (p.phrase(), Relation::ArgmMnr)),
        ];
        for (j, (phrase, rel)) in phrases.into_iter().flatten().enumerate() {
            let words = tokenize(phrase);
            let sid = NodeId(format!("{aid}.s{j}"));
            nodes.push(GraphNode {
                id: sid.clone(),
                level: Level::Specific,
                text: words.join(" "),
                span: Span::new(tokens.len(), tokens.len() + words.len()),
                masked: false,
            });
            edges.push(GraphEdge { src: aid.clone(), dst: sid, relation: rel, weight: 1.0 });
            tokens.extend(words);
        }
    }
    tokens.push(".".into());
    let text = detokenize(&tokens);
    nodes.insert(
        0,
        GraphNode { id: root.clone(), level: Level::Motion, text: text.clone(), span: Span::new(0, tokens.len()), masked: false },
    );
    (text, SemanticGraph { root, nodes, edges })
}
