//! Single rigid body on four massless legs.
//!
//! Joints follow their PD targets as a first-order lag (the legs carry no
//! mass, so the PD law reduces to `kd * dθ/dt = kp * (θ* - θ)`), integrated
//! exactly per substep. Feet touching solid space push the body through a
//! vertical spring-damper and a regularised Coulomb drag. The body box is
//! sampled at its corners, edge midpoints and face centers; sampled points
//! inside solid space are pushed out along the shortest axis.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::percept::Pose;
use crate::terrain::VoxelTerrain;
use crate::{Error, Result};

pub const DT: f64 = 0.02;
pub const SUBSTEPS: usize = 8;
pub const KP: f64 = 20.0;
pub const KD: f64 = 0.5;
pub const THIGH: f64 = 0.18;
pub const SHANK: f64 = 0.18;
pub const NOMINAL_ABDUCTION: f64 = 0.0;
pub const NOMINAL_HIP: f64 = 0.75;
pub const NOMINAL_KNEE: f64 = -1.5;
pub const ACTION_SCALE: f64 = 0.25;
pub const MASS: f64 = 12.0;
pub const BODY_SIZE: [f64; 3] = [0.55, 0.25, 0.18];
pub const GRAVITY: f64 = 9.81;
pub const CONTACT_STIFFNESS: f64 = 5000.0;
pub const CONTACT_DAMPING: f64 = 150.0;
pub const MAX_PENETRATION: f64 = 0.05;
pub const FRICTION: f64 = 0.8;
pub const SLIP_VELOCITY: f64 = 0.05;
pub const ANGULAR_DAMPING: f64 = 0.5;

/// Hip mounts in the body frame, legs ordered FL, FR, RL, RR.
pub const HIPS: [[f64; 3]; 4] = [
    [0.22, 0.08, -0.03],
    [0.22, -0.08, -0.03],
    [-0.22, 0.08, -0.03],
    [-0.22, -0.08, -0.03],
];

pub const NOMINAL_JOINTS: [f64; 12] = {
    let mut q = [0.0; 12];
    let mut l = 0;
    while l < 4 {
        q[3 * l] = NOMINAL_ABDUCTION;
        q[3 * l + 1] = NOMINAL_HIP;
        q[3 * l + 2] = NOMINAL_KNEE;
        l += 1;
    }
    q
};

/// Foot position in the body frame for one leg's (abduction, hip, knee).
pub fn foot_in_body(leg: usize, q: &[f64]) -> Vector3<f64> {
    let (abd, hip, knee) = (q[0], q[1], q[2]);
    let x = -THIGH * hip.sin() - SHANK * (hip + knee).sin();
    let z = -THIGH * hip.cos() - SHANK * (hip + knee).cos();
    let (s, c) = abd.sin_cos();
    let h = HIPS[leg];
    Vector3::new(h[0] + x, h[1] - s * z, h[2] + c * z)
}

/// Body center height above flat ground with nominal joints and no load.
pub fn nominal_height() -> f64 {
    -foot_in_body(0, &NOMINAL_JOINTS[..3]).z
}

/// Static spring compression carrying the body on four feet.
pub fn static_sag() -> f64 {
    MASS * GRAVITY / (4.0 * CONTACT_STIFFNESS)
}

pub fn body_inertia() -> Vector3<f64> {
    let [a, b, c] = BODY_SIZE;
    Vector3::new(b * b + c * c, a * a + c * c, a * a + b * b) * (MASS / 12.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    /// World frame.
    pub linear_velocity: Vector3<f64>,
    /// Body frame.
    pub angular_velocity: Vector3<f64>,
    pub joints: [f64; 12],
    pub joint_velocities: [f64; 12],
    pub feet: [Vector3<f64>; 4],
    pub collision: bool,
}

impl AgentState {
    pub fn new(position: Vector3<f64>, yaw: f64) -> Self {
        let mut s = Self {
            position,
            orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
            joints: NOMINAL_JOINTS,
            joint_velocities: [0.0; 12],
            feet: [Vector3::zeros(); 4],
            collision: false,
        };
        s.update_feet();
        s
    }

    /// Nominal stance resting on the ground below `(x, y)`.
    pub fn standing(t: &VoxelTerrain, x: f64, y: f64, yaw: f64) -> Self {
        let ground = t.ground_below([x, y, 1e3]);
        Self::new(
            Vector3::new(x, y, ground + nominal_height() - static_sag()),
            yaw,
        )
    }

    pub fn pose(&self) -> Pose {
        Pose::from_parts(self.position.into(), self.orientation)
    }

    pub fn update_feet(&mut self) {
        for leg in 0..4 {
            self.feet[leg] = self.position
                + self.orientation * foot_in_body(leg, &self.joints[3 * leg..3 * leg + 3]);
        }
    }

    /// Unit gravity direction in the body frame.
    pub fn gravity_body(&self) -> Vector3<f64> {
        self.orientation
            .inverse_transform_vector(&Vector3::new(0.0, 0.0, -1.0))
    }

    pub fn body_velocity(&self) -> Vector3<f64> {
        self.orientation
            .inverse_transform_vector(&self.linear_velocity)
    }

    pub fn yaw(&self) -> f64 {
        self.orientation.euler_angles().2
    }

    pub fn is_finite(&self) -> bool {
        let v = [self.position, self.linear_velocity, self.angular_velocity];
        v.iter().all(|x| x.iter().all(|c| c.is_finite()))
            && self.orientation.coords.iter().all(|c| c.is_finite())
            && self
                .joints
                .iter()
                .chain(&self.joint_velocities)
                .all(|c| c.is_finite())
    }

    /// Kinetic plus gravitational potential energy of the body.
    pub fn mechanical_energy(&self) -> f64 {
        let inertia = body_inertia();
        let w = self.angular_velocity;
        0.5 * MASS * self.linear_velocity.norm_squared()
            + 0.5 * (inertia.x * w.x * w.x + inertia.y * w.y * w.y + inertia.z * w.z * w.z)
            + MASS * GRAVITY * self.position.z
    }
}

/// Joint targets for a raw action, clamped to `[-1, 1]` before scaling.
pub fn joint_targets(action: &[f64; 12]) -> [f64; 12] {
    let mut q = NOMINAL_JOINTS;
    for (t, a) in q.iter_mut().zip(action) {
        *t += ACTION_SCALE * a.clamp(-1.0, 1.0);
    }
    q
}

fn body_samples() -> [Vector3<f64>; 26] {
    let h = Vector3::new(BODY_SIZE[0] / 2.0, BODY_SIZE[1] / 2.0, BODY_SIZE[2] / 2.0);
    let mut out = [Vector3::zeros(); 26];
    let mut n = 0;
    for i in -1i32..=1 {
        for j in -1i32..=1 {
            for k in -1i32..=1 {
                if i == 0 && j == 0 && k == 0 {
                    continue;
                }
                out[n] = Vector3::new(i as f64 * h.x, j as f64 * h.y, k as f64 * h.z);
                n += 1;
            }
        }
    }
    out
}

/// Shortest axis-aligned displacement that takes `p` out of solid space.
fn pushout(t: &VoxelTerrain, p: Vector3<f64>) -> Option<Vector3<f64>> {
    let top = t.solid_top([p.x, p.y, p.z])?;
    let mut best = Vector3::new(0.0, 0.0, top - p.z);
    if p.z < 0.0 {
        return Some(best);
    }
    let cs = t.cell_size();
    let o = t.origin();
    let [i, j, k] = t.locate([p.x, p.y, p.z]);
    let cell = [i, j, k];
    let pv = [p.x, p.y, p.z];
    for axis in 0..3 {
        for dir in [-1i64, 1] {
            if axis == 2 && dir == 1 {
                continue;
            }
            let mut c = cell;
            let mut steps = 0;
            while steps < 8 && t.cell_signed(c[0], c[1], c[2]) {
                c[axis] += dir;
                steps += 1;
            }
            if t.cell_signed(c[0], c[1], c[2]) || (axis == 2 && c[2] < 0) {
                continue;
            }
            let face = if dir > 0 {
                c[axis] as f64 * cs
            } else {
                (c[axis] + 1) as f64 * cs
            } + o[axis];
            let d = face - pv[axis];
            if d.abs() < best.norm() {
                best = Vector3::zeros();
                best[axis] = d;
            }
        }
    }
    Some(best)
}

/// Advances one control period. Fails if the state becomes non-finite.
pub fn step(state: &AgentState, action: &[f64; 12], t: &VoxelTerrain) -> Result<AgentState> {
    if !action.iter().all(|a| a.is_finite()) {
        return Err(Error::Fault("non-finite action".into()));
    }
    let mut s = state.clone();
    let targets = joint_targets(action);
    let h = DT / SUBSTEPS as f64;
    let decay = (-(KP / KD) * h).exp();
    let inertia = body_inertia();
    let gravity = Vector3::new(0.0, 0.0, -GRAVITY);
    let start_joints = s.joints;
    s.collision = false;
    let samples = body_samples();

    for _ in 0..SUBSTEPS {
        let mut next = s.joints;
        for (q, target) in next.iter_mut().zip(&targets) {
            *q = target + (*q - target) * decay;
        }
        let rot = s.orientation;
        let mut force = gravity * MASS;
        let mut torque_world = Vector3::zeros();
        for leg in 0..4 {
            let r_old = foot_in_body(leg, &s.joints[3 * leg..3 * leg + 3]);
            let r_new = foot_in_body(leg, &next[3 * leg..3 * leg + 3]);
            let p = s.position + rot * r_new;
            let Some(top) = t.solid_top([p.x, p.y, p.z]) else {
                continue;
            };
            let rel = s.angular_velocity.cross(&r_new) + (r_new - r_old) / h;
            let v = s.linear_velocity + rot * rel;
            let depth = (top - p.z).min(MAX_PENETRATION);
            let normal = (CONTACT_STIFFNESS * depth - CONTACT_DAMPING * v.z).max(0.0);
            if normal == 0.0 {
                continue;
            }
            let slip = Vector3::new(v.x, v.y, 0.0);
            let drag = -slip * (FRICTION * normal / slip.norm().max(SLIP_VELOCITY));
            let f = drag + Vector3::new(0.0, 0.0, normal);
            force += f;
            torque_world += (p - s.position).cross(&f);
        }
        s.joints = next;

        s.linear_velocity += force * (h / MASS);
        s.position += s.linear_velocity * h;
        let torque = rot.inverse_transform_vector(&torque_world);
        let accel = Vector3::new(
            torque.x / inertia.x,
            torque.y / inertia.y,
            torque.z / inertia.z,
        );
        // Gyroscopic coupling is omitted; free rotation only decays.
        s.angular_velocity = (s.angular_velocity + accel * h) * (-ANGULAR_DAMPING * h).exp();
        s.orientation *= UnitQuaternion::from_scaled_axis(s.angular_velocity * h);

        let mut push = Vector3::<f64>::zeros();
        for local in &samples {
            let p = s.position + s.orientation * local;
            if let Some(d) = pushout(t, p) {
                for a in 0..3 {
                    if d[a].abs() > push[a].abs() {
                        push[a] = d[a];
                    }
                }
            }
        }
        if push != Vector3::zeros() {
            s.collision = true;
            s.position += push;
            for a in 0..3 {
                if push[a] * s.linear_velocity[a] < 0.0 {
                    s.linear_velocity[a] = 0.0;
                }
            }
        }
    }
    for i in 0..12 {
        s.joint_velocities[i] = (s.joints[i] - start_joints[i]) / DT;
    }
    s.update_feet();
    if !s.is_finite() {
        return Err(Error::Fault("non-finite agent state".into()));
    }
    Ok(s)
}

/// Inertia tensor of the body box, for diagnostics.
pub fn inertia_matrix() -> Matrix3<f64> {
    Matrix3::from_diagonal(&body_inertia())
}
