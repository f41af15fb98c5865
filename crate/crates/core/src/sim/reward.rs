use serde::{Deserialize, Serialize};

use super::command::Command;
use super::dynamics::AgentState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub lin_vel: f64,
    pub yaw_rate: f64,
    pub z_vel: f64,
    pub orientation: f64,
    pub action_rate: f64,
    pub collision: f64,
    pub alive: f64,
    /// Width of both tracking kernels.
    pub tracking_sigma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lin_vel: 1.0,
            yaw_rate: 0.5,
            z_vel: -2.0,
            orientation: -0.2,
            action_rate: -0.01,
            collision: -1.0,
            alive: 0.1,
            tracking_sigma: 0.25,
        }
    }
}

/// Weighted reward terms; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub lin_vel: f64,
    pub yaw_rate: f64,
    pub z_vel: f64,
    pub orientation: f64,
    pub action_rate: f64,
    pub collision: f64,
    pub alive: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("lin_vel", self.lin_vel),
            ("yaw_rate", self.yaw_rate),
            ("z_vel", self.z_vel),
            ("orientation", self.orientation),
            ("action_rate", self.action_rate),
            ("collision", self.collision),
            ("alive", self.alive),
        ]
    }

    pub fn term_sum(&self) -> f64 {
        self.terms().iter().map(|(_, v)| v).sum()
    }
}

/// Reward of the transition `prev -> cur` under `cmd`.
pub fn reward(
    _prev: &AgentState,
    cur: &AgentState,
    a: &[f64; 12],
    a_prev: &[f64; 12],
    cmd: &Command,
    collision: bool,
    w: &RewardWeights,
) -> RewardBreakdown {
    let v = cur.body_velocity();
    let ex = cmd.velocity[0] - v.x;
    let ey = cmd.velocity[1] - v.y;
    let ew = cmd.yaw_rate - cur.angular_velocity.z;
    let g = cur.gravity_body();
    let da: f64 = a.iter().zip(a_prev).map(|(x, y)| (x - y) * (x - y)).sum();
    let mut r = RewardBreakdown {
        lin_vel: w.lin_vel * (-(ex * ex + ey * ey) / w.tracking_sigma).exp(),
        yaw_rate: w.yaw_rate * (-(ew * ew) / w.tracking_sigma).exp(),
        z_vel: w.z_vel * cur.linear_velocity.z * cur.linear_velocity.z,
        orientation: w.orientation * (g.x * g.x + g.y * g.y),
        action_rate: w.action_rate * da,
        collision: if collision { w.collision } else { 0.0 },
        alive: w.alive,
        total: 0.0,
    };
    r.total = r.term_sum();
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::command::CommandClass;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn moving(vx: f64) -> AgentState {
        let mut s = AgentState::new(Vector3::new(1.0, 1.0, 0.3), 0.0);
        s.linear_velocity = Vector3::new(vx, 0.0, 0.0);
        s
    }

    fn forward(vx: f64) -> Command {
        Command {
            velocity: [vx, 0.0],
            yaw_rate: 0.0,
            class: CommandClass::Forward,
        }
    }

    #[test]
    fn perfect_tracking_scores_sum_of_bonuses() {
        let s = moving(0.7);
        let r = reward(
            &s,
            &s,
            &[0.0; 12],
            &[0.0; 12],
            &forward(0.7),
            false,
            &RewardWeights::default(),
        );
        assert!((r.total - 1.6).abs() < 1e-12);
    }

    #[test]
    fn standing_under_unit_command() {
        let s = moving(0.0);
        let r = reward(
            &s,
            &s,
            &[0.0; 12],
            &[0.0; 12],
            &forward(1.0),
            false,
            &RewardWeights::default(),
        );
        assert!((r.lin_vel - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn collision_costs_exactly_its_weight() {
        let s = moving(0.3);
        let a = [0.4; 12];
        let w = RewardWeights::default();
        let clean = reward(&s, &s, &a, &[0.0; 12], &forward(0.5), false, &w);
        let hit = reward(&s, &s, &a, &[0.0; 12], &forward(0.5), true, &w);
        assert_eq!(clean.total - hit.total, 1.0);
    }

    proptest! {
        #[test]
        fn terms_resum_to_total(vx in -2.0..2.0f64, vz in -1.0..1.0f64, wz in -2.0..2.0f64,
                                roll in -1.0..1.0f64, a in prop::array::uniform12(-1.0..1.0f64),
                                hit: bool) {
            let mut s = moving(vx);
            s.linear_velocity.z = vz;
            s.angular_velocity.z = wz;
            s.orientation = nalgebra::UnitQuaternion::from_euler_angles(roll, 0.0, 0.0);
            let cmd = Command { velocity: [0.5, -0.2], yaw_rate: 0.3, class: CommandClass::Omni };
            let r = reward(&s, &s, &a, &[0.0; 12], &cmd, hit, &RewardWeights::default());
            prop_assert!((r.term_sum() - r.total).abs() < 1e-9);
        }
    }
}
