use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Sign pattern a sampled command must respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandClass {
    Forward,
    Lateral,
    Backward,
    Omni,
}

impl CommandClass {
    pub const ALL: [CommandClass; 4] = [Self::Forward, Self::Lateral, Self::Backward, Self::Omni];

    pub fn name(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Lateral => "lateral",
            Self::Backward => "backward",
            Self::Omni => "omni",
        }
    }
}

impl fmt::Display for CommandClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CommandClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s || (s == "omnidirectional" && *c == Self::Omni))
            .ok_or_else(|| Error::Invalid(format!("unknown command class `{s}`")))
    }
}

/// Body-frame velocity command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
    pub class: CommandClass,
}

impl Command {
    pub fn zero(class: CommandClass) -> Self {
        Self {
            velocity: [0.0; 2],
            yaw_rate: 0.0,
            class,
        }
    }

    /// Yaw that turns the commanded planar velocity toward world +x.
    pub fn heading_yaw(&self) -> f64 {
        let [x, y] = self.velocity;
        if x == 0.0 && y == 0.0 {
            0.0
        } else {
            -y.atan2(x)
        }
    }
}

/// Magnitude in `(0, 1]`.
fn positive(rng: &mut impl Rng) -> f64 {
    1.0 - rng.gen::<f64>()
}

pub fn sample_command_with(class: CommandClass, rng: &mut impl Rng) -> Command {
    let mut c = Command::zero(class);
    match class {
        CommandClass::Forward => c.velocity[0] = positive(rng),
        CommandClass::Backward => c.velocity[0] = -positive(rng),
        CommandClass::Lateral => {
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            c.velocity[1] = side * positive(rng);
        }
        CommandClass::Omni => {
            c.velocity = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            c.yaw_rate = rng.gen_range(-1.0..=1.0);
        }
    }
    c
}

pub fn sample_command(class: CommandClass, seed: u64) -> Command {
    sample_command_with(class, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_respect_signs() {
        for seed in 0..2000 {
            let f = sample_command(CommandClass::Forward, seed);
            assert!(
                f.velocity[0] > 0.0
                    && f.velocity[0] <= 1.0
                    && f.velocity[1] == 0.0
                    && f.yaw_rate == 0.0
            );
            let b = sample_command(CommandClass::Backward, seed);
            assert!(b.velocity[0] < 0.0 && b.velocity[0] >= -1.0 && b.velocity[1] == 0.0);
            let l = sample_command(CommandClass::Lateral, seed);
            assert!(l.velocity[0] == 0.0 && l.velocity[1] != 0.0 && l.velocity[1].abs() <= 1.0);
            let o = sample_command(CommandClass::Omni, seed);
            assert!(o
                .velocity
                .iter()
                .chain([&o.yaw_rate])
                .all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn omni_mean_is_box_center() {
        let n = 10_000;
        let mut sums = [0.0; 3];
        for seed in 0..n {
            let c = sample_command(CommandClass::Omni, seed);
            sums[0] += c.velocity[0];
            sums[1] += c.velocity[1];
            sums[2] += c.yaw_rate;
        }
        // Uniform on [-1, 1] has standard deviation 1/sqrt(3).
        let tol = 3.0 / (3.0f64.sqrt() * (n as f64).sqrt());
        for s in sums {
            assert!((s / n as f64).abs() < tol);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(
            sample_command(CommandClass::Omni, 4),
            sample_command(CommandClass::Omni, 4)
        );
        assert_ne!(
            sample_command(CommandClass::Omni, 4),
            sample_command(CommandClass::Omni, 5)
        );
    }

    #[test]
    fn heading_points_command_along_course() {
        for seed in 0..50 {
            let c = sample_command(CommandClass::Omni, seed);
            let yaw = c.heading_yaw();
            let (s, co) = yaw.sin_cos();
            let [x, y] = c.velocity;
            let world = [co * x - s * y, s * x + co * y];
            assert!(world[0] >= 0.0 && world[1].abs() < 1e-12);
        }
    }

    #[test]
    fn class_names_parse() {
        for c in CommandClass::ALL {
            assert_eq!(c.name().parse::<CommandClass>().unwrap(), c);
        }
        assert!("sideways".parse::<CommandClass>().is_err());
    }
}
