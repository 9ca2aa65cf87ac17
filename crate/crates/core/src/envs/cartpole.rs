//! Cart-pole with a position-dependent push force.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Encoder, SimRng, State, StepOutcome};

use super::Environment;

pub const CARTPOLE_MAX_STEPS: usize = 500;
pub const X_THRESHOLD: f64 = 2.4;
pub const THETA_THRESHOLD: f64 = 12.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForceProfile {
    /// `F(x) = 35 sqrt(37 / (1 + 36 cos^2(5x))) cos(5x) + 40`, ranging over [5, 75].
    Surface,
    Constant { force: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleSpec {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub dt: f64,
    pub force: ForceProfile,
    /// Initial cart position is drawn from `[-x_init, x_init]`.
    pub x_init: f64,
    pub max_steps: usize,
}

impl CartPoleSpec {
    pub fn target() -> Self {
        CartPoleSpec {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            dt: 0.02,
            force: ForceProfile::Surface,
            x_init: 1.5,
            max_steps: CARTPOLE_MAX_STEPS,
        }
    }

    pub fn constant(force: f64) -> Self {
        CartPoleSpec {
            force: ForceProfile::Constant { force },
            ..CartPoleSpec::target()
        }
    }

    /// Rough surface, slippery surface, and a doubled pole on a medium surface.
    pub fn sources() -> Vec<Self> {
        vec![
            CartPoleSpec::constant(5.0),
            CartPoleSpec::constant(75.0),
            CartPoleSpec {
                half_length: 1.0,
                ..CartPoleSpec::constant(20.0)
            },
        ]
    }
}

/// Force magnitude at cart position `x`.
pub fn cartpole_force(spec: &CartPoleSpec, x: f64) -> f64 {
    match spec.force {
        ForceProfile::Constant { force } => force,
        ForceProfile::Surface => {
            let c = (5.0 * x).cos();
            35.0 * (37.0 / (1.0 + 36.0 * c * c)).sqrt() * c + 40.0
        }
    }
}

/// Signed force for an action: 0 full left, 1 half left, 2 half right, 3 full right.
pub fn applied_force(spec: &CartPoleSpec, x: f64, action: usize) -> Result<f64> {
    let f = cartpole_force(spec, x);
    match action {
        0 => Ok(-f),
        1 => Ok(-0.5 * f),
        2 => Ok(0.5 * f),
        3 => Ok(f),
        _ => Err(Error::BadAction {
            action,
            num_actions: 4,
        }),
    }
}

pub fn failed(s: &[f64; 4]) -> bool {
    s[0].abs() > X_THRESHOLD || s[2].abs() > THETA_THRESHOLD
}

/// One semi-implicit Euler step of the cart-pole equations of motion.
pub fn cartpole_dynamics(spec: &CartPoleSpec, s: &[f64; 4], action: usize) -> Result<[f64; 4]> {
    let [x, x_dot, theta, theta_dot] = *s;
    let force = applied_force(spec, x, action)?;
    let total_mass = spec.cart_mass + spec.pole_mass;
    let pm_len = spec.pole_mass * spec.half_length;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pm_len * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (spec.gravity * sin - cos * temp)
        / (spec.half_length * (4.0 / 3.0 - spec.pole_mass * cos * cos / total_mass));
    let x_acc = temp - pm_len * theta_acc * cos / total_mass;
    let x_dot = x_dot + spec.dt * x_acc;
    let theta_dot = theta_dot + spec.dt * theta_acc;
    Ok([
        x + spec.dt * x_dot,
        x_dot,
        theta + spec.dt * theta_dot,
        theta_dot,
    ])
}

#[derive(Debug, Clone)]
pub struct CartPoleEnv {
    spec: CartPoleSpec,
    state: [f64; 4],
    steps: usize,
}

impl CartPoleEnv {
    pub fn new(spec: CartPoleSpec) -> Self {
        CartPoleEnv {
            spec,
            state: [0.0; 4],
            steps: 0,
        }
    }

    pub fn spec(&self) -> &CartPoleSpec {
        &self.spec
    }

    pub fn set_state(&mut self, s: [f64; 4]) {
        self.state = s;
        self.steps = 0;
    }
}

impl Environment for CartPoleEnv {
    fn num_actions(&self) -> usize {
        4
    }

    fn encoder(&self) -> Encoder {
        Encoder::Identity { dim: 4 }
    }

    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn reset(&mut self, rng: &mut SimRng) -> State {
        let x = rng.gen_range(-self.spec.x_init..=self.spec.x_init);
        let mut s = [x, 0.0, 0.0, 0.0];
        for v in &mut s[1..] {
            *v = rng.gen_range(-0.05..=0.05);
        }
        self.set_state(s);
        self.state()
    }

    fn state(&self) -> State {
        State::Continuous(self.state.to_vec())
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        self.state = cartpole_dynamics(&self.spec, &self.state, action)?;
        self.steps += 1;
        let terminal = failed(&self.state);
        Ok(StepOutcome {
            s_next: self.state(),
            r: 1.0,
            terminal,
            truncated: !terminal && self.steps >= self.spec.max_steps,
        })
    }

    fn snapshot_states(&self) -> Vec<(String, State)> {
        let mut out = Vec::new();
        for i in 0..=24 {
            let x = -2.4 + 0.2 * i as f64;
            for j in 0..=20 {
                let theta = -0.2 + 0.02 * j as f64;
                let s = vec![x, 0.0, theta, 0.0];
                out.push((format!("{x:.2};0;{theta:.2};0"), State::Continuous(s)));
            }
        }
        out
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn force_profile_values() {
        let spec = CartPoleSpec::target();
        assert!((cartpole_force(&spec, 0.0) - 75.0).abs() < 1e-12);
        assert!((cartpole_force(&spec, PI / 10.0) - 40.0).abs() < 1e-12);
        assert!((cartpole_force(&spec, PI / 5.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn force_stays_in_range_on_track() {
        let spec = CartPoleSpec::target();
        for i in 0..=4800 {
            let x = -2.4 + i as f64 * 1e-3;
            let f = cartpole_force(&spec, x);
            assert!((5.0 - 1e-12..=75.0 + 1e-12).contains(&f), "F({x}) = {f}");
            assert!(f > 0.0);
        }
    }

    #[test]
    fn half_and_full_force_actions() {
        let spec = CartPoleSpec::constant(20.0);
        let forces: Vec<f64> = (0..4).map(|a| applied_force(&spec, 0.3, a).unwrap()).collect();
        assert_eq!(forces, vec![-20.0, -10.0, 10.0, 20.0]);
        assert!(applied_force(&spec, 0.0, 4).is_err());
    }

    #[test]
    fn sources_match_surfaces() {
        let s = CartPoleSpec::sources();
        assert_eq!(s.len(), 3);
        assert_eq!(cartpole_force(&s[0], 1.3), 5.0);
        assert_eq!(cartpole_force(&s[1], -0.7), 75.0);
        assert_eq!(cartpole_force(&s[2], 0.0), 20.0);
        assert_eq!(s[2].half_length, 2.0 * CartPoleSpec::target().half_length);
    }

    #[test]
    fn upright_step_survives() {
        let mut env = CartPoleEnv::new(CartPoleSpec::target());
        env.set_state([0.0; 4]);
        let out = env.step(2).unwrap();
        assert_eq!(out.r, 1.0);
        assert!(!out.terminal && !out.truncated);
    }

    #[test]
    fn tilted_pole_terminates() {
        let mut env = CartPoleEnv::new(CartPoleSpec::target());
        env.set_state([0.0, 0.0, 13f64.to_radians(), 0.0]);
        assert!(env.step(0).unwrap().terminal);
    }

    #[test]
    fn truncates_at_500_steps() {
        // zero gravity and a symmetric push/pull keeps the system bounded
        let spec = CartPoleSpec {
            gravity: 0.0,
            ..CartPoleSpec::constant(1e-3)
        };
        let mut env = CartPoleEnv::new(spec);
        env.set_state([0.0; 4]);
        for i in 1..=500 {
            let out = env.step(if i % 2 == 0 { 1 } else { 2 }).unwrap();
            assert!(!out.terminal);
            assert_eq!(out.truncated, i == 500);
        }
    }

    #[test]
    fn reset_draws_from_init_ranges() {
        let mut env = CartPoleEnv::new(CartPoleSpec::target());
        let mut rng = crate::mdp::stream_rng(11, crate::mdp::Stream::Env);
        for _ in 0..200 {
            let s = env.reset(&mut rng);
            let v = s.features().unwrap();
            assert!(v[0].abs() <= 1.5);
            assert!(v[1..].iter().all(|c| c.abs() <= 0.05));
        }
    }
}
