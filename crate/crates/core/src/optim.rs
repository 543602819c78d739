//! Adam, parameter groups and the coarse-to-fine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{LassieError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Camera,
    Pose,
    Scales,
    Codes,
    Deform,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Camera,
        Group::Pose,
        Group::Scales,
        Group::Codes,
        Group::Deform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Camera => "camera",
            Group::Pose => "pose",
            Group::Scales => "scales",
            Group::Codes => "codes",
            Group::Deform => "deform",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub camera: f64,
    pub pose: f64,
    pub scales: f64,
    pub codes: f64,
    pub deform: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            camera: 0.05,
            pose: 0.02,
            scales: 0.01,
            codes: 0.01,
            deform: 0.005,
        }
    }
}

impl LearningRates {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Camera => self.camera,
            Group::Pose => self.pose,
            Group::Scales => self.scales,
            Group::Codes => self.codes,
            Group::Deform => self.deform,
        }
    }
}

/// One named slice of the optimizable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub group: Group,
    pub values: Vec<f64>,
    pub lr: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update in place. Non-finite gradients abort before
/// anything is modified. An update that overflows is also an error.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    group: &str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LassieError::ShapeMismatch(format!(
            "group `{group}`: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(LassieError::non_finite(format!(
            "gradient of group `{group}` at coordinate {i}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(LassieError::non_finite(format!(
            "update of group `{group}` at coordinate {i}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    /// Lengths of the camera, camera+pose+scales and all-groups phases.
    pub phases: [usize; 3],
    /// The E-step runs on iterations divisible by this period (phases 2-3).
    pub em_period: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            phases: [300, 300, 500],
            em_period: 2,
        }
    }
}

impl Schedule {
    pub fn total(&self) -> usize {
        self.phases.iter().sum()
    }

    /// Zero-based phase of an iteration; iterations past the end stay in the
    /// last phase.
    pub fn phase(&self, iteration: usize) -> usize {
        if iteration < self.phases[0] {
            0
        } else if iteration < self.phases[0] + self.phases[1] {
            1
        } else {
            2
        }
    }
}

/// Active groups and whether the E-step fires before this iteration.
pub fn schedule(iteration: usize, config: &Schedule) -> (Vec<Group>, bool) {
    let phase = config.phase(iteration);
    let groups = match phase {
        0 => vec![Group::Camera],
        1 => vec![Group::Camera, Group::Pose, Group::Scales],
        _ => Group::ALL.to_vec(),
    };
    let e_step = phase > 0 && config.em_period > 0 && iteration % config.em_period == 0;
    (groups, e_step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, "t").unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = vec![0.0, 0.0];
        let g = [0.3, -4.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &g, &mut s, 0.05, "t").unwrap();
        for i in 0..2 {
            let expected = -0.05 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut x = vec![3.0];
        let mut s = AdamState::new(1);
        for _ in 0..500 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut s, 0.1, "t").unwrap();
        }
        assert!(x[0].abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn nan_gradient_names_group() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut s, 0.1, "scales").unwrap_err();
        assert!(err.to_string().contains("scales"));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn overflowing_update_is_an_error() {
        let mut p = vec![-f64::MAX];
        let mut s = AdamState::new(1);
        let err = adam_step(&mut p, &[1.0], &mut s, f64::MAX, "camera").unwrap_err();
        assert!(err.to_string().contains("camera"));
    }

    #[test]
    fn schedule_table() {
        let c = Schedule::default();
        assert_eq!(schedule(0, &c), (vec![Group::Camera], false));
        assert_eq!(schedule(299, &c).0, vec![Group::Camera]);
        let (g, e) = schedule(350, &c);
        assert_eq!(g, vec![Group::Camera, Group::Pose, Group::Scales]);
        assert!(e);
        assert!(!schedule(351, &c).1);
        assert_eq!(schedule(1099, &c).0, Group::ALL.to_vec());
        assert!(!schedule(1099, &c).1);
        assert_eq!(c.total(), 1100);
    }
}
