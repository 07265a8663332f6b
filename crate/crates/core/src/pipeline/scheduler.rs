//! Distortion-aware key-frame scheduling.
//!
//! Frame 0 is always a key frame. The threshold starts at the magnitude of the
//! first transition. For each later frame `i >= 1`, the frame is a key frame iff
//! its magnitude is strictly greater than the threshold; the threshold then
//! becomes `gamma1 * magnitude` after a key frame and `gamma2 * magnitude`
//! after a non-key frame, except that the first step uses a factor of 1 on the
//! non-key branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Key,
    Nonkey,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Key => "key",
            Role::Nonkey => "nonkey",
        }
    }
}

pub const DEFAULT_GAMMA1: f64 = 2.0;
pub const DEFAULT_GAMMA2: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    /// `None` until the first transition has been seen.
    pub threshold: Option<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub last_role: Role,
    /// Index of the last scheduled frame.
    pub frame_index: usize,
}

/// Outcome of one scheduling step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub frame_index: usize,
    pub magnitude: f64,
    pub role: Role,
    /// Threshold after the update.
    pub threshold: f64,
}

pub fn validate_gammas(gamma1: f64, gamma2: f64) -> Result<()> {
    if !(gamma1 > 1.0 && gamma1.is_finite()) {
        return Err(Error::config("policy.gamma1", "must be finite and > 1"));
    }
    if !(gamma2 > 0.0 && gamma2 <= 1.0) {
        return Err(Error::config("policy.gamma2", "must lie in (0, 1]"));
    }
    Ok(())
}

impl SchedulerState {
    /// State after frame 0, which is always a key frame.
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        validate_gammas(gamma1, gamma2)?;
        Ok(SchedulerState {
            threshold: None,
            gamma1,
            gamma2,
            last_role: Role::Key,
            frame_index: 0,
        })
    }

    /// Schedules the next frame given the magnitude of its transition from the previous one.
    pub fn step(&mut self, magnitude: f64) -> Result<ScheduleStep> {
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(Error::invalid(format!("magnitude must be finite and >= 0, got {magnitude}")));
        }
        let first = self.threshold.is_none();
        let threshold = self.threshold.unwrap_or(magnitude);
        let (role, next) = if magnitude > threshold {
            (Role::Key, self.gamma1 * magnitude)
        } else {
            let g2 = if first { 1.0 } else { self.gamma2 };
            (Role::Nonkey, g2 * magnitude)
        };
        self.threshold = Some(next);
        self.last_role = role;
        self.frame_index += 1;
        Ok(ScheduleStep {
            frame_index: self.frame_index,
            magnitude,
            role,
            threshold: next,
        })
    }
}

/// Runs the scheduler over the magnitudes of frames `1..=n`.
pub fn simulate(magnitudes: &[f64], gamma1: f64, gamma2: f64) -> Result<Vec<ScheduleStep>> {
    let mut s = SchedulerState::new(gamma1, gamma2)?;
    magnitudes.iter().map(|&m| s.step(m)).collect()
}
