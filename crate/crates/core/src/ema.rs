//! Teacher tracking by exponential moving average of the student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelState, Role};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_steps: u64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self {
            tau_start: 0.99,
            tau_end: 0.999,
            anneal_steps: 1000,
        }
    }
}

impl EmaSchedule {
    /// The large-scale anneal triple.
    pub fn large_profile() -> Self {
        Self {
            tau_start: 0.999,
            tau_end: 0.99999,
            anneal_steps: 75_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_start && self.tau_start <= self.tau_end && self.tau_end <= 1.0) {
            return Err(Error::Config(format!(
                "EMA decays must satisfy 0 <= start <= end <= 1, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.anneal_steps == 0 {
            return Err(Error::Config("EMA anneal_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear anneal from `tau_start` to `tau_end` over `anneal_steps`.
pub fn decay_at(schedule: &EmaSchedule, step: u64) -> f64 {
    if step >= schedule.anneal_steps {
        return schedule.tau_end;
    }
    let frac = step as f64 / schedule.anneal_steps as f64;
    schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac
}

/// `teacher <- lambda * teacher + (1 - lambda) * student` over the shared
/// groups. The decoder is student-only and never touched.
pub fn ema_update<T: Scalar>(teacher: &mut ModelState<T>, student: &ModelState<T>, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("EMA decay {lambda} outside [0, 1]")));
    }
    if teacher.role != Role::Teacher || student.role != Role::Student {
        return Err(Error::Contract("ema_update expects (teacher, student)".into()));
    }
    let src: Vec<_> = student.params.slots().into_iter().filter(|(_, g, _)| g.is_shared()).collect();
    let mut dst: Vec<_> = teacher.params.slots_mut().into_iter().filter(|(_, g, _)| g.is_shared()).collect();
    if src.len() != dst.len() {
        return Err(Error::Contract(format!(
            "teacher has {} shared tensors, student {}",
            dst.len(),
            src.len()
        )));
    }
    for ((sn, _, s), (tn, _, t)) in src.iter().zip(dst.iter()) {
        if sn != tn || s.shape != t.shape {
            return Err(Error::Contract(format!(
                "EMA shape mismatch: teacher {tn} {:?} vs student {sn} {:?}",
                t.shape, s.shape
            )));
        }
    }
    if lambda == 1.0 {
        return Ok(());
    }
    let l = T::lit(lambda);
    let one_minus = T::lit(1.0 - lambda);
    for ((_, _, s), (_, _, t)) in src.iter().zip(dst.iter_mut()) {
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = l * *tv + one_minus * *sv;
        }
    }
    Ok(())
}
