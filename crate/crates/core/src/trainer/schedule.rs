//! Per-epoch learning-rate schedules.

use std::fmt;
use std::str::FromStr;

use log::warn;

use super::config::{join_list, parse_list};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Constant,
    /// Multiply by gamma at each listed epoch.
    Milestones(Vec<usize>),
    /// Multiply by gamma every `n` epochs.
    Every(usize),
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Constant => f.write_str("constant"),
            ScheduleKind::Milestones(m) => write!(f, "step:{}", join_list(m)),
            ScheduleKind::Every(n) => write!(f, "every:{n}"),
            ScheduleKind::Cosine => f.write_str("cosine"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "constant" => Ok(ScheduleKind::Constant),
            None if s == "cosine" => Ok(ScheduleKind::Cosine),
            Some(("step", list)) => Ok(ScheduleKind::Milestones(parse_list(list)?)),
            Some(("every", n)) => n
                .trim()
                .parse()
                .map(ScheduleKind::Every)
                .map_err(|e| format!("every:{n}: {e}")),
            _ => Err(format!("unknown schedule {s:?} (constant|cosine|step:E1,E2|every:N)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub kind: ScheduleKind,
    pub gamma: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base: f64, kind: ScheduleKind, gamma: f64, total_epochs: usize) -> Self {
        Self {
            base,
            kind,
            gamma,
            total_epochs,
        }
    }

    /// Errors on unsorted milestones or a zero period. Milestones at or past
    /// the last epoch are legal but logged, since they never take effect.
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ScheduleKind::Milestones(m) => {
                if m.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!("lr milestones {m:?} must be strictly ascending")));
                }
                if let Some(late) = m.iter().find(|&&e| e >= self.total_epochs) {
                    warn!("lr milestone {late} is not reached within {} epochs", self.total_epochs);
                }
            }
            ScheduleKind::Every(0) => return Err(Error::Config("every:0 is not a schedule".into())),
            _ => {}
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (zero-based).
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    let drops = match &schedule.kind {
        ScheduleKind::Constant => 0,
        ScheduleKind::Milestones(m) => m.iter().filter(|&&e| epoch >= e).count(),
        ScheduleKind::Every(n) => epoch / (*n).max(1),
        ScheduleKind::Cosine => {
            let t = epoch as f64 / schedule.total_epochs.max(1) as f64;
            return schedule.base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        }
    };
    schedule.base * schedule.gamma.powi(drops as i32)
}
