use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleAction {
    Keep,
    Decay,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub max_decays: usize,
    pub max_epochs: usize,
    /// Minimum absolute drop below the best loss that counts as improvement.
    pub threshold: f64,
}

/// Decision after the last epoch of `history`, replaying the whole history.
///
/// A plateau is `patience` consecutive epochs without improvement; each
/// plateau decays the rate and restarts the count, and the plateau after the
/// last allowed decay stops training. Reaching `max_epochs` also stops.
pub fn lr_schedule_step(history: &[f64], s: &PlateauSchedule) -> ScheduleAction {
    let mut best = f64::INFINITY;
    let mut since = 0;
    let mut decays = 0;
    let mut action = ScheduleAction::Keep;
    for &loss in history {
        action = ScheduleAction::Keep;
        if loss < best - s.threshold {
            best = loss;
            since = 0;
        } else {
            since += 1;
        }
        if since >= s.patience {
            if decays < s.max_decays {
                decays += 1;
                since = 0;
                action = ScheduleAction::Decay;
            } else {
                action = ScheduleAction::Stop;
            }
        }
    }
    if history.len() >= s.max_epochs {
        action = ScheduleAction::Stop;
    }
    action
}
