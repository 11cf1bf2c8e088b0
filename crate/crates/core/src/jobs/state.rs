use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Lifecycle of one run of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Active,
    Completed,
    Canceled,
    Failed,
}

/// Everything that can happen to a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobEvent {
    Start,
    Complete,
    Fail,
    Cancel,
    /// Start a fresh run of a finished job under the next run index.
    Rerun,
}

impl JobState {
    pub const ALL: [JobState; 5] = [
        JobState::Queued,
        JobState::Active,
        JobState::Completed,
        JobState::Canceled,
        JobState::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Canceled | JobState::Failed)
    }

    /// Legal next states within one run.
    pub fn successors(self) -> &'static [JobState] {
        match self {
            JobState::Queued => &[JobState::Active, JobState::Canceled],
            JobState::Active => &[JobState::Completed, JobState::Canceled, JobState::Failed],
            _ => &[],
        }
    }

    pub fn can_reach(self, next: JobState) -> bool {
        self.successors().contains(&next)
    }

    /// Transition function. `Rerun` leaves a terminal state for `Queued`
    /// under a new run index; every other event stays within the run.
    pub fn on(self, event: JobEvent) -> Option<JobState> {
        use JobEvent as E;
        use JobState as S;
        match (self, event) {
            (S::Queued, E::Start) => Some(S::Active),
            (S::Queued | S::Active, E::Cancel) => Some(S::Canceled),
            (S::Active, E::Complete) => Some(S::Completed),
            (S::Active, E::Fail) => Some(S::Failed),
            (s, E::Rerun) if s.is_terminal() => Some(S::Queued),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Active => "active",
            JobState::Completed => "completed",
            JobState::Canceled => "canceled",
            JobState::Failed => "failed",
        }
    }
}

impl JobEvent {
    pub const ALL: [JobEvent; 5] = [JobEvent::Start, JobEvent::Complete, JobEvent::Fail, JobEvent::Cancel, JobEvent::Rerun];
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        JobState::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn successor_relation() {
        use JobState::*;
        let mut pairs = Vec::new();
        for a in JobState::ALL {
            for b in JobState::ALL {
                if a.can_reach(b) {
                    pairs.push((a, b));
                }
            }
        }
        assert_eq!(
            pairs,
            [(Queued, Active), (Queued, Canceled), (Active, Completed), (Active, Canceled), (Active, Failed)]
        );
    }

    #[test]
    fn events_within_a_run_follow_successors() {
        for s in JobState::ALL {
            for e in JobEvent::ALL {
                if let Some(n) = s.on(e) {
                    assert!(s.can_reach(n) || e == JobEvent::Rerun, "{s:?} {e:?}");
                }
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for s in JobState::ALL {
            assert_eq!(s.to_string().parse::<JobState>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("new".parse::<JobState>().is_err());
    }
}
