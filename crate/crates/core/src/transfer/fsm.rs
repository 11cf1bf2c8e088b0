use std::fmt;

use serde::{Deserialize, Serialize};

use crate::jobs::JobState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferState {
    Created,
    Starting,
    Running,
    Draining,
    Completed,
    Failed,
    Canceled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferEvent {
    RelayReady,
    JobQueued,
    JobActive,
    JobCompleted,
    JobFailed,
    UserCancel,
    DrainDone,
    StartFailed,
}

impl TransferState {
    pub const ALL: [TransferState; 7] = [
        TransferState::Created,
        TransferState::Starting,
        TransferState::Running,
        TransferState::Draining,
        TransferState::Completed,
        TransferState::Failed,
        TransferState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TransferState::Completed | TransferState::Failed | TransferState::Canceled)
    }
}

impl TransferEvent {
    pub const ALL: [TransferEvent; 8] = [
        TransferEvent::RelayReady,
        TransferEvent::JobQueued,
        TransferEvent::JobActive,
        TransferEvent::JobCompleted,
        TransferEvent::JobFailed,
        TransferEvent::UserCancel,
        TransferEvent::DrainDone,
        TransferEvent::StartFailed,
    ];

    /// Event raised by a job callback.
    pub fn from_job(state: JobState) -> TransferEvent {
        match state {
            JobState::Queued => TransferEvent::JobQueued,
            JobState::Active => TransferEvent::JobActive,
            JobState::Completed => TransferEvent::JobCompleted,
            JobState::Failed => TransferEvent::JobFailed,
            JobState::Canceled => TransferEvent::UserCancel,
        }
    }
}

impl fmt::Display for TransferState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("state serialises");
        f.write_str(v.as_str().expect("unit variant"))
    }
}

impl fmt::Display for TransferEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("event serialises");
        f.write_str(v.as_str().expect("unit variant"))
    }
}

/// Result of applying one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "state")]
pub enum Step {
    /// The transfer moves to this state.
    Moved(TransferState),
    /// Accepted and recorded, state unchanged.
    Recorded,
    /// Not allowed from the current state; nothing changes.
    Rejected,
}

/// The transfer state machine. Pure and total.
pub fn step(state: TransferState, event: TransferEvent) -> Step {
    use TransferEvent as E;
    use TransferState as S;
    match (state, event) {
        (S::Created, E::RelayReady) => Step::Moved(S::Starting),
        (S::Created, E::StartFailed) => Step::Moved(S::Failed),
        (S::Created, E::UserCancel) => Step::Moved(S::Canceled),
        (S::Starting, E::JobQueued) => Step::Recorded,
        (S::Starting, E::JobActive) => Step::Moved(S::Running),
        (S::Starting, E::JobFailed) => Step::Moved(S::Failed),
        (S::Starting, E::UserCancel) => Step::Moved(S::Canceled),
        (S::Running, E::JobCompleted) => Step::Moved(S::Draining),
        (S::Running, E::JobFailed) => Step::Moved(S::Failed),
        (S::Running, E::UserCancel) => Step::Moved(S::Canceled),
        (S::Draining, E::DrainDone) => Step::Moved(S::Completed),
        _ => Step::Rejected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TransferEvent as E;
    use TransferState as S;

    #[test]
    fn exhaustive_table() {
        let table = [
            (S::Created, E::RelayReady, S::Starting),
            (S::Created, E::StartFailed, S::Failed),
            (S::Created, E::UserCancel, S::Canceled),
            (S::Starting, E::JobActive, S::Running),
            (S::Starting, E::JobFailed, S::Failed),
            (S::Starting, E::UserCancel, S::Canceled),
            (S::Running, E::JobCompleted, S::Draining),
            (S::Running, E::JobFailed, S::Failed),
            (S::Running, E::UserCancel, S::Canceled),
            (S::Draining, E::DrainDone, S::Completed),
        ];
        let mut moves = 0;
        for s in S::ALL {
            for e in E::ALL {
                let expected = match table.iter().find(|(a, b, _)| *a == s && *b == e) {
                    Some((_, _, n)) => Step::Moved(*n),
                    None if (s, e) == (S::Starting, E::JobQueued) => Step::Recorded,
                    None => Step::Rejected,
                };
                assert_eq!(step(s, e), expected, "{s} {e}");
                moves += matches!(step(s, e), Step::Moved(_)) as usize;
            }
        }
        assert_eq!(moves, table.len());
    }

    #[test]
    fn terminal_states_absorb() {
        for s in S::ALL.into_iter().filter(|s| s.is_terminal()) {
            for e in E::ALL {
                assert_eq!(step(s, e), Step::Rejected);
            }
        }
    }

    #[test]
    fn names() {
        assert_eq!(S::Draining.to_string(), "DRAINING");
        assert_eq!(E::DrainDone.to_string(), "drain_done");
        assert_eq!(TransferEvent::from_job(JobState::Canceled), E::UserCancel);
    }
}
