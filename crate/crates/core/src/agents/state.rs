use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::context::write_atomic;
use super::{AgentError, RunMode, StageName};

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    InProgress,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub error_count: u32,
    pub updated_at: Option<String>,
}

/// Persisted high-level workflow status; the file that makes runs resumable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub version: u32,
    pub run_id: String,
    pub mode: RunMode,
    pub stages: BTreeMap<StageName, StageRecord>,
}

impl WorkflowState {
    pub fn new(run_id: &str, mode: RunMode) -> Self {
        Self {
            version: STATE_VERSION,
            run_id: run_id.to_string(),
            mode,
            stages: StageName::ALL
                .iter()
                .map(|&s| {
                    (
                        s,
                        StageRecord {
                            status: StageStatus::Pending,
                            error_count: 0,
                            updated_at: None,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn status(&self, stage: StageName) -> StageStatus {
        self.stages[&stage].status
    }

    pub fn error_count(&self, stage: StageName) -> u32 {
        self.stages[&stage].error_count
    }

    pub fn total_errors(&self) -> u32 {
        self.stages.values().map(|r| r.error_count).sum()
    }

    /// First stage that is not done.
    pub fn next_stage(&self) -> Option<StageName> {
        StageName::ALL.into_iter().find(|s| self.status(*s) != StageStatus::Done)
    }

    pub fn is_complete(&self) -> bool {
        self.next_stage().is_none()
    }

    pub fn set_status(&mut self, stage: StageName, status: StageStatus) -> Result<(), AgentError> {
        let current = self.status(stage);
        if current == StageStatus::Done && status != StageStatus::Done {
            return Err(AgentError::InvalidTransition(format!(
                "{stage} is done and cannot become {status:?}"
            )));
        }
        if status == StageStatus::Done {
            if let Some(prior) = StageName::ALL
                .iter()
                .take_while(|s| **s != stage)
                .find(|s| self.status(**s) != StageStatus::Done)
            {
                return Err(AgentError::InvalidTransition(format!(
                    "{stage} cannot finish before {prior}"
                )));
            }
        }
        let rec = self.stages.get_mut(&stage).expect("all stages present");
        rec.status = status;
        rec.updated_at = Some(now());
        Ok(())
    }

    /// Increments and returns the stage's error count.
    pub fn record_error(&mut self, stage: StageName) -> u32 {
        let rec = self.stages.get_mut(&stage).expect("all stages present");
        rec.error_count += 1;
        rec.updated_at = Some(now());
        rec.error_count
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.stages.len() != StageName::ALL.len() {
            return Err("state must list all four stages".into());
        }
        let mut all_prior_done = true;
        for s in StageName::ALL {
            let st = self.status(s);
            if st == StageStatus::Done && !all_prior_done {
                return Err(format!("{s} is done but an earlier stage is not"));
            }
            all_prior_done &= st == StageStatus::Done;
        }
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Atomic write: temporary file, then rename over the target.
pub fn persist_state(state: &WorkflowState, path: &Path) -> Result<(), AgentError> {
    state.check_invariants().map_err(AgentError::CorruptState)?;
    let json = serde_json::to_vec_pretty(state).expect("state serializes");
    write_atomic(path, &json)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<WorkflowState, AgentError> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| AgentError::CorruptState(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == STATE_VERSION as u64 => {}
        Some(found) => {
            return Err(AgentError::VersionMismatch {
                found,
                expected: STATE_VERSION,
            })
        }
        None => return Err(AgentError::CorruptState("missing version".into())),
    }
    let state: WorkflowState =
        serde_json::from_value(value).map_err(|e| AgentError::CorruptState(e.to_string()))?;
    state.check_invariants().map_err(AgentError::CorruptState)?;
    Ok(state)
}
