//! The coordinator's durable log: one JSON record per line, each forced
//! before the coordinator acts on it.

use serde::{Deserialize, Serialize};

use super::plan::RebalancePlan;
use crate::directory::{GlobalDirectory, PartitionId};
use crate::error::{Error, Result};
use crate::storage::Env;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LogRecord {
    /// The directory the cluster starts with.
    Init { directory: GlobalDirectory },
    Begin { id: u64, targets: Vec<PartitionId> },
    Commit { id: u64, plan: RebalancePlan },
    Done { id: u64, committed: bool },
}

/// What the log says about the last rebalance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogState {
    Idle,
    Begun { id: u64, targets: Vec<PartitionId> },
    Committed { plan: RebalancePlan },
}

#[derive(Debug)]
pub struct CoordinatorLog {
    env: Env,
    file: String,
}

impl CoordinatorLog {
    pub fn new(env: Env) -> Self {
        Self { env, file: "cc/log".to_string() }
    }

    pub fn force(&self, rec: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec).expect("log record serializes");
        line.push(b'\n');
        self.env.storage.append(&self.file, &line)?;
        self.env.storage.sync(&self.file)
    }

    /// Complete records; a torn last line is ignored.
    pub fn read(&self) -> Result<Vec<LogRecord>> {
        let Some(raw) = self.env.storage.get(&self.file)? else {
            return Ok(Vec::new());
        };
        let complete = match raw.iter().rposition(|b| *b == b'\n') {
            Some(end) => &raw[..end],
            None => &[][..],
        };
        let mut out = Vec::new();
        for line in complete.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
            out.push(
                serde_json::from_slice(line)
                    .map_err(|e| Error::Corrupt { file: self.file.clone(), reason: e.to_string() })?,
            );
        }
        Ok(out)
    }

    /// Current directory, next rebalance id, and the state of the last
    /// rebalance.
    pub fn replay(&self) -> Result<(GlobalDirectory, u64, LogState)> {
        let mut directory = None;
        let mut next_id = 1;
        let mut state = LogState::Idle;
        for rec in self.read()? {
            match rec {
                LogRecord::Init { directory: d } => directory = Some(d),
                LogRecord::Begin { id, targets } => {
                    next_id = next_id.max(id + 1);
                    state = LogState::Begun { id, targets };
                }
                LogRecord::Commit { plan, .. } => {
                    directory = Some(plan.new.clone());
                    state = LogState::Committed { plan };
                }
                LogRecord::Done { .. } => state = LogState::Idle,
            }
        }
        let directory = directory.ok_or_else(|| Error::Corrupt {
            file: self.file.clone(),
            reason: "no initial directory".into(),
        })?;
        Ok((directory, next_id, state))
    }

    pub fn committed(&self, id: u64) -> Result<bool> {
        Ok(self.read()?.iter().any(|r| matches!(r, LogRecord::Commit { id: c, .. } if *c == id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_tracks_outcome() {
        let (env, mem) = Env::in_memory();
        let log = CoordinatorLog::new(env.clone());
        let parts = vec![PartitionId { node: 0, slot: 0 }];
        let dir = GlobalDirectory::round_robin(0, 1, &parts).unwrap();
        log.force(&LogRecord::Init { directory: dir.clone() }).unwrap();
        log.force(&LogRecord::Begin { id: 1, targets: parts.clone() }).unwrap();
        assert_eq!(log.replay().unwrap().2, LogState::Begun { id: 1, targets: parts.clone() });
        env.storage.append("cc/log", b"{\"type\":\"Do").unwrap();
        env.storage.sync("cc/log").unwrap();
        mem.crash();
        let (d, next, state) = log.replay().unwrap();
        assert_eq!(d, dir);
        assert_eq!(next, 2);
        assert!(matches!(state, LogState::Begun { id: 1, .. }));
        assert!(!log.committed(1).unwrap());
    }
}
