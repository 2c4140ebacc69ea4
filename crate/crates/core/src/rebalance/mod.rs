//! Online rebalancing: plan computation, the coordinator's log, and the
//! two sides of the commit protocol.

pub mod coordinator;
pub mod log;
pub mod messages;
pub mod participant;
pub mod plan;

pub use coordinator::{Coordinator, Phase};
pub use log::{CoordinatorLog, LogRecord, LogState};
pub use messages::{ClientOp, Msg, OpResult};
pub use participant::{NodeActor, NodeConfig};
pub use plan::{Move, RebalancePlan};
