//! The cluster controller's side of a rebalance.
//!
//! Phases run in order: collect local directories, compute the plan, move
//! data, block the router, collect votes, force the decision, finalize. The
//! only forced records are BEGIN, COMMIT and DONE. Before COMMIT is durable
//! any trouble aborts the operation; after it, the coordinator keeps
//! resending `Commit` until every node has acknowledged.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::log::{CoordinatorLog, LogRecord, LogState};
use super::messages::Msg;
use super::plan::RebalancePlan;
use crate::directory::{BucketId, GlobalDirectory, NodeId, PartitionId};
use crate::error::Result;
use crate::sim::{ActorId, Ctx, Notice, Timer};
use crate::storage::Env;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    Collecting { locals: BTreeMap<NodeId, Vec<(PartitionId, Vec<BucketId>)>> },
    Moving { waiting: BTreeSet<PartitionId> },
    Blocking,
    Preparing { waiting: BTreeSet<NodeId> },
    Committing { waiting: BTreeSet<NodeId> },
    Aborting { waiting: BTreeSet<NodeId>, reason: String },
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Collecting { .. } => "collecting",
            Phase::Moving { .. } => "moving",
            Phase::Blocking => "blocking",
            Phase::Preparing { .. } => "preparing",
            Phase::Committing { .. } => "committing",
            Phase::Aborting { .. } => "aborting",
        }
    }

    fn before_commit(&self) -> bool {
        !matches!(self, Phase::Committing { .. } | Phase::Aborting { .. })
    }
}

#[derive(Debug)]
struct Active {
    id: u64,
    targets: Vec<PartitionId>,
    plan: Option<Arc<RebalancePlan>>,
    phase: Phase,
}

#[derive(Debug)]
pub struct Coordinator {
    env: Env,
    log: CoordinatorLog,
    nodes: Vec<NodeId>,
    directory: GlobalDirectory,
    next_id: u64,
    active: Option<Active>,
    timeout: u64,
    epoch: u64,
}

impl Coordinator {
    /// A coordinator for a fresh cluster; the initial directory is logged.
    pub fn create(env: Env, directory: GlobalDirectory, nodes: Vec<NodeId>, timeout: u64) -> Result<Self> {
        let log = CoordinatorLog::new(env.clone());
        log.force(&LogRecord::Init { directory: directory.clone() })?;
        Ok(Self { env, log, nodes, directory, next_id: 1, active: None, timeout, epoch: 0 })
    }

    /// Rebuilds the coordinator from its log. An unfinished rebalance is
    /// aborted if it never reached COMMIT and pushed to completion otherwise.
    pub fn recover(env: Env, nodes: Vec<NodeId>, timeout: u64, ctx: &mut Ctx<'_>) -> Result<Self> {
        let log = CoordinatorLog::new(env.clone());
        let (directory, next_id, state) = log.replay()?;
        let mut cc = Self { env, log, nodes, directory, next_id, active: None, timeout, epoch: 0 };
        match state {
            LogState::Idle => {
                for n in cc.nodes.clone() {
                    ctx.send(ActorId::Node(n), Msg::Resume);
                }
            }
            LogState::Begun { id, targets } => {
                cc.active = Some(Active { id, targets, plan: None, phase: Phase::Blocking });
                cc.abort(ctx, "coordinator restarted before commit".into());
            }
            LogState::Committed { plan } => {
                let id = plan.id;
                let plan = Arc::new(plan);
                cc.active = Some(Active {
                    id,
                    targets: plan.targets.clone(),
                    plan: Some(plan.clone()),
                    phase: Phase::Committing { waiting: cc.nodes.iter().copied().collect() },
                });
                for n in cc.nodes.clone() {
                    ctx.send(ActorId::Node(n), Msg::Commit { rid: id, plan: plan.clone() });
                }
                cc.arm(ctx);
            }
        }
        Ok(cc)
    }

    pub fn directory(&self) -> &GlobalDirectory {
        &self.directory
    }

    pub fn log(&self) -> &CoordinatorLog {
        &self.log
    }

    pub fn phase(&self) -> Option<&Phase> {
        self.active.as_ref().map(|a| &a.phase)
    }

    pub fn active_id(&self) -> Option<u64> {
        self.active.as_ref().map(|a| a.id)
    }

    pub fn plan(&self) -> Option<&Arc<RebalancePlan>> {
        self.active.as_ref().and_then(|a| a.plan.as_ref())
    }

    /// A short fingerprint of the state, for traces.
    pub fn digest(&self) -> String {
        match &self.active {
            None => format!("idle v{}", self.directory.version()),
            Some(a) => format!("r{} {} v{}", a.id, a.phase.name(), self.directory.version()),
        }
    }

    fn arm(&mut self, ctx: &mut Ctx<'_>) {
        self.epoch += 1;
        if let Some(a) = &self.active {
            ctx.after(self.timeout, Timer::Timeout { rid: a.id, epoch: self.epoch });
        }
    }

    fn broadcast(&self, ctx: &mut Ctx<'_>, msg: impl Fn() -> Msg) {
        for n in &self.nodes {
            ctx.send(ActorId::Node(*n), msg());
        }
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Msg) -> Result<()> {
        match msg {
            Msg::StartRebalance { targets } => self.start(ctx, targets),
            Msg::Directories { rid, node, locals } => self.on_directories(ctx, rid, node, locals),
            Msg::MovementDone { rid, partition } => self.on_movement_done(ctx, rid, partition),
            Msg::BlockAck { rid } => self.on_block_ack(ctx, rid),
            Msg::Vote { rid, node, prepared } => self.on_vote(ctx, rid, node, prepared),
            Msg::Ack { rid, node } => self.on_ack(ctx, rid, node),
            Msg::Hello { node, prepared } => self.on_hello(ctx, node, prepared),
            _ => Ok(()),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer) -> Result<()> {
        let Timer::Timeout { rid, epoch } = timer else {
            return Ok(());
        };
        if epoch != self.epoch || self.active_id() != Some(rid) {
            return Ok(());
        }
        let a = self.active.as_ref().expect("checked above");
        match &a.phase {
            p if p.before_commit() => {
                let reason = format!("timed out while {}", p.name());
                self.abort(ctx, reason);
            }
            Phase::Committing { waiting } => {
                let plan = a.plan.clone().expect("a committed rebalance has a plan");
                for n in waiting {
                    ctx.send(ActorId::Node(*n), Msg::Commit { rid, plan: plan.clone() });
                }
                self.arm(ctx);
            }
            Phase::Aborting { waiting, .. } => {
                for n in waiting {
                    ctx.send(ActorId::Node(*n), Msg::Abort { rid });
                }
                self.arm(ctx);
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    fn start(&mut self, ctx: &mut Ctx<'_>, targets: Vec<PartitionId>) -> Result<()> {
        if self.active.is_some() {
            ctx.notify(Notice::Rejected { reason: "a rebalance is already in progress".into() });
            return Ok(());
        }
        if targets.is_empty() || targets.iter().any(|p| !self.nodes.contains(&p.node)) {
            ctx.notify(Notice::Rejected { reason: format!("invalid target set {targets:?}") });
            return Ok(());
        }
        let id = self.next_id;
        self.log.force(&LogRecord::Begin { id, targets: targets.clone() })?;
        self.next_id += 1;
        self.env.point("cc.after-begin-force")?;
        self.active = Some(Active { id, targets, plan: None, phase: Phase::Collecting { locals: BTreeMap::new() } });
        ctx.notify(Notice::Begun { rid: id });
        self.broadcast(ctx, || Msg::CollectDirectories { rid: id });
        self.arm(ctx);
        Ok(())
    }

    fn on_directories(
        &mut self,
        ctx: &mut Ctx<'_>,
        rid: u64,
        node: NodeId,
        reported: Vec<(PartitionId, Vec<BucketId>)>,
    ) -> Result<()> {
        let nodes = self.nodes.len();
        let Some(a) = self.active.as_mut().filter(|a| a.id == rid) else {
            return Ok(());
        };
        let Phase::Collecting { locals } = &mut a.phase else {
            return Ok(());
        };
        locals.insert(node, reported);
        if locals.len() < nodes {
            return Ok(());
        }
        let all: Vec<_> = locals.values().flatten().cloned().collect();
        let plan = match RebalancePlan::compute(rid, &all, &a.targets, self.directory.version()) {
            Ok(p) => Arc::new(p),
            Err(e) => {
                self.abort(ctx, format!("planning failed: {e}"));
                return Ok(());
            }
        };
        ctx.notify(Notice::Planned { rid, moves: plan.moves.iter().map(|m| (m.bucket, m.from, m.to)).collect() });
        a.plan = Some(plan.clone());
        if plan.is_empty() {
            a.phase = Phase::Preparing { waiting: BTreeSet::new() };
            return self.decide(ctx);
        }
        a.phase = Phase::Moving { waiting: plan.destinations().into_iter().collect() };
        self.broadcast(ctx, || Msg::Snapshot { rid, plan: plan.clone() });
        self.arm(ctx);
        Ok(())
    }

    fn on_movement_done(&mut self, ctx: &mut Ctx<'_>, rid: u64, partition: PartitionId) -> Result<()> {
        let Some(a) = self.active.as_mut().filter(|a| a.id == rid) else {
            return Ok(());
        };
        let Phase::Moving { waiting } = &mut a.phase else {
            return Ok(());
        };
        waiting.remove(&partition);
        if waiting.is_empty() {
            a.phase = Phase::Blocking;
            ctx.send(ActorId::Router, Msg::Block { rid });
            self.arm(ctx);
        }
        Ok(())
    }

    fn on_block_ack(&mut self, ctx: &mut Ctx<'_>, rid: u64) -> Result<()> {
        let nodes: BTreeSet<NodeId> = self.nodes.iter().copied().collect();
        let Some(a) = self.active.as_mut().filter(|a| a.id == rid) else {
            return Ok(());
        };
        if a.phase != Phase::Blocking {
            return Ok(());
        }
        ctx.notify(Notice::Blocked { rid });
        a.phase = Phase::Preparing { waiting: nodes };
        self.broadcast(ctx, || Msg::Prepare { rid });
        self.arm(ctx);
        Ok(())
    }

    fn on_vote(&mut self, ctx: &mut Ctx<'_>, rid: u64, node: NodeId, prepared: bool) -> Result<()> {
        let Some(a) = self.active.as_mut().filter(|a| a.id == rid) else {
            return Ok(());
        };
        let Phase::Preparing { waiting } = &mut a.phase else {
            return Ok(());
        };
        if !prepared {
            self.abort(ctx, format!("node {node} could not prepare"));
            return Ok(());
        }
        waiting.remove(&node);
        if waiting.is_empty() {
            self.decide(ctx)?;
        }
        Ok(())
    }

    /// Every vote is in: force COMMIT, then tell the nodes.
    fn decide(&mut self, ctx: &mut Ctx<'_>) -> Result<()> {
        let nodes: BTreeSet<NodeId> = self.nodes.iter().copied().collect();
        let a = self.active.as_mut().expect("deciding an active rebalance");
        let plan = a.plan.clone().expect("deciding a planned rebalance");
        self.env.point("cc.before-commit-force")?;
        self.log.force(&LogRecord::Commit { id: a.id, plan: (*plan).clone() })?;
        self.directory = plan.new.clone();
        a.phase = Phase::Committing { waiting: nodes };
        self.env.point("cc.after-commit-force")?;
        let rid = a.id;
        self.broadcast(ctx, || Msg::Commit { rid, plan: plan.clone() });
        self.arm(ctx);
        Ok(())
    }

    fn on_ack(&mut self, ctx: &mut Ctx<'_>, rid: u64, node: NodeId) -> Result<()> {
        let Some(a) = self.active.as_mut().filter(|a| a.id == rid) else {
            return Ok(());
        };
        let (Phase::Committing { waiting } | Phase::Aborting { waiting, .. }) = &mut a.phase else {
            return Ok(());
        };
        waiting.remove(&node);
        if waiting.is_empty() {
            self.finish(ctx)?;
        }
        Ok(())
    }

    fn finish(&mut self, ctx: &mut Ctx<'_>) -> Result<()> {
        let a = self.active.as_ref().expect("finishing an active rebalance");
        let (committed, reason) = match &a.phase {
            Phase::Committing { .. } => (true, None),
            Phase::Aborting { reason, .. } => (false, Some(reason.clone())),
            _ => unreachable!("finish follows commit or abort"),
        };
        let rid = a.id;
        ctx.send(ActorId::Router, Msg::Unblock { rid, directory: self.directory.clone() });
        self.env.point("cc.before-done-force")?;
        self.log.force(&LogRecord::Done { id: rid, committed })?;
        self.active = None;
        self.epoch += 1;
        ctx.notify(Notice::Finished { rid, committed, reason });
        self.env.point("cc.after-done-force")?;
        Ok(())
    }

    /// Abandons the rebalance. Only valid before COMMIT is durable.
    fn abort(&mut self, ctx: &mut Ctx<'_>, reason: String) {
        let nodes: BTreeSet<NodeId> = self.nodes.iter().copied().collect();
        let Some(a) = self.active.as_mut() else {
            return;
        };
        if !a.phase.before_commit() {
            return;
        }
        let rid = a.id;
        a.phase = Phase::Aborting { waiting: nodes, reason };
        self.broadcast(ctx, || Msg::Abort { rid });
        self.arm(ctx);
    }

    /// A node restarted and lost its volatile state.
    fn on_hello(&mut self, ctx: &mut Ctx<'_>, node: NodeId, prepared: Vec<u64>) -> Result<()> {
        let to = ActorId::Node(node);
        match self.active.as_ref().map(|a| (a.id, &a.phase, a.plan.clone())) {
            None => {
                for rid in prepared {
                    ctx.send(to, Msg::Abort { rid });
                }
                ctx.send(to, Msg::Resume);
            }
            Some((rid, Phase::Committing { .. }, plan)) => {
                ctx.send(to, Msg::Commit { rid, plan: plan.expect("a committed rebalance has a plan") });
            }
            Some((rid, Phase::Aborting { .. }, _)) => ctx.send(to, Msg::Abort { rid }),
            Some(_) => self.abort(ctx, format!("node {node} restarted")),
        }
        Ok(())
    }
}
