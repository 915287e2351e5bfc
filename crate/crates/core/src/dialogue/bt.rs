//! A small tick-driven behavior tree over a caller-supplied context.
//!
//! Leaves are closures that perform the side effects; composite nodes only
//! route ticks.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Success,
    Failure,
}

type LeafFn<C> = Box<dyn FnMut(&mut C) -> Status + Send>;

pub enum Node<C> {
    Leaf { name: String, run: LeafFn<C> },
    /// Ticks children in order, resuming at the running child on the next tick.
    Sequence { name: String, children: Vec<Node<C>>, cursor: usize },
    /// Re-evaluates children from the first on every tick; a higher-priority
    /// child that stops failing preempts (and resets) a running lower one.
    Fallback { name: String, children: Vec<Node<C>>, running: Option<usize> },
}

impl<C> fmt::Debug for Node<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Leaf { name, .. } => write!(f, "Leaf({name})"),
            Node::Sequence { name, children, .. } => f.debug_tuple("Sequence").field(name).field(children).finish(),
            Node::Fallback { name, children, .. } => f.debug_tuple("Fallback").field(name).field(children).finish(),
        }
    }
}

impl<C> Node<C> {
    pub fn leaf(name: impl Into<String>, run: impl FnMut(&mut C) -> Status + Send + 'static) -> Self {
        Node::Leaf { name: name.into(), run: Box::new(run) }
    }

    /// Leaf that succeeds when `pred` holds and fails otherwise.
    pub fn condition(name: impl Into<String>, pred: impl Fn(&C) -> bool + Send + 'static) -> Self {
        Self::leaf(name, move |c| if pred(c) { Status::Success } else { Status::Failure })
    }

    pub fn sequence(name: impl Into<String>, children: Vec<Node<C>>) -> Self {
        Node::Sequence { name: name.into(), children, cursor: 0 }
    }

    pub fn fallback(name: impl Into<String>, children: Vec<Node<C>>) -> Self {
        Node::Fallback { name: name.into(), children, running: None }
    }

    pub fn name(&self) -> &str {
        match self {
            Node::Leaf { name, .. } | Node::Sequence { name, .. } | Node::Fallback { name, .. } => name,
        }
    }

    pub fn reset(&mut self) {
        match self {
            Node::Leaf { .. } => {}
            Node::Sequence { children, cursor, .. } => {
                *cursor = 0;
                children.iter_mut().for_each(Node::reset);
            }
            Node::Fallback { children, running, .. } => {
                *running = None;
                children.iter_mut().for_each(Node::reset);
            }
        }
    }

    fn tick(&mut self, ctx: &mut C, path: &mut Vec<String>) -> Status {
        match self {
            Node::Leaf { name, run } => {
                path.push(name.clone());
                run(ctx)
            }
            Node::Sequence { children, cursor, .. } => {
                while *cursor < children.len() {
                    match children[*cursor].tick(ctx, path) {
                        Status::Success => *cursor += 1,
                        Status::Running => return Status::Running,
                        Status::Failure => {
                            *cursor = 0;
                            return Status::Failure;
                        }
                    }
                }
                *cursor = 0;
                Status::Success
            }
            Node::Fallback { children, running, .. } => {
                for i in 0..children.len() {
                    let status = children[i].tick(ctx, path);
                    if status == Status::Failure {
                        continue;
                    }
                    if let Some(r) = *running {
                        if r != i {
                            children[r].reset();
                        }
                    }
                    *running = (status == Status::Running).then_some(i);
                    return status;
                }
                *running = None;
                Status::Failure
            }
        }
    }
}

/// Root node plus the bookkeeping of the last tick.
pub struct BehaviorTree<C> {
    root: Node<C>,
    ticks: u64,
    last_path: Vec<String>,
    last_status: Option<Status>,
}

impl<C> fmt::Debug for BehaviorTree<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BehaviorTree").field("root", &self.root).field("ticks", &self.ticks).finish()
    }
}

impl<C> BehaviorTree<C> {
    pub fn new(root: Node<C>) -> Self {
        Self { root, ticks: 0, last_path: Vec::new(), last_status: None }
    }

    /// One evaluation of the tree.
    pub fn tick(&mut self, ctx: &mut C) -> Status {
        self.ticks += 1;
        self.last_path.clear();
        let status = self.root.tick(ctx, &mut self.last_path);
        self.last_status = Some(status);
        status
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Names of the leaves visited by the last tick, in order.
    pub fn last_path(&self) -> &[String] {
        &self.last_path
    }

    pub fn last_status(&self) -> Option<Status> {
        self.last_status
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Ctx {
        log: Vec<&'static str>,
        gate: bool,
        waits: u32,
    }

    #[test]
    fn sequence_resumes_at_running_child() {
        let mut tree = BehaviorTree::new(Node::sequence(
            "seq",
            vec![
                Node::leaf("a", |c: &mut Ctx| {
                    c.log.push("a");
                    Status::Success
                }),
                Node::leaf("wait", |c: &mut Ctx| {
                    c.waits += 1;
                    if c.waits < 3 {
                        Status::Running
                    } else {
                        Status::Success
                    }
                }),
            ],
        ));
        let mut ctx = Ctx::default();
        assert_eq!(tree.tick(&mut ctx), Status::Running);
        assert_eq!(tree.tick(&mut ctx), Status::Running);
        assert_eq!(tree.last_path(), ["wait"]);
        assert_eq!(tree.tick(&mut ctx), Status::Success);
        assert_eq!(ctx.log, ["a"]);
    }

    #[test]
    fn fallback_preempts_lower_priority() {
        let mut tree = BehaviorTree::new(Node::fallback(
            "root",
            vec![
                Node::condition("gate", |c: &Ctx| c.gate),
                Node::sequence(
                    "work",
                    vec![
                        Node::leaf("step", |c: &mut Ctx| {
                            c.log.push("step");
                            Status::Success
                        }),
                        Node::leaf("spin", |_| Status::Running),
                    ],
                ),
            ],
        ));
        let mut ctx = Ctx::default();
        assert_eq!(tree.tick(&mut ctx), Status::Running);
        assert_eq!(tree.tick(&mut ctx), Status::Running);
        assert_eq!(ctx.log, ["step"]);
        ctx.gate = true;
        assert_eq!(tree.tick(&mut ctx), Status::Success);
        ctx.gate = false;
        // the preempted sequence restarts from its first child
        tree.tick(&mut ctx);
        assert_eq!(ctx.log, ["step", "step"]);
    }

    #[test]
    fn all_failing_fallback_fails() {
        let mut tree: BehaviorTree<Ctx> =
            BehaviorTree::new(Node::fallback("root", vec![Node::condition("no", |_| false)]));
        assert_eq!(tree.tick(&mut Ctx::default()), Status::Failure);
        assert_eq!(tree.ticks(), 1);
    }
}
