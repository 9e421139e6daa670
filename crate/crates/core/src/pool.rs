//! The pool of learned tasks and the class groups derived from it.
//!
//! After `n` tasks the pool logically contains every nonempty subset of those
//! tasks: `2^n - 1` groups. The pool itself only stores the task list; dense
//! enumeration materializes the groups on demand and is refused beyond a hard
//! task-count limit, while uniform sampling works at any size because it
//! never materializes the subsets.

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RunRng;

/// Identifier of one class label across the whole experiment.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Largest number of tasks for which dense subset enumeration is allowed.
pub const ENUMERATION_TASK_LIMIT: usize = 12;

/// Group count implied by the task limit: `2^12` bounds `2^n - 1`.
pub const ENUMERATION_GROUP_LIMIT: u64 = 1 << 12;

/// One task: an id and the classes it introduced, in arrival order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub classes: Vec<ClassId>,
}

impl TaskSpec {
    pub fn new(task_id: usize, classes: Vec<ClassId>) -> Result<TaskSpec> {
        if classes.is_empty() {
            return Err(Error::Usage(format!("task {} has no classes", task_id)));
        }
        let mut seen = classes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != classes.len() {
            return Err(Error::Usage(format!("task {} repeats a class", task_id)));
        }
        Ok(TaskSpec { task_id, classes })
    }
}

/// A nonempty subset of learned tasks and the union of their classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroup {
    /// Task ids in ascending order.
    pub member_tasks: Vec<usize>,
    /// Union of the member tasks' classes, ascending.
    pub classes: Vec<ClassId>,
}

/// Immutable set of learned tasks; growing it builds a new pool.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPool {
    tasks: Vec<TaskSpec>,
}

impl TaskPool {
    pub fn new() -> TaskPool {
        TaskPool::default()
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Number of groups the pool logically contains (`2^n - 1`), saturating
    /// for very large pools.
    pub fn logical_size(&self) -> u128 {
        if self.tasks.len() >= 127 {
            u128::MAX
        } else {
            (1u128 << self.tasks.len()) - 1
        }
    }

    /// A new pool with `task` added. Task ids must be unique and class sets
    /// disjoint; tasks are kept ordered by id so the pool's logical content
    /// does not depend on insertion order.
    pub fn extended(&self, task: TaskSpec) -> Result<TaskPool> {
        if self.tasks.iter().any(|t| t.task_id == task.task_id) {
            return Err(Error::Usage(format!("task id {} already present", task.task_id)));
        }
        for existing in &self.tasks {
            for c in &task.classes {
                if existing.classes.contains(c) {
                    return Err(Error::Usage(format!(
                        "class {} of task {} already belongs to task {}",
                        c, task.task_id, existing.task_id
                    )));
                }
            }
        }
        let mut tasks = self.tasks.clone();
        tasks.push(task);
        tasks.sort_by_key(|t| t.task_id);
        Ok(TaskPool { tasks })
    }

    fn group_from_positions(&self, positions: &[usize]) -> ClassGroup {
        let member_tasks: Vec<usize> = positions.iter().map(|&i| self.tasks[i].task_id).collect();
        let mut classes: Vec<ClassId> =
            positions.iter().flat_map(|&i| self.tasks[i].classes.iter().copied()).collect();
        classes.sort_unstable();
        ClassGroup { member_tasks, classes }
    }

    /// The group containing every task in the pool.
    pub fn full_group(&self) -> Result<ClassGroup> {
        if self.tasks.is_empty() {
            return Err(Error::Usage("the task pool is empty".into()));
        }
        Ok(self.group_from_positions(&(0..self.tasks.len()).collect::<Vec<_>>()))
    }

    /// All `2^n - 1` groups in a fixed order: by subset size, then
    /// lexicographically by member task ids.
    ///
    /// Refused when the pool exceeds [`ENUMERATION_TASK_LIMIT`] tasks, since
    /// the group count doubles per task. Sampling has no such limit.
    pub fn enumerate_groups(&self) -> Result<Vec<ClassGroup>> {
        let n = self.tasks.len();
        if n > ENUMERATION_TASK_LIMIT {
            return Err(Error::PoolTooLarge(format!(
                "{} tasks would enumerate {} groups; dense enumeration is capped at {} tasks \
                 ({} groups) — use sampling instead",
                n,
                self.logical_size(),
                ENUMERATION_TASK_LIMIT,
                ENUMERATION_GROUP_LIMIT
            )));
        }
        let mut groups = Vec::with_capacity(self.logical_size() as usize);
        for size in 1..=n {
            // combinations() yields index tuples in lexicographic order.
            for positions in (0..n).combinations(size) {
                groups.push(self.group_from_positions(&positions));
            }
        }
        Ok(groups)
    }

    /// One group drawn uniformly from all `2^n - 1` nonempty subsets.
    ///
    /// Each task contributes one fair membership bit; an all-out draw is
    /// rejected and retried, which leaves every nonempty subset with
    /// probability exactly `1 / (2^n - 1)`.
    pub fn sample_group(&self, rng: &mut RunRng) -> Result<ClassGroup> {
        if self.tasks.is_empty() {
            return Err(Error::Usage("cannot sample a group from an empty task pool".into()));
        }
        loop {
            let positions: Vec<usize> =
                (0..self.tasks.len()).filter(|_| rng.gen::<bool>()).collect();
            if !positions.is_empty() {
                return Ok(self.group_from_positions(&positions));
            }
        }
    }
}
