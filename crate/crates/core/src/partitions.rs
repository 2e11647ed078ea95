//! Index arithmetic over the flat logit vector.
//!
//! With `T` tasks of `Y` classes each, the logit vector has length `T * Y` and
//! task `i` owns the contiguous head `[i * Y, (i + 1) * Y)`. While training task
//! `c` the vector splits into the past heads (tasks `< c`), the present head and
//! the future heads (tasks `> c`). For a buffer entry inserted during task `t`,
//! the heads of tasks in `(t, c]` are its *future past*: classes discovered
//! after the entry was stored.
//!
//! All ranges are half-open and zero-based.

use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogitPartition {
    num_tasks: usize,
    classes_per_task: usize,
    current: usize,
}

impl LogitPartition {
    pub fn new(current: usize, num_tasks: usize, classes_per_task: usize) -> Result<Self> {
        if current >= num_tasks {
            return Err(Error::TaskOutOfRange {
                index: current,
                count: num_tasks,
            });
        }
        if classes_per_task == 0 {
            return Err(Error::InvalidArgument("classes per task must be positive".into()));
        }
        Ok(Self {
            num_tasks,
            classes_per_task,
            current,
        })
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn classes_per_task(&self) -> usize {
        self.classes_per_task
    }

    pub fn total(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn past(&self) -> Range<usize> {
        0..self.current * self.classes_per_task
    }

    pub fn present(&self) -> Range<usize> {
        head(self.current, self.classes_per_task)
    }

    pub fn future(&self) -> Range<usize> {
        (self.current + 1) * self.classes_per_task..self.total()
    }

    /// Every class seen so far: past and present.
    pub fn seen(&self) -> Range<usize> {
        0..(self.current + 1) * self.classes_per_task
    }

    /// Indices of future head `j`, for `j` in `current + 1..num_tasks`.
    pub fn future_head(&self, j: usize) -> Result<Range<usize>> {
        if j <= self.current || j >= self.num_tasks {
            return Err(Error::InvalidArgument(format!(
                "head {j} is not a future head while training task {} of {}",
                self.current, self.num_tasks
            )));
        }
        Ok(head(j, self.classes_per_task))
    }

    pub fn future_heads(&self) -> Range<usize> {
        self.current + 1..self.num_tasks
    }
}

/// The logit range owned by task `task`.
pub fn head(task: usize, classes_per_task: usize) -> Range<usize> {
    task * classes_per_task..(task + 1) * classes_per_task
}

/// `(past, present, future)` for task `c` of `num_tasks`.
pub fn partition(
    c: usize,
    num_tasks: usize,
    classes_per_task: usize,
) -> Result<(Range<usize>, Range<usize>, Range<usize>)> {
    let p = LogitPartition::new(c, num_tasks, classes_per_task)?;
    Ok((p.past(), p.present(), p.future()))
}

/// Head `j` of an entry inserted at `insertion`, seen from current task `c`.
///
/// Valid only for `insertion < j <= c`.
pub fn future_past_indices(
    j: usize,
    insertion: usize,
    c: usize,
    classes_per_task: usize,
) -> Result<Range<usize>> {
    if j <= insertion || j > c {
        return Err(Error::NotFuturePast {
            head: j,
            insertion,
            current: c,
        });
    }
    Ok(head(j, classes_per_task))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn middle_task_of_ten() {
        let (pa, pr, fu) = partition(3, 10, 10).unwrap();
        assert_eq!(pa, 0..30);
        assert_eq!(pr, 30..40);
        assert_eq!(fu, 40..100);
    }

    #[test]
    fn first_and_last_task() {
        let (pa, pr, fu) = partition(0, 5, 2).unwrap();
        assert!(pa.is_empty());
        assert_eq!(pr, 0..2);
        assert_eq!(fu, 2..10);

        let (_, _, fu) = partition(4, 5, 2).unwrap();
        assert!(fu.is_empty());
    }

    #[test]
    fn out_of_range_task() {
        assert!(partition(5, 5, 2).is_err());
    }

    #[test]
    fn future_past_heads() {
        assert_eq!(future_past_indices(4, 1, 4, 10).unwrap(), 40..50);
        assert_eq!(future_past_indices(1, 0, 3, 2).unwrap(), 2..4);
        assert!(matches!(
            future_past_indices(2, 2, 3, 2),
            Err(Error::NotFuturePast { .. })
        ));
        assert!(future_past_indices(4, 1, 3, 2).is_err());
    }

    #[test]
    fn future_head_bounds() {
        let p = LogitPartition::new(1, 4, 3).unwrap();
        assert_eq!(p.future_head(2).unwrap(), 6..9);
        assert!(p.future_head(1).is_err());
        assert!(p.future_head(4).is_err());
    }

    proptest::proptest! {
        #[test]
        fn partitions_tile_the_logits(t in 1usize..12, y in 1usize..12, c_raw in 0usize..12) {
            let c = c_raw % t;
            let p = LogitPartition::new(c, t, y).unwrap();
            let (pa, pr, fu) = (p.past(), p.present(), p.future());
            proptest::prop_assert_eq!(pa.len() + pr.len() + fu.len(), t * y);
            proptest::prop_assert_eq!(pa.start, 0);
            proptest::prop_assert_eq!(pa.end, pr.start);
            proptest::prop_assert_eq!(pr.end, fu.start);
            proptest::prop_assert_eq!(fu.end, t * y);
            proptest::prop_assert_eq!(pa.is_empty(), c == 0);
            proptest::prop_assert_eq!(fu.is_empty(), c == t - 1);
            if c + 1 < t {
                let next = LogitPartition::new(c + 1, t, y).unwrap();
                proptest::prop_assert_eq!(next.past().len(), pa.len() + y);
                proptest::prop_assert_eq!(next.future().len() + y, fu.len());
                proptest::prop_assert_eq!(next.past().end, pr.end);
            }
        }

        #[test]
        fn future_past_union_is_contiguous(y in 1usize..8, ins in 0usize..6, extra in 1usize..6) {
            let c = ins + extra;
            let mut covered = Vec::new();
            for j in ins + 1..=c {
                covered.extend(future_past_indices(j, ins, c, y).unwrap());
            }
            let expected: Vec<usize> = ((ins + 1) * y..(c + 1) * y).collect();
            proptest::prop_assert_eq!(covered, expected);
        }
    }
}
