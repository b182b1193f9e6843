//! Trajectory meaning space.
//!
//! A trajectory is a relative path on an unbounded grid made of 1 to 5
//! segments. Each segment repeats one direction 1 to 3 times, and adjacent
//! segments never share a direction, so a segment is always a maximal run.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MAX_SEGMENTS: usize = 5;
pub const MAX_STEPS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    /// Action symbol, e.g. `LEFT`.
    pub fn action_name(self) -> &'static str {
        match self {
            Direction::Left => "LEFT",
            Direction::Right => "RIGHT",
            Direction::Up => "UP",
            Direction::Down => "DOWN",
        }
    }

    /// Command word, e.g. `left`. Words and actions never share a spelling.
    pub fn word_name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.action_name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LEFT" => Ok(Direction::Left),
            "RIGHT" => Ok(Direction::Right),
            "UP" => Ok(Direction::Up),
            "DOWN" => Ok(Direction::Down),
            other => Err(Error::UnknownToken(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Segment {
    pub direction: Direction,
    pub steps: u8,
}

impl Segment {
    pub fn new(direction: Direction, steps: u8) -> Result<Self> {
        if !(1..=MAX_STEPS).contains(&steps) {
            return Err(Error::InvalidTrajectory(format!(
                "segment length {steps} outside 1..={MAX_STEPS}"
            )));
        }
        Ok(Segment { direction, steps })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Trajectory {
    segments: Vec<Segment>,
}

impl Trajectory {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() || segments.len() > MAX_SEGMENTS {
            return Err(Error::InvalidTrajectory(format!(
                "{} segments, expected 1..={MAX_SEGMENTS}",
                segments.len()
            )));
        }
        for seg in &segments {
            if !(1..=MAX_STEPS).contains(&seg.steps) {
                return Err(Error::InvalidTrajectory(format!(
                    "segment length {} outside 1..={MAX_STEPS}",
                    seg.steps
                )));
            }
        }
        if let Some(w) = segments.windows(2).find(|w| w[0].direction == w[1].direction) {
            return Err(Error::InvalidTrajectory(format!(
                "adjacent segments share direction {}",
                w[0].direction
            )));
        }
        Ok(Trajectory { segments })
    }

    /// Convenience constructor from `(direction, steps)` pairs.
    pub fn from_pairs(pairs: &[(Direction, u8)]) -> Result<Self> {
        let segments = pairs
            .iter()
            .map(|&(d, s)| Segment::new(d, s))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(segments)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Flattened step sequence.
    pub fn to_actions(&self) -> Vec<Direction> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.direction, s.steps as usize))
            .collect()
    }

    /// Splits an action sequence into maximal same-direction runs.
    pub fn from_actions(actions: &[Direction]) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidTrajectory("empty action sequence".into()));
        }
        let mut segments: Vec<Segment> = Vec::new();
        for &a in actions {
            match segments.last_mut() {
                Some(last) if last.direction == a => {
                    if last.steps == MAX_STEPS {
                        return Err(Error::InvalidTrajectory(format!(
                            "run of more than {MAX_STEPS} {a} steps"
                        )));
                    }
                    last.steps += 1;
                }
                _ => {
                    if segments.len() == MAX_SEGMENTS {
                        return Err(Error::InvalidTrajectory(format!(
                            "more than {MAX_SEGMENTS} segments"
                        )));
                    }
                    segments.push(Segment {
                        direction: a,
                        steps: 1,
                    });
                }
            }
        }
        Ok(Trajectory { segments })
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.to_actions().iter().map(|d| d.action_name()).collect();
        f.write_str(&names.join(" "))
    }
}

impl FromStr for Trajectory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let actions = s
            .split_whitespace()
            .map(Direction::from_str)
            .collect::<Result<Vec<_>>>()?;
        Trajectory::from_actions(&actions)
    }
}

/// Number of trajectories with exactly `k` segments: 12 * 9^(k-1).
pub fn count_with_segments(k: usize) -> usize {
    if k == 0 {
        return 0;
    }
    12 * 9usize.pow(k as u32 - 1)
}

/// All trajectories with 1..=`max_segments` segments.
///
/// Ordered by segment count, then lexicographically by the per-segment
/// `(direction, steps)` pairs with `LEFT < RIGHT < UP < DOWN`.
pub fn enumerate_trajectories(max_segments: usize) -> Result<Vec<Trajectory>> {
    enumerate_range(1, max_segments)
}

/// All trajectories whose segment count lies in `min_segments..=max_segments`.
pub fn enumerate_range(min_segments: usize, max_segments: usize) -> Result<Vec<Trajectory>> {
    if !(1..=MAX_SEGMENTS).contains(&max_segments) || min_segments == 0 || min_segments > max_segments
    {
        return Err(Error::InvalidConfig(format!(
            "segment range {min_segments}..={max_segments} outside 1..={MAX_SEGMENTS}"
        )));
    }
    let total = (min_segments..=max_segments).map(count_with_segments).sum();
    let mut out = Vec::with_capacity(total);
    let mut prefix = Vec::with_capacity(max_segments);
    for k in min_segments..=max_segments {
        extend(&mut prefix, k, &mut out);
    }
    Ok(out)
}

fn extend(prefix: &mut Vec<Segment>, remaining: usize, out: &mut Vec<Trajectory>) {
    if remaining == 0 {
        out.push(Trajectory {
            segments: prefix.clone(),
        });
        return;
    }
    for d in Direction::ALL {
        if prefix.last().is_some_and(|s| s.direction == d) {
            continue;
        }
        for steps in 1..=MAX_STEPS {
            prefix.push(Segment { direction: d, steps });
            extend(prefix, remaining - 1, out);
            prefix.pop();
        }
    }
}
