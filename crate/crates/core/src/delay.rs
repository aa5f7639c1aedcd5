//! Per-channel delay buffers and the four sensory-manipulation conditions.
//!
//! Total teleoperation delay is split into three channels: the command
//! (onset) channel from operator to robot, and the haptic and visual feedback
//! channels back to the operator. A [`ConditionSpec`] fixes the delay of each
//! channel; a [`DelayPipeline`] holds in-flight [`ChannelEvent`]s and releases
//! them on the integer-millisecond simulation clock exactly when they are due.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::haptics::HapticSource;

/// Simulation clock reading in whole milliseconds.
pub type Millis = u64;

/// Visual delay levels used by every delayed condition.
pub const FEEDBACK_DELAYS_MS: [Millis; 4] = [250, 500, 750, 1000];

/// Fixed haptic delay of the asynchronous condition.
pub const ASYNC_HAPTIC_DELAY_MS: Millis = 250;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConditionError {
    #[error("{kind} condition does not allow a visual delay of {visual_delay_ms} ms")]
    VisualDelay {
        kind: ConditionKind,
        visual_delay_ms: Millis,
    },
    #[error("asynchronous condition needs visual delay > {ASYNC_HAPTIC_DELAY_MS} ms, got {0} ms")]
    AsynchronousNotStrict(Millis),
    #[error("condition fields are inconsistent with {kind}: {detail}")]
    Inconsistent {
        kind: ConditionKind,
        detail: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineError {
    #[error("clock moved backwards: drained at {last} ms, now {now} ms")]
    TimeRegression { last: Millis, now: Millis },
    #[error("target delay {target} ms is below the intrinsic delay {intrinsic} ms")]
    InfeasibleBuffer { intrinsic: Millis, target: Millis },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Control,
    Anchoring,
    Synchronous,
    Asynchronous,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [
        ConditionKind::Control,
        ConditionKind::Anchoring,
        ConditionKind::Synchronous,
        ConditionKind::Asynchronous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Control => "control",
            ConditionKind::Anchoring => "anchoring",
            ConditionKind::Synchronous => "synchronous",
            ConditionKind::Asynchronous => "asynchronous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Command,
    Visual,
    Haptic,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Command, Channel::Visual, Channel::Haptic];

    fn index(self) -> usize {
        match self {
            Channel::Command => 0,
            Channel::Visual => 1,
            Channel::Haptic => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Command => "command",
            Channel::Visual => "visual",
            Channel::Haptic => "haptic",
        }
    }
}

/// One experimental condition with fully resolved channel delays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    pub visual_delay_ms: Millis,
    pub haptic_delay_ms: Millis,
    pub onset_delay_ms: Millis,
    pub haptic_source: HapticSource,
}

/// Resolves a condition from its kind and visual delay.
///
/// Haptic delay follows from the kind: zero for control and anchoring, equal
/// to the visual delay for synchronous, fixed at 250 ms for asynchronous.
/// The asynchronous 250/250 cell is rejected because its defining inequality
/// (haptic strictly below visual) cannot hold.
pub fn make_condition(kind: ConditionKind, visual_delay_ms: Millis) -> Result<ConditionSpec, ConditionError> {
    let delayed = FEEDBACK_DELAYS_MS.contains(&visual_delay_ms);
    let (haptic_delay_ms, haptic_source) = match kind {
        ConditionKind::Control => {
            if visual_delay_ms != 0 {
                return Err(ConditionError::VisualDelay { kind, visual_delay_ms });
            }
            (0, HapticSource::RemoteSensor)
        }
        ConditionKind::Anchoring => {
            if !delayed {
                return Err(ConditionError::VisualDelay { kind, visual_delay_ms });
            }
            (0, HapticSource::LocalSimulation)
        }
        ConditionKind::Synchronous => {
            if !delayed {
                return Err(ConditionError::VisualDelay { kind, visual_delay_ms });
            }
            (visual_delay_ms, HapticSource::RemoteSensor)
        }
        ConditionKind::Asynchronous => {
            if !delayed {
                return Err(ConditionError::VisualDelay { kind, visual_delay_ms });
            }
            if visual_delay_ms <= ASYNC_HAPTIC_DELAY_MS {
                return Err(ConditionError::AsynchronousNotStrict(visual_delay_ms));
            }
            (ASYNC_HAPTIC_DELAY_MS, HapticSource::RemoteSensor)
        }
    };
    Ok(ConditionSpec {
        kind,
        visual_delay_ms,
        haptic_delay_ms,
        onset_delay_ms: 0,
        haptic_source,
    })
}

impl ConditionSpec {
    /// Every valid (kind, visual delay) cell, in declaration order.
    pub fn all_cells() -> Vec<ConditionSpec> {
        let mut cells = Vec::new();
        for kind in ConditionKind::ALL {
            let levels: &[Millis] = if kind == ConditionKind::Control { &[0] } else { &FEEDBACK_DELAYS_MS };
            cells.extend(levels.iter().filter_map(|&v| make_condition(kind, v).ok()));
        }
        cells
    }

    pub fn with_onset_delay(mut self, onset_delay_ms: Millis) -> Self {
        self.onset_delay_ms = onset_delay_ms;
        self
    }

    /// Re-derives the condition from its kind and visual delay and checks that
    /// the stored haptic fields agree. Used on specs read back from files.
    pub fn validate(&self) -> Result<(), ConditionError> {
        let expected = make_condition(self.kind, self.visual_delay_ms)?;
        if expected.haptic_delay_ms != self.haptic_delay_ms {
            return Err(ConditionError::Inconsistent {
                kind: self.kind,
                detail: "haptic delay",
            });
        }
        if expected.haptic_source != self.haptic_source {
            return Err(ConditionError::Inconsistent {
                kind: self.kind,
                detail: "haptic source",
            });
        }
        Ok(())
    }

    pub fn delay(&self, channel: Channel) -> Millis {
        match channel {
            Channel::Command => self.onset_delay_ms,
            Channel::Visual => self.visual_delay_ms,
            Channel::Haptic => self.haptic_delay_ms,
        }
    }

    /// Actual visuomotor gap: visual minus haptic feedback delay.
    pub fn visuomotor_gap_ms(&self) -> Millis {
        self.visual_delay_ms.abs_diff(self.haptic_delay_ms)
    }
}

impl fmt::Display for ConditionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.kind, self.visual_delay_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEvent<T> {
    pub channel: Channel,
    pub emit_time: Millis,
    pub due_time: Millis,
    pub sequence: u64,
    pub payload: T,
}

/// In-flight events for the three channels of one session.
///
/// Each channel is a FIFO; since a channel's delay is constant, due times are
/// non-decreasing along it and the queue front is always the next event due.
#[derive(Debug, Clone)]
pub struct DelayPipeline<T> {
    condition: ConditionSpec,
    queues: [VecDeque<ChannelEvent<T>>; 3],
    high_water: [usize; 3],
    last_due: [Millis; 3],
    next_sequence: u64,
    last_drain: Option<Millis>,
}

impl<T> DelayPipeline<T> {
    pub fn new(condition: ConditionSpec) -> Self {
        Self {
            condition,
            queues: [VecDeque::new(), VecDeque::new(), VecDeque::new()],
            high_water: [0; 3],
            last_due: [0; 3],
            next_sequence: 0,
            last_drain: None,
        }
    }

    pub fn condition(&self) -> &ConditionSpec {
        &self.condition
    }

    /// Stores `payload` on `channel`, due at `now` plus the channel delay.
    ///
    /// A producer that goes back in time on a channel cannot overtake earlier
    /// events: the due time is raised to the channel's last due time so FIFO
    /// order is kept.
    pub fn enqueue(&mut self, payload: T, channel: Channel, now: Millis) -> u64 {
        let idx = channel.index();
        let mut due_time = now + self.condition.delay(channel);
        if due_time < self.last_due[idx] {
            log::warn!(
                "{} channel producer went back in time ({now} ms); holding event to keep FIFO order",
                channel.name()
            );
            due_time = self.last_due[idx];
        }
        self.last_due[idx] = due_time;
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        let queue = &mut self.queues[idx];
        queue.push_back(ChannelEvent {
            channel,
            emit_time: now,
            due_time,
            sequence,
            payload,
        });
        if queue.len() > self.high_water[idx] {
            self.high_water[idx] = queue.len();
            if queue.len().is_power_of_two() && queue.len() >= 1024 {
                log::debug!("{} channel high-water mark {}", channel.name(), queue.len());
            }
        }
        sequence
    }

    /// Removes and returns every event due at or before `now`, ordered by
    /// (due time, sequence).
    pub fn drain_due(&mut self, now: Millis) -> Result<Vec<ChannelEvent<T>>, PipelineError> {
        if let Some(last) = self.last_drain {
            if now < last {
                return Err(PipelineError::TimeRegression { last, now });
            }
        }
        self.last_drain = Some(now);
        let mut out = Vec::new();
        for queue in &mut self.queues {
            while queue.front().is_some_and(|e| e.due_time <= now) {
                out.extend(queue.pop_front());
            }
        }
        out.sort_by_key(|e| (e.due_time, e.sequence));
        Ok(out)
    }

    pub fn pending(&self, channel: Channel) -> usize {
        self.queues[channel.index()].len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn high_water(&self, channel: Channel) -> usize {
        self.high_water[channel.index()]
    }

    /// Earliest due time among pending events.
    pub fn next_due(&self) -> Option<Millis> {
        self.queues.iter().filter_map(|q| q.front().map(|e| e.due_time)).min()
    }
}

/// A sample released by a [`SyncBuffer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Released<T> {
    pub emit_time: Millis,
    pub release_time: Millis,
    pub sample: T,
}

/// Pads a haptic stream that already carries `intrinsic` delay so that its
/// total latency equals `target`, aligning it with a slower visual channel.
#[derive(Debug, Clone)]
pub struct SyncBuffer<T> {
    intrinsic: Millis,
    target: Millis,
    queue: VecDeque<(Millis, T)>,
}

impl<T> SyncBuffer<T> {
    pub fn new(intrinsic: Millis, target: Millis) -> Result<Self, PipelineError> {
        if target < intrinsic {
            return Err(PipelineError::InfeasibleBuffer { intrinsic, target });
        }
        Ok(Self {
            intrinsic,
            target,
            queue: VecDeque::new(),
        })
    }

    /// Extra hold time added on top of the intrinsic delay.
    pub fn padding(&self) -> Millis {
        self.target - self.intrinsic
    }

    /// Accepts a sample stamped with its original emission time.
    pub fn push(&mut self, emit_time: Millis, sample: T) {
        self.queue.push_back((emit_time, sample));
    }

    pub fn release_due(&mut self, now: Millis) -> Vec<Released<T>> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|(emit, _)| emit + self.target <= now) {
            if let Some((emit_time, sample)) = self.queue.pop_front() {
                out.push(Released {
                    emit_time,
                    release_time: emit_time + self.target,
                    sample,
                });
            }
        }
        out
    }
}

/// Batch form of [`SyncBuffer`]: every sample of `stream` (emission time,
/// sample) is released exactly `target` ms after emission.
pub fn synchronize_buffer<T>(
    stream: impl IntoIterator<Item = (Millis, T)>,
    intrinsic: Millis,
    target: Millis,
) -> Result<Vec<Released<T>>, PipelineError> {
    let mut buffer = SyncBuffer::new(intrinsic, target)?;
    let mut latest = 0;
    for (emit, sample) in stream {
        latest = latest.max(emit);
        buffer.push(emit, sample);
    }
    Ok(buffer.release_due(latest + target))
}
