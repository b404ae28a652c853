// SPDX-License-Identifier: Apache-2.0

//! Kernel stages of one launch: MemRD, conv shards, Pool and MemWR.

use std::sync::Arc;

use crate::conv::{conv_neuron, finish_neuron, ShiftRegister};
use crate::error::{Error, Result};
use crate::model::{FeatureMap, PoolSpec};
use crate::movers::{Launch, MemRd, MemWr, TrafficCounters, WeightPacket, WorkGroup};
use crate::pool::LineBufferBank;

use super::channel::{Channel, Direction, StallCounters, TryPop, TryPush};

/// Steps a stage may take inside one poll.
const BURST: usize = 64;

#[derive(Debug, Clone)]
pub struct Blocker {
    pub stalls: Arc<StallCounters>,
    pub dir: Direction,
}

impl Blocker {
    fn on<T>(ch: &Channel<T>, dir: Direction) -> Self {
        Self {
            stalls: ch.stalls().clone(),
            dir,
        }
    }

    pub fn describe(&self) -> String {
        let verb = match self.dir {
            Direction::Push => "push to",
            Direction::Pop => "pop from",
        };
        format!("{verb} {}", self.stalls.channel())
    }
}

#[derive(Debug, Clone)]
pub enum Poll {
    Progress,
    Blocked(Blocker),
    Done,
}

pub trait Stage: Send {
    fn kernel(&self) -> &'static str;
    fn instance(&self) -> usize {
        0
    }
    fn poll(&mut self) -> Result<Poll>;
    /// Global-memory bytes moved so far.
    fn bytes(&self) -> u64 {
        0
    }
}

pub type FeatureChannel = Channel<Arc<[f32]>>;
pub type WeightChannel = Channel<Option<WeightPacket>>;
pub type ResultChannel = Channel<f32>;
pub type PixelChannel = Channel<Vec<f32>>;

enum Step {
    Progress,
    Blocked(Blocker),
    Done,
}

/// Runs `step` up to BURST times and folds the outcomes into one poll.
fn burst(mut step: impl FnMut() -> Result<Step>) -> Result<Poll> {
    let mut progressed = false;
    for _ in 0..BURST {
        match step()? {
            Step::Progress => progressed = true,
            Step::Done => return Ok(Poll::Done),
            Step::Blocked(b) => {
                return Ok(if progressed { Poll::Progress } else { Poll::Blocked(b) });
            }
        }
    }
    Ok(Poll::Progress)
}

pub struct MemRdStage<'a> {
    rd: MemRd<'a>,
    features: Vec<Arc<FeatureChannel>>,
    weights: Vec<Arc<WeightChannel>>,
    pending: Option<WorkGroup>,
    cursor: usize,
}

impl<'a> MemRdStage<'a> {
    pub fn new(rd: MemRd<'a>, features: Vec<Arc<FeatureChannel>>, weights: Vec<Arc<WeightChannel>>) -> Self {
        Self {
            rd,
            features,
            weights,
            pending: None,
            cursor: 0,
        }
    }

    pub fn counters(&self) -> TrafficCounters {
        self.rd.counters()
    }

    fn step(&mut self) -> Result<Step> {
        if self.pending.is_none() {
            match self.rd.next() {
                Some(wg) => {
                    self.pending = Some(wg);
                    self.cursor = 0;
                }
                None => {
                    // Weights first: a CU that sees its feature stream end
                    // then finds the weight stream already closed.
                    self.weights.iter().for_each(|c| c.close());
                    self.features.iter().for_each(|c| c.close());
                    return Ok(Step::Done);
                }
            }
        }
        let wg = self.pending.as_mut().expect("pending work-group");
        let cu = self.cursor / 2;
        if self.cursor.is_multiple_of(2) {
            match self.features[cu].try_push(wg.features.clone()) {
                Ok(()) => {}
                Err(TryPush::Full(_)) => return Ok(Step::Blocked(Blocker::on(&*self.features[cu], Direction::Push))),
                Err(TryPush::Closed(_)) => {
                    return Err(Error::ChannelClosed(format!("{} closed early", self.features[cu].name())))
                }
            }
        } else {
            let packet = wg.weights[cu].take();
            match self.weights[cu].try_push(packet) {
                Ok(()) => {}
                Err(TryPush::Full(p)) => {
                    wg.weights[cu] = p;
                    return Ok(Step::Blocked(Blocker::on(&*self.weights[cu], Direction::Push)));
                }
                Err(TryPush::Closed(_)) => {
                    return Err(Error::ChannelClosed(format!("{} closed early", self.weights[cu].name())))
                }
            }
        }
        self.cursor += 1;
        if self.cursor == 2 * self.features.len() {
            self.pending = None;
        }
        Ok(Step::Progress)
    }
}

impl Stage for MemRdStage<'_> {
    fn kernel(&self) -> &'static str {
        "memrd"
    }

    fn poll(&mut self) -> Result<Poll> {
        burst(|| self.step())
    }

    fn bytes(&self) -> u64 {
        self.rd.counters().bytes_read()
    }
}

struct CuLane {
    features: Arc<FeatureChannel>,
    weights: Arc<WeightChannel>,
    out: Arc<ResultChannel>,
    feature: Option<Arc<[f32]>>,
    packet: Option<Option<WeightPacket>>,
    result: Option<f32>,
    done: bool,
}

/// A group of CU datapaths owned by one worker.
pub struct ConvShard {
    instance: usize,
    vec_size: usize,
    relu: bool,
    reg: ShiftRegister,
    lanes: Vec<CuLane>,
    next: usize,
}

pub struct CuPorts {
    pub features: Arc<FeatureChannel>,
    pub weights: Arc<WeightChannel>,
    pub out: Arc<ResultChannel>,
}

impl ConvShard {
    pub fn new(instance: usize, launch: &Launch, reg_depth: usize, ports: Vec<CuPorts>) -> Self {
        Self {
            instance,
            vec_size: launch.vec_size,
            relu: launch.relu,
            reg: ShiftRegister::new(reg_depth),
            lanes: ports
                .into_iter()
                .map(|p| CuLane {
                    features: p.features,
                    weights: p.weights,
                    out: p.out,
                    feature: None,
                    packet: None,
                    result: None,
                    done: false,
                })
                .collect(),
            next: 0,
        }
    }

    fn step_lane(lane: &mut CuLane, reg: &mut ShiftRegister, vec: usize, relu: bool) -> Result<Step> {
        if lane.done {
            return Ok(Step::Done);
        }
        if let Some(v) = lane.result {
            return match lane.out.try_push(v) {
                Ok(()) => {
                    lane.result = None;
                    Ok(Step::Progress)
                }
                Err(TryPush::Full(_)) => Ok(Step::Blocked(Blocker::on(&*lane.out, Direction::Push))),
                Err(TryPush::Closed(_)) => Err(Error::ChannelClosed(format!("{} closed early", lane.out.name()))),
            };
        }
        if lane.feature.is_none() {
            match lane.features.try_pop() {
                TryPop::Item(f) => lane.feature = Some(f),
                TryPop::Empty => return Ok(Step::Blocked(Blocker::on(&*lane.features, Direction::Pop))),
                TryPop::Closed => {
                    if lane.packet.is_some() || !matches!(lane.weights.try_pop(), TryPop::Closed) {
                        return Err(Error::StreamUnderrun(format!(
                            "{} ended while weights remain",
                            lane.features.name()
                        )));
                    }
                    lane.out.close();
                    lane.done = true;
                    return Ok(Step::Done);
                }
            }
        }
        if lane.packet.is_none() {
            match lane.weights.try_pop() {
                TryPop::Item(p) => lane.packet = Some(p),
                TryPop::Empty => return Ok(Step::Blocked(Blocker::on(&*lane.weights, Direction::Pop))),
                TryPop::Closed => {
                    return Err(Error::StreamUnderrun(format!(
                        "{} ended before its feature stream",
                        lane.weights.name()
                    )))
                }
            }
        }
        let features = lane.feature.take().expect("feature window");
        let value = match lane.packet.take().expect("weight packet") {
            Some(p) => {
                if p.weights.len() != features.len() {
                    return Err(Error::PlanMismatch(format!(
                        "window of {} lanes against weights of {}",
                        features.len(),
                        p.weights.len()
                    )));
                }
                finish_neuron(conv_neuron(&features, &p.weights, vec, reg), p.bias, relu)
            }
            // Idle CU: a placeholder keeps the pixel's lane vector complete.
            None => 0.0,
        };
        lane.result = Some(value);
        Ok(Step::Progress)
    }

    fn step(&mut self) -> Result<Step> {
        // Round-robin over lanes; blocked only when every live lane is.
        let n = self.lanes.len();
        let mut first_block = None;
        for i in 0..n {
            let idx = (self.next + i) % n;
            match Self::step_lane(&mut self.lanes[idx], &mut self.reg, self.vec_size, self.relu)? {
                Step::Progress => {
                    self.next = (idx + 1) % n;
                    return Ok(Step::Progress);
                }
                Step::Blocked(b) => {
                    first_block.get_or_insert(b);
                }
                Step::Done => {}
            }
        }
        Ok(match first_block {
            Some(b) => Step::Blocked(b),
            None => Step::Done,
        })
    }
}

impl Stage for ConvShard {
    fn kernel(&self) -> &'static str {
        "conv"
    }

    fn instance(&self) -> usize {
        self.instance
    }

    fn poll(&mut self) -> Result<Poll> {
        burst(|| self.step())
    }
}

/// Gathers one scalar per CU into a lane vector and optionally pools it.
pub struct PoolStage {
    inputs: Vec<Arc<ResultChannel>>,
    out: Arc<PixelChannel>,
    gather: Vec<f32>,
    bank: Option<LineBufferBank>,
    pixels_per_map: usize,
    expected: usize,
    received: usize,
    emitted: Vec<f32>,
    pending: Option<Vec<f32>>,
    peak_buffered: usize,
}

impl PoolStage {
    pub fn new(launch: &Launch, spec: Option<PoolSpec>, inputs: Vec<Arc<ResultChannel>>, out: Arc<PixelChannel>) -> Self {
        let lanes = inputs.len();
        Self {
            gather: Vec::with_capacity(lanes),
            bank: spec.map(|s| LineBufferBank::new(s, launch.out_width, lanes)),
            pixels_per_map: launch.out_pixels(),
            expected: launch.map_groups() * launch.out_pixels(),
            received: 0,
            emitted: Vec::with_capacity(lanes),
            pending: None,
            inputs,
            out,
            peak_buffered: 0,
        }
    }

    /// Elements held by the line-buffer bank (zero in bypass).
    pub fn buffer_elements(&self) -> usize {
        self.bank.as_ref().map_or(0, LineBufferBank::capacity_elements)
    }

    fn step(&mut self) -> Result<Step> {
        if let Some(px) = self.pending.take() {
            return match self.out.try_push(px) {
                Ok(()) => Ok(Step::Progress),
                Err(TryPush::Full(px)) => {
                    self.pending = Some(px);
                    Ok(Step::Blocked(Blocker::on(&*self.out, Direction::Push)))
                }
                Err(TryPush::Closed(_)) => Err(Error::ChannelClosed(format!("{} closed early", self.out.name()))),
            };
        }
        let lane = self.gather.len();
        match self.inputs[lane].try_pop() {
            TryPop::Item(v) => self.gather.push(v),
            TryPop::Empty => return Ok(Step::Blocked(Blocker::on(&*self.inputs[lane], Direction::Pop))),
            TryPop::Closed => {
                if lane != 0 || self.received != self.expected {
                    let in_map = self.received % self.pixels_per_map.max(1);
                    return Err(match self.bank {
                        Some(_) => Error::IncompleteRow {
                            received: in_map,
                            expected: self.pixels_per_map,
                        },
                        None => Error::StreamUnderrun(format!(
                            "pool received {} of {} pixels",
                            self.received, self.expected
                        )),
                    });
                }
                // Shards close their lanes one by one; wait for the rest.
                for c in &self.inputs[1..] {
                    match c.try_pop() {
                        TryPop::Closed => {}
                        TryPop::Empty => return Ok(Step::Blocked(Blocker::on(&**c, Direction::Pop))),
                        TryPop::Item(_) => {
                            return Err(Error::StreamOverrun("CU results left after the last pixel".into()))
                        }
                    }
                }
                self.out.close();
                return Ok(Step::Done);
            }
        }
        if self.gather.len() < self.inputs.len() {
            return Ok(Step::Progress);
        }
        if self.received == self.expected {
            return Err(Error::StreamOverrun(format!("pool expected {} pixels", self.expected)));
        }
        self.received += 1;
        let pixel = std::mem::replace(&mut self.gather, Vec::with_capacity(self.inputs.len()));
        match &mut self.bank {
            None => self.pending = Some(pixel),
            Some(bank) => {
                self.emitted.clear();
                if bank.push(&pixel, &mut self.emitted) {
                    self.pending = Some(self.emitted.clone());
                }
                if self.received.is_multiple_of(self.pixels_per_map) {
                    bank.reset();
                }
            }
        }
        let buffered: usize = self.inputs.iter().map(|c| c.len()).sum();
        self.peak_buffered = self.peak_buffered.max(buffered);
        Ok(Step::Progress)
    }

    /// Peak scalars queued on the CU result channels, sampled after each pixel.
    pub fn peak_buffered(&self) -> usize {
        self.peak_buffered
    }
}

impl Stage for PoolStage {
    fn kernel(&self) -> &'static str {
        "pool"
    }

    fn poll(&mut self) -> Result<Poll> {
        burst(|| self.step())
    }
}

pub struct MemWrStage {
    input: Arc<PixelChannel>,
    wr: Option<MemWr>,
    result: Option<(FeatureMap, TrafficCounters)>,
}

impl MemWrStage {
    pub fn new(wr: MemWr, input: Arc<PixelChannel>) -> Self {
        Self {
            input,
            wr: Some(wr),
            result: None,
        }
    }

    pub fn take_result(&mut self) -> Option<(FeatureMap, TrafficCounters)> {
        self.result.take()
    }

    fn step(&mut self) -> Result<Step> {
        let Some(wr) = self.wr.as_mut() else {
            return Ok(Step::Done);
        };
        match self.input.try_pop() {
            TryPop::Item(px) => {
                wr.accept(&px)?;
                Ok(Step::Progress)
            }
            TryPop::Empty => Ok(Step::Blocked(Blocker::on(&*self.input, Direction::Pop))),
            TryPop::Closed => {
                self.result = Some(self.wr.take().expect("writer").finish()?);
                Ok(Step::Done)
            }
        }
    }
}

impl Stage for MemWrStage {
    fn kernel(&self) -> &'static str {
        "memwr"
    }

    fn poll(&mut self) -> Result<Poll> {
        burst(|| self.step())
    }

    fn bytes(&self) -> u64 {
        self.result.as_ref().map_or(0, |r| r.1.bytes_written)
    }
}
