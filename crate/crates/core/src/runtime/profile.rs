// SPDX-License-Identifier: Apache-2.0

//! Execution timeline and per-layer counters.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::movers::TrafficCounters;
use crate::perf::LayerCost;

use super::channel::ChannelStats;

/// One kernel instance over one launch. Wall times are emulator time in
/// microseconds since the run began; modeled times are accelerator seconds
/// from the performance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEvent {
    pub kernel: String,
    pub instance: usize,
    pub layer: usize,
    pub launch: usize,
    pub image: usize,
    pub wall_start_us: f64,
    pub wall_end_us: f64,
    pub modeled_start_s: f64,
    pub modeled_end_s: f64,
    pub bytes: u64,
    pub stall_ns: u64,
    pub stall_events: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub kind: String,
    pub counters: TrafficCounters,
    pub modeled: Option<LayerCost>,
    pub lrn_modeled: Option<LayerCost>,
    /// One summary per channel kind, merged over CUs, launches and images.
    pub channels: Vec<ChannelStats>,
    /// Elements held by the pooling line buffers.
    pub line_buffer_elements: usize,
    /// Peak CU results queued between conv and pool.
    pub peak_results_buffered: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunProfile {
    pub events: Vec<ProfileEvent>,
    pub layers: Vec<LayerRecord>,
}

pub const EVENT_COLUMNS: [&str; 12] = [
    "kernel",
    "instance",
    "layer",
    "launch",
    "image",
    "wall_start_us",
    "wall_end_us",
    "modeled_start_s",
    "modeled_end_s",
    "bytes",
    "stall_ns",
    "stall_events",
];

fn event_row(e: &ProfileEvent) -> [String; 12] {
    [
        e.kernel.clone(),
        e.instance.to_string(),
        e.layer.to_string(),
        e.launch.to_string(),
        e.image.to_string(),
        format!("{:.1}", e.wall_start_us),
        format!("{:.1}", e.wall_end_us),
        format!("{:.9}", e.modeled_start_s),
        format!("{:.9}", e.modeled_end_s),
        e.bytes.to_string(),
        e.stall_ns.to_string(),
        e.stall_events.to_string(),
    ]
}

impl RunProfile {
    /// Appends `other`, merging records of layers already present.
    pub fn absorb(&mut self, other: RunProfile) {
        self.events.extend(other.events);
        for rec in other.layers {
            match self.layers.iter_mut().find(|r| r.layer == rec.layer) {
                Some(mine) => {
                    mine.counters.add(&rec.counters);
                    for ch in rec.channels {
                        match mine.channels.iter_mut().find(|c| c.name == ch.name) {
                            Some(c) => c.merge(&ch),
                            None => mine.channels.push(ch),
                        }
                    }
                    mine.line_buffer_elements = mine.line_buffer_elements.max(rec.line_buffer_elements);
                    mine.peak_results_buffered = mine.peak_results_buffered.max(rec.peak_results_buffered);
                }
                None => self.layers.push(rec),
            }
        }
    }

    pub fn events_for<'a>(&'a self, kernel: &'a str, layer: usize) -> impl Iterator<Item = &'a ProfileEvent> + 'a {
        self.events.iter().filter(move |e| e.kernel == kernel && e.layer == layer)
    }

    pub fn total_counters(&self) -> TrafficCounters {
        let mut t = TrafficCounters::default();
        for l in &self.layers {
            t.add(&l.counters);
        }
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    /// One line per event.
    pub fn to_csv(&self) -> String {
        let mut s = EVENT_COLUMNS.join(",");
        s.push('\n');
        for e in &self.events {
            s.push_str(&event_row(e).join(","));
            s.push('\n');
        }
        s
    }

    /// Aligned event table followed by per-layer counters.
    pub fn to_text(&self) -> String {
        let rows: Vec<[String; 12]> = self.events.iter().map(event_row).collect();
        let mut widths = EVENT_COLUMNS.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let mut line = |cells: Vec<&str>| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            writeln!(s, "{}", parts.join("  ")).unwrap();
        };
        line(EVENT_COLUMNS.to_vec());
        for r in &rows {
            line(r.iter().map(String::as_str).collect());
        }
        writeln!(s).unwrap();
        writeln!(
            s,
            "{:>5}  {:>4}  {:>14}  {:>14}  {:>14}  {:>10}  {:>12}  {:>7}",
            "layer", "kind", "feature_bytes", "weight_bytes", "bytes_written", "cache_miss", "modeled_ms", "stalled"
        )
        .unwrap();
        for l in &self.layers {
            let (ms, stalled) = l
                .modeled
                .map_or((0.0, false), |m| (m.effective_time * 1e3, m.stalled));
            writeln!(
                s,
                "{:>5}  {:>4}  {:>14}  {:>14}  {:>14}  {:>10}  {:>12.4}  {:>7}",
                l.layer,
                l.kind,
                l.counters.feature_bytes_read,
                l.counters.weight_bytes_read,
                l.counters.bytes_written,
                l.counters.cache_misses,
                ms,
                stalled
            )
            .unwrap();
        }
        s
    }
}
