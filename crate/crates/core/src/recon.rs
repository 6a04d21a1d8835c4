//! Cluster finding and X-ray/track classification on pixel frames.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, format_err, Result};
use crate::num::Real;
use crate::sim::{simulate_frame, PixelFrame, RunInfo, SimConfig};
use crate::spectra::{AduHistogram, Binning};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    /// A cluster needs at least one pixel at or above this, ADU.
    pub seed_threshold: f64,
    /// Pixels at or above this join a cluster, ADU.
    pub split_threshold: f64,
    pub max_xray_pixels: usize,
    /// Largest accepted bounding box, (w, h) pixels.
    pub max_bounding_box: (usize, usize),
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            seed_threshold: 30.0,
            split_threshold: 1.5,
            max_xray_pixels: 4,
            max_bounding_box: (2, 2),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_threshold > 0.0 && self.seed_threshold >= self.split_threshold && self.seed_threshold.is_finite()) {
            return Err(domain(format!(
                "need seed_threshold >= split_threshold > 0, got {} and {}",
                self.seed_threshold, self.split_threshold
            )));
        }
        if self.max_xray_pixels == 0 || self.max_bounding_box.0 == 0 || self.max_bounding_box.1 == 0 {
            return Err(domain("X-ray size limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterPixel {
    pub x: usize,
    pub y: usize,
    pub adu: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Member pixels in row-major order.
    pub pixels: Vec<ClusterPixel>,
    /// Sum of member ADU accumulated in f64 in row-major order.
    pub total_adu: f64,
    pub x_min: usize,
    pub y_min: usize,
    /// (w, h) of the bounding box.
    pub bounding_box: (usize, usize),
    pub frame_index: u64,
}

impl Cluster {
    fn from_pixels(mut pixels: Vec<ClusterPixel>, frame_index: u64) -> Self {
        pixels.sort_unstable_by_key(|p| (p.y, p.x));
        let x_min = pixels.iter().map(|p| p.x).min().unwrap_or(0);
        let x_max = pixels.iter().map(|p| p.x).max().unwrap_or(0);
        let y_min = pixels.first().map(|p| p.y).unwrap_or(0);
        let y_max = pixels.last().map(|p| p.y).unwrap_or(0);
        let total_adu = pixels.iter().map(|p| p.adu as f64).sum();
        Self {
            pixels,
            total_adu,
            x_min,
            y_min,
            bounding_box: (x_max - x_min + 1, y_max - y_min + 1),
            frame_index,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels.len()
    }

    pub fn event(&self) -> Event {
        Event {
            frame_index: self.frame_index,
            x_min: self.x_min,
            y_min: self.y_min,
            n_pixels: self.n_pixels(),
            total_adu: self.total_adu,
        }
    }
}

/// Maximal 8-connected groups of pixels ≥ `split_threshold` that contain a
/// pixel ≥ `seed_threshold`, sorted by (frame_index, y_min, x_min).
pub fn find_clusters(frame: &PixelFrame, cfg: &ReconConfig) -> Vec<Cluster> {
    let (w, h) = (frame.width, frame.height);
    let split = cfg.split_threshold as f32;
    let seed = cfg.seed_threshold as f32;
    let above = |i: usize| frame.adu[i] >= split;
    let mut visited = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut clusters = Vec::new();

    for start in 0..w * h {
        if visited[start] || !above(start) {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        let mut has_seed = false;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let adu = frame.adu[i];
            has_seed |= adu >= seed;
            members.push(ClusterPixel { x, y, adu });
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if !visited[j] && above(j) {
                        visited[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if has_seed {
            clusters.push(Cluster::from_pixels(members, frame.meta.frame_index));
        }
    }
    // stable: discovery order breaks (y_min, x_min) ties
    clusters.sort_by_key(|c| (c.frame_index, c.y_min, c.x_min));
    clusters
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Accepted,
    RejectedTrack,
}

pub fn classify_cluster(c: &Cluster, cfg: &ReconConfig) -> Classification {
    let (bw, bh) = c.bounding_box;
    let (mw, mh) = cfg.max_bounding_box;
    if c.n_pixels() <= cfg.max_xray_pixels && bw <= mw && bh <= mh {
        Classification::Accepted
    } else {
        Classification::RejectedTrack
    }
}

/// Summary of one X-ray candidate, as stored in event lists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub frame_index: u64,
    pub x_min: usize,
    pub y_min: usize,
    pub n_pixels: usize,
    pub total_adu: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconStats {
    pub frames: u64,
    pub clusters: u64,
    pub accepted: u64,
    pub rejected_tracks: u64,
}

impl ReconStats {
    pub fn add(&mut self, other: &Self) {
        self.frames += other.frames;
        self.clusters += other.clusters;
        self.accepted += other.accepted;
        self.rejected_tracks += other.rejected_tracks;
    }
}

/// Accepted events of one frame plus bookkeeping.
pub fn reconstruct_frame(frame: &PixelFrame, cfg: &ReconConfig) -> (Vec<Event>, ReconStats) {
    let clusters = find_clusters(frame, cfg);
    let mut stats = ReconStats {
        frames: 1,
        clusters: clusters.len() as u64,
        ..ReconStats::default()
    };
    let events = clusters
        .iter()
        .filter(|c| match classify_cluster(c, cfg) {
            Classification::Accepted => {
                stats.accepted += 1;
                true
            }
            Classification::RejectedTrack => {
                stats.rejected_tracks += 1;
                false
            }
        })
        .map(Cluster::event)
        .collect();
    (events, stats)
}

/// Reconstructs frames in parallel. Events come back sorted by
/// (frame_index, y_min, x_min) whatever the input order.
pub fn reconstruct_frames(frames: &[PixelFrame], cfg: &ReconConfig) -> Result<(Vec<Event>, ReconStats)> {
    cfg.validate()?;
    for f in frames {
        f.validate()?;
    }
    let per_frame: Vec<_> = frames.par_iter().map(|f| reconstruct_frame(f, cfg)).collect();
    let mut stats = ReconStats::default();
    let mut events = Vec::new();
    for (ev, st) in per_frame {
        stats.add(&st);
        events.extend(ev);
    }
    sort_events(&mut events);
    Ok((events, stats))
}

/// Simulates frames `0..n_frames` and reconstructs them on the fly, keeping
/// only the accepted events. Same result as [`reconstruct_frames`] on
/// [`crate::sim::simulate_run`] without holding the frames in memory.
pub fn simulate_and_reconstruct(
    sim: &SimConfig,
    n_frames: u64,
    current_on: bool,
    cfg: &ReconConfig,
) -> Result<(Vec<Event>, ReconStats)> {
    RunInfo::new(sim, n_frames, current_on)?;
    sim.validate()?;
    cfg.validate()?;
    let per_frame = (0..n_frames)
        .into_par_iter()
        .map(|i| simulate_frame(sim, i, current_on).map(|f| reconstruct_frame(&f, cfg)))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = ReconStats::default();
    let mut events = Vec::new();
    for (ev, st) in per_frame {
        stats.add(&st);
        events.extend(ev);
    }
    Ok((events, stats))
}

pub fn sort_events(events: &mut [Event]) {
    events.sort_by_key(|e| (e.frame_index, e.y_min, e.x_min));
}

pub fn events_to_adu_spectrum<T: Real>(events: &[Event], binning: Binning<T>) -> Result<AduHistogram<T>> {
    if binning.n_bins == 0 || !(binning.width() > T::zero()) {
        return Err(domain("binning needs at least one bin of positive width"));
    }
    Ok(AduHistogram::from_values(binning, events.iter().map(|e| T::lit(e.total_adu))))
}

pub const EVENT_CSV_HEADER: [&str; 5] = ["frame_index", "x_min", "y_min", "n_pixels", "total_adu"];

pub fn write_events_csv<W: Write>(w: W, events: &[Event]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(EVENT_CSV_HEADER)?;
    for e in events {
        out.write_record([
            e.frame_index.to_string(),
            e.x_min.to_string(),
            e.y_min.to_string(),
            e.n_pixels.to_string(),
            // shortest repr that parses back to the same f64
            format!("{:?}", e.total_adu),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events_csv<R: BufRead>(r: R) -> Result<Vec<Event>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != EVENT_CSV_HEADER {
        return Err(format_err("event CSV", format!("unexpected header {:?}", header)));
    }
    let mut events = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| format_err("event CSV", format!("row {}: missing column", line + 1)));
        let bad = |what: &str| format_err("event CSV", format!("row {}: bad {what}", line + 1));
        let total_adu: f64 = field(4)?.parse().map_err(|_| bad("total_adu"))?;
        if !total_adu.is_finite() {
            return Err(bad("total_adu"));
        }
        events.push(Event {
            frame_index: field(0)?.parse().map_err(|_| bad("frame_index"))?,
            x_min: field(1)?.parse().map_err(|_| bad("x_min"))?,
            y_min: field(2)?.parse().map_err(|_| bad("y_min"))?,
            n_pixels: field(3)?.parse().map_err(|_| bad("n_pixels"))?,
            total_adu,
        });
    }
    Ok(events)
}
