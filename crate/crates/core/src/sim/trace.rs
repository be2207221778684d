//! GPS trace files: one JSON fix per line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{lane_point, local_to_geo, GeoError, RoadNetwork};
use crate::model::normalize_yaw;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Seconds from trace start.
    pub t: f64,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub roll: f64,
    #[serde(default)]
    pub pitch: f64,
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: time goes backwards")]
    NonMonotonicTime { line: usize },
    #[error("cannot read trace: {0}")]
    Io(String),
}

pub fn parse_trace(text: &str) -> Result<Vec<TracePoint>, TraceError> {
    let mut out: Vec<TracePoint> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let p: TracePoint = serde_json::from_str(raw).map_err(|e| TraceError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let finite = [p.t, p.lat, p.lon, p.roll, p.pitch, p.yaw].iter().all(|x| x.is_finite());
        if !finite || !(-90.0..=90.0).contains(&p.lat) || !(-180.0..=180.0).contains(&p.lon) {
            return Err(TraceError::Malformed {
                line,
                reason: "coordinates and angles must be finite and in range".into(),
            });
        }
        if out.last().is_some_and(|prev| p.t < prev.t) {
            return Err(TraceError::NonMonotonicTime { line });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<TracePoint>, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io(e.to_string()))?;
    parse_trace(&text)
}

/// A constant-speed drive along one lane, wrapping on loop lanes and
/// stopping at the end of open lanes.
pub fn synthetic_trace(
    network: &RoadNetwork,
    lane_id: &str,
    start_s: f64,
    speed: f64,
    hz: f64,
    duration_s: f64,
) -> Result<Vec<TracePoint>, GeoError> {
    let lane = network
        .lane(lane_id)
        .ok_or_else(|| GeoError::UnknownLane(lane_id.to_string()))?;
    let len = lane.length();
    let looped = network.is_loop(lane_id);
    let n = (duration_s * hz).floor() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 / hz;
        let raw = start_s + speed * t;
        let s = if looped { raw.rem_euclid(len) } else { raw.min(len) };
        let (lp, heading) = lane_point(network, lane_id, s)?;
        let g = local_to_geo(network.origin, lp)?;
        out.push(TracePoint {
            t,
            lat: g.lat,
            lon: g.lon,
            roll: 0.0,
            pitch: 0.0,
            yaw: normalize_yaw(heading),
        });
    }
    Ok(out)
}
