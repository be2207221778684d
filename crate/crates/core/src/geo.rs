//! Scene-local planar coordinates and lane geometry.
//!
//! Global positions map onto a local east/north plane with an equirectangular
//! tangent approximation around the scene origin:
//! `x = R * dlon * cos(lat0)`, `y = R * dlat` (radians, R = WGS-84 semi-major
//! axis). Altitude is carried through from the origin.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, ExecMode};

pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Largest lat/lon offset from the origin accepted by [`geo_to_local`].
pub const MAX_DEGREE_OFFSET: f64 = 1.0;
/// Largest local coordinate accepted by [`local_to_geo`].
pub const MAX_LOCAL_OFFSET_M: f64 = 150_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("point outside the supported range around the origin: {0}")]
    OutOfRange(String),
    #[error("road network has no lanes")]
    EmptyNetwork,
    #[error("unknown lane `{0}`")]
    UnknownLane(String),
    #[error("invalid road network: {0}")]
    InvalidNetwork(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPosition {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub alt: f64,
}

impl GeoPosition {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPosition { lat, lon, alt: 0.0 }
    }
}

/// Meters east (`x`) and north (`y`) of the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
}

impl LocalPoint {
    pub fn new(x: f64, y: f64) -> Self {
        LocalPoint { x, y }
    }

    fn dist(self, o: LocalPoint) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

pub fn geo_to_local(origin: GeoPosition, p: GeoPosition) -> Result<LocalPoint, GeoError> {
    let dlat = p.lat - origin.lat;
    let dlon = p.lon - origin.lon;
    if !(dlat.abs() <= MAX_DEGREE_OFFSET && dlon.abs() <= MAX_DEGREE_OFFSET) {
        return Err(GeoError::OutOfRange(format!("offset ({dlat}, {dlon}) degrees")));
    }
    Ok(LocalPoint {
        x: EARTH_RADIUS_M * dlon.to_radians() * origin.lat.to_radians().cos(),
        y: EARTH_RADIUS_M * dlat.to_radians(),
    })
}

pub fn local_to_geo(origin: GeoPosition, lp: LocalPoint) -> Result<GeoPosition, GeoError> {
    if !(lp.x.abs() <= MAX_LOCAL_OFFSET_M && lp.y.abs() <= MAX_LOCAL_OFFSET_M) {
        return Err(GeoError::OutOfRange(format!("local ({}, {}) m", lp.x, lp.y)));
    }
    let cos_lat = origin.lat.to_radians().cos();
    if cos_lat <= 1e-9 {
        return Err(GeoError::OutOfRange("origin at a pole".into()));
    }
    Ok(GeoPosition {
        lat: origin.lat + (lp.y / EARTH_RADIUS_M).to_degrees(),
        lon: origin.lon + (lp.x / (EARTH_RADIUS_M * cos_lat)).to_degrees(),
        alt: origin.alt,
    })
}

/// Degrees clockwise from north, in `[0, 360)`.
pub fn heading_deg(dx: f64, dy: f64) -> f64 {
    let h = dx.atan2(dy).to_degrees();
    let h = if h < 0.0 { h + 360.0 } else { h };
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: String,
    pub points: Vec<LocalPoint>,
    /// m/s
    pub speed_limit: f64,
    cumulative: Vec<f64>,
}

impl Lane {
    pub fn new(id: impl Into<String>, points: Vec<LocalPoint>, speed_limit: f64) -> Result<Self, GeoError> {
        let id = id.into();
        if points.len() < 2 {
            return Err(GeoError::InvalidNetwork(format!("lane {id} needs at least two points")));
        }
        if !(speed_limit.is_finite() && speed_limit > 0.0) {
            return Err(GeoError::InvalidNetwork(format!("lane {id} speed limit must be > 0")));
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            if !(w[0].x.is_finite() && w[0].y.is_finite() && w[1].x.is_finite() && w[1].y.is_finite()) {
                return Err(GeoError::InvalidNetwork(format!("lane {id} has non-finite points")));
            }
            let d = w[0].dist(w[1]);
            if d == 0.0 {
                return Err(GeoError::InvalidNetwork(format!("lane {id} repeats a point")));
            }
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(Lane {
            id,
            points,
            speed_limit,
            cumulative,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Point and heading at arc length `s` (clamped to the lane).
    pub fn point_at(&self, s: f64) -> (LocalPoint, f64) {
        let s = s.clamp(0.0, self.length());
        let seg = match self.cumulative[1..].iter().position(|&c| s <= c) {
            Some(i) => i,
            None => self.points.len() - 2,
        };
        let (a, b) = (self.points[seg], self.points[seg + 1]);
        let seg_len = self.cumulative[seg + 1] - self.cumulative[seg];
        let t = ((s - self.cumulative[seg]) / seg_len).clamp(0.0, 1.0);
        let p = LocalPoint::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
        (p, heading_deg(b.x - a.x, b.y - a.y))
    }

    /// Closest point on the polyline: (distance, s, heading).
    fn closest(&self, p: LocalPoint) -> (f64, f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
            let foot = LocalPoint::new(a.x + dx * t, a.y + dy * t);
            let d = p.dist(foot);
            if d < best.0 {
                let s = self.cumulative[i] + t * (self.cumulative[i + 1] - self.cumulative[i]);
                best = (d, s, heading_deg(dx, dy));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    pub origin: GeoPosition,
    lanes: Vec<Lane>,
    pub connections: Vec<Connection>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct LaneDoc {
    id: String,
    points: Vec<[f64; 2]>,
    speed_limit: f64,
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    origin: GeoPosition,
    lanes: Vec<LaneDoc>,
    #[serde(default)]
    connections: Vec<Connection>,
}

impl RoadNetwork {
    pub fn new(origin: GeoPosition, mut lanes: Vec<Lane>, connections: Vec<Connection>) -> Result<Self, GeoError> {
        lanes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::new();
        for (i, l) in lanes.iter().enumerate() {
            if index.insert(l.id.clone(), i).is_some() {
                return Err(GeoError::InvalidNetwork(format!("duplicate lane id {}", l.id)));
            }
        }
        for c in &connections {
            for end in [&c.from, &c.to] {
                if !index.contains_key(end) {
                    return Err(GeoError::InvalidNetwork(format!("connection references unknown lane {end}")));
                }
            }
        }
        Ok(RoadNetwork {
            origin,
            lanes,
            connections,
            index,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, GeoError> {
        let doc: NetworkDoc =
            serde_json::from_str(text).map_err(|e| GeoError::InvalidNetwork(e.to_string()))?;
        let lanes = doc
            .lanes
            .into_iter()
            .map(|l| {
                Lane::new(
                    l.id,
                    l.points.into_iter().map(|[x, y]| LocalPoint::new(x, y)).collect(),
                    l.speed_limit,
                )
            })
            .collect::<Result<_, _>>()?;
        RoadNetwork::new(doc.origin, lanes, doc.connections)
    }

    pub fn load(path: &Path) -> Result<Self, GeoError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeoError::InvalidNetwork(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let doc = NetworkDoc {
            origin: self.origin,
            lanes: self
                .lanes
                .iter()
                .map(|l| LaneDoc {
                    id: l.id.clone(),
                    points: l.points.iter().map(|p| [p.x, p.y]).collect(),
                    speed_limit: l.speed_limit,
                })
                .collect(),
            connections: self.connections.clone(),
        };
        serde_json::to_string(&doc).expect("network serialization")
    }

    /// Lanes ordered by id.
    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.index.get(id).map(|&i| &self.lanes[i])
    }

    /// First declared successor of a lane.
    pub fn successor(&self, id: &str) -> Option<&str> {
        self.connections.iter().find(|c| c.from == id).map(|c| c.to.as_str())
    }

    pub fn predecessors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.connections.iter().filter(move |c| c.to == id).map(|c| c.from.as_str())
    }

    pub fn is_loop(&self, id: &str) -> bool {
        self.successor(id) == Some(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct LaneProjection {
    pub lane_id: String,
    pub s: f64,
    pub lateral: f64,
    pub heading: f64,
}

/// Nearest point over all lanes. Ties go to the lexicographically smallest
/// lane id, then the smallest arc length.
pub fn project_to_lane(network: &RoadNetwork, lp: LocalPoint) -> Result<LaneProjection, GeoError> {
    let mut best: Option<LaneProjection> = None;
    for lane in network.lanes() {
        let (d, s, heading) = lane.closest(lp);
        if best.as_ref().is_none_or(|b| d < b.lateral) {
            best = Some(LaneProjection {
                lane_id: lane.id.clone(),
                s,
                lateral: d,
                heading,
            });
        }
    }
    best.ok_or(GeoError::EmptyNetwork)
}

pub fn project_batch(
    network: &RoadNetwork,
    points: &[LocalPoint],
    mode: ExecMode,
) -> Vec<Result<LaneProjection, GeoError>> {
    par::map(points, mode, |p| project_to_lane(network, *p))
}

pub fn lane_point(network: &RoadNetwork, lane_id: &str, s: f64) -> Result<(LocalPoint, f64), GeoError> {
    let lane = network
        .lane(lane_id)
        .ok_or_else(|| GeoError::UnknownLane(lane_id.to_string()))?;
    if !(0.0..=lane.length()).contains(&s) {
        return Err(GeoError::OutOfRange(format!("s = {s} outside [0, {}]", lane.length())));
    }
    Ok(lane.point_at(s))
}

/// Heading in `[0, 360)` mapped to the descriptor yaw range `[-180, 180)`.
pub fn heading_to_yaw(heading: f64) -> f64 {
    crate::model::normalize_yaw(heading)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight() -> RoadNetwork {
        RoadNetwork::new(
            GeoPosition::new(38.25, 21.73),
            vec![Lane::new("L1", vec![LocalPoint::new(0.0, 0.0), LocalPoint::new(100.0, 0.0)], 13.9).unwrap()],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn origin_maps_to_zero() {
        let o = GeoPosition::new(38.25, 21.73);
        assert_eq!(geo_to_local(o, o).unwrap(), LocalPoint::new(0.0, 0.0));
        assert_eq!(local_to_geo(o, LocalPoint::new(0.0, 0.0)).unwrap(), o);
    }

    #[test]
    fn thousandth_degree_closed_form() {
        // R * 0.001 * pi / 180
        let expected = 6_378_137.0 * 0.001 * std::f64::consts::PI / 180.0;
        let east = geo_to_local(GeoPosition::new(0.0, 0.0), GeoPosition::new(0.0, 0.001)).unwrap();
        assert!((east.x - 111.3194908).abs() < 1e-4 && (east.x - expected).abs() < 1e-9);
        assert_eq!(east.y, 0.0);
        let north = geo_to_local(GeoPosition::new(45.0, 10.0), GeoPosition::new(45.001, 10.0)).unwrap();
        assert_eq!(north.x, 0.0);
        assert!((north.y - 111.3194908).abs() < 1e-4);
    }

    #[test]
    fn round_trip_small_offset() {
        let o = GeoPosition::new(38.25, 21.73);
        let p = GeoPosition::new(38.26, 21.74);
        let back = local_to_geo(o, geo_to_local(o, p).unwrap()).unwrap();
        assert!((back.lat - p.lat).abs() < 1e-9 && (back.lon - p.lon).abs() < 1e-9);
    }

    #[test]
    fn range_checks() {
        let o = GeoPosition::new(38.25, 21.73);
        assert!(matches!(geo_to_local(o, GeoPosition::new(40.0, 21.73)), Err(GeoError::OutOfRange(_))));
        assert!(matches!(local_to_geo(o, LocalPoint::new(2e5, 0.0)), Err(GeoError::OutOfRange(_))));
    }

    #[test]
    fn perpendicular_projection() {
        let p = project_to_lane(&straight(), LocalPoint::new(50.0, 2.0)).unwrap();
        assert_eq!(p.lane_id, "L1");
        assert!((p.s - 50.0).abs() < 1e-12);
        assert!((p.lateral - 2.0).abs() < 1e-12);
        assert_eq!(p.heading, 90.0);
    }

    #[test]
    fn endpoint_clamp() {
        let p = project_to_lane(&straight(), LocalPoint::new(-10.0, 0.0)).unwrap();
        assert_eq!(p.s, 0.0);
        assert!((p.lateral - 10.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_of_parallel_lanes() {
        let net = RoadNetwork::new(
            GeoPosition::new(0.0, 0.0),
            vec![
                Lane::new("B", vec![LocalPoint::new(0.0, 10.0), LocalPoint::new(100.0, 10.0)], 10.0).unwrap(),
                Lane::new("A", vec![LocalPoint::new(0.0, 0.0), LocalPoint::new(100.0, 0.0)], 10.0).unwrap(),
            ],
            vec![],
        )
        .unwrap();
        assert_eq!(project_to_lane(&net, LocalPoint::new(50.0, 2.0)).unwrap().lane_id, "A");
        // equidistant: lexicographic tie break
        assert_eq!(project_to_lane(&net, LocalPoint::new(50.0, 5.0)).unwrap().lane_id, "A");
    }

    #[test]
    fn lane_point_basics() {
        let net = straight();
        assert_eq!(lane_point(&net, "L1", 0.0).unwrap().0, LocalPoint::new(0.0, 0.0));
        assert_eq!(lane_point(&net, "L1", 25.0).unwrap(), (LocalPoint::new(25.0, 0.0), 90.0));
        assert!(matches!(lane_point(&net, "nope", 0.0), Err(GeoError::UnknownLane(_))));
        assert!(matches!(lane_point(&net, "L1", 100.5), Err(GeoError::OutOfRange(_))));
    }

    #[test]
    fn empty_network() {
        let net = RoadNetwork::new(GeoPosition::new(0.0, 0.0), vec![], vec![]).unwrap();
        assert_eq!(project_to_lane(&net, LocalPoint::new(0.0, 0.0)), Err(GeoError::EmptyNetwork));
    }

    #[test]
    fn network_file_format() {
        let text = r#"{"origin":{"lat":38.25,"lon":21.73},"lanes":[{"id":"L1","points":[[0,0],[400,0]],"speedLimit":13.9}],"connections":[{"from":"L1","to":"L1"}]}"#;
        let net = RoadNetwork::from_json(text).unwrap();
        assert!(net.is_loop("L1"));
        assert_eq!(net.lane("L1").unwrap().length(), 400.0);
        assert_eq!(RoadNetwork::from_json(&net.to_json()).unwrap(), net);
        let dup = r#"{"origin":{"lat":0,"lon":0},"lanes":[{"id":"a","points":[[0,0],[0,0]],"speedLimit":1}]}"#;
        assert!(RoadNetwork::from_json(dup).is_err());
    }

    #[test]
    fn headings() {
        assert_eq!(heading_deg(0.0, 1.0), 0.0);
        assert_eq!(heading_deg(1.0, 0.0), 90.0);
        assert_eq!(heading_deg(0.0, -1.0), 180.0);
        assert_eq!(heading_deg(-1.0, 0.0), 270.0);
        assert_eq!(heading_to_yaw(270.0), -90.0);
    }
}
