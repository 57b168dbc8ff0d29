//! Synthetic multi-room recordings with RSSI, CSI, UWB and IMU streams.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{Anchor, AnchorKind, AnchorMap};
use crate::curation::csi::{default_null_subcarriers, signed_subcarrier, DEFAULT_SUBCARRIERS};
use crate::curation::io::{file_sha256, write_json, write_recording};
use crate::curation::{RawSample, Sensor, SensorLayout, UwbReading, IMU_DIM};
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const GRAVITY: f64 = 9.81;
pub const SIM_MANIFEST_VERSION: u32 = 1;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: Point,
    pub b: Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: Point,
    pub max: Point,
}

impl Room {
    pub fn contains(&self, p: Point) -> bool {
        (self.min[0]..=self.max[0]).contains(&p[0]) && (self.min[1]..=self.max[1]).contains(&p[1])
    }
}

/// Opening between two rooms; `normal` points from `rooms[0]` into `rooms[1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Door {
    pub rooms: [usize; 2],
    pub center: Point,
    pub normal: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Floorplan {
    pub width: f64,
    pub height: f64,
    pub walls: Vec<Wall>,
    pub rooms: Vec<Room>,
    pub doors: Vec<Door>,
    pub wifi_anchors: Vec<Point>,
    pub uwb_anchors: Vec<Point>,
}

impl Default for Floorplan {
    /// Four 4×4 m rooms. The lower-left room sees none of the UWB anchors,
    /// which all sit in the upper-right room.
    fn default() -> Self {
        let w = |a: Point, b: Point| Wall { a, b };
        let walls = vec![
            w([0.0, 0.0], [8.0, 0.0]),
            w([8.0, 0.0], [8.0, 8.0]),
            w([8.0, 8.0], [0.0, 8.0]),
            w([0.0, 8.0], [0.0, 0.0]),
            // x = 4, doors at y in [3.0, 3.8] and [7.0, 7.8]
            w([4.0, 0.0], [4.0, 3.0]),
            w([4.0, 3.8], [4.0, 7.0]),
            w([4.0, 7.8], [4.0, 8.0]),
            // y = 4, doors at x in [3.0, 3.8] and [7.0, 7.8]
            w([0.0, 4.0], [3.0, 4.0]),
            w([3.8, 4.0], [7.0, 4.0]),
            w([7.8, 4.0], [8.0, 4.0]),
        ];
        let room = |x: f64, y: f64| Room {
            min: [x, y],
            max: [x + 4.0, y + 4.0],
        };
        let rooms = vec![room(0.0, 0.0), room(4.0, 0.0), room(0.0, 4.0), room(4.0, 4.0)];
        let doors = vec![
            Door { rooms: [0, 1], center: [4.0, 3.4], normal: [1.0, 0.0] },
            Door { rooms: [0, 2], center: [3.4, 4.0], normal: [0.0, 1.0] },
            Door { rooms: [1, 3], center: [7.4, 4.0], normal: [0.0, 1.0] },
            Door { rooms: [2, 3], center: [4.0, 7.4], normal: [1.0, 0.0] },
        ];
        let wifi_anchors = vec![
            [0.3, 0.3],
            [3.7, 0.3],
            [0.3, 3.7],
            [4.3, 0.3],
            [7.7, 0.3],
            [7.7, 3.7],
            [0.3, 4.3],
            [3.7, 7.7],
            [0.3, 7.7],
            [6.0, 6.0],
            [5.0, 2.0],
        ];
        let uwb_anchors = vec![[7.5, 7.5], [4.5, 7.5], [7.5, 4.5]];
        Self {
            width: 8.0,
            height: 8.0,
            walls,
            rooms,
            doors,
            wifi_anchors,
            uwb_anchors,
        }
    }
}

impl Floorplan {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: &Point| {
            p.iter().all(|v| v.is_finite())
                && (0.0..=self.width).contains(&p[0])
                && (0.0..=self.height).contains(&p[1])
        };
        if let Some(p) = self.wifi_anchors.iter().chain(&self.uwb_anchors).find(|p| !inside(p)) {
            return Err(Error::Config(format!("anchor {p:?} lies outside the floorplan")));
        }
        if self.walls.iter().any(|w| !w.a.iter().chain(&w.b).all(|v| v.is_finite())) {
            return Err(Error::Config("wall with non-finite endpoint".into()));
        }
        if self.rooms.is_empty() {
            return Err(Error::Config("floorplan needs at least one room".into()));
        }
        for d in &self.doors {
            if d.rooms.iter().any(|&r| r >= self.rooms.len()) {
                return Err(Error::Config(format!("door at {:?} references a missing room", d.center)));
            }
        }
        Ok(())
    }

    pub fn room_of(&self, p: Point) -> Option<usize> {
        self.rooms.iter().position(|r| r.contains(p))
    }

    pub fn is_nlos(&self, p: Point, anchor: Point) -> bool {
        is_nlos(p, anchor, &self.walls)
    }

    pub fn anchor_map(&self) -> AnchorMap {
        let mut anchors = Vec::new();
        for (i, p) in self.wifi_anchors.iter().enumerate() {
            anchors.push(Anchor { id: format!("wifi{i}"), x: p[0], y: p[1], kind: AnchorKind::Wifi });
        }
        for (i, p) in self.uwb_anchors.iter().enumerate() {
            anchors.push(Anchor { id: format!("uwb{i}"), x: p[0], y: p[1], kind: AnchorKind::Uwb });
        }
        AnchorMap { anchors }
    }

    /// Room sequence from `from` to `to` (breadth-first over doors).
    fn route(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let mut prev = vec![usize::MAX; self.rooms.len()];
        let mut queue = VecDeque::from([from]);
        prev[from] = from;
        while let Some(r) = queue.pop_front() {
            if r == to {
                break;
            }
            for d in &self.doors {
                for (a, b) in [(d.rooms[0], d.rooms[1]), (d.rooms[1], d.rooms[0])] {
                    if a == r && prev[b] == usize::MAX {
                        prev[b] = r;
                        queue.push_back(b);
                    }
                }
            }
        }
        if prev[to] == usize::MAX {
            return None;
        }
        let mut path = vec![to];
        while *path.last().unwrap() != from {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        Some(path)
    }

    fn door_between(&self, a: usize, b: usize) -> Option<(Door, f64)> {
        self.doors.iter().find_map(|d| match d.rooms {
            [x, y] if x == a && y == b => Some((*d, 1.0)),
            [x, y] if x == b && y == a => Some((*d, -1.0)),
            _ => None,
        })
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection; touching and collinear overlap count.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Whether the straight path from `p` to `anchor` crosses or touches a wall.
pub fn is_nlos(p: Point, anchor: Point, walls: &[Wall]) -> bool {
    if p == anchor {
        return false;
    }
    walls.iter().any(|w| segments_intersect(p, anchor, w.a, w.b))
}

/// Constant-speed path sampled at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub waypoints: Vec<Point>,
    pub speed: f64,
    pub sample_rate: f64,
    pub positions: Vec<Point>,
    pub velocities: Vec<Point>,
    pub accelerations: Vec<Point>,
    /// Direction of travel (rad), unwrapped.
    pub headings: Vec<f64>,
}

impl Trajectory {
    pub fn from_waypoints(waypoints: Vec<Point>, speed: f64, sample_rate: f64, num_samples: usize) -> Result<Self> {
        if waypoints.is_empty() || !(speed > 0.0) || !(sample_rate > 0.0) {
            return Err(Error::Config("trajectory needs waypoints, speed > 0 and rate > 0".into()));
        }
        let dt = 1.0 / sample_rate;
        let mut cum = vec![0.0];
        for w in waypoints.windows(2) {
            cum.push(cum.last().unwrap() + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
        }
        let total = *cum.last().unwrap();
        let at = |s: f64| -> Point {
            let s = s.min(total);
            let k = cum.partition_point(|&c| c <= s).clamp(1, waypoints.len().max(2) - 1);
            if waypoints.len() == 1 {
                return waypoints[0];
            }
            let (a, b) = (waypoints[k - 1], waypoints[k]);
            let len = cum[k] - cum[k - 1];
            let f = if len > 0.0 { (s - cum[k - 1]) / len } else { 0.0 };
            [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
        };
        let positions: Vec<Point> = (0..num_samples).map(|i| at(i as f64 * dt * speed)).collect();
        let diff = |xs: &[Point]| -> Vec<Point> {
            let n = xs.len();
            (0..n)
                .map(|i| {
                    if n < 2 {
                        return [0.0, 0.0];
                    }
                    let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
                    let h = (hi - lo) as f64 * dt;
                    [(xs[hi][0] - xs[lo][0]) / h, (xs[hi][1] - xs[lo][1]) / h]
                })
                .collect()
        };
        let velocities = diff(&positions);
        let accelerations = diff(&velocities);
        let mut headings = Vec::with_capacity(num_samples);
        let mut last: f64 = 0.0;
        for v in &velocities {
            if v[0].hypot(v[1]) > 1e-9 {
                let raw = v[1].atan2(v[0]);
                let mut d = raw - last.rem_euclid(2.0 * PI);
                d = (d + PI).rem_euclid(2.0 * PI) - PI;
                last += if headings.is_empty() { raw - last } else { d };
            }
            headings.push(last);
        }
        Ok(Self {
            waypoints,
            speed,
            sample_rate,
            positions,
            velocities,
            accelerations,
            headings,
        })
    }

    /// Random room-to-room tour long enough for `num_samples` samples.
    pub fn random(plan: &Floorplan, speed: f64, sample_rate: f64, num_samples: usize, rng: &mut impl Rng) -> Result<Self> {
        const MARGIN: f64 = 0.3;
        const DOOR_OFFSET: f64 = 0.4;
        let needed = speed * num_samples as f64 / sample_rate + 1.0;
        let pick = |room: &Room, rng: &mut dyn rand::RngCore| -> Point {
            [
                rng.gen_range(room.min[0] + MARGIN..room.max[0] - MARGIN),
                rng.gen_range(room.min[1] + MARGIN..room.max[1] - MARGIN),
            ]
        };
        let mut room = rng.gen_range(0..plan.rooms.len());
        let mut waypoints = vec![pick(&plan.rooms[room], rng)];
        let push = |wps: &mut Vec<Point>, p: Point| {
            let q = wps.last().unwrap();
            let step = (p[0] - q[0]).hypot(p[1] - q[1]);
            wps.push(p);
            step
        };
        let mut length = 0.0;
        while length < needed {
            let target = rng.gen_range(0..plan.rooms.len());
            let route = plan
                .route(room, target)
                .ok_or_else(|| Error::Config(format!("room {target} is unreachable from room {room}")))?;
            for pair in route.windows(2) {
                let (door, sign) = plan.door_between(pair[0], pair[1]).expect("route follows doors");
                let n = [door.normal[0] * sign, door.normal[1] * sign];
                let c = door.center;
                length += push(&mut waypoints, [c[0] - DOOR_OFFSET * n[0], c[1] - DOOR_OFFSET * n[1]]);
                length += push(&mut waypoints, c);
                length += push(&mut waypoints, [c[0] + DOOR_OFFSET * n[0], c[1] + DOOR_OFFSET * n[1]]);
            }
            length += push(&mut waypoints, pick(&plan.rooms[target], rng));
            room = target;
        }
        Self::from_waypoints(waypoints, speed, sample_rate, num_samples)
    }
}

/// Noise and impairment magnitudes for every sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub rssi_shadowing_db: f64,
    pub rssi_nlos_penalty_db: f64,
    pub wifi_dropout: f64,
    pub csi_noise: f64,
    pub agc_gain_range: [f64; 2],
    pub uwb_range_std: f64,
    pub uwb_nlos_bias: f64,
    pub uwb_nlos_dropout: f64,
    pub uwb_power_std_db: f64,
    pub uwb_nlos_power_penalty_db: f64,
    pub accel_std: f64,
    pub accel_bias_std: f64,
    pub gyro_std: f64,
    pub gyro_bias_std: f64,
    pub mag_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            rssi_shadowing_db: 2.0,
            rssi_nlos_penalty_db: 8.0,
            wifi_dropout: 0.15,
            csi_noise: 0.01,
            agc_gain_range: [0.5, 2.0],
            uwb_range_std: 0.05,
            uwb_nlos_bias: 0.5,
            uwb_nlos_dropout: 0.5,
            uwb_power_std_db: 1.0,
            uwb_nlos_power_penalty_db: 10.0,
            accel_std: 0.05,
            accel_bias_std: 0.02,
            gyro_std: 0.01,
            gyro_bias_std: 0.005,
            mag_std: 0.5,
        }
    }
}

impl NoiseConfig {
    /// No random perturbation; deterministic NLOS penalties remain.
    pub fn zero() -> Self {
        Self {
            rssi_shadowing_db: 0.0,
            wifi_dropout: 0.0,
            csi_noise: 0.0,
            agc_gain_range: [1.0, 1.0],
            uwb_range_std: 0.0,
            uwb_nlos_dropout: 0.0,
            uwb_power_std_db: 0.0,
            accel_std: 0.0,
            accel_bias_std: 0.0,
            gyro_std: 0.0,
            gyro_bias_std: 0.0,
            mag_std: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let probs = [("wifi_dropout", self.wifi_dropout), ("uwb_nlos_dropout", self.uwb_nlos_dropout)];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("noise.{name} = {p} is not a probability")));
            }
        }
        let [lo, hi] = self.agc_gain_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("noise.agc_gain_range {:?} must satisfy 0 < lo <= hi", self.agc_gain_range)));
        }
        let stds = [
            self.rssi_shadowing_db,
            self.csi_noise,
            self.uwb_range_std,
            self.uwb_power_std_db,
            self.accel_std,
            self.accel_bias_std,
            self.gyro_std,
            self.gyro_bias_std,
            self.mag_std,
        ];
        if stds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("noise standard deviations must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub sample_rate_hz: f64,
    pub speed_mps: f64,
    /// Received power at 1 m (dBm).
    pub rssi_ref_dbm: f64,
    pub path_loss_exponent: f64,
    pub uwb_ref_power_dbm: f64,
    pub subcarriers: usize,
    pub subcarrier_spacing_hz: f64,
    pub null_subcarriers: Vec<usize>,
    /// Static magnetic field in the floor frame (µT).
    pub magnetic_field_ut: [f64; 3],
    /// Number of local magnetic disturbances and their peak strength (µT).
    pub magnetic_sources: usize,
    pub magnetic_anomaly_ut: f64,
    /// Replace every reading of this sensor with uninformative noise.
    pub replace_with_noise: Option<Sensor>,
    pub noise: NoiseConfig,
    pub floorplan: Floorplan,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_samples: 20_000,
            sample_rate_hz: 10.0,
            speed_mps: 0.5,
            rssi_ref_dbm: -40.0,
            path_loss_exponent: 2.0,
            uwb_ref_power_dbm: -50.0,
            subcarriers: DEFAULT_SUBCARRIERS,
            subcarrier_spacing_hz: 312.5e3,
            null_subcarriers: default_null_subcarriers(),
            magnetic_field_ut: [20.0, 5.0, -40.0],
            magnetic_sources: 12,
            magnetic_anomaly_ut: 15.0,
            replace_with_noise: None,
            noise: NoiseConfig::default(),
            floorplan: Floorplan::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.floorplan.validate()?;
        self.noise.validate()?;
        if !(self.sample_rate_hz > 0.0) || !(self.speed_mps > 0.0) {
            return Err(Error::Config("sample_rate_hz and speed_mps must be > 0".into()));
        }
        if !(self.path_loss_exponent > 0.0) {
            return Err(Error::Config("path_loss_exponent must be > 0".into()));
        }
        if self.subcarriers == 0 || self.null_subcarriers.iter().any(|&k| k >= self.subcarriers) {
            return Err(Error::Config("null_subcarriers must index into 0..subcarriers".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> SensorLayout {
        SensorLayout {
            wifi_anchors: self.floorplan.wifi_anchors.len(),
            uwb_anchors: self.floorplan.uwb_anchors.len(),
            subcarriers: self.subcarriers,
        }
    }

    /// Log-distance received power (dBm) with no shadowing.
    pub fn rssi_mean(&self, distance: f64, nlos: bool) -> f64 {
        self.rssi_ref_dbm - 10.0 * self.path_loss_exponent * distance.max(0.1).log10()
            - if nlos { self.noise.rssi_nlos_penalty_db } else { 0.0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Reflector {
    coeff: f64,
    image_axis: usize,
    image_at: f64,
}

#[derive(Clone, Copy, Debug)]
struct MagSource {
    center: Point,
    radius: f64,
    field: [f64; 3],
}

/// Fixed propagation environment drawn once per recording.
struct World {
    reflectors: Vec<[Reflector; 2]>,
    mag_sources: Vec<MagSource>,
    accel_bias: [f64; 3],
    gyro_bias: [f64; 3],
}

impl World {
    fn draw(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (cfg.floorplan.width, cfg.floorplan.height);
        let reflectors = cfg
            .floorplan
            .wifi_anchors
            .iter()
            .map(|_| {
                let mut r = || {
                    let axis = rng.gen_range(0..2);
                    let extent = if axis == 0 { w } else { h };
                    Reflector {
                        coeff: rng.gen_range(0.2..0.7),
                        image_axis: axis,
                        image_at: if rng.gen_bool(0.5) { 0.0 } else { extent },
                    }
                };
                [r(), r()]
            })
            .collect();
        let mag_sources = (0..cfg.magnetic_sources)
            .map(|_| {
                let mut dir: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-9);
                dir.iter_mut().for_each(|d| *d *= cfg.magnetic_anomaly_ut / n);
                MagSource {
                    center: [rng.gen_range(0.0..w), rng.gen_range(0.0..h)],
                    radius: rng.gen_range(0.8..2.0),
                    field: dir,
                }
            })
            .collect();
        let gauss = |rng: &mut ChaCha8Rng, s: f64| if s > 0.0 { Normal::new(0.0, s).unwrap().sample(rng) } else { 0.0 };
        let accel_bias = [gauss(rng, cfg.noise.accel_bias_std), gauss(rng, cfg.noise.accel_bias_std), gauss(rng, cfg.noise.accel_bias_std)];
        let gyro_bias = [gauss(rng, cfg.noise.gyro_bias_std), gauss(rng, cfg.noise.gyro_bias_std), gauss(rng, cfg.noise.gyro_bias_std)];
        Self {
            reflectors,
            mag_sources,
            accel_bias,
            gyro_bias,
        }
    }

    fn magnetic_field(&self, base: [f64; 3], p: Point) -> [f64; 3] {
        let mut b = base;
        for s in &self.mag_sources {
            let d2 = (p[0] - s.center[0]).powi(2) + (p[1] - s.center[1]).powi(2);
            let k = (-d2 / (2.0 * s.radius * s.radius)).exp();
            for i in 0..3 {
                b[i] += k * s.field[i];
            }
        }
        b
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

struct Gauss(Option<Normal<f64>>);

impl Gauss {
    fn new(std: f64) -> Self {
        Self((std > 0.0).then(|| Normal::new(0.0, std).unwrap()))
    }
    fn draw(&self, rng: &mut impl Rng) -> f64 {
        self.0.map_or(0.0, |n| n.sample(rng))
    }
}

/// Complex channel response of one capture in raw FFT-bin order.
fn csi_response(
    cfg: &SimConfig,
    p: Point,
    anchor: Point,
    reflectors: &[Reflector; 2],
    nlos: bool,
    gain: f64,
    phase: f64,
) -> Vec<Complex64> {
    let d = dist(p, anchor).max(0.1);
    let direct = if nlos { 10f64.powf(-cfg.noise.rssi_nlos_penalty_db / 20.0) } else { 1.0 } / d;
    let mut taps = vec![(direct, d)];
    for r in reflectors {
        let mut img = anchor;
        img[r.image_axis] = 2.0 * r.image_at - anchor[r.image_axis];
        let len = dist(p, img).max(0.1);
        taps.push((r.coeff / len, len));
    }
    (0..cfg.subcarriers)
        .map(|k| {
            if cfg.null_subcarriers.contains(&k) {
                return Complex64::new(0.0, 0.0);
            }
            let f = signed_subcarrier(k, cfg.subcarriers) as f64 * cfg.subcarrier_spacing_hz;
            let h: Complex64 = taps
                .iter()
                .map(|&(a, len)| Complex64::from_polar(a, -2.0 * PI * f * len / SPEED_OF_LIGHT))
                .sum();
            h * Complex64::from_polar(gain, phase)
        })
        .collect()
}

/// Samples every sensor along `traj`. Identical inputs give identical output.
pub fn gen_measurements(traj: &Trajectory, cfg: &SimConfig, seed: u64) -> Result<Vec<RawSample>> {
    cfg.validate()?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(seed);
    world_rng.set_stream(1);
    let world = World::draw(cfg, &mut world_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let n = &cfg.noise;
    let plan = &cfg.floorplan;
    let shadow = Gauss::new(n.rssi_shadowing_db);
    let uwb_noise = Gauss::new(n.uwb_range_std);
    let uwb_pow_noise = Gauss::new(n.uwb_power_std_db);
    let acc_noise = Gauss::new(n.accel_std);
    let gyro_noise = Gauss::new(n.gyro_std);
    let mag_noise = Gauss::new(n.mag_std);
    let unit = Gauss::new(1.0);
    let dt = 1.0 / traj.sample_rate;

    let mut out = Vec::with_capacity(traj.positions.len());
    for (i, &p) in traj.positions.iter().enumerate() {
        let mut rssi = Vec::with_capacity(plan.wifi_anchors.len());
        let mut csi = Vec::with_capacity(plan.wifi_anchors.len());
        for (a_idx, &a) in plan.wifi_anchors.iter().enumerate() {
            let nlos = plan.is_nlos(p, a);
            let dropped = n.wifi_dropout > 0.0 && rng.gen_bool(n.wifi_dropout);
            let r = cfg.rssi_mean(dist(p, a), nlos) + shadow.draw(&mut rng);
            let gain = if n.agc_gain_range[0] < n.agc_gain_range[1] {
                rng.gen_range(n.agc_gain_range[0]..=n.agc_gain_range[1])
            } else {
                n.agc_gain_range[0]
            };
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut h = csi_response(cfg, p, a, &world.reflectors[a_idx], nlos, gain, phase);
            if n.csi_noise > 0.0 {
                for (k, z) in h.iter_mut().enumerate() {
                    if !cfg.null_subcarriers.contains(&k) {
                        let scale = z.norm() * n.csi_noise;
                        *z += Complex64::new(scale * unit.draw(&mut rng), scale * unit.draw(&mut rng));
                    }
                }
            }
            if dropped {
                rssi.push(None);
                csi.push(None);
            } else {
                rssi.push(Some(r));
                csi.push(Some(h));
            }
        }

        let mut uwb = Vec::with_capacity(plan.uwb_anchors.len());
        for &a in &plan.uwb_anchors {
            let nlos = plan.is_nlos(p, a);
            let d = dist(p, a);
            let range = d + uwb_noise.draw(&mut rng) + if nlos { n.uwb_nlos_bias } else { 0.0 };
            let power = cfg.uwb_ref_power_dbm - 20.0 * d.max(0.1).log10()
                - if nlos { n.uwb_nlos_power_penalty_db } else { 0.0 }
                + uwb_pow_noise.draw(&mut rng);
            let dropped = nlos && n.uwb_nlos_dropout > 0.0 && rng.gen_bool(n.uwb_nlos_dropout);
            uwb.push((!dropped).then_some(UwbReading { range, power }));
        }

        let theta = traj.headings[i];
        let (s, c) = theta.sin_cos();
        let a = traj.accelerations[i];
        let acc_body = [c * a[0] + s * a[1], -s * a[0] + c * a[1], GRAVITY];
        let yaw_rate = if traj.headings.len() < 2 {
            0.0
        } else {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(traj.headings.len() - 1));
            (traj.headings[hi] - traj.headings[lo]) / ((hi - lo) as f64 * dt)
        };
        let b = world.magnetic_field(cfg.magnetic_field_ut, p);
        let mag_body = [c * b[0] + s * b[1], -s * b[0] + c * b[1], b[2]];
        let mut imu = [0.0; IMU_DIM];
        for k in 0..3 {
            imu[k] = acc_body[k] + world.accel_bias[k] + acc_noise.draw(&mut rng);
        }
        let gyro = [0.0, 0.0, yaw_rate];
        for k in 0..3 {
            imu[3 + k] = gyro[k] + world.gyro_bias[k] + gyro_noise.draw(&mut rng);
        }
        for k in 0..3 {
            imu[6 + k] = mag_body[k] + mag_noise.draw(&mut rng);
        }

        let mut sample = RawSample {
            timestamp: i as f64 * dt,
            position: p,
            rssi,
            csi,
            uwb,
            imu,
        };
        if let Some(sensor) = cfg.replace_with_noise {
            scramble(&mut sample, sensor, cfg, &mut rng);
        }
        out.push(sample);
    }
    Ok(out)
}

/// Overwrites one sensor with readings that carry no position information.
fn scramble(s: &mut RawSample, sensor: Sensor, cfg: &SimConfig, rng: &mut impl Rng) {
    let diag = cfg.floorplan.width.hypot(cfg.floorplan.height);
    match sensor {
        Sensor::Rssi => {
            for r in &mut s.rssi {
                *r = Some(rng.gen_range(cfg.rssi_mean(diag, true)..cfg.rssi_ref_dbm));
            }
        }
        Sensor::Csi => {
            for c in &mut s.csi {
                *c = Some(
                    (0..cfg.subcarriers)
                        .map(|k| {
                            if cfg.null_subcarriers.contains(&k) {
                                Complex64::new(0.0, 0.0)
                            } else {
                                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                            }
                        })
                        .collect(),
                );
            }
        }
        Sensor::Uwb => {
            for u in &mut s.uwb {
                *u = Some(UwbReading {
                    range: rng.gen_range(0.0..diag),
                    power: rng.gen_range(cfg.uwb_ref_power_dbm - 30.0..cfg.uwb_ref_power_dbm),
                });
            }
        }
        Sensor::Imu => {
            for v in &mut s.imu {
                *v = rng.gen_range(-10.0..10.0);
            }
        }
    }
}

/// Provenance written next to every recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub format_version: u32,
    pub seed: u64,
    pub num_samples: usize,
    pub layout: SensorLayout,
    pub config: SimConfig,
    pub recording_sha256: String,
}

/// Trajectory plus measurements for `cfg`.
pub fn simulate(cfg: &SimConfig) -> Result<Vec<RawSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let traj = Trajectory::random(&cfg.floorplan, cfg.speed_mps, cfg.sample_rate_hz, cfg.num_samples, &mut rng)?;
    gen_measurements(&traj, cfg, cfg.seed)
}

pub fn manifest_path(recording: &Path) -> std::path::PathBuf {
    recording.with_extension("manifest.json")
}

/// Writes the recording CSV and its manifest; returns the manifest.
pub fn write_dataset(samples: &[RawSample], cfg: &SimConfig, path: &Path) -> Result<SimManifest> {
    let layout = cfg.layout();
    write_recording(path, &layout, samples)?;
    let manifest = SimManifest {
        format_version: SIM_MANIFEST_VERSION,
        seed: cfg.seed,
        num_samples: samples.len(),
        layout,
        config: cfg.clone(),
        recording_sha256: file_sha256(path)?,
    };
    write_json(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::io::read_recording;

    fn small(n: usize) -> SimConfig {
        SimConfig {
            num_samples: n,
            ..SimConfig::default()
        }
    }

    #[test]
    fn nlos_examples() {
        assert!(!is_nlos([0.0, 0.0], [5.0, 5.0], &[]));
        let wall = [Wall { a: [2.0, -1.0], b: [2.0, 1.0] }];
        assert!(is_nlos([0.0, 0.0], [4.0, 0.0], &wall));
        assert!(!is_nlos([0.0, 2.0], [4.0, 2.0], &wall));
        assert!(!is_nlos([2.0, 0.0], [2.0, 0.0], &wall));
        // touching an endpoint, and collinear overlap
        assert!(is_nlos([0.0, 1.0], [4.0, 1.0], &wall));
        assert!(is_nlos([2.0, -3.0], [2.0, 3.0], &wall));
    }

    #[test]
    fn lower_left_room_is_blind_to_uwb() {
        let plan = Floorplan::default();
        for i in 1..80 {
            for j in 1..80 {
                let p = [i as f64 * 0.05, j as f64 * 0.05];
                for &a in &plan.uwb_anchors {
                    assert!(plan.is_nlos(p, a), "{p:?} sees {a:?}");
                }
            }
        }
        let ur = [6.0, 6.0];
        assert!(plan.uwb_anchors.iter().all(|&a| !plan.is_nlos(ur, a)));
    }

    #[test]
    fn rssi_decade_is_twenty_db() {
        let cfg = SimConfig::default();
        assert!((cfg.rssi_mean(1.0, false) - cfg.rssi_mean(10.0, false) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_uwb_at_anchor_is_zero() {
        let mut cfg = small(1);
        cfg.noise = NoiseConfig::zero();
        let a = cfg.floorplan.uwb_anchors[0];
        let traj = Trajectory::from_waypoints(vec![a], 0.5, 10.0, 1).unwrap();
        let s = gen_measurements(&traj, &cfg, 3).unwrap();
        assert!(s[0].uwb[0].unwrap().range.abs() < 1e-9);
    }

    #[test]
    fn kinematics_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = Floorplan::default();
        let t = Trajectory::random(&plan, 0.5, 10.0, 500, &mut rng).unwrap();
        assert_eq!(t.positions.len(), 500);
        for w in t.positions.windows(2) {
            assert!(dist(w[0], w[1]) <= 0.05 + 1e-12);
            assert!(plan.room_of(w[0]).is_some());
        }
        for i in 1..499 {
            let fd = [(t.positions[i + 1][0] - t.positions[i - 1][0]) * 5.0, (t.positions[i + 1][1] - t.positions[i - 1][1]) * 5.0];
            assert!((fd[0] - t.velocities[i][0]).abs() < 1e-12 && (fd[1] - t.velocities[i][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn walls_never_crossed_between_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = Floorplan::default();
        let t = Trajectory::random(&plan, 0.5, 10.0, 2000, &mut rng).unwrap();
        let inner = &plan.walls[4..];
        for w in t.positions.windows(2) {
            if w[0] != w[1] {
                assert!(!inner.iter().any(|wall| segments_intersect(w[0], w[1], wall.a, wall.b)));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small(50);
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        let other = SimConfig { seed: 1, ..cfg.clone() };
        assert_ne!(simulate(&cfg).unwrap(), simulate(&other).unwrap());
    }

    #[test]
    fn labels_equal_trajectory() {
        let cfg = small(100);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let traj = Trajectory::random(&cfg.floorplan, cfg.speed_mps, cfg.sample_rate_hz, 100, &mut rng).unwrap();
        let s = simulate(&cfg).unwrap();
        for (a, b) in s.iter().zip(&traj.positions) {
            assert_eq!(a.position, *b);
        }
    }

    #[test]
    fn nlos_uwb_error_exceeds_los() {
        let cfg = small(3000);
        let samples = simulate(&cfg).unwrap();
        let (mut los, mut nlos) = (vec![], vec![]);
        for s in &samples {
            for (u, &a) in s.uwb.iter().zip(&cfg.floorplan.uwb_anchors) {
                if let Some(u) = u {
                    let e = (u.range - dist(s.position, a)).abs();
                    if cfg.floorplan.is_nlos(s.position, a) { nlos.push(e) } else { los.push(e) }
                }
            }
        }
        assert!(los.len() > 1000 && nlos.len() > 1000);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&nlos) > mean(&los));
    }

    #[test]
    fn write_read_round_trip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        let cfg = small(40);
        let samples = simulate(&cfg).unwrap();
        assert!(samples.iter().any(|s| s.uwb.iter().any(Option::is_none)));
        let m = write_dataset(&samples, &cfg, &path).unwrap();
        assert_eq!(m.seed, cfg.seed);
        let (layout, back) = read_recording(&path).unwrap();
        assert_eq!(layout, cfg.layout());
        assert_eq!(back, samples);
        let text = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(text.contains("\"seed\"") && text.contains("uwb_range_std"));
    }

    #[test]
    fn replacement_noise_ignores_position() {
        let cfg = SimConfig {
            num_samples: 20,
            replace_with_noise: Some(Sensor::Uwb),
            ..SimConfig::default()
        };
        let s = simulate(&cfg).unwrap();
        assert!(s.iter().all(|x| x.uwb.iter().all(Option::is_some)));
    }
}
