//! The occluded-intersection world: road layout, designed vehicle roles,
//! background traffic and straight-line mobility.
//!
//! Layout (world frame, meters, intersection center at the origin):
//!
//! * a 5-lane vertical road: lanes 0–1 southbound, lane 2 the northbound
//!   left-turn lane, lanes 3–4 northbound;
//! * a 4-lane horizontal road: lanes 5–6 eastbound, lanes 7–8 westbound;
//! * four corner building blocks filling the map outside the sidewalks.
//!
//! The ego drives north in lane 3. The sharing node waits at the stop line of
//! lane 1 with a clear view down the horizontal road, where the collision
//! vehicle approaches from the west timed to meet the ego. Tall blocking
//! vehicles creep north in the turning lane between the two. Lanes 1 and 2
//! carry no background traffic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AntennaPoint, Footprint, Point2, Vec2};

/// Random stream reserved for background spawning.
pub const SPAWN_STREAM: u64 = 1;

const SIDEWALK: f64 = 4.0;
const STOP_LINE_GAP: f64 = 2.0;
const QUEUE_GAP: f64 = 2.0;
const SPAWN_CLEARANCE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ego,
    Collision,
    SharingNode,
    Blocking,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Sedan,
    Suv,
    Bus,
    Truck,
}

impl VehicleClass {
    /// (length, width, height, antenna height) in meters.
    pub fn dimensions(self) -> (f64, f64, f64, f64) {
        match self {
            VehicleClass::Sedan => (4.6, 1.8, 1.45, 1.6),
            VehicleClass::Suv => (4.9, 1.9, 1.75, 1.9),
            VehicleClass::Bus => (12.0, 2.5, 3.0, 2.5),
            VehicleClass::Truck => (10.0, 2.5, 4.0, 2.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub role: Role,
    pub class: VehicleClass,
    pub position: Point2,
    pub velocity: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub antenna_height: f64,
    pub v2x_enabled: bool,
    /// Lane the vehicle follows, if any.
    pub lane: Option<usize>,
}

impl VehicleState {
    pub fn footprint(&self) -> Footprint {
        Footprint::oriented_box(self.position, self.heading, self.length, self.width, self.height)
            .expect("vehicle dimensions are validated at construction")
    }

    pub fn antenna(&self) -> AntennaPoint {
        AntennaPoint::new(self.position, self.antenna_height)
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub footprint: Footprint,
    pub walls_per_crossing: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Road {
    Vertical,
    Horizontal,
}

/// A straight lane centerline crossing the whole map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub index: usize,
    pub road: Road,
    /// Unit travel direction.
    pub direction: Vec2,
    /// Upstream end of the centerline on the map boundary.
    pub entry: Point2,
    pub length: f64,
    /// Cruise speed of background traffic, m/s.
    pub speed: f64,
    /// Whether background traffic is generated on this lane.
    pub spawns: bool,
}

impl Lane {
    /// Distance travelled along the lane from its entry.
    pub fn along(&self, p: Point2) -> f64 {
        (p - self.entry).dot(self.direction)
    }

    pub fn heading(&self) -> f64 {
        self.direction.y.atan2(self.direction.x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Mean along-lane spacing of background vehicles (meters per vehicle per lane).
    #[serde(alias = "spawn_spacing_N")]
    pub spawn_spacing_n: f64,
    /// km/h
    pub ego_target_speed: f64,
    /// seconds
    pub duration: f64,
    pub seed: u64,
    pub lane_width: f64,
    pub blocking_vehicle_heights: Vec<f64>,
    /// km/h, background traffic on every lane except the ego's.
    pub background_speed: f64,
    /// Share of background vehicles that are buses or trucks.
    pub heavy_fraction: f64,
    /// Share of background vehicles that are SUVs/MPVs.
    pub suv_fraction: f64,
    /// m/s, speed of the blocking platoon in the turning lane.
    pub blocking_speed: f64,
    /// Distance from the stop line back to the platoon head at t = 0.
    pub blocking_head_offset: f64,
    /// Distance from the intersection center to the ego at t = 0.
    pub ego_start_distance: f64,
    /// Half side of the square map.
    pub map_half_extent: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            spawn_spacing_n: 50.0,
            ego_target_speed: 30.0,
            duration: 20.0,
            seed: 1,
            lane_width: 3.5,
            blocking_vehicle_heights: vec![3.0, 4.0],
            background_speed: 30.0,
            heavy_fraction: 0.1,
            suv_fraction: 0.25,
            blocking_speed: 4.17,
            blocking_head_offset: 50.0,
            ego_start_distance: 150.0,
            map_half_extent: 250.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::InvalidConfig(msg));
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.spawn_spacing_n) {
            return bad(format!("spawn_spacing_n must be > 0, got {}", self.spawn_spacing_n));
        }
        if !finite_pos(self.duration) {
            return bad(format!("duration must be > 0, got {}", self.duration));
        }
        if !finite_pos(self.ego_target_speed) {
            return bad(format!("ego_target_speed must be > 0, got {}", self.ego_target_speed));
        }
        if !finite_pos(self.background_speed) {
            return bad(format!("background_speed must be > 0, got {}", self.background_speed));
        }
        if !finite_pos(self.lane_width) {
            return bad(format!("lane_width must be > 0, got {}", self.lane_width));
        }
        if !(self.blocking_speed.is_finite() && self.blocking_speed >= 0.0) {
            return bad(format!("blocking_speed must be >= 0, got {}", self.blocking_speed));
        }
        if !(self.blocking_head_offset.is_finite() && self.blocking_head_offset >= 0.0) {
            return bad("blocking_head_offset must be >= 0".into());
        }
        if let Some(h) = self.blocking_vehicle_heights.iter().find(|h| !finite_pos(**h)) {
            return bad(format!("blocking vehicle height must be > 0, got {h}"));
        }
        let fractions_ok = (0.0..=1.0).contains(&self.heavy_fraction)
            && (0.0..=1.0).contains(&self.suv_fraction)
            && self.heavy_fraction + self.suv_fraction <= 1.0;
        if !fractions_ok {
            return bad("heavy_fraction and suv_fraction must be in [0,1] and sum to <= 1".into());
        }
        let inner = 2.5 * self.lane_width + SIDEWALK;
        if !(self.map_half_extent.is_finite() && self.map_half_extent > inner + 10.0) {
            return bad(format!("map_half_extent must exceed {}", inner + 10.0));
        }
        if !(self.ego_start_distance > 2.0 * self.lane_width
            && self.ego_start_distance < self.map_half_extent)
        {
            return bad("ego_start_distance must lie between the road edge and the map edge".into());
        }
        Ok(())
    }

    pub fn ego_speed_mps(&self) -> f64 {
        self.ego_target_speed / 3.6
    }

    pub fn background_speed_mps(&self) -> f64 {
        self.background_speed / 3.6
    }
}

/// Ego lane, sharing-node lane, turning lane and collision lane indices.
pub const EGO_LANE: usize = 3;
pub const SHARING_LANE: usize = 1;
pub const TURNING_LANE: usize = 2;
pub const COLLISION_LANE: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SpawnState {
    rng: ChaCha8Rng,
    next_id: u32,
    /// Per lane: distance the lane still has to advance before the next entry spawn.
    gap_remaining: Vec<f64>,
    mean_spacing: f64,
    heavy_fraction: f64,
    suv_fraction: f64,
}

/// Immutable snapshot of the simulated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub clock: f64,
    pub vehicles: Vec<VehicleState>,
    pub buildings: Vec<Building>,
    pub lanes: Vec<Lane>,
    spawn: SpawnState,
}

impl WorldState {
    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &VehicleState> {
        self.vehicles.iter().filter(move |v| v.role == role)
    }

    /// The unique vehicle carrying `role` (ego, collision, sharing node).
    pub fn single(&self, role: Role) -> &VehicleState {
        self.with_role(role)
            .next()
            .unwrap_or_else(|| panic!("world has no {role:?} vehicle"))
    }

    /// Build a world from explicit parts, without background spawning.
    /// Intended for unit tests and hand-made geometries.
    pub fn from_parts(vehicles: Vec<VehicleState>, buildings: Vec<Building>) -> Self {
        let next_id = vehicles.iter().map(|v| v.id.0 + 1).max().unwrap_or(0);
        Self {
            clock: 0.0,
            vehicles,
            buildings,
            lanes: Vec::new(),
            spawn: SpawnState {
                rng: ChaCha8Rng::seed_from_u64(0),
                next_id,
                gap_remaining: Vec::new(),
                mean_spacing: f64::INFINITY,
                heavy_fraction: 0.0,
                suv_fraction: 0.0,
            },
        }
    }
}

/// Builds a stationary or moving vehicle of a given class.
pub fn make_vehicle(
    id: VehicleId,
    role: Role,
    class: VehicleClass,
    position: Point2,
    heading: f64,
    speed: f64,
) -> VehicleState {
    let (length, width, height, antenna_height) = class.dimensions();
    VehicleState {
        id,
        role,
        class,
        position,
        velocity: Vec2::from_heading(heading) * speed,
        heading,
        length,
        width,
        height,
        antenna_height,
        v2x_enabled: matches!(role, Role::Ego | Role::SharingNode | Role::Background),
        lane: None,
    }
}

fn build_lanes(cfg: &ScenarioConfig) -> Vec<Lane> {
    let w = cfg.lane_width;
    let half = cfg.map_half_extent;
    let bg = cfg.background_speed_mps();
    let mut lanes = Vec::with_capacity(9);
    for i in 0..5 {
        let x = -2.5 * w + (i as f64 + 0.5) * w;
        let south = i < 2;
        let (direction, entry) = if south {
            (Vec2::new(0.0, -1.0), Point2::new(x, half))
        } else {
            (Vec2::new(0.0, 1.0), Point2::new(x, -half))
        };
        lanes.push(Lane {
            index: i,
            road: Road::Vertical,
            direction,
            entry,
            length: 2.0 * half,
            speed: if i == EGO_LANE { cfg.ego_speed_mps() } else { bg },
            spawns: i != TURNING_LANE && i != SHARING_LANE,
        });
    }
    for j in 0..4 {
        let y = -2.0 * w + (j as f64 + 0.5) * w;
        let east = j < 2;
        let (direction, entry) = if east {
            (Vec2::new(1.0, 0.0), Point2::new(-half, y))
        } else {
            (Vec2::new(-1.0, 0.0), Point2::new(half, y))
        };
        lanes.push(Lane {
            index: 5 + j,
            road: Road::Horizontal,
            direction,
            entry,
            length: 2.0 * half,
            speed: bg,
            spawns: true,
        });
    }
    lanes
}

fn build_buildings(cfg: &ScenarioConfig) -> Vec<Building> {
    let w = cfg.lane_width;
    let x0 = 2.5 * w + SIDEWALK;
    let y0 = 2.0 * w + SIDEWALK;
    let outer = cfg.map_half_extent - 5.0;
    // Heights per quadrant: NE, NW, SW, SE.
    let blocks = [
        (1.0, 1.0, 18.0),
        (-1.0, 1.0, 24.0),
        (-1.0, -1.0, 15.0),
        (1.0, -1.0, 21.0),
    ];
    blocks
        .iter()
        .map(|&(sx, sy, h)| {
            let (ax, bx) = (sx * x0, sx * outer);
            let (ay, by) = (sy * y0, sy * outer);
            Building {
                footprint: Footprint::axis_aligned(
                    Point2::new(ax.min(bx), ay.min(by)),
                    Point2::new(ax.max(bx), ay.max(by)),
                    h,
                )
                .expect("building blocks are well-formed"),
                walls_per_crossing: 1,
            }
        })
        .collect()
}

fn draw_class(rng: &mut ChaCha8Rng, heavy: f64, suv: f64) -> VehicleClass {
    let u: f64 = rng.random();
    if u < heavy / 2.0 {
        VehicleClass::Bus
    } else if u < heavy {
        VehicleClass::Truck
    } else if u < heavy + suv {
        VehicleClass::Suv
    } else {
        VehicleClass::Sedan
    }
}

/// Spacing between consecutive background vehicles: a minimum headway plus an
/// exponential remainder, so the mean spacing is exactly `mean`.
fn draw_gap(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let min_gap = (0.5 * mean).min(14.0);
    let rest = mean - min_gap;
    if rest <= 0.0 {
        return mean;
    }
    min_gap + Exp::new(1.0 / rest).expect("positive rate").sample(rng)
}

fn spawn_on_lane(
    spawn: &mut SpawnState,
    lane: &Lane,
    along: f64,
) -> VehicleState {
    let class = draw_class(&mut spawn.rng, spawn.heavy_fraction, spawn.suv_fraction);
    let id = VehicleId(spawn.next_id);
    spawn.next_id += 1;
    let position = lane.entry + lane.direction * along;
    let mut v = make_vehicle(id, Role::Background, class, position, lane.heading(), lane.speed);
    v.lane = Some(lane.index);
    v
}

/// Generate the designed intersection scenario.
pub fn generate_intersection(cfg: &ScenarioConfig) -> Result<WorldState, ScenarioError> {
    cfg.validate()?;
    let lanes = build_lanes(cfg);
    let buildings = build_buildings(cfg);
    let w = cfg.lane_width;
    let north = std::f64::consts::FRAC_PI_2;
    let mut vehicles = Vec::new();

    // Ego: northbound next to the turning lane.
    let ego_lane = &lanes[EGO_LANE];
    let ego_speed = cfg.ego_speed_mps();
    let mut ego = make_vehicle(
        VehicleId(0),
        Role::Ego,
        VehicleClass::Sedan,
        Point2::new(ego_lane.entry.x, -cfg.ego_start_distance),
        north,
        ego_speed,
    );
    ego.antenna_height = 1.5;
    ego.lane = Some(EGO_LANE);

    // Collision vehicle: eastbound, reaches the ego's lane when the ego reaches its lane.
    let col_lane = &lanes[COLLISION_LANE];
    let col_y = col_lane.entry.y;
    let t_meet = (col_y - ego.position.y) / ego_speed;
    let col_speed = col_lane.speed;
    let mut collision = make_vehicle(
        VehicleId(1),
        Role::Collision,
        VehicleClass::Sedan,
        Point2::new(ego.position.x - col_speed * t_meet, col_y),
        0.0,
        col_speed,
    );
    collision.lane = Some(COLLISION_LANE);

    // Sharing node: stopped at the southbound stop line across the turning lane.
    let (share_len, ..) = VehicleClass::Sedan.dimensions();
    let share_lane = &lanes[SHARING_LANE];
    let mut sharing = make_vehicle(
        VehicleId(2),
        Role::SharingNode,
        VehicleClass::Sedan,
        Point2::new(share_lane.entry.x, 2.0 * w + STOP_LINE_GAP + share_len / 2.0),
        -north,
        0.0,
    );
    sharing.lane = Some(SHARING_LANE);

    vehicles.extend([ego, collision, sharing]);

    // Blocking platoon in the turning lane, starting `blocking_head_offset`
    // behind the stop line. At half the ego speed it stays near the midpoint
    // of the ego to sharing-node sight line.
    let turn_x = lanes[TURNING_LANE].entry.x;
    let mut front = -2.0 * w - STOP_LINE_GAP - cfg.blocking_head_offset;
    for (k, &h) in cfg.blocking_vehicle_heights.iter().enumerate() {
        let class = if h >= 3.5 { VehicleClass::Truck } else { VehicleClass::Bus };
        let (len, ..) = class.dimensions();
        let mut b = make_vehicle(
            VehicleId(3 + k as u32),
            Role::Blocking,
            class,
            Point2::new(turn_x, front - len / 2.0),
            north,
            cfg.blocking_speed,
        );
        b.height = h;
        b.antenna_height = b.antenna_height.min(h);
        b.lane = Some(TURNING_LANE);
        vehicles.push(b);
        front -= len + QUEUE_GAP;
    }

    let mut spawn = SpawnState {
        rng: {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(SPAWN_STREAM);
            r
        },
        next_id: 3 + cfg.blocking_vehicle_heights.len() as u32,
        gap_remaining: vec![0.0; lanes.len()],
        mean_spacing: cfg.spawn_spacing_n,
        heavy_fraction: cfg.heavy_fraction,
        suv_fraction: cfg.suv_fraction,
    };

    // Background: renewal process walked upstream from each lane's exit.
    let designed: Vec<Footprint> = vehicles.iter().map(|v| v.footprint()).collect();
    for lane in lanes.iter().filter(|l| l.spawns) {
        let first: f64 = spawn.rng.random::<f64>() * draw_gap(&mut spawn.rng, cfg.spawn_spacing_n);
        let mut from_exit = first;
        while from_exit <= lane.length {
            let v = spawn_on_lane(&mut spawn, lane, lane.length - from_exit);
            let fp = v.footprint();
            let clear = designed.iter().all(|d| {
                let inflated = Footprint::oriented_box(
                    v.position,
                    v.heading,
                    v.length + 2.0 * SPAWN_CLEARANCE,
                    v.width + 2.0 * SPAWN_CLEARANCE,
                    v.height,
                )
                .unwrap_or(fp.clone());
                !inflated.overlaps(d)
            });
            if clear {
                vehicles.push(v);
            }
            from_exit += draw_gap(&mut spawn.rng, cfg.spawn_spacing_n);
        }
        spawn.gap_remaining[lane.index] = from_exit - lane.length;
    }

    Ok(WorldState {
        clock: 0.0,
        vehicles,
        buildings,
        lanes,
        spawn,
    })
}

/// Advance every vehicle along its heading at constant velocity, retire
/// background vehicles that leave the map and spawn newcomers at lane entries.
pub fn step_mobility(world: &WorldState, dt: f64) -> Result<WorldState, ScenarioError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ScenarioError::NonPositiveStep(dt));
    }
    let mut next = world.clone();
    next.clock = world.clock + dt;
    let lanes = &next.lanes;
    for v in &mut next.vehicles {
        v.position = v.position + v.velocity * dt;
    }
    next.vehicles.retain(|v| {
        if v.role != Role::Background {
            return true;
        }
        match v.lane {
            Some(l) => lanes[l].along(v.position) <= lanes[l].length,
            None => true,
        }
    });
    for lane in lanes.iter().filter(|l| l.spawns) {
        let i = lane.index;
        next.spawn.gap_remaining[i] -= lane.speed * dt;
        while next.spawn.gap_remaining[i] <= 0.0 {
            let along = -next.spawn.gap_remaining[i];
            let v = spawn_on_lane(&mut next.spawn, lane, along);
            next.vehicles.push(v);
            let g = draw_gap(&mut next.spawn.rng, next.spawn.mean_spacing);
            next.spawn.gap_remaining[i] += g;
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    #[test]
    fn role_census() {
        let w = generate_intersection(&cfg()).unwrap();
        assert_eq!(w.with_role(Role::Ego).count(), 1);
        assert_eq!(w.with_role(Role::Collision).count(), 1);
        assert_eq!(w.with_role(Role::SharingNode).count(), 1);
        assert_eq!(w.with_role(Role::Blocking).count(), 2);
        assert!(w.with_role(Role::Background).all(|v| v.v2x_enabled));
        let mut ids: Vec<_> = w.vehicles.iter().map(|v| v.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), w.vehicles.len());
    }

    #[test]
    fn blocking_heights_follow_config() {
        let w = generate_intersection(&cfg()).unwrap();
        let hs: Vec<f64> = w.with_role(Role::Blocking).map(|v| v.height).collect();
        assert_eq!(hs, vec![3.0, 4.0]);
    }

    #[test]
    fn ego_is_a_sedan_with_low_antenna() {
        let w = generate_intersection(&cfg()).unwrap();
        let ego = w.single(Role::Ego);
        assert_eq!(ego.class, VehicleClass::Sedan);
        assert_eq!(ego.antenna_height, 1.5);
        assert!((ego.speed() - 30.0 / 3.6).abs() < 1e-12);
    }

    #[test]
    fn vehicle_invariants_hold() {
        let w = generate_intersection(&cfg()).unwrap();
        for v in &w.vehicles {
            assert!(v.height > 0.0);
            assert!(v.antenna_height <= v.height + 0.5, "{v:?}");
        }
        for b in &w.buildings {
            assert!(b.footprint.height() >= 3.0);
        }
    }

    #[test]
    fn collision_vehicle_meets_ego() {
        let c = cfg();
        let w = generate_intersection(&c).unwrap();
        let ego = w.single(Role::Ego);
        let col = w.single(Role::Collision);
        let t_ego = (col.position.y - ego.position.y) / ego.velocity.y;
        let t_col = (ego.position.x - col.position.x) / col.velocity.x;
        assert!((t_ego - t_col).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_intersection(&cfg()).unwrap();
        let b = generate_intersection(&cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_intersection(&ScenarioConfig { seed: 2, ..cfg() }).unwrap();
        assert_ne!(a.vehicles, c.vehicles);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            ScenarioConfig { spawn_spacing_n: 0.0, ..cfg() },
            ScenarioConfig { spawn_spacing_n: -5.0, ..cfg() },
            ScenarioConfig { duration: 0.0, ..cfg() },
            ScenarioConfig { heavy_fraction: 0.9, suv_fraction: 0.5, ..cfg() },
        ] {
            assert!(matches!(generate_intersection(&bad), Err(ScenarioError::InvalidConfig(_))));
        }
    }

    #[test]
    fn kinematics_step() {
        let v = make_vehicle(VehicleId(0), Role::Background, VehicleClass::Sedan, Point2::ORIGIN, 0.0, 10.0);
        let w = WorldState::from_parts(vec![v], vec![]);
        let n = step_mobility(&w, 0.1).unwrap();
        assert!((n.vehicles[0].position.x - 1.0).abs() < 1e-12);
        assert!(n.vehicles[0].position.y.abs() < 1e-12);
        assert!((n.clock - 0.1).abs() < 1e-15);
        assert_eq!(step_mobility(&w, 0.0), Err(ScenarioError::NonPositiveStep(0.0)));
    }

    #[test]
    fn two_half_steps_equal_one_step() {
        let w = generate_intersection(&cfg()).unwrap();
        let one = step_mobility(&w, 0.1).unwrap();
        let two = step_mobility(&step_mobility(&w, 0.05).unwrap(), 0.05).unwrap();
        for (a, b) in one.vehicles.iter().zip(&two.vehicles).filter(|(a, _)| a.role != Role::Background) {
            assert_eq!(a.id, b.id);
            assert!(a.position.distance(b.position) < 1e-9);
        }
        let ego1 = one.single(Role::Ego).position;
        let ego2 = two.single(Role::Ego).position;
        assert!(ego1.distance(ego2) < 1e-9);
    }

    #[test]
    fn background_density_tracks_spacing() {
        // 1 km lanes at N = 50 m -> about 20 vehicles per lane.
        let mut total = 0usize;
        let mut lanes = 0usize;
        for seed in 0..40 {
            let c = ScenarioConfig {
                seed,
                map_half_extent: 500.0,
                ego_start_distance: 150.0,
                ..cfg()
            };
            let w = generate_intersection(&c).unwrap();
            // Horizontal lanes carry no designed vehicles except the collision lane.
            for lane in [5usize, 7, 8] {
                total += w.vehicles.iter().filter(|v| v.lane == Some(lane)).count();
                lanes += 1;
            }
        }
        let per_lane = total as f64 / lanes as f64;
        assert!((per_lane - 20.0).abs() < 1.5, "{per_lane}");
    }

    #[test]
    fn traffic_is_replenished() {
        let mut w = generate_intersection(&cfg()).unwrap();
        let start = w.with_role(Role::Background).count();
        for _ in 0..2000 {
            w = step_mobility(&w, 0.05).unwrap();
        }
        let end = w.with_role(Role::Background).count();
        // 100 s: every original background vehicle has left at least once.
        assert!((end as f64 - start as f64).abs() < 0.5 * start as f64, "{start} -> {end}");
        let half = cfg().map_half_extent;
        assert!(w
            .with_role(Role::Background)
            .all(|v| v.position.x.abs() <= half + 1e-6 && v.position.y.abs() <= half + 1e-6));
    }
}
