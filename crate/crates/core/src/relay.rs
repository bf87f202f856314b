//! Relay-path selection: mobility-height NLOS risk (MoHeD), the
//! signal-strength baseline, random choice and direct link, re-evaluated on
//! a fixed window.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apm::{GridFrame, MobilityHeightLayer};
use crate::geometry::{line_height_at, Point2, Vec2, EPS};
use crate::propagation::{fresnel_nu, knife_edge_loss, link_budget, ChannelParams, PropagationError};
use crate::scenario::{VehicleId, VehicleState, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelayError {
    #[error("invalid relay policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Mohed,
    SignalStrength,
    Random,
    Direct,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Mohed,
        PolicyKind::SignalStrength,
        PolicyKind::Random,
        PolicyKind::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Mohed => "mohed",
            PolicyKind::SignalStrength => "signal_strength",
            PolicyKind::Random => "random",
            PolicyKind::Direct => "direct",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = RelayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mohed" => Ok(PolicyKind::Mohed),
            "signal_strength" | "signal-strength" => Ok(PolicyKind::SignalStrength),
            "random" => Ok(PolicyKind::Random),
            "direct" => Ok(PolicyKind::Direct),
            other => Err(RelayError::InvalidPolicy(format!(
                "unknown policy `{other}` (expected mohed, signal_strength, random or direct)"
            ))),
        }
    }
}

/// Which velocity fills the second mobility term on the relay→sharing hop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondHopVelocity {
    /// The ego's velocity, as on every other link.
    #[default]
    Ego,
    /// The relay's velocity.
    Relay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelayPolicy {
    pub kind: PolicyKind,
    /// Milliseconds between re-selections.
    pub reselect_window: f64,
    /// Clamp on velocity differences, m/s.
    pub epsilon: f64,
    /// Candidate search radius around the ego, meters.
    pub candidate_radius: f64,
    pub second_hop_velocity: SecondHopVelocity,
}

impl Default for RelayPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Mohed,
            reselect_window: 2000.0,
            epsilon: 0.1,
            candidate_radius: 150.0,
            second_hop_velocity: SecondHopVelocity::Ego,
        }
    }
}

impl RelayPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RelayError> {
        if !(self.reselect_window > 0.0 && self.reselect_window.is_finite()) {
            return Err(RelayError::InvalidPolicy(format!(
                "reselect_window must be positive, got {}",
                self.reselect_window
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(RelayError::InvalidPolicy(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.candidate_radius > 0.0) {
            return Err(RelayError::InvalidPolicy(format!(
                "candidate_radius must be positive, got {}",
                self.candidate_radius
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    Direct,
    Via(VehicleId),
}

impl Path {
    pub fn relay(self) -> Option<VehicleId> {
        match self {
            Path::Direct => None,
            Path::Via(id) => Some(id),
        }
    }

    /// Sort key: direct ranks before any relay id.
    fn rank(self) -> (u8, u32) {
        match self {
            Path::Direct => (0, 0),
            Path::Via(id) => (1, id.0),
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Path::Direct => f.write_str("direct"),
            Path::Via(id) => write!(f, "via:{id}"),
        }
    }
}

/// NLOS risk of one path. `candidate_id` is `None` for the direct link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateAssessment {
    pub candidate_id: Option<VehicleId>,
    pub hop_risks: Vec<f64>,
    pub total_risk: f64,
}

impl CandidateAssessment {
    fn new(candidate_id: Option<VehicleId>, hop_risks: Vec<f64>) -> Self {
        let total_risk = hop_risks.iter().sum();
        Self {
            candidate_id,
            hop_risks,
            total_risk,
        }
    }

    pub fn path(&self) -> Path {
        self.candidate_id.map_or(Path::Direct, Path::Via)
    }
}

/// Received power per hop of one path, dBm. `candidate_id` is `None` for the direct link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_id: Option<VehicleId>,
    pub hop_rx_power: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelayDecision {
    pub path: Path,
    /// Seconds.
    pub decided_at: f64,
    pub assessments: Vec<CandidateAssessment>,
    pub scores: Vec<CandidateScore>,
}

impl RelayDecision {
    pub fn direct(decided_at: f64) -> Self {
        Self {
            path: Path::Direct,
            decided_at,
            assessments: Vec::new(),
            scores: Vec::new(),
        }
    }
}

/// Mobility similarity: large when the obstacle moves like the link's endpoints.
pub fn mobility_similarity(v_endpoint: Vec2, v_obstacle: Vec2, v_ego: Vec2, epsilon: f64) -> f64 {
    1.0 / (v_endpoint - v_obstacle).norm().max(epsilon) + 1.0 / (v_ego - v_obstacle).norm().max(epsilon)
}

/// Where an obstacle came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleSource {
    /// Contiguous run of layer cells `(row, col)` along the link.
    Cells(Vec<(usize, usize)>),
    /// A vehicle located from world geometry.
    Vehicle(VehicleId),
}

/// One knife edge on a link: height, motion and the point where it sits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub source: ObstacleSource,
    pub height: f64,
    pub velocity: Vec2,
    pub peak: Point2,
}

struct CellHit {
    row: usize,
    col: usize,
    t_in: f64,
    t_out: f64,
}

fn frame_contains(frame: &GridFrame, p: Point2) -> bool {
    frame.cell_of_world(p).is_some()
}

/// Obstacles breaking the `a`→`b` line, read from the mobility-height layer.
///
/// Only the sub-grid spanned by the endpoints' cells is scanned. Cells
/// overlapped by either endpoint's own footprint are skipped, cells whose
/// height does not exceed `min_height` (or, when `None`, the direct line's
/// height at the cell) are ignored, and cells that touch along the segment
/// merge into one obstacle. If either endpoint lies outside the layer, the
/// world's vehicle footprints are used instead.
pub fn obstacles_between(
    layer: &MobilityHeightLayer,
    world: &WorldState,
    a: &VehicleState,
    b: &VehicleState,
    min_height: Option<f64>,
) -> Vec<Obstacle> {
    let f = &layer.frame;
    match (f.cell_of_world(a.position), f.cell_of_world(b.position)) {
        (Some((ra, ca)), Some((rb, cb))) => {
            let rows = ra.min(rb)..=ra.max(rb);
            let cols = ca.min(cb)..=ca.max(cb);
            layer_obstacles(layer, a, b, min_height, rows, cols)
        }
        _ => obstacles_from_world(world, a, b, min_height),
    }
}

/// Same as [`obstacles_between`] but scanning every cell of the layer.
pub fn obstacles_between_full_scan(
    layer: &MobilityHeightLayer,
    world: &WorldState,
    a: &VehicleState,
    b: &VehicleState,
    min_height: Option<f64>,
) -> Vec<Obstacle> {
    let f = &layer.frame;
    if !frame_contains(f, a.position) || !frame_contains(f, b.position) {
        return obstacles_from_world(world, a, b, min_height);
    }
    layer_obstacles(layer, a, b, min_height, 0..=f.m - 1, 0..=f.n - 1)
}

fn layer_obstacles(
    layer: &MobilityHeightLayer,
    a: &VehicleState,
    b: &VehicleState,
    min_height: Option<f64>,
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
) -> Vec<Obstacle> {
    let f = &layer.frame;
    let (pa, pb) = (a.position, b.position);
    let (ant_a, ant_b) = (a.antenna(), b.antenna());
    let (fa, fb) = (a.footprint(), b.footprint());
    let mut hits = Vec::new();
    for row in rows {
        for col in cols.clone() {
            let cell = layer.get(row, col);
            if cell.sample_count == 0 {
                continue;
            }
            let square = f.cell_footprint(row, col, 1.0);
            let Some((t_in, t_out)) = square.clip_segment(pa, pb) else {
                continue;
            };
            let floor = min_height.unwrap_or_else(|| line_height_at(&ant_a, &ant_b, pa.lerp(pb, 0.5 * (t_in + t_out))));
            if cell.max_height <= floor {
                continue;
            }
            if square.overlaps(&fa) || square.overlaps(&fb) {
                continue;
            }
            hits.push(CellHit { row, col, t_in, t_out });
        }
    }
    hits.sort_by(|x, y| x.t_in.total_cmp(&y.t_in).then(x.row.cmp(&y.row)).then(x.col.cmp(&y.col)));

    let len = pa.distance(pb);
    let touch = EPS / len.max(EPS);
    let mut out = Vec::new();
    let mut i = 0;
    while i < hits.len() {
        let mut j = i + 1;
        let mut t_end = hits[i].t_out;
        while j < hits.len() && hits[j].t_in <= t_end + touch {
            t_end = t_end.max(hits[j].t_out);
            j += 1;
        }
        let run = &hits[i..j];
        let mut height = 0.0f64;
        let mut vel = Vec2::ZERO;
        for h in run {
            let c = layer.get(h.row, h.col);
            height = height.max(c.max_height);
            vel = vel + c.mean_velocity;
        }
        out.push(Obstacle {
            source: ObstacleSource::Cells(run.iter().map(|h| (h.row, h.col)).collect()),
            height,
            velocity: vel * (1.0 / run.len() as f64),
            peak: pa.lerp(pb, 0.5 * (run[0].t_in + t_end)),
        });
        i = j;
    }
    out
}

/// Vehicles breaking the `a`→`b` line, straight from world geometry.
pub fn obstacles_from_world(world: &WorldState, a: &VehicleState, b: &VehicleState, min_height: Option<f64>) -> Vec<Obstacle> {
    let (ant_a, ant_b) = (a.antenna(), b.antenna());
    let mut out: Vec<(f64, Obstacle)> = world
        .vehicles
        .iter()
        .filter(|v| v.id != a.id && v.id != b.id)
        .filter_map(|v| {
            let (t_in, t_out) = v.footprint().clip_segment(a.position, b.position)?;
            let peak = a.position.lerp(b.position, 0.5 * (t_in + t_out));
            let floor = min_height.unwrap_or_else(|| line_height_at(&ant_a, &ant_b, peak));
            (v.height > floor).then_some((
                t_in,
                Obstacle {
                    source: ObstacleSource::Vehicle(v.id),
                    height: v.height,
                    velocity: v.velocity,
                    peak,
                },
            ))
        })
        .collect();
    out.sort_by(|x, y| x.0.total_cmp(&y.0));
    out.into_iter().map(|(_, o)| o).collect()
}

/// Knife-edge loss of one obstacle on the `a`→`b` link, dB.
pub fn obstacle_loss(a: &VehicleState, b: &VehicleState, o: &Obstacle, params: &ChannelParams) -> Result<f64, RelayError> {
    let len = a.position.distance(b.position);
    let ab = b.position - a.position;
    let t = ((o.peak - a.position).dot(ab) / (len * len)).clamp(0.0, 1.0);
    let d1 = t * len;
    let d2 = len - d1;
    if d1 <= EPS || d2 <= EPS {
        return Ok(0.0);
    }
    let h = o.height - line_height_at(&a.antenna(), &b.antenna(), o.peak);
    Ok(knife_edge_loss(fresnel_nu(h, params.wavelength(), d1, d2)?))
}

/// Summed loss × mobility similarity over the obstacles of the `a`→`b` link;
/// `b` is the far endpoint whose velocity enters the similarity.
pub fn link_nlos_risk(
    a: &VehicleState,
    b: &VehicleState,
    obstacles: &[Obstacle],
    v_ego: Vec2,
    params: &ChannelParams,
    epsilon: f64,
) -> Result<f64, RelayError> {
    let mut risk = 0.0;
    for o in obstacles {
        let loss = obstacle_loss(a, b, o, params)?;
        risk += loss * mobility_similarity(b.velocity, o.velocity, v_ego, epsilon);
    }
    Ok(risk)
}

/// Everything a policy looks at when deciding.
#[derive(Clone, Copy)]
pub struct SelectionInput<'a> {
    pub world: &'a WorldState,
    /// Mobility-height layer around the ego; without one, obstacles come
    /// from world geometry.
    pub layer: Option<&'a MobilityHeightLayer>,
    pub ego: &'a VehicleState,
    pub sharing: &'a VehicleState,
    pub candidates: &'a [&'a VehicleState],
    pub params: &'a ChannelParams,
}

/// V2X-enabled vehicles within `radius` of the ego, excluding ego and sharing node, by id.
pub fn relay_candidates<'a>(
    world: &'a WorldState,
    ego: &VehicleState,
    sharing: &VehicleState,
    radius: f64,
) -> Vec<&'a VehicleState> {
    let mut c: Vec<&VehicleState> = world
        .vehicles
        .iter()
        .filter(|v| v.v2x_enabled && v.id != ego.id && v.id != sharing.id)
        .filter(|v| v.position.distance(ego.position) <= radius)
        .collect();
    c.sort_by_key(|v| v.id);
    c
}

fn pick_min_risk(assessments: &[CandidateAssessment], current: Path) -> Path {
    let best = assessments
        .iter()
        .map(|a| a.total_risk)
        .fold(f64::INFINITY, f64::min);
    let tied: Vec<Path> = assessments
        .iter()
        .filter(|a| a.total_risk <= best)
        .map(CandidateAssessment::path)
        .collect();
    if tied.contains(&current) {
        return current;
    }
    tied.into_iter().min_by_key(|p| p.rank()).unwrap_or(Path::Direct)
}

/// Minimum-NLOS-risk path among direct and every one-relay path.
/// Ties keep `current` (direct when there is none), then the lowest id.
pub fn select_mohed(
    input: &SelectionInput<'_>,
    current: Option<&RelayDecision>,
    policy: &RelayPolicy,
    clock: f64,
) -> Result<RelayDecision, RelayError> {
    let SelectionInput {
        world,
        layer,
        ego,
        sharing,
        candidates,
        params,
    } = *input;
    let eps = policy.epsilon;
    let risk = |a: &VehicleState, b: &VehicleState, v_ego: Vec2| -> Result<f64, RelayError> {
        let obs = match layer {
            Some(l) => obstacles_between(l, world, a, b, None),
            None => obstacles_from_world(world, a, b, None),
        };
        link_nlos_risk(a, b, &obs, v_ego, params, eps)
    };
    let mut assessments = Vec::with_capacity(candidates.len() + 1);
    assessments.push(CandidateAssessment::new(None, vec![risk(ego, sharing, ego.velocity)?]));
    for c in candidates {
        let second = match policy.second_hop_velocity {
            SecondHopVelocity::Ego => ego.velocity,
            SecondHopVelocity::Relay => c.velocity,
        };
        let hops = vec![risk(ego, c, ego.velocity)?, risk(c, sharing, second)?];
        assessments.push(CandidateAssessment::new(Some(c.id), hops));
    }
    let current = current.map_or(Path::Direct, |d| d.path);
    Ok(RelayDecision {
        path: pick_min_risk(&assessments, current),
        decided_at: clock,
        assessments,
        scores: Vec::new(),
    })
}

fn rx_power(world: &WorldState, a: &VehicleState, b: &VehicleState, params: &ChannelParams) -> Result<f64, RelayError> {
    Ok(link_budget(&a.antenna(), &b.antenna(), world, params, &[a.id, b.id])?.rx_power)
}

/// Strongest summed two-hop received power (dBm); the direct link wins only
/// when it beats that candidate's weaker hop.
pub fn select_signal_strength(input: &SelectionInput<'_>, clock: f64) -> Result<RelayDecision, RelayError> {
    let SelectionInput {
        world,
        ego,
        sharing,
        candidates,
        params,
        ..
    } = *input;
    let direct = rx_power(world, ego, sharing, params)?;
    let mut scores = vec![CandidateScore {
        candidate_id: None,
        hop_rx_power: vec![direct],
        score: direct,
    }];
    let mut best: Option<(f64, f64, VehicleId)> = None;
    for c in candidates {
        let h1 = rx_power(world, ego, c, params)?;
        let h2 = rx_power(world, c, sharing, params)?;
        let score = h1 + h2;
        scores.push(CandidateScore {
            candidate_id: Some(c.id),
            hop_rx_power: vec![h1, h2],
            score,
        });
        if best.is_none_or(|(s, _, id)| score > s || (score == s && c.id < id)) {
            best = Some((score, h1.min(h2), c.id));
        }
    }
    let path = match best {
        Some((_, weaker, id)) if direct <= weaker => Path::Via(id),
        _ => Path::Direct,
    };
    Ok(RelayDecision {
        path,
        decided_at: clock,
        assessments: Vec::new(),
        scores,
    })
}

/// Uniform choice among `candidates` (already filtered to those in range).
pub fn select_random<R: Rng + ?Sized>(candidates: &[VehicleId], rng: &mut R, clock: f64) -> RelayDecision {
    let path = if candidates.is_empty() {
        Path::Direct
    } else {
        Path::Via(candidates[rng.random_range(0..candidates.len())])
    };
    RelayDecision {
        path,
        decided_at: clock,
        assessments: Vec::new(),
        scores: Vec::new(),
    }
}

/// Candidates whose link to the ego or to the sharing node reaches sensitivity.
pub fn candidates_in_range(input: &SelectionInput<'_>) -> Result<Vec<VehicleId>, RelayError> {
    let SelectionInput {
        world,
        ego,
        sharing,
        candidates,
        params,
        ..
    } = *input;
    let mut ids = Vec::new();
    for c in candidates {
        let reach = |rx: f64| rx >= params.receiver_sensitivity;
        if reach(rx_power(world, ego, c, params)?) || reach(rx_power(world, c, sharing, params)?) {
            ids.push(c.id);
        }
    }
    Ok(ids)
}

/// Run the policy's selection now.
pub fn select<R: Rng + ?Sized>(
    policy: &RelayPolicy,
    input: &SelectionInput<'_>,
    current: Option<&RelayDecision>,
    clock: f64,
    rng: &mut R,
) -> Result<RelayDecision, RelayError> {
    match policy.kind {
        PolicyKind::Mohed => select_mohed(input, current, policy, clock),
        PolicyKind::SignalStrength => select_signal_strength(input, clock),
        PolicyKind::Random => Ok(select_random(&candidates_in_range(input)?, rng, clock)),
        PolicyKind::Direct => Ok(RelayDecision::direct(clock)),
    }
}

/// Whether the re-selection window has elapsed since `last`.
pub fn reselect_due(clock: f64, last: &RelayDecision, policy: &RelayPolicy) -> bool {
    // Tolerate the rounding of accumulated time steps.
    (clock - last.decided_at) * 1000.0 >= policy.reselect_window - 1e-6
}

/// Re-decide once the window has elapsed; `switched` reports a path change.
pub fn maybe_reselect<R: Rng + ?Sized>(
    clock: f64,
    last: &RelayDecision,
    policy: &RelayPolicy,
    input: &SelectionInput<'_>,
    rng: &mut R,
) -> Result<(RelayDecision, bool), RelayError> {
    if !reselect_due(clock, last, policy) {
        return Ok((last.clone(), false));
    }
    let next = select(policy, input, Some(last), clock, rng)?;
    let switched = next.path != last.path;
    Ok((next, switched))
}

/// One line of the decision trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub clock: f64,
    pub policy: PolicyKind,
    pub path: Path,
    pub switched: bool,
    pub assessments: Vec<CandidateAssessment>,
    pub scores: Vec<CandidateScore>,
}

impl DecisionRecord {
    pub fn new(policy: PolicyKind, decision: &RelayDecision, switched: bool) -> Self {
        Self {
            clock: decision.decided_at,
            policy,
            path: decision.path,
            switched,
            assessments: decision.assessments.clone(),
            scores: decision.scores.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apm::build_mobility_height_layer;
    use crate::scenario::{make_vehicle, Role, VehicleClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(id: u32, role: Role, class: VehicleClass, x: f64, y: f64, vx: f64) -> VehicleState {
        let mut s = make_vehicle(VehicleId(id), role, class, Point2::new(x, y), 0.0, 0.0);
        s.velocity = Vec2::new(vx, 0.0);
        s
    }

    fn layer_for(world: &WorldState) -> MobilityHeightLayer {
        let frame = GridFrame::new(Point2::ORIGIN, 0.0, 2.0, 100, 100).unwrap();
        build_mobility_height_layer(world, &frame)
    }

    #[test]
    fn similarity_examples() {
        let s = mobility_similarity(Vec2::new(10.0, 0.0), Vec2::new(8.0, 0.0), Vec2::new(5.0, 0.0), 0.1);
        assert!((s - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        let clamped = mobility_similarity(Vec2::new(3.0, 0.0), Vec2::new(3.0, 0.0), Vec2::new(5.0, 0.0), 0.1);
        assert!((clamped - (10.0 + 0.5)).abs() < 1e-12);
        let twice = mobility_similarity(Vec2::new(20.0, 0.0), Vec2::new(16.0, 0.0), Vec2::new(10.0, 0.0), 0.1);
        assert!((twice - s / 2.0).abs() < 1e-15);
    }

    fn blocked_world() -> (WorldState, VehicleState, VehicleState, VehicleState) {
        // Kept off the grid lines so the link crosses cell interiors.
        let ego = v(0, Role::Ego, VehicleClass::Sedan, -25.0, 0.5, 8.0);
        let share = v(1, Role::SharingNode, VehicleClass::Sedan, 25.0, 0.5, 0.0);
        let mut truck = v(2, Role::Blocking, VehicleClass::Truck, 0.0, 0.5, 1.0);
        truck.length = 3.0;
        let world = WorldState::from_parts(vec![ego.clone(), share.clone(), truck.clone()], vec![]);
        (world, ego, share, truck)
    }

    #[test]
    fn obstacles_empty_and_truck() {
        let (world, ego, share, truck) = blocked_world();
        let empty = WorldState::from_parts(vec![ego.clone(), share.clone()], vec![]);
        assert!(obstacles_between(&layer_for(&empty), &empty, &ego, &share, None).is_empty());

        let layer = layer_for(&world);
        let obs = obstacles_between(&layer, &world, &ego, &share, None);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].height, truck.height);
        assert_eq!(obs[0].velocity, truck.velocity);
        assert!(obs[0].peak.distance(Point2::new(0.0, 0.5)) < 1e-9);
        assert_eq!(obs, obstacles_between_full_scan(&layer, &world, &ego, &share, None));
    }

    #[test]
    fn obstacles_off_path() {
        let ego = v(0, Role::Ego, VehicleClass::Sedan, -25.0, 0.0, 8.0);
        let share = v(1, Role::SharingNode, VehicleClass::Sedan, 25.0, 0.0, 0.0);
        let truck = v(2, Role::Blocking, VehicleClass::Truck, 0.0, 8.0, 1.0);
        let world = WorldState::from_parts(vec![ego.clone(), share.clone(), truck], vec![]);
        assert!(obstacles_between(&layer_for(&world), &world, &ego, &share, None).is_empty());
    }

    #[test]
    fn outside_layer_falls_back_to_world() {
        let (world, ego, share, truck) = blocked_world();
        let small = GridFrame::new(Point2::ORIGIN, 0.0, 2.0, 10, 10).unwrap();
        let layer = build_mobility_height_layer(&world, &small);
        let obs = obstacles_between(&layer, &world, &ego, &share, None);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].source, ObstacleSource::Vehicle(truck.id));
    }

    #[test]
    fn risk_examples() {
        let (world, ego, share, _) = blocked_world();
        let layer = layer_for(&world);
        let p = ChannelParams::default();
        assert_eq!(link_nlos_risk(&ego, &share, &[], ego.velocity, &p, 0.1).unwrap(), 0.0);
        let obs = obstacles_between(&layer, &world, &ego, &share, None);
        let one = link_nlos_risk(&ego, &share, &obs, ego.velocity, &p, 0.1).unwrap();
        let loss = obstacle_loss(&ego, &share, &obs[0], &p).unwrap();
        let s = mobility_similarity(share.velocity, obs[0].velocity, ego.velocity, 0.1);
        assert!((one - loss * s).abs() < 1e-12);
        let two = link_nlos_risk(&ego, &share, &[obs[0].clone(), obs[0].clone()], ego.velocity, &p, 0.1).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    fn input<'a>(
        world: &'a WorldState,
        layer: &'a MobilityHeightLayer,
        ego: &'a VehicleState,
        share: &'a VehicleState,
        cands: &'a [&'a VehicleState],
        params: &'a ChannelParams,
    ) -> SelectionInput<'a> {
        SelectionInput {
            world,
            layer: Some(layer),
            ego,
            sharing: share,
            candidates: cands,
            params,
        }
    }

    #[test]
    fn mohed_examples() {
        let p = ChannelParams::default();
        let policy = RelayPolicy::default();
        // Clear world: direct.
        let ego = v(0, Role::Ego, VehicleClass::Sedan, -25.0, 0.0, 8.0);
        let share = v(1, Role::SharingNode, VehicleClass::Sedan, 25.0, 0.0, 0.0);
        let c5 = v(5, Role::Background, VehicleClass::Sedan, 0.0, 20.0, 8.0);
        let c4 = v(4, Role::Background, VehicleClass::Sedan, 0.0, -20.0, 8.0);
        let clear = WorldState::from_parts(vec![ego.clone(), share.clone(), c5.clone(), c4.clone()], vec![]);
        let layer = layer_for(&clear);
        let cands = [&c5, &c4];
        let d = select_mohed(&input(&clear, &layer, &ego, &share, &cands, &p), None, &policy, 0.0).unwrap();
        assert_eq!(d.path, Path::Direct);

        // Blocked direct link: a clear candidate wins; of two, the lower id.
        let (mut world, ego, share, _) = blocked_world();
        world.vehicles.push(c5.clone());
        world.vehicles.push(c4.clone());
        let layer = layer_for(&world);
        let d = select_mohed(&input(&world, &layer, &ego, &share, &cands, &p), None, &policy, 0.0).unwrap();
        assert_eq!(d.path, Path::Via(VehicleId(4)));
        assert!(d.assessments[0].total_risk > 0.0);
        // Keep the current relay on ties.
        let cur = RelayDecision {
            path: Path::Via(VehicleId(5)),
            ..RelayDecision::direct(0.0)
        };
        let d = select_mohed(&input(&world, &layer, &ego, &share, &cands, &p), Some(&cur), &policy, 2.0).unwrap();
        assert_eq!(d.path, Path::Via(VehicleId(5)));
        // Argmin: nothing strictly below the chosen path.
        let chosen = d.assessments.iter().find(|a| a.path() == d.path).unwrap().total_risk;
        assert!(d.assessments.iter().all(|a| a.total_risk >= chosen));
    }

    #[test]
    fn signal_strength_prefers_strong_candidate() {
        let p = ChannelParams::default();
        let (mut world, ego, share, _) = blocked_world();
        let c = v(4, Role::Background, VehicleClass::Sedan, 0.0, -10.0, 8.0);
        world.vehicles.push(c.clone());
        let layer = layer_for(&world);
        let cands = [&c];
        let d = select_signal_strength(&input(&world, &layer, &ego, &share, &cands, &p), 0.0).unwrap();
        assert_eq!(d.path, Path::Via(VehicleId(4)));
        assert_eq!(d.scores.len(), 2);

        // Candidate far away, direct clear: direct.
        let far = v(6, Role::Background, VehicleClass::Sedan, 0.0, -900.0, 8.0);
        let clear = WorldState::from_parts(vec![ego.clone(), share.clone(), far.clone()], vec![]);
        let cands = [&far];
        let d = select_signal_strength(&input(&clear, &layer, &ego, &share, &cands, &p), 0.0).unwrap();
        assert_eq!(d.path, Path::Direct);
    }

    #[test]
    fn empty_candidates_go_direct() {
        let p = ChannelParams::default();
        let (world, ego, share, _) = blocked_world();
        let layer = layer_for(&world);
        let inp = input(&world, &layer, &ego, &share, &[], &p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in PolicyKind::ALL {
            let d = select(&RelayPolicy::new(kind), &inp, None, 0.0, &mut rng).unwrap();
            assert_eq!(d.path, Path::Direct, "{kind}");
        }
    }

    #[test]
    fn random_is_seeded_and_uniform() {
        let ids = [VehicleId(3), VehicleId(7), VehicleId(9), VehicleId(11)];
        assert_eq!(select_random(&ids[..1], &mut ChaCha8Rng::seed_from_u64(5), 0.0).path, Path::Via(VehicleId(3)));
        let a = select_random(&ids, &mut ChaCha8Rng::seed_from_u64(5), 0.0);
        let b = select_random(&ids, &mut ChaCha8Rng::seed_from_u64(5), 0.0);
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let Path::Via(id) = select_random(&ids, &mut rng, 0.0).path else { unreachable!() };
            counts[ids.iter().position(|&x| x == id).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn reselect_window() {
        let p = ChannelParams::default();
        let (mut world, ego, share, _) = blocked_world();
        let c = v(4, Role::Background, VehicleClass::Sedan, 0.0, -10.0, 8.0);
        world.vehicles.push(c.clone());
        let layer = layer_for(&world);
        let cands = [&c];
        let inp = input(&world, &layer, &ego, &share, &cands, &p);
        let policy = RelayPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let last = RelayDecision::direct(0.0);
        let (d, switched) = maybe_reselect(1.9, &last, &policy, &inp, &mut rng).unwrap();
        assert_eq!((d, switched), (last.clone(), false));
        let (d, switched) = maybe_reselect(2.0, &last, &policy, &inp, &mut rng).unwrap();
        assert!(switched);
        assert_eq!(d.path, Path::Via(VehicleId(4)));
        let (d2, switched) = maybe_reselect(4.0, &d, &policy, &inp, &mut rng).unwrap();
        assert!(!switched);
        assert_eq!(d2.decided_at, 4.0);
    }

    #[test]
    fn policy_names_roundtrip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("best".parse::<PolicyKind>().is_err());
        assert!(RelayPolicy {
            epsilon: 0.0,
            ..RelayPolicy::default()
        }
        .validate()
        .is_err());
    }
}
