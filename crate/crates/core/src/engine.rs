//! Simulation loop: mobility, fusion triggering, relay decisions and
//! per-packet delivery over the chosen path, plus sweeps and CDF pooling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apm::{assess_providers, build_apm, build_mobility_height_layer, synth_perception, ApmError, ApmParams, GridFrame};
use crate::geometry::Point2;
use crate::propagation::{link_budget, packet_success_probability, ChannelParams, PropagationError};
use crate::relay::{
    maybe_reselect, relay_candidates, select, DecisionRecord, Path, PolicyKind, RelayDecision, RelayError,
    RelayPolicy, SelectionInput,
};
use crate::scenario::{generate_intersection, step_mobility, Role, ScenarioConfig, ScenarioError, VehicleState, WorldState};

/// Stream of the random relay policy.
pub const POLICY_STREAM: u64 = 2;
/// First packet stream; retransmission attempt `a` draws from `PACKET_STREAM + a`.
pub const PACKET_STREAM: u64 = 16;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Apm(#[from] ApmError),
    #[error(transparent)]
    Relay(#[from] RelayError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
}

/// Point-cloud compression ratio of the shared sensor stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Compression {
    X16,
    X32,
}

impl Compression {
    /// Payload bitrate of the compressed stream, bits/s.
    pub fn payload_bitrate(self) -> f64 {
        match self {
            Compression::X16 => 6e6,
            Compression::X32 => 3e6,
        }
    }
}

impl TryFrom<u32> for Compression {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, String> {
        match v {
            16 => Ok(Compression::X16),
            32 => Ok(Compression::X32),
            other => Err(format!("compression rate must be 16 or 32, got {other}")),
        }
    }
}

impl From<Compression> for u32 {
    fn from(c: Compression) -> u32 {
        match c {
            Compression::X16 => 16,
            Compression::X32 => 32,
        }
    }
}

/// How per-hop success probabilities are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkModel {
    /// Link budget through the world snapshot, then the reception curve.
    #[default]
    Physical,
    /// Fixed probabilities for the first and second hop; the direct link uses `first`.
    Constant { first: f64, second: f64 },
}

/// Simulation settings. Seed, density, ego speed and duration live in the
/// scenario config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Seconds.
    pub dt: f64,
    /// Seconds.
    pub sensor_period: f64,
    pub compression_rate: Compression,
    /// bits/s.
    pub payload_bitrate: f64,
    /// Bytes.
    pub packet_size: u32,
    /// Extra attempts per hop after a failure.
    pub retransmissions: u32,
    pub policy: RelayPolicy,
    pub channel: ChannelParams,
    pub apm: ApmParams,
    pub link_model: LinkModel,
    /// Cells per side of the ego-centered mobility-height layer used for relay decisions.
    pub relay_layer_cells: usize,
    /// Seconds per PRR sample.
    pub prr_window: f64,
    /// Keep one record per relay decision.
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::with_compression(Compression::X32)
    }
}

impl SimConfig {
    pub fn with_compression(compression_rate: Compression) -> Self {
        Self {
            dt: 0.05,
            sensor_period: 0.1,
            compression_rate,
            payload_bitrate: compression_rate.payload_bitrate(),
            packet_size: 200,
            retransmissions: 0,
            policy: RelayPolicy::default(),
            channel: ChannelParams::default(),
            apm: ApmParams::default(),
            link_model: LinkModel::Physical,
            relay_layer_cells: 180,
            prr_window: 1.0,
            record_trace: false,
        }
    }

    pub fn set_compression(&mut self, c: Compression) {
        self.compression_rate = c;
        self.payload_bitrate = c.payload_bitrate();
    }

    /// Packets per sensor frame: ceil(bitrate · period / 8 / packet size).
    pub fn packets_per_frame(&self) -> u64 {
        (self.payload_bitrate * self.sensor_period / 8.0 / f64::from(self.packet_size)).ceil() as u64
    }

    fn steps_per_frame(&self) -> Result<u64, EngineError> {
        let ratio = self.sensor_period / self.dt;
        let rounded = ratio.round();
        if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
            return Err(EngineError::InvalidConfig(format!(
                "sensor_period ({}) must be a whole multiple of dt ({})",
                self.sensor_period, self.dt
            )));
        }
        Ok(rounded as u64)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.sensor_period >= self.dt && self.sensor_period.is_finite()) {
            return bad(format!("sensor_period must be >= dt, got {}", self.sensor_period));
        }
        self.steps_per_frame()?;
        if self.packet_size == 0 {
            return bad("packet_size must be > 0".into());
        }
        if !(self.payload_bitrate > 0.0 && self.payload_bitrate.is_finite()) {
            return bad(format!("payload_bitrate must be > 0, got {}", self.payload_bitrate));
        }
        if !(self.prr_window > 0.0 && self.prr_window.is_finite()) {
            return bad(format!("prr_window must be > 0, got {}", self.prr_window));
        }
        if self.relay_layer_cells == 0 {
            return bad("relay_layer_cells must be > 0".into());
        }
        if let LinkModel::Constant { first, second } = self.link_model {
            if !(0.0..=1.0).contains(&first) || !(0.0..=1.0).contains(&second) {
                return bad("constant link probabilities must lie in [0,1]".into());
            }
        }
        self.channel.validate().map_err(EngineError::InvalidConfig)?;
        self.policy.validate()?;
        GridFrame::new(Point2::ORIGIN, 0.0, self.apm.k, self.apm.m, self.apm.n)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: PolicyKind,
    pub seed: u64,
    pub density: f64,
    pub packets_generated: u64,
    pub packets_delivered: u64,
    pub prr: f64,
    pub per: f64,
    /// PRR of every `prr_window` slice that carried traffic.
    pub window_prr_samples: Vec<f64>,
    pub relay_switches: u32,
    pub frames_emitted: u64,
    pub frames_delivered: u64,
    pub frame_delivery_ratio: f64,
    pub packets_per_frame: u64,
    /// Seconds; `None` if fusion never triggered.
    pub trigger_time: Option<f64>,
    /// Packets sent over a relay.
    pub two_hop_packets: u64,
    pub two_hop_delivered: u64,
    /// Packets sent while a blocking vehicle stood on the direct ego–sharing line.
    pub blocked_packets: u64,
    pub blocked_delivered: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_density_results: Option<BTreeMap<String, f64>>,
}

impl RunMetrics {
    /// PER over packets sent during the blocking window, if any were.
    pub fn blocked_per(&self) -> Option<f64> {
        (self.blocked_packets > 0).then(|| 1.0 - self.blocked_delivered as f64 / self.blocked_packets as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Vec<DecisionRecord>,
}

/// Per-packet uniforms for every attempt, one stream per attempt so that
/// raising the retransmission count leaves earlier attempts untouched.
struct PacketDraws {
    attempts: Vec<ChaCha8Rng>,
}

impl PacketDraws {
    fn new(seed: u64, retransmissions: u32) -> Self {
        let attempts = (0..=u64::from(retransmissions))
            .map(|a| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(PACKET_STREAM + a);
                r
            })
            .collect();
        Self { attempts }
    }

    /// Sends one packet over hops with success probabilities `hops` (one or
    /// two entries). Each hop may be retried; delivery needs every hop.
    fn send(&mut self, hops: &[f64]) -> bool {
        let mut u = [[0.0f64; 2]; 1];
        let mut ok = [false; 2];
        for rng in &mut self.attempts {
            u[0] = [rng.random::<f64>(), rng.random::<f64>()];
            for (h, &p) in hops.iter().enumerate() {
                ok[h] |= u[0][h] < p;
            }
        }
        ok[..hops.len()].iter().all(|&x| x)
    }
}

/// Delivered count of `packets` sent over `hops`, using the engine's draw
/// scheme; exposed for statistical checks of the transmission model.
pub fn transmit_packets(seed: u64, hops: &[f64], packets: u64, retransmissions: u32) -> u64 {
    assert!(matches!(hops.len(), 1 | 2), "one or two hops");
    let mut draws = PacketDraws::new(seed, retransmissions);
    (0..packets).filter(|_| draws.send(hops)).count() as u64
}

fn hop_probability(
    world: &WorldState,
    a: &VehicleState,
    b: &VehicleState,
    params: &ChannelParams,
) -> Result<f64, EngineError> {
    let lb = link_budget(&a.antenna(), &b.antenna(), world, params, &[a.id, b.id])?;
    Ok(packet_success_probability(lb.rx_power, params))
}

fn path_probabilities(
    world: &WorldState,
    path: Path,
    ego: &VehicleState,
    sharing: &VehicleState,
    sim: &SimConfig,
) -> Result<Vec<f64>, EngineError> {
    let relay = path.relay().and_then(|id| world.vehicle(id));
    Ok(match (sim.link_model, relay) {
        (LinkModel::Constant { first, .. }, None) => vec![first],
        (LinkModel::Constant { first, second }, Some(_)) => vec![first, second],
        // Sharing node transmits; the relay forwards to the ego.
        (LinkModel::Physical, None) => vec![hop_probability(world, sharing, ego, &sim.channel)?],
        (LinkModel::Physical, Some(r)) => vec![
            hop_probability(world, sharing, r, &sim.channel)?,
            hop_probability(world, r, ego, &sim.channel)?,
        ],
    })
}

fn fusion_triggered(world: &WorldState, ego: &VehicleState, sharing: &VehicleState, p: &ApmParams) -> Result<bool, EngineError> {
    let ego_pts = synth_perception(world, ego, p.rays, p.max_range, p.lidar_step);
    let share_pts = synth_perception(world, sharing, p.rays, p.max_range, p.lidar_step);
    let ego_apm = build_apm(&ego_pts, p.frame_for(ego)?, ego.id.0, world.clock);
    let share_apm = build_apm(&share_pts, p.frame_for(sharing)?, sharing.id.0, world.clock);
    let reports = assess_providers(&ego_apm, &[(sharing.id, &share_apm)], p)?;
    Ok(reports.iter().any(|r| r.triggered))
}

fn direct_line_blocked(world: &WorldState, ego: &VehicleState, sharing: &VehicleState) -> bool {
    world
        .with_role(Role::Blocking)
        .any(|b| b.footprint().clip_segment(ego.position, sharing.position).is_some())
}

struct Selector<'c> {
    sim: &'c SimConfig,
    rng: ChaCha8Rng,
}

impl Selector<'_> {
    fn decide(
        &mut self,
        world: &WorldState,
        current: Option<&RelayDecision>,
        force: bool,
    ) -> Result<(RelayDecision, bool), EngineError> {
        let sim = self.sim;
        let ego = world.single(Role::Ego);
        let sharing = world.single(Role::SharingNode);
        let candidates = relay_candidates(world, ego, sharing, sim.policy.candidate_radius);
        let layer = (sim.policy.kind == PolicyKind::Mohed).then(|| {
            let frame = GridFrame::new(ego.position, 0.0, sim.apm.k, sim.relay_layer_cells, sim.relay_layer_cells)
                .expect("validated grid");
            build_mobility_height_layer(world, &frame)
        });
        let input = SelectionInput {
            world,
            layer: layer.as_ref(),
            ego,
            sharing,
            candidates: &candidates,
            params: &sim.channel,
        };
        let clock = world.clock;
        match current {
            None => Ok((select(&sim.policy, &input, None, clock, &mut self.rng)?, false)),
            Some(last) if force => {
                let next = select(&sim.policy, &input, Some(last), clock, &mut self.rng)?;
                let switched = next.path != last.path;
                Ok((next, switched))
            }
            Some(last) => Ok(maybe_reselect(clock, last, &sim.policy, &input, &mut self.rng)?),
        }
    }
}

/// Run one simulation.
pub fn run(scenario: &ScenarioConfig, sim: &SimConfig) -> Result<RunOutput, EngineError> {
    scenario.validate()?;
    sim.validate()?;
    let steps_per_frame = sim.steps_per_frame()?;
    let total_steps = (scenario.duration / sim.dt).round() as u64;
    let packets_per_frame = sim.packets_per_frame();

    let mut world = generate_intersection(scenario)?;
    let mut policy_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    policy_rng.set_stream(POLICY_STREAM);
    let mut selector = Selector { sim, rng: policy_rng };
    let mut draws = PacketDraws::new(scenario.seed, sim.retransmissions);

    let mut m = RunMetrics {
        policy: sim.policy.kind,
        seed: scenario.seed,
        density: scenario.spawn_spacing_n,
        packets_generated: 0,
        packets_delivered: 0,
        prr: 1.0,
        per: 0.0,
        window_prr_samples: Vec::new(),
        relay_switches: 0,
        frames_emitted: 0,
        frames_delivered: 0,
        frame_delivery_ratio: 1.0,
        packets_per_frame,
        trigger_time: None,
        two_hop_packets: 0,
        two_hop_delivered: 0,
        blocked_packets: 0,
        blocked_delivered: 0,
        per_density_results: None,
    };
    let mut trace = Vec::new();
    let mut decision: Option<RelayDecision> = None;
    let mut windows: BTreeMap<u64, (u64, u64)> = BTreeMap::new();

    for step in 1..=total_steps {
        world = step_mobility(&world, sim.dt)?;
        if step % steps_per_frame != 0 {
            continue;
        }
        let ego = world.single(Role::Ego);
        let sharing = world.single(Role::SharingNode);

        if decision.is_none() {
            if !fusion_triggered(&world, ego, sharing, &sim.apm)? {
                continue;
            }
            m.trigger_time = Some(world.clock);
        }
        let relay_gone = decision
            .as_ref()
            .and_then(|d| d.path.relay())
            .is_some_and(|id| world.vehicle(id).is_none());
        let (next, switched) = selector.decide(&world, decision.as_ref(), relay_gone)?;
        let fresh = decision.as_ref().is_none_or(|d| d.decided_at != next.decided_at);
        if switched {
            m.relay_switches += 1;
        }
        if sim.record_trace && fresh {
            trace.push(DecisionRecord::new(sim.policy.kind, &next, switched));
        }
        let path = next.path;
        decision = Some(next);

        let hops = path_probabilities(&world, path, ego, sharing, sim)?;
        let blocked = direct_line_blocked(&world, ego, sharing);
        let mut delivered = 0u64;
        for _ in 0..packets_per_frame {
            if draws.send(&hops) {
                delivered += 1;
            }
        }
        m.frames_emitted += 1;
        m.packets_generated += packets_per_frame;
        m.packets_delivered += delivered;
        if delivered == packets_per_frame {
            m.frames_delivered += 1;
        }
        if hops.len() == 2 {
            m.two_hop_packets += packets_per_frame;
            m.two_hop_delivered += delivered;
        }
        if blocked {
            m.blocked_packets += packets_per_frame;
            m.blocked_delivered += delivered;
        }
        // Frames sit at whole multiples of the period; nudge down so a frame
        // at t = 1.0 s lands in the window it closes.
        let w = ((world.clock - 1e-9) / sim.prr_window).floor().max(0.0) as u64;
        let e = windows.entry(w).or_default();
        e.0 += packets_per_frame;
        e.1 += delivered;
    }

    if m.packets_generated > 0 {
        m.prr = m.packets_delivered as f64 / m.packets_generated as f64;
        m.per = 1.0 - m.prr;
        m.frame_delivery_ratio = m.frames_delivered as f64 / m.frames_emitted as f64;
    }
    m.window_prr_samples = windows
        .values()
        .map(|&(sent, got)| got as f64 / sent as f64)
        .collect();
    Ok(RunOutput { metrics: m, trace })
}

/// Aggregate of all runs sharing a density and policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub density: f64,
    pub policy: PolicyKind,
    pub runs: usize,
    pub mean_prr: f64,
    pub std_prr: f64,
    /// Delivered over generated, pooled across seeds.
    pub pooled_prr: f64,
    pub mean_per: f64,
    pub mean_switches: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub runs: Vec<RunMetrics>,
}

/// Full factorial over densities × policies × seeds, run in parallel on the
/// current rayon pool; results come back in input order.
pub fn sweep_density(
    densities: &[f64],
    seeds: &[u64],
    policies: &[PolicyKind],
    scenario: &ScenarioConfig,
    sim: &SimConfig,
) -> Result<SweepResult, EngineError> {
    if densities.is_empty() || seeds.is_empty() || policies.is_empty() {
        return Err(EngineError::InvalidConfig("sweep needs at least one density, seed and policy".into()));
    }
    let jobs: Vec<(f64, PolicyKind, u64)> = densities
        .iter()
        .flat_map(|&d| policies.iter().flat_map(move |&p| seeds.iter().map(move |&s| (d, p, s))))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(density, policy, seed)| {
            let sc = ScenarioConfig {
                spawn_spacing_n: density,
                seed,
                ..scenario.clone()
            };
            let mut sm = sim.clone();
            sm.policy.kind = policy;
            sm.record_trace = false;
            run(&sc, &sm).map(|o| o.metrics)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let cells = runs
        .chunks(seeds.len())
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mean = chunk.iter().map(|r| r.prr).sum::<f64>() / n;
            let var = if chunk.len() > 1 {
                chunk.iter().map(|r| (r.prr - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let generated: u64 = chunk.iter().map(|r| r.packets_generated).sum();
            let delivered: u64 = chunk.iter().map(|r| r.packets_delivered).sum();
            SweepCell {
                density: chunk[0].density,
                policy: chunk[0].policy,
                runs: chunk.len(),
                mean_prr: mean,
                std_prr: var.sqrt(),
                pooled_prr: if generated == 0 { 1.0 } else { delivered as f64 / generated as f64 },
                mean_per: chunk.iter().map(|r| r.per).sum::<f64>() / n,
                mean_switches: chunk.iter().map(|r| f64::from(r.relay_switches)).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(SweepResult { cells, runs })
}

/// Empirical CDF of the pooled per-window PRR samples: `(value, fraction ≤ value)`.
pub fn collect_cdf(metrics: &[RunMetrics]) -> Vec<(f64, f64)> {
    let mut samples: Vec<f64> = metrics.iter().flat_map(|m| m.window_prr_samples.iter().copied()).collect();
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, (i + 1) as f64 / n))
        .collect()
}
