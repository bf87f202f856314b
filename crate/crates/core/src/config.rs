//! Flat key-value scenario file.
//!
//! The file is TOML restricted to top-level keys. Scenario keys match
//! [`ScenarioConfig`] field names; radio keys use the names of the radio
//! parameter table (`transmission_power`, `noise_floor`, ...); a handful of
//! simulation and policy keys complete the set. Unknown keys are rejected.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Compression, EngineError, SimConfig};
use crate::relay::{PolicyKind, SecondHopVelocity};
use crate::scenario::{ScenarioConfig, ScenarioError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    // scenario
    #[serde(alias = "spawn_spacing_N", skip_serializing_if = "Option::is_none")]
    pub spawn_spacing_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ego_target_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lane_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocking_vehicle_heights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heavy_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suv_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocking_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocking_head_offset: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ego_start_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_half_extent: Option<f64>,

    // radio
    /// dBm
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transmission_power: Option<f64>,
    /// dBm
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_floor: Option<f64>,
    /// dBm
    #[serde(skip_serializing_if = "Option::is_none")]
    pub receiver_sensitivity: Option<f64>,
    /// bits/s
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bitrate: Option<f64>,
    /// Hz
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carrier_frequency: Option<f64>,
    /// Hz
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Hz
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensor_frequency: Option<f64>,
    /// bytes
    #[serde(skip_serializing_if = "Option::is_none")]
    pub packet_size: Option<u32>,
    /// dB
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psr_shape: Option<f64>,

    // simulation and policy
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compression_rate: Option<u32>,
    /// bits/s; defaults to the compression rate's payload bitrate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_bitrate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retransmissions: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyKind>,
    /// ms
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reselect_window: Option<f64>,
    /// m/s
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// m
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub second_hop_velocity: Option<SecondHopVelocity>,
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &FsPath) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Overlay every key present in the file onto the given configs.
    pub fn apply(&self, sc: &mut ScenarioConfig, sim: &mut SimConfig) -> Result<(), ConfigError> {
        set(&mut sc.spawn_spacing_n, &self.spawn_spacing_n);
        set(&mut sc.ego_target_speed, &self.ego_target_speed);
        set(&mut sc.duration, &self.duration);
        set(&mut sc.seed, &self.seed);
        set(&mut sc.lane_width, &self.lane_width);
        set(&mut sc.blocking_vehicle_heights, &self.blocking_vehicle_heights);
        set(&mut sc.background_speed, &self.background_speed);
        set(&mut sc.heavy_fraction, &self.heavy_fraction);
        set(&mut sc.suv_fraction, &self.suv_fraction);
        set(&mut sc.blocking_speed, &self.blocking_speed);
        set(&mut sc.blocking_head_offset, &self.blocking_head_offset);
        set(&mut sc.ego_start_distance, &self.ego_start_distance);
        set(&mut sc.map_half_extent, &self.map_half_extent);

        let ch = &mut sim.channel;
        set(&mut ch.tx_power, &self.transmission_power);
        set(&mut ch.noise_floor, &self.noise_floor);
        set(&mut ch.receiver_sensitivity, &self.receiver_sensitivity);
        set(&mut ch.bitrate, &self.bitrate);
        set(&mut ch.carrier_frequency, &self.carrier_frequency);
        set(&mut ch.bandwidth, &self.bandwidth);
        set(&mut ch.psr_shape, &self.psr_shape);
        if let Some(f) = self.sensor_frequency {
            if !(f > 0.0 && f.is_finite()) {
                return Err(ConfigError::Parse(format!("sensor_frequency must be > 0, got {f}")));
            }
            sim.sensor_period = 1.0 / f;
        }
        set(&mut sim.packet_size, &self.packet_size);

        if let Some(c) = self.compression_rate {
            sim.set_compression(Compression::try_from(c).map_err(ConfigError::Parse)?);
        }
        set(&mut sim.payload_bitrate, &self.payload_bitrate);
        set(&mut sim.retransmissions, &self.retransmissions);
        set(&mut sim.dt, &self.dt);
        set(&mut sim.policy.kind, &self.policy);
        set(&mut sim.policy.reselect_window, &self.reselect_window);
        set(&mut sim.policy.epsilon, &self.epsilon);
        set(&mut sim.policy.candidate_radius, &self.candidate_radius);
        set(&mut sim.policy.second_hop_velocity, &self.second_hop_velocity);
        sc.validate()?;
        sim.validate()?;
        Ok(())
    }

    /// Every key, filled from resolved configs; parsing and applying the
    /// result onto defaults reproduces them.
    pub fn resolved(sc: &ScenarioConfig, sim: &SimConfig) -> Self {
        Self {
            spawn_spacing_n: Some(sc.spawn_spacing_n),
            ego_target_speed: Some(sc.ego_target_speed),
            duration: Some(sc.duration),
            seed: Some(sc.seed),
            lane_width: Some(sc.lane_width),
            blocking_vehicle_heights: Some(sc.blocking_vehicle_heights.clone()),
            background_speed: Some(sc.background_speed),
            heavy_fraction: Some(sc.heavy_fraction),
            suv_fraction: Some(sc.suv_fraction),
            blocking_speed: Some(sc.blocking_speed),
            blocking_head_offset: Some(sc.blocking_head_offset),
            ego_start_distance: Some(sc.ego_start_distance),
            map_half_extent: Some(sc.map_half_extent),
            transmission_power: Some(sim.channel.tx_power),
            noise_floor: Some(sim.channel.noise_floor),
            receiver_sensitivity: Some(sim.channel.receiver_sensitivity),
            bitrate: Some(sim.channel.bitrate),
            carrier_frequency: Some(sim.channel.carrier_frequency),
            bandwidth: Some(sim.channel.bandwidth),
            sensor_frequency: Some(1.0 / sim.sensor_period),
            packet_size: Some(sim.packet_size),
            psr_shape: Some(sim.channel.psr_shape),
            compression_rate: Some(sim.compression_rate.into()),
            payload_bitrate: Some(sim.payload_bitrate),
            retransmissions: Some(sim.retransmissions),
            dt: Some(sim.dt),
            policy: Some(sim.policy.kind),
            reselect_window: Some(sim.policy.reselect_window),
            epsilon: Some(sim.policy.epsilon),
            candidate_radius: Some(sim.policy.candidate_radius),
            second_hop_velocity: Some(sim.policy.second_hop_velocity),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }
}

/// Parse a config file's text and resolve it over the defaults.
pub fn resolve(text: &str) -> Result<(ScenarioConfig, SimConfig), ConfigError> {
    let mut sc = ScenarioConfig::default();
    let mut sim = SimConfig::default();
    ConfigFile::parse(text)?.apply(&mut sc, &mut sim)?;
    Ok((sc, sim))
}
