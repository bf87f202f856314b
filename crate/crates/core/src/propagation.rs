//! Link loss decomposition: free-space path loss, building wall penetration
//! and per-vehicle single knife-edge diffraction, plus the mapping from
//! received power to packet success probability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{line_height_at, obstacle_split, segment_footprint_crossings, AntennaPoint};
use crate::scenario::{VehicleId, WorldState};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Loss per building wall penetrated, dB.
pub const WALL_LOSS_DB: f64 = 9.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error("{what} must be positive, got {value}")]
    Domain { what: &'static str, value: f64 },
}

fn require_positive(what: &'static str, value: f64) -> Result<(), PropagationError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(PropagationError::Domain { what, value })
    }
}

/// Radio parameters of the DSRC sidelink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    /// dBm
    pub tx_power: f64,
    /// Hz
    pub carrier_frequency: f64,
    /// dBm
    pub noise_floor: f64,
    /// dBm
    pub receiver_sensitivity: f64,
    /// bit/s
    pub bitrate: f64,
    /// Hz
    pub bandwidth: f64,
    /// Width of the logistic reception curve around the sensitivity, dB.
    pub psr_shape: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            tx_power: 26.0,
            carrier_frequency: 5.9e9,
            noise_floor: -98.0,
            receiver_sensitivity: -94.0,
            bitrate: 6e6,
            bandwidth: 10e6,
            psr_shape: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.carrier_frequency > 0.0 && self.carrier_frequency.is_finite()) {
            return Err(format!("carrier_frequency must be > 0, got {}", self.carrier_frequency));
        }
        if !(self.receiver_sensitivity > self.noise_floor) {
            return Err(format!(
                "receiver_sensitivity ({}) must exceed noise_floor ({})",
                self.receiver_sensitivity, self.noise_floor
            ));
        }
        if !(self.psr_shape > 0.0 && self.psr_shape.is_finite()) {
            return Err(format!("psr_shape must be > 0, got {}", self.psr_shape));
        }
        if !(self.bitrate > 0.0 && self.bandwidth > 0.0) {
            return Err("bitrate and bandwidth must be > 0".into());
        }
        if !self.tx_power.is_finite() {
            return Err("tx_power must be finite".into());
        }
        Ok(())
    }
}

/// Inputs and result of one knife-edge evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffractionParams {
    /// Obstacle peak height above the direct Tx–Rx line, m.
    pub h: f64,
    pub d1: f64,
    pub d2: f64,
    pub nu: f64,
}

impl DiffractionParams {
    pub fn new(h: f64, wavelength: f64, d1: f64, d2: f64) -> Result<Self, PropagationError> {
        Ok(Self {
            h,
            d1,
            d2,
            nu: fresnel_nu(h, wavelength, d1, d2)?,
        })
    }

    pub fn loss(&self) -> f64 {
        knife_edge_loss(self.nu)
    }
}

/// Fresnel–Kirchhoff diffraction parameter ν = h·√((1/λ)(1/d1 + 1/d2)).
pub fn fresnel_nu(h: f64, wavelength: f64, d1: f64, d2: f64) -> Result<f64, PropagationError> {
    require_positive("wavelength", wavelength)?;
    require_positive("d1", d1)?;
    require_positive("d2", d2)?;
    Ok(h * ((1.0 / wavelength) * (1.0 / d1 + 1.0 / d2)).sqrt())
}

/// Single knife-edge loss in dB (ITU-R approximation); zero for ν ≤ 0.
///
/// The curve starts at about 6 dB at ν → 0⁺, so an obstacle that just
/// breaks the line costs a step of ~6 dB.
pub fn knife_edge_loss(nu: f64) -> f64 {
    if nu <= 0.0 {
        return 0.0;
    }
    let x = nu - 0.1;
    6.9 + 20.0 * ((x * x + 1.0).sqrt() + x).log10()
}

/// Free-space path loss 20·log10(4πd/λ), dB.
pub fn free_space_loss(distance: f64, wavelength: f64) -> Result<f64, PropagationError> {
    require_positive("distance", distance)?;
    require_positive("wavelength", wavelength)?;
    Ok(20.0 * (4.0 * std::f64::consts::PI * distance / wavelength).log10())
}

pub fn building_penetration_loss(crossings: u32) -> f64 {
    WALL_LOSS_DB * f64::from(crossings)
}

/// Loss breakdown of one link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub distance: f64,
    pub fspl: f64,
    pub building_loss: f64,
    /// Knife-edge loss of every vehicle that breaks the line, in world order.
    pub vehicle_losses: Vec<(VehicleId, f64)>,
    pub tx_power: f64,
    pub rx_power: f64,
}

impl LinkBudget {
    fn assemble(
        tx_power: f64,
        distance: f64,
        fspl: f64,
        building_loss: f64,
        vehicle_losses: Vec<(VehicleId, f64)>,
    ) -> Self {
        let mut b = Self {
            distance,
            fspl,
            building_loss,
            vehicle_losses,
            tx_power,
            rx_power: 0.0,
        };
        b.rx_power = b.recompute_rx_power();
        b
    }

    /// Received power from the stored terms, in a fixed summation order.
    pub fn recompute_rx_power(&self) -> f64 {
        self.tx_power - self.fspl - self.building_loss - self.total_vehicle_loss()
    }

    pub fn total_vehicle_loss(&self) -> f64 {
        self.vehicle_losses.iter().map(|(_, l)| l).sum()
    }
}

/// Loss budget of the link `tx`→`rx` through the world snapshot, ignoring
/// the vehicles listed in `exclude` (at least the two endpoints).
pub fn link_budget(
    tx: &AntennaPoint,
    rx: &AntennaPoint,
    world: &WorldState,
    params: &ChannelParams,
    exclude: &[VehicleId],
) -> Result<LinkBudget, PropagationError> {
    let wavelength = params.wavelength();
    let distance = tx.position.distance(rx.position);
    let fspl = free_space_loss(distance, wavelength)?;
    let crossings: u32 = world
        .buildings
        .iter()
        .map(|b| segment_footprint_crossings(tx.position, rx.position, &b.footprint) * b.walls_per_crossing)
        .sum();
    let mut vehicle_losses = Vec::new();
    for v in world.vehicles.iter().filter(|v| !exclude.contains(&v.id)) {
        let fp = v.footprint();
        let Some(split) = obstacle_split(tx, rx, &fp) else {
            continue;
        };
        let h = fp.height() - line_height_at(tx, rx, split.peak);
        if h <= 0.0 {
            continue;
        }
        let loss = DiffractionParams::new(h, wavelength, split.d1, split.d2)?.loss();
        vehicle_losses.push((v.id, loss));
    }
    Ok(LinkBudget::assemble(
        params.tx_power,
        distance,
        fspl,
        building_penetration_loss(crossings),
        vehicle_losses,
    ))
}

/// Logistic reception curve centered on the receiver sensitivity.
pub fn packet_success_probability(rx_power: f64, params: &ChannelParams) -> f64 {
    1.0 / (1.0 + (-(rx_power - params.receiver_sensitivity) / params.psr_shape).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Footprint, Point2};
    use crate::scenario::{make_vehicle, Building, Role, VehicleClass, WorldState};

    const LAMBDA: f64 = 0.0508;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn wavelength_is_about_five_centimeters() {
        let p = ChannelParams::default();
        assert!(close(p.wavelength(), SPEED_OF_LIGHT / 5.9e9, 1e-15));
        assert!(close(p.wavelength(), 0.0508, 1e-4));
    }

    #[test]
    fn nu_examples() {
        assert_eq!(fresnel_nu(0.0, LAMBDA, 25.0, 25.0).unwrap(), 0.0);
        // High-precision reference: 3.1372790256907928
        assert!(close(fresnel_nu(2.5, LAMBDA, 25.0, 25.0).unwrap(), 3.137_279_025_690_793, 1e-12));
        let a = fresnel_nu(1.3, LAMBDA, 10.0, 40.0).unwrap();
        let b = fresnel_nu(1.3, LAMBDA, 20.0, 80.0).unwrap();
        assert!(close(b, a / 2f64.sqrt(), 1e-12));
        assert!(fresnel_nu(-1.0, LAMBDA, 10.0, 10.0).unwrap() < 0.0);
    }

    #[test]
    fn nu_domain_errors() {
        assert!(fresnel_nu(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(fresnel_nu(1.0, LAMBDA, 0.0, 1.0).is_err());
        assert!(fresnel_nu(1.0, LAMBDA, 1.0, -2.0).is_err());
    }

    #[test]
    fn knife_edge_examples() {
        assert_eq!(knife_edge_loss(0.1), 6.9);
        // High-precision reference for nu = 3.137: 22.795893752645941
        assert!(close(knife_edge_loss(3.137), 22.795_893_752_645_94, 1e-9));
        assert_eq!(knife_edge_loss(-1.0), 0.0);
        assert_eq!(knife_edge_loss(0.0), 0.0);
    }

    #[test]
    fn knife_edge_is_increasing() {
        let mut prev = knife_edge_loss(1e-6);
        for i in 1..2000 {
            let l = knife_edge_loss(i as f64 * 0.005);
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn fspl_examples() {
        let lambda = ChannelParams::default().wavelength();
        // References: 47.864823454726258, 87.864823454726258
        assert!(close(free_space_loss(1.0, lambda).unwrap(), 47.864_823_454_726_26, 1e-9));
        assert!(close(free_space_loss(100.0, lambda).unwrap(), 87.864_823_454_726_26, 1e-9));
        let a = free_space_loss(37.0, lambda).unwrap();
        let b = free_space_loss(370.0, lambda).unwrap();
        assert!(close(b - a, 20.0, 1e-9));
        assert!(free_space_loss(0.0, lambda).is_err());
    }

    #[test]
    fn building_loss_examples() {
        assert_eq!(building_penetration_loss(0), 0.0);
        assert_eq!(building_penetration_loss(1), 9.6);
        assert_eq!(building_penetration_loss(2), 19.2);
    }

    #[test]
    fn psr_examples() {
        let p = ChannelParams::default();
        assert_eq!(packet_success_probability(-94.0, &p), 0.5);
        assert!(close(packet_success_probability(-90.0, &p), 0.982_013_790_037_908_4, 1e-12));
        assert!(close(packet_success_probability(-98.0, &p), 0.017_986_209_962_091_56, 1e-12));
    }

    fn sedan_at(id: u32, x: f64, y: f64, antenna: f64) -> crate::scenario::VehicleState {
        let mut v = make_vehicle(VehicleId(id), Role::Background, VehicleClass::Sedan, Point2::new(x, y), 0.0, 0.0);
        v.antenna_height = antenna;
        v
    }

    #[test]
    fn los_budget() {
        let a = sedan_at(0, 0.0, 0.0, 1.5);
        let b = sedan_at(1, 100.0, 0.0, 1.5);
        let w = WorldState::from_parts(vec![a.clone(), b.clone()], vec![]);
        let p = ChannelParams::default();
        let lb = link_budget(&a.antenna(), &b.antenna(), &w, &p, &[a.id, b.id]).unwrap();
        assert!(close(lb.rx_power, -61.864_823_454_726_26, 1e-9));
        assert!(lb.vehicle_losses.is_empty());
        assert_eq!(lb.building_loss, 0.0);
    }

    #[test]
    fn truck_shadow_between_15_and_25_db() {
        let a = sedan_at(0, 0.0, 0.0, 1.5);
        let b = sedan_at(1, 50.0, 0.0, 1.5);
        let mut truck = make_vehicle(VehicleId(2), Role::Blocking, VehicleClass::Truck, Point2::new(25.0, 0.0), 1.2, 0.0);
        truck.height = 4.0;
        let w = WorldState::from_parts(vec![a.clone(), b.clone(), truck], vec![]);
        let lb = link_budget(&a.antenna(), &b.antenna(), &w, &ChannelParams::default(), &[a.id, b.id]).unwrap();
        assert_eq!(lb.vehicle_losses.len(), 1);
        let l = lb.vehicle_losses[0].1;
        assert!((15.0..=25.0).contains(&l), "{l}");
    }

    #[test]
    fn low_obstacle_is_free() {
        let a = sedan_at(0, 0.0, 0.0, 1.6);
        let b = sedan_at(1, 50.0, 0.0, 1.6);
        let low = sedan_at(2, 25.0, 0.0, 1.6); // 1.45 m roof below the line
        let w = WorldState::from_parts(vec![a.clone(), b.clone(), low], vec![]);
        let lb = link_budget(&a.antenna(), &b.antenna(), &w, &ChannelParams::default(), &[a.id, b.id]).unwrap();
        assert!(lb.vehicle_losses.is_empty());
    }

    #[test]
    fn walls_and_decomposition() {
        let a = sedan_at(0, -30.0, 0.0, 1.6);
        let b = sedan_at(1, 30.0, 0.0, 1.6);
        let block = Building {
            footprint: Footprint::axis_aligned(Point2::new(-5.0, -5.0), Point2::new(5.0, 5.0), 20.0).unwrap(),
            walls_per_crossing: 1,
        };
        let mut bus = make_vehicle(VehicleId(2), Role::Background, VehicleClass::Bus, Point2::new(15.0, 0.0), 1.57, 0.0);
        bus.height = 3.0;
        let w = WorldState::from_parts(vec![a.clone(), b.clone(), bus], vec![block]);
        let p = ChannelParams::default();
        let lb = link_budget(&a.antenna(), &b.antenna(), &w, &p, &[a.id, b.id]).unwrap();
        assert_eq!(lb.building_loss, 19.2);
        assert_eq!(lb.vehicle_losses.len(), 1);
        assert_eq!(lb.rx_power, lb.recompute_rx_power());
        assert!(lb.fspl >= 0.0 && lb.vehicle_losses.iter().all(|(_, l)| *l >= 0.0));
    }
}
