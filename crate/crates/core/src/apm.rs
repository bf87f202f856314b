//! Abstract perception matrices (APMs) and the fusion-trigger pipeline.
//!
//! A vehicle bins its point cloud into an `m × n` grid of `k`-meter cells
//! anchored at its own pose. The consumer scans its matrix with square
//! filter windows to find blind zones, maps those zones into each provider's
//! frame, and sums the provider's cell counts over the overlap to score how
//! much a fusion session would help. See `docs/apm-wire-format.md` for the
//! byte layout produced by [`serialize_apm`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{cast_rays, Footprint, Point2, Vec2};
use crate::scenario::{VehicleId, VehicleState, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApmError {
    #[error("grid needs k > 0 and m, n >= 1 (k={k}, m={m}, n={n})")]
    InvalidGrid { k: f64, m: usize, n: usize },
    #[error("filter window {window} does not fit a {m}x{n} grid")]
    WindowTooLarge { window: usize, m: usize, n: usize },
}

/// A rigid 2D pose: origin plus heading (radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub origin: Point2,
    pub heading: f64,
}

impl Pose {
    pub const WORLD: Pose = Pose {
        origin: Point2::ORIGIN,
        heading: 0.0,
    };

    pub fn new(origin: Point2, heading: f64) -> Self {
        Self { origin, heading }
    }

    /// World point → coordinates in this pose's frame.
    pub fn to_local(&self, p: Point2) -> Point2 {
        let v = (p - self.origin).rotate(-self.heading);
        Point2::new(v.x, v.y)
    }

    /// Local coordinates → world point.
    pub fn to_world(&self, p: Point2) -> Point2 {
        self.origin + Vec2::new(p.x, p.y).rotate(self.heading)
    }
}

/// Placement and shape of a grid: pose of its center, cell side `k`,
/// `m` rows along the local y axis and `n` columns along the local x axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub center: Point2,
    pub heading: f64,
    pub k: f64,
    pub m: usize,
    pub n: usize,
}

impl GridFrame {
    pub fn new(center: Point2, heading: f64, k: f64, m: usize, n: usize) -> Result<Self, ApmError> {
        if !(k > 0.0 && k.is_finite()) || m == 0 || n == 0 {
            return Err(ApmError::InvalidGrid { k, m, n });
        }
        Ok(Self {
            center,
            heading,
            k,
            m,
            n,
        })
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.center, self.heading)
    }

    pub fn len(&self) -> usize {
        self.m * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn half_width(&self) -> f64 {
        self.n as f64 * self.k / 2.0
    }

    fn half_height(&self) -> f64 {
        self.m as f64 * self.k / 2.0
    }

    /// Cell `(row, col)` containing a local point, if inside the extent.
    pub fn cell_of_local(&self, p: Point2) -> Option<(usize, usize)> {
        let col = ((p.x + self.half_width()) / self.k).floor();
        let row = ((p.y + self.half_height()) / self.k).floor();
        if col >= 0.0 && row >= 0.0 && (col as usize) < self.n && (row as usize) < self.m {
            Some((row as usize, col as usize))
        } else {
            None
        }
    }

    pub fn cell_of_world(&self, p: Point2) -> Option<(usize, usize)> {
        self.cell_of_local(self.pose().to_local(p))
    }

    pub fn cell_center_local(&self, row: usize, col: usize) -> Point2 {
        Point2::new(
            (col as f64 + 0.5) * self.k - self.half_width(),
            (row as f64 + 0.5) * self.k - self.half_height(),
        )
    }

    pub fn cell_center_world(&self, row: usize, col: usize) -> Point2 {
        self.pose().to_world(self.cell_center_local(row, col))
    }

    /// The cell square as a world-frame prism of the given height.
    pub fn cell_footprint(&self, row: usize, col: usize, height: f64) -> Footprint {
        Footprint::oriented_box(self.cell_center_world(row, col), self.heading, self.k, self.k, height)
            .expect("grid cells are valid squares")
    }

    /// Inclusive (row, col) index ranges covering a local-frame box, clamped to the grid.
    fn cell_range_local(&self, min: Point2, max: Point2) -> Option<((usize, usize), (usize, usize))> {
        let clamp = |v: f64, hi: usize| -> isize { (v.floor() as isize).clamp(-1, hi as isize) };
        let c0 = clamp((min.x + self.half_width()) / self.k, self.n);
        let c1 = clamp((max.x + self.half_width()) / self.k, self.n);
        let r0 = clamp((min.y + self.half_height()) / self.k, self.m);
        let r1 = clamp((max.y + self.half_height()) / self.k, self.m);
        let (c0, r0) = (c0.max(0), r0.max(0));
        let (c1, r1) = (c1.min(self.n as isize - 1), r1.min(self.m as isize - 1));
        if c0 > c1 || r0 > r1 {
            return None;
        }
        Some(((r0 as usize, r1 as usize), (c0 as usize, c1 as usize)))
    }
}

/// Abstract perception matrix: per-cell point counts in the source's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Apm {
    pub frame: GridFrame,
    pub source_id: u32,
    /// Seconds.
    pub timestamp: f64,
    /// Row-major, `m * n` entries.
    pub cells: Vec<u32>,
}

impl Apm {
    pub fn zeros(frame: GridFrame, source_id: u32, timestamp: f64) -> Self {
        Self {
            frame,
            source_id,
            timestamp,
            cells: vec![0; frame.len()],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.frame.n + col]
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().map(|&c| u64::from(c)).sum()
    }
}

/// Bin world-frame samples into a new APM; samples outside the extent are pruned.
pub fn build_apm(samples: &[Point2], frame: GridFrame, source_id: u32, timestamp: f64) -> Apm {
    let mut apm = Apm::zeros(frame, source_id, timestamp);
    let pose = frame.pose();
    for &p in samples {
        if let Some((r, c)) = frame.cell_of_local(pose.to_local(p)) {
            let cell = &mut apm.cells[r * frame.n + c];
            *cell = cell.saturating_add(1);
        }
    }
    apm
}

/// Region of deficient perception, `center` and `range` in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindZone {
    pub center: Point2,
    pub range: f64,
}

/// Locate blind zones: every `w × w` window placement whose mean count is
/// below `t1` marks its cells; 4-connected groups of marked cells become one
/// zone each, reported (world frame) by their bounding rectangle's center and
/// half-diagonal.
pub fn find_blind_zones(apm: &Apm, t1: f64, window_sizes: &[usize]) -> Result<Vec<BlindZone>, ApmError> {
    let GridFrame { m, n, k, .. } = apm.frame;
    for &w in window_sizes {
        if w == 0 || w > m.min(n) {
            return Err(ApmError::WindowTooLarge { window: w, m, n });
        }
    }
    // Summed-area table with a zero border.
    let mut sat = vec![0u64; (m + 1) * (n + 1)];
    for r in 0..m {
        for c in 0..n {
            sat[(r + 1) * (n + 1) + c + 1] = u64::from(apm.get(r, c)) + sat[r * (n + 1) + c + 1]
                + sat[(r + 1) * (n + 1) + c]
                - sat[r * (n + 1) + c];
        }
    }
    let window_sum = |r: usize, c: usize, w: usize| {
        sat[(r + w) * (n + 1) + c + w] + sat[r * (n + 1) + c] - sat[r * (n + 1) + c + w] - sat[(r + w) * (n + 1) + c]
    };
    let mut marked = vec![false; m * n];
    for &w in window_sizes {
        let area = (w * w) as f64;
        for r in 0..=(m - w) {
            for c in 0..=(n - w) {
                if (window_sum(r, c, w) as f64) / area < t1 {
                    for rr in r..r + w {
                        marked[rr * n + c..rr * n + c + w].fill(true);
                    }
                }
            }
        }
    }

    let mut zones = Vec::new();
    let mut seen = vec![false; m * n];
    let mut stack = Vec::new();
    for start in 0..m * n {
        if !marked[start] || seen[start] {
            continue;
        }
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / n, idx % n);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            let mut visit = |j: usize| {
                if marked[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(idx - n);
            }
            if r + 1 < m {
                visit(idx + n);
            }
            if c > 0 {
                visit(idx - 1);
            }
            if c + 1 < n {
                visit(idx + 1);
            }
        }
        let lo = apm.frame.cell_center_local(r0, c0);
        let hi = apm.frame.cell_center_local(r1, c1);
        let center_local = Point2::new(0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y));
        let width = (c1 - c0 + 1) as f64 * k;
        let height = (r1 - r0 + 1) as f64 * k;
        zones.push(BlindZone {
            center: apm.frame.pose().to_world(center_local),
            range: 0.5 * width.hypot(height),
        });
    }
    Ok(zones)
}

/// Re-express a zone given in frame `from` in frame `to`.
pub fn transform_zone(zone: &BlindZone, from: &Pose, to: &Pose) -> BlindZone {
    BlindZone {
        center: to.to_local(from.to_world(zone.center)),
        range: zone.range,
    }
}

/// Sum of (cell count × k²) over provider cells whose centers lie within the
/// zone; `zone` must already be expressed in the provider's local frame.
pub fn perception_benefit(zone: &BlindZone, provider: &Apm) -> f64 {
    let f = &provider.frame;
    let r = zone.range;
    let Some(((r0, r1), (c0, c1))) = f.cell_range_local(
        Point2::new(zone.center.x - r, zone.center.y - r),
        Point2::new(zone.center.x + r, zone.center.y + r),
    ) else {
        return 0.0;
    };
    let mut sum = 0u64;
    for row in r0..=r1 {
        for col in c0..=c1 {
            if f.cell_center_local(row, col).distance(zone.center) <= r + crate::geometry::EPS {
                sum += u64::from(provider.get(row, col));
            }
        }
    }
    sum as f64 * f.k * f.k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenefitReport {
    pub candidate_id: VehicleId,
    pub benefit: f64,
    pub triggered: bool,
}

impl BenefitReport {
    pub fn new(candidate_id: VehicleId, benefit: f64, t2: f64) -> Self {
        Self {
            candidate_id,
            benefit,
            triggered: benefit >= t2,
        }
    }
}

/// Providers worth a fusion session: benefit ≥ `t2`, best first, ties by id.
pub fn should_trigger_fusion(reports: &[BenefitReport], t2: f64) -> Vec<VehicleId> {
    let mut hits: Vec<&BenefitReport> = reports.iter().filter(|r| r.benefit >= t2).collect();
    hits.sort_by(|a, b| b.benefit.total_cmp(&a.benefit).then(a.candidate_id.cmp(&b.candidate_id)));
    hits.into_iter().map(|r| r.candidate_id).collect()
}

/// Score each provider APM against the consumer's blind zones.
pub fn assess_providers(
    consumer: &Apm,
    providers: &[(VehicleId, &Apm)],
    params: &ApmParams,
) -> Result<Vec<BenefitReport>, ApmError> {
    let zones = find_blind_zones(consumer, params.t1, &params.window_sizes)?;
    Ok(providers
        .iter()
        .map(|(id, apm)| {
            let to = apm.frame.pose();
            let benefit = zones
                .iter()
                .map(|z| perception_benefit(&transform_zone(z, &Pose::WORLD, &to), apm))
                .sum();
            BenefitReport::new(*id, benefit, params.t2)
        })
        .collect())
}

/// Grid, sensing and trigger settings of the matching pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApmParams {
    pub k: f64,
    pub m: usize,
    pub n: usize,
    pub t1: f64,
    pub window_sizes: Vec<usize>,
    pub t2: f64,
    pub rays: usize,
    pub max_range: f64,
    pub lidar_step: f64,
}

impl Default for ApmParams {
    fn default() -> Self {
        let k = 4.0;
        Self {
            k,
            m: 20,
            n: 20,
            t1: 1.0,
            window_sizes: vec![3, 5, 7],
            t2: 25.0 * k * k,
            rays: 360,
            max_range: 60.0,
            lidar_step: 1.0,
        }
    }
}

impl ApmParams {
    pub fn frame_for(&self, v: &VehicleState) -> Result<GridFrame, ApmError> {
        GridFrame::new(v.position, v.heading, self.k, self.m, self.n)
    }
}

/// Per-cell height and motion summary attached to an APM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MobilityHeightCell {
    pub max_height: f64,
    pub mean_velocity: Vec2,
    pub sample_count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobilityHeightLayer {
    pub frame: GridFrame,
    /// Row-major, `m * n` entries.
    pub cells: Vec<MobilityHeightCell>,
}

impl MobilityHeightLayer {
    pub fn get(&self, row: usize, col: usize) -> &MobilityHeightCell {
        &self.cells[row * self.frame.n + col]
    }
}

/// For every cell: tallest vehicle overlapping it, mean velocity of those
/// vehicles and how many there are.
pub fn build_mobility_height_layer(world: &WorldState, frame: &GridFrame) -> MobilityHeightLayer {
    let mut height = vec![0.0f64; frame.len()];
    let mut vel_sum = vec![Vec2::ZERO; frame.len()];
    let mut count = vec![0u32; frame.len()];
    let pose = frame.pose();
    for v in &world.vehicles {
        let fp = v.footprint();
        let local: Vec<Point2> = fp.vertices().iter().map(|&p| pose.to_local(p)).collect();
        let bb = crate::geometry::Aabb::of_points(&local);
        let Some(((r0, r1), (c0, c1))) = frame.cell_range_local(bb.min, bb.max) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                if !frame.cell_footprint(row, col, 1.0).overlaps(&fp) {
                    continue;
                }
                let i = row * frame.n + col;
                height[i] = height[i].max(v.height);
                vel_sum[i] = vel_sum[i] + v.velocity;
                count[i] += 1;
            }
        }
    }
    let cells = (0..frame.len())
        .map(|i| match count[i] {
            0 => MobilityHeightCell::default(),
            c => MobilityHeightCell {
                max_height: height[i],
                mean_velocity: vel_sum[i] * (1.0 / f64::from(c)),
                sample_count: c,
            },
        })
        .collect();
    MobilityHeightLayer { frame: *frame, cells }
}

/// Synthetic point cloud of `sensor`: rays cast against every other vehicle
/// and every building.
pub fn synth_perception(
    world: &WorldState,
    sensor: &VehicleState,
    rays: usize,
    max_range: f64,
    step: f64,
) -> Vec<Point2> {
    let reach = max_range + 20.0;
    let vehicle_fps: Vec<Footprint> = world
        .vehicles
        .iter()
        .filter(|v| v.id != sensor.id && v.position.distance(sensor.position) <= reach)
        .map(VehicleState::footprint)
        .collect();
    let obstacles: Vec<&Footprint> = vehicle_fps
        .iter()
        .chain(world.buildings.iter().map(|b| &b.footprint))
        .collect();
    cast_rays(sensor.position, &obstacles, rays, max_range, step)
}

// ---- wire format ----

/// Fixed header length of the APM wire format, bytes.
pub const HEADER_LEN: usize = 53;
/// Bytes per cell of the count matrix.
pub const CELL_BYTES: usize = 4;
/// Bytes per cell of the optional mobility-height layer.
pub const LAYER_CELL_BYTES: usize = 6;
const FLAG_LAYER: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("buffer truncated at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid grid dimensions at offset {offset}")]
    InvalidDimensions { offset: usize },
    #[error("invalid cell size at offset {offset}")]
    InvalidResolution { offset: usize },
    #[error("unknown flag bits {flags:#04x} at offset {offset}")]
    UnknownFlags { offset: usize, flags: u8 },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match *self {
            DecodeError::Truncated { offset, .. }
            | DecodeError::InvalidDimensions { offset }
            | DecodeError::InvalidResolution { offset }
            | DecodeError::UnknownFlags { offset, .. }
            | DecodeError::TrailingBytes { offset, .. } => offset,
        }
    }
}

fn quantize(value: f64, scale: f64, lo: f64, hi: f64) -> f64 {
    (value * scale).round().clamp(lo, hi)
}

/// Encode an APM (and optionally its mobility-height layer), big-endian.
///
/// Heights travel as unsigned centimeters and velocities as signed cm/s, so
/// the layer round-trips only to that resolution.
pub fn serialize_apm(apm: &Apm, layer: Option<&MobilityHeightLayer>) -> Vec<u8> {
    let f = &apm.frame;
    let cells = f.len();
    let mut out = Vec::with_capacity(
        HEADER_LEN + cells * CELL_BYTES + layer.map_or(0, |_| cells * LAYER_CELL_BYTES),
    );
    out.extend_from_slice(&f.center.x.to_be_bytes());
    out.extend_from_slice(&f.center.y.to_be_bytes());
    out.extend_from_slice(&f.heading.to_be_bytes());
    out.extend_from_slice(&f.k.to_be_bytes());
    out.extend_from_slice(&(f.m as u32).to_be_bytes());
    out.extend_from_slice(&(f.n as u32).to_be_bytes());
    out.extend_from_slice(&apm.source_id.to_be_bytes());
    out.extend_from_slice(&apm.timestamp.to_be_bytes());
    out.push(if layer.is_some() { FLAG_LAYER } else { 0 });
    for c in &apm.cells {
        out.extend_from_slice(&c.to_be_bytes());
    }
    if let Some(layer) = layer {
        assert_eq!(layer.cells.len(), cells, "layer shape must match the APM");
        for cell in &layer.cells {
            let h = quantize(cell.max_height, 100.0, 0.0, f64::from(u16::MAX)) as u16;
            let vx = quantize(cell.mean_velocity.x, 100.0, f64::from(i16::MIN), f64::from(i16::MAX)) as i16;
            let vy = quantize(cell.mean_velocity.y, 100.0, f64::from(i16::MIN), f64::from(i16::MAX)) as i16;
            out.extend_from_slice(&h.to_be_bytes());
            out.extend_from_slice(&vx.to_be_bytes());
            out.extend_from_slice(&vy.to_be_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: end - self.buf.len(),
            });
        }
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(a)
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        self.take::<8>().map(f64::from_be_bytes)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.take::<4>().map(u32::from_be_bytes)
    }
}

/// Decode a buffer produced by [`serialize_apm`].
///
/// A decoded layer cell reports `sample_count` 1 when it carries any height
/// or motion (the count itself is not transmitted).
pub fn deserialize_apm(bytes: &[u8]) -> Result<(Apm, Option<MobilityHeightLayer>), DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let cx = r.f64()?;
    let cy = r.f64()?;
    let heading = r.f64()?;
    let k_at = r.pos;
    let k = r.f64()?;
    let dims_at = r.pos;
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let source_id = r.u32()?;
    let timestamp = r.f64()?;
    let flags_at = r.pos;
    let [flags] = r.take::<1>()?;
    if flags & !FLAG_LAYER != 0 {
        return Err(DecodeError::UnknownFlags {
            offset: flags_at,
            flags,
        });
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(DecodeError::InvalidResolution { offset: k_at });
    }
    let cells = m.checked_mul(n).filter(|&c| c > 0).ok_or(DecodeError::InvalidDimensions { offset: dims_at })?;
    let body = cells
        .checked_mul(CELL_BYTES + if flags & FLAG_LAYER != 0 { LAYER_CELL_BYTES } else { 0 })
        .ok_or(DecodeError::InvalidDimensions { offset: dims_at })?;
    if bytes.len() - r.pos < body {
        return Err(DecodeError::Truncated {
            offset: r.pos,
            needed: body - (bytes.len() - r.pos),
        });
    }
    let frame = GridFrame {
        center: Point2::new(cx, cy),
        heading,
        k,
        m,
        n,
    };
    let mut counts = Vec::with_capacity(cells);
    for _ in 0..cells {
        counts.push(r.u32()?);
    }
    let apm = Apm {
        frame,
        source_id,
        timestamp,
        cells: counts,
    };
    let layer = if flags & FLAG_LAYER != 0 {
        let mut lc = Vec::with_capacity(cells);
        for _ in 0..cells {
            let h = u16::from_be_bytes(r.take::<2>()?);
            let vx = i16::from_be_bytes(r.take::<2>()?);
            let vy = i16::from_be_bytes(r.take::<2>()?);
            let occupied = h != 0 || vx != 0 || vy != 0;
            lc.push(MobilityHeightCell {
                max_height: f64::from(h) / 100.0,
                mean_velocity: Vec2::new(f64::from(vx) / 100.0, f64::from(vy) / 100.0),
                sample_count: u32::from(occupied),
            });
        }
        Some(MobilityHeightLayer { frame, cells: lc })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    Ok((apm, layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{make_vehicle, Role, VehicleClass};
    use std::f64::consts::FRAC_PI_2;

    fn frame(m: usize, n: usize, k: f64) -> GridFrame {
        GridFrame::new(Point2::ORIGIN, 0.0, k, m, n).unwrap()
    }

    #[test]
    fn empty_samples_give_zero_matrix() {
        let apm = build_apm(&[], frame(20, 20, 2.0), 0, 0.0);
        assert_eq!(apm.total(), 0);
    }

    #[test]
    fn center_sample_lands_in_one_cell() {
        let apm = build_apm(&[Point2::new(0.3, 0.2)], frame(20, 20, 2.0), 0, 0.0);
        assert_eq!(apm.total(), 1);
        assert_eq!(apm.cells.iter().filter(|&&c| c == 1).count(), 1);
        assert_eq!(apm.get(10, 10), 1);
    }

    #[test]
    fn out_of_extent_samples_are_pruned() {
        let apm = build_apm(
            &[Point2::new(100.0, 0.0), Point2::new(20.0, 0.0), Point2::new(-20.0, -20.0)],
            frame(20, 20, 2.0),
            0,
            0.0,
        );
        // (20, 0) sits on the upper x edge and is excluded; (-20,-20) is the lower corner.
        assert_eq!(apm.total(), 1);
        assert_eq!(apm.get(0, 0), 1);
    }

    #[test]
    fn rotated_frame_binning() {
        // Heading north: local +x is world +y.
        let f = GridFrame::new(Point2::new(10.0, 10.0), FRAC_PI_2, 1.0, 4, 4).unwrap();
        let apm = build_apm(&[Point2::new(10.5, 11.5)], f, 0, 0.0);
        // Local point (1.5, -0.5): col 3, row 1.
        assert_eq!(apm.get(1, 3), 1);
    }

    #[test]
    fn saturated_grid_has_no_zones() {
        let mut apm = Apm::zeros(frame(20, 20, 2.0), 0, 0.0);
        apm.cells.fill(3);
        assert!(find_blind_zones(&apm, 1.0, &[3, 5, 7]).unwrap().is_empty());
    }

    #[test]
    fn empty_grid_is_one_zone() {
        let apm = Apm::zeros(frame(20, 20, 2.0), 0, 0.0);
        let zones = find_blind_zones(&apm, 1.0, &[20]).unwrap();
        assert_eq!(zones.len(), 1);
        assert!(zones[0].center.distance(Point2::ORIGIN) < 1e-12);
        assert!((zones[0].range - 20.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_quadrant_confined() {
        let mut apm = Apm::zeros(frame(20, 20, 2.0), 0, 0.0);
        for r in 0..20 {
            for c in 0..20 {
                if !(r < 10 && c < 10) {
                    apm.cells[r * 20 + c] = 10;
                }
            }
        }
        let zones = find_blind_zones(&apm, 1.0, &[5]).unwrap();
        assert!(!zones.is_empty());
        for z in &zones {
            // Quadrant spans x, y in [-20, 0]; a 5x5 window cannot qualify
            // unless it is mostly inside, so zones stay in the quadrant.
            assert!(z.center.x < 0.0 && z.center.y < 0.0, "{z:?}");
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let apm = Apm::zeros(frame(4, 6, 1.0), 0, 0.0);
        assert_eq!(
            find_blind_zones(&apm, 1.0, &[5]),
            Err(ApmError::WindowTooLarge { window: 5, m: 4, n: 6 })
        );
    }

    #[test]
    fn transform_examples() {
        let z = BlindZone {
            center: Point2::new(3.0, 4.0),
            range: 2.0,
        };
        let p = Pose::new(Point2::new(1.0, 1.0), 0.3);
        assert!(transform_zone(&z, &p, &p).center.distance(z.center) < 1e-12);
        let shifted = transform_zone(&z, &Pose::WORLD, &Pose::new(Point2::new(10.0, 0.0), 0.0));
        assert!(shifted.center.distance(Point2::new(-7.0, 4.0)) < 1e-12);
        // Target frame rotated +90°: world (3,4) -> local (4,-3).
        let rot = transform_zone(&z, &Pose::WORLD, &Pose::new(Point2::ORIGIN, FRAC_PI_2));
        assert!(rot.center.distance(Point2::new(4.0, -3.0)) < 1e-12);
        assert_eq!(rot.range, 2.0);
    }

    #[test]
    fn benefit_examples() {
        let mut apm = Apm::zeros(frame(2, 2, 2.0), 0, 0.0);
        apm.cells = vec![3, 5, 0, 2];
        let z = BlindZone {
            center: Point2::ORIGIN,
            range: 1.5,
        };
        assert_eq!(perception_benefit(&z, &apm), 40.0);
        let far = BlindZone {
            center: Point2::new(50.0, 0.0),
            range: 3.0,
        };
        assert_eq!(perception_benefit(&far, &apm), 0.0);
        let mut doubled = apm.clone();
        doubled.cells.iter_mut().for_each(|c| *c *= 2);
        assert_eq!(perception_benefit(&z, &doubled), 80.0);
    }

    #[test]
    fn trigger_examples() {
        let t2 = 20.0;
        let zero = [BenefitReport::new(VehicleId(1), 0.0, t2)];
        assert!(should_trigger_fusion(&zero, t2).is_empty());
        let reports = [
            BenefitReport::new(VehicleId(2), 10.0, t2),
            BenefitReport::new(VehicleId(1), 40.0, t2),
        ];
        assert_eq!(should_trigger_fusion(&reports, t2), vec![VehicleId(1)]);
        let tied = [
            BenefitReport::new(VehicleId(9), 5.0, 0.0),
            BenefitReport::new(VehicleId(4), 5.0, 0.0),
            BenefitReport::new(VehicleId(7), 0.0, 0.0),
        ];
        assert_eq!(should_trigger_fusion(&tied, 0.0), vec![VehicleId(4), VehicleId(9), VehicleId(7)]);
        assert!(tied[2].triggered);
    }

    #[test]
    fn wire_sizes() {
        let apm = Apm::zeros(frame(20, 20, 2.0), 7, 1.5);
        let bytes = serialize_apm(&apm, None);
        assert_eq!(bytes.len() - HEADER_LEN, 1600);
        let one = Apm::zeros(frame(1, 1, 2.0), 7, 1.5);
        assert_eq!(serialize_apm(&one, None).len(), HEADER_LEN + 4);
    }

    #[test]
    fn wire_documented_example() {
        let mut apm = Apm::zeros(GridFrame::new(Point2::ORIGIN, 0.0, 2.0, 1, 2).unwrap(), 7, 0.0);
        apm.cells = vec![1, 258];
        let hex: String = serialize_apm(&apm, None).iter().map(|b| format!("{b:02x}")).collect();
        let expected = concat!(
            "0000000000000000", "0000000000000000", "0000000000000000", "4000000000000000",
            "00000001", "00000002", "00000007", "0000000000000000", "00",
            "00000001", "00000102",
        );
        assert_eq!(hex, expected);
    }

    #[test]
    fn wire_roundtrip_with_layer() {
        let mut apm = Apm::zeros(frame(2, 3, 0.5), 42, 12.25);
        apm.cells = vec![0, 1, 2, u32::MAX, 77, 5];
        let mut layer = MobilityHeightLayer {
            frame: apm.frame,
            cells: vec![MobilityHeightCell::default(); 6],
        };
        layer.cells[4] = MobilityHeightCell {
            max_height: 4.0,
            mean_velocity: Vec2::new(-8.33, 0.25),
            sample_count: 1,
        };
        let bytes = serialize_apm(&apm, Some(&layer));
        assert_eq!(bytes.len(), HEADER_LEN + 6 * 4 + 6 * 6);
        let (back, back_layer) = deserialize_apm(&bytes).unwrap();
        assert_eq!(back, apm);
        assert_eq!(back_layer.unwrap(), layer);
    }

    #[test]
    fn wire_errors_carry_offsets() {
        let apm = Apm::zeros(frame(2, 2, 1.0), 1, 0.0);
        let bytes = serialize_apm(&apm, None);
        let err = deserialize_apm(&bytes[..10]).unwrap_err();
        assert_eq!(err.offset(), 8);
        let err = deserialize_apm(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, DecodeError::Truncated { offset: HEADER_LEN, .. }));
        let mut bad = bytes.clone();
        bad[52] = 0x80;
        assert!(matches!(deserialize_apm(&bad), Err(DecodeError::UnknownFlags { offset: 52, .. })));
        let mut zero_m = bytes.clone();
        zero_m[32..36].copy_from_slice(&0u32.to_be_bytes());
        assert_eq!(deserialize_apm(&zero_m), Err(DecodeError::InvalidDimensions { offset: 32 }));
        let mut neg_k = bytes.clone();
        neg_k[24..32].copy_from_slice(&(-1.0f64).to_be_bytes());
        assert_eq!(deserialize_apm(&neg_k), Err(DecodeError::InvalidResolution { offset: 24 }));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(deserialize_apm(&long), Err(DecodeError::TrailingBytes { .. })));
    }

    fn world_with(vs: Vec<VehicleState>) -> WorldState {
        WorldState::from_parts(vs, vec![])
    }

    #[test]
    fn layer_empty_world() {
        let layer = build_mobility_height_layer(&world_with(vec![]), &frame(10, 10, 2.0));
        assert!(layer.cells.iter().all(|c| *c == MobilityHeightCell::default()));
    }

    #[test]
    fn layer_truck_covers_cells() {
        // A 10 m x 2.5 m truck covers a 5 x 2 block of 2 m cells when aligned
        // to the grid; shrink it to exactly two cells instead.
        let mut truck = make_vehicle(VehicleId(1), Role::Background, VehicleClass::Truck, Point2::new(2.0, 1.0), 0.0, 5.0);
        truck.length = 3.6;
        truck.width = 1.6;
        let layer = build_mobility_height_layer(&world_with(vec![truck]), &frame(10, 10, 2.0));
        let hits: Vec<usize> = (0..100).filter(|&i| layer.cells[i].sample_count > 0).collect();
        // Cells x in [0,2] and [2,4], y in [0,2]: row 5, cols 5 and 6.
        assert_eq!(hits, vec![55, 56]);
        for i in hits {
            assert_eq!(layer.cells[i].max_height, 4.0);
            assert_eq!(layer.cells[i].mean_velocity, Vec2::new(5.0, 0.0));
        }
    }

    #[test]
    fn layer_mean_velocity() {
        let mut a = make_vehicle(VehicleId(1), Role::Background, VehicleClass::Sedan, Point2::new(1.0, 1.0), 0.0, 10.0);
        let mut b = make_vehicle(VehicleId(2), Role::Background, VehicleClass::Suv, Point2::new(1.0, 1.0), 0.0, 6.0);
        a.length = 1.0;
        a.width = 1.0;
        b.length = 1.0;
        b.width = 1.0;
        let layer = build_mobility_height_layer(&world_with(vec![a, b]), &frame(10, 10, 2.0));
        let cell = layer.get(5, 5);
        assert_eq!(cell.sample_count, 2);
        assert_eq!(cell.mean_velocity, Vec2::new(8.0, 0.0));
        assert_eq!(cell.max_height, 1.75);
    }

    #[test]
    fn perception_open_field_and_shadow() {
        let sensor = make_vehicle(VehicleId(0), Role::Ego, VehicleClass::Sedan, Point2::ORIGIN, 0.0, 0.0);
        let open = world_with(vec![sensor.clone()]);
        let free = synth_perception(&open, &sensor, 36, 30.0, 1.0);
        assert_eq!(free.len(), 36 * 30);
        assert!(free.iter().any(|p| p.y > 29.0) && free.iter().any(|p| p.y < -29.0));

        let blocker = make_vehicle(VehicleId(1), Role::Blocking, VehicleClass::Truck, Point2::new(0.0, 10.0), 0.0, 0.0);
        let shadowed = world_with(vec![sensor.clone(), blocker]);
        let seen = synth_perception(&shadowed, &sensor, 36, 30.0, 1.0);
        assert!(seen.len() < free.len());
        // Nothing beyond the truck's far side on the northern bearing.
        assert!(!seen.iter().any(|p| p.x.abs() < 1.0 && p.y > 11.3));
    }
}
