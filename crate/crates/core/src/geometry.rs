//! Arc-polygon occupancy and the piecewise-linear collision boundary.
//!
//! Each vehicle occupies the axis-aligned set `{ |y| ≤ half_width, x² + y² ≤ r² }`
//! around its centre. The boundary the ego centre must stay above is made of
//! three segments (approach, alongside, return), only one of which is enforced
//! at a given longitudinal offset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("vehicle dimensions must be positive")]
    BadDimensions,
    #[error("maximum heading {0} rad is outside the admissible range")]
    BadHeading(f64),
    #[error("lateral clearance {clearance} is not below the diagonal {diagonal}")]
    Degenerate { clearance: f64, diagonal: f64 },
    #[error("anchor {anchor} does not lie outside the alongside span")]
    AnchorInsideSpan { anchor: f64 },
}

/// Which boundary segment governs a longitudinal offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Ego behind the alongside span: rising segment.
    Approach,
    /// Ego beside the other vehicle: flat segment at the lateral clearance.
    Alongside,
    /// Ego ahead of the alongside span: falling segment.
    Return,
}

impl Phase {
    pub fn index(self) -> u8 {
        match self {
            Phase::Approach => 1,
            Phase::Alongside => 2,
            Phase::Return => 3,
        }
    }

    pub fn from_index(p: u8) -> Option<Self> {
        match p {
            1 => Some(Phase::Approach),
            2 => Some(Phase::Alongside),
            3 => Some(Phase::Return),
            _ => None,
        }
    }
}

/// Derived occupancy geometry. Build with [`OccupancyParams::derive`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyParams {
    pub length: f64,
    pub width: f64,
    /// Half of the rectangle diagonal, m.
    pub half_diagonal: f64,
    /// Angle between the diagonal and the long side, rad.
    pub diagonal_angle: f64,
    pub max_heading: f64,
    /// Half-width of the arc-polygon, m.
    pub half_width: f64,
    /// Minimum lateral separation of the two centres, m.
    pub lateral_clearance: f64,
    /// Start of the alongside span (negative), m.
    pub span_start: f64,
    /// End of the alongside span, m.
    pub span_end: f64,
    pub standstill_gap: f64,
    pub min_headway: f64,
    pub lane_width: f64,
}

/// Raw inputs to [`OccupancyParams::derive`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleGeometry {
    pub length: f64,
    pub width: f64,
    pub max_heading_deg: f64,
    pub standstill_gap: f64,
    pub min_headway: f64,
    pub lane_width: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self {
            length: 4.4,
            width: 1.82,
            max_heading_deg: 5.0,
            standstill_gap: 6.08,
            min_headway: 1.5,
            lane_width: 3.65,
        }
    }
}

impl VehicleGeometry {
    pub fn derive(&self) -> Result<OccupancyParams, GeometryError> {
        OccupancyParams::derive(
            self.length,
            self.width,
            self.max_heading_deg.to_radians(),
            self.standstill_gap,
            self.min_headway,
            self.lane_width,
        )
    }
}

impl OccupancyParams {
    pub fn derive(
        length: f64,
        width: f64,
        max_heading: f64,
        standstill_gap: f64,
        min_headway: f64,
        lane_width: f64,
    ) -> Result<Self, GeometryError> {
        if !(length > 0.0 && width > 0.0 && lane_width > 0.0) {
            return Err(GeometryError::BadDimensions);
        }
        let diagonal = length.hypot(width);
        let half_diagonal = diagonal / 2.0;
        let diagonal_angle = (width / length).atan();
        if !(max_heading >= 0.0 && max_heading < std::f64::consts::FRAC_PI_2 - diagonal_angle) {
            return Err(GeometryError::BadHeading(max_heading));
        }
        let half_width = half_diagonal * (diagonal_angle + max_heading).sin();
        let lateral_clearance = 2.0 * half_width;
        if lateral_clearance >= diagonal {
            return Err(GeometryError::Degenerate { clearance: lateral_clearance, diagonal });
        }
        let span_start = -(diagonal * diagonal - lateral_clearance * lateral_clearance).sqrt();
        Ok(Self {
            length,
            width,
            half_diagonal,
            diagonal_angle,
            max_heading,
            half_width,
            lateral_clearance,
            span_start,
            span_end: -span_start,
            standstill_gap,
            min_headway,
            lane_width,
        })
    }

    /// Far anchors of the approach and return segments for the given speeds.
    pub fn anchors(&self, ego_speed: f64, ov_speed: f64) -> (f64, f64) {
        (-(self.standstill_gap + ego_speed * self.min_headway), self.standstill_gap + ov_speed * self.min_headway)
    }

    /// Boundary line for `phase`; the far anchors sit on the initial lane centre.
    pub fn line(&self, phase: Phase, rear_anchor: f64, front_anchor: f64) -> Result<BoundaryLine, GeometryError> {
        let c = self.lateral_clearance;
        let (slope, intercept) = match phase {
            Phase::Alongside => (0.0, c),
            Phase::Approach => {
                let run = self.span_start - rear_anchor;
                if !(run > 0.0) {
                    return Err(GeometryError::AnchorInsideSpan { anchor: rear_anchor });
                }
                let k = c / run;
                (k, -rear_anchor * k)
            }
            Phase::Return => {
                let run = front_anchor - self.span_end;
                if !(run > 0.0) {
                    return Err(GeometryError::AnchorInsideSpan { anchor: front_anchor });
                }
                let k = -c / run;
                (k, c - self.span_end * k)
            }
        };
        Ok(BoundaryLine { phase, slope, intercept })
    }

    /// Segment governing `rel_x`; the span endpoints belong to the flat segment.
    pub fn phase_at(&self, rel_x: f64) -> Phase {
        if rel_x < self.span_start {
            Phase::Approach
        } else if rel_x > self.span_end {
            Phase::Return
        } else {
            Phase::Alongside
        }
    }

    /// Admissible lateral range of the ego centre imposed by the road edges.
    pub fn road_bounds(&self) -> (f64, f64) {
        (-self.lane_width / 2.0 + self.half_width, 1.5 * self.lane_width - self.half_width)
    }

    /// Whether two arc-polygons whose centres differ by `(dx, dy)` share
    /// interior points. Touching shapes do not overlap.
    pub fn overlap(&self, dx: f64, dy: f64) -> bool {
        if dy.abs() >= self.lateral_clearance {
            return false;
        }
        // The sum of the two chord half-lengths is concave in y and peaks
        // halfway between the centres.
        let r2 = self.half_diagonal * self.half_diagonal;
        let reach = 2.0 * (r2 - dy * dy / 4.0).max(0.0).sqrt();
        dx.abs() < reach
    }

    /// Whether a point relative to a vehicle centre lies inside its occupancy.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        y.abs() <= self.half_width && x * x + y * y <= self.half_diagonal * self.half_diagonal
    }
}

/// Half-plane `slope · rel_x + intercept ≤ rel_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryLine {
    pub phase: Phase,
    pub slope: f64,
    pub intercept: f64,
}

impl BoundaryLine {
    pub fn lower_bound(&self, rel_x: f64) -> f64 {
        self.slope * rel_x + self.intercept
    }

    pub fn satisfied(&self, rel_x: f64, rel_y: f64) -> bool {
        self.lower_bound(rel_x) <= rel_y
    }
}

/// Line for the phase of `rel_x` with anchors built from the given speeds.
pub fn boundary_at(
    params: &OccupancyParams,
    rel_x: f64,
    ego_speed: f64,
    ov_speed: f64,
) -> Result<BoundaryLine, GeometryError> {
    let (rear, front) = params.anchors(ego_speed, ov_speed);
    params.line(params.phase_at(rel_x), rear, front)
}
