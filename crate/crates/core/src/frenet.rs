//! Arc-length parameterized reference paths and projection to Frenet
//! coordinates: longitudinal distance `s` and signed lateral offset `d`
//! (positive to the left of the tangent).
//!
//! Projection picks the nearest segment (smallest index on ties). `s` is
//! clamped to `[0, length]`; `d` is the perpendicular offset from the chosen
//! segment's supporting line. With the segment index frozen both are affine
//! in the point coordinates, see [`Linearization`].

use thiserror::Error;

use crate::scene::MapPolyline;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrenetError {
    #[error("reference path needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("duplicate consecutive points at index {0}")]
    DuplicatePoint(usize),
    #[error("arc length {s} outside [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
}

pub type Result<T> = std::result::Result<T, FrenetError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrenetCoord {
    pub s: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefPath {
    vertices: Vec<[f64; 2]>,
    cum_s: Vec<f64>,
    seg_dir: Vec<[f64; 2]>,
}

/// Result of projecting one point, with the frozen segment assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub coord: FrenetCoord,
    pub segment: usize,
    /// The foot point was clamped to a segment end, so `s` is locally constant.
    pub clamped: bool,
}

/// Affine form of `(s, d)` around a frozen segment assignment:
/// `s = s0 + s_grad · p`, `d = d0 + d_grad · p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub s0: f64,
    pub s_grad: [f64; 2],
    pub d0: f64,
    pub d_grad: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryProjection {
    pub s: Vec<f64>,
    pub d: Vec<f64>,
    pub segments: Vec<usize>,
    pub linear: Vec<Linearization>,
}

impl RefPath {
    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        if points.len() < 2 {
            return Err(FrenetError::TooFewPoints(points.len()));
        }
        let mut cum_s = vec![0.0];
        let mut seg_dir = Vec::with_capacity(points.len() - 1);
        for (i, w) in points.windows(2).enumerate() {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            let len = dx.hypot(dy);
            if len == 0.0 {
                return Err(FrenetError::DuplicatePoint(i + 1));
            }
            seg_dir.push([dx / len, dy / len]);
            cum_s.push(cum_s[i] + len);
        }
        Ok(Self {
            vertices: points.to_vec(),
            cum_s,
            seg_dir,
        })
    }

    pub fn from_polyline(polyline: &MapPolyline) -> Result<Self> {
        Self::from_points(&polyline.points)
    }

    /// Concatenate polylines end to end, merging a shared joint point.
    pub fn from_chain<'a>(polylines: impl IntoIterator<Item = &'a MapPolyline>) -> Result<Self> {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for p in polylines {
            for &q in &p.points {
                if pts.last() != Some(&q) {
                    pts.push(q);
                }
            }
        }
        Self::from_points(&pts)
    }

    /// Follow a successor chain: each later polyline contributes only the
    /// vertices beyond the projection of the path's current end onto it, so
    /// a lane that joins another mid-way does not double back.
    pub fn from_joined<'a>(polylines: impl IntoIterator<Item = &'a MapPolyline>) -> Result<Self> {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for p in polylines {
            match pts.last() {
                None => pts.extend_from_slice(&p.points),
                Some(&last) => {
                    let next = Self::from_polyline(p)?;
                    let join = next.project(last).s;
                    pts.extend(
                        next.vertices
                            .iter()
                            .zip(&next.cum_s)
                            .filter(|(_, &s)| s > join + 1e-6)
                            .map(|(v, _)| *v),
                    );
                }
            }
        }
        Self::from_points(&pts)
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn cum_s(&self) -> &[f64] {
        &self.cum_s
    }

    pub fn seg_dir(&self) -> &[[f64; 2]] {
        &self.seg_dir
    }

    pub fn length(&self) -> f64 {
        *self.cum_s.last().expect("at least two vertices")
    }

    fn segment_len(&self, k: usize) -> f64 {
        self.cum_s[k + 1] - self.cum_s[k]
    }

    pub fn project(&self, p: [f64; 2]) -> FrenetCoord {
        self.project_detailed(p).coord
    }

    pub fn project_detailed(&self, p: [f64; 2]) -> Projection {
        let mut best = (f64::INFINITY, 0usize, 0.0f64, false);
        for k in 0..self.seg_dir.len() {
            let v = self.vertices[k];
            let t = self.seg_dir[k];
            let (rx, ry) = (p[0] - v[0], p[1] - v[1]);
            let raw = rx * t[0] + ry * t[1];
            let len = self.segment_len(k);
            let u = raw.clamp(0.0, len);
            let dist2 = (rx - u * t[0]).powi(2) + (ry - u * t[1]).powi(2);
            if dist2 < best.0 {
                best = (dist2, k, u, raw < 0.0 || raw > len);
            }
        }
        let (_, k, u, clamped) = best;
        let v = self.vertices[k];
        let t = self.seg_dir[k];
        let d = t[0] * (p[1] - v[1]) - t[1] * (p[0] - v[0]);
        Projection {
            coord: FrenetCoord {
                s: self.cum_s[k] + u,
                d,
            },
            segment: k,
            clamped,
        }
    }

    /// Affine coefficients of `(s, d)` at `p` for a frozen projection.
    pub fn linearize(&self, proj: &Projection) -> Linearization {
        let k = proj.segment;
        let v = self.vertices[k];
        let t = self.seg_dir[k];
        let n = [-t[1], t[0]];
        let (s0, s_grad) = if proj.clamped {
            (proj.coord.s, [0.0, 0.0])
        } else {
            (self.cum_s[k] - (t[0] * v[0] + t[1] * v[1]), t)
        };
        Linearization {
            s0,
            s_grad,
            d0: -(n[0] * v[0] + n[1] * v[1]),
            d_grad: n,
        }
    }

    pub fn to_cartesian(&self, c: FrenetCoord) -> Result<[f64; 2]> {
        let length = self.length();
        if !(0.0..=length).contains(&c.s) {
            return Err(FrenetError::OutOfRange { s: c.s, length });
        }
        // last segment whose start is <= s
        let k = match self.cum_s.partition_point(|&x| x <= c.s) {
            0 => 0,
            i => (i - 1).min(self.seg_dir.len() - 1),
        };
        let v = self.vertices[k];
        let t = self.seg_dir[k];
        let u = c.s - self.cum_s[k];
        Ok([v[0] + u * t[0] - c.d * t[1], v[1] + u * t[1] + c.d * t[0]])
    }

    pub fn project_trajectory(&self, traj: &[[f64; 2]]) -> TrajectoryProjection {
        let mut out = TrajectoryProjection {
            s: Vec::with_capacity(traj.len()),
            d: Vec::with_capacity(traj.len()),
            segments: Vec::with_capacity(traj.len()),
            linear: Vec::with_capacity(traj.len()),
        };
        for &p in traj {
            let proj = self.project_detailed(p);
            out.s.push(proj.coord.s);
            out.d.push(proj.coord.d);
            out.segments.push(proj.segment);
            out.linear.push(self.linearize(&proj));
        }
        out
    }
}

/// Build the reference path of a map polyline.
pub fn build_ref_path(polyline: &MapPolyline) -> Result<RefPath> {
    RefPath::from_polyline(polyline)
}
