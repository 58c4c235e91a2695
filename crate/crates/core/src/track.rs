//! Closed race tracks built from straight and constant-curvature pieces.
//!
//! A track is described by an ordered list of segments and a constant
//! width. Curvature is looked up from a table sampled every `spacing`
//! meters of arc length and linearly interpolated, which keeps `kappa(s)`
//! continuous for the solver's finite-difference linearizations.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Default arc-length spacing of the curvature table, in meters.
pub const DEFAULT_SPACING: f64 = 0.01;

const CLOSURE_TOL_RAD: f64 = 1e-6;
const CLOSURE_TOL_M: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Straight,
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSegment {
    pub kind: SegmentKind,
    pub length: f64,
    /// Signed curvature in 1/m, positive for left turns.
    pub curvature: f64,
}

impl TrackSegment {
    pub fn straight(length: f64) -> Self {
        Self { kind: SegmentKind::Straight, length, curvature: 0.0 }
    }

    pub fn arc(curvature: f64, length: f64) -> Self {
        Self { kind: SegmentKind::Arc, length, curvature }
    }

    fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) || !self.length.is_finite() {
            return Err(Error::InvalidTrack(format!("segment length {} must be positive", self.length)));
        }
        match self.kind {
            SegmentKind::Straight if self.curvature != 0.0 => {
                Err(Error::InvalidTrack("straight segment with nonzero curvature".into()))
            }
            SegmentKind::Arc if self.curvature == 0.0 || !self.curvature.is_finite() => {
                Err(Error::InvalidTrack("arc segment needs a finite nonzero curvature".into()))
            }
            _ => Ok(()),
        }
    }

    /// Heading change across the whole segment.
    pub fn turn(&self) -> f64 {
        self.curvature * self.length
    }
}

/// Cartesian pose of a centerline point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    /// Advance along a constant-curvature piece of length `s`.
    fn advance(&self, curvature: f64, s: f64) -> Pose {
        if curvature == 0.0 {
            Pose {
                x: self.x + s * self.heading.cos(),
                y: self.y + s * self.heading.sin(),
                heading: self.heading,
            }
        } else {
            let h1 = self.heading + curvature * s;
            Pose {
                x: self.x + (h1.sin() - self.heading.sin()) / curvature,
                y: self.y - (h1.cos() - self.heading.cos()) / curvature,
                heading: h1,
            }
        }
    }
}

/// Curvature samples covering the arc-length span a long horizon can reach.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub values: Vec<f64>,
    pub spacing: f64,
    pub origin: f64,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

/// Number of samples in a context window spanning `n_steps * dt * v_max` meters.
pub fn context_len(n_steps: usize, dt: f64, v_max: f64, spacing: f64) -> usize {
    let span = n_steps as f64 * dt * v_max;
    // guard against 2.4 / 0.01 = 240.00000000000003
    ((span / spacing) - 1e-9).ceil().max(0.0) as usize + 1
}

/// Summary returned by [`TrackModel::check`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrackReport {
    pub total_length: f64,
    pub max_abs_curvature: f64,
    pub half_width: f64,
    pub heading_residual: f64,
    pub position_residual: f64,
    pub singularity_margin: f64,
}

impl fmt::Display for TrackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "length_m       {:.6}", self.total_length)?;
        writeln!(f, "max_abs_kappa  {:.6}", self.max_abs_curvature)?;
        writeln!(f, "half_width_m   {:.6}", self.half_width)?;
        writeln!(f, "closure_rad    {:.3e}", self.heading_residual)?;
        writeln!(f, "closure_m      {:.3e}", self.position_residual)?;
        write!(f, "max|kappa|*w   {:.6}", 1.0 - self.singularity_margin)
    }
}

#[derive(Debug, Clone)]
pub struct TrackModel {
    segments: Vec<TrackSegment>,
    half_width: f64,
    total_length: f64,
    spacing: f64,
    /// Arc length at which each segment starts.
    starts: Vec<f64>,
    /// Centerline pose at the start of each segment.
    poses: Vec<Pose>,
    /// kappa at `j * spacing`, j = 0..table.len().
    table: Vec<f64>,
}

impl TrackModel {
    /// Builds a track and validates closure and the Frenet singularity bound.
    pub fn new(segments: Vec<TrackSegment>, half_width: f64) -> Result<Self> {
        Self::with_spacing(segments, half_width, DEFAULT_SPACING)
    }

    pub fn with_spacing(segments: Vec<TrackSegment>, half_width: f64, spacing: f64) -> Result<Self> {
        let track = Self::build_unchecked(segments, half_width, spacing)?;
        let report = track.check();
        if report.heading_residual > CLOSURE_TOL_RAD {
            return Err(Error::InvalidTrack(format!(
                "heading does not close: residual {:.3e} rad",
                report.heading_residual
            )));
        }
        if report.position_residual > CLOSURE_TOL_M {
            return Err(Error::InvalidTrack(format!(
                "centerline does not close: residual {:.3e} m",
                report.position_residual
            )));
        }
        if report.singularity_margin <= 0.0 {
            return Err(Error::InvalidTrack(format!(
                "max |kappa| * half width = {:.4} >= 1, Frenet transform singular inside the track",
                1.0 - report.singularity_margin
            )));
        }
        Ok(track)
    }

    /// Builds without closure checks. Useful for open test geometries.
    pub fn build_unchecked(segments: Vec<TrackSegment>, half_width: f64, spacing: f64) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidTrack("no segments".into()));
        }
        if !(half_width > 0.0) {
            return Err(Error::InvalidTrack(format!("half width {half_width} must be positive")));
        }
        if !(spacing > 0.0) {
            return Err(Error::InvalidTrack(format!("table spacing {spacing} must be positive")));
        }
        for seg in &segments {
            seg.validate()?;
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut poses = Vec::with_capacity(segments.len());
        let mut s = 0.0;
        let mut pose = Pose { x: 0.0, y: 0.0, heading: 0.0 };
        for seg in &segments {
            starts.push(s);
            poses.push(pose);
            s += seg.length;
            pose = pose.advance(seg.curvature, seg.length);
        }
        let total_length = s;
        let n = (total_length / spacing).ceil() as usize;
        let mut table = Vec::with_capacity(n);
        let mut seg_idx = 0;
        for j in 0..n {
            let sj = j as f64 * spacing;
            while seg_idx + 1 < segments.len() && sj >= starts[seg_idx + 1] {
                seg_idx += 1;
            }
            table.push(segments[seg_idx].curvature);
        }
        Ok(Self { segments, half_width, total_length, spacing, starts, poses, table })
    }

    /// Loads one of the circuits shipped with the crate: `train`, `test1` or `test2`.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name {
            "train" => include_str!("../tracks/train.track"),
            "test1" => include_str!("../tracks/test1.track"),
            "test2" => include_str!("../tracks/test2.track"),
            other => return Err(Error::Config(format!("unknown bundled track '{other}'"))),
        };
        text.parse()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        text.parse()
    }

    /// Track that is a single circle of the given radius, traversed counterclockwise.
    pub fn circle(radius: f64, half_width: f64) -> Result<Self> {
        Self::new(vec![TrackSegment::arc(1.0 / radius, 2.0 * PI * radius)], half_width)
    }

    pub fn segments(&self) -> &[TrackSegment] {
        &self.segments
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn max_abs_curvature(&self) -> f64 {
        self.segments.iter().map(|s| s.curvature.abs()).fold(0.0, f64::max)
    }

    /// Maps any progress value onto `[0, L)`.
    pub fn wrap(&self, s: f64) -> f64 {
        let w = s.rem_euclid(self.total_length);
        if w >= self.total_length {
            0.0
        } else {
            w
        }
    }

    /// Interpolated curvature at progress `s` (wrapped around the circuit).
    pub fn curvature(&self, s: f64) -> f64 {
        let s = self.wrap(s);
        let pos = s / self.spacing;
        let j = (pos.floor() as usize).min(self.table.len() - 1);
        let s0 = j as f64 * self.spacing;
        let (k1, s1) = if j + 1 < self.table.len() {
            (self.table[j + 1], s0 + self.spacing)
        } else {
            (self.table[0], self.total_length)
        };
        let t = ((s - s0) / (s1 - s0)).clamp(0.0, 1.0);
        self.table[j] + t * (k1 - self.table[j])
    }

    /// Derivative of the interpolated curvature with respect to progress.
    pub fn curvature_slope(&self, s: f64) -> f64 {
        let s = self.wrap(s);
        let j = ((s / self.spacing).floor() as usize).min(self.table.len() - 1);
        let s0 = j as f64 * self.spacing;
        let (k1, s1) = if j + 1 < self.table.len() {
            (self.table[j + 1], s0 + self.spacing)
        } else {
            (self.table[0], self.total_length)
        };
        (k1 - self.table[j]) / (s1 - s0)
    }

    /// Exact piecewise-constant curvature of the segment containing `s`.
    pub fn segment_curvature(&self, s: f64) -> f64 {
        self.segments[self.segment_index(self.wrap(s))].curvature
    }

    fn segment_index(&self, s: f64) -> usize {
        match self.starts.binary_search_by(|x| x.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }

    /// Curvature samples covering the reach of an `n_steps` horizon at `v_max`.
    pub fn extract_context(&self, s_k: f64, n_steps: usize, dt: f64, v_max: f64) -> ContextWindow {
        let n = context_len(n_steps, dt, v_max, self.spacing);
        let values = (0..n).map(|i| self.curvature(s_k + i as f64 * self.spacing)).collect();
        ContextWindow { values, spacing: self.spacing, origin: self.wrap(s_k) }
    }

    /// Mean curvature over the next `span` meters, sampled on the table grid.
    pub fn mean_curvature_ahead(&self, s_k: f64, span: f64) -> f64 {
        let n = ((span / self.spacing) - 1e-9).ceil().max(0.0) as usize + 1;
        (0..n).map(|i| self.curvature(s_k + i as f64 * self.spacing)).sum::<f64>() / n as f64
    }

    /// Centerline pose at progress `s`.
    pub fn centerline(&self, s: f64) -> Pose {
        let s = self.wrap(s);
        let i = self.segment_index(s);
        self.poses[i].advance(self.segments[i].curvature, s - self.starts[i])
    }

    /// Converts a Frenet pose `(s, d, phi)` into Cartesian `(x, y, heading)`.
    pub fn frenet_to_cartesian(&self, s: f64, d: f64, phi: f64) -> Result<Pose> {
        if d.abs() > self.half_width {
            return Err(Error::OutOfTrack { d, half_width: self.half_width });
        }
        Ok(self.frenet_to_cartesian_unbounded(s, d, phi))
    }

    /// Same as [`Self::frenet_to_cartesian`] but accepts points off the track.
    pub fn frenet_to_cartesian_unbounded(&self, s: f64, d: f64, phi: f64) -> Pose {
        let c = self.centerline(s);
        Pose {
            x: c.x - d * c.heading.sin(),
            y: c.y + d * c.heading.cos(),
            heading: c.heading + phi,
        }
    }

    /// Closure and singularity diagnostics.
    pub fn check(&self) -> TrackReport {
        let turn: f64 = self.segments.iter().map(TrackSegment::turn).sum();
        let turns = (turn / (2.0 * PI)).round();
        let heading_residual = if turns == 0.0 { turn.abs().max(2.0 * PI) } else { (turn - turns * 2.0 * PI).abs() };
        let last = self.segments.len() - 1;
        let end = self.poses[last].advance(self.segments[last].curvature, self.segments[last].length);
        let position_residual = end.x.hypot(end.y);
        let max_k = self.max_abs_curvature();
        TrackReport {
            total_length: self.total_length,
            max_abs_curvature: max_k,
            half_width: self.half_width,
            heading_residual,
            position_residual,
            singularity_margin: 1.0 - max_k * self.half_width,
        }
    }
}

impl FromStr for TrackModel {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut width = None;
        let mut spacing = DEFAULT_SPACING;
        let mut segments = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::TrackParse { line: lineno + 1, msg };
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let nums: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|e| err(format!("bad number '{p}': {e}"))))
                .collect::<Result<_>>()?;
            let expect = |n: usize| {
                if nums.len() == n {
                    Ok(())
                } else {
                    Err(err(format!("'{key}' takes {n} value(s), got {}", nums.len())))
                }
            };
            match key {
                "width" => {
                    expect(1)?;
                    width = Some(nums[0]);
                }
                "spacing" => {
                    expect(1)?;
                    spacing = nums[0];
                }
                "straight" => {
                    expect(1)?;
                    segments.push(TrackSegment::straight(nums[0]));
                }
                "arc" => {
                    expect(2)?;
                    segments.push(TrackSegment::arc(nums[0], nums[1]));
                }
                other => return Err(err(format!("unknown directive '{other}'"))),
            }
        }
        let width = width.ok_or_else(|| Error::TrackParse { line: 0, msg: "missing 'width'".into() })?;
        TrackModel::with_spacing(segments, width / 2.0, spacing)
    }
}

impl fmt::Display for TrackModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "width {}", 2.0 * self.half_width)?;
        if self.spacing != DEFAULT_SPACING {
            writeln!(f, "spacing {}", self.spacing)?;
        }
        for seg in &self.segments {
            match seg.kind {
                SegmentKind::Straight => writeln!(f, "straight {}", seg.length)?,
                SegmentKind::Arc => writeln!(f, "arc {} {}", seg.curvature, seg.length)?,
            }
        }
        Ok(())
    }
}
