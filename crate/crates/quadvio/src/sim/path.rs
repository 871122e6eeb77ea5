//! Analytic base paths: circle, rounded square, and figure-8.
//!
//! Each path is a smooth closed curve evaluated on jets, so velocities and
//! accelerations are exact. The circle is traversed at constant speed; the
//! other two use a constant parameter rate whose period matches the requested
//! average speed via a numeric arc-length computation.

use super::jet::Jet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Square,
    Circle,
    Figure8,
}

impl PathKind {
    pub fn name(&self) -> &'static str {
        match self {
            PathKind::Square => "square",
            PathKind::Circle => "circle",
            PathKind::Figure8 => "figure8",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "square" => Some(PathKind::Square),
            "circle" => Some(PathKind::Circle),
            "figure8" => Some(PathKind::Figure8),
            _ => None,
        }
    }

    /// Default scale when the config does not override it: side length for
    /// the square, radius for the circle, long-axis width for the figure-8.
    pub fn default_scale(&self) -> f64 {
        match self {
            PathKind::Square => 8.0,
            PathKind::Circle => 3.0,
            PathKind::Figure8 => 8.0,
        }
    }
}

/// Fourier coefficient of the rounded-square curve.
const SQUARE_BETA: f64 = 0.15;

#[derive(Debug, Clone, Copy)]
pub struct PathModel {
    kind: PathKind,
    /// Shape amplitude (m); meaning depends on the kind.
    amp: f64,
    /// Parameter rate du/dt (rad/s).
    u_rate: f64,
    /// Start point, subtracted so trajectories begin at the origin.
    start: (f64, f64),
}

impl PathModel {
    pub fn new(kind: PathKind, scale: f64, speed: f64) -> PathModel {
        let amp = match kind {
            PathKind::Circle => scale,
            PathKind::Square => scale / (std::f64::consts::SQRT_2 * (1.0 + SQUARE_BETA)),
            PathKind::Figure8 => scale / 2.0,
        };
        let u_rate = match kind {
            PathKind::Circle => speed / amp,
            _ => {
                let length = arc_length(kind, amp);
                2.0 * std::f64::consts::PI * speed / length
            }
        };
        let mut model = PathModel { kind, amp, u_rate, start: (0.0, 0.0) };
        let (x0, y0) = model.raw_position(Jet::constant(0.0));
        model.start = (x0.f, y0.f);
        model
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    /// Time for one full loop (s).
    pub fn lap_time(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.u_rate
    }

    fn raw_position(&self, u: Jet) -> (Jet, Jet) {
        match self.kind {
            PathKind::Circle => {
                // starts at the origin heading +x, circling counterclockwise
                (u.sin() * self.amp, (Jet::constant(1.0) - u.cos()) * self.amp)
            }
            PathKind::Square => {
                let x = (u.cos() + (u * 3.0).cos() * SQUARE_BETA) * self.amp;
                let y = (u.sin() - (u * 3.0).sin() * SQUARE_BETA) * self.amp;
                (x, y)
            }
            PathKind::Figure8 => ((u.sin()) * self.amp, (u * 2.0).sin() * (self.amp / 2.0)),
        }
    }

    /// Planar position at time t with derivatives.
    pub fn position(&self, t: Jet) -> (Jet, Jet) {
        let u = t * self.u_rate;
        let (x, y) = self.raw_position(u);
        (x - Jet::constant(self.start.0), y - Jet::constant(self.start.1))
    }

    /// Position and unit normal at a raw parameter, for placing landmarks.
    pub fn point_and_normal(&self, u: f64) -> ((f64, f64), (f64, f64)) {
        let (x, y) = self.raw_position(Jet::variable(u));
        let norm = (x.d1 * x.d1 + y.d1 * y.d1).sqrt();
        (
            (x.f - self.start.0, y.f - self.start.1),
            (-y.d1 / norm, x.d1 / norm),
        )
    }
}

/// Simpson-rule arc length of one loop (deterministic).
fn arc_length(kind: PathKind, amp: f64) -> f64 {
    let model = PathModel { kind, amp, u_rate: 1.0, start: (0.0, 0.0) };
    let n = 20_000usize;
    let h = 2.0 * std::f64::consts::PI / n as f64;
    let speed = |u: f64| {
        let (x, y) = model.raw_position(Jet::variable(u));
        (x.d1 * x.d1 + y.d1 * y.d1).sqrt()
    };
    let mut sum = speed(0.0) + speed(2.0 * std::f64::consts::PI);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * speed(k as f64 * h);
    }
    sum * h / 3.0
}
