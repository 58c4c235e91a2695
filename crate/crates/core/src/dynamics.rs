//! Discrete-time Frenet-frame vehicle models.
//!
//! Three models share the same Frenet kinematics for progress `s`, lateral
//! offset `d` and relative heading `phi`:
//!
//! * a kinematic bicycle driven by acceleration and steering,
//! * a Pacejka tire model driven by a torque command (simulation variant),
//! * the Pacejka variant with split drive forces and friction used on the
//!   miniature hardware.
//!
//! All models use a forward Euler update with step `dt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this longitudinal speed the tire slip angles are ill-defined.
pub const V_EPS: f64 = 0.05;

/// Smallest admissible Frenet denominator `1 - kappa * d`.
pub const FRENET_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Kinematic,
    PacejkaSim,
    PacejkaHardware,
}

impl ModelKind {
    /// Dimension of the physical state (without controller augmentation).
    pub fn state_dim(self) -> usize {
        match self {
            ModelKind::Kinematic => 4,
            _ => 6,
        }
    }

    pub fn input_dim(self) -> usize {
        2
    }

    /// Index of the forward speed inside the physical state.
    pub fn speed_index(self) -> usize {
        match self {
            ModelKind::Kinematic => 3,
            _ => 4,
        }
    }

    pub fn state_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Kinematic => &["s", "d", "phi", "v"],
            _ => &["s", "d", "phi", "r", "vx", "vy"],
        }
    }

    pub fn input_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Kinematic => &["a", "delta"],
            _ => &["tau", "delta"],
        }
    }
}

/// Vehicle and constraint parameters. Defaults follow the published values
/// for each model; `iz` and `gamma` are not published and are plain
/// estimates that should be overridden when known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub lr: f64,
    pub lf: f64,
    pub mass: f64,
    pub iz: f64,
    pub dt: f64,
    pub half_width: f64,
    pub df: f64,
    pub cf: f64,
    pub bf: f64,
    pub dr: f64,
    pub cr: f64,
    pub br: f64,
    pub cm1: f64,
    pub cm2: f64,
    pub cd0: f64,
    pub cd1: f64,
    pub cd2: f64,
    pub croll: f64,
    pub gamma: f64,
    /// Bound on acceleration (kinematic) or torque command (Pacejka).
    pub a_max: f64,
    pub delta_max: f64,
    pub v_max: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::kinematic()
    }
}

impl ModelParams {
    pub fn kinematic() -> Self {
        Self {
            lr: 0.05,
            lf: 0.05,
            mass: 0.2,
            iz: 27.8e-6,
            dt: 0.03,
            half_width: 0.2,
            df: 0.0,
            cf: 0.0,
            bf: 0.0,
            dr: 0.0,
            cr: 0.0,
            br: 0.0,
            cm1: 0.0,
            cm2: 0.0,
            cd0: 0.0,
            cd1: 0.0,
            cd2: 0.0,
            croll: 0.0,
            gamma: 0.0,
            a_max: 1.0,
            delta_max: 0.4,
            v_max: 1.8,
        }
    }

    pub fn pacejka_sim() -> Self {
        Self {
            lr: 0.05,
            lf: 0.05,
            mass: 0.2,
            iz: 27.8e-6,
            dt: 0.03,
            half_width: 0.2,
            df: 0.43,
            cf: 1.4,
            bf: 0.5,
            dr: 0.6,
            cr: 1.7,
            br: 0.5,
            cm1: 0.9803,
            cm2: 0.0181,
            cd0: 0.0275,
            cd1: 0.0,
            cd2: 0.0,
            croll: 0.085,
            gamma: 0.0,
            a_max: 1.0,
            delta_max: 0.5,
            v_max: 1.8,
        }
    }

    pub fn pacejka_hardware() -> Self {
        Self {
            lr: 0.038,
            lf: 0.052,
            mass: 0.181,
            iz: 27.8e-6,
            dt: 0.026,
            half_width: 0.2,
            df: 0.65,
            cf: 1.5,
            bf: 5.2,
            dr: 1.0,
            cr: 1.45,
            br: 8.5,
            cm1: 0.9803,
            cm2: 0.0181,
            cd0: 0.085,
            cd1: 0.01,
            cd2: 0.0275,
            croll: 0.0,
            gamma: 0.0,
            a_max: 1.0,
            delta_max: 0.4,
            v_max: 2.0,
        }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Kinematic => Self::kinematic(),
            ModelKind::PacejkaSim => Self::pacejka_sim(),
            ModelKind::PacejkaHardware => Self::pacejka_hardware(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lf", self.lf),
            ("mass", self.mass),
            ("iz", self.iz),
            ("dt", self.dt),
            ("half_width", self.half_width),
            ("a_max", self.a_max),
            ("delta_max", self.delta_max),
            ("v_max", self.v_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("model parameter {name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub s: f64,
    pub d: f64,
    pub phi: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacejkaState {
    pub s: f64,
    pub d: f64,
    pub phi: f64,
    pub r: f64,
    pub vx: f64,
    pub vy: f64,
}

/// Physical vehicle state in Frenet coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VehicleState {
    Kinematic(KinematicState),
    Pacejka(PacejkaState),
}

impl VehicleState {
    pub fn kinematic(s: f64, d: f64, phi: f64, v: f64) -> Self {
        VehicleState::Kinematic(KinematicState { s, d, phi, v })
    }

    pub fn pacejka(s: f64, d: f64, phi: f64, r: f64, vx: f64, vy: f64) -> Self {
        VehicleState::Pacejka(PacejkaState { s, d, phi, r, vx, vy })
    }

    /// State at rest-free straight running: zero yaw rate and lateral speed.
    pub fn for_kind(kind: ModelKind, s: f64, d: f64, phi: f64, v: f64) -> Self {
        match kind {
            ModelKind::Kinematic => Self::kinematic(s, d, phi, v),
            _ => Self::pacejka(s, d, phi, 0.0, v, 0.0),
        }
    }

    pub fn from_slice(kind: ModelKind, x: &[f64]) -> Result<Self> {
        if x.len() < kind.state_dim() {
            return Err(Error::Dimension(format!("state needs {} entries, got {}", kind.state_dim(), x.len())));
        }
        Ok(match kind {
            ModelKind::Kinematic => Self::kinematic(x[0], x[1], x[2], x[3]),
            _ => Self::pacejka(x[0], x[1], x[2], x[3], x[4], x[5]),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            VehicleState::Kinematic(k) => vec![k.s, k.d, k.phi, k.v],
            VehicleState::Pacejka(p) => vec![p.s, p.d, p.phi, p.r, p.vx, p.vy],
        }
    }

    pub fn s(&self) -> f64 {
        match self {
            VehicleState::Kinematic(k) => k.s,
            VehicleState::Pacejka(p) => p.s,
        }
    }

    pub fn d(&self) -> f64 {
        match self {
            VehicleState::Kinematic(k) => k.d,
            VehicleState::Pacejka(p) => p.d,
        }
    }

    pub fn phi(&self) -> f64 {
        match self {
            VehicleState::Kinematic(k) => k.phi,
            VehicleState::Pacejka(p) => p.phi,
        }
    }

    /// Forward speed: `v` for the kinematic model, `vx` for Pacejka.
    pub fn speed(&self) -> f64 {
        match self {
            VehicleState::Kinematic(k) => k.v,
            VehicleState::Pacejka(p) => p.vx,
        }
    }

    pub fn with_s(mut self, s: f64) -> Self {
        match &mut self {
            VehicleState::Kinematic(k) => k.s = s,
            VehicleState::Pacejka(p) => p.s = s,
        }
        self
    }
}

/// Drive command (acceleration or torque) and front steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub drive: f64,
    pub steer: f64,
}

impl ControlInput {
    pub fn new(drive: f64, steer: f64) -> Self {
        Self { drive, steer }
    }
}

fn frenet_denominator(kappa: f64, d: f64) -> Result<f64> {
    let den = 1.0 - kappa * d;
    if den > FRENET_EPS {
        Ok(den)
    } else {
        Err(Error::FrenetSingular(den))
    }
}

/// Kinematic side-slip angle for a front steering angle.
pub fn side_slip(delta: f64, p: &ModelParams) -> f64 {
    (p.lr / (p.lf + p.lr) * delta.tan()).atan()
}

pub fn step_kinematic(x: &KinematicState, u: ControlInput, kappa: f64, p: &ModelParams) -> Result<KinematicState> {
    let den = frenet_denominator(kappa, x.d)?;
    let beta = side_slip(u.steer, p);
    let c = (x.phi + beta).cos();
    let s_dot = x.v * c / den;
    Ok(KinematicState {
        s: x.s + p.dt * s_dot,
        d: x.d + p.dt * x.v * (x.phi + beta).sin(),
        phi: x.phi + p.dt * (x.v / p.lf * beta.sin() - kappa * s_dot),
        v: x.v + p.dt * u.drive,
    })
}

/// Front and rear slip angles, evaluated exactly as the published formulas.
pub fn slip_angles(x: &PacejkaState, delta: f64, p: &ModelParams) -> (f64, f64) {
    let vx = x.vx.abs();
    let alpha_f = -((-x.vy - p.lf * x.r) / vx).atan() + delta;
    let alpha_r = -((-x.vy + p.lf * x.r) / vx).atan();
    (alpha_f, alpha_r)
}

fn magic(d: f64, c: f64, b: f64, alpha: f64) -> f64 {
    d * (c * (b * alpha).atan()).sin()
}

/// Motor force of the simulation variant: drive minus drag and rolling resistance.
pub fn motor_force_sim(vx: f64, tau: f64, p: &ModelParams) -> f64 {
    (p.cm1 - p.cm2 * vx) * tau - p.cd0 * vx * vx - p.croll
}

/// Friction term of the hardware variant.
pub fn friction_hardware(vx: f64, p: &ModelParams) -> f64 {
    let sign = if vx > 0.0 {
        1.0
    } else if vx < 0.0 {
        -1.0
    } else {
        0.0
    };
    sign * (-p.cd0 - p.cd1 * vx - p.cd2 * vx * vx)
}

pub fn step_pacejka(
    x: &PacejkaState,
    u: ControlInput,
    kappa: f64,
    p: &ModelParams,
    kind: ModelKind,
) -> Result<PacejkaState> {
    if x.vx.abs() <= V_EPS {
        return Err(Error::LowSpeed(x.vx));
    }
    let den = frenet_denominator(kappa, x.d)?;
    let (alpha_f, alpha_r) = slip_angles(x, u.steer, p);
    let (sd, cd) = u.steer.sin_cos();
    let (sp, cp) = x.phi.sin_cos();
    let s_dot = (x.vx * cp - x.vy * sp) / den;
    let dt = p.dt;
    let (r_dot, vx_dot, vy_dot) = match kind {
        ModelKind::PacejkaSim => {
            let ff = -magic(p.df, p.cf, p.bf, alpha_f);
            let fr = -magic(p.dr, p.cr, p.br, alpha_r);
            let fm = motor_force_sim(x.vx, u.drive, p);
            (
                (ff * p.lf * cd - fr * p.lr) / p.iz,
                (fm - ff * sd + p.mass * x.vy * x.r) / p.mass,
                (fr + ff * cd - p.mass * x.vx * x.r) / p.mass,
            )
        }
        ModelKind::PacejkaHardware => {
            let fm = (p.cm1 - p.cm2 * x.vx) * u.drive;
            let ffx = fm * (1.0 - p.gamma);
            let ffy = magic(p.df, p.cf, p.bf, alpha_f);
            let fry = magic(p.dr, p.cr, p.br, alpha_r);
            let ffr = friction_hardware(x.vx, p);
            (
                (ffy * p.lf * cd + ffx * p.lf * sd - fry * p.lr) / p.iz,
                (fm - ffy * sd + ffx * cd + p.mass * x.vy * x.r) / p.mass + ffr,
                (fry + ffy * cd + ffx * sd - p.mass * x.vx * x.r) / p.mass,
            )
        }
        ModelKind::Kinematic => unreachable!("kinematic state passed to the Pacejka step"),
    };
    Ok(PacejkaState {
        s: x.s + dt * s_dot,
        d: x.d + dt * (x.vx * sp + x.vy * cp),
        phi: x.phi + dt * (x.r - kappa * s_dot),
        r: x.r + dt * r_dot,
        vx: x.vx + dt * vx_dot,
        vy: x.vy + dt * vy_dot,
    })
}

/// A vehicle model bound to its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleModel {
    pub kind: ModelKind,
    pub params: ModelParams,
}

impl VehicleModel {
    pub fn new(kind: ModelKind, params: ModelParams) -> Self {
        Self { kind, params }
    }

    pub fn kinematic() -> Self {
        Self::new(ModelKind::Kinematic, ModelParams::kinematic())
    }

    pub fn pacejka_sim() -> Self {
        Self::new(ModelKind::PacejkaSim, ModelParams::pacejka_sim())
    }

    pub fn pacejka_hardware() -> Self {
        Self::new(ModelKind::PacejkaHardware, ModelParams::pacejka_hardware())
    }

    pub fn step(&self, x: &VehicleState, u: ControlInput, kappa: f64) -> Result<VehicleState> {
        match (self.kind, x) {
            (ModelKind::Kinematic, VehicleState::Kinematic(k)) => {
                step_kinematic(k, u, kappa, &self.params).map(VehicleState::Kinematic)
            }
            (ModelKind::PacejkaSim | ModelKind::PacejkaHardware, VehicleState::Pacejka(ps)) => {
                step_pacejka(ps, u, kappa, &self.params, self.kind).map(VehicleState::Pacejka)
            }
            _ => Err(Error::Dimension(format!("state variant does not match model {:?}", self.kind))),
        }
    }

    /// Step on raw slices; writes the next physical state into `out`.
    pub fn step_slice(&self, x: &[f64], u: &[f64], kappa: f64, out: &mut [f64]) -> Result<()> {
        let state = VehicleState::from_slice(self.kind, x)?;
        let next = self.step(&state, ControlInput::new(u[0], u[1]), kappa)?;
        match next {
            VehicleState::Kinematic(k) => out[..4].copy_from_slice(&[k.s, k.d, k.phi, k.v]),
            VehicleState::Pacejka(p) => out[..6].copy_from_slice(&[p.s, p.d, p.phi, p.r, p.vx, p.vy]),
        }
        Ok(())
    }

    /// Input box `(lower, upper)`.
    pub fn input_bounds(&self) -> ([f64; 2], [f64; 2]) {
        let p = &self.params;
        ([-p.a_max, -p.delta_max], [p.a_max, p.delta_max])
    }

    /// Analytic partial derivatives of the kinematic step with respect to
    /// the physical state, the input, and the curvature value.
    ///
    /// Returns `(dx, du, dkappa)` with `dx` row-major 4x4 and `du` 4x2.
    pub fn kinematic_partials(
        &self,
        x: &KinematicState,
        u: ControlInput,
        kappa: f64,
    ) -> Result<([[f64; 4]; 4], [[f64; 2]; 4], [f64; 4])> {
        let p = &self.params;
        let den = frenet_denominator(kappa, x.d)?;
        let ratio = p.lr / (p.lf + p.lr);
        let tan_d = u.steer.tan();
        let beta = (ratio * tan_d).atan();
        let dbeta = ratio * (1.0 + tan_d * tan_d) / (1.0 + ratio * ratio * tan_d * tan_d);
        let (sn, cs) = (x.phi + beta).sin_cos();
        let dt = p.dt;
        let sd = x.v * cs / den;
        // partials of s_dot
        let sd_d = x.v * cs * kappa / (den * den);
        let sd_phi = -x.v * sn / den;
        let sd_v = cs / den;
        let sd_beta = sd_phi;
        let sd_kappa = x.v * cs * x.d / (den * den);

        let mut fx = [[0.0; 4]; 4];
        let mut fu = [[0.0; 2]; 4];
        let mut fk = [0.0; 4];
        for (i, row) in fx.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        // s
        fx[0][1] += dt * sd_d;
        fx[0][2] += dt * sd_phi;
        fx[0][3] += dt * sd_v;
        fu[0][1] = dt * sd_beta * dbeta;
        fk[0] = dt * sd_kappa;
        // d
        fx[1][2] += dt * x.v * cs;
        fx[1][3] += dt * sn;
        fu[1][1] = dt * x.v * cs * dbeta;
        // phi
        fx[2][1] += -dt * kappa * sd_d;
        fx[2][2] += -dt * kappa * sd_phi;
        fx[2][3] += dt * (beta.sin() / p.lf - kappa * sd_v);
        fu[2][1] = dt * (x.v / p.lf * beta.cos() - kappa * sd_beta) * dbeta;
        fk[2] = -dt * (sd + kappa * sd_kappa);
        // v
        fu[3][0] = dt;
        Ok((fx, fu, fk))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn straight_coasting() {
        let p = ModelParams::kinematic();
        let x = KinematicState { s: 0.0, d: 0.0, phi: 0.0, v: 1.0 };
        let y = step_kinematic(&x, ControlInput::new(0.0, 0.0), 0.0, &p).unwrap();
        assert_relative_eq!(y.s, 0.03, epsilon = 1e-15);
        assert_eq!((y.d, y.phi, y.v), (0.0, 0.0, 1.0));
        let y = step_kinematic(&x, ControlInput::new(1.0, 0.0), 0.0, &p).unwrap();
        assert_relative_eq!(y.v, 1.03, epsilon = 1e-15);
    }

    #[test]
    fn kinematic_hand_evaluation() {
        let p = ModelParams::kinematic();
        let x = KinematicState { s: 0.0, d: 0.05, phi: 0.1, v: 1.2 };
        let y = step_kinematic(&x, ControlInput::new(0.5, 0.2), 1.0, &p).unwrap();
        // beta = atan(0.5 * tan 0.2)
        let beta = (0.5f64 * 0.2f64.tan()).atan();
        let c = (0.1 + beta).cos();
        let sdot = 1.2 * c / (1.0 - 0.05);
        let expect = [
            0.03 * sdot,
            0.05 + 0.03 * 1.2 * (0.1 + beta).sin(),
            0.1 + 0.03 * (1.2 / 0.05 * beta.sin() - 1.0 * sdot),
            1.2 + 0.03 * 0.5,
        ];
        for (a, b) in [y.s, y.d, y.phi, y.v].iter().zip(expect) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn kinematic_singular_denominator() {
        let p = ModelParams::kinematic();
        let x = KinematicState { s: 0.0, d: 0.5, phi: 0.0, v: 1.0 };
        let err = step_kinematic(&x, ControlInput::default(), 2.0, &p).unwrap_err();
        assert!(matches!(err, Error::FrenetSingular(_)));
    }

    #[test]
    fn zero_slip_straight_running() {
        for kind in [ModelKind::PacejkaSim, ModelKind::PacejkaHardware] {
            let p = ModelParams::for_kind(kind);
            let x = PacejkaState { s: 0.0, d: 0.02, phi: 0.0, r: 0.0, vx: 1.0, vy: 0.0 };
            let (af, ar) = slip_angles(&x, 0.0, &p);
            assert_eq!((af, ar), (0.0, 0.0));
            let y = step_pacejka(&x, ControlInput::new(0.3, 0.0), 0.0, &p, kind).unwrap();
            assert_eq!(y.d, x.d);
            assert_eq!(y.phi, x.phi);
            assert_eq!(y.r, 0.0);
            assert_eq!(y.vy, 0.0);
        }
    }

    #[test]
    fn motor_force_hand_evaluation() {
        let p = ModelParams::pacejka_sim();
        let expect = (0.9803 - 0.0181 * 1.0) * 0.5 - 0.0275 * 1.0 * 1.0 - 0.085;
        assert_relative_eq!(motor_force_sim(1.0, 0.5, &p), expect, max_relative = 1e-14);
        let x = PacejkaState { s: 0.0, d: 0.0, phi: 0.0, r: 0.0, vx: 1.0, vy: 0.0 };
        let y = step_pacejka(&x, ControlInput::new(0.5, 0.0), 0.0, &p, ModelKind::PacejkaSim).unwrap();
        assert_relative_eq!(y.vx, 1.0 + 0.03 * expect / 0.2, max_relative = 1e-14);
    }

    #[test]
    fn hardware_friction_hand_evaluation() {
        let p = ModelParams::pacejka_hardware();
        assert_relative_eq!(friction_hardware(1.0, &p), -(0.085 + 0.01 + 0.0275), max_relative = 1e-14);
        assert_relative_eq!(friction_hardware(-1.0, &p), 0.085 - 0.01 + 0.0275, max_relative = 1e-14);
    }

    #[test]
    fn low_speed_guard() {
        let p = ModelParams::pacejka_sim();
        let x = PacejkaState { s: 0.0, d: 0.0, phi: 0.0, r: 0.0, vx: 0.01, vy: 0.0 };
        let err = step_pacejka(&x, ControlInput::default(), 0.0, &p, ModelKind::PacejkaSim).unwrap_err();
        assert!(matches!(err, Error::LowSpeed(_)));
    }

    #[test]
    fn steering_sign_conventions() {
        // kinematic and hardware: positive steering yaws left; the
        // simulation Pacejka forces carry an extra minus and yaw right.
        let pk = ModelParams::kinematic();
        let xk = KinematicState { s: 0.0, d: 0.0, phi: 0.0, v: 1.0 };
        assert!(step_kinematic(&xk, ControlInput::new(0.0, 0.2), 0.0, &pk).unwrap().phi > 0.0);
        let x = PacejkaState { s: 0.0, d: 0.0, phi: 0.0, r: 0.0, vx: 1.0, vy: 0.0 };
        let u = ControlInput::new(0.0, 0.2);
        let p = ModelParams::pacejka_sim();
        assert!(step_pacejka(&x, u, 0.0, &p, ModelKind::PacejkaSim).unwrap().r < 0.0);
        let p = ModelParams::pacejka_hardware();
        assert!(step_pacejka(&x, u, 0.0, &p, ModelKind::PacejkaHardware).unwrap().r > 0.0);
    }

    #[test]
    fn pacejka_lateral_dynamics_are_damped() {
        // a lateral velocity disturbance must decay under zero inputs
        {
            let kind = ModelKind::PacejkaSim;
            let p = ModelParams::for_kind(kind);
            let mut x = PacejkaState { s: 0.0, d: 0.0, phi: 0.0, r: 0.0, vx: 1.0, vy: 0.05 };
            for _ in 0..50 {
                x = step_pacejka(&x, ControlInput::new(0.2, 0.0), 0.0, &p, kind).unwrap();
                x.d = 0.0;
                x.phi = 0.0;
            }
            assert!(x.vy.abs() < 0.05, "{kind:?}: vy = {}", x.vy);
        }
    }

    #[test]
    fn variants_share_frenet_rows() {
        let x = PacejkaState { s: 1.0, d: 0.05, phi: 0.1, r: 0.3, vx: 1.2, vy: 0.04 };
        let u = ControlInput::new(0.2, 0.1);
        let a = step_pacejka(&x, u, 1.5, &ModelParams::pacejka_sim(), ModelKind::PacejkaSim).unwrap();
        let b = step_pacejka(&x, u, 1.5, &ModelParams::pacejka_sim(), ModelKind::PacejkaHardware).unwrap();
        assert_eq!((a.s, a.d, a.phi), (b.s, b.d, b.phi));
    }

    #[test]
    fn straight_steering_free_run_preserves_lateral_state() {
        let p = ModelParams::kinematic();
        let mut x = KinematicState { s: 0.0, d: 0.07, phi: 0.0, v: 1.3 };
        for _ in 0..100 {
            x = step_kinematic(&x, ControlInput::new(0.3, 0.0), 0.0, &p).unwrap();
        }
        assert_eq!(x.d, 0.07);
        assert_eq!(x.phi, 0.0);
    }

    #[test]
    fn euler_increment_scales_with_dt() {
        let x = KinematicState { s: 0.3, d: 0.05, phi: 0.1, v: 1.2 };
        let u = ControlInput::new(0.4, 0.15);
        let mut p = ModelParams::kinematic();
        let mut incs = Vec::new();
        for dt in [0.03, 0.015, 0.0075] {
            p.dt = dt;
            let y = step_kinematic(&x, u, 1.2, &p).unwrap();
            incs.push([y.s - x.s, y.d - x.d, y.phi - x.phi, y.v - x.v]);
        }
        for w in incs.windows(2) {
            for j in 0..4 {
                if w[0][j].abs() > 1e-12 {
                    assert_relative_eq!(w[1][j] / w[0][j], 0.5, max_relative = 0.01);
                }
            }
        }
    }

    #[test]
    fn analytic_partials_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let model = VehicleModel::kinematic();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = [rng.gen_range(0.0..10.0), rng.gen_range(-0.15..0.15), rng.gen_range(-0.5..0.5), rng.gen_range(0.3..1.8)];
            let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-0.4..0.4)];
            let kappa = rng.gen_range(-2.5..2.5);
            let ks = KinematicState { s: x[0], d: x[1], phi: x[2], v: x[3] };
            let (fx, fu, fk) = model.kinematic_partials(&ks, ControlInput::new(u[0], u[1]), kappa).unwrap();
            let eval = |x: [f64; 4], u: [f64; 2], k: f64| {
                let mut out = [0.0; 4];
                model.step_slice(&x, &u, k, &mut out).unwrap();
                out
            };
            for j in 0..4 {
                let (mut xp, mut xm) = (x, x);
                xp[j] += h;
                xm[j] -= h;
                let (a, b) = (eval(xp, u, kappa), eval(xm, u, kappa));
                for i in 0..4 {
                    worst = worst.max(((a[i] - b[i]) / (2.0 * h) - fx[i][j]).abs());
                }
            }
            for j in 0..2 {
                let (mut up, mut um) = (u, u);
                up[j] += h;
                um[j] -= h;
                let (a, b) = (eval(x, up, kappa), eval(x, um, kappa));
                for i in 0..4 {
                    worst = worst.max(((a[i] - b[i]) / (2.0 * h) - fu[i][j]).abs());
                }
            }
            let (a, b) = (eval(x, u, kappa + h), eval(x, u, kappa - h));
            for i in 0..4 {
                worst = worst.max(((a[i] - b[i]) / (2.0 * h) - fk[i]).abs());
            }
        }
        assert!(worst < 1e-6, "max abs diff {worst}");
    }
}
