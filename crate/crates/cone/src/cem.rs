//! Comparametric enhancement: maps (low-light image x, illumination t) to the
//! enhanced image y through a selectable camera-response model.
//!
//! With exposure ratio k = 1/t, the supported forms are
//!   BGC: y = e^{b(1−k^a)} · x^{k^a}
//!   PC:  y = k^{ab} · x / ((k^a − 1)·x^{1/b} + 1)^b
//!   SC:  y = (b+1)·k^a·x / ((k^a − 1)·x + b + 1)
//! plus the plain reflectance baseline y = x ⊘ t. All forms reduce to the
//! identity at t = 1 and carry closed-form partials in t, a, b so the model
//! parameters can be trained jointly with the illumination network.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Camera-response family. `None` is the baseline division y = x ⊘ t.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrfVariant {
    None,
    Bgc,
    Pc,
    Sc,
}

impl CrfVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(CrfVariant::None),
            "bgc" => Ok(CrfVariant::Bgc),
            "pc" => Ok(CrfVariant::Pc),
            "sc" => Ok(CrfVariant::Sc),
            other => Err(Error::Config(format!(
                "unknown camera response variant '{other}' (expected none, bgc, pc, or sc)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CrfVariant::None => "none",
            CrfVariant::Bgc => "bgc",
            CrfVariant::Pc => "pc",
            CrfVariant::Sc => "sc",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            CrfVariant::None => 0,
            CrfVariant::Bgc => 1,
            CrfVariant::Pc => 2,
            CrfVariant::Sc => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(CrfVariant::None),
            1 => Ok(CrfVariant::Bgc),
            2 => Ok(CrfVariant::Pc),
            3 => Ok(CrfVariant::Sc),
            other => Err(Error::Data(format!("invalid camera response variant tag {other}"))),
        }
    }
}

/// Camera-response parameters θ = (a, b).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    pub a: f32,
    pub b: f32,
    pub variant: CrfVariant,
    pub trainable: bool,
}

/// Smallest b allowed for the PC and SC forms.
pub const B_FLOOR: f32 = 1e-3;

impl CrfParams {
    /// Default parameter values per variant. BGC uses fixed published
    /// constants; PC and SC start from the interior point (1, 1).
    pub fn default_for(variant: CrfVariant) -> Self {
        let (a, b) = match variant {
            CrfVariant::None => (0.0, 0.0),
            CrfVariant::Bgc => (-0.3293, 1.1258),
            CrfVariant::Pc | CrfVariant::Sc => (1.0, 1.0),
        };
        CrfParams { a, b, variant, trainable: false }
    }

    /// Clamp b back into its valid domain; applied after each optimizer step.
    pub fn project(&mut self) {
        if matches!(self.variant, CrfVariant::Pc | CrfVariant::Sc) && self.b < B_FLOOR {
            self.b = B_FLOOR;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.variant, CrfVariant::Pc | CrfVariant::Sc) && self.b <= 0.0 {
            return Err(Error::Domain(format!(
                "{} requires b > 0, got b = {}",
                self.variant.name().to_uppercase(),
                self.b
            )));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::Domain(format!(
                "camera response parameters must be finite, got a = {}, b = {}",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

/// Spatially varying exposure ratio k = 1 ⊘ t.
#[derive(Clone, Debug)]
pub struct ExposureRatioMap {
    pub k: Tensor,
}

/// Exposure ratio from an illumination map; every t entry must be positive.
pub fn exposure_ratio(t: &Tensor) -> Result<ExposureRatioMap> {
    check_illumination(t)?;
    Ok(ExposureRatioMap { k: t.map(|v| 1.0 / v) })
}

/// Graph version of [`exposure_ratio`]; gradient is ∂k/∂t = −1/t².
pub fn exposure_ratio_node(g: &mut Graph, t: NodeId) -> Result<NodeId> {
    g.value(t).chw().and_then(|(c, _, _)| {
        if c == 1 {
            Ok(())
        } else {
            Err(Error::Shape(format!("illumination map must have one channel, got {c}")))
        }
    })?;
    g.recip(t)
}

/// Baseline reflectance y = x ⊘ t with t broadcast over the color channels.
pub fn apply_baseline(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    expect_illumination_shape(t, h, w)?;
    check_illumination(t)?;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            out[ch * h * w + i] = x.data()[ch * h * w + i] / t.data()[i];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Graph version of [`apply_baseline`].
pub fn apply_baseline_node(g: &mut Graph, x: NodeId, t: NodeId) -> Result<NodeId> {
    g.div_broadcast(x, t)
}

/// Enhanced image under `params`. Output is intentionally unclamped: losses
/// operate on raw values, clamping happens only at save and metric time.
pub fn apply(x: &Tensor, t: &Tensor, params: &CrfParams) -> Result<Tensor> {
    if params.variant == CrfVariant::None {
        return apply_baseline(x, t);
    }
    forward(params.variant, x, t, params.a, params.b)
}

/// Graph version of [`apply`]; gradients flow into t and trainable θ.
pub fn apply_node(g: &mut Graph, x: NodeId, t: NodeId, theta: &ThetaNodes, variant: CrfVariant) -> Result<NodeId> {
    match variant {
        CrfVariant::None => g.div_broadcast(x, t),
        _ => g.cem_op(x, t, theta.a, theta.b, variant),
    }
}

/// Graph handles for θ = (a, b).
#[derive(Clone, Copy, Debug)]
pub struct ThetaNodes {
    pub a: NodeId,
    pub b: NodeId,
}

/// Register θ in a graph: trainable parameters when `params.trainable`,
/// constants otherwise.
pub fn register_theta(g: &mut Graph, params: &CrfParams) -> ThetaNodes {
    let (a, b) = (Tensor::scalar(params.a), Tensor::scalar(params.b));
    if params.trainable {
        ThetaNodes { a: g.param(a), b: g.param(b) }
    } else {
        ThetaNodes { a: g.constant(a), b: g.constant(b) }
    }
}

/// Elementwise analytic partials (∂y/∂t, ∂y/∂a, ∂y/∂b), each shaped like y.
pub fn partials(x: &Tensor, t: &Tensor, params: &CrfParams) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = x.chw()?;
    expect_illumination_shape(t, h, w)?;
    validate_apply_inputs(params.variant, x, t, params.a, params.b)?;
    let hw = h * w;
    let mut dt = vec![0.0f32; c * hw];
    let mut da = vec![0.0f32; c * hw];
    let mut db = vec![0.0f32; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            let e = eval_point(
                params.variant,
                f64::from(x.data()[ch * hw + i]),
                f64::from(t.data()[i]),
                f64::from(params.a),
                f64::from(params.b),
            );
            if !(e.dy_dt.is_finite() && e.dy_da.is_finite() && e.dy_db.is_finite()) {
                return Err(non_finite_error(params.variant, params.a, params.b, x.data()[ch * hw + i], t.data()[i]));
            }
            dt[ch * hw + i] = e.dy_dt as f32;
            da[ch * hw + i] = e.dy_da as f32;
            db[ch * hw + i] = e.dy_db as f32;
        }
    }
    let shape = vec![c, h, w];
    Ok((
        Tensor::new(shape.clone(), dt)?,
        Tensor::new(shape.clone(), da)?,
        Tensor::new(shape, db)?,
    ))
}

/// Forward evaluation used by both [`apply`] and the autodiff node.
pub(crate) fn forward(variant: CrfVariant, x: &Tensor, t: &Tensor, a: f32, b: f32) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    expect_illumination_shape(t, h, w)?;
    validate_apply_inputs(variant, x, t, a, b)?;
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            let e = eval_point(variant, f64::from(x.data()[ch * hw + i]), f64::from(t.data()[i]), f64::from(a), f64::from(b));
            if !e.y.is_finite() {
                return Err(non_finite_error(variant, a, b, x.data()[ch * hw + i], t.data()[i]));
            }
            out[ch * hw + i] = e.y as f32;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Backward contribution for the autodiff node: upstream gradient `gout`
/// contracted with the analytic partials. Returns (∂L/∂t, ∂L/∂a, ∂L/∂b).
pub(crate) fn backward_contrib(
    variant: CrfVariant,
    x: &Tensor,
    t: &Tensor,
    a: f32,
    b: f32,
    gout: &Tensor,
) -> Result<(Tensor, f64, f64)> {
    let (c, h, w) = x.chw().expect("validated at record");
    let hw = h * w;
    let mut dt = vec![0.0f32; hw];
    let (mut da, mut db) = (0.0f64, 0.0f64);
    for ch in 0..c {
        for i in 0..hw {
            let e = eval_point(variant, f64::from(x.data()[ch * hw + i]), f64::from(t.data()[i]), f64::from(a), f64::from(b));
            if !(e.dy_dt.is_finite() && e.dy_da.is_finite() && e.dy_db.is_finite()) {
                return Err(non_finite_error(variant, a, b, x.data()[ch * hw + i], t.data()[i]));
            }
            let gv = f64::from(gout.data()[ch * hw + i]);
            dt[i] += (gv * e.dy_dt) as f32;
            da += gv * e.dy_da;
            db += gv * e.dy_db;
        }
    }
    Ok((Tensor::new(vec![1, h, w], dt)?, da, db))
}

/// Forward value only, in f64; used by the finite-difference interpreter.
pub(crate) fn value_f64(variant: CrfVariant, x: f64, t: f64, a: f64, b: f64) -> f64 {
    eval_point(variant, x, t, a, b).y
}

struct PointEval {
    y: f64,
    dy_dt: f64,
    dy_da: f64,
    dy_db: f64,
}

/// One pixel in f64: value and partials w.r.t. t, a, b.
///
/// Intermediates: k = 1/t, p = k^a, so dp/da = p·ln k and dp/dt = −a·p·k.
/// x = 0 is handled explicitly; every form evaluates to 0 there with
/// vanishing partials (positive powers of x).
fn eval_point(variant: CrfVariant, x: f64, t: f64, a: f64, b: f64) -> PointEval {
    let k = 1.0 / t;
    let lnk = -t.ln();
    let p = (a * lnk).exp();
    let dp_da = p * lnk;
    let dp_dt = -a * p * k;
    match variant {
        CrfVariant::None => PointEval { y: x * k, dy_dt: -x * k * k, dy_da: 0.0, dy_db: 0.0 },
        CrfVariant::Bgc => {
            let env = (b * (1.0 - p)).exp();
            let (xp, xplnx) = if x == 0.0 { (0.0, 0.0) } else { (x.powf(p), x.powf(p) * x.ln()) };
            let y = env * xp;
            let dy_dp = env * (xplnx - b * xp);
            PointEval { y, dy_dt: dy_dp * dp_dt, dy_da: dy_dp * dp_da, dy_db: (1.0 - p) * y }
        }
        CrfVariant::Pc => {
            if x == 0.0 {
                return PointEval { y: 0.0, dy_dt: 0.0, dy_da: 0.0, dy_db: 0.0 };
            }
            let xb = x.powf(1.0 / b);
            let d = (p - 1.0) * xb + 1.0;
            let q = p / d;
            let y = x * q.powf(b);
            let dy_dp = x * b * q.powf(b - 1.0) * (1.0 - xb) / (d * d);
            let dy_db = y * (p.ln() - d.ln() + (p - 1.0) * xb * x.ln() / (b * d));
            PointEval { y, dy_dt: dy_dp * dp_dt, dy_da: dy_dp * dp_da, dy_db }
        }
        CrfVariant::Sc => {
            let den = (p - 1.0) * x + b + 1.0;
            let y = (b + 1.0) * p * x / den;
            let dy_dp = (b + 1.0) * x * (b + 1.0 - x) / (den * den);
            let dy_db = p * (p - 1.0) * x * x / (den * den);
            PointEval { y, dy_dt: dy_dp * dp_dt, dy_da: dy_dp * dp_da, dy_db }
        }
    }
}

fn validate_apply_inputs(variant: CrfVariant, x: &Tensor, t: &Tensor, a: f32, b: f32) -> Result<()> {
    CrfParams { a, b, variant, trainable: false }.validate()?;
    if let Some(&bad) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("input image values must lie in [0, 1], found {bad}")));
    }
    check_illumination(t)
}

fn check_illumination(t: &Tensor) -> Result<()> {
    if let Some(&bad) = t.data().iter().find(|v| **v <= 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "illumination must be strictly positive (broken clamp?), found {bad}"
        )));
    }
    Ok(())
}

fn expect_illumination_shape(t: &Tensor, h: usize, w: usize) -> Result<()> {
    if t.shape() != [1, h, w] {
        return Err(Error::Shape(format!(
            "illumination map must be [1, {h}, {w}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn non_finite_error(variant: CrfVariant, a: f32, b: f32, x: f32, t: f32) -> Error {
    Error::Numeric(format!(
        "{} camera response produced a non-finite value at a = {a}, b = {b} (x = {x}, t = {t})",
        variant.name().to_uppercase()
    ))
}
