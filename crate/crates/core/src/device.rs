//! Transistor and diode laws.
//!
//! Every law is evaluated on normalized quantities: voltages in units of the
//! thermal voltage and currents in units of the specific current. The
//! ideal rectifier skips both scalings and treats voltages as currents.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SacError};

/// Boltzmann constant over electron charge, V/K.
pub const K_OVER_Q: f64 = 8.617e-5;
pub const DEFAULT_TEMPERATURE: f64 = 300.0;
pub const DEFAULT_SLOPE_FACTOR: f64 = 1.3;
/// Specific current of the reference device, A.
pub const DEFAULT_SPEC_CURRENT: f64 = 1e-7;
/// Diode saturation current relative to the transistor specific current.
pub const DEFAULT_DIODE_RATIO: f64 = 1e-12;

pub const WI_INVERSION: f64 = 0.01;
pub const MI_INVERSION: f64 = 1.0;
pub const SI_INVERSION: f64 = 100.0;

const T_MIN: f64 = 200.0;
const T_MAX: f64 = 450.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Law {
    WeakInversionExponential,
    StrongInversionSquareLaw,
    EkvInterpolated,
    IdealRectifier,
}

/// Operating regime as requested by a caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Wi,
    Mi,
    Si,
    #[serde(alias = "rectifier")]
    Rect,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Wi, Regime::Mi, Regime::Si, Regime::Rect];
    pub const DEVICE: [Regime; 3] = [Regime::Wi, Regime::Mi, Regime::Si];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Wi => "wi",
            Regime::Mi => "mi",
            Regime::Si => "si",
            Regime::Rect => "rect",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = SacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wi" => Ok(Regime::Wi),
            "mi" => Ok(Regime::Mi),
            "si" => Ok(Regime::Si),
            "rect" | "rectifier" => Ok(Regime::Rect),
            other => Err(invalid(format!("unknown regime '{other}'"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InversionLabel {
    Wi,
    Mi,
    Si,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeLabel {
    pub label: InversionLabel,
    pub inversion_coefficient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransistorModel {
    pub law: Law,
    /// Current at which the device leaves weak inversion, A.
    pub spec_current: f64,
    /// Current representing one signal unit, A.
    pub bias_current: f64,
    pub slope_factor: f64,
    temperature: f64,
}

impl TransistorModel {
    pub fn new(
        law: Law,
        spec_current: f64,
        bias_current: f64,
        slope_factor: f64,
        temperature: f64,
    ) -> Result<Self> {
        if !(spec_current > 0.0 && spec_current.is_finite()) {
            return Err(invalid("spec_current must be positive"));
        }
        if !(bias_current > 0.0 && bias_current.is_finite()) {
            return Err(invalid("bias_current must be positive"));
        }
        if !(slope_factor >= 1.0 && slope_factor.is_finite()) {
            return Err(invalid("slope_factor must be >= 1"));
        }
        check_temperature(temperature)?;
        Ok(Self {
            law,
            spec_current,
            bias_current,
            slope_factor,
            temperature,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(self)
    }

    pub fn thermal_voltage(&self) -> f64 {
        K_OVER_Q * self.temperature
    }

    pub fn inversion_coefficient(&self) -> f64 {
        self.bias_current / self.spec_current
    }

    pub fn is_rectifier(&self) -> bool {
        self.law == Law::IdealRectifier
    }

    /// Voltage that maps to one normalized unit.
    pub fn voltage_scale(&self) -> f64 {
        if self.is_rectifier() {
            1.0
        } else {
            self.thermal_voltage()
        }
    }

    /// Current that maps to one normalized unit.
    pub fn current_scale(&self) -> f64 {
        if self.is_rectifier() {
            1.0
        } else {
            self.spec_current
        }
    }

    /// Factor converting signal units into normalized currents.
    pub fn signal_scale(&self) -> f64 {
        self.bias_current / self.current_scale()
    }

    /// Normalized forward current for a normalized gate-source drive.
    pub fn law_value(&self, x: f64) -> f64 {
        let n = self.slope_factor;
        match self.law {
            Law::WeakInversionExponential => (x / n).exp(),
            Law::StrongInversionSquareLaw => {
                let u = x.max(0.0) / (2.0 * n);
                u * u
            }
            Law::EkvInterpolated => {
                let l = softplus(x / (2.0 * n));
                l * l
            }
            Law::IdealRectifier => x.max(0.0),
        }
    }

    pub fn law_slope(&self, x: f64) -> f64 {
        let n = self.slope_factor;
        match self.law {
            Law::WeakInversionExponential => (x / n).exp() / n,
            Law::StrongInversionSquareLaw => x.max(0.0) / (2.0 * n * n),
            Law::EkvInterpolated => {
                let z = x / (2.0 * n);
                softplus(z) * logistic(z) / n
            }
            Law::IdealRectifier => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Inverse of the normalized law for a positive current.
    pub fn law_inverse(&self, y: f64) -> Option<f64> {
        if !(y > 0.0) {
            return None;
        }
        let n = self.slope_factor;
        Some(match self.law {
            Law::WeakInversionExponential => n * y.ln(),
            Law::StrongInversionSquareLaw => 2.0 * n * y.sqrt(),
            Law::EkvInterpolated => {
                let s = y.sqrt();
                2.0 * n * (s + (-(-s).exp_m1()).ln())
            }
            Law::IdealRectifier => y,
        })
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(T_MIN..=T_MAX).contains(&t) {
        return Err(SacError::TemperatureOutOfRange(t));
    }
    Ok(())
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Builds the device for a named regime at the given temperature.
pub fn make_model(regime: Regime, temperature: f64) -> Result<TransistorModel> {
    let (law, ic) = match regime {
        Regime::Wi => (Law::WeakInversionExponential, WI_INVERSION),
        Regime::Mi => (Law::EkvInterpolated, MI_INVERSION),
        Regime::Si => (Law::StrongInversionSquareLaw, SI_INVERSION),
        Regime::Rect => {
            return TransistorModel::new(
                Law::IdealRectifier,
                1.0,
                1.0,
                DEFAULT_SLOPE_FACTOR,
                temperature,
            )
        }
    };
    TransistorModel::new(
        law,
        DEFAULT_SPEC_CURRENT,
        ic * DEFAULT_SPEC_CURRENT,
        DEFAULT_SLOPE_FACTOR,
        temperature,
    )
}

pub fn classify_regime(model: &TransistorModel) -> RegimeLabel {
    let ic = model.inversion_coefficient();
    let label = if ic < 0.1 {
        InversionLabel::Wi
    } else if ic > 10.0 {
        InversionLabel::Si
    } else {
        InversionLabel::Mi
    };
    RegimeLabel {
        label,
        inversion_coefficient: ic,
    }
}

/// Forward current for a gate-source voltage, A.
pub fn forward_current(model: &TransistorModel, v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(invalid("voltage must be finite"));
    }
    Ok(model.current_scale() * model.law_value(v / model.voltage_scale()))
}

/// Symmetric channel current: forward component minus reverse component.
pub fn channel_current(model: &TransistorModel, v_g: f64, v_s: f64, v_d: f64) -> Result<f64> {
    Ok(forward_current(model, v_g - v_s)? - forward_current(model, v_g - v_d)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiodeLaw {
    IdealRectifier,
    ExponentialDiode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiodeModel {
    pub law: DiodeLaw,
    pub saturation_current: f64,
    pub thermal_voltage: f64,
}

impl DiodeModel {
    pub fn ideal() -> Self {
        Self {
            law: DiodeLaw::IdealRectifier,
            saturation_current: 1.0,
            thermal_voltage: 1.0,
        }
    }

    /// Default diode paired with a transistor: an ideal rectifier for the
    /// rectifier law, otherwise an exponential diode sharing its thermal
    /// voltage.
    pub fn matched(model: &TransistorModel) -> Self {
        if model.is_rectifier() {
            return Self::ideal();
        }
        Self {
            law: DiodeLaw::ExponentialDiode,
            saturation_current: DEFAULT_DIODE_RATIO * model.spec_current,
            thermal_voltage: model.thermal_voltage(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.law == DiodeLaw::ExponentialDiode
            && !(self.saturation_current > 0.0 && self.thermal_voltage > 0.0)
        {
            return Err(invalid("diode saturation current and thermal voltage must be positive"));
        }
        Ok(())
    }
}

/// Diode current for a forward voltage. The exponential law is clamped at
/// zero so the element never conducts backwards.
pub fn diode_current(diode: &DiodeModel, v: f64) -> f64 {
    match diode.law {
        DiodeLaw::IdealRectifier => v.max(0.0),
        DiodeLaw::ExponentialDiode => {
            (diode.saturation_current * (v / diode.thermal_voltage).exp_m1()).max(0.0)
        }
    }
}
