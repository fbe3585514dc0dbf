use crate::error::{invalid, Result};
use crate::gmp::{ProtoShape, SacNodeConfig, Scratch};

/// Node over the inputs `{x, 0}` whose normalized output tracks `max(x, 0)`.
///
/// The template's spline pattern is rescaled so that its constraint equals
/// the requested `c`; shrinking `c` therefore sharpens the knee.
#[derive(Debug, Clone)]
pub struct SoftRelu {
    shape: ProtoShape,
}

impl SoftRelu {
    pub fn new(c: f64, node: &SacNodeConfig) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid("soft-ReLU constraint must be positive"));
        }
        node.validate()?;
        let k = c / node.c;
        let mut cfg = node.clone();
        for v in cfg.offsets.iter_mut().flatten() {
            *v *= k;
        }
        for v in cfg.reference_offsets.iter_mut() {
            *v *= k;
        }
        cfg.c = c;
        Ok(Self {
            shape: ProtoShape::new(&cfg)?,
        })
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        self.shape.eval(x)
    }

    pub fn eval_with_slope(&self, x: f64, buf: &mut Vec<f64>, sc: &mut Scratch) -> Result<(f64, f64)> {
        self.shape.eval_into(x, buf, sc)
    }

    pub fn c(&self) -> f64 {
        self.shape.c()
    }
}

pub fn soft_relu(x: f64, c: f64, node: &SacNodeConfig) -> Result<f64> {
    SoftRelu::new(c, node)?.eval(x)
}
