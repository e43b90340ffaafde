//! Scalar activation functions with the smoothness constants the error
//! bounds depend on.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Activation of the target network. The construction requires a C^4 scalar
/// function; sigmoid is the built-in choice (ReLU itself does not qualify).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
}

impl Activation {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation '{other}' (supported: sigmoid)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
        }
    }

    /// r(t)
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(t),
        }
    }

    /// r'(t)
    #[inline]
    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
        }
    }

    /// Lipschitz constant of r (sup |r'|).
    pub fn lipschitz_value(&self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
        }
    }

    /// Lipschitz constant of r' (sup |r''|); 1/(6*sqrt(3)) for sigmoid.
    pub fn lipschitz_derivative(&self) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (6.0 * 3.0_f64.sqrt()),
        }
    }

    /// max |r(t)| over [-a, a]. Sigmoid is increasing, so the endpoint wins.
    pub fn max_abs_value_on(&self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(a.abs()),
        }
    }

    /// Global sup |r(t)| over the whole line. Piecewise-linear interpolants
    /// of r inherit this cap, which makes it a saturation bound for the
    /// in-stack activations as well as the exact ones.
    pub fn value_sup(&self) -> f64 {
        match self {
            Activation::Sigmoid => 1.0,
        }
    }

    /// max |r'(t)| over [-a, a]. Sigmoid derivative peaks at 0, which every
    /// symmetric interval contains.
    pub fn max_abs_derivative_on(&self, _a: f64) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
        }
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
