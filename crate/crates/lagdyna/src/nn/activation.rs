use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
///
/// The dynamics operator needs second derivatives of the network with respect
/// to its inputs, and training needs one more order on top of that, so only
/// smooth activations are admissible. Softplus is the default; tanh is the
/// alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Tanh,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "softplus" => Ok(Activation::Softplus),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(
                "activation",
                format!("unknown activation {other:?}, expected softplus or tanh"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
    }

    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// First derivative only, for plain backpropagation.
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// Value together with first and second derivative.
    pub fn value_d1_d2(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::Softplus => {
                let s = sigmoid(x);
                (softplus(x), s, s * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
        }
    }

    /// Third derivative, reconstructed from the cached value and lower
    /// derivatives so the forward pass does not have to store it.
    pub fn d3_from_cached(self, value: f64, d1: f64, d2: f64) -> f64 {
        match self {
            // d1 is the logistic sigmoid here.
            Activation::Softplus => d2 * (1.0 - 2.0 * d1),
            Activation::Tanh => -2.0 * d1 * (1.0 - 3.0 * value * value),
        }
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow on either tail.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
