//! Small mixed-integer validation problem with a known optimum:
//!
//! ```text
//! min  v + w + t + (u − 2)²
//! s.t. v + 2w + t + u ≤ 3,  v + w + t ≥ 1,  v + w = 1,
//!      v, w, t ∈ {0,1},  u ∈ [0, 3]
//! ```
//!
//! whose solution is `u = 2, v = 1, w = t = 0`.

use crate::qubo::{encode_continuous, EncodedVar, QuboError, QuboModel};

/// Penalty weight used for all three constraints.
pub const TOY_PENALTY: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct ToyQubo {
    pub model: QuboModel,
    pub v: usize,
    pub w: usize,
    pub t: usize,
    pub u: EncodedVar,
    pub alpha1: EncodedVar,
    pub alpha2: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySolution {
    pub u: f64,
    pub v: u8,
    pub w: u8,
    pub t: u8,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// Penalty form of the toy problem. `u` and the first slack use the bit
/// expansion with bound 3; the integer slack of the covering constraint is
/// the plain sum of two bits.
pub fn build_toy_qubo(n_u: usize, n_alpha1: usize, penalty: f64) -> Result<ToyQubo, QuboError> {
    let mut model = QuboModel::new();
    let v = model.add_variable("v");
    let w = model.add_variable("w");
    let t = model.add_variable("t");
    let u = EncodedVar::register(&mut model, encode_continuous(3.0, n_u)?, "u");
    let alpha1 = EncodedVar::register(&mut model, encode_continuous(3.0, n_alpha1)?, "a1");
    let alpha2 = [model.add_variable("a2_0"), model.add_variable("a2_1")];

    for x in [v, w, t] {
        model.add_linear(x, 1.0);
    }
    model.add_squared_penalty(1.0, -2.0, &u.terms(1.0));

    let mut terms = vec![(v, 1.0), (w, 2.0), (t, 1.0)];
    terms.extend(u.terms(1.0));
    terms.extend(alpha1.terms(1.0));
    model.add_squared_penalty(penalty, -3.0, &terms);

    model.add_squared_penalty(
        penalty,
        1.0,
        &[(v, -1.0), (w, -1.0), (t, -1.0), (alpha2[0], 1.0), (alpha2[1], 1.0)],
    );
    model.add_squared_penalty(penalty, -1.0, &[(v, 1.0), (w, 1.0)]);

    Ok(ToyQubo {
        model,
        v,
        w,
        t,
        u,
        alpha1,
        alpha2,
    })
}

impl ToyQubo {
    pub fn decode(&self, x: &[u8]) -> ToySolution {
        ToySolution {
            u: self.u.decode(x),
            v: x[self.v],
            w: x[self.w],
            t: x[self.t],
            alpha1: self.alpha1.decode(x),
            alpha2: (x[self.alpha2[0]] + x[self.alpha2[1]]) as f64,
        }
    }
}
