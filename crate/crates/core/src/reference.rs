//! Mechanism loading and the bundled reference four-bar.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;

use crate::dynamics;
use crate::error::{Error, Result};
use crate::mechanism::{Mechanism, MechanismDef};

/// The bundled four-bar: ground pivots A=(0,0) and D=(4,0), crank 1 m,
/// coupler 2 m, rocker √13 m, coordinates `q = (x1, y1, x2, y2, θ)`.
pub const FOURBAR_JSON: &str = include_str!("../data/fourbar.json");

/// Period of the inverse-dynamics reference motion, seconds.
pub const REFERENCE_PERIOD: f64 = 5.0;

pub fn fourbar_def() -> MechanismDef {
    MechanismDef::from_json_str(FOURBAR_JSON).expect("bundled mechanism file parses")
}

pub fn fourbar() -> Mechanism {
    Mechanism::from_def(fourbar_def()).expect("bundled mechanism is valid")
}

/// Validates a definition and, when it carries `q0`, checks that the
/// declared dofs can parameterize the mechanism there.
pub fn build_mechanism(def: MechanismDef) -> Result<Mechanism> {
    let mech = Mechanism::from_def(def)?;
    if let Some(q0) = &mech.def().q0 {
        if q0.len() != mech.n() {
            return Err(Error::config(format!(
                "q0 has {} entries, the layout has n = {}",
                q0.len(),
                mech.n()
            )));
        }
        let q0 = DVector::from_column_slice(q0);
        let kin = mech.kinematics(&q0, None, None, None);
        dynamics::compute_r(&kin.phi_q.to_dense(), mech.layout().dof_idxs())?;
    }
    Ok(mech)
}

pub fn load_mechanism(path: impl AsRef<Path>) -> Result<Mechanism> {
    build_mechanism(MechanismDef::from_path(path)?)
}

/// Initial configuration stored in the definition, or zeros.
pub fn initial_guess(mech: &Mechanism) -> DVector<f64> {
    match &mech.def().q0 {
        Some(q) => DVector::from_column_slice(q),
        None => DVector::zeros(mech.n()),
    }
}

/// Crank reference `θ(t) = (π/4)(1 − cos(2πt/5))` and its first two derivatives.
pub fn theta_ref(t: f64) -> (f64, f64, f64) {
    let w = 2.0 * PI / REFERENCE_PERIOD;
    let a = PI / 4.0;
    (
        a * (1.0 - (w * t).cos()),
        a * w * (w * t).sin(),
        a * w * w * (w * t).cos(),
    )
}
