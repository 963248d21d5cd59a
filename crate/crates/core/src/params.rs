//! Flat named parameter arrays.
//!
//! Key order is fixed: `init.mean`, `init.log_std` (when present), then for
//! each layer `n` in stack order `layers.{n}.log_step`, `layers.{n}.log_mass`.

use indexmap::IndexMap;

use crate::{Error, Result};

/// Ordered map from parameter name to its values.
pub type NamedParams = IndexMap<String, Vec<f64>>;

/// Euclidean norm over every entry of every array.
pub fn global_norm(params: &NamedParams) -> f64 {
    params
        .values()
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Checks that `other` has exactly the keys and array lengths of `reference`.
pub fn check_same_layout(reference: &NamedParams, other: &NamedParams) -> Result<()> {
    if reference.len() != other.len() {
        return Err(Error::Contract(format!(
            "expected {} parameter arrays, got {}",
            reference.len(),
            other.len()
        )));
    }
    for (name, values) in reference {
        match other.get(name) {
            Some(o) if o.len() == values.len() => {}
            Some(o) => {
                return Err(Error::Contract(format!(
                    "`{name}` has length {}, expected {}",
                    o.len(),
                    values.len()
                )))
            }
            None => return Err(Error::Contract(format!("missing parameter `{name}`"))),
        }
    }
    Ok(())
}

/// Name of the first array holding a non-finite entry.
pub fn first_non_finite(params: &NamedParams) -> Option<&str> {
    params
        .iter()
        .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
        .map(|(k, _)| k.as_str())
}

/// Multiplies every entry by `factor`.
pub fn scale(params: &mut NamedParams, factor: f64) {
    for v in params.values_mut() {
        for x in v.iter_mut() {
            *x *= factor;
        }
    }
}
