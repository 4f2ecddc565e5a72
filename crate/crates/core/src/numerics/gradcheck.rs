//! Central finite-difference gradient oracle.
//!
//! Compares analytic gradients against `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` for
//! every element of every named parameter. This is the independent check run
//! against each loss path before the training engine is trusted; it is kept
//! free of any dependency on the tape's backward implementation.

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::tensor::Tensor;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Named tensor map; `BTreeMap` keeps iteration deterministic.
pub type NamedTensors<E> = BTreeMap<String, Tensor<E>>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum relative error over the elements of each parameter.
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(core::cmp::Ordering::Equal))
            .map(|(k, &v)| (k.as_str(), v))
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err() < threshold
    }
}

/// Relative error with an absolute floor, so near-zero gradient pairs do not
/// explode the ratio.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Run the central-difference comparison.
///
/// `f` must be a deterministic scalar function of the parameters (fix all
/// RNG draws before calling); determinism is verified by evaluating twice at
/// the base point. `analytic` carries the gradients under test, keyed and
/// shaped like `params`.
pub fn finite_difference_check<E, F>(
    f: &F,
    params: &NamedTensors<E>,
    analytic: &NamedTensors<E>,
    eps: f64,
) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&NamedTensors<E>) -> Result<E>,
{
    if eps <= 0.0 {
        return Err(Error::contract("finite-difference eps must be positive"));
    }
    let base0 = f(params)?.to_f64();
    let base1 = f(params)?.to_f64();
    if base0 != base1 {
        return Err(Error::contract(
            "finite_difference_check requires a deterministic function",
        ));
    }

    let mut per_param = BTreeMap::new();
    for (name, theta) in params {
        let grad = analytic.get(name).ok_or_else(|| {
            Error::contract(format!("analytic gradient missing for `{name}`"))
        })?;
        if grad.shape() != theta.shape() {
            return Err(Error::contract(format!(
                "gradient shape {:?} vs parameter shape {:?} for `{name}`",
                grad.shape(),
                theta.shape()
            )));
        }
        let mut worst = 0.0f64;
        for i in 0..theta.len() {
            let numeric = {
                let mut probe = params.clone();
                let mut plus: Vec<E> = theta.data().to_vec();
                plus[i] += E::from_f64(eps);
                probe.insert(name.clone(), Tensor::new(theta.shape().to_vec(), plus)?);
                let f_plus = f(&probe)?.to_f64();
                let mut minus: Vec<E> = theta.data().to_vec();
                minus[i] -= E::from_f64(eps);
                probe.insert(name.clone(), Tensor::new(theta.shape().to_vec(), minus)?);
                let f_minus = f(&probe)?.to_f64();
                (f_plus - f_minus) / (2.0 * eps)
            };
            worst = worst.max(rel_err(grad.data()[i].to_f64(), numeric));
        }
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport { per_param })
}
