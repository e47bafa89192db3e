//! Central-difference gradient verification.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GradPair, ParamMap};
use crate::error::{Error, Result};

/// `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Upper bound on probed coordinates per parameter; `None` probes all.
    pub max_coords_per_param: Option<usize>,
    /// Seeds the coordinate subsample.
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    /// Max over probed coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub per_param: BTreeMap<String, f64>,
    pub coords_checked: usize,
}

/// Compares the analytic gradient returned by `f` with central differences.
///
/// Parameters for which `f` returns no gradient are treated as having a zero
/// gradient, so an input that secretly influences the value is caught.
pub fn finite_diff_check<F>(f: F, params: &ParamMap, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&ParamMap) -> Result<GradPair>,
{
    let base = f(params)?;
    if !base.value.is_finite() {
        return Err(Error::NonFinite(format!("function value {}", base.value)));
    }
    base.check_shapes(params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut report = FdReport::default();
    let mut probe = params.clone();

    for (name, p) in params {
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < p.len() => {
                let mut idx = rand::seq::index::sample(&mut rng, p.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..p.len()).collect(),
        };
        let analytic = base.grads.get(name);
        let mut worst: f64 = 0.0;
        for c in coords {
            let x0 = p.data()[c];
            probe.get_mut(name).unwrap().data_mut()[c] = x0 + h;
            let fp = f(&probe)?.value;
            probe.get_mut(name).unwrap().data_mut()[c] = x0 - h;
            let fm = f(&probe)?.value;
            probe.get_mut(name).unwrap().data_mut()[c] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("function value at `{name}`[{c}]")));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            report.coords_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}
