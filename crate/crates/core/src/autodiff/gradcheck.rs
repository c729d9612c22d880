//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::param::ParamStore;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Which coordinates to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// Uniformly sampled flat coordinates, seeded.
    Sample { count: usize, seed: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordResult {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// False when the objective was not reproducible at the base point; the
    /// remaining fields are then meaningless.
    pub valid: bool,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub coords: Vec<CoordResult>,
}

/// Denominator floor for the relative error, so that coordinates with a
/// vanishing gradient are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `objective` evaluates the scalar loss for a parameter setting and returns
/// it with the analytic gradient of every parameter (store order). It must be
/// deterministic; a non-reproducible objective yields `valid == false`.
pub fn finite_difference_check<F>(
    mut objective: F,
    params: &ParamStore,
    coords: Coords,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<Tensor>)>,
{
    if !(h > 0.0 && h <= 1e-1) {
        return Err(Error::Domain(format!("step h={h} outside (0, 0.1]")));
    }
    let (base, analytic) = objective(params)?;
    let (again, _) = objective(params)?;
    if base.to_bits() != again.to_bits() {
        return Ok(GradCheckReport {
            valid: false,
            max_rel_error: f64::NAN,
            tol,
            passed: false,
            coords: Vec::new(),
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract("objective returned wrong gradient count".into()));
    }

    let mut index = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        for off in 0..p.tensor.len() {
            index.push((pi, off));
        }
    }
    let chosen: Vec<(usize, usize)> = match coords {
        Coords::All => index,
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = count.min(index.len());
            let mut picks: Vec<usize> = sample(&mut rng, index.len(), count).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| index[i]).collect()
        }
    };

    let mut work = params.clone();
    let mut results = Vec::with_capacity(chosen.len());
    let mut max_rel = 0.0f64;
    for (pi, off) in chosen {
        let orig = work.get(pi).tensor.data()[off];
        work.get_mut(pi).tensor.data_mut()[off] = orig + h;
        let (plus, _) = objective(&work)?;
        work.get_mut(pi).tensor.data_mut()[off] = orig - h;
        let (minus, _) = objective(&work)?;
        work.get_mut(pi).tensor.data_mut()[off] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[pi].data()[off];
        let rel = relative_error(a, numeric);
        max_rel = max_rel.max(rel);
        results.push(CoordResult {
            param: params.get(pi).name.clone(),
            offset: off,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    Ok(GradCheckReport {
        valid: true,
        max_rel_error: max_rel,
        tol,
        passed: max_rel < tol,
        coords: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn square_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn derivative_of_square() {
        let store = square_store(3.0);
        let report = finite_difference_check(
            |p| {
                let mut tape = Tape::new();
                let b = p.bind(&mut tape);
                let x = b.var(0);
                let y = tape.mul(x, x)?;
                let y = tape.sum(y);
                let g = tape.backward(y)?;
                Ok((
                    tape.value(y).item(),
                    vec![Tensor::new(&[1], g.get(x).unwrap().to_vec())?],
                ))
            },
            &store,
            Coords::All,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.valid && report.passed);
        assert!((report.coords[0].numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn nondeterministic_objective_is_flagged() {
        let store = square_store(1.0);
        let mut calls = 0.0;
        let report = finite_difference_check(
            |_| {
                calls += 1.0;
                Ok((calls, vec![Tensor::scalar(0.0)]))
            },
            &store,
            Coords::All,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(!report.valid && !report.passed);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let store = square_store(1.0);
        let r = finite_difference_check(
            |_| Ok((0.0, vec![Tensor::scalar(0.0)])),
            &store,
            Coords::All,
            0.5,
            1e-6,
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
