//! Central finite-difference verification of backward-pass gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::params::ParameterStore;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step size {0} outside [1e-6, 1e-3]")]
    StepSize(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("non-finite value while checking `{name}`[{index}]")]
    NonFinite { name: String, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One scalar coordinate of a named parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coord {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct CoordResult {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub results: Vec<CoordResult>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordResult> {
        self.results
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Picks `count` coordinates spread across `names`: every name gets at least
/// one coordinate (while the budget lasts), the rest are drawn uniformly.
pub fn sample_coords(
    store: &ParameterStore,
    names: &[String],
    count: usize,
    seed: u64,
) -> Result<Vec<Coord>, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = names
        .iter()
        .map(|n| {
            store
                .get(n)
                .map(|t| t.numel())
                .ok_or_else(|| GradCheckError::UnknownParameter(n.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(&mut rng);
    let mut coords = Vec::with_capacity(count);
    for i in 0..count {
        let which = if i < order.len() {
            order[i]
        } else {
            rng.random_range(0..names.len())
        };
        coords.push(Coord {
            name: names[which].clone(),
            index: rng.random_range(0..sizes[which]),
        });
    }
    Ok(coords)
}

/// Compares backward-pass gradients of `f` against central differences
/// `(f(w+h) − f(w−h)) / 2h` at each coordinate.
///
/// The error at a coordinate is `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
/// The store is restored exactly after each perturbation.
pub fn grad_check<F>(
    f: F,
    store: &mut ParameterStore,
    h: f64,
    coords: &[Coord],
) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(GradCheckError::StepSize(h));
    }
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        if !g.value(out).is_finite() {
            return Err(GradCheckError::NonFinite {
                name: "<output>".into(),
                index: 0,
            });
        }
        g.backward(out)?;
        let mut grads = std::collections::HashMap::new();
        for c in coords {
            if !grads.contains_key(&c.name) {
                let grad = g
                    .param_grad(&c.name)
                    .ok_or_else(|| GradCheckError::UnknownParameter(c.name.clone()))?;
                grads.insert(c.name.clone(), grad);
            }
        }
        grads
    };

    let eval = |store: &ParameterStore| -> Result<f64, TensorError> {
        let mut g = Graph::inference(store);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0])
    };

    let mut results = Vec::with_capacity(coords.len());
    let mut max_rel_error = 0.0f64;
    for c in coords {
        let original = store
            .get(&c.name)
            .ok_or_else(|| GradCheckError::UnknownParameter(c.name.clone()))?
            .data()[c.index];
        let set = |store: &mut ParameterStore, v: f64| {
            store.get_mut(&c.name).unwrap().data_mut()[c.index] = v;
        };
        set(store, original + h);
        let plus = eval(store);
        set(store, original - h);
        let minus = eval(store);
        set(store, original);
        let (plus, minus) = (plus?, minus?);
        let numeric = (plus - minus) / (2.0 * h);
        let ad = analytic[&c.name][c.index];
        if !numeric.is_finite() || !ad.is_finite() {
            return Err(GradCheckError::NonFinite {
                name: c.name.clone(),
                index: c.index,
            });
        }
        let rel_error = (ad - numeric).abs() / 1f64.max(ad.abs()).max(numeric.abs());
        max_rel_error = max_rel_error.max(rel_error);
        results.push(CoordResult {
            coord: c.clone(),
            analytic: ad,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        max_rel_error,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quad_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn quadratic_is_exact() {
        let mut s = quad_store();
        let coords = sample_coords(&s, &["w".into()], 5, 1).unwrap();
        let report = grad_check(
            |g| {
                let w = g.param("w")?;
                Ok(g.sum_squares(w))
            },
            &mut s,
            1e-4,
            &coords,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        for r in &report.results {
            let w = s.get("w").unwrap().data()[r.coord.index];
            assert!((r.analytic - 2.0 * w).abs() < 1e-15);
        }
        // store restored
        assert_eq!(s.get("w").unwrap().data(), quad_store().get("w").unwrap().data());
    }

    #[test]
    fn rejects_bad_step_and_names() {
        let mut s = quad_store();
        let f = |g: &mut Graph<'_>| {
            let w = g.param("w")?;
            Ok(g.sum(w))
        };
        assert!(matches!(grad_check(f, &mut s, 1.0, &[]), Err(GradCheckError::StepSize(_))));
        assert!(sample_coords(&s, &["nope".into()], 3, 0).is_err());
    }

    #[test]
    fn non_finite_is_reported_with_name() {
        let mut s = ParameterStore::new();
        s.insert("big", Tensor::full(&[1], 1e30)).unwrap();
        let f = |g: &mut Graph<'_>| {
            let w = g.param("big")?;
            let sq = g.mul(w, w)?;
            let sq = g.mul(sq, sq)?;
            let sq = g.mul(sq, sq)?;
            let sq = g.mul(sq, sq)?;
            Ok(g.sum(sq))
        };
        let coords = vec![Coord { name: "big".into(), index: 0 }];
        let err = grad_check(f, &mut s, 1e-4, &coords).unwrap_err();
        assert!(err.to_string().contains("output") || err.to_string().contains("big"));
    }

    #[test]
    fn coords_cover_every_name() {
        let mut s = ParameterStore::new();
        for i in 0..6 {
            s.insert(format!("p{i}"), Tensor::zeros(&[3])).unwrap();
        }
        let names: Vec<String> = s.names().map(String::from).collect();
        let coords = sample_coords(&s, &names, 10, 3).unwrap();
        for n in &names {
            assert!(coords.iter().any(|c| &c.name == n));
        }
    }
}
