//! Central finite-difference checks of analytic parameter gradients.

use rand::Rng;

use crate::scalar::Scalar;

use super::params::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients
/// from turning round-off into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(L(p + h) - L(p - h)) / 2h` for `samples`
/// parameter coordinates drawn uniformly over all parameters.
///
/// `loss` must be a deterministic function of the store.
pub fn check_gradients<T, R, F>(
    store: &mut ParamStore<T>,
    analytic: &ParamGrads<T>,
    mut loss: F,
    samples: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> GradCheckReport
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&ParamStore<T>) -> T,
{
    let sizes: Vec<(ParamId, usize)> = store.iter().map(|(id, _, t)| (id, t.len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut entries = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let (id, index) = sizes
            .iter()
            .find_map(|&(id, n)| {
                if flat < n {
                    Some((id, flat))
                } else {
                    flat -= n;
                    None
                }
            })
            .expect("flat index within total");
        let original = store.get(id).data()[index];
        let h = T::lit(step);
        store.get_mut(id).data_mut()[index] = original + h;
        let up = loss(store).as_f64();
        store.get_mut(id).data_mut()[index] = original - h;
        let down = loss(store).as_f64();
        store.get_mut(id).data_mut()[index] = original;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.get(id).map_or(0.0, |g| g.data()[index].as_f64());
        entries.push(GradCheckEntry {
            param: store.name(id).to_string(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, floor),
        });
    }
    GradCheckReport { entries }
}
