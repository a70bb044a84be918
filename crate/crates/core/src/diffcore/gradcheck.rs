use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Parameter, Tensor};

/// Worst relative disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Absolute floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_ERR_FLOOR)
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// At most `max_coords` coordinates per parameter are checked, chosen by
/// `seed`. Parameter values are restored before returning.
pub fn grad_check<F>(
    params: &mut [Parameter],
    analytic: &[Tensor],
    mut loss: F,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[Parameter]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for p in 0..params.len() {
        let len = params[p].value.len();
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, max_coords).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = params[p].value.data()[i];
            params[p].value.data_mut()[i] = orig + step;
            let up = loss(params);
            params[p].value.data_mut()[i] = orig - step;
            let down = loss(params);
            params[p].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[p].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = params[p].name.clone();
                report.worst_index = i;
            }
        }
    }
    report
}
