use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_per_param: Option<usize>,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Skip coordinates whose ±step evaluations change the ReLU sign pattern,
    /// where central differences straddle a kink.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_param: None,
            floor: 1e-6,
            seed: 0,
            skip_kinks: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped_kinks: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of the scalar produced by `f` against
/// central finite differences, element by element, for every trainable entry
/// of `store`. Values in `store` are restored before returning.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let analytic = tape.backward(loss)?.param_grads(store.len());
    let base_pattern = tape.relu_pattern();
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<(f64, u64), TensorError> {
        let mut tape = Tape::new();
        let l = f(&mut tape, store)?;
        Ok((tape.value(l).item(), tape.relu_pattern()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.entry(id).trainable {
            continue;
        }
        let n = store.get(id).len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let ((up, p_up), (down, p_down)) = (up?, down?);
            if opts.skip_kinks && (p_up != base_pattern || p_down != base_pattern) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(store.entry(id).name.clone());
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
