use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::NumError;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub max_coords_per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_tensor: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `loss_fn` against central differences on a
/// strided subsample of each parameter tensor. `loss_fn` must be a pure
/// function of the parameter values (fix any RNG seed inside it).
pub fn gradient_check<E, F>(
    store: &ParamStore,
    mut loss_fn: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    E: From<NumError>,
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, E>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&work, &mut tape)?;
    tape.backward(loss, &mut work)?;
    let analytic: Vec<(String, Vec<f64>)> = work
        .iter()
        .map(|(n, p)| {
            let g = p
                .grad
                .as_ref()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.len()]);
            (n.to_string(), g)
        })
        .collect();

    let mut eval = |s: &ParamStore| -> Result<f64, E> {
        let mut t = Tape::new();
        let l = loss_fn(s, &mut t)?;
        Ok(t.value(l).item())
    };

    let mut tensors = Vec::new();
    for (name, grad) in analytic {
        let len = grad.len();
        let count = len.min(opts.max_coords_per_tensor);
        let mut check = TensorCheck {
            name: name.clone(),
            checked: count,
            max_rel_err: 0.0,
            worst_coord: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for j in 0..count {
            let coord = j * len / count;
            let orig = work.value(&name).expect("present").data()[coord];
            work.get_mut(&name).expect("present").value.data_mut()[coord] = orig + opts.h;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("present").value.data_mut()[coord] = orig - opts.h;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("present").value.data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(grad[coord], numeric);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_coord = coord;
                check.worst_analytic = grad[coord];
                check.worst_numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors })
}
