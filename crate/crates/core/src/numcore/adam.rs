use super::params::ParamStore;
use super::NumError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected adaptive-moment update over every parameter.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<(), NumError> {
    if let Some((name, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(NumError::MissingGrad(name.to_string()));
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (_, p) in store.iter_mut() {
        let g = p.grad.as_ref().expect("checked above").data();
        let (m, v) = (p.m.data_mut(), p.v.data_mut());
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        }
        let (m, v) = (p.m.data(), p.v.data());
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            w[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
