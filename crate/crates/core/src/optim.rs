//! Adam with bias correction and optional global-norm gradient clipping.

use pst_autodiff::{Scalar, Tensor};

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub step: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &OptimConfig, lr: f64, ids: Vec<ParamId>, store: &ParamStore<T>) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape());
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip_norm: cfg.clip_norm,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    /// Applies one update. `grads` must cover exactly the optimiser's
    /// parameters. Non-finite gradients abort the step before anything is
    /// modified. Returns the gradient norm before clipping.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<f64> {
        let mut ordered: Vec<&Tensor<T>> = Vec::with_capacity(self.ids.len());
        for id in &self.ids {
            let g = grads
                .iter()
                .find(|(gid, _)| gid == id)
                .map(|(_, g)| g)
                .ok_or_else(|| Error::Config(format!("no gradient for `{}`", store.name(*id))))?;
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of `{}`", store.name(*id)),
                    step: self.step + 1,
                });
            }
            ordered.push(g);
        }
        let norm = ordered.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, g) in ordered.into_iter().enumerate() {
            let p = store.get_mut(self.ids[k]).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i].to_f64() * clip;
                let mi = self.beta1 * m[i].to_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].to_f64() + (1.0 - self.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let delta = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = T::from_f64(p[i].to_f64() - delta);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn setup(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::default();
        let id = store.insert("p", Group::Generator, Tensor::from_f64(&[1], &[value]).unwrap());
        (store, id)
    }

    fn cfg() -> OptimConfig {
        OptimConfig {
            clip_norm: 0.0,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let (mut store, id) = setup(1.0);
        let mut adam = Adam::new(&cfg(), 1e-3, vec![id], &store);
        let g = Tensor::from_f64(&[1], &[0.37]).unwrap();
        adam.update(&mut store, &[(id, g)]).unwrap();
        let moved = 1.0 - store.get(id).item();
        assert!((moved - 1e-3 * 0.37 / (0.37 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut store, id) = setup(2.5);
        let mut adam = Adam::new(&cfg(), 1e-3, vec![id], &store);
        adam.update(&mut store, &[(id, Tensor::zeros(&[1]))]).unwrap();
        assert_eq!(store.get(id).item(), 2.5);
    }

    #[test]
    fn two_constant_steps_match_hand_trace() {
        let (mut store, id) = setup(0.0);
        let lr = 0.1;
        let mut adam = Adam::new(&cfg(), lr, vec![id], &store);
        let g = 2.0;
        for _ in 0..2 {
            adam.update(&mut store, &[(id, Tensor::from_f64(&[1], &[g]).unwrap())]).unwrap();
        }
        // Hand trace: m1 = 0.2, v1 = 0.004; m2 = 0.38, v2 = 0.007996.
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let step = |m: f64, v: f64, t: i32| lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let expect = -step(0.2, 0.004, 1) - step(0.38, 0.007996, 2);
        assert!((store.get(id).item() - expect).abs() < 1e-12, "{} vs {expect}", store.get(id).item());
    }

    #[test]
    fn non_finite_gradient_leaves_parameters_alone() {
        let (mut store, id) = setup(1.0);
        let mut adam = Adam::new(&cfg(), 1e-3, vec![id], &store);
        let g = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        assert!(adam.update(&mut store, &[(id, g)]).is_err());
        assert_eq!(store.get(id).item(), 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let (mut store, id) = setup(0.0);
        let mut c = cfg();
        c.clip_norm = 1.0;
        let mut adam = Adam::new(&c, 1e-3, vec![id], &store);
        let norm = adam.update(&mut store, &[(id, Tensor::from_f64(&[1], &[10.0]).unwrap())]).unwrap();
        assert_eq!(norm, 10.0);
        assert!((adam.m[0].item() - 0.1).abs() < 1e-12);
    }
}
