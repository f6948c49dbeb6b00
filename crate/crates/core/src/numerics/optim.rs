//! Adam with decoupled weight decay.

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; parameters and moments untouched.
    SkippedNonFinite,
}

/// Moment estimates and step counter for one [`ParamStore`] layout.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients:
    ///
    /// `p ← p − lr·wd·p − lr·m̂ / (√v̂ + eps)`
    ///
    /// The decay term acts on the parameters directly and never enters the
    /// moment estimates.
    pub fn step(&mut self, store: &mut ParamStore) -> StepOutcome {
        if !store.grads_finite() {
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * weight_decay * w[i];
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.add("p", "w", Tensor::row_vector(vals)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &s,
        );
        for _ in 0..5 {
            assert_eq!(opt.step(&mut s), StepOutcome::Applied);
        }
        assert_eq!(s.params()[0].value.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_multiplicatively() {
        let vals = vec![1.0, -2.0, 0.5];
        let mut s = store(vals.clone());
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.01,
                weight_decay: 0.1,
                ..AdamWConfig::default()
            },
            &s,
        );
        opt.step(&mut s);
        for (p, v) in s.params()[0].value.data().iter().zip(&vals) {
            assert!((p - v * (1.0 - 0.001)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut s = store(vec![3.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                weight_decay: 0.5,
                ..AdamWConfig::default()
            },
            &s,
        );
        opt.step(&mut s);
        assert_eq!(s.params()[0].value.data(), &[3.0]);
    }

    #[test]
    fn constant_gradient_update_approaches_sign_step() {
        // With g fixed, m̂ → g and v̂ → g², so each step moves by lr·g/(|g|+eps).
        let lr = 1e-3;
        let mut s = store(vec![0.0, 0.0]);
        let id = s.lookup("p.w").unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &s,
        );
        let g = [0.37, -4.2];
        let mut last = s.value(id).clone();
        for step in 0..2000 {
            s.zero_grad();
            s.accumulate_grad(id, &Tensor::row_vector(g.to_vec()));
            opt.step(&mut s);
            let now = s.value(id).clone();
            if step > 1500 {
                for i in 0..2 {
                    let delta = now.data()[i] - last.data()[i];
                    let expected = -lr * g[i].signum();
                    assert!((delta - expected).abs() < 1e-7, "{delta} vs {expected}");
                }
            }
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut s = store(vec![1.0]);
        let id = s.lookup("p.w").unwrap();
        s.accumulate_grad(id, &Tensor::row_vector(vec![f64::NAN]));
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert_eq!(opt.step(&mut s), StepOutcome::SkippedNonFinite);
        assert_eq!(opt.steps(), 0);
        assert_eq!(s.params()[0].value.data(), &[1.0]);
    }
}
