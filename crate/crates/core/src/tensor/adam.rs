use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One bias-corrected Adam update. Every gradient is checked for
    /// non-finite entries before any parameter is touched.
    pub fn step(&self, store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return Err(Error::contract(format!(
                "adam: {} params, {} grads, {} state slots",
                store.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.tensor.len() {
                    return Err(Error::shape("adam", p.tensor.shape(), g.shape()));
                }
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = (0..store.len()).collect();
        for i in ids {
            let Some(g) = &grads[i] else { continue };
            let id = super::ParamId(i);
            if !store.get(id).trainable {
                continue;
            }
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let mut data = store.get(id).tensor.to_vec();
            for (j, (&gj, x)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            let shape = store.get(id).tensor.shape().to_vec();
            store.set(id, Tensor::from_parts(shape, data))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let mut st = AdamState::new(&s);
        let before = s.clone();
        Adam::default()
            .step(&mut s, &[Some(Tensor::zeros(&[3]))], &mut st)
            .unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_is_normalized_sign() {
        // With bias correction, m̂ = g and v̂ = g², so the step is lr·g/(|g|+eps).
        let mut s = store();
        let mut st = AdamState::new(&s);
        let g = vec![0.5, -3.0, 1e-3];
        let opt = Adam::with_lr(0.01);
        opt.step(&mut s, &[Some(Tensor::vector(g.clone()))], &mut st)
            .unwrap();
        let after = s.by_name("w").unwrap().tensor.to_vec();
        for ((a, b), gj) in after.iter().zip([1.0, -2.0, 3.0]).zip(g) {
            let expected = b - 0.01 * gj / (gj.abs() + 1e-8);
            assert!((a - expected).abs() < 1e-15, "{a} vs {expected}");
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store();
        let mut st = AdamState::new(&s);
        let err = Adam::default()
            .step(&mut s, &[Some(Tensor::vector(vec![0.0, f64::NAN, 0.0]))], &mut st)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store();
            let mut st = AdamState::new(&s);
            for k in 0..10 {
                let g = Tensor::vector(vec![0.1 * k as f64, -0.3, 0.7 / (k + 1) as f64]);
                Adam::default().step(&mut s, &[Some(g)], &mut st).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
