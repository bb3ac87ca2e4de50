//! Adam with bias correction. One state owns the first/second moments for
//! a fixed registry of parameter names; `step` updates exactly those
//! parameters and leaves every other entry of the set untouched.

use std::collections::BTreeMap;

use super::{DiffError, DiffResult, GradSet, ParamSet, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: BTreeMap<String, (Tensor2, Tensor2)>,
}

impl AdamState {
    /// Registers `names` (with shapes looked up in `params`) using the
    /// standard defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new<'a>(
        lr: f64,
        params: &ParamSet,
        names: impl IntoIterator<Item = &'a str>,
    ) -> DiffResult<Self> {
        let mut moments = BTreeMap::new();
        for name in names {
            let p = params.get(name)?;
            moments.insert(
                name.to_string(),
                (
                    Tensor2::zeros(p.rows(), p.cols()),
                    Tensor2::zeros(p.rows(), p.cols()),
                ),
            );
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn registered_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(|s| s.as_str())
    }

    /// One bias-corrected update over every registered parameter:
    ///   m <- b1 m + (1-b1) g;   v <- b2 v + (1-b2) g^2
    ///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    /// Iteration follows registry name order, so updates are
    /// deterministic. Zero gradients leave moments decayed but the
    /// parameter unchanged only once the moments are themselves zero.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> DiffResult<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, (m, v)) in self.moments.iter_mut() {
            let g = grads.get(name)?;
            if !g.is_finite() {
                return Err(DiffError::NonFinite {
                    context: format!("gradient of `{name}` in adam step"),
                });
            }
            let p = params.get_mut(name)?;
            if g.shape() != p.shape() {
                return Err(DiffError::Shape {
                    context: format!("adam step for `{name}`"),
                    expected: format!("{}x{}", p.rows(), p.cols()),
                    got: format!("{}x{}", g.rows(), g.cols()),
                });
            }
            for i in 0..p.data().len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Raw state for checkpointing: (name, m, v) triples plus step count.
    pub fn export(&self) -> (u64, f64, Vec<(String, Tensor2, Tensor2)>) {
        (
            self.t,
            self.lr,
            self.moments
                .iter()
                .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
                .collect(),
        )
    }

    /// Rebuilds a state saved by `export`.
    pub fn import(t: u64, lr: f64, moments: Vec<(String, Tensor2, Tensor2)>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t,
            moments: moments.into_iter().map(|(k, m, v)| (k, (m, v))).collect(),
        }
    }
}
