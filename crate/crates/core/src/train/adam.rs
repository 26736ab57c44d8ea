use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub step: u64,
    moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// First and second moments of one parameter, once it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates every parameter of `model` from `grads`, keyed by name.
    pub fn step(&mut self, model: &mut dyn Parameterized, grads: &IndexMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.learning_rate;
        let moments = &mut self.moments;
        let mut status = Ok(());
        model.visit_mut("", &mut |name, param| {
            if status.is_err() {
                return;
            }
            let Some(grad) = grads.get(&name) else {
                status = Err(Error::Contract(format!("no gradient for `{name}`")));
                return;
            };
            if grad.shape() != param.shape() {
                status = Err(Error::dim("adam", grad.shape(), param.shape()));
                return;
            }
            let n = param.numel();
            let (m, v) = moments.entry(name).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                let g = g as f64;
                let mn = BETA1 * *m as f64 + (1.0 - BETA1) * g;
                let vn = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + EPSILON);
                *p = (*p as f64 - update) as f32;
            }
        });
        status
    }
}
