//! Named parameter plumbing shared by every module of the network.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Records parameter tensors on a tape under stable names.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    bound: Vec<(String, Var<'t>)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Self {
            tape,
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&mut self, name: String, value: &Tensor) -> Var<'t> {
        let var = self.tape.leaf(value.clone(), self.trainable);
        self.bound.push((name, var));
        var
    }

    pub fn bound(&self) -> &[(String, Var<'t>)] {
        &self.bound
    }

    /// Gradients by parameter name; call after `Tape::backward`.
    pub fn grads(&self) -> Result<IndexMap<String, Tensor>> {
        self.bound
            .iter()
            .map(|(name, var)| {
                var.grad()
                    .map(|g| (name.clone(), g))
                    .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))
            })
            .collect()
    }
}

/// Visitor over named tensors, in a fixed order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
