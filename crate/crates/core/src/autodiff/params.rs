use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named model tensor. Non-trainable entries are state buffers such as
/// batch-norm running statistics: checkpointed but never bound to a tape.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape variables for the trainable entries of a store, for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter is not trainable")
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name `{name}`"
        );
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Places every trainable tensor on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| p.trainable.then(|| tape.param(p.value.clone())))
            .collect();
        Binding { vars }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the tape's leaf gradients into each parameter's `grad`.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (p, v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = v.and_then(|v| tape.grad(v)) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Replaces values by name, requiring identical names and shapes.
    pub fn load_values<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        let mut seen = 0;
        for (name, value) in entries {
            let p = self
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Version(format!("unknown parameter `{name}`")))?;
            if p.value.shape() != value.shape() {
                return Err(Error::Version(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value;
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {seen} tensors, model expects {}",
                self.params.len()
            )));
        }
        Ok(())
    }
}
