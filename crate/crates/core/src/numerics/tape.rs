//! Reverse-mode tape over coarse-grained primitives.

use std::collections::BTreeMap;

use super::ops::{self, OpKind, Saved};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

struct Recorded {
    kind: OpKind,
    inputs: Vec<usize>,
    saved: Saved,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Recorded>,
    param: Option<String>,
}

/// Records primitive applications in evaluation order so that gradients can
/// be propagated back through them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A value that gradients flow into.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            op: None,
            param: None,
        })
    }

    /// A value excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            op: None,
            param: None,
        })
    }

    /// A named parameter; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        self.push(Node {
            value: value.clone(),
            requires_grad: true,
            op: None,
            param: Some(name.to_string()),
        })
    }

    /// Binds every parameter of `set`. Frozen sets are bound as constants.
    pub fn bind(&mut self, set: &ParamSet, trainable: bool) -> Bound {
        let vars = set
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.param(name, t)
                } else {
                    self.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies a primitive to recorded values.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = ops::forward(&kind, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Activations that nothing differentiates need no backward state.
        let op = requires_grad.then(|| Recorded {
            kind,
            inputs: inputs.iter().map(|v| v.0).collect(),
            saved,
        });
        Ok(self.push(Node {
            value,
            requires_grad,
            op,
            param: None,
        }))
    }

    /// Propagates the given output gradients back to every value that
    /// requires a gradient.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if node.value.shape() != g.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("seed {} for value {}", g.dims(), node.value.dims()),
                ));
            }
            accumulate(&mut grads[v.0], g.clone())?;
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let node = &self.nodes[idx];
            let Some(rec) = &node.op else { continue };
            let Some(dy) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = rec.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = rec.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_grads = ops::backward(&rec.kind, &inputs, &node.value, &rec.saved, &dy, &needs)?;
            for ((&src, g), need) in rec.inputs.iter().zip(input_grads).zip(needs) {
                if let (true, Some(g)) = (need, g) {
                    accumulate(&mut grads[src], g)?;
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_ref().map(|name| (i, name)));
        let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, name) in params {
            let g = grads[i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape().to_vec()));
            match named.get_mut(name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    named.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients {
            grads,
            params: ParamSet::from_map(named),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Parameters bound to a tape, looked up by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: ParamSet,
}

impl Gradients {
    /// Gradient of a leaf value; `None` if nothing reached it. Intermediate
    /// gradients are consumed during propagation.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all named parameters (zeros where unreachable).
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_shared_input_accumulates() {
        // y = sum(x * x) → dy/dx = 2x
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let sq = tape.apply(OpKind::Mul, &[x, x]).unwrap();
        let y = tape.apply(OpKind::Sum, &[sq]).unwrap();
        let g = tape.backward(&[(y, Tensor::scalar(1.0))]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.apply(OpKind::Mul, &[x, c]).unwrap();
        let g = tape.backward(&[(y, Tensor::from_vec(vec![1.0, 1.0]))]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn named_params_collect_gradients() {
        let mut set = ParamSet::default();
        set.insert("w", Tensor::from_vec(vec![2.0])).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&set, true);
        let x = tape.constant(Tensor::from_vec(vec![5.0]));
        let y = tape.apply(OpKind::Mul, &[bound.get("w").unwrap(), x]).unwrap();
        let g = tape.backward(&[(y, Tensor::from_vec(vec![1.0]))]).unwrap();
        assert_eq!(g.params().get("w").unwrap().data(), &[5.0]);
    }
}
