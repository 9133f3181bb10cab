use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::shape_err;
use crate::{ParamId, ParamStore, Result, Tensor};

/// Inputs handed to a backward closure.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to the op's output.
    pub grad: &'a Tensor,
    /// Forward values of the op's inputs, in recording order.
    pub inputs: &'a [Rc<Tensor>],
    /// Forward value of the op's output.
    pub output: &'a Tensor,
    /// Whether each input participates in differentiation. Closures may
    /// return `None` for inputs that do not.
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape created with [`Tape::inference`] records values only; no backward
/// closures are kept and nothing requires gradients.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes that carry a backward closure.
    pub fn num_ops(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.backward.is_some())
            .count()
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.recording,
            param: None,
        });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id
    /// return the same node so gradients from every use are summed.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let node = self.push(Node {
            value: Rc::new(p.value.clone()),
            inputs: Vec::new(),
            backward: None,
            requires_grad: p.trainable && self.recording,
            param: Some(id),
        });
        self.params.borrow_mut().insert(id, node);
        Var { tape: self, id: node }
    }

    /// Records an op. `backward` receives the output gradient and returns
    /// one optional gradient per input (same shapes as the inputs).
    pub fn op<F>(&self, inputs: &[Var<'_>], value: Tensor, backward: F) -> Var<'_>
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.recording && inputs.iter().any(|v| v.requires_grad());
        let id = self.push(Node {
            value: Rc::new(value),
            inputs: if requires_grad {
                inputs.iter().map(|v| v.id).collect()
            } else {
                Vec::new()
            },
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates `d loss / d node` to every node that requires gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        let mut out = Gradients::default();
        if !root.requires_grad {
            return Ok(out);
        }
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let inputs: Vec<Rc<Tensor>> =
                    node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let input_grads = backward(&BackwardArgs {
                    grad: &grad,
                    inputs: &inputs,
                    output: &node.value,
                    needs: &needs,
                });
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                    let (Some(g), true) = (g, *need) else {
                        continue;
                    };
                    debug_assert_eq!(
                        g.shape(),
                        nodes[input].value.shape(),
                        "gradient shape mismatch"
                    );
                    match &mut grads[input] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            } else {
                if let Some(pid) = node.param {
                    out.params.push((pid, grad.clone()));
                }
                out.nodes.insert(id, grad);
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

/// Gradients of leaves produced by [`Tape::backward`].
#[derive(Default, Debug, Clone)]
pub struct Gradients {
    nodes: HashMap<usize, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.nodes.get(&var.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Copy of the value with no tape history.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
