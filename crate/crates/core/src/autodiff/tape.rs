use super::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient contributions an operator sends to its inputs.
pub(crate) type Contributions<T> = Vec<(Var, Tensor<T>)>;

/// Backward rule: receives the output gradient and read access to every
/// recorded value, returns gradients for the inputs it depends on.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Node<T>]) -> Contributions<T>>;

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) backward: Option<BackwardFn<T>>,
}

/// Eager reverse-mode tape. Operators compute their value immediately and
/// record a backward rule; `backward` replays rules in strict reverse
/// recording order and accumulates into leaf gradients.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            backward: None,
        })
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            backward: None,
        })
    }

    pub(crate) fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&Tensor<T>, &[Node<T>]) -> Contributions<T> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Backpropagates from a scalar output (seed gradient 1).
    pub fn backward(&mut self, root: Var) {
        let seed = Tensor::ones(self.nodes[root.0].value.shape());
        self.backward_with(root, seed);
    }

    /// Backpropagates an explicit output gradient. Leaf gradients are added
    /// to whatever previous passes left behind.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) {
        assert_eq!(seed.shape(), self.nodes[root.0].value.shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                Some(rule) => {
                    for (input, contribution) in rule(&g, &self.nodes) {
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&contribution),
                            slot => *slot = Some(contribution),
                        }
                    }
                }
                None => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
            }
        }
    }
}
