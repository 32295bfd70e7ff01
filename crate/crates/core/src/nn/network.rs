use thiserror::Error;

use super::layers::{self, Linear, LinearGrads};
use crate::acl::{AclError, AclGradients, AclLayer};
use crate::arrangement::PatternError;
use crate::tensor::Tensor4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("layer {index}: {reason}")]
    Shape { index: usize, reason: String },
    #[error("layer {index}: {source}")]
    Acl { index: usize, source: AclError },
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("label {label} out of range for {classes} outputs")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    Config(String),
}

/// One stage of a feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Acl(AclLayer),
    MaxPool { kernel: usize, stride: usize },
    Relu,
    Flatten,
    Linear(Linear),
}

impl Node {
    pub fn kind(&self) -> &'static str {
        match self {
            Node::Acl(_) => "acl",
            Node::MaxPool { .. } => "maxpool",
            Node::Relu => "relu",
            Node::Flatten => "flatten",
            Node::Linear(_) => "linear",
        }
    }
}

/// Sequential network over `(C, H, W)` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_dims: [usize; 3],
    nodes: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    None,
    Acl(AclGradients),
    Linear(LinearGrads),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<LayerGrads>,
}

impl NetGradients {
    pub fn zeros_like(net: &Network) -> Self {
        NetGradients {
            layers: net
                .nodes
                .iter()
                .map(|n| match n {
                    Node::Acl(l) => LayerGrads::Acl(AclGradients::zeros_like(l)),
                    Node::Linear(l) => LayerGrads::Linear(LinearGrads::zeros_like(l)),
                    _ => LayerGrads::None,
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (LayerGrads::Acl(a), LayerGrads::Acl(b)) => a.add_assign(b),
                (LayerGrads::Linear(a), LayerGrads::Linear(b)) => {
                    for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                        *x += y;
                    }
                    for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                        *x += y;
                    }
                }
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            match g {
                LayerGrads::Acl(a) => a.scale(factor),
                LayerGrads::Linear(l) => l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor),
                LayerGrads::None => {}
            }
        }
    }

    /// All gradient entries in the same order as [`Network::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrads::Acl(a) => {
                    a.akp_grads.iter().for_each(|v| out.extend_from_slice(v));
                    out.extend_from_slice(&a.bias_grads);
                }
                LayerGrads::Linear(l) => {
                    out.extend_from_slice(&l.weight);
                    out.extend_from_slice(&l.bias);
                }
                LayerGrads::None => {}
            }
        }
        out
    }
}

/// Intermediate values recorded by a forward pass for use in backward.
pub struct Trace {
    inputs: Vec<Tensor4>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl Network {
    /// Validates that consecutive shapes compose and that a single flatten
    /// precedes every linear layer.
    pub fn new(input_dims: [usize; 3], nodes: Vec<Node>) -> Result<Self, NetError> {
        let net = Network { input_dims, nodes };
        net.shapes()?;
        Ok(net)
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Output `(C, H, W)` of every node.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>, NetError> {
        let mut shape = self.input_dims;
        let mut flat = false;
        let mut out = Vec::with_capacity(self.nodes.len());
        for (index, node) in self.nodes.iter().enumerate() {
            let err = |reason: String| NetError::Shape { index, reason };
            shape = match node {
                Node::Acl(layer) => {
                    if flat {
                        return Err(err("convolution after flatten".into()));
                    }
                    let [_, c, h, w] = layer
                        .output_dims([1, shape[0], shape[1], shape[2]])
                        .map_err(|source| NetError::Acl { index, source })?;
                    [c, h, w]
                }
                Node::MaxPool { kernel, stride } => {
                    if flat {
                        return Err(err("pooling after flatten".into()));
                    }
                    let oh = layers::max_pool_output_len(shape[1], *kernel, *stride);
                    let ow = layers::max_pool_output_len(shape[2], *kernel, *stride);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => [shape[0], oh, ow],
                        _ => return Err(err(format!("cannot pool {}x{} with window {kernel}", shape[1], shape[2]))),
                    }
                }
                Node::Relu => shape,
                Node::Flatten => {
                    if flat {
                        return Err(err("second flatten".into()));
                    }
                    flat = true;
                    [shape.iter().product(), 1, 1]
                }
                Node::Linear(l) => {
                    if !flat {
                        return Err(err("linear layer before flatten".into()));
                    }
                    if shape[0] != l.in_features {
                        return Err(err(format!("expects {} features, got {}", l.in_features, shape[0])));
                    }
                    [l.out_features, 1, 1]
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_dims(&self) -> [usize; 3] {
        self.shapes().expect("validated at construction").last().copied().unwrap_or(self.input_dims)
    }

    fn check_input(&self, x: &Tensor4) -> Result<(), NetError> {
        let [_, c, h, w] = x.dims();
        if [c, h, w] != self.input_dims {
            return Err(NetError::Shape {
                index: 0,
                reason: format!("input item dims {:?}, network expects {:?}", [c, h, w], self.input_dims),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4, NetError> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (index, node) in self.nodes.iter().enumerate() {
            cur = self.node_forward(index, node, &cur)?.0;
        }
        Ok(cur)
    }

    /// Forward pass that keeps what backward needs.
    pub fn forward_trace(&self, x: &Tensor4) -> Result<(Tensor4, Trace), NetError> {
        self.check_input(x)?;
        let mut trace =
            Trace { inputs: Vec::with_capacity(self.nodes.len()), pool_argmax: Vec::with_capacity(self.nodes.len()) };
        let mut cur = x.clone();
        for (index, node) in self.nodes.iter().enumerate() {
            let (next, argmax) = self.node_forward(index, node, &cur)?;
            trace.inputs.push(std::mem::replace(&mut cur, next));
            trace.pool_argmax.push(argmax);
        }
        Ok((cur, trace))
    }

    fn node_forward(&self, index: usize, node: &Node, x: &Tensor4) -> Result<(Tensor4, Option<Vec<usize>>), NetError> {
        Ok(match node {
            Node::Acl(layer) => (layer.forward(x).map_err(|source| NetError::Acl { index, source })?, None),
            Node::MaxPool { kernel, stride } => {
                let (y, arg) = layers::max_pool_forward(x, *kernel, *stride);
                (y, Some(arg))
            }
            Node::Relu => (layers::relu_forward(x), None),
            Node::Flatten => {
                let dims = [x.batch(), x.item_len(), 1, 1];
                (x.clone().reshape(dims).expect("same size"), None)
            }
            Node::Linear(l) => (l.forward(x), None),
        })
    }

    /// Backpropagates the gradient of the loss with respect to the network
    /// output through every node recorded in `trace`.
    pub fn backward(&self, trace: &Trace, grad_output: Tensor4) -> Result<NetGradients, NetError> {
        let mut grads = vec![LayerGrads::None; self.nodes.len()];
        let mut g = grad_output;
        for (index, node) in self.nodes.iter().enumerate().rev() {
            let x = &trace.inputs[index];
            let need_input = index > 0;
            match node {
                Node::Acl(layer) => {
                    let err = |source| NetError::Acl { index, source };
                    if need_input {
                        let (lg, gx) = layer.backward(x, &g).map_err(err)?;
                        grads[index] = LayerGrads::Acl(lg);
                        g = gx;
                    } else {
                        grads[index] = LayerGrads::Acl(layer.backward_params(x, &g).map_err(err)?);
                    }
                }
                Node::MaxPool { .. } => {
                    let arg = trace.pool_argmax[index].as_ref().expect("pool trace");
                    g = layers::max_pool_backward(x.dims(), arg, &g);
                }
                Node::Relu => g = layers::relu_backward(x, &g),
                Node::Flatten => g = g.reshape(x.dims()).expect("same size"),
                Node::Linear(l) => {
                    let (lg, gx) = l.backward(x, &g);
                    grads[index] = LayerGrads::Linear(lg);
                    g = gx;
                }
            }
        }
        Ok(NetGradients { layers: grads })
    }

    pub fn apply_update(&mut self, grads: &NetGradients, learning_rate: f64) -> Result<(), NetError> {
        for (index, (node, g)) in self.nodes.iter_mut().zip(&grads.layers).enumerate() {
            match (node, g) {
                (Node::Acl(layer), LayerGrads::Acl(g)) => {
                    layer.apply_update(g, learning_rate).map_err(|source| NetError::Acl { index, source })?
                }
                (Node::Linear(l), LayerGrads::Linear(g)) => l.apply_update(g, learning_rate),
                (_, LayerGrads::None) => {}
                _ => return Err(NetError::Shape { index, reason: "gradient kind does not match layer".into() }),
            }
        }
        Ok(())
    }

    /// Every learnable value: per ACL the AKPs of each kernel then the bias,
    /// per linear layer the weights then the bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node {
                Node::Acl(layer) => {
                    layer.specs().iter().for_each(|s| out.extend_from_slice(&s.akps));
                    out.extend_from_slice(layer.bias());
                }
                Node::Linear(l) => {
                    out.extend_from_slice(&l.weight);
                    out.extend_from_slice(&l.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrites the learnable values in [`Network::flat_params`] order.
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<(), NetError> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(NetError::Config(format!("expected {expected} parameters, got {}", values.len())));
        }
        let mut it = values.iter().copied();
        for node in &mut self.nodes {
            match node {
                Node::Acl(layer) => {
                    for k in 0..layer.specs().len() {
                        layer.akps_mut(k).iter_mut().for_each(|v| *v = it.next().unwrap());
                    }
                    layer.bias_mut().iter_mut().for_each(|v| *v = it.next().unwrap());
                }
                Node::Linear(l) => {
                    l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Acl(layer) => layer.param_count(),
                Node::Linear(l) => l.weight.len() + l.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// ACL layers with their node index.
    pub fn acl_layers(&self) -> impl Iterator<Item = (usize, &AclLayer)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n {
            Node::Acl(l) => Some((i, l)),
            _ => None,
        })
    }
}
