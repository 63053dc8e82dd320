use crate::error::{Error, Result};
use crate::nnops::{
    self, activation, activation_backward, apply_sample_scale, batch_stats, conv2d_backward, conv2d_forward,
    global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward, normalize, Activation, ConvGeometry,
    Mode, NormConfig, NormStats,
};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    MulChannel,
    Conv2d { geometry: ConvGeometry, bias: bool },
    BatchNorm { stats: NormStats<T>, epsilon: f64, batch_coupled: bool },
    Act(Activation),
    Gap,
    Linear { bias: bool },
    SampleScale(Vec<T>),
    Sum,
    Mean,
    CrossEntropy { labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MulChannel => "mul_channelwise",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Act(_) => "activation",
            Op::Gap => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::SampleScale(_) => "drop_path",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
}

/// Record of a forward computation, in topological order by construction:
/// every node's inputs were recorded before it.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient of the backward root with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_vec(self) -> Vec<Tensor<T>> {
        self.grads
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Node ids in recording order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(Error::Graph(format!("node {} is not on a tape of {} nodes", id.0, self.nodes.len()))),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> Result<NodeId> {
        self.check(&[x])?;
        let v = self.value(x).scale(k);
        Ok(self.push(Op::Scale(k), vec![x], v))
    }

    pub fn mul_channelwise(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(&[x, s])?;
        let v = self.value(x).mul_channelwise(self.value(s))?;
        Ok(self.push(Op::MulChannel, vec![x, s], v))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
    ) -> Result<NodeId> {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.check(&inputs)?;
        let v = conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), geometry)?;
        Ok(self.push(Op::Conv2d { geometry, bias: bias.is_some() }, inputs, v))
    }

    /// Batch normalization. In train mode the batch statistics are used
    /// and returned so the caller can fold them into its running
    /// statistics; in eval mode `running` supplies `(mean, var)`.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: (&Tensor<T>, &Tensor<T>),
        config: NormConfig,
        mode: Mode,
    ) -> Result<(NodeId, Option<NormStats<T>>)> {
        self.check(&[x, gamma, beta])?;
        let c = self.value(x).dims()[1];
        for t in [running.0, running.1] {
            if t.dims() != [1, c, 1, 1] {
                return Err(Error::shape("batchnorm2d", format!("running stats {} for {c} channels", t.shape())));
            }
        }
        let (stats, coupled) = match mode {
            Mode::Train => (batch_stats(self.value(x))?, true),
            Mode::Eval => (NormStats { mean: running.0.data().to_vec(), var: running.1.data().to_vec() }, false),
        };
        let v = normalize(self.value(x), &stats, self.value(gamma), self.value(beta), config.epsilon)?;
        let batch = coupled.then(|| stats.clone());
        let op = Op::BatchNorm { stats, epsilon: config.epsilon, batch_coupled: coupled };
        Ok((self.push(op, vec![x, gamma, beta], v), batch))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        self.check(&[x])?;
        let v = activation(self.value(x), kind);
        Ok(self.push(Op::Act(kind), vec![x], v))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = global_avg_pool(self.value(x))?;
        Ok(self.push(Op::Gap, vec![x], v))
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.check(&inputs)?;
        let v = linear_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        Ok(self.push(Op::Linear { bias: bias.is_some() }, inputs, v))
    }

    /// Multiplies each batch sample by its own constant (the drop-path mask).
    pub fn sample_scale(&mut self, x: NodeId, scale: Vec<T>) -> Result<NodeId> {
        self.check(&[x])?;
        if scale.len() != self.value(x).dims()[0] {
            return Err(Error::shape(
                "drop_path",
                format!("{} sample scales for batch of {}", scale.len(), self.value(x).dims()[0]),
            ));
        }
        let v = apply_sample_scale(self.value(x), &scale);
        Ok(self.push(Op::SampleScale(scale), vec![x], v))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = Tensor::scalar(self.value(x).sum());
        Ok(self.push(Op::Sum, vec![x], v))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        Ok(self.push(Op::Mean, vec![x], v))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, with logits
    /// shaped `(N, k, 1, 1)`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(&[logits])?;
        let t = self.value(logits);
        let [n, k, h, w] = t.dims();
        if h != 1 || w != 1 {
            return Err(Error::shape("cross_entropy", format!("logits {} are not (N, k, 1, 1)", t.shape())));
        }
        if labels.len() != n {
            return Err(Error::Contract(format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        if n == 0 {
            return Err(Error::Contract("cross entropy of an empty batch".into()));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &label) in t.data().chunks(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            total = total + z.ln() - (row[label] - max);
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let v = Tensor::scalar(total / T::from_f64(n as f64));
        Ok(self.push(Op::CrossEntropy { labels: labels.to_vec(), probs }, vec![logits], v))
    }

    /// Reverse-mode sweep from a scalar root. Nodes without a path to the
    /// root receive zero gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        self.check(&[root])?;
        if self.value(root).shape() != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backward root must be a (1, 1, 1, 1) scalar, got {}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.local_grads(node, &g)?;
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| Tensor::zeros_like(&node.value)))
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradients flowing into each input of `node`, given the gradient of
    /// its output.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let input = |i: usize| self.value(node.inputs[i]);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-T::one()))],
            Op::Mul => vec![Some(g.mul(input(1))?), Some(g.mul(input(0))?)],
            Op::Scale(k) => vec![Some(g.scale(*k))],
            Op::MulChannel => {
                let (x, s) = (input(0), input(1));
                let gx = g.mul_channelwise(s)?;
                let plane = x.dims()[2] * x.dims()[3];
                let gs: Vec<T> = if plane == 0 {
                    vec![T::zero(); s.len()]
                } else {
                    g.data()
                        .chunks(plane)
                        .zip(x.data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect()
                };
                vec![Some(gx), Some(Tensor::from_parts(s.shape(), gs))]
            }
            Op::Conv2d { geometry, bias } => {
                let grads = conv2d_backward(input(0), input(1), g, *geometry)?;
                let mut out = vec![Some(grads.input), Some(grads.weight)];
                if *bias {
                    out.push(Some(grads.bias));
                }
                out
            }
            Op::BatchNorm { stats, epsilon, batch_coupled } => {
                let grads = nnops::batchnorm2d_backward(input(0), stats, input(1), g, *epsilon, *batch_coupled)?;
                vec![Some(grads.input), Some(grads.gamma), Some(grads.beta)]
            }
            Op::Act(kind) => vec![Some(activation_backward(input(0), &node.value, g, *kind))],
            Op::Gap => vec![Some(global_avg_pool_backward(input(0).shape(), g)?)],
            Op::Linear { bias } => {
                let grads = linear_backward(input(0), input(1), g)?;
                let mut out = vec![Some(grads.input), Some(grads.weight)];
                if *bias {
                    out.push(Some(grads.bias));
                }
                out
            }
            Op::SampleScale(scale) => vec![Some(apply_sample_scale(g, scale))],
            Op::Sum => {
                let gv = g.item()?;
                vec![Some(Tensor::full(input(0).shape(), gv))]
            }
            Op::Mean => {
                let x = input(0);
                let gv = g.item()? / T::from_f64(x.len() as f64);
                vec![Some(Tensor::full(x.shape(), gv))]
            }
            Op::CrossEntropy { labels, probs } => {
                let x = input(0);
                let k = x.dims()[1];
                let n = labels.len();
                let gv = g.item()? / T::from_f64(n as f64);
                let mut data = probs.clone();
                for (row, &label) in data.chunks_mut(k).zip(labels) {
                    row[label] = row[label] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * gv);
                }
                vec![Some(Tensor::from_parts(x.shape(), data))]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Init;

    fn rand(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Init::Uniform { rng: &mut Rng::seed(seed), lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn add_zero_gives_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand([2, 3, 4, 4], 1));
        let z = tape.leaf(Tensor::zeros([2, 3, 4, 4]));
        let y = tape.add(x, z).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_scale_by_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand([1, 3, 2, 2], 2));
        let s = tape.leaf(Tensor::full([1, 3, 1, 1], 2.0));
        let y = tape.mul_channelwise(x, s).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn relu_dead_region_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand([1, 2, 3, 3], 3).map(|v| -v.abs() - 0.1));
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreached_nodes_get_zero_gradient_of_matching_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand([1, 2, 3, 3], 4));
        let unused = tape.leaf(rand([2, 1, 1, 5], 5));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), tape.len());
        for id in tape.ids() {
            assert_eq!(g.get(id).shape(), tape.value(id).shape());
        }
        assert!(g.get(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand([1, 2, 1, 1], 6));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn dangling_input_is_graph_error() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(rand([1, 1, 1, 1], 7));
        assert!(matches!(tape.add(x, NodeId(5)), Err(Error::Graph(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::<f64>::zeros([3, 10, 1, 1]));
        let loss = tape.cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(tape.cross_entropy(logits, &[0, 10, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_saturates_with_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut t = Tensor::<f64>::zeros([1, 4, 1, 1]);
            t.set(0, 2, 0, 0, margin);
            let mut tape = Tape::new();
            let logits = tape.leaf(t);
            let loss = tape.cross_entropy(logits, &[2]).unwrap();
            let v = tape.value(loss).item().unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn gradients_of_summed_roots_add() {
        let x0 = rand([1, 2, 3, 3], 8);
        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let a = tape.activation(x, Activation::Sigmoid).unwrap();
        let la = tape.sum(a).unwrap();
        let b = tape.mul(x, x).unwrap();
        let lb = tape.mean(b).unwrap();
        let both = tape.add(la, lb).unwrap();
        let ga = tape.backward(la).unwrap();
        let gb = tape.backward(lb).unwrap();
        let gab = tape.backward(both).unwrap();
        let summed = ga.get(x).add(gb.get(x)).unwrap();
        assert!(summed.max_abs_diff(gab.get(x)).unwrap() < 1e-15);
    }
}
