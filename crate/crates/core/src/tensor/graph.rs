use super::kernels::{self, ConvShape, Padding, TransposeShape};
use super::params::{ParamId, ParamStore, ParamValues};
use super::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Value and input-gradient of a scalar loss evaluated eagerly.
pub struct LossEval<F> {
    pub value: F,
    /// d value / d input, same dims as the input.
    pub grad: Tensor<F>,
    /// Branch decisions (clamps and the like) taken while evaluating; the
    /// gradient checker uses these to detect non-smooth points.
    pub kinks: Vec<bool>,
}

enum Op<F> {
    Constant,
    Param,
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dilation: usize,
        padding: Padding,
    },
    ConvTranspose1d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    Add(NodeId, NodeId),
    RepeatRows {
        input: NodeId,
        factor: usize,
    },
    Gated {
        filter: NodeId,
        gate: NodeId,
        tanh: Vec<F>,
        sig: Vec<F>,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Loss {
        input: NodeId,
        grad: Tensor<F>,
        kinks: Vec<bool>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the reverse sweep is a backwards walk over the node list.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients from one reverse sweep.
pub struct Gradients<F: Real> {
    by_node: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<F: Real> Gradients<F> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.node(*n))
    }

    /// `(param, grad)` pairs for every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params
            .iter()
            .filter_map(|(p, n)| self.node(*n).map(|g| (*p, g)))
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn accumulate<'a, F: Real>(slot: &'a mut Option<Tensor<F>>, dims: &[usize]) -> &'a mut Tensor<F> {
    slot.get_or_insert_with(|| Tensor::zeros(dims))
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<F>, TensorError> {
        self.nodes.get(id.0).ok_or(TensorError::NoForward)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn needs(&self, ids: &[Option<NodeId>]) -> bool {
        ids.iter().flatten().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Leaf holding a parameter value; repeated requests share one node.
    pub fn param<P: ParamValues<F> + ?Sized>(&mut self, params: &P, id: ParamId) -> NodeId {
        if let Some(Some(node)) = self.param_nodes.get(id.0) {
            return *node;
        }
        let node = self.push(params.value(id).clone(), Op::Param, true);
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        self.param_nodes[id.0] = Some(node);
        node
    }

    fn conv_shape(
        &self,
        op: &'static str,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<(usize, usize, usize, usize), TensorError> {
        let x = &self.node(input)?.value;
        let w = &self.node(weight)?.value;
        if x.dims().len() != 2 {
            return Err(mismatch(op, &[0, 0], x.dims()));
        }
        if w.dims().len() != 3 || w.dims()[1] != x.dims()[1] {
            return Err(mismatch(op, &[0, x.dims()[1], 0], w.dims()));
        }
        let (taps, cin, cout) = (w.dims()[0], w.dims()[1], w.dims()[2]);
        if let Some(b) = bias {
            let b = &self.node(b)?.value;
            if b.dims() != [cout] {
                return Err(mismatch(op, &[cout], b.dims()));
            }
        }
        Ok((x.dims()[0], taps, cin, cout))
    }

    /// Dilated 1-D convolution of `[T x Cin]` with `[K x Cin x Cout]`;
    /// output length equals input length, out-of-range taps read zero.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dilation: usize,
        padding: Padding,
    ) -> Result<NodeId, TensorError> {
        if dilation == 0 {
            return Err(TensorError::InvalidArgument("dilation must be >= 1".into()));
        }
        let (len, taps, cin, cout) = self.conv_shape("conv1d", input, weight, bias)?;
        let shape = ConvShape {
            len,
            taps,
            cin,
            cout,
            dilation,
            padding,
        };
        let out = kernels::conv1d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &shape,
        );
        let needs = self.needs(&[Some(input), Some(weight), bias]);
        Ok(self.push(
            Tensor::from_vec(&[len, cout], out)?,
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
                padding,
            },
            needs,
        ))
    }

    /// Transposed convolution; output has exactly `T * stride` rows.
    pub fn conv_transpose1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument("stride must be >= 1".into()));
        }
        let (len, taps, cin, cout) = self.conv_shape("conv_transpose1d", input, weight, bias)?;
        let shape = TransposeShape {
            len,
            taps,
            cin,
            cout,
            stride,
        };
        let out = kernels::conv_transpose1d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &shape,
        );
        let needs = self.needs(&[Some(input), Some(weight), bias]);
        Ok(self.push(
            Tensor::from_vec(&[len * stride, cout], out)?,
            Op::ConvTranspose1d {
                input,
                weight,
                bias,
                stride,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        if x.dims() != y.dims() {
            return Err(mismatch("add", x.dims(), y.dims()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let value = Tensor::from_vec(x.dims(), data)?;
        let needs = self.needs(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Nearest-neighbour upsampling along rows: each row repeated `factor` times.
    pub fn repeat_rows(&mut self, input: NodeId, factor: usize) -> Result<NodeId, TensorError> {
        if factor == 0 {
            return Err(TensorError::InvalidArgument("repeat factor must be >= 1".into()));
        }
        let x = &self.node(input)?.value;
        let (rows, cols) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(rows * factor * cols);
        for r in 0..rows {
            for _ in 0..factor {
                data.extend_from_slice(x.row(r));
            }
        }
        let value = Tensor::from_vec(&[rows * factor, cols], data)?;
        let needs = self.needs(&[Some(input)]);
        Ok(self.push(value, Op::RepeatRows { input, factor }, needs))
    }

    /// Elementwise `tanh(filter) * sigmoid(gate)`.
    pub fn gated(&mut self, filter: NodeId, gate: NodeId) -> Result<NodeId, TensorError> {
        let (a, b) = (&self.node(filter)?.value, &self.node(gate)?.value);
        if a.dims() != b.dims() {
            return Err(mismatch("gated", a.dims(), b.dims()));
        }
        let tanh: Vec<F> = a.data().iter().map(|v| v.tanh()).collect();
        let sig: Vec<F> = b.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let out = tanh.iter().zip(&sig).map(|(t, s)| *t * *s).collect();
        let value = Tensor::from_vec(a.dims(), out)?;
        let needs = self.needs(&[Some(filter), Some(gate)]);
        Ok(self.push(
            value,
            Op::Gated {
                filter,
                gate,
                tanh,
                sig,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let x = &self.node(input)?.value;
        let data = x.data().iter().map(|&v| v.max(F::zero())).collect();
        let value = Tensor::from_vec(x.dims(), data)?;
        let needs = self.needs(&[Some(input)]);
        Ok(self.push(value, Op::Relu(input), needs))
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let x = &self.node(input)?.value;
        let data = x.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::from_vec(x.dims(), data)?;
        let needs = self.needs(&[Some(input)]);
        Ok(self.push(value, Op::Tanh(input), needs))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let total = F::of(self.node(input)?.value.sum_f64());
        let needs = self.needs(&[Some(input)]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(input), needs))
    }

    /// Records a scalar loss whose gradient is produced together with its
    /// value by `eval`.
    pub fn scalar_loss<E>(
        &mut self,
        input: NodeId,
        eval: impl FnOnce(&Tensor<F>) -> Result<LossEval<F>, E>,
    ) -> Result<NodeId, E>
    where
        E: From<TensorError>,
    {
        let x = &self.node(input)?.value;
        let LossEval { value, grad, kinks } = eval(x)?;
        if grad.dims() != x.dims() {
            return Err(mismatch("scalar_loss", x.dims(), grad.dims()).into());
        }
        let needs = self.needs(&[Some(input)]);
        Ok(self.push(Tensor::scalar(value), Op::Loss { input, grad, kinks }, needs))
    }

    /// Relu signs and loss branch decisions; identical signatures at two
    /// parameter points mean no kink was crossed between them.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    sig.extend(self.nodes[input.0].value.data().iter().map(|&v| v > F::zero()))
                }
                Op::Loss { kinks, .. } => sig.extend_from_slice(kinks),
                _ => {}
            }
        }
        sig
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>, TensorError> {
        self.backward_scaled(loss, F::one())
    }

    /// Reverse sweep seeded with `d loss = scale`.
    pub fn backward_scaled(&self, loss: NodeId, scale: F) -> Result<Gradients<F>, TensorError> {
        let root = self.node(loss)?;
        if matches!(root.op, Op::Constant | Op::Param) {
            return Err(TensorError::NoForward);
        }
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.dims(), scale));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(p, n)| n.map(|n| (ParamId(p), n)))
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
                padding,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let shape = ConvShape {
                    len: x.rows(),
                    taps: w.dims()[0],
                    cin: w.dims()[1],
                    cout: w.dims()[2],
                    dilation: *dilation,
                    padding: *padding,
                };
                let (gx, gw, gb) = self.take_three(grads, *input, *weight, *bias);
                self.finish_three(grads, (*input, gx), (*weight, gw), bias.zip(gb), |gx, gw, gb| {
                    kernels::conv1d_backward(x.data(), w.data(), g.data(), &shape, gx, gw, gb)
                });
            }
            Op::ConvTranspose1d {
                input,
                weight,
                bias,
                stride,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let shape = TransposeShape {
                    len: x.rows(),
                    taps: w.dims()[0],
                    cin: w.dims()[1],
                    cout: w.dims()[2],
                    stride: *stride,
                };
                let (gx, gw, gb) = self.take_three(grads, *input, *weight, *bias);
                self.finish_three(grads, (*input, gx), (*weight, gw), bias.zip(gb), |gx, gw, gb| {
                    kernels::conv_transpose1d_backward(
                        x.data(),
                        w.data(),
                        g.data(),
                        &shape,
                        gx,
                        gw,
                        gb,
                    )
                });
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(*id) {
                        accumulate(&mut grads[id.0], g.dims()).add_assign(g);
                    }
                }
            }
            Op::RepeatRows { input, factor } => {
                if self.wants(*input) {
                    let x = self.value(*input);
                    let cols = x.cols();
                    let slot = accumulate(&mut grads[input.0], x.dims());
                    let dst = slot.data_mut();
                    for (r, block) in g.data().chunks_exact(cols * factor).enumerate() {
                        let mut acc = vec![0.0f64; cols];
                        for row in block.chunks_exact(cols) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += v.as_f64();
                            }
                        }
                        for (d, a) in dst[r * cols..(r + 1) * cols].iter_mut().zip(acc) {
                            *d += F::of(a);
                        }
                    }
                }
            }
            Op::Gated {
                filter,
                gate,
                tanh,
                sig,
            } => {
                if self.wants(*filter) {
                    let slot = accumulate(&mut grads[filter.0], g.dims());
                    for (((d, gv), t), s) in slot.data_mut().iter_mut().zip(g.data()).zip(tanh).zip(sig) {
                        *d += *gv * *s * (F::one() - *t * *t);
                    }
                }
                if self.wants(*gate) {
                    let slot = accumulate(&mut grads[gate.0], g.dims());
                    for (((d, gv), t), s) in slot.data_mut().iter_mut().zip(g.data()).zip(tanh).zip(sig) {
                        *d += *gv * *t * *s * (F::one() - *s);
                    }
                }
            }
            Op::Relu(input) => {
                if self.wants(*input) {
                    let slot = accumulate(&mut grads[input.0], g.dims());
                    for ((d, gv), y) in slot.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        if *y > F::zero() {
                            *d += *gv;
                        }
                    }
                }
            }
            Op::Tanh(input) => {
                if self.wants(*input) {
                    let slot = accumulate(&mut grads[input.0], g.dims());
                    for ((d, gv), y) in slot.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *d += *gv * (F::one() - *y * *y);
                    }
                }
            }
            Op::Sum(input) => {
                if self.wants(*input) {
                    let dims = self.value(*input).dims().to_vec();
                    let gv = g.item();
                    for d in accumulate(&mut grads[input.0], &dims).data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Loss { input, grad, .. } => {
                if self.wants(*input) {
                    let gv = g.item();
                    let slot = accumulate(&mut grads[input.0], grad.dims());
                    for (d, v) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *d += gv * *v;
                    }
                }
            }
        }
    }

    /// Temporarily removes the gradient buffers a convolution writes into
    /// so they can be borrowed mutably together.
    #[allow(clippy::type_complexity)]
    fn take_three(
        &self,
        grads: &mut [Option<Tensor<F>>],
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
        let mut take = |id: NodeId| {
            self.wants(id)
                .then(|| grads[id.0].take().unwrap_or_else(|| Tensor::zeros(self.value(id).dims())))
        };
        let gx = take(input);
        let gw = take(weight);
        let gb = bias.and_then(take);
        (gx, gw, gb)
    }

    fn finish_three(
        &self,
        grads: &mut [Option<Tensor<F>>],
        input: (NodeId, Option<Tensor<F>>),
        weight: (NodeId, Option<Tensor<F>>),
        bias: Option<(NodeId, Tensor<F>)>,
        run: impl FnOnce(Option<&mut [F]>, Option<&mut [F]>, Option<&mut [F]>),
    ) {
        let (xi, mut gx) = input;
        let (wi, mut gw) = weight;
        let (bi, mut gb) = match bias {
            Some((id, t)) => (Some(id), Some(t)),
            None => (None, None),
        };
        run(
            gx.as_mut().map(|t| t.data_mut()),
            gw.as_mut().map(|t| t.data_mut()),
            gb.as_mut().map(|t| t.data_mut()),
        );
        if let Some(t) = gx {
            grads[xi.0] = Some(t);
        }
        if let Some(t) = gw {
            grads[wi.0] = Some(t);
        }
        if let (Some(id), Some(t)) = (bi, gb) {
            grads[id.0] = Some(t);
        }
    }
}

impl Graph<f32> {
    /// Runs the reverse sweep and adds every parameter gradient into `store`.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }
}
