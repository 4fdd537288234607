//! Single-op graphs with random shapes for finite-difference checks.

use bwe_core::tensor::{
    GradCheckConfig, Graph, LossEval, NodeId, Padding, ParamId, ParamStore, ShadowParams, Tensor, TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f32> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| (scale * (2.0 * rng.random::<f64>() - 1.0)) as f32).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Fixed random projection `sum(r * x)` so every output element gets a
/// distinct gradient.
pub fn project<F: bwe_core::tensor::Real>(g: &mut Graph<F>, x: NodeId, seed: u64) -> NodeId {
    g.scalar_loss::<TensorError>(x, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let r: Vec<F> = (0..t.len()).map(|_| F::of(rng.random::<f64>() - 0.5)).collect();
        let value = t.data().iter().zip(&r).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        Ok(LossEval {
            value: F::of(value),
            grad: Tensor::from_vec(t.dims(), r)?,
            kinks: Vec::new(),
        })
    })
    .unwrap()
}

pub fn fd_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        max_per_param: None,
        seed,
        ..GradCheckConfig::default()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum OpCase {
    ConvCausal,
    ConvSame,
    ConvTranspose,
    Add,
    Repeat,
    Gated,
    Relu,
    Tanh,
    Sum,
}

pub const ALL_OPS: [OpCase; 9] = [
    OpCase::ConvCausal,
    OpCase::ConvSame,
    OpCase::ConvTranspose,
    OpCase::Add,
    OpCase::Repeat,
    OpCase::Gated,
    OpCase::Relu,
    OpCase::Tanh,
    OpCase::Sum,
];

pub struct Case {
    pub store: ParamStore,
    pub ids: Vec<ParamId>,
    pub dilation: usize,
    pub stride: usize,
}

pub fn make_case(op: OpCase, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=8usize);
    let cin = rng.random_range(1..=8usize);
    let cout = rng.random_range(1..=8usize);
    let k = rng.random_range(1..=4usize);
    let dilation = rng.random_range(1..=3usize);
    let stride = rng.random_range(1..=3usize);
    let mut store = ParamStore::new();
    let mut ids = vec![store.add("x", random_tensor(&mut rng, &[t, cin], 1.0)).unwrap()];
    match op {
        OpCase::ConvCausal | OpCase::ConvSame | OpCase::ConvTranspose => {
            ids.push(store.add("w", random_tensor(&mut rng, &[k, cin, cout], 0.7)).unwrap());
            ids.push(store.add("b", random_tensor(&mut rng, &[cout], 0.3)).unwrap());
        }
        OpCase::Add | OpCase::Gated => {
            ids.push(store.add("y", random_tensor(&mut rng, &[t, cin], 1.0)).unwrap());
        }
        _ => {}
    }
    Case {
        store,
        ids,
        dilation,
        stride,
    }
}

pub fn build_case(
    op: OpCase,
    case: &Case,
    params: &ShadowParams<f64>,
    seed: u64,
) -> Result<(Graph<f64>, NodeId), TensorError> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = case.ids.iter().map(|&id| g.param(params, id)).collect();
    let out = match op {
        OpCase::ConvCausal => g.conv1d(nodes[0], nodes[1], Some(nodes[2]), case.dilation, Padding::Causal)?,
        OpCase::ConvSame => g.conv1d(nodes[0], nodes[1], Some(nodes[2]), case.dilation, Padding::Same)?,
        OpCase::ConvTranspose => g.conv_transpose1d(nodes[0], nodes[1], Some(nodes[2]), case.stride)?,
        OpCase::Add => g.add(nodes[0], nodes[1])?,
        OpCase::Repeat => g.repeat_rows(nodes[0], case.stride)?,
        OpCase::Gated => g.gated(nodes[0], nodes[1])?,
        OpCase::Relu => g.relu(nodes[0])?,
        OpCase::Tanh => g.tanh(nodes[0])?,
        OpCase::Sum => g.sum(nodes[0])?,
    };
    let loss = project(&mut g, out, seed);
    Ok((g, loss))
}
