//! Dense layers stored in a [`ParamSet`] under `<name>.w` / `<name>.b`.

use protocad_tensor::{Bound, Graph, ParamSet, Real, Tensor, Var};
use rand::Rng;

use crate::Result;

/// Glorot-uniform weights `[fan_in, fan_out]`, zero bias.
pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<Real> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit) as Real)
        .collect();
    params.insert(&format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w)?)?;
    params.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.w")))?;
    Ok(g.add(y, p.get(&format!("{name}.b")))?)
}

/// `depth` ELU hidden layers of width `hidden` followed by a linear output layer.
pub fn init_mlp<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    input: usize,
    hidden: usize,
    depth: usize,
    output: usize,
    rng: &mut R,
) -> Result<()> {
    let mut fan_in = input;
    for layer in 0..depth {
        init_linear(params, &format!("{name}.{layer}"), fan_in, hidden, rng)?;
        fan_in = hidden;
    }
    init_linear(params, &format!("{name}.out"), fan_in, output, rng)
}

pub fn mlp(g: &mut Graph, p: &Bound, name: &str, depth: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for layer in 0..depth {
        let z = linear(g, p, &format!("{name}.{layer}"), h)?;
        h = g.elu(z);
    }
    linear(g, p, &format!("{name}.out"), h)
}

/// Standard-normal noise of the given shape.
pub fn normal_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as Real)
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}
