//! Small multilayer perceptrons and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{softplus, Gradients, Tape, Var};
use super::{Matrix, NumError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    fn on_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Softplus => tape.softplus(v),
        }
    }
}

/// Fully connected layer storing `weight` as `in x out` and `bias` as `1 x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Tape handles of an [`Mlp`] forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub output: Var,
    pub params: Vec<Var>,
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialization for hidden layers, `±final_scale` for the last.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        final_scale: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let bound = if l + 1 == n { final_scale } else { 1.0 / (fan_in as f64).sqrt() };
                let mut draw = |r, c| {
                    let data = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
                    Matrix::from_vec(r, c, data).expect("sized")
                };
                let weight = draw(fan_in, fan_out);
                let bias = draw(1, fan_out);
                Dense { weight, bias }
            })
            .collect();
        Self { layers, hidden, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.cols()
    }

    /// Plain batched forward pass; `input` is `batch x input_dim`.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix, NumError> {
        let last = self.layers.len() - 1;
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = x.matmul(&layer.weight)?;
            let act = if l == last { self.output } else { self.hidden };
            let b = layer.bias.as_slice();
            for i in 0..z.rows() {
                for (v, bj) in z.row_slice_mut(i).iter_mut().zip(b) {
                    *v = act.apply(*v + bj);
                }
            }
            x = z;
        }
        Ok(x)
    }

    /// Records the forward pass, registering every parameter as a tracked leaf.
    pub fn forward_tape(&self, tape: &mut Tape, input: Var) -> Result<MlpTrace, NumError> {
        self.record(tape, input, true)
    }

    /// Records the forward pass with parameters as constants, for when only
    /// the adjoint of the input is needed.
    pub fn forward_tape_frozen(&self, tape: &mut Tape, input: Var) -> Result<Var, NumError> {
        Ok(self.record(tape, input, false)?.output)
    }

    fn record(&self, tape: &mut Tape, input: Var, track: bool) -> Result<MlpTrace, NumError> {
        let last = self.layers.len() - 1;
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut x = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = if track {
                (tape.leaf(layer.weight.clone()), tape.leaf(layer.bias.clone()))
            } else {
                (tape.constant(layer.weight.clone()), tape.constant(layer.bias.clone()))
            };
            params.push(w);
            params.push(b);
            let z = tape.matmul(x, w)?;
            let z = tape.add_row(z, b)?;
            let act = if l == last { self.output } else { self.hidden };
            x = act.on_tape(tape, z);
        }
        Ok(MlpTrace { output: x, params })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Adjoints of the parameters in [`Mlp::params`] order.
    pub fn param_grads(&self, grads: &Gradients, trace: &MlpTrace) -> Vec<Matrix> {
        self.params()
            .iter()
            .zip(&trace.params)
            .map(|(p, &v)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

/// `target ← τ·source + (1−τ)·target`, elementwise.
///
/// Written as `t + τ(s − t)` so equal entries stay bit-identical, and `τ = 1`
/// copies exactly.
pub fn soft_update(source: &[&Matrix], target: &mut [&mut Matrix], tau: f64) {
    assert_eq!(source.len(), target.len(), "parameter lists differ");
    for (s, t) in source.iter().zip(target.iter_mut()) {
        assert_eq!(s.shape(), t.shape(), "parameter shapes differ");
        for (tv, sv) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *tv = if tau == 1.0 { *sv } else { *tv + tau * (sv - *tv) };
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Matrix]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
        Self::new(lr, &shapes)
    }

    /// One descent step on `params` along `grads`.
    pub fn descend(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        if self.lr == 0.0 {
            // a zero rate must leave parameters bit-identical
            return;
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((pv, &gv), mv), vv) in
                p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / b1t;
                let vhat = *vv / b2t;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 8, 5, 2], Activation::Relu, Activation::Tanh, 0.5, &mut rng);
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let plain = net.forward(&x).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let trace = net.forward_tape(&mut t, xv).unwrap();
        assert_eq!(t.value(trace.output), &plain);
    }

    #[test]
    fn soft_update_extremes() {
        let a = Matrix::row(&[1.0, 2.0]);
        let mut b = Matrix::row(&[0.0, 0.0]);
        soft_update(&[&a], &mut [&mut b], 0.0);
        assert_eq!(b.as_slice(), &[0.0, 0.0]);
        soft_update(&[&a], &mut [&mut b], 1.0);
        assert_eq!(b, a);
        let mut c = Matrix::row(&[0.0, 0.0]);
        soft_update(&[&Matrix::row(&[1.0, 1.0])], &mut [&mut c], 0.7);
        assert!((c.as_slice()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Matrix::row(&[3.0, -4.0]);
        let mut opt = Adam::new(0.1, &[(1, 2)]);
        for _ in 0..500 {
            let g = p.scale(2.0);
            opt.descend(&mut [&mut p], &[g]);
        }
        assert!(p.norm_inf() < 1e-2, "{p:?}");
    }

    #[test]
    fn zero_rate_adam_is_frozen() {
        let mut p = Matrix::row(&[0.1, 0.2]);
        let before = p.clone();
        let mut opt = Adam::new(0.0, &[(1, 2)]);
        opt.descend(&mut [&mut p], &[Matrix::row(&[5.0, -5.0])]);
        assert_eq!(p, before);
    }
}
