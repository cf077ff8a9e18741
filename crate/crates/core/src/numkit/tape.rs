//! Reverse-mode gradient tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and a single reverse sweep visits each node once.

use super::{Matrix, NumError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    /// `n x m` plus a `1 x m` row repeated over all rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Softplus(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    SumSquares(Var),
    HCat(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Subgradient of `|x|` with the value at zero fixed to 0.
pub fn abs_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
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

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose adjoint is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as data: no adjoint is propagated into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(NumError::Shape(format!(
                "add_row {}x{} with {}x{}",
                x.rows(),
                x.cols(),
                r.rows(),
                r.cols()
            )));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_slice_mut(i).iter_mut().zip(r.as_slice()) {
                *v += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), value, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(Op::Abs(a), value, ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(Op::Softplus(a), value, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), value, ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).as_slice().iter().map(|v| v * v).sum());
        let ng = self.needs(a);
        self.push(Op::SumSquares(a), value, ng)
    }

    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).hcat(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::HCat(a, b), value, ng))
    }

    /// `sum(a ⊙ weights)`: seeds a reverse sweep with an arbitrary cotangent.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Result<Var, NumError> {
        let w = self.constant(weights);
        let prod = self.mul(a, w)?;
        Ok(self.sum(prod))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumError> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(NumError::Contract(format!(
                "backward root must be 1x1, got {}x{}",
                root_value.rows(),
                root_value.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, || g.clone())?;
                    self.accumulate(&mut grads, b, || g.clone())?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, || g.clone())?;
                    self.accumulate(&mut grads, b, || g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    self.accumulate(&mut grads, a, || g.zip_map(vb, |x, y| x * y).expect("shape"))?;
                    self.accumulate(&mut grads, b, || g.zip_map(va, |x, y| x * y).expect("shape"))?;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    self.accumulate(&mut grads, a, || g.matmul_t(vb).expect("shape"))?;
                    self.accumulate(&mut grads, b, || va.t_matmul(&g).expect("shape"))?;
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut grads, row, || g.sum_rows())?;
                    self.accumulate(&mut grads, a, || g.clone())?;
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, a, || g.scale(c))?;
                }
                Op::Abs(a) => {
                    let va = self.value(a);
                    self.accumulate(&mut grads, a, || {
                        g.zip_map(va, |gi, x| gi * abs_grad(x)).expect("shape")
                    })?;
                }
                Op::Softplus(a) => {
                    let va = self.value(a);
                    self.accumulate(&mut grads, a, || {
                        g.zip_map(va, |gi, x| gi * sigmoid(x)).expect("shape")
                    })?;
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    self.accumulate(&mut grads, a, || {
                        g.zip_map(out, |gi, t| gi * (1.0 - t * t)).expect("shape")
                    })?;
                }
                Op::Relu(a) => {
                    let va = self.value(a);
                    self.accumulate(&mut grads, a, || {
                        g.zip_map(va, |gi, x| if x > 0.0 { gi } else { 0.0 }).expect("shape")
                    })?;
                }
                Op::Sum(a) => {
                    let s = g.as_slice()[0];
                    let (r, c) = self.value(a).shape();
                    self.accumulate(&mut grads, a, || Matrix::filled(r, c, s))?;
                }
                Op::SumSquares(a) => {
                    let s = g.as_slice()[0];
                    let va = self.value(a);
                    self.accumulate(&mut grads, a, || va.scale(2.0 * s))?;
                }
                Op::HCat(a, b) => {
                    let ca = self.value(a).cols();
                    let cb = self.value(b).cols();
                    self.accumulate(&mut grads, a, || g.col_range(0, ca))?;
                    self.accumulate(&mut grads, b, || g.col_range(ca, ca + cb))?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Matrix>],
        target: Var,
        contribution: impl FnOnce() -> Matrix,
    ) -> Result<(), NumError> {
        if !self.needs(target) {
            return Ok(());
        }
        let c = contribution();
        match &mut grads[target.0] {
            Some(existing) => {
                if existing.shape() != c.shape() {
                    return Err(NumError::Shape("adjoint shape mismatch".into()));
                }
                existing.add_assign_scaled(&c, 1.0);
            }
            slot @ None => *slot = Some(c),
        }
        Ok(())
    }
}

/// Adjoints of the tracked leaves after a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `v`; `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, with zeros of the given shape when it does not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn constant_root_has_zero_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let c = t.constant(Matrix::scalar(2.0));
        let g = t.backward(c).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zeros(x, (1, 1)).item(), Some(0.0));
    }

    #[test]
    fn abs_weighted_sum_gives_sign_times_input() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::row(&[1.5, -2.0, 0.0]));
        let z = t.constant(Matrix::row(&[0.3, 0.7, 2.0]));
        let aw = t.abs(w);
        let p = t.mul(aw, z).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().as_slice(), &[0.3, -0.7, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(NumError::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum((x + x) ⊙ x) = 2 Σ x², df/dx = 4x
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row(&[1.0, -2.0]));
        let d = t.add(x, x).unwrap();
        let p = t.mul(d, x).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[4.0, -8.0]);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
