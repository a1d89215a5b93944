//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records each primitive together with the forward values its
//! adjoint needs. [`Tape::backward`] replays the adjoints from a scalar
//! output in reverse recording order.
//!
//! Shape errors in recording calls are contract violations and panic.

use super::eig::eig_moduli_with_vectors;
use super::phi::{phi1_partials, phi1_scalar};
use super::{ExpmFrechet, Matrix, NumericsError};

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
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Softplus(Var),
    NegCelu(Var),
    Exp(Var),
    Phi1(Var, Var),
    Reshape(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    ConcatCols(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    Expm(Var),
    ConvDepthwise { input: Var, weight: Var, bias: Var },
    SumSquares(Var),
    Sum(Var),
    /// Local gradient `∂penalty/∂input`, `None` when it was dropped.
    SpectralPenalty(Var, Option<Matrix>),
    EigModuli,
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached from the differentiated output.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero when `v` does not influence the
    /// output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x` for negative inputs, `1 − e^{−x}` otherwise; bounded above by 1.
pub fn neg_celu(x: f64) -> f64 {
    if x < 0.0 {
        x
    } else {
        -(-x).exp_m1()
    }
}

fn neg_celu_grad(x: f64) -> f64 {
    if x < 0.0 {
        1.0
    } else {
        (-x).exp()
    }
}

/// `softplus(x)`, exported for forward-only evaluation paths.
pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

/// Depthwise valid 1-D convolution along rows: `input` is `T×C`,
/// `weight` is `K×C`, `bias` is `1×C`; output is `(T−K+1)×C`.
pub fn conv1d_depthwise(input: &Matrix, weight: &Matrix, bias: &Matrix) -> Matrix {
    let (t, c) = input.shape();
    let k = weight.rows();
    assert_eq!(weight.cols(), c, "conv1d_depthwise: channel mismatch");
    assert_eq!(bias.shape(), (1, c), "conv1d_depthwise: bias shape");
    assert!(t >= k, "conv1d_depthwise: sequence shorter than kernel");
    let out_t = t - k + 1;
    let mut out = Matrix::zeros(out_t, c);
    for s in 0..out_t {
        for ch in 0..c {
            let mut acc = bias[(0, ch)];
            for j in 0..k {
                acc += input[(s + j, ch)] * weight[(j, ch)];
            }
            out[(s, ch)] = acc;
        }
    }
    out
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar: node is not 1x1");
        m[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A fixed input; receives an adjoint but is not a parameter.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).try_matmul(self.value(b)).expect("tape matmul");
        self.push(v, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{op}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("hadamard", a, b);
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b))
    }

    /// `a + 1·row`, adding a `1×c` row to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row_broadcast: row shape");
        let mut v = self.value(a).clone();
        let rv = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (x, b) in v.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        self.push(v, Op::AddRowBroadcast(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn neg_celu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(neg_celu);
        self.push(v, Op::NegCelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Elementwise `phi1(rate, delta)`.
    pub fn phi1(&mut self, rate: Var, delta: Var) -> Var {
        self.same_shape("phi1", rate, delta);
        let v = self.value(rate).zip_map(self.value(delta), phi1_scalar);
        self.push(v, Op::Phi1(rate, delta))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshape(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let cols = self.value(a).cols();
        let v = self.value(a).block(start, 0, count, cols);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(b).shape();
        assert_eq!(ra, rb, "concat_cols: row mismatch");
        let mut v = Matrix::zeros(ra, ca + cb);
        v.set_block(0, 0, self.value(a));
        v.set_block(0, ca, self.value(b));
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Row `i` of `a` multiplied by the `i`-th entry of `factors`.
    pub fn scale_rows(&mut self, a: Var, factors: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(factors).len(), r, "scale_rows: factor count");
        let f = self.value(factors).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..r {
            for j in 0..c {
                v[(i, j)] *= f[i];
            }
        }
        self.push(v, Op::ScaleRows(a, factors))
    }

    /// Column `j` of `a` multiplied by the `j`-th entry of `factors`.
    pub fn scale_cols(&mut self, a: Var, factors: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(factors).len(), c, "scale_cols: factor count");
        let f = self.value(factors).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..r {
            for j in 0..c {
                v[(i, j)] *= f[j];
            }
        }
        self.push(v, Op::ScaleCols(a, factors))
    }

    pub fn expm(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = super::matrix_exp(self.value(a))?;
        Ok(self.push(v, Op::Expm(a)))
    }

    pub fn conv1d_depthwise(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let v = conv1d_depthwise(self.value(input), self.value(weight), self.value(bias));
        self.push(v, Op::ConvDepthwise { input, weight, bias })
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().map(|x| x * x).sum();
        self.push(Matrix::scalar(s), Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// `Σ_j max(0, |λ_j(a)| − 1 + margin)`.
    ///
    /// Eigenvalues lying in a cluster, or with nearly orthogonal left and
    /// right eigenvectors, contribute to the value but not the gradient.
    pub fn spectral_penalty(&mut self, a: Var, margin: f64) -> Result<Var, NumericsError> {
        let threshold = 1.0 - margin;
        let dec = eig_moduli_with_vectors(self.value(a), threshold)?;
        let n = self.value(a).rows();
        let mut value = 0.0;
        let mut grad = Matrix::zeros(n, n);
        let mut any = false;
        for e in &dec.active {
            value += e.value.norm() - threshold;
            if let Some(g) = e.modulus_gradient() {
                grad.axpy(1.0, &g);
                any = true;
            }
        }
        let grad = any.then_some(grad);
        Ok(self.push(Matrix::scalar(value), Op::SpectralPenalty(a, grad)))
    }

    /// Eigenvalue moduli as a column, descending. Not differentiable.
    pub fn eig_moduli(&mut self, a: Var) -> Result<Var, NumericsError> {
        let m = super::eig_moduli(self.value(a))?;
        Ok(self.push(Matrix::col_vector(&m), Op::EigModuli))
    }

    /// Gradients of the `1×1` node `output`, scaled by `seed`.
    pub fn backward(&self, output: Var, seed: f64) -> Result<Gradients, NumericsError> {
        let shape = self.value(output).shape();
        if shape != (1, 1) {
            return Err(NumericsError::DimensionMismatch {
                op: "backward",
                expected: (1, 1),
                found: shape,
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::scalar(seed));
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        adj: &mut [Option<Matrix>],
    ) -> Result<(), NumericsError> {
        let val = |v: Var| &self.nodes[v.0].value;
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                accumulate(adj, a, g.matmul(&val(b).transpose()));
                accumulate(adj, b, val(a).transpose().matmul(g));
            }
            Op::Add(a, b) => {
                accumulate(adj, a, g.clone());
                accumulate(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, a, g.clone());
                accumulate(adj, b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                accumulate(adj, a, g.hadamard(val(b)));
                accumulate(adj, b, g.hadamard(val(a)));
            }
            Op::AddRowBroadcast(a, row) => {
                accumulate(adj, a, g.clone());
                let mut r = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (acc, x) in r.row_mut(0).iter_mut().zip(g.row(i)) {
                        *acc += x;
                    }
                }
                accumulate(adj, row, r);
            }
            Op::Scale(a, s) => accumulate(adj, a, g.scale(s)),
            Op::Tanh(a) => accumulate(adj, a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Softplus(a) => accumulate(adj, a, g.zip_map(val(a), |gi, x| gi * sigmoid(x))),
            Op::NegCelu(a) => accumulate(adj, a, g.zip_map(val(a), |gi, x| gi * neg_celu_grad(x))),
            Op::Exp(a) => accumulate(adj, a, g.hadamard(out)),
            Op::Phi1(rate, delta) => {
                let (r, d) = (val(rate), val(delta));
                let mut gr = Matrix::zeros(r.rows(), r.cols());
                let mut gd = Matrix::zeros(r.rows(), r.cols());
                for i in 0..r.len() {
                    let (pa, pd) = phi1_partials(r.as_slice()[i], d.as_slice()[i]);
                    gr.as_mut_slice()[i] = g.as_slice()[i] * pa;
                    gd.as_mut_slice()[i] = g.as_slice()[i] * pd;
                }
                accumulate(adj, rate, gr);
                accumulate(adj, delta, gd);
            }
            Op::Reshape(a) => {
                let (r, c) = val(a).shape();
                accumulate(adj, a, g.reshape(r, c));
            }
            Op::Transpose(a) => accumulate(adj, a, g.transpose()),
            Op::SliceRows(a, start) => {
                let (r, c) = val(a).shape();
                let mut full = Matrix::zeros(r, c);
                full.set_block(start, 0, g);
                accumulate(adj, a, full);
            }
            Op::ConcatCols(a, b) => {
                let (ra, ca) = val(a).shape();
                let cb = val(b).cols();
                accumulate(adj, a, g.block(0, 0, ra, ca));
                accumulate(adj, b, g.block(0, ca, ra, cb));
            }
            Op::ScaleRows(a, f) => {
                let x = val(a);
                let fv = val(f);
                let mut ga = g.clone();
                let mut gf = Matrix::zeros(fv.rows(), fv.cols());
                for i in 0..x.rows() {
                    let mut acc = 0.0;
                    for j in 0..x.cols() {
                        ga[(i, j)] *= fv.as_slice()[i];
                        acc += g[(i, j)] * x[(i, j)];
                    }
                    gf.as_mut_slice()[i] = acc;
                }
                accumulate(adj, a, ga);
                accumulate(adj, f, gf);
            }
            Op::ScaleCols(a, f) => {
                let x = val(a);
                let fv = val(f);
                let mut ga = g.clone();
                let mut gf = Matrix::zeros(fv.rows(), fv.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        ga[(i, j)] *= fv.as_slice()[j];
                        gf.as_mut_slice()[j] += g[(i, j)] * x[(i, j)];
                    }
                }
                accumulate(adj, a, ga);
                accumulate(adj, f, gf);
            }
            Op::Expm(a) => {
                let ctx = ExpmFrechet::new(&val(a).transpose())?;
                accumulate(adj, a, ctx.derivative(g)?);
            }
            Op::ConvDepthwise { input, weight, bias } => {
                let x = val(input);
                let w = val(weight);
                let k = w.rows();
                let (out_t, c) = g.shape();
                let mut gx = Matrix::zeros(x.rows(), c);
                let mut gw = Matrix::zeros(k, c);
                let mut gb = Matrix::zeros(1, c);
                for s in 0..out_t {
                    for ch in 0..c {
                        let gi = g[(s, ch)];
                        gb[(0, ch)] += gi;
                        for j in 0..k {
                            gx[(s + j, ch)] += gi * w[(j, ch)];
                            gw[(j, ch)] += gi * x[(s + j, ch)];
                        }
                    }
                }
                accumulate(adj, input, gx);
                accumulate(adj, weight, gw);
                accumulate(adj, bias, gb);
            }
            Op::SumSquares(a) => accumulate(adj, a, val(a).scale(2.0 * g[(0, 0)])),
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                accumulate(adj, a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::SpectralPenalty(a, ref local) => {
                if let Some(local) = local {
                    accumulate(adj, a, local.scale(g[(0, 0)]));
                }
            }
            Op::EigModuli => return Err(NumericsError::UnsupportedOp("eig_moduli")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
    }

    /// Compares the tape gradient of `f` with entrywise central differences.
    fn check_grad<F>(inputs: &[Matrix], f: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out, 1.0).unwrap();
        let eval = |ins: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let g = grads.wrt(vars[k]);
            for i in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[k].as_mut_slice()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].as_mut_slice()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.as_slice()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                assert!(err <= tol, "input {k} entry {i}: fd {fd} vs tape {an}");
            }
        }
    }

    #[test]
    fn square_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = tape.sum_squares(x);
        let g = tape.backward(y, 1.0).unwrap();
        assert_eq!(g.wrt(x)[(0, 0)], 6.0);
    }

    #[test]
    fn sum_of_expm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 3, 3, 1.0);
        check_grad(&[m], |t, v| {
            let e = t.expm(v[0]).unwrap();
            t.sum(e)
        }, 1e-5);
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4, 1.5);
        let b = random(&mut rng, 3, 4, 1.0);
        check_grad(&[a, b], |t, v| {
            let x = t.tanh(v[0]);
            let y = t.softplus(v[1]);
            let z = t.neg_celu(v[0]);
            let w = t.exp(v[1]);
            let p = t.hadamard(x, y);
            let q = t.sub(z, w);
            let r = t.add(p, q);
            let s = t.scale(r, 0.7);
            t.sum_squares(s)
        }, 1e-5);
    }

    #[test]
    fn phi1_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 1, 5, 2.0);
        let d = random(&mut rng, 1, 5, 1.0).map(|x| x.abs() + 0.1);
        check_grad(&[a, d], |t, v| {
            let p = t.phi1(v[0], v[1]);
            t.sum_squares(p)
        }, 1e-5);
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 4, 3, 1.0);
        let b = random(&mut rng, 3, 2, 1.0);
        let row = random(&mut rng, 1, 2, 1.0);
        let f = random(&mut rng, 4, 1, 1.0);
        let cf = random(&mut rng, 1, 4, 1.0);
        check_grad(&[a, b, row, f, cf], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row_broadcast(m, v[2]);
            let m = t.scale_rows(m, v[3]);
            let tr = t.transpose(v[0]);
            let s = t.slice_rows(tr, 1, 2);
            let s = t.reshape(s, 4, 2);
            let c = t.concat_cols(m, s);
            let c = t.scale_cols(c, v[4]);
            t.sum_squares(c)
        }, 1e-5);
    }

    #[test]
    fn convolution_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 10, 3, 1.0);
        let w = random(&mut rng, 4, 3, 1.0);
        let b = random(&mut rng, 1, 3, 1.0);
        check_grad(&[x, w, b], |t, v| {
            let c = t.conv1d_depthwise(v[0], v[1], v[2]);
            let c = t.tanh(c);
            t.sum_squares(c)
        }, 1e-5);
    }

    #[test]
    fn expm_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random(&mut rng, 4, 4, 0.8);
        let z = random(&mut rng, 4, 1, 1.0);
        check_grad(&[m, z], |t, v| {
            let s = t.scale(v[0], 1.3);
            let e = t.expm(s).unwrap();
            let y = t.matmul(e, v[1]);
            let e2 = t.expm(v[0]).unwrap();
            let y = t.matmul(e2, y);
            t.sum_squares(y)
        }, 1e-4);
    }

    #[test]
    fn spectral_penalty_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random(&mut rng, 5, 5, 0.8);
        let mut t = Tape::new();
        let v = t.leaf(m.clone());
        let p = t.spectral_penalty(v, 0.05).unwrap();
        assert!(t.scalar(p) > 0.0);
        check_grad(&[m], |t, v| t.spectral_penalty(v[0], 0.05).unwrap(), 1e-5);
    }

    #[test]
    fn spectral_penalty_values() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::diag(&[0.9, 0.5]));
        let p = t.spectral_penalty(a, 0.05).unwrap();
        assert_eq!(t.scalar(p), 0.0);
        let b = t.leaf(Matrix::diag(&[1.1]));
        let q = t.spectral_penalty(b, 0.05).unwrap();
        assert!((t.scalar(q) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn eig_moduli_has_no_adjoint() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::diag(&[0.9, 0.5]));
        let m = t.eig_moduli(a).unwrap();
        let s = t.sum(m);
        assert!(matches!(t.backward(s, 1.0), Err(NumericsError::UnsupportedOp(_))));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(a, 1.0), Err(NumericsError::DimensionMismatch { .. })));
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::scalar(2.0));
        let b = t.leaf(Matrix::zeros(2, 3));
        let y = t.sum_squares(a);
        let g = t.backward(y, 1.0).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b), Matrix::zeros(2, 3));
    }
}
