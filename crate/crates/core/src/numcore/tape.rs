//! Reverse-mode differentiation over a recorded sequence of tensor ops.
//!
//! A [`Tape`] is filled during a forward pass through [`Var`] handles and
//! replayed backwards by [`Tape::gradients`]. Nodes are appended in
//! evaluation order, so the node index is a topological order.

use std::cell::RefCell;
use std::ops;

use super::tensor::{batched_smallest_abs_eig, broadcast_zip, Tensor, TensorLike, Unary};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMulT(usize, usize),
    Unary(usize, Unary),
    ClampMin(usize, f64),
    Col(usize, usize),
    HCat(Vec<usize>),
    Sum(usize),
    /// Per-row gradient weights for each packed input column.
    SmallestAbsEig { inputs: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are available for every leaf; constants
    /// are simply leaves whose gradient nobody reads.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn with_value<R>(&self, idx: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[idx].value)
    }

    fn unary_value(&self, a: usize, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'_> {
        let value = self.with_value(a, f);
        self.push(value, op)
    }

    fn binary_value(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        self.push(value, op)
    }

    /// Backpropagates from a `[1, 1]` output.
    pub fn gradients(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(output.tape, self), "output recorded on another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.idx].value.len(), 1, "gradients need a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(Tensor::full(
            nodes[output.idx].value.rows(),
            nodes[output.idx].value.cols(),
            1.0,
        ));

        fn acc(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                &Op::Add(a, b) => {
                    acc(&mut grads, a, g.reduce_to(nodes[a].value.shape()));
                    acc(&mut grads, b, g.reduce_to(nodes[b].value.shape()));
                }
                &Op::Sub(a, b) => {
                    acc(&mut grads, a, g.reduce_to(nodes[a].value.shape()));
                    acc(&mut grads, b, g.neg().reduce_to(nodes[b].value.shape()));
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    acc(&mut grads, a, broadcast_zip(&g, vb, |x, y| x * y).reduce_to(va.shape()));
                    acc(&mut grads, b, broadcast_zip(&g, va, |x, y| x * y).reduce_to(vb.shape()));
                }
                &Op::Div(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    let ga = broadcast_zip(&g, vb, |x, y| x / y);
                    // d(a/b)/db = −a/b² = −out/b
                    let gb = broadcast_zip(&broadcast_zip(&g, &node.value, |x, y| x * y), vb, |x, y| -x / y);
                    acc(&mut grads, a, ga.reduce_to(va.shape()));
                    acc(&mut grads, b, gb.reduce_to(vb.shape()));
                }
                &Op::Neg(a) => acc(&mut grads, a, g.neg()),
                &Op::Scale(a, c) => acc(&mut grads, a, g.scale(c)),
                &Op::Offset(a) => acc(&mut grads, a, g),
                &Op::MatMulT(x, w) => {
                    // out = x wᵀ: dx = g w, dw = gᵀ x
                    let gx = g.matmul(&nodes[w].value);
                    let gw = g.t_matmul(&nodes[x].value);
                    acc(&mut grads, x, gx);
                    acc(&mut grads, w, gw);
                }
                &Op::Unary(a, u) => {
                    let x = &nodes[a].value;
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(gi, (&xi, &yi))| gi * u.derivative(xi, yi))
                        .collect();
                    acc(&mut grads, a, Tensor::new(g.rows(), g.cols(), data));
                }
                &Op::ClampMin(a, lo) => {
                    let x = &nodes[a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gi, &xi)| if xi > lo { *gi } else { 0.0 })
                        .collect();
                    acc(&mut grads, a, Tensor::new(g.rows(), g.cols(), data));
                }
                &Op::Col(a, j) => {
                    let (r, c) = nodes[a].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.set(i, j, g.get(i, 0));
                    }
                    acc(&mut grads, a, ga);
                }
                Op::HCat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = nodes[p].value.shape();
                        let mut gp = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                gp.set(i, j, g.get(i, offset + j));
                            }
                        }
                        offset += c;
                        acc(&mut grads, p, gp);
                    }
                }
                &Op::Sum(a) => {
                    let (r, c) = nodes[a].value.shape();
                    acc(&mut grads, a, Tensor::full(r, c, g.item()));
                }
                Op::SmallestAbsEig { inputs, weights } => {
                    let m = inputs.len();
                    for (k, &p) in inputs.iter().enumerate() {
                        let rows = nodes[p].value.rows();
                        let data = (0..rows).map(|r| g.get(r, 0) * weights[r * m + k]).collect();
                        acc(&mut grads, p, Tensor::column(data));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to the leaf `v`; zeros if `v` does not
    /// influence the output. Intermediate nodes are not retained.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.idx).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn touches(&self, v: Var<'_>) -> bool {
        self.grads.get(v.idx).is_some_and(Option::is_some)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.idx, Tensor::clone)
    }

    pub fn item(&self) -> f64 {
        self.tape.with_value(self.idx, Tensor::item)
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "mixing vars from different tapes");
    }

    fn binary(&self, other: &Var<'t>, f: fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Var<'t> {
        self.same_tape(other);
        self.tape
            .binary_value(self.idx, other.idx, |a, b| broadcast_zip(a, b, f), op(self.idx, other.idx))
    }
}

impl<'t> TensorLike for Var<'t> {
    fn shape(&self) -> (usize, usize) {
        self.tape.with_value(self.idx, Tensor::shape)
    }

    fn to_tensor(&self) -> Tensor {
        self.value()
    }

    fn max_abs(&self) -> f64 {
        self.tape.with_value(self.idx, Tensor::max_abs)
    }

    fn lift(&self, value: Tensor) -> Self {
        self.tape.leaf(value)
    }

    fn add(&self, other: &Self) -> Self {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    fn sub(&self, other: &Self) -> Self {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    fn mul(&self, other: &Self) -> Self {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    fn div(&self, other: &Self) -> Self {
        self.binary(other, |a, b| a / b, Op::Div)
    }

    fn neg(&self) -> Self {
        self.tape.unary_value(self.idx, |a| a.map_values(|v| -v), Op::Neg(self.idx))
    }

    fn scale(&self, c: f64) -> Self {
        self.tape
            .unary_value(self.idx, |a| a.map_values(|v| v * c), Op::Scale(self.idx, c))
    }

    fn offset(&self, c: f64) -> Self {
        self.tape.unary_value(self.idx, |a| a.map_values(|v| v + c), Op::Offset(self.idx))
    }

    fn matmul_t(&self, w: &Self) -> Self {
        self.same_tape(w);
        self.tape
            .binary_value(self.idx, w.idx, |x, w| x.matmul_t(w), Op::MatMulT(self.idx, w.idx))
    }

    fn unary(&self, op: Unary) -> Self {
        self.tape
            .unary_value(self.idx, |a| a.map_values(|v| op.apply(v)), Op::Unary(self.idx, op))
    }

    fn clamp_min(&self, lo: f64) -> Self {
        self.tape
            .unary_value(self.idx, |a| a.map_values(|v| v.max(lo)), Op::ClampMin(self.idx, lo))
    }

    fn col(&self, j: usize) -> Self {
        self.tape.unary_value(self.idx, |a| a.col_tensor(j), Op::Col(self.idx, j))
    }

    fn hcat(parts: &[Self]) -> Self {
        let tape = parts[0].tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            Tensor::hcat_tensors(&refs)
        };
        tape.push(value, Op::HCat(parts.iter().map(|p| p.idx).collect()))
    }

    fn sum(&self) -> Self {
        self.tape
            .unary_value(self.idx, |a| Tensor::scalar(a.sum_all()), Op::Sum(self.idx))
    }

    fn smallest_abs_eig(packed: &[Self], n: usize) -> Self {
        let tape = packed[0].tape;
        let (values, weights) = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor> = packed.iter().map(|p| &nodes[p.idx].value).collect();
            batched_smallest_abs_eig(&refs, n)
        };
        tape.push(
            Tensor::column(values),
            Op::SmallestAbsEig {
                inputs: packed.iter().map(|p| p.idx).collect(),
                weights,
            },
        )
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                TensorLike::$method(&self, &rhs)
            }
        }
    };
}

var_binop!(Add, add);
var_binop!(Sub, sub);
var_binop!(Mul, mul);
var_binop!(Div, div);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        TensorLike::neg(&self)
    }
}

/// Compares reverse-mode gradients of a recorded scalar against central
/// finite differences.
///
/// `f` records the scalar on the supplied tape given one `Var` per leaf.
/// The error for each leaf tensor is `‖g_rev − g_fd‖ / (‖g_fd‖ + 1e-12)`;
/// the maximum over leaves is returned.
pub fn grad_check<F>(f: F, leaves: &[Tensor], step: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        f(&tape, &vars).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.gradients(out);

    let mut worst = 0.0_f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let rev = grads.wrt(vars[li]);
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        for k in 0..leaf.len() {
            let mut plus: Vec<Tensor> = leaves.to_vec();
            let mut minus: Vec<Tensor> = leaves.to_vec();
            plus[li].data_mut()[k] += step;
            minus[li].data_mut()[k] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            diff2 += (rev.data()[k] - fd).powi(2);
            fd2 += fd * fd;
        }
        worst = worst.max(diff2.sqrt() / (fd2.sqrt() + 1e-12));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let err = grad_check(|_, v| v[0].mul(&v[0]).sum(), &[Tensor::scalar(3.0)], 1e-6);
        assert!(err < 1e-7, "err = {err}");
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let g = tape.gradients((w * w).sum());
        assert!((g.wrt(w).item() - 6.0).abs() < 1e-15);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(|t, _| t.leaf(Tensor::scalar(2.5)), &[Tensor::scalar(1.0)], 1e-6);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn broadcasting_ops_reduce_correctly() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![1.1, 0.2, -0.7]]);
        let bias = Tensor::from_rows(&[vec![0.1, 0.2, -0.3]]);
        let col = Tensor::column(vec![1.5, -0.5]);
        let err = grad_check(
            |_, v| {
                let y = v[0].add(&v[1]).mul(&v[2]).div(&v[2].square().offset(1.0));
                y.unary(Unary::Sinh).sub(&v[1].unary(Unary::Cosh)).sum()
            },
            &[x, bias, col],
            1e-6,
        );
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn matmul_cat_and_eig_gradients() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![1.1, 0.2], vec![0.4, 0.9]]);
        let w = Tensor::from_rows(&[vec![0.5, -0.1], vec![0.3, 0.8], vec![-0.6, 0.2]]);
        let err = grad_check(
            |_, v| {
                let h = v[0].matmul_t(&v[1]).unary(Unary::Softplus);
                let packed = [h.col(0), h.col(1).scale(0.3), h.col(2)];
                let lam = Var::smallest_abs_eig(&packed, 2).clamp_min(1e-6);
                let cat = Var::hcat(&[lam, h.col(1).unary(Unary::Sigmoid)]);
                cat.square().mean()
            },
            &[x, w],
            1e-6,
        );
        assert!(err < 1e-6, "err = {err}");
    }
}
