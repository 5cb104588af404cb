use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Gradients, Scalar, Tape, Tensor, TensorLike, Unary, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
}

/// One affine layer, `w: [out, in]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// Weights of a fully connected network: Softplus hidden layers, linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Dense>,
}

impl MlpParams {
    /// `widths = [input, hidden..., output]`. Weights are uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut p = MlpParams::zeros(widths)?;
        for layer in &mut p.layers {
            let (fan_out, fan_in) = layer.w.shape();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.w.data_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::shape(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                w: Tensor::zeros(w[1], w[0]),
                b: Tensor::zeros(1, w[1]),
            })
            .collect();
        Ok(MlpParams {
            widths: widths.to_vec(),
            activation: Activation::Softplus,
            layers,
        })
    }

    pub fn from_flat(widths: &[usize], flat: &[f64]) -> Result<Self> {
        let mut p = MlpParams::zeros(widths)?;
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Layer by layer, weights (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(l.b.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.data_mut().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.is_finite() && l.b.is_finite())
    }

    /// Single-sample forward pass on any [`Scalar`].
    pub fn forward_scalar<S: Scalar>(&self, input: &[S]) -> Result<Vec<S>> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut a = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let (out, inp) = l.w.shape();
            let mut z = Vec::with_capacity(out);
            for o in 0..out {
                let mut acc = S::constant(l.b.get(0, o));
                for (i, ai) in a.iter().enumerate().take(inp) {
                    acc = acc + ai.scale(l.w.get(o, i));
                }
                z.push(if li == last { acc } else { acc.softplus() });
            }
            a = z;
        }
        Ok(a)
    }

    /// Batched forward pass on plain tensors, `input: [B, in]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        Ok(self.bind_plain().forward(input))
    }

    pub fn bind_plain(&self) -> BoundMlp<Tensor> {
        BoundMlp {
            layers: self.layers.iter().map(|l| (l.w.clone(), l.b.clone())).collect(),
        }
    }

    /// Records the parameters as leaves on `tape`.
    pub fn bind_tape<'t>(&self, tape: &'t Tape) -> BoundMlp<Var<'t>> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
                .collect(),
        }
    }
}

/// Network parameters living in an evaluation context.
#[derive(Debug, Clone)]
pub struct BoundMlp<T> {
    layers: Vec<(T, T)>,
}

/// Value plus forward-mode tangents of a batched quantity.
///
/// `first[d]` is the derivative along seed direction `d`; `second[p]` is the
/// mixed second derivative along the direction pair `pairs[p]`, `None`
/// meaning identically zero.
#[derive(Debug, Clone)]
pub struct Jet<T> {
    pub value: T,
    pub first: Vec<T>,
    pub pairs: Vec<(usize, usize)>,
    pub second: Vec<Option<T>>,
}

impl<T: TensorLike> Jet<T> {
    /// Input jet: inputs are linear in the seeds, so all second-order parts
    /// start at zero.
    pub fn seed(value: T, first: Vec<T>, pairs: Vec<(usize, usize)>) -> Self {
        let second = vec![None; pairs.len()];
        Jet {
            value,
            first,
            pairs,
            second,
        }
    }

    fn affine(&self, w: &T, b: &T) -> Self {
        Jet {
            value: self.value.matmul_t(w).add(b),
            first: self.first.iter().map(|d| d.matmul_t(w)).collect(),
            pairs: self.pairs.clone(),
            second: self.second.iter().map(|s| s.as_ref().map(|s| s.matmul_t(w))).collect(),
        }
    }

    /// Pushes the jet through an elementwise map with value `y`, first
    /// derivative `d1` and second derivative `d2` (evaluated at the input).
    pub fn elementwise(&self, y: T, d1: &T, d2: Option<&T>) -> Self {
        let first: Vec<T> = self.first.iter().map(|d| d1.mul(d)).collect();
        let second = self
            .pairs
            .iter()
            .zip(&self.second)
            .map(|(&(i, j), s)| {
                let curv = d2
                    .expect("second derivative needed for second-order jet")
                    .mul(&self.first[i])
                    .mul(&self.first[j]);
                Some(match s {
                    Some(s) => curv.add(&d1.mul(s)),
                    None => curv,
                })
            })
            .collect();
        Jet {
            value: y,
            first,
            pairs: self.pairs.clone(),
            second,
        }
    }

    fn softplus(&self) -> Self {
        let z = &self.value;
        let s = z.unary(Unary::Sigmoid);
        let d2 = (!self.pairs.is_empty()).then(|| s.mul(&s.neg().offset(1.0)));
        self.elementwise(z.unary(Unary::Softplus), &s, d2.as_ref())
    }

    pub fn sinh(&self) -> Self {
        let z = &self.value;
        let y = z.unary(Unary::Sinh);
        let c = z.unary(Unary::Cosh);
        let d2 = (!self.pairs.is_empty()).then(|| y.clone());
        self.elementwise(y, &c, d2.as_ref())
    }

    pub fn col(&self, j: usize) -> Self {
        Jet {
            value: self.value.col(j),
            first: self.first.iter().map(|d| d.col(j)).collect(),
            pairs: self.pairs.clone(),
            second: self.second.iter().map(|s| s.as_ref().map(|s| s.col(j))).collect(),
        }
    }

    /// Second-order part for pair `p`, materializing zeros.
    pub fn second_or_zero(&self, p: usize) -> T {
        match &self.second[p] {
            Some(s) => s.clone(),
            None => {
                let (r, c) = self.value.shape();
                self.value.lift(Tensor::zeros(r, c))
            }
        }
    }
}

impl<T: TensorLike> BoundMlp<T> {
    pub fn forward(&self, input: &T) -> T {
        let last = self.layers.len() - 1;
        let mut a = input.clone();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let z = a.matmul_t(w).add(b);
            a = if li == last { z } else { z.unary(Unary::Softplus) };
        }
        a
    }

    pub fn forward_jet(&self, input: &Jet<T>) -> Jet<T> {
        let last = self.layers.len() - 1;
        let mut a = input.clone();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let z = a.affine(w, b);
            a = if li == last { z } else { z.softplus() };
        }
        a
    }
}

impl BoundMlp<Var<'_>> {
    /// Gradient in [`MlpParams::to_flat`] layout.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(grads.wrt(*w).into_data());
            out.extend(grads.wrt(*b).into_data());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Dual2;
    use crate::rng::{stream, Stream};

    #[test]
    fn zero_weights_return_output_bias() {
        let mut p = MlpParams::zeros(&[3, 4, 2]).unwrap();
        p.layers_mut()[1].b = Tensor::from_rows(&[vec![0.5, -1.5]]);
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 3.0]] {
            assert_eq!(p.forward_scalar(&x).unwrap(), vec![0.5, -1.5]);
        }
    }

    #[test]
    fn softplus_at_zero() {
        let mut p = MlpParams::zeros(&[1, 1, 1]).unwrap();
        p.layers_mut()[0].w = Tensor::scalar(1.0);
        p.layers_mut()[1].w = Tensor::scalar(1.0);
        let y = p.forward_scalar(&[0.0]).unwrap()[0];
        assert!((y - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = MlpParams::zeros(&[3, 4, 2]).unwrap();
        assert!(p.forward_scalar(&[1.0, 2.0]).is_err());
        assert!(p.forward(&Tensor::zeros(5, 2)).is_err());
        assert!(MlpParams::zeros(&[3]).is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let p = MlpParams::init(&[3, 5, 2], &mut stream(7, Stream::Init)).unwrap();
        let q = MlpParams::from_flat(p.widths(), &p.to_flat()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn batched_and_scalar_forward_agree() {
        let p = MlpParams::init(&[3, 8, 8, 2], &mut stream(1, Stream::Init)).unwrap();
        let rows = vec![vec![0.1, -0.4, 2.0], vec![1.5, 0.3, -0.7]];
        let out = p.forward(&Tensor::from_rows(&rows)).unwrap();
        for (r, x) in rows.iter().enumerate() {
            let s = p.forward_scalar(x).unwrap();
            for c in 0..2 {
                assert!((out.get(r, c) - s[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dual_forward_matches_finite_differences() {
        let p = MlpParams::init(&[3, 16, 2], &mut stream(2, Stream::Init)).unwrap();
        let x = [0.3, -0.2, 0.9];
        let dual: Vec<Dual2<3>> = (0..3).map(|i| Dual2::variable(x[i], i)).collect();
        let y = p.forward_scalar(&dual).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut hi = x;
            let mut lo = x;
            hi[k] += h;
            lo[k] -= h;
            let yh = p.forward_scalar(&hi).unwrap();
            let yl = p.forward_scalar(&lo).unwrap();
            for o in 0..2 {
                let fd = (yh[o] - yl[o]) / (2.0 * h);
                assert!((y[o].first[k] - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn jet_matches_dual_scalar_path() {
        let p = MlpParams::init(&[3, 6, 6, 2], &mut stream(3, Stream::Init)).unwrap();
        let x = [0.4, -1.1, 0.25];
        let dir_a = [1.0, 0.0, 0.5];
        let dir_b = [0.0, 1.0, -2.0];
        let dual: Vec<Dual2<2>> = (0..3).map(|i| Dual2::seeded(x[i], [dir_a[i], dir_b[i]])).collect();
        let y = p.forward_scalar(&dual).unwrap();

        let bound = p.bind_plain();
        let jet = Jet::seed(
            Tensor::from_rows(&[x.to_vec()]),
            vec![Tensor::from_rows(&[dir_a.to_vec()]), Tensor::from_rows(&[dir_b.to_vec()])],
            vec![(0, 1), (1, 1)],
        );
        let out = bound.forward_jet(&jet);
        for o in 0..2 {
            assert!((out.value.get(0, o) - y[o].value).abs() < 1e-14);
            assert!((out.first[0].get(0, o) - y[o].first[0]).abs() < 1e-14);
            assert!((out.first[1].get(0, o) - y[o].first[1]).abs() < 1e-14);
            assert!((out.second_or_zero(0).get(0, o) - y[o].second[0][1]).abs() < 1e-13);
            assert!((out.second_or_zero(1).get(0, o) - y[o].second[1][1]).abs() < 1e-13);
        }
    }
}
