use crate::error::{Error, Result};
use crate::helmholtz::{BatchF, BatchG};
use crate::numcore::{Acceleration, Mat, MetricField, Scalar, Tensor, TensorLike};
use crate::rng::Rng;

use super::mlp::{BoundMlp, Jet, MlpParams};

/// Position of `(i, j)`, `i ≤ j`, in the row-major packed upper triangle.
pub fn packed_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

fn input_dim(n: usize, time_dependent: bool) -> usize {
    2 * n + usize::from(time_dependent)
}

fn check_io(mlp: &MlpParams, input: usize, output: usize) -> Result<()> {
    if mlp.input_dim() != input || mlp.output_dim() != output {
        return Err(Error::shape(format!(
            "network maps {} → {}, expected {input} → {output}",
            mlp.input_dim(),
            mlp.output_dim()
        )));
    }
    Ok(())
}

/// Network input `[t?, x, v]` for a batch.
pub fn state_input<T: TensorLike>(t: Option<&T>, x: &T, v: &T) -> T {
    match t {
        Some(t) => T::hcat(&[t.clone(), x.clone(), v.clone()]),
        None => T::hcat(&[x.clone(), v.clone()]),
    }
}

fn scalar_input<S: Scalar>(time_dependent: bool, t: S, x: &[S], v: &[S]) -> Vec<S> {
    let mut input = Vec::with_capacity(2 * x.len() + 1);
    if time_dependent {
        input.push(t);
    }
    input.extend_from_slice(x);
    input.extend_from_slice(v);
    input
}

fn unit_row<T: TensorLike>(anchor: &T, width: usize, at: usize) -> T {
    let mut row = Tensor::zeros(1, width);
    row.set(0, at, 1.0);
    anchor.lift(row)
}

/// Scale applied to the initial output-layer weights of [`SymMatrixHead`].
pub const OUTPUT_WEIGHT_SCALE: f64 = 0.1;

/// Symmetric matrix field: the network emits the packed upper triangle,
/// each entry goes through `sinh` and is mirrored.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrixHead {
    pub mlp: MlpParams,
    n: usize,
    time_dependent: bool,
}

impl SymMatrixHead {
    pub fn new(mlp: MlpParams, n: usize, time_dependent: bool) -> Result<Self> {
        check_io(&mlp, input_dim(n, time_dependent), n * (n + 1) / 2)?;
        Ok(SymMatrixHead { mlp, n, time_dependent })
    }

    /// Random hidden layers with a damped output layer whose diagonal
    /// biases are `asinh(1)`, so training starts near `g = I`.
    ///
    /// The loss blows up wherever `g` is singular, so `g` cannot change its
    /// signature during training. Starting positive definite keeps the
    /// basin of the physical (Hessian) solution reachable.
    pub fn init(n: usize, hidden: &[usize], time_dependent: bool, rng: &mut Rng) -> Result<Self> {
        let widths = super::layer_widths(input_dim(n, time_dependent), hidden, n * (n + 1) / 2);
        let mut mlp = MlpParams::init(&widths, rng)?;
        let out = mlp.layers_mut().last_mut().expect("at least one layer");
        for w in out.w.data_mut() {
            *w *= OUTPUT_WEIGHT_SCALE;
        }
        for i in 0..n {
            out.b.set(0, packed_index(n, i, i), 1f64.asinh());
        }
        Self::new(mlp, n, time_dependent)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    /// Mirrors a packed upper triangle into a full row-major matrix.
    pub fn assemble<S: Clone>(packed: &[S], n: usize) -> Vec<S> {
        (0..n * n).map(|ij| packed[packed_index(n, ij / n, ij % n)].clone()).collect()
    }

    pub fn g_forward(&self, t: f64, x: &[f64], v: &[f64]) -> Result<Mat> {
        Ok(Mat::from_vec(self.n, self.metric(t, x, v)?))
    }
}

impl MetricField for SymMatrixHead {
    fn dim(&self) -> usize {
        self.n
    }

    fn metric<S: Scalar>(&self, t: S, x: &[S], v: &[S]) -> Result<Vec<S>> {
        let raw = self.mlp.forward_scalar(&scalar_input(self.time_dependent, t, x, v))?;
        let packed: Vec<S> = raw.iter().map(|r| r.sinh()).collect();
        Ok(Self::assemble(&packed, self.n))
    }
}

/// Metric field and its derivatives along `ẋ_k` and along the trajectory
/// direction `(1, ẋ, f)`. `t: [B, 1]`, `x, v, f: [B, n]`.
pub fn metric_batch<T: TensorLike>(
    g: &BoundMlp<T>,
    n: usize,
    time_dependent: bool,
    t: &T,
    x: &T,
    v: &T,
    f: &T,
) -> BatchG<T> {
    let width = input_dim(n, time_dependent);
    let off = usize::from(time_dependent);
    let input = state_input(time_dependent.then_some(t), x, v);
    let mut dirs: Vec<T> = (0..n).map(|k| unit_row(x, width, off + n + k)).collect();
    let ones = t.lift(Tensor::full(t.shape().0, 1, 1.0));
    dirs.push(state_input(time_dependent.then_some(&ones), v, f));
    let out = g.forward_jet(&Jet::seed(input, dirs, Vec::new())).sinh();

    let np = n * (n + 1) / 2;
    let cols: Vec<Jet<T>> = (0..np).map(|p| out.col(p)).collect();
    let full = |pick: &dyn Fn(&Jet<T>) -> T| -> Vec<T> {
        (0..n * n).map(|ij| pick(&cols[packed_index(n, ij / n, ij % n)])).collect()
    };
    BatchG {
        n,
        g: full(&|c| c.value.clone()),
        dgdt: full(&|c| c.first[n].clone()),
        dgdv: (0..n).map(|k| full(&|c| c.first[k].clone())).collect(),
    }
}

/// A learned acceleration `f(t?, x, ẋ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelNet {
    pub mlp: MlpParams,
    n: usize,
    time_dependent: bool,
}

impl AccelNet {
    pub fn new(mlp: MlpParams, n: usize, time_dependent: bool) -> Result<Self> {
        check_io(&mlp, input_dim(n, time_dependent), n)?;
        Ok(AccelNet { mlp, n, time_dependent })
    }

    pub fn init(n: usize, hidden: &[usize], time_dependent: bool, rng: &mut Rng) -> Result<Self> {
        let widths = super::layer_widths(input_dim(n, time_dependent), hidden, n);
        Self::new(MlpParams::init(&widths, rng)?, n, time_dependent)
    }

    pub fn time_dependent(&self) -> bool {
        self.time_dependent
    }
}

impl Acceleration for AccelNet {
    fn dim(&self) -> usize {
        self.n
    }

    fn accel<S: Scalar>(&self, t: S, x: &[S], v: &[S]) -> Result<Vec<S>> {
        self.mlp.forward_scalar(&scalar_input(self.time_dependent, t, x, v))
    }
}

/// Batched acceleration, `[B, n]`.
pub fn accel_batch<T: TensorLike>(f: &BoundMlp<T>, time_dependent: bool, t: &T, x: &T, v: &T) -> T {
    f.forward(&state_input(time_dependent.then_some(t), x, v))
}

/// Value and Helmholtz partials of a learned acceleration at a batch of
/// states. The total time derivative uses the network's own output.
pub fn accel_partials_batch<T: TensorLike>(
    f: &BoundMlp<T>,
    n: usize,
    time_dependent: bool,
    t: &T,
    x: &T,
    v: &T,
) -> (T, BatchF<T>) {
    let width = input_dim(n, time_dependent);
    let off = usize::from(time_dependent);
    let input = state_input(time_dependent.then_some(t), x, v);
    let value = f.forward(&input);

    // Directions: e_x (n), e_v (n), w; pairs (e_v_k, w).
    let mut dirs: Vec<T> = (0..2 * n).map(|k| unit_row(x, width, off + k)).collect();
    let ones = t.lift(Tensor::full(t.shape().0, 1, 1.0));
    dirs.push(state_input(time_dependent.then_some(&ones), v, &value));
    let pairs = (0..n).map(|k| (n + k, 2 * n)).collect();
    let out = f.forward_jet(&Jet::seed(input, dirs, pairs));

    let mut dfdx = Vec::with_capacity(n * n);
    let mut dfdv = Vec::with_capacity(n * n);
    let mut ddt = Vec::with_capacity(n * n);
    for i in 0..n {
        for k in 0..n {
            dfdx.push(out.first[k].col(i));
            dfdv.push(out.first[n + k].col(i));
            ddt.push(out.second_or_zero(k).col(i));
        }
    }
    (
        value,
        BatchF {
            n,
            dfdx,
            dfdv,
            ddt_dfdv: ddt,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::helmholtz::residuals_batch;
    use crate::numcore::{jacobians_of_f, metric_partials};
    use crate::rng::{stream, Stream};

    #[test]
    fn packed_layout() {
        assert_eq!(packed_index(2, 0, 0), 0);
        assert_eq!(packed_index(2, 0, 1), 1);
        assert_eq!(packed_index(2, 1, 0), 1);
        assert_eq!(packed_index(2, 1, 1), 2);
        assert_eq!(packed_index(3, 1, 2), 4);
        assert_eq!(packed_index(3, 2, 2), 5);
    }

    #[test]
    fn zero_raw_output_gives_zero_matrix() {
        let mlp = MlpParams::zeros(&[4, 8, 3]).unwrap();
        let h = SymMatrixHead::new(mlp, 2, false).unwrap();
        assert_eq!(h.g_forward(0.3, &[1.0, 2.0], &[0.5, -0.5]).unwrap(), Mat::zeros(2));
    }

    #[test]
    fn asinh_one_outputs_give_identity() {
        let mut mlp = MlpParams::zeros(&[4, 8, 3]).unwrap();
        let a = 1f64.asinh();
        mlp.layers_mut()[1].b = Tensor::from_rows(&[vec![a, 0.0, a]]);
        let h = SymMatrixHead::new(mlp, 2, false).unwrap();
        let g = h.g_forward(0.0, &[0.1, 0.2], &[0.3, 0.4]).unwrap();
        assert!(g.sub(&Mat::identity(2)).max_abs() < 1e-15);
    }

    #[test]
    fn initial_metric_is_near_identity() {
        let mut rng = stream(9, Stream::Init);
        let h = SymMatrixHead::init(2, &[64, 64], true, &mut rng).unwrap();
        for k in 0..20 {
            let s = k as f64 * 0.1;
            let g = h.g_forward(s, &[s - 1.0, 0.5], &[1.0 - s, -s]).unwrap();
            let (eig, _) = crate::numcore::sym_eigen(&g).unwrap();
            assert!(eig.iter().all(|&l| l > 0.0), "{g:?}");
        }
    }

    #[test]
    fn output_is_exactly_symmetric() {
        let h = SymMatrixHead::init(3, &[16, 16], true, &mut stream(4, Stream::Init)).unwrap();
        let mut rng = stream(5, Stream::TestSet);
        use rand::Rng as _;
        for _ in 0..1000 {
            let t = rng.random_range(-1.0..1.0);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = h.g_forward(t, &x, &v).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(g.get(i, j).to_bits(), g.get(j, i).to_bits());
                }
            }
        }
    }

    #[test]
    fn wrong_head_shape_rejected() {
        let mlp = MlpParams::zeros(&[4, 8, 2]).unwrap();
        assert!(SymMatrixHead::new(mlp, 2, false).is_err());
        let mlp = MlpParams::zeros(&[5, 8, 2]).unwrap();
        assert!(AccelNet::new(mlp, 2, false).is_err());
    }

    fn sample_states() -> (Vec<f64>, Vec<[f64; 2]>, Vec<[f64; 2]>) {
        (
            vec![0.1, 0.55, 0.9],
            vec![[0.3, -0.8], [1.2, 0.4], [-0.5, 0.05]],
            vec![[0.7, 0.2], [-1.1, 0.9], [0.0, -0.3]],
        )
    }

    #[test]
    fn batched_partials_match_dual_scalars() {
        let f = AccelNet::init(2, &[16], true, &mut stream(8, Stream::Init)).unwrap();
        let g = SymMatrixHead::init(2, &[12, 12], true, &mut stream(9, Stream::Init)).unwrap();
        let (ts, xs, vs) = sample_states();
        let t = Tensor::column(ts.clone());
        let x = Tensor::from_rows(&xs.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        let v = Tensor::from_rows(&vs.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        let bf = f.mlp.bind_plain();
        let (fv, batch_f) = accel_partials_batch(&bf, 2, true, &t, &x, &v);
        let batch_g = metric_batch(&g.mlp.bind_plain(), 2, true, &t, &x, &v, &fv);

        for b in 0..3 {
            let fp = jacobians_of_f(&f, ts[b], &xs[b], &vs[b]).unwrap();
            let gp = metric_partials(&g, ts[b], &xs[b], &vs[b], &fp.f).unwrap();
            for i in 0..2 {
                assert!((fv.get(b, i) - fp.f[i]).abs() < 1e-13);
                for k in 0..2 {
                    let ik = i * 2 + k;
                    assert!((batch_f.dfdx[ik].get(b, 0) - fp.dfdx.get(i, k)).abs() < 1e-12);
                    assert!((batch_f.dfdv[ik].get(b, 0) - fp.dfdv.get(i, k)).abs() < 1e-12);
                    assert!((batch_f.ddt_dfdv[ik].get(b, 0) - fp.ddt_dfdv.get(i, k)).abs() < 1e-12);
                    assert!((batch_g.g[ik].get(b, 0) - gp.g.get(i, k)).abs() < 1e-12);
                    assert!((batch_g.dgdt[ik].get(b, 0) - gp.dgdt.get(i, k)).abs() < 1e-12);
                    for j in 0..2 {
                        assert!((batch_g.dgdv[j][ik].get(b, 0) - gp.dgdv.get(i, k, j)).abs() < 1e-12);
                    }
                }
            }
        }
        let res = residuals_batch(&batch_g, &batch_f);
        assert_eq!(res.lambda_min.shape(), (3, 1));
    }

    #[test]
    fn time_independent_nets_ignore_time() {
        let f = AccelNet::init(2, &[16], false, &mut stream(10, Stream::Init)).unwrap();
        let a = f.accel(0.0, &[0.3, 0.1], &[0.2, 0.2]).unwrap();
        let b = f.accel(5.0, &[0.3, 0.1], &[0.2, 0.2]).unwrap();
        assert_eq!(a, b);
    }
}
