//! Pre-norm self-attention blocks with hand-written reverse passes.
//!
//! Each layer exposes `forward` (returns output plus the activations needed
//! later) and `backward` (accumulates parameter gradients into a same-shaped
//! gradient struct and returns the input cotangent).

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

/// Named parameter traversal in a fixed order.
pub trait ParamSet<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x·W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::randn(input, output, 1.0 / (input as f64).sqrt(), rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.weight);
        y.add_row_broadcast(&self.bias);
        y
    }

    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Linear<T>) -> Matrix<T> {
        grad.weight.add_assign(&x.matmul_tn(dy));
        grad.bias.add_assign(&dy.sum_rows());
        dy.matmul_nt(&self.weight)
    }
}

impl<T> ParamSet<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

pub struct LayerNormTrace<T> {
    normalized: Matrix<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self { gamma: Matrix::filled(1, width, T::one()), beta: Matrix::zeros(1, width) }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, LayerNormTrace<T>) {
        let (n, w) = x.shape();
        let wf = T::lit(w as f64);
        let eps = T::lit(LN_EPS);
        let mut normalized = Matrix::zeros(n, w);
        let mut y = Matrix::zeros(n, w);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / wf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..w {
                let xh = (row[j] - mean) * r;
                normalized[(i, j)] = xh;
                y[(i, j)] = xh * self.gamma[(0, j)] + self.beta[(0, j)];
            }
        }
        (y, LayerNormTrace { normalized, rstd })
    }

    pub fn backward(&self, trace: &LayerNormTrace<T>, dy: &Matrix<T>, grad: &mut LayerNorm<T>) -> Matrix<T> {
        let (n, w) = dy.shape();
        let wf = T::lit(w as f64);
        let mut dx = Matrix::zeros(n, w);
        for i in 0..n {
            let xh = trace.normalized.row(i);
            let g = dy.row(i);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..w {
                grad.gamma[(0, j)] += g[j] * xh[j];
                grad.beta[(0, j)] += g[j];
                let dxh = g[j] * self.gamma[(0, j)];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[j];
            }
            let r = trace.rstd[i];
            for j in 0..w {
                let dxh = g[j] * self.gamma[(0, j)];
                dx[(i, j)] = r * (dxh - sum_dxh / wf - xh[j] * sum_dxh_xh / wf);
            }
        }
        dx
    }
}

impl<T> ParamSet<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Full (unmasked) multi-head self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

pub struct AttentionTrace<T> {
    input: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Row-stochastic attention weights, one `n x n` matrix per head.
    pub probs: Vec<Matrix<T>>,
    mixed: Matrix<T>,
}

fn softmax_rows<T: Scalar>(s: &mut Matrix<T>) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

impl<T: Scalar> Attention<T> {
    pub fn init<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            heads,
            query: Linear::init(width, width, rng),
            key: Linear::init(width, width, rng),
            value: Linear::init(width, width, rng),
            output: Linear::init(width, width, rng),
        }
    }

    fn head_width(&self) -> usize {
        self.query.weight.cols() / self.heads
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, AttentionTrace<T>) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let hw = self.head_width();
        let scale = T::one() / T::lit(hw as f64).sqrt();
        let mut mixed = Matrix::zeros(x.rows(), q.cols());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * hw, (h + 1) * hw);
            let qh = q.slice_cols(lo, hi);
            let kh = k.slice_cols(lo, hi);
            let vh = v.slice_cols(lo, hi);
            let mut p = qh.matmul_nt(&kh);
            p.scale(scale);
            softmax_rows(&mut p);
            mixed.add_into_cols(lo, &p.matmul(&vh));
            probs.push(p);
        }
        let y = self.output.forward(&mixed);
        (y, AttentionTrace { input: x.clone(), q, k, v, probs, mixed })
    }

    pub fn backward(&self, trace: &AttentionTrace<T>, dy: &Matrix<T>, grad: &mut Attention<T>) -> Matrix<T> {
        let d_mixed = self.output.backward(&trace.mixed, dy, &mut grad.output);
        let hw = self.head_width();
        let scale = T::one() / T::lit(hw as f64).sqrt();
        let n = dy.rows();
        let width = trace.q.cols();
        let mut dq = Matrix::zeros(n, width);
        let mut dk = Matrix::zeros(n, width);
        let mut dv = Matrix::zeros(n, width);
        for h in 0..self.heads {
            let (lo, hi) = (h * hw, (h + 1) * hw);
            let p = &trace.probs[h];
            let d_out = d_mixed.slice_cols(lo, hi);
            let qh = trace.q.slice_cols(lo, hi);
            let kh = trace.k.slice_cols(lo, hi);
            let vh = trace.v.slice_cols(lo, hi);

            dv.add_into_cols(lo, &p.matmul_tn(&d_out));
            let dp = d_out.matmul_nt(&vh);
            // softmax backward: ds = p ⊙ (dp − rowsum(dp ⊙ p))
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let inner = pr.iter().zip(dpr).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for j in 0..n {
                    ds[(i, j)] = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            dq.add_into_cols(lo, &ds.matmul(&kh));
            dk.add_into_cols(lo, &ds.matmul_tn(&qh));
        }
        let mut dx = self.query.backward(&trace.input, &dq, &mut grad.query);
        dx.add_assign(&self.key.backward(&trace.input, &dk, &mut grad.key));
        dx.add_assign(&self.value.backward(&trace.input, &dv, &mut grad.value));
        dx
    }
}

impl<T> ParamSet<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.query.visit(&join(prefix, "query"), out);
        self.key.visit(&join(prefix, "key"), out);
        self.value.visit(&join(prefix, "value"), out);
        self.output.visit(&join(prefix, "output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.query.visit_mut(&join(prefix, "query"), out);
        self.key.visit_mut(&join(prefix, "key"), out);
        self.value.visit_mut(&join(prefix, "value"), out);
        self.output.visit_mut(&join(prefix, "output"), out);
    }
}

// tanh approximation of GELU
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct MlpTrace<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::init(width, hidden, rng), fc2: Linear::init(hidden, width, rng) }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, MlpTrace<T>) {
        let pre = self.fc1.forward(x);
        let act = pre.map(gelu);
        let y = self.fc2.forward(&act);
        (y, MlpTrace { input: x.clone(), pre, act })
    }

    pub fn backward(&self, trace: &MlpTrace<T>, dy: &Matrix<T>, grad: &mut Mlp<T>) -> Matrix<T> {
        let mut d_act = self.fc2.backward(&trace.act, dy, &mut grad.fc2);
        for (d, &p) in d_act.as_mut_slice().iter_mut().zip(trace.pre.as_slice()) {
            *d *= gelu_grad(p);
        }
        self.fc1.backward(&trace.input, &d_act, &mut grad.fc1)
    }
}

impl<T> ParamSet<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }
}

/// `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

pub struct BlockTrace<T> {
    ln1: LayerNormTrace<T>,
    pub attn: AttentionTrace<T>,
    ln2: LayerNormTrace<T>,
    mlp: MlpTrace<T>,
}

impl<T: Scalar> Block<T> {
    pub fn init<R: Rng + ?Sized>(width: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(width),
            attn: Attention::init(width, heads, rng),
            ln2: LayerNorm::new(width),
            mlp: Mlp::init(width, width * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, BlockTrace<T>) {
        let (h, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h);
        let mut x1 = x.clone();
        x1.add_assign(&a);
        let (h2, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&h2);
        x1.add_assign(&m);
        (x1, BlockTrace { ln1, attn, ln2, mlp })
    }

    pub fn backward(&self, trace: &BlockTrace<T>, dy: &Matrix<T>, grad: &mut Block<T>) -> Matrix<T> {
        let d_h2 = self.mlp.backward(&trace.mlp, dy, &mut grad.mlp);
        let mut dx1 = dy.clone();
        dx1.add_assign(&self.ln2.backward(&trace.ln2, &d_h2, &mut grad.ln2));
        let d_h = self.attn.backward(&trace.attn, &dx1, &mut grad.attn);
        let mut dx = dx1;
        dx.add_assign(&self.ln1.backward(&trace.ln1, &d_h, &mut grad.ln1));
        dx
    }
}

impl<T> ParamSet<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        self.mlp.visit(&join(prefix, "mlp"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
        self.mlp.visit_mut(&join(prefix, "mlp"), out);
    }
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weighted_sum(y: &Matrix<f64>, w: &Matrix<f64>) -> f64 {
        y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    /// Checks the input cotangent of a layer against central differences.
    fn check_input_grad(f: impl Fn(&Matrix<f64>) -> Matrix<f64>, back: impl Fn(&Matrix<f64>, &Matrix<f64>) -> Matrix<f64>, x: &Matrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = f(x);
        let w = Matrix::randn(y.rows(), y.cols(), 1.0, &mut rng);
        let dx = back(x, &w);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= h;
            let fd = (weighted_sum(&f(&xp), &w) - weighted_sum(&f(&xm), &w)) / (2.0 * h);
            let an = dx.as_slice()[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "entry {idx}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma = Matrix::randn(1, 5, 1.0, &mut rng);
        let x = Matrix::randn(3, 5, 1.0, &mut rng);
        check_input_grad(
            |x| ln.forward(x).0,
            |x, dy| {
                let (_, t) = ln.forward(x);
                let mut g = LayerNorm::new(5);
                ln.backward(&t, dy, &mut g)
            },
            &x,
        );
    }

    #[test]
    fn block_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = Block::<f64>::init(8, 2, 2, &mut rng);
        let x = Matrix::randn(5, 8, 1.0, &mut rng);
        check_input_grad(
            |x| block.forward(x).0,
            |x, dy| {
                let (_, t) = block.forward(x);
                let mut g = block.clone();
                block.backward(&t, dy, &mut g)
            },
            &x,
        );
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = Attention::<f32>::init(8, 4, &mut rng);
        let x = Matrix::randn(7, 8, 3.0, &mut rng);
        let (_, trace) = attn.forward(&x);
        for p in &trace.probs {
            for i in 0..p.rows() {
                let s: f32 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
