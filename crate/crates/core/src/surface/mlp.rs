//! Fully connected tanh network on two inputs with forward-mode jets.
//!
//! Activations carry up to four channels laid side by side in one matrix of
//! `width × (channels·n)` columns: the value, its derivative in the first
//! input, its derivative in the second input, and its second derivative in
//! the second input. Reverse mode runs through all channels, so the gradient
//! of any loss on the output jets with respect to the weights is exact.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;

/// Value-only or full jets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    Value,
    Jet,
}

impl Channels {
    fn count(self) -> usize {
        match self {
            Channels::Value => 1,
            Channels::Jet => 4,
        }
    }
}

/// Layer widths including the two inputs and the scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
}

/// Network outputs per channel, each of length n.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub value: Vec<f64>,
    pub d_t: Vec<f64>,
    pub d_x: Vec<f64>,
    pub d_xx: Vec<f64>,
}

/// Forward pass state kept for the backward pass. Buffers are reused
/// across calls with the same shape.
#[derive(Default)]
pub struct Tape {
    c: usize,
    n: usize,
    /// Input to each layer, `width × c·n`.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<DMatrix<f64>>,
    /// tanh of the value channel of each hidden layer.
    act: Vec<Vec<f64>>,
    last: DMatrix<f64>,
    /// Adjoints of each layer's pre-activation.
    zbar: Vec<DMatrix<f64>>,
    /// Adjoints of each layer's input.
    hbar: Vec<DMatrix<f64>>,
    /// Transposed layer inputs for the weight gradient.
    transposed: Vec<DMatrix<f64>>,
    pub out: Outputs,
}

impl Tape {
    fn ensure(&mut self, widths: &[usize], c: usize, n: usize) {
        let layers = widths.len() - 1;
        let fits = self.c == c
            && self.n == n
            && self.inputs.len() == layers
            && self.inputs.iter().zip(widths).all(|(m, w)| m.nrows() == *w);
        if fits {
            return;
        }
        let cols = c * n;
        self.c = c;
        self.n = n;
        self.inputs = widths[..layers].iter().map(|&w| DMatrix::zeros(w, cols)).collect();
        self.pre = widths[1..layers].iter().map(|&w| DMatrix::zeros(w, cols)).collect();
        self.act = widths[1..layers].iter().map(|&w| vec![0.0; w * n]).collect();
        self.last = DMatrix::zeros(1, cols);
        self.zbar = widths[1..].iter().map(|&w| DMatrix::zeros(w, cols)).collect();
        self.hbar = widths[..layers].iter().map(|&w| DMatrix::zeros(w, cols)).collect();
        self.transposed = widths[..layers].iter().map(|&w| DMatrix::zeros(cols, w)).collect();
    }
}

/// tanh through one exponential, branch free. Absolute error stays within
/// a few ulp of 1 and saturation to ±1 is exact.
#[inline]
fn tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt() * crate::rng::normal(rng)
}

impl Mlp {
    pub fn new(hidden: &[usize]) -> Self {
        let mut widths = vec![2];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self { widths }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Offset of layer `l`'s weight block; the bias follows it.
    fn offset(&self, l: usize) -> usize {
        self.widths[..l + 1]
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    fn weights<'a>(&self, params: &'a [f64], l: usize) -> (DMatrixView<'a, f64>, &'a [f64]) {
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let o = self.offset(l);
        let w = DMatrixView::from_slice(&params[o..o + fan_in * fan_out], fan_out, fan_in);
        (w, &params[o + fan_in * fan_out..o + fan_in * fan_out + fan_out])
    }

    /// Glorot-normal weights and zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for w in self.widths.windows(2) {
            for _ in 0..w[0] * w[1] {
                p.push(glorot(rng, w[0], w[1]));
            }
            p.extend(std::iter::repeat(0.0).take(w[1]));
        }
        p
    }

    /// Evaluates the network at normalized points `(t̃, x̃)`.
    pub fn forward(&self, params: &[f64], points: &[(f64, f64)], channels: Channels) -> Tape {
        let mut tape = Tape::default();
        self.forward_into(params, points, channels, &mut tape);
        tape
    }

    pub fn forward_into(&self, params: &[f64], points: &[(f64, f64)], channels: Channels, tape: &mut Tape) {
        let n = points.len();
        let c = channels.count();
        tape.ensure(&self.widths, c, n);
        let h0 = &mut tape.inputs[0];
        h0.fill(0.0);
        for (j, &(t, x)) in points.iter().enumerate() {
            h0[(0, j)] = t;
            h0[(1, j)] = x;
            if c == 4 {
                h0[(0, n + j)] = 1.0;
                h0[(1, 2 * n + j)] = 1.0;
            }
        }
        let last = self.n_layers() - 1;
        for l in 0..=last {
            let (w, b) = self.weights(params, l);
            let z = if l == last { &mut tape.last } else { &mut tape.pre[l] };
            z.gemm(1.0, &w, &tape.inputs[l], 0.0);
            for col in z.as_mut_slice()[..b.len() * n].chunks_exact_mut(b.len()) {
                col.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
            if l == last {
                break;
            }
            let zs = tape.pre[l].as_slice();
            let th = &mut tape.act[l];
            let av = tape.inputs[l + 1].as_mut_slice();
            for (i, th_i) in th.iter_mut().enumerate() {
                *th_i = tanh(zs[i]);
                av[i] = *th_i;
            }
            if c == 4 {
                let m = th.len();
                for i in 0..m {
                    let s1 = 1.0 - th[i] * th[i];
                    let s2 = -2.0 * th[i] * s1;
                    let zx = zs[2 * m + i];
                    av[m + i] = s1 * zs[m + i];
                    av[2 * m + i] = s1 * zx;
                    av[3 * m + i] = s2 * zx * zx + s1 * zs[3 * m + i];
                }
            }
        }
        let row = |k: usize| tape.last.as_slice()[k * n..(k + 1) * n].to_vec();
        tape.out = if c == 4 {
            Outputs { value: row(0), d_t: row(1), d_x: row(2), d_xx: row(3) }
        } else {
            Outputs { value: row(0), ..Default::default() }
        };
    }

    /// Adds the gradient of a loss whose adjoints with respect to the output
    /// channels are given into `grad`. Unused channels may be empty.
    pub fn backward(&self, params: &[f64], tape: &mut Tape, adjoint: &Outputs, grad: &mut [f64]) {
        let n = tape.n;
        let c = tape.c;
        let last = self.n_layers() - 1;
        {
            let top = tape.zbar[last].as_mut_slice();
            let chans: [&[f64]; 4] = [&adjoint.value, &adjoint.d_t, &adjoint.d_x, &adjoint.d_xx];
            for (k, ch) in chans.iter().enumerate().take(c) {
                top[k * n..(k + 1) * n].copy_from_slice(ch);
            }
        }
        for l in (0..=last).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let o = self.offset(l);
            tape.inputs[l].transpose_to(&mut tape.transposed[l]);
            {
                let mut gw = nalgebra::DMatrixViewMut::from_slice(&mut grad[o..o + fan_in * fan_out], fan_out, fan_in);
                gw.gemm(1.0, &tape.zbar[l], &tape.transposed[l], 1.0);
            }
            let gb = &mut grad[o + fan_in * fan_out..o + fan_in * fan_out + fan_out];
            for col in tape.zbar[l].as_slice()[..fan_out * n].chunks_exact(fan_out) {
                gb.iter_mut().zip(col).for_each(|(g, v)| *g += v);
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.weights(params, l);
            tape.hbar[l].gemm(1.0, &w.transpose(), &tape.zbar[l], 0.0);
            let z = tape.pre[l - 1].as_slice();
            let th = &tape.act[l - 1];
            let hb = tape.hbar[l].as_slice();
            let m = th.len();
            let nx = tape.zbar[l - 1].as_mut_slice();
            for i in 0..m {
                let s1 = 1.0 - th[i] * th[i];
                if c == 1 {
                    nx[i] = s1 * hb[i];
                    continue;
                }
                let s2 = -2.0 * th[i] * s1;
                let s3 = -2.0 * s1 * s1 + 4.0 * th[i] * th[i] * s1;
                let (zt, zx, zxx) = (z[m + i], z[2 * m + i], z[3 * m + i]);
                let (a, at, ax, axx) = (hb[i], hb[m + i], hb[2 * m + i], hb[3 * m + i]);
                nx[i] = s1 * a + s2 * zt * at + s2 * zx * ax + (s3 * zx * zx + s2 * zxx) * axx;
                nx[m + i] = s1 * at;
                nx[2 * m + i] = s1 * ax + 2.0 * s2 * zx * axx;
                nx[3 * m + i] = s1 * axx;
            }
        }
    }

    /// Rewrites the first and last layers so the network computes the same
    /// function after the input map `t̃ = a_t·t̃' + b_t`, `x̃ = a_x·x̃' + b_x`
    /// and the output map `N' = c·N + d`.
    pub fn reparametrize(&self, params: &mut [f64], input: [(f64, f64); 2], output: (f64, f64)) {
        let width = self.widths[1];
        let o = self.offset(0);
        for r in 0..width {
            let mut shift = 0.0;
            for (k, &(a, b)) in input.iter().enumerate() {
                let w = &mut params[o + k * width + r];
                shift += *w * b;
                *w *= a;
            }
            params[o + 2 * width + r] += shift;
        }
        let l = self.n_layers() - 1;
        let (fan_in, o) = (self.widths[l], self.offset(l));
        let (c, d) = output;
        params[o..o + fan_in].iter_mut().for_each(|w| *w *= c);
        params[o + fan_in] = c * params[o + fan_in] + d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> (Mlp, Vec<f64>, Vec<(f64, f64)>) {
        let mlp = Mlp::new(&[5, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = mlp.init(&mut rng);
        p.iter_mut().for_each(|v| *v += 0.3 * crate::rng::normal(&mut rng));
        let pts = vec![(0.1, -0.4), (-0.7, 0.2), (0.5, 0.9)];
        (mlp, p, pts)
    }

    fn value(mlp: &Mlp, p: &[f64], t: f64, x: f64) -> f64 {
        mlp.forward(p, &[(t, x)], Channels::Value).out.value[0]
    }

    #[test]
    fn parameter_count() {
        assert_eq!(Mlp::new(&[64, 64, 64, 64]).n_params(), 3 * 64 + 3 * (64 * 64 + 64) + 65);
    }

    #[test]
    fn jets_match_finite_differences() {
        let (mlp, p, pts) = net();
        let tape = mlp.forward(&p, &pts, Channels::Jet);
        let h = 1e-4;
        for (j, &(t, x)) in pts.iter().enumerate() {
            let ft = (value(&mlp, &p, t + h, x) - value(&mlp, &p, t - h, x)) / (2.0 * h);
            let fx = (value(&mlp, &p, t, x + h) - value(&mlp, &p, t, x - h)) / (2.0 * h);
            let fxx = (value(&mlp, &p, t, x + h) - 2.0 * value(&mlp, &p, t, x) + value(&mlp, &p, t, x - h)) / (h * h);
            assert!((tape.out.d_t[j] - ft).abs() < 1e-8);
            assert!((tape.out.d_x[j] - fx).abs() < 1e-8);
            assert!((tape.out.d_xx[j] - fxx).abs() < 1e-5);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mlp, p, pts) = net();
        // Loss mixing every channel so each backward rule is exercised.
        let loss = |p: &[f64]| {
            let o = mlp.forward(p, &pts, Channels::Jet).out;
            (0..pts.len())
                .map(|j| o.value[j].powi(2) + 0.5 * o.d_t[j] * o.d_x[j] + o.d_xx[j] * o.value[j])
                .sum::<f64>()
        };
        let mut tape = mlp.forward(&p, &pts, Channels::Jet);
        let o = tape.out.clone();
        let adj = Outputs {
            value: (0..3).map(|j| 2.0 * o.value[j] + o.d_xx[j]).collect(),
            d_t: (0..3).map(|j| 0.5 * o.d_x[j]).collect(),
            d_x: (0..3).map(|j| 0.5 * o.d_t[j]).collect(),
            d_xx: o.value.clone(),
        };
        let mut g = vec![0.0; p.len()];
        mlp.backward(&p, &mut tape, &adj, &mut g);
        for k in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((g[k] - fd).abs() < 1e-6 * fd.abs().max(1.0), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn value_channel_gradient_matches_jet_value_gradient() {
        let (mlp, p, pts) = net();
        let adj = Outputs { value: vec![1.0, -2.0, 0.5], ..Default::default() };
        let mut g1 = vec![0.0; p.len()];
        mlp.backward(&p, &mut mlp.forward(&p, &pts, Channels::Value), &adj, &mut g1);
        let adj4 = Outputs { d_t: vec![0.0; 3], d_x: vec![0.0; 3], d_xx: vec![0.0; 3], ..adj };
        let mut g4 = vec![0.0; p.len()];
        mlp.backward(&p, &mut mlp.forward(&p, &pts, Channels::Jet), &adj4, &mut g4);
        for (a, b) in g1.iter().zip(&g4) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reparametrize_preserves_function() {
        let (mlp, p, pts) = net();
        let mut q = p.clone();
        let (at, bt, ax, bx, c, d) = (0.5, 0.2, 2.0, -0.3, 3.0, 0.7);
        mlp.reparametrize(&mut q, [(at, bt), (ax, bx)], (c, d));
        for &(t, x) in &pts {
            let old = value(&mlp, &p, at * t + bt, ax * x + bx);
            assert!((value(&mlp, &q, t, x) - (c * old + d)).abs() < 1e-12);
        }
    }
}
