//! Fully connected networks with hand-written reverse mode and Adam.
//!
//! Parameters live in one flat buffer, layer by layer (weights then bias),
//! so optimizers, target blending and checkpoints operate on plain slices.
//! Weights of a layer are stored input-major: `w[i * n_out + o]`.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Scalar, Strided, StridedMut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Row-major batch of vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Batch { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Domain("ragged batch rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Batch { rows: rows.len(), cols, data })
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

/// Activations recorded by [`Mlp::forward_batch`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    generation: u64,
    /// Input of every layer, then the final output.
    values: Vec<Batch<T>>,
}

impl<T> Cache<T> {
    pub fn output(&self) -> &Batch<T> {
        self.values.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp<T> {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<T>,
    /// Bumped on every parameter mutation; caches from older generations are stale.
    generation: u64,
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes && self.activations == other.activations && self.params == other.params
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> Mlp<T> {
    /// ReLU hidden layers, linear output, Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let n_layers = sizes.len() - 1;
        let activations =
            (0..n_layers).map(|l| if l + 1 == n_layers { Activation::Identity } else { Activation::Relu }).collect();
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            params.extend((0..w[0] * w[1]).map(|_| T::lit(dist.sample(rng))));
            params.extend(std::iter::repeat_n(T::zero(), w[1]));
        }
        Ok(Mlp { sizes: sizes.to_vec(), activations, params, generation: 0 })
    }

    /// Network with explicit parameters in the flat layout.
    pub fn from_params(sizes: &[usize], activations: &[Activation], params: Vec<T>) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 || params.len() != param_count(sizes) {
            return Err(Error::Domain("parameter layout does not match layer sizes".into()));
        }
        Ok(Mlp { sizes: sizes.to_vec(), activations: activations.to_vec(), params, generation: 0 })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.params
    }

    pub fn copy_params_from(&mut self, other: &Mlp<T>) {
        debug_assert_eq!(self.sizes, other.sizes);
        self.params_mut().copy_from_slice(&other.params);
    }

    /// `self <- self + tau * (other - self)`.
    pub fn blend_toward(&mut self, other: &Mlp<T>, tau: T) {
        debug_assert_eq!(self.sizes, other.sizes);
        for (p, &q) in self.params_mut().iter_mut().zip(&other.params) {
            if *p != q {
                *p = tau * q + (T::one() - tau) * *p;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize, Activation)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).zip(&self.activations).map(move |(w, &act)| {
            let start = off;
            off += w[0] * w[1] + w[1];
            (start, w[0], w[1], act)
        })
    }

    pub fn forward_batch(&self, input: &Batch<T>) -> Result<(Batch<T>, Cache<T>)> {
        if input.cols != self.input_dim() {
            return Err(Error::Domain(format!(
                "input width {} does not match network input {}",
                input.cols,
                self.input_dim()
            )));
        }
        let mut values = Vec::with_capacity(self.sizes.len());
        values.push(input.clone());
        for (off, n_in, n_out, act) in self.layer_offsets() {
            let x = values.last().expect("non-empty");
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut out = Batch::zeros(x.rows, n_out);
            for r in 0..x.rows {
                out.row_mut(r).copy_from_slice(b);
            }
            T::gemm(
                x.rows,
                n_in,
                n_out,
                Strided { data: &x.data, row_stride: n_in, col_stride: 1 },
                Strided { data: w, row_stride: n_out, col_stride: 1 },
                T::one(),
                StridedMut { data: &mut out.data, row_stride: n_out, col_stride: 1 },
            );
            if act == Activation::Relu {
                for y in out.data.iter_mut() {
                    if *y < T::zero() {
                        *y = T::zero();
                    }
                }
            }
            values.push(out);
        }
        let output = values.last().expect("non-empty").clone();
        Ok((output, Cache { generation: self.generation, values }))
    }

    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, Cache<T>)> {
        let batch = Batch { rows: 1, cols: input.len(), data: input.to_vec() };
        let (out, cache) = self.forward_batch(&batch)?;
        Ok((out.data, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(input)?.0)
    }

    pub fn predict_batch(&self, input: &Batch<T>) -> Result<Batch<T>> {
        Ok(self.forward_batch(input)?.0)
    }

    /// Reverse pass: parameter gradients (flat layout) and input gradients.
    pub fn backward(&self, cache: &Cache<T>, output_grad: &Batch<T>) -> Result<(Vec<T>, Batch<T>)> {
        let (grads, input) = self.reverse(cache, output_grad, true, true)?;
        Ok((grads, input.expect("requested")))
    }

    /// Parameter gradients only; skips the input-gradient product of the first layer.
    pub fn param_grads(&self, cache: &Cache<T>, output_grad: &Batch<T>) -> Result<Vec<T>> {
        Ok(self.reverse(cache, output_grad, true, false)?.0)
    }

    /// Input gradients only; no weight-gradient accumulation.
    pub fn input_grads(&self, cache: &Cache<T>, output_grad: &Batch<T>) -> Result<Batch<T>> {
        Ok(self.reverse(cache, output_grad, false, true)?.1.expect("requested"))
    }

    fn reverse(
        &self,
        cache: &Cache<T>,
        output_grad: &Batch<T>,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Vec<T>, Option<Batch<T>>)> {
        if cache.generation != self.generation || cache.values.len() != self.sizes.len() {
            return Err(Error::Domain("stale cache: parameters changed since forward".into()));
        }
        let out = cache.output();
        if output_grad.rows != out.rows || output_grad.cols != out.cols {
            return Err(Error::Domain("output gradient shape mismatch".into()));
        }
        let layers: Vec<_> = self.layer_offsets().collect();
        let mut grads = if want_params { vec![T::zero(); self.params.len()] } else { Vec::new() };
        let mut g = output_grad.clone();
        for (l, &(off, n_in, n_out, act)) in layers.iter().enumerate().rev() {
            let x = &cache.values[l];
            let y = &cache.values[l + 1];
            if act == Activation::Relu {
                for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
                    if yv <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            let w = &self.params[off..off + n_in * n_out];
            if want_params {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for r in 0..g.rows {
                    for (b, &gv) in gb.iter_mut().zip(g.row(r)) {
                        *b = *b + gv;
                    }
                }
                // gW = X^T G
                T::gemm(
                    n_in,
                    x.rows,
                    n_out,
                    Strided { data: &x.data, row_stride: 1, col_stride: n_in },
                    Strided { data: &g.data, row_stride: n_out, col_stride: 1 },
                    T::zero(),
                    StridedMut { data: gw, row_stride: n_out, col_stride: 1 },
                );
            }
            if l == 0 && !want_input {
                break;
            }
            // gX = G W^T
            let mut gx = Batch::zeros(x.rows, n_in);
            T::gemm(
                x.rows,
                n_out,
                n_in,
                Strided { data: &g.data, row_stride: n_out, col_stride: 1 },
                Strided { data: w, row_stride: 1, col_stride: n_out },
                T::zero(),
                StridedMut { data: &mut gx.data, row_stride: n_in, col_stride: 1 },
            );
            g = gx;
        }
        Ok((grads, want_input.then_some(g)))
    }
}

/// Bias-corrected Adam over a flat parameter slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate: T::lit(learning_rate),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    pub fn for_net(net: &Mlp<T>, learning_rate: f64) -> Self {
        Adam::new(net.num_params(), learning_rate)
    }

    /// One update of `params` along `grads`. Non-finite gradients are an error.
    pub fn update(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Domain("Adam state does not match parameter count".into()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient at parameter {i}")));
        }
        self.step += 1;
        let one = T::one();
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut Mlp<T>, grads: &[T]) -> Result<()> {
        self.update(net.params_mut(), grads)
    }
}
