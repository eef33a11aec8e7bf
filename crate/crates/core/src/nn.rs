//! Dense and convolutional layers with hand-written backward passes.
//!
//! Every layer works on `f64` batches laid out as `(batch, features)` and
//! accumulates parameter gradients into a value of its own type.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// A value holding named trainable tensors in a fixed order.
pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>);

    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Fan-in scaled uniform initialisation, bound `sqrt(6 / fan_in)`.
fn uniform_fan_in<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

/// Affine map `y = x W + b`, weight stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: uniform_fan_in(input, output, input, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when requested.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        grad_out: &Array2<f64>,
        grad: &mut Linear,
        input_grad: bool,
    ) -> Option<Array2<f64>> {
        grad.weight += &x.t().dot(grad_out);
        grad.bias += &grad_out.sum_axis(Axis(0));
        input_grad.then(|| grad_out.dot(&self.weight.t()))
    }
}

impl Parameters for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef {
            name: join(prefix, "weight"),
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().expect("standard layout"),
        });
        out.push(TensorRef {
            name: join(prefix, "bias"),
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().expect("standard layout"),
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let Linear { weight, bias } = self;
        out.push(TensorMut {
            name: join(prefix, "weight"),
            data: weight.as_slice_mut().expect("standard layout"),
        });
        out.push(TensorMut {
            name: join(prefix, "bias"),
            data: bias.as_slice_mut().expect("standard layout"),
        });
    }
}

/// Two affine layers with a rectifier in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Activations kept from [`Mlp2::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

impl Mlp2 {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp2 {
            fc1: Linear::new(input, hidden, rng),
            fc2: Linear::new(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp2 {
            fc1: Linear::zeros(input, hidden),
            fc2: Linear::zeros(hidden, output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp2::zeros(
            self.fc1.input_dim(),
            self.fc1.output_dim(),
            self.fc2.output_dim(),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Mlp2Cache {
        let mut hidden = self.fc1.forward(x);
        relu_inplace(&mut hidden);
        let output = self.fc2.forward(&hidden.view());
        Mlp2Cache { hidden, output }
    }

    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        cache: &Mlp2Cache,
        grad_out: &Array2<f64>,
        grad: &mut Mlp2,
        input_grad: bool,
    ) -> Option<Array2<f64>> {
        let mut gh = self
            .fc2
            .backward(&cache.hidden.view(), grad_out, &mut grad.fc2, true)
            .expect("requested");
        ndarray::Zip::from(&mut gh)
            .and(&cache.hidden)
            .for_each(|g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
        self.fc1.backward(x, &gh, &mut grad.fc1, input_grad)
    }
}

impl Parameters for Mlp2 {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.fc1.collect_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_mut(&join(prefix, "fc2"), out);
    }
}

/// 3x3 convolution, stride 1, zero padding 1, on `(h, w, c)` tensors.
/// The kernel is stored as `(9 * c_in, c_out)` with rows ordered
/// `(ky, kx, c_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv3x3 {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Conv3x3 {
            weight: uniform_fan_in(9 * c_in, c_out, 9 * c_in, rng),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Conv3x3 {
            weight: Array2::zeros((9 * c_in, c_out)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv3x3 {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn im2col(input: &Array3<f64>) -> Array2<f64> {
        let (h, w, c) = input.dim();
        let mut cols = Array2::zeros((h * w, 9 * c));
        for y in 0..h {
            for x in 0..w {
                let mut row = cols.row_mut(y * w + x);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (ky * 3 + kx) * c;
                        row.slice_mut(s![base..base + c]).assign(&input.slice(s![
                            sy as usize,
                            sx as usize,
                            ..
                        ]));
                    }
                }
            }
        }
        cols
    }

    fn col2im(cols: &Array2<f64>, h: usize, w: usize, c: usize) -> Array3<f64> {
        let mut out = Array3::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                let row = cols.row(y * w + x);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (ky * 3 + kx) * c;
                        let mut dst = out.slice_mut(s![sy as usize, sx as usize, ..]);
                        dst += &row.slice(s![base..base + c]);
                    }
                }
            }
        }
        out
    }

    /// Returns the unfolded input (needed by `backward`) and the output.
    pub fn forward(&self, input: &Array3<f64>) -> (Array2<f64>, Array3<f64>) {
        let (h, w, _) = input.dim();
        let cols = Self::im2col(input);
        let mut out = cols.dot(&self.weight);
        out += &self.bias;
        let out = out
            .into_shape_with_order((h, w, self.out_channels()))
            .expect("contiguous");
        (cols, out)
    }

    pub fn backward(
        &self,
        cols: &Array2<f64>,
        grad_out: &Array3<f64>,
        grad: &mut Conv3x3,
        input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (h, w, c_out) = grad_out.dim();
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c_out))
            .expect("contiguous");
        grad.weight += &cols.t().dot(&g);
        grad.bias += &g.sum_axis(Axis(0));
        input_grad.then(|| Self::col2im(&g.dot(&self.weight.t()), h, w, self.in_channels()))
    }
}

impl Parameters for Conv3x3 {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef {
            name: join(prefix, "weight"),
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().expect("standard layout"),
        });
        out.push(TensorRef {
            name: join(prefix, "bias"),
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().expect("standard layout"),
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let Conv3x3 { weight, bias } = self;
        out.push(TensorMut {
            name: join(prefix, "weight"),
            data: weight.as_slice_mut().expect("standard layout"),
        });
        out.push(TensorMut {
            name: join(prefix, "bias"),
            data: bias.as_slice_mut().expect("standard layout"),
        });
    }
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avg_pool2(input: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = input.dim();
    let mut out = Array3::zeros((h / 2, w / 2, c));
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for k in 0..c {
                out[[y, x, k]] = 0.25
                    * (input[[2 * y, 2 * x, k]]
                        + input[[2 * y, 2 * x + 1, k]]
                        + input[[2 * y + 1, 2 * x, k]]
                        + input[[2 * y + 1, 2 * x + 1, k]]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = grad_out.dim();
    Array3::from_shape_fn((2 * h, 2 * w, c), |(y, x, k)| {
        0.25 * grad_out[[y / 2, x / 2, k]]
    })
}
