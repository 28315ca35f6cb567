//! Dense layers and the scalar nonlinearities shared by the learned sub-networks.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Affine map `y = W x + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Option<Array1<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.nrows() {
                return Err(Error::shape("linear bias", weight.nrows(), b.len()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize, with_bias: bool) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: with_bias.then(|| Array1::zeros(output)),
        }
    }

    /// Uniform `±1/sqrt(in)` initialisation. Values are drawn as `f32` so that a
    /// seeded layer survives a round trip through the `f32` weight file unchanged.
    pub fn seeded<R: Rng>(rng: &mut R, input: usize, output: usize, with_bias: bool) -> Self {
        let bound = 1.0 / (input.max(1) as f32).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| {
            f64::from(rng.gen_range(-bound..=bound))
        });
        let bias = with_bias
            .then(|| Array1::from_shape_fn(output, |_| f64::from(rng.gen_range(-bound..=bound))));
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("linear input", self.input_dim(), x.len()));
        }
        let mut y = self.weight.dot(&x);
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }

    pub fn apply_slice(&self, x: &[f64]) -> Result<Array1<f64>> {
        self.apply(ArrayView1::from(x))
    }

    /// Applies the layer to every row of `x`.
    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("linear input", self.input_dim(), x.ncols()));
        }
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += &b.view().insert_axis(Axis(0));
        }
        Ok(y)
    }

    /// Writes the weight (row-major) followed by the bias, if any, as little-endian `f32`.
    pub fn write_f32<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for &v in self.weight.iter() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        if let Some(b) = &self.bias {
            for &v in b.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_f32<R: Read>(
        r: &mut R,
        input: usize,
        output: usize,
        with_bias: bool,
    ) -> std::io::Result<Self> {
        let mut weight = Array2::zeros((output, input));
        for v in weight.iter_mut() {
            *v = f64::from(r.read_f32::<LittleEndian>()?);
        }
        let bias = if with_bias {
            let mut b = Array1::zeros(output);
            for v in b.iter_mut() {
                *v = f64::from(r.read_f32::<LittleEndian>()?);
            }
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Number of `f32` values [`Linear::write_f32`] emits.
    pub fn f32_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(first: Linear, second: Linear) -> Result<Self> {
        if first.output_dim() != second.input_dim() {
            return Err(Error::shape(
                "mlp hidden width",
                first.output_dim(),
                second.input_dim(),
            ));
        }
        Ok(Self { first, second })
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let hidden = self.first.apply(x)?.mapv(relu);
        self.second.apply(hidden.view())
    }

    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let hidden = self.first.apply_rows(x)?.mapv(relu);
        self.second.apply_rows(hidden.view())
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // all -inf: treat as uniform
        let n = xs.len() as f64;
        xs.iter_mut().for_each(|x| *x = 1.0 / n);
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Jacobian of softmax at `xs`, `J[i][j] = s_i (δ_ij - s_j)`.
pub fn softmax_jacobian(xs: &[f64]) -> Array2<f64> {
    let s = softmax(xs);
    let n = s.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let delta = if i == j { 1.0 } else { 0.0 };
        s[i] * (delta - s[j])
    })
}
