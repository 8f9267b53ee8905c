//! Forward operations and their vector-Jacobian products.

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Sample positions of one axis under the align-corners convention.
#[derive(Debug, Clone)]
pub(crate) struct AxisInterp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisInterp {
    fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = if src == 1 || dst == 1 {
                0.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let l = (pos.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(pos - l as f64);
        }
        AxisInterp { lo, hi, frac }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulRow,
    Scale(f64),
    AddScalar,
    Relu,
    Gelu,
    Exp,
    Log,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    MaxAxis { argmax: Vec<usize> },
    Transpose,
    Reshape,
    SoftmaxRows,
    L2NormalizeRows { norms: Vec<f64> },
    LayerNormRows { inv_std: Vec<f64> },
    SelectCol(usize),
    Bilinear { rows: AxisInterp, cols: AxisInterp },
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn row_operand(op: &'static str, a: &Tensor, row: &Tensor) -> Result<(usize, usize)> {
    let (m, n) = a.dims2(op)?;
    if row.numel() != n || !(row.rank() == 1 || row.shape() == [1, n]) {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: row.shape().to_vec(),
        });
    }
    Ok((m, n))
}

fn unary(x: &Tensor, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(x.shape().to_vec(), data, op, &[x])
}

fn binary(a: &Tensor, b: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_op(a.shape().to_vec(), data, op, &[a, b])
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tensor {
    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = kernels::matmul(self.data(), rhs.data(), m, k, n);
        Ok(Tensor::from_op(vec![m, n], data, Op::MatMul, &[self, rhs]))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        Ok(binary(self, rhs, Op::Add, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        Ok(binary(self, rhs, Op::Sub, |a, b| a - b))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        Ok(binary(self, rhs, Op::Mul, |a, b| a * b))
    }

    /// Elementwise quotient.
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("div", self, rhs)?;
        Ok(binary(self, rhs, Op::Div, |a, b| a / b))
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = row_operand("add_row", self, row)?;
        let mut data = self.data().to_vec();
        for i in 0..m {
            for (v, r) in data[i * n..(i + 1) * n].iter_mut().zip(row.data()) {
                *v += r;
            }
        }
        Ok(Tensor::from_op(vec![m, n], data, Op::AddRow, &[self, row]))
    }

    /// Multiplies every row of an `m×n` matrix by a length-`n` row.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = row_operand("mul_row", self, row)?;
        let mut data = self.data().to_vec();
        for i in 0..m {
            for (v, r) in data[i * n..(i + 1) * n].iter_mut().zip(row.data()) {
                *v *= r;
            }
        }
        Ok(Tensor::from_op(vec![m, n], data, Op::MulRow, &[self, row]))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, Op::Scale(c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, Op::AddScalar, |v| v + c)
    }

    /// `max(x, 0)`; the subgradient at zero is zero.
    pub fn relu(&self) -> Tensor {
        unary(self, Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        unary(self, Op::Gelu, gelu)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, Op::Log, f64::ln)
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(self, Op::Clamp { lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum, &[self])
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s / self.numel() as f64], Op::Mean, &[self])
    }

    /// Maximum along `axis` of a matrix, keeping that axis with extent 1.
    /// Ties resolve to the lowest index, which also receives the gradient.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("max_axis")?;
        let x = self.data();
        let (shape, outer, inner) = match axis {
            0 => (vec![1, n], n, m),
            1 => (vec![m, 1], m, n),
            _ => {
                return Err(TensorError::Argument {
                    op: "max_axis",
                    reason: format!("axis {axis} out of range for a matrix"),
                })
            }
        };
        let mut values = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let flat = |i: usize| if axis == 0 { i * n + o } else { o * n + i };
            let mut best = flat(0);
            for i in 1..inner {
                let idx = flat(i);
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            values.push(x[best]);
            argmax.push(best);
        }
        Ok(Tensor::from_op(shape, values, Op::MaxAxis { argmax }, &[self]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let data = kernels::transpose(self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], data, Op::Transpose, &[self]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape,
            &[self],
        ))
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(n).take(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(Tensor::from_op(vec![m, n], data, Op::SoftmaxRows, &[self]))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("l2_normalize_rows")?;
        let mut data = self.data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in data.chunks_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroNorm { row: i });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::L2NormalizeRows { norms },
            &[self],
        ))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine
    /// terms.
    pub fn layer_norm_rows(&self, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2("layer_norm_rows")?;
        let mut data = self.data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::LayerNormRows { inv_std },
            &[self],
        ))
    }

    /// Column `col` of a matrix as an `m×1` matrix.
    pub fn select_col(&self, col: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("select_col")?;
        if col >= n {
            return Err(TensorError::Argument {
                op: "select_col",
                reason: format!("column {col} out of range for {n} columns"),
            });
        }
        let data = (0..m).map(|i| self.data()[i * n + col]).collect();
        Ok(Tensor::from_op(vec![m, 1], data, Op::SelectCol(col), &[self]))
    }

    /// Bilinear resampling of a matrix to `height×width` with corner samples
    /// aligned to corner pixels.
    pub fn bilinear_upsample(&self, height: usize, width: usize) -> Result<Tensor> {
        let (src_h, src_w) = match self.shape() {
            &[h, w] => (h, w),
            _ => {
                return Err(TensorError::Rank {
                    op: "bilinear_upsample",
                    expected: 2,
                    shape: self.shape().to_vec(),
                })
            }
        };
        if height == 0 || width == 0 {
            return Err(TensorError::Empty {
                op: "bilinear_upsample",
            });
        }
        if height < src_h || width < src_w {
            return Err(TensorError::Argument {
                op: "bilinear_upsample",
                reason: format!("target {height}×{width} is smaller than input {src_h}×{src_w}"),
            });
        }
        let rows = AxisInterp::new(src_h, height);
        let cols = AxisInterp::new(src_w, width);
        let x = self.data();
        let mut out = Vec::with_capacity(height * width);
        for i in 0..height {
            let (r0, r1, fy) = (rows.lo[i], rows.hi[i], rows.frac[i]);
            for j in 0..width {
                let (c0, c1, fx) = (cols.lo[j], cols.hi[j], cols.frac[j]);
                let top = x[r0 * src_w + c0] * (1.0 - fx) + x[r0 * src_w + c1] * fx;
                let bottom = x[r1 * src_w + c0] * (1.0 - fx) + x[r1 * src_w + c1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Ok(Tensor::from_op(
            vec![height, width],
            out,
            Op::Bilinear { rows, cols },
            &[self],
        ))
    }
}

/// Gradients of `out`'s parents given the upstream gradient `g`. Entries are
/// `None` for parents that do not require gradients.
pub(crate) fn vjp(op: &Op, out: &Tensor, parents: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| parents[i].requires_grad();
    let map = |i: usize, f: &dyn Fn() -> Vec<f64>| want(i).then(f);
    match op {
        Op::MatMul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            vec![
                map(0, &|| kernels::matmul_bt(g, b.data(), m, n, k)),
                map(1, &|| kernels::matmul_at(a.data(), g, m, k, n)),
            ]
        }
        Op::Add => vec![map(0, &|| g.to_vec()), map(1, &|| g.to_vec())],
        Op::Sub => vec![
            map(0, &|| g.to_vec()),
            map(1, &|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul => {
            let (a, b) = (parents[0].data(), parents[1].data());
            vec![
                map(0, &|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                map(1, &|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Div => {
            let (a, b) = (parents[0].data(), parents[1].data());
            vec![
                map(0, &|| g.iter().zip(b).map(|(g, b)| g / b).collect()),
                map(1, &|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect()
                }),
            ]
        }
        Op::AddRow => {
            let n = parents[1].numel();
            vec![
                map(0, &|| g.to_vec()),
                map(1, &|| {
                    let mut acc = vec![0.0; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc
                }),
            ]
        }
        Op::MulRow => {
            let (a, row) = (parents[0].data(), parents[1].data());
            let n = row.len();
            vec![
                map(0, &|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| g * row[i % n])
                        .collect()
                }),
                map(1, &|| {
                    let mut acc = vec![0.0; n];
                    for (i, (g, a)) in g.iter().zip(a).enumerate() {
                        acc[i % n] += g * a;
                    }
                    acc
                }),
            ]
        }
        Op::Scale(c) => vec![map(0, &|| g.iter().map(|v| v * c).collect())],
        Op::AddScalar | Op::Reshape => vec![map(0, &|| g.to_vec())],
        Op::Relu => {
            let x = parents[0].data();
            vec![map(0, &|| {
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect()
            })]
        }
        Op::Gelu => {
            let x = parents[0].data();
            vec![map(0, &|| {
                g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect()
            })]
        }
        Op::Exp => vec![map(0, &|| {
            g.iter().zip(out.data()).map(|(g, y)| g * y).collect()
        })],
        Op::Log => {
            let x = parents[0].data();
            vec![map(0, &|| g.iter().zip(x).map(|(g, x)| g / x).collect())]
        }
        Op::Clamp { lo, hi } => {
            let x = parents[0].data();
            vec![map(0, &|| {
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect()
            })]
        }
        Op::Sum => {
            let n = parents[0].numel();
            vec![map(0, &|| vec![g[0]; n])]
        }
        Op::Mean => {
            let n = parents[0].numel();
            vec![map(0, &|| vec![g[0] / n as f64; n])]
        }
        Op::MaxAxis { argmax, .. } => {
            let n = parents[0].numel();
            vec![map(0, &|| {
                let mut acc = vec![0.0; n];
                for (g, &idx) in g.iter().zip(argmax) {
                    acc[idx] += g;
                }
                acc
            })]
        }
        Op::Transpose => {
            // out is n×m; gradient flows back as its transpose
            let (n, m) = (out.shape()[0], out.shape()[1]);
            vec![map(0, &|| kernels::transpose(g, n, m))]
        }
        Op::SoftmaxRows => {
            let n = out.shape()[1];
            vec![map(0, &|| {
                let mut acc = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(out.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    acc.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - dot)));
                }
                acc
            })]
        }
        Op::L2NormalizeRows { norms } => {
            let n = out.shape()[1];
            vec![map(0, &|| {
                let mut acc = Vec::with_capacity(g.len());
                for ((grow, yrow), norm) in g.chunks(n).zip(out.data().chunks(n)).zip(norms) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    acc.extend(grow.iter().zip(yrow).map(|(g, y)| (g - y * dot) / norm));
                }
                acc
            })]
        }
        Op::LayerNormRows { inv_std } => {
            let n = out.shape()[1];
            vec![map(0, &|| {
                let mut acc = Vec::with_capacity(g.len());
                for ((grow, yrow), inv) in g.chunks(n).zip(out.data().chunks(n)).zip(inv_std) {
                    let mean_g = grow.iter().sum::<f64>() / n as f64;
                    let mean_gy =
                        grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    acc.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(g, y)| inv * (g - mean_g - y * mean_gy)),
                    );
                }
                acc
            })]
        }
        Op::SelectCol(col) => {
            let n = parents[0].shape()[1];
            let len = parents[0].numel();
            vec![map(0, &|| {
                let mut acc = vec![0.0; len];
                for (i, g) in g.iter().enumerate() {
                    acc[i * n + col] = *g;
                }
                acc
            })]
        }
        Op::Bilinear { rows, cols } => {
            let src_w = parents[0].shape()[1];
            let len = parents[0].numel();
            let width = cols.lo.len();
            vec![map(0, &|| {
                let mut acc = vec![0.0; len];
                for (i, grow) in g.chunks(width).enumerate() {
                    let (r0, r1, fy) = (rows.lo[i], rows.hi[i], rows.frac[i]);
                    for (j, &gv) in grow.iter().enumerate() {
                        let (c0, c1, fx) = (cols.lo[j], cols.hi[j], cols.frac[j]);
                        acc[r0 * src_w + c0] += gv * (1.0 - fy) * (1.0 - fx);
                        acc[r0 * src_w + c1] += gv * (1.0 - fy) * fx;
                        acc[r1 * src_w + c0] += gv * fy * (1.0 - fx);
                        acc[r1 * src_w + c1] += gv * fy * fx;
                    }
                }
                acc
            })]
        }
    }
}
