//! Forward primitives and their vector-Jacobian products.
//!
//! Broadcasting is restricted to scalar-with-tensor (`AddScalar`,
//! `MulScalar`); every other shape mismatch is an error naming the op and the
//! offending shapes. Every forward output is scanned for NaN/Inf and fails
//! fast, as do all gradients produced in the backward pass.

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::tensor::Tensor;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Primitive op kind, with attributes inline. Attributes are stored as `f64`
/// so the enum stays independent of the element type.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Matmul,
    Transpose,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    IndexSelect { axis: usize, indices: Vec<usize> },
    Sum,
    Mean,
    Exp,
    Log,
    Sqrt,
    PowScalar(f64),
    Relu,
    Gelu,
    Softmax { axis: usize },
    LayerNorm { eps: f64 },
    L2Normalize { axis: usize, eps: f64 },
    Mse,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add-scalar",
            Op::MulScalar(_) => "scalar-mul",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index-select",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::PowScalar(_) => "power",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer-norm",
            Op::L2Normalize { .. } => "l2-normalize",
            Op::Mse => "mse",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Matmul | Op::Mse => n == 2,
            Op::LayerNorm { .. } => n == 3,
            Op::Concat { .. } => n >= 1,
            _ => n == 1,
        }
    }
}

fn dim_err(op: &Op, detail: alloc::string::String) -> Error {
    Error::Dimension {
        op: op.name(),
        detail,
    }
}

fn same_shape<'a, E: Element>(op: &Op, a: &'a Tensor<E>, b: &Tensor<E>) -> Result<&'a Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a)
}

/// Lane decomposition of a rank-1/2 tensor along `axis`: `(count, len,
/// stride, starts)` such that lane `l` is the elements
/// `start[l] + i * stride` for `i` in `0..len`.
fn lanes(shape: &[usize], axis: usize, op: &Op) -> Result<(usize, usize, usize, Vec<usize>)> {
    match (shape, axis) {
        ([n], 0) => Ok((1, *n, 1, vec![0])),
        ([r, c], 1) => Ok((*r, *c, 1, (0..*r).map(|i| i * c).collect())),
        ([r, c], 0) => Ok((*c, *r, *c, (0..*c).collect())),
        _ => Err(dim_err(
            op,
            format!("axis {axis} unsupported for shape {shape:?}"),
        )),
    }
}

/// `out[i,:] += a[i,k] * b[k,:]`, the cache-friendly ikj ordering.
pub fn matmul_accum<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_raw<E: Element>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn gelu_scalar<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    half * x * (E::ONE + (x * inv_sqrt2).erf())
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_tau = E::from_f64(1.0 / core::f64::consts::TAU.sqrt());
    let cdf = half * (E::ONE + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_tau * (-half * x * x).exp();
    cdf + x * pdf
}

/// Apply a forward primitive. The output is checked for non-finite values.
pub fn forward<E: Element>(op: &Op, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if !op.arity_ok(inputs.len()) {
        return Err(Error::contract(format!(
            "op `{}` got {} inputs",
            op.name(),
            inputs.len()
        )));
    }
    let out = forward_inner(op, inputs)?;
    out.check_finite(op.name())?;
    Ok(out)
}

fn forward_inner<E: Element>(op: &Op, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    match op {
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            zip_map(a, b, |x, y| x + y)
        }
        Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            zip_map(a, b, |x, y| x - y)
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            zip_map(a, b, |x, y| x * y)
        }
        Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            zip_map(a, b, |x, y| x / y)
        }
        Op::AddScalar(c) => {
            let c = E::from_f64(*c);
            Ok(inputs[0].map(|x| x + c))
        }
        Op::MulScalar(c) => {
            let c = E::from_f64(*c);
            Ok(inputs[0].map(|x| x * c))
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, ka) = a.dims2().map_err(|_| {
                dim_err(op, format!("lhs must be rank-2, got {:?}", a.shape()))
            })?;
            let (kb, n) = b.dims2().map_err(|_| {
                dim_err(op, format!("rhs must be rank-2, got {:?}", b.shape()))
            })?;
            if ka != kb {
                return Err(dim_err(op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![E::ZERO; m * n];
            matmul_accum(a.data(), b.data(), &mut out, m, ka, n);
            Tensor::new(vec![m, n], out)
        }
        Op::Transpose => {
            let (r, c) = inputs[0].dims2()?;
            Tensor::new(vec![c, r], transpose_raw(inputs[0].data(), r, c))
        }
        Op::Reshape(new_shape) => {
            let expect: usize = new_shape.iter().product();
            if expect != inputs[0].len() {
                return Err(dim_err(
                    op,
                    format!("{:?} -> {new_shape:?}", inputs[0].shape()),
                ));
            }
            Tensor::new(new_shape.clone(), inputs[0].data().to_vec())
        }
        Op::Concat { axis } => concat_forward(op, inputs, *axis),
        Op::IndexSelect { axis, indices } => index_select_forward(op, inputs[0], *axis, indices),
        Op::Sum => {
            let s: E = inputs[0].data().iter().copied().sum();
            Ok(Tensor::scalar(s))
        }
        Op::Mean => {
            if inputs[0].is_empty() {
                return Err(Error::contract("mean of empty tensor"));
            }
            let s: E = inputs[0].data().iter().copied().sum();
            Ok(Tensor::scalar(s / E::from_f64(inputs[0].len() as f64)))
        }
        Op::Exp => Ok(inputs[0].map(|x| x.exp())),
        Op::Log => Ok(inputs[0].map(|x| x.ln())),
        Op::Sqrt => Ok(inputs[0].map(|x| x.sqrt())),
        Op::PowScalar(p) => {
            let p = E::from_f64(*p);
            Ok(inputs[0].map(|x| x.powf(p)))
        }
        Op::Relu => Ok(inputs[0].map(|x| x.maximum(E::ZERO))),
        Op::Gelu => Ok(inputs[0].map(gelu_scalar)),
        Op::Softmax { axis } => softmax_forward(op, inputs[0], *axis),
        Op::LayerNorm { eps } => layer_norm_forward(op, inputs[0], inputs[1], inputs[2], *eps),
        Op::L2Normalize { axis, eps } => l2_normalize_forward(op, inputs[0], *axis, *eps),
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            if a.is_empty() {
                return Err(Error::contract("mse of empty tensors"));
            }
            let n = E::from_f64(a.len() as f64);
            let s: E = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            Ok(Tensor::scalar(s / n))
        }
    }
}

fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn concat_forward<E: Element>(op: &Op, inputs: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let rank = inputs[0].rank();
    match (rank, axis) {
        (1, 0) => {
            let mut data = Vec::new();
            for t in inputs {
                if t.rank() != 1 {
                    return Err(dim_err(op, format!("mixed ranks: {:?}", t.shape())));
                }
                data.extend_from_slice(t.data());
            }
            let n = data.len();
            Tensor::new(vec![n], data)
        }
        (2, 0) => {
            let (_, c) = inputs[0].dims2()?;
            let mut rows = 0;
            let mut data = Vec::new();
            for t in inputs {
                let (r, tc) = t.dims2()?;
                if tc != c {
                    return Err(dim_err(op, format!("column mismatch: {tc} vs {c}")));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, c], data)
        }
        (2, 1) => {
            let (r, _) = inputs[0].dims2()?;
            let mut cols = 0;
            for t in inputs {
                let (tr, tc) = t.dims2()?;
                if tr != r {
                    return Err(dim_err(op, format!("row mismatch: {tr} vs {r}")));
                }
                cols += tc;
            }
            let mut data = vec![E::ZERO; r * cols];
            let mut offset = 0;
            for t in inputs {
                let (_, tc) = t.dims2()?;
                for row in 0..r {
                    let src = &t.data()[row * tc..(row + 1) * tc];
                    data[row * cols + offset..row * cols + offset + tc].copy_from_slice(src);
                }
                offset += tc;
            }
            Tensor::new(vec![r, cols], data)
        }
        _ => Err(dim_err(op, format!("rank {rank}, axis {axis} unsupported"))),
    }
}

fn index_select_forward<E: Element>(
    op: &Op,
    t: &Tensor<E>,
    axis: usize,
    indices: &[usize],
) -> Result<Tensor<E>> {
    match (t.rank(), axis) {
        (1, 0) => {
            let n = t.len();
            let mut data = Vec::with_capacity(indices.len());
            for &i in indices {
                if i >= n {
                    return Err(dim_err(op, format!("index {i} out of {n}")));
                }
                data.push(t.data()[i]);
            }
            let len = data.len();
            Tensor::new(vec![len], data)
        }
        (2, 0) => {
            let (r, c) = t.dims2()?;
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= r {
                    return Err(dim_err(op, format!("row index {i} out of {r}")));
                }
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(vec![indices.len(), c], data)
        }
        (2, 1) => {
            let (r, c) = t.dims2()?;
            let k = indices.len();
            let mut data = Vec::with_capacity(r * k);
            for row in 0..r {
                for &j in indices {
                    if j >= c {
                        return Err(dim_err(op, format!("column index {j} out of {c}")));
                    }
                    data.push(t.data()[row * c + j]);
                }
            }
            Tensor::new(vec![r, k], data)
        }
        (rank, _) => Err(dim_err(op, format!("rank {rank}, axis {axis} unsupported"))),
    }
}

fn softmax_forward<E: Element>(op: &Op, t: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let (count, len, stride, starts) = lanes(t.shape(), axis, op)?;
    if len == 0 {
        return Err(Error::contract("softmax over empty axis"));
    }
    let mut out = vec![E::ZERO; t.len()];
    let src = t.data();
    for l in 0..count {
        let s = starts[l];
        // Max-subtraction keeps the exponentials in range.
        let mut max = src[s];
        for i in 1..len {
            max = max.maximum(src[s + i * stride]);
        }
        let mut denom = E::ZERO;
        for i in 0..len {
            let e = (src[s + i * stride] - max).exp();
            out[s + i * stride] = e;
            denom += e;
        }
        for i in 0..len {
            out[s + i * stride] = out[s + i * stride] / denom;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn layer_norm_forward<E: Element>(
    op: &Op,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let (rows, cols) = x.dims2()?;
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(dim_err(
            op,
            format!(
                "scale/shift {:?}/{:?} vs features {cols}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let eps = E::from_f64(eps);
    let inv_n = E::from_f64(1.0 / cols as f64);
    let mut out = vec![E::ZERO; x.len()];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mean: E = row.iter().copied().sum::<E>() * inv_n;
        let var: E = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_n;
        let inv_std = E::ONE / (var + eps).sqrt();
        for c in 0..cols {
            let norm = (row[c] - mean) * inv_std;
            out[r * cols + c] = gamma.data()[c] * norm + beta.data()[c];
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn l2_normalize_forward<E: Element>(
    op: &Op,
    t: &Tensor<E>,
    axis: usize,
    eps: f64,
) -> Result<Tensor<E>> {
    let (count, len, stride, starts) = lanes(t.shape(), axis, op)?;
    let eps = E::from_f64(eps);
    let mut out = vec![E::ZERO; t.len()];
    let src = t.data();
    for l in 0..count {
        let s = starts[l];
        let mut sq = E::ZERO;
        for i in 0..len {
            let v = src[s + i * stride];
            sq += v * v;
        }
        let norm = sq.sqrt().maximum(eps);
        for i in 0..len {
            out[s + i * stride] = src[s + i * stride] / norm;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Vector-Jacobian product: gradients of a scalar loss w.r.t. each input,
/// given the upstream gradient of the output. `None` marks an input that
/// receives no gradient. Gradients are finiteness-checked like forward
/// outputs.
pub fn vjp<E: Element>(
    op: &Op,
    inputs: &[&Tensor<E>],
    output: &Tensor<E>,
    grad: &Tensor<E>,
) -> Result<Vec<Option<Tensor<E>>>> {
    let grads = vjp_inner(op, inputs, output, grad)?;
    for g in grads.iter().flatten() {
        g.check_finite(op.name())?;
    }
    Ok(grads)
}

fn vjp_inner<E: Element>(
    op: &Op,
    inputs: &[&Tensor<E>],
    output: &Tensor<E>,
    grad: &Tensor<E>,
) -> Result<Vec<Option<Tensor<E>>>> {
    match op {
        Op::Add => Ok(vec![Some(grad.clone()), Some(grad.clone())]),
        Op::Sub => Ok(vec![
            Some(grad.clone()),
            Some(grad.map(|g| -g)),
        ]),
        Op::Mul => Ok(vec![
            Some(zip_map(grad, inputs[1], |g, b| g * b)?),
            Some(zip_map(grad, inputs[0], |g, a| g * a)?),
        ]),
        Op::Div => {
            let d_a = zip_map(grad, inputs[1], |g, b| g / b)?;
            let d_b_data: Vec<E> = grad
                .data()
                .iter()
                .zip(inputs[0].data().iter().zip(inputs[1].data()))
                .map(|(&g, (&a, &b))| -g * a / (b * b))
                .collect();
            Ok(vec![
                Some(d_a),
                Some(Tensor::new(inputs[1].shape().to_vec(), d_b_data)?),
            ])
        }
        Op::AddScalar(_) => Ok(vec![Some(grad.clone())]),
        Op::MulScalar(c) => {
            let c = E::from_f64(*c);
            Ok(vec![Some(grad.map(|g| g * c))])
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2()?;
            let (_, n) = b.dims2()?;
            // dA = g @ B^T
            let bt = transpose_raw(b.data(), k, n);
            let mut da = vec![E::ZERO; m * k];
            matmul_accum(grad.data(), &bt, &mut da, m, n, k);
            // dB = A^T @ g
            let at = transpose_raw(a.data(), m, k);
            let mut db = vec![E::ZERO; k * n];
            matmul_accum(&at, grad.data(), &mut db, k, m, n);
            Ok(vec![
                Some(Tensor::new(vec![m, k], da)?),
                Some(Tensor::new(vec![k, n], db)?),
            ])
        }
        Op::Transpose => {
            let (r, c) = output.dims2()?;
            Ok(vec![Some(Tensor::new(
                vec![c, r],
                transpose_raw(grad.data(), r, c),
            )?)])
        }
        Op::Reshape(_) => Ok(vec![Some(Tensor::new(
            inputs[0].shape().to_vec(),
            grad.data().to_vec(),
        )?)]),
        Op::Concat { axis } => concat_vjp(inputs, grad, *axis),
        Op::IndexSelect { axis, indices } => {
            index_select_vjp(inputs[0], grad, *axis, indices)
        }
        Op::Sum => {
            let g = grad.scalar_value()?;
            Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), g))])
        }
        Op::Mean => {
            let g = grad.scalar_value()? / E::from_f64(inputs[0].len() as f64);
            Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), g))])
        }
        Op::Exp => Ok(vec![Some(zip_map(grad, output, |g, y| g * y)?)]),
        Op::Log => Ok(vec![Some(zip_map(grad, inputs[0], |g, x| g / x)?)]),
        Op::Sqrt => {
            let half = E::from_f64(0.5);
            Ok(vec![Some(zip_map(grad, output, |g, y| g * half / y)?)])
        }
        Op::PowScalar(p) => {
            let p = E::from_f64(*p);
            Ok(vec![Some(zip_map(grad, inputs[0], |g, x| {
                g * p * x.powf(p - E::ONE)
            })?)])
        }
        Op::Relu => Ok(vec![Some(zip_map(grad, inputs[0], |g, x| {
            if x > E::ZERO {
                g
            } else {
                E::ZERO
            }
        })?)]),
        Op::Gelu => Ok(vec![Some(zip_map(grad, inputs[0], |g, x| {
            g * gelu_grad_scalar(x)
        })?)]),
        Op::Softmax { axis } => {
            let (count, len, stride, starts) = lanes(output.shape(), *axis, op)?;
            let y = output.data();
            let g = grad.data();
            let mut dx = vec![E::ZERO; y.len()];
            for l in 0..count {
                let s = starts[l];
                let mut dot = E::ZERO;
                for i in 0..len {
                    dot += g[s + i * stride] * y[s + i * stride];
                }
                for i in 0..len {
                    let idx = s + i * stride;
                    dx[idx] = y[idx] * (g[idx] - dot);
                }
            }
            Ok(vec![Some(Tensor::new(output.shape().to_vec(), dx)?)])
        }
        Op::LayerNorm { eps } => layer_norm_vjp(inputs, grad, *eps),
        Op::L2Normalize { axis, eps } => l2_normalize_vjp(inputs[0], grad, *axis, *eps, op),
        Op::Mse => {
            let g = grad.scalar_value()?;
            let scale = g * E::from_f64(2.0 / inputs[0].len() as f64);
            let d_a = zip_map(inputs[0], inputs[1], |a, b| scale * (a - b))?;
            let d_b = d_a.map(|v| -v);
            Ok(vec![Some(d_a), Some(d_b)])
        }
    }
}

fn concat_vjp<E: Element>(
    inputs: &[&Tensor<E>],
    grad: &Tensor<E>,
    axis: usize,
) -> Result<Vec<Option<Tensor<E>>>> {
    match (inputs[0].rank(), axis) {
        (1, 0) | (2, 0) => {
            let mut grads = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for t in inputs {
                let n = t.len();
                grads.push(Some(Tensor::new(
                    t.shape().to_vec(),
                    grad.data()[offset..offset + n].to_vec(),
                )?));
                offset += n;
            }
            Ok(grads)
        }
        (2, 1) => {
            let (rows, total_cols) = grad.dims2()?;
            let mut grads = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for t in inputs {
                let (_, tc) = t.dims2()?;
                let mut data = Vec::with_capacity(rows * tc);
                for row in 0..rows {
                    let src = &grad.data()[row * total_cols + offset..row * total_cols + offset + tc];
                    data.extend_from_slice(src);
                }
                grads.push(Some(Tensor::new(vec![rows, tc], data)?));
                offset += tc;
            }
            Ok(grads)
        }
        _ => Err(Error::internal("concat vjp on unsupported layout")),
    }
}

fn index_select_vjp<E: Element>(
    input: &Tensor<E>,
    grad: &Tensor<E>,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Option<Tensor<E>>>> {
    let mut dx = vec![E::ZERO; input.len()];
    match (input.rank(), axis) {
        (1, 0) => {
            for (pos, &i) in indices.iter().enumerate() {
                dx[i] += grad.data()[pos];
            }
        }
        (2, 0) => {
            let (_, c) = input.dims2()?;
            for (pos, &i) in indices.iter().enumerate() {
                let src = &grad.data()[pos * c..(pos + 1) * c];
                for (d, &g) in dx[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *d += g;
                }
            }
        }
        (2, 1) => {
            let (r, c) = input.dims2()?;
            let k = indices.len();
            for row in 0..r {
                for (pos, &j) in indices.iter().enumerate() {
                    dx[row * c + j] += grad.data()[row * k + pos];
                }
            }
        }
        _ => return Err(Error::internal("index-select vjp on unsupported layout")),
    }
    Ok(vec![Some(Tensor::new(input.shape().to_vec(), dx)?)])
}

fn layer_norm_vjp<E: Element>(
    inputs: &[&Tensor<E>],
    grad: &Tensor<E>,
    eps: f64,
) -> Result<Vec<Option<Tensor<E>>>> {
    let (x, gamma) = (inputs[0], inputs[1]);
    let (rows, cols) = x.dims2()?;
    let eps = E::from_f64(eps);
    let inv_n = E::from_f64(1.0 / cols as f64);
    let mut dx = vec![E::ZERO; x.len()];
    let mut dgamma = vec![E::ZERO; cols];
    let mut dbeta = vec![E::ZERO; cols];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let grow = &grad.data()[r * cols..(r + 1) * cols];
        let mean: E = row.iter().copied().sum::<E>() * inv_n;
        let var: E = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_n;
        let inv_std = E::ONE / (var + eps).sqrt();
        // ghat = g * gamma; dx = (ghat - mean(ghat) - xhat * mean(ghat * xhat)) / std
        let mut mean_ghat = E::ZERO;
        let mut mean_ghat_xhat = E::ZERO;
        for c in 0..cols {
            let xhat = (row[c] - mean) * inv_std;
            let ghat = grow[c] * gamma.data()[c];
            mean_ghat += ghat;
            mean_ghat_xhat += ghat * xhat;
            dgamma[c] += grow[c] * xhat;
            dbeta[c] += grow[c];
        }
        mean_ghat *= inv_n;
        mean_ghat_xhat *= inv_n;
        for c in 0..cols {
            let xhat = (row[c] - mean) * inv_std;
            let ghat = grow[c] * gamma.data()[c];
            dx[r * cols + c] = (ghat - mean_ghat - xhat * mean_ghat_xhat) * inv_std;
        }
    }
    Ok(vec![
        Some(Tensor::new(vec![rows, cols], dx)?),
        Some(Tensor::new(vec![cols], dgamma)?),
        Some(Tensor::new(vec![cols], dbeta)?),
    ])
}

fn l2_normalize_vjp<E: Element>(
    input: &Tensor<E>,
    grad: &Tensor<E>,
    axis: usize,
    eps: f64,
    op: &Op,
) -> Result<Vec<Option<Tensor<E>>>> {
    let (count, len, stride, starts) = lanes(input.shape(), axis, op)?;
    let eps = E::from_f64(eps);
    let src = input.data();
    let g = grad.data();
    let mut dx = vec![E::ZERO; input.len()];
    for l in 0..count {
        let s = starts[l];
        let mut sq = E::ZERO;
        for i in 0..len {
            let v = src[s + i * stride];
            sq += v * v;
        }
        let raw_norm = sq.sqrt();
        let norm = raw_norm.maximum(eps);
        if raw_norm > eps {
            // y = x / |x|: dx = (g - y <g, y>) / |x|
            let mut dot = E::ZERO;
            for i in 0..len {
                let idx = s + i * stride;
                dot += g[idx] * src[idx] / norm;
            }
            for i in 0..len {
                let idx = s + i * stride;
                let y = src[idx] / norm;
                dx[idx] = (g[idx] - y * dot) / norm;
            }
        } else {
            // Clamped region: forward is x / eps, a plain linear map.
            for i in 0..len {
                let idx = s + i * stride;
                dx[idx] = g[idx] / norm;
            }
        }
    }
    Ok(vec![Some(Tensor::new(input.shape().to_vec(), dx)?)])
}
