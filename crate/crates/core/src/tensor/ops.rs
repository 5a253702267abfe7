//! Differentiable primitives.
//!
//! Binary ops broadcast numpy-style: shapes are aligned on their trailing
//! dimensions and an extent of 1 stretches to match.

use super::{numel, GradCtx, Result, Tensor, TensorError};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let offset = n - s.len();
        if i < offset {
            1
        } else {
            s[i - offset]
        }
    };
    (0..n)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            if da == db || db == 1 {
                Ok(da)
            } else if da == 1 {
                Ok(db)
            } else {
                Err(TensorError::ShapeMismatch {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        })
        .collect()
}

/// For each flat index of `out`, the flat index of `src` it reads from.
fn source_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - src.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..n).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Index maps for a broadcast binary op; `None` means identity.
struct Broadcast {
    shape: Vec<usize>,
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let shape = broadcast_shape(op, a, b)?;
        let map = |s: &[usize]| (s != shape.as_slice()).then(|| source_index(s, &shape));
        Ok(Broadcast {
            a: map(a),
            b: map(b),
            shape,
        })
    }
}

#[inline]
fn at(map: &Option<Vec<usize>>, k: usize) -> usize {
    map.as_ref().map_or(k, |m| m[k])
}

/// Sum a gradient of the broadcast shape back onto a source shape.
fn reduce_grad(grad: Vec<f64>, map: &Option<Vec<usize>>, len: usize) -> Vec<f64> {
    match map {
        None => grad,
        Some(m) => {
            let mut out = vec![0.0; len];
            for (k, g) in grad.into_iter().enumerate() {
                out[m[k]] += g;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    let name = op.name();
    let bc = Broadcast::new(name, a.shape(), b.shape())?;
    if let BinOp::Div = op {
        if b.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: name,
                detail: "division by zero".into(),
            });
        }
    }
    let (ad, bd) = (a.data(), b.data());
    let len = numel(&bc.shape);
    let data: Vec<f64> = (0..len)
        .map(|k| {
            let (x, y) = (ad[at(&bc.a, k)], bd[at(&bc.b, k)]);
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            }
        })
        .collect();
    let shape = bc.shape.clone();
    Tensor::from_op(
        name,
        shape,
        data,
        &[a, b],
        Box::new(move |ctx: &GradCtx| {
            let g = ctx.upstream;
            let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.needs[0].then(|| {
                let full: Vec<f64> = match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => (0..g.len()).map(|k| g[k] * bd[at(&bc.b, k)]).collect(),
                    BinOp::Div => (0..g.len()).map(|k| g[k] / bd[at(&bc.b, k)]).collect(),
                };
                reduce_grad(full, &bc.a, ad.len())
            });
            let gb = ctx.needs[1].then(|| {
                let full: Vec<f64> = match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|v| -v).collect(),
                    BinOp::Mul => (0..g.len()).map(|k| g[k] * ad[at(&bc.a, k)]).collect(),
                    BinOp::Div => (0..g.len())
                        .map(|k| {
                            let y = bd[at(&bc.b, k)];
                            -g[k] * ad[at(&bc.a, k)] / (y * y)
                        })
                        .collect(),
                };
                reduce_grad(full, &bc.b, bd.len())
            });
            vec![ga, gb]
        }),
    )
}

/// Elementwise op whose derivative is a function of (input, output).
fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    df: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    unary_with(x, op, data, Box::new(df))
}

fn unary_with(
    x: &Tensor,
    op: &'static str,
    data: Vec<f64>,
    df: Box<dyn Fn(f64, f64) -> f64 + Send + Sync>,
) -> Result<Tensor> {
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        data,
        &[x],
        Box::new(move |ctx: &GradCtx| {
            let xd = ctx.inputs[0].data();
            let g = ctx
                .upstream
                .iter()
                .zip(xd)
                .zip(ctx.output)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        }),
    )
}

/// Split `shape` around `axis` into (outer, len, inner).
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

/// Mean along an axis with one refinement pass, so a constant slice has a
/// mean exactly equal to its value.
fn axis_means(data: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let n = len as f64;
    let mut means = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut s = 0.0;
            for k in 0..len {
                s += data[base + k * inner];
            }
            let m = s / n;
            let mut r = 0.0;
            for k in 0..len {
                r += data[base + k * inner] - m;
            }
            means[o * inner + i] = m + r / n;
        }
    }
    means
}

fn spread(
    g: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    f: impl Fn(usize, usize, f64) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                let r = o * inner + i;
                let flat = o * len * inner + k * inner + i;
                out[flat] = f(flat, r, g[r]);
            }
        }
    }
    out
}

/// `a · b` for row-major `a` (m×k) and `b` (k×n).
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a` (m×k) and `b` (n×k).
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `aᵀ · b` for `a` (k×m) and `b` (k×n).
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Mul)
    }

    /// Elementwise division; any exact zero in the divisor is a domain error.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Div)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * c).collect();
        unary_with(self, "scale", data, Box::new(move |_, _| c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary(self, "add_scalar", |v| v + c, |_, _| 1.0)
    }

    /// `x^p`. Negative bases need an integer exponent.
    pub fn pow(&self, p: f64) -> Result<Tensor> {
        if p.fract() != 0.0 && self.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "pow",
                detail: format!("negative base with exponent {p}"),
            });
        }
        let data = self.data().iter().map(|v| v.powf(p)).collect();
        unary_with(
            self,
            "pow",
            data,
            Box::new(move |x, _| if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) }),
        )
    }

    pub fn square(&self) -> Result<Tensor> {
        self.pow(2.0)
    }

    /// Square root. The derivative at 0 is taken as 0.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        unary(
            self,
            "sqrt",
            f64::sqrt,
            |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        unary(self, "log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.max_scalar(0.0)
    }

    /// `max(x, c)` with subgradient 0 where `x <= c`.
    pub fn max_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > c { v } else { c })
            .collect();
        unary_with(
            self,
            "max_scalar",
            data,
            Box::new(move |x, _| if x > c { 1.0 } else { 0.0 }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(
            "sum_all",
            Vec::new(),
            vec![s],
            &[self],
            Box::new(|ctx: &GradCtx| vec![Some(vec![ctx.upstream[0]; ctx.inputs[0].numel()])]),
        )
        .expect("sum of finite values")
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n).expect("finite")
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let (outer, len, inner) = axis_split("sum_axis", self.shape(), axis)?;
        let d = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[o * len * inner + k * inner + i];
                }
            }
        }
        Tensor::from_op(
            "sum_axis",
            reduced_shape(self.shape(), axis, keepdim),
            out,
            &[self],
            Box::new(move |ctx: &GradCtx| {
                vec![Some(spread(ctx.upstream, outer, len, inner, |_, _, g| g))]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let (outer, len, inner) = axis_split("mean_axis", self.shape(), axis)?;
        let out = axis_means(self.data(), outer, len, inner);
        let n = len as f64;
        Tensor::from_op(
            "mean_axis",
            reduced_shape(self.shape(), axis, keepdim),
            out,
            &[self],
            Box::new(move |ctx: &GradCtx| {
                vec![Some(spread(ctx.upstream, outer, len, inner, |_, _, g| {
                    g / n
                }))]
            }),
        )
    }

    /// Population (1/N) standard deviation along an axis. Where the
    /// deviation is exactly 0 the gradient is taken as 0.
    pub fn std_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let (outer, len, inner) = axis_split("std_axis", self.shape(), axis)?;
        let d = self.data();
        let means = axis_means(d, outer, len, inner);
        let n = len as f64;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let m = means[o * inner + i];
                let mut s = 0.0;
                for k in 0..len {
                    let c = d[o * len * inner + k * inner + i] - m;
                    s += c * c;
                }
                out[o * inner + i] = (s / n).sqrt();
            }
        }
        Tensor::from_op(
            "std_axis",
            reduced_shape(self.shape(), axis, keepdim),
            out,
            &[self],
            Box::new(move |ctx: &GradCtx| {
                let x = ctx.inputs[0].data();
                let means = axis_means(x, outer, len, inner);
                let std = ctx.output;
                vec![Some(spread(
                    ctx.upstream,
                    outer,
                    len,
                    inner,
                    |flat, r, g| {
                        if std[r] > 0.0 {
                            g * (x[flat] - means[r]) / (n * std[r])
                        } else {
                            0.0
                        }
                    },
                ))]
            }),
        )
    }

    /// Reinterpret the data with a new shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            &[self],
            Box::new(|ctx: &GradCtx| vec![Some(ctx.upstream.to_vec())]),
        )
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            &[self],
            Box::new(move |ctx: &GradCtx| {
                let g = ctx.upstream;
                let mut back = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        back[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(back)]
            }),
        )
    }

    /// Matrix product of 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            &[self, other],
            Box::new(move |ctx: &GradCtx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.upstream;
                let ga = ctx.needs[0].then(|| matmul_nt(g, b, m, n, k));
                let gb = ctx.needs[1].then(|| matmul_tn(a, g, m, k, n));
                vec![ga, gb]
            }),
        )
    }

    /// Diagonal of a square matrix.
    pub fn diagonal(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("diagonal")?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "diagonal",
                left: self.shape().to_vec(),
                right: vec![c, r],
            });
        }
        let d = self.data();
        let out = (0..r).map(|i| d[i * r + i]).collect();
        Tensor::from_op(
            "diagonal",
            vec![r],
            out,
            &[self],
            Box::new(move |ctx: &GradCtx| {
                let mut g = vec![0.0; r * r];
                for i in 0..r {
                    g[i * r + i] = ctx.upstream[i];
                }
                vec![Some(g)]
            }),
        )
    }
}
