//! Primitive differentiable operations.

use std::sync::Arc;

use super::array::gemm;
use super::{DenseArray, DiffError, Var};

fn dims2(op: &'static str, a: &DenseArray) -> Result<(usize, usize), DiffError> {
    a.dims2().ok_or_else(|| DiffError::Rank {
        op,
        expected: 2,
        shape: a.shape().to_vec(),
    })
}

fn same_shape(op: &'static str, a: &DenseArray, b: &DenseArray) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, axis: usize) -> Result<(), DiffError> {
    if axis > 1 {
        return Err(DiffError::Axis { op, axis });
    }
    Ok(())
}

// Fallible, so these cannot be the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.record(
            "add",
            &[self, other],
            out,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.record(
            "sub",
            &[self, other],
            out,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.record(
            "mul",
            &[self, other],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                    needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
                ]
            }),
        )
    }

    /// Adds a bias vector of length `cols` to every row of a 2-D array.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (x, b) = (self.value(), bias.value());
        let (rows, cols) = dims2("add_row", &x)?;
        if b.len() != cols {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = x.as_ref().clone();
        for r in 0..rows {
            for (v, bv) in out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(b.data())
            {
                *v += bv;
            }
        }
        let bias_shape = b.shape().to_vec();
        self.tape.record(
            "add_row",
            &[self, bias],
            out,
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; cols];
                    for r in 0..rows {
                        for (a, gv) in acc.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *a += gv;
                        }
                    }
                    DenseArray::new(bias_shape.clone(), acc).expect("bias shape")
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, DiffError> {
        let out = self.value().map(|v| c * v);
        self.tape.record(
            "scale",
            &[self],
            out,
            Box::new(move |g, _| vec![Some(g.map(|v| c * v))]),
        )
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>, DiffError> {
        let out = self.value().map(|v| v + c);
        self.tape.record(
            "add_scalar",
            &[self],
            out,
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    pub fn neg(self) -> Result<Var<'t>, DiffError> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>, DiffError> {
        let out = Arc::new(self.value().map(f64::exp));
        let y = Arc::clone(&out);
        self.tape.record(
            "exp",
            &[self],
            out.as_ref().clone(),
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |gv, yv| gv * yv))]),
        )
    }

    pub fn log(self) -> Result<Var<'t>, DiffError> {
        let x = self.value();
        let out = x.map(f64::ln);
        self.tape.record(
            "log",
            &[self],
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| gv / xv))]),
        )
    }

    pub fn square(self) -> Result<Var<'t>, DiffError> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape.record(
            "square",
            &[self],
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| 2.0 * xv * gv))]),
        )
    }

    pub fn relu(self) -> Result<Var<'t>, DiffError> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape.record(
            "relu",
            &[self],
            out,
            Box::new(move |g, _| {
                vec![Some(
                    g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                )]
            }),
        )
    }

    /// Matrix product `self @ other`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul", &a)?;
        let (k2, n) = dims2("matmul", &b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out);
        let out = DenseArray::new(vec![m, n], out)?;
        self.tape.record(
            "matmul",
            &[self, other],
            out,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut d);
                    DenseArray::new(vec![m, k], d).expect("matmul grad a")
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut d);
                    DenseArray::new(vec![k, n], d).expect("matmul grad b")
                });
                vec![ga, gb]
            }),
        )
    }

    /// `self @ other^T`; for row-normalized embeddings this is the
    /// dot-product similarity matrix.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul_nt", &a)?;
        let (n, k2) = dims2("matmul_nt", &b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_nt",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), true, &mut out);
        let out = DenseArray::new(vec![m, n], out)?;
        self.tape.record(
            "matmul_nt",
            &[self, other],
            out,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), false, &mut d);
                    DenseArray::new(vec![m, k], d).expect("matmul_nt grad a")
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, a.data(), false, &mut d);
                    DenseArray::new(vec![n, k], d).expect("matmul_nt grad b")
                });
                vec![ga, gb]
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>, DiffError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = DenseArray::scalar(x.sum());
        self.tape.record(
            "sum",
            &[self],
            out,
            Box::new(move |g, _| vec![Some(DenseArray::filled(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Result<Var<'t>, DiffError> {
        let n = self.value().len();
        if n == 0 {
            return Err(DiffError::Empty { op: "mean" });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum of a 2-D array over `axis`, producing a 1-D array.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, DiffError> {
        check_axis("sum_axis", axis)?;
        let x = self.value();
        let (r, c) = dims2("sum_axis", &x)?;
        let out = if axis == 1 {
            (0..r).map(|i| x.row(i).iter().sum()).collect()
        } else {
            let mut acc = vec![0.0; c];
            for i in 0..r {
                for (a, v) in acc.iter_mut().zip(x.row(i)) {
                    *a += v;
                }
            }
            acc
        };
        self.tape.record(
            "sum_axis",
            &[self],
            DenseArray::vector(out),
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = if axis == 1 { g.data()[i] } else { g.data()[j] };
                    }
                }
                vec![Some(DenseArray::new(vec![r, c], d).expect("sum_axis grad"))]
            }),
        )
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, DiffError> {
        check_axis("mean_axis", axis)?;
        let v = self.value();
        let (r, c) = dims2("mean_axis", &v)?;
        let n = if axis == 1 { c } else { r };
        if n == 0 {
            return Err(DiffError::Empty { op: "mean_axis" });
        }
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    /// Numerically stable `log(sum(exp(x)))` of a 2-D array over `axis`.
    pub fn logsumexp_axis(self, axis: usize) -> Result<Var<'t>, DiffError> {
        check_axis("logsumexp_axis", axis)?;
        let x = self.value();
        let (r, c) = dims2("logsumexp_axis", &x)?;
        if (axis == 1 && c == 0) || (axis == 0 && r == 0) {
            return Err(DiffError::Empty {
                op: "logsumexp_axis",
            });
        }
        let idx = move |lane: usize, pos: usize| {
            if axis == 1 {
                lane * c + pos
            } else {
                pos * c + lane
            }
        };
        let (lanes, len) = if axis == 1 { (r, c) } else { (c, r) };
        let mut out = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let m = (0..len)
                .map(|p| x.data()[idx(lane, p)])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..len).map(|p| (x.data()[idx(lane, p)] - m).exp()).sum();
            out.push(m + s.ln());
        }
        let lse = out.clone();
        self.tape.record(
            "logsumexp_axis",
            &[self],
            DenseArray::vector(out),
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * c];
                for lane in 0..lanes {
                    for p in 0..len {
                        let i = idx(lane, p);
                        d[i] = g.data()[lane] * (x.data()[i] - lse[lane]).exp();
                    }
                }
                vec![Some(DenseArray::new(vec![r, c], d).expect("lse grad"))]
            }),
        )
    }

    /// Divides each row of a 2-D array by its Euclidean norm. A zero row is
    /// an error.
    pub fn l2_normalize_rows(self) -> Result<Var<'t>, DiffError> {
        let x = self.value();
        let (r, c) = dims2("l2_normalize_rows", &x)?;
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(DiffError::ZeroNorm { row: i });
            }
            for j in 0..c {
                out[i * c + j] = x.row(i)[j] / n;
            }
            norms.push(n);
        }
        let y = DenseArray::new(vec![r, c], out)?;
        let yc = y.clone();
        self.tape.record(
            "l2_normalize_rows",
            &[self],
            y,
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = yc.row(i);
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                vec![Some(
                    DenseArray::new(vec![r, c], d).expect("normalize grad"),
                )]
            }),
        )
    }

    /// Row-wise dot product of two equally shaped 2-D arrays.
    pub fn row_dot(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.mul(other)?.sum_axis(1)
    }

    /// Concatenates 2-D arrays along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, DiffError> {
        check_axis("concat", axis)?;
        let first = parts.first().ok_or(DiffError::Empty { op: "concat" })?;
        let tape = first.tape;
        let values: Vec<Arc<DenseArray>> = parts.iter().map(Var::value).collect();
        let mut dims = Vec::with_capacity(values.len());
        for v in &values {
            dims.push(dims2("concat", v)?);
        }
        let (r0, c0) = dims[0];
        for (v, &(r, c)) in values.iter().zip(&dims) {
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: values[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
        }
        let (out_r, out_c) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum(), c0)
        } else {
            (r0, dims.iter().map(|d| d.1).sum())
        };
        let mut out = Vec::with_capacity(out_r * out_c);
        if axis == 0 {
            for v in &values {
                out.extend_from_slice(v.data());
            }
        } else {
            for i in 0..r0 {
                for v in &values {
                    out.extend_from_slice(v.row(i));
                }
            }
        }
        let out = DenseArray::new(vec![out_r, out_c], out)?;
        tape.record(
            "concat",
            parts,
            out,
            Box::new(move |g, needs| {
                let mut offset = 0;
                dims.iter()
                    .zip(needs)
                    .map(|(&(r, c), &need)| {
                        let start = offset;
                        offset += if axis == 0 { r } else { c };
                        need.then(|| {
                            let mut d = Vec::with_capacity(r * c);
                            if axis == 0 {
                                d.extend_from_slice(&g.data()[start * out_c..(start + r) * out_c]);
                            } else {
                                for i in 0..r {
                                    d.extend_from_slice(
                                        &g.data()[i * out_c + start..i * out_c + start + c],
                                    );
                                }
                            }
                            DenseArray::new(vec![r, c], d).expect("concat grad")
                        })
                    })
                    .collect()
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let out = x.as_ref().clone().reshaped(shape.to_vec())?;
        self.tape.record(
            "reshape",
            &[self],
            out,
            Box::new(move |g, _| {
                vec![Some(
                    g.clone().reshaped(orig.clone()).expect("reshape grad"),
                )]
            }),
        )
    }

    /// Diagonal of a square 2-D array as a 1-D array.
    pub fn diagonal(self) -> Result<Var<'t>, DiffError> {
        let x = self.value();
        let (r, c) = dims2("diagonal", &x)?;
        if r != c {
            return Err(DiffError::ShapeMismatch {
                op: "diagonal",
                left: vec![r, c],
                right: vec![r, r],
            });
        }
        let out = (0..r).map(|i| x.data()[i * r + i]).collect();
        self.tape.record(
            "diagonal",
            &[self],
            DenseArray::vector(out),
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * r];
                for i in 0..r {
                    d[i * r + i] = g.data()[i];
                }
                vec![Some(DenseArray::new(vec![r, r], d).expect("diagonal grad"))]
            }),
        )
    }

    /// Drops the diagonal of a square `K x K` array, giving `K x (K-1)` where
    /// row `i` lists entries `j != i` in ascending `j`.
    pub fn off_diagonal(self) -> Result<Var<'t>, DiffError> {
        let x = self.value();
        let (r, c) = dims2("off_diagonal", &x)?;
        if r != c {
            return Err(DiffError::ShapeMismatch {
                op: "off_diagonal",
                left: vec![r, c],
                right: vec![r, r],
            });
        }
        let k = r;
        let mut out = Vec::with_capacity(k * k.saturating_sub(1));
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                out.push(x.data()[i * k + j]);
            }
        }
        let out = DenseArray::new(vec![k, k.saturating_sub(1)], out)?;
        self.tape.record(
            "off_diagonal",
            &[self],
            out,
            Box::new(move |g, _| {
                let mut d = vec![0.0; k * k];
                let mut p = 0;
                for i in 0..k {
                    for j in (0..k).filter(|&j| j != i) {
                        d[i * k + j] = g.data()[p];
                        p += 1;
                    }
                }
                vec![Some(
                    DenseArray::new(vec![k, k], d).expect("off_diagonal grad"),
                )]
            }),
        )
    }
}
