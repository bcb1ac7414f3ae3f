use super::gemm::{gemm, Strides};
use super::tape::{grad_buf, Node, Op, Tape, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::geometry::{corner_sign, CameraModel};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn lhs_strides(m: usize, k: usize, transposed: bool) -> Strides {
    if transposed {
        Strides::transposed(m)
    } else {
        Strides::row_major(k)
    }
}

/// Output shape of an elementwise binary op (exact match or scalar broadcast).
fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape())))
    }
}

fn bcast(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Four `(col, row, weight)` bilinear taps.
type Taps = [(i64, i64, f64); 4];

/// Bilinear stencil around `(u, v)`: the taps plus the fractional offsets.
fn stencil(u: f64, v: f64) -> Option<(Taps, f64, f64)> {
    if !(u.is_finite() && v.is_finite()) || u.abs() > 1e9 || v.abs() > 1e9 {
        return None;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    Some((
        [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ],
        fx,
        fy,
    ))
}

fn in_bounds(x: i64, y: i64, h: usize, w: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h
}

impl Tape {
    fn val(&self, v: Var) -> &Tensor {
        self.value(v)
    }

    /// `op(a) · op(b)` for rank-2 operands; `ta`/`tb` transpose the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::dim(format!("matmul needs rank-2 operands, got {:?} and {:?}", av.shape(), bv.shape())));
        }
        let (m, k) = if ta { (av.shape()[1], av.shape()[0]) } else { (av.shape()[0], av.shape()[1]) };
        let (k2, n) = if tb { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims disagree: {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            lhs_strides(m, k, ta),
            bv.data(),
            lhs_strides(k, n, tb),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let t = Tensor::matrix(m, n, out)?;
        self.push(t, &[a, b], Op::MatMul { a, b, m, k, n, ta, tb }, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product `[B×m×k] · [B×k×n]`, or `[B×m×k] · [B×n×k]ᵀ` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::dim(format!(
                "bmm needs matching rank-3 operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (k2, n) = if tb { (bv.shape()[2], bv.shape()[1]) } else { (bv.shape()[1], bv.shape()[2]) };
        if k != k2 {
            return Err(Error::dim(format!("bmm inner dims disagree: {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[bi * m * k..(bi + 1) * m * k],
                Strides::row_major(k),
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                lhs_strides(k, n, tb),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
                Strides::row_major(n),
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        self.push(t, &[a, b], Op::Bmm { a, b, batch, m, k, n, tb }, "bmm")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let shape = broadcast_shape(av, bv)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(bcast(av, i), bcast(bv, i))).collect();
        let t = Tensor::new(&shape, data)?;
        self.push(t, &[a, b], op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    /// Adds a bias vector to every row (bias length = last dim of `x`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(b));
        let n = xv.last_dim();
        if bv.numel() != n {
            return Err(Error::dim(format!("bias of {} elements for rows of {n}", bv.numel())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, &[x, b], Op::AddBias { x, b }, "add_bias")
    }

    /// `x: [B×m×n] + b: [B×1×n]`, broadcasting each batch's bias over its rows.
    pub fn add_bias_batched(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(b));
        if xv.rank() != 3 || bv.shape() != [xv.shape()[0], 1, xv.shape()[2]] {
            return Err(Error::dim(format!("batched bias {:?} does not fit {:?}", bv.shape(), xv.shape())));
        }
        let (batch, rows, cols) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = xv.data().to_vec();
        for bi in 0..batch {
            let bias = &bv.data()[bi * cols..(bi + 1) * cols];
            for r in 0..rows {
                let off = (bi * rows + r) * cols;
                for (o, bb) in data[off..off + cols].iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, &[x, b], Op::AddBiasMid { x, b, batch, rows, cols }, "add_bias_batched")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let xv = self.val(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, &[x], Op::Scale { x, s }, "scale")
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.val(x);
        let data = xv.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, &[x], Op::AddConst { x }, "add_const")
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let xv = self.val(x);
        let (f, name): (fn(f64) -> f64, &str) = match kind {
            UnaryKind::Relu => (|v| if v > 0.0 { v } else { 0.0 }, "relu"),
            UnaryKind::Exp => (f64::exp, "exp"),
            UnaryKind::Ln => (f64::ln, "ln"),
            UnaryKind::Sqrt => (f64::sqrt, "sqrt"),
            UnaryKind::Abs => (f64::abs, "abs"),
            UnaryKind::Sigmoid => (sigmoid, "sigmoid"),
            UnaryKind::Softplus => (softplus, "softplus"),
        };
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, &[x], Op::Unary { x, kind }, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Softplus)
    }

    /// Layer normalization over the last axis followed by the affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.val(x);
        let n = xv.last_dim();
        if n < 2 || xv.rank() == 0 {
            return Err(Error::dim(format!("layer_norm needs at least 2 channels, got {n}")));
        }
        let (gv, bv) = (self.val(gamma), self.val(beta));
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::dim(format!(
                "layer_norm affine params {:?}/{:?} for {n} channels",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.numel() / n;
        let mut out = vec![0.0; xv.numel()];
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        self.push(t, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, n, xhat, rstd }, "layer_norm")
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let n = xv.last_dim();
        if n == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let mut out = vec![0.0; xv.numel()];
        for (r, o) in out.chunks_mut(n).enumerate() {
            let row = xv.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (oo, &v) in o.iter_mut().zip(row) {
                *oo = (v - mx).exp();
                z += *oo;
            }
            o.iter_mut().for_each(|oo| *oo /= z);
        }
        let t = Tensor::new(xv.shape(), out)?;
        self.push(t, &[x], Op::Softmax { x, n }, "softmax")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum { x }, "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).clone().reshape(shape)?;
        self.push(t, &[x], Op::Reshape { x }, "reshape")
    }

    /// `[a×b×c] -> [b×a×c]`.
    pub fn transpose01(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        if xv.rank() != 3 {
            return Err(Error::dim(format!("transpose01 needs rank 3, got {:?}", xv.shape())));
        }
        let (a, b, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; a * b * c];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * c;
                let dst = (j * a + i) * c;
                out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
            }
        }
        let t = Tensor::new(&[b, a, c], out)?;
        self.push(t, &[x], Op::Transpose01 { x, a, b, c }, "transpose01")
    }

    /// Concatenate along the last axis; all parts must have the same row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let w0 = self.val(*first).last_dim();
        let rows = self.val(*first).numel() / w0.max(1);
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.val(x);
            let w = v.last_dim();
            if v.numel() != rows * w {
                return Err(Error::dim(format!("concat row mismatch: {:?} vs {rows} rows", v.shape())));
            }
            parts.push((x, w));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &(x, w) in &parts {
            let v = self.val(x).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = self.val(*first).shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = total,
            None => shape.push(total),
        }
        let t = Tensor::new(&shape, out)?;
        self.push(t, xs, Op::ConcatCols { parts, rows }, "concat_cols")
    }

    /// Columns `[start, end)` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.val(x);
        let width = xv.last_dim();
        if start >= end || end > width {
            return Err(Error::dim(format!("slice {start}..{end} of width {width}")));
        }
        let rows = xv.numel() / width;
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = w;
        let t = Tensor::new(&shape, out)?;
        self.push(t, &[x], Op::SliceCols { x, start, end, width }, "slice_cols")
    }

    /// Rows of `x` (viewed as `[rows × last_dim]`) picked by `idx`; output `[idx.len() × last_dim]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        let width = xv.last_dim();
        let rows = xv.numel() / width.max(1);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim(format!("gather row {i} of {rows}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::matrix(idx.len(), width, out)?;
        self.push(t, &[x], Op::GatherRows { x, idx: idx.to_vec(), width }, "gather_rows")
    }

    /// Bilinear sampling with zero padding.
    ///
    /// `coords` is `[N×2]` holding (column, row) positions that are multiplied
    /// by `scale` before sampling; cell centers sit at integer coordinates.
    /// Point `i` reads `width` channels starting at `chan[i]` from
    /// `maps[sel[i]]` (each `[C×H×W]`); `sel[i] == None` yields zeros.
    pub fn bilinear(
        &mut self,
        maps: &[Var],
        coords: Var,
        sel: &[Option<usize>],
        chan: &[usize],
        width: usize,
        scale: f64,
    ) -> Result<Var> {
        let cv = self.val(coords);
        if cv.rank() != 2 || cv.shape()[1] != 2 {
            return Err(Error::dim(format!("bilinear coords must be [N×2], got {:?}", cv.shape())));
        }
        let n = cv.shape()[0];
        if sel.len() != n || chan.len() != n {
            return Err(Error::dim("bilinear selection length mismatch"));
        }
        for &m in maps {
            if self.val(m).rank() != 3 {
                return Err(Error::dim(format!("feature map must be [C×H×W], got {:?}", self.shape(m))));
            }
        }
        let mut out = vec![0.0; n * width];
        for i in 0..n {
            let Some(mi) = sel[i] else { continue };
            let map = self.val(*maps.get(mi).ok_or_else(|| Error::dim("map index out of range"))?);
            let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            if chan[i] + width > c {
                return Err(Error::dim(format!("channels {}..{} of {c}", chan[i], chan[i] + width)));
            }
            let Some((taps, _, _)) = stencil(scale * cv.data()[2 * i], scale * cv.data()[2 * i + 1]) else {
                continue;
            };
            let o = &mut out[i * width..(i + 1) * width];
            for &(x, y, wt) in &taps {
                if wt == 0.0 || !in_bounds(x, y, h, w) {
                    continue;
                }
                let pix = y as usize * w + x as usize;
                for (k, ok) in o.iter_mut().enumerate() {
                    *ok += wt * map.data()[(chan[i] + k) * h * w + pix];
                }
            }
        }
        let t = Tensor::matrix(n, width, out)?;
        let mut inputs = maps.to_vec();
        inputs.push(coords);
        self.push(
            t,
            &inputs,
            Op::Bilinear { maps: maps.to_vec(), coords, sel: sel.to_vec(), chan: chan.to_vec(), width, scale },
            "bilinear",
        )
    }

    /// Pinhole projection of `[N×3]` points through camera `sel[i]`, giving
    /// `[N×2]` pixel coordinates (zero rows where `sel[i]` is `None`).
    pub fn project(&mut self, points: Var, cams: &[CameraModel], sel: &[Option<usize>]) -> Result<Var> {
        let pv = self.val(points);
        if pv.rank() != 2 || pv.shape()[1] != 3 || sel.len() != pv.shape()[0] {
            return Err(Error::dim(format!("project needs [N×3] points, got {:?}", pv.shape())));
        }
        let n = pv.shape()[0];
        let mut out = vec![0.0; n * 2];
        for i in 0..n {
            let Some(ci) = sel[i] else { continue };
            let cam = cams.get(ci).ok_or_else(|| Error::dim("camera index out of range"))?;
            let p = [pv.data()[3 * i], pv.data()[3 * i + 1], pv.data()[3 * i + 2]];
            let (u, v) = cam.pixel_unchecked(p);
            out[2 * i] = u;
            out[2 * i + 1] = v;
        }
        let t = Tensor::matrix(n, 2, out)?;
        self.push(t, &[points], Op::Project { points, cams: cams.to_vec(), sel: sel.to_vec() }, "project")
    }

    /// Anchor points of `[R×8]` boxes: center followed (when `corners`) by the
    /// 8 corners in canonical order. Output `[R × A·3]` with `A` = 9 or 1.
    pub fn anchors(&mut self, boxes: Var, corners: bool) -> Result<Var> {
        let bv = self.val(boxes);
        if bv.last_dim() != 8 {
            return Err(Error::dim(format!("boxes must have 8 columns, got {:?}", bv.shape())));
        }
        let rows = bv.numel() / 8;
        let a = if corners { 9 } else { 1 };
        let mut out = Vec::with_capacity(rows * a * 3);
        for r in 0..rows {
            let b = bv.row(r);
            out.extend_from_slice(&b[0..3]);
            if corners {
                let rr = (b[6] * b[6] + b[7] * b[7]).sqrt();
                if rr == 0.0 {
                    return Err(Error::DegenerateHeading);
                }
                let (s, c) = (b[6] / rr, b[7] / rr);
                for i in 0..8 {
                    let (sx, sy, sz) = corner_sign(i);
                    let lx = sx * b[4] / 2.0;
                    let ly = sy * b[3] / 2.0;
                    let lz = sz * b[5] / 2.0;
                    out.push(b[0] + c * lx - s * ly);
                    out.push(b[1] + s * lx + c * ly);
                    out.push(b[2] + lz);
                }
            }
        }
        let t = Tensor::matrix(rows, a * 3, out)?;
        self.push(t, &[boxes], Op::Anchors { boxes, corners }, "anchors")
    }

    /// Pairwise ground-plane distance between the centers of `[Q×8]` boxes,
    /// returned as `[1 × Q²]` (row-major over query pairs). The adjoint at
    /// coincident centers uses the subgradient 0.
    pub fn pair_dist(&mut self, boxes: Var) -> Result<Var> {
        let bv = self.val(boxes);
        if bv.rank() != 2 || bv.shape()[1] != 8 {
            return Err(Error::dim(format!("pair_dist needs [Q×8] boxes, got {:?}", bv.shape())));
        }
        let q = bv.shape()[0];
        let mut out = vec![0.0; q * q];
        for i in 0..q {
            for j in 0..q {
                let (a, b) = (bv.row(i), bv.row(j));
                out[i * q + j] = (a[0] - b[0]).hypot(a[1] - b[1]);
            }
        }
        let t = Tensor::matrix(1, q * q, out)?;
        self.push(t, &[boxes], Op::PairDist { boxes }, "pair_dist")
    }

    /// Summed sigmoid focal loss over all logits against 0/1 targets.
    /// `alpha = None` disables class balancing.
    pub fn focal_loss(&mut self, logits: Var, targets: &[f64], gamma: f64, alpha: Option<f64>) -> Result<Var> {
        let lv = self.val(logits);
        if lv.numel() != targets.len() {
            return Err(Error::dim(format!("{} targets for {} logits", targets.len(), lv.numel())));
        }
        let total = lv.data().iter().zip(targets).map(|(&x, &t)| focal_term(x, t, gamma, alpha)).sum();
        self.push(
            Tensor::scalar(total),
            &[logits],
            Op::Focal { logits, targets: targets.to_vec(), gamma, alpha },
            "focal_loss",
        )
    }
}

fn alpha_t(t: f64, alpha: Option<f64>) -> f64 {
    match alpha {
        Some(a) => t * a + (1.0 - t) * (1.0 - a),
        None => 1.0,
    }
}

/// One focal-loss term for logit `x` and binary target `t`.
pub(crate) fn focal_term(x: f64, t: f64, gamma: f64, alpha: Option<f64>) -> f64 {
    let p = sigmoid(x);
    // -log p = softplus(-x), -log(1-p) = softplus(x)
    let pos = (1.0 - p).powf(gamma) * softplus(-x);
    let neg = p.powf(gamma) * softplus(x);
    alpha_t(1.0, alpha) * t * pos + alpha_t(0.0, alpha) * (1.0 - t) * neg
}

fn focal_grad(x: f64, t: f64, gamma: f64, alpha: Option<f64>) -> f64 {
    let p = sigmoid(x);
    let q = 1.0 - p;
    let dpos = -gamma * p * q.powf(gamma) * softplus(-x) - q.powf(gamma + 1.0);
    let dneg = gamma * p.powf(gamma) * q * softplus(x) + p.powf(gamma + 1.0);
    alpha_t(1.0, alpha) * t * dpos + alpha_t(0.0, alpha) * (1.0 - t) * dneg
}

fn add_into(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulate `g` into a possibly-broadcast operand.
fn acc_bcast(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
    if let Some(buf) = grad_buf(nodes, grads, v) {
        if buf.len() == 1 {
            buf[0] += g.sum::<f64>();
        } else {
            add_into(buf, g);
        }
    }
}

pub(crate) fn backward_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = nodes[i].value.get();
    let val = |v: Var| nodes[v.0].value.get();
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n, ta, tb } => {
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(da) = grad_buf(nodes, grads, a) {
                // d op(A) = dC · op(B)ᵀ
                let sb = if tb { Strides::row_major(k) } else { Strides::transposed(n) };
                let sda = if ta { Strides::transposed(m) } else { Strides::row_major(k) };
                gemm(m, n, k, g, Strides::row_major(n), bv, sb, 1.0, da, sda);
            }
            if let Some(db) = grad_buf(nodes, grads, b) {
                // d op(B) = op(A)ᵀ · dC
                let sa = if ta { Strides::row_major(m) } else { Strides::transposed(k) };
                let sdb = if tb { Strides::transposed(k) } else { Strides::row_major(n) };
                gemm(k, m, n, av, sa, g, Strides::row_major(n), 1.0, db, sdb);
            }
        }
        &Op::Bmm { a, b, batch, m, k, n, tb } => {
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(da) = grad_buf(nodes, grads, a) {
                let sb = if tb { Strides::row_major(k) } else { Strides::transposed(n) };
                for bi in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        Strides::row_major(n),
                        &bv[bi * k * n..(bi + 1) * k * n],
                        sb,
                        1.0,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        Strides::row_major(k),
                    );
                }
            }
            if let Some(db) = grad_buf(nodes, grads, b) {
                let sdb = if tb { Strides::transposed(k) } else { Strides::row_major(n) };
                for bi in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &av[bi * m * k..(bi + 1) * m * k],
                        Strides::transposed(k),
                        &g[bi * m * n..(bi + 1) * m * n],
                        Strides::row_major(n),
                        1.0,
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        sdb,
                    );
                }
            }
        }
        &Op::Add { a, b } => {
            acc_bcast(nodes, grads, a, g.iter().copied());
            acc_bcast(nodes, grads, b, g.iter().copied());
        }
        &Op::Sub { a, b } => {
            acc_bcast(nodes, grads, a, g.iter().copied());
            acc_bcast(nodes, grads, b, g.iter().map(|v| -v));
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            acc_bcast(nodes, grads, a, g.iter().enumerate().map(|(j, gi)| gi * bcast(bv, j)));
            acc_bcast(nodes, grads, b, g.iter().enumerate().map(|(j, gi)| gi * bcast(av, j)));
        }
        &Op::AddBias { x, b } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                add_into(dx, g.iter().copied());
            }
            if let Some(db) = grad_buf(nodes, grads, b) {
                let n = db.len();
                for row in g.chunks(n) {
                    add_into(db, row.iter().copied());
                }
            }
        }
        &Op::AddBiasMid { x, b, batch, rows, cols } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                add_into(dx, g.iter().copied());
            }
            if let Some(db) = grad_buf(nodes, grads, b) {
                for bi in 0..batch {
                    for r in 0..rows {
                        let off = (bi * rows + r) * cols;
                        add_into(&mut db[bi * cols..(bi + 1) * cols], g[off..off + cols].iter().copied());
                    }
                }
            }
        }
        &Op::Scale { x, s } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                add_into(dx, g.iter().map(|v| v * s));
            }
        }
        &Op::AddConst { x } | &Op::Reshape { x } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                add_into(dx, g.iter().copied());
            }
        }
        &Op::Unary { x, kind } => {
            let xv = val(x).data();
            let y = out.data();
            if let Some(dx) = grad_buf(nodes, grads, x) {
                for j in 0..dx.len() {
                    let d = match kind {
                        UnaryKind::Relu => {
                            if xv[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Exp => y[j],
                        UnaryKind::Ln => 1.0 / xv[j],
                        UnaryKind::Sqrt => 0.5 / y[j],
                        UnaryKind::Abs => {
                            if xv[j] > 0.0 {
                                1.0
                            } else if xv[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                        UnaryKind::Softplus => sigmoid(xv[j]),
                    };
                    dx[j] += g[j] * d;
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, n, xhat, rstd } => {
            let n = *n;
            let gv = val(*gamma).data();
            if let Some(dg) = grad_buf(nodes, grads, *gamma) {
                for (r, row) in g.chunks(n).enumerate() {
                    add_into(dg, row.iter().zip(&xhat[r * n..(r + 1) * n]).map(|(a, b)| a * b));
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *beta) {
                for row in g.chunks(n) {
                    add_into(db, row.iter().copied());
                }
            }
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let mut dh = vec![0.0; n];
                for (r, row) in g.chunks(n).enumerate() {
                    let xh = &xhat[r * n..(r + 1) * n];
                    for c in 0..n {
                        dh[c] = row[c] * gv[c];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dhx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] += rstd[r] * (dh[c] - mean_dh - xh[c] * mean_dhx);
                    }
                }
            }
        }
        &Op::Softmax { x, n } => {
            let y = out.data();
            if let Some(dx) = grad_buf(nodes, grads, x) {
                for (r, row) in g.chunks(n).enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let dot: f64 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] += yr[c] * (row[c] - dot);
                    }
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Transpose01 { x, a, b, c } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                for i in 0..a {
                    for j in 0..b {
                        let src = (j * a + i) * c;
                        let dst = (i * b + j) * c;
                        add_into(&mut dx[dst..dst + c], g[src..src + c].iter().copied());
                    }
                }
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut off = 0;
            for &(x, w) in parts {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    for r in 0..*rows {
                        add_into(&mut dx[r * w..(r + 1) * w], g[r * total + off..r * total + off + w].iter().copied());
                    }
                }
                off += w;
            }
        }
        &Op::SliceCols { x, start, end, width } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                let w = end - start;
                for (r, row) in g.chunks(w).enumerate() {
                    add_into(&mut dx[r * width + start..r * width + end], row.iter().copied());
                }
            }
        }
        Op::GatherRows { x, idx, width } => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut dx[src * width..(src + 1) * width], g[r * width..(r + 1) * width].iter().copied());
                }
            }
        }
        Op::Bilinear { maps, coords, sel, chan, width, scale } => {
            let (width, scale) = (*width, *scale);
            let cv = val(*coords).data();
            let mut dcoords = vec![0.0; cv.len()];
            let mut map_grads: Vec<Option<Vec<f64>>> =
                maps.iter().map(|&m| nodes[m.0].requires_grad.then(|| vec![0.0; val(m).numel()])).collect();
            for (i, s) in sel.iter().enumerate() {
                let Some(mi) = *s else { continue };
                let map = val(maps[mi]);
                let (h, w) = (map.shape()[1], map.shape()[2]);
                let Some((taps, fx, fy)) = stencil(scale * cv[2 * i], scale * cv[2 * i + 1]) else {
                    continue;
                };
                let gi = &g[i * width..(i + 1) * width];
                // neighbor values dotted with the output gradient
                let mut tap_dot = [0.0; 4];
                for (t, &(x, y, wt)) in taps.iter().enumerate() {
                    if !in_bounds(x, y, h, w) {
                        continue;
                    }
                    let pix = y as usize * w + x as usize;
                    let mut d = 0.0;
                    for (k, gk) in gi.iter().enumerate() {
                        let idx = (chan[i] + k) * h * w + pix;
                        d += gk * map.data()[idx];
                        if let Some(mg) = map_grads[mi].as_mut() {
                            mg[idx] += gk * wt;
                        }
                    }
                    tap_dot[t] = d;
                }
                let [d00, d10, d01, d11] = tap_dot;
                dcoords[2 * i] += scale * ((1.0 - fy) * (d10 - d00) + fy * (d11 - d01));
                dcoords[2 * i + 1] += scale * ((1.0 - fx) * (d01 - d00) + fx * (d11 - d10));
            }
            if let Some(dc) = grad_buf(nodes, grads, *coords) {
                add_into(dc, dcoords.into_iter());
            }
            for (m, mg) in maps.iter().zip(map_grads) {
                if let (Some(mg), Some(buf)) = (mg, grad_buf(nodes, grads, *m)) {
                    add_into(buf, mg.into_iter());
                }
            }
        }
        Op::Project { points, cams, sel } => {
            let pv = val(*points).data();
            if let Some(dp) = grad_buf(nodes, grads, *points) {
                for (i, s) in sel.iter().enumerate() {
                    let Some(ci) = *s else { continue };
                    let p = [pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]];
                    let d = cams[ci].pixel_vjp(p, [g[2 * i], g[2 * i + 1]]);
                    add_into(&mut dp[3 * i..3 * i + 3], d.into_iter());
                }
            }
        }
        &Op::Anchors { boxes, corners } => {
            let bv = val(boxes);
            let a = if corners { 9 } else { 1 };
            if let Some(db) = grad_buf(nodes, grads, boxes) {
                for r in 0..bv.numel() / 8 {
                    let b = bv.row(r);
                    let gr = &g[r * a * 3..(r + 1) * a * 3];
                    let d = &mut db[r * 8..(r + 1) * 8];
                    for p in 0..a {
                        d[0] += gr[3 * p];
                        d[1] += gr[3 * p + 1];
                        d[2] += gr[3 * p + 2];
                    }
                    if !corners {
                        continue;
                    }
                    let (sn, cs) = (b[6], b[7]);
                    let rr = (sn * sn + cs * cs).sqrt();
                    let (s, c) = (sn / rr, cs / rr);
                    let r3 = rr * rr * rr;
                    let (mut gc, mut gs) = (0.0, 0.0);
                    for i in 0..8 {
                        let (sx, sy, sz) = corner_sign(i);
                        let (gx, gy, gz) = (gr[3 + 3 * i], gr[4 + 3 * i], gr[5 + 3 * i]);
                        let lx = sx * b[4] / 2.0;
                        let ly = sy * b[3] / 2.0;
                        // width is lateral (local y), length along heading (local x)
                        d[3] += gx * (-s * sy / 2.0) + gy * (c * sy / 2.0);
                        d[4] += gx * (c * sx / 2.0) + gy * (s * sx / 2.0);
                        d[5] += gz * sz / 2.0;
                        gc += gx * lx + gy * ly;
                        gs += -gx * ly + gy * lx;
                    }
                    // c = cos/r, s = sin/r
                    d[6] += gc * (-cs * sn / r3) + gs * (cs * cs / r3);
                    d[7] += gc * (sn * sn / r3) + gs * (-sn * cs / r3);
                }
            }
        }
        &Op::PairDist { boxes } => {
            let bv = val(boxes);
            let d = out.data();
            let q = bv.shape()[0];
            if let Some(db) = grad_buf(nodes, grads, boxes) {
                for i in 0..q {
                    for j in 0..q {
                        let dij = d[i * q + j];
                        if dij == 0.0 {
                            continue;
                        }
                        let (a, b) = (bv.row(i), bv.row(j));
                        let gx = g[i * q + j] * (a[0] - b[0]) / dij;
                        let gy = g[i * q + j] * (a[1] - b[1]) / dij;
                        db[i * 8] += gx;
                        db[i * 8 + 1] += gy;
                        db[j * 8] -= gx;
                        db[j * 8 + 1] -= gy;
                    }
                }
            }
        }
        Op::Focal { logits, targets, gamma, alpha } => {
            let lv = val(*logits).data();
            if let Some(dl) = grad_buf(nodes, grads, *logits) {
                for j in 0..dl.len() {
                    dl[j] += g[0] * focal_grad(lv[j], targets[j], *gamma, *alpha);
                }
            }
        }
    }
}
