//! Forward ops with recorded backward rules.
//!
//! Backward closures work on raw slices and never call back into the public
//! ops, so nothing is recorded during the reverse pass. Elementwise binary
//! ops broadcast right-aligned, numpy style.

use std::sync::OnceLock;

use crate::error::{FuseError, Result};
use crate::tensor::{record, should_record, Tensor};

fn intra_op_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("FUSEDIT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

// ---------------------------------------------------------------------------
// Raw matmul kernels (shared by forward and backward)
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_into(a, b, m, k, n, &mut c);
    c
}

fn mm_rows(a: &[f64], b: &[f64], k: usize, n: usize, c: &mut [f64], rows: usize) {
    for i in 0..rows {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn mm_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    let threads = intra_op_threads();
    if threads <= 1 || m < 2 * threads || m * k * n < 1 << 16 {
        mm_rows(a, b, k, n, c, m);
        return;
    }
    let chunk = m.div_ceil(threads);
    std::thread::scope(|scope| {
        for (ci, cslab) in c.chunks_mut(chunk * n).enumerate() {
            let rows = cslab.len() / n;
            let aslab = &a[ci * chunk * k..ci * chunk * k + rows * k];
            scope.spawn(move || mm_rows(aslab, b, k, n, cslab, rows));
        }
    });
}

/// C[m,k] = A[m,n] * B[k,n]^T
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

fn bcast_shape(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(FuseError::shape(
                op,
                format!("cannot broadcast {:?} with {:?}", a, b),
            ));
        }
    }
    Ok(out)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` aligned to the (longer) `out` shape, with stride 0 on
/// broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    let mut s = vec![0usize; out.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

struct BcastIter<'a> {
    out_shape: &'a [usize],
    idx: Vec<usize>,
    a_pos: usize,
    b_pos: usize,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    done: bool,
}

impl<'a> BcastIter<'a> {
    fn new(out_shape: &'a [usize], a_shape: &[usize], b_shape: &[usize]) -> Self {
        BcastIter {
            out_shape,
            idx: vec![0; out_shape.len()],
            a_pos: 0,
            b_pos: 0,
            a_strides: aligned_strides(a_shape, out_shape),
            b_strides: aligned_strides(b_shape, out_shape),
            done: out_shape.iter().any(|&d| d == 0),
        }
    }

    #[inline]
    fn advance(&mut self) {
        for ax in (0..self.out_shape.len()).rev() {
            self.idx[ax] += 1;
            self.a_pos += self.a_strides[ax];
            self.b_pos += self.b_strides[ax];
            if self.idx[ax] < self.out_shape[ax] {
                return;
            }
            self.a_pos -= self.a_strides[ax] * self.out_shape[ax];
            self.b_pos -= self.b_strides[ax] * self.out_shape[ax];
            self.idx[ax] = 0;
        }
        self.done = true;
    }
}

// ---------------------------------------------------------------------------
// Generic elementwise ops
// ---------------------------------------------------------------------------

fn binary<F, Da, Db>(op: &'static str, a: &Tensor, b: &Tensor, f: F, dfa: Da, dfb: Db) -> Result<Tensor>
where
    F: Fn(f64, f64) -> f64 + Copy + 'static,
    Da: Fn(f64, f64, f64) -> f64 + Copy + 'static,
    Db: Fn(f64, f64, f64) -> f64 + Copy + 'static,
{
    let (ashape, bshape) = (a.shape(), b.shape());
    let out_shape = bcast_shape(op, &ashape, &bshape)?;
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    {
        let ad = a.data();
        let bd = b.data();
        if ashape == bshape {
            for (&av, &bv) in ad.iter().zip(bd.iter()) {
                data.push(f(av, bv));
            }
        } else {
            let mut it = BcastIter::new(&out_shape, &ashape, &bshape);
            while !it.done {
                data.push(f(ad[it.a_pos], bd[it.b_pos]));
                it.advance();
            }
        }
    }
    let out = Tensor::from_vec(data, &out_shape)?;
    if should_record(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        record(&out, move |g| {
            let ashape = a.shape();
            let bshape = b.shape();
            let oshape = o.shape();
            let ad = a.data();
            let bd = b.data();
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            if ashape == bshape {
                for i in 0..g.len() {
                    ga[i] = dfa(ad[i], bd[i], g[i]);
                    gb[i] = dfb(ad[i], bd[i], g[i]);
                }
            } else {
                let mut it = BcastIter::new(&oshape, &ashape, &bshape);
                let mut i = 0usize;
                while !it.done {
                    ga[it.a_pos] += dfa(ad[it.a_pos], bd[it.b_pos], g[i]);
                    gb[it.b_pos] += dfb(ad[it.a_pos], bd[it.b_pos], g[i]);
                    it.advance();
                    i += 1;
                }
            }
            drop(ad);
            drop(bd);
            a.accum_grad(&ga);
            b.accum_grad(&gb);
        });
    }
    Ok(out)
}

fn unary<F, D>(op: &'static str, a: &Tensor, f: F, df: D) -> Result<Tensor>
where
    F: Fn(f64) -> f64 + Copy + 'static,
    D: Fn(f64, f64, f64) -> f64 + Copy + 'static,
{
    let _ = op;
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let out = Tensor::from_vec(data, &a.shape())?;
    if should_record(&[a]) {
        let (a, o) = (a.clone(), out.clone());
        record(&out, move |g| {
            let ad = a.data();
            let od = o.data();
            let ga: Vec<f64> = (0..g.len()).map(|i| df(ad[i], od[i], g[i])).collect();
            drop(ad);
            drop(od);
            a.accum_grad(&ga);
        });
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        "div",
        a,
        b,
        |x, y| x / y,
        |_, y, g| g / y,
        |x, y, g| -g * x / (y * y),
    )
}

pub fn add_scalar(a: &Tensor, s: f64) -> Result<Tensor> {
    unary("add_scalar", a, move |x| x + s, |_, _, g| g)
}

pub fn mul_scalar(a: &Tensor, s: f64) -> Result<Tensor> {
    unary("mul_scalar", a, move |x| x * s, move |_, _, g| g * s)
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    unary("exp", a, f64::exp, |_, y, g| g * y)
}

pub fn sqrt(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|&x| x < 0.0) {
        return Err(FuseError::NonFinite {
            context: "sqrt of negative input".into(),
        });
    }
    unary("sqrt", a, f64::sqrt, |_, y, g| g * 0.5 / y)
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    unary(
        "sigmoid",
        a,
        |x| 1.0 / (1.0 + (-x).exp()),
        |_, y, g| g * y * (1.0 - y),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    unary(
        "gelu",
        a,
        |x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        },
        |x, _, g| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let sech2 = 1.0 - t * t;
            g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
        },
    )
}

pub fn silu(a: &Tensor) -> Result<Tensor> {
    unary(
        "silu",
        a,
        |x| x / (1.0 + (-x).exp()),
        |x, _, g| {
            let s = 1.0 / (1.0 + (-x).exp());
            g * (s * (1.0 + x * (1.0 - s)))
        },
    )
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ashape, bshape) = (a.shape(), b.shape());
    if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
        return Err(FuseError::shape(
            "matmul",
            format!("{:?} x {:?}", ashape, bshape),
        ));
    }
    let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
    count_matmul_flops(2 * m * k * n);
    let data = mm(&a.data(), &b.data(), m, k, n);
    let out = Tensor::from_vec(data, &[m, n])?;
    if should_record(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        record(&out, move |g| {
            let ga = mm_nt(g, &b.data(), m, n, k);
            let gb = mm_tn(&a.data(), g, m, k, n);
            a.accum_grad(&ga);
            b.accum_grad(&gb);
        });
    }
    Ok(out)
}

/// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ashape, bshape) = (a.shape(), b.shape());
    if ashape.len() != 3 || bshape.len() != 3 || ashape[0] != bshape[0] || ashape[2] != bshape[1] {
        return Err(FuseError::shape("bmm", format!("{:?} x {:?}", ashape, bshape)));
    }
    let (bt, m, k, n) = (ashape[0], ashape[1], ashape[2], bshape[2]);
    count_matmul_flops(2 * bt * m * k * n);
    let mut data = vec![0.0; bt * m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for i in 0..bt {
            mm_into(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
    }
    let out = Tensor::from_vec(data, &[bt, m, n])?;
    if should_record(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        record(&out, move |g| {
            let ad = a.data();
            let bd = b.data();
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for i in 0..bt {
                let gslab = &g[i * m * n..(i + 1) * m * n];
                let gai = mm_nt(gslab, &bd[i * k * n..(i + 1) * k * n], m, n, k);
                let gbi = mm_tn(&ad[i * m * k..(i + 1) * m * k], gslab, m, k, n);
                ga[i * m * k..(i + 1) * m * k].copy_from_slice(&gai);
                gb[i * k * n..(i + 1) * k * n].copy_from_slice(&gbi);
            }
            drop(ad);
            drop(bd);
            a.accum_grad(&ga);
            b.accum_grad(&gb);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

fn permuted_copy(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> (Vec<f64>, Vec<usize>) {
    let mut new_shape = shape.to_vec();
    new_shape.swap(ax0, ax1);
    let in_strides = contiguous_strides(shape);
    let out_strides = contiguous_strides(&new_shape);
    let numel = data.len();
    let mut out = vec![0.0; numel];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for &v in data.iter() {
        // position of idx in the output, with ax0/ax1 swapped
        let mut pos = 0usize;
        for ax in 0..rank {
            let out_ax = if ax == ax0 {
                ax1
            } else if ax == ax1 {
                ax0
            } else {
                ax
            };
            pos += idx[ax] * out_strides[out_ax];
        }
        out[pos] = v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let _ = in_strides;
    (out, new_shape)
}

/// Swap two axes (full copy).
pub fn transpose(a: &Tensor, ax0: usize, ax1: usize) -> Result<Tensor> {
    let shape = a.shape();
    if ax0 >= shape.len() || ax1 >= shape.len() {
        return Err(FuseError::shape(
            "transpose",
            format!("axes ({ax0},{ax1}) out of range for {:?}", shape),
        ));
    }
    let (data, new_shape) = permuted_copy(&a.data(), &shape, ax0, ax1);
    let out = Tensor::from_vec(data, &new_shape)?;
    if should_record(&[a]) {
        let a = a.clone();
        record(&out, move |g| {
            let (ga, _) = permuted_copy(g, &new_shape, ax0, ax1);
            a.accum_grad(&ga);
        });
    }
    Ok(out)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() {
        return Err(FuseError::shape(
            "reshape",
            format!("{:?} -> {:?}", a.shape(), shape),
        ));
    }
    let out = Tensor::from_vec(a.to_vec(), shape)?;
    if should_record(&[a]) {
        let a = a.clone();
        record(&out, move |g| a.accum_grad(g));
    }
    Ok(out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(FuseError::shape("concat", "no inputs"));
    }
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(FuseError::shape(
            "concat",
            format!("axis {axis} out of range for {:?}", first),
        ));
    }
    let mut out_shape = first.clone();
    out_shape[axis] = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(FuseError::shape(
                "concat",
                format!("incompatible shapes {:?} vs {:?} on axis {axis}", first, s),
            ));
        }
        out_shape[axis] += s[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_ax = out_shape[axis];
    let mut data = vec![0.0; outer * total_ax * inner];
    let mut offset = 0usize;
    for p in parts {
        let ax_len = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let src = &pd[o * ax_len * inner..(o + 1) * ax_len * inner];
            let dst_start = (o * total_ax + offset) * inner;
            data[dst_start..dst_start + ax_len * inner].copy_from_slice(src);
        }
        offset += ax_len;
    }
    let out = Tensor::from_vec(data, &out_shape)?;
    let inputs: Vec<&Tensor> = parts.to_vec();
    if should_record(&inputs) {
        let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        record(&out, move |g| {
            let mut offset = 0usize;
            for p in &parts {
                let ax_len = p.shape()[axis];
                let mut gp = vec![0.0; p.numel()];
                for o in 0..outer {
                    let src_start = (o * total_ax + offset) * inner;
                    gp[o * ax_len * inner..(o + 1) * ax_len * inner]
                        .copy_from_slice(&g[src_start..src_start + ax_len * inner]);
                }
                p.accum_grad(&gp);
                offset += ax_len;
            }
        });
    }
    Ok(out)
}

/// Contiguous range along one axis (copies).
pub fn slice(a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let shape = a.shape();
    if axis >= shape.len() || start > end || end > shape[axis] {
        return Err(FuseError::shape(
            "slice",
            format!("range {start}..{end} on axis {axis} of {:?}", shape),
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax_len = shape[axis];
    let new_len = end - start;
    let mut out_shape = shape.clone();
    out_shape[axis] = new_len;
    let mut data = vec![0.0; outer * new_len * inner];
    {
        let ad = a.data();
        for o in 0..outer {
            let src_start = (o * ax_len + start) * inner;
            data[o * new_len * inner..(o + 1) * new_len * inner]
                .copy_from_slice(&ad[src_start..src_start + new_len * inner]);
        }
    }
    let out = Tensor::from_vec(data, &out_shape)?;
    if should_record(&[a]) {
        let a = a.clone();
        record(&out, move |g| {
            let mut ga = vec![0.0; a.numel()];
            for o in 0..outer {
                let dst_start = (o * ax_len + start) * inner;
                ga[dst_start..dst_start + new_len * inner]
                    .copy_from_slice(&g[o * new_len * inner..(o + 1) * new_len * inner]);
            }
            a.accum_grad(&ga);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    let s: f64 = a.data().iter().sum();
    let out = Tensor::from_vec(vec![s], &[])?;
    if should_record(&[a]) {
        let a = a.clone();
        record(&out, move |g| {
            let ga = vec![g[0]; a.numel()];
            a.accum_grad(&ga);
        });
    }
    Ok(out)
}

fn reduce_axes(op: &'static str, a: &Tensor, axes: &[usize], keepdims: bool, mean: bool) -> Result<Tensor> {
    let shape = a.shape();
    for &ax in axes {
        if ax >= shape.len() {
            return Err(FuseError::shape(op, format!("axis {ax} out of range for {:?}", shape)));
        }
    }
    let reduced: Vec<bool> = (0..shape.len()).map(|i| axes.contains(&i)).collect();
    let out_shape_keep: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if reduced[i] { 1 } else { d })
        .collect();
    let out_shape: Vec<usize> = if keepdims {
        out_shape_keep.clone()
    } else {
        shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduced[*i])
            .map(|(_, &d)| d)
            .collect()
    };
    let count: usize = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| reduced[*i])
        .map(|(_, &d)| d)
        .product();
    let scale = if mean { 1.0 / count as f64 } else { 1.0 };

    let out_numel: usize = out_shape_keep.iter().product();
    let mut data = vec![0.0; out_numel];
    let out_strides = contiguous_strides(&out_shape_keep);
    let rank = shape.len();
    {
        let ad = a.data();
        let mut idx = vec![0usize; rank];
        let mut opos = 0usize;
        for &v in ad.iter() {
            data[opos] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if !reduced[ax] {
                    opos += out_strides[ax];
                }
                if idx[ax] < shape[ax] {
                    break;
                }
                if !reduced[ax] {
                    opos -= out_strides[ax] * shape[ax];
                }
                idx[ax] = 0;
            }
        }
    }
    if mean {
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
    let out = Tensor::from_vec(data, &out_shape)?;
    if should_record(&[a]) {
        let a = a.clone();
        let shape = shape.clone();
        let reduced = reduced.clone();
        record(&out, move |g| {
            let mut ga = vec![0.0; a.numel()];
            let out_strides = contiguous_strides(&out_shape_keep);
            let mut idx = vec![0usize; rank];
            let mut opos = 0usize;
            for gv in ga.iter_mut() {
                *gv = g[opos] * scale;
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if !reduced[ax] {
                        opos += out_strides[ax];
                    }
                    if idx[ax] < shape[ax] {
                        break;
                    }
                    if !reduced[ax] {
                        opos -= out_strides[ax] * shape[ax];
                    }
                    idx[ax] = 0;
                }
            }
            a.accum_grad(&ga);
        });
    }
    Ok(out)
}

pub fn sum_axes(a: &Tensor, axes: &[usize], keepdims: bool) -> Result<Tensor> {
    reduce_axes("sum_axes", a, axes, keepdims, false)
}

pub fn mean_axes(a: &Tensor, axes: &[usize], keepdims: bool) -> Result<Tensor> {
    reduce_axes("mean_axes", a, axes, keepdims, true)
}

pub fn mean_all(a: &Tensor) -> Result<Tensor> {
    let n = a.numel() as f64;
    mul_scalar(&sum_all(a)?, 1.0 / n)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Softmax over the last axis, computed with max-subtraction.
pub fn softmax_last(a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    if shape.is_empty() {
        return Err(FuseError::shape("softmax", "rank-0 input"));
    }
    let last = shape[shape.len() - 1];
    let rows = a.numel() / last;
    let mut data = vec![0.0; a.numel()];
    {
        let ad = a.data();
        for r in 0..rows {
            let row = &ad[r * last..(r + 1) * last];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut data[r * last..(r + 1) * last];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
    }
    let out = Tensor::from_vec(data, &shape)?;
    if should_record(&[a]) {
        let (a, o) = (a.clone(), out.clone());
        record(&out, move |g| {
            let od = o.data();
            let mut ga = vec![0.0; od.len()];
            for r in 0..rows {
                let yrow = &od[r * last..(r + 1) * last];
                let grow = &g[r * last..(r + 1) * last];
                let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                for i in 0..last {
                    ga[r * last + i] = yrow[i] * (grow[i] - dot);
                }
            }
            drop(od);
            a.accum_grad(&ga);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gather / scatter by row index
// ---------------------------------------------------------------------------

/// out[i, :] = table[ids[i], :]
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(FuseError::shape("gather_rows", format!("expected rank 2, got {:?}", shape)));
    }
    let (v, d) = (shape[0], shape[1]);
    for &id in ids {
        if id >= v {
            return Err(FuseError::IndexOutOfRange {
                op: "gather_rows".into(),
                index: id,
                limit: v,
            });
        }
    }
    let mut data = vec![0.0; ids.len() * d];
    {
        let td = table.data();
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
    }
    let out = Tensor::from_vec(data, &[ids.len(), d])?;
    if should_record(&[table]) {
        let table = table.clone();
        let ids = ids.to_vec();
        record(&out, move |g| {
            let mut gt = vec![0.0; table.numel()];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g[i * d + j];
                }
            }
            table.accum_grad(&gt);
        });
    }
    Ok(out)
}

/// out[ids[i], :] += src[i, :], out has `num_rows` rows.
pub fn scatter_rows(src: &Tensor, ids: &[usize], num_rows: usize) -> Result<Tensor> {
    let shape = src.shape();
    if shape.len() != 2 || shape[0] != ids.len() {
        return Err(FuseError::shape(
            "scatter_rows",
            format!("src {:?} vs {} ids", shape, ids.len()),
        ));
    }
    let d = shape[1];
    for &id in ids {
        if id >= num_rows {
            return Err(FuseError::IndexOutOfRange {
                op: "scatter_rows".into(),
                index: id,
                limit: num_rows,
            });
        }
    }
    let mut data = vec![0.0; num_rows * d];
    {
        let sd = src.data();
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..d {
                data[id * d + j] += sd[i * d + j];
            }
        }
    }
    let out = Tensor::from_vec(data, &[num_rows, d])?;
    if should_record(&[src]) {
        let src = src.clone();
        let ids = ids.to_vec();
        record(&out, move |g| {
            let mut gs = vec![0.0; src.numel()];
            for (i, &id) in ids.iter().enumerate() {
                gs[i * d..(i + 1) * d].copy_from_slice(&g[id * d..(id + 1) * d]);
            }
            src.accum_grad(&gs);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Matmul FLOP accounting (cost-estimator oracle)
// ---------------------------------------------------------------------------

use std::cell::Cell;

thread_local! {
    static MATMUL_FLOPS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
fn count_matmul_flops(n: usize) {
    MATMUL_FLOPS.with(|c| c.set(c.get() + n as u64));
}

/// Reset the thread-local matmul FLOP counter (2*m*k*n per matmul).
pub fn reset_matmul_flops() {
    MATMUL_FLOPS.with(|c| c.set(0));
}

pub fn matmul_flops() -> u64 {
    MATMUL_FLOPS.with(|c| c.get())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let a = Tensor::from_vec(vec![3.0, -1.0, 2.5, 7.0], &[2, 2]).unwrap();
        let c = matmul(&i2, &a).unwrap();
        assert_eq!(c.to_vec(), a.to_vec());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::zeros(&[4]);
        let y = softmax_last(&x).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0], &[2, 3]).unwrap();
        let y = softmax_last(&x).unwrap();
        let yd = y.to_vec();
        for r in 0..2 {
            let s: f64 = yd[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(yd[r * 3..(r + 1) * 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn concat_axis0() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![3.0], &[1]).unwrap();
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn reshape_transpose_roundtrip_bit_exact() {
        let x = Tensor::from_vec((0..24).map(|i| i as f64 * 0.37).collect(), &[2, 3, 4]).unwrap();
        let t = transpose(&x, 0, 2).unwrap();
        let back = transpose(&t, 0, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        let r = reshape(&x, &[4, 6]).unwrap();
        let rb = reshape(&r, &[2, 3, 4]).unwrap();
        assert_eq!(rb.to_vec(), x.to_vec());
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("matmul"));
        assert!(msg.contains("[2, 3]"));
    }

    #[test]
    fn broadcast_add_bias() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![10.0, 20.0], &[2]).unwrap();
        let y = add(&x, &b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn broadcast_backward_reduces() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::param(vec![10.0, 20.0], &[2]).unwrap();
        let _g = crate::tensor::start_graph();
        let y = mul(&x, &b).unwrap();
        let loss = sum_all(&y).unwrap();
        crate::tensor::backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![10.0, 20.0, 10.0, 20.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0 + 3.0, 2.0 + 4.0]);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let table = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let g = gather_rows(&table, &[2, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![5.0, 6.0, 1.0, 2.0]);
        let s = scatter_rows(&g, &[2, 0], 3).unwrap();
        assert_eq!(s.to_vec(), vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    }
}
