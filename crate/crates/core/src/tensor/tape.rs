use super::gemm::{gemm, MatRef};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    SumAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Expand(Var),
    GatherRows { x: Var, index: Vec<Vec<usize>> },
    ScatterRows { x: Var, index: Vec<Vec<usize>> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Records primitive operations in topological order.
///
/// Nodes are appended as operations execute, so every node follows the nodes
/// it reads. Leaves registered with `requires_grad` receive gradients from
/// [`Tape::backward`], which consumes the recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Adds the gradient for `v` (if any) into `target`'s grad buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if let Some(g) = self.raw(v) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

/// Shape of an elementwise result; the shorter operand must be a suffix of
/// the longer one (broadcast over leading extents only).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = src[rank - 1];
    for _ in 0..data.len() / inner {
        for j in 0..inner {
            out.push(data[offset + j * inner_stride]);
        }
        // advance the outer counters
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            offset += src[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= src[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out, out_shape)
}

/// (outer, len, inner) split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn ensure_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Autodiff(
                "tape already consumed by backward; higher-order gradients are unsupported".into(),
            ))
        } else {
            Ok(())
        }
    }

    /// Registers a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers a leaf that always receives gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Const, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::invalid(format!("item() on shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.ensure_live()?;
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let (la, lb) = (va.len(), vb.len());
        let n = numel(&shape);
        let out: Vec<f64> = if la == n && lb == n {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(va[i % la], vb[i % lb])).collect()
        };
        check_finite(name, &out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.ensure_live()?;
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        check_finite(name, &out)?;
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, op, tracked))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt of negative value".into()));
        }
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `a[..., k] @ w[k, n]`; every leading extent of `a` is treated as a row.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        self.ensure_live()?;
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sw.len() != 2 || sa.last() != Some(&sw[0]) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(sa) / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(w), k, n),
            &mut out,
            0.0,
        );
        check_finite("matmul", &out)?;
        let tracked = self.tracked(&[a, w]);
        Ok(self.push(shape, out, Op::MatMul(a, w), tracked))
    }

    /// `a[..., m, k] @ b[..., k, n]` with identical leading extents.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] || sa[ra - 1] != sb[ra - 2] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[ra - 1]);
        let batch = numel(&sa[..ra - 2]);
        let mut shape = sa.to_vec();
        shape[ra - 1] = n;
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                MatRef::new(&va[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&vb[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        check_finite("bmm", &out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::BatchMatMul(a, b), tracked))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: shape.to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let (out, out_shape) = permute_data(self.value(x), shape, perm);
        let tracked = self.tracked(&[x]);
        Ok(self.push(out_shape, out, Op::Permute(x, perm.to_vec()), tracked))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), tracked))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = self.tracked(xs);
        Ok(self.push(shape, out, Op::Concat(xs.to_vec(), axis), tracked))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) of axis {axis} in shape {s:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, tracked))
    }

    /// Sums out `axis`, removing it from the shape (rank-1 input gives `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid(format!("sum axis {axis} of shape {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &v[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, r) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += r;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::SumAxis(x, axis), tracked))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        let total: f64 = self.value(x).iter().sum();
        check_finite("sum", &[total])?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![1], vec![total], Op::SumAll(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        check_finite("mean", &[m])?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![1], vec![m], Op::MeanAll(x), tracked))
    }

    fn last_axis_rows(&self, x: Var) -> (usize, usize) {
        let s = self.shape(x);
        let d = *s.last().unwrap();
        (self.value(x).len() / d, d)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        let (rows, d) = self.last_axis_rows(x);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * d..(r + 1) * d];
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - mx).exp();
                z += *oi;
            }
            o.iter_mut().for_each(|oi| *oi /= z);
        }
        check_finite("softmax", &out)?;
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::Softmax(x), tracked))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        let (rows, d) = self.last_axis_rows(x);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&xi| (xi - mx).exp()).sum::<f64>().ln();
            for (oi, &xi) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *oi = xi - lse;
            }
        }
        check_finite("log_softmax", &out)?;
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::LogSoftmax(x), tracked))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.ensure_live()?;
        let (rows, d) = self.last_axis_rows(x);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&xi| (xi - mu) * (xi - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (oi, &xi) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *oi = (xi - mu) * rs;
            }
            rstd.push(rs);
        }
        check_finite("layer_norm", &out)?;
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::LayerNorm { x, rstd }, tracked))
    }

    /// Repeats `x` over new leading extents: result shape is `lead ++ shape(x)`.
    pub fn expand(&mut self, x: Var, lead: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let reps = numel(lead);
        if reps == 0 {
            return Err(Error::invalid("expand to zero extent"));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len() * reps);
        for _ in 0..reps {
            out.extend_from_slice(v);
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape(x));
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::Expand(x), tracked))
    }

    fn check_rows_index(
        &self,
        x: Var,
        index: &[Vec<usize>],
        rows: usize,
    ) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 || index.len() != s[0] {
            return Err(Error::invalid(format!(
                "row index for {} batches applied to shape {s:?}",
                index.len()
            )));
        }
        let width = index.first().map_or(0, Vec::len);
        if width == 0
            || index
                .iter()
                .any(|ix| ix.len() != width || ix.iter().any(|&i| i >= rows))
        {
            return Err(Error::invalid("ragged, empty or out-of-range row index"));
        }
        Ok((s[0], s[2]))
    }

    /// Selects rows along axis 1 per batch: `[B, T, D] -> [B, V, D]`.
    pub fn gather_rows(&mut self, x: Var, index: &[Vec<usize>]) -> Result<Var> {
        self.ensure_live()?;
        let t = self.shape(x).get(1).copied().unwrap_or(0);
        let (b, d) = self.check_rows_index(x, index, t)?;
        let v = self.value(x);
        let width = index[0].len();
        let mut out = Vec::with_capacity(b * width * d);
        for (bi, ix) in index.iter().enumerate() {
            for &i in ix {
                let base = (bi * t + i) * d;
                out.extend_from_slice(&v[base..base + d]);
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            vec![b, width, d],
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    /// Places rows of `[B, V, D]` at `index` positions of a zero `[B, rows, D]`.
    pub fn scatter_rows(&mut self, x: Var, index: &[Vec<usize>], rows: usize) -> Result<Var> {
        self.ensure_live()?;
        let (b, d) = self.check_rows_index(x, index, rows)?;
        if index.iter().any(|ix| {
            let mut seen = vec![false; rows];
            ix.iter().any(|&i| std::mem::replace(&mut seen[i], true))
        }) {
            return Err(Error::invalid("scatter index has duplicates"));
        }
        let v = self.value(x);
        let width = index[0].len();
        let mut out = vec![0.0; b * rows * d];
        for (bi, ix) in index.iter().enumerate() {
            for (j, &i) in ix.iter().enumerate() {
                let src = (bi * width + j) * d;
                let dst = (bi * rows + i) * d;
                out[dst..dst + d].copy_from_slice(&v[src..src + d]);
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            vec![b, rows, d],
            out,
            Op::ScatterRows {
                x,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse sweep from a scalar `loss`. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.ensure_live()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                grads[i] = None;
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a full-shape gradient down to an operand broadcast over leading extents.
    fn reduce_to(&self, g: &[f64], target: Var, scale: impl Fn(usize) -> f64) -> Vec<f64> {
        let len = self.value(target).len();
        if len == g.len() {
            return g.iter().enumerate().map(|(i, &gi)| gi * scale(i)).collect();
        }
        let mut out = vec![0.0; len];
        for (i, &gi) in g.iter().enumerate() {
            out[i % len] += gi * scale(i);
        }
        out
    }

    fn propagate(&self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                let ga = self.reduce_to(&g, *a, |_| 1.0);
                let gb = self.reduce_to(&g, *b, |_| 1.0);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(&g, *a, |_| 1.0);
                let gb = self.reduce_to(&g, *b, |_| -1.0);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (la, lb) = (va.len(), vb.len());
                if self.nodes[a.0].tracked {
                    let ga = self.reduce_to(&g, *a, |k| vb[k % lb]);
                    self.acc(grads, *a, ga);
                }
                if self.nodes[b.0].tracked {
                    let gb = self.reduce_to(&g, *b, |k| va[k % la]);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, g.iter().map(|v| v * s).collect());
            }
            Op::AddScalar(x) => self.acc(grads, *x, g),
            Op::MatMul(a, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = g.len() / n;
                if self.nodes[a.0].tracked {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        MatRef::new(&g, m, n),
                        MatRef::new(self.value(*w), k, n).t(),
                        &mut ga,
                        0.0,
                    );
                    self.acc(grads, *a, ga);
                }
                if self.nodes[w.0].tracked {
                    let mut gw = vec![0.0; k * n];
                    gemm(
                        MatRef::new(self.value(*a), m, k).t(),
                        MatRef::new(&g, m, n),
                        &mut gw,
                        0.0,
                    );
                    self.acc(grads, *w, gw);
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = self.shape(*b)[r - 1];
                let batch = numel(&sa[..r - 2]);
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        gemm(
                            MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            MatRef::new(&vb[bi * k * n..(bi + 1) * k * n], k, n).t(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            0.0,
                        );
                    }
                    self.acc(grads, *a, ga);
                }
                if self.nodes[b.0].tracked {
                    let mut gb = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        gemm(
                            MatRef::new(&va[bi * m * k..(bi + 1) * m * k], m, k).t(),
                            MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            0.0,
                        );
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (gx, _) = permute_data(&g, &node.shape, &inv);
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => self.acc(grads, *x, g),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.nodes[x.0].tracked {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(grads, x, gx);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = split_axis(sx, *axis);
                let len = node.shape[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Sqrt(x) => {
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect(),
                );
            }
            Op::Exp(x) => {
                self.acc(grads, *x, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Log(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, g.iter().zip(vx).map(|(g, x)| g / x).collect());
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(vx).map(|(g, &x)| g * gelu_grad(x)).collect(),
                );
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let d = *node.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let total: f64 = gr.iter().sum();
                    for j in 0..d {
                        gx[r * d + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm { x, rstd } => {
                let d = *node.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rs * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Expand(x) => {
                let gx = self.reduce_to(&g, *x, |_| 1.0);
                self.acc(grads, *x, gx);
            }
            Op::GatherRows { x, index } => {
                let sx = self.shape(*x);
                let (t, d) = (sx[1], sx[2]);
                let width = index[0].len();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (bi, ix) in index.iter().enumerate() {
                    for (j, &row) in ix.iter().enumerate() {
                        let src = (bi * width + j) * d;
                        let dst = (bi * t + row) * d;
                        for c in 0..d {
                            gx[dst + c] += g[src + c];
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ScatterRows { x, index } => {
                let rows = node.shape[1];
                let d = node.shape[2];
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for (bi, ix) in index.iter().enumerate() {
                    for &row in ix {
                        let src = (bi * rows + row) * d;
                        gx.extend_from_slice(&g[src..src + d]);
                    }
                }
                self.acc(grads, *x, gx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mul_by_binary_mask() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.constant(t(&[3], &[0.0, 1.0, 0.0]));
        let y = tape.mul(a, m).unwrap();
        assert_eq!(tape.value(y), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor::eye(3));
        let a = Tensor::from_fn(vec![3, 4], |i| i as f64 - 5.5);
        let av = tape.constant(a.clone());
        let y = tape.matmul(i3, av).unwrap();
        assert_eq!(tape.value(y), a.data());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.raw(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_no_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.raw(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(tape.backward(x).is_err());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(loss), Err(Error::Autodiff(_))));
    }

    #[test]
    fn gradients_accumulate_over_paths() {
        // loss = sum(x) + sum(x * x) => grad = 1 + 2x
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -1.0, 0.5]).with_requires_grad(true));
        let s1 = tape.sum(x).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.raw(x).unwrap(), &[3.0, -1.0, 2.0]);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        let v = tape.value(y);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(v[c * 6 + a * 3 + b], (a * 12 + b * 4 + c) as f64);
                }
            }
        }
    }

    #[test]
    fn gather_then_scatter_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 4, 3], |i| i as f64));
        let idx = vec![vec![0, 2], vec![3, 1]];
        let g = tape.gather_rows(x, &idx).unwrap();
        let s = tape.scatter_rows(g, &idx, 4).unwrap();
        let v = tape.value(s).to_vec();
        let orig = tape.value(x).to_vec();
        for b in 0..2 {
            for r in 0..4 {
                for c in 0..3 {
                    let k = (b * 4 + r) * 3 + c;
                    let want = if idx[b].contains(&r) { orig[k] } else { 0.0 };
                    assert_eq!(v[k], want);
                }
            }
        }
    }

    #[test]
    fn suffix_broadcast_only() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3, 4]));
        let bias = tape.constant(Tensor::full(vec![4], 1.0));
        let y = tape.add(a, bias).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 4]);
        let bad = tape.constant(Tensor::zeros(vec![3, 1]));
        assert!(tape.add(a, bad).is_err());
    }
}
