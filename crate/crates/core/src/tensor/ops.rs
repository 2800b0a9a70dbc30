use rand::Rng as _;

use super::gemm;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddTrailing { a: Var, b: Var },
    Relu { a: Var },
    Reglu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Dropout { a: Var, keep: Vec<bool>, scale: f64 },
    Attention(Box<super::attention::AttentionState>),
    Embedding { table: Var, idx: Vec<usize> },
    TokenScale { x: Var, w: Var },
    Concat { parts: Vec<Var>, widths: Vec<usize>, outer: usize, inner: usize },
    PrependRow { x: Var, row: Var },
    SwapAxes12 { a: Var, dims: [usize; 4] },
    Reshape { a: Var },
    Narrow { a: Var, start: usize, len: usize },
    Sum { a: Var },
    Mean { a: Var },
    Mse { pred: Var, target: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: Var, labels: Vec<f64> },
}

/// Batch statistics observed by a training-mode BatchNorm, used by the caller
/// to update running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance; equals the biased one for a single row.
    pub var: Vec<f64>,
}

fn last_dim(shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| Error::shape("operation needs at least one axis"))
}

fn rows_of(shape: &[usize], last: usize) -> usize {
    shape.iter().product::<usize>().checked_div(last).unwrap_or(0)
}

impl<'a> Tape<'a> {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = last_dim(&sa)?;
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let n = sb[1];
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b }, rg))
    }

    /// `x · w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_trailing(y, b),
            None => Ok(y),
        }
    }

    /// Batched matmul: `a[g, m, k] · b[g, k, n]`, or `b[g, n, k]ᵀ` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(format!("bmm inner dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            self.exec.for_each_chunk_mut(&mut out, m * n, |i, c| {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    c,
                    false,
                )
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, rg)
    }

    /// Add `b` broadcast over the leading axes of `a`; `b`'s shape must equal
    /// a suffix of `a`'s shape.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add_trailing {sa:?} + {sb:?}")));
        }
        let bv = self.value(b);
        let inner = bv.len();
        let mut out = self.value(a).to_vec();
        if inner > 0 {
            for chunk in out.chunks_mut(inner) {
                chunk.iter_mut().zip(bv).for_each(|(x, y)| *x += y);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddTrailing { a, b }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Relu { a }, rg)
    }

    /// `first_half ⊙ relu(second_half)` over the last axis.
    pub fn reglu(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = last_dim(&shape)?;
        if d % 2 != 0 {
            return Err(Error::shape(format!("reglu needs an even last axis, got {shape:?}")));
        }
        let h = d / 2;
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len() / 2);
        if d > 0 {
            for row in x.chunks(d) {
                let (g, v) = row.split_at(h);
                out.extend(g.iter().zip(v).map(|(g, v)| g * v.max(0.0)));
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = h;
        let rg = self.rg(&[a]);
        Ok(self.push(oshape, out, Op::Reglu { a }, rg))
    }

    /// Softmax over the last axis, shifted by the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = last_dim(&shape)?;
        let mut out = self.value(a).to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax { a }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape)?;
        if d == 0 {
            return Err(Error::shape("layer_norm over zero-length rows"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm affine params must have length {d}"
            )));
        }
        let rows = rows_of(&shape, d);
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// BatchNorm over rows of `x[n, c]`.
    ///
    /// In training mode batch statistics normalize the input and are returned
    /// for the running-estimate update; in evaluation mode the supplied running
    /// mean and variance are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        training: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("batch_norm expects [n, c], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm affine params length"));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm running stats length"));
        }
        if training && n == 0 {
            return Err(Error::shape("batch_norm training on an empty batch"));
        }
        let xv = self.value(x);
        let (mean, var_b, stats) = if training {
            let mut mean = vec![0.0; c];
            for row in xv.chunks(c) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for row in xv.chunks(c) {
                for j in 0..c {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
            let unbiased: Vec<f64> = if n > 1 {
                var.iter().map(|v| v / (n - 1) as f64).collect()
            } else {
                vec![0.0; c]
            };
            var.iter_mut().for_each(|v| *v /= n as f64);
            let stats = BatchNormStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (running_mean.to_vec(), running_var.to_vec(), None)
        };
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (h, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let j = i % c;
            *h = (v - mean[j]) * inv_std[j];
            *o = *h * gv[j] + bv[j];
        }
        let rg = self.rg(&[x, gamma, beta]);
        let var = self.push(
            shape,
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training },
            rg,
        );
        Ok((var, stats))
    }

    /// Inverted dropout. Identity (the same handle) when not training or when
    /// `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - rate);
        let keep = dropout_mask(self.value(a).len(), rate, rng);
        let out = self
            .value(a)
            .iter()
            .zip(&keep)
            .map(|(x, &k)| if k { x * scale } else { 0.0 })
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout { a, keep, scale }, rg))
    }

    /// Row lookup: `table[s, d]`, indices `[n]` -> `[n, d]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape(format!("embedding table must be 2-D, got {st:?}")));
        }
        let (s, d) = (st[0], st[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= s {
                return Err(Error::Data(format!("category index {i} out of range [0, {s})")));
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![idx.len(), d],
            out,
            Op::Embedding { table, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Per-feature scaling: `x[b, k]`, `w[k, d]` -> `out[b, j, :] = x[b, j] * w[j, :]`.
    pub fn token_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape(format!("token_scale {sx:?} with {sw:?}")));
        }
        let (b, k, d) = (sx[0], sx[1], sw[1]);
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; b * k * d];
        for bi in 0..b {
            for j in 0..k {
                let s = xv[bi * k + j];
                let o = &mut out[(bi * k + j) * d..(bi * k + j + 1) * d];
                o.iter_mut().zip(&wv[j * d..(j + 1) * d]).for_each(|(o, w)| *o = s * w);
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(vec![b, k, d], out, Op::TokenScale { x, w }, rg))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(format!("concat {first:?} with {s:?}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                out.extend_from_slice(&v[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat { parts: parts.to_vec(), widths, outer, inner },
            rg,
        ))
    }

    /// Prepend a shared row: `x[b, k, d]`, `row[d]` -> `[b, k + 1, d]`.
    pub fn prepend_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        if sx.len() != 3 || sr != [sx[2]] {
            return Err(Error::shape(format!("prepend_row {sx:?} with {sr:?}")));
        }
        let (b, k, d) = (sx[0], sx[1], sx[2]);
        let (xv, rv) = (self.value(x), self.value(row));
        let mut out = Vec::with_capacity(b * (k + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(rv);
            out.extend_from_slice(&xv[bi * k * d..(bi + 1) * k * d]);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(vec![b, k + 1, d], out, Op::PrependRow { x, row }, rg))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("swap_axes12 expects 4-D, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(a), dims);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[0], s[2], s[1], s[3]], out, Op::SwapAxes12 { a, dims }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Reshape { a }, rg))
    }

    /// Slice `len` entries starting at `start` along axis 1 of a 3-D value.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || start + len > s[1] {
            return Err(Error::shape(format!("narrow {start}+{len} of {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let av = self.value(a);
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            out.extend_from_slice(&av[(bi * t + start) * d..(bi * t + start + len) * d]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![b, len, d], out, Op::Narrow { a, start, len }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean { a }, rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.is_empty() {
            return Err(Error::shape(format!(
                "mse: {} predictions vs {} targets",
                pv.len(),
                target.len()
            )));
        }
        let l = pv.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pv.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(Vec::new(), vec![l], Op::Mse { pred, target: target.to_vec() }, rg))
    }

    /// Mean cross-entropy of `logits[n, c]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            if y >= c {
                return Err(Error::Data(format!("label {y} out of range for {c} classes")));
            }
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Mean binary cross-entropy on raw logits against {0, 1} labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() || z.is_empty() {
            return Err(Error::shape("bce_with_logits: length mismatch"));
        }
        let loss = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::BceLogits { logits, labels: labels.to_vec() },
            rg,
        ))
    }
}

/// Bernoulli keep-mask with drop probability `rate`.
pub(crate) fn dropout_mask(n: usize, rate: f64, rng: &mut Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() >= rate).collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn swap12(v: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&v[src..src + d]);
            }
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Op {
    /// Propagate `g` (the gradient of node `i`) into its inputs.
    pub(crate) fn backward(&self, tape: &Tape<'_>, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = &tape.nodes[i].shape;
        let out_val: &[f64] = &tape.nodes[i].value;
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = tape.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let sa = tape.shape(*a);
                let m: usize = sa[..sa.len() - 1].iter().product();
                if let Some(da) = tape.grad_slot(grads, *a) {
                    gemm(m, n, k, g, false, tape.value(*b), true, da, true);
                }
                if let Some(db) = tape.grad_slot(grads, *b) {
                    gemm(k, m, n, tape.value(*a), true, g, false, db, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = tape.shape(*a);
                let (m, k) = (sa[1], sa[2]);
                let n = out_shape[2];
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let exec = tape.exec;
                if let Some(da) = tape.grad_slot(grads, *a) {
                    exec.for_each_chunk_mut(da, m * k, |gi, da| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bv[gi * k * n..(gi + 1) * k * n];
                        // da = g · bᵀ (b stored k×n) or g · b (b stored n×k)
                        gemm(m, n, k, gg, false, bb, !*trans_b, da, true);
                    });
                }
                if let Some(db) = tape.grad_slot(grads, *b) {
                    exec.for_each_chunk_mut(db, k * n, |gi, db| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let aa = &av[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            gemm(n, m, k, gg, true, aa, false, db, true);
                        } else {
                            gemm(k, m, n, aa, true, gg, false, db, true);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = tape.grad_slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    let bv = tape.value(*b);
                    da.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, b))| *d += g * b);
                }
                if let Some(db) = tape.grad_slot(grads, *b) {
                    let av = tape.value(*a);
                    db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, a))| *d += g * a);
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::AddTrailing { a, b } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = tape.grad_slot(grads, *b) {
                    let inner = db.len();
                    if inner > 0 {
                        for chunk in g.chunks(inner) {
                            add_into(db, chunk);
                        }
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    let av = tape.value(*a);
                    for ((d, g), x) in da.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Reglu { a } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    let av = tape.value(*a);
                    let d = *tape.shape(*a).last().unwrap();
                    let h = d / 2;
                    if h > 0 {
                        for ((drow, xrow), grow) in da.chunks_mut(d).zip(av.chunks(d)).zip(g.chunks(h)) {
                            for j in 0..h {
                                let (gate, val) = (xrow[j], xrow[h + j]);
                                if val > 0.0 {
                                    drow[j] += grow[j] * val;
                                    drow[h + j] += grow[j] * gate;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    let d = *out_shape.last().unwrap();
                    if d > 0 {
                        for ((drow, yrow), grow) in da.chunks_mut(d).zip(out_val.chunks(d)).zip(g.chunks(d)) {
                            let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                            for j in 0..d {
                                drow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *out_shape.last().unwrap();
                if let Some(dg) = tape.grad_slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        dg.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(a, (g, h))| *a += g * h);
                    }
                }
                if let Some(db) = tape.grad_slot(grads, *beta) {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                }
                let gv = tape.value(*gamma).to_vec();
                if let Some(dx) = tape.grad_slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, ((dxrow, grow), hrow)) in
                        dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dxrow[j] += inv_std[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let c = out_shape[1];
                let n = out_shape[0];
                if c == 0 {
                    return;
                }
                if let Some(dg) = tape.grad_slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        dg.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(a, (g, h))| *a += g * h);
                    }
                }
                if let Some(db) = tape.grad_slot(grads, *beta) {
                    for grow in g.chunks(c) {
                        add_into(db, grow);
                    }
                }
                let gv = tape.value(*gamma).to_vec();
                if let Some(dx) = tape.grad_slot(grads, *x) {
                    if *training {
                        let mut m1 = vec![0.0; c];
                        let mut m2 = vec![0.0; c];
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let dh = grow[j] * gv[j];
                                m1[j] += dh;
                                m2[j] += dh * hrow[j];
                            }
                        }
                        for j in 0..c {
                            m1[j] /= n as f64;
                            m2[j] /= n as f64;
                        }
                        for ((dxrow, grow), hrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let dh = grow[j] * gv[j];
                                dxrow[j] += inv_std[j] * (dh - m1[j] - hrow[j] * m2[j]);
                            }
                        }
                    } else {
                        for (dxrow, grow) in dx.chunks_mut(c).zip(g.chunks(c)) {
                            for j in 0..c {
                                dxrow[j] += grow[j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, keep, scale } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    da.iter_mut().zip(g.iter().zip(keep)).for_each(|(d, (g, &k))| {
                        if k {
                            *d += g * scale
                        }
                    });
                }
            }
            Op::Attention(state) => state.backward(tape, g, grads),
            Op::Embedding { table, idx } => {
                if let Some(dt) = tape.grad_slot(grads, *table) {
                    let d = out_shape[1];
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::TokenScale { x, w } => {
                let (b, k, d) = (out_shape[0], out_shape[1], out_shape[2]);
                let (xv, wv) = (tape.value(*x), tape.value(*w));
                if let Some(dx) = tape.grad_slot(grads, *x) {
                    for bi in 0..b {
                        for j in 0..k {
                            let gg = &g[(bi * k + j) * d..(bi * k + j + 1) * d];
                            dx[bi * k + j] += gg.iter().zip(&wv[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(dw) = tape.grad_slot(grads, *w) {
                    for bi in 0..b {
                        for j in 0..k {
                            let s = xv[bi * k + j];
                            let gg = &g[(bi * k + j) * d..(bi * k + j + 1) * d];
                            dw[j * d..(j + 1) * d].iter_mut().zip(gg).for_each(|(a, g)| *a += s * g);
                        }
                    }
                }
            }
            Op::Concat { parts, widths, outer, inner } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(dp) = tape.grad_slot(grads, p) {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut dp[o * w * inner..(o + 1) * w * inner], &g[src..src + w * inner]);
                        }
                    }
                    offset += w;
                }
            }
            Op::PrependRow { x, row } => {
                let (b, t, d) = (out_shape[0], out_shape[1], out_shape[2]);
                if let Some(dr) = tape.grad_slot(grads, *row) {
                    for bi in 0..b {
                        add_into(dr, &g[bi * t * d..bi * t * d + d]);
                    }
                }
                if let Some(dx) = tape.grad_slot(grads, *x) {
                    let k = t - 1;
                    for bi in 0..b {
                        add_into(&mut dx[bi * k * d..(bi + 1) * k * d], &g[(bi * t + 1) * d..(bi + 1) * t * d]);
                    }
                }
            }
            Op::SwapAxes12 { a, dims } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    add_into(da, &back);
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    add_into(da, g);
                }
            }
            Op::Narrow { a, start, len } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    let s = tape.shape(*a);
                    let (b, t, d) = (s[0], s[1], s[2]);
                    for bi in 0..b {
                        add_into(
                            &mut da[(bi * t + start) * d..(bi * t + start + len) * d],
                            &g[bi * len * d..(bi + 1) * len * d],
                        );
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(da) = tape.grad_slot(grads, *a) {
                    let n = da.len().max(1) as f64;
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Mse { pred, target } => {
                if let Some(dp) = tape.grad_slot(grads, *pred) {
                    let pv = tape.value(*pred);
                    let n = pv.len() as f64;
                    for ((d, p), t) in dp.iter_mut().zip(pv).zip(target) {
                        *d += g[0] * 2.0 * (p - t) / n;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(dl) = tape.grad_slot(grads, *logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += g[0] * (probs[r * c + j] - onehot) / n as f64;
                        }
                    }
                }
            }
            Op::BceLogits { logits, labels } => {
                if let Some(dl) = tape.grad_slot(grads, *logits) {
                    let zv = tape.value(*logits);
                    let n = zv.len() as f64;
                    for ((d, &z), &y) in dl.iter_mut().zip(zv).zip(labels) {
                        *d += g[0] * (sigmoid(z) - y) / n;
                    }
                }
            }
        }
    }
}
