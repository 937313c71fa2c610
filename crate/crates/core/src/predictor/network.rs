//! Forward and backward passes of the reference backbone.
//!
//! Activations are stored channel-major (`c * L + s`). Backward passes write
//! into a [`Params`]-shaped gradient buffer and accumulate, so a mini-batch is
//! reduced by calling `backward` once per example in a fixed order.

use serde::{Deserialize, Serialize};

use super::{idx, Architecture, Params, Predictor};
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Matrix};

/// Pooled backbone features of the memory items an example's window needs.
///
/// Slot `j` holds the pooled feature of time `t - L - R + 1 + j`; slots before
/// the start of the stream are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryContext {
    pub pooled: Vec<f64>,
    pub present: Vec<bool>,
}

impl MemoryContext {
    pub fn empty(arch: &Architecture) -> Self {
        let slots = arch.context_slots();
        Self {
            pooled: vec![0.0; slots * arch.backbone_width()],
            present: vec![false; slots],
        }
    }
}

/// One supervised training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Timestamp of the source sample (ordering key for sequence losses).
    pub t: usize,
    /// Normalized input window, `F x L`.
    pub window: Matrix,
    pub context: MemoryContext,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FrontCache {
    x: Vec<f64>,
    z: Vec<f64>,
    items_pre: Vec<f64>,
    pooled_ctx: Vec<f64>,
    present: Vec<bool>,
    counts: Vec<usize>,
    mbar: Vec<f64>,
    g: Vec<f64>,
    pub zt: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    input: Vec<f64>,
    s_a1: Vec<f64>,
    s_a2: Vec<f64>,
    l_a1: Vec<f64>,
    l_a2: Vec<f64>,
    /// Concatenated branch outputs, `2C x L`.
    pub h: Vec<f64>,
    pub pooled: Vec<f64>,
    f_pre: Vec<f64>,
    /// Head input.
    pub fused: Vec<f64>,
    pub yhat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainCache {
    pub front: FrontCache,
    pub back: BackboneCache,
}

impl TrainCache {
    /// Sign pattern of every ReLU pre-activation in the pass. Two passes with
    /// the same pattern lie on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let b = &self.back;
        [&b.s_a1, &b.s_a2, &b.l_a1, &b.l_a2, &b.f_pre, &self.front.items_pre]
            .into_iter()
            .flat_map(|v| v.iter().map(|&x| x > 0.0))
            .collect()
    }
}

/// Output of [`Predictor::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub h: Matrix,
    pub pooled: Vec<f64>,
    pub yhat: Vec<f64>,
}

/// 1-D convolution over time with zero 'same' padding, no activation.
///
/// `input` is `cin x len`, `w` is `cout x cin x k`; returns `cout x len`.
pub fn conv1d_same(input: &[f64], w: &[f64], b: &[f64], cin: usize, k: usize, len: usize) -> Vec<f64> {
    let cout = b.len();
    let mut out = vec![0.0; cout * len];
    conv_forward(input, w, b, cin, cout, k, len, &mut out);
    out
}

/// Unrolls a `cin x len` input into `(cin * k) x len` rows of shifted copies
/// (zero outside the sequence), so a same-padded convolution becomes a
/// matrix product.
fn im2col(input: &[f64], cin: usize, k: usize, len: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut cols = vec![0.0; cin * k * len];
    for i in 0..cin {
        let irow = &input[i * len..(i + 1) * len];
        for j in 0..k {
            let row = &mut cols[(i * k + j) * len..(i * k + j + 1) * len];
            // row[s] = irow[s + j - pad]
            let lo = pad.saturating_sub(j);
            let hi = (len + pad).saturating_sub(j).min(len);
            if lo < hi {
                row[lo..hi].copy_from_slice(&irow[lo + j - pad..hi + j - pad]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], cin: usize, k: usize, len: usize, out: &mut [f64]) {
    let pad = k / 2;
    for i in 0..cin {
        for j in 0..k {
            let row = &cols[(i * k + j) * len..(i * k + j + 1) * len];
            let lo = pad.saturating_sub(j);
            let hi = (len + pad).saturating_sub(j).min(len);
            if lo < hi {
                let dst = &mut out[i * len + lo + j - pad..i * len + hi + j - pad];
                for (d, &g) in dst.iter_mut().zip(&row[lo..hi]) {
                    *d += g;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(input: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, k: usize, len: usize, out: &mut [f64]) {
    let cols = im2col(input, cin, k, len);
    let width = cin * k;
    for (o, orow) in out[..cout * len].chunks_exact_mut(len).enumerate() {
        orow.fill(b[o]);
    }
    // Four output channels share each pass over an input row. Every output
    // still accumulates its terms in the same order.
    let mut o = 0;
    while o + 4 <= cout {
        let (r0, rest) = out[o * len..(o + 4) * len].split_at_mut(len);
        let (r1, rest) = rest.split_at_mut(len);
        let (r2, r3) = rest.split_at_mut(len);
        let ws = [&w[o * width..], &w[(o + 1) * width..], &w[(o + 2) * width..], &w[(o + 3) * width..]];
        for (r, x) in cols.chunks_exact(len).enumerate() {
            let (w0, w1, w2, w3) = (ws[0][r], ws[1][r], ws[2][r], ws[3][r]);
            for s in 0..len {
                r0[s] += w0 * x[s];
                r1[s] += w1 * x[s];
                r2[s] += w2 * x[s];
                r3[s] += w3 * x[s];
            }
        }
        o += 4;
    }
    for o in o..cout {
        let orow = &mut out[o * len..(o + 1) * len];
        for (r, &wv) in w[o * width..(o + 1) * width].iter().enumerate() {
            for (dst, &x) in orow.iter_mut().zip(&cols[r * len..(r + 1) * len]) {
                *dst += wv * x;
            }
        }
    }
}

/// Accumulates `dw`, `db` and (optionally) `din` for a same-padded convolution.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    w: &[f64],
    dout: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    len: usize,
    dw: &mut [f64],
    db: &mut [f64],
    din: Option<&mut [f64]>,
) {
    let cols = im2col(input, cin, k, len);
    let width = cin * k;
    let mut dcols = din.as_ref().map(|_| vec![0.0; width * len]);
    for o in 0..cout {
        let drow = &dout[o * len..(o + 1) * len];
        db[o] += drow.iter().sum::<f64>();
        let wrow = &w[o * width..(o + 1) * width];
        let dwrow = &mut dw[o * width..(o + 1) * width];
        for r in 0..width {
            let x = &cols[r * len..(r + 1) * len];
            dwrow[r] += drow.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        if let Some(dc) = dcols.as_mut() {
            for (r, &wv) in wrow.iter().enumerate() {
                for (d, &g) in dc[r * len..(r + 1) * len].iter_mut().zip(drow) {
                    *d += wv * g;
                }
            }
        }
    }
    if let (Some(dc), Some(din)) = (dcols, din) {
        col2im(&dc, cin, k, len, din);
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// `d *= 1[pre > 0]`.
fn mask_relu(d: &mut [f64], pre: &[f64]) {
    for (g, &p) in d.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `grad_w += outer(d, x)`, `grad_b += d`, and optionally `dx += W^T d`.
fn dense_backward(w: &[f64], x: &[f64], d: &[f64], gw: &mut [f64], gb: &mut [f64], dx: Option<&mut [f64]>) {
    let n = x.len();
    for (o, &g) in d.iter().enumerate() {
        gb[o] += g;
        if g != 0.0 {
            for (a, &xv) in gw[o * n..(o + 1) * n].iter_mut().zip(x) {
                *a += g * xv;
            }
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in d.iter().enumerate() {
            if g != 0.0 {
                for (a, &wv) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                    *a += g * wv;
                }
            }
        }
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b.len()];
    crate::linalg::affine(w, b, x, &mut out);
    out
}

impl Predictor {
    /// Backbone and head on a `C x L` memory-enhanced window.
    pub fn forward(&self, window: &Matrix) -> Result<BackboneOutput> {
        let (c, l) = (self.arch.channels, self.arch.window);
        if window.rows() != c {
            return Err(Error::dim("forward window channels", c, window.rows()));
        }
        if window.cols() != l {
            return Err(Error::dim("forward window length", l, window.cols()));
        }
        let cache = self.backbone_forward(window.as_slice());
        Ok(BackboneOutput {
            h: Matrix::from_vec(2 * c, l, cache.h),
            pooled: cache.pooled,
            yhat: cache.yhat,
        })
    }

    pub fn backbone_forward(&self, zt: &[f64]) -> BackboneCache {
        let a = &self.arch;
        let (c, l) = (a.channels, a.window);
        let p = &self.params;
        let branch = |on: bool, w1: usize, b1: usize, w2: usize, b2: usize, k: usize| {
            if !on {
                return (vec![0.0; c * l], vec![0.0; c * l], vec![0.0; c * l]);
            }
            let a1 = conv1d_same(zt, p.get(w1), p.get(b1), c, k, l);
            let r1 = relu(&a1);
            let a2 = conv1d_same(&r1, p.get(w2), p.get(b2), c, k, l);
            let r2 = relu(&a2);
            (a1, a2, r2)
        };
        let (s_a1, s_a2, s_out) = branch(
            a.branches.short(),
            idx::SHORT1_W,
            idx::SHORT1_B,
            idx::SHORT2_W,
            idx::SHORT2_B,
            a.short_kernel,
        );
        let (l_a1, l_a2, l_out) = branch(
            a.branches.long(),
            idx::LONG1_W,
            idx::LONG1_B,
            idx::LONG2_W,
            idx::LONG2_B,
            a.long_kernel,
        );
        let mut h = s_out;
        h.extend_from_slice(&l_out);
        let inv_l = 1.0 / l as f64;
        let pooled: Vec<f64> = h.chunks_exact(l).map(|r| r.iter().sum::<f64>() * inv_l).collect();
        let f_pre = dense(p.get(idx::FUSION_W), p.get(idx::FUSION_B), &pooled);
        let fused = relu(&f_pre);
        let yhat = dense(p.get(idx::HEAD_W), p.get(idx::HEAD_B), &fused);
        BackboneCache {
            input: zt.to_vec(),
            s_a1,
            s_a2,
            l_a1,
            l_a2,
            h,
            pooled,
            f_pre,
            fused,
            yhat,
        }
    }

    /// Projection, memory aggregation and gated fusion for every column of
    /// a raw window.
    pub fn front_forward(&self, window: &Matrix, ctx: &MemoryContext) -> FrontCache {
        let a = &self.arch;
        let (f, c, l, r) = (a.features, a.channels, a.window, a.memory_agg);
        let p = &self.params;
        debug_assert_eq!(window.rows(), f);
        debug_assert_eq!(window.cols(), l);
        let x = window.as_slice().to_vec();
        let (wp, bp) = (p.get(idx::PROJ_W), p.get(idx::PROJ_B));
        let mut z = vec![0.0; c * l];
        let mut col = vec![0.0; f];
        for s in 0..l {
            for (fi, v) in col.iter_mut().enumerate() {
                *v = x[fi * l + s];
            }
            for ch in 0..c {
                z[ch * l + s] = bp[ch] + crate::linalg::dot(&wp[ch * f..(ch + 1) * f], &col);
            }
        }
        if !a.memory_fusion {
            return FrontCache {
                x,
                zt: z.clone(),
                z,
                items_pre: Vec::new(),
                pooled_ctx: Vec::new(),
                present: Vec::new(),
                counts: Vec::new(),
                mbar: Vec::new(),
                g: Vec::new(),
            };
        }
        let w = a.backbone_width();
        let slots = a.context_slots();
        let (wm, bm) = (p.get(idx::MEM_W), p.get(idx::MEM_B));
        let mut items_pre = vec![0.0; slots * c];
        for j in 0..slots {
            if ctx.present[j] {
                let pre = dense(wm, bm, &ctx.pooled[j * w..(j + 1) * w]);
                items_pre[j * c..(j + 1) * c].copy_from_slice(&pre);
            }
        }
        let mut counts = vec![0; l];
        let mut mbar = vec![0.0; c * l];
        for s in 0..l {
            let mut n = 0;
            for j in s..s + r {
                if ctx.present[j] {
                    n += 1;
                    for ch in 0..c {
                        mbar[ch * l + s] += items_pre[j * c + ch].max(0.0);
                    }
                }
            }
            counts[s] = n;
            if n > 0 {
                let inv = 1.0 / n as f64;
                for ch in 0..c {
                    mbar[ch * l + s] *= inv;
                }
            }
        }
        let (wg, bg) = (p.get(idx::GATE_W), p.get(idx::GATE_B));
        let mut g = vec![0.0; c * l];
        let mut zt = vec![0.0; c * l];
        let mut cat = vec![0.0; 2 * c];
        for s in 0..l {
            for ch in 0..c {
                cat[ch] = z[ch * l + s];
                cat[c + ch] = mbar[ch * l + s];
            }
            for ch in 0..c {
                let logit = bg[ch] + crate::linalg::dot(&wg[ch * 2 * c..(ch + 1) * 2 * c], &cat);
                let gv = sigmoid(logit);
                g[ch * l + s] = gv;
                zt[ch * l + s] = gv * cat[ch] + (1.0 - gv) * cat[c + ch];
            }
        }
        FrontCache {
            x,
            z,
            items_pre,
            pooled_ctx: ctx.pooled.clone(),
            present: ctx.present.clone(),
            counts,
            mbar,
            g,
            zt,
        }
    }

    pub fn forward_example(&self, ex: &Example) -> TrainCache {
        let front = self.front_forward(&ex.window, &ex.context);
        let back = self.backbone_forward(&front.zt);
        TrainCache { front, back }
    }

    /// Head input for an example; valid as a constant while every group
    /// below the head is frozen.
    pub fn head_features(&self, ex: &Example) -> Vec<f64> {
        self.forward_example(ex).back.fused
    }

    /// Backward pass through the head only.
    pub fn backward_head(&self, fused: &[f64], dyhat: &[f64], grads: &mut Params) {
        let (gw, rest) = grads.tensors.split_at_mut(idx::HEAD_B);
        dense_backward(
            self.params.get(idx::HEAD_W),
            fused,
            dyhat,
            &mut gw[idx::HEAD_W].data,
            &mut rest[0].data,
            None,
        );
    }

    /// Accumulates parameter gradients for one example given `dL/dyhat` and
    /// an optional `dL/dh` (`2C x L`). With `head_only` the pass stops at the head.
    pub fn backward(
        &self,
        cache: &TrainCache,
        dyhat: &[f64],
        dh: Option<&[f64]>,
        grads: &mut Params,
        head_only: bool,
    ) {
        let back = &cache.back;
        self.backward_head(&back.fused, dyhat, grads);
        if head_only {
            return;
        }
        let dzt = self.backbone_backward(back, dyhat, dh, grads);
        self.front_backward(&cache.front, &dzt, grads);
    }

    /// Backward from the head input down to the memory-enhanced window;
    /// returns `dL/dzt`.
    fn backbone_backward(&self, back: &BackboneCache, dyhat: &[f64], dh_ext: Option<&[f64]>, grads: &mut Params) -> Vec<f64> {
        let a = &self.arch;
        let (c, l) = (a.channels, a.window);
        let w = a.backbone_width();
        let p = &self.params;

        let mut dfused = vec![0.0; w];
        for (k, &g) in dyhat.iter().enumerate() {
            if g != 0.0 {
                for (d, &wv) in dfused.iter_mut().zip(&p.get(idx::HEAD_W)[k * w..(k + 1) * w]) {
                    *d += g * wv;
                }
            }
        }
        mask_relu(&mut dfused, &back.f_pre);
        let mut dpooled = vec![0.0; w];
        {
            let (lo, hi) = grads.tensors.split_at_mut(idx::FUSION_B);
            dense_backward(
                p.get(idx::FUSION_W),
                &back.pooled,
                &dfused,
                &mut lo[idx::FUSION_W].data,
                &mut hi[0].data,
                Some(&mut dpooled),
            );
        }
        let inv_l = 1.0 / l as f64;
        let mut dh = vec![0.0; w * l];
        for ch in 0..w {
            let g = dpooled[ch] * inv_l;
            dh[ch * l..(ch + 1) * l].iter_mut().for_each(|v| *v = g);
        }
        if let Some(ext) = dh_ext {
            for (d, e) in dh.iter_mut().zip(ext) {
                *d += e;
            }
        }

        let mut dzt = vec![0.0; c * l];
        let (dh_short, dh_long) = dh.split_at(c * l);
        let mut run_branch = |on: bool, dout: &[f64], a1: &[f64], a2: &[f64], ids: [usize; 4], k: usize| {
            if !on {
                return;
            }
            let [w1, b1, w2, b2] = ids;
            let mut da2 = dout.to_vec();
            mask_relu(&mut da2, a2);
            let r1 = relu(a1);
            let mut dr1 = vec![0.0; c * l];
            {
                let (lo, hi) = grads.tensors.split_at_mut(b2);
                conv_backward(&r1, p.get(w2), &da2, c, c, k, l, &mut lo[w2].data, &mut hi[0].data, Some(&mut dr1));
            }
            mask_relu(&mut dr1, a1);
            let (lo, hi) = grads.tensors.split_at_mut(b1);
            conv_backward(&back.input, p.get(w1), &dr1, c, c, k, l, &mut lo[w1].data, &mut hi[0].data, Some(&mut dzt));
        };
        run_branch(
            a.branches.short(),
            dh_short,
            &back.s_a1,
            &back.s_a2,
            [idx::SHORT1_W, idx::SHORT1_B, idx::SHORT2_W, idx::SHORT2_B],
            a.short_kernel,
        );
        run_branch(
            a.branches.long(),
            dh_long,
            &back.l_a1,
            &back.l_a2,
            [idx::LONG1_W, idx::LONG1_B, idx::LONG2_W, idx::LONG2_B],
            a.long_kernel,
        );
        dzt
    }

    fn front_backward(&self, front: &FrontCache, dzt: &[f64], grads: &mut Params) {
        let a = &self.arch;
        let (f, c, l, r) = (a.features, a.channels, a.window, a.memory_agg);
        let p = &self.params;

        let mut dz = vec![0.0; c * l];
        if a.memory_fusion {
            let slots = a.context_slots();
            let w = a.backbone_width();
            let wg = p.get(idx::GATE_W);
            let mut dmbar = vec![0.0; c * l];
            let mut dlogit = vec![0.0; c];
            let mut cat = vec![0.0; 2 * c];
            let mut dcat = vec![0.0; 2 * c];
            for s in 0..l {
                for ch in 0..c {
                    let i = ch * l + s;
                    let (g, z, m, d) = (front.g[i], front.z[i], front.mbar[i], dzt[i]);
                    dz[i] += d * g;
                    dmbar[i] += d * (1.0 - g);
                    dlogit[ch] = d * (z - m) * g * (1.0 - g);
                    cat[ch] = z;
                    cat[c + ch] = m;
                }
                dcat.iter_mut().for_each(|v| *v = 0.0);
                {
                    let (lo, hi) = grads.tensors.split_at_mut(idx::GATE_B);
                    dense_backward(wg, &cat, &dlogit, &mut lo[idx::GATE_W].data, &mut hi[0].data, Some(&mut dcat));
                }
                for ch in 0..c {
                    dz[ch * l + s] += dcat[ch];
                    dmbar[ch * l + s] += dcat[c + ch];
                }
            }
            // mbar_s is the mean of the present items in slots s..s+R.
            let mut ditem = vec![0.0; slots * c];
            for s in 0..l {
                let n = front.counts[s];
                if n == 0 {
                    continue;
                }
                let inv = 1.0 / n as f64;
                for j in s..s + r {
                    if front.present[j] {
                        for ch in 0..c {
                            ditem[j * c + ch] += dmbar[ch * l + s] * inv;
                        }
                    }
                }
            }
            let (lo, hi) = grads.tensors.split_at_mut(idx::MEM_B);
            let (gw, gb) = (&mut lo[idx::MEM_W].data, &mut hi[0].data);
            for j in (0..slots).filter(|&j| front.present[j]) {
                let mut d = ditem[j * c..(j + 1) * c].to_vec();
                mask_relu(&mut d, &front.items_pre[j * c..(j + 1) * c]);
                let pooled = &front.pooled_ctx[j * w..(j + 1) * w];
                dense_backward(p.get(idx::MEM_W), pooled, &d, gw, gb, None);
            }
        } else {
            dz.copy_from_slice(dzt);
        }

        let (lo, hi) = grads.tensors.split_at_mut(idx::PROJ_B);
        let (gw, gb) = (&mut lo[idx::PROJ_W].data, &mut hi[0].data);
        for ch in 0..c {
            for s in 0..l {
                let d = dz[ch * l + s];
                if d == 0.0 {
                    continue;
                }
                gb[ch] += d;
                for fi in 0..f {
                    gw[ch * f + fi] += d * front.x[fi * l + s];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Branches, Group};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_example(arch: &Architecture, rng: &mut ChaCha8Rng) -> Example {
        let (f, l) = (arch.features, arch.window);
        let window = Matrix::from_vec(f, l, (0..f * l).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut context = MemoryContext::empty(arch);
        for (j, present) in context.present.iter_mut().enumerate() {
            *present = j >= 2 || rng.random_bool(0.5);
        }
        context.pooled.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.5));
        Example {
            t: 0,
            window,
            context,
            target: vec![0.0; arch.targets],
        }
    }

    /// Loss `a . yhat + sum(b * h)`; returns (loss, dL/dyhat, dL/dh).
    fn probe(p: &Predictor, ex: &Example, a: &[f64], b: &[f64]) -> f64 {
        let c = p.forward_example(ex);
        crate::linalg::dot(a, &c.back.yhat) + crate::linalg::dot(b, &c.back.h)
    }

    fn check(arch: Architecture, seed: u64) -> (usize, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pred = Predictor::new(arch, seed).unwrap();
        // Non-zero biases so gates and memory items are not trivially symmetric.
        for t in pred.params.tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let ex = random_example(&arch, &mut rng);
        let a: Vec<f64> = (0..arch.targets).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * arch.channels * arch.window).map(|_| rng.random_range(-0.3..0.3)).collect();
        let cache = pred.forward_example(&ex);
        let base_pattern = cache.relu_pattern();
        let mut grads = pred.params.zeros_like();
        pred.backward(&cache, &a, Some(&b), &mut grads, false);

        let step = 1e-5;
        let (mut checked, mut worst) = (0, 0.0f64);
        for ti in 0..pred.params.tensors.len() {
            for i in 0..pred.params.tensors[ti].data.len() {
                let orig = pred.params.tensors[ti].data[i];
                pred.params.tensors[ti].data[i] = orig + step;
                let kink_plus = pred.forward_example(&ex).relu_pattern() != base_pattern;
                let up = probe(&pred, &ex, &a, &b);
                pred.params.tensors[ti].data[i] = orig - step;
                let kink_minus = pred.forward_example(&ex).relu_pattern() != base_pattern;
                let down = probe(&pred, &ex, &a, &b);
                pred.params.tensors[ti].data[i] = orig;
                if kink_plus || kink_minus {
                    continue;
                }
                let numeric = (up - down) / (2.0 * step);
                let analytic = grads.tensors[ti].data[i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        (checked, worst)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut arch = Architecture::new(3, 4, 2, 5, 2);
        for seed in 0..4 {
            let (n, worst) = check(arch, seed);
            assert!(n > 300, "only {n} coordinates checked");
            assert!(worst < 1e-4, "seed {seed}: {worst}");
        }
        arch.memory_fusion = false;
        assert!(check(arch, 7).1 < 1e-4);
        arch.memory_fusion = true;
        arch.branches = Branches::ShortOnly;
        assert!(check(arch, 8).1 < 1e-4);
        arch.branches = Branches::LongOnly;
        assert!(check(arch, 9).1 < 1e-4);
    }

    #[test]
    fn same_padding_convolution() {
        let out = conv1d_same(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[0.0], 1, 3, 3);
        assert_eq!(out, vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn zero_weights_predict_head_bias() {
        let arch = Architecture::new(3, 4, 2, 5, 4);
        let mut p = Predictor::new(arch, 1).unwrap();
        p.params.fill_zero();
        p.params.get_mut(idx::HEAD_B).copy_from_slice(&[0.5, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = random_example(&arch, &mut rng);
        assert_eq!(p.forward_example(&ex).back.yhat, vec![0.5, -2.0]);

        let mut p = Predictor::new(arch, 1).unwrap();
        for i in [idx::SHORT1_B, idx::SHORT2_B, idx::LONG1_B, idx::LONG2_B, idx::FUSION_B] {
            p.params.get_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        let out = p.forward(&Matrix::zeros(4, 5)).unwrap();
        assert!(out.pooled.iter().all(|&v| v == 0.0));
        assert_eq!(out.yhat, p.params.get(idx::HEAD_B).to_vec());
        assert_eq!(p.forward(&Matrix::zeros(4, 5)).unwrap(), out);
        assert!(p.forward(&Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let arch = Architecture::new(3, 4, 2, 5, 4);
        let p = Predictor::new(arch, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = random_example(&arch, &mut rng);
        let cache = p.forward_example(&ex);
        let mut g = p.params.zeros_like();
        p.backward(&cache, &[0.0, 0.0], None, &mut g, false);
        assert!(g.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn head_bias_gradient_is_residual() {
        let arch = Architecture::new(3, 4, 2, 5, 4);
        let p = Predictor::new(arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = random_example(&arch, &mut rng);
        let cache = p.forward_example(&ex);
        let y = [0.2, -0.4];
        let resid: Vec<f64> = cache.back.yhat.iter().zip(y).map(|(a, b)| a - b).collect();
        let mut g = p.params.zeros_like();
        p.backward(&cache, &resid, None, &mut g, true);
        assert_eq!(g.get(idx::HEAD_B), resid.as_slice());
        for grp in [Group::Projection, Group::Lower, Group::Upper, Group::Memory, Group::Gate] {
            assert!(g.group_values(grp).iter().all(|&v| v == 0.0));
        }
        let mut g2 = p.params.zeros_like();
        p.backward_head(&p.head_features(&ex), &resid, &mut g2);
        assert_eq!(g2, g);
    }
}
