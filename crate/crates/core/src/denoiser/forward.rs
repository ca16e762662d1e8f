use ndarray::{s, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use super::hooks::{blur_attention_row, HookAction, HookSite, Hooks};
use super::layout::{mat, vec1, Linear};
use super::{patch_gather_index, time_embedding, token_frequency, Denoiser, InputShape};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Samples per parallel work item. Fixed so results never depend on the
/// thread count.
pub(crate) const CHUNK: usize = 32;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn affine(x: &Array2<f64>, lin: &Linear, p: &[f64]) -> Array2<f64> {
    let mut y = x.dot(&lin.weight(p));
    y += &lin.bias(p);
    y
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Array2<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, NormCache) {
    let c = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.outer_iter_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    let y = &xhat * &gain + bias;
    (y, NormCache { xhat, rstd })
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub ln1: NormCache,
    pub a: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Post-softmax weights, indexed `sample * heads + head`.
    pub probs: Vec<Array2<f64>>,
    pub o: Array2<f64>,
    pub ln2: NormCache,
    pub m: Array2<f64>,
    pub z1: Array2<f64>,
    pub s1: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    pub tokens_in: Array2<f64>,
    pub temb: Array2<f64>,
    pub u1: Array2<f64>,
    pub s1: Array2<f64>,
    pub cvec: Array2<f64>,
    pub scond: Array2<f64>,
    pub classes: Vec<usize>,
    pub blocks: Vec<BlockCache>,
    pub lnf: NormCache,
    pub y: Array2<f64>,
}

/// Intermediate tensors of one block, rows `sample * N + token`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    /// Hidden tokens at the block's token-input site before any hook.
    pub pre_hook: Array2<f64>,
    /// Hidden tokens actually entering attention.
    pub block_input: Array2<f64>,
    /// Value projection.
    pub values: Array2<f64>,
    /// Attention output per token (heads concatenated) before the output map.
    pub attention: Array2<f64>,
    /// Post-hook attention weights, indexed `sample * heads + head`.
    pub probs: Vec<Array2<f64>>,
    pub block_output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub blocks: Vec<BlockTrace>,
}

impl Denoiser {
    fn check_inputs(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        classes: &[usize],
        hooks: &Hooks,
    ) -> Result<()> {
        let cfg = &self.config;
        if x.ncols() != cfg.sample_dim() {
            return Err(Error::ShapeMismatch(format!(
                "samples of length {} fed to a model expecting {}",
                x.ncols(),
                cfg.sample_dim()
            )));
        }
        if ts.len() != x.nrows() || classes.len() != x.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} with {} steps and {} classes",
                x.nrows(),
                ts.len(),
                classes.len()
            )));
        }
        if let Some(&class) = classes.iter().find(|&&c| c >= cfg.num_classes) {
            return Err(Error::InvalidCondition {
                class,
                num_classes: cfg.num_classes,
            });
        }
        hooks.validate(cfg.depth, cfg.tokens())
    }

    /// Noise prediction with per-sample steps and classes.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        classes: &[usize],
        hooks: &Hooks,
    ) -> Result<Array2<f64>> {
        self.check_inputs(x, ts, classes, hooks)?;
        let b = x.nrows();
        if b <= CHUNK {
            return Ok(self.run(x, ts, classes, hooks, false, false).0);
        }
        let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
        let parts: Vec<Array2<f64>> = starts
            .par_iter()
            .map(|&lo| {
                let hi = (lo + CHUNK).min(b);
                let xs = x.slice(s![lo..hi, ..]).to_owned();
                self.run(&xs, &ts[lo..hi], &classes[lo..hi], hooks, false, false)
                    .0
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("matching widths"))
    }

    /// Like [`Denoiser::forward`], also returning per-block intermediates.
    pub fn forward_traced(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        classes: &[usize],
        hooks: &Hooks,
    ) -> Result<(Array2<f64>, Trace)> {
        self.check_inputs(x, ts, classes, hooks)?;
        let (out, _, trace) = self.run(x, ts, classes, hooks, false, true);
        Ok((out, trace.expect("requested")))
    }

    pub(crate) fn forward_cached(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        classes: &[usize],
    ) -> Result<(Array2<f64>, Cache)> {
        let hooks = Hooks::none();
        self.check_inputs(x, ts, classes, &hooks)?;
        let (out, cache, _) = self.run(x, ts, classes, &hooks, true, false);
        Ok((out, cache.expect("requested")))
    }

    pub(crate) fn gather_tokens(&self, x: &Array2<f64>) -> Array2<f64> {
        let cfg = &self.config;
        let (n, pd) = (cfg.tokens(), cfg.patch_dim());
        let b = x.nrows();
        match cfg.input {
            InputShape::Image {
                height,
                width,
                channels,
            } => {
                let idx = patch_gather_index(height, width, channels, cfg.patch_size);
                let mut out = Array2::zeros((b * n, pd));
                for (s, row) in x.outer_iter().enumerate() {
                    let dst = out.slice_mut(s![s * n..(s + 1) * n, ..]);
                    let dst = dst.into_shape_with_order(n * pd).expect("contiguous");
                    let mut dst = dst;
                    for (d, &src) in dst.iter_mut().zip(&idx) {
                        *d = row[src];
                    }
                }
                out
            }
            InputShape::Vector { dims, .. } => {
                let mut out = Array2::zeros((b * n, pd));
                for (s, row) in x.outer_iter().enumerate() {
                    for j in 0..n {
                        let w = token_frequency(j, n);
                        let mut dst = out.row_mut(s * n + j);
                        for (d, &v) in row.iter().enumerate() {
                            dst[d] = (w * v).sin();
                            dst[dims + d] = (w * v).cos();
                        }
                    }
                }
                out
            }
        }
    }

    /// Inverse of the image token gather: `(B*N, P)` rows back to `(B, D)`.
    pub(crate) fn scatter_tokens(&self, tokens: &Array2<f64>, b: usize) -> Array2<f64> {
        let cfg = &self.config;
        let InputShape::Image {
            height,
            width,
            channels,
        } = cfg.input
        else {
            unreachable!("vector heads do not scatter")
        };
        let idx = patch_gather_index(height, width, channels, cfg.patch_size);
        let (n, pd) = (cfg.tokens(), cfg.patch_dim());
        let mut out = Array2::zeros((b, cfg.sample_dim()));
        for s in 0..b {
            let src = tokens.slice(s![s * n..(s + 1) * n, ..]);
            let mut row = out.row_mut(s);
            for (pos, &dst) in idx.iter().enumerate() {
                row[dst] = src[[pos / pd, pos % pd]];
            }
        }
        out
    }

    fn run(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        classes: &[usize],
        hooks: &Hooks,
        want_cache: bool,
        want_trace: bool,
    ) -> (Array2<f64>, Option<Cache>, Option<Trace>) {
        let cfg = &self.config;
        let p = &self.params[..];
        let lay = &self.layout;
        let (n, c, heads, hd) = (cfg.tokens(), cfg.embed_dim, cfg.heads, cfg.head_dim());
        let b = x.nrows();
        let scale = 1.0 / (hd as f64).sqrt();

        let tokens_in = self.gather_tokens(x);
        let mut temb = Array2::zeros((b, cfg.time_embed_dim));
        for (s, &t) in ts.iter().enumerate() {
            let e = time_embedding(t as f64, cfg.time_embed_dim).expect("validated");
            temb.row_mut(s).assign(&ArrayView1::from(&e[..]));
        }
        let u1 = affine(&temb, &lay.time1, p);
        let s1 = u1.mapv(silu);
        let mut cvec = affine(&s1, &lay.time2, p);
        let class_table = mat(p, lay.class, cfg.num_classes, c);
        for (s, &cl) in classes.iter().enumerate() {
            let mut row = cvec.row_mut(s);
            row += &class_table.row(cl);
        }
        let scond = cvec.mapv(silu);

        let pos = mat(p, lay.pos, n, c);
        let mut h = affine(&tokens_in, &lay.embed, p);
        for s in 0..b {
            let mut blk = h.slice_mut(s![s * n..(s + 1) * n, ..]);
            blk += &pos;
            blk += &cvec.row(s);
        }

        let mut caches = Vec::new();
        let mut traces = Vec::new();
        for (k, bl) in lay.blocks.iter().enumerate() {
            let hc = affine(&scond, &bl.cond, p);
            for s in 0..b {
                let mut blk = h.slice_mut(s![s * n..(s + 1) * n, ..]);
                blk += &hc.row(s);
            }
            let pre_hook = if want_trace { Some(h.clone()) } else { None };
            if let Some(HookAction::TokenPerturb(op)) = hooks.get(k, HookSite::TokenInput) {
                for s in 0..b {
                    op.apply_slice(h.slice_mut(s![s * n..(s + 1) * n, ..]))
                        .expect("validated size");
                }
            }
            let block_input = if want_trace { Some(h.clone()) } else { None };

            let (mut a, ln1) = layer_norm(&h, vec1(p, bl.ln1_g, c), vec1(p, bl.ln1_b, c));
            if let Some(HookAction::TokenPerturb(op)) = hooks.get(k, HookSite::AttentionInput) {
                for s in 0..b {
                    op.apply_slice(a.slice_mut(s![s * n..(s + 1) * n, ..]))
                        .expect("validated size");
                }
            }
            let q = affine(&a, &bl.q, p);
            let kk = affine(&a, &bl.k, p);
            let v = affine(&a, &bl.v, p);
            let attn_hook = hooks.get(k, HookSite::AttentionMap);
            let mut o = Array2::zeros((b * n, c));
            let mut probs = Vec::with_capacity(if want_cache || want_trace {
                b * heads
            } else {
                0
            });
            for s in 0..b {
                let rows = s * n..(s + 1) * n;
                for head in 0..heads {
                    let cols = head * hd..(head + 1) * hd;
                    let qh = q.slice(s![rows.clone(), cols.clone()]);
                    let kh = kk.slice(s![rows.clone(), cols.clone()]);
                    let vh = v.slice(s![rows.clone(), cols.clone()]);
                    let mut pr = qh.dot(&kh.t());
                    for mut row in pr.outer_iter_mut() {
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        row.mapv_inplace(|z| ((z - mx) * scale).exp());
                        let sum = row.sum();
                        row.mapv_inplace(|z| z / sum);
                    }
                    match attn_hook {
                        Some(HookAction::AttentionIdentity) => pr = Array2::eye(n),
                        Some(HookAction::AttentionBlur { sigma }) => {
                            for row in pr.outer_iter_mut() {
                                blur_attention_row(row, *sigma);
                            }
                        }
                        _ => {}
                    }
                    o.slice_mut(s![rows.clone(), cols]).assign(&pr.dot(&vh));
                    if want_cache || want_trace {
                        probs.push(pr);
                    }
                }
            }
            let attn = affine(&o, &bl.o, p);
            let h_in = h;
            let h_mid = &h_in + &attn;
            let (m, ln2) = layer_norm(&h_mid, vec1(p, bl.ln2_g, c), vec1(p, bl.ln2_b, c));
            let z1 = affine(&m, &bl.fc1, p);
            let sz = z1.mapv(silu);
            let f = affine(&sz, &bl.fc2, p);
            h = &h_mid + &f;

            if want_trace {
                traces.push(BlockTrace {
                    pre_hook: pre_hook.expect("trace"),
                    block_input: block_input.expect("trace"),
                    values: v.clone(),
                    attention: o.clone(),
                    probs: probs.clone(),
                    block_output: h.clone(),
                });
            }
            if want_cache {
                caches.push(BlockCache {
                    ln1,
                    a,
                    q,
                    k: kk,
                    v,
                    probs,
                    o,
                    ln2,
                    m,
                    z1,
                    s1: sz,
                });
            }
        }

        let (y, lnf) = layer_norm(&h, vec1(p, lay.lnf_g, c), vec1(p, lay.lnf_b, c));
        let out = match cfg.input {
            InputShape::Image { .. } => {
                let tok = affine(&y, &lay.head, p);
                self.scatter_tokens(&tok, b)
            }
            InputShape::Vector { .. } => {
                let flat = y
                    .clone()
                    .into_shape_with_order((b, n * c))
                    .expect("row-major tokens");
                affine(&flat, &lay.head, p)
            }
        };

        let cache = want_cache.then(|| Cache {
            tokens_in,
            temb,
            u1,
            s1,
            cvec,
            scond,
            classes: classes.to_vec(),
            blocks: caches,
            lnf,
            y,
        });
        let trace = want_trace.then(|| Trace { blocks: traces });
        (out, cache, trace)
    }
}
