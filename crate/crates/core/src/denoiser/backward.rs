//! Reverse-mode gradients for hook-free forward passes.

use ndarray::{s, Array2, Axis};

use super::forward::{silu_grad, Cache, NormCache};
use super::layout::{mat_mut, vec1, vec1_mut, Linear};
use super::{Denoiser, InputShape};
use crate::error::{Error, Result};

fn linear_backward(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    lin: &Linear,
    p: &[f64],
    g: &mut [f64],
) -> Array2<f64> {
    {
        let mut gw = lin.weight_mut(g);
        gw += &x.t().dot(dy);
    }
    {
        let mut gb = lin.bias_mut(g);
        gb += &dy.sum_axis(Axis(0));
    }
    dy.dot(&lin.weight(p).t())
}

fn norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain_off: usize,
    bias_off: usize,
    p: &[f64],
    g: &mut [f64],
) -> Array2<f64> {
    let c = dy.ncols();
    {
        let mut gg = vec1_mut(g, gain_off, c);
        gg += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut gb = vec1_mut(g, bias_off, c);
        gb += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &vec1(p, gain_off, c);
    let cf = c as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, (mut out, (dh, xh))) in dx
        .outer_iter_mut()
        .zip(dxhat.outer_iter().zip(cache.xhat.outer_iter()))
        .enumerate()
    {
        let sum_d = dh.sum();
        let sum_dx = dh.dot(&xh);
        let r = cache.rstd[i];
        for j in 0..c {
            out[j] = r / cf * (cf * dh[j] - sum_d - xh[j] * sum_dx);
        }
    }
    dx
}

/// Sums every `n` consecutive rows: `(B*N, C) -> (B, C)`.
fn sum_tokens(x: &Array2<f64>, n: usize) -> Array2<f64> {
    let b = x.nrows() / n;
    let mut out = Array2::zeros((b, x.ncols()));
    for s in 0..b {
        out.row_mut(s)
            .assign(&x.slice(s![s * n..(s + 1) * n, ..]).sum_axis(Axis(0)));
    }
    out
}

impl Denoiser {
    /// Mean squared error of the hook-free prediction against `target`,
    /// with its gradient for every parameter.
    pub fn mse_gradient(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        classes: &[usize],
        target: &Array2<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        let (out, cache) = self.forward_cached(x, ts, classes)?;
        if out.dim() != target.dim() {
            return Err(Error::ShapeMismatch(format!(
                "target {:?} vs prediction {:?}",
                target.dim(),
                out.dim()
            )));
        }
        let diff = &out - target;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;
        let dout = diff.mapv(|v| 2.0 * v / count);
        let mut grad = vec![0.0; self.num_params()];
        self.backward(&cache, &dout, &mut grad);
        Ok((loss, grad))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub(crate) fn backward(&self, cache: &Cache, dout: &Array2<f64>, grad: &mut [f64]) {
        let cfg = &self.config;
        let p = &self.params[..];
        let lay = &self.layout;
        let (n, c, heads, hd) = (cfg.tokens(), cfg.embed_dim, cfg.heads, cfg.head_dim());
        let b = dout.nrows();
        let scale = 1.0 / (hd as f64).sqrt();

        let dy = match cfg.input {
            InputShape::Image { .. } => {
                let dtok = self.gather_tokens(dout);
                linear_backward(&cache.y, &dtok, &lay.head, p, grad)
            }
            InputShape::Vector { .. } => {
                let flat = cache
                    .y
                    .clone()
                    .into_shape_with_order((b, n * c))
                    .expect("row-major tokens");
                linear_backward(&flat, dout, &lay.head, p, grad)
                    .into_shape_with_order((b * n, c))
                    .expect("row-major tokens")
            }
        };
        let mut dh = norm_backward(&dy, &cache.lnf, lay.lnf_g, lay.lnf_b, p, grad);
        let mut dscond = Array2::<f64>::zeros((b, c));

        for (bl, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // h_out = h_mid + fc2(silu(fc1(norm2(h_mid))))
            let ds1 = linear_backward(&bc.s1, &dh, &bl.fc2, p, grad);
            let dz1 = &ds1 * &bc.z1.mapv(silu_grad);
            let dm = linear_backward(&bc.m, &dz1, &bl.fc1, p, grad);
            let mut dh_mid = dh;
            dh_mid += &norm_backward(&dm, &bc.ln2, bl.ln2_g, bl.ln2_b, p, grad);

            // h_mid = h_in + out(attention(norm1(h_in)))
            let d_o = linear_backward(&bc.o, &dh_mid, &bl.o, p, grad);
            let mut dq = Array2::zeros((b * n, c));
            let mut dk = Array2::zeros((b * n, c));
            let mut dv = Array2::zeros((b * n, c));
            for smp in 0..b {
                let rows = smp * n..(smp + 1) * n;
                for head in 0..heads {
                    let cols = head * hd..(head + 1) * hd;
                    let pr = &bc.probs[smp * heads + head];
                    let doh = d_o.slice(s![rows.clone(), cols.clone()]);
                    let qh = bc.q.slice(s![rows.clone(), cols.clone()]);
                    let kh = bc.k.slice(s![rows.clone(), cols.clone()]);
                    let vh = bc.v.slice(s![rows.clone(), cols.clone()]);
                    let dp = doh.dot(&vh.t());
                    dv.slice_mut(s![rows.clone(), cols.clone()])
                        .assign(&pr.t().dot(&doh));
                    let mut dsc = pr * &dp;
                    for (mut row, prow) in dsc.outer_iter_mut().zip(pr.outer_iter()) {
                        let tot = row.sum();
                        row.zip_mut_with(&prow, |d, &pp| *d -= pp * tot);
                    }
                    dsc *= scale;
                    dq.slice_mut(s![rows.clone(), cols.clone()])
                        .assign(&dsc.dot(&kh));
                    dk.slice_mut(s![rows.clone(), cols])
                        .assign(&dsc.t().dot(&qh));
                }
            }
            let mut da = linear_backward(&bc.a, &dq, &bl.q, p, grad);
            da += &linear_backward(&bc.a, &dk, &bl.k, p, grad);
            da += &linear_backward(&bc.a, &dv, &bl.v, p, grad);
            let mut dh_in = dh_mid;
            dh_in += &norm_backward(&da, &bc.ln1, bl.ln1_g, bl.ln1_b, p, grad);

            // h_in = h_prev + cond(silu(cvec)) broadcast over tokens
            let dhc = sum_tokens(&dh_in, n);
            dscond += &linear_backward(&cache.scond, &dhc, &bl.cond, p, grad);
            dh = dh_in;
        }

        // h0 = embed(tokens) + pos + cvec
        let _ = linear_backward(&cache.tokens_in, &dh, &lay.embed, p, grad);
        {
            let mut gpos = mat_mut(grad, lay.pos, n, c);
            for smp in 0..b {
                gpos += &dh.slice(s![smp * n..(smp + 1) * n, ..]);
            }
        }
        let mut dcvec = sum_tokens(&dh, n);
        dcvec += &(&dscond * &cache.cvec.mapv(silu_grad));
        {
            let mut gclass = mat_mut(grad, lay.class, cfg.num_classes, c);
            for (smp, &cl) in cache.classes.iter().enumerate() {
                let mut row = gclass.row_mut(cl);
                row += &dcvec.row(smp);
            }
        }
        let ds1 = linear_backward(&cache.s1, &dcvec, &lay.time2, p, grad);
        let du1 = &ds1 * &cache.u1.mapv(silu_grad);
        let _ = linear_backward(&cache.temb, &du1, &lay.time1, p, grad);
    }
}
