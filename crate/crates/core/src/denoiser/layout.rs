use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::{DenoiserConfig, InputShape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub(crate) init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Offsets of an affine map `x W + b` with `W: fan_in x fan_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        mat(p, self.w, self.fan_in, self.fan_out)
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        vec1(p, self.b, self.fan_out)
    }

    pub fn weight_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        mat_mut(p, self.w, self.fan_in, self.fan_out)
    }

    pub fn bias_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        vec1_mut(p, self.b, self.fan_out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockLayout {
    pub cond: Linear,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    pub(crate) embed: Linear,
    pub(crate) pos: usize,
    pub(crate) time1: Linear,
    pub(crate) time2: Linear,
    pub(crate) class: usize,
    pub(crate) blocks: Vec<BlockLayout>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head: Linear,
}

struct Builder {
    entries: Vec<ParamEntry>,
    next: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.next;
        self.next += shape.iter().product::<usize>();
        self.entries.push(ParamEntry {
            name,
            shape,
            offset,
            init,
        });
        offset
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform(1.0 / (fan_in as f64).sqrt())
        };
        let w = self.add(format!("{name}.weight"), vec![fan_in, fan_out], init);
        let b = self.add(format!("{name}.bias"), vec![fan_out], Init::Zeros);
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.gain"), vec![dim], Init::Ones);
        let b = self.add(format!("{name}.bias"), vec![dim], Init::Zeros);
        (g, b)
    }
}

impl ParamLayout {
    pub fn new(cfg: &DenoiserConfig) -> Self {
        let c = cfg.embed_dim;
        let n = cfg.tokens();
        let mut b = Builder {
            entries: Vec::new(),
            next: 0,
        };
        let embed = b.linear("patch_embed", cfg.patch_dim(), c, false);
        let pos = b.add("pos_embed".into(), vec![n, c], Init::Uniform(0.02));
        let time1 = b.linear("time_mlp.0", cfg.time_embed_dim, c, false);
        let time2 = b.linear("time_mlp.1", c, c, false);
        let class = b.add(
            "class_embed".into(),
            vec![cfg.num_classes, c],
            Init::Uniform(0.02),
        );
        let blocks = (0..cfg.depth)
            .map(|k| {
                let p = format!("blocks.{k}");
                let cond = b.linear(&format!("{p}.cond"), c, c, false);
                let (ln1_g, ln1_b) = b.norm(&format!("{p}.norm1"), c);
                let q = b.linear(&format!("{p}.attn.q"), c, c, false);
                let kk = b.linear(&format!("{p}.attn.k"), c, c, false);
                let v = b.linear(&format!("{p}.attn.v"), c, c, false);
                let o = b.linear(&format!("{p}.attn.out"), c, c, false);
                let (ln2_g, ln2_b) = b.norm(&format!("{p}.norm2"), c);
                let fc1 = b.linear(&format!("{p}.mlp.0"), c, cfg.mlp_dim, false);
                let fc2 = b.linear(&format!("{p}.mlp.1"), cfg.mlp_dim, c, false);
                BlockLayout {
                    cond,
                    ln1_g,
                    ln1_b,
                    q,
                    k: kk,
                    v,
                    o,
                    ln2_g,
                    ln2_b,
                    fc1,
                    fc2,
                }
            })
            .collect();
        let (lnf_g, lnf_b) = b.norm("final_norm", c);
        let head = match cfg.input {
            InputShape::Image { .. } => b.linear("head", c, cfg.patch_dim(), true),
            InputShape::Vector { dims, .. } => b.linear("head", n * c, dims, true),
        };
        ParamLayout {
            entries: b.entries,
            embed,
            pos,
            time1,
            time2,
            class,
            blocks,
            lnf_g,
            lnf_b,
            head,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }
}

pub(crate) fn mat(p: &[f64], off: usize, r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), &p[off..off + r * c]).expect("layout slice")
}

pub(crate) fn mat_mut(p: &mut [f64], off: usize, r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), &mut p[off..off + r * c]).expect("layout slice")
}

pub(crate) fn vec1(p: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + n])
}

pub(crate) fn vec1_mut(p: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[off..off + n])
}
