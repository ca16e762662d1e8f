//! Guidance-residual statistics and a kernel two-sample metric.
//!
//! The residual `delta = eps_pos - eps_neg` is measured against the true
//! noise of a freshly noised clean sample, globally and per radial
//! frequency band. Frequencies are in cycles per sample on each axis, in
//! `[-0.5, 0.5)`, so the largest radius is `sqrt(0.5)`.

use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::{DataShape, Dataset};
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{eps_pair, EpsModel, GuidanceConfig, Method};
use crate::rng::{splitmix64, Domain, SeededRng};

/// Norms below this make a cosine undefined; such cosines are reported as 0.
pub const COSINE_FLOOR: f64 = 1e-12;

/// Cosine of the flattened arrays and whether it was undefined.
pub fn cosine_checked(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok(ratio(dot, na, nb))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_checked(a, b).map(|(c, _)| c)
}

fn ratio(dot: f64, na2: f64, nb2: f64) -> (f64, bool) {
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    if na < COSINE_FLOOR || nb < COSINE_FLOOR {
        return (0.0, true);
    }
    ((dot / (na * nb)).clamp(-1.0, 1.0), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadialBinning {
    pub n_bins: usize,
    pub max_radius: f64,
}

impl Default for RadialBinning {
    fn default() -> Self {
        Self {
            n_bins: 29,
            max_radius: 0.7,
        }
    }
}

impl RadialBinning {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::InvalidConfig("n_bins must be at least 1".into()));
        }
        if !(self.max_radius > 0.0 && self.max_radius <= std::f64::consts::SQRT_2) {
            return Err(Error::InvalidConfig(format!(
                "max_radius must lie in (0, sqrt 2], got {}",
                self.max_radius
            )));
        }
        Ok(())
    }

    /// Bin of a radius, or `None` for the leftover band.
    pub fn bin_of(&self, r: f64) -> Option<usize> {
        if r >= self.max_radius {
            return None;
        }
        let width = self.max_radius / self.n_bins as f64;
        Some(((r / width) as usize).min(self.n_bins - 1))
    }

    /// Bin of every coefficient of an `h x w` spectrum.
    pub fn assignment(&self, h: usize, w: usize) -> Array2<Option<usize>> {
        Array2::from_shape_fn((h, w), |(ky, kx)| {
            let (fy, fx) = (frequency(ky, h), frequency(kx, w));
            self.bin_of((fx * fx + fy * fy).sqrt())
        })
    }
}

/// Signed frequency of FFT index `k` of an `n`-point transform.
pub fn frequency(k: usize, n: usize) -> f64 {
    let f = k as f64 / n as f64;
    if f >= 0.5 {
        f - 1.0
    } else {
        f
    }
}

struct Fft2 {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
    h: usize,
    w: usize,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows: planner.plan_fft_forward(w),
            cols: planner.plan_fft_forward(h),
            rows_inv: planner.plan_fft_inverse(w),
            cols_inv: planner.plan_fft_inverse(h),
            h,
            w,
        }
    }

    fn run(&self, data: &mut Array2<Complex64>, inverse: bool) {
        let (rows, cols) = if inverse {
            (&self.rows_inv, &self.cols_inv)
        } else {
            (&self.rows, &self.cols)
        };
        for mut row in data.rows_mut() {
            let mut buf: Vec<Complex64> = row.to_vec();
            rows.process(&mut buf);
            row.assign(&ndarray::Array1::from(buf));
        }
        for mut col in data.columns_mut() {
            let mut buf: Vec<Complex64> = col.to_vec();
            cols.process(&mut buf);
            col.assign(&ndarray::Array1::from(buf));
        }
        if inverse {
            let k = 1.0 / (self.h * self.w) as f64;
            data.mapv_inplace(|z| z * k);
        }
    }

    fn forward(&self, field: ArrayView2<f64>) -> Array2<Complex64> {
        let mut spec = field.mapv(|v| Complex64::new(v, 0.0));
        self.run(&mut spec, false);
        spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandDecomposition {
    pub bands: Vec<Array2<f64>>,
    pub leftover: Array2<f64>,
}

/// Splits a 2-D field into radial frequency bands whose sum, plus the
/// leftover band, reconstructs the field.
pub fn radial_band_decompose(
    field: &Array2<f64>,
    binning: &RadialBinning,
) -> Result<BandDecomposition> {
    binning.validate()?;
    let (h, w) = field.dim();
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!(
            "band decomposition needs at least 2x2, got {h}x{w}"
        )));
    }
    let fft = Fft2::new(h, w);
    let spec = fft.forward(field.view());
    let assign = binning.assignment(h, w);
    let band = |target: Option<usize>| {
        let mut masked = Array2::from_shape_fn((h, w), |idx| {
            if assign[idx] == target {
                spec[idx]
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        fft.run(&mut masked, true);
        masked.mapv(|z| z.re)
    };
    Ok(BandDecomposition {
        bands: (0..binning.n_bins).map(|b| band(Some(b))).collect(),
        leftover: band(None),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandStats {
    /// Per-bin cosine between the two band fields.
    pub cos: Vec<f64>,
    /// Per-bin raw l2 norm of the first field's band.
    pub norm: Vec<f64>,
    pub leftover_norm: f64,
    /// Bins whose cosine was undefined.
    pub degenerate: Vec<bool>,
}

/// Band-wise cosine and norm for `(B, H, W, C)` fields, each band
/// flattened over batch, space and channels. Computed in the frequency
/// domain: bands are real and disjoint, so inner products of band fields
/// are masked spectral inner products divided by `H * W`.
pub fn band_cosine_and_norm(
    delta: &Array4<f64>,
    eps: &Array4<f64>,
    binning: &RadialBinning,
) -> Result<BandStats> {
    binning.validate()?;
    if delta.dim() != eps.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            delta.dim(),
            eps.dim()
        )));
    }
    let (b, h, w, c) = delta.dim();
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!(
            "band statistics need at least 2x2, got {h}x{w}"
        )));
    }
    let fft = Fft2::new(h, w);
    let assign = binning.assignment(h, w);
    let slots = binning.n_bins + 1;
    let mut dot = vec![0.0; slots];
    let mut na = vec![0.0; slots];
    let mut nb = vec![0.0; slots];
    for s in 0..b {
        for ch in 0..c {
            let fa = fft.forward(delta.index_axis(Axis(0), s).index_axis(Axis(2), ch));
            let fb = fft.forward(eps.index_axis(Axis(0), s).index_axis(Axis(2), ch));
            for ((idx, za), zb) in fa.indexed_iter().zip(fb.iter()) {
                let slot = assign[idx].unwrap_or(binning.n_bins);
                dot[slot] += (za * zb.conj()).re;
                na[slot] += za.norm_sqr();
                nb[slot] += zb.norm_sqr();
            }
        }
    }
    let scale = 1.0 / (h * w) as f64;
    let mut stats = BandStats {
        cos: Vec::with_capacity(binning.n_bins),
        norm: Vec::with_capacity(binning.n_bins),
        leftover_norm: (na[binning.n_bins] * scale).sqrt(),
        degenerate: Vec::with_capacity(binning.n_bins),
    };
    for k in 0..binning.n_bins {
        let (cs, flagged) = ratio(dot[k] * scale, na[k] * scale, nb[k] * scale);
        stats.cos.push(cs);
        stats.norm.push((na[k] * scale).sqrt());
        stats.degenerate.push(flagged);
    }
    Ok(stats)
}

/// Result of noising a clean batch once and querying both predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub delta: Array2<f64>,
    pub eps: Array2<f64>,
    pub eps_pos: Array2<f64>,
}

/// Draws fresh noise for every row of `x0` from `rng`, noises to step `t`
/// and returns `eps_pos - eps_neg` with the noise used. Unguided methods
/// give a zero residual.
pub fn residual_at<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
    x0: &Array2<f64>,
    t: usize,
    classes: &[usize],
    rng: &mut SeededRng,
) -> Result<Residual> {
    let eps = Array2::from_shape_vec(x0.raw_dim(), rng.normals(x0.len())).expect("sized");
    residual_with_noise(model, sched, gcfg, x0, t, classes, eps)
}

fn residual_with_noise<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
    x0: &Array2<f64>,
    t: usize,
    classes: &[usize],
    eps: Array2<f64>,
) -> Result<Residual> {
    let x_t = forward_noise(x0, t, &eps, sched)?;
    let (pos, neg) = eps_pair(model, &x_t, t, classes, gcfg)?;
    let delta = match neg {
        Some(neg) => &pos - &neg,
        None => Array2::zeros(pos.raw_dim()),
    };
    Ok(Residual {
        delta,
        eps,
        eps_pos: pos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Steps to probe; empty picks `n_timesteps` evenly spaced ones.
    pub timesteps: Vec<usize>,
    pub n_timesteps: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Condition on each sample's label; otherwise use the null class.
    pub conditional: bool,
    pub binning: RadialBinning,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            timesteps: Vec::new(),
            n_timesteps: 20,
            n_samples: 100,
            seed: 0,
            conditional: true,
            binning: RadialBinning::default(),
        }
    }
}

impl SweepConfig {
    /// Probe steps in descending order.
    pub fn resolved_timesteps(&self, total: usize) -> Result<Vec<usize>> {
        let mut ts = if self.timesteps.is_empty() {
            if self.n_timesteps == 0 {
                return Err(Error::InvalidConfig(
                    "sweep needs at least one timestep".into(),
                ));
            }
            crate::diffusion::sampling_timesteps(total, self.n_timesteps.min(total))?
        } else {
            self.timesteps.clone()
        };
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > total) {
            return Err(Error::InvalidStep(format!(
                "sweep timestep {t} outside 1..={total}"
            )));
        }
        ts.sort_unstable_by(|a, b| b.cmp(a));
        ts.dedup();
        Ok(ts)
    }
}

/// Sweep results. Row `i` of every matrix is `timesteps[i]`; global
/// matrices have one column per method, band matrices one per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisGrid {
    pub timesteps: Vec<usize>,
    pub methods: Vec<Method>,
    pub cos_global: Array2<f64>,
    /// Cosine of the full guided prediction against the true noise.
    pub cos_guided: Array2<f64>,
    pub norm_global: Array2<f64>,
    /// Empty for non-image data.
    pub cos_bands: Vec<Array2<f64>>,
    pub norm_bands: Vec<Array2<f64>>,
    /// Cosines that were undefined and reported as 0.
    pub degenerate: usize,
}

/// Order-independent identity of a sample: hashes its values and label.
pub fn sample_key(values: &[f64], label: usize) -> u64 {
    values.iter().fold(splitmix64(label as u64), |acc, v| {
        splitmix64(acc ^ v.to_bits())
    })
}

/// Averages residual statistics over `n_samples` dataset samples at every
/// probe step for every method. Samples are chosen and reduced in order of
/// their content hash, and each one's noise at step `t` comes from stream
/// `(seed, Analysis, key, t)`, so results do not depend on dataset order.
pub fn sweep<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    data: &Dataset,
    methods: &[GuidanceConfig],
    sc: &SweepConfig,
) -> Result<AnalysisGrid> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one method".into(),
        ));
    }
    if sc.n_samples == 0 || sc.n_samples > data.len() {
        return Err(Error::InvalidConfig(format!(
            "n_samples {} must lie in 1..={}",
            sc.n_samples,
            data.len()
        )));
    }
    sc.binning.validate()?;
    for g in methods {
        g.validate(model)?;
    }
    let ts = sc.resolved_timesteps(sched.steps())?;

    let mut keyed: Vec<(u64, usize)> = (0..data.len())
        .map(|i| {
            (
                sample_key(
                    data.sample(i).as_slice().expect("row-major"),
                    data.labels()[i],
                ),
                i,
            )
        })
        .collect();
    keyed.sort_by_key(|&(k, i)| (k, data.labels()[i]));
    keyed.truncate(sc.n_samples);
    let rows: Vec<usize> = keyed.iter().map(|&(_, i)| i).collect();
    let x0 = data.samples().select(Axis(0), &rows);
    let classes: Vec<usize> = if sc.conditional {
        rows.iter().map(|&i| data.labels()[i]).collect()
    } else {
        vec![model.null_class(); rows.len()]
    };
    let image = match data.shape() {
        DataShape::Image {
            height,
            width,
            channels,
        } => Some((height, width, channels)),
        DataShape::Vector { .. } => None,
    };

    let (nt, nm, nb) = (ts.len(), methods.len(), sc.binning.n_bins);
    let mut grid = AnalysisGrid {
        timesteps: ts.clone(),
        methods: methods.iter().map(|g| g.method).collect(),
        cos_global: Array2::zeros((nt, nm)),
        cos_guided: Array2::zeros((nt, nm)),
        norm_global: Array2::zeros((nt, nm)),
        cos_bands: Vec::new(),
        norm_bands: Vec::new(),
        degenerate: 0,
    };
    if image.is_some() {
        grid.cos_bands = vec![Array2::zeros((nt, nb)); nm];
        grid.norm_bands = vec![Array2::zeros((nt, nb)); nm];
    }
    let n = rows.len() as f64;
    for (ti, &t) in ts.iter().enumerate() {
        let mut eps = Array2::zeros(x0.raw_dim());
        for (r, &(key, _)) in keyed.iter().enumerate() {
            let mut rng = SeededRng::new(sc.seed, Domain::Analysis, key, t as u64);
            eps.row_mut(r)
                .assign(&ndarray::Array1::from(rng.normals(x0.ncols())));
        }
        for (mi, g) in methods.iter().enumerate() {
            let res = residual_with_noise(model, sched, g, &x0, t, &classes, eps.clone())?;
            let guided = &res.eps_pos + &(&res.delta * g.gamma);
            let (mut cg, mut cgd, mut ng) = (0.0, 0.0, 0.0);
            let mut band_cos = vec![0.0; nb];
            let mut band_norm = vec![0.0; nb];
            for r in 0..rows.len() {
                let d = res.delta.row(r);
                let e = res.eps.row(r);
                let (c, flagged) =
                    cosine_checked(d.as_slice().expect("row"), e.as_slice().expect("row"))?;
                grid.degenerate += usize::from(flagged);
                cg += c;
                let (c2, flagged2) = cosine_checked(
                    guided.row(r).as_slice().expect("row"),
                    e.as_slice().expect("row"),
                )?;
                grid.degenerate += usize::from(flagged2);
                cgd += c2;
                ng += d.dot(&d).sqrt();
                if let Some((h, w, c)) = image {
                    let da = d
                        .to_owned()
                        .into_shape_with_order((1, h, w, c))
                        .expect("image row");
                    let ea = e
                        .to_owned()
                        .into_shape_with_order((1, h, w, c))
                        .expect("image row");
                    let st = band_cosine_and_norm(&da, &ea, &sc.binning)?;
                    for k in 0..nb {
                        band_cos[k] += st.cos[k];
                        band_norm[k] += st.norm[k];
                    }
                }
            }
            grid.cos_global[[ti, mi]] = cg / n;
            grid.cos_guided[[ti, mi]] = cgd / n;
            grid.norm_global[[ti, mi]] = ng / n;
            if image.is_some() {
                for k in 0..nb {
                    grid.cos_bands[mi][[ti, k]] = band_cos[k] / n;
                    grid.norm_bands[mi][[ti, k]] = band_norm[k] / n;
                }
            }
        }
    }
    Ok(grid)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(a: &Array2<f64>, b: &Array2<f64>, bandwidth: f64) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "mmd of widths {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    Ok(())
}

/// Fixes an argument order so that swapping the sets replays the same
/// floating-point operations.
fn canonical<'a>(a: &'a Array2<f64>, b: &'a Array2<f64>) -> (&'a Array2<f64>, &'a Array2<f64>) {
    let ka = (a.nrows(), a.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let kb = (b.nrows(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    if kb < ka {
        (b, a)
    } else {
        (a, b)
    }
}

struct KernelSums {
    within_a: f64,
    within_b: f64,
    diag_a: f64,
    diag_b: f64,
    cross: f64,
}

fn kernel_sums(a: &Array2<f64>, b: &Array2<f64>, h: f64) -> KernelSums {
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * h * h)).exp();
    let rows =
        |m: &Array2<f64>| -> Vec<Vec<f64>> { m.rows().into_iter().map(|r| r.to_vec()).collect() };
    let (ra, rb) = (rows(a), rows(b));
    let within = |r: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..r.len() {
            for j in (i + 1)..r.len() {
                s += k(&r[i], &r[j]);
            }
        }
        2.0 * s
    };
    let mut cross = 0.0;
    for x in &ra {
        for y in &rb {
            cross += k(x, y);
        }
    }
    KernelSums {
        within_a: within(&ra),
        within_b: within(&rb),
        diag_a: ra.len() as f64,
        diag_b: rb.len() as f64,
        cross,
    }
}

/// Unbiased squared MMD with an RBF kernel `exp(-|x-y|^2 / (2 h^2))`.
/// Can be slightly negative when the sets are close. Each set needs at
/// least two samples.
pub fn mmd(a: &Array2<f64>, b: &Array2<f64>, bandwidth: f64) -> Result<f64> {
    check_sets(a, b, bandwidth)?;
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidConfig(
            "unbiased MMD needs at least two samples per set".into(),
        ));
    }
    let (a, b) = canonical(a, b);
    let s = kernel_sums(a, b, bandwidth);
    let (m, n) = (a.nrows() as f64, b.nrows() as f64);
    Ok(s.within_a / (m * (m - 1.0)) + s.within_b / (n * (n - 1.0)) - 2.0 * s.cross / (m * n))
}

/// Biased (V-statistic) squared MMD; always nonnegative up to rounding.
pub fn mmd_biased(a: &Array2<f64>, b: &Array2<f64>, bandwidth: f64) -> Result<f64> {
    check_sets(a, b, bandwidth)?;
    let (a, b) = canonical(a, b);
    let s = kernel_sums(a, b, bandwidth);
    let (m, n) = (a.nrows() as f64, b.nrows() as f64);
    Ok(
        (s.within_a + s.diag_a) / (m * m) + (s.within_b + s.diag_b) / (n * n)
            - 2.0 * s.cross / (m * n),
    )
}

/// Median pairwise distance over the pooled sets.
pub fn median_bandwidth(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "widths {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let pooled: Vec<Vec<f64>> = a
        .rows()
        .into_iter()
        .chain(b.rows())
        .map(|r| r.to_vec())
        .collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            d.push(sq_dist(&pooled[i], &pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    Ok(if med > 0.0 { med } else { 1.0 })
}
