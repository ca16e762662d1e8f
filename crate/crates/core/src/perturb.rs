//! Norm-preserving perturbations along the token axis.
//!
//! Four operator families act on a `B x N x C` token tensor by left-multiplying
//! every `N x C` slice with an orthonormal `N x N` matrix: a permutation, a
//! random diagonal of signs, the normalized Walsh-Hadamard matrix, or a
//! Haar-distributed orthogonal matrix. Operators are keyed by
//! `(seed, layer, timestep)` so the same site always reproduces the same
//! matrix without storing it.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Domain, SeededRng};

/// Hidden representation with axes `(batch, tokens, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor(Array3<f64>);

impl TokenTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (b, n, c) = data.dim();
        if b == 0 || n == 0 || c == 0 {
            return Err(Error::InvalidSize(format!(
                "token tensor must be non-empty, got {b}x{n}x{c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "token tensor contains non-finite values".into(),
            ));
        }
        Ok(Self(data))
    }

    pub fn batch(&self) -> usize {
        self.0.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.0.dim().1
    }

    pub fn channels(&self) -> usize {
        self.0.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn map_slices(&self, f: impl Fn(ArrayView2<f64>) -> Array2<f64>) -> TokenTensor {
        let mut out = Array3::zeros(self.0.raw_dim());
        for (src, mut dst) in self.0.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&f(src));
        }
        TokenTensor(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    Shuffle,
    SignFlip,
    WalshHadamard,
    HaarOrthogonal,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] = [
        PerturbKind::Shuffle,
        PerturbKind::SignFlip,
        PerturbKind::WalshHadamard,
        PerturbKind::HaarOrthogonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Shuffle => "shuffle",
            PerturbKind::SignFlip => "sign-flip",
            PerturbKind::WalshHadamard => "walsh-hadamard",
            PerturbKind::HaarOrthogonal => "haar-orthogonal",
        }
    }
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(PerturbKind::Shuffle),
            "sign-flip" | "signflip" => Ok(PerturbKind::SignFlip),
            "walsh-hadamard" | "wht" | "hadamard" => Ok(PerturbKind::WalshHadamard),
            "haar-orthogonal" | "haar" => Ok(PerturbKind::HaarOrthogonal),
            other => Err(Error::InvalidConfig(format!(
                "unknown perturbation kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Permutation(Vec<usize>),
    Signs(Vec<f64>),
    Hadamard,
    Dense(Array2<f64>),
}

/// A materialized orthonormal operator on the token axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbOp {
    kind: PerturbKind,
    n: usize,
    seed: u64,
    payload: Payload,
}

impl PerturbOp {
    /// Operator for block `layer` at diffusion step `timestep`.
    pub fn for_site(
        kind: PerturbKind,
        n: usize,
        seed: u64,
        layer: usize,
        timestep: usize,
    ) -> Result<Self> {
        let mut rng = SeededRng::new(seed, Domain::Perturb, layer as u64, timestep as u64);
        let mut op = Self::from_rng(kind, n, &mut rng)?;
        op.seed = seed;
        Ok(op)
    }

    pub fn from_rng(kind: PerturbKind, n: usize, rng: &mut SeededRng) -> Result<Self> {
        let payload = match kind {
            PerturbKind::Shuffle => Payload::Permutation(make_permutation(n, rng)?),
            PerturbKind::SignFlip => Payload::Signs(make_sign_flip(n, rng)?),
            PerturbKind::WalshHadamard => {
                check_power_of_two(n)?;
                Payload::Hadamard
            }
            PerturbKind::HaarOrthogonal => Payload::Dense(make_haar(n, rng)?),
        };
        Ok(Self {
            kind,
            n,
            seed: 0,
            payload,
        })
    }

    pub fn identity_shuffle(n: usize) -> Self {
        Self {
            kind: PerturbKind::Shuffle,
            n,
            seed: 0,
            payload: Payload::Permutation((0..n).collect()),
        }
    }

    pub fn kind(&self) -> PerturbKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    /// Explicit `n x n` matrix `P` such that applying the operator computes `P H`.
    pub fn matrix(&self) -> Array2<f64> {
        let n = self.n;
        match &self.payload {
            Payload::Permutation(perm) => {
                let mut m = Array2::zeros((n, n));
                for (j, &src) in perm.iter().enumerate() {
                    m[[j, src]] = 1.0;
                }
                m
            }
            Payload::Signs(d) => Array2::from_diag(&ndarray::Array1::from(d.clone())),
            Payload::Hadamard => hadamard_matrix(n),
            Payload::Dense(q) => q.clone(),
        }
    }

    /// Applies the operator to one `N x C` slice in place.
    pub fn apply_slice(&self, mut h: ArrayViewMut2<f64>) -> Result<()> {
        if h.nrows() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "operator over {} tokens applied to {} tokens",
                self.n,
                h.nrows()
            )));
        }
        match &self.payload {
            Payload::Permutation(perm) => {
                let src = h.to_owned();
                for (j, &p) in perm.iter().enumerate() {
                    h.row_mut(j).assign(&src.row(p));
                }
            }
            Payload::Signs(d) => {
                for (mut row, &s) in h.outer_iter_mut().zip(d) {
                    row *= s;
                }
            }
            Payload::Hadamard => wht_rows(&mut h),
            Payload::Dense(q) => {
                let out = q.dot(&h);
                h.assign(&out);
            }
        }
        Ok(())
    }

    pub fn apply(&self, h: &TokenTensor) -> Result<TokenTensor> {
        let mut out = h.0.clone();
        for slice in out.axis_iter_mut(Axis(0)) {
            self.apply_slice(slice)?;
        }
        Ok(TokenTensor(out))
    }
}

fn check_size(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidSize(
            "operator size must be at least 1".into(),
        ))
    } else {
        Ok(())
    }
}

fn check_power_of_two(n: usize) -> Result<()> {
    if n.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::NotPowerOfTwo(n))
    }
}

fn check_tokens(h: &TokenTensor, n: usize) -> Result<()> {
    if h.tokens() != n {
        return Err(Error::ShapeMismatch(format!(
            "operator over {n} tokens applied to tensor with {} tokens",
            h.tokens()
        )));
    }
    Ok(())
}

/// Uniform Fisher-Yates permutation of `0..n`.
pub fn make_permutation(n: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    check_size(n)?;
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        perm.swap(i, j);
    }
    Ok(perm)
}

/// Row `j` of the output is row `perm[j]` of the input.
pub fn apply_shuffle(h: &TokenTensor, perm: &[usize]) -> Result<TokenTensor> {
    check_tokens(h, perm.len())?;
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidPermutation(format!(
                "index {p} repeated or out of range in {perm:?}"
            )));
        }
    }
    Ok(h.map_slices(|s| s.select(Axis(0), perm)))
}

/// Independent uniform signs; the top bit of each draw picks the sign.
pub fn make_sign_flip(n: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    check_size(n)?;
    Ok((0..n)
        .map(|_| {
            if rand::RngCore::next_u64(rng) >> 63 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect())
}

pub fn apply_sign_flip(h: &TokenTensor, d: &[f64]) -> Result<TokenTensor> {
    check_tokens(h, d.len())?;
    Ok(h.map_slices(|s| {
        let mut out = s.to_owned();
        for (mut row, &sign) in out.outer_iter_mut().zip(d) {
            row *= sign;
        }
        out
    }))
}

/// In-place normalized Walsh-Hadamard transform along the rows of `h`.
///
/// `log2(N)` butterfly stages; stage `s` combines rows `j` and `j + 2^(s-1)`
/// into their sum and difference, then a single `1/sqrt(N)` scale.
fn wht_rows(h: &mut ArrayViewMut2<f64>) {
    let n = h.nrows();
    let mut half = 1;
    while half < n {
        for start in (0..n).step_by(2 * half) {
            for j in start..start + half {
                let (mut top, mut bottom) =
                    h.multi_slice_mut((ndarray::s![j, ..], ndarray::s![j + half, ..]));
                ndarray::Zip::from(&mut top)
                    .and(&mut bottom)
                    .for_each(|a, b| {
                        let (x, y) = (*a, *b);
                        *a = x + y;
                        *b = x - y;
                    });
            }
        }
        half *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    h.mapv_inplace(|v| v * scale);
}

pub fn apply_wht(h: &TokenTensor) -> Result<TokenTensor> {
    check_power_of_two(h.tokens())?;
    let mut out = h.0.clone();
    for mut slice in out.axis_iter_mut(Axis(0)) {
        wht_rows(&mut slice);
    }
    Ok(TokenTensor(out))
}

/// Sylvester-ordered normalized Hadamard matrix, entries `(-1)^popcount(i & j) / sqrt(n)`.
pub fn hadamard_matrix(n: usize) -> Array2<f64> {
    let scale = 1.0 / (n as f64).sqrt();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if (i & j).count_ones() % 2 == 0 {
            scale
        } else {
            -scale
        }
    })
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// columns of `Q` multiplied by the signs of `diag(R)`.
///
/// For `n = 1` the group `O(1) = {+1, -1}` is pinned to `+1`.
pub fn make_haar(n: usize, rng: &mut SeededRng) -> Result<Array2<f64>> {
    check_size(n)?;
    if n == 1 {
        return Ok(Array2::ones((1, 1)));
    }
    for _attempt in 0..2 {
        let draws = rng.normals(n * n);
        let qr = DMatrix::from_row_iterator(n, n, draws).qr();
        let r = qr.r();
        if (0..n).any(|i| r[(i, i)].abs() < 1e-12 || !r[(i, i)].is_finite()) {
            continue;
        }
        let q = qr.q();
        return Ok(Array2::from_shape_fn((n, n), |(i, j)| {
            q[(i, j)] * r[(j, j)].signum()
        }));
    }
    Err(Error::DecompositionFailed(format!(
        "rank-deficient Gaussian sample for n = {n} twice in a row"
    )))
}

pub fn apply_orthogonal(h: &TokenTensor, q: &Array2<f64>) -> Result<TokenTensor> {
    if q.nrows() != q.ncols() || q.nrows() != h.tokens() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} matrix applied to {} tokens",
            q.nrows(),
            q.ncols(),
            h.tokens()
        )));
    }
    Ok(h.map_slices(|s| q.dot(&s)))
}
