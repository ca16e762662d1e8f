use std::collections::BTreeMap;

use ndarray::ArrayViewMut1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::PerturbOp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HookSite {
    /// The block's hidden tokens, replaced before its self-attention; the
    /// change carries through the residual stream.
    TokenInput,
    /// Only the normalized tokens fed to self-attention; the residual
    /// stream is untouched.
    AttentionInput,
    /// Post-softmax attention weights.
    AttentionMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookPoint {
    pub layer: usize,
    pub site: HookSite,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HookAction {
    TokenPerturb(PerturbOp),
    /// Every token attends only to itself.
    AttentionIdentity,
    /// Gaussian blur of each attention row along the key axis.
    AttentionBlur {
        sigma: f64,
    },
}

impl HookAction {
    fn site(&self) -> HookSite {
        match self {
            HookAction::TokenPerturb(_) => HookSite::TokenInput,
            _ => HookSite::AttentionMap,
        }
    }
}

/// Per-call set of in-flight modifications.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    map: BTreeMap<HookPoint, HookAction>,
}

impl Hooks {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, point: HookPoint, action: HookAction) -> Result<()> {
        let token_site = matches!(point.site, HookSite::TokenInput | HookSite::AttentionInput);
        let fits = match action {
            HookAction::TokenPerturb(_) => token_site,
            _ => point.site == HookSite::AttentionMap,
        };
        if !fits {
            return Err(Error::InvalidConfig(format!(
                "{action:?} cannot be installed at {:?}",
                point.site
            )));
        }
        if let HookAction::AttentionBlur { sigma } = action {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "blur sigma must be positive, got {sigma}"
                )));
            }
        }
        self.map.insert(point, action);
        Ok(())
    }

    /// Installs `action` at its natural site of block `layer`.
    pub fn with(self, layer: usize, action: HookAction) -> Result<Self> {
        let site = action.site();
        self.with_at(layer, site, action)
    }

    pub fn with_at(mut self, layer: usize, site: HookSite, action: HookAction) -> Result<Self> {
        self.insert(HookPoint { layer, site }, action)?;
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn get(&self, layer: usize, site: HookSite) -> Option<&HookAction> {
        self.map.get(&HookPoint { layer, site })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookPoint, &HookAction)> {
        self.map.iter()
    }

    pub(crate) fn validate(&self, depth: usize, tokens: usize) -> Result<()> {
        for (point, action) in &self.map {
            if point.layer >= depth {
                return Err(Error::InvalidHook {
                    layer: point.layer,
                    depth,
                });
            }
            if let HookAction::TokenPerturb(op) = action {
                if op.n() != tokens {
                    return Err(Error::ShapeMismatch(format!(
                        "perturbation over {} tokens installed on a {tokens}-token model",
                        op.n()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Convolves one attention row with a truncated Gaussian (radius `ceil(3 sigma)`,
/// zero outside the key range) and renormalizes it to sum 1. Widths below
/// half a key spacing leave the row untouched.
pub fn blur_attention_row(mut row: ArrayViewMut1<f64>, sigma: f64) {
    if sigma < 0.5 {
        return;
    }
    let n = row.len() as isize;
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let src = row.to_owned();
    let mut total = 0.0;
    for j in 0..n {
        let mut acc = 0.0;
        for (ki, d) in (-radius..=radius).enumerate() {
            let i = j + d;
            if (0..n).contains(&i) {
                acc += kernel[ki] * src[i as usize];
            }
        }
        row[j as usize] = acc;
        total += acc;
    }
    if total > 0.0 {
        row.mapv_inplace(|v| v / total);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn blur_rows_sum_to_one() {
        let mut row = Array1::from(vec![0.7, 0.1, 0.05, 0.05, 0.1]);
        for sigma in [0.5, 1.0, 2.5, 10.0] {
            let mut r = row.clone();
            blur_attention_row(r.view_mut(), sigma);
            assert!((r.sum() - 1.0).abs() < 1e-6);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
        blur_attention_row(row.view_mut(), 1.0);
        assert!(row[0] < 0.7);
    }

    #[test]
    fn tiny_sigma_is_identity() {
        let row = Array1::from(vec![0.2, 0.3, 0.5]);
        let mut r = row.clone();
        blur_attention_row(r.view_mut(), 0.49);
        for (a, b) in r.iter().zip(row.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn site_mismatch_rejected() {
        let mut h = Hooks::none();
        let point = HookPoint {
            layer: 0,
            site: HookSite::TokenInput,
        };
        assert!(h.insert(point, HookAction::AttentionIdentity).is_err());
        let map = HookPoint {
            layer: 0,
            site: HookSite::AttentionMap,
        };
        let op = PerturbOp::identity_shuffle(2);
        assert!(h.insert(map, HookAction::TokenPerturb(op.clone())).is_err());
        let attn_in = HookPoint {
            layer: 0,
            site: HookSite::AttentionInput,
        };
        assert!(h.insert(attn_in, HookAction::TokenPerturb(op)).is_ok());
        assert!(Hooks::none()
            .with(0, HookAction::AttentionBlur { sigma: 0.0 })
            .is_err());
    }

    #[test]
    fn validate_checks_layer_and_size() {
        let op = PerturbOp::identity_shuffle(4);
        let h = Hooks::none().with(2, HookAction::TokenPerturb(op)).unwrap();
        assert!(h.validate(3, 4).is_ok());
        assert!(matches!(
            h.validate(2, 4),
            Err(Error::InvalidHook { layer: 2, depth: 2 })
        ));
        assert!(h.validate(3, 8).is_err());
    }
}
