//! TOML run configuration. Every key has a default; unknown keys are
//! rejected. Any key can be overridden on the command line with
//! `--set section.key=value`.

use std::path::{Path, PathBuf};

use glab_core::analysis::{RadialBinning, SweepConfig};
use glab_core::data::{self, DataShape, Dataset};
use glab_core::denoiser::{DenoiserConfig, HookSite, InputShape, TrainConfig};
use glab_core::diffusion::DiffusionConfig;
use glab_core::guidance::{Condition, GuidanceConfig, Method, SampleRun, Solver};
use glab_core::perturb::PerturbKind;
use glab_core::rng::derive_seed;
use glab_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// 2-D Gaussian mixture written as `points.csv`.
    Mixture,
    /// Synthetic grayscale shapes written as P5 + `labels.tsv`.
    Shapes,
    /// An existing directory of P5 images and `labels.tsv`.
    Images,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Dataset directory; empty means `<out_dir>/data`.
    pub dir: String,
    pub n_modes: usize,
    pub n_per_mode: usize,
    pub spread: f64,
    pub n_per_class: usize,
    pub size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Mixture,
            dir: String::new(),
            n_modes: 8,
            n_per_mode: 250,
            spread: 0.05,
            n_per_class: 64,
            size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Token count for vector data.
    pub tokens: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            tokens: 8,
            patch_size: d.patch_size,
            embed_dim: d.embed_dim,
            depth: d.depth,
            heads: d.heads,
            mlp_dim: d.mlp_dim,
            time_embed_dim: d.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout_p: f64,
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            cond_dropout_p: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub method: Method,
    /// Unset means the method's default scale.
    pub gamma: Option<f64>,
    /// Unset means the middle third of the blocks.
    pub layers: Option<Vec<usize>>,
    pub perturb_kind: PerturbKind,
    pub perturb_site: HookSite,
    pub seg_sigma: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            method: g.method,
            gamma: None,
            layers: None,
            perturb_kind: g.perturb_kind,
            perturb_site: g.perturb_site,
            seg_sigma: g.seg_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub solver: Solver,
    pub steps: usize,
    pub batch: usize,
    pub condition: Condition,
    /// Snapshots per trajectory strip.
    pub strip_length: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            solver: Solver::Ddim,
            steps: 50,
            batch: 256,
            condition: Condition::Null,
            strip_length: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub methods: Vec<Method>,
    /// Explicit probe steps; empty means `n_timesteps` evenly spaced.
    pub timesteps: Vec<usize>,
    pub n_timesteps: usize,
    pub n_samples: usize,
    pub conditional: bool,
    pub n_bins: usize,
    pub max_radius: f64,
    /// Pixels per heatmap cell.
    pub heatmap_scale: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let sc = SweepConfig::default();
        Self {
            methods: vec![Method::Cfg, Method::Tpg, Method::Pag, Method::Seg],
            timesteps: Vec::new(),
            n_timesteps: sc.n_timesteps,
            n_samples: sc.n_samples,
            conditional: sc.conditional,
            n_bins: sc.binning.n_bins,
            max_radius: sc.binning.max_radius,
            heatmap_scale: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub n_samples: usize,
    /// Size of the freshly generated reference set (per mode or class).
    pub held_out_per_class: usize,
    /// RBF bandwidth; 0 picks the median pairwise distance.
    pub bandwidth: f64,
    pub gamma: f64,
    pub condition: Condition,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            n_samples: 500,
            held_out_per_class: 125,
            bandwidth: 0.1,
            gamma: Method::Tpg.default_gamma(),
            condition: Condition::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; fans out into named substreams.
    pub seed: u64,
    pub out_dir: String,
    pub data: DataSection,
    pub model: ModelSection,
    pub diffusion: DiffusionConfig,
    pub train: TrainSection,
    pub guidance: GuidanceSection,
    pub sample: SampleSection,
    pub analysis: AnalysisSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "glab-out".into(),
            data: DataSection::default(),
            model: ModelSection::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainSection::default(),
            guidance: GuidanceSection::default(),
            sample: SampleSection::default(),
            analysis: AnalysisSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words such as `tpg` are not TOML; treat them as strings.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads an optional TOML file, then applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Format {
                    path: p.to_path_buf(),
                    msg: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))
    }

    /// Every key with its default, one `key = value` per line.
    pub fn documented_defaults() -> String {
        let value = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.push("guidance.gamma = <method default: cfg 5, tpg/pag/seg 3>".into());
        lines.push("guidance.layers = <middle third of the blocks>".into());
        lines.sort();
        lines.join("\n")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data.dir.is_empty() {
            self.out_dir().join("data")
        } else {
            PathBuf::from(&self.data.dir)
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir().join("model.ckpt")
    }

    pub fn named_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }

    pub fn generate_data(&self, seed: u64, per_class: Option<usize>) -> Result<Dataset> {
        let d = &self.data;
        match d.kind {
            DataKind::Mixture => data::gen_gaussian_mixture(
                d.n_modes,
                per_class.unwrap_or(d.n_per_mode),
                d.spread,
                seed,
            ),
            DataKind::Shapes => data::gen_shapes(per_class.unwrap_or(d.n_per_class), d.size, seed),
            DataKind::Images => Err(Error::InvalidConfig(
                "data.kind = \"images\" reads an existing directory; nothing to generate".into(),
            )),
        }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        match self.data.kind {
            DataKind::Mixture => data::load_points(&dir.join("points.csv")),
            DataKind::Shapes | DataKind::Images => {
                data::load_images(&dir, self.data.size, self.data.size)
            }
        }
    }

    pub fn denoiser_config(&self, data: &Dataset) -> DenoiserConfig {
        let m = &self.model;
        let (input, patch_size) = match data.shape() {
            DataShape::Image {
                height,
                width,
                channels,
            } => (
                InputShape::Image {
                    height,
                    width,
                    channels,
                },
                m.patch_size,
            ),
            DataShape::Vector { dims } => (
                InputShape::Vector {
                    dims,
                    tokens: m.tokens,
                },
                1,
            ),
        };
        DenoiserConfig {
            input,
            patch_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            mlp_dim: m.mlp_dim,
            num_classes: data.num_labels() + 1,
            time_embed_dim: m.time_embed_dim,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            cond_dropout_p: t.cond_dropout_p,
            seed: self.named_seed("train"),
            grad_clip: t.grad_clip,
        }
    }

    pub fn guidance_config(&self, method: Method) -> GuidanceConfig {
        let g = &self.guidance;
        GuidanceConfig {
            method,
            gamma: g.gamma.unwrap_or(method.default_gamma()),
            layers: g.layers.clone(),
            perturb_kind: g.perturb_kind,
            perturb_site: g.perturb_site,
            seg_sigma: g.seg_sigma,
            seed: self.named_seed("perturb"),
        }
    }

    pub fn sample_run(&self) -> SampleRun {
        let s = &self.sample;
        SampleRun {
            solver: s.solver,
            steps: s.steps,
            batch: s.batch,
            condition: s.condition,
            seed: self.named_seed("sample"),
            record_trajectory: false,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let a = &self.analysis;
        SweepConfig {
            timesteps: a.timesteps.clone(),
            n_timesteps: a.n_timesteps,
            n_samples: a.n_samples,
            seed: self.named_seed("analysis"),
            conditional: a.conditional,
            binning: RadialBinning {
                n_bins: a.n_bins,
                max_radius: a.max_radius,
            },
        }
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::load(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let o = [
            "seed=5".to_string(),
            "guidance.method=pag".into(),
            "guidance.layers=[0, 1]".into(),
            "train.lr=0.01".into(),
            "sample.condition=3".into(),
        ];
        let c = RunConfig::load(None, &o).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.guidance.method, Method::Pag);
        assert_eq!(c.guidance.layers, Some(vec![0, 1]));
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.sample.condition, Condition::Class(3));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["train.lrr=0.1".into()]).is_err());
        assert!(RunConfig::load(None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn file_and_overrides_combine() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 3\n[data]\nkind = \"shapes\"\n").unwrap();
        let c = RunConfig::load(Some(&p), &["seed=4".into()]).unwrap();
        assert_eq!((c.seed, c.data.kind), (4, DataKind::Shapes));
    }

    #[test]
    fn defaults_document_every_section() {
        let doc = RunConfig::documented_defaults();
        for key in [
            "seed = 0",
            "data.kind = \"mixture\"",
            "model.depth = 6",
            "diffusion.steps = 1000",
            "train.cond_dropout_p = 0.1",
            "guidance.perturb_site = \"token-input\"",
            "sample.condition = \"null\"",
            "analysis.n_bins = 29",
            "ablate.n_samples = 500",
            "guidance.gamma",
        ] {
            assert!(doc.contains(key), "missing {key}:\n{doc}");
        }
    }
}
