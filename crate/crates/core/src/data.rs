//! Synthetic datasets and small-image ingestion.
//!
//! Images live on disk as binary graymaps (`P5`, maxval 255) next to a
//! `labels.tsv` of `filename<TAB>class` rows; pixels map affinely onto
//! `[-1, 1]`. Two-dimensional point sets are stored as `points.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::rng::{Domain, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Vector {
        dims: usize,
    },
}

impl DataShape {
    pub fn sample_dim(&self) -> usize {
        match *self {
            DataShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            DataShape::Vector { dims } => dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Array2<f64>,
    labels: Vec<usize>,
    shape: DataShape,
    num_labels: usize,
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(
        samples: Array2<f64>,
        labels: Vec<usize>,
        shape: DataShape,
        num_labels: usize,
    ) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if samples.ncols() != shape.sample_dim() || labels.len() != samples.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples of width {} with {} labels for shape {shape:?}",
                samples.nrows(),
                samples.ncols(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::InvalidConfig(format!(
                "label {l} outside 0..{num_labels}"
            )));
        }
        Ok(Self {
            samples,
            labels,
            shape,
            num_labels,
            meta: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.samples.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn shape(&self) -> DataShape {
        self.shape
    }

    /// Number of real classes; a model adds one null class on top.
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Fisher-Yates order of all indices for one epoch.
    pub fn shuffled_indices(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = SeededRng::new(seed, Domain::DataOrder, epoch as u64, 0);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = self.samples.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut d = Dataset::new(samples, labels, self.shape, self.num_labels)?;
        d.meta = self.meta.clone();
        Ok(d)
    }
}

/// Points from `n_modes` isotropic Gaussians with means evenly spaced on the
/// unit circle (mode `k` at angle `2 pi k / n_modes`), grouped by mode.
pub fn gen_gaussian_mixture(
    n_modes: usize,
    n_per_mode: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_modes == 0 || n_per_mode == 0 {
        return Err(Error::InvalidConfig(
            "mixture needs at least one mode and one point per mode".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "spread must be >= 0, got {spread}"
        )));
    }
    let mut rng = SeededRng::new(seed, Domain::Data, 0, 0);
    let mut samples = Array2::zeros((n_modes * n_per_mode, 2));
    let mut labels = Vec::with_capacity(n_modes * n_per_mode);
    for k in 0..n_modes {
        let (cx, cy) = mixture_mean(k, n_modes);
        for i in 0..n_per_mode {
            let row = k * n_per_mode + i;
            samples[[row, 0]] = cx + spread * rng.normal();
            samples[[row, 1]] = cy + spread * rng.normal();
            labels.push(k);
        }
    }
    let mut d = Dataset::new(samples, labels, DataShape::Vector { dims: 2 }, n_modes)?;
    d.meta.insert("kind".into(), "gaussian-mixture".into());
    d.meta.insert("n_modes".into(), n_modes.to_string());
    d.meta.insert("n_per_mode".into(), n_per_mode.to_string());
    d.meta.insert("spread".into(), spread.to_string());
    d.meta.insert("seed".into(), seed.to_string());
    Ok(d)
}

pub fn mixture_mean(k: usize, n_modes: usize) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / n_modes as f64;
    (angle.cos(), angle.sin())
}

pub const SHAPE_CLASSES: usize = 4;

/// Grayscale `size x size` images of four shape classes on a dark
/// background: disc, ring, horizontal bar, vertical bar. Position and scale
/// are random; edges are anti-aliased; values are quantized to 8-bit levels.
pub fn gen_shapes(n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || size < 4 {
        return Err(Error::InvalidConfig(
            "shapes need at least one image per class and size >= 4".into(),
        ));
    }
    let mut rng = SeededRng::new(seed, Domain::Data, 1, 0);
    let total = n_per_class * SHAPE_CLASSES;
    let mut samples = Array2::zeros((total, size * size));
    let mut labels = Vec::with_capacity(total);
    let sz = size as f64;
    for class in 0..SHAPE_CLASSES {
        for i in 0..n_per_class {
            let row = class * n_per_class + i;
            let cx = sz * (0.3 + 0.4 * rng.uniform());
            let cy = sz * (0.3 + 0.4 * rng.uniform());
            let r = sz * (0.15 + 0.12 * rng.uniform());
            let half_w = sz * (0.06 + 0.05 * rng.uniform());
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                    // signed distance, negative inside
                    let sd = match class {
                        0 => d - r,
                        1 => (d - r).abs() - half_w,
                        2 => (py - cy).abs() - half_w,
                        _ => (px - cx).abs() - half_w,
                    };
                    let cover = (0.5 - sd).clamp(0.0, 1.0);
                    samples[[row, y * size + x]] = quantize(2.0 * cover - 1.0);
                }
            }
            labels.push(class);
        }
    }
    let mut d = Dataset::new(
        samples,
        labels,
        DataShape::Image {
            height: size,
            width: size,
            channels: 1,
        },
        SHAPE_CLASSES,
    )?;
    d.meta.insert("kind".into(), "shapes".into());
    d.meta.insert("size".into(), size.to_string());
    d.meta.insert("seed".into(), seed.to_string());
    Ok(d)
}

pub fn pixel_to_value(p: u8) -> f64 {
    f64::from(p) / 127.5 - 1.0
}

pub fn value_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn quantize(v: f64) -> f64 {
    pixel_to_value(value_to_pixel(v))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses a binary graymap with maxval 255.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(fmt("not a binary graymap (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| fmt("bad header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(fmt("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(fmt("truncated raster"));
    }
    Ok((w, h, bytes[pos..pos + w * h].to_vec()))
}

/// Writes `00000.pgm, 00001.pgm, ...` and `labels.tsv` into `dir`.
pub fn save_images(dir: &Path, data: &Dataset) -> Result<()> {
    let DataShape::Image {
        height,
        width,
        channels: 1,
    } = data.shape()
    else {
        return Err(Error::ShapeMismatch(
            "only single-channel images can be saved as P5".into(),
        ));
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::new();
    for i in 0..data.len() {
        let name = format!("{i:05}.pgm");
        let pixels: Vec<u8> = data.sample(i).iter().map(|&v| value_to_pixel(v)).collect();
        write_pgm(&dir.join(&name), width, height, &pixels)?;
        labels.push_str(&format!("{name}\t{}\n", data.labels()[i]));
    }
    let path = dir.join("labels.tsv");
    fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

/// Loads every `*.pgm` in `dir` in filename order. Labels come from
/// `labels.tsv`; the class count is one more than the largest label.
pub fn load_images(dir: &Path, height: usize, width: usize) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let label_path = dir.join("labels.tsv");
    let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
    let mut label_of = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, class) = line.split_once('\t').ok_or_else(|| Error::Format {
            path: label_path.clone(),
            msg: format!("line {}: expected filename<TAB>class", lineno + 1),
        })?;
        let class: usize = class.trim().parse().map_err(|_| Error::Format {
            path: label_path.clone(),
            msg: format!("line {}: bad class {class:?}", lineno + 1),
        })?;
        label_of.insert(name.to_string(), class);
    }
    let mut samples = Array2::zeros((names.len(), height * width));
    let mut labels = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let path = dir.join(name);
        let (w, h, pixels) = read_pgm(&path)?;
        if (h, w) != (height, width) {
            return Err(Error::ShapeMismatch(format!(
                "{}: {w}x{h}, expected {width}x{height}",
                path.display()
            )));
        }
        for (dst, &p) in samples.row_mut(i).iter_mut().zip(&pixels) {
            *dst = pixel_to_value(p);
        }
        labels.push(*label_of.get(name).ok_or_else(|| Error::Format {
            path: label_path.clone(),
            msg: format!("no label for {name}"),
        })?);
    }
    let num_labels = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        samples,
        labels,
        DataShape::Image {
            height,
            width,
            channels: 1,
        },
        num_labels,
    )
}

/// `x,y,label` rows with shortest round-trip float formatting.
pub fn save_points(path: &Path, data: &Dataset) -> Result<()> {
    if data.shape() != (DataShape::Vector { dims: 2 }) {
        return Err(Error::ShapeMismatch(
            "points.csv holds 2-D vectors only".into(),
        ));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("x,y,label\n");
    for i in 0..data.len() {
        let s = data.sample(i);
        out.push_str(&format!("{},{},{}\n", s[0], s[1], data.labels()[i]));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_points(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: expected x,y,label"),
    };
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(bad(i + 1));
        }
        xs.push(parts[0].parse::<f64>().map_err(|_| bad(i + 1))?);
        xs.push(parts[1].parse::<f64>().map_err(|_| bad(i + 1))?);
        labels.push(parts[2].parse::<usize>().map_err(|_| bad(i + 1))?);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = labels.len();
    let num_labels = labels.iter().max().map_or(1, |m| m + 1);
    let samples = Array2::from_shape_vec((n, 2), xs).expect("two per row");
    Dataset::new(samples, labels, DataShape::Vector { dims: 2 }, num_labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_mixture_collapses() {
        let d = gen_gaussian_mixture(1, 10, 0.0, 3).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.sample(i).to_vec(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn mixture_labels_partition() {
        let d = gen_gaussian_mixture(5, 7, 0.1, 3).unwrap();
        for k in 0..5 {
            assert_eq!(d.labels().iter().filter(|&&l| l == k).count(), 7);
        }
        assert!(gen_gaussian_mixture(0, 7, 0.1, 3).is_err());
    }

    #[test]
    fn mixture_mode_means_within_clt_bound() {
        let (n, spread) = (400, 0.2);
        let d = gen_gaussian_mixture(6, n, spread, 11).unwrap();
        for k in 0..6 {
            let (cx, cy) = mixture_mean(k, 6);
            let rows: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == k).collect();
            let mx = rows.iter().map(|&i| d.sample(i)[0]).sum::<f64>() / n as f64;
            let my = rows.iter().map(|&i| d.sample(i)[1]).sum::<f64>() / n as f64;
            let bound = 3.0 * spread / (n as f64).sqrt();
            assert!((mx - cx).abs() < bound && (my - cy).abs() < bound);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            gen_gaussian_mixture(3, 5, 0.1, 9).unwrap(),
            gen_gaussian_mixture(3, 5, 0.1, 9).unwrap()
        );
        assert_eq!(gen_shapes(2, 8, 1).unwrap(), gen_shapes(2, 8, 1).unwrap());
    }

    #[test]
    fn shuffled_order_is_deterministic() {
        let d = gen_gaussian_mixture(2, 8, 0.1, 0).unwrap();
        assert_eq!(d.shuffled_indices(4, 1), d.shuffled_indices(4, 1));
        assert_ne!(d.shuffled_indices(4, 1), d.shuffled_indices(4, 2));
        let mut s = d.shuffled_indices(4, 1);
        s.sort_unstable();
        assert_eq!(s, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn pixel_endpoints() {
        assert_eq!(pixel_to_value(0), -1.0);
        assert_eq!(pixel_to_value(255), 1.0);
        assert_eq!(value_to_pixel(-1.0), 0);
        assert_eq!(value_to_pixel(1.0), 255);
        for p in 0..=255u8 {
            assert_eq!(value_to_pixel(pixel_to_value(p)), p);
        }
    }

    #[test]
    fn images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_shapes(3, 8, 2).unwrap();
        save_images(dir.path(), &d).unwrap();
        let back = load_images(dir.path(), 8, 8).unwrap();
        assert_eq!(back.samples(), d.samples());
        assert_eq!(back.labels(), d.labels());
        assert!(matches!(
            load_images(dir.path(), 4, 4),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_images(dir.path(), 8, 8),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn unreadable_path_is_io_error() {
        assert!(matches!(
            load_images(Path::new("/nonexistent/glab"), 8, 8),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_gaussian_mixture(3, 4, 0.3, 5).unwrap();
        let path = dir.path().join("points.csv");
        save_points(&path, &d).unwrap();
        let back = load_points(&path).unwrap();
        assert_eq!(back.samples(), d.samples());
        assert_eq!(back.labels(), d.labels());
    }

    #[test]
    fn shapes_are_in_range_and_labelled() {
        let d = gen_shapes(2, 16, 0).unwrap();
        assert_eq!(d.len(), 8);
        assert!(d.samples().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(d.num_labels(), SHAPE_CLASSES);
        // every image has some foreground
        for i in 0..d.len() {
            assert!(d.sample(i).iter().any(|&v| v > 0.0));
        }
    }
}
