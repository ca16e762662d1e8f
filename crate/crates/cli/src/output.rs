//! CSV tables, heatmaps and sample images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use glab_core::analysis::AnalysisGrid;
use glab_core::data::{value_to_pixel, write_pgm, DataShape};
use glab_core::{Error, Result};
use ndarray::{Array2, ArrayView1};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l}").expect("string write");
    }
    s
}

/// Long-format sweep table. Global rows carry `bin = -1`; band rows leave
/// `cos_guided_eps` empty.
pub fn analysis_csv(grid: &AnalysisGrid) -> String {
    let mut s = String::from("method,timestep,bin,cos_delta_eps,cos_guided_eps,norm_delta\n");
    for (mi, m) in grid.methods.iter().enumerate() {
        for (ti, t) in grid.timesteps.iter().enumerate() {
            writeln!(
                s,
                "{m},{t},-1,{},{},{}",
                grid.cos_global[[ti, mi]],
                grid.cos_guided[[ti, mi]],
                grid.norm_global[[ti, mi]]
            )
            .expect("string write");
            if let (Some(c), Some(n)) = (grid.cos_bands.get(mi), grid.norm_bands.get(mi)) {
                for k in 0..c.ncols() {
                    writeln!(s, "{m},{t},{k},{},,{}", c[[ti, k]], n[[ti, k]])
                        .expect("string write");
                }
            }
        }
    }
    s
}

/// Blue (-1) through white (0) to red (+1).
pub fn diverging(v: f64) -> [u8; 3] {
    let v = if v.is_finite() {
        v.clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(-v), fade(-v), 255]
    }
}

/// Dark to bright on a log scale between the smallest positive value and
/// the maximum; zeros map to black.
pub fn log_scale(values: &Array2<f64>) -> Array2<[u8; 3]> {
    let pos: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| *v > 0.0 && v.is_finite())
        .collect();
    let lo = pos.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pos.iter().copied().fold(0.0, f64::max);
    values.mapv(|v| {
        if !(v > 0.0 && v.is_finite()) {
            return [0, 0, 0];
        }
        let u = if hi > lo {
            (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
        } else {
            1.0
        };
        let g = (255.0 * u).round() as u8;
        [g, g, (128.0 + 127.0 * u).round() as u8]
    })
}

/// Binary PPM with every cell blown up to `scale x scale` pixels.
pub fn ppm(cells: &Array2<[u8; 3]>, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let (rows, cols) = cells.dim();
    let (h, w) = (rows * scale, cols * scale);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&cells[[y / scale, x / scale]]);
        }
    }
    out
}

/// Matrix CSV with a `timestep` column followed by one column per label.
pub fn matrix_csv(timesteps: &[usize], labels: &[String], m: &Array2<f64>) -> String {
    let mut s = String::from("timestep");
    for l in labels {
        write!(s, ",{l}").expect("string write");
    }
    s.push('\n');
    for (i, t) in timesteps.iter().enumerate() {
        write!(s, "{t}").expect("string write");
        for v in m.row(i) {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Writes `<stem>.ppm` and `<stem>.csv`: cosines on the diverging scale,
/// norms on the log scale.
pub fn write_heatmap(
    dir: &Path,
    stem: &str,
    timesteps: &[usize],
    labels: &[String],
    m: &Array2<f64>,
    is_norm: bool,
    scale: usize,
) -> Result<()> {
    let cells = if is_norm {
        log_scale(m)
    } else {
        m.mapv(diverging)
    };
    let ppm_path = dir.join(format!("{stem}.ppm"));
    fs::write(&ppm_path, ppm(&cells, scale)).map_err(|e| Error::io(&ppm_path, e))?;
    write_text(
        &dir.join(format!("{stem}.csv")),
        &matrix_csv(timesteps, labels, m),
    )
}

/// Heatmaps for a sweep: per-method band maps for images, plus one
/// method-by-timestep map of the global statistics.
pub fn write_heatmaps(dir: &Path, grid: &AnalysisGrid, scale: usize) -> Result<()> {
    ensure_dir(dir)?;
    let names: Vec<String> = grid.methods.iter().map(|m| m.to_string()).collect();
    write_heatmap(
        dir,
        "global_cos",
        &grid.timesteps,
        &names,
        &grid.cos_global,
        false,
        scale,
    )?;
    write_heatmap(
        dir,
        "global_norm",
        &grid.timesteps,
        &names,
        &grid.norm_global,
        true,
        scale,
    )?;
    for (mi, m) in grid.methods.iter().enumerate() {
        if let (Some(c), Some(n)) = (grid.cos_bands.get(mi), grid.norm_bands.get(mi)) {
            let bins: Vec<String> = (0..c.ncols()).map(|k| format!("bin{k}")).collect();
            write_heatmap(
                dir,
                &format!("{m}_cos"),
                &grid.timesteps,
                &bins,
                c,
                false,
                scale,
            )?;
            write_heatmap(
                dir,
                &format!("{m}_norm"),
                &grid.timesteps,
                &bins,
                n,
                true,
                scale,
            )?;
        }
    }
    Ok(())
}

pub fn points_csv(samples: &Array2<f64>) -> String {
    let mut s = String::new();
    let dims = samples.ncols();
    for d in 0..dims {
        if d > 0 {
            s.push(',');
        }
        write!(s, "x{d}").expect("string write");
    }
    s.push('\n');
    for row in samples.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn image_pixels(row: ArrayView1<f64>, h: usize, w: usize, c: usize) -> Vec<u8> {
    // Multi-channel images are shown as their channel mean.
    (0..h * w)
        .map(|p| {
            let v: f64 = (0..c).map(|k| row[p * c + k]).sum::<f64>() / c as f64;
            value_to_pixel(v)
        })
        .collect()
}

/// Writes samples as `samples.csv` (vectors) or numbered P5 files (images).
pub fn write_samples(dir: &Path, shape: DataShape, samples: &Array2<f64>) -> Result<()> {
    ensure_dir(dir)?;
    match shape {
        DataShape::Vector { .. } => write_text(&dir.join("samples.csv"), &points_csv(samples)),
        DataShape::Image {
            height,
            width,
            channels,
        } => {
            for (i, row) in samples.rows().into_iter().enumerate() {
                let px = image_pixels(row, height, width, channels);
                write_pgm(&dir.join(format!("{i:05}.pgm")), width, height, &px)?;
            }
            Ok(())
        }
    }
}

/// Evenly spaced snapshot indices including the first and last.
pub fn strip_indices(len: usize, k: usize) -> Vec<usize> {
    if len == 0 || k == 0 {
        return Vec::new();
    }
    if k == 1 || len == 1 {
        return vec![len - 1];
    }
    let mut out: Vec<usize> = (0..k)
        .map(|i| (i * (len - 1) + (k - 1) / 2) / (k - 1))
        .collect();
    out.dedup();
    out
}

/// Trajectory output. Images become one horizontal strip per sample
/// (`strip_00000.pgm`, noisiest on the left); vectors become a long CSV
/// `sample,timestep,x0,...`.
pub fn write_trajectory(
    dir: &Path,
    shape: DataShape,
    traj: &[(usize, Array2<f64>)],
    strip_length: usize,
) -> Result<()> {
    ensure_dir(dir)?;
    let picks = strip_indices(traj.len(), strip_length);
    match shape {
        DataShape::Vector { dims } => {
            let mut s = String::from("sample,timestep");
            for d in 0..dims {
                write!(s, ",x{d}").expect("string write");
            }
            s.push('\n');
            for &p in &picks {
                let (t, x) = &traj[p];
                for (i, row) in x.rows().into_iter().enumerate() {
                    write!(s, "{i},{t}").expect("string write");
                    for v in row {
                        write!(s, ",{v}").expect("string write");
                    }
                    s.push('\n');
                }
            }
            write_text(&dir.join("trajectory.csv"), &s)
        }
        DataShape::Image {
            height,
            width,
            channels,
        } => {
            let Some((_, first)) = traj.first() else {
                return Ok(());
            };
            let k = picks.len();
            for i in 0..first.nrows() {
                let mut px = vec![0u8; height * width * k];
                for (j, &p) in picks.iter().enumerate() {
                    let img = image_pixels(traj[p].1.row(i), height, width, channels);
                    for y in 0..height {
                        let dst = y * width * k + j * width;
                        px[dst..dst + width].copy_from_slice(&img[y * width..(y + 1) * width]);
                    }
                }
                write_pgm(
                    &dir.join(format!("strip_{i:05}.pgm")),
                    width * k,
                    height,
                    &px,
                )?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diverging_endpoints() {
        assert_eq!(diverging(0.0), [255, 255, 255]);
        assert_eq!(diverging(1.0), [255, 0, 0]);
        assert_eq!(diverging(-1.0), [0, 0, 255]);
        assert_eq!(diverging(f64::NAN), [255, 255, 255]);
    }

    #[test]
    fn ppm_dimensions() {
        let cells = Array2::from_elem((3, 29), [1u8, 2, 3]);
        let bytes = ppm(&cells, 4);
        let header = b"P6\n116 12\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 3 * 116 * 12);
    }

    #[test]
    fn log_scale_orders_values() {
        let m = array![[0.01, 0.1, 1.0, 0.0]];
        let c = log_scale(&m);
        assert_eq!(c[[0, 0]][0], 0);
        assert_eq!(c[[0, 1]][0], 128);
        assert_eq!(c[[0, 2]][0], 255);
        assert_eq!(c[[0, 3]], [0, 0, 0]);
    }

    #[test]
    fn strip_picks_ends() {
        assert_eq!(strip_indices(51, 8).first(), Some(&0));
        assert_eq!(strip_indices(51, 8).last(), Some(&50));
        assert_eq!(strip_indices(51, 8).len(), 8);
        assert_eq!(strip_indices(3, 8), vec![0, 1, 2]);
        assert_eq!(strip_indices(5, 1), vec![4]);
    }
}
