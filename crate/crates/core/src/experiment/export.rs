use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{read_idx_images, make_moons, normalize, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nn::{Checkpoint, Classifier};
use crate::tensor::Tensor;

use super::model::{TrainedMask, TrainedModel};

/// Binary (P5) 8-bit grayscale PGM.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || pixels.is_empty() {
        return Err(Error::dim("pgm", format!("{} pixels for {width}×{height}", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

fn image_dims(sample_shape: &[usize]) -> (usize, usize) {
    match *sample_shape {
        [c, h, w] => (w, c * h),
        [h, w] => (w, h),
        _ => (sample_shape.iter().product(), 1),
    }
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    (255.0 * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
}

fn value_range(row: &[f64], normalization: Normalization) -> (f64, f64) {
    match normalization {
        Normalization::Unit => (0.0, 1.0),
        Normalization::CenterHalf => (-0.5, 0.5),
        Normalization::Raw => {
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        }
    }
}

/// Reads the `dataset` argument of `export-masks`.
///
/// Accepted forms: `table` (the training rows stored with a transductive
/// checkpoint), `moons[:N[:NOISE[:SEED]]]`, or a path to an IDX image file,
/// which is scaled to `[0, 1]` and normalized like the training data.
pub fn load_mask_inputs(arg: &str, model: &TrainedModel) -> Result<Tensor> {
    if arg == "table" {
        return match &model.mask {
            TrainedMask::Table(t) => Ok(t.inputs.clone()),
            _ => Err(Error::Contract("`table` needs a transductive checkpoint".into())),
        };
    }
    if let TrainedMask::Table(_) = model.mask {
        return Err(Error::Contract(
            "transductive masks exist only for training rows; pass `table`".into(),
        ));
    }
    if arg == "moons" || arg.starts_with("moons:") {
        let parts: Vec<&str> = arg.split(':').skip(1).collect();
        let bad = || Error::Contract(format!("bad moons spec {arg:?}; expected moons[:N[:NOISE[:SEED]]]"));
        let n = parts.first().map_or(Ok(1000), |s| s.parse().map_err(|_| bad()))?;
        let noise = parts.get(1).map_or(Ok(0.1), |s| s.parse().map_err(|_| bad()))?;
        let seed = parts.get(2).map_or(Ok(0), |s| s.parse().map_err(|_| bad()))?;
        return Ok(make_moons(n, noise, seed)?.examples);
    }
    let images = read_idx_images(Path::new(arg))?;
    let p = images.rows * images.cols;
    let examples = Tensor::new(
        vec![images.count, p],
        images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let ds = Dataset::new(examples, None, 2, vec![1, images.rows, images.cols], Normalization::Unit)?;
    match model.normalization {
        Normalization::Unit | Normalization::Raw => Ok(ds.examples),
        scheme => Ok(normalize(&ds, scheme)?.examples),
    }
}

/// Writes `<i>_input.pgm`, `<i>_mask.pgm` and `<i>_masked.pgm` per index.
///
/// The mask is the evaluation mask mapped `[0, 1] → [0, 255]`. Input and
/// masked input share one intensity mapping, so a mask of ones with `ε = 1`
/// gives identical files.
pub fn export_masks(model: &TrainedModel, inputs: &Tensor, indices: &[usize], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (n, p) = inputs.dims2()?;
    if p != model.classifier.input_dim() {
        return Err(Error::dim("export_masks", format!("inputs have {p} features, model expects {}", model.classifier.input_dim())));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!("index {bad} out of range for {n} examples")));
    }
    let x = inputs.select_rows(indices)?;
    let log_alpha = match &model.mask {
        TrainedMask::Table(t) => t.log_alpha.select_rows(indices)?,
        _ => model.log_alpha(&x)?,
    };
    let z = model.eval_mask(&log_alpha)?;
    let (w, h) = image_dims(&model.sample_shape);
    let mut written = Vec::new();
    for (k, &idx) in indices.iter().enumerate() {
        let (lo, hi) = value_range(x.row(k), model.normalization);
        let input: Vec<u8> = x.row(k).iter().map(|&v| to_byte(v, lo, hi)).collect();
        let mask: Vec<u8> = z.row(k).iter().map(|&v| to_byte(v, 0.0, 1.0)).collect();
        let masked: Vec<u8> = x
            .row(k)
            .iter()
            .zip(z.row(k))
            .map(|(&v, &g)| to_byte(v * model.epsilon * g, lo, hi))
            .collect();
        for (suffix, pixels) in [("input", input), ("mask", mask), ("masked", masked)] {
            let path = out_dir.join(format!("{idx}_{suffix}.pgm"));
            write_atomic(&path, &pgm_bytes(w, h, &pixels)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub steps: usize,
}

impl FromStr for Grid {
    type Err = Error;

    /// `xmin,xmax,ymin,ymax,steps`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("grid {s:?}: expected xmin,xmax,ymin,ymax,steps"));
        let [a, b, c, d, n] = parts.as_slice() else {
            return Err(bad());
        };
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
        let grid = Grid {
            xmin: num(a)?,
            xmax: num(b)?,
            ymin: num(c)?,
            ymax: num(d)?,
            steps: n.parse().map_err(|_| bad())?,
        };
        if grid.steps == 0 || !(grid.xmax >= grid.xmin && grid.ymax >= grid.ymin) {
            return Err(bad());
        }
        Ok(grid)
    }
}

impl Grid {
    fn coord(lo: f64, hi: f64, i: usize, steps: usize) -> f64 {
        if steps == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (steps - 1) as f64
        }
    }

    /// Row-major grid points, `y` outer and `x` inner.
    pub fn points(&self) -> Result<Tensor> {
        let s = self.steps;
        let mut data = Vec::with_capacity(2 * s * s);
        for iy in 0..s {
            for ix in 0..s {
                data.push(Self::coord(self.xmin, self.xmax, ix, s));
                data.push(Self::coord(self.ymin, self.ymax, iy, s));
            }
        }
        Tensor::new(vec![s * s, 2], data)
    }
}

/// Class-1 probabilities over a grid; returns the grid points and probabilities.
pub fn boundary_grid(model: &Classifier, grid: &Grid) -> Result<(Tensor, Vec<f64>)> {
    if model.input_dim() != 2 {
        return Err(Error::Contract(format!(
            "decision boundaries need a 2-D model, this one takes {} inputs",
            model.input_dim()
        )));
    }
    let pts = grid.points()?;
    let probs = model.predict_proba(&pts)?;
    let p1 = (0..probs.rows()).map(|i| probs.row(i)[1]).collect();
    Ok((pts, p1))
}

/// Writes `x,y,p1` rows for every grid point.
pub fn export_boundary(model: &Classifier, grid: &Grid, out: &Path) -> Result<()> {
    let (pts, p1) = boundary_grid(model, grid)?;
    let mut csv = String::from("x,y,p1\n");
    for (i, p) in p1.iter().enumerate() {
        let r = pts.row(i);
        writeln!(csv, "{},{},{}", r[0], r[1], p).expect("string write");
    }
    write_atomic(out, csv.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[min, max]`; a constant tensor gets a unit-wide
/// range centered on its value.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Contract("bins must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(Error::Contract("no values to bin".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Writes `lower,upper,count` rows for one named checkpoint tensor.
pub fn export_weight_hist(ck: &Checkpoint, layer: &str, bins: usize, out: &Path) -> Result<Histogram> {
    let hist = histogram(ck.require(layer)?.data(), bins)?;
    let mut csv = String::from("lower,upper,count\n");
    for (i, c) in hist.counts.iter().enumerate() {
        writeln!(csv, "{},{},{}", hist.edges[i], hist.edges[i + 1], c).expect("string write");
    }
    write_atomic(out, csv.as_bytes())?;
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_counts() {
        let h = histogram(&[0.0, 0.1, 0.5, 1.0, 1.0], 4).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(h.counts, vec![2, 0, 1, 2]);
        let flat = histogram(&[0.0; 6], 5).unwrap();
        assert_eq!(flat.counts, vec![0, 0, 6, 0, 0]);
    }

    #[test]
    fn grid_parsing_and_size() {
        let g: Grid = "-1,2,-0.5,1,7".parse().unwrap();
        assert_eq!(g.points().unwrap().rows(), 49);
        assert!("1,2,3".parse::<Grid>().is_err());
        assert!("0,1,0,1,0".parse::<Grid>().is_err());
    }

    #[test]
    fn pgm_header() {
        let b = pgm_bytes(2, 1, &[0, 255]).unwrap();
        assert_eq!(b, b"P5\n2 1\n255\n\x00\xff");
    }
}
