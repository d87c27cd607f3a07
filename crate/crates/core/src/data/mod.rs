//! Image/mask datasets, the synthetic instrument generator and the
//! evaluation metrics.

mod metrics;
mod synthetic;

pub use metrics::{frechet_distance, iou_metric, rf_frechet, FeatureExtractor, FeatureStats, RF_SEED};
pub use synthetic::{gen_synthetic, tool_mesh, GroundTruth, SyntheticConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f64>,
    /// `H * W` values in `{0, 1}`.
    pub mask: Vec<f64>,
    pub ground_truth: Option<GroundTruth>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape[2]
    }

    /// Encoder input planes `[4, H, W]`: RGB then mask.
    pub fn planes(&self) -> Vec<f64> {
        let mut v = self.image.data.clone();
        v.extend_from_slice(&self.mask);
        v
    }
}

/// Stacks samples into an encoder batch `[N, 4, H, W]`.
pub fn batch(samples: &[&Sample]) -> Tensor<f64> {
    let (h, w) = (samples[0].height(), samples[0].width());
    Tensor::new(&[samples.len(), 4, h, w], samples.iter().flat_map(|s| s.planes()).collect())
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.into(), source })
}

/// Reads `NNNN_img.png` / `NNNN_mask.png` pairs in index order. Masks are
/// thresholded at 128.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: BTreeMap<u32, (bool, bool)> = BTreeMap::new();
    for entry in entries {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        let Some((idx, kind)) = name.strip_suffix(".png").and_then(|s| s.split_once('_')) else { continue };
        let Ok(i) = idx.parse::<u32>() else { continue };
        let slot = found.entry(i).or_default();
        match kind {
            "img" => slot.0 = true,
            "mask" => slot.1 = true,
            _ => {}
        }
    }
    let mut out = Vec::with_capacity(found.len());
    for (&i, &(img, mask)) in &found {
        if !(img && mask) {
            let missing = if img { "mask" } else { "img" };
            return Err(Error::Dataset(format!("sample {i:04}: missing {i:04}_{missing}.png")));
        }
        let ip = dir.join(format!("{i:04}_img.png"));
        let mp = dir.join(format!("{i:04}_mask.png"));
        let mut sample = load_pair(&ip, &mp).map_err(|e| match e {
            Error::Dataset(m) => Error::Dataset(format!("sample {i:04}: {m}")),
            e => e,
        })?;
        let gt_path = dir.join(format!("{i:04}_gt.txt"));
        let ground_truth = if gt_path.exists() {
            let text = std::fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
            Some(GroundTruth::parse(&text).map_err(|m| Error::Dataset(format!("{}: {m}", gt_path.display())))?)
        } else {
            None
        };
        sample.ground_truth = ground_truth;
        out.push(sample);
    }
    Ok(out)
}

/// Reads one RGB image and its mask (thresholded at 128).
pub fn load_pair(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let im = read_png(image_path)?.to_rgb8();
    let mk = read_png(mask_path)?.to_luma8();
    if im.dimensions() != mk.dimensions() {
        return Err(Error::Dataset(format!("image is {:?} but mask is {:?}", im.dimensions(), mk.dimensions())));
    }
    let (w, h) = (im.width() as usize, im.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in im.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    let mask = mk.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Sample { image: Tensor::new(&[3, h, w], data), mask, ground_truth: None })
}

/// Writes samples as PNG pairs (and ground-truth sidecars when present),
/// numbered from `first_index`.
pub fn save_dataset(dir: &Path, samples: &[Sample], first_index: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, s) in samples.iter().enumerate() {
        let i = first_index + k;
        let (h, w) = (s.height(), s.width());
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| to_u8(s.image.data[(c * h + y as usize) * w + x as usize])))
        });
        let mask = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_u8(s.mask[y as usize * w + x as usize])])
        });
        let ip = dir.join(format!("{i:04}_img.png"));
        img.save(&ip).map_err(|source| Error::Image { path: ip.clone(), source })?;
        let mp = dir.join(format!("{i:04}_mask.png"));
        mask.save(&mp).map_err(|source| Error::Image { path: mp.clone(), source })?;
        if let Some(gt) = &s.ground_truth {
            let gp = dir.join(format!("{i:04}_gt.txt"));
            std::fs::write(&gp, gt.to_text()).map_err(|e| Error::io(&gp, e))?;
        }
    }
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `name d0xd1x... v v v ...` lines.
pub(crate) fn write_arrays(arrays: &[(&str, &[usize], &[f64])]) -> String {
    let mut s = String::new();
    for (name, shape, data) in arrays {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        write!(s, "{name} {}", dims.join("x")).unwrap();
        for v in *data {
            write!(s, " {v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub(crate) fn read_arrays(text: &str) -> std::result::Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>, String> {
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(name) = it.next() else { continue };
        let dims = it.next().ok_or_else(|| format!("line {}: missing shape", ln + 1))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| format!("line {}: bad shape `{dims}`", ln + 1)))
            .collect::<std::result::Result<_, _>>()?;
        let data: Vec<f64> = it
            .map(|v| v.parse().map_err(|_| format!("line {}: bad number `{v}`", ln + 1)))
            .collect::<std::result::Result<_, _>>()?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(format!("line {}: {name} has {} values for shape {shape:?}", ln + 1, data.len()));
        }
        out.insert(name.to_string(), (shape, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, seed: usize) -> Sample {
        Sample {
            image: Tensor::new(&[3, h, w], (0..3 * h * w).map(|i| ((i * 7 + seed) % 256) as f64 / 255.0).collect()),
            mask: (0..h * w).map(|i| ((i + seed) % 3 == 0) as u8 as f64).collect(),
            ground_truth: None,
        }
    }

    #[test]
    fn pairs_load_in_index_order() {
        let dir = tempfile::tempdir().unwrap();
        let s: Vec<Sample> = (0..3).map(|i| sample(5, 4, i)).collect();
        save_dataset(dir.path(), &s[2..], 7).unwrap();
        save_dataset(dir.path(), &s[..2], 0).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0], s[0]);
        assert_eq!(loaded[1], s[1]);
        assert_eq!(loaded[2], s[2]);
    }

    #[test]
    fn gray_masks_are_thresholded() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &[sample(4, 4, 0)], 0).unwrap();
        let m = image::GrayImage::from_fn(4, 4, |x, y| image::Luma([(x * 60 + y) as u8]));
        m.save(dir.path().join("0000_mask.png")).unwrap();
        let s = &load_dataset(dir.path()).unwrap()[0];
        assert!(s.mask.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(s.mask[2], 0.0); // 120
        assert_eq!(s.mask[3], 1.0); // 180
    }

    #[test]
    fn missing_counterpart_names_the_index() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &[sample(4, 4, 0), sample(4, 4, 1), sample(4, 4, 2)], 0).unwrap();
        std::fs::remove_file(dir.path().join("0002_mask.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("0002"), "{err}");
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &[sample(4, 4, 0)], 0).unwrap();
        image::GrayImage::new(3, 4).save(dir.path().join("0000_mask.png")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn arrays_roundtrip() {
        let text = write_arrays(&[("a", &[2, 2], &[0.1, -2.5, 1e-300, 3.0]), ("b", &[1], &[std::f64::consts::PI])]);
        let m = read_arrays(&text).unwrap();
        assert_eq!(m["a"], (vec![2, 2], vec![0.1, -2.5, 1e-300, 3.0]));
        assert_eq!(m["b"].1[0], std::f64::consts::PI);
        assert!(read_arrays("a 3 1 2").is_err());
    }
}
