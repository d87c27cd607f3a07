use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::kernels::{conv2d_forward, ConvGeom};
use crate::tensor::Tensor;

/// Seed of the fixed random feature extractor.
pub const RF_SEED: u64 = 0x5EED_F1D0;

const RF_CHANNELS: [usize; 4] = [16, 32, 64, 64];

/// Intersection over union of two masks, each thresholded at 0.5. Two
/// empty masks agree perfectly and score 1.
pub fn iou_metric(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("iou_metric", format!("{} vs {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

/// Four random stride-2 3x3 convolutions with ReLU and global average
/// pooling, mapping an RGB image to 64 features.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    weights: Vec<Vec<f64>>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let weights = RF_CHANNELS
            .iter()
            .map(|&c| {
                let d = Normal::new(0.0, (2.0 / (9 * c_in) as f64).sqrt()).unwrap();
                let w = (0..c * c_in * 9).map(|_| d.sample(&mut rng)).collect();
                c_in = c;
                w
            })
            .collect();
        FeatureExtractor { seed, weights }
    }

    /// `image = [3, H, W]`.
    pub fn features(&self, image: &Tensor<f64>) -> Vec<f64> {
        let (mut c, mut h, mut w) = (image.shape[0], image.shape[1], image.shape[2]);
        let mut x = image.data.clone();
        for (layer, &o) in RF_CHANNELS.iter().enumerate() {
            let g = ConvGeom { n: 1, c, h, w, o, kh: 3, kw: 3, stride: 2, pad: 1 };
            x = conv2d_forward(&g, &x, &self.weights[layer], None);
            x.iter_mut().for_each(|v| *v = v.max(0.0));
            (c, h, w) = (o, g.out_h(), g.out_w());
        }
        (0..c).map(|k| x[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect()
    }

    pub fn stats(&self, images: &[Tensor<f64>]) -> Result<FeatureStats> {
        if images.len() < 2 {
            return Err(Error::Invalid(format!("feature statistics need at least 2 images, got {}", images.len())));
        }
        let feats: Vec<Vec<f64>> = images.iter().map(|i| self.features(i)).collect();
        Ok(FeatureStats::from_features(&feats, self.seed))
    }
}

/// Gaussian fit of a feature set.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub seed: u64,
}

impl FeatureStats {
    pub fn from_features(feats: &[Vec<f64>], seed: u64) -> Self {
        let (n, d) = (feats.len(), feats[0].len());
        let mut mean = DVector::zeros(d);
        for f in feats {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in feats {
            let x = DVector::from_column_slice(f) - &mean;
            cov += &x * x.transpose();
        }
        cov /= (n - 1) as f64;
        FeatureStats { mean, cov, seed }
    }
}

/// Square root of a symmetric PSD matrix, flooring eigenvalues at 0.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`, at least 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let dm = (&a.mean - &b.mean).norm_squared();
    let ra = sqrt_psd(a.cov.clone());
    let cross = sqrt_psd(&ra * &b.cov * &ra);
    (dm + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace()).max(0.0)
}

/// Frechet distance between two image sets under the seeded extractor.
pub fn rf_frechet(a: &[Tensor<f64>], b: &[Tensor<f64>], seed: u64) -> Result<f64> {
    if let (Some(x), Some(y)) = (a.first(), b.first()) {
        if x.shape != y.shape {
            return Err(Error::shape("rf_frechet", format!("{:?} vs {:?}", x.shape, y.shape)));
        }
    }
    let fx = FeatureExtractor::new(seed);
    Ok(frechet_distance(&fx.stats(a)?, &fx.stats(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn iou_cases() {
        let a = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(iou_metric(&a, &a).unwrap(), 1.0);
        assert!((iou_metric(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_metric(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(iou_metric(&[0.0; 3], &[0.2; 3]).unwrap(), 1.0);
        assert!(iou_metric(&a, &[1.0]).is_err());
    }

    fn images(seed: u64, n: usize) -> Vec<Tensor<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let base: f64 = rng.gen_range(0.0..0.6);
                Tensor::new(&[3, 16, 16], (0..768).map(|_| base + 0.4 * rng.gen::<f64>()).collect())
            })
            .collect()
    }

    #[test]
    fn frechet_identities() {
        let a = images(1, 12);
        let b = images(2, 9);
        assert!(rf_frechet(&a, &a, RF_SEED).unwrap() < 1e-6);
        let inv: Vec<Tensor<f64>> =
            a.iter().map(|t| Tensor::new(&t.shape, t.data.iter().map(|v| 1.0 - v).collect())).collect();
        assert!(rf_frechet(&a, &inv, RF_SEED).unwrap() > 0.0);
        let (ab, ba) = (rf_frechet(&a, &b, RF_SEED).unwrap(), rf_frechet(&b, &a, RF_SEED).unwrap());
        assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
        assert!(rf_frechet(&a[..1], &b, RF_SEED).is_err());
    }

    #[test]
    fn gaussian_oracle() {
        // diagonal covariances: distance is sum (sqrt(a) - sqrt(b))^2 plus the mean gap
        let d = 3;
        let mk = |m: [f64; 3], v: [f64; 3]| FeatureStats {
            mean: DVector::from_column_slice(&m),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(&v)),
            seed: 0,
        };
        let a = mk([0.0, 1.0, 2.0], [1.0, 4.0, 0.0]);
        let b = mk([1.0, 1.0, 0.0], [9.0, 1.0, 2.0]);
        let want = 1.0 + 4.0 + (1.0f64 - 3.0).powi(2) + (2.0f64 - 1.0).powi(2) + 2.0;
        assert_eq!(d, 3);
        assert!((frechet_distance(&a, &b) - want).abs() < 1e-9);
    }
}
