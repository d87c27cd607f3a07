use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_FOV_DEG;
use crate::losses::LossWeights;
use crate::render::RenderConfig;

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weights: LossWeights,
    pub height: usize,
    pub width: usize,
    pub tex_height: usize,
    pub tex_width: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub fov_deg: f64,
    pub icosphere_level: u32,
    pub sh_dim: usize,
    pub d_min: f64,
    pub shape_bound: f64,
    pub checkpoint_interval: usize,
    pub metrics_interval: usize,
    pub metrics_path: String,
    /// Re-encode synthesized views with the other model's encoder.
    pub cross_model_cycle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weights: LossWeights::default(),
            height: 64,
            width: 64,
            tex_height: 32,
            tex_width: 32,
            sigma: 1e-4,
            gamma: 1e-4,
            fov_deg: DEFAULT_FOV_DEG,
            icosphere_level: 1,
            sh_dim: 9,
            d_min: 3.0,
            shape_bound: 1.0,
            checkpoint_interval: 500,
            metrics_interval: 10,
            metrics_path: "metrics.csv".into(),
            cross_model_cycle: false,
        }
    }
}

macro_rules! fields {
    ($m:ident) => {
        $m!(seed, seed);
        $m!(iterations, iterations);
        $m!(batch_size, batch_size);
        $m!(learning_rate, learning_rate);
        $m!(beta1, beta1);
        $m!(beta2, beta2);
        $m!(epsilon, epsilon);
        $m!(lambda_img, weights.img);
        $m!(lambda_sil, weights.sil);
        $m!(lambda_2d, weights.d2);
        $m!(lambda_3d, weights.d3);
        $m!(lambda_lc, weights.lc);
        $m!(height, height);
        $m!(width, width);
        $m!(tex_height, tex_height);
        $m!(tex_width, tex_width);
        $m!(sigma, sigma);
        $m!(gamma, gamma);
        $m!(fov_deg, fov_deg);
        $m!(icosphere_level, icosphere_level);
        $m!(sh_dim, sh_dim);
        $m!(d_min, d_min);
        $m!(shape_bound, shape_bound);
        $m!(checkpoint_interval, checkpoint_interval);
        $m!(metrics_interval, metrics_interval);
        $m!(metrics_path, metrics_path);
        $m!(cross_model_cycle, cross_model_cycle);
    };
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigParse { line: i + 1, msg: format!("expected `key = value`, got `{line}`") });
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::ConfigParse { line: i + 1, msg: format!("{key}: {e}") };
            let mut known = false;
            macro_rules! set {
                ($k:ident, $($f:ident).+) => {
                    if key == stringify!($k) {
                        cfg.$($f).+ = value.parse().map_err(|e| bad(format!("`{value}`: {e}")))?;
                        known = true;
                    }
                };
            }
            fields!(set);
            if !known {
                return Err(Error::UnknownKey(key.to_string()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical `key = value` text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! put {
            ($k:ident, $($f:ident).+) => {
                writeln!(s, "{} = {}", stringify!($k), self.$($f).+).unwrap();
            };
        }
        fields!(put);
        s
    }

    /// SHA-256 of [`TrainConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let fail = |m: String| Err(Error::Invalid(m));
        if self.sh_dim != 9 {
            return fail(format!("sh_dim must be 9, got {}", self.sh_dim));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.metrics_interval == 0 {
            return fail("batch_size, iterations and metrics_interval must be positive".into());
        }
        if !(self.sigma > 0.0 && self.gamma > 0.0 && self.learning_rate > 0.0 && self.d_min > 0.0) {
            return fail("sigma, gamma, learning_rate and d_min must be positive".into());
        }
        if self.icosphere_level > 3 {
            return fail(format!("icosphere_level must be at most 3, got {}", self.icosphere_level));
        }
        if self.height < 16 || self.width < 16 || self.tex_height < 2 || self.tex_width < 2 {
            return fail("image sides must be >= 16 and texture sides >= 2".into());
        }
        // the farthest a vertex can reach is 1 + sqrt(3) * bound
        if self.d_min * 0.99 <= 1.0 + 3f64.sqrt() * self.shape_bound {
            return fail(format!(
                "d_min {} does not clear the near plane for shape_bound {}",
                self.d_min, self.shape_bound
            ));
        }
        Ok(())
    }

    pub fn encoder_config(&self, num_vertices: usize) -> EncoderConfig {
        EncoderConfig {
            height: self.height,
            width: self.width,
            tex_height: self.tex_height,
            tex_width: self.tex_width,
            num_vertices,
            d_min: self.d_min,
            shape_bound: self.shape_bound,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            sigma: self.sigma,
            gamma: self.gamma,
            fov_deg: self.fov_deg,
            ..RenderConfig::with_size(self.height, self.width)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
        assert_eq!(TrainConfig::parse("# only a comment\n\n").unwrap(), TrainConfig::default());
    }

    #[test]
    fn single_key_override() {
        let c = TrainConfig::parse("lambda_3d = 0.0  # ablation\n").unwrap();
        assert_eq!(c.weights.d3, 0.0);
        assert_eq!(c, TrainConfig { weights: LossWeights { d3: 0.0, ..Default::default() }, ..Default::default() });
    }

    #[test]
    fn errors_cite_line_and_key() {
        match TrainConfig::parse("seed = 3\nlambda_3d = banana\n") {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match TrainConfig::parse("lambda_4d = 1") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "lambda_4d"),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::parse("seed 3").is_err());
        assert!(TrainConfig::parse("sh_dim = 16").is_err());
        assert!(TrainConfig::parse("d_min = 1.5").is_err());
    }

    #[test]
    fn printed_config_reparses_to_the_same_hash() {
        let c = TrainConfig {
            seed: 9,
            learning_rate: 3.3e-4,
            weights: LossWeights { lc: 0.123456789, ..Default::default() },
            metrics_path: "out/m.csv".into(),
            cross_model_cycle: true,
            ..Default::default()
        };
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }
}
