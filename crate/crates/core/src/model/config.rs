use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every architectural and training hyperparameter of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct SdmambaConfig {
    /// Odd spatial extent `H = W` of an input patch.
    pub patch_size: usize,
    pub in_bands: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub lambda_spatial: f64,
    pub lambda_spectral: f64,
    pub d_state: usize,
    pub expand: usize,
    pub stem_kernel: usize,
    /// Whether Mamba blocks include the causal depthwise conv branch.
    pub use_conv: bool,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for SdmambaConfig {
    /// Full-size Indian Pines settings.
    fn default() -> Self {
        Self {
            patch_size: 13,
            in_bands: 200,
            hidden_dim: 256,
            num_classes: 16,
            lambda_spatial: 0.3,
            lambda_spectral: 0.3,
            d_state: 16,
            expand: 2,
            stem_kernel: 3,
            use_conv: true,
            seed: 0,
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 100,
        }
    }
}

const KEYS: [&str; 14] = [
    "patch_size",
    "in_bands",
    "hidden_dim",
    "num_classes",
    "lambda_spatial",
    "lambda_spectral",
    "d_state",
    "expand",
    "stem_kernel",
    "use_conv",
    "seed",
    "learning_rate",
    "batch_size",
    "epochs",
];

impl SdmambaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return fail(format!("patch_size must be odd and >= 3, got {}", self.patch_size));
        }
        for (name, l) in [
            ("lambda_spatial", self.lambda_spatial),
            ("lambda_spectral", self.lambda_spectral),
        ] {
            if !(l > 0.0 && l <= 1.0) {
                return fail(format!("{name} must lie in (0, 1], got {l}"));
            }
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be >= 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return fail(format!("stem_kernel must be odd, got {}", self.stem_kernel));
        }
        for (name, v) in [
            ("in_bands", self.in_bands),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }

    /// Number of spatial tokens, `H·W`.
    pub fn spatial_tokens(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Flat `key=value` text, one field per line, fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key).expect("known key"));
        }
        s
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "patch_size" => self.patch_size.to_string(),
            "in_bands" => self.in_bands.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "lambda_spatial" => self.lambda_spatial.to_string(),
            "lambda_spectral" => self.lambda_spectral.to_string(),
            "d_state" => self.d_state.to_string(),
            "expand" => self.expand.to_string(),
            "stem_kernel" => self.stem_kernel.to_string(),
            "use_conv" => self.use_conv.to_string(),
            "seed" => self.seed.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            _ => return None,
        })
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key.trim() {
            "patch_size" => self.patch_size = parse(key, value)?,
            "in_bands" => self.in_bands = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "lambda_spatial" => self.lambda_spatial = parse(key, value)?,
            "lambda_spectral" => self.lambda_spectral = parse(key, value)?,
            "d_state" => self.d_state = parse(key, value)?,
            "expand" => self.expand = parse(key, value)?,
            "stem_kernel" => self.stem_kernel = parse(key, value)?,
            "use_conv" => self.use_conv = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }
}
