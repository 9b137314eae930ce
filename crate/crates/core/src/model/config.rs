use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::textrender::PatchGeometry;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ff_hidden_dim: usize,
    pub geometry: PatchGeometry,
    pub window: usize,
    pub sigmoid_temperature: f64,
    pub decode_threshold: f64,
    pub rmsnorm_eps: f64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the default CLI config.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 128,
            n_heads: 4,
            ff_hidden_dim: 512,
            geometry: PatchGeometry::default(),
            window: 64,
            sigmoid_temperature: 1.0,
            decode_threshold: 0.5,
            rmsnorm_eps: 1e-6,
            rope_base: 10_000.0,
        }
    }

    /// 12 layers of width 768 with a 3072-wide feed-forward: about 113M
    /// parameters, the generative reference size.
    pub fn reference_generative() -> Self {
        Self {
            n_layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            ff_hidden_dim: 3072,
            window: 360,
            ..Self::tiny()
        }
    }

    /// Same depth and width with a 2048-wide feed-forward: about 85M
    /// parameters, the discriminative reference size.
    pub fn reference_discriminative() -> Self {
        Self {
            ff_hidden_dim: 2048,
            ..Self::reference_generative()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn patch_len(&self) -> usize {
        self.geometry.patch_len()
    }

    /// Width of one position's output: L patches.
    pub fn out_len(&self) -> usize {
        self.geometry.patches_per_step * self.patch_len()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.ff_hidden_dim == 0 {
            return bad("layer count and widths must be positive".into());
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!("hidden_dim {} is not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.window == 0 || self.window > u16::MAX as usize {
            return bad(format!("window {} out of range", self.window));
        }
        if !(self.sigmoid_temperature > 0.0) || !(0.0..=1.0).contains(&self.decode_threshold) {
            return bad("temperature must be positive and threshold within [0, 1]".into());
        }
        if !(self.rmsnorm_eps >= 0.0) || !(self.rope_base > 0.0) {
            return bad("rmsnorm_eps must be non-negative and rope_base positive".into());
        }
        Ok(())
    }

    /// Analytic parameter count of the generator.
    pub fn param_count(&self) -> usize {
        let (d, ff, p) = (self.hidden_dim, self.ff_hidden_dim, self.patch_len());
        let per_layer = 2 * d + 4 * d * d + 3 * d * ff;
        p * d + d + self.n_layers * per_layer + d + d * self.out_len() + self.out_len()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let g = &self.geometry;
        [
            ("n_layers", self.n_layers.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ff_hidden_dim", self.ff_hidden_dim.to_string()),
            ("patch_height", g.height.to_string()),
            ("patch_width", g.width.to_string()),
            ("channels", g.channels.to_string()),
            ("patches_per_step", g.patches_per_step.to_string()),
            ("window", self.window.to_string()),
            ("sigmoid_temperature", self.sigmoid_temperature.to_string()),
            ("decode_threshold", self.decode_threshold.to_string()),
            ("rmsnorm_eps", self.rmsnorm_eps.to_string()),
            ("rope_base", self.rope_base.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Apply a single `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "n_layers" => self.n_layers = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "ff_hidden_dim" => self.ff_hidden_dim = num(key, value)?,
            "patch_height" => self.geometry.height = num(key, value)?,
            "patch_width" => self.geometry.width = num(key, value)?,
            "channels" => self.geometry.channels = num(key, value)?,
            "patches_per_step" => self.geometry.patches_per_step = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "sigmoid_temperature" => self.sigmoid_temperature = num(key, value)?,
            "decode_threshold" => self.decode_threshold = num(key, value)?,
            "rmsnorm_eps" => self.rmsnorm_eps = num(key, value)?,
            "rope_base" => self.rope_base = num(key, value)?,
            _ => return Err(Error::InvalidInput(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::tiny();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
