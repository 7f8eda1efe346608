use crate::error::{Error, Result};
use crate::kv::KvFile;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    /// Patch side at which projection weights are stored.
    pub canonical_patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small enough that a training step takes well under a second.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            embed_dim: 96,
            heads: 4,
            mlp_ratio: 4,
            decoder_layers: 2,
            decoder_dim: 64,
            decoder_heads: 4,
            canonical_patch: 16,
        }
    }

    pub fn tiny() -> Self {
        Self {
            layers: 12,
            embed_dim: 192,
            heads: 3,
            mlp_ratio: 4,
            decoder_layers: 2,
            decoder_dim: 128,
            decoder_heads: 4,
            canonical_patch: 16,
        }
    }

    /// For finite-difference checks.
    pub fn micro() -> Self {
        Self {
            layers: 1,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            decoder_layers: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            canonical_patch: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad("decoder_dim must be a multiple of decoder_heads");
        }
        if self.decoder_dim == 0 || self.decoder_dim % 4 != 0 {
            return bad("decoder_dim must be a positive multiple of 4 (two sin/cos axes)");
        }
        if self.mlp_ratio == 0 || self.canonical_patch == 0 {
            return bad("mlp_ratio and canonical_patch must be positive");
        }
        Ok(())
    }

    /// Reads `model.*` keys from `kv`, starting from `model.preset` if given
    /// and from `base` otherwise.
    pub fn from_kv(kv: &mut KvFile, base: &Self) -> Result<Self> {
        let preset: String = kv.take("model.preset", String::new())?;
        let d = if preset.is_empty() { base.clone() } else { Self::preset(&preset)? };
        let cfg = Self {
            layers: kv.take("model.layers", d.layers)?,
            embed_dim: kv.take("model.embed_dim", d.embed_dim)?,
            heads: kv.take("model.heads", d.heads)?,
            mlp_ratio: kv.take("model.mlp_ratio", d.mlp_ratio)?,
            decoder_layers: kv.take("model.decoder_layers", d.decoder_layers)?,
            decoder_dim: kv.take("model.decoder_dim", d.decoder_dim)?,
            decoder_heads: kv.take("model.decoder_heads", d.decoder_heads)?,
            canonical_patch: kv.take("model.canonical_patch", d.canonical_patch)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("decoder_dim", self.decoder_dim.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("canonical_patch", self.canonical_patch.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in ["desk", "tiny", "micro"] {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        let t = ModelConfig::tiny();
        assert_eq!((t.layers, t.embed_dim, t.heads, t.mlp_ratio), (12, 192, 3, 4));
        let bad = ModelConfig { heads: 5, ..ModelConfig::desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig { layers: 3, ..ModelConfig::micro() };
        let text = crate::kv::render(&[("model", cfg.to_kv())]);
        let mut kv = KvFile::parse(&text).unwrap();
        assert_eq!(ModelConfig::from_kv(&mut kv, &ModelConfig::desk()).unwrap(), cfg);
        kv.finish().unwrap();
    }
}
