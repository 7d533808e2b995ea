use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters. `desk` fits a 2-core CPU budget; `paper`
/// mirrors the full-scale constants (ResNet-50-class widths, 112px input)
/// and is meant for reference, not CI.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    /// number of age groups
    pub n_groups: usize,
    /// per-group filter count F of the shared bank
    pub filters_per_group: usize,
    /// filters shared by adjacent groups (S)
    pub shared_filters: usize,
    /// identity embedding dimension d
    pub embed_dim: usize,
    /// encoder stage widths: stem + 4 stride-2 stages
    pub enc_widths: [usize; 5],
    /// hidden width of the age head's first linear layer
    pub age_hidden: usize,
    /// squeeze-and-excitation reduction ratio
    pub se_reduction: usize,
    /// fused condition widths per pyramid level (coarse to fine)
    pub cond_widths: [usize; 3],
    /// decoder level widths (coarse to fine), then pre-RGB width
    pub dec_widths: [usize; 4],
    pub style_dim: usize,
    /// discriminator block widths
    pub disc_widths: [usize; 3],
    /// perceptual extractor stage widths
    pub lpips_widths: [usize; 4],
    /// number of identity classes (set from the training manifest)
    pub n_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }
}

impl ArchConfig {
    pub fn desk(n_classes: usize) -> Self {
        ArchConfig {
            image_size: 64,
            n_groups: 7,
            filters_per_group: 32,
            shared_filters: 4,
            embed_dim: 64,
            enc_widths: [12, 16, 32, 64, 96],
            age_hidden: 128,
            se_reduction: 8,
            cond_widths: [48, 32, 24],
            dec_widths: [48, 24, 12, 8],
            style_dim: 64,
            disc_widths: [16, 32, 64],
            lpips_widths: [8, 16, 32, 64],
            n_classes,
        }
    }

    pub fn paper(n_classes: usize) -> Self {
        ArchConfig {
            image_size: 112,
            n_groups: 7,
            filters_per_group: 128,
            shared_filters: 16,
            embed_dim: 512,
            enc_widths: [64, 256, 512, 1024, 2048],
            age_hidden: 512,
            se_reduction: 16,
            cond_widths: [512, 256, 128],
            dec_widths: [512, 256, 128, 64],
            style_dim: 512,
            disc_widths: [128, 256, 512],
            lpips_widths: [64, 128, 256, 512],
            n_classes,
        }
    }

    pub fn preset(p: Preset, n_classes: usize) -> Self {
        match p {
            Preset::Desk => Self::desk(n_classes),
            Preset::Paper => Self::paper(n_classes),
        }
    }

    /// Spatial side of the encoder output (downsampling factor is 16).
    pub fn feature_size(&self) -> usize {
        self.image_size / 16
    }

    pub fn feature_channels(&self) -> usize {
        self.enc_widths[4]
    }

    /// Total unique filters in a shared bank: n_g*F - (n_g-1)*S.
    pub fn bank_total_filters(&self) -> usize {
        self.n_groups * self.filters_per_group - (self.n_groups - 1) * self.shared_filters
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 16 != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by 16",
                self.image_size
            )));
        }
        if self.image_size / 16 < 1 {
            return Err(Error::config("image size too small".to_string()));
        }
        if self.n_groups < 2 {
            return Err(Error::config("need at least 2 age groups".to_string()));
        }
        if self.shared_filters >= self.filters_per_group {
            return Err(Error::config(format!(
                "shared filters S={} must be < per-group filters F={}",
                self.shared_filters, self.filters_per_group
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive".to_string()));
        }
        Ok(())
    }
}
