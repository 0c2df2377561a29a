//! Run configuration shared by every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Conditioning, DiffusionConfig, PointEstimate, PriorMode, RetrievalMode};
use crate::encoder::{EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::walks::WalkParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Diffusion,
    Point,
}

/// Every hyperparameter and ablation switch of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(default)]
pub struct RunConfig {
    /// Hexagon edge length in metres.
    #[arg(long, default_value_t = 150.0)]
    pub edge_m: f64,
    /// Random walks per cell.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Steps per walk.
    #[arg(long, default_value_t = 4)]
    pub l: usize,
    /// Walk return parameter.
    #[arg(long, default_value_t = 1.0)]
    pub p: f64,
    /// Walk in-out parameter.
    #[arg(long, default_value_t = 0.1)]
    pub q: f64,
    /// Fraction of walk positions masked during pretraining.
    #[arg(long, default_value_t = 0.3)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 3)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 1)]
    pub dec_layers: usize,
    /// Cell/region embedding width.
    #[arg(long, default_value_t = 144)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 100)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub lr_pre: f64,
    #[arg(long, default_value_t = 64)]
    pub pretrain_batch: usize,
    /// Resample walks only once instead of every epoch.
    #[arg(long)]
    pub frozen_walks: bool,
    /// Drop the learned positional table.
    #[arg(long)]
    pub no_positions: bool,
    /// Diffusion timesteps.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_1: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_t: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub lr_diff: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1500)]
    pub diff_epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub diff_batch: usize,
    /// Retrieved neighbours per prior.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Sampling rounds per prediction.
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    /// Denoiser hidden width.
    #[arg(long, default_value_t = 128)]
    pub d_dn: usize,
    #[arg(long, env = "URBANVERSE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PriorMode::Retrieved)]
    pub prior: PriorMode,
    #[arg(long, value_enum, default_value_t = RetrievalMode::Topk)]
    pub retrieval: RetrievalMode,
    #[arg(long, value_enum, default_value_t = Conditioning::Em)]
    pub conditioning: Conditioning,
    #[arg(long, value_enum, default_value_t = Head::Diffusion)]
    pub head: Head,
    #[arg(long, value_enum, default_value_t = PointEstimate::Mean)]
    pub point_estimate: PointEstimate,
    /// Accept zero-variance tasks by using unit scale.
    #[arg(long)]
    pub allow_degenerate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            edge_m: 150.0,
            k: 8,
            l: 4,
            p: 1.0,
            q: 0.1,
            mask_ratio: 0.3,
            enc_layers: 3,
            dec_layers: 1,
            d: 144,
            heads: 4,
            dropout: 0.1,
            pretrain_epochs: 100,
            lr_pre: 1e-7,
            pretrain_batch: 64,
            frozen_walks: false,
            no_positions: false,
            steps: 100,
            beta_1: 1e-4,
            beta_t: 0.02,
            lr_diff: 5e-3,
            weight_decay: 0.01,
            diff_epochs: 1500,
            diff_batch: 64,
            top_k: 5,
            rounds: 10,
            d_dn: 128,
            seed: 0,
            prior: PriorMode::Retrieved,
            retrieval: RetrievalMode::Topk,
            conditioning: Conditioning::Em,
            head: Head::Diffusion,
            point_estimate: PointEstimate::Mean,
            allow_degenerate: false,
        }
    }
}

impl RunConfig {
    pub fn walks(&self) -> WalkParams {
        WalkParams {
            k: self.k,
            l: self.l,
            p: self.p,
            q: self.q,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            dropout: self.dropout,
            positions: !self.no_positions,
            seq_len: self.k * self.l + 1,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            walks: self.walks(),
            mask_ratio: self.mask_ratio,
            epochs: self.pretrain_epochs,
            learning_rate: self.lr_pre,
            batch_size: self.pretrain_batch,
            frozen_walks: self.frozen_walks,
        }
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            steps: self.steps,
            beta_1: self.beta_1,
            beta_t: self.beta_t,
            hidden: self.d_dn,
            conditioning: self.conditioning,
            prior: self.prior,
            retrieval: self.retrieval,
            k: self.top_k,
            epochs: self.diff_epochs,
            learning_rate: self.lr_diff,
            weight_decay: self.weight_decay,
            batch_size: self.diff_batch,
            allow_degenerate: self.allow_degenerate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.walks().validate()?;
        self.encoder().validate()?;
        self.diffusion().schedule()?;
        if !(self.edge_m > 0.0) {
            return Err(Error::Config(format!("edge_m must be positive, got {}", self.edge_m)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.top_k == 0 || self.rounds == 0 || self.d_dn == 0 {
            return Err(Error::Config("top-k, rounds and d_dn must be at least 1".into()));
        }
        if !(self.lr_pre > 0.0 && self.lr_diff > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
