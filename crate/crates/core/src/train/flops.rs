//! Closed-form multiply-accumulate counts of one forward pass.
//!
//! Only product-sum work is counted: convolutions, matrix products, the
//! causal conv and the scan. The same ops feed the runtime counter in
//! [`crate::tensor::counter`], so the two agree exactly.

use std::fmt::Write as _;

use crate::model::{SdmambaConfig, SdmambaModel};
use crate::sds::selected_count;

/// Ratios of the sparsity sweep.
pub const SWEEP_LAMBDAS: [f64; 6] = [0.05, 0.1, 0.3, 0.5, 0.7, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMacs {
    pub stem: u64,
    pub spatial_mamba: u64,
    pub spectral_mamba: u64,
    pub fusion: u64,
    pub head: u64,
}

impl LayerMacs {
    pub fn mamba(&self) -> u64 {
        self.spatial_mamba + self.spectral_mamba
    }

    pub fn total(&self) -> u64 {
        self.stem + self.mamba() + self.fusion + self.head
    }
}

/// Per-sample counts with sparse sequencing and with every token sequenced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopReport {
    pub lambda_spatial: f64,
    pub lambda_spectral: f64,
    pub spatial_tokens: (usize, usize),
    pub spectral_tokens: (usize, usize),
    pub sparse: LayerMacs,
    pub dense: LayerMacs,
}

impl FlopReport {
    pub fn sparse_macs(&self) -> u64 {
        self.sparse.total()
    }

    pub fn dense_macs(&self) -> u64 {
        self.dense.total()
    }

    /// One multiply-accumulate counts as two FLOPs.
    pub fn sparse_flops(&self) -> u64 {
        2 * self.sparse_macs()
    }

    pub fn dense_flops(&self) -> u64 {
        2 * self.dense_macs()
    }
}

fn layer_macs(config: &SdmambaConfig, spatial_len: usize, spectral_len: usize) -> LayerMacs {
    let (b, d, k, ks) = (
        config.in_bands as u64,
        config.hidden_dim as u64,
        config.num_classes as u64,
        config.stem_kernel as u64,
    );
    let hw = config.spatial_tokens() as u64;
    let spatial = SdmambaModel::spatial_dims(config).macs_per_token();
    let spectral = SdmambaModel::spectral_dims(config).macs_per_token();
    LayerMacs {
        stem: d * hw * b * ks * ks,
        spatial_mamba: spatial_len as u64 * spatial,
        spectral_mamba: spectral_len as u64 * spectral,
        // Q, K, V projections, then QKᵀ and attention·V.
        fusion: 3 * hw * d * d + 2 * hw * hw * d,
        head: d * k,
    }
}

pub fn count_flops(config: &SdmambaConfig) -> FlopReport {
    let n_spa = config.spatial_tokens();
    let n_spe = config.hidden_dim;
    let s_spa = selected_count(n_spa, config.lambda_spatial);
    let s_spe = selected_count(n_spe, config.lambda_spectral);
    FlopReport {
        lambda_spatial: config.lambda_spatial,
        lambda_spectral: config.lambda_spectral,
        spatial_tokens: (s_spa, n_spa),
        spectral_tokens: (s_spe, n_spe),
        sparse: layer_macs(config, s_spa, s_spe),
        dense: layer_macs(config, n_spa, n_spe),
    }
}

/// One report per ratio, applied to both branches.
pub fn lambda_sweep(config: &SdmambaConfig, lambdas: &[f64]) -> Vec<FlopReport> {
    lambdas
        .iter()
        .map(|&l| {
            count_flops(&SdmambaConfig {
                lambda_spatial: l,
                lambda_spectral: l,
                ..config.clone()
            })
        })
        .collect()
}

fn mega(flops: u64) -> String {
    format!("{:.2}M", flops as f64 / 1e6)
}

pub fn sweep_table(reports: &[FlopReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>9} {:>9} {:>14} {:>14} {:>10} {:>10} {:>7}",
        "lambda", "spa tok", "spe tok", "sparse MAC", "dense MAC", "sparse", "dense", "ratio"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:>6} {:>9} {:>9} {:>14} {:>14} {:>10} {:>10} {:>7.3}",
            r.lambda_spatial,
            format!("{}/{}", r.spatial_tokens.0, r.spatial_tokens.1),
            format!("{}/{}", r.spectral_tokens.0, r.spectral_tokens.1),
            r.sparse_macs(),
            r.dense_macs(),
            mega(r.sparse_flops()),
            mega(r.dense_flops()),
            r.sparse_macs() as f64 / r.dense_macs() as f64,
        );
    }
    s
}
