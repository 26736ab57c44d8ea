//! The end-to-end classifier.
//!
//! ```text
//!   X ─ stem (conv → BN → GELU) ─ Y ─┬─ spatial SDS + Mamba ──┐ (Q)
//!                                    └─ spectral SDS + Mamba ─┴─ (K, V) ─ attention fusion ─ centre pixel ─ linear head
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::SdmambaConfig;
use crate::error::{Error, Result};
use crate::mamba::{MambaBlockParams, MambaBlockVars, MambaDims};
use crate::params::{join, Binder, Parameterized};
use crate::sds::{
    self, sequence_and_restore, spatial_anchor, spectral_anchor, SparseSelection,
};
use crate::tensor::{counter, BatchStats, Tape, Tensor, Var, BN_MOMENTUM};

#[derive(Clone, Debug, PartialEq)]
pub struct StemParams {
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weights plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SdmambaModel {
    pub config: SdmambaConfig,
    pub stem: StemParams,
    pub spatial_block: MambaBlockParams,
    pub spectral_block: MambaBlockParams,
    pub fusion: FusionParams,
    pub head: HeadParams,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// How a forward pass treats batchnorm and the spectral anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; spectral anchor drawn from `anchor_seed`.
    Train { anchor_seed: u64 },
    /// Running statistics; spectral anchor drawn from the config seed.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct StemVars<'t> {
    pub conv_weight: Var<'t>,
    pub conv_bias: Var<'t>,
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

/// Model weights recorded on one tape.
pub struct BoundModel<'t> {
    pub binder: Binder<'t>,
    pub stem: StemVars<'t>,
    pub spatial: MambaBlockVars<'t>,
    pub spectral: MambaBlockVars<'t>,
    pub fusion: FusionVars<'t>,
    pub head: HeadVars<'t>,
}

/// Instrumentation gathered during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardStats {
    /// Tokens fed to the spatial block, per sample.
    pub spatial_tokens: Vec<usize>,
    /// Tokens fed to the spectral block, per sample.
    pub spectral_tokens: Vec<usize>,
    pub spatial_selections: Vec<Vec<usize>>,
    pub spectral_selections: Vec<Vec<usize>>,
    /// MACs recorded inside both SDS + Mamba branches.
    pub mamba_macs: u64,
    pub total_macs: u64,
}

#[derive(Debug)]
pub struct ForwardOutput<'t> {
    /// `[B, K]`.
    pub logits: Var<'t>,
    /// Fused centre-pixel features fed to the head, `[B, D]`.
    pub features: Var<'t>,
    pub stats: ForwardStats,
    /// Present in train mode.
    pub batch_stats: Option<BatchStats>,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput<'t> {
    /// `[D, H, W]`.
    pub fused: Var<'t>,
    /// Row-stochastic `[HW, HW]`.
    pub attention: Var<'t>,
}

/// Eval-mode outputs for a set of patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub features: Tensor,
}

impl Prediction {
    pub fn classes(&self) -> Vec<usize> {
        let k = self.logits.shape()[1];
        (0..self.logits.shape()[0])
            .map(|i| {
                let row = &self.logits.data()[i * k..(i + 1) * k];
                (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }
}

impl SdmambaModel {
    pub fn new(config: SdmambaConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let SdmambaConfig {
            in_bands: bands,
            hidden_dim: d,
            num_classes: k,
            stem_kernel: ks,
            ..
        } = config;
        let stem_bound = 1.0 / ((bands * ks * ks) as f32).sqrt();
        let stem = StemParams {
            conv_weight: Tensor::uniform(&[d, bands, ks, ks], stem_bound, &mut rng),
            conv_bias: Tensor::uniform(&[d], stem_bound, &mut rng),
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        };
        let spatial_block = MambaBlockParams::init(Self::spatial_dims(&config), &mut rng);
        let spectral_block = MambaBlockParams::init(Self::spectral_dims(&config), &mut rng);
        let fan_d = 1.0 / (d as f32).sqrt();
        let fusion = FusionParams {
            w_q: Tensor::uniform(&[d, d], fan_d, &mut rng),
            w_k: Tensor::uniform(&[d, d], fan_d, &mut rng),
            w_v: Tensor::uniform(&[d, d], fan_d, &mut rng),
        };
        let head = HeadParams {
            weight: Tensor::uniform(&[d, k], fan_d, &mut rng),
            bias: Tensor::zeros(&[k]),
        };
        Ok(Self {
            config,
            stem,
            spatial_block,
            spectral_block,
            fusion,
            head,
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::ones(&[d]),
        })
    }

    /// Spatial tokens are `D`-wide, one per pixel of the patch.
    pub fn spatial_dims(config: &SdmambaConfig) -> MambaDims {
        MambaDims::new(config.hidden_dim, config.d_state, config.expand, config.use_conv)
    }

    /// Spectral tokens are `H·W`-wide, one per feature channel.
    pub fn spectral_dims(config: &SdmambaConfig) -> MambaDims {
        MambaDims::new(config.spatial_tokens(), config.d_state, config.expand, config.use_conv)
    }

    /// Closed-form trainable parameter count.
    pub fn expected_parameter_count(config: &SdmambaConfig) -> usize {
        let (b, d, k, ks) = (config.in_bands, config.hidden_dim, config.num_classes, config.stem_kernel);
        let stem = d * b * ks * ks + d + 2 * d;
        let blocks = Self::spatial_dims(config).param_count() + Self::spectral_dims(config).param_count();
        stem + blocks + 3 * d * d + d * k + k
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        let mut binder = Binder::new(tape, trainable);
        let stem = StemVars {
            conv_weight: binder.bind("stem.conv.weight".into(), &self.stem.conv_weight),
            conv_bias: binder.bind("stem.conv.bias".into(), &self.stem.conv_bias),
            gamma: binder.bind("stem.bn.gamma".into(), &self.stem.gamma),
            beta: binder.bind("stem.bn.beta".into(), &self.stem.beta),
        };
        let spatial = self.spatial_block.bind(&mut binder, "spatial");
        let spectral = self.spectral_block.bind(&mut binder, "spectral");
        let fusion = FusionVars {
            w_q: binder.bind("fusion.w_q".into(), &self.fusion.w_q),
            w_k: binder.bind("fusion.w_k".into(), &self.fusion.w_k),
            w_v: binder.bind("fusion.w_v".into(), &self.fusion.w_v),
        };
        let head = HeadVars {
            weight: binder.bind("head.weight".into(), &self.head.weight),
            bias: binder.bind("head.bias".into(), &self.head.bias),
        };
        BoundModel {
            binder,
            stem,
            spatial,
            spectral,
            fusion,
            head,
        }
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let blend = |running: &mut Tensor, batch: &[f32]| {
            for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        };
        blend(&mut self.running_mean, &stats.mean);
        blend(&mut self.running_var, &stats.var);
    }

    /// Batchnorm running statistics, which are saved but not trained.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("stem.bn.running_mean".into(), &self.running_mean);
        f("stem.bn.running_var".into(), &self.running_var);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("stem.bn.running_mean".into(), &mut self.running_mean);
        f("stem.bn.running_var".into(), &mut self.running_var);
    }

    /// `batch: [B, bands, P, P]` → logits `[B, K]`.
    pub fn forward<'t>(
        &self,
        bound: &BoundModel<'t>,
        batch: Var<'t>,
        mode: Mode,
    ) -> Result<ForwardOutput<'t>> {
        let cfg = &self.config;
        let shape = batch.shape();
        let p = cfg.patch_size;
        if shape.len() != 4 || shape[1] != cfg.in_bands || shape[2] != p || shape[3] != p {
            return Err(Error::dim("forward", &shape, &[shape[0], cfg.in_bands, p, p]));
        }
        let macs_before = counter::total();
        let (y, batch_stats) = match mode {
            Mode::Train { .. } => {
                let (y, s) = stem_forward_train(&bound.stem, batch)?;
                (y, Some(s))
            }
            Mode::Eval => (
                stem_forward_eval(&bound.stem, batch, self.running_mean.data(), self.running_var.data())?,
                None,
            ),
        };
        let anchor_seed = match mode {
            Mode::Train { anchor_seed } => anchor_seed,
            Mode::Eval => cfg.seed,
        };

        let mut stats = ForwardStats::default();
        let mut logits = Vec::with_capacity(shape[0]);
        let mut features = Vec::with_capacity(shape[0]);
        for b in 0..shape[0] {
            let sample = y.gather_rows(&[b])?.reshape(&[cfg.hidden_dim, p, p])?;
            let (branches, macs) = counter::measure(|| -> Result<_> {
                let spa = sdspam_forward(sample, &bound.spatial, cfg.lambda_spatial)?;
                let spe = sdspem_forward(sample, &bound.spectral, cfg.lambda_spectral, anchor_seed)?;
                Ok((spa, spe))
            });
            let ((spa, spa_sel), (spe, spe_sel)) = branches?;
            stats.mamba_macs += macs;
            stats.spatial_tokens.push(spa_sel.len());
            stats.spectral_tokens.push(spe_sel.len());
            stats.spatial_selections.push(spa_sel.indices);
            stats.spectral_selections.push(spe_sel.indices);

            let fused = attention_fusion(spa, spe, &bound.fusion)?.fused;
            let feat = center_features(fused)?;
            logits.push(head_forward(feat, &bound.head)?);
            features.push(feat);
        }
        let tape = batch.tape();
        let logits = tape.concat_rows(&logits)?;
        let features = tape.concat_rows(&features)?;
        stats.total_macs = counter::total() - macs_before;
        Ok(ForwardOutput {
            logits,
            features,
            stats,
            batch_stats,
        })
    }

    /// Eval-mode logits and features for `patches: [N, bands, P, P]`,
    /// evaluated in parallel chunks with one tape each.
    pub fn predict(&self, patches: &Tensor) -> Result<Prediction> {
        const CHUNK: usize = 16;
        let cfg = &self.config;
        let p = cfg.patch_size;
        let expected = [patches.shape().first().copied().unwrap_or(0), cfg.in_bands, p, p];
        if patches.shape() != expected {
            return Err(Error::dim("predict", patches.shape(), &expected));
        }
        let n = expected[0];
        let per = cfg.in_bands * p * p;
        let chunks: Vec<Result<(Tensor, Tensor)>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let (lo, hi) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
                let mut shape = patches.shape().to_vec();
                shape[0] = hi - lo;
                let part = Tensor::new(&shape, patches.data()[lo * per..hi * per].to_vec())?;
                let tape = Tape::new();
                let bound = self.bind(&tape, false);
                let out = self.forward(&bound, tape.constant(part), Mode::Eval)?;
                let logits = out.logits.value().as_ref().clone();
                let features = out.features.value().as_ref().clone();
                Ok((logits, features))
            })
            .collect();
        let (k, d) = (self.config.num_classes, self.config.hidden_dim);
        let mut logits = Vec::with_capacity(n * k);
        let mut features = Vec::with_capacity(n * d);
        for chunk in chunks {
            let (l, f) = chunk?;
            logits.extend_from_slice(l.data());
            features.extend_from_slice(f.data());
        }
        Ok(Prediction {
            logits: Tensor::new(&[n, k], logits)?,
            features: Tensor::new(&[n, d], features)?,
        })
    }
}

impl Parameterized for SdmambaModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "stem.conv.weight"), &self.stem.conv_weight);
        f(join(prefix, "stem.conv.bias"), &self.stem.conv_bias);
        f(join(prefix, "stem.bn.gamma"), &self.stem.gamma);
        f(join(prefix, "stem.bn.beta"), &self.stem.beta);
        self.spatial_block.visit(&join(prefix, "spatial"), f);
        self.spectral_block.visit(&join(prefix, "spectral"), f);
        f(join(prefix, "fusion.w_q"), &self.fusion.w_q);
        f(join(prefix, "fusion.w_k"), &self.fusion.w_k);
        f(join(prefix, "fusion.w_v"), &self.fusion.w_v);
        f(join(prefix, "head.weight"), &self.head.weight);
        f(join(prefix, "head.bias"), &self.head.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "stem.conv.weight"), &mut self.stem.conv_weight);
        f(join(prefix, "stem.conv.bias"), &mut self.stem.conv_bias);
        f(join(prefix, "stem.bn.gamma"), &mut self.stem.gamma);
        f(join(prefix, "stem.bn.beta"), &mut self.stem.beta);
        self.spatial_block.visit_mut(&join(prefix, "spatial"), f);
        self.spectral_block.visit_mut(&join(prefix, "spectral"), f);
        f(join(prefix, "fusion.w_q"), &mut self.fusion.w_q);
        f(join(prefix, "fusion.w_k"), &mut self.fusion.w_k);
        f(join(prefix, "fusion.w_v"), &mut self.fusion.w_v);
        f(join(prefix, "head.weight"), &mut self.head.weight);
        f(join(prefix, "head.bias"), &mut self.head.bias);
    }
}

fn check_stem_input(stem: &StemVars<'_>, x: &Var<'_>) -> Result<()> {
    let (xs, ws) = (x.shape(), stem.conv_weight.shape());
    if xs.len() != 4 || xs[1] != ws[1] {
        return Err(Error::dim("stem", &xs, &ws));
    }
    Ok(())
}

/// `GELU(BN(conv(x)))` with batch statistics.
pub fn stem_forward_train<'t>(stem: &StemVars<'t>, x: Var<'t>) -> Result<(Var<'t>, BatchStats)> {
    check_stem_input(stem, &x)?;
    let pad = (stem.conv_weight.shape()[2] - 1) / 2;
    let conv = x.conv2d(stem.conv_weight, stem.conv_bias, pad)?;
    let (bn, stats) = conv.batchnorm_train(stem.gamma, stem.beta)?;
    Ok((bn.gelu(), stats))
}

/// `GELU(BN(conv(x)))` with fixed running statistics.
pub fn stem_forward_eval<'t>(
    stem: &StemVars<'t>,
    x: Var<'t>,
    running_mean: &[f32],
    running_var: &[f32],
) -> Result<Var<'t>> {
    check_stem_input(stem, &x)?;
    let pad = (stem.conv_weight.shape()[2] - 1) / 2;
    let conv = x.conv2d(stem.conv_weight, stem.conv_bias, pad)?;
    Ok(conv.batchnorm_eval(stem.gamma, stem.beta, running_mean, running_var)?.gelu())
}

fn dhw(y: &Var<'_>) -> Result<(usize, usize, usize)> {
    match y.shape()[..] {
        [d, h, w] => Ok((d, h, w)),
        ref s => Err(Error::dim("feature map", s, &[0, 0, 0])),
    }
}

/// `[D, H, W]` → `[HW, D]`.
fn pixel_tokens<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let (d, h, w) = dhw(&y)?;
    y.reshape(&[d, h * w])?.transpose()
}

/// `[HW, D]` → `[D, H, W]`.
fn from_pixel_tokens<'t>(tokens: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let d = tokens.shape()[1];
    tokens.transpose()?.reshape(&[d, h, w])
}

/// Spatial selection for `y: [D, H, W]`, anchored at the centre pixel.
pub fn spatial_selection(y: &Var<'_>, lambda: f64) -> Result<SparseSelection> {
    let (_, h, w) = dhw(y)?;
    let tokens = pixel_tokens(*y)?.value();
    sds::sparse_deformable_selection(&tokens, spatial_anchor(h, w), lambda)
}

/// Spatial branch with a given selection.
pub fn sdspam_with_selection<'t>(
    y: Var<'t>,
    sel: &SparseSelection,
    block: &MambaBlockVars<'t>,
) -> Result<Var<'t>> {
    let (_, h, w) = dhw(&y)?;
    let out = sequence_and_restore(pixel_tokens(y)?, sel, block)?;
    from_pixel_tokens(out, h, w)
}

/// Spatial branch: pixels are tokens, `[D, H, W]` → `[D, H, W]`.
pub fn sdspam_forward<'t>(
    y: Var<'t>,
    block: &MambaBlockVars<'t>,
    lambda: f64,
) -> Result<(Var<'t>, SparseSelection)> {
    let sel = spatial_selection(&y, lambda)?;
    Ok((sdspam_with_selection(y, &sel, block)?, sel))
}

/// Spectral branch: channels are tokens, `[D, H, W]` → `[D, H, W]`.
pub fn sdspem_forward<'t>(
    y: Var<'t>,
    block: &MambaBlockVars<'t>,
    lambda: f64,
    anchor_seed: u64,
) -> Result<(Var<'t>, SparseSelection)> {
    let (d, h, w) = dhw(&y)?;
    let tokens = y.reshape(&[d, h * w])?;
    let sel = sds::sparse_deformable_selection(&tokens.value(), spectral_anchor(d, anchor_seed), lambda)?;
    let out = sequence_and_restore(tokens, &sel, block)?.reshape(&[d, h, w])?;
    Ok((out, sel))
}

/// Queries from the spatial branch, keys and values from the spectral
/// branch, scaled dot-product attention over pixels.
pub fn attention_fusion<'t>(
    spa: Var<'t>,
    spe: Var<'t>,
    fusion: &FusionVars<'t>,
) -> Result<FusionOutput<'t>> {
    if spa.shape() != spe.shape() {
        return Err(Error::dim("attention_fusion", &spa.shape(), &spe.shape()));
    }
    let (d, h, w) = dhw(&spa)?;
    let spa_t = pixel_tokens(spa)?;
    let spe_t = pixel_tokens(spe)?;
    let q = spa_t.matmul(fusion.w_q)?;
    let k = spe_t.matmul(fusion.w_k)?;
    let v = spe_t.matmul(fusion.w_v)?;
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / (d as f32).sqrt());
    let attention = scores.softmax(1)?;
    let fused = from_pixel_tokens(attention.matmul(v)?, h, w)?;
    Ok(FusionOutput { fused, attention })
}

/// Feature vector of the centre pixel, `[1, D]`.
pub fn center_features<'t>(fused: Var<'t>) -> Result<Var<'t>> {
    let (_, h, w) = dhw(&fused)?;
    pixel_tokens(fused)?.gather_rows(&[spatial_anchor(h, w)])
}

fn head_forward<'t>(features: Var<'t>, head: &HeadVars<'t>) -> Result<Var<'t>> {
    features.matmul(head.weight)?.add_row_bias(head.bias)
}

/// Centre-pixel logits `[K]` from a fused `[D, H, W]` map.
pub fn classify<'t>(fused: Var<'t>, head: &HeadVars<'t>) -> Result<Var<'t>> {
    let k = head.bias.numel();
    head_forward(center_features(fused)?, head)?.reshape(&[k])
}
