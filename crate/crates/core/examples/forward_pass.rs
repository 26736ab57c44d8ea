//! One full-size forward pass with token and MAC counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdmamba::model::{Mode, SdmambaConfig, SdmambaModel};
use sdmamba::params::Parameterized;
use sdmamba::tensor::{Tape, Tensor};
use sdmamba::train::count_flops;

fn main() -> sdmamba::Result<()> {
    let config = SdmambaConfig {
        patch_size: 9,
        ..Default::default()
    };
    let model = SdmambaModel::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = Tensor::uniform(&[2, config.in_bands, 9, 9], 1.0, &mut rng);

    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let out = model.forward(&bound, tape.constant(batch), Mode::Eval)?;
    let stats = &out.stats;

    println!("parameters       {}", model.num_parameters());
    println!("logits           {:?}", out.logits.shape());
    println!("spatial tokens   {:?} of {}", stats.spatial_tokens, config.spatial_tokens());
    println!("spectral tokens  {:?} of {}", stats.spectral_tokens, config.hidden_dim);
    println!("MACs counted     {} per sample (Mamba {})", stats.total_macs / 2, stats.mamba_macs / 2);
    println!("MACs analytic    {} per sample", count_flops(&config).sparse_macs());
    Ok(())
}
