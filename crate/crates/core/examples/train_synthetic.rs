//! Train the reduced model on the synthetic cube and report test accuracy.

use sdmamba::data::{normalize, stratified_split, synthesize_cube, SynthSpec};
use sdmamba::model::{SdmambaConfig, SdmambaModel};
use sdmamba::train::{evaluate, train};

fn main() -> sdmamba::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cube = normalize(&synthesize_cube(&SynthSpec::default())?);
    let split = stratified_split(&cube, 0.1, 0.1, 7)?;
    let config = SdmambaConfig {
        patch_size: 7,
        in_bands: cube.bands,
        hidden_dim: 32,
        num_classes: cube.num_classes,
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 15,
        seed: 7,
        ..Default::default()
    };
    let outcome = train(SdmambaModel::new(config)?, &cube, &split)?;
    println!("best epoch {}", outcome.best_epoch);
    println!("{}", evaluate(&outcome.model, &cube, &split.test)?);
    Ok(())
}
