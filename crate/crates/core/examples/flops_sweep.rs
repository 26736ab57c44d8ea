//! Sparse versus dense cost over the sparsity sweep, per layer.

use sdmamba::model::SdmambaConfig;
use sdmamba::train::{count_flops, lambda_sweep, sweep_table, SWEEP_LAMBDAS};

fn main() {
    for patch in [9, 13] {
        let config = SdmambaConfig {
            patch_size: patch,
            ..Default::default()
        };
        println!("patch {patch}, {} bands, D = {}", config.in_bands, config.hidden_dim);
        print!("{}", sweep_table(&lambda_sweep(&config, &SWEEP_LAMBDAS)));
        let r = count_flops(&config);
        println!("layer MACs at λ = 0.3: {:?}\n", r.sparse);
    }
}
