//! Ranking the pixels of a 5×5 patch by angle to the centre pixel and
//! keeping the closest 30%.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdmamba::sds::{spatial_anchor, spectral_anchor, sparse_deformable_selection};
use sdmamba::tensor::Tensor;

fn main() -> sdmamba::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = Tensor::uniform(&[25, 6], 1.0, &mut rng);
    let anchor = spatial_anchor(5, 5);
    let sel = sparse_deformable_selection(&tokens, anchor, 0.3)?;

    println!("anchor {anchor}, keeping {} of {}", sel.len(), sel.total_tokens());
    for &i in &sel.indices {
        println!("  token {i:>2} at ({}, {})  angle {:.4}", i / 5, i % 5, sel.angles[i]);
    }
    for row in 0..5 {
        let line: String = (0..5)
            .map(|col| if sel.indices.contains(&(row * 5 + col)) { '#' } else { '.' })
            .collect();
        println!("  {line}");
    }
    println!("spectral anchor for seed 42 over 256 channels: {}", spectral_anchor(256, 42));
    Ok(())
}
