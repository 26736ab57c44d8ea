//! Reverse-mode gradients of a tiny two-layer network.

use sdmamba::tensor::{Tape, Tensor};

fn main() -> sdmamba::Result<()> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?);
    let w1 = tape.param(Tensor::new(&[3, 4], (0..12).map(|i| (i as f32 - 6.0) / 10.0).collect())?);
    let w2 = tape.param(Tensor::new(&[4, 2], (0..8).map(|i| (i as f32 - 3.0) / 5.0).collect())?);

    let logits = x.matmul(w1)?.gelu().matmul(w2)?;
    let loss = logits.cross_entropy(&[0, 1])?;
    tape.backward(loss)?;

    println!("loss      {:.6}", loss.value().item());
    println!("tape size {} nodes", tape.len());
    println!("dL/dw2    {:?}", w2.grad().unwrap().data());
    println!("dL/dw1    {:?}", w1.grad().unwrap().data());
    Ok(())
}
