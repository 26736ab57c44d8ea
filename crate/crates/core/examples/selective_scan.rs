//! The scan recurrence on a two-step sequence with half decay, then a
//! gradient through it.

use sdmamba::mamba::{scan_values, selective_scan, ScanInputs};
use sdmamba::tensor::{Tape, Tensor};

fn main() -> sdmamba::Result<()> {
    let ln2 = std::f32::consts::LN_2;
    let t = |shape: &[usize], v: &[f32]| Tensor::new(shape, v.to_vec());
    let (u, delta) = (t(&[2, 1], &[1.0, 1.0])?, t(&[2, 1], &[ln2, ln2])?);
    let (a, b, c, d) = (t(&[1, 1], &[-1.0])?, t(&[2, 1], &[1.0, 1.0])?, t(&[2, 1], &[1.0, 1.0])?, t(&[1], &[0.0])?);

    let trace = scan_values(&u, &delta, &a, &b, &c, &d)?;
    println!("y      {:?}  (ln2 = {ln2:.6}, 1.5·ln2 = {:.6})", trace.y.data(), 1.5 * ln2);
    println!("states {:?}", trace.states);

    let tape = Tape::new();
    let inputs = ScanInputs {
        u: tape.param(u),
        delta: tape.param(delta),
        b: tape.param(b),
        c: tape.param(c),
    };
    let (a, d) = (tape.param(a), tape.param(d));
    tape.backward(selective_scan(a, d, &inputs)?.sum())?;
    println!("dy/du  {:?}", inputs.u.grad().unwrap().data());
    println!("dy/dA  {:?}", a.grad().unwrap().data());
    Ok(())
}
