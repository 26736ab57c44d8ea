use super::cube::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-band min-max scaling to `[0, 1]`. Constant bands become 0.
pub fn normalize(cube: &HsiCube) -> HsiCube {
    let b = cube.bands;
    let mut lo = vec![f32::INFINITY; b];
    let mut hi = vec![f32::NEG_INFINITY; b];
    for px in cube.data.chunks_exact(b) {
        for (i, &v) in px.iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    let mut out = cube.clone();
    for px in out.data.chunks_exact_mut(b) {
        for (i, v) in px.iter_mut().enumerate() {
            let range = hi[i] as f64 - lo[i] as f64;
            *v = if range > 0.0 {
                ((*v as f64 - lo[i] as f64) / range) as f32
            } else {
                0.0
            };
        }
    }
    out
}

/// Mirror index without repeating the edge: `-1 → 1`, `n → n-2`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn check_coord(cube: &HsiCube, row: usize, col: usize) -> Result<()> {
    if row >= cube.height || col >= cube.width {
        return Err(Error::Index {
            op: "extract_patch",
            index: row * cube.width + col,
            extent: cube.height * cube.width,
        });
    }
    Ok(())
}

/// `[bands, P, P]` window centred on `(row, col)`, mirror-padded.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, patch_size: usize) -> Result<Tensor> {
    if patch_size.is_multiple_of(2) {
        return Err(Error::Config(format!("patch size must be odd, got {patch_size}")));
    }
    check_coord(cube, row, col)?;
    let mut out = vec![0.0; cube.bands * patch_size * patch_size];
    write_patch(cube, row, col, patch_size, &mut out);
    Tensor::new(&[cube.bands, patch_size, patch_size], out)
}

fn write_patch(cube: &HsiCube, row: usize, col: usize, p: usize, out: &mut [f32]) {
    let half = (p / 2) as isize;
    let plane = p * p;
    for dy in 0..p {
        let r = reflect(row as isize + dy as isize - half, cube.height);
        for dx in 0..p {
            let c = reflect(col as isize + dx as isize - half, cube.width);
            for (band, &v) in cube.pixel(r, c).iter().enumerate() {
                out[band * plane + dy * p + dx] = v;
            }
        }
    }
}

/// `[N, bands, P, P]` batch of patches.
pub fn extract_batch(cube: &HsiCube, coords: &[(usize, usize)], patch_size: usize) -> Result<Tensor> {
    if patch_size.is_multiple_of(2) {
        return Err(Error::Config(format!("patch size must be odd, got {patch_size}")));
    }
    if coords.is_empty() {
        return Err(Error::Contract("empty coordinate list".into()));
    }
    for &(r, c) in coords {
        check_coord(cube, r, c)?;
    }
    let per = cube.bands * patch_size * patch_size;
    let mut out = vec![0.0; coords.len() * per];
    for (chunk, &(r, c)) in out.chunks_exact_mut(per).zip(coords) {
        write_patch(cube, r, c, patch_size, chunk);
    }
    Tensor::new(&[coords.len(), cube.bands, patch_size, patch_size], out)
}
