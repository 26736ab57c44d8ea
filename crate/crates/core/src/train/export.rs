use std::fmt::Write as _;
use std::path::Path;

use super::trainer::predict_coords;
use crate::data::HsiCube;
use crate::error::Result;
use crate::model::SdmambaModel;

/// One `row,col,label,f_1,…,f_D` line per coordinate, using the fused
/// centre-pixel features that feed the classifier head.
pub fn embedding_text(model: &SdmambaModel, cube: &HsiCube, coords: &[(usize, usize)]) -> Result<String> {
    let mut s = String::new();
    if coords.is_empty() {
        return Ok(s);
    }
    let features = predict_coords(model, cube, coords)?.features;
    for (i, &(r, c)) in coords.iter().enumerate() {
        let _ = write!(s, "{r},{c},{}", cube.label(r, c));
        for f in features.row(i) {
            let _ = write!(s, ",{f}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings(
    model: &SdmambaModel,
    cube: &HsiCube,
    coords: &[(usize, usize)],
    path: impl AsRef<Path>,
) -> Result<usize> {
    std::fs::write(path, embedding_text(model, cube, coords)?)?;
    Ok(coords.len())
}
