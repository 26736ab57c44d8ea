//! Write a synthetic cube, read it back, cut a patch and a split.

use sdmamba::data::{extract_patch, load_cube, save_cube, stratified_split, synthesize_cube, SynthSpec};

fn main() -> sdmamba::Result<()> {
    let cube = synthesize_cube(&SynthSpec {
        background: true,
        ..Default::default()
    })?;
    let path = std::env::temp_dir().join("sdmamba-example.hsc");
    save_cube(&cube, &path)?;
    let back = load_cube(&path)?;
    println!("{} bytes, round trip exact: {}", std::fs::metadata(&path)?.len(), back == cube);
    println!("{}×{}×{}, class counts {:?}", back.height, back.width, back.bands, back.class_counts());

    let patch = extract_patch(&back, 0, 0, 5)?;
    println!("corner patch {:?}, band 0 row 0 {:?}", patch.shape(), &patch.data()[..5]);

    let split = stratified_split(&back, 0.1, 0.1, 3)?;
    println!("train {} / val {} / test {}", split.train.len(), split.val.len(), split.test.len());
    print!("{}", split.to_text().lines().take(3).collect::<Vec<_>>().join("\n"));
    println!();
    std::fs::remove_file(&path)?;
    Ok(())
}
