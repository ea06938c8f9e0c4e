//! Regenerates the bundled toy corpus under `data/toy_corpus`.

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy_corpus"));
    std::fs::create_dir_all(&dir)?;
    for (name, bytes) in miditune::toy::bundled_corpus() {
        std::fs::write(dir.join(&name), bytes)?;
        println!("{name}");
    }
    Ok(())
}
