//! Writes the composition graph as `train.txt`, `valid.txt` and `test.txt`
//! into the directory given as the first argument.

use std::path::PathBuf;

use hyperkg::toy::{composition_kg, to_tsv};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/toy".into()));
    std::fs::create_dir_all(&dir)?;
    let kg = composition_kg();
    std::fs::write(dir.join("train.txt"), to_tsv(&kg.train))?;
    std::fs::write(dir.join("valid.txt"), to_tsv(&kg.valid))?;
    std::fs::write(dir.join("test.txt"), to_tsv(&kg.test))?;
    Ok(())
}
