//! Writes a tiny CIFAR-10 style binary directory, loads it back with mean
//! subtraction, and walks one epoch of shuffled batches.
//!
//! `cargo run --example cifar_pipeline [DIR]` reads a real
//! `cifar-10-batches-bin` directory instead when one is given.

use std::path::PathBuf;

use treenet::data::{batches, load_cifar10, CifarOptions, CIFAR_RECORD_BYTES};

fn write_fake(dir: &std::path::Path) -> std::io::Result<()> {
    let files = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"];
    for (f, name) in files.iter().enumerate() {
        let mut bytes = Vec::with_capacity(20 * CIFAR_RECORD_BYTES);
        for r in 0..20 {
            bytes.push(((r + f) % 10) as u8);
            bytes.extend((0..CIFAR_RECORD_BYTES - 1).map(|p| ((p * 7 + r * 13 + f) % 256) as u8));
        }
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

fn main() -> treenet::Result<()> {
    let scratch = tempfile::tempdir()?;
    let dir = match std::env::args().nth(1) {
        Some(d) => PathBuf::from(d),
        None => {
            write_fake(scratch.path())?;
            scratch.path().to_path_buf()
        }
    };
    let (train, test) = load_cifar10(&dir, CifarOptions { scale: true, mean_subtract: true })?;
    println!("train: {} examples of shape {:?}; test: {}", train.len(), train.example_shape(), test.len());
    println!("class counts {:?}", train.class_counts());
    let col_mean: f64 = (0..train.len()).map(|i| train.features().row(i)[0]).sum::<f64>() / train.len() as f64;
    println!("mean of pixel 0 after subtraction: {col_mean:.2e}");
    for (i, b) in batches(&(0..train.len()).collect::<Vec<_>>(), 32, 0)?.enumerate() {
        let (x, y) = train.gather(&b)?;
        println!("batch {i}: features {:?}, first labels {:?}", x.shape(), &y[..4.min(y.len())]);
    }
    Ok(())
}
