//! Writes a checkpoint, reads it back and prints part of its manifest.

use ftz::checkpoint::{decode, encode, manifest};
use ftz::fusion::FusionMode;
use ftz::mllm::{init_model, InitSeeds, ModelConfig};

fn main() -> ftz::Result<()> {
    let params = init_model(&ModelConfig::toy(FusionMode::Ftz), InitSeeds::all(1))?;
    let bytes = encode(&params)?;
    let back = decode(&bytes)?;
    println!("{} tensors, {} bytes, round trip exact: {}", back.len(), bytes.len(), encode(&back)? == bytes);
    for e in manifest(&bytes)?.iter().filter(|e| e.name.starts_with("fusion.")).take(5) {
        println!("{:<24} frozen={} shape={:?}", e.name, e.frozen, e.shape);
    }
    println!("truncated: {}", decode(&bytes[..bytes.len() - 1]).unwrap_err());
    Ok(())
}
