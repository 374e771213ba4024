//! Three-mode tower comparison. Pass a config path to override the smoke
//! config, e.g. `configs/reference.toml`, and seeds after it.

use ftz::experiment::{compare_towers, ExperimentConfig};

fn main() -> ftz::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml"));
    let seeds: Vec<u64> = args.filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![1, 2] } else { seeds };
    let cfg = ExperimentConfig::load(&path)?;
    let cmp = compare_towers(&cfg, &seeds, None)?;
    print!("{}\n{}", cmp.table_csv(), cmp.means_csv());
    Ok(())
}
