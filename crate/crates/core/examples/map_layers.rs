//! Fusion points between a 12-layer anchor and a 6-layer augment tower.

use ftz::fusion::map_layers;

fn main() -> ftz::Result<()> {
    for k in [1, 2, 3, 4, 6, 12] {
        let pts: Vec<String> = map_layers(12, 6, k)?.iter().map(|p| format!("({p})")).collect();
        println!("K={k:>2}: {}", pts.join(" "));
    }
    Ok(())
}
