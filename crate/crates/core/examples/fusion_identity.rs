//! With zero output projections the fused tower reproduces the anchor alone.

use ftz::data::{generate_dataset, Split};
use ftz::fusion::{composed_encode, init_encoders, init_params, ComposedEncoderConfig, FusionMode};

fn main() -> ftz::Result<()> {
    let images = generate_dataset(11, 5, Split::Eval)?;
    for k in [1, 2, 4] {
        let mut ftz_cfg = ComposedEncoderConfig::toy(FusionMode::Ftz);
        ftz_cfg.num_fusion_points = k;
        let anchor_cfg = ftz_cfg.with_mode(FusionMode::AnchorOnly);
        let enc = init_encoders(&ftz_cfg, 7)?;
        let mut fused = enc.clone();
        fused.extend(init_params(&ftz_cfg, 1)?)?;
        let mut worst = 0.0f64;
        for s in &images {
            let a = composed_encode(&s.image, &ftz_cfg, &fused)?;
            let b = composed_encode(&s.image, &anchor_cfg, &enc)?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        println!("K={k}: max |ftz - anchor_only| = {worst:e}");
    }
    Ok(())
}
