//! Both training stages on the smoke configuration, printing the loss curve.

use ftz::experiment::{fresh_model, pretrained_base, ExperimentConfig};
use ftz::training::run_stage;

fn main() -> ftz::Result<()> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml");
    let cfg = ExperimentConfig::load(&path)?;
    let train = cfg.train_data()?;
    let base = pretrained_base(&cfg, &train)?;
    let mut model = fresh_model(&cfg, &base, cfg.model.tower.mode, cfg.seed)?;
    let before = model.params.sha256(&["anchor.", "augment."]);
    for stage in [&cfg.stage1, &cfg.stage2] {
        let log = run_stage(&mut model, stage, cfg.seed, &train, None)?;
        for r in &log.rows {
            println!("stage {} step {:>3} loss {:.4} lr {:.1e}", r.stage, r.step, r.loss, r.lr);
        }
    }
    let after = model.params.sha256(&["anchor.", "augment."]);
    println!("encoders unchanged: {}", before == after);
    Ok(())
}
