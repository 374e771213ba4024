//! Encodes one synthetic scene with each tower mode and prints token shapes.

use ftz::data::{generate_dataset, Split};
use ftz::fusion::{composed_encode, init_encoders, init_params, ComposedEncoderConfig, FusionMode};

fn main() -> ftz::Result<()> {
    let sample = &generate_dataset(3, 1, Split::Eval)?[0];
    for mode in FusionMode::ALL {
        let cfg = ComposedEncoderConfig::toy(mode);
        let mut params = init_encoders(&cfg, 7)?;
        params.extend(init_params(&cfg, 1)?)?;
        let out = composed_encode(&sample.image, &cfg, &params)?;
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / out.numel() as f64;
        println!("{mode:<16} tokens {:?}  mean {mean:+.5}", out.shape());
    }
    Ok(())
}
