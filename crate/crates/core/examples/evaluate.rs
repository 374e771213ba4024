//! Scores an untrained model and prints a few greedy answers.

use ftz::data::{generate_dataset, Split};
use ftz::eval::evaluate;
use ftz::fusion::FusionMode;
use ftz::mllm::{answer, init_model, InitSeeds, ModelConfig};
use ftz::tokenizer::Tokenizer;
use ftz::training::Model;
use ftz::Rng;

fn main() -> ftz::Result<()> {
    let cfg = ModelConfig::toy(FusionMode::Ftz);
    let mut params = init_model(&cfg, InitSeeds::all(3))?;
    *params.tensor_mut("lm.head")? = Rng::new(9).normal_tensor([64, 64], 0.2);
    let model = Model {
        cfg,
        params,
        tok: Tokenizer::synthetic(),
    };
    let data = generate_dataset(5, 30, Split::Eval)?;
    for s in data.iter().take(3) {
        let got = answer(&model.params, &model.cfg, &model.tok, &s.image, &s.prompt(&model.tok), s.task.max_new())?;
        println!("{:<26} gold {:<26} got {}", s.question, s.answer, model.tok.decode(&got)?);
    }
    print!("{}", evaluate(&model, &data, 0)?.to_csv());
    Ok(())
}
