//! Prints a few synthetic VQA samples and writes a split to JSONL.

use ftz::data::{generate_dataset, save_jsonl, Split};

fn main() -> ftz::Result<()> {
    let samples = generate_dataset(42, 6, Split::Train)?;
    for s in &samples {
        let shapes: Vec<String> = s.meta.iter().map(|m| format!("{}@({},{})", m.kind.word(), m.cx, m.cy)).collect();
        println!("[{}] q: {:<28} a: {:<28} {}", s.task, s.question, s.answer, shapes.join(" "));
    }
    let path = std::env::temp_dir().join("ftz-example-train.jsonl");
    save_jsonl(&samples, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
