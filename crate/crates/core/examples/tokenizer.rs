//! The closed question/answer vocabulary and its manifest.

use ftz::tokenizer::Tokenizer;

fn main() -> ftz::Result<()> {
    let tok = Tokenizer::synthetic();
    let ids = tok.encode("is there a red circle ?")?;
    println!("{ids:?} -> {}", tok.decode(&ids)?);
    print!("{}", tok.manifest());
    Ok(())
}
