//! Generates the synthetic four-class corpus, prints its length statistics
//! and, given a directory, writes the stratified split there.
//!
//! ```text
//! cargo run --example gen_corpus -- [out_dir]
//! ```

use chunkwise::corpus::synthetic::{generate, SyntheticConfig};
use chunkwise::corpus::{corpus_stats, split_corpus, write_jsonl, SplitSpec};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SyntheticConfig::default());
    let stats = corpus_stats(&corpus).expect("corpus is not empty");
    print!("{}", stats.render_table());

    let split = split_corpus(&corpus, &SplitSpec::default());
    println!("train {} / dev {} / test {}", split.train.len(), split.dev.len(), split.test.len());

    if let Some(dir) = std::env::args().nth(1) {
        std::fs::create_dir_all(&dir)?;
        for (name, docs) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
            write_jsonl(format!("{dir}/{name}.jsonl"), docs)?;
        }
        println!("wrote {dir}/{{train,dev,test}}.jsonl");
    }
    Ok(())
}
