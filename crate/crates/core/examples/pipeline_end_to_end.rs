//! Runs the batch pipeline over a directory holding valid and broken
//! document files, crashes the classification worker mid-run, and shows
//! that a replacement finishes the job with identical predictions.

use std::sync::Arc;
use std::time::Duration;

use chunkwise::corpus::synthetic::{generate, SyntheticConfig};
use chunkwise::model::Classifier;
use chunkwise::pipeline::{classify_worker, write_document_files, PipelineHost, PipelineInput};
use chunkwise::training::{initial_checkpoint, ClassifierSetup};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SyntheticConfig { docs_per_class: 8, ..SyntheticConfig::default() });
    // An untrained model is enough to exercise the plumbing.
    let clf = Arc::new(Classifier::from_checkpoint(initial_checkpoint(&corpus, &ClassifierSetup::default(), 1)?)?);

    let dir = tempfile::tempdir()?;
    write_document_files(dir.path(), &corpus[..30])?;
    std::fs::write(dir.path().join("broken.json"), "{\"id\": ")?;
    std::fs::write(dir.path().join("no-text.json"), r#"{"id": "x", "language": "en", "paragraphs": []}"#)?;
    let input = PipelineInput { dir: dir.path().to_path_buf(), seed: 7, checkpoint: None };

    let host = PipelineHost::start(clf.clone(), None)?;
    let baseline = host.run(&input)?;
    print!("{}", baseline.summary());

    let mut host = PipelineHost::start(clf, None)?;
    let id = host.submit(&input)?;
    std::thread::sleep(Duration::from_millis(30));
    host.kill_worker("W2");
    println!("killed W2 while {id} was running");
    // The lost attempt is retried once W2's heartbeat times out.
    host.add_worker(classify_worker("W2b"))?;
    let recovered = host.wait(&id)?;
    print!("{}", recovered.summary());
    println!("predictions identical to the undisturbed run: {}", recovered.by_path() == baseline.by_path());

    let batches = host.engine().histories(&host.batch_workflow_id(&id).expect("batch workflow exists"))?;
    println!("batch workflow ran as {} runs of at most 10 files", batches.len());
    Ok(())
}
