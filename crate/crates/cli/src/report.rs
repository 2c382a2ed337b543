use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dagmix::report::{cluster_report, ClusterReport};
use dagmix::store::{load_dataset, load_labels};
use dagmix::train::Trainer;

use crate::train::{RunManifest, CHECKPOINT, RUN_MANIFEST};

pub fn run(run_dir: &Path, data_dir: Option<&Path>) -> Result<ClusterReport> {
    let manifest: RunManifest = serde_json::from_str(
        &fs::read_to_string(run_dir.join(RUN_MANIFEST)).with_context(|| format!("no {RUN_MANIFEST} in {}", run_dir.display()))?,
    )?;
    let trainer = Trainer::load_checkpoint(&run_dir.join(CHECKPOINT)).with_context(|| format!("no usable {CHECKPOINT}"))?;
    let data_dir = data_dir.unwrap_or(&manifest.dataset_dir);
    let (dmanifest, data) = load_dataset(data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let labels = load_labels(data_dir, &dmanifest)?;
    let clusters = trainer.responsibilities(&data)?.argmax();
    let report = cluster_report(&clusters, &trainer.model().gmm.arities, &trainer.hard_dag(), &labels.factors())?;
    fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let text = report.to_text();
    fs::write(run_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(report)
}
