use std::path::Path;

use anyhow::Result;
use dagmix::datagen::{generate_circles, generate_curves};
use dagmix::store::{save_dataset, DatasetManifest, LabelTable, ModalityEntry, DATASET_FORMAT, DATASET_VERSION};
use dagmix::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;

pub fn run(cfg: &DataConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (manifest, samples, labels) = if let Some(c) = &cfg.circles {
        let set = generate_circles(c, &mut rng)?;
        let images: Vec<Tensor<f64>> = set.samples.iter().map(|s| s.image.clone()).collect();
        let rows = set
            .samples
            .iter()
            .map(|s| {
                let l = s.labels;
                vec![l.hue as f64, l.radius_branch as f64, l.shift_branch as f64, l.r, l.s]
            })
            .collect();
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            kind: "circles".into(),
            n: c.n,
            seed: cfg.seed,
            modalities: vec![ModalityEntry {
                name: "image".into(),
                sample_shape: vec![c.height, c.width, 3],
            }],
            categorical: vec!["hue".into(), "radius".into(), "shift".into()],
            rejected: set.rejected,
            generator: serde_json::to_value(c)?,
        };
        let labels = LabelTable {
            columns: ["hue", "radius", "shift", "r", "s"].map(String::from).to_vec(),
            categorical: vec![true, true, true, false, false],
            rows,
        };
        (manifest, vec![images], labels)
    } else {
        let c = cfg.curves.as_ref().expect("validated");
        let set = generate_curves(c, &mut rng)?;
        let mut samples = vec![set
            .iter()
            .map(|s| Tensor::new(vec![s.curve.len()], s.curve.clone()))
            .collect::<dagmix::Result<Vec<_>>>()?];
        let mut modalities = vec![ModalityEntry {
            name: "curve".into(),
            sample_shape: vec![c.grid_len],
        }];
        if cfg.curve_images {
            samples.push(set.iter().map(|s| s.image.clone()).collect());
            modalities.push(ModalityEntry {
                name: "image".into(),
                sample_shape: vec![c.image_size, c.image_size],
            });
        }
        let rows = set
            .iter()
            .map(|s| {
                let l = s.labels;
                vec![l.kind as f64, l.breakpoint, l.slope1, l.slope2]
            })
            .collect();
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            kind: "curves".into(),
            n: c.n,
            seed: cfg.seed,
            modalities,
            categorical: vec!["type".into()],
            rejected: 0,
            generator: serde_json::to_value(c)?,
        };
        let labels = LabelTable {
            columns: ["type", "breakpoint", "slope1", "slope2"].map(String::from).to_vec(),
            categorical: vec![true, false, false, false],
            rows,
        };
        (manifest, samples, labels)
    };
    save_dataset(out, &manifest, &samples, &labels)?;
    log::info!("wrote {} {} samples to {}", manifest.n, manifest.kind, out.display());
    Ok(manifest)
}
