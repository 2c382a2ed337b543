use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dagmix::data::Dataset;
use dagmix::joint::conditional_table_csv;
use dagmix::store::{load_dataset, load_labels, LabelTable};
use dagmix::train::{Decoder, EpochRecord, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_s: f64,
    pub train_s: f64,
    pub export_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub dataset_dir: PathBuf,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub timings: Timings,
    pub final_metrics: Option<EpochRecord>,
}

pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

/// Hash of every modality's name, shape and values.
pub fn dataset_fingerprint(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for m in &data.modalities {
        h.update(m.name.as_bytes());
        for &d in m.x.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for x in m.x.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
        Ok(())
    }
}

fn latent_csv(trainer: &Trainer, data: &Dataset, labels: Option<&LabelTable>) -> Result<String> {
    let model = trainer.model();
    let (mu, var) = model.embed(data)?;
    let clusters = trainer.responsibilities(data)?.argmax();
    let j = model.latent_dim();
    let mut head: Vec<String> = vec!["index".into()];
    head.extend((0..j).map(|c| format!("mu{}", c + 1)));
    head.extend((0..j).map(|c| format!("var{}", c + 1)));
    head.push("cluster".into());
    let arities = &model.gmm.arities;
    head.extend((0..arities.len()).map(|l| format!("N{}", l + 1)));
    if let Some(l) = labels {
        head.extend(l.columns.iter().cloned());
    }
    let mut s = head.join(",") + "\n";
    for i in 0..data.len() {
        let mut row = vec![i.to_string()];
        row.extend(mu.data()[i * j..(i + 1) * j].iter().map(|x| x.to_string()));
        row.extend(var.data()[i * j..(i + 1) * j].iter().map(|x| x.to_string()));
        row.push(clusters[i].to_string());
        row.extend(model.gmm.multi_index(clusters[i]).iter().map(|c| (c + 1).to_string()));
        if let Some(l) = labels {
            row.extend(l.rows[i].iter().map(|x| x.to_string()));
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

fn matrix_csv(prefix: &str, t: &dagmix::Tensor64) -> String {
    let (k, d) = (t.shape()[0], t.shape()[1]);
    let mut s = "cluster,".to_string() + &(0..d).map(|c| format!("{prefix}{}", c + 1)).collect::<Vec<_>>().join(",") + "\n";
    for r in 0..k {
        s.push_str(&r.to_string());
        for x in &t.data()[r * d..(r + 1) * d] {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
    }
    s
}

fn export_final(out: &mut Outputs, trainer: &Trainer, data: &Dataset, labels: Option<&LabelTable>) -> Result<()> {
    let model = trainer.model();
    let dag = trainer.hard_dag();
    out.write("clusters/gmm.csv", model.gmm.to_csv())?;
    for l in 0..model.tables.nodes() {
        out.write(&format!("clusters/node_{}.csv", l + 1), conditional_table_csv(&model.tables, &dag, l)?)?;
    }
    out.write("dag.csv", dag.to_csv())?;
    out.write("latent.csv", latent_csv(trainer, data, labels)?)?;
    for (m, decoded) in model.decode_cluster_means()?.iter().enumerate() {
        out.write(&format!("decoded/{}.csv", model.names[m]), matrix_csv("x", decoded))?;
    }
    for (m, d) in model.decoders.iter().enumerate() {
        if let Decoder::Expert { curves, .. } = d {
            let mut s = "cluster,breakpoint,slope1,slope2,intercept,variance\n".to_string();
            for k in 0..curves.clusters() {
                let p = curves.params(k);
                s.push_str(&format!(
                    "{k},{},{},{},{},{}\n",
                    p.breakpoint,
                    p.slope1,
                    p.slope2,
                    p.intercept,
                    curves.variance(k)
                ));
            }
            out.write(&format!("decoded/{}_experts.csv", model.names[m]), s)?;
        }
    }
    Ok(())
}

fn epoch_line(rec: &EpochRecord) -> Result<String> {
    Ok(serde_json::to_string(rec)? + "\n")
}

fn write_epoch(out: &mut Outputs, trainer: &Trainer, rec: &EpochRecord, metrics: &mut fs::File) -> Result<()> {
    metrics.write_all(epoch_line(rec)?.as_bytes())?;
    let scores = trainer.model().edge_scores(rec.beta);
    out.write(
        &format!("dags/epoch_{:04}.dot", rec.epoch),
        rec.dag.to_dot(Some(&scores), None, trainer.config.zero_tol),
    )?;
    out.write(CHECKPOINT, trainer.to_checkpoint_string()?)?;
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: Option<TrainConfig>,
    pub data_dir: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub resume: Option<&'a Path>,
    /// Replaces the configured epoch count; on resume this extends the run.
    pub epochs: Option<usize>,
}

pub fn run(args: TrainArgs<'_>) -> Result<RunManifest> {
    let t0 = Instant::now();
    let (dmanifest, data) = load_dataset(args.data_dir).with_context(|| format!("loading dataset {}", args.data_dir.display()))?;
    let labels = load_labels(args.data_dir, &dmanifest).ok();
    let mut trainer = match args.resume {
        Some(ck) => {
            let mut t = Trainer::load_checkpoint(ck).with_context(|| format!("loading checkpoint {}", ck.display()))?;
            if let Some(s) = args.seed {
                if s != t.config.seed {
                    bail!("--seed {s} differs from the checkpoint seed {}", t.config.seed);
                }
            }
            if let Some(e) = args.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => {
            let Some(mut cfg) = args.config else {
                bail!("the config has no [train] table");
            };
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            Trainer::new(cfg, &data)?
        }
    };
    let load_s = t0.elapsed().as_secs_f64();
    fs::create_dir_all(args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut out = Outputs {
        dir: args.out.to_path_buf(),
        written: Vec::new(),
    };
    out.write("config.json", serde_json::to_string_pretty(&trainer.config)?)?;

    let t1 = Instant::now();
    // rewrite the history so a resumed run's metrics match an uninterrupted one
    let mut metrics = fs::File::create(args.out.join(METRICS))?;
    out.written.push(METRICS.into());
    for rec in &trainer.state.history {
        metrics.write_all(epoch_line(rec)?.as_bytes())?;
    }
    trainer.pretrain(&data)?;
    out.write(CHECKPOINT, trainer.to_checkpoint_string()?)?;
    trainer.fit(&data, |t, rec| write_epoch(&mut out, t, rec, &mut metrics).map_err(|e| dagmix::Error::Format(format!("{e:#}"))))?;
    metrics.flush()?;
    let train_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    export_final(&mut out, &trainer, &data, labels.as_ref())?;
    let manifest = RunManifest {
        config_hash: config_hash(&trainer.config)?,
        seed: trainer.config.seed,
        dataset_fingerprint: dataset_fingerprint(&data),
        dataset_dir: fs::canonicalize(args.data_dir)?,
        outputs: {
            let mut v = out.written.clone();
            v.sort();
            v
        },
        timings: Timings {
            load_s,
            train_s,
            export_s: t2.elapsed().as_secs_f64(),
        },
        final_metrics: trainer.state.history.last().cloned(),
    };
    fs::write(args.out.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("run written to {}", args.out.display());
    Ok(manifest)
}
