//! Multi-stage pipeline over a working directory:
//!
//! ```text
//! cohort.csv, volumes/                      gen
//! labeled.csv                               label
//! manifest_train.json, manifest_test.json   split
//! runs/<loss>/seed_<n>/{checkpoint.ckpt, log.csv, summary.json}
//! eval/<loss>/seed_<n>/{train,test}_report.json, test_scatter.csv
//! embed/<loss>/seed_<n>/<split>.csv
//! tsne/<loss>/seed_<n>/<split>.csv, <split>_kl.json
//! ```
//!
//! Every stage writes atomically and is skipped when its outputs already exist, unless
//! `force` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{
    self, label_cohort, read_cohort_csv, read_labeled_csv, split_participants, verify_manifests, write_labeled_csv,
    LabeledCohort, Split, SplitConfig, TripletManifest, Violation,
};
use crate::encoder::{embed, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{self, BinSource, EvalReport};
use crate::io;
use crate::loss::{LevelCounts, LossKind, ProgressionLevel};
use crate::synth::{self, SynthConfig};
use crate::train::{self, RunLog, RunSummary, TrainConfig};
use crate::tsne::{self, TsneConfig, TsneRow};
use crate::volume::VolumeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneSettings {
    pub train_perplexity: f64,
    pub test_perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Drop the levels below before projecting.
    pub filter_levels: bool,
    pub drop_train: Vec<ProgressionLevel>,
    pub drop_test: Vec<ProgressionLevel>,
}

impl Default for TsneSettings {
    fn default() -> Self {
        let lv = |t| ProgressionLevel::from_tenths(t).unwrap();
        let base = TsneConfig::default();
        TsneSettings {
            train_perplexity: 32.0,
            test_perplexity: 8.0,
            iterations: base.iterations,
            learning_rate: base.learning_rate,
            early_exaggeration: base.early_exaggeration,
            filter_levels: false,
            drop_train: vec![lv(2)],
            drop_test: vec![lv(2), lv(3), lv(5)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    /// An existing cohort CSV to use instead of the generated one. Scan references are
    /// resolved relative to its directory.
    pub cohort_csv: Option<PathBuf>,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub tsne: TsneSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workdir: PathBuf::from("work"),
            cohort_csv: None,
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            tsne: TsneSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses `path` and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.workdir = base.join(&cfg.workdir);
        cfg.cohort_csv = cfg.cohort_csv.map(|c| base.join(c));
        Ok(cfg)
    }

    /// Seeds both data generation and the split.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.split.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.synth.volume_shape != self.encoder.input_shape {
            return Err(Error::Config(format!(
                "synth.volume_shape {:?} != encoder.input_shape {:?}",
                self.synth.volume_shape, self.encoder.input_shape
            )));
        }
        Ok(())
    }
}

/// Whether a stage ran or found its outputs already present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ran,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub force: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg, force })
    }

    pub fn workdir(&self) -> &Path {
        &self.cfg.workdir
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.workdir.join(rel)
    }

    pub fn cohort_csv(&self) -> PathBuf {
        self.cfg.cohort_csv.clone().unwrap_or_else(|| self.path("cohort.csv"))
    }

    fn volume_base(&self) -> PathBuf {
        self.cohort_csv().parent().map(Path::to_path_buf).unwrap_or_default()
    }

    fn fresh(&self, outputs: &[PathBuf]) -> bool {
        !self.force && outputs.iter().all(|p| p.exists())
    }

    pub fn run_dir(&self, kind: LossKind, seed: u64) -> PathBuf {
        self.path(format!("runs/{kind}/seed_{seed}"))
    }

    pub fn checkpoint_path(&self, kind: LossKind, seed: u64) -> PathBuf {
        self.run_dir(kind, seed).join("checkpoint.ckpt")
    }

    pub fn manifest_path(&self, split: Split) -> PathBuf {
        self.path(format!("manifest_{split}.json"))
    }

    /// Writes the synthetic cohort and returns its level table.
    pub fn gen(&self) -> Result<(Status, LevelCounts)> {
        let csv = self.path("cohort.csv");
        let status = if self.fresh(std::slice::from_ref(&csv)) {
            Status::Skipped
        } else {
            synth::generate(&self.cfg.synth, self.workdir())?;
            Status::Ran
        };
        let labeled = label_cohort(&read_cohort_csv(&csv)?)?;
        Ok((status, cohort::distribution_table(&labeled.scans)))
    }

    pub fn label(&self) -> Result<(Status, LabeledCohort)> {
        let out = self.path("labeled.csv");
        let labeled = label_cohort(&read_cohort_csv(&self.cohort_csv())?)?;
        if self.fresh(std::slice::from_ref(&out)) {
            return Ok((Status::Skipped, labeled));
        }
        write_labeled_csv(&out, &labeled.scans)?;
        Ok((Status::Ran, labeled))
    }

    pub fn split(&self) -> Result<(Status, TripletManifest, TripletManifest)> {
        let (tr, te) = (self.manifest_path(Split::Train), self.manifest_path(Split::Test));
        if self.fresh(&[tr.clone(), te.clone()]) {
            return Ok((Status::Skipped, TripletManifest::load(&tr)?, TripletManifest::load(&te)?));
        }
        let scans = read_labeled_csv(&self.path("labeled.csv"))?;
        let (neg, ad): (Vec<_>, Vec<_>) = scans.into_iter().partition(|s| !s.rho.is_terminal());
        let (train, test) = split_participants(&neg, &ad, &self.cfg.split)?;
        train.save(&tr)?;
        test.save(&te)?;
        Ok((Status::Ran, train, test))
    }

    /// Checks the manifests on disk against the cohort's participant ownership.
    pub fn verify(&self) -> Result<Vec<Violation>> {
        let owners: BTreeMap<String, String> = read_cohort_csv(&self.cohort_csv())?
            .iter()
            .flat_map(|r| r.exams().iter().map(|e| (e.scan_ref.clone(), r.participant_id().to_string())))
            .collect();
        let train = TripletManifest::load(&self.manifest_path(Split::Train))?;
        let test = TripletManifest::load(&self.manifest_path(Split::Test))?;
        Ok(verify_manifests(&train, &test, |s| owners.get(s).cloned()))
    }

    pub fn manifests(&self) -> Result<(TripletManifest, TripletManifest)> {
        Ok((
            TripletManifest::load(&self.manifest_path(Split::Train))?,
            TripletManifest::load(&self.manifest_path(Split::Test))?,
        ))
    }

    pub fn load_volumes(&self, manifests: &[&TripletManifest]) -> Result<VolumeSet> {
        let refs: BTreeSet<&str> = manifests.iter().flat_map(|m| m.scan_refs()).collect();
        VolumeSet::load(&self.volume_base(), refs)
    }

    /// Trains one (loss, seed) run and writes its checkpoint, log and summary.
    pub fn train_one(
        &self,
        kind: LossKind,
        seed: u64,
        manifests: (&TripletManifest, &TripletManifest),
        volumes: &VolumeSet,
        on_epoch: impl FnMut(&train::EpochLog),
    ) -> Result<(Status, RunSummary)> {
        let dir = self.run_dir(kind, seed);
        let ckpt = dir.join("checkpoint.ckpt");
        let summary_path = dir.join("summary.json");
        if self.fresh(&[ckpt.clone(), dir.join("log.csv"), summary_path.clone()]) {
            return Ok((Status::Skipped, io::read_json(&summary_path)?));
        }
        let cfg = TrainConfig { loss_kind: kind, ..self.cfg.train.clone() };
        let (params, mut log): (EncoderParams, RunLog) =
            train::train_run_with(manifests.0, manifests.1, volumes, &self.cfg.encoder, &cfg, seed, on_epoch)?;
        params.save(&ckpt)?;
        log.checkpoint = Some(PathBuf::from(format!("runs/{kind}/seed_{seed}/checkpoint.ckpt")));
        log.write_csv(&dir.join("log.csv"))?;
        log.write_summary(&summary_path)?;
        Ok((Status::Ran, log.summary()))
    }

    /// Train and test reports for one run; bins are fitted on train and reused for test.
    pub fn eval_one(
        &self,
        kind: LossKind,
        seed: u64,
        manifests: (&TripletManifest, &TripletManifest),
        volumes: &VolumeSet,
    ) -> Result<(Status, EvalReport, EvalReport)> {
        let dir = self.path(format!("eval/{kind}/seed_{seed}"));
        let outs = [dir.join("train_report.json"), dir.join("test_report.json"), dir.join("test_scatter.csv")];
        if self.fresh(&outs) {
            return Ok((Status::Skipped, io::read_json(&outs[0])?, io::read_json(&outs[1])?));
        }
        let params = EncoderParams::load(&self.checkpoint_path(kind, seed))?;
        let train = eval::evaluate(&params, manifests.0, volumes, &BinSource::Fit)?;
        let test = eval::evaluate(&params, manifests.1, volumes, &BinSource::Fixed(train.bins.clone()))?;
        train.write_json(&outs[0])?;
        test.write_json(&outs[1])?;
        test.write_scatter_csv(&outs[2])?;
        Ok((Status::Ran, train, test))
    }

    /// Writes the mean test metrics over `reports` for one loss kind.
    pub fn write_eval_summary(&self, kind: LossKind, seeds: &[u64], reports: &[EvalReport]) -> Result<(f64, f64)> {
        let (mae, rmse) = eval::mean_metrics(reports)?;
        let per_seed: Vec<_> = seeds
            .iter()
            .zip(reports)
            .map(|(s, r)| serde_json::json!({"seed": s, "mae": r.mae, "rmse": r.rmse}))
            .collect();
        let doc = serde_json::json!({"loss": kind, "mean_mae": mae, "mean_rmse": rmse, "runs": per_seed});
        io::write_json(&self.path(format!("eval/{kind}/summary.json")), &doc)?;
        Ok((mae, rmse))
    }

    /// Embeddings of every distinct scan in one split's manifest, anchors first.
    pub fn embed_one(
        &self,
        kind: LossKind,
        seed: u64,
        manifest: &TripletManifest,
        volumes: &VolumeSet,
    ) -> Result<(Status, Vec<EmbeddingRow>)> {
        let out = self.path(format!("embed/{kind}/seed_{seed}/{}.csv", manifest.split));
        if self.fresh(std::slice::from_ref(&out)) {
            return Ok((Status::Skipped, read_embeddings(&out)?));
        }
        let params = EncoderParams::load(&self.checkpoint_path(kind, seed))?;
        let rows = embed_manifest(&params, manifest, volumes)?;
        write_embeddings(&out, &rows)?;
        Ok((Status::Ran, rows))
    }

    pub fn tsne_config(&self, split: Split, perplexity: Option<f64>, seed: u64) -> TsneConfig {
        let s = &self.cfg.tsne;
        let default = match split {
            Split::Train => s.train_perplexity,
            Split::Test => s.test_perplexity,
        };
        TsneConfig {
            perplexity: perplexity.unwrap_or(default),
            iterations: s.iterations,
            learning_rate: s.learning_rate,
            early_exaggeration: s.early_exaggeration,
            seed,
        }
    }

    pub fn tsne_one(
        &self,
        kind: LossKind,
        seed: u64,
        split: Split,
        rows: &[EmbeddingRow],
        cfg: &TsneConfig,
    ) -> Result<(Status, usize)> {
        let dir = self.path(format!("tsne/{kind}/seed_{seed}"));
        let (csv, trace) = (dir.join(format!("{split}.csv")), dir.join(format!("{split}_kl.json")));
        let dropped: &[ProgressionLevel] = match (self.cfg.tsne.filter_levels, split) {
            (false, _) => &[],
            (true, Split::Train) => &self.cfg.tsne.drop_train,
            (true, Split::Test) => &self.cfg.tsne.drop_test,
        };
        let kept: Vec<&EmbeddingRow> = rows.iter().filter(|r| !dropped.contains(&r.true_rho)).collect();
        if self.fresh(&[csv.clone(), trace.clone()]) {
            return Ok((Status::Skipped, kept.len()));
        }
        let points: Vec<Vec<f64>> = kept.iter().map(|r| r.embedding.clone()).collect();
        let proj = tsne::project(&points, cfg)?;
        let out: Vec<TsneRow> = kept
            .iter()
            .zip(&proj.points)
            .map(|(r, p)| TsneRow { scan_ref: r.scan_ref.clone(), true_rho: r.true_rho, x: p[0], y: p[1] })
            .collect();
        tsne::write_outputs(&csv, &trace, &out, &proj)?;
        Ok((Status::Ran, out.len()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub scan_ref: String,
    pub true_rho: ProgressionLevel,
    pub embedding: Vec<f64>,
}

/// Anchors and positives carry level 1.0, negatives their manifest level.
pub fn embed_manifest(
    params: &EncoderParams,
    manifest: &TripletManifest,
    volumes: &VolumeSet,
) -> Result<Vec<EmbeddingRow>> {
    let mut levels: Vec<(&str, ProgressionLevel)> = Vec::new();
    let mut seen = BTreeSet::new();
    for t in &manifest.triplets {
        for (r, l) in [(&t.anchor, ProgressionLevel::TERMINAL), (&t.positive, ProgressionLevel::TERMINAL), (&t.negative, t.rho)] {
            if seen.insert(r.as_str()) {
                levels.push((r, l));
            }
        }
    }
    levels
        .into_iter()
        .map(|(r, l)| {
            let e = embed(params, volumes.get(r)?)?;
            Ok(EmbeddingRow { scan_ref: r.to_string(), true_rho: l, embedding: e.into_data() })
        })
        .collect()
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.embedding.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["scan_ref".to_string(), "true_rho".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.scan_ref.clone(), r.true_rho.to_string()];
        rec.extend(r.embedding.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    io::write_atomic(path, &bytes)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let fmt = |d: String| Error::Format { path: path.to_path_buf(), detail: d };
    let bytes = io::read(path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(fmt("expected scan_ref, true_rho and at least one embedding column".into()));
        }
        let true_rho = rec[1].parse().map_err(|_| fmt(format!("bad level {:?}", &rec[1])))?;
        let embedding = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| fmt(format!("bad value {v:?}"))))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow { scan_ref: rec[0].to_string(), true_rho, embedding });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"workdir": "out", "bogus": 1}"#).unwrap();
        assert!(PipelineConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"workdir": "out", "cohort_csv": "data/c.csv"}"#).unwrap();
        let cfg = PipelineConfig::load(&p).unwrap();
        assert_eq!(cfg.workdir, dir.path().join("out"));
        assert_eq!(cfg.cohort_csv, Some(dir.path().join("data/c.csv")));
        let missing = PipelineConfig::load(&dir.path().join("nope.json")).unwrap_err();
        assert!(missing.to_string().contains("nope.json"));
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let rows = vec![EmbeddingRow {
            scan_ref: "volumes/a.vol".into(),
            true_rho: ProgressionLevel::from_tenths(7).unwrap(),
            embedding: vec![0.1, -2.5e-7, 3.0],
        }];
        write_embeddings(&p, &rows).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), rows);
    }
}
