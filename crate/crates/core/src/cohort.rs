//! Longitudinal cohort records, ordinal progression labels, participant-disjoint splits
//! and triplet manifests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::loss::{alpha_of, Alpha, LevelCounts, ProgressionLevel};

/// Maximum number of scans in an MCI to AD window (levels 0.1 to 1.0).
pub const MAX_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Diagnosis {
    Normal,
    Mci,
    Ad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exam {
    pub exam_date: NaiveDate,
    pub diagnosis: Diagnosis,
    pub scan_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantRecord {
    participant_id: String,
    exams: Vec<Exam>,
}

impl ParticipantRecord {
    /// Sorts exams by date and rejects two exams on the same day.
    pub fn new(participant_id: impl Into<String>, mut exams: Vec<Exam>) -> Result<Self> {
        let participant_id = participant_id.into();
        exams.sort_by_key(|e| e.exam_date);
        if let Some(w) = exams.windows(2).find(|w| w[0].exam_date == w[1].exam_date) {
            return Err(Error::Cohort(format!(
                "participant {participant_id} has two exams on {}",
                w[0].exam_date
            )));
        }
        Ok(ParticipantRecord { participant_id, exams })
    }

    pub fn participant_id(&self) -> &str {
        &self.participant_id
    }

    pub fn exams(&self) -> &[Exam] {
        &self.exams
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParticipantClass {
    ProgressiveMci,
    StableMci,
    AdOnly,
    Other,
}

/// Position of the first AD exam that follows the first MCI exam, if any.
fn conversion_window(exams: &[Exam]) -> Option<(usize, usize)> {
    let first_mci = exams.iter().position(|e| e.diagnosis == Diagnosis::Mci)?;
    let first_ad = exams[first_mci..].iter().position(|e| e.diagnosis == Diagnosis::Ad)?;
    Some((first_mci, first_mci + first_ad))
}

pub fn classify_participant(record: &ParticipantRecord) -> Result<ParticipantClass> {
    let exams = record.exams();
    if exams.is_empty() {
        return Err(Error::Cohort(format!("participant {} has no exams", record.participant_id)));
    }
    let has = |d| exams.iter().any(|e| e.diagnosis == d);
    Ok(if conversion_window(exams).is_some() {
        ParticipantClass::ProgressiveMci
    } else if has(Diagnosis::Mci) && !has(Diagnosis::Ad) {
        ParticipantClass::StableMci
    } else if exams.iter().all(|e| e.diagnosis == Diagnosis::Ad) {
        ParticipantClass::AdOnly
    } else {
        ParticipantClass::Other
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledScan {
    pub participant_id: String,
    pub exam_date: NaiveDate,
    pub scan_ref: String,
    pub rho: ProgressionLevel,
}

/// Assigns levels backwards from the conversion scan: the first AD exam after the first
/// MCI exam gets 1.0, each earlier scan in the window 0.1 less. Scans outside the window
/// are dropped.
pub fn label_progression(record: &ParticipantRecord) -> Result<Vec<LabeledScan>> {
    let (start, end) = conversion_window(record.exams())
        .ok_or_else(|| Error::NotProgressive(record.participant_id.clone()))?;
    let window = &record.exams()[start..=end];
    if window.len() > MAX_WINDOW {
        return Err(Error::WindowTooLong {
            participant: record.participant_id.clone(),
            scans: window.len(),
        });
    }
    let k = window.len();
    window
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(LabeledScan {
                participant_id: record.participant_id.clone(),
                exam_date: e.exam_date,
                scan_ref: e.scan_ref.clone(),
                rho: ProgressionLevel::from_tenths((10 - (k - 1 - i)) as u8)?,
            })
        })
        .collect()
}

/// Result of labeling a whole cohort.
#[derive(Debug, Clone, Default)]
pub struct LabeledCohort {
    pub scans: Vec<LabeledScan>,
    pub classes: BTreeMap<String, ParticipantClass>,
}

impl LabeledCohort {
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for c in self.classes.values() {
            *m.entry(format!("{c:?}")).or_default() += 1;
        }
        m
    }

    /// `(negatives with rho < 1.0, conversion scans with rho == 1.0)`
    pub fn partition(&self) -> (Vec<LabeledScan>, Vec<LabeledScan>) {
        self.scans.iter().cloned().partition(|s| !s.rho.is_terminal())
    }
}

/// Classifies every participant and labels the progressive ones.
pub fn label_cohort(records: &[ParticipantRecord]) -> Result<LabeledCohort> {
    let mut out = LabeledCohort::default();
    for r in records {
        let class = classify_participant(r)?;
        if out.classes.insert(r.participant_id.clone(), class).is_some() {
            return Err(Error::Cohort(format!("duplicate participant {}", r.participant_id)));
        }
        if class == ParticipantClass::ProgressiveMci {
            out.scans.extend(label_progression(r)?);
        }
    }
    Ok(out)
}

pub fn distribution_table(labeled: &[LabeledScan]) -> LevelCounts {
    let mut m = BTreeMap::new();
    for s in labeled {
        *m.entry(s.rho).or_insert(0) += 1;
    }
    LevelCounts(m)
}

#[derive(Debug, Serialize, Deserialize)]
struct CohortRow {
    participant_id: String,
    exam_date: NaiveDate,
    diagnosis: Diagnosis,
    scan_ref: String,
}

/// Reads `participant_id,exam_date,diagnosis,scan_ref`; participants keep first-seen order.
pub fn read_cohort_csv(path: &Path) -> Result<Vec<ParticipantRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let expected = ["participant_id", "exam_date", "diagnosis", "scan_ref"];
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected header {}", expected.join(",")),
        });
    }
    let mut order = Vec::new();
    let mut groups: HashMap<String, Vec<Exam>> = HashMap::new();
    for row in rdr.deserialize::<CohortRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let exams = groups.entry(row.participant_id.clone()).or_insert_with(|| {
            order.push(row.participant_id.clone());
            Vec::new()
        });
        exams.push(Exam { exam_date: row.exam_date, diagnosis: row.diagnosis, scan_ref: row.scan_ref });
    }
    order
        .into_iter()
        .map(|id| {
            let exams = groups.remove(&id).unwrap_or_default();
            ParticipantRecord::new(id, exams)
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format { path: path.to_path_buf(), detail: e.to_string() }
    }
}

pub fn write_cohort_csv(path: &Path, records: &[ParticipantRecord]) -> Result<()> {
    let rows = records.iter().flat_map(|r| {
        r.exams.iter().map(move |e| CohortRow {
            participant_id: r.participant_id.clone(),
            exam_date: e.exam_date,
            diagnosis: e.diagnosis,
            scan_ref: e.scan_ref.clone(),
        })
    });
    io::write_csv(path, rows)
}

pub fn write_labeled_csv(path: &Path, scans: &[LabeledScan]) -> Result<()> {
    io::write_csv(path, scans)
}

pub fn read_labeled_csv(path: &Path) -> Result<Vec<LabeledScan>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    pub rho: ProgressionLevel,
    pub alpha: Alpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletManifest {
    pub split: Split,
    pub seed: u64,
    pub triplets: Vec<Triplet>,
}

impl TripletManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Distinct anchor scans, in first-use order.
    pub fn anchor_pool(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.triplets.iter().map(|t| t.anchor.as_str()).filter(|a| seen.insert(*a)).collect()
    }

    pub fn scan_refs(&self) -> BTreeSet<&str> {
        self.triplets
            .iter()
            .flat_map(|t| [t.anchor.as_str(), t.positive.as_str(), t.negative.as_str()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
    /// Optional cap on negatives per level, applied before pairing.
    pub level_quotas: Option<LevelCounts>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.8, seed: 0, level_quotas: None }
    }
}

/// Partitions participants into train and test, splits each side's conversion scans into
/// participant-disjoint anchor and positive pools, and pairs every negative with one
/// anchor and one positive from its own side.
pub fn split_participants(
    negatives: &[LabeledScan],
    ad_scans: &[LabeledScan],
    cfg: &SplitConfig,
) -> Result<(TripletManifest, TripletManifest)> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {} not in (0, 1)", cfg.train_fraction)));
    }
    if let Some(s) = negatives.iter().find(|s| s.rho.is_terminal()) {
        return Err(Error::Cohort(format!("negative scan {} has level 1.0", s.scan_ref)));
    }
    if let Some(s) = ad_scans.iter().find(|s| !s.rho.is_terminal()) {
        return Err(Error::Cohort(format!("anchor candidate {} has level {}", s.scan_ref, s.rho)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut negs: Vec<&LabeledScan> = negatives.iter().collect();
    negs.sort_by(|a, b| (&a.participant_id, a.exam_date).cmp(&(&b.participant_id, b.exam_date)));
    if let Some(q) = &cfg.level_quotas {
        let mut by_level: BTreeMap<ProgressionLevel, Vec<&LabeledScan>> = BTreeMap::new();
        for s in negs {
            by_level.entry(s.rho).or_default().push(s);
        }
        negs = Vec::new();
        for (level, mut scans) in by_level {
            let cap = q.0.get(&level).copied().unwrap_or(scans.len());
            if cap < scans.len() {
                scans.shuffle(&mut rng);
                scans.truncate(cap);
            }
            negs.extend(scans);
        }
        negs.sort_by(|a, b| (&a.participant_id, a.exam_date).cmp(&(&b.participant_id, b.exam_date)));
    }

    let participants: BTreeSet<&str> =
        negs.iter().map(|s| s.participant_id.as_str()).chain(ad_scans.iter().map(|s| s.participant_id.as_str())).collect();
    let mut participants: Vec<&str> = participants.into_iter().collect();
    participants.shuffle(&mut rng);
    let n_train = (cfg.train_fraction * participants.len() as f64).floor() as usize;
    let train_ids: BTreeSet<&str> = participants[..n_train].iter().copied().collect();

    let mut build = |split: Split| -> Result<TripletManifest> {
        let in_split = |pid: &str| train_ids.contains(pid) == (split == Split::Train);
        let mut ad: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for s in ad_scans.iter().filter(|s| in_split(&s.participant_id)) {
            ad.entry(s.participant_id.as_str()).or_default().push(s.scan_ref.as_str());
        }
        if ad.len() < 2 {
            return Err(Error::PoolsTooSmall(format!(
                "{split} split has {} participants with conversion scans; need at least 2",
                ad.len()
            )));
        }
        let mut ad_ids: Vec<&str> = ad.keys().copied().collect();
        ad_ids.shuffle(&mut rng);
        let n_anchor = ad_ids.len().div_ceil(2);
        let pool = |ids: &[&str]| -> Vec<String> {
            let mut v: Vec<String> = ids.iter().flat_map(|id| ad[id].iter().map(|s| s.to_string())).collect();
            v.sort();
            v
        };
        let anchors = pool(&ad_ids[..n_anchor]);
        let positives = pool(&ad_ids[n_anchor..]);

        let triplets = negs
            .iter()
            .filter(|s| in_split(&s.participant_id))
            .map(|s| {
                let anchor = anchors[rng.random_range(0..anchors.len())].clone();
                let positive = positives[rng.random_range(0..positives.len())].clone();
                Ok(Triplet { anchor, positive, negative: s.scan_ref.clone(), rho: s.rho, alpha: alpha_of(s.rho)? })
            })
            .collect::<Result<Vec<_>>>()?;
        if triplets.is_empty() {
            return Err(Error::PoolsTooSmall(format!("{split} split has no negatives")));
        }
        Ok(TripletManifest { split, seed: cfg.seed, triplets })
    };
    let train = build(Split::Train)?;
    let test = build(Split::Test)?;

    let owners: HashMap<&str, &str> = negs
        .iter()
        .copied()
        .chain(ad_scans)
        .map(|s| (s.scan_ref.as_str(), s.participant_id.as_str()))
        .collect();
    let violations = verify_manifests(&train, &test, |r| owners.get(r).map(|s| s.to_string()));
    if let Some(v) = violations.first() {
        return Err(Error::Overlap(v.to_string()));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnknownScan(String),
    WrongSplitLabel { expected: Split, found: Split },
    CrossSplitParticipant(String),
    AnchorPositiveOverlap { split: Split, participant: String },
    AlphaMismatch { split: Split, negative: String },
    NegativeIsAnchorScan { split: Split, scan: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownScan(s) => write!(f, "scan {s} is not in the cohort"),
            Violation::WrongSplitLabel { expected, found } => {
                write!(f, "manifest labeled {found:?} where {expected:?} was expected")
            }
            Violation::CrossSplitParticipant(p) => write!(f, "participant {p} appears in both splits"),
            Violation::AnchorPositiveOverlap { split, participant } => {
                write!(f, "{split}: participant {participant} is in both the anchor and positive pools")
            }
            Violation::AlphaMismatch { split, negative } => {
                write!(f, "{split}: alpha for {negative} does not match its level")
            }
            Violation::NegativeIsAnchorScan { split, scan } => {
                write!(f, "{split}: {scan} is used both as a negative and as an anchor/positive")
            }
        }
    }
}

/// Checks split hygiene. `owner` maps a scan reference to its participant id.
pub fn verify_manifests(
    train: &TripletManifest,
    test: &TripletManifest,
    owner: impl Fn(&str) -> Option<String>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (m, expected) in [(train, Split::Train), (test, Split::Test)] {
        if m.split != expected {
            out.push(Violation::WrongSplitLabel { expected, found: m.split });
        }
    }
    let mut participants: [BTreeSet<String>; 2] = Default::default();
    for (side, m) in [train, test].into_iter().enumerate() {
        let mut anchor_p = BTreeSet::new();
        let mut positive_p = BTreeSet::new();
        let negatives: BTreeSet<&str> = m.triplets.iter().map(|t| t.negative.as_str()).collect();
        for t in &m.triplets {
            for (scan, pool) in [(&t.anchor, Some(&mut anchor_p)), (&t.positive, Some(&mut positive_p)), (&t.negative, None)] {
                match owner(scan) {
                    Some(p) => {
                        participants[side].insert(p.clone());
                        if let Some(pool) = pool {
                            pool.insert(p);
                        }
                    }
                    None => out.push(Violation::UnknownScan(scan.clone())),
                }
            }
            if alpha_of(t.rho).ok() != Some(t.alpha) {
                out.push(Violation::AlphaMismatch { split: m.split, negative: t.negative.clone() });
            }
            for s in [&t.anchor, &t.positive] {
                if negatives.contains(s.as_str()) {
                    out.push(Violation::NegativeIsAnchorScan { split: m.split, scan: s.clone() });
                }
            }
        }
        for p in anchor_p.intersection(&positive_p) {
            out.push(Violation::AnchorPositiveOverlap { split: m.split, participant: p.clone() });
        }
    }
    for p in participants[0].intersection(&participants[1]) {
        out.push(Violation::CrossSplitParticipant(p.clone()));
    }
    out.dedup();
    out
}
