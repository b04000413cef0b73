//! Progression levels, the level-to-weight transform, and the two triplet hinge losses.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Default hinge margin for both losses.
pub const DEFAULT_MARGIN: f64 = 1.0;

/// Ordinal position on the MCI to AD trajectory, stored as integer tenths in `1..=10`.
///
/// `1.0` marks the scan at which the participant is first diagnosed with AD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProgressionLevel(u8);

impl ProgressionLevel {
    pub const TERMINAL: ProgressionLevel = ProgressionLevel(10);

    pub fn from_tenths(tenths: u8) -> Result<Self> {
        if (1..=10).contains(&tenths) {
            Ok(ProgressionLevel(tenths))
        } else {
            Err(Error::InvalidLevel(tenths as f64 / 10.0))
        }
    }

    /// Accepts values within 1e-9 of a multiple of 0.1 in `[0.1, 1.0]`.
    pub fn from_rho(rho: f64) -> Result<Self> {
        let scaled = rho * 10.0;
        let tenths = scaled.round();
        if !rho.is_finite() || (scaled - tenths).abs() > 1e-9 || !(1.0..=10.0).contains(&tenths) {
            return Err(Error::InvalidLevel(rho));
        }
        Ok(ProgressionLevel(tenths as u8))
    }

    pub fn tenths(self) -> u8 {
        self.0
    }

    pub fn rho(self) -> f64 {
        self.0 as f64 / 10.0
    }

    pub fn is_terminal(self) -> bool {
        self.0 == 10
    }

    /// All levels from 0.1 to 1.0.
    pub fn all() -> impl Iterator<Item = ProgressionLevel> {
        (1..=10).map(ProgressionLevel)
    }
}

impl fmt::Display for ProgressionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl FromStr for ProgressionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: f64 = s.trim().parse().map_err(|_| Error::InvalidLevel(f64::NAN))?;
        ProgressionLevel::from_rho(v)
    }
}

impl Serialize for ProgressionLevel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.rho())
    }
}

impl<'de> Deserialize<'de> for ProgressionLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        ProgressionLevel::from_rho(v).map_err(serde::de::Error::custom)
    }
}

/// Per-level counts, serialized as a JSON object keyed by the level (`{"0.9": 5}`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LevelCounts(pub BTreeMap<ProgressionLevel, usize>);

impl LevelCounts {
    pub fn get(&self, level: ProgressionLevel) -> usize {
        self.0.get(&level).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }
}

impl FromIterator<(ProgressionLevel, usize)> for LevelCounts {
    fn from_iter<I: IntoIterator<Item = (ProgressionLevel, usize)>>(iter: I) -> Self {
        LevelCounts(iter.into_iter().collect())
    }
}

impl Serialize for LevelCounts {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m: BTreeMap<String, usize> = self.0.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        m.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LevelCounts {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = BTreeMap::<String, usize>::deserialize(d)?;
        m.into_iter()
            .map(|(k, v)| Ok((k.parse::<ProgressionLevel>().map_err(serde::de::Error::custom)?, v)))
            .collect()
    }
}

/// Weight applied to the anchor-negative distance in the weighted loss.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct Alpha(f64);

impl Alpha {
    pub const ONE: Alpha = Alpha(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(1.0..=1.8).contains(&value) {
            return Err(Error::LossInput(format!("alpha {value} outside [1.0, 1.8]")));
        }
        Ok(Alpha(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Alpha::new(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// `alpha = 1.9 - rho`, evaluated in integer tenths so `alpha_of(0.6)` is exactly `1.3`.
pub fn alpha_of(level: ProgressionLevel) -> Result<Alpha> {
    if level.is_terminal() {
        return Err(Error::AlphaForTerminalLevel);
    }
    Ok(Alpha((19 - level.tenths()) as f64 / 10.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Unweighted,
    Weighted,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Unweighted => "unweighted",
            LossKind::Weighted => "weighted",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unweighted" => Ok(LossKind::Unweighted),
            "weighted" => Ok(LossKind::Weighted),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLossInputs {
    pub d_ap: f64,
    pub d_an: f64,
    pub margin: f64,
}

impl TripletLossInputs {
    pub fn new(d_ap: f64, d_an: f64, margin: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(d_ap) || !ok(d_an) || !ok(margin) {
            return Err(Error::LossInput(format!(
                "distances and margin must be finite and non-negative (d_ap={d_ap}, d_an={d_an}, margin={margin})"
            )));
        }
        Ok(TripletLossInputs { d_ap, d_an, margin })
    }
}

/// `max(d_ap - d_an + margin, 0)` on the tape.
pub fn unweighted_on_tape(tape: &mut Tape, d_ap: Var, d_an: Var, margin: f64) -> Result<Var> {
    let diff = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(diff, margin)?;
    tape.relu(shifted)
}

/// `max(d_ap - alpha * d_an + margin, 0)` on the tape.
pub fn weighted_on_tape(tape: &mut Tape, d_ap: Var, d_an: Var, alpha: Alpha, margin: f64) -> Result<Var> {
    let scaled = tape.scale(d_an, alpha.value())?;
    let diff = tape.sub(d_ap, scaled)?;
    let shifted = tape.add_scalar(diff, margin)?;
    tape.relu(shifted)
}

/// Dispatches on `kind`; `alpha` is ignored for the unweighted loss.
pub fn triplet_on_tape(
    tape: &mut Tape,
    kind: LossKind,
    d_ap: Var,
    d_an: Var,
    alpha: Alpha,
    margin: f64,
) -> Result<Var> {
    match kind {
        LossKind::Unweighted => unweighted_on_tape(tape, d_ap, d_an, margin),
        LossKind::Weighted => weighted_on_tape(tape, d_ap, d_an, alpha, margin),
    }
}

pub fn unweighted_loss(inputs: &TripletLossInputs) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ap = tape.constant(Tensor::scalar(inputs.d_ap));
    let an = tape.constant(Tensor::scalar(inputs.d_an));
    let l = unweighted_on_tape(&mut tape, ap, an, inputs.margin)?;
    Ok(tape.value(l).clone())
}

pub fn weighted_loss(inputs: &TripletLossInputs, alpha: Alpha) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ap = tape.constant(Tensor::scalar(inputs.d_ap));
    let an = tape.constant(Tensor::scalar(inputs.d_an));
    let l = weighted_on_tape(&mut tape, ap, an, alpha, inputs.margin)?;
    Ok(tape.value(l).clone())
}
