use std::collections::HashMap;
use std::fmt;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use crate::data::Subset;
use crate::train::argmax;

use super::{EnsembleError, PredictionMatrix};

/// An exact percentage.
pub type Percent = Ratio<u64>;

/// Per-subset top-1 accuracy and their mean, all exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Metrics {
    pub acc_a: Percent,
    pub acc_b: Percent,
    pub macc: Percent,
}

impl Metrics {
    pub fn from_accuracies(acc_a: Percent, acc_b: Percent) -> Self {
        Self { acc_a, acc_b, macc: (acc_a + acc_b) / Ratio::from_integer(2) }
    }
}

/// `100·correct/total` as an exact ratio.
pub fn percent(correct: u64, total: u64) -> Percent {
    Ratio::new(100 * correct, total)
}

/// Half-up rounding to one decimal, e.g. `81.75 → "81.8"`.
pub fn display_percent(p: &Percent) -> String {
    let tenths = (p * Ratio::from_integer(10) + Ratio::new(1, 2)).floor().to_integer();
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// The exact value: a terminating decimal when one exists, else `num/den`.
pub fn exact_percent(p: &Percent) -> String {
    let mut den = *p.denom();
    while den.is_multiple_of(2) {
        den /= 2;
    }
    while den.is_multiple_of(5) {
        den /= 5;
    }
    if den != 1 {
        return format!("{}/{}", p.numer(), p.denom());
    }
    let int = p.to_integer();
    let mut frac = p - Ratio::from_integer(int);
    let mut digits = String::new();
    while !frac.is_zero() {
        frac *= Ratio::from_integer(10);
        let d = frac.to_integer();
        digits.push(char::from(b'0' + d as u8));
        frac -= Ratio::from_integer(d);
    }
    if digits.is_empty() {
        int.to_string()
    } else {
        format!("{int}.{digits}")
    }
}

pub fn percent_f64(p: &Percent) -> f64 {
    p.to_f64().expect("finite ratio")
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "acc_A {} acc_B {} mAcc {} (exact {})",
            display_percent(&self.acc_a),
            display_percent(&self.acc_b),
            display_percent(&self.macc),
            exact_percent(&self.macc)
        )
    }
}

/// Per-subset argmax accuracy of a prediction matrix.
pub fn evaluate(
    pred: &PredictionMatrix,
    labels: &HashMap<String, usize>,
    subset_of: &HashMap<String, Subset>,
) -> Result<Metrics, EnsembleError> {
    let mut counts = [(0u64, 0u64); 2];
    for (i, id) in pred.ids.iter().enumerate() {
        let label = *labels.get(id).ok_or_else(|| EnsembleError::MissingLabel(id.clone()))?;
        let subset = *subset_of.get(id).ok_or_else(|| EnsembleError::MissingLabel(id.clone()))?;
        let c = &mut counts[subset as usize];
        c.1 += 1;
        c.0 += u64::from(argmax(pred.row(i)) == label);
    }
    for s in Subset::ALL {
        if counts[s as usize].1 == 0 {
            return Err(EnsembleError::EmptySubset(s));
        }
    }
    Ok(Metrics::from_accuracies(percent(counts[0].0, counts[0].1), percent(counts[1].0, counts[1].1)))
}
