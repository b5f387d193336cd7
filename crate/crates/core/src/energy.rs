//! Analytic operation ledger and precision-scaled energy model.
//!
//! Every arithmetic operation the training loop performs is tallied by
//! operation class and operand bit width. Energy is then derived from the
//! tallies through a cost model: by default the cost of an operation at `B`
//! bits is its 32-bit unit cost scaled by `(B/32)^2`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit widths the ledger can account for.
pub const SUPPORTED_BITS: [u32; 6] = [1, 4, 8, 10, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Multiply,
    Add,
    DataMove,
}

impl OpClass {
    pub const ALL: [OpClass; 3] = [OpClass::Multiply, OpClass::Add, OpClass::DataMove];

    fn index(self) -> usize {
        match self {
            OpClass::Multiply => 0,
            OpClass::Add => 1,
            OpClass::DataMove => 2,
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpClass::Multiply => "multiply",
            OpClass::Add => "add",
            OpClass::DataMove => "data_move",
        })
    }
}

fn bits_index(bits: u32) -> Result<usize> {
    SUPPORTED_BITS
        .iter()
        .position(|&b| b == bits)
        .ok_or_else(|| {
            Error::config(format!(
                "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
            ))
        })
}

/// Per-(operation class, bit width) counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<LedgerEntry>", try_from = "Vec<LedgerEntry>")]
pub struct EnergyLedger {
    counts: [[u64; 6]; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub op: OpClass,
    pub bits: u32,
    pub count: u64,
}

impl From<EnergyLedger> for Vec<LedgerEntry> {
    fn from(l: EnergyLedger) -> Self {
        l.entries()
    }
}

impl TryFrom<Vec<LedgerEntry>> for EnergyLedger {
    type Error = Error;

    fn try_from(entries: Vec<LedgerEntry>) -> Result<Self> {
        let mut l = EnergyLedger::new();
        for e in entries {
            l.record(e.op, e.count as i64, e.bits)?;
        }
        Ok(l)
    }
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` operations of class `op` at `bits` precision.
    pub fn record(&mut self, op: OpClass, count: i64, bits: u32) -> Result<()> {
        if count < 0 {
            return Err(Error::config(format!(
                "negative operation count {count} for {op}"
            )));
        }
        let b = bits_index(bits)?;
        self.counts[op.index()][b] += count as u64;
        Ok(())
    }

    /// Infallible fast path for callers that pass a width from
    /// [`SUPPORTED_BITS`]. Panics on an unsupported width.
    pub(crate) fn add(&mut self, op: OpClass, count: u64, bits: u32) {
        let b = bits_index(bits).expect("bit width validated by caller");
        self.counts[op.index()][b] += count;
    }

    /// Records `macs` multiply-accumulates with their operand loads.
    pub(crate) fn macs(&mut self, macs: u64, bits: u32) {
        self.add(OpClass::Multiply, macs, bits);
        self.add(OpClass::Add, macs, bits);
        self.add(OpClass::DataMove, 2 * macs, bits);
    }

    /// Records `n` elementwise operations made of `mults` multiplies and
    /// `adds` additions per element, plus one operand load per element.
    pub(crate) fn elementwise(&mut self, n: u64, mults: u64, adds: u64, bits: u32) {
        self.add(OpClass::Multiply, n * mults, bits);
        self.add(OpClass::Add, n * adds, bits);
        self.add(OpClass::DataMove, n, bits);
    }

    pub fn count(&self, op: OpClass, bits: u32) -> Result<u64> {
        Ok(self.counts[op.index()][bits_index(bits)?])
    }

    pub fn total(&self, op: OpClass) -> u64 {
        self.counts[op.index()].iter().sum()
    }

    /// Arithmetic operations (multiplies plus adds); data movement excluded.
    pub fn flops(&self) -> u64 {
        self.total(OpClass::Multiply) + self.total(OpClass::Add)
    }

    pub fn merge(&mut self, other: &EnergyLedger) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        let mut out = Vec::new();
        for op in OpClass::ALL {
            for (bi, &bits) in SUPPORTED_BITS.iter().enumerate() {
                let count = self.counts[op.index()][bi];
                if count > 0 {
                    out.push(LedgerEntry { op, bits, count });
                }
            }
        }
        out
    }

    /// Total modelled energy: sum of `count * unit_cost(op, bits)`.
    pub fn energy(&self, model: &CostModel) -> f64 {
        let mut total = 0.0;
        for op in OpClass::ALL {
            for (bi, &bits) in SUPPORTED_BITS.iter().enumerate() {
                let count = self.counts[op.index()][bi];
                if count > 0 {
                    total += energy_of(count, bits, op, model);
                }
            }
        }
        total
    }

    /// Energy the same operations would cost if all ran at 32 bits.
    pub fn energy_at_full_precision(&self, model: &CostModel) -> f64 {
        OpClass::ALL
            .iter()
            .map(|&op| self.total(op) as f64 * model.unit32(op))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostModelKind {
    #[default]
    Quadratic,
    PaperCalibrated,
}

/// Maps (op class, bit width) to a per-operation cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    unit32: [f64; 3],
    overrides: Vec<(OpClass, u32, f64)>,
}

impl Default for CostModel {
    fn default() -> Self {
        Self::quadratic()
    }
}

impl CostModel {
    /// Unit cost 1 for every class at 32 bits, quadratic scaling below.
    pub fn quadratic() -> Self {
        Self {
            unit32: [1.0; 3],
            overrides: Vec::new(),
        }
    }

    /// Quadratic law except at 8 bits, where multiply, add and data movement
    /// cost 5%, 3% and 25% of their 32-bit counterparts.
    pub fn paper_calibrated() -> Self {
        Self {
            unit32: [1.0; 3],
            overrides: vec![
                (OpClass::Multiply, 8, 0.05),
                (OpClass::Add, 8, 0.03),
                (OpClass::DataMove, 8, 0.25),
            ],
        }
    }

    pub fn from_kind(kind: CostModelKind) -> Self {
        match kind {
            CostModelKind::Quadratic => Self::quadratic(),
            CostModelKind::PaperCalibrated => Self::paper_calibrated(),
        }
    }

    pub fn with_unit_costs(mut self, multiply: f64, add: f64, data_move: f64) -> Self {
        self.unit32 = [multiply, add, data_move];
        self
    }

    /// Replaces the quadratic law for one (class, width) pair with a measured
    /// ratio relative to 32 bits.
    pub fn with_override(mut self, op: OpClass, bits: u32, ratio: f64) -> Self {
        self.overrides.retain(|&(o, b, _)| !(o == op && b == bits));
        self.overrides.push((op, bits, ratio));
        self
    }

    pub fn unit32(&self, op: OpClass) -> f64 {
        self.unit32[op.index()]
    }

    /// Cost of one operation at `bits` relative to the same operation at 32.
    pub fn ratio(&self, op: OpClass, bits: u32) -> f64 {
        self.overrides
            .iter()
            .find(|&&(o, b, _)| o == op && b == bits)
            .map(|&(_, _, r)| r)
            .unwrap_or_else(|| {
                let s = bits as f64 / 32.0;
                s * s
            })
    }
}

pub fn energy_of(count: u64, bits: u32, op: OpClass, model: &CostModel) -> f64 {
    count as f64 * model.unit32(op) * model.ratio(op, bits)
}

/// One technique's contribution, as the fraction of work it kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub technique: String,
    /// Kept fraction of FLOPs (or energy, for precision) attributable to the
    /// technique; `1 - factor` is its saving in isolation.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub computational_savings: f64,
    pub energy_savings: f64,
    pub attribution: Vec<Attribution>,
}

/// Savings of `run` relative to `baseline`, on FLOPs and modelled energy.
pub fn savings_report(
    run: &EnergyLedger,
    baseline: &EnergyLedger,
    model: &CostModel,
) -> Result<SavingsReport> {
    let base_flops = baseline.flops();
    if base_flops == 0 {
        return Err(Error::config("baseline ledger has zero FLOPs"));
    }
    let base_energy = baseline.energy(model);
    Ok(SavingsReport {
        computational_savings: 1.0 - run.flops() as f64 / base_flops as f64,
        energy_savings: 1.0 - run.energy(model) / base_energy,
        attribution: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_record_is_noop() {
        let mut l = EnergyLedger::new();
        l.record(OpClass::Add, 0, 8).unwrap();
        assert_eq!(l, EnergyLedger::new());
    }

    #[test]
    fn records_accumulate() {
        let mut a = EnergyLedger::new();
        a.record(OpClass::Multiply, 5, 16).unwrap();
        a.record(OpClass::Multiply, 5, 16).unwrap();
        let mut b = EnergyLedger::new();
        b.record(OpClass::Multiply, 10, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_negative_and_unknown_width() {
        let mut l = EnergyLedger::new();
        assert!(matches!(l.record(OpClass::Add, -1, 8), Err(Error::Config(_))));
        assert!(matches!(l.record(OpClass::Add, 1, 12), Err(Error::Config(_))));
    }

    #[test]
    fn quadratic_ratios() {
        let m = CostModel::quadratic();
        assert_eq!(energy_of(7, 32, OpClass::Add, &m), 7.0);
        assert_eq!(m.ratio(OpClass::Multiply, 8), 1.0 / 16.0);
        assert_eq!(1.0 - m.ratio(OpClass::Multiply, 8), 0.9375);
        assert_eq!(m.ratio(OpClass::Multiply, 1), 1.0 / 1024.0);
        for bits in SUPPORTED_BITS {
            let r = energy_of(1000, bits, OpClass::DataMove, &m)
                / energy_of(1000, 32, OpClass::DataMove, &m);
            assert_eq!(r, (bits as f64 / 32.0).powi(2));
        }
    }

    #[test]
    fn calibrated_overrides_at_eight_bits() {
        let m = CostModel::paper_calibrated();
        assert_eq!(m.ratio(OpClass::Multiply, 8), 0.05);
        assert_eq!(m.ratio(OpClass::Add, 8), 0.03);
        assert_eq!(m.ratio(OpClass::DataMove, 8), 0.25);
        assert_eq!(m.ratio(OpClass::Add, 16), 0.25);
    }

    #[test]
    fn baseline_against_itself_saves_nothing() {
        let mut l = EnergyLedger::new();
        l.macs(100, 32);
        let r = savings_report(&l, &l, &CostModel::quadratic()).unwrap();
        assert_eq!(r.computational_savings, 0.0);
        assert_eq!(r.energy_savings, 0.0);
        assert!(savings_report(&l, &EnergyLedger::new(), &CostModel::quadratic()).is_err());
    }

    #[test]
    fn ledger_json_roundtrip() {
        let mut l = EnergyLedger::new();
        l.macs(12, 8);
        l.elementwise(3, 1, 2, 16);
        let s = serde_json::to_string(&l).unwrap();
        let back: EnergyLedger = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l);
    }
}
