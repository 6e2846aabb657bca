//! Acceptance counters, position-wise acceptance, timing decomposition and
//! report emission.

mod report;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use report::{
    emit_report, read_pos_acc_csv, read_timing_csv, BenchRun, PosAccRow, ReportFormat, RunReport, TimingRow,
    TimingTotals, SCHEMA_VERSION,
};

/// One specialist invocation inside a round. `level` is `None` for the
/// cache extension after a commit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialistCall {
    pub specialist: usize,
    pub level: Option<usize>,
    /// Offset from the start of the round.
    pub start_ns: u64,
    pub elapsed_ns: u64,
}

/// Acceptance events and phase timings of one draft/verify/commit round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `A_1 .. A_L`.
    pub acceptance: Vec<bool>,
    pub committed: usize,
    /// Draft nodes in the round's tree.
    pub nodes: usize,
    pub draft_ns: u64,
    pub verify_ns: u64,
    pub commit_ns: u64,
    pub wall_ns: u64,
    pub specialist_calls: Vec<SpecialistCall>,
}

impl RoundRecord {
    pub fn accepted(&self) -> usize {
        self.acceptance.iter().take_while(|&&a| a).count()
    }

    /// Fraction of the round's wall time covered by the three phases.
    pub fn phase_coverage(&self) -> f64 {
        if self.wall_ns == 0 {
            return 1.0;
        }
        (self.draft_ns + self.verify_ns + self.commit_ns) as f64 / self.wall_ns as f64
    }

    /// Prefix-monotone acceptance and `committed == accepted + 1`.
    pub fn check(&self) -> Result<()> {
        let a = self.accepted();
        if self.acceptance[a..].iter().any(|&x| x) {
            return Err(Error::Contract(format!(
                "round {} accepts a position after a rejection",
                self.round
            )));
        }
        if self.committed != a + 1 {
            return Err(Error::Contract(format!(
                "round {} commits {} tokens after {a} acceptances",
                self.round, self.committed
            )));
        }
        Ok(())
    }
}

/// `count_at_least(i)`: rounds whose acceptance reached position `i`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptCounters {
    pub rounds: u64,
    /// Entry `i − 1` holds `count_at_least(i)`.
    pub at_least: Vec<u64>,
}

impl AcceptCounters {
    pub fn new(depth: usize) -> Self {
        AcceptCounters {
            rounds: 0,
            at_least: vec![0; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.at_least.len()
    }

    pub fn record(&mut self, acceptance: &[bool]) {
        if acceptance.len() > self.at_least.len() {
            self.at_least.resize(acceptance.len(), 0);
        }
        self.rounds += 1;
        for c in &mut self.at_least[..acceptance.iter().take_while(|&&a| a).count()] {
            *c += 1;
        }
    }

    pub fn from_records(records: &[RoundRecord]) -> Self {
        let depth = records.iter().map(|r| r.acceptance.len()).max().unwrap_or(0);
        let mut c = AcceptCounters::new(depth);
        for r in records {
            c.record(&r.acceptance);
        }
        c
    }

    /// Pointwise sum; associative and commutative.
    pub fn merge(&self, other: &AcceptCounters) -> AcceptCounters {
        let depth = self.depth().max(other.depth());
        let get = |c: &AcceptCounters, i: usize| c.at_least.get(i).copied().unwrap_or(0);
        AcceptCounters {
            rounds: self.rounds + other.rounds,
            at_least: (0..depth).map(|i| get(self, i) + get(other, i)).collect(),
        }
    }

    /// `count_at_least(i)` for `i ≥ 1`; `count_at_least(0)` is the round count.
    pub fn count_at_least(&self, i: usize) -> u64 {
        if i == 0 {
            self.rounds
        } else {
            self.at_least.get(i - 1).copied().unwrap_or(0)
        }
    }

    /// Empirical `P(A_1 .. A_k)`.
    pub fn p_all(&self, k: usize) -> f64 {
        if self.rounds == 0 {
            return 0.0;
        }
        self.count_at_least(k) as f64 / self.rounds as f64
    }
}

/// `P(A_i | A_{i−1}) = count_at_least(i) / count_at_least(i − 1)`, or `None`
/// when no round reached position `i − 1`.
pub fn pos_acc(c: &AcceptCounters, i: usize) -> Result<Option<f64>> {
    if i < 2 {
        return Err(Error::Contract(format!("pos_acc is defined from position 2, got {i}")));
    }
    let den = c.count_at_least(i - 1);
    Ok((den > 0).then(|| c.count_at_least(i) as f64 / den as f64))
}

/// `|P(A_1..A_k) − P(A_1)·Π_{i=2..k} pos_acc(i)|`; an undefined rate counts
/// as zero.
pub fn chain_check(c: &AcceptCounters, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("chain_check needs k ≥ 1".into()));
    }
    let mut prod = c.p_all(1);
    for i in 2..=k {
        prod *= pos_acc(c, i)?.unwrap_or(0.0);
    }
    Ok((c.p_all(k) - prod).abs())
}

/// Mean committed tokens per round.
pub fn avg_accept_length(records: &[RoundRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("average acceptance length of zero rounds".into()));
    }
    Ok(records.iter().map(|r| r.committed as f64).sum::<f64>() / records.len() as f64)
}

/// Ratio of the best throughputs among `runs` and `vanilla`.
pub fn speedup(runs: &[BenchRun], vanilla: &[BenchRun]) -> Result<f64> {
    Ok(BenchRun::best(runs)?.throughput()? / BenchRun::best(vanilla)?.throughput()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(acc: &[bool]) -> RoundRecord {
        RoundRecord {
            round: 0,
            acceptance: acc.to_vec(),
            committed: acc.iter().take_while(|&&a| a).count() + 1,
            nodes: acc.len(),
            draft_ns: 1,
            verify_ns: 1,
            commit_ns: 1,
            wall_ns: 3,
            specialist_calls: Vec::new(),
        }
    }

    #[test]
    fn ratio_examples() {
        let c = AcceptCounters {
            rounds: 100,
            at_least: vec![80, 60, 60, 0],
        };
        assert_eq!(pos_acc(&c, 2).unwrap(), Some(0.75));
        assert_eq!(pos_acc(&c, 3).unwrap(), Some(1.0));
        assert_eq!(pos_acc(&c, 4).unwrap(), Some(0.0));
        assert_eq!(pos_acc(&c, 5).unwrap(), None);
        assert!(pos_acc(&c, 1).is_err());
        assert_eq!(chain_check(&c, 1).unwrap(), 0.0);
    }

    #[test]
    fn tau_examples() {
        let mut rs = vec![rec(&[true, true, false]), rec(&[true, true, true, true]), rec(&[true, true, true])];
        rs[1].acceptance.truncate(4);
        rs[1].committed = 5;
        rs[2].committed = 4;
        assert_eq!(avg_accept_length(&rs).unwrap(), 4.0);
        let floor: Vec<RoundRecord> = (0..5).map(|_| rec(&[false, false])).collect();
        assert_eq!(avg_accept_length(&floor).unwrap(), 1.0);
        assert!(avg_accept_length(&[]).is_err());
    }

    #[test]
    fn record_checks() {
        assert!(rec(&[true, false, false]).check().is_ok());
        let mut bad = rec(&[true, false, true]);
        assert!(bad.check().is_err());
        bad.acceptance = vec![true, false, false];
        bad.committed = 3;
        assert!(bad.check().is_err());
    }

    #[test]
    fn speedup_examples() {
        let r = BenchRun { tokens: 100, wall_ns: 1_000_000 };
        assert_eq!(speedup(&[r.clone()], &[r.clone()]).unwrap(), 1.0);
        let slow = BenchRun { tokens: 100, wall_ns: 2_000_000 };
        assert_eq!(speedup(&[slow], &[r.clone()]).unwrap(), 0.5);
        let zero = BenchRun { tokens: 100, wall_ns: 0 };
        assert!(matches!(speedup(&[zero], &[r]), Err(Error::Measurement(_))));
    }

    #[test]
    fn chain_identity_fuzz() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let depth = rng.random_range(1..10);
            let mut c = AcceptCounters::new(depth);
            for _ in 0..rng.random_range(1..300) {
                let a = rng.random_range(0..=depth);
                let acc: Vec<bool> = (0..depth).map(|i| i < a).collect();
                c.record(&acc);
            }
            for k in 1..=depth {
                worst = worst.max(chain_check(&c, k).unwrap());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    fn counters() -> impl Strategy<Value = AcceptCounters> {
        (1usize..8, proptest::collection::vec(0usize..8, 0..60)).prop_map(|(depth, accs)| {
            let mut c = AcceptCounters::new(depth);
            for a in accs {
                let acc: Vec<bool> = (0..depth).map(|i| i < a.min(depth)).collect();
                c.record(&acc);
            }
            c
        })
    }

    proptest! {
        #[test]
        fn counts_are_non_increasing(c in counters()) {
            for i in 1..=c.depth() {
                prop_assert!(c.count_at_least(i) <= c.count_at_least(i - 1));
            }
        }

        #[test]
        fn merge_is_associative(a in counters(), b in counters(), c in counters()) {
            prop_assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
            prop_assert_eq!(a.merge(&b), b.merge(&a));
        }

        #[test]
        fn chain_residual_is_tiny(c in counters()) {
            for k in 1..=c.depth() {
                prop_assert!(chain_check(&c, k).unwrap() < 1e-12);
            }
        }

        #[test]
        fn tau_is_bounded(accs in proptest::collection::vec(0usize..7, 1..40)) {
            let depth = 6;
            let rs: Vec<RoundRecord> = accs
                .iter()
                .map(|&a| rec(&(0..depth).map(|i| i < a).collect::<Vec<_>>()))
                .collect();
            let tau = avg_accept_length(&rs).unwrap();
            prop_assert!((1.0..=(depth + 1) as f64).contains(&tau));
            let total: usize = rs.iter().map(|r| r.committed).sum();
            prop_assert_eq!(tau, total as f64 / rs.len() as f64);
        }
    }
}
