//! Feature-conditioned draft layers and the position-specialist bank.
//!
//! A draft layer consumes pairs `(x, f)` of a token embedding and the feature
//! that preceded it, fuses them into one row and runs a single transformer
//! block. The block's residual output is the next feature; the frozen target
//! LM head turns it into a next-token distribution.
//!
//! Draft positions are 0-based, specialists 1-based: specialist `j` owns
//! positions `(j-1)·n .. j·n`.

mod bank;
mod layer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use bank::{SpecialistBank, BANK_KIND};
pub use layer::{draft_forward, DraftLayer, DraftOutput, DraftVars};

/// Number of consecutive draft positions each specialist handles.
/// `Infinite` is the single shared layer of the teacher-forced and
/// multi-step baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum Span {
    Finite(usize),
    Infinite,
}

impl Span {
    /// Specialists needed to cover `depth` positions.
    pub fn specialists_for(self, depth: usize) -> usize {
        match self {
            Span::Finite(n) => depth.div_ceil(n).max(1),
            Span::Infinite => 1,
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Span::Finite(n) => write!(f, "{n}"),
            Span::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for Span {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinite" | "∞" => Ok(Span::Infinite),
            t => match t.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(Span::Finite(n)),
                _ => Err(Error::Config(format!(
                    "positions per specialist must be a positive integer or \"inf\", got {s:?}"
                ))),
            },
        }
    }
}

impl TryFrom<serde_json::Value> for Span {
    type Error = Error;

    fn try_from(v: serde_json::Value) -> Result<Self> {
        match &v {
            serde_json::Value::Number(n) => n
                .as_u64()
                .filter(|&n| n >= 1)
                .map(|n| Span::Finite(n as usize))
                .ok_or_else(|| Error::Config(format!("invalid span {v}"))),
            serde_json::Value::String(s) => s.parse(),
            _ => Err(Error::Config(format!("invalid span {v}"))),
        }
    }
}

impl From<Span> for serde_json::Value {
    fn from(s: Span) -> Self {
        match s {
            Span::Finite(n) => serde_json::Value::from(n),
            Span::Infinite => serde_json::Value::from("inf"),
        }
    }
}

/// 1-based specialist responsible for 0-based draft position `position`:
/// `ceil((position + 1) / n)`, always 1 when `n` is infinite.
pub fn route(position: i64, n: Span) -> Result<usize> {
    if position < 0 {
        return Err(Error::Contract(format!(
            "draft position must be non-negative, got {position}"
        )));
    }
    match n {
        Span::Finite(0) => Err(Error::Contract("positions per specialist must be ≥ 1".into())),
        Span::Finite(n) => Ok((position as usize + 1).div_ceil(n)),
        Span::Infinite => Ok(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_two_per_specialist() {
        let two = Span::Finite(2);
        assert_eq!(route(0, two).unwrap(), 1);
        assert_eq!(route(1, two).unwrap(), 1);
        assert_eq!(route(2, two).unwrap(), 2);
        assert_eq!(route(3, two).unwrap(), 2);
    }

    #[test]
    fn degenerate_spans() {
        for k in 0..20 {
            assert_eq!(route(k, Span::Finite(1)).unwrap(), k as usize + 1);
            assert_eq!(route(k, Span::Infinite).unwrap(), 1);
        }
        assert!(route(-1, Span::Finite(2)).is_err());
        assert!(route(0, Span::Finite(0)).is_err());
    }

    #[test]
    fn span_parsing_and_serde() {
        assert_eq!("3".parse::<Span>().unwrap(), Span::Finite(3));
        assert_eq!("inf".parse::<Span>().unwrap(), Span::Infinite);
        assert!("0".parse::<Span>().is_err());
        let j = serde_json::to_string(&Span::Infinite).unwrap();
        assert_eq!(j, "\"inf\"");
        assert_eq!(serde_json::from_str::<Span>("2").unwrap(), Span::Finite(2));
    }

    proptest! {
        #[test]
        fn routing_is_monotone_and_covers(n in 1usize..8, depth in 1usize..40) {
            let span = Span::Finite(n);
            let m = span.specialists_for(depth);
            let routes: Vec<usize> = (0..depth as i64).map(|i| route(i, span).unwrap()).collect();
            prop_assert!(routes.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1));
            prop_assert_eq!(routes[0], 1);
            prop_assert_eq!(*routes.last().unwrap(), m);
        }
    }
}
