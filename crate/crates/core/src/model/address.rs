use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Kernel slot inside a residual unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitSlot {
    Conv1,
    Conv2,
    Proj,
}

impl UnitSlot {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitSlot::Conv1 => "conv1",
            UnitSlot::Conv2 => "conv2",
            UnitSlot::Proj => "proj",
        }
    }
}

/// Stable coordinate of one kernel. Ordering follows the forward pass.
///
/// Text form: `stem`, `s{stage}.u{unit}.{conv1|conv2|proj}`, `head.{index}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LayerAddress {
    Stem,
    Unit {
        stage: usize,
        unit: usize,
        slot: UnitSlot,
    },
    Head(usize),
}

impl LayerAddress {
    pub const fn unit(stage: usize, unit: usize, slot: UnitSlot) -> Self {
        LayerAddress::Unit { stage, unit, slot }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, LayerAddress::Head(_))
    }

    pub fn stage(&self) -> Option<usize> {
        match self {
            LayerAddress::Unit { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub fn slot(&self) -> Option<UnitSlot> {
        match self {
            LayerAddress::Unit { slot, .. } => Some(*slot),
            _ => None,
        }
    }
}

impl fmt::Display for LayerAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerAddress::Stem => f.write_str("stem"),
            LayerAddress::Unit { stage, unit, slot } => {
                write!(f, "s{stage}.u{unit}.{}", slot.as_str())
            }
            LayerAddress::Head(i) => write!(f, "head.{i}"),
        }
    }
}

impl FromStr for LayerAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::config(format!("malformed layer address '{s}'"));
        if s == "stem" {
            return Ok(LayerAddress::Stem);
        }
        if let Some(rest) = s.strip_prefix("head.") {
            return rest.parse().map(LayerAddress::Head).map_err(|_| bad());
        }
        let mut parts = s.split('.');
        let (Some(st), Some(un), Some(sl), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let stage = st.strip_prefix('s').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let unit = un.strip_prefix('u').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let slot = match sl {
            "conv1" => UnitSlot::Conv1,
            "conv2" => UnitSlot::Conv2,
            "proj" => UnitSlot::Proj,
            _ => return Err(bad()),
        };
        Ok(LayerAddress::Unit { stage, unit, slot })
    }
}

impl From<LayerAddress> for String {
    fn from(a: LayerAddress) -> Self {
        a.to_string()
    }
}

impl TryFrom<String> for LayerAddress {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_forms() {
        assert_eq!(LayerAddress::Stem.to_string(), "stem");
        assert_eq!(LayerAddress::unit(1, 0, UnitSlot::Proj).to_string(), "s1.u0.proj");
        assert_eq!(LayerAddress::Head(2).to_string(), "head.2");
        for bad in ["", "s1.u0", "s1.u0.conv3", "x1.u0.conv1", "head.", "s1.u0.conv1.x"] {
            assert!(bad.parse::<LayerAddress>().is_err(), "{bad}");
        }
    }

    #[test]
    fn forward_ordering() {
        let mut v = vec![
            LayerAddress::Head(0),
            LayerAddress::unit(1, 0, UnitSlot::Proj),
            LayerAddress::unit(0, 0, UnitSlot::Conv2),
            LayerAddress::unit(1, 0, UnitSlot::Conv1),
            LayerAddress::Stem,
        ];
        v.sort();
        let s: Vec<String> = v.iter().map(|a| a.to_string()).collect();
        assert_eq!(s, ["stem", "s0.u0.conv2", "s1.u0.conv1", "s1.u0.proj", "head.0"]);
    }

    fn any_address() -> impl Strategy<Value = LayerAddress> {
        prop_oneof![
            Just(LayerAddress::Stem),
            (0usize..8).prop_map(LayerAddress::Head),
            (0usize..8, 0usize..8, 0usize..3).prop_map(|(s, u, k)| {
                let slot = [UnitSlot::Conv1, UnitSlot::Conv2, UnitSlot::Proj][k];
                LayerAddress::unit(s, u, slot)
            }),
        ]
    }

    proptest! {
        #[test]
        fn text_round_trip(a in any_address()) {
            prop_assert_eq!(a.to_string().parse::<LayerAddress>().unwrap(), a);
        }
    }
}
