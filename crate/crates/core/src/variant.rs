//! The full model and its four ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CGPN")]
    Cgpn,
    /// Global parts only.
    #[serde(rename = "CGPN-1")]
    Cgpn1,
    /// Uniform fine-grained strips instead of coarse combinations.
    #[serde(rename = "CGPN-2")]
    Cgpn2,
    /// Local parts only.
    #[serde(rename = "CGPN-3")]
    Cgpn3,
    /// Global parts without MSE supervision.
    #[serde(rename = "CGPN-4")]
    Cgpn4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Cgpn,
        Variant::Cgpn1,
        Variant::Cgpn2,
        Variant::Cgpn3,
        Variant::Cgpn4,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Cgpn => "CGPN",
            Variant::Cgpn1 => "CGPN-1",
            Variant::Cgpn2 => "CGPN-2",
            Variant::Cgpn3 => "CGPN-3",
            Variant::Cgpn4 => "CGPN-4",
        }
    }

    pub fn config(&self) -> VariantConfig {
        use LocalMode::*;
        let (has_local, local_mode, has_global, global_supervised) = match self {
            Variant::Cgpn => (true, Some(Coarse), true, true),
            Variant::Cgpn1 => (false, None, true, true),
            Variant::Cgpn2 => (true, Some(Fine), true, true),
            Variant::Cgpn3 => (true, Some(Coarse), false, false),
            Variant::Cgpn4 => (true, Some(Coarse), true, false),
        };
        VariantConfig {
            variant: *self,
            has_local,
            local_mode,
            has_global,
            global_supervised,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalMode {
    /// Contiguous combinations of at least half the strips.
    Coarse,
    /// Each strip on its own.
    Fine,
}

/// Which parts a variant builds and how they are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    pub has_local: bool,
    pub local_mode: Option<LocalMode>,
    pub has_global: bool,
    /// MSE supervision of the global features by their part targets.
    pub global_supervised: bool,
}

impl VariantConfig {
    pub fn mse_enabled(&self) -> bool {
        self.has_global && self.global_supervised
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("cgpn-4".parse::<Variant>().unwrap(), Variant::Cgpn4);
        assert!(matches!("CGPN-7".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn variant_table() {
        let c = Variant::Cgpn1.config();
        assert!(!c.has_local && c.has_global && c.mse_enabled());
        let c = Variant::Cgpn2.config();
        assert_eq!(c.local_mode, Some(LocalMode::Fine));
        let c = Variant::Cgpn3.config();
        assert!(c.has_local && !c.has_global && !c.mse_enabled());
        let c = Variant::Cgpn4.config();
        assert!(c.has_global && !c.mse_enabled());
        assert!(Variant::Cgpn.config().mse_enabled());
    }
}
