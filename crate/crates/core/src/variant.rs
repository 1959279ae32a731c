use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Learner variant: how per-agent values are combined (QMIX, VDN, or an
/// actor-critic) and which global-information message the agents receive
/// (none, unified, or agent-specialized).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Qmix,
    QmixUgi,
    QmixSgi,
    Vdn,
    VdnUgi,
    VdnSgi,
    AcUgi,
    AcSgi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    None,
    Unified,
    Specialized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    Vdn,
    Qmix,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Qmix,
        Variant::QmixUgi,
        Variant::QmixSgi,
        Variant::Vdn,
        Variant::VdnUgi,
        Variant::VdnSgi,
        Variant::AcUgi,
        Variant::AcSgi,
    ];

    pub fn message(self) -> MessageKind {
        match self {
            Variant::Qmix | Variant::Vdn => MessageKind::None,
            Variant::QmixUgi | Variant::VdnUgi | Variant::AcUgi => MessageKind::Unified,
            Variant::QmixSgi | Variant::VdnSgi | Variant::AcSgi => MessageKind::Specialized,
        }
    }

    /// `None` for actor-critic variants.
    pub fn mixer(self) -> Option<MixerKind> {
        match self {
            Variant::Qmix | Variant::QmixUgi | Variant::QmixSgi => Some(MixerKind::Qmix),
            Variant::Vdn | Variant::VdnUgi | Variant::VdnSgi => Some(MixerKind::Vdn),
            Variant::AcUgi | Variant::AcSgi => None,
        }
    }

    pub fn is_actor_critic(self) -> bool {
        self.mixer().is_none()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Qmix => "qmix",
            Variant::QmixUgi => "qmix_ugi",
            Variant::QmixSgi => "qmix_sgi",
            Variant::Vdn => "vdn",
            Variant::VdnUgi => "vdn_ugi",
            Variant::VdnSgi => "vdn_sgi",
            Variant::AcUgi => "ac_ugi",
            Variant::AcSgi => "ac_sgi",
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
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config { path: "variant".into(), message: format!("unknown variant `{s}`") })
    }
}
