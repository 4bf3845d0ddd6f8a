//! Partition of the latent vector into named extrinsic neurons and the
//! intrinsic block.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scene factor that a training batch can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Azimuth,
    Elevation,
    LightAzimuth,
    Intrinsic,
}

impl Factor {
    /// All factors in scheduling order (azimuth, elevation, light, intrinsic).
    pub const ALL: [Factor; 4] = [
        Factor::Azimuth,
        Factor::Elevation,
        Factor::LightAzimuth,
        Factor::Intrinsic,
    ];
    pub const EXTRINSIC: [Factor; 3] = [Factor::Azimuth, Factor::Elevation, Factor::LightAzimuth];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Azimuth => "azimuth",
            Factor::Elevation => "elevation",
            Factor::LightAzimuth => "light_azimuth",
            Factor::Intrinsic => "intrinsic",
        }
    }

    pub fn is_extrinsic(self) -> bool {
        self != Factor::Intrinsic
    }

    /// Stable one-byte tag used in binary files.
    pub fn tag(self) -> u8 {
        match self {
            Factor::Azimuth => 0,
            Factor::Elevation => 1,
            Factor::LightAzimuth => 2,
            Factor::Intrinsic => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Factor> {
        Factor::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Factor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown factor {s:?}")))
    }
}

/// Which latent indices carry which factor.
///
/// Every extrinsic factor owns exactly one index; the intrinsic block is a
/// contiguous range; together they tile `0..total_dim` without overlap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct LatentLayout {
    total_dim: usize,
    extrinsic: Vec<(Factor, usize)>,
    intrinsic: Range<usize>,
}

#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    total_dim: usize,
    extrinsic: Vec<(Factor, usize)>,
    intrinsic_start: usize,
    intrinsic_end: usize,
}

impl TryFrom<LayoutRepr> for LatentLayout {
    type Error = Error;

    fn try_from(r: LayoutRepr) -> Result<Self> {
        LatentLayout::new(r.total_dim, r.extrinsic, r.intrinsic_start..r.intrinsic_end)
    }
}

impl From<LatentLayout> for LayoutRepr {
    fn from(l: LatentLayout) -> Self {
        LayoutRepr {
            total_dim: l.total_dim,
            extrinsic: l.extrinsic,
            intrinsic_start: l.intrinsic.start,
            intrinsic_end: l.intrinsic.end,
        }
    }
}

impl LatentLayout {
    pub fn new(total_dim: usize, extrinsic: Vec<(Factor, usize)>, intrinsic: Range<usize>) -> Result<Self> {
        if intrinsic.is_empty() {
            return Err(Error::config("intrinsic range must be non-empty"));
        }
        if intrinsic.end > total_dim {
            return Err(Error::config(format!(
                "intrinsic range {intrinsic:?} exceeds latent dimension {total_dim}"
            )));
        }
        let mut owner = vec![false; total_dim];
        for i in intrinsic.clone() {
            owner[i] = true;
        }
        let mut seen = Vec::new();
        for &(factor, index) in &extrinsic {
            if !factor.is_extrinsic() {
                return Err(Error::config("intrinsic is not an extrinsic factor"));
            }
            if seen.contains(&factor) {
                return Err(Error::config(format!("factor {factor} assigned twice")));
            }
            seen.push(factor);
            if index >= total_dim {
                return Err(Error::config(format!(
                    "{factor} index {index} outside latent dimension {total_dim}"
                )));
            }
            if owner[index] {
                return Err(Error::config(format!("latent index {index} assigned twice")));
            }
            owner[index] = true;
        }
        if let Some(gap) = owner.iter().position(|&o| !o) {
            return Err(Error::config(format!("latent index {gap} is not assigned")));
        }
        Ok(Self {
            total_dim,
            extrinsic,
            intrinsic,
        })
    }

    /// Azimuth, elevation and light azimuth at indices 0, 1, 2; the rest intrinsic.
    pub fn standard(total_dim: usize) -> Result<Self> {
        Self::new(
            total_dim,
            Factor::EXTRINSIC.iter().copied().zip(0..).collect(),
            3..total_dim,
        )
    }

    /// Azimuth at index 0; everything else intrinsic.
    pub fn azimuth_only(total_dim: usize) -> Result<Self> {
        Self::new(total_dim, vec![(Factor::Azimuth, 0)], 1..total_dim)
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn extrinsic(&self) -> &[(Factor, usize)] {
        &self.extrinsic
    }

    pub fn intrinsic(&self) -> Range<usize> {
        self.intrinsic.clone()
    }

    pub fn index_of(&self, factor: Factor) -> Option<usize> {
        self.extrinsic
            .iter()
            .find(|(f, _)| *f == factor)
            .map(|&(_, i)| i)
    }

    pub fn contains(&self, factor: Factor) -> bool {
        factor == Factor::Intrinsic || self.index_of(factor).is_some()
    }

    /// Latent indices that a batch varying `factor` is allowed to move.
    pub fn active_indices(&self, factor: Factor) -> Result<Vec<usize>> {
        match factor {
            Factor::Intrinsic => Ok(self.intrinsic.clone().collect()),
            f => self
                .index_of(f)
                .map(|i| vec![i])
                .ok_or_else(|| Error::config(format!("layout has no latent for {f}"))),
        }
    }

    /// Per-index mask, `true` for active.
    pub fn active_mask(&self, factor: Factor) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.total_dim];
        for i in self.active_indices(factor)? {
            mask[i] = true;
        }
        Ok(mask)
    }
}
