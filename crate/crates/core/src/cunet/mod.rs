//! Conditioned UNet: a four-level encoder/decoder over the pre-event grid,
//! conditioned on the spatial context (concatenation + cross-attention) and
//! on the reliance vector (tiling and/or per-block affine modulation).

mod model;
mod params;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::ingest::IndividualSample;

pub use model::{CUNetModel, Forward};
pub use params::{BnEntry, Parameter};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CunetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// The ablation ladder, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Spatial,
    SpatialSirConcat,
    SpatialSirModulation,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Spatial,
        Variant::SpatialSirConcat,
        Variant::SpatialSirModulation,
        Variant::Full,
    ];

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Spatial => "+Spatial",
            Variant::SpatialSirConcat => "+Spatial+SIR (Concat)",
            Variant::SpatialSirModulation => "+Spatial+SIR (Modulation)",
            Variant::Full => "Full Model",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Spatial => "spatial",
            Variant::SpatialSirConcat => "spatial_sir_concat",
            Variant::SpatialSirModulation => "spatial_sir_modulation",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|v| v.slug() == norm)
    }

    /// Whether a condition map (and hence cross-attention) exists.
    pub fn has_condition(self) -> bool {
        self != Variant::Baseline
    }

    pub fn tiles_sir(self) -> bool {
        matches!(self, Variant::SpatialSirConcat | Variant::Full)
    }

    pub fn modulates(self) -> bool {
        matches!(self, Variant::SpatialSirModulation | Variant::Full)
    }

    /// Channels of the condition map for `k` categories.
    pub fn condition_channels(self, k: usize) -> usize {
        match self {
            Variant::Baseline => 0,
            v if v.tiles_sir() => 2 * k,
            _ => k,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

pub const DEPTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CUNetConfig {
    pub g: usize,
    pub k: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub variant: Variant,
    #[serde(default = "default_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_layers")]
    pub mlp_layers: usize,
    #[serde(default = "default_budget")]
    pub attention_token_budget: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_base() -> usize {
    32
}
fn default_depth() -> usize {
    DEPTH
}
fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_budget() -> usize {
    64
}

impl CUNetConfig {
    pub fn new(g: usize, k: usize, variant: Variant) -> Self {
        Self {
            g,
            k,
            base_channels: default_base(),
            depth: DEPTH,
            variant,
            mlp_hidden: default_hidden(),
            mlp_layers: default_layers(),
            attention_token_budget: default_budget(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), CunetError> {
        let bad = |m: String| Err(CunetError::InvalidConfig(m));
        if self.depth != DEPTH {
            return bad(format!("depth must be {DEPTH}, got {}", self.depth));
        }
        if self.base_channels < 8 {
            return bad(format!("base_channels must be at least 8, got {}", self.base_channels));
        }
        if self.attention_token_budget == 0 {
            return bad("attention_token_budget must be at least 1".into());
        }
        if self.g == 0 || self.k == 0 {
            return bad("g and k must be positive".into());
        }
        if self.variant.modulates() && (self.mlp_hidden == 0 || self.mlp_layers == 0) {
            return bad("modulation needs mlp_hidden and mlp_layers >= 1".into());
        }
        Ok(())
    }

    /// Grid side after zero-padding to a multiple of `2^depth`.
    pub fn padded_g(&self) -> usize {
        self.g.next_multiple_of(1 << DEPTH)
    }

    /// Channels of encoder levels 1..=4; the bottleneck has twice the last.
    pub fn channel_plan(&self) -> [usize; DEPTH] {
        std::array::from_fn(|l| self.base_channels << l)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << DEPTH
    }

    /// Widths `C_l` of the nine modulated blocks: encoder 1..4, bottleneck,
    /// decoder 4..1.
    pub fn modulation_widths(&self) -> Vec<usize> {
        let plan = self.channel_plan();
        let mut w: Vec<usize> = plan.to_vec();
        w.push(self.bottleneck_channels());
        w.extend(plan.iter().rev());
        w
    }
}

/// A batch of model inputs: `v_pre[B,1,G,G]`, `sc[B,K,G,G]`, `sir[B,K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub v_pre: Tensor<f32>,
    pub sc: Tensor<f32>,
    pub sir: Tensor<f32>,
}

impl ModelInputs {
    pub fn from_samples(samples: &[&IndividualSample]) -> Result<Self, CunetError> {
        let first = samples
            .first()
            .ok_or_else(|| CunetError::ShapeMismatch("empty batch".into()))?;
        let (g, k) = (first.g(), first.k());
        let b = samples.len();
        let mut v_pre = Vec::with_capacity(b * g * g);
        let mut sc = Vec::with_capacity(b * k * g * g);
        let mut sir = Vec::with_capacity(b * k);
        for s in samples {
            if s.g() != g || s.k() != k {
                return Err(CunetError::ShapeMismatch(format!(
                    "user {} has g={}, k={}; batch has g={g}, k={k}",
                    s.user_id,
                    s.g(),
                    s.k()
                )));
            }
            v_pre.extend(s.v_pre.bitmap.iter().map(|&v| f32::from(v)));
            sc.extend(s.sc.values.iter().map(|&v| v as f32));
            sir.extend(s.sir.values.iter().map(|&v| v as f32));
        }
        Ok(Self {
            v_pre: Tensor::new(&[b, 1, g, g], v_pre)?,
            sc: Tensor::new(&[b, k, g, g], sc)?,
            sir: Tensor::new(&[b, k], sir)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.v_pre.shape()[0]
    }

    pub fn g(&self) -> usize {
        self.v_pre.shape()[2]
    }

    pub fn k(&self) -> usize {
        self.sir.shape()[1]
    }

    pub(crate) fn check(&self, g: usize, k: usize) -> Result<(), CunetError> {
        let b = self.batch();
        let ok = self.v_pre.shape() == [b, 1, g, g]
            && self.sc.shape() == [b, k, g, g]
            && self.sir.shape() == [b, k];
        if ok {
            Ok(())
        } else {
            Err(CunetError::ShapeMismatch(format!(
                "inputs v_pre {:?}, sc {:?}, sir {:?} do not match g={g}, k={k}",
                self.v_pre.shape(),
                self.sc.shape(),
                self.sir.shape()
            )))
        }
    }
}

/// Builds the condition map on a tape: SC alone, SC ⊕ tiled SIR, or nothing
/// for the Baseline.
pub fn condition_map_on_tape(
    tape: &mut Tape<f32>,
    sc: Var,
    sir: Var,
    variant: Variant,
) -> Result<Option<Var>, CunetError> {
    let (b, k, h, w) = tape.value(sc).dims4()?;
    if tape.value(sir).shape() != [b, k] {
        return Err(CunetError::ShapeMismatch(format!(
            "sir {:?} does not match sc {:?}",
            tape.value(sir).shape(),
            tape.value(sc).shape()
        )));
    }
    Ok(match variant {
        Variant::Baseline => None,
        v if v.tiles_sir() => {
            let tiled = tape.tile_vector_to_map(sir, h, w)?;
            Some(tape.concat_channels(sc, tiled)?)
        }
        _ => Some(sc),
    })
}

/// Tensor-level condition map for a batch.
pub fn make_condition_map(sc: &Tensor<f32>, sir: &Tensor<f32>, variant: Variant) -> Result<Option<Tensor<f32>>, CunetError> {
    let mut tape = Tape::new();
    let s = tape.constant(sc.clone());
    let r = tape.constant(sir.clone());
    Ok(condition_map_on_tape(&mut tape, s, r, variant)?.map(|v| tape.value(v).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_map_shapes() {
        let sc = Tensor::full(&[2, 3, 8, 8], 0.25f32);
        let sir = Tensor::new(&[2, 3], vec![0.2, 0.8, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let full = make_condition_map(&sc, &sir, Variant::Full).unwrap().unwrap();
        assert_eq!(full.shape(), &[2, 6, 8, 8]);
        let plane = 64;
        let d = full.data();
        for c in 0..3 {
            for p in 0..plane {
                assert_eq!(d[c * plane + p], 0.25);
            }
        }
        assert!(d[3 * plane..4 * plane].iter().all(|&v| v == 0.2));
        assert!(d[4 * plane..5 * plane].iter().all(|&v| v == 0.8));
        let spatial = make_condition_map(&sc, &sir, Variant::Spatial).unwrap().unwrap();
        assert_eq!(spatial, sc);
        let modulation = make_condition_map(&sc, &sir, Variant::SpatialSirModulation).unwrap().unwrap();
        assert_eq!(modulation.shape(), &[2, 3, 8, 8]);
        assert!(make_condition_map(&sc, &sir, Variant::Baseline).unwrap().is_none());
    }

    #[test]
    fn condition_map_rejects_mismatch() {
        let sc = Tensor::zeros(&[1, 3, 4, 4]);
        let sir = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            make_condition_map(&sc, &sir, Variant::Full),
            Err(CunetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_rules() {
        let mut c = CUNetConfig::new(100, 85, Variant::Full);
        c.validate().unwrap();
        assert_eq!(c.padded_g(), 112);
        assert_eq!(c.channel_plan(), [32, 64, 128, 256]);
        assert_eq!(c.bottleneck_channels(), 512);
        assert_eq!(c.modulation_widths().len(), 9);
        c.base_channels = 4;
        assert!(c.validate().is_err());
        c.base_channels = 8;
        c.depth = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.slug()), Some(v));
        }
        assert_eq!(Variant::parse("spatial-sir-concat"), Some(Variant::SpatialSirConcat));
        assert_eq!(Variant::parse("nope"), None);
    }
}
