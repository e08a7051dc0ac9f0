use serde::{Deserialize, Serialize};
use std::path::Path;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    ConvStem,
    FusedMbconv,
    Mbconv,
    Conv1x1Gap,
}

/// One row of the stage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub block_kind: BlockKind,
    #[serde(default = "one")]
    pub expansion: usize,
    pub layers: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default)]
    pub se_ratio: f64,
}

fn one() -> usize {
    1
}

impl StageSpec {
    fn new(block_kind: BlockKind, expansion: usize, layers: usize, out_channels: usize, stride: usize, se_ratio: f64) -> Self {
        Self {
            block_kind,
            expansion,
            layers,
            out_channels,
            stride,
            se_ratio,
        }
    }

    /// Stride used by layer `i` of the stage: only the first layer downsamples.
    pub fn layer_stride(&self, i: usize) -> usize {
        if i == 0 {
            self.stride
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkProfile {
    pub name: String,
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    pub feature_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_classes() -> usize {
    5
}

impl NetworkProfile {
    /// The EfficientNetV2-M stage table at 224×224 input.
    pub fn full_table4() -> Self {
        use BlockKind::*;
        Self {
            name: "full-table4".into(),
            input_size: 224,
            stages: vec![
                StageSpec::new(ConvStem, 1, 1, 24, 2, 0.0),
                StageSpec::new(FusedMbconv, 1, 2, 24, 1, 0.0),
                StageSpec::new(FusedMbconv, 4, 4, 48, 2, 0.0),
                StageSpec::new(FusedMbconv, 4, 4, 64, 2, 0.0),
                StageSpec::new(Mbconv, 4, 6, 128, 2, 0.25),
                StageSpec::new(Mbconv, 6, 9, 160, 1, 0.25),
                StageSpec::new(Mbconv, 6, 15, 256, 2, 0.25),
                StageSpec::new(Conv1x1Gap, 1, 1, 1280, 1, 0.0),
            ],
            feature_dim: 1280,
            num_classes: 5,
        }
    }

    /// Same stage structure at 64×64 input with narrow channels, trainable on a CPU.
    pub fn desk() -> Self {
        use BlockKind::*;
        Self {
            name: "desk".into(),
            input_size: 64,
            stages: vec![
                StageSpec::new(ConvStem, 1, 1, 8, 2, 0.0),
                StageSpec::new(FusedMbconv, 1, 1, 8, 1, 0.0),
                StageSpec::new(FusedMbconv, 4, 2, 16, 2, 0.0),
                StageSpec::new(FusedMbconv, 4, 2, 24, 2, 0.0),
                StageSpec::new(Mbconv, 4, 2, 32, 2, 0.25),
                StageSpec::new(Mbconv, 6, 2, 40, 1, 0.25),
                StageSpec::new(Mbconv, 6, 2, 64, 2, 0.25),
                StageSpec::new(Conv1x1Gap, 1, 1, 160, 1, 0.0),
            ],
            feature_dim: 160,
            num_classes: 5,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full-table4" => Some(Self::full_table4()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let p: Self = serde_json::from_str(text).map_err(|e| ModelError::InvalidProfile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::InvalidProfile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Resolves a preset name or a path to a JSON profile document.
    pub fn resolve(name_or_path: &str) -> Result<Self, ModelError> {
        match Self::preset(name_or_path) {
            Some(p) => Ok(p),
            None if name_or_path.ends_with(".json") => Self::from_json_file(Path::new(name_or_path)),
            None => Err(ModelError::InvalidProfile(format!(
                "unknown profile {name_or_path:?} (expected \"desk\", \"full-table4\" or a .json path)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidProfile(msg));
        if self.stages.len() < 2 {
            return bad("profile needs a stem and an aggregation stage".into());
        }
        if self.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            let expected_first = i == 0;
            let expected_last = i == last;
            match s.block_kind {
                BlockKind::ConvStem if !expected_first => return bad(format!("stage {i}: conv-stem must be first")),
                BlockKind::Conv1x1Gap if !expected_last => {
                    return bad(format!("stage {i}: conv1x1-gap must be last"))
                }
                BlockKind::FusedMbconv | BlockKind::Mbconv if expected_first || expected_last => {
                    return bad(format!("stage {i}: first stage must be conv-stem and last conv1x1-gap"))
                }
                _ => {}
            }
            if expected_first && s.block_kind != BlockKind::ConvStem {
                return bad("stage 0 must be conv-stem".into());
            }
            if expected_last && s.block_kind != BlockKind::Conv1x1Gap {
                return bad(format!("stage {i} must be conv1x1-gap"));
            }
            if !(s.stride == 1 || s.stride == 2) {
                return bad(format!("stage {i}: stride {} not in {{1,2}}", s.stride));
            }
            if s.layers == 0 || s.out_channels == 0 {
                return bad(format!("stage {i}: layers and out_channels must be positive"));
            }
            if !(0.0..=1.0).contains(&s.se_ratio) {
                return bad(format!("stage {i}: se_ratio {} outside [0,1]", s.se_ratio));
            }
            match s.block_kind {
                BlockKind::FusedMbconv if !matches!(s.expansion, 1 | 4) => {
                    return Err(ModelError::InvalidExpansion {
                        kind: "fused-mbconv",
                        expansion: s.expansion,
                    })
                }
                BlockKind::Mbconv if !matches!(s.expansion, 4 | 6) => {
                    return Err(ModelError::InvalidExpansion {
                        kind: "mbconv",
                        expansion: s.expansion,
                    })
                }
                _ => {}
            }
        }
        if self.stages[last].out_channels != self.feature_dim {
            return bad(format!(
                "feature_dim {} differs from aggregation stage width {}",
                self.feature_dim, self.stages[last].out_channels
            ));
        }
        Ok(())
    }

    /// Spatial side after each stage for an `input`-sized image.
    pub fn spatial_trace(&self, input: usize) -> Result<Vec<usize>, ModelError> {
        let mut side = input;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 2 {
                if side <= 1 {
                    return Err(ModelError::SpatialUnderflow { stage: i, side });
                }
                side = side.div_ceil(2);
            }
            out.push(side);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_profile_matches_stage_table() {
        let p = NetworkProfile::full_table4();
        p.validate().unwrap();
        let ch: Vec<_> = p.stages.iter().map(|s| s.out_channels).collect();
        let layers: Vec<_> = p.stages.iter().map(|s| s.layers).collect();
        let strides: Vec<_> = p.stages.iter().map(|s| s.stride).collect();
        let se: Vec<_> = p.stages.iter().map(|s| s.se_ratio).collect();
        assert_eq!(ch, [24, 24, 48, 64, 128, 160, 256, 1280]);
        assert_eq!(layers, [1, 2, 4, 4, 6, 9, 15, 1]);
        assert_eq!(strides, [2, 1, 2, 2, 2, 1, 2, 1]);
        assert_eq!(se[1..7], [0.0, 0.0, 0.0, 0.25, 0.25, 0.25]);
        assert_eq!(p.input_size, 224);
        assert_eq!(p.feature_dim, 1280);
        assert_eq!(p.num_classes, 5);
        assert_eq!(p.spatial_trace(224).unwrap(), [112, 112, 56, 28, 14, 14, 7, 7]);
    }

    #[test]
    fn desk_profile_keeps_strides_and_se() {
        let d = NetworkProfile::desk();
        let f = NetworkProfile::full_table4();
        d.validate().unwrap();
        for (a, b) in d.stages.iter().zip(&f.stages) {
            assert_eq!(a.stride, b.stride);
            assert_eq!(a.se_ratio, b.se_ratio);
            assert_eq!(a.block_kind, b.block_kind);
            assert_eq!(a.expansion, b.expansion);
        }
        assert_eq!(d.spatial_trace(64).unwrap(), [32, 32, 16, 8, 4, 4, 2, 2]);
    }

    #[test]
    fn json_round_trip_and_rejections() {
        let text = serde_json::to_string(&NetworkProfile::desk()).unwrap();
        assert!(text.contains("\"fused-mbconv\""));
        assert_eq!(NetworkProfile::from_json(&text).unwrap(), NetworkProfile::desk());
        let bad = text.replace("\"stride\":2", "\"stride\":3");
        assert!(NetworkProfile::from_json(&bad).is_err());
        let unknown = text.replacen("\"layers\"", "\"depth\":1,\"layers\"", 1);
        assert!(NetworkProfile::from_json(&unknown).is_err());
    }

    #[test]
    fn underflow_names_stage() {
        let mut p = NetworkProfile::desk();
        p.input_size = 4;
        let err = p.spatial_trace(4).unwrap_err();
        assert!(matches!(err, ModelError::SpatialUnderflow { stage: 3, .. }), "{err:?}");
    }
}
