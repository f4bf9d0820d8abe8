//! Layer descriptions, parameter groups and freeze configurations.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::Dims3;

/// Parameter group a layer belongs to; adaptation freezes whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Conv,
    Fc1,
    Fc2,
    Fc3,
    Out,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Conv, Group::Fc1, Group::Fc2, Group::Fc3, Group::Out];

    pub fn name(self) -> &'static str {
        match self {
            Group::Conv => "CONV",
            Group::Fc1 => "FC1",
            Group::Fc2 => "FC2",
            Group::Fc3 => "FC3",
            Group::Out => "OUT",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown layer group {s:?}")))
    }
}

/// Shape of the per-sample activation entering a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Volume { channels: usize, dims: Dims3 },
    Flat(usize),
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Volume { channels, dims } => channels * dims.len(),
            FeatureShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Volume { channels, dims } => vec![channels, dims.d, dims.h, dims.w],
            FeatureShape::Flat(n) => vec![n],
        }
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_vec();
        let parts: Vec<String> = v.iter().map(|e| e.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

impl FromStr for FeatureShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: std::result::Result<Vec<usize>, _> = s.split('x').map(str::parse).collect();
        match parts
            .map_err(|_| Error::Format(format!("bad shape {s:?}")))?
            .as_slice()
        {
            &[n] => Ok(FeatureShape::Flat(n)),
            &[c, d, h, w] => Ok(FeatureShape::Volume {
                channels: c,
                dims: Dims3::new(d, h, w),
            }),
            _ => Err(Error::Format(format!("bad shape {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Conv3d {
        in_channels: usize,
        out_channels: usize,
    },
    BatchNorm {
        channels: usize,
        momentum: f64,
        epsilon: f64,
    },
    /// One learnable slope per input element.
    Prelu,
    MaxPool,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Dropout {
        p: f64,
    },
    /// Two-class softmax; the layer itself passes logits through and the
    /// normalization happens in the loss or in prediction.
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv3d { .. } => "conv3d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Prelu => "prelu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }
}

/// One entry of the network topology.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub group: Group,
    pub input: FeatureShape,
}

impl LayerSpec {
    pub fn output(&self) -> Result<FeatureShape> {
        let bad = || {
            Error::Format(format!(
                "{} cannot take input {}",
                self.kind.name(),
                self.input
            ))
        };
        Ok(match (self.kind, self.input) {
            (
                LayerKind::Conv3d {
                    in_channels,
                    out_channels,
                },
                FeatureShape::Volume { channels, dims },
            ) if channels == in_channels => FeatureShape::Volume {
                channels: out_channels,
                dims,
            },
            (LayerKind::BatchNorm { channels: c, .. }, FeatureShape::Volume { channels, .. })
                if c == channels =>
            {
                self.input
            }
            (LayerKind::Prelu | LayerKind::Dropout { .. }, s) => s,
            (LayerKind::MaxPool, FeatureShape::Volume { channels, dims })
                if dims.d >= 2 && dims.h >= 2 && dims.w >= 2 =>
            {
                FeatureShape::Volume {
                    channels,
                    dims: dims.halved(),
                }
            }
            (LayerKind::Flatten, s @ FeatureShape::Volume { .. }) => FeatureShape::Flat(s.len()),
            (LayerKind::Dense { inputs, outputs }, FeatureShape::Flat(n)) if n == inputs => {
                FeatureShape::Flat(outputs)
            }
            (LayerKind::Softmax, FeatureShape::Flat(2)) => self.input,
            _ => return Err(bad()),
        })
    }

    /// Shapes of the stored parameter tensors, in serialization order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self.kind {
            LayerKind::Conv3d {
                in_channels,
                out_channels,
            } => {
                vec![vec![out_channels, in_channels, 3, 3, 3], vec![out_channels]]
            }
            LayerKind::BatchNorm { channels, .. } => vec![vec![channels]; 4],
            LayerKind::Prelu => vec![self.input.to_vec()],
            LayerKind::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            _ => Vec::new(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self.kind {
            LayerKind::Conv3d { .. } | LayerKind::Dense { .. } => &["weight", "bias"],
            LayerKind::BatchNorm { .. } => &["gamma", "beta", "running_mean", "running_var"],
            LayerKind::Prelu => &["slopes"],
            _ => &[],
        }
    }

    /// Parameter slots updated by the optimizer; batch-norm running statistics are not.
    pub fn trainable_slots(&self) -> &'static [usize] {
        match self.kind {
            LayerKind::Conv3d { .. } | LayerKind::Dense { .. } | LayerKind::BatchNorm { .. } => {
                &[0, 1]
            }
            LayerKind::Prelu => &[0],
            _ => &[],
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{} group={} input={}",
            self.kind.name(),
            self.group,
            self.input
        );
        match self.kind {
            LayerKind::Conv3d {
                in_channels,
                out_channels,
            } => s += &format!(" in={in_channels} out={out_channels}"),
            LayerKind::BatchNorm {
                channels,
                momentum,
                epsilon,
            } => s += &format!(" channels={channels} momentum={momentum} epsilon={epsilon}"),
            LayerKind::Dense { inputs, outputs } => s += &format!(" in={inputs} out={outputs}"),
            LayerKind::Dropout { p } => s += &format!(" p={p}"),
            _ => {}
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut words = line.split_whitespace();
        let kind_name = words
            .next()
            .ok_or_else(|| Error::Format("empty layer line".into()))?;
        let mut fields = std::collections::HashMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad layer field {w:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("layer {kind_name:?} missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad {k}")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad {k}")))
        };
        let kind = match kind_name {
            "conv3d" => LayerKind::Conv3d {
                in_channels: num("in")?,
                out_channels: num("out")?,
            },
            "batchnorm" => LayerKind::BatchNorm {
                channels: num("channels")?,
                momentum: real("momentum")?,
                epsilon: real("epsilon")?,
            },
            "prelu" => LayerKind::Prelu,
            "maxpool" => LayerKind::MaxPool,
            "flatten" => LayerKind::Flatten,
            "dense" => LayerKind::Dense {
                inputs: num("in")?,
                outputs: num("out")?,
            },
            "dropout" => LayerKind::Dropout { p: real("p")? },
            "softmax" => LayerKind::Softmax,
            other => return Err(Error::Format(format!("unknown layer kind {other:?}"))),
        };
        let spec = LayerSpec {
            kind,
            group: get("group")?.parse()?,
            input: get("input")?.parse()?,
        };
        spec.output()?;
        Ok(spec)
    }
}

/// Which fully connected groups are retrained during adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreezeMode {
    /// Everything trainable (training from scratch).
    None,
    Fc1Fc2Fc3,
    Fc2Fc3,
    Fc3,
}

impl FreezeMode {
    pub const ADAPTATION: [FreezeMode; 3] =
        [FreezeMode::Fc1Fc2Fc3, FreezeMode::Fc2Fc3, FreezeMode::Fc3];

    pub fn name(self) -> &'static str {
        match self {
            FreezeMode::None => "none",
            FreezeMode::Fc1Fc2Fc3 => "fc1_fc2_fc3",
            FreezeMode::Fc2Fc3 => "fc2_fc3",
            FreezeMode::Fc3 => "fc3",
        }
    }

    /// The fully connected groups this mode retrains.
    pub fn retrained_groups(self) -> &'static [Group] {
        match self {
            FreezeMode::None => &Group::ALL,
            FreezeMode::Fc1Fc2Fc3 => &[Group::Fc1, Group::Fc2, Group::Fc3],
            FreezeMode::Fc2Fc3 => &[Group::Fc2, Group::Fc3],
            FreezeMode::Fc3 => &[Group::Fc3],
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            FreezeMode::None,
            FreezeMode::Fc1Fc2Fc3,
            FreezeMode::Fc2Fc3,
            FreezeMode::Fc3,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown freeze mode {s:?}")))
    }
}

/// Trainability settings applied by [`crate::nn::Model::set_trainable`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeConfig {
    pub mode: FreezeMode,
    /// Keep the two-unit softmax head trainable in adaptation modes.
    pub retrain_head: bool,
    /// Let frozen batch-norm layers keep normalizing with batch statistics and
    /// updating their running averages while training.
    pub frozen_bn_batch_stats: bool,
}

impl FreezeConfig {
    pub fn new(mode: FreezeMode) -> Self {
        Self {
            mode,
            retrain_head: true,
            frozen_bn_batch_stats: false,
        }
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        let mut groups = self.mode.retrained_groups().to_vec();
        if self.retrain_head && !groups.contains(&Group::Out) {
            groups.push(Group::Out);
        }
        groups
    }
}

impl Default for FreezeConfig {
    fn default() -> Self {
        Self::new(FreezeMode::None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_lines_round_trip() {
        let specs = [
            LayerSpec {
                kind: LayerKind::BatchNorm {
                    channels: 32,
                    momentum: 0.99,
                    epsilon: 1e-3,
                },
                group: Group::Conv,
                input: FeatureShape::Volume {
                    channels: 32,
                    dims: Dims3::cube(11),
                },
            },
            LayerSpec {
                kind: LayerKind::Dropout { p: 0.5 },
                group: Group::Fc2,
                input: FeatureShape::Flat(128),
            },
            LayerSpec {
                kind: LayerKind::Dense {
                    inputs: 64,
                    outputs: 2,
                },
                group: Group::Out,
                input: FeatureShape::Flat(64),
            },
        ];
        for s in specs {
            assert_eq!(LayerSpec::parse(&s.render()).unwrap(), s);
        }
        assert!(LayerSpec::parse("dense group=FC1 input=10 in=11 out=3").is_err());
    }

    #[test]
    fn freeze_groups() {
        assert_eq!(
            FreezeConfig::new(FreezeMode::Fc3).trainable_groups(),
            vec![Group::Fc3, Group::Out]
        );
        let mut c = FreezeConfig::new(FreezeMode::Fc2Fc3);
        c.retrain_head = false;
        assert_eq!(c.trainable_groups(), vec![Group::Fc2, Group::Fc3]);
        assert_eq!(
            FreezeConfig::new(FreezeMode::None).trainable_groups().len(),
            5
        );
        assert_eq!(
            "fc1_fc2_fc3".parse::<FreezeMode>().unwrap(),
            FreezeMode::Fc1Fc2Fc3
        );
        assert!("fc4".parse::<FreezeMode>().is_err());
    }
}
