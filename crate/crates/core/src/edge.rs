//! The shared VGG-style backbone and the HED-style edge sub-network.
//!
//! The backbone has five stages separated by 2×2 average pooling. The
//! first three stages are shared by both sub-networks; the last two belong
//! to the edge sub-network. Every stage feeds a side branch whose output is
//! upsampled to the input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{forward_all, Conv, ConvSpec};
use crate::params::{GroupId, ParamStore, Session};
use crate::tensor::Scalar;

pub const STAGES: usize = 5;
pub const SHARED_STAGES: usize = 3;

/// Total spatial reduction of the backbone.
pub const BACKBONE_STRIDE: usize = 1 << (STAGES - 1);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of each stage.
    pub widths: [usize; STAGES],
    /// Number of 3×3 convolutions in each stage.
    pub convs_per_stage: [usize; STAGES],
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.convs_per_stage.contains(&0) {
            return Err(Error::Config("backbone stages need at least one channel and one convolution".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    /// Channels of the two convolutions in each side branch.
    pub side_channels: usize,
}

fn build_stage<T: Scalar>(
    store: &mut ParamStore<T>,
    group: GroupId,
    stage: usize,
    in_channels: usize,
    config: &BackboneConfig,
    rng: &mut impl Rng,
) -> Vec<Conv> {
    let width = config.widths[stage];
    (0..config.convs_per_stage[stage])
        .map(|i| {
            let cin = if i == 0 { in_channels } else { width };
            Conv::new(store, group, &format!("backbone.stage{}.conv{}", stage + 1, i + 1), ConvSpec::same(cin, width, 3), rng)
        })
        .collect()
}

/// Outputs of the three shared stages, at 1, 1/2 and 1/4 resolution.
#[derive(Clone, Copy, Debug)]
pub struct ShallowFeatures {
    pub taps: [Var; SHARED_STAGES],
}

impl ShallowFeatures {
    /// The 1/4-resolution features used for matching.
    pub fn matching(&self) -> Var {
        self.taps[SHARED_STAGES - 1]
    }
}

/// Stages 1–3. Shared between the disparity and edge sub-networks.
#[derive(Clone, Debug)]
pub struct SharedBackbone {
    pub stages: Vec<Vec<Conv>>,
    pub group: GroupId,
}

impl SharedBackbone {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: GroupId,
        config: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut cin = 3;
        let stages = (0..SHARED_STAGES)
            .map(|k| {
                let s = build_stage(store, group, k, cin, config, rng);
                cin = config.widths[k];
                s
            })
            .collect();
        SharedBackbone { stages, group }
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.stages[stage].last().map_or(0, |c| c.out_channels)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<ShallowFeatures> {
        let [_, c, h, w] = s.value(image).dims4()?;
        if c != 3 {
            return Err(Error::shape("backbone", format!("expected 3 input channels, got {c}")));
        }
        if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::shape(
                "backbone",
                format!("input {h}x{w} is not divisible by {BACKBONE_STRIDE}"),
            ));
        }
        let mut x = image;
        let mut taps = [image; SHARED_STAGES];
        for (k, stage) in self.stages.iter().enumerate() {
            if k > 0 {
                x = s.avg_pool(x, 2, 2)?;
            }
            x = forward_all(stage, s, x)?;
            taps[k] = x;
        }
        Ok(ShallowFeatures { taps })
    }
}

#[derive(Clone, Debug)]
pub struct SideBranch {
    pub convs: [Conv; 2],
    pub classifier: Conv,
}

/// Edge probabilities plus the features the disparity branch consumes.
#[derive(Clone, Debug)]
pub struct EdgeOutput {
    /// Fused edge probability, `[B,1,H,W]`.
    pub edge_map: Var,
    /// Concatenated upsampled side features, `[B,5*side_channels,H,W]`.
    pub edge_feature: Var,
    /// Per-stage edge probabilities, each `[B,1,H,W]`.
    pub side_maps: Vec<Var>,
}

/// Stages 4–5 plus the side branches and the fusion layer.
#[derive(Clone, Debug)]
pub struct EdgeNet {
    pub deep_stages: Vec<Vec<Conv>>,
    pub sides: Vec<SideBranch>,
    pub fuse: Conv,
    pub group: GroupId,
    pub side_channels: usize,
}

impl EdgeNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: GroupId,
        backbone: &BackboneConfig,
        config: &EdgeConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let deep_stages = (SHARED_STAGES..STAGES)
            .map(|k| build_stage(store, group, k, backbone.widths[k - 1], backbone, rng))
            .collect();
        let sc = config.side_channels;
        let sides = (0..STAGES)
            .map(|k| {
                let name = format!("edge.side{}", k + 1);
                SideBranch {
                    convs: [
                        Conv::new(store, group, &format!("{name}.conv1"), ConvSpec::same(backbone.widths[k], sc, 3), rng),
                        Conv::new(store, group, &format!("{name}.conv2"), ConvSpec::same(sc, sc, 3), rng),
                    ],
                    classifier: Conv::new(store, group, &format!("{name}.score"), ConvSpec::same(sc, 1, 1).linear(), rng),
                }
            })
            .collect();
        let fuse = Conv::new(store, group, "edge.fuse", ConvSpec::same(STAGES, 1, 1).linear(), rng);
        EdgeNet {
            deep_stages,
            sides,
            fuse,
            group,
            side_channels: sc,
        }
    }

    pub fn feature_channels(&self) -> usize {
        STAGES * self.side_channels
    }

    /// Runs the edge network on the left image, reusing its shallow
    /// backbone features.
    pub fn hed_beta_forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        image: Var,
        shallow: &ShallowFeatures,
    ) -> Result<EdgeOutput> {
        let [_, _, h, w] = s.value(image).dims4()?;
        let mut taps: Vec<Var> = shallow.taps.to_vec();
        let mut x = shallow.matching();
        for stage in &self.deep_stages {
            x = s.avg_pool(x, 2, 2)?;
            x = forward_all(stage, s, x)?;
            taps.push(x);
        }

        let mut features = Vec::with_capacity(STAGES);
        let mut side_maps = Vec::with_capacity(STAGES);
        for (side, &tap) in self.sides.iter().zip(&taps) {
            let f = forward_all(&side.convs, s, tap)?;
            let f = s.bilinear_resize(f, h, w)?;
            let logit = side.classifier.forward(s, f)?;
            side_maps.push(s.sigmoid(logit)?);
            features.push(f);
        }
        let edge_feature = s.concat_channels(&features)?;
        let stacked = s.concat_channels(&side_maps)?;
        let fused = self.fuse.forward(s, stacked)?;
        let edge_map = s.sigmoid(fused)?;
        Ok(EdgeOutput {
            edge_map,
            edge_feature,
            side_maps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GradMode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore<f32>, SharedBackbone, EdgeNet) {
        let cfg = BackboneConfig {
            widths: [4, 4, 6, 6, 6],
            convs_per_stage: [1, 1, 2, 1, 1],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let shared = store.add_group("backbone-shared");
        let edge = store.add_group("edge-subnet");
        let bb = SharedBackbone::new(&mut store, shared, &cfg, &mut rng);
        let en = EdgeNet::new(&mut store, edge, &cfg, &EdgeConfig { side_channels: 3 }, &mut rng);
        (store, bb, en)
    }

    #[test]
    fn output_shapes_and_ranges() {
        let (store, bb, en) = tiny();
        let mut s = Session::new(&store, GradMode::None);
        let img = s.constant(Tensor::from_fn(&[2, 3, 32, 48], |i| ((i * 7) % 11) as f32 / 11.0));
        let shallow = bb.forward(&mut s, img).unwrap();
        assert_eq!(s.shape(shallow.taps[1]), &[2, 4, 16, 24]);
        assert_eq!(s.shape(shallow.matching()), &[2, 6, 8, 12]);
        let out = en.hed_beta_forward(&mut s, img, &shallow).unwrap();
        assert_eq!(s.shape(out.edge_map), &[2, 1, 32, 48]);
        assert_eq!(s.shape(out.edge_feature), &[2, 15, 32, 48]);
        assert_eq!(out.side_maps.len(), STAGES);
        assert!(s.value(out.edge_map).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let (store, bb, _) = tiny();
        let mut s = Session::new(&store, GradMode::None);
        let img = s.constant(Tensor::zeros(&[1, 3, 20, 32]));
        assert!(bb.forward(&mut s, img).is_err());
    }

    #[test]
    fn parameter_groups_partition_the_backbone() {
        let (store, bb, en) = tiny();
        let shared = store.group(bb.group);
        assert_eq!(shared.name, "backbone-shared");
        assert_eq!(shared.params.len(), 2 * 4);
        assert!(store.params()[store.group(en.group).params[0].index()].name.starts_with("backbone.stage4"));
    }
}
