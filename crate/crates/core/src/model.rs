//! The assembled multi-task network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ContextPyramid, ContextPyramidConfig};
use crate::edge::{BackboneConfig, EdgeConfig, EdgeNet, EdgeOutput, ShallowFeatures, SharedBackbone, BACKBONE_STRIDE};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv, ConvSpec};
use crate::params::{GradMode, GroupId, ParamStore, Session};
use crate::pyramid::{DecoderInputs, Encoder, ResidualPyramid, ResidualPyramidConfig, ScaleRecord};
use crate::tensor::{Scalar, Tensor};

pub const BACKBONE_SHARED: &str = "backbone-shared";
pub const EDGE_SUBNET: &str = "edge-subnet";
pub const DISPARITY_BRANCH: &str = "disparity-branch";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub edge: EdgeConfig,
    /// Largest displacement searched by the correlation, in quarter-
    /// resolution pixels.
    pub max_disp: usize,
    /// Channels of the transformed left features.
    pub reduced_channels: usize,
    /// Channels of the fused matching representation.
    pub mixed_channels: usize,
    pub context_pyramid: ContextPyramidConfig,
    /// Overrides the context branch width (default: a quarter of
    /// `mixed_channels`).
    #[serde(default)]
    pub context_branch_channels: Option<usize>,
    pub pyramid: ResidualPyramidConfig,
    /// Feed edge features into the disparity branch and regularize with
    /// edge-aware smoothness. `false` gives the edge-free baseline.
    pub edge_cues: bool,
    /// Seeds parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Small network used by the tests and the convergence check.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                widths: [8, 12, 16, 16, 16],
                convs_per_stage: [1, 1, 2, 1, 1],
            },
            edge: EdgeConfig { side_channels: 4 },
            max_disp: 6,
            reduced_channels: 8,
            mixed_channels: 16,
            context_pyramid: "P-1_2_4_8".parse().expect("valid notation"),
            context_branch_channels: None,
            pyramid: ResidualPyramidConfig {
                scales: 4,
                skip_channels: 8,
                encoder_base: 16,
                encoder_max: 24,
                block_widths: [16, 16, 8],
            },
            edge_cues: true,
            init_seed: 0,
        }
    }

    /// Seven-scale network with a 40-pixel quarter-resolution search
    /// range and the `P-2_4_8_16` pyramid, at reduced channel widths.
    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                widths: [16, 32, 48, 64, 64],
                convs_per_stage: [2, 2, 3, 3, 3],
            },
            edge: EdgeConfig { side_channels: 8 },
            max_disp: 40,
            reduced_channels: 32,
            mixed_channels: 64,
            context_pyramid: "P-2_4_8_16".parse().expect("valid notation"),
            context_branch_channels: None,
            pyramid: ResidualPyramidConfig {
                scales: 7,
                skip_channels: 16,
                encoder_base: 48,
                encoder_max: 96,
                block_widths: [32, 32, 16],
            },
            edge_cues: true,
            init_seed: 0,
        }
    }

    /// `full` at VGG-16 backbone widths.
    pub fn full_width() -> Self {
        let mut c = Self::full();
        c.backbone.widths = [64, 128, 256, 512, 512];
        c.edge.side_channels = 16;
        c.reduced_channels = 64;
        c.mixed_channels = 128;
        c.pyramid.skip_channels = 32;
        c.pyramid.encoder_base = 128;
        c.pyramid.encoder_max = 512;
        c.pyramid.block_widths = [128, 64, 32];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            "full-width" => Ok(Self::full_width()),
            _ => Err(Error::Config(format!("unknown model preset `{name}` (toy, full, full-width)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pyramid.validate()?;
        if self.max_disp == 0 || self.reduced_channels == 0 || self.mixed_channels == 0 || self.edge.side_channels == 0 {
            return Err(Error::Config("max_disp and channel counts must be positive".into()));
        }
        if self.context_branch_channels == Some(0) {
            return Err(Error::Config("context branch channels must be positive".into()));
        }
        Ok(())
    }

    /// Input heights and widths must be multiples of this.
    pub fn extent_multiple(&self) -> usize {
        self.pyramid.extent_multiple().max(BACKBONE_STRIDE)
    }

    /// Smallest input width the correlation can handle.
    pub fn min_width(&self) -> usize {
        let q = 4 * (self.max_disp + 1);
        q.div_ceil(self.extent_multiple()) * self.extent_multiple()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.extent_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape("model", format!("input {h}x{w} must be a positive multiple of {m}")));
        }
        if w < self.min_width() {
            return Err(Error::shape(
                "model",
                format!("input width {w} is too small for max_disp {}", self.max_disp),
            ));
        }
        Ok(())
    }

    fn context_config(&self) -> ContextPyramidConfig {
        let mut c = self.context_pyramid.clone();
        if self.context_branch_channels.is_some() {
            c.branch_channels = self.context_branch_channels;
        }
        c
    }
}

/// Disparity branch: matching cost, scene prior, encoder, residual decoder.
#[derive(Clone, Debug)]
pub struct DisparityBranch {
    pub reduce: Conv,
    pub fuse: Conv,
    pub context: ContextPyramid,
    pub encoder: Encoder,
    pub pyramid: ResidualPyramid,
    pub max_disp: usize,
    pub edge_cues: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelGroups {
    pub shared: GroupId,
    pub edge: GroupId,
    pub disparity: GroupId,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Coarse to fine; the last map is at input resolution.
    pub disparities: Vec<Var>,
    pub records: Vec<ScaleRecord>,
    pub edge: EdgeOutput,
    pub shallow_left: ShallowFeatures,
    pub matching_cost: Var,
    pub mixed: Var,
    pub scene_prior: Var,
}

impl ModelOutput {
    pub fn disparity(&self) -> Var {
        *self.disparities.last().expect("at least one scale")
    }
}

/// Plain tensors from an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub disparity: Tensor<T>,
    pub edge_map: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct EdgeStereo<T = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub groups: ModelGroups,
    pub backbone: SharedBackbone,
    pub edge: EdgeNet,
    pub disparity: DisparityBranch,
}

impl<T: Scalar> EdgeStereo<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let groups = ModelGroups {
            shared: store.add_group(BACKBONE_SHARED),
            edge: store.add_group(EDGE_SUBNET),
            disparity: store.add_group(DISPARITY_BRANCH),
        };
        let backbone = SharedBackbone::new(&mut store, groups.shared, &config.backbone, &mut rng);
        let edge = EdgeNet::new(&mut store, groups.edge, &config.backbone, &config.edge, &mut rng);

        let g = groups.disparity;
        let feat = backbone.channels(2);
        let reduce = Conv::new(&mut store, g, "matching.reduce", ConvSpec::same(feat, config.reduced_channels, 3), &mut rng);
        let mut fused_in = config.reduced_channels + config.max_disp + 1;
        if config.edge_cues {
            fused_in += edge.feature_channels();
        }
        let fuse = Conv::new(&mut store, g, "matching.fuse", ConvSpec::same(fused_in, config.mixed_channels, 1), &mut rng);
        let context = ContextPyramid::new(&config.context_config(), config.mixed_channels, &mut store, g, &mut rng)?;
        let encoder = Encoder::new(
            &mut store,
            g,
            &config.pyramid,
            [backbone.channels(0), backbone.channels(1)],
            context.out_channels(),
            &mut rng,
        );
        let pyramid = ResidualPyramid::new(
            &mut store,
            g,
            &config.pyramid,
            config.edge_cues.then(|| edge.feature_channels()),
            &mut rng,
        );
        let disparity = DisparityBranch {
            reduce,
            fuse,
            context,
            encoder,
            pyramid,
            max_disp: config.max_disp,
            edge_cues: config.edge_cues,
        };
        Ok(EdgeStereo {
            config,
            store,
            groups,
            backbone,
            edge,
            disparity,
        })
    }

    /// The same network with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> EdgeStereo<U> {
        EdgeStereo {
            config: self.config.clone(),
            store: self.store.cast(),
            groups: self.groups,
            backbone: self.backbone.clone(),
            edge: self.edge.clone(),
            disparity: self.disparity.clone(),
        }
    }

    pub fn session(&self, mode: GradMode) -> Session<'_, T> {
        Session::new(&self.store, mode)
    }

    fn check_images(&self, s: &Session<'_, T>, left: Var, right: Var) -> Result<()> {
        let [_, c, h, w] = s.value(left).dims4()?;
        if s.shape(left) != s.shape(right) || c != 3 {
            return Err(Error::shape(
                "model",
                format!("left {:?} and right {:?} must be matching RGB batches", s.shape(left), s.shape(right)),
            ));
        }
        self.config.check_input(h, w)
    }

    /// Edge sub-network alone, on the left image.
    pub fn edge_forward(&self, s: &mut Session<'_, T>, left: Var) -> Result<EdgeOutput> {
        let shallow = self.backbone.forward(s, left)?;
        self.edge.hed_beta_forward(s, left, &shallow)
    }

    pub fn forward(&self, s: &mut Session<'_, T>, left: Var, right: Var) -> Result<ModelOutput> {
        self.check_images(s, left, right)?;
        let br = &self.disparity;
        let shallow_left = self.backbone.forward(s, left)?;
        let shallow_right = self.backbone.forward(s, right)?;
        let edge = self.edge.hed_beta_forward(s, left, &shallow_left)?;

        let fl = shallow_left.matching();
        let matching_cost = s.correlation1d(fl, shallow_right.matching(), br.max_disp)?;
        let reduced = br.reduce.forward(s, fl)?;
        let mut parts = vec![reduced, matching_cost];
        if br.edge_cues {
            let [_, _, qh, qw] = s.value(fl).dims4()?;
            parts.push(s.bilinear_resize(edge.edge_feature, qh, qw)?);
        }
        let hybrid = s.concat_channels(&parts)?;
        let mixed = br.fuse.forward(s, hybrid)?;
        let scene_prior = br.context.scene_prior(s, mixed)?;
        let encoder = br.encoder.forward(s, [shallow_left.taps[0], shallow_left.taps[1]], scene_prior)?;
        let decoded = br.pyramid.decode_pyramid(
            s,
            &encoder,
            DecoderInputs {
                left,
                right,
                edge: br.edge_cues.then_some((edge.edge_feature, edge.edge_map)),
            },
        )?;
        Ok(ModelOutput {
            disparities: decoded.disparities,
            records: decoded.records,
            edge,
            shallow_left,
            matching_cost,
            mixed,
            scene_prior,
        })
    }

    /// Full-resolution disparity and edge map without building gradients.
    pub fn predict(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Prediction<T>> {
        let mut s = self.session(GradMode::None);
        let l = s.constant(left.clone());
        let r = s.constant(right.clone());
        let out = self.forward(&mut s, l, r)?;
        Ok(Prediction {
            disparity: s.value(out.disparity()).clone(),
            edge_map: s.value(out.edge.edge_map).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
        let l = Tensor::from_fn(&[b, 3, h, w], |i| ((i * 31) % 97) as f32 / 97.0);
        let r = Tensor::from_fn(&[b, 3, h, w], |i| ((i * 17) % 89) as f32 / 89.0);
        (l, r)
    }

    #[test]
    fn toy_forward_shapes() {
        let m = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
        let (l, r) = images(2, 32, 64);
        let mut s = m.session(GradMode::None);
        let (lv, rv) = (s.constant(l), s.constant(r));
        let out = m.forward(&mut s, lv, rv).unwrap();
        assert_eq!(out.disparities.len(), 4);
        assert_eq!(s.shape(out.disparity()), &[2, 1, 32, 64]);
        assert_eq!(s.shape(out.disparities[0]), &[2, 1, 4, 8]);
        assert_eq!(s.shape(out.matching_cost), &[2, 7, 8, 16]);
        assert_eq!(s.shape(out.scene_prior), &[2, 32, 8, 16]);
        assert!(s.value(out.disparity()).data().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn rejects_bad_extents_and_mismatched_views() {
        let m = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
        assert!(m.predict(&images(1, 30, 64).0, &images(1, 30, 64).1).is_err());
        let mut s = m.session(GradMode::None);
        let a = s.constant(Tensor::zeros(&[1, 3, 32, 64]));
        let b = s.constant(Tensor::zeros(&[1, 3, 32, 48]));
        assert!(m.forward(&mut s, a, b).is_err());
    }

    #[test]
    fn edge_free_variant_has_narrower_fusion() {
        let mut c = ModelConfig::toy();
        let with = EdgeStereo::<f32>::new(c.clone()).unwrap();
        c.edge_cues = false;
        let without = EdgeStereo::<f32>::new(c).unwrap();
        assert_eq!(with.disparity.fuse.in_channels - without.disparity.fuse.in_channels, 20);
        let (l, r) = images(1, 32, 64);
        assert_eq!(without.predict(&l, &r).unwrap().disparity.shape(), &[1, 1, 32, 64]);
    }

    #[test]
    fn initialization_is_seeded() {
        let a = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
        let b = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
        assert!(a.store.params().iter().zip(b.store.params()).all(|(x, y)| x.value == y.value));
        let mut c = ModelConfig::toy();
        c.init_seed = 1;
        let c = EdgeStereo::<f32>::new(c).unwrap();
        assert!(a.store.params()[0].value != c.store.params()[0].value);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ModelConfig::full();
        let text = toml::to_string(&c).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
