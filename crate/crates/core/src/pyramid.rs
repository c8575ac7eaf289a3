//! Multi-scale encoder and the coarse-to-fine residual decoder.
//!
//! Scale `s` has resolution `1/2^s`. The coarsest scale regresses a full
//! disparity map; every finer scale regresses a residual that is added to
//! the upsampled estimate from the scale below.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{forward_all, Conv, ConvSpec};
use crate::params::{GroupId, ParamStore, Session};
use crate::tensor::Scalar;

/// Scale at which the scene prior enters the encoder.
pub const PRIOR_SCALE: usize = 2;

/// Channels of the geometric inputs at a refined scale: left, right,
/// upsampled disparity, warped right, photometric error.
pub const GEOMETRY_CHANNELS: usize = 3 + 3 + 1 + 3 + 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualPyramidConfig {
    /// Number of scales `S`; the coarsest has resolution `1/2^(S-1)`.
    pub scales: usize,
    /// Channels of the adapters on the full- and half-resolution
    /// backbone features.
    pub skip_channels: usize,
    /// Encoder channels at quarter resolution; doubled per further scale.
    pub encoder_base: usize,
    /// Upper bound on encoder channels.
    pub encoder_max: usize,
    /// Hidden widths of every estimation block.
    pub block_widths: [usize; 3],
}

impl ResidualPyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales <= PRIOR_SCALE {
            return Err(Error::Config(format!(
                "the residual pyramid needs more than {PRIOR_SCALE} scales, got {}",
                self.scales
            )));
        }
        if self.skip_channels == 0 || self.encoder_base == 0 || self.encoder_max == 0 || self.block_widths.contains(&0) {
            return Err(Error::Config("residual pyramid widths must be positive".into()));
        }
        Ok(())
    }

    /// Input extents must be divisible by this.
    pub fn extent_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }

    pub fn encoder_width(&self, scale: usize) -> usize {
        match scale {
            0 | 1 => self.skip_channels,
            s => (self.encoder_base << (s - PRIOR_SCALE)).min(self.encoder_max),
        }
    }
}

/// Four 3×3 convolutions; the last one outputs a single unclamped channel.
#[derive(Clone, Debug)]
pub struct EstimationBlock {
    pub convs: [Conv; 4],
}

impl EstimationBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: GroupId,
        name: &str,
        in_channels: usize,
        widths: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let [a, b, c] = widths;
        let mut conv = |i: usize, spec: ConvSpec| Conv::new(store, group, &format!("{name}.conv{i}"), spec, rng);
        EstimationBlock {
            convs: [
                conv(1, ConvSpec::same(in_channels, a, 3)),
                conv(2, ConvSpec::same(a, b, 3)),
                conv(3, ConvSpec::same(b, c, 3)),
                conv(4, ConvSpec::same(c, 1, 3).linear()),
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        forward_all(&self.convs, s, x)
    }
}

/// Encoder features for every scale, finest first.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    /// Adapters on the full- and half-resolution backbone features.
    pub skips: [Conv; 2],
    /// Quarter-resolution convolution on the scene prior.
    pub entry: Conv,
    /// Stride-2 then stride-1 convolution for each coarser scale.
    pub downs: Vec<[Conv; 2]>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: GroupId,
        config: &ResidualPyramidConfig,
        tap_channels: [usize; 2],
        prior_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let skips = [0, 1].map(|k| {
            Conv::new(
                store,
                group,
                &format!("encoder.skip{k}"),
                ConvSpec::same(tap_channels[k], config.skip_channels, 3),
                rng,
            )
        });
        let entry = Conv::new(
            store,
            group,
            "encoder.entry",
            ConvSpec::same(prior_channels, config.encoder_width(PRIOR_SCALE), 3),
            rng,
        );
        let downs = (PRIOR_SCALE + 1..config.scales)
            .map(|s| {
                let (cin, cout) = (config.encoder_width(s - 1), config.encoder_width(s));
                [
                    Conv::new(store, group, &format!("encoder.scale{s}.down"), ConvSpec::same(cin, cout, 3).stride(2), rng),
                    Conv::new(store, group, &format!("encoder.scale{s}.conv"), ConvSpec::same(cout, cout, 3), rng),
                ]
            })
            .collect();
        Encoder { skips, entry, downs }
    }

    pub fn scales(&self) -> usize {
        PRIOR_SCALE + 1 + self.downs.len()
    }

    /// `taps` are the full- and half-resolution backbone features of the
    /// left image; `prior` is at quarter resolution.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, taps: [Var; 2], prior: Var) -> Result<EncoderState> {
        let mut features = Vec::with_capacity(self.scales());
        for (adapter, tap) in self.skips.iter().zip(taps) {
            features.push(adapter.forward(s, tap)?);
        }
        let mut x = self.entry.forward(s, prior)?;
        features.push(x);
        for pair in &self.downs {
            x = forward_all(pair, s, x)?;
            features.push(x);
        }
        Ok(EncoderState { features })
    }
}

/// What the decoder sees besides encoder features.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInputs {
    pub left: Var,
    pub right: Var,
    /// `(edge feature, edge map)` at full resolution, if edge cues are used.
    pub edge: Option<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleRecord {
    pub scale: usize,
    /// `2u(d_{s+1})`, absent at the coarsest scale.
    pub upsampled: Option<Var>,
    /// Raw estimation block output: a residual, or the full map at the
    /// coarsest scale.
    pub residual: Var,
    pub disparity: Var,
}

#[derive(Clone, Debug)]
pub struct PyramidOutput {
    /// Disparity maps ordered coarse to fine; the last is full resolution.
    pub disparities: Vec<Var>,
    /// Same order as `disparities`.
    pub records: Vec<ScaleRecord>,
}

#[derive(Clone, Debug)]
pub struct ResidualPyramid {
    /// Indexed by scale, finest first.
    pub blocks: Vec<EstimationBlock>,
    pub edge_channels: usize,
}

impl ResidualPyramid {
    /// `edge_channels` is the edge feature width, or `None` when edge cues
    /// are not part of the aggregated input.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: GroupId,
        config: &ResidualPyramidConfig,
        edge_channels: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let edge = edge_channels.map_or(0, |c| c + 1);
        let blocks = (0..config.scales)
            .map(|s| {
                let geometry = if s + 1 < config.scales { GEOMETRY_CHANNELS } else { 0 };
                EstimationBlock::new(
                    store,
                    group,
                    &format!("decoder.scale{s}"),
                    config.encoder_width(s) + edge + geometry,
                    config.block_widths,
                    rng,
                )
            })
            .collect();
        ResidualPyramid {
            blocks,
            edge_channels: edge,
        }
    }

    pub fn decode_pyramid<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        encoder: &EncoderState,
        inputs: DecoderInputs,
    ) -> Result<PyramidOutput> {
        let scales = self.blocks.len();
        if encoder.features.len() != scales {
            return Err(Error::InvalidArgument(format!(
                "encoder provides {} scales, decoder expects {scales}",
                encoder.features.len()
            )));
        }
        if inputs.edge.is_some() != (self.edge_channels > 0) {
            return Err(Error::InvalidArgument("edge inputs do not match the decoder configuration".into()));
        }
        let mut disparities = Vec::with_capacity(scales);
        let mut records = Vec::with_capacity(scales);
        let mut previous: Option<Var> = None;
        for scale in (0..scales).rev() {
            let enc = encoder.features[scale];
            let [_, _, h, w] = s.value(enc).dims4()?;
            let mut parts = vec![enc];
            if let Some((feature, map)) = inputs.edge {
                parts.push(s.bilinear_resize(feature, h, w)?);
                parts.push(s.bilinear_resize(map, h, w)?);
            }
            let upsampled = match previous {
                Some(coarse) => {
                    let up = s.upsample_disparity(coarse, h, w)?;
                    let left = s.bilinear_resize(inputs.left, h, w)?;
                    let right = s.bilinear_resize(inputs.right, h, w)?;
                    let warped = s.warp_right_to_left(right, up)?;
                    let error = s.error_map(left, warped)?;
                    parts.extend([left, right, up, warped, error]);
                    Some(up)
                }
                None => None,
            };
            let aggregated = s.concat_channels(&parts)?;
            let residual = self.blocks[scale].forward(s, aggregated)?;
            let disparity = match upsampled {
                Some(up) => s.refine_disparity(up, residual)?,
                None => s.relu(residual)?,
            };
            records.push(ScaleRecord {
                scale,
                upsampled,
                residual,
                disparity,
            });
            disparities.push(disparity);
            previous = Some(disparity);
        }
        Ok(PyramidOutput { disparities, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GradMode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ResidualPyramidConfig {
        ResidualPyramidConfig {
            scales: 4,
            skip_channels: 3,
            encoder_base: 4,
            encoder_max: 6,
            block_widths: [4, 4, 4],
        }
    }

    #[test]
    fn widths_and_validation() {
        let c = config();
        assert_eq!((0..4).map(|s| c.encoder_width(s)).collect::<Vec<_>>(), [3, 3, 4, 6]);
        assert_eq!(c.extent_multiple(), 8);
        assert!(ResidualPyramidConfig { scales: 2, ..c }.validate().is_err());
    }

    #[test]
    fn zero_block_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let g = store.add_group("g");
        let block = EstimationBlock::new(&mut store, g, "b", 5, [3, 3, 3], &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut s = Session::new(&store, GradMode::None);
        let x = s.constant(Tensor::from_fn(&[1, 5, 4, 6], |i| i as f64));
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.shape(y), &[1, 1, 4, 6]);
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_builds_every_scale_and_obeys_the_composition() {
        let c = config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let g = store.add_group("g");
        let enc = Encoder::new(&mut store, g, &c, [2, 2], 5, &mut rng);
        let dec = ResidualPyramid::new(&mut store, g, &c, Some(4), &mut rng);
        let mut s = Session::new(&store, GradMode::None);
        let t0 = s.constant(Tensor::from_fn(&[1, 2, 16, 24], |i| (i % 5) as f64 * 0.1));
        let t1 = s.constant(Tensor::from_fn(&[1, 2, 8, 12], |i| (i % 3) as f64 * 0.1));
        let prior = s.constant(Tensor::from_fn(&[1, 5, 4, 6], |i| (i % 7) as f64 * 0.1));
        let state = enc.forward(&mut s, [t0, t1], prior).unwrap();
        assert_eq!(s.shape(state.features[3]), &[1, 6, 2, 3]);
        let left = s.constant(Tensor::from_fn(&[1, 3, 16, 24], |i| (i % 11) as f64 / 11.0));
        let right = s.constant(Tensor::from_fn(&[1, 3, 16, 24], |i| (i % 13) as f64 / 13.0));
        let feature = s.constant(Tensor::full(&[1, 4, 16, 24], 0.2));
        let map = s.constant(Tensor::full(&[1, 1, 16, 24], 0.5));
        let out = dec
            .decode_pyramid(&mut s, &state, DecoderInputs { left, right, edge: Some((feature, map)) })
            .unwrap();
        let shapes: Vec<_> = out.disparities.iter().map(|&d| s.shape(d).to_vec()).collect();
        assert_eq!(shapes, [vec![1, 1, 2, 3], vec![1, 1, 4, 6], vec![1, 1, 8, 12], vec![1, 1, 16, 24]]);
        for r in &out.records {
            let d = s.value(r.disparity);
            assert!(d.data().iter().all(|&v| v >= 0.0));
            if let Some(up) = r.upsampled {
                let expect = s.value(up).zip_map(s.value(r.residual), |a, b| (a + b).max(0.0)).unwrap();
                assert_eq!(&expect, d);
            }
        }
        assert!(dec.decode_pyramid(&mut s, &state, DecoderInputs { left, right, edge: None }).is_err());
    }
}
