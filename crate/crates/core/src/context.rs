//! Context pyramids: four parallel branches with growing receptive fields
//! whose outputs are concatenated with their input into a scene prior.
//!
//! Three branch families are supported, written in the usual short
//! notation: `C-7_5_3_1` (two stacked k×k convolutions per branch),
//! `P-2_4_8_16` (adaptive average pooling to n×n, 1×1 convolution,
//! bilinear upsampling) and `D-6_3_2_1` (3×3 convolution at dilation r,
//! then a 1×1 reduction).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv, ConvSpec};
use crate::params::{GroupId, ParamStore, Session};
use crate::tensor::Scalar;

pub const BRANCHES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PyramidKind {
    Convolution,
    Pooling,
    Dilation,
}

impl PyramidKind {
    fn letter(self) -> char {
        match self {
            PyramidKind::Convolution => 'C',
            PyramidKind::Pooling => 'P',
            PyramidKind::Dilation => 'D',
        }
    }
}

/// A context pyramid variant. `branch_params` are kernel sizes, pooled
/// output sizes or dilation rates, listed from the largest context scale
/// to the smallest.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContextPyramidConfig {
    pub kind: PyramidKind,
    pub branch_params: [usize; BRANCHES],
    /// Output channels per branch; `None` means a quarter of the input.
    pub branch_channels: Option<usize>,
}

impl ContextPyramidConfig {
    /// The eight variants compared in the original ablation.
    pub const NAMED: [&'static str; 8] = [
        "C-7_5_3_1",
        "C-9_7_5_3",
        "C-11_9_7_5",
        "P-1_2_4_8",
        "P-2_4_8_16",
        "D-6_3_2_1",
        "D-12_9_6_3",
        "D-24_18_12_6",
    ];

    pub fn with_branch_channels(mut self, channels: usize) -> Self {
        self.branch_channels = Some(channels);
        self
    }

    pub fn branch_channels_for(&self, input_channels: usize) -> usize {
        self.branch_channels.unwrap_or((input_channels / 4).max(1))
    }

    pub fn notation(&self) -> String {
        let params: Vec<String> = self.branch_params.iter().map(usize::to_string).collect();
        format!("{}-{}", self.kind.letter(), params.join("_"))
    }
}

impl fmt::Display for ContextPyramidConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.notation())
    }
}

impl FromStr for ContextPyramidConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::PyramidNotation {
            notation: s.to_string(),
            reason: reason.to_string(),
        };
        let (letter, rest) = s.trim().split_once('-').ok_or_else(|| bad("expected `<kind>-a_b_c_d`"))?;
        let kind = match letter {
            "C" | "c" => PyramidKind::Convolution,
            "P" | "p" => PyramidKind::Pooling,
            "D" | "d" => PyramidKind::Dilation,
            _ => return Err(bad("kind must be C, P or D")),
        };
        let values = rest
            .split('_')
            .map(|v| v.parse::<usize>().map_err(|_| bad("branch parameters must be integers")))
            .collect::<Result<Vec<_>>>()?;
        let branch_params: [usize; BRANCHES] = values
            .try_into()
            .map_err(|_| bad("exactly four branches are required"))?;
        if branch_params.contains(&0) {
            return Err(bad("branch parameters must be positive"));
        }
        // Largest context first: biggest kernel / smallest pooled size /
        // biggest dilation rate.
        let ordered = match kind {
            PyramidKind::Convolution | PyramidKind::Dilation => {
                branch_params.windows(2).all(|w| w[0] > w[1])
            }
            PyramidKind::Pooling => branch_params.windows(2).all(|w| w[0] < w[1]),
        };
        if !ordered {
            return Err(bad("branches must be strictly ordered from the largest context scale"));
        }
        if kind == PyramidKind::Convolution && branch_params.iter().any(|k| k % 2 == 0) {
            return Err(bad("convolution kernels must be odd to preserve extents"));
        }
        Ok(ContextPyramidConfig {
            kind,
            branch_params,
            branch_channels: None,
        })
    }
}

impl TryFrom<String> for ContextPyramidConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ContextPyramidConfig> for String {
    fn from(c: ContextPyramidConfig) -> String {
        c.notation()
    }
}

#[derive(Clone, Debug)]
pub enum ContextBranch {
    Convolution { first: Conv, second: Conv },
    Pooling { pooled: usize, project: Conv },
    Dilation { dilated: Conv, reduce: Conv },
}

/// Builds branch `index` of a pyramid over `in_channels`-channel input.
pub fn build_context_branch<T: Scalar>(
    config: &ContextPyramidConfig,
    index: usize,
    in_channels: usize,
    store: &mut ParamStore<T>,
    group: GroupId,
    rng: &mut impl Rng,
) -> Result<ContextBranch> {
    if index >= BRANCHES {
        return Err(Error::InvalidArgument(format!(
            "context branch index {index} out of 0..{BRANCHES}"
        )));
    }
    let p = config.branch_params[index];
    let out = config.branch_channels_for(in_channels);
    let name = format!("context.{}{index}", config.kind.letter());
    Ok(match config.kind {
        PyramidKind::Convolution => ContextBranch::Convolution {
            first: Conv::new(store, group, &format!("{name}.conv1"), ConvSpec::same(in_channels, out, p), rng),
            second: Conv::new(store, group, &format!("{name}.conv2"), ConvSpec::same(out, out, p), rng),
        },
        PyramidKind::Pooling => ContextBranch::Pooling {
            pooled: p,
            project: Conv::new(store, group, &format!("{name}.proj"), ConvSpec::same(in_channels, out, 1), rng),
        },
        PyramidKind::Dilation => ContextBranch::Dilation {
            dilated: Conv::new(
                store,
                group,
                &format!("{name}.dilated"),
                ConvSpec::same(in_channels, in_channels, 3).dilated(p),
                rng,
            ),
            reduce: Conv::new(store, group, &format!("{name}.reduce"), ConvSpec::same(in_channels, out, 1), rng),
        },
    })
}

impl ContextBranch {
    /// Output has the input's spatial extents.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, fm: Var) -> Result<Var> {
        match self {
            ContextBranch::Convolution { first, second } => {
                let y = first.forward(s, fm)?;
                second.forward(s, y)
            }
            ContextBranch::Pooling { pooled, project } => {
                let [_, _, h, w] = s.value(fm).dims4()?;
                let p = s.adaptive_avg_pool(fm, *pooled, *pooled)?;
                let y = project.forward(s, p)?;
                s.bilinear_resize(y, h, w)
            }
            ContextBranch::Dilation { dilated, reduce } => {
                let y = dilated.forward(s, fm)?;
                reduce.forward(s, y)
            }
        }
    }

    pub fn convs(&self) -> [&Conv; 2] {
        match self {
            ContextBranch::Convolution { first, second } => [first, second],
            ContextBranch::Pooling { project, .. } => [project, project],
            ContextBranch::Dilation { dilated, reduce } => [dilated, reduce],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContextPyramid {
    pub config: ContextPyramidConfig,
    pub branches: Vec<ContextBranch>,
    pub in_channels: usize,
    pub branch_channels: usize,
}

impl ContextPyramid {
    pub fn new<T: Scalar>(
        config: &ContextPyramidConfig,
        in_channels: usize,
        store: &mut ParamStore<T>,
        group: GroupId,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let branches = (0..BRANCHES)
            .map(|i| build_context_branch(config, i, in_channels, store, group, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ContextPyramid {
            config: config.clone(),
            branches,
            in_channels,
            branch_channels: config.branch_channels_for(in_channels),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + BRANCHES * self.branch_channels
    }

    /// `[fm, branch0, branch1, branch2, branch3]` along channels.
    pub fn scene_prior<T: Scalar>(&self, s: &mut Session<'_, T>, fm: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(BRANCHES + 1);
        parts.push(fm);
        for b in &self.branches {
            parts.push(b.forward(s, fm)?);
        }
        s.concat_channels(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GradMode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, GroupId, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let g = store.add_group("disparity-branch");
        (store, g, ChaCha8Rng::seed_from_u64(7))
    }

    #[test]
    fn notation_round_trip_and_validation() {
        for name in ContextPyramidConfig::NAMED {
            let c: ContextPyramidConfig = name.parse().unwrap();
            assert_eq!(c.to_string(), name);
        }
        for bad in ["P-16_8_4_2", "C-1_3_5_7", "D-6_3_2", "X-1_2_3_4", "P-0_1_2_3", "C-8_6_4_2", "P2_4_8_16"] {
            assert!(bad.parse::<ContextPyramidConfig>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&"D-12_9_6_3".parse::<ContextPyramidConfig>().unwrap()).unwrap();
        assert_eq!(json, "\"D-12_9_6_3\"");
    }

    #[test]
    fn branch_index_out_of_range() {
        let (mut store, g, mut rng) = setup();
        let c: ContextPyramidConfig = "P-1_2_4_8".parse().unwrap();
        assert!(build_context_branch(&c, 4, 8, &mut store, g, &mut rng).is_err());
    }

    #[test]
    fn global_pooling_branch_keeps_constants() {
        let (mut store, g, mut rng) = setup();
        let c: ContextPyramidConfig = "P-1_2_4_8".parse::<ContextPyramidConfig>().unwrap().with_branch_channels(1);
        let branch = build_context_branch(&c, 0, 1, &mut store, g, &mut rng).unwrap();
        let ContextBranch::Pooling { project, .. } = &branch else { panic!() };
        store.set_value(project.weight, Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let mut s = Session::new(&store, GradMode::None);
        let x = s.constant(Tensor::full(&[1, 1, 6, 10], 0.75));
        let y = branch.forward(&mut s, x).unwrap();
        assert_eq!(s.shape(y), &[1, 1, 6, 10]);
        assert!(s.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn unit_kernel_branch_is_identity() {
        let (mut store, g, mut rng) = setup();
        let c: ContextPyramidConfig = "C-7_5_3_1".parse::<ContextPyramidConfig>().unwrap().with_branch_channels(2);
        let branch = build_context_branch(&c, 3, 2, &mut store, g, &mut rng).unwrap();
        let eye = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for conv in branch.convs() {
            assert_eq!(conv.kernel, 1);
            store.set_value(conv.weight, eye.clone()).unwrap();
        }
        let mut s = Session::new(&store, GradMode::None);
        let input = Tensor::from_fn(&[1, 2, 3, 4], |i| i as f64 * 0.25);
        let x = s.constant(input.clone());
        let y = branch.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y), &input);
    }

    #[test]
    fn dilated_branch_preserves_extents() {
        let (mut store, g, mut rng) = setup();
        let c: ContextPyramidConfig = "D-6_3_2_1".parse().unwrap();
        let branch = build_context_branch(&c, 1, 4, &mut store, g, &mut rng).unwrap();
        let ContextBranch::Dilation { dilated, .. } = &branch else { panic!() };
        assert_eq!(dilated.params.pad, 3);
        let mut s = Session::new(&store, GradMode::None);
        let x = s.constant(Tensor::ones(&[1, 4, 7, 7]));
        let y = branch.forward(&mut s, x).unwrap();
        assert_eq!(s.shape(y), &[1, 1, 7, 7]);
    }

    #[test]
    fn prior_layout_and_zero_branches() {
        let (mut store, g, mut rng) = setup();
        let c: ContextPyramidConfig = "P-2_4_8_16".parse().unwrap();
        let pyramid = ContextPyramid::new(&c, 128, &mut store, g, &mut rng).unwrap();
        assert_eq!(pyramid.branch_channels, 32);
        assert_eq!(pyramid.out_channels(), 256);

        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut s = Session::new(&store, GradMode::None);
        let input = Tensor::from_fn(&[1, 128, 16, 16], |i| (i % 17) as f64);
        let fm = s.constant(input.clone());
        let prior = pyramid.scene_prior(&mut s, fm).unwrap();
        let v = s.value(prior);
        assert_eq!(v.shape(), &[1, 256, 16, 16]);
        assert_eq!(&v.data()[..input.len()], input.data());
        assert!(v.data()[input.len()..].iter().all(|&x| x == 0.0));
    }
}
