//! Layered synthetic stereograms with exact ground truth.
//!
//! A scene is a textured background plus fronto-parallel layers
//! (rectangles and ellipses), each at its own integer disparity. Textures
//! live in left-view coordinates, so the right view samples the same
//! texels shifted by each layer's disparity and the two views agree
//! exactly wherever a pixel is visible in both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disparity steps larger than this are labelled as edges.
pub const EDGE_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    /// Per-pixel noise smoothed by one 3×3 box pass, over a per-layer
    /// base colour.
    ValueNoise,
    /// Sparse random dots on a per-layer base colour.
    RandomDot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereogramParams {
    pub height: usize,
    pub width: usize,
    /// Largest layer disparity, in pixels; must be below `width / 4`.
    pub d_max: u32,
    pub n_layers: usize,
    pub texture: Texture,
    /// Background disparity. `None` draws it from `0..=d_max/4`, or uses 0
    /// for a background-only scene.
    #[serde(default)]
    pub background_disparity: Option<u32>,
}

impl StereogramParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("stereogram extents must be positive".into()));
        }
        if self.d_max as usize * 4 >= self.width {
            return Err(Error::InvalidArgument(format!(
                "d_max {} must be below a quarter of the width {}",
                self.d_max, self.width
            )));
        }
        let bg = self.background_disparity.unwrap_or(0);
        if bg > self.d_max {
            return Err(Error::InvalidArgument("background disparity exceeds d_max".into()));
        }
        if self.n_layers > (self.d_max - bg) as usize {
            return Err(Error::InvalidArgument(format!(
                "{} layers need distinct disparities in ({bg}, {}]",
                self.n_layers, self.d_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
}

impl Shape {
    /// Whether the pixel centre `(x, y)` (left-view coordinates) is inside.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
        }
    }
}

/// RGB texels over `height × span`, where `span = width + d_max`.
#[derive(Clone, Debug)]
struct TextureMap {
    span: usize,
    texels: Vec<[f32; 3]>,
}

impl TextureMap {
    fn generate(kind: Texture, height: usize, span: usize, rng: &mut impl Rng) -> Self {
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let n = height * span;
        let texels = match kind {
            Texture::ValueNoise => {
                let raw: Vec<[f32; 3]> = (0..n)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-1.0f32..1.0)))
                    .collect();
                let contrast = rng.random_range(0.3f32..0.6);
                (0..n)
                    .map(|i| {
                        let (y, x) = ((i / span) as isize, (i % span) as isize);
                        let mut acc = [0.0f32; 3];
                        let mut count = 0.0;
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                let (yy, xx) = (y + dy, x + dx);
                                if yy >= 0 && xx >= 0 && (yy as usize) < height && (xx as usize) < span {
                                    let t = raw[yy as usize * span + xx as usize];
                                    for c in 0..3 {
                                        acc[c] += t[c];
                                    }
                                    count += 1.0;
                                }
                            }
                        }
                        // one box pass shrinks the spread by about 3x
                        std::array::from_fn(|c| (base[c] + 3.0 * contrast * acc[c] / count).clamp(0.0, 1.0))
                    })
                    .collect()
            }
            Texture::RandomDot => {
                let density = rng.random_range(0.2..0.5);
                let dot: [f32; 3] = std::array::from_fn(|c| 1.0 - base[c]);
                (0..n).map(|_| if rng.random_bool(density) { dot } else { base }).collect()
            }
        };
        TextureMap { span, texels }
    }

    fn at(&self, y: usize, x: usize) -> [f32; 3] {
        self.texels[y * self.span + x]
    }
}

#[derive(Clone, Debug)]
struct Layer {
    shape: Option<Shape>,
    disparity: u32,
    texture: TextureMap,
}

/// A scene ready for rendering. Layers are ordered far to near; the
/// background is layer 0 and covers everything.
#[derive(Clone, Debug)]
pub struct Scene {
    height: usize,
    width: usize,
    layers: Vec<Layer>,
}

impl Scene {
    pub fn random(params: &StereogramParams, rng: &mut impl Rng) -> Result<Self> {
        params.validate()?;
        let (h, w) = (params.height, params.width);
        let span = w + params.d_max as usize + 1;
        let bg = match params.background_disparity {
            Some(d) => d,
            None if params.n_layers == 0 => 0,
            None => {
                let hi = (params.d_max / 4).min(params.d_max - params.n_layers as u32);
                rng.random_range(0..=hi)
            }
        };
        let mut disparities: Vec<u32> = (bg + 1..=params.d_max).collect();
        // partial Fisher-Yates for n distinct values
        for i in 0..params.n_layers {
            let j = rng.random_range(i..disparities.len());
            disparities.swap(i, j);
        }
        disparities.truncate(params.n_layers);
        disparities.sort_unstable();

        let mut layers = vec![Layer {
            shape: None,
            disparity: bg,
            texture: TextureMap::generate(params.texture, h, span, rng),
        }];
        for d in disparities {
            let (fw, fh) = (w as f32, h as f32);
            let (sw, sh) = (rng.random_range(0.2..0.6) * fw, rng.random_range(0.25..0.7) * fh);
            let (cx, cy) = (rng.random_range(0.0..fw), rng.random_range(0.0..fh));
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    x0: cx - sw / 2.0,
                    y0: cy - sh / 2.0,
                    x1: cx + sw / 2.0,
                    y1: cy + sh / 2.0,
                }
            } else {
                Shape::Ellipse {
                    cx,
                    cy,
                    rx: sw / 2.0,
                    ry: sh / 2.0,
                }
            };
            layers.push(Layer {
                shape: Some(shape),
                disparity: d,
                texture: TextureMap::generate(params.texture, h, span, rng),
            });
        }
        Ok(Scene {
            height: h,
            width: w,
            layers,
        })
    }

    /// Index of the nearest layer covering left-view position `(x, y)`.
    fn topmost_left(&self, x: usize, y: usize) -> usize {
        self.topmost(|_| x as f32 + 0.5, y)
    }

    /// Index of the nearest layer visible at right-view column `x`.
    fn topmost_right(&self, x: usize, y: usize) -> usize {
        self.topmost(|layer| (x + layer.disparity as usize) as f32 + 0.5, y)
    }

    fn topmost(&self, left_x: impl Fn(&Layer) -> f32, y: usize) -> usize {
        let yc = y as f32 + 0.5;
        (1..self.layers.len())
            .rev()
            .find(|&k| {
                let layer = &self.layers[k];
                layer.shape.is_some_and(|s| s.contains(left_x(layer), yc))
            })
            .unwrap_or(0)
    }

    pub fn render(&self) -> StereoSample {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut left = vec![0.0f32; 3 * plane];
        let mut right = vec![0.0f32; 3 * plane];
        let mut disparity = vec![0.0f32; plane];
        let mut valid = vec![0.0f32; plane];
        let mut right_owner = vec![0usize; plane];
        for y in 0..h {
            for x in 0..w {
                let k = self.topmost_right(x, y);
                right_owner[y * w + x] = k;
                let layer = &self.layers[k];
                let t = layer.texture.at(y, x + layer.disparity as usize);
                for c in 0..3 {
                    right[c * plane + y * w + x] = t[c];
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let k = self.topmost_left(x, y);
                let layer = &self.layers[k];
                let d = layer.disparity as usize;
                let t = layer.texture.at(y, x);
                for c in 0..3 {
                    left[c * plane + y * w + x] = t[c];
                }
                disparity[y * w + x] = d as f32;
                if x >= d && right_owner[y * w + x - d] == k {
                    valid[y * w + x] = 1.0;
                }
            }
        }
        let disparity = Tensor::new(&[1, h, w], disparity).expect("extents");
        let edges = disparity_edges(&disparity);
        StereoSample {
            left: Tensor::new(&[3, h, w], left).expect("extents"),
            right: Tensor::new(&[3, h, w], right).expect("extents"),
            disparity,
            valid: Tensor::new(&[1, h, w], valid).expect("extents"),
            edges,
        }
    }
}

/// 1 where the forward difference along x or y exceeds [`EDGE_THRESHOLD`].
pub fn disparity_edges(disparity: &Tensor<f32>) -> Tensor<f32> {
    let shape = disparity.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let d = disparity.data();
    Tensor::from_fn(shape, |i| {
        let (y, x) = ((i / w) % h, i % w);
        let dx = x + 1 < w && (d[i + 1] - d[i]).abs() > EDGE_THRESHOLD;
        let dy = y + 1 < h && (d[i + w] - d[i]).abs() > EDGE_THRESHOLD;
        if dx || dy {
            1.0
        } else {
            0.0
        }
    })
}

pub fn generate_stereogram(seed: u64, params: &StereogramParams) -> Result<StereoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Scene::random(params, &mut rng)?.render())
}

/// Parameters for a whole synthetic dataset; each sample draws its layer
/// count from `layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub d_max: u32,
    pub layers: [usize; 2],
    pub texture: Texture,
}

impl GeneratorConfig {
    pub fn toy() -> Self {
        GeneratorConfig {
            height: 32,
            width: 64,
            d_max: 8,
            layers: [1, 3],
            texture: Texture::ValueNoise,
        }
    }

    /// Sample `index` of the dataset for `seed`; independent of how many
    /// other samples are generated.
    pub fn sample(&self, seed: u64, index: usize) -> Result<StereoSample> {
        if self.layers[0] > self.layers[1] {
            return Err(Error::InvalidArgument("layer range is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let params = StereogramParams {
            height: self.height,
            width: self.width,
            d_max: self.d_max,
            n_layers: rng.random_range(self.layers[0]..=self.layers[1]),
            texture: self.texture,
            background_disparity: None,
        };
        Ok(Scene::random(&params, &mut rng)?.render())
    }
}
