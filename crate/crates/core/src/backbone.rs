//! Strided convolutional feature extractor producing the `H × W × C` map that
//! the decoders attend over.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::GrayImage;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeometry};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// `(out_channels, stride)` per 3×3 conv + ReLU stage.
    pub stages: Vec<Stage>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Append one-hot row and column indicator channels to the feature map.
    #[serde(default)]
    pub position_channels: bool,
    /// Shift and scale each image to zero mean and unit variance first.
    #[serde(default)]
    pub standardize: bool,
}

fn default_kernel() -> usize {
    3
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::from_stages(&[(8, 2), (16, 2), (32, 2)])
    }
}

impl BackboneConfig {
    pub fn from_stages(stages: &[(usize, usize)]) -> Self {
        Self {
            stages: stages
                .iter()
                .map(|&(channels, stride)| Stage { channels, stride })
                .collect(),
            kernel_size: 3,
            position_channels: false,
            standardize: false,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn validate(&self, img_h: usize, img_w: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.kernel_size == 0 || self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::Config("backbone channels, strides and kernel size must be positive".into()));
        }
        let s = self.total_stride();
        if img_h % s != 0 || img_w % s != 0 {
            return Err(Error::Config(format!(
                "image extent {img_w}×{img_h} is not divisible by total backbone stride {s}"
            )));
        }
        Ok(())
    }

    /// `(H, W, C)` of the feature map for an `img_h × img_w` input.
    pub fn output_shape(&self, img_h: usize, img_w: usize) -> (usize, usize, usize) {
        let s = self.total_stride();
        let (h, w) = (img_h / s, img_w / s);
        let conv_c = self.stages.last().map_or(0, |st| st.channels);
        let c = if self.position_channels { conv_c + h + w } else { conv_c };
        (h, w, c)
    }

    fn geometries(&self, img_h: usize, img_w: usize) -> Vec<ConvGeometry> {
        let (mut h, mut w, mut c) = (img_h, img_w, 1);
        self.stages
            .iter()
            .map(|st| {
                let g = ConvGeometry {
                    in_h: h,
                    in_w: w,
                    c_in: c,
                    k_h: self.kernel_size,
                    k_w: self.kernel_size,
                    c_out: st.channels,
                    stride: st.stride,
                };
                (h, w, c) = (g.out_h(), g.out_w(), st.channels);
                g
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl BackboneParams {
    /// He-uniform kernels, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let k = cfg.kernel_size;
        let mut c_in = 1;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for st in &cfg.stages {
            let fan_in = (k * k * c_in) as f64;
            let bound = (6.0 / fan_in).sqrt();
            kernels.push(Tensor::uniform(&[k, k, c_in, st.channels], bound, rng));
            biases.push(Tensor::zeros(&[st.channels]));
            c_in = st.channels;
        }
        Self { kernels, biases }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernels: self.kernels.iter().map(Tensor::zeros_like).collect(),
            biases: self.biases.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            out.push((format!("{prefix}.stage{i}.kernel"), k));
            out.push((format!("{prefix}.stage{i}.bias"), b));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for (k, b) in self.kernels.iter_mut().zip(self.biases.iter_mut()) {
            out.push(k);
            out.push(b);
        }
    }
}

/// Layer activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneCache {
    geometries: Vec<ConvGeometry>,
    /// `activations[0]` is the image; `activations[i + 1]` is stage `i`'s ReLU output.
    activations: Vec<Vec<f64>>,
}

fn standardize(data: &[f64]) -> Vec<f64> {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / (var.sqrt() + 1e-3);
    data.iter().map(|v| (v - mean) * scale).collect()
}

/// Runs the conv stack, returning `F` as an `H × W × C` tensor.
pub fn extract_features(
    image: &GrayImage,
    cfg: &BackboneConfig,
    params: &BackboneParams,
) -> Result<(Tensor, BackboneCache)> {
    cfg.validate(image.height, image.width)?;
    if params.kernels.len() != cfg.stages.len() {
        return Err(Error::Config(format!(
            "backbone has {} kernels for {} stages",
            params.kernels.len(),
            cfg.stages.len()
        )));
    }
    let geometries = cfg.geometries(image.height, image.width);
    let mut activations = Vec::with_capacity(geometries.len() + 1);
    activations.push(if cfg.standardize {
        standardize(&image.data)
    } else {
        image.data.clone()
    });
    for (i, g) in geometries.iter().enumerate() {
        if params.kernels[i].len() != g.kernel_len() {
            return Err(Error::dim(
                "backbone kernel",
                params.kernels[i].shape(),
                &[g.k_h, g.k_w, g.c_in, g.c_out],
            ));
        }
        let mut out = vec![0.0; g.output_len()];
        kernels::conv2d_forward(
            g,
            &activations[i],
            params.kernels[i].data(),
            Some(params.biases[i].data()),
            &mut out,
        );
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        activations.push(out);
    }
    let (h, w, c) = cfg.output_shape(image.height, image.width);
    let conv = activations.last().expect("at least one stage");
    let features = if cfg.position_channels {
        let conv_c = c - h - w;
        let mut data = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let row = &mut data[k * c..(k + 1) * c];
                row[..conv_c].copy_from_slice(&conv[k * conv_c..(k + 1) * conv_c]);
                row[conv_c + y] = 1.0;
                row[conv_c + h + x] = 1.0;
            }
        }
        Tensor::new(&[h, w, c], data)?
    } else {
        Tensor::new(&[h, w, c], conv.clone())?
    };
    Ok((features, BackboneCache { geometries, activations }))
}

/// Accumulates parameter gradients given `dL/dF`.
pub fn backward(
    cache: &BackboneCache,
    params: &BackboneParams,
    grad_features: &[f64],
    grads: &mut BackboneParams,
) {
    let last = cache.geometries.last().expect("at least one stage");
    let (h, w, conv_c) = (last.out_h(), last.out_w(), last.c_out);
    let c = grad_features.len() / (h * w);
    let mut grad_out: Vec<f64> = if c == conv_c {
        grad_features.to_vec()
    } else {
        grad_features
            .chunks_exact(c)
            .flat_map(|row| row[..conv_c].iter().copied())
            .collect()
    };
    for i in (0..cache.geometries.len()).rev() {
        let g = &cache.geometries[i];
        let out = &cache.activations[i + 1];
        for (d, o) in grad_out.iter_mut().zip(out) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        let mut grad_in = if i > 0 { Some(vec![0.0; g.input_len()]) } else { None };
        kernels::conv2d_backward(
            g,
            &cache.activations[i],
            params.kernels[i].data(),
            &grad_out,
            grad_in.as_deref_mut(),
            grads.kernels[i].data_mut(),
            Some(grads.biases[i].data_mut()),
        );
        if let Some(gi) = grad_in {
            grad_out = gi;
        }
    }
}

/// Rearranges `H × W × C` into `(H·W) × C`, row `k` being pixel `(k / W, k % W)`.
pub fn flatten_features(features: &Tensor) -> Result<Tensor> {
    match features.shape() {
        &[h, w, c] => features.clone().reshape(&[h * w, c]),
        other => Err(Error::dim("flatten_features", other, &[0, 0, 0])),
    }
}
