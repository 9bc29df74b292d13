use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

/// Convolutional feature extractor: `3×3` convolutions with padding 1,
/// each followed by ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            widths: vec![32, 64, 128, 128],
            kernel_sizes: vec![3, 3, 3, 3],
            strides: vec![2, 2, 2, 1],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.kernel_sizes.len() != n || self.strides.len() != n {
            return Err(Error::Config(
                "encoder widths, kernel sizes and strides must have equal non-zero length".into(),
            ));
        }
        if self
            .widths
            .iter()
            .chain(&self.kernel_sizes)
            .chain(&self.strides)
            .any(|&v| v == 0)
        {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("encoder kernels must be odd".into()));
        }
        let (_, h, _) = self.output_shape();
        if h == 0 {
            return Err(Error::Config("encoder output spatial size is zero".into()));
        }
        Ok(())
    }

    /// `(C_f, H_f, W_f)` of the final feature map.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let mut size = self.image_size;
        for (&k, &s) in self.kernel_sizes.iter().zip(&self.strides) {
            let pad = k / 2;
            if size + 2 * pad < k {
                return (0, 0, 0);
            }
            size = (size + 2 * pad - k) / s + 1;
        }
        (*self.widths.last().unwrap_or(&0), size, size)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    kernels: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: EncoderConfig,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for (i, (&w, &k)) in config.widths.iter().zip(&config.kernel_sizes).enumerate() {
            let fan_in = c_in * k * k;
            let std = (2.0 / fan_in as f64).sqrt();
            kernels.push(params.add(
                format!("encoder.{i}.kernel"),
                Tensor::randn([w, c_in, k, k], std, rng),
            ));
            biases.push(params.add(format!("encoder.{i}.bias"), Tensor::zeros([1, w, 1, 1])));
            c_in = w;
        }
        Ok(Self {
            config,
            kernels,
            biases,
        })
    }

    pub fn first_kernel(&self) -> ParamId {
        self.kernels[0]
    }

    /// `B×C×H×W` images to a `B×C_f×H_f×W_f` feature map.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        let s = g.shape(images);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::Dimension {
                op: "encode",
                lhs: s.to_vec(),
                rhs: vec![c.in_channels, c.image_size, c.image_size],
            });
        }
        let mut h = images;
        for i in 0..self.kernels.len() {
            let k = c.kernel_sizes[i];
            h = g.conv2d(h, p.var(self.kernels[i]), c.strides[i], k / 2)?;
            h = g.add(h, p.var(self.biases[i]))?;
            h = g.relu(h)?;
        }
        Ok(h)
    }
}

/// Spatial mean of a `B×C×H×W` map, giving `B×C`.
pub fn global_average_pool<T: Scalar>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let flat = g.reshape(features, [s[0], s[1], s[2] * s[3]])?;
    g.mean_axis(flat, 2)
}
