//! Appearance decoder: one-hidden-layer MLP from (features, view direction) to RGB.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{dot_slice, norm, sigmoid, Matrix, Vec3};

pub const HIDDEN: usize = 128;
pub const OUTPUTS: usize = 3;

/// Lipschitz constant of the logistic sigmoid.
const SIGMOID_LIPSCHITZ: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceDecoder {
    app_feature_dim: usize,
    dir_freqs: usize,
    /// `(app_feature_dim + dir_dim) × HIDDEN`, input-major (the transpose of
    /// the usual weight layout); feature rows first.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `OUTPUTS × HIDDEN`.
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct DecoderTrace {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub rgb: Vec3,
}

/// Width of the encoded view direction.
pub fn dir_dim(dir_freqs: usize) -> usize {
    3 + 6 * dir_freqs
}

/// Raw direction followed by `sin(2^k d), cos(2^k d)` for each band `k`.
pub fn encode_direction(dir: Vec3, dir_freqs: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(&dir);
    let mut f = 1.0;
    for k in 0..dir_freqs {
        for a in 0..3 {
            out[3 + 6 * k + a] = (f * dir[a]).sin();
            out[6 + 6 * k + a] = (f * dir[a]).cos();
        }
        f *= 2.0;
    }
}

impl AppearanceDecoder {
    pub fn zeros(app_feature_dim: usize, dir_freqs: usize) -> Self {
        let input = app_feature_dim + dir_dim(dir_freqs);
        Self {
            app_feature_dim,
            dir_freqs,
            w1: Matrix::zeros(input, HIDDEN),
            b1: vec![0.0; HIDDEN],
            w2: Matrix::zeros(OUTPUTS, HIDDEN),
            b2: vec![0.0; OUTPUTS],
        }
    }

    /// Uniform fan-in scaled weights (Kaiming bound `√(6/fan_in)` for the ReLU
    /// layer, `1/√fan_in` for the output layer), zero biases.
    pub fn random(app_feature_dim: usize, dir_freqs: usize, rng: &mut impl Rng) -> Self {
        let mut d = Self::zeros(app_feature_dim, dir_freqs);
        let b = (6.0 / d.input_dim() as f64).sqrt();
        d.w1.data.iter_mut().for_each(|v| *v = rng.gen_range(-b..=b));
        let b = 1.0 / (HIDDEN as f64).sqrt();
        d.w2.data.iter_mut().for_each(|v| *v = rng.gen_range(-b..=b));
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.app_feature_dim, self.dir_freqs)
    }

    pub fn app_feature_dim(&self) -> usize {
        self.app_feature_dim
    }

    pub fn dir_freqs(&self) -> usize {
        self.dir_freqs
    }

    pub fn input_dim(&self) -> usize {
        self.app_feature_dim + dir_dim(self.dir_freqs)
    }

    pub fn param_count(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![&self.w1.data, &self.b1, &self.w2.data, &self.b2]
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w1.data, &mut self.b1, &mut self.w2.data, &mut self.b2]
    }

    /// `sigmoid(W2 relu(W1 [features; enc(dir)] + b1) + b2)`.
    pub fn decode(&self, features: &[f64], dir: Vec3) -> Result<Vec3> {
        if features.len() != self.app_feature_dim {
            return Err(Error::Shape(format!(
                "decoder expects {} features, got {}",
                self.app_feature_dim,
                features.len()
            )));
        }
        if (norm(dir) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("view direction {dir:?} is not unit length")));
        }
        let mut trace = DecoderTrace::default();
        let mut enc = vec![0.0; dir_dim(self.dir_freqs)];
        encode_direction(dir, self.dir_freqs, &mut enc);
        self.forward(features, &enc, &mut trace);
        Ok(trace.rgb)
    }

    /// Unchecked forward pass recording activations into `trace`.
    pub fn forward(&self, features: &[f64], enc_dir: &[f64], trace: &mut DecoderTrace) {
        trace.input.clear();
        trace.input.extend_from_slice(features);
        trace.input.extend_from_slice(enc_dir);
        trace.pre.resize(HIDDEN, 0.0);
        self.w1.matvec_t(&trace.input, &mut trace.pre);
        let mut hidden = [0.0; HIDDEN];
        for ((hv, p), b) in hidden.iter_mut().zip(trace.pre.iter_mut()).zip(&self.b1) {
            *p += b;
            *hv = p.max(0.0);
        }
        trace.rgb = [0, 1, 2].map(|o| sigmoid(dot_slice(self.w2.row(o), &hidden) + self.b2[o]));
    }

    /// Accumulate parameter gradients into `grad` and write `dL/dfeatures`
    /// into `d_features`, given `dL/drgb`.
    pub fn backward(&self, trace: &DecoderTrace, d_rgb: Vec3, grad: &mut AppearanceDecoder, d_features: &mut [f64]) {
        let d_out: [f64; OUTPUTS] = [0, 1, 2].map(|o| d_rgb[o] * trace.rgb[o] * (1.0 - trace.rgb[o]));
        for o in 0..OUTPUTS {
            grad.b2[o] += d_out[o];
        }
        let mut d_hidden = [0.0; HIDDEN];
        for (h, dh) in d_hidden.iter_mut().enumerate() {
            let pre = trace.pre[h];
            if pre <= 0.0 {
                continue;
            }
            for o in 0..OUTPUTS {
                grad.w2.data[o * HIDDEN + h] += d_out[o] * pre;
                *dh += self.w2.data[o * HIDDEN + h] * d_out[o];
            }
        }
        for (gb, dh) in grad.b1.iter_mut().zip(&d_hidden) {
            *gb += dh;
        }
        for (j, &x) in trace.input.iter().enumerate() {
            if x != 0.0 {
                grad.w1.row_mut(j).iter_mut().zip(&d_hidden).for_each(|(g, dh)| *g += x * dh);
            }
        }
        for (j, df) in d_features.iter_mut().enumerate() {
            *df = dot_slice(self.w1.row(j), &d_hidden);
        }
    }

    /// `0.25 · ‖W2‖₂ · ‖W1_features‖₂`: a Lipschitz constant of the decoder
    /// output (Euclidean norm) with respect to its feature input.
    pub fn lipschitz_upper_bound(&self) -> f64 {
        let w1f = self.w1.top_rows(self.app_feature_dim);
        SIGMOID_LIPSCHITZ * self.w2.spectral_norm(50, 5000) * w1f.spectral_norm(50, 5000)
    }
}
