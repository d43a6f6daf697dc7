//! Image branch: a small convolutional backbone, concurrent spatial and
//! channel squeeze-and-excitation gates, and global average pooling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Padding, Scalar, Tape, Tensor, Var};

/// One backbone stage: 3x3 same-padding convolution (+bias), ReLU, 2x2 max
/// pool.
#[derive(Debug, Clone)]
pub struct ConvStage<F: Scalar> {
    /// `[3 x 3 x cin x cout]`
    pub kernels: Tensor<F>,
    /// `[cout]`
    pub bias: Tensor<F>,
}

impl<F: Scalar> ConvStage<F> {
    pub fn init<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let fan_in = 9 * cin;
        let fan_out = 9 * cout;
        ConvStage {
            kernels: glorot_uniform(&[3, 3, cin, cout], fan_in, fan_out, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }
}

/// scSE gate parameters. The channel path is GAP -> FC(c -> c/r) -> ReLU ->
/// FC(c/r -> c) -> sigmoid; the spatial path is a 1x1 convolution (c -> 1)
/// with sigmoid.
#[derive(Debug, Clone)]
pub struct ScseParams<F: Scalar> {
    pub fc1_w: Tensor<F>,
    pub fc1_b: Tensor<F>,
    pub fc2_w: Tensor<F>,
    pub fc2_b: Tensor<F>,
    pub sp_w: Tensor<F>,
    pub sp_b: Tensor<F>,
    pub reduction: usize,
}

impl<F: Scalar> ScseParams<F> {
    pub fn init<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        Self::check_ratio(channels, reduction)?;
        let mid = channels / reduction;
        Ok(ScseParams {
            fc1_w: glorot_uniform(&[channels, mid], channels, mid, rng),
            fc1_b: Tensor::zeros(&[mid]),
            fc2_w: glorot_uniform(&[mid, channels], mid, channels, rng),
            fc2_b: Tensor::zeros(&[channels]),
            sp_w: glorot_uniform(&[channels, 1], channels, 1, rng),
            sp_b: Tensor::zeros(&[1]),
            reduction,
        })
    }

    /// All-zero gates: every sigmoid output is 0.5 and the additive
    /// recalibration reduces to the identity.
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        Self::check_ratio(channels, reduction)?;
        let mid = channels / reduction;
        Ok(ScseParams {
            fc1_w: Tensor::zeros(&[channels, mid]),
            fc1_b: Tensor::zeros(&[mid]),
            fc2_w: Tensor::zeros(&[mid, channels]),
            fc2_b: Tensor::zeros(&[channels]),
            sp_w: Tensor::zeros(&[channels, 1]),
            sp_b: Tensor::zeros(&[1]),
            reduction,
        })
    }

    fn check_ratio(channels: usize, reduction: usize) -> Result<()> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "scSE reduction ratio {reduction} must divide channel count {channels}"
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> ScseVars {
        ScseVars {
            fc1_w: tape.param(&self.fc1_w),
            fc1_b: tape.param(&self.fc1_b),
            fc2_w: tape.param(&self.fc2_w),
            fc2_b: tape.param(&self.fc2_b),
            sp_w: tape.param(&self.sp_w),
            sp_b: tape.param(&self.sp_b),
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{prefix}.fc1_w"), &mut self.fc1_w),
            (format!("{prefix}.fc1_b"), &mut self.fc1_b),
            (format!("{prefix}.fc2_w"), &mut self.fc2_w),
            (format!("{prefix}.fc2_b"), &mut self.fc2_b),
            (format!("{prefix}.sp_w"), &mut self.sp_w),
            (format!("{prefix}.sp_b"), &mut self.sp_b),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScseVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub sp_w: Var,
    pub sp_b: Var,
}

impl ScseVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.fc1_w"), self.fc1_w),
            (format!("{prefix}.fc1_b"), self.fc1_b),
            (format!("{prefix}.fc2_w"), self.fc2_w),
            (format!("{prefix}.fc2_b"), self.fc2_b),
            (format!("{prefix}.sp_w"), self.sp_w),
            (format!("{prefix}.sp_b"), self.sp_b),
        ]
    }
}

/// Backbone plus attention gates for the image branch. `stages` may be empty
/// when precomputed feature maps are fed in directly.
#[derive(Debug, Clone)]
pub struct ImageBranchParams<F: Scalar> {
    pub stages: Vec<ConvStage<F>>,
    pub scse: ScseParams<F>,
}

impl<F: Scalar> ImageBranchParams<F> {
    pub fn init<R: Rng>(
        input_channels: usize,
        stage_widths: &[usize],
        map_channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(stage_widths.len());
        let mut cin = input_channels;
        for &cout in stage_widths {
            stages.push(ConvStage::init(cin, cout, rng));
            cin = cout;
        }
        Ok(ImageBranchParams { stages, scse: ScseParams::init(map_channels, reduction, rng)? })
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> ImageBranchVars {
        ImageBranchVars {
            stages: self
                .stages
                .iter()
                .map(|s| (tape.param(&s.kernels), tape.param(&s.bias)))
                .collect(),
            scse: self.scse.bind(tape),
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            out.push((format!("{prefix}.conv{i}.kernels"), &mut stage.kernels));
            out.push((format!("{prefix}.conv{i}.bias"), &mut stage.bias));
        }
        out.extend(self.scse.params_mut(&format!("{prefix}.scse")));
        out
    }
}

#[derive(Debug, Clone)]
pub struct ImageBranchVars {
    pub stages: Vec<(Var, Var)>,
    pub scse: ScseVars,
}

impl ImageBranchVars {
    pub fn ordered(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.stages.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.kernels"), *k));
            out.push((format!("{prefix}.conv{i}.bias"), *b));
        }
        out.extend(self.scse.ordered(&format!("{prefix}.scse")));
        out
    }
}

/// Gate values exported for attention dumps.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScseTrace {
    pub channel: Vec<f64>,
    pub spatial: Vec<f64>,
    pub spatial_shape: (usize, usize),
}

/// Channel and spatial sigmoid gates for a feature map `z [h x w x c]`.
pub fn scse_gates<F: Scalar>(
    tape: &mut Tape<F>,
    z: Var,
    vars: &ScseVars,
) -> Result<(Var, Var)> {
    let s = tape.value(z).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("scse_gates", format!("{s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if tape.value(vars.fc1_w).shape()[0] != c {
        return Err(Error::Config(format!(
            "scSE configured for {} channels, feature map has {c}",
            tape.value(vars.fc1_w).shape()[0]
        )));
    }

    let squeezed = tape.global_avg_pool(z)?;
    let sq_row = tape.reshape(squeezed, &[1, c])?;
    let mid = tape.matmul(sq_row, vars.fc1_w)?;
    let mid = tape.add_row_bias(mid, vars.fc1_b)?;
    let mid = tape.relu(mid);
    let ch = tape.matmul(mid, vars.fc2_w)?;
    let ch = tape.add_row_bias(ch, vars.fc2_b)?;
    let ch = tape.sigmoid(ch);
    let ch = tape.reshape(ch, &[c])?;

    let flat = tape.reshape(z, &[h * w, c])?;
    let sp = tape.matmul(flat, vars.sp_w)?;
    let sp = tape.add_row_bias(sp, vars.sp_b)?;
    let sp = tape.sigmoid(sp);
    let sp = tape.reshape(sp, &[h, w])?;

    Ok((ch, sp))
}

/// Additive recalibration: `z . channel_gates + z . spatial_gates`.
pub fn apply_scse<F: Scalar>(
    tape: &mut Tape<F>,
    z: Var,
    channel_gates: Var,
    spatial_gates: Var,
) -> Result<Var> {
    let by_channel = tape.mul_channel_gate(z, channel_gates)?;
    let by_spatial = tape.mul_spatial_gate(z, spatial_gates)?;
    tape.add(by_channel, by_spatial)
}

/// Run the backbone over an input image: conv(+bias) -> ReLU -> maxpool per
/// stage.
pub fn backbone<F: Scalar>(
    tape: &mut Tape<F>,
    image: Var,
    vars: &ImageBranchVars,
) -> Result<Var> {
    let mut z = image;
    for &(kernels, bias) in &vars.stages {
        let conv = tape.conv2d(z, kernels, 1, Padding::Same)?;
        let s = tape.value(conv).shape().to_vec();
        let flat = tape.reshape(conv, &[s[0] * s[1], s[2]])?;
        let flat = tape.add_row_bias(flat, bias)?;
        let conv = tape.reshape(flat, &s)?;
        let act = tape.relu(conv);
        z = tape.maxpool2(act)?;
    }
    Ok(z)
}

/// Full image branch from either a raw image or a precomputed feature map
/// (`stages` empty): backbone, scSE recalibration, GAP.
pub fn image_branch<F: Scalar>(
    tape: &mut Tape<F>,
    image: Var,
    vars: &ImageBranchVars,
    skip_attention: bool,
) -> Result<(Var, Option<ScseTrace>)> {
    let z = backbone(tape, image, vars)?;
    let (z_att, trace) = if skip_attention {
        (z, None)
    } else {
        let (ch, sp) = scse_gates(tape, z, &vars.scse)?;
        let shape = tape.value(sp).shape().to_vec();
        let trace = ScseTrace {
            channel: tape.value(ch).data().iter().map(|v| v.as_f64()).collect(),
            spatial: tape.value(sp).data().iter().map(|v| v.as_f64()).collect(),
            spatial_shape: (shape[0], shape[1]),
        };
        (apply_scse(tape, z, ch, sp)?, Some(trace))
    };
    let feature = tape.global_avg_pool(z_att)?;
    Ok((feature, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![h, w, c],
            (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap()
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(ScseParams::<f64>::zeros(8, 3).is_err());
        assert!(ScseParams::<f64>::zeros(8, 4).is_ok());
        assert!(ScseParams::<f64>::zeros(512, 16).is_ok());
    }

    #[test]
    fn zero_weights_gate_at_half() {
        let p = ScseParams::<f64>::zeros(8, 4).unwrap();
        let mut tape = Tape::new();
        let z = tape.input(rand_map(4, 4, 8, 1));
        let vars = p.bind(&mut tape);
        let (ch, sp) = scse_gates(&mut tape, z, &vars).unwrap();
        assert!(tape.value(ch).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(sp).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_input_gives_constant_spatial_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ScseParams::<f64>::init(4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let z = tape.input(Tensor::filled(&[3, 5, 4], 0.37));
        let vars = p.bind(&mut tape);
        let (_, sp) = scse_gates(&mut tape, z, &vars).unwrap();
        let d = tape.value(sp).data();
        for &v in d {
            assert!((v - d[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_match_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ScseParams::<f64>::init(8, 4, &mut rng).unwrap();
        let z = rand_map(4, 4, 8, 4);
        let mut tape = Tape::new();
        let zv = tape.input(z.clone());
        let vars = p.bind(&mut tape);
        let (ch, sp) = scse_gates(&mut tape, zv, &vars).unwrap();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        // channel path oracle
        let mut gap = [0.0f64; 8];
        for pnt in 0..16 {
            for c in 0..8 {
                gap[c] += z.data()[pnt * 8 + c] / 16.0;
            }
        }
        let mut midv = [0.0f64; 2];
        for j in 0..2 {
            let mut s = p.fc1_b.data()[j];
            for i in 0..8 {
                s += gap[i] * p.fc1_w.data()[i * 2 + j];
            }
            midv[j] = s.max(0.0);
        }
        for j in 0..8 {
            let mut s = p.fc2_b.data()[j];
            for i in 0..2 {
                s += midv[i] * p.fc2_w.data()[i * 8 + j];
            }
            let expect = sigmoid(s);
            assert!((tape.value(ch).data()[j] - expect).abs() < 1e-6);
        }
        // spatial path oracle
        for pnt in 0..16 {
            let mut s = p.sp_b.data()[0];
            for c in 0..8 {
                s += z.data()[pnt * 8 + c] * p.sp_w.data()[c];
            }
            let expect = sigmoid(s);
            assert!((tape.value(sp).data()[pnt] - expect).abs() < 1e-6);
        }
        // gates live strictly inside (0, 1)
        for &v in tape.value(ch).data().iter().chain(tape.value(sp).data()) {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zero_init_scse_is_identity() {
        let p = ScseParams::<f64>::zeros(8, 4).unwrap();
        let z = rand_map(4, 4, 8, 5);
        let mut tape = Tape::new();
        let zv = tape.input(z.clone());
        let vars = p.bind(&mut tape);
        let (ch, sp) = scse_gates(&mut tape, zv, &vars).unwrap();
        let out = apply_scse(&mut tape, zv, ch, sp).unwrap();
        // 0.5 z + 0.5 z == z exactly in floating point
        assert_eq!(tape.value(out).data(), z.data());
    }

    #[test]
    fn fully_closed_gates_annihilate() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(rand_map(2, 2, 2, 6));
        let ch = tape.input(Tensor::zeros(&[2]));
        let sp = tape.input(Tensor::zeros(&[2, 2]));
        let out = apply_scse(&mut tape, z, ch, sp).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_scse_matches_formula_and_magnitude_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = rand_map(3, 3, 4, 8);
        let chd: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..0.99)).collect();
        let spd: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut tape = Tape::new();
        let zv = tape.input(z.clone());
        let ch = tape.input(Tensor::from_vec(chd.clone()));
        let sp = tape.input(Tensor::new(vec![3, 3], spd.clone()).unwrap());
        let out = apply_scse(&mut tape, zv, ch, sp).unwrap();
        for p in 0..9 {
            for c in 0..4 {
                let zi = z.data()[p * 4 + c];
                let expect = zi * chd[c] + zi * spd[p];
                let got = tape.value(out).data()[p * 4 + c];
                assert!((got - expect).abs() < 1e-6);
                assert!(got.abs() <= 2.0 * zi.abs() + 1e-12);
            }
        }
    }

    #[test]
    fn zero_image_zero_bias_backbone_gives_zero_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ImageBranchParams::<f64>::init(3, &[8, 8, 8], 8, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let img = tape.input(Tensor::zeros(&[32, 32, 3]));
        let vars = p.bind(&mut tape);
        let (feat, _) = image_branch(&mut tape, img, &vars, false).unwrap();
        assert_eq!(tape.value(feat).shape(), &[8]);
        assert!(tape.value(feat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn desk_scale_shapes_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = ImageBranchParams::<f64>::init(3, &[8, 8, 8], 8, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let img = tape.input(rand_map(32, 32, 3, 11));
        let vars = p.bind(&mut tape);
        let z = backbone(&mut tape, img, &vars).unwrap();
        assert_eq!(tape.value(z).shape(), &[4, 4, 8]);
        let (feat, trace) = image_branch(&mut tape, img, &vars, false).unwrap();
        assert_eq!(tape.value(feat).shape(), &[8]);
        let trace = trace.unwrap();
        assert_eq!(trace.channel.len(), 8);
        assert_eq!(trace.spatial_shape, (4, 4));
    }
}
