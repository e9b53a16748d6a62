//! Encoder/decoder mapping an RGB image to per-pixel disparity logits.
//!
//! Encoder stage `s` is a 3×3 convolution (stride 2 for `s > 0`) followed by
//! residual blocks `y = elu(x + conv(elu(conv(x))))`. Each decoder stage
//! upsamples by nearest neighbour, convolves, concatenates the matching
//! encoder output and fuses with another convolution. Channels double per
//! stage from `base_channels`, capped at `8 × base_channels`.

use gradcore::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::medvol::{cross_volume_on, own_volume_on, volume_from_tape, MedVolume, View};
use crate::quantize::DisparityLevels;

fn default_stages() -> usize {
    6
}

fn default_res_blocks() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_stages")]
    pub stages: usize,
    pub base_channels: usize,
    /// Output channels, one per disparity level.
    pub levels: usize,
    #[serde(default = "default_res_blocks")]
    pub residual_blocks_per_stage: usize,
    #[serde(default = "default_true")]
    pub skip_connections: bool,
}

impl NetworkConfig {
    /// Four stages, eight base channels: the configuration used for
    /// gradient checks and the desk-scale experiments.
    pub fn toy(levels: usize) -> Self {
        Self {
            stages: 4,
            base_channels: 8,
            levels,
            residual_blocks_per_stage: 1,
            skip_connections: true,
        }
    }

    /// Six stages at roughly 17M parameters. For shape and size reporting.
    pub fn paperlike(levels: usize) -> Self {
        Self {
            stages: 6,
            base_channels: 40,
            levels,
            residual_blocks_per_stage: 1,
            skip_connections: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(invalid(
                "NetworkConfig",
                format!("stages must be >= 2, got {}", self.stages),
            ));
        }
        if self.base_channels == 0 {
            return Err(invalid("NetworkConfig", "base_channels must be positive"));
        }
        if self.levels < 2 {
            return Err(invalid(
                "NetworkConfig",
                format!("levels must be >= 2, got {}", self.levels),
            ));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        1 << (self.stages - 1)
    }

    pub fn channels(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(8 * self.base_channels)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.input_multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h == 0 || w == 0 {
            return Err(invalid(
                "forward",
                format!("input {h}x{w} must have height and width divisible by {m}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    entry: Conv,
    blocks: Vec<(Conv, Conv)>,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<Stage>,
    /// Indexed by the stage being decoded into, deepest first.
    decoder: Vec<(Conv, Conv)>,
    head: Conv,
}

struct Builder<'a, F> {
    params: Vec<Param<F>>,
    rng: &'a mut ChaCha8Rng,
}

impl<F: Real> Builder<'_, F> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        bound_scale: f64,
    ) -> Conv {
        let fan_in = (cin * 9) as f64;
        let bound = bound_scale * (6.0 / fan_in).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(vec![cout, cin, 3, 3], |_| {
            F::from_f64_lossy(rng.gen_range(-bound..=bound))
        });
        self.params.push(Param {
            name: format!("{name}.weight"),
            value: w,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(vec![cout]),
        });
        let n = self.params.len();
        Conv {
            weight: n - 2,
            bias: n - 1,
            stride,
        }
    }
}

fn build_layout<F: Real>(cfg: &NetworkConfig, seed: u64) -> (Layout, Vec<Param<F>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: Vec::new(),
        rng: &mut rng,
    };
    let mut encoder = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        let cin = if s == 0 { 3 } else { cfg.channels(s - 1) };
        let c = cfg.channels(s);
        let entry = b.conv(
            &format!("enc{s}.conv"),
            cin,
            c,
            if s == 0 { 1 } else { 2 },
            1.0,
        );
        let blocks = (0..cfg.residual_blocks_per_stage)
            .map(|r| {
                let c1 = b.conv(&format!("enc{s}.res{r}.conv1"), c, c, 1, 1.0);
                let c2 = b.conv(&format!("enc{s}.res{r}.conv2"), c, c, 1, 0.5);
                (c1, c2)
            })
            .collect();
        encoder.push(Stage { entry, blocks });
    }
    let mut decoder = Vec::with_capacity(cfg.stages - 1);
    for s in (1..cfg.stages).rev() {
        let (c_in, c_out) = (cfg.channels(s), cfg.channels(s - 1));
        let up = b.conv(&format!("dec{s}.up"), c_in, c_out, 1, 1.0);
        let fuse_in = if cfg.skip_connections {
            2 * c_out
        } else {
            c_out
        };
        let fuse = b.conv(&format!("dec{s}.fuse"), fuse_in, c_out, 1, 1.0);
        decoder.push((up, fuse));
    }
    let head = b.conv("head", cfg.channels(0), cfg.levels, 1, 0.1);
    let params = b.params;
    (
        Layout {
            encoder,
            decoder,
            head,
        },
        params,
    )
}

#[derive(Clone, Debug)]
pub struct FalNet<F: Real> {
    config: NetworkConfig,
    layout: Layout,
    params: Vec<Param<F>>,
}

impl<F: Real> FalNet<F> {
    /// Seeded He-uniform initialization; the output head starts small so the
    /// initial volumes are close to uniform.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build_layout(&config, seed);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Replace all parameters, checking names and shapes against the layout.
    pub fn with_params(config: NetworkConfig, values: Vec<Param<F>>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if values.len() != net.params.len() {
            return Err(invalid(
                "FalNet::with_params",
                format!(
                    "expected {} parameters, got {}",
                    net.params.len(),
                    values.len()
                ),
            ));
        }
        for (slot, p) in net.params.iter_mut().zip(values) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(invalid(
                    "FalNet::with_params",
                    format!(
                        "parameter `{}` {:?} does not match expected `{}` {:?}",
                        p.name,
                        p.value.shape(),
                        slot.name,
                        slot.value.shape()
                    ),
                ));
            }
            *slot = p;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> FalNet<G> {
        FalNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Zero the output layer so every pixel gets all-zero logits.
    pub fn zero_head(&mut self) {
        for idx in [self.layout.head.weight, self.layout.head.bias] {
            self.params[idx]
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = F::zero());
        }
    }

    /// Put the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn conv(&self, tape: &mut Tape<F>, bound: &[Var], c: Conv, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, bound[c.weight], Some(bound[c.bias]), c.stride, 1)?)
    }

    /// Logits `[B, L, H, W]` aligned to the input view.
    pub fn forward_on(&self, tape: &mut Tape<F>, bound: &[Var], image: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(image).dims4()?;
        if c != 3 {
            return Err(invalid(
                "forward",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        self.config.check_input(h, w)?;
        let one = F::one();
        let mut x = tape.add_scalar(image, F::from_f64_lossy(-0.5));
        let mut skips = Vec::with_capacity(self.config.stages);
        for stage in &self.layout.encoder {
            let y = self.conv(tape, bound, stage.entry, x)?;
            x = tape.elu(y, one);
            for &(c1, c2) in &stage.blocks {
                let y = self.conv(tape, bound, c1, x)?;
                let y = tape.elu(y, one);
                let y = self.conv(tape, bound, c2, y)?;
                let y = tape.add(x, y)?;
                x = tape.elu(y, one);
            }
            skips.push(x);
        }
        let depth = skips.len();
        for (i, &(up, fuse)) in self.layout.decoder.iter().enumerate() {
            let target = depth - 2 - i;
            let u = tape.upsample_nearest2x(x)?;
            let u = self.conv(tape, bound, up, u)?;
            let mut u = tape.elu(u, one);
            if self.config.skip_connections {
                u = tape.concat_channels(&[u, skips[target]])?;
            }
            let y = self.conv(tape, bound, fuse, u)?;
            x = tape.elu(y, one);
        }
        self.conv(tape, bound, self.layout.head, x)
    }

    /// Treat `image` as a right view: flip, run, flip the logits back.
    pub fn forward_as_right_on(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        image: Var,
    ) -> Result<Var> {
        let flipped = tape.flip_w(image)?;
        let logits = self.forward_on(tape, bound, flipped)?;
        Ok(tape.flip_w(logits)?)
    }

    /// Gradient-free [`FalNet::forward_on`].
    pub fn forward(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let y = self.forward_on(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Right-aligned logits for a right image and the left-aligned volume
    /// obtained by warping them into the left camera before the softmax.
    pub fn forward_as_right(
        &self,
        image: &Tensor<F>,
        levels: &DisparityLevels,
    ) -> Result<(Tensor<F>, MedVolume<F>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let logits = self.forward_as_right_on(&mut tape, &bound, x)?;
        let cross = cross_volume_on(&mut tape, logits, levels, View::Right)?;
        Ok((
            tape.value(logits).clone(),
            volume_from_tape(&tape, cross, levels),
        ))
    }

    /// Normalized volume for `image` processed as `view`.
    pub fn volume(
        &self,
        image: &Tensor<F>,
        levels: &DisparityLevels,
        view: View,
    ) -> Result<MedVolume<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let logits = match view {
            View::Left => self.forward_on(&mut tape, &bound, x)?,
            View::Right => self.forward_as_right_on(&mut tape, &bound, x)?,
        };
        let own = own_volume_on(&mut tape, logits, view)?;
        Ok(volume_from_tape(&tape, own, levels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_output_shape() {
        let net = FalNet::<f32>::new(NetworkConfig::toy(9), 1).unwrap();
        let x = Tensor::full(vec![1, 3, 16, 24], 0.3f32);
        assert_eq!(net.forward(&x).unwrap().shape(), &[1, 9, 16, 24]);
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let net = FalNet::<f32>::new(NetworkConfig::toy(9), 1).unwrap();
        let err = net
            .forward(&Tensor::zeros(vec![1, 3, 12, 16]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("divisible by 8"), "{err}");
    }

    #[test]
    fn channel_schedule_caps_at_eight_times_base() {
        let cfg = NetworkConfig::paperlike(49);
        let c: Vec<usize> = (0..cfg.stages).map(|s| cfg.channels(s)).collect();
        assert_eq!(c, vec![40, 80, 160, 320, 320, 320]);
    }
}
