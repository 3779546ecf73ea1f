//! Building blocks: conv layers, residual channel-attention blocks, the
//! coarse-to-fine merge unit, the residual U-Net refiner and the encoders.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Kaiming-normal weights, zero bias.
    Kaiming,
    /// All-zero weights and bias; residual branches start neutral.
    Zero,
}

/// One named convolution layer. The layer owns its hyperparameters; weights
/// live in the [`ParamStore`] under `<name>.w` / `<name>.b`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
    pub init: Init,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Conv2d {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride: 1,
            pad: k / 2,
            groups: 1,
            bias: true,
            init: Init::Kaiming,
        }
    }

    pub fn stride(mut self, s: usize) -> Conv2d {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Conv2d {
        self.groups = g;
        self
    }

    pub fn no_bias(mut self) -> Conv2d {
        self.bias = false;
        self
    }

    pub fn zero_init(mut self) -> Conv2d {
        self.init = Init::Zero;
        self
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        let fan_in = (self.cin / self.groups) * self.k * self.k;
        let shape = ndarray::IxDyn(&[self.cout, self.cin / self.groups, self.k, self.k]);
        let w = match self.init {
            Init::Zero => ndarray::ArrayD::zeros(shape),
            Init::Kaiming => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                ndarray::ArrayD::from_shape_fn(shape, |_| F::from_f64(normal.sample(rng)))
            }
        };
        store.insert(self.weight_name(), w)?;
        if self.bias {
            store.insert(self.bias_name(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[self.cout])))?;
        }
        Ok(())
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &Tape<F>,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let w = tape.param(store, &self.weight_name())?;
        let expected = [self.cout, self.cin / self.groups, self.k, self.k];
        if w.shape() != expected {
            return Err(Error::StructuralMismatch {
                name: self.weight_name(),
                detail: format!("stored shape {:?}, layer expects {:?}", w.shape(), expected),
            });
        }
        let in_c = x.shape()[1];
        if in_c != self.cin {
            return Err(Error::shape(
                format!("{} input channels", self.name),
                &[self.cin],
                &[in_c],
            ));
        }
        let b = if self.bias {
            Some(tape.param(store, &self.bias_name())?)
        } else {
            None
        };
        Ok(x.conv2d(&w, b.as_ref(), self.stride, self.pad, self.groups))
    }
}

/// Residual channel-attention block:
/// x + attention(conv(relu(conv(x)))), with the second conv zero-initialized
/// so a freshly initialized block is exactly the identity.
#[derive(Debug, Clone)]
pub struct Rcab {
    body1: Conv2d,
    body2: Conv2d,
    att1: Conv2d,
    att2: Conv2d,
}

impl Rcab {
    pub fn new(name: &str, channels: usize, reduction: usize) -> Rcab {
        let squeezed = (channels / reduction).max(1);
        Rcab {
            body1: Conv2d::new(format!("{name}.c1"), channels, channels, 3),
            body2: Conv2d::new(format!("{name}.c2"), channels, channels, 3).zero_init(),
            att1: Conv2d::new(format!("{name}.a1"), channels, squeezed, 1),
            att2: Conv2d::new(format!("{name}.a2"), squeezed, channels, 1),
        }
    }

    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        self.body1.register(store, rng)?;
        self.body2.register(store, rng)?;
        self.att1.register(store, rng)?;
        self.att2.register(store, rng)
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &Tape<F>,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let h = self.body1.apply(tape, store, x)?.relu();
        let h = self.body2.apply(tape, store, &h)?;
        let squeezed = self.att1.apply(tape, store, &h.global_avg_pool())?.relu();
        let gate = self.att2.apply(tape, store, &squeezed)?.sigmoid();
        Ok(x.add(&h.scale_channels(&gate)))
    }
}

/// Coarse-to-fine merge: upsample the coarser feature to the finer grid,
/// refine it with a run of RCABs, concatenate the finer feature, and fuse
/// with a 1x1 conv down to the finer feature's width.
#[derive(Debug, Clone)]
pub struct MergeBlock {
    rcabs: Vec<Rcab>,
    fuse: Conv2d,
    pub c_out: usize,
}

impl MergeBlock {
    pub fn new(name: &str, c_low: usize, c_high: usize, n_rcabs: usize, reduction: usize) -> MergeBlock {
        let rcabs = (0..n_rcabs)
            .map(|i| Rcab::new(&format!("{name}.r{i}"), c_low, reduction))
            .collect();
        MergeBlock {
            rcabs,
            fuse: Conv2d::new(format!("{name}.fuse"), c_low + c_high, c_high, 1),
            c_out: c_high,
        }
    }

    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        for r in &self.rcabs {
            r.register(store, rng)?;
        }
        self.fuse.register(store, rng)
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &Tape<F>,
        store: &ParamStore<F>,
        low: &Tensor<F>,
        high: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let hs = high.shape();
        let mut up = low.bilinear(hs[2], hs[3]);
        for r in &self.rcabs {
            up = r.apply(tape, store, &up)?;
        }
        let fused = self.fuse.apply(tape, store, &up.concat_channels(high))?;
        Ok(fused.leaky_relu(F::from_f64(LEAKY_SLOPE)))
    }
}

/// Five-conv residual U-Net refiner. The last conv is zero-initialized, so a
/// fresh refiner outputs a zero residual and refined == coarse at t = 0.
#[derive(Debug, Clone)]
pub struct UnetRefiner {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    c5: Conv2d,
}

impl UnetRefiner {
    pub fn new(name: &str, channels: usize, width: usize) -> UnetRefiner {
        UnetRefiner {
            c1: Conv2d::new(format!("{name}.c1"), channels, width, 3),
            c2: Conv2d::new(format!("{name}.c2"), width, 2 * width, 3).stride(2),
            c3: Conv2d::new(format!("{name}.c3"), 2 * width, 2 * width, 3),
            c4: Conv2d::new(format!("{name}.c4"), 3 * width, width, 3),
            c5: Conv2d::new(format!("{name}.c5"), width, channels, 3).zero_init(),
        }
    }

    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        self.c1.register(store, rng)?;
        self.c2.register(store, rng)?;
        self.c3.register(store, rng)?;
        self.c4.register(store, rng)?;
        self.c5.register(store, rng)
    }

    /// Residual to add to the coarse prediction.
    pub fn apply<F: Scalar>(
        &self,
        tape: &Tape<F>,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let slope = F::from_f64(LEAKY_SLOPE);
        let e1 = self.c1.apply(tape, store, x)?.leaky_relu(slope);
        let e2 = self.c2.apply(tape, store, &e1)?.leaky_relu(slope);
        let b = self.c3.apply(tape, store, &e2)?.leaky_relu(slope);
        let e1s = e1.shape();
        let up = b.bilinear(e1s[2], e1s[3]);
        let d1 = self
            .c4
            .apply(tape, store, &up.concat_channels(&e1))?
            .leaky_relu(slope);
        self.c5.apply(tape, store, &d1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// One strided conv per stage; the desk-scale default.
    Small,
    /// Strided conv plus grouped-conv residual blocks per stage.
    Resnext,
}

/// Five-stage strided encoder producing features at 1/2 .. 1/32 resolution.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<EncoderStage>,
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
}

impl Encoder {
    pub fn new(
        kind: EncoderKind,
        in_channels: usize,
        channels: &[usize; 5],
        resnext_blocks: usize,
        cardinality: usize,
    ) -> Encoder {
        let mut stages = Vec::with_capacity(5);
        let mut cin = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let down = Conv2d::new(format!("enc.s{}.down", i + 1), cin, c, 3).stride(2);
            let blocks = match kind {
                EncoderKind::Small => Vec::new(),
                EncoderKind::Resnext => (0..resnext_blocks)
                    .map(|b| {
                        (
                            Conv2d::new(format!("enc.s{}.b{b}.c1", i + 1), c, c, 3)
                                .groups(cardinality),
                            Conv2d::new(format!("enc.s{}.b{b}.c2", i + 1), c, c, 3)
                                .groups(cardinality)
                                .zero_init(),
                        )
                    })
                    .collect(),
            };
            stages.push(EncoderStage { down, blocks });
            cin = c;
        }
        Encoder { stages }
    }

    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        for s in &self.stages {
            s.down.register(store, rng)?;
            for (c1, c2) in &s.blocks {
                c1.register(store, rng)?;
                c2.register(store, rng)?;
            }
        }
        Ok(())
    }

    /// Features at strides 2, 4, 8, 16, 32 (spatial sizes halve with ceil).
    pub fn apply<F: Scalar>(
        &self,
        tape: &Tape<F>,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<Vec<Tensor<F>>> {
        let slope = F::from_f64(LEAKY_SLOPE);
        let mut features = Vec::with_capacity(5);
        let mut h = x.clone();
        for s in &self.stages {
            h = s.down.apply(tape, store, &h)?.leaky_relu(slope);
            for (c1, c2) in &s.blocks {
                let b = c1.apply(tape, store, &h)?.leaky_relu(slope);
                let b = c2.apply(tape, store, &b)?;
                h = h.add(&b);
            }
            features.push(h.clone());
        }
        Ok(features)
    }
}
