//! The full encoder-decoder: stem, four encoder stages, four decoder stages,
//! DMR blocks on the five skip routes, and the softmax head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::blocks::{
    apply_bn_updates, decoder_stage, dmr_block, encoder_stage, input_block, output_block, BnUpdate, Ctx,
    DmrBlockParams, InputBlockParams, OutputBlockParams, StageParams, LAYER_OPS,
};
use crate::error::{Error, Result};
use crate::nn::{BnMode, BN_MOMENTUM};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{Rng, Scalar, Tensor};

/// Spatial extents must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    /// ES groups per stage.
    pub repeat: usize,
    /// Width multiplier of the expanding 1×1 conv inside each ES block.
    pub expansion: usize,
    pub use_dmr: bool,
    pub num_classes: usize,
    /// `(H, W)` used for training.
    pub input_size: (usize, usize),
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stem_width: 16,
            stage_widths: [16, 32, 48, 56],
            repeat: 2,
            expansion: 2,
            use_dmr: true,
            num_classes: 2,
            input_size: (256, 256),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and quick experiments.
    pub fn micro() -> Self {
        Self {
            input_channels: 3,
            stem_width: 4,
            stage_widths: [4, 4, 8, 8],
            repeat: 1,
            expansion: 1,
            input_size: (32, 32),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::config("input_channels", format!("must be 1 or 3, got {}", self.input_channels)));
        }
        if self.stem_width == 0 {
            return Err(Error::config("stem_width", "must be positive"));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::config("stage_widths", "must be positive"));
        }
        if self.stage_widths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("stage_widths", format!("must be non-decreasing, got {:?}", self.stage_widths)));
        }
        if self.repeat == 0 {
            return Err(Error::config("repeat", "must be positive"));
        }
        if self.expansion == 0 {
            return Err(Error::config("expansion", "must be positive"));
        }
        if self.num_classes != 2 {
            return Err(Error::config("num_classes", format!("only 2 classes are supported, got {}", self.num_classes)));
        }
        let (h, w) = self.input_size;
        for (v, axis) in [(h, "height"), (w, "width")] {
            if v < 32 || v % SIZE_MULTIPLE != 0 {
                return Err(Error::config(
                    "input_size",
                    format!("{axis} {v} must be at least 32 and divisible by {SIZE_MULTIPLE}"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical text of the fields that determine tensor names and shapes.
    pub fn architecture_key(&self) -> String {
        let w = self.stage_widths;
        format!(
            "in={};stem={};widths={},{},{},{};repeat={};expansion={};dmr={};classes={}",
            self.input_channels,
            self.stem_width,
            w[0],
            w[1],
            w[2],
            w[3],
            self.repeat,
            self.expansion,
            self.use_dmr,
            self.num_classes
        )
    }
}

/// Result of one forward pass on a graph.
pub struct ForwardPass<T: Scalar> {
    /// `(N, 2, H, W)` class probabilities.
    pub probs: Var<T>,
    /// Parameter leaves, indexed like the model's store.
    pub params: Vec<Var<T>>,
    /// Pending running-statistic updates (training mode only).
    pub bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    stem: InputBlockParams,
    encoders: Vec<StageParams>,
    /// Applied deepest first.
    decoders: Vec<StageParams>,
    /// Skips of encoder stages 1 to 4, then the stem bridge.
    dmr: Option<Vec<DmrBlockParams>>,
    head: OutputBlockParams,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(config.seed);
        let mut b = ParamBuilder { store: &mut store, rng: &mut rng };
        let w = config.stage_widths;
        let (r, e) = (config.repeat, config.expansion);

        let stem = InputBlockParams::build(&mut b, "stem", config.input_channels, config.stem_width)?;
        let mut encoders = Vec::with_capacity(4);
        let mut cin = config.stem_width;
        for (i, &width) in w.iter().enumerate() {
            encoders.push(StageParams::encoder(&mut b, &format!("enc{}", i + 1), cin, width, r, e)?);
            cin = width;
        }
        let mut decoders = Vec::with_capacity(4);
        for i in (0..4).rev() {
            let from = if i == 3 { w[3] } else { w[i + 1] };
            decoders.push(StageParams::decoder(&mut b, &format!("dec{}", i + 1), from, w[i], w[i], r, e)?);
        }
        let dmr = if config.use_dmr {
            let mut v = Vec::with_capacity(5);
            for (i, &width) in w.iter().enumerate() {
                v.push(DmrBlockParams::build(&mut b, &format!("dmr{}", i + 1), width)?);
            }
            v.push(DmrBlockParams::build(&mut b, "dmr5", config.stem_width)?);
            Some(v)
        } else {
            None
        };
        let head = OutputBlockParams::build(&mut b, "head", w[0] + config.stem_width)?;
        Ok(Self { config: config.clone(), store, stem, encoders, decoders, dmr, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            encoders: self.encoders.clone(),
            decoders: self.decoders.clone(),
            dmr: self.dmr.clone(),
            head: self.head.clone(),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::invalid(format!("model input must be NCHW, got {shape:?}")));
        }
        if shape[1] != self.config.input_channels {
            return Err(Error::invalid(format!(
                "model expects {} input channels, got {}",
                self.config.input_channels, shape[1]
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::invalid(format!("input extents {h}x{w} are not divisible by {SIZE_MULTIPLE}")));
        }
        Ok(())
    }

    /// Forward pass binding the model's parameters onto `g`.
    pub fn forward(&self, g: &mut Graph<T>, image: &Var<T>, mode: BnMode) -> Result<ForwardPass<T>> {
        let mut ctx = Ctx::new(g, &self.store, mode);
        let probs = self.forward_ctx(&mut ctx, image)?;
        let (params, bn_updates) = ctx.into_parts();
        Ok(ForwardPass { probs, params, bn_updates })
    }

    /// Forward pass through an existing context.
    pub fn forward_ctx(&self, ctx: &mut Ctx<'_, T>, image: &Var<T>) -> Result<Var<T>> {
        self.check_input(image.shape())?;
        let stem = input_block(ctx, image, &self.stem)?;
        let mut x = stem.clone();
        let mut skips = Vec::with_capacity(4);
        for enc in &self.encoders {
            let (f, s) = encoder_stage(ctx, &x, enc)?;
            skips.push(s);
            x = f;
        }
        for (dec, i) in self.decoders.iter().zip((0..4).rev()) {
            let skip = match &self.dmr {
                Some(d) => dmr_block(ctx, &skips[i], &d[i])?,
                None => skips[i].clone(),
            };
            x = decoder_stage(ctx, &x, &skip, dec)?;
        }
        let bridge = match &self.dmr {
            Some(d) => dmr_block(ctx, &stem, &d[4])?,
            None => stem,
        };
        let cat = ctx.g.concat_channels(&x, &bridge)?;
        output_block(ctx, &cat, &self.head)
    }

    /// Inference-mode class probabilities without recording a tape.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let x = g.constant(image.clone());
        let pass = self.forward(&mut g, &x, BnMode::Inference)?;
        Ok(pass.probs.value().clone())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        apply_bn_updates(&mut self.store, updates, BN_MOMENTUM);
    }

    /// Number of trainable scalars, batch-norm affine parameters included.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Trainable scalars of the DMR blocks.
    pub fn dmr_param_count(&self) -> usize {
        (1..=5).map(|i| self.store.trainable_count_with_prefix(&format!("dmr{i}."))).sum()
    }

    /// Trainable scalars per top-level module, in construction order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for id in self.store.trainable_ids() {
            let e = self.store.entry(id);
            let module = e.name.split('.').next().unwrap_or("").to_string();
            match out.last_mut() {
                Some((m, n)) if *m == module => *n += e.value.numel(),
                _ => out.push((module, e.value.numel())),
            }
        }
        out
    }

    /// Elementary layers (convolution, batch norm, relu, pooling,
    /// upsampling, softmax) evaluated in one forward pass.
    pub fn layer_count(&self) -> Result<usize> {
        Ok(self.layer_histogram()?.iter().map(|(_, n)| n).sum())
    }

    /// Per-kind layer counts of one forward pass at the smallest legal size.
    pub fn layer_histogram(&self) -> Result<Vec<(&'static str, usize)>> {
        let c = self.config.input_channels;
        let image = Tensor::zeros(vec![1, c, SIZE_MULTIPLE, SIZE_MULTIPLE])?;
        let mut g = Graph::no_grad();
        let x = g.constant(image);
        self.forward(&mut g, &x, BnMode::Inference)?;
        let counts = g.op_counts();
        Ok(LAYER_OPS.iter().map(|&k| (k, counts.get(k).copied().unwrap_or(0))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_names_fields() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            match c.validate() {
                Err(Error::Config { field, .. }) => field,
                other => panic!("{other:?}"),
            }
        };
        assert_eq!(bad(|c| c.input_channels = 2), "input_channels");
        assert_eq!(bad(|c| c.stage_widths = [32, 16, 48, 56]), "stage_widths");
        assert_eq!(bad(|c| c.input_size = (48, 40)), "input_size");
        assert_eq!(bad(|c| c.input_size = (16, 16)), "input_size");
        assert_eq!(bad(|c| c.repeat = 0), "repeat");
        assert_eq!(bad(|c| c.num_classes = 3), "num_classes");
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::micro().validate().is_ok());
    }

    #[test]
    fn micro_forward_shapes() {
        let m = Model::<f32>::build(&ModelConfig::micro()).unwrap();
        for (h, w) in [(32, 32), (48, 64), (16, 32)] {
            let x = Tensor::zeros(vec![1, 3, h, w]).unwrap();
            assert_eq!(m.predict(&x).unwrap().shape(), &[1, 2, h, w]);
        }
        assert!(m.predict(&Tensor::zeros(vec![1, 3, 40, 32]).unwrap()).is_err());
        assert!(m.predict(&Tensor::zeros(vec![1, 1, 32, 32]).unwrap()).is_err());
    }

    #[test]
    fn breakdown_sums_to_total() {
        let m = Model::<f32>::build(&ModelConfig::micro()).unwrap();
        let total: usize = m.param_breakdown().iter().map(|(_, n)| n).sum();
        assert_eq!(total, m.param_count());
        let names: Vec<String> = m.param_breakdown().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().map(String::as_str), Some("stem"));
        assert_eq!(names.last().map(String::as_str), Some("head"));
    }
}
