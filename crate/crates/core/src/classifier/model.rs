use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClassifierError;
use crate::nn::{
    concat_channels, global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, relu,
    relu_backward, resize_nearest, resize_nearest_backward, split_channels, BatchNorm2d, BnCache,
    Conv2d, Gradients, Linear, MaxPoolCache, Mode, ParamStore, Scalar,
};

/// Architecture of the U-net classifier.
///
/// The encoder is the stem and the first `encoder_blocks` stages of a
/// residual network (34-layer layout by default). The decoder walks back up
/// through `min(encoder_blocks, decoder_channels.len())` stages with skip
/// connections, and the head is global average pooling plus one linear
/// layer on the last decoder features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_blocks: usize,
    pub first_conv_stride: usize,
    pub decoder_channels: Vec<usize>,
    pub num_classes: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 2,
            first_conv_stride: 1,
            decoder_channels: vec![64, 32],
            num_classes: 1,
            input_size: 320,
            stem_channels: 64,
            stem_kernel: 7,
            stage_channels: vec![64, 128, 256],
            stage_depths: vec![3, 4, 6],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow variant of the default layout for CPU-scale runs and tests.
    pub fn compact(input_size: usize) -> Self {
        Self {
            decoder_channels: vec![16, 8],
            input_size,
            stem_channels: 8,
            stem_kernel: 3,
            stage_channels: vec![8, 16, 32],
            stage_depths: vec![1, 1, 1],
            ..Self::default()
        }
    }

    /// One encoder stage and a single 32-channel decoder stage. Gives tighter
    /// maps than `compact` on 32-48 px tiles.
    pub fn shallow(input_size: usize) -> Self {
        Self { encoder_blocks: 1, decoder_channels: vec![32], ..Self::compact(input_size) }
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |msg: String| Err(ClassifierError::Config(msg));
        if !(1..=3).contains(&self.encoder_blocks) {
            return bad(format!("encoder_blocks must be 1, 2 or 3, got {}", self.encoder_blocks));
        }
        if !(1..=2).contains(&self.first_conv_stride) {
            return bad(format!("first_conv_stride must be 1 or 2, got {}", self.first_conv_stride));
        }
        if self.stage_channels.len() < self.encoder_blocks || self.stage_depths.len() < self.encoder_blocks {
            return bad(format!("stage_channels/stage_depths must list at least {} stages", self.encoder_blocks));
        }
        if self.stage_depths[..self.encoder_blocks].contains(&0) {
            return bad("every used stage needs at least one block".into());
        }
        if self.decoder_channels.is_empty() || self.decoder_channels.contains(&0) {
            return bad("decoder_channels must be nonempty and positive".into());
        }
        if self.num_classes == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel and class counts must be positive".into());
        }
        if self.stem_kernel % 2 == 0 {
            return bad(format!("stem_kernel must be odd, got {}", self.stem_kernel));
        }
        if self.input_size < 32 {
            return bad(format!("input_size must be at least 32, got {}", self.input_size));
        }
        Ok(())
    }

    pub fn decoder_stages(&self) -> usize {
        self.encoder_blocks.min(self.decoder_channels.len())
    }

    /// Spatial size of the final decoder features for an `h × w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        let mut sizes = vec![(conv_out(h, self.stem_kernel, self.first_conv_stride), conv_out(w, self.stem_kernel, self.first_conv_stride))];
        let pooled = (pool_out(sizes[0].0), pool_out(sizes[0].1));
        sizes.push(pooled);
        for _ in 1..self.encoder_blocks {
            let (a, b) = *sizes.last().expect("nonempty");
            sizes.push((conv_out(a, 3, 2), conv_out(b, 3, 2)));
        }
        sizes[self.encoder_blocks - self.decoder_stages()]
    }
}

fn conv_out(n: usize, k: usize, s: usize) -> usize {
    (n + 2 * (k / 2) - k) / s + 1
}

fn pool_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Array4<T>,
    bn1: BnCache<T>,
    act1: Array4<T>,
    bn2: BnCache<T>,
    downsample: Option<BnCache<T>>,
    output: Array4<T>,
}

impl BasicBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, &format!("{name}.downsample.0"), cin, cout, 1, stride, 0, false, rng),
                BatchNorm2d::new(store, &format!("{name}.downsample.1"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), cout),
            downsample,
        }
    }

    fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>, mode: Mode) -> BlockCache<T> {
        let (h1, bn1) = self.bn1.forward(store, &self.conv1.forward(store, x), mode);
        let act1 = relu(&h1);
        let (h2, bn2) = self.bn2.forward(store, &self.conv2.forward(store, &act1), mode);
        let (skip, downsample) = match &self.downsample {
            Some((conv, bn)) => {
                let (s, c) = bn.forward(store, &conv.forward(store, x), mode);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let output = relu(&(h2 + skip));
        BlockCache { input: x.clone(), bn1, act1, bn2, downsample, output }
    }

    fn backward<T: Scalar>(&self, store: &ParamStore<T>, c: &BlockCache<T>, dout: &Array4<T>, mut grads: Option<&mut Gradients<T>>) -> Array4<T> {
        let dsum = relu_backward(&c.output, dout);
        let dh2 = self.bn2.backward(store, &c.bn2, &dsum, grads.as_deref_mut());
        let dact1 = self.conv2.backward(store, &c.act1, &dh2, grads.as_deref_mut());
        let dh1 = self.bn1.backward(store, &c.bn1, &relu_backward(&c.act1, &dact1), grads.as_deref_mut());
        let mut dx = self.conv1.backward(store, &c.input, &dh1, grads.as_deref_mut());
        match (&self.downsample, &c.downsample) {
            (Some((conv, bn)), Some(bc)) => {
                let ds = bn.backward(store, bc, &dsum, grads.as_deref_mut());
                dx += &conv.backward(store, &c.input, &ds, grads);
            }
            _ => dx += &dsum,
        }
        dx
    }

    fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, c: &BlockCache<T>) {
        let (n, _, h, w) = c.act1.dim();
        self.bn1.update_running(store, &c.bn1, n * h * w);
        self.bn2.update_running(store, &c.bn2, n * h * w);
        if let (Some((_, bn)), Some(bc)) = (&self.downsample, &c.downsample) {
            bn.update_running(store, bc, n * h * w);
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    up_channels: usize,
}

#[derive(Clone, Debug)]
struct DecoderCache<T> {
    deep_dim: (usize, usize),
    joined: Array4<T>,
    bn1: BnCache<T>,
    act1: Array4<T>,
    bn2: BnCache<T>,
    output: Array4<T>,
}

impl DecoderStage {
    fn forward<T: Scalar>(&self, store: &ParamStore<T>, deep: &Array4<T>, skip: &Array4<T>, mode: Mode) -> DecoderCache<T> {
        let (_, _, dh, dw) = deep.dim();
        let (_, _, sh, sw) = skip.dim();
        let joined = concat_channels(&resize_nearest(deep, sh, sw), skip);
        let (h1, bn1) = self.bn1.forward(store, &self.conv1.forward(store, &joined), mode);
        let act1 = relu(&h1);
        let (h2, bn2) = self.bn2.forward(store, &self.conv2.forward(store, &act1), mode);
        let output = relu(&h2);
        DecoderCache { deep_dim: (dh, dw), joined, bn1, act1, bn2, output }
    }

    /// Returns gradients for (deep input, skip input).
    fn backward<T: Scalar>(&self, store: &ParamStore<T>, c: &DecoderCache<T>, dout: &Array4<T>, mut grads: Option<&mut Gradients<T>>) -> (Array4<T>, Array4<T>) {
        let dh2 = self.bn2.backward(store, &c.bn2, &relu_backward(&c.output, dout), grads.as_deref_mut());
        let dact1 = self.conv2.backward(store, &c.act1, &dh2, grads.as_deref_mut());
        let dh1 = self.bn1.backward(store, &c.bn1, &relu_backward(&c.act1, &dact1), grads.as_deref_mut());
        let djoined = self.conv1.backward(store, &c.joined, &dh1, grads);
        let (dup, dskip) = split_channels(&djoined, self.up_channels);
        (resize_nearest_backward(&dup, c.deep_dim.0, c.deep_dim.1), dskip)
    }

    fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, c: &DecoderCache<T>) {
        let (n, _, h, w) = c.act1.dim();
        self.bn1.update_running(store, &c.bn1, n * h * w);
        self.bn2.update_running(store, &c.bn2, n * h * w);
    }
}

/// Everything a forward pass produced that a backward pass needs.
///
/// Owned by the caller, so concurrent attribution calls on one shared model
/// never share gradient state.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    input_dim: (usize, usize, usize, usize),
    input: Array4<T>,
    stem_pre: Array4<T>,
    stem_bn: BnCache<T>,
    /// Outputs per resolution level: stem, then each encoder stage.
    levels: Vec<Array4<T>>,
    pool: MaxPoolCache,
    blocks: Vec<Vec<BlockCache<T>>>,
    decoder: Vec<DecoderCache<T>>,
    pooled: Array2<T>,
    logits: Array2<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Final decoder feature maps `F`, shape `(N, C, H, W)`.
    pub fn features(&self) -> &Array4<T> {
        match self.decoder.last() {
            Some(d) => &d.output,
            None => self.levels.last().expect("at least one level"),
        }
    }

    /// Raw class scores, shape `(N, num_classes)`.
    pub fn logits(&self) -> &Array2<T> {
        &self.logits
    }
}

/// U-net binary classifier with a GAP + linear head on full-resolution decoder features.
#[derive(Clone, Debug)]
pub struct UNetClassifier<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    decoder: Vec<DecoderStage>,
    head: Linear,
}

impl<T: Scalar> UNetClassifier<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ClassifierError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let k = config.stem_kernel;
        let stem = Conv2d::new(&mut store, "conv1", 3, config.stem_channels, k, config.first_conv_stride, k / 2, false, &mut rng);
        let stem_bn = BatchNorm2d::new(&mut store, "bn1", config.stem_channels);
        let mut level_channels = vec![config.stem_channels];
        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        for s in 0..config.encoder_blocks {
            let cout = config.stage_channels[s];
            let blocks = (0..config.stage_depths[s])
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let block = BasicBlock::new(&mut store, &format!("layer{}.{b}", s + 1), cin, cout, stride, &mut rng);
                    cin = cout;
                    block
                })
                .collect();
            stages.push(blocks);
            level_channels.push(cout);
        }
        let mut decoder = Vec::new();
        let mut deep = *level_channels.last().expect("nonempty");
        for i in 0..config.decoder_stages() {
            let skip = level_channels[config.encoder_blocks - 1 - i];
            let cout = config.decoder_channels[i];
            let name = format!("decoder.{i}");
            decoder.push(DecoderStage {
                conv1: Conv2d::new(&mut store, &format!("{name}.conv1"), deep + skip, cout, 3, 1, 1, false, &mut rng),
                bn1: BatchNorm2d::new(&mut store, &format!("{name}.bn1"), cout),
                conv2: Conv2d::new(&mut store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, &mut rng),
                bn2: BatchNorm2d::new(&mut store, &format!("{name}.bn2"), cout),
                up_channels: deep,
            });
            deep = cout;
        }
        let head = Linear::new(&mut store, "fc", deep, config.num_classes, &mut rng);
        Ok(Self { config, store, stem, stem_bn, stages, decoder, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn feature_channels(&self) -> usize {
        self.head.in_features
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> UNetClassifier<U> {
        UNetClassifier {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stem_bn: self.stem_bn.clone(),
            stages: self.stages.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn check_input(&self, x: &Array4<T>) -> Result<(), ClassifierError> {
        let (n, c, h, w) = x.dim();
        if n == 0 || c != 3 || h < 32 || w < 32 {
            return Err(ClassifierError::Shape(format!("expected (N≥1, 3, H≥32, W≥32), got {:?}", x.dim())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> ForwardTrace<T> {
        let s = &self.store;
        let stem_pre = self.stem.forward(s, x);
        let (h, stem_bn) = self.stem_bn.forward(s, &stem_pre, mode);
        let stem_out = relu(&h);
        let (mut cur, pool) = max_pool(&stem_out);
        let mut levels = vec![stem_out];
        let mut blocks = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let c = block.forward(s, &cur, mode);
                cur = c.output.clone();
                caches.push(c);
            }
            blocks.push(caches);
            levels.push(cur.clone());
        }
        let top = self.config.encoder_blocks;
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (i, stage) in self.decoder.iter().enumerate() {
            let c = stage.forward(s, &cur, &levels[top - 1 - i], mode);
            cur = c.output.clone();
            decoder.push(c);
        }
        let pooled = global_avg_pool(&cur);
        let logits = self.head.forward(s, &pooled);
        ForwardTrace { input_dim: x.dim(), input: x.clone(), stem_pre, stem_bn, levels, pool, blocks, decoder, pooled, logits }
    }

    /// Eval-mode logits, shape `(N, num_classes)`.
    pub fn logits(&self, x: &Array4<T>) -> Array2<T> {
        self.forward(x, Mode::Eval).logits
    }

    /// Gradient of `Σ dlogits ⊙ logits` with respect to the decoder features.
    pub fn head_backward(&self, trace: &ForwardTrace<T>, dlogits: &Array2<T>, grads: Option<&mut Gradients<T>>) -> Array4<T> {
        let dpooled = self.head.backward(&self.store, &trace.pooled, dlogits, grads);
        let (_, _, h, w) = trace.features().dim();
        global_avg_pool_backward(&dpooled, h, w)
    }

    /// Back-propagates a feature-space gradient to the input image.
    pub fn backward_features(&self, trace: &ForwardTrace<T>, dfeatures: &Array4<T>, mut grads: Option<&mut Gradients<T>>) -> Array4<T> {
        let s = &self.store;
        let top = self.config.encoder_blocks;
        let mut dlevels: Vec<Array4<T>> = trace.levels.iter().map(|l| Array4::zeros(l.dim())).collect();
        let mut dcur = dfeatures.clone();
        for (i, stage) in self.decoder.iter().enumerate().rev() {
            let (ddeep, dskip) = stage.backward(s, &trace.decoder[i], &dcur, grads.as_deref_mut());
            dlevels[top - 1 - i] += &dskip;
            dcur = ddeep;
        }
        dlevels[top] += &dcur;
        for (si, stage) in self.stages.iter().enumerate().rev() {
            let mut d = std::mem::replace(&mut dlevels[si + 1], Array4::zeros((0, 0, 0, 0)));
            for (bi, block) in stage.iter().enumerate().rev() {
                d = block.backward(s, &trace.blocks[si][bi], &d, grads.as_deref_mut());
            }
            if si == 0 {
                dlevels[0] += &max_pool_backward(&trace.pool, &d);
            } else {
                dlevels[si] += &d;
            }
        }
        let dstem = relu_backward(&trace.levels[0], &dlevels[0]);
        let dpre = self.stem_bn.backward(s, &trace.stem_bn, &dstem, grads.as_deref_mut());
        let dx = self.stem.backward(s, &trace.input, &dpre, grads);
        debug_assert_eq!(dx.dim(), trace.input_dim);
        dx
    }

    /// Full backward pass from logit gradients to the input image.
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Array2<T>, mut grads: Option<&mut Gradients<T>>) -> Array4<T> {
        let df = self.head_backward(trace, dlogits, grads.as_deref_mut());
        self.backward_features(trace, &df, grads)
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace<T>) {
        let (n, _, h, w) = trace.stem_pre.dim();
        self.stem_bn.update_running(&mut self.store, &trace.stem_bn, n * h * w);
        for (stage, caches) in self.stages.iter().zip(&trace.blocks) {
            for (block, c) in stage.iter().zip(caches) {
                block.update_running(&mut self.store, c);
            }
        }
        for (stage, c) in self.decoder.iter().zip(&trace.decoder) {
            stage.update_running(&mut self.store, c);
        }
    }
}
