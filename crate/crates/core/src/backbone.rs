//! Weather feature extractor: a truncated residual CNN whose spatial output
//! is flattened into a token sequence for the encoder.
//!
//! The network is the standard residual family — 7×7 stem, max-pool, then
//! residual stages — cut off after a configurable number of stages. The
//! truncation point fixes the downsampling stride (stage 1 sits at stride 4,
//! each later stage doubles it) and the channel width `k` of the feature
//! map. The default keeps two stages: stride 8, shallow enough for CPU work
//! while still giving each token a usefully large receptive field.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Result, WxError};
use crate::image::ImagePlane;
use crate::nn::{init, Graph, NodeId, ParamId, ParamStore};

const BN_EPS: f64 = 1e-5;

/// Residual block flavour: two 3×3 convolutions, or the 1×1/3×3/1×1
/// bottleneck with a 4× channel expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Architecture of the truncated backbone. `blocks[i]` is the number of
/// residual blocks in kept stage `i+1`; the vector's length is the
/// truncation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BlockKind,
    /// Channel width of stage 1 (stem output width).
    pub base_width: usize,
    /// Blocks per kept stage; length 1–4 selects the truncation point.
    pub blocks: Vec<usize>,
    /// Expected square input side.
    pub input_size: usize,
    /// Running-statistics update rate for batch normalization.
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl BackboneConfig {
    /// Desk-scale default: an 18-layer-class basic-block network truncated
    /// after stage 2.
    pub fn small() -> Self {
        BackboneConfig {
            kind: BlockKind::Basic,
            base_width: 64,
            blocks: vec![2, 2],
            input_size: 384,
            bn_momentum: 0.1,
        }
    }

    /// The 152-layer-class bottleneck variant truncated after stage 2
    /// (stride 8, k = 512).
    pub fn large() -> Self {
        BackboneConfig {
            kind: BlockKind::Bottleneck,
            base_width: 64,
            blocks: vec![3, 8],
            input_size: 384,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.len() > 4 || self.blocks.contains(&0) {
            return Err(WxError::Config(format!(
                "backbone blocks {:?}: need 1-4 stages with >=1 block each",
                self.blocks
            )));
        }
        if self.base_width == 0 || self.input_size < self.stride() {
            return Err(WxError::Config(format!(
                "backbone base_width {} / input_size {} too small",
                self.base_width, self.input_size
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(WxError::Config(format!("bn_momentum {} outside [0,1]", self.bn_momentum)));
        }
        Ok(())
    }

    /// Total spatial downsampling factor at the truncation point.
    pub fn stride(&self) -> usize {
        4 << (self.blocks.len() - 1)
    }

    /// Channel width `k` of the final kept stage.
    pub fn out_channels(&self) -> usize {
        self.base_width * (1 << (self.blocks.len() - 1)) * self.kind.expansion()
    }

    /// Feature-map side for a square input of `side` pixels (ceil division
    /// at every stride-2 layer, matching the convolution padding).
    pub fn feature_side(&self, side: usize) -> usize {
        let mut s = side;
        for _ in 0..self.blocks.len() + 1 {
            s = s.div_ceil(2);
        }
        s
    }
}

/// Rectangle of source-image pixels that one feature cell summarizes (its
/// stride tile; receptive fields extend beyond it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Spatial feature map `h'×w'×k` with the tile of input pixels behind each
/// cell.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    values: Array3<f64>,
    spatial_origin: Vec<PatchRect>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>, spatial_origin: Vec<PatchRect>) -> Result<Self> {
        let (h, w, k) = values.dim();
        if h == 0 || w == 0 || k == 0 {
            return Err(WxError::shape("FeatureMap", &[1, 1, 1], &[h, w, k]));
        }
        if spatial_origin.len() != h * w {
            return Err(WxError::shape("FeatureMap origins", &[h * w], &[spatial_origin.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(WxError::Numerical("non-finite feature map".into()));
        }
        Ok(FeatureMap { values, spatial_origin })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn spatial_origin(&self) -> &[PatchRect] {
        &self.spatial_origin
    }
}

/// Row-major token matrix with each token's source rectangle.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub tokens: Array2<f64>,
    pub positions: Vec<PatchRect>,
}

/// Row-major stride tiling of an `ih×iw` input by an `fh×fw` feature grid.
/// Edge tiles shrink to the image border, so the rectangles partition the
/// image exactly.
pub fn tiling_map(fh: usize, fw: usize, ih: usize, iw: usize, stride: usize) -> Vec<PatchRect> {
    let mut rects = Vec::with_capacity(fh * fw);
    for i in 0..fh {
        for j in 0..fw {
            let y = i * stride;
            let x = j * stride;
            rects.push(PatchRect {
                y,
                x,
                h: stride.min(ih - y),
                w: stride.min(iw - x),
            });
        }
    }
    rects
}

/// Flattens a feature map row-major and projects each `k`-wide cell to the
/// encoder width with the learned `proj: (k, d_model)` and bias.
pub fn flatten_embed(
    map: &FeatureMap,
    proj: &Array2<f64>,
    bias: &Array1<f64>,
) -> Result<FeatureSequence> {
    let (h, w, k) = map.values.dim();
    if proj.dim().0 != k || bias.len() != proj.dim().1 {
        return Err(WxError::shape("flatten_embed", &[k, bias.len()], &[proj.dim().0, proj.dim().1]));
    }
    let flat = map
        .values
        .to_shape((h * w, k))
        .expect("row-major flatten")
        .into_owned();
    let tokens = flat.dot(proj) + bias.view().insert_axis(Axis(0));
    Ok(FeatureSequence { tokens, positions: map.spatial_origin.clone() })
}

/// Scales an image to `[0, 1]` and lays it out channels-first for the
/// network.
pub fn image_to_chw(img: &ImagePlane) -> Array3<f64> {
    let (h, w, _) = img.pixels().dim();
    let scale = 1.0 / img.i_max();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img.pixels()[[y, x, c]] * scale)
}

/// One convolution + batch-norm unit.
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    stride: usize,
    pad: usize,
    momentum: f64,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.conv.weight"),
            init::kaiming_conv(out_c, in_c, kernel, kernel, rng),
            true,
        );
        ConvBn {
            weight,
            gamma: store.add(format!("{name}.bn.gamma"), init::ones(&[out_c]), true),
            beta: store.add(format!("{name}.bn.beta"), init::zeros(&[out_c]), true),
            running_mean: store.add(format!("{name}.bn.running_mean"), init::zeros(&[out_c]), false),
            running_var: store.add(format!("{name}.bn.running_var"), init::ones(&[out_c]), false),
            stride,
            pad: kernel / 2,
            momentum,
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm2d(y, gamma, beta, self.running_mean, self.running_var, self.momentum, BN_EPS)
    }
}

/// One residual block; `downsample` carries the skip projection when shape
/// changes across the block.
struct Block {
    units: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

impl Block {
    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut y = x;
        for (i, unit) in self.units.iter().enumerate() {
            y = unit.forward(g, y);
            if i + 1 < self.units.len() {
                y = g.relu(y);
            }
        }
        let skip = match &self.downsample {
            Some(d) => d.forward(g, x),
            None => x,
        };
        let sum = g.add(y, skip);
        g.relu(sum)
    }
}

/// The truncated residual feature extractor. Construction registers all
/// parameters (seeded random initialization); weights may then be replaced
/// from a checkpoint via [`Backbone::load_pretrained_weights`].
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
    param_names: Vec<String>,
}

/// What a weight load actually brought in, for run logs.
#[derive(Debug, Clone, Serialize)]
pub struct WeightReport {
    pub tensor_count: usize,
    pub trainable_scalars: usize,
    pub payload_sha256: String,
}

impl Backbone {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let first_new = store.ids().count();
        let momentum = config.bn_momentum;
        let stem = ConvBn::new(store, "backbone.stem", config.base_width, 3, 7, 2, momentum, rng);

        let mut stages = Vec::new();
        let mut in_c = config.base_width;
        for (si, &count) in config.blocks.iter().enumerate() {
            let width = config.base_width << si;
            let out_c = width * config.kind.expansion();
            let mut blocks = Vec::new();
            for bi in 0..count {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("backbone.stage{}.block{}", si + 1, bi);
                let units = match config.kind {
                    BlockKind::Basic => vec![
                        ConvBn::new(store, &format!("{name}.unit0"), out_c, in_c, 3, stride, momentum, rng),
                        ConvBn::new(store, &format!("{name}.unit1"), out_c, out_c, 3, 1, momentum, rng),
                    ],
                    BlockKind::Bottleneck => vec![
                        ConvBn::new(store, &format!("{name}.unit0"), width, in_c, 1, 1, momentum, rng),
                        ConvBn::new(store, &format!("{name}.unit1"), width, width, 3, stride, momentum, rng),
                        ConvBn::new(store, &format!("{name}.unit2"), out_c, width, 1, 1, momentum, rng),
                    ],
                };
                let downsample = if stride != 1 || in_c != out_c {
                    Some(ConvBn::new(store, &format!("{name}.downsample"), out_c, in_c, 1, stride, momentum, rng))
                } else {
                    None
                };
                blocks.push(Block { units, downsample });
                in_c = out_c;
            }
            stages.push(blocks);
        }
        let param_names = store
            .ids()
            .skip(first_new)
            .map(|id| store.name(id).to_string())
            .collect();
        Ok(Backbone { config, stem, stages, param_names })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Names of every tensor this backbone owns (weights, scales, running
    /// statistics), in registration order.
    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    /// Graph forward from `(B, 3, S, S)` to the `(B, k, h', w')` feature
    /// map.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut y = self.stem.forward(g, x);
        y = g.relu(y);
        y = g.max_pool2d(y, 3, 2, 1);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, y);
            }
        }
        y
    }

    /// Eval-mode feature extraction for one image, with the stride tiling
    /// recorded per cell.
    pub fn extract_features(&self, store: &mut ParamStore, img: &ImagePlane) -> Result<FeatureMap> {
        let s = self.config.input_size;
        if img.height() != s || img.width() != s {
            return Err(WxError::shape("extract_features", &[s, s], &[img.height(), img.width()]));
        }
        let chw = image_to_chw(img);
        let mut batch = Array4::zeros((1, 3, s, s));
        batch.index_axis_mut(Axis(0), 0).assign(&chw);

        let mut g = Graph::eval(store);
        let x = g.input(batch.into_dyn());
        let out = self.forward(&mut g, x);
        let v = g.value(out);
        let (k, fh, fw) = (v.shape()[1], v.shape()[2], v.shape()[3]);
        let values = Array3::from_shape_fn((fh, fw, k), |(y, x2, c)| v[[0, c, y, x2]]);
        FeatureMap::new(values, tiling_map(fh, fw, s, s, self.config.stride()))
    }

    /// Replaces this backbone's tensors with the ones stored at `path`.
    /// Every tensor of the truncated prefix must be present with its exact
    /// shape; the payload checksum is logged and returned.
    pub fn load_pretrained_weights(&self, store: &mut ParamStore, path: &Path) -> Result<WeightReport> {
        let container = checkpoint::load(path)?;
        for name in &self.param_names {
            let tensor = container.tensor(name).ok_or_else(|| WxError::Checkpoint {
                name: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            store.load_value(name, tensor.clone())?;
        }
        let trainable_scalars = self
            .param_names
            .iter()
            .map(|n| {
                let id = store.id_of(n).unwrap();
                if store.is_trainable(id) { store.get(id).len() } else { 0 }
            })
            .sum();
        let report = WeightReport {
            tensor_count: self.param_names.len(),
            trainable_scalars,
            payload_sha256: container.payload_sha256,
        };
        log::info!(
            "backbone weights: {} tensors, {} trainable scalars, payload sha256 {}",
            report.tensor_count,
            report.trainable_scalars,
            report.payload_sha256
        );
        Ok(report)
    }

    /// Scalar count across trainable backbone tensors.
    pub fn trainable_scalars(&self, store: &ParamStore) -> usize {
        self.param_names
            .iter()
            .map(|n| {
                let id = store.id_of(n).unwrap();
                if store.is_trainable(id) { store.get(id).len() } else { 0 }
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TensorD;
    use rand::SeedableRng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            kind: BlockKind::Basic,
            base_width: 8,
            blocks: vec![1, 1],
            input_size: 64,
            bn_momentum: 0.1,
        }
    }

    fn build(config: BackboneConfig, seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Backbone::new(config, &mut store, &mut rng).unwrap();
        (store, net)
    }

    fn gradient_image(side: usize) -> ImagePlane {
        let px = Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c * 11) % 256) as f64
        });
        ImagePlane::new(px, 255.0).unwrap()
    }

    #[test]
    fn stride_and_width_follow_truncation_point() {
        let mut c = BackboneConfig::small();
        assert_eq!(c.stride(), 8);
        assert_eq!(c.out_channels(), 128);
        c.blocks = vec![2, 2, 2];
        assert_eq!(c.stride(), 16);
        assert_eq!(c.out_channels(), 256);
        let l = BackboneConfig::large();
        assert_eq!(l.stride(), 8);
        assert_eq!(l.out_channels(), 512);
        assert_eq!(l.feature_side(384), 48);
    }

    #[test]
    fn stride_16_truncation_gives_24x24_tokens_at_384() {
        // Shape oracle: a three-stage truncation downsamples 384 by 16.
        let config = BackboneConfig {
            kind: BlockKind::Basic,
            base_width: 4,
            blocks: vec![1, 1, 1],
            input_size: 384,
            bn_momentum: 0.1,
        };
        assert_eq!(config.stride(), 16);
        let (mut store, net) = build(config, 7);
        let map = net.extract_features(&mut store, &gradient_image(384)).unwrap();
        assert_eq!(map.values().dim(), (24, 24, 16));
    }

    #[test]
    fn eval_forward_is_deterministic_and_finite_on_zeros() {
        let (mut store, net) = build(tiny_config(), 3);
        let zero = ImagePlane::zeros(64, 64, 255.0);
        let a = net.extract_features(&mut store, &zero).unwrap();
        let b = net.extract_features(&mut store, &zero).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().all(|v| v.is_finite()));

        let img = gradient_image(64);
        let c = net.extract_features(&mut store, &img).unwrap();
        let d = net.extract_features(&mut store, &img).unwrap();
        assert_eq!(c.values(), d.values());
    }

    #[test]
    fn rejects_wrong_input_size() {
        let (mut store, net) = build(tiny_config(), 3);
        let err = net.extract_features(&mut store, &gradient_image(32)).unwrap_err();
        assert!(matches!(err, WxError::Shape { .. }));
    }

    #[test]
    fn token_count_is_batch_invariant() {
        // (S / stride)² tokens regardless of batch size.
        let (mut store, net) = build(tiny_config(), 5);
        let img = gradient_image(64);
        let chw = image_to_chw(&img);
        for bsz in [1usize, 3] {
            let mut batch = Array4::zeros((bsz, 3, 64, 64));
            for b in 0..bsz {
                batch.index_axis_mut(Axis(0), b).assign(&chw);
            }
            let mut g = Graph::eval(&mut store);
            let x = g.input(batch.into_dyn());
            let y = net.forward(&mut g, x);
            let tokens = g.nchw_to_tokens(y);
            assert_eq!(g.value(tokens).shape(), &[bsz, 64, 16]);
        }
    }

    #[test]
    fn tiling_partitions_the_image_exactly() {
        for (fh, fw, ih, iw, stride) in [(8, 8, 64, 64, 8), (3, 4, 17, 25, 7)] {
            let rects = tiling_map(fh, fw, ih, iw, stride);
            let mut hits = Array2::<u32>::zeros((ih, iw));
            for r in &rects {
                for y in r.y..r.y + r.h {
                    for x in r.x..r.x + r.w {
                        hits[[y, x]] += 1;
                    }
                }
            }
            assert!(hits.iter().all(|&h| h == 1), "gaps or overlaps in tiling");
        }
    }

    #[test]
    fn flatten_embed_projects_and_keeps_positions() {
        let (mut store, net) = build(tiny_config(), 11);
        let map = net.extract_features(&mut store, &gradient_image(64)).unwrap();
        let k = map.values().dim().2;
        let proj = Array2::from_shape_fn((k, 16), |(i, j)| ((i + 2 * j) as f64 * 0.01).sin());
        let bias = Array1::from_elem(16, 0.5);
        let seq = flatten_embed(&map, &proj, &bias).unwrap();
        assert_eq!(seq.tokens.dim(), (64, 16));
        assert_eq!(seq.positions.len(), 64);
        assert_eq!(seq.positions[9], PatchRect { y: 8, x: 8, h: 8, w: 8 });

        // Row-major flatten: token r is exactly cell (r / w', r % w') projected.
        let cell = map.values().slice(ndarray::s![1, 1, ..]);
        let expect: Array1<f64> = proj.t().dot(&cell) + &bias;
        for j in 0..16 {
            assert!((seq.tokens[[9, j]] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cell_map_yields_single_token() {
        let values = Array3::from_shape_fn((1, 1, 5), |(_, _, c)| c as f64);
        let map = FeatureMap::new(values, tiling_map(1, 1, 8, 8, 8)).unwrap();
        let proj = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let seq = flatten_embed(&map, &proj, &Array1::zeros(3)).unwrap();
        assert_eq!(seq.tokens.dim(), (1, 3));
    }

    #[test]
    fn permuting_cells_permutes_tokens_only() {
        let mut values = Array3::from_shape_fn((2, 2, 3), |(y, x, c)| (y * 6 + x * 3 + c) as f64);
        let map = FeatureMap::new(values.clone(), tiling_map(2, 2, 16, 16, 8)).unwrap();
        let proj = Array2::from_shape_fn((3, 4), |(i, j)| ((i + j) as f64 * 0.1).cos());
        let base = flatten_embed(&map, &proj, &Array1::zeros(4)).unwrap();

        // Swap cells (0,1) and (1,0) → tokens 1 and 2 swap, 0 and 3 stay.
        let tmp = values.slice(ndarray::s![0, 1, ..]).to_owned();
        let other = values.slice(ndarray::s![1, 0, ..]).to_owned();
        values.slice_mut(ndarray::s![0, 1, ..]).assign(&other);
        values.slice_mut(ndarray::s![1, 0, ..]).assign(&tmp);
        let swapped = FeatureMap::new(values, tiling_map(2, 2, 16, 16, 8)).unwrap();
        let perm = flatten_embed(&swapped, &proj, &Array1::zeros(4)).unwrap();

        assert_eq!(perm.tokens.row(0), base.tokens.row(0));
        assert_eq!(perm.tokens.row(1), base.tokens.row(2));
        assert_eq!(perm.tokens.row(2), base.tokens.row(1));
        assert_eq!(perm.tokens.row(3), base.tokens.row(3));
    }

    #[test]
    fn parameter_count_matches_architecture_arithmetic() {
        let (store, net) = build(tiny_config(), 1);
        // Hand count for basic blocks [1, 1], base width 8:
        //   stem: 8·3·7·7 conv + 2·8 bn
        //   stage1.block0: two 3×3 convs 8→8 (576 each) + 2 bn pairs
        //   stage2.block0: 3×3 8→16 (1152), 3×3 16→16 (2304),
        //                  downsample 1×1 8→16 (128), 3 bn pairs of 2·16
        let stem = 8 * 3 * 7 * 7 + 16;
        let stage1 = 576 + 16 + 576 + 16;
        let stage2 = 1152 + 32 + 2304 + 32 + 128 + 32;
        assert_eq!(net.trainable_scalars(&store), stem + stage1 + stage2);
        // Tensor inventory: 3 conv+bn units in stage2 (incl. downsample),
        // each unit contributing 5 tensors (weight, γ, β, 2 running stats).
        assert_eq!(net.param_names().len(), 5 * (1 + 2 + 3));
    }

    #[test]
    fn load_rejects_missing_layer_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.wt");
        let (mut store, net) = build(tiny_config(), 1);
        let mut tensors: Vec<(String, TensorD)> = net
            .param_names()
            .iter()
            .map(|n| (n.clone(), store.get(store.id_of(n).unwrap()).clone()))
            .collect();
        // Full save loads cleanly and reports the architecture's count.
        checkpoint::save(&path, &serde_json::Value::Null, &tensors).unwrap();
        let report = net.load_pretrained_weights(&mut store, &path).unwrap();
        assert_eq!(report.tensor_count, net.param_names().len());
        assert_eq!(report.trainable_scalars, net.trainable_scalars(&store));

        // Drop one layer → error names it.
        let removed = "backbone.stage2.block0.unit1.conv.weight";
        tensors.retain(|(n, _)| n != removed);
        checkpoint::save(&path, &serde_json::Value::Null, &tensors).unwrap();
        let err = net.load_pretrained_weights(&mut store, &path).unwrap_err();
        assert!(err.to_string().contains(removed), "{err}");
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (store_a, net_a) = build(tiny_config(), 42);
        let (store_b, _) = build(tiny_config(), 42);
        let (store_c, _) = build(tiny_config(), 43);
        let mut any_differs = false;
        for name in net_a.param_names() {
            let a = store_a.get(store_a.id_of(name).unwrap());
            let b = store_b.get(store_b.id_of(name).unwrap());
            let c = store_c.get(store_c.id_of(name).unwrap());
            assert_eq!(a, b, "{name} differs across identical seeds");
            if a != c {
                any_differs = true;
            }
        }
        assert!(any_differs, "different seeds produced identical weights");
    }
}
