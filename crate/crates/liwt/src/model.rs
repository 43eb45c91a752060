//! The full super-resolution network.
//!
//! An image passes through five stages. The encoder lifts RGB to a C-wide
//! feature map at input resolution. That map is analyzed into wavelet
//! subbands, and the band mixer refines the low band and the stacked high
//! bands through exchange blocks before fusing them into a single
//! half-resolution map, which is upsampled back bicubically. The channel
//! gate blends the upsampled map with the encoder features under a
//! squeeze-excitation weighting. Each query point then attends over a 3x3
//! neighborhood of latent codes, with a learned bias on the relative
//! offsets, and a small MLP decodes the attended codes plus the query cell
//! size into an RGB residual on top of bilinear interpolation.
//!
//! All tensors are `[h, w, c]` row-major. Queries live in the continuous
//! `[-1, 1]^2` coordinate system of the `coords` module.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::coords::{self, CoordSpace};
use crate::nn::{self, Conv2d, Linear, Resample};
use crate::tensor::{no_grad, Scalar, Tensor};
use crate::wavelet;

/// Hidden width of the decoder MLP.
const DECODER_WIDTH: usize = 256;
/// Spatial extent of the attended latent neighborhood.
const GRID: usize = 9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("low-res input must have even spatial extents, got {h}x{w}; pad or crop upstream")]
    OddExtents { h: usize, w: usize },
}

#[derive(Debug, Error)]
pub enum StateError {
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint contains unknown tensor `{0}`")]
    Unknown(String),
}

struct ResBlock<T: Scalar> {
    c1: Conv2d<T>,
    c2: Conv2d<T>,
}

/// Residual convolutional feature extractor, RGB to C channels.
pub struct Encoder<T: Scalar> {
    head: Conv2d<T>,
    blocks: Vec<ResBlock<T>>,
    tail: Conv2d<T>,
}

impl<T: Scalar> Encoder<T> {
    fn new(rng: &mut ChaCha8Rng, c: usize, blocks: usize) -> Self {
        Encoder {
            head: Conv2d::new(rng, 3, 3, c),
            blocks: (0..blocks)
                .map(|_| ResBlock {
                    c1: Conv2d::new(rng, 3, c, c),
                    c2: Conv2d::new(rng, 3, c, c),
                })
                .collect(),
            tail: Conv2d::new(rng, 3, c, c),
        }
    }

    fn forward(&self, img: &Tensor<T>) -> Tensor<T> {
        let head = self.head.apply(img);
        let mut x = head.clone();
        for b in &self.blocks {
            x = x.add(&b.c2.apply(&b.c1.apply(&x).relu()));
        }
        self.tail.apply(&x).add(&head)
    }
}

/// Two-branch refinement of the low band: a plain conv branch and a
/// max-pooled conv branch, fused 1x1. Pooling keeps local maxima, so the
/// second branch emphasizes sharp detail against the smooth surface.
struct DetailBranch<T: Scalar> {
    plain: Conv2d<T>,
    pooled: Conv2d<T>,
    fuse: Conv2d<T>,
}

impl<T: Scalar> DetailBranch<T> {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        DetailBranch {
            plain: Conv2d::new(rng, 3, c, c),
            pooled: Conv2d::new(rng, 3, c, c),
            fuse: Conv2d::new(rng, 1, 2 * c, c),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let a = self.plain.apply(x).relu();
        let b = self.pooled.apply(&nn::maxpool3x3(x)).relu();
        self.fuse.apply(&Tensor::concat(&[&a, &b], 2))
    }
}

/// One exchange step between the low and high band paths. Each path
/// refines its own input, the refinements are fused, and the fusion is
/// added back to both so the paths share information.
struct ExchangeBlock<T: Scalar> {
    detail: DetailBranch<T>,
    h1: Conv2d<T>,
    h2: Conv2d<T>,
    fuse: Conv2d<T>,
}

impl<T: Scalar> ExchangeBlock<T> {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        ExchangeBlock {
            detail: DetailBranch::new(rng, c),
            h1: Conv2d::new(rng, 3, c, c),
            h2: Conv2d::new(rng, 3, c, c),
            fuse: Conv2d::new(rng, 3, 2 * c, c),
        }
    }

    fn forward(&self, low: &Tensor<T>, high: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let a = self.detail.forward(low);
        let b = self.h2.apply(&self.h1.apply(high).relu());
        let fused = self.fuse.apply(&Tensor::concat(&[&a, &b], 2));
        (a.add(&fused), b.add(&fused))
    }
}

/// Chains exchange blocks over the subband features and fuses them into
/// one C-wide map, with a residual skip from the high-band pre-conv.
struct BandMixer<T: Scalar> {
    pre_low: Conv2d<T>,
    pre_high: Conv2d<T>,
    blocks: Vec<ExchangeBlock<T>>,
    fuse: Conv2d<T>,
}

impl<T: Scalar> BandMixer<T> {
    fn new(rng: &mut ChaCha8Rng, c: usize, blocks: usize) -> Self {
        BandMixer {
            pre_low: Conv2d::new(rng, 3, c, c),
            pre_high: Conv2d::new(rng, 3, 3 * c, c),
            blocks: (0..blocks).map(|_| ExchangeBlock::new(rng, c)).collect(),
            fuse: Conv2d::new(rng, 3, 2 * c, c),
        }
    }

    fn forward(&self, low_band: &Tensor<T>, high_bands: &Tensor<T>) -> Tensor<T> {
        let high0 = self.pre_high.apply(high_bands);
        let mut low = self.pre_low.apply(low_band);
        let mut high = high0.clone();
        for b in &self.blocks {
            (low, high) = b.forward(&low, &high);
        }
        self.fuse.apply(&Tensor::concat(&[&low, &high], 2)).add(&high0)
    }
}

/// Squeeze-excitation blend of the upsampled mixer output with the
/// encoder features: global pooling drives a per-channel gate, and a 1x1
/// conv projects the gated stack back to C channels.
struct ChannelGate<T: Scalar> {
    squeeze: Linear<T>,
    excite: Linear<T>,
    out: Conv2d<T>,
}

impl<T: Scalar> ChannelGate<T> {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        let mid = (2 * c / 4).max(1);
        ChannelGate {
            squeeze: Linear::new(rng, 2 * c, mid),
            excite: Linear::new(rng, mid, 2 * c),
            out: Conv2d::new(rng, 1, 2 * c, c),
        }
    }

    fn forward(&self, mixed_up: &Tensor<T>, z: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (z.shape()[0], z.shape()[1]);
        let c2 = mixed_up.shape()[2] + z.shape()[2];
        let u = Tensor::concat(&[mixed_up, z], 2);
        let pooled = nn::global_avg_pool(&u).reshape(&[1, c2]);
        let gate = self
            .excite
            .apply(&self.squeeze.apply(&pooled).relu())
            .sigmoid()
            .reshape(&[c2]);
        let flat = u.reshape(&[h * w, c2]);
        let gated = flat.col_scale(&gate).add(&flat).reshape(&[h, w, c2]);
        self.out.apply(&gated)
    }
}

/// Projections and heads for the per-query neighborhood attention.
struct LocalAttention<T: Scalar> {
    q_proj: Conv2d<T>,
    k_proj: Conv2d<T>,
    v_proj: Conv2d<T>,
    value_fuse: Linear<T>,
    offset_bias: Linear<T>,
    heads: usize,
    levels: usize,
}

impl<T: Scalar> LocalAttention<T> {
    fn new(rng: &mut ChaCha8Rng, c: usize, heads: usize, levels: usize) -> Self {
        assert_eq!(c % heads, 0, "feature width {c} not divisible by {heads} heads");
        LocalAttention {
            q_proj: Conv2d::new(rng, 3, c, c),
            k_proj: Conv2d::new(rng, 3, c, c),
            v_proj: Conv2d::new(rng, 3, c, c),
            value_fuse: Linear::new(rng, 2 * c, c),
            offset_bias: Linear::new(rng, 4 * levels, heads),
            heads,
            levels,
        }
    }
}

/// Multi-head scores and mixing over a 9-row neighborhood, batched over
/// `m` queries. `q` is `[m, c]`; `k` and `v_f` are `[9m, c]` with the 9
/// rows of each query contiguous; `bias` is `[m, 9, heads]`. Returns the
/// weighted values flattened to `[m, 9c]` (rows are scaled, not summed,
/// head slices side by side) and the attention weights `[m, 9, heads]`.
fn attention_mix<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v_f: &Tensor<T>,
    bias: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (m, c) = (q.shape()[0], q.shape()[1]);
    let d_head = c / heads;
    let rep: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(GRID)).collect();
    let q_rep = q.gather_rows(&rep);

    let scores = q_rep
        .mul(k)
        .reshape(&[GRID * m * heads, d_head])
        .sum_axis2d(1)
        .scale(T::from_f64(1.0 / (d_head as f64).sqrt()));
    let logits = scores.add(&bias.reshape(&[GRID * m * heads]));
    let weights = logits.reshape(&[m, GRID, heads]).softmax(1);

    let mixed = v_f
        .reshape(&[GRID * m * heads, d_head])
        .row_scale(&weights.reshape(&[GRID * m * heads]))
        .reshape(&[m, GRID * c]);
    (mixed, weights)
}

/// Five linear layers with ReLU between, mapping attended codes plus the
/// scaled cell size to an RGB residual.
struct Decoder<T: Scalar> {
    layers: Vec<Linear<T>>,
}

impl<T: Scalar> Decoder<T> {
    fn new(rng: &mut ChaCha8Rng, d_in: usize) -> Self {
        let dims = [d_in, DECODER_WIDTH, DECODER_WIDTH, DECODER_WIDTH, DECODER_WIDTH, 3];
        let mut layers: Vec<Linear<T>> = dims
            .windows(2)
            .map(|d| Linear::new(rng, d[0], d[1]))
            .collect();
        // damp the initial residual so a fresh model starts near the
        // bilinear baseline
        let last = layers.last_mut().unwrap();
        let damped: Vec<T> = last.w.data().iter().map(|&v| v * T::from_f64(0.1)).collect();
        last.w = Tensor::param(&last.w.shape().to_vec(), damped);
        Decoder { layers }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(&h);
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        h
    }
}

/// Shared per-image maps, computed once and reused across query batches.
pub struct Features<T: Scalar> {
    space: CoordSpace,
    q_flat: Tensor<T>,
    k_flat: Tensor<T>,
    v_flat: Tensor<T>,
    gated_flat: Tensor<T>,
}

pub struct LiwtModel<T: Scalar> {
    encoder: Encoder<T>,
    mixer: BandMixer<T>,
    gate: ChannelGate<T>,
    attention: LocalAttention<T>,
    decoder: Decoder<T>,
    width: usize,
}

impl<T: Scalar> LiwtModel<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.feature_width;
        LiwtModel {
            encoder: Encoder::new(rng, c, cfg.encoder_blocks),
            mixer: BandMixer::new(rng, c, cfg.werb_count),
            gate: ChannelGate::new(rng, c),
            attention: LocalAttention::new(rng, c, cfg.attention_heads, cfg.encoding_depth),
            decoder: Decoder::new(rng, GRID * c + 2),
            width: c,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Runs every per-image stage: encoding, subband analysis and mixing,
    /// bicubic return to input resolution, gating, and the q/k/v
    /// projections, flattened for row gathering.
    pub fn features(&self, img: &Tensor<T>) -> Result<Features<T>, ModelError> {
        assert_eq!(img.shape().len(), 3, "features: need [h, w, 3], got {:?}", img.shape());
        let (h, w) = (img.shape()[0], img.shape()[1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ModelError::OddExtents { h, w });
        }
        let c = self.width;
        let z = self.encoder.forward(img);
        let (low, high) = wavelet::split_freq(&wavelet::dwt(&z));
        let mixed = self.mixer.forward(&low, &high);
        let mixed_up = nn::resample(&mixed, h, w, Resample::Bicubic);
        let gated = self.gate.forward(&mixed_up, &z);
        let flat = |t: &Tensor<T>| t.reshape(&[h * w, c]);
        Ok(Features {
            space: CoordSpace::new(h, w),
            q_flat: flat(&self.attention.q_proj.apply(&mixed_up)),
            k_flat: flat(&self.attention.k_proj.apply(&z)),
            v_flat: flat(&self.attention.v_proj.apply(&z)),
            gated_flat: flat(&gated),
        })
    }

    /// Attended neighborhood codes for a batch of queries: `[m, 9c]`
    /// mixed values and `[m, 9, heads]` attention weights.
    fn attend(&self, feats: &Features<T>, queries: &[(f64, f64)]) -> (Tensor<T>, Tensor<T>) {
        assert!(!queries.is_empty(), "attend: empty query batch");
        let m = queries.len();
        let att = &self.attention;
        let mut center_idx = Vec::with_capacity(m);
        let mut grid_idx = Vec::with_capacity(m * GRID);
        let mut gamma_rows = Vec::with_capacity(m * GRID * 4 * att.levels);
        for &q in queries {
            let grid = coords::local_grid(&feats.space, q);
            center_idx.push(feats.space.flat(grid.indices[4].0, grid.indices[4].1));
            for r in 0..GRID {
                grid_idx.push(feats.space.flat(grid.indices[r].0, grid.indices[r].1));
                coords::gamma(grid.deltas[r], att.levels, &mut gamma_rows);
            }
        }
        let gamma_rows: Vec<T> = gamma_rows.into_iter().map(T::from_f64).collect();
        let encoded = Tensor::from_vec(&[m * GRID, 4 * att.levels], gamma_rows);
        let bias = att.offset_bias.apply(&encoded).reshape(&[m, GRID, att.heads]);

        let q = feats.q_flat.gather_rows(&center_idx);
        let k = feats.k_flat.gather_rows(&grid_idx);
        let v = feats.v_flat.gather_rows(&grid_idx);
        let f = feats.gated_flat.gather_rows(&grid_idx);
        let v_f = att.value_fuse.apply(&Tensor::concat(&[&v, &f], 1)).add(&v);
        attention_mix(&q, &k, &v_f, &bias, att.heads)
    }

    /// Per-head attention weights `[m, 9, heads]` for inspection.
    pub fn attention_weights(&self, feats: &Features<T>, queries: &[(f64, f64)]) -> Tensor<T> {
        self.attend(feats, queries).1
    }

    /// Unclamped RGB at each query: decoded residual plus the bilinear
    /// sample of the input at the same point. `[m, 3]`.
    pub fn query_rgb(
        &self,
        feats: &Features<T>,
        img: &Tensor<T>,
        queries: &[(f64, f64)],
        cell_scaled: (f64, f64),
    ) -> Tensor<T> {
        let m = queries.len();
        let (mixed, _) = self.attend(feats, queries);
        let mut cell_rows = Vec::with_capacity(2 * m);
        for _ in 0..m {
            cell_rows.push(T::from_f64(cell_scaled.0));
            cell_rows.push(T::from_f64(cell_scaled.1));
        }
        let cells = Tensor::from_vec(&[m, 2], cell_rows);
        let residual = self.decoder.forward(&Tensor::concat(&[&mixed, &cells], 1));
        let base = Tensor::from_vec(&[m, 3], nn::sample_bilinear_values(img, queries));
        residual.add(&base)
    }

    /// Full pass over one image and one query batch.
    pub fn forward(
        &self,
        img: &Tensor<T>,
        queries: &[(f64, f64)],
        cell_scaled: (f64, f64),
    ) -> Result<Tensor<T>, ModelError> {
        let feats = self.features(img)?;
        Ok(self.query_rgb(&feats, img, queries, cell_scaled))
    }

    /// Zeroes the decoder output layer, which collapses the model to the
    /// bilinear baseline exactly.
    pub fn zero_output_layer(&mut self) {
        let last = self.decoder.layers.last_mut().unwrap();
        last.w = Tensor::param(&last.w.shape().to_vec(), vec![T::ZERO; last.w.len()]);
        last.b = Tensor::param(&last.b.shape().to_vec(), vec![T::ZERO; last.b.len()]);
    }

    /// Every trainable tensor with a stable name, in a fixed order. The
    /// single enumeration point for the optimizer, checkpoints, and
    /// gradient checks.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        // conv and linear layers both expose `w` and `b` fields
        macro_rules! push_wb {
            ($name:expr, $layer:expr) => {{
                let name = $name;
                let layer = $layer;
                out.push((format!("{name}.w"), &mut layer.w));
                out.push((format!("{name}.b"), &mut layer.b));
            }};
        }

        push_wb!("encoder.head", &mut self.encoder.head);
        for (i, blk) in self.encoder.blocks.iter_mut().enumerate() {
            push_wb!(format!("encoder.block{i}.c1"), &mut blk.c1);
            push_wb!(format!("encoder.block{i}.c2"), &mut blk.c2);
        }
        push_wb!("encoder.tail", &mut self.encoder.tail);

        push_wb!("mixer.pre_low", &mut self.mixer.pre_low);
        push_wb!("mixer.pre_high", &mut self.mixer.pre_high);
        for (i, blk) in self.mixer.blocks.iter_mut().enumerate() {
            push_wb!(format!("mixer.block{i}.detail.plain"), &mut blk.detail.plain);
            push_wb!(format!("mixer.block{i}.detail.pooled"), &mut blk.detail.pooled);
            push_wb!(format!("mixer.block{i}.detail.fuse"), &mut blk.detail.fuse);
            push_wb!(format!("mixer.block{i}.h1"), &mut blk.h1);
            push_wb!(format!("mixer.block{i}.h2"), &mut blk.h2);
            push_wb!(format!("mixer.block{i}.fuse"), &mut blk.fuse);
        }
        push_wb!("mixer.fuse", &mut self.mixer.fuse);

        push_wb!("gate.squeeze", &mut self.gate.squeeze);
        push_wb!("gate.excite", &mut self.gate.excite);
        push_wb!("gate.out", &mut self.gate.out);

        push_wb!("attention.q", &mut self.attention.q_proj);
        push_wb!("attention.k", &mut self.attention.k_proj);
        push_wb!("attention.v", &mut self.attention.v_proj);
        push_wb!("attention.value_fuse", &mut self.attention.value_fuse);
        push_wb!("attention.offset_bias", &mut self.attention.offset_bias);

        for (i, l) in self.decoder.layers.iter_mut().enumerate() {
            push_wb!(format!("decoder.fc{i}"), l);
        }
        out
    }

    /// Clones of all parameters with their names.
    pub fn state(&mut self) -> Vec<(String, Tensor<T>)> {
        self.params_mut()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Replaces every parameter from a named list, validating coverage
    /// and shapes. Incoming data is re-wrapped as fresh parameters.
    pub fn load_state(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<(), StateError> {
        let mut seen = vec![false; tensors.len()];
        for (name, slot) in self.params_mut() {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| StateError::Missing(name.clone()))?;
            let t = &tensors[pos].1;
            if t.shape() != slot.shape() {
                return Err(StateError::Shape {
                    name,
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = Tensor::param(&t.shape().to_vec(), t.data().to_vec());
            seen[pos] = true;
        }
        if let Some(pos) = seen.iter().position(|&s| !s) {
            return Err(StateError::Unknown(tensors[pos].0.clone()));
        }
        Ok(())
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Gradient-check group of a parameter, keyed off its name.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("attention.offset_bias") {
        "offset_bias"
    } else if name.starts_with("encoder.") {
        "encoder"
    } else if name.starts_with("mixer.") {
        "mixer"
    } else if name.starts_with("gate.") {
        "gate"
    } else if name.starts_with("attention.") {
        "attention"
    } else {
        "decoder"
    }
}

pub struct GroupReport {
    pub group: &'static str,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub probes: usize,
}

/// Central finite-difference check of the analytic gradients of the L1
/// loss, run in f64. Every parameter tensor is probed at a deterministic
/// sample of coordinates and the worst relative error is reported per
/// parameter group. Exhaustive probing is quadratic in parameter count,
/// which is why coordinates are sampled.
pub fn finite_difference_check(
    cfg: &ModelConfig,
    img: &Tensor<f64>,
    queries: &[(f64, f64)],
    cell_scaled: (f64, f64),
    probes_per_tensor: usize,
    seed: u64,
) -> Vec<GroupReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = LiwtModel::<f64>::new(cfg, &mut rng);
    let target_data: Vec<f64> = (0..queries.len() * 3)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let target = Tensor::from_vec(&[queries.len(), 3], target_data);
    let loss_of = |m: &LiwtModel<f64>| {
        no_grad(|| {
            m.forward(img, queries, cell_scaled)
                .expect("extents validated by caller")
                .l1(&target)
                .item()
        })
    };

    let named = model.state();
    model
        .forward(img, queries, cell_scaled)
        .expect("extents validated by caller")
        .l1(&target)
        .backward();
    let grads: Vec<Vec<f64>> = named
        .iter()
        .map(|(n, t)| t.grad().unwrap_or_else(|| panic!("no gradient reached {n}")))
        .collect();

    let mut reports: Vec<GroupReport> = ["encoder", "mixer", "gate", "attention", "offset_bias", "decoder"]
        .into_iter()
        .map(|group| GroupReport {
            group,
            max_rel_err: 0.0,
            worst_param: String::new(),
            probes: 0,
        })
        .collect();

    let h = 1e-5;
    for (k, (name, orig)) in named.iter().enumerate() {
        let n = orig.len();
        let picks = rand::seq::index::sample(&mut rng, n, probes_per_tensor.min(n)).into_vec();
        let shape = orig.shape().to_vec();
        for ci in picks {
            let mut probe = |delta: f64| {
                let mut data = orig.data().to_vec();
                data[ci] += delta;
                *model.params_mut()[k].1 = Tensor::param(&shape, data);
                loss_of(&model)
            };
            let plus = probe(h);
            let minus = probe(-h);
            *model.params_mut()[k].1 = orig.clone();

            let numeric = (plus - minus) / (2.0 * h);
            let err = crate::tensor::grad_err(grads[k][ci], numeric);
            let report = reports
                .iter_mut()
                .find(|r| r.group == param_group(name))
                .unwrap();
            report.probes += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{name}[{ci}]");
            }
        }
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::hr_query_coords;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feature_width: 8,
            encoder_blocks: 1,
            werb_count: 1,
            attention_heads: 2,
            encoding_depth: 4,
        }
    }

    fn rand_img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
        let data = (0..h * w * 3).map(|_| rng.random_range(0.0f32..1.0)).collect();
        Tensor::from_vec(&[h, w, 3], data)
    }

    fn zero_conv(c: &mut Conv2d<f32>) {
        c.w = Tensor::param(&c.w.shape().to_vec(), vec![0.0; c.w.len()]);
        c.b = Tensor::param(&c.b.shape().to_vec(), vec![0.0; c.b.len()]);
    }

    fn zero_matching(model: &mut LiwtModel<f32>, prefix: &str) {
        for (name, slot) in model.params_mut() {
            if name.starts_with(prefix) {
                *slot = Tensor::param(&slot.shape().to_vec(), vec![0.0; slot.len()]);
            }
        }
    }

    #[test]
    fn encoder_zero_image_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::<f32>::new(&mut rng, 8, 2);
        let out = enc.forward(&Tensor::zeros(&[6, 6, 3]));
        assert_eq!(out.shape(), &[6, 6, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_without_blocks_is_head_tail_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::<f32>::new(&mut rng, 4, 0);
        let x = rand_img(&mut rng, 6, 6);
        let head = enc.head.apply(&x);
        let expected = enc.tail.apply(&head).add(&head);
        assert_eq!(enc.forward(&x).data(), expected.data());
    }

    #[test]
    fn detail_branch_pool_vanishes_on_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let branch = DetailBranch::<f32>::new(&mut rng, 4);
        let x = Tensor::full(&[5, 5, 4], 0.37f32);
        let a = branch.plain.apply(&x).relu();
        let b = branch.pooled.apply(&x).relu();
        let expected = branch.fuse.apply(&Tensor::concat(&[&a, &b], 2));
        assert_eq!(branch.forward(&x).data(), expected.data());
    }

    #[test]
    fn exchange_block_zero_inputs_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blk = ExchangeBlock::<f32>::new(&mut rng, 4);
        let z = Tensor::zeros(&[4, 4, 4]);
        let (l, h) = blk.forward(&z, &z);
        assert_eq!(l.shape(), &[4, 4, 4]);
        assert_eq!(h.shape(), &[4, 4, 4]);
        assert!(l.data().iter().all(|&v| v == 0.0));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_mixer_falls_back_to_high_skip_when_blocks_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mixer = BandMixer::<f32>::new(&mut rng, 4, 2);
        for blk in &mut mixer.blocks {
            zero_conv(&mut blk.detail.plain);
            zero_conv(&mut blk.detail.pooled);
            zero_conv(&mut blk.detail.fuse);
            zero_conv(&mut blk.h1);
            zero_conv(&mut blk.h2);
            zero_conv(&mut blk.fuse);
        }
        let low: Vec<f32> = (0..4 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let low = Tensor::from_vec(&[4, 4, 4], low);
        let high: Vec<f32> = (0..4 * 4 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let high = Tensor::from_vec(&[4, 4, 12], high);
        let out = mixer.forward(&low, &high);
        let skip = mixer.pre_high.apply(&high);
        assert_eq!(out.data(), skip.data());
    }

    #[test]
    fn channel_gate_halves_when_excite_is_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut gate = ChannelGate::<f32>::new(&mut rng, 4);
        gate.excite.w = Tensor::param(&gate.excite.w.shape().to_vec(), vec![0.0; gate.excite.w.len()]);
        let a: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = Tensor::from_vec(&[4, 4, 4], a);
        let b = Tensor::from_vec(&[4, 4, 4], (0..64).map(|i| i as f32 / 64.0).collect());
        let out = gate.forward(&a, &b);
        // gate coefficients are sigmoid(0) = 1/2, so the conv sees 1.5 u
        let u = Tensor::concat(&[&a, &b], 2).scale(1.5f32);
        let expected = gate.out.apply(&u);
        for (x, y) in out.data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_mix_is_uniform_for_equal_scores() {
        let q = Tensor::from_vec(&[1, 4], vec![0.3f64, -0.2, 0.9, 0.4]);
        let k = Tensor::from_vec(&[9, 4], [0.5f64, 1.0, -0.5, 2.0].repeat(9));
        let vf_data: Vec<f64> = (0..36).map(|i| i as f64).collect();
        let v_f = Tensor::from_vec(&[9, 4], vf_data.clone());
        let bias = Tensor::zeros(&[1, 9, 2]);
        let (mixed, weights) = attention_mix(&q, &k, &v_f, &bias, 2);
        for &w in weights.data() {
            assert!((w - 1.0 / 9.0).abs() < 1e-12);
        }
        assert_eq!(mixed.shape(), &[1, 36]);
        for (i, &v) in mixed.data().iter().enumerate() {
            assert!((v - vf_data[i] / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_mix_locks_onto_dominant_key() {
        let qv = vec![1.0f64, 0.0, 0.0, 1.0];
        let q = Tensor::from_vec(&[1, 4], qv.clone());
        let mut kd = vec![0.0f64; 36];
        for (j, &qj) in qv.iter().enumerate() {
            kd[3 * 4 + j] = 10.0 * qj;
        }
        let k = Tensor::from_vec(&[9, 4], kd);
        let vf_data: Vec<f64> = (0..36).map(|i| (i as f64).sin()).collect();
        let v_f = Tensor::from_vec(&[9, 4], vf_data.clone());
        let bias = Tensor::zeros(&[1, 9, 2]);
        let (mixed, weights) = attention_mix(&q, &k, &v_f, &bias, 2);
        let wd = weights.data();
        for tau in 0..2 {
            assert!(wd[3 * 2 + tau] > 0.99, "row-3 weight {}", wd[3 * 2 + tau]);
        }
        // dominant row keeps nearly its full value, the rest shrink to near 0
        for j in 0..4 {
            assert!((mixed.data()[3 * 4 + j] - vf_data[3 * 4 + j]).abs() < 0.02);
            assert!(mixed.data()[j].abs() < 0.02);
        }
    }

    #[test]
    fn attention_weights_sum_to_one_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng);
        let img = rand_img(&mut rng, 6, 6);
        let feats = model.features(&img).unwrap();
        let (_, _, queries) = hr_query_coords(6, 6, 1.7, 1.7);
        let w = model.attention_weights(&feats, &queries);
        let (m, heads) = (queries.len(), 2);
        assert_eq!(w.shape(), &[m, 9, heads]);
        let wd = w.data();
        for i in 0..m {
            for tau in 0..heads {
                let mut sum = 0.0f32;
                for r in 0..9 {
                    let v = wd[(i * 9 + r) * heads + tau];
                    assert!(v >= 0.0);
                    sum += v;
                }
                assert!((sum - 1.0).abs() < 1e-6, "query {i} head {tau}: {sum}");
            }
        }
    }

    #[test]
    fn attention_uniform_when_keys_and_bias_are_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng);
        zero_matching(&mut model, "attention.k");
        zero_matching(&mut model, "attention.offset_bias");
        let img = rand_img(&mut rng, 4, 4);
        let feats = model.features(&img).unwrap();
        let w = model.attention_weights(&feats, &[(0.1, -0.3), (0.7, 0.7)]);
        for &v in w.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn forward_count_follows_the_scale_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng);
        let img = rand_img(&mut rng, 10, 10);
        for (s, want) in [(2.0, 400), (2.2, 484), (1.3, 169)] {
            let (ho, wo, queries) = hr_query_coords(10, 10, s, s);
            assert_eq!(ho * wo, want);
            let out = model
                .forward(&img, &queries, coords::cell_scaled(s, s))
                .unwrap();
            assert_eq!(out.shape(), &[want, 3]);
        }
    }

    #[test]
    fn zeroed_output_layer_reduces_to_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng);
        model.zero_output_layer();
        let img = rand_img(&mut rng, 8, 8);
        let (_, _, queries) = hr_query_coords(8, 8, 2.3, 2.3);
        let out = model
            .forward(&img, &queries, coords::cell_scaled(2.3, 2.3))
            .unwrap();
        let base = nn::sample_bilinear_values(&img, &queries);
        assert_eq!(out.data(), &base[..]);
    }

    #[test]
    fn odd_extents_are_rejected_with_both_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng);
        let img = Tensor::zeros(&[5, 4, 3]);
        let err = model.forward(&img, &[(0.0, 0.0)], (1.0, 1.0)).unwrap_err();
        assert!(err.to_string().contains("5x4"), "{err}");
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let img_rng = &mut ChaCha8Rng::seed_from_u64(99);
        let img = rand_img(img_rng, 6, 6);
        let (_, _, queries) = hr_query_coords(6, 6, 2.0, 2.0);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let model = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng);
            model
                .forward(&img, &queries, coords::cell_scaled(2.0, 2.0))
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn state_round_trip_transfers_the_model() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(13);
        let mut a = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(14);
        let mut b = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng2);
        b.load_state(&a.state()).unwrap();
        let img = rand_img(&mut rng1, 4, 4);
        let (_, _, queries) = hr_query_coords(4, 4, 2.0, 2.0);
        let cell = coords::cell_scaled(2.0, 2.0);
        let out_a = a.forward(&img, &queries, cell).unwrap();
        let out_b = b.forward(&img, &queries, cell).unwrap();
        assert_eq!(out_a.data(), out_b.data());
    }

    #[test]
    fn load_state_reports_missing_shape_and_unknown() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut model = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng);
        let err = model.load_state(&[]).unwrap_err();
        assert!(matches!(err, StateError::Missing(_)), "{err}");

        let mut wide_cfg = tiny_cfg();
        wide_cfg.feature_width = 16;
        let mut rng2 = ChaCha8Rng::seed_from_u64(16);
        let mut wide = LiwtModel::<f32>::new(&wide_cfg, &mut rng2);
        let err = model.load_state(&wide.state()).unwrap_err();
        match &err {
            StateError::Shape { name, .. } => assert!(!name.is_empty()),
            other => panic!("expected shape error, got {other}"),
        }

        let mut state = model.state();
        state.push(("bogus.w".into(), Tensor::zeros(&[1])));
        let err = model.load_state(&state).unwrap_err();
        assert!(matches!(err, StateError::Unknown(ref n) if n == "bogus.w"), "{err}");
    }

    #[test]
    fn param_names_are_unique_and_cover_all_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = LiwtModel::<f32>::new(&tiny_cfg(), &mut rng);
        let names: Vec<String> = model.params_mut().into_iter().map(|(n, _)| n).collect();
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
        for group in ["encoder", "mixer", "gate", "attention", "offset_bias", "decoder"] {
            assert!(
                names.iter().any(|n| param_group(n) == group),
                "no parameters in group {group}"
            );
        }
    }

    #[test]
    fn finite_difference_check_passes_on_a_small_model() {
        let cfg = ModelConfig {
            feature_width: 4,
            encoder_blocks: 1,
            werb_count: 1,
            attention_heads: 2,
            encoding_depth: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let data: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = Tensor::from_vec(&[4, 4, 3], data);
        let (_, _, queries) = hr_query_coords(4, 4, 1.5, 1.5);
        let reports = finite_difference_check(
            &cfg,
            &img,
            &queries,
            coords::cell_scaled(1.5, 1.5),
            2,
            19,
        );
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.probes > 0, "group {} never probed", r.group);
            assert!(
                r.max_rel_err < 1e-4,
                "group {}: err {} at {}",
                r.group,
                r.max_rel_err,
                r.worst_param
            );
        }
    }
}
