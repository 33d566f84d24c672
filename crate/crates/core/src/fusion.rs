//! Per-scale local similarity maps between two feature pyramids and their
//! fusion into a single scalar similarity score.
//!
//! Four fusion variants are supported: the adaptive confidence-weighted head,
//! plain averaging of local cosines, and the sigmoid-only / softmax-only
//! reductions of the confidence map. The adaptive path is trainable; exact
//! analytic parameter gradients are provided for gradient descent.

use crate::features::{FeaturePyramid, PyramidLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// L2 floor applied when normalizing feature vectors; zero vectors stay zero.
pub const NORM_FLOOR: f64 = 1e-8;
/// Magic bytes of the fusion parameter file format.
pub const PARAMS_MAGIC: &[u8; 4] = b"FPRM";
/// Supported parameter file version.
pub const PARAMS_VERSION: u32 = 1;
/// Default hidden width of the fully connected head.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("variant {0:?} has no learnable parameters")]
    NotLearnable(FusionVariant),
    #[error("bad parameter file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    Adaptive,
    Average,
    SigmoidOnly,
    SoftmaxOnly,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Adaptive,
        FusionVariant::Average,
        FusionVariant::SigmoidOnly,
        FusionVariant::SoftmaxOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionVariant::Adaptive => "adaptive",
            FusionVariant::Average => "average",
            FusionVariant::SigmoidOnly => "sigmoid",
            FusionVariant::SoftmaxOnly => "softmax",
        }
    }

    /// True for variants whose score passes through the learned head.
    pub fn is_learned(&self) -> bool {
        !matches!(self, FusionVariant::Average)
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(FusionVariant::Adaptive),
            "average" => Ok(FusionVariant::Average),
            "sigmoid" => Ok(FusionVariant::SigmoidOnly),
            "softmax" => Ok(FusionVariant::SoftmaxOnly),
            other => Err(format!(
                "unknown fusion variant '{other}' (valid: adaptive, average, sigmoid, softmax)"
            )),
        }
    }
}

/// One per-scale local similarity map: the channelwise product of the
/// L2-normalized feature vectors, so the channel sum at a location is the
/// local cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SimMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        SimMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMaps {
    pub scales: Vec<SimMap>,
}

/// Compute the per-scale similarity maps of two pyramids with identical
/// layout. A zero feature vector on either side yields zeros at the location.
pub fn similarity_maps(
    src: &FeaturePyramid,
    reference: &FeaturePyramid,
) -> Result<SimilarityMaps, FusionError> {
    if src.layout() != reference.layout() {
        return Err(FusionError::ShapeMismatch(format!(
            "pyramid layouts differ: {:?} vs {:?}",
            src.layout(),
            reference.layout()
        )));
    }
    let mut maps = SimilarityMaps {
        scales: Vec::with_capacity(src.scales.len()),
    };
    for (a, b) in src.scales.iter().zip(&reference.scales) {
        let mut map = SimMap::zeros(a.height, a.width, a.channels);
        fill_similarity(&a.data, &b.data, a.channels, &mut map.data);
        maps.scales.push(map);
    }
    Ok(maps)
}

fn fill_similarity(a: &[f32], b: &[f32], channels: usize, out: &mut [f64]) {
    for ((va, vb), dst) in a
        .chunks_exact(channels)
        .zip(b.chunks_exact(channels))
        .zip(out.chunks_exact_mut(channels))
    {
        let na: f64 = va.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        let nb: f64 = vb.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        let inv = 1.0 / (na.max(NORM_FLOOR) * nb.max(NORM_FLOOR));
        for ((x, y), d) in va.iter().zip(vb).zip(dst.iter_mut()) {
            *d = f64::from(*x) * f64::from(*y) * inv;
        }
    }
}

// ── Parameters ────────────────────────────────────────────────────────────

/// One 3×3, C-channels-to-one convolution with bias; zero padded. Weight
/// layout is `[ky][kx][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ConvHead {
    pub fn zeros(channels: usize) -> Self {
        ConvHead {
            weights: vec![0.0; 9 * channels],
            bias: 0.0,
        }
    }
}

/// Two affine layers with a ReLU between them; maps the concatenated S·C
/// aggregate vector to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    pub input: usize,
    pub hidden: usize,
    /// Row-major `hidden × input`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// All learnable fusion parameters: per-scale confidence convolutions ω
/// (inside the exponential) and θ (inside the sigmoid), plus the dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub channels: usize,
    pub omega: Vec<ConvHead>,
    pub theta: Vec<ConvHead>,
    pub head: DenseHead,
}

impl FusionParams {
    pub fn zeros(num_scales: usize, channels: usize, hidden: usize) -> Self {
        let input = num_scales * channels;
        FusionParams {
            channels,
            omega: (0..num_scales).map(|_| ConvHead::zeros(channels)).collect(),
            theta: (0..num_scales).map(|_| ConvHead::zeros(channels)).collect(),
            head: DenseHead {
                input,
                hidden,
                w1: vec![0.0; hidden * input],
                b1: vec![0.0; hidden],
                w2: vec![0.0; hidden],
                b2: 0.0,
            },
        }
    }

    /// Seeded random initialization: zero confidence convolutions (uniform
    /// starting weights) and small normal dense-head weights.
    pub fn random_init(num_scales: usize, channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = FusionParams::zeros(num_scales, channels, hidden);
        let input = params.head.input;
        let s1 = (2.0 / input as f64).sqrt();
        for w in &mut params.head.w1 {
            *w = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        let s2 = (2.0 / hidden as f64).sqrt();
        for w in &mut params.head.w2 {
            *w = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        params
    }

    pub fn num_scales(&self) -> usize {
        self.omega.len()
    }

    pub fn hidden(&self) -> usize {
        self.head.hidden
    }

    pub fn zeros_like(&self) -> Self {
        FusionParams::zeros(self.num_scales(), self.channels, self.hidden())
    }

    /// `self += factor · other`, used for gradient steps and accumulation.
    pub fn add_scaled(&mut self, other: &FusionParams, factor: f64) {
        for (a, b) in self.omega.iter_mut().zip(&other.omega) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += factor * y;
            }
            a.bias += factor * b.bias;
        }
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += factor * y;
            }
            a.bias += factor * b.bias;
        }
        for (x, y) in self.head.w1.iter_mut().zip(&other.head.w1) {
            *x += factor * y;
        }
        for (x, y) in self.head.b1.iter_mut().zip(&other.head.b1) {
            *x += factor * y;
        }
        for (x, y) in self.head.w2.iter_mut().zip(&other.head.w2) {
            *x += factor * y;
        }
        self.head.b2 += factor * other.head.b2;
    }

    /// All parameters as one flat vector, in the serialization order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for conv in self.omega.iter().chain(&self.theta) {
            out.extend_from_slice(&conv.weights);
            out.push(conv.bias);
        }
        out.extend_from_slice(&self.head.w1);
        out.extend_from_slice(&self.head.b1);
        out.extend_from_slice(&self.head.w2);
        out.push(self.head.b2);
        out
    }

    /// Inverse of [`FusionParams::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len(), "flat parameter length");
        let mut it = flat.iter().copied();
        for conv in self.omega.iter_mut().chain(self.theta.iter_mut()) {
            for w in &mut conv.weights {
                *w = it.next().unwrap();
            }
            conv.bias = it.next().unwrap();
        }
        for w in &mut self.head.w1 {
            *w = it.next().unwrap();
        }
        for b in &mut self.head.b1 {
            *b = it.next().unwrap();
        }
        for w in &mut self.head.w2 {
            *w = it.next().unwrap();
        }
        self.head.b2 = it.next().unwrap();
    }

    pub fn flat_len(&self) -> usize {
        let conv = (9 * self.channels + 1) * (self.omega.len() + self.theta.len());
        conv + self.head.w1.len() + self.head.b1.len() + self.head.w2.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn matches_layout(&self, layout: &PyramidLayout) -> bool {
        self.num_scales() == layout.scale_dims.len() && self.channels == layout.channels as usize
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<(), FusionError> {
        out.write_all(PARAMS_MAGIC)?;
        out.write_all(&PARAMS_VERSION.to_le_bytes())?;
        out.write_all(&(self.num_scales() as u32).to_le_bytes())?;
        out.write_all(&(self.channels as u32).to_le_bytes())?;
        out.write_all(&(self.hidden() as u32).to_le_bytes())?;
        let block = |values: &[f64], out: &mut W| -> Result<(), FusionError> {
            let mut buf = Vec::with_capacity(values.len() * 4);
            for v in values {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
            Ok(())
        };
        for conv in self.omega.iter().chain(&self.theta) {
            block(&conv.weights, out)?;
            block(&[conv.bias], out)?;
        }
        block(&self.head.w1, out)?;
        block(&self.head.b1, out)?;
        block(&self.head.w2, out)?;
        block(&[self.head.b2], out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FusionParams, FusionError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        FusionParams::read(&mut file)
    }

    pub fn read<R: Read>(input: &mut R) -> Result<FusionParams, FusionError> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(FusionError::Format(format!(
                "bad magic {magic:?}, expected {PARAMS_MAGIC:?}"
            )));
        }
        let version = read_u32(input)?;
        if version != PARAMS_VERSION {
            return Err(FusionError::Format(format!(
                "unsupported parameter version {version}, supported: {PARAMS_VERSION}"
            )));
        }
        let num_scales = read_u32(input)? as usize;
        let channels = read_u32(input)? as usize;
        let hidden = read_u32(input)? as usize;
        if num_scales == 0 || channels == 0 || hidden == 0 {
            return Err(FusionError::Format("zero-sized parameter shape".into()));
        }
        let mut params = FusionParams::zeros(num_scales, channels, hidden);
        let block = |len: usize, input: &mut R| -> Result<Vec<f64>, FusionError> {
            let mut buf = vec![0u8; len * 4];
            read_exact(input, &mut buf)?;
            Ok(buf
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect())
        };
        for i in 0..num_scales {
            params.omega[i].weights = block(9 * channels, input)?;
            params.omega[i].bias = block(1, input)?[0];
        }
        for i in 0..num_scales {
            params.theta[i].weights = block(9 * channels, input)?;
            params.theta[i].bias = block(1, input)?[0];
        }
        params.head.w1 = block(hidden * num_scales * channels, input)?;
        params.head.b1 = block(hidden, input)?;
        params.head.w2 = block(hidden, input)?;
        params.head.b2 = block(1, input)?[0];
        if !params.is_finite() {
            return Err(FusionError::Format("non-finite parameter value".into()));
        }
        Ok(params)
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, FusionError> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<(), FusionError> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FusionError::Format("truncated file".into())
        } else {
            FusionError::Io(e)
        }
    })
}

// ── Forward pass ──────────────────────────────────────────────────────────

fn conv3x3(map: &SimMap, head: &ConvHead) -> Vec<f64> {
    let (h, w, c) = (map.height, map.width, map.channels);
    let mut out = vec![head.bias; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..3usize {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let f = map.at(yy as usize, xx as usize);
                    let wgt = &head.weights[(ky * 3 + kx) * c..(ky * 3 + kx) * c + c];
                    for (a, b) in f.iter().zip(wgt) {
                        acc += a * b;
                    }
                }
            }
            out[y * w + x] += acc;
        }
    }
    out
}

/// Accumulate ∂L/∂(conv parameters) given ∂L/∂(conv output).
fn conv3x3_backward(map: &SimMap, d_out: &[f64], grad: &mut ConvHead) {
    let (h, w, c) = (map.height, map.width, map.channels);
    for y in 0..h {
        for x in 0..w {
            let g = d_out[y * w + x];
            if g == 0.0 {
                continue;
            }
            grad.bias += g;
            for ky in 0..3usize {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let f = map.at(yy as usize, xx as usize);
                    let wgt = &mut grad.weights[(ky * 3 + kx) * c..(ky * 3 + kx) * c + c];
                    for (dst, a) in wgt.iter_mut().zip(f) {
                        *dst += g * a;
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unnormalized confidence values and their sum for one scale.
struct ScaleConfidence {
    /// exp(h − max h) for the variants that use it, σ(q) for sigmoid-only.
    unnormalized: Vec<f64>,
    /// σ(q) per location; empty when the variant does not use θ.
    sigma: Vec<f64>,
    total: f64,
}

fn scale_confidence(
    map: &SimMap,
    omega: &ConvHead,
    theta: &ConvHead,
    variant: FusionVariant,
) -> ScaleConfidence {
    let n = map.locations();
    match variant {
        FusionVariant::Average => ScaleConfidence {
            unnormalized: vec![1.0; n],
            sigma: Vec::new(),
            total: n as f64,
        },
        FusionVariant::SigmoidOnly => {
            let q = conv3x3(map, theta);
            let sig: Vec<f64> = q.iter().map(|&v| sigmoid(v)).collect();
            let total = sig.iter().sum();
            ScaleConfidence {
                unnormalized: sig.clone(),
                sigma: sig,
                total,
            }
        }
        FusionVariant::SoftmaxOnly => {
            let h = conv3x3(map, omega);
            let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = h.iter().map(|&v| (v - m).exp()).collect();
            let total = e.iter().sum();
            ScaleConfidence {
                unnormalized: e,
                sigma: Vec::new(),
                total,
            }
        }
        FusionVariant::Adaptive => {
            let h = conv3x3(map, omega);
            let q = conv3x3(map, theta);
            // exp is shift-invariant after normalization; subtract max(h).
            let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sigma: Vec<f64> = q.iter().map(|&v| sigmoid(v)).collect();
            let u: Vec<f64> = h
                .iter()
                .zip(&sigma)
                .map(|(&hv, &sv)| (hv - m).exp() * sv)
                .collect();
            let total = u.iter().sum();
            ScaleConfidence {
                unnormalized: u,
                sigma,
                total,
            }
        }
    }
}

/// Normalized spatial confidence map for one scale: nonnegative entries
/// summing to 1 over the locations.
pub fn confidence_map(
    map: &SimMap,
    params: &FusionParams,
    scale_index: usize,
    variant: FusionVariant,
) -> Vec<f64> {
    let conf = scale_confidence(
        map,
        &params.omega[scale_index],
        &params.theta[scale_index],
        variant,
    );
    conf.unnormalized.iter().map(|&u| u / conf.total).collect()
}

/// Per-scale weighted spatial aggregates, concatenated: the input of the
/// dense head.
fn aggregate(maps: &SimilarityMaps, params: &FusionParams, variant: FusionVariant) -> Vec<f64> {
    let c = maps.scales[0].channels;
    let mut z = Vec::with_capacity(maps.scales.len() * c);
    for (i, map) in maps.scales.iter().enumerate() {
        let conf = scale_confidence(map, &params.omega[i], &params.theta[i], variant);
        let mut g = vec![0.0f64; c];
        for (loc, &u) in conf.unnormalized.iter().enumerate() {
            let w = u / conf.total;
            let f = &map.data[loc * c..loc * c + c];
            for (dst, v) in g.iter_mut().zip(f) {
                *dst += w * v;
            }
        }
        z.extend_from_slice(&g);
    }
    z
}

/// Fuse similarity maps into one scalar score.
///
/// Learned variants weight each scale by its confidence map, concatenate the
/// per-scale aggregates, and apply the dense head. The average variant
/// returns the mean over scales of the mean local cosine, bypassing the head.
pub fn fuse(maps: &SimilarityMaps, params: &FusionParams, variant: FusionVariant) -> f64 {
    assert!(
        !maps.scales.is_empty(),
        "fuse called with an empty similarity map set"
    );
    if variant == FusionVariant::Average {
        let mut total = 0.0;
        for map in &maps.scales {
            total += map.data.iter().sum::<f64>() / map.locations() as f64;
        }
        return total / maps.scales.len() as f64;
    }
    assert_eq!(
        params.num_scales(),
        maps.scales.len(),
        "parameter scale count"
    );
    assert_eq!(params.channels, maps.scales[0].channels, "channel count");
    let z = aggregate(maps, params, variant);
    dense_forward(&params.head, &z).2
}

fn dense_forward(head: &DenseHead, z: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let mut a = head.b1.clone();
    for (h, row) in head.w1.chunks_exact(head.input).enumerate() {
        let mut acc = 0.0;
        for (wv, zv) in row.iter().zip(z) {
            acc += wv * zv;
        }
        a[h] += acc;
    }
    let r: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();
    let mut s = head.b2;
    for (wv, rv) in head.w2.iter().zip(&r) {
        s += wv * rv;
    }
    (a, r, s)
}

/// Exact gradients of `upstream · fuse(maps, params, variant)` with respect
/// to every parameter; the similarity maps are treated as constants.
///
/// Supports the three learned variants; the average variant has nothing to
/// differentiate.
pub fn fuse_backward(
    maps: &SimilarityMaps,
    params: &FusionParams,
    variant: FusionVariant,
    upstream: f64,
) -> Result<FusionParams, FusionError> {
    if !variant.is_learned() {
        return Err(FusionError::NotLearnable(variant));
    }
    if params.num_scales() != maps.scales.len() || params.channels != maps.scales[0].channels {
        return Err(FusionError::ShapeMismatch(format!(
            "params ({} scales × {} ch) vs maps ({} scales × {} ch)",
            params.num_scales(),
            params.channels,
            maps.scales.len(),
            maps.scales[0].channels
        )));
    }

    let mut grads = params.zeros_like();
    let c = params.channels;

    // Forward intermediates.
    let confidences: Vec<ScaleConfidence> = maps
        .scales
        .iter()
        .enumerate()
        .map(|(i, m)| scale_confidence(m, &params.omega[i], &params.theta[i], variant))
        .collect();
    let z = aggregate(maps, params, variant);
    let (a, r, _s) = dense_forward(&params.head, &z);

    // Head backward.
    let ds = upstream;
    grads.head.b2 = ds;
    for (g, rv) in grads.head.w2.iter_mut().zip(&r) {
        *g = rv * ds;
    }
    let da: Vec<f64> = params
        .head
        .w2
        .iter()
        .zip(&a)
        .map(|(&w2, &av)| if av > 0.0 { w2 * ds } else { 0.0 })
        .collect();
    grads.head.b1.copy_from_slice(&da);
    for (h, row) in grads.head.w1.chunks_exact_mut(params.head.input).enumerate() {
        if da[h] == 0.0 {
            continue;
        }
        for (g, zv) in row.iter_mut().zip(&z) {
            *g = da[h] * zv;
        }
    }
    let mut dz = vec![0.0f64; params.head.input];
    for (h, row) in params.head.w1.chunks_exact(params.head.input).enumerate() {
        if da[h] == 0.0 {
            continue;
        }
        for (dst, wv) in dz.iter_mut().zip(row) {
            *dst += da[h] * wv;
        }
    }

    // Confidence backward per scale.
    for (i, map) in maps.scales.iter().enumerate() {
        let conf = &confidences[i];
        let dg = &dz[i * c..(i + 1) * c];
        let n = map.locations();

        // dL/dw_p = Σ_c F*[p,c] · dg[c], with w = u / T.
        let mut dw = vec![0.0f64; n];
        for (loc, d) in dw.iter_mut().enumerate() {
            let f = &map.data[loc * c..loc * c + c];
            *d = f.iter().zip(dg).map(|(a, b)| a * b).sum();
        }
        let dot: f64 = dw
            .iter()
            .zip(&conf.unnormalized)
            .map(|(d, u)| d * u / conf.total)
            .sum();
        // Through the normalization: du_p = (dw_p − Σ dw·w) / T.
        let du: Vec<f64> = dw.iter().map(|d| (d - dot) / conf.total).collect();

        match variant {
            FusionVariant::Adaptive => {
                // u = exp(h−m)·σ:  ∂u/∂h = u,  ∂u/∂q = u·(1−σ).
                let dh: Vec<f64> = du
                    .iter()
                    .zip(&conf.unnormalized)
                    .map(|(d, u)| d * u)
                    .collect();
                let dq: Vec<f64> = du
                    .iter()
                    .zip(&conf.unnormalized)
                    .zip(&conf.sigma)
                    .map(|((d, u), s)| d * u * (1.0 - s))
                    .collect();
                conv3x3_backward(map, &dh, &mut grads.omega[i]);
                conv3x3_backward(map, &dq, &mut grads.theta[i]);
            }
            FusionVariant::SoftmaxOnly => {
                let dh: Vec<f64> = du
                    .iter()
                    .zip(&conf.unnormalized)
                    .map(|(d, u)| d * u)
                    .collect();
                conv3x3_backward(map, &dh, &mut grads.omega[i]);
            }
            FusionVariant::SigmoidOnly => {
                // u = σ(q): ∂u/∂q = σ(1−σ).
                let dq: Vec<f64> = du
                    .iter()
                    .zip(&conf.sigma)
                    .map(|(d, s)| d * s * (1.0 - s))
                    .collect();
                conv3x3_backward(map, &dq, &mut grads.theta[i]);
            }
            FusionVariant::Average => unreachable!(),
        }
    }
    Ok(grads)
}

// ── Fast pair scoring ─────────────────────────────────────────────────────

/// Reusable buffers for scoring many pairs against one query.
#[derive(Default)]
pub struct ScoreScratch {
    maps: Option<SimilarityMaps>,
}

/// Score a query/reference pair without allocating fresh similarity maps per
/// call. Equivalent to `fuse(&similarity_maps(query, reference)?, ...)`.
pub fn score_pair(
    query: &FeaturePyramid,
    reference: &FeaturePyramid,
    params: &FusionParams,
    variant: FusionVariant,
    scratch: &mut ScoreScratch,
) -> Result<f64, FusionError> {
    if query.layout() != reference.layout() {
        return Err(FusionError::ShapeMismatch(format!(
            "pyramid layouts differ: {:?} vs {:?}",
            query.layout(),
            reference.layout()
        )));
    }

    if variant == FusionVariant::Average {
        // Mean local cosine per scale, no intermediate maps needed.
        let mut total = 0.0;
        for (a, b) in query.scales.iter().zip(&reference.scales) {
            let c = a.channels;
            let mut scale_sum = 0.0;
            for (va, vb) in a.data.chunks_exact(c).zip(b.data.chunks_exact(c)) {
                let mut dot = 0.0f64;
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for (&x, &y) in va.iter().zip(vb) {
                    let (x, y) = (f64::from(x), f64::from(y));
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                scale_sum += dot / (na.sqrt().max(NORM_FLOOR) * nb.sqrt().max(NORM_FLOOR));
            }
            total += scale_sum / (a.height * a.width) as f64;
        }
        return Ok(total / query.scales.len() as f64);
    }

    // Learned variants need the materialized maps; reuse the scratch buffers.
    let reuse = scratch
        .maps
        .as_ref()
        .is_some_and(|m| {
            m.scales.len() == query.scales.len()
                && m.scales
                    .iter()
                    .zip(&query.scales)
                    .all(|(s, q)| (s.height, s.width, s.channels) == (q.height, q.width, q.channels))
        });
    if !reuse {
        scratch.maps = Some(SimilarityMaps {
            scales: query
                .scales
                .iter()
                .map(|s| SimMap::zeros(s.height, s.width, s.channels))
                .collect(),
        });
    }
    let maps = scratch.maps.as_mut().unwrap();
    for ((a, b), m) in query
        .scales
        .iter()
        .zip(&reference.scales)
        .zip(maps.scales.iter_mut())
    {
        fill_similarity(&a.data, &b.data, a.channels, &mut m.data);
    }
    Ok(fuse(maps, params, variant))
}
