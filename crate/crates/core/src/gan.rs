//! Toy-scale conditional video-synthesis networks on the f64 tape: an
//! identity embedder, an embedding-modulated two-encoder generator, a
//! projection image discriminator plus mouth and multi-scale temporal
//! discriminators, their losses, and the person-specific conversion that
//! freezes the embedding into instance-norm parameters.
//!
//! Everything runs at desk scale (default 32x32, 8/16 channels). The
//! perceptual feature stack is a frozen fixed-seed random conv stack and
//! optical flow comes from exhaustive block matching; both are logged as
//! substitutes for the pretrained networks they stand in for.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Landmarks2D;
use crate::error::{Error, Result};
use crate::tensor::{
    adam_step, load_checkpoint_bytes, randn_tensor, save_checkpoint_bytes, AdamConfig, AdamState,
    Graph, NodeId, ParamStore, Tensor,
};

const C1: usize = 8;
const C2: usize = 16;
const ADAIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    /// Identity-embedding width.
    pub n_f: usize,
    /// Square training resolution; must be divisible by 8.
    pub resolution: usize,
    /// Identity count of the multi-person stage (discriminator row count).
    pub num_identities: usize,
    /// Frames averaged into the identity embedding.
    pub embed_frames: usize,
    /// Side of the fixed mouth patch fed to the mouth discriminator.
    pub mouth_patch: usize,
    /// Frames per temporal-discriminator window.
    pub temporal_window: usize,
    pub lambda_mch: f64,
    pub lambda_vgg: f64,
    pub lambda_feat: f64,
    pub lambda_mask: f64,
    /// True after fine-tune conversion: instance norms, single identity row.
    pub person_specific: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            n_f: 64,
            resolution: 32,
            num_identities: 2,
            embed_frames: 3,
            mouth_patch: 16,
            temporal_window: 8,
            lambda_mch: 10.0,
            lambda_vgg: 10.0,
            lambda_feat: 10.0,
            lambda_mask: 10.0,
            person_specific: false,
        }
    }
}

/// Generator normalization sites and their channel widths.
fn norm_sites() -> [(&'static str, usize); 6] {
    [
        ("g.enc_a.n1", C1),
        ("g.enc_a.n2", C2),
        ("g.enc_b.n1", C1),
        ("g.enc_b.n2", C2),
        ("g.dec.n1", C2),
        ("g.dec.n2", C1),
    ]
}

fn conv_shapes() -> Vec<(&'static str, usize, usize)> {
    // (name, in_channels, out_channels); all kernels 3x3.
    vec![
        ("eid.conv1", 3, C1),
        ("eid.conv2", C1, C2),
        ("eid.conv3", C2, C2),
        ("eid.conv4", C2, C2),
        ("g.enc_a.conv1", 9, C1),
        ("g.enc_a.conv2", C1, C2),
        ("g.enc_b.conv1", 6, C1),
        ("g.enc_b.conv2", C1, C2),
        ("g.dec.conv1", C2, C2),
        ("g.dec.conv2", C2, C1),
        ("g.dec.conv3", C1, 4),
        ("di.conv1", 6, C1),
        ("di.conv2", C1, C2),
        ("di.conv3", C2, C2),
        ("di.patch", C2, 1),
        ("dm.conv1", 3, C1),
        ("dm.conv2", C1, C2),
        ("dm.patch", C2, 1),
    ]
}

/// Frame/flow channel count of temporal scale `s` for window `k`.
fn temporal_channels(k: usize, s: usize) -> usize {
    let ks = k >> s;
    3 * ks + 2 * (ks - 1)
}

/// Fresh parameter store for the multi-person stage.
pub fn init_gan_params(cfg: &GanConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    fn conv(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
    ) {
        let std = (2.0 / (ci as f64 * 9.0)).sqrt();
        store.insert(
            &format!("{name}.w"),
            randn_tensor(vec![co, ci, 3, 3], std, rng),
        );
        store.insert(&format!("{name}.b"), Tensor::zeros(vec![co]));
    }
    for (name, ci, co) in conv_shapes() {
        conv(&mut store, &mut rng, name, ci, co);
    }
    for s in 0..3 {
        let ci = temporal_channels(cfg.temporal_window, s);
        conv(&mut store, &mut rng, &format!("dv.s{s}.conv1"), ci, C1);
        conv(&mut store, &mut rng, &format!("dv.s{s}.conv2"), C1, C2);
        let std = (1.0 / C2 as f64).sqrt();
        store.insert(
            &format!("dv.s{s}.fc.w"),
            randn_tensor(vec![1, C2], std, &mut rng),
        );
        store.insert(&format!("dv.s{s}.fc.b"), Tensor::zeros(vec![1, 1]));
    }
    let fc_std = (1.0 / C2 as f64).sqrt();
    store.insert(
        "eid.fc.w",
        randn_tensor(vec![cfg.n_f, C2], fc_std, &mut rng),
    );
    store.insert("eid.fc.b", Tensor::zeros(vec![cfg.n_f, 1]));
    store.insert("di.fc.w", randn_tensor(vec![cfg.n_f, C2], fc_std, &mut rng));
    store.insert("di.fc.b", Tensor::zeros(vec![cfg.n_f, 1]));
    store.insert("dm.fc.w", randn_tensor(vec![1, C2], fc_std, &mut rng));
    store.insert("dm.fc.b", Tensor::zeros(vec![1, 1]));
    let proj_std = (1.0 / cfg.n_f as f64).sqrt();
    for (site, ch) in norm_sites() {
        store.insert(
            &format!("{site}.pg"),
            randn_tensor(vec![ch, cfg.n_f], proj_std, &mut rng),
        );
        store.insert(
            &format!("{site}.pb"),
            randn_tensor(vec![ch, cfg.n_f], proj_std, &mut rng),
        );
    }
    store.insert(
        "di.W",
        randn_tensor(vec![cfg.num_identities, cfg.n_f], proj_std, &mut rng),
    );
    store.insert("di.w0", randn_tensor(vec![cfg.n_f, 1], proj_std, &mut rng));
    store.insert("di.c", Tensor::zeros(vec![1, 1]));
    store
}

fn conv_block(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
    stride: usize,
) -> Result<NodeId> {
    let w = g.param(&format!("{name}.w"), store)?;
    let b = g.param(&format!("{name}.b"), store)?;
    g.conv2d(x, w, b, stride)
}

/// Embedding of a single RGB frame: four stride-2 convs, global average,
/// linear head. Output shape `[n_f, 1]`.
pub fn embed_frame(g: &mut Graph, store: &ParamStore, frame: NodeId) -> Result<NodeId> {
    let mut x = frame;
    for i in 1..=4 {
        let y = conv_block(g, store, &format!("eid.conv{i}"), x, 2)?;
        x = g.leaky_relu(y, 0.2);
    }
    let pooled = g.mean_spatial(x)?;
    let col = g.reshape(pooled, vec![C2, 1])?;
    let w = g.param("eid.fc.w", store)?;
    let b = g.param("eid.fc.b", store)?;
    let proj = g.matmul(w, col)?;
    g.add(proj, b)
}

/// Average embedding over a frame set; order-independent up to float
/// summation.
pub fn embed_average(g: &mut Graph, store: &ParamStore, frames: &[Tensor]) -> Result<NodeId> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("embedding of zero frames".into()));
    }
    let mut acc = None;
    for f in frames {
        let leaf = g.leaf(f.clone());
        let h = embed_frame(g, store, leaf)?;
        acc = Some(match acc {
            None => h,
            Some(a) => g.add(a, h)?,
        });
    }
    Ok(g.mul_scalar(acc.unwrap(), 1.0 / frames.len() as f64))
}

/// Per-channel standardization followed by the affine (`gamma`, `beta`).
/// Shared verbatim by the embedding-driven and instance-norm paths so the
/// fine-tune conversion is a bit-level identity.
fn apply_norm(g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let c = g.value(x).shape[0];
    let mu = g.mean_spatial(x)?;
    let var = g.var_spatial(x)?;
    let veps = g.add_scalar(var, ADAIN_EPS);
    let std = g.sqrt(veps);
    let ones = g.leaf(Tensor::full(vec![c], 1.0));
    let inv = g.div(ones, std)?;
    let centered = g.sub_channel(x, mu)?;
    let standardized = g.mul_channel(centered, inv)?;
    let scaled = g.mul_channel(standardized, gamma)?;
    g.add_channel(scaled, beta)
}

/// Embedding-modulated normalization: affine parameters are projections of
/// the identity embedding `h` (shape `[n_f,1]`).
pub fn adain(g: &mut Graph, x: NodeId, h: NodeId, pg: NodeId, pb: NodeId) -> Result<NodeId> {
    let c = g.value(x).shape[0];
    let gcol = g.matmul(pg, h)?;
    let gamma = g.reshape(gcol, vec![c])?;
    let bcol = g.matmul(pb, h)?;
    let beta = g.reshape(bcol, vec![c])?;
    apply_norm(g, x, gamma, beta)
}

/// How a generator normalization site obtains its affine parameters.
#[derive(Debug, Clone, Copy)]
pub enum NormMode {
    /// Multi-person stage: project the embedding node through the site's
    /// learned matrices.
    Embedding(NodeId),
    /// Person-specific stage: per-site instance-norm parameters.
    Instance,
}

fn norm_site(
    g: &mut Graph,
    store: &ParamStore,
    site: &str,
    x: NodeId,
    mode: NormMode,
) -> Result<NodeId> {
    match mode {
        NormMode::Embedding(h) => {
            let pg = g.param(&format!("{site}.pg"), store)?;
            let pb = g.param(&format!("{site}.pb"), store)?;
            adain(g, x, h, pg, pb)
        }
        NormMode::Instance => {
            let gamma = g.param(&format!("{site}.gamma"), store)?;
            let beta = g.param(&format!("{site}.beta"), store)?;
            apply_norm(g, x, gamma, beta)
        }
    }
}

fn encoder(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    mode: NormMode,
) -> Result<NodeId> {
    let c1 = conv_block(g, store, &format!("{prefix}.conv1"), x, 1)?;
    let n1 = norm_site(g, store, &format!("{prefix}.n1"), c1, mode)?;
    let a1 = g.relu(n1);
    let c2 = conv_block(g, store, &format!("{prefix}.conv2"), a1, 2)?;
    let n2 = norm_site(g, store, &format!("{prefix}.n2"), c2, mode)?;
    Ok(g.relu(n2))
}

/// One generator step: conditioning triplet (9 channels) and the two
/// previous output frames (6 channels) to an RGB frame in [-1,1] and a
/// foreground mask in [0,1].
pub fn generate_frame(
    g: &mut Graph,
    store: &ParamStore,
    nmfc_triplet: NodeId,
    prev_frames: NodeId,
    mode: NormMode,
) -> Result<(NodeId, NodeId)> {
    let sa = &g.value(nmfc_triplet).shape;
    let sb = &g.value(prev_frames).shape;
    if sa.len() != 3 || sb.len() != 3 || sa[0] != 9 || sb[0] != 6 || sa[1..] != sb[1..] {
        return Err(Error::ShapeMismatch(format!(
            "generator inputs {sa:?} / {sb:?}"
        )));
    }
    let fa = encoder(g, store, "g.enc_a", nmfc_triplet, mode)?;
    let fb = encoder(g, store, "g.enc_b", prev_frames, mode)?;
    let fused = g.add(fa, fb)?;
    let d1 = conv_block(g, store, "g.dec.conv1", fused, 1)?;
    let n1 = norm_site(g, store, "g.dec.n1", d1, mode)?;
    let a1 = g.relu(n1);
    let up = g.upsample2x(a1)?;
    let d2 = conv_block(g, store, "g.dec.conv2", up, 1)?;
    let n2 = norm_site(g, store, "g.dec.n2", d2, mode)?;
    let a2 = g.relu(n2);
    let out = conv_block(g, store, "g.dec.conv3", a2, 1)?;
    let rgb = g.slice_dim0(out, 0, 3)?;
    let frame = g.tanh(rgb);
    let mraw = g.slice_dim0(out, 3, 1)?;
    let mask = g.sigmoid(mraw);
    Ok((frame, mask))
}

/// Builds the 9-channel conditioning stack for frame `t`; missing history
/// is zero-filled.
pub fn nmfc_triplet(nmfcs: &[Tensor], t: usize) -> Tensor {
    let shape = nmfcs[t].shape.clone();
    let zero = Tensor::zeros(shape.clone());
    let mut data = Vec::with_capacity(3 * nmfcs[t].numel());
    for back in (0..3).rev() {
        let src = if t >= back { &nmfcs[t - back] } else { &zero };
        data.extend_from_slice(&src.data);
    }
    Tensor {
        shape: vec![9, shape[1], shape[2]],
        data,
    }
}

fn stack_prev(frames: &[Tensor], shape: &[usize], t: usize) -> Tensor {
    let zero = Tensor::zeros(shape.to_vec());
    let mut data = Vec::new();
    for back in [2usize, 1] {
        let src = if t >= back { &frames[t - back] } else { &zero };
        data.extend_from_slice(&src.data);
    }
    Tensor {
        shape: vec![6, shape[1], shape[2]],
        data,
    }
}

/// Sequential generation feeding back its own outputs. `h` is required in
/// the multi-person stage and ignored after conversion.
pub fn rollout(
    store: &ParamStore,
    cfg: &GanConfig,
    nmfcs: &[Tensor],
    h: Option<&Tensor>,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if nmfcs.is_empty() {
        return Err(Error::InvalidArgument("rollout over zero frames".into()));
    }
    let mut frames: Vec<Tensor> = Vec::with_capacity(nmfcs.len());
    let mut masks = Vec::with_capacity(nmfcs.len());
    for t in 0..nmfcs.len() {
        let mut g = Graph::new();
        let trip = g.leaf(nmfc_triplet(nmfcs, t));
        let prev = g.leaf(stack_prev(&frames, &nmfcs[t].shape, t));
        let mode = match (cfg.person_specific, h) {
            (true, _) => NormMode::Instance,
            (false, Some(hv)) => NormMode::Embedding(g.leaf(hv.clone())),
            (false, None) => {
                return Err(Error::InvalidArgument(
                    "multi-person rollout needs an embedding".into(),
                ))
            }
        };
        let (frame, mask) = generate_frame(&mut g, store, trip, prev, mode)?;
        frames.push(g.value(frame).clone());
        masks.push(g.value(mask).clone());
    }
    Ok((frames, masks))
}

/// Identity-row selection for the projection discriminator.
#[derive(Debug, Clone, Copy)]
pub enum IdSelect {
    /// Row of the multi-person identity matrix.
    Index(usize),
    /// The single person-specific vector.
    Person,
}

pub struct ImageScore {
    /// Projection score r = d'(w_i + w_0) + c, shape `[1,1]`.
    pub r: NodeId,
    /// Per-patch score map.
    pub patch: NodeId,
    /// Trunk feature maps for feature matching.
    pub features: Vec<NodeId>,
    /// Trunk feature vector d, shape `[n_f,1]`.
    pub d: NodeId,
}

/// Image discriminator on a frame and its conditioning image.
pub fn discriminate_image(
    g: &mut Graph,
    store: &ParamStore,
    frame: NodeId,
    nmfc: NodeId,
    id: IdSelect,
) -> Result<ImageScore> {
    let x = g.concat(&[frame, nmfc])?;
    let c1 = conv_block(g, store, "di.conv1", x, 2)?;
    let f1 = g.leaky_relu(c1, 0.2);
    let c2 = conv_block(g, store, "di.conv2", f1, 2)?;
    let f2 = g.leaky_relu(c2, 0.2);
    let c3 = conv_block(g, store, "di.conv3", f2, 2)?;
    let f3 = g.leaky_relu(c3, 0.2);
    let pooled = g.mean_spatial(f3)?;
    let col = g.reshape(pooled, vec![C2, 1])?;
    let fw = g.param("di.fc.w", store)?;
    let fb = g.param("di.fc.b", store)?;
    let proj = g.matmul(fw, col)?;
    let d = g.add(proj, fb)?;
    let n_f = g.value(d).shape[0];
    let w_row = match id {
        IdSelect::Index(i) => {
            let wmat = g.param("di.W", store)?;
            let rows = g.value(wmat).shape[0];
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "identity index {i} out of {rows}"
                )));
            }
            g.slice_dim0(wmat, i, 1)?
        }
        IdSelect::Person => {
            let w = g.param("di.w", store)?;
            g.slice_dim0(w, 0, 1)?
        }
    };
    let wi = g.reshape(w_row, vec![n_f, 1])?;
    let w0 = g.param("di.w0", store)?;
    let wsum = g.add(wi, w0)?;
    let drow = g.reshape(d, vec![1, n_f])?;
    let dot = g.matmul(drow, wsum)?;
    let c = g.param("di.c", store)?;
    let r = g.add(dot, c)?;
    let patch = conv_block(g, store, "di.patch", f2, 1)?;
    Ok(ImageScore {
        r,
        patch,
        features: vec![f1, f2, f3],
        d,
    })
}

/// Projection realism score only.
pub fn realism_score(
    g: &mut Graph,
    store: &ParamStore,
    frame: NodeId,
    nmfc: NodeId,
    id: IdSelect,
) -> Result<NodeId> {
    Ok(discriminate_image(g, store, frame, nmfc, id)?.r)
}

pub struct MouthScore {
    pub score: NodeId,
    pub patch: NodeId,
    pub features: Vec<NodeId>,
}

/// Mouth discriminator on a fixed-size RGB crop.
pub fn discriminate_mouth(g: &mut Graph, store: &ParamStore, patch: NodeId) -> Result<MouthScore> {
    let c1 = conv_block(g, store, "dm.conv1", patch, 2)?;
    let f1 = g.leaky_relu(c1, 0.2);
    let c2 = conv_block(g, store, "dm.conv2", f1, 2)?;
    let f2 = g.leaky_relu(c2, 0.2);
    let pooled = g.mean_spatial(f2)?;
    let col = g.reshape(pooled, vec![C2, 1])?;
    let fw = g.param("dm.fc.w", store)?;
    let fb = g.param("dm.fc.b", store)?;
    let proj = g.matmul(fw, col)?;
    let score = g.add(proj, fb)?;
    let patch_map = conv_block(g, store, "dm.patch", f2, 1)?;
    Ok(MouthScore {
        score,
        patch: patch_map,
        features: vec![f1, f2],
    })
}

/// Cosine distance 1 - cos(h, w); range [0,2], scale-invariant.
pub fn matching_loss(g: &mut Graph, h: NodeId, w: NodeId) -> Result<NodeId> {
    if g.value(h).shape != g.value(w).shape {
        return Err(Error::ShapeMismatch("matching_loss shapes differ".into()));
    }
    let hh = g.mul(h, h)?;
    let hsum = g.sum_all(hh);
    let hn = g.sqrt(hsum);
    let ww = g.mul(w, w)?;
    let wsum = g.sum_all(ww);
    let wn = g.sqrt(wsum);
    if g.value(hn).item() == 0.0 || g.value(wn).item() == 0.0 {
        return Err(Error::Degenerate("zero vector in cosine distance".into()));
    }
    let hw = g.mul(h, w)?;
    let dot = g.sum_all(hw);
    let denom = g.mul(hn, wn)?;
    let cos = g.div(dot, denom)?;
    let neg = g.mul_scalar(cos, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Hinge discriminator loss: mean(max(0,1-r_real)) + mean(max(0,1+r_fake)).
/// Works on scalar scores and patch maps alike.
pub fn hinge_d(g: &mut Graph, r_real: NodeId, r_fake: NodeId) -> NodeId {
    let nr = g.mul_scalar(r_real, -1.0);
    let sr = g.add_scalar(nr, 1.0);
    let rr = g.relu(sr);
    let lr = g.mean_all(rr);
    let sf = g.add_scalar(r_fake, 1.0);
    let rf = g.relu(sf);
    let lf = g.mean_all(rf);
    g.add(lr, lf).expect("scalar add")
}

/// Hinge generator loss: -mean(r_fake).
pub fn hinge_g(g: &mut Graph, r_fake: NodeId) -> NodeId {
    let m = g.mean_all(r_fake);
    g.mul_scalar(m, -1.0)
}

/// Frozen random conv stack standing in for a pretrained feature extractor.
#[derive(Debug, Clone)]
pub struct PerceptualStack {
    layers: Vec<(Tensor, Tensor)>,
}

impl PerceptualStack {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [(3usize, C1), (C1, C2), (C2, C2)];
        let layers = widths
            .iter()
            .map(|&(ci, co)| {
                let std = (2.0 / (ci as f64 * 9.0)).sqrt();
                (
                    randn_tensor(vec![co, ci, 3, 3], std, &mut rng),
                    Tensor::zeros(vec![co]),
                )
            })
            .collect();
        Self { layers }
    }

    fn features(&self, g: &mut Graph, x: NodeId) -> Result<Vec<NodeId>> {
        let mut out = Vec::new();
        let mut cur = x;
        for (w, b) in &self.layers {
            let wl = g.leaf(w.clone());
            let bl = g.leaf(b.clone());
            let c = g.conv2d(cur, wl, bl, 2)?;
            cur = g.leaky_relu(c, 0.2);
            out.push(cur);
        }
        Ok(out)
    }
}

/// Sum of layerwise l1 distances through the frozen stack.
pub fn perceptual_loss(
    g: &mut Graph,
    stack: &PerceptualStack,
    fake: NodeId,
    real: NodeId,
) -> Result<NodeId> {
    let ff = stack.features(g, fake)?;
    let fr = stack.features(g, real)?;
    let mut acc: Option<NodeId> = None;
    for (a, b) in ff.iter().zip(&fr) {
        let l = g.l1_loss(*a, *b)?;
        acc = Some(match acc {
            None => l,
            Some(s) => g.add(s, l)?,
        });
    }
    Ok(acc.unwrap())
}

/// Mean layerwise l1 distance between discriminator features.
pub fn feature_matching_loss(g: &mut Graph, fake: &[NodeId], real: &[NodeId]) -> Result<NodeId> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::InvalidArgument(
            "feature lists empty or of different depth".into(),
        ));
    }
    let mut acc: Option<NodeId> = None;
    for (a, b) in fake.iter().zip(real) {
        let l = g.l1_loss(*a, *b)?;
        acc = Some(match acc {
            None => l,
            Some(s) => g.add(s, l)?,
        });
    }
    Ok(g.mul_scalar(acc.unwrap(), 1.0 / fake.len() as f64))
}

/// l1 distance between predicted and ground-truth foreground masks.
pub fn mask_loss(g: &mut Graph, predicted: NodeId, truth: NodeId) -> Result<NodeId> {
    g.l1_loss(predicted, truth)
}

/// Square crop rectangle `(x0, y0, side)` around the mouth landmarks
/// (indices 48..=67) with a relative margin per side, clamped into the
/// image.
pub fn mouth_crop_rect(
    landmarks: &Landmarks2D<f64>,
    margin: f64,
    width: usize,
    height: usize,
) -> Result<(usize, usize, usize)> {
    let pts = &landmarks.points[48..68];
    let (mut minx, mut miny) = (f64::INFINITY, f64::INFINITY);
    let (mut maxx, mut maxy) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        minx = minx.min(p.x);
        maxx = maxx.max(p.x);
        miny = miny.min(p.y);
        maxy = maxy.max(p.y);
    }
    let (w, h) = (maxx - minx, maxy - miny);
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::Degenerate("degenerate mouth bounding box".into()));
    }
    let side_f = w.max(h) * (1.0 + 2.0 * margin);
    let side = (side_f.round() as usize).clamp(1, width.min(height));
    let cx = 0.5 * (minx + maxx);
    let cy = 0.5 * (miny + maxy);
    let x0 = (cx - side_f / 2.0).round().max(0.0) as usize;
    let y0 = (cy - side_f / 2.0).round().max(0.0) as usize;
    let x0 = x0.min(width - side);
    let y0 = y0.min(height - side);
    Ok((x0, y0, side))
}

/// Differentiable mouth crop: rectangle from the landmarks, then nearest
/// resampling to the fixed patch size.
pub fn mouth_crop(
    g: &mut Graph,
    frame: NodeId,
    landmarks: &Landmarks2D<f64>,
    margin: f64,
    patch: usize,
) -> Result<NodeId> {
    let shape = g.value(frame).shape.clone();
    let (x0, y0, side) = mouth_crop_rect(landmarks, margin, shape[2], shape[1])?;
    let cropped = g.crop(frame, y0, x0, side, side)?;
    g.resize_nearest(cropped, patch, patch)
}

/// Exhaustive block-matching flow from `a` to `b`: per block the integer
/// displacement minimizing SAD within the search radius; ties go to the
/// smaller magnitude, then lexicographic (dy, dx). Samples of `b` outside
/// the image clamp to the edge. Output shape `[2, H/block, W/block]`
/// with channel 0 = dy.
pub fn block_flow(a: &Tensor, b: &Tensor, block: usize, radius: i32) -> Result<Tensor> {
    if a.shape != b.shape || a.shape.len() != 3 {
        return Err(Error::ShapeMismatch("block_flow inputs differ".into()));
    }
    let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    if h % block != 0 || w % block != 0 {
        return Err(Error::InvalidArgument(
            "image size not divisible by block".into(),
        ));
    }
    let mut candidates: Vec<(i32, i32)> = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            candidates.push((dy, dx));
        }
    }
    candidates.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    let (bh, bw) = (h / block, w / block);
    let mut flow = Tensor::zeros(vec![2, bh, bw]);
    for by in 0..bh {
        for bx in 0..bw {
            let mut best = f64::INFINITY;
            let mut best_d = (0, 0);
            for &(dy, dx) in &candidates {
                let mut sad = 0.0;
                for ch in 0..c {
                    for y in 0..block {
                        let ay = by * block + y;
                        let sy = (ay as i32 + dy).clamp(0, h as i32 - 1) as usize;
                        for x in 0..block {
                            let ax = bx * block + x;
                            let sx = (ax as i32 + dx).clamp(0, w as i32 - 1) as usize;
                            sad += (a.data[(ch * h + ay) * w + ax]
                                - b.data[(ch * h + sy) * w + sx])
                                .abs();
                        }
                    }
                }
                if sad < best {
                    best = sad;
                    best_d = (dy, dx);
                }
            }
            flow.data[by * bw + bx] = best_d.0 as f64;
            flow.data[bh * bw + by * bw + bx] = best_d.1 as f64;
        }
    }
    Ok(flow)
}

/// Temporal discriminator scores at three time scales. Scale `s` consumes
/// every 2^s-th frame of the window plus block-matching flows between the
/// selected frames, upsampled to frame resolution and stacked channelwise.
pub fn temporal_score(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GanConfig,
    frames: &[NodeId],
) -> Result<Vec<NodeId>> {
    let k = cfg.temporal_window;
    if k < 4 {
        return Err(Error::InvalidArgument("temporal window below 4".into()));
    }
    if frames.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} frames, got {}",
            frames.len()
        )));
    }
    let (h, w) = {
        let s = &g.value(frames[0]).shape;
        (s[1], s[2])
    };
    let mut scores = Vec::new();
    for s in 0..3usize {
        let sel: Vec<NodeId> = frames.iter().copied().step_by(1 << s).collect();
        let mut parts: Vec<NodeId> = sel.clone();
        for pair in sel.windows(2) {
            let flow = block_flow(g.value(pair[0]), g.value(pair[1]), 8, 4)?;
            let leaf = g.leaf(flow);
            parts.push(g.resize_nearest(leaf, h, w)?);
        }
        let stacked = g.concat(&parts)?;
        let expect = temporal_channels(k, s);
        debug_assert_eq!(g.value(stacked).shape[0], expect);
        let c1 = conv_block(g, store, &format!("dv.s{s}.conv1"), stacked, 2)?;
        let f1 = g.leaky_relu(c1, 0.2);
        let c2 = conv_block(g, store, &format!("dv.s{s}.conv2"), f1, 2)?;
        let f2 = g.leaky_relu(c2, 0.2);
        let pooled = g.mean_spatial(f2)?;
        let col = g.reshape(pooled, vec![C2, 1])?;
        let fw = g.param(&format!("dv.s{s}.fc.w"), store)?;
        let fb = g.param(&format!("dv.s{s}.fc.b"), store)?;
        let proj = g.matmul(fw, col)?;
        scores.push(g.add(proj, fb)?);
    }
    Ok(scores)
}

/// One person's training material.
#[derive(Debug, Clone)]
pub struct TrainClip {
    /// RGB frames in [-1,1], each `[3,H,W]`.
    pub frames: Vec<Tensor>,
    /// Conditioning images, each `[3,H,W]`.
    pub nmfcs: Vec<Tensor>,
    /// Foreground masks in [0,1], each `[1,H,W]`.
    pub masks: Vec<Tensor>,
    /// Per-frame landmark tracks for the mouth crop.
    pub landmarks: Vec<Landmarks2D<f64>>,
}

impl TrainClip {
    fn validate(&self, cfg: &GanConfig) -> Result<()> {
        let t = self.frames.len();
        if self.nmfcs.len() != t || self.masks.len() != t || self.landmarks.len() != t {
            return Err(Error::Dataset("clip stream lengths differ".into()));
        }
        if t < cfg.embed_frames.max(3) {
            return Err(Error::Dataset(format!("clip too short ({t} frames)")));
        }
        let r = cfg.resolution;
        for f in &self.frames {
            if f.shape != [3, r, r] {
                return Err(Error::Dataset("frame resolution mismatch".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub l_d: f64,
    pub l_g_adv: f64,
    pub l_vgg: f64,
    pub l_feat: f64,
    pub l_mask: f64,
    pub l_mch: f64,
    pub l_g_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

pub fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "step,L_D,L_G_adv,L_vgg,L_feat,L_mask,L_mch").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.step, r.l_d, r.l_g_adv, r.l_vgg, r.l_feat, r.l_mask, r.l_mch
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

struct StepLosses {
    l_d: f64,
    l_g_adv: f64,
    l_vgg: f64,
    l_feat: f64,
    l_mask: f64,
    l_mch: f64,
    l_g_total: f64,
}

/// One alternating D-step/G-step on a single (clip, frame) sample. Both
/// steps rebuild the full graph; the optimizer only touches the respective
/// parameter prefixes, which acts as the detach.
#[allow(clippy::too_many_arguments)]
fn train_step(
    store: &mut ParamStore,
    cfg: &GanConfig,
    stack: &PerceptualStack,
    clip: &TrainClip,
    id_index: usize,
    t: usize,
    embed_pick: &[usize],
    d_state: &mut AdamState,
    g_state: &mut AdamState,
    adam: &AdamConfig,
) -> Result<StepLosses> {
    let person = cfg.person_specific;
    let id_sel = if person {
        IdSelect::Person
    } else {
        IdSelect::Index(id_index)
    };
    let embed_frames: Vec<Tensor> = embed_pick
        .iter()
        .map(|&j| clip.frames[j].clone())
        .collect();

    let forward = |g: &mut Graph, store: &ParamStore| -> Result<_> {
        let mode = if person {
            NormMode::Instance
        } else {
            NormMode::Embedding(embed_average(g, store, &embed_frames)?)
        };
        let trip = g.leaf(nmfc_triplet(&clip.nmfcs, t));
        let prev = g.leaf(stack_prev(&clip.frames, &clip.nmfcs[t].shape, t));
        let (fake, fake_mask) = generate_frame(g, store, trip, prev, mode)?;
        let real = g.leaf(clip.frames[t].clone());
        let nmfc = g.leaf(clip.nmfcs[t].clone());
        let sr = discriminate_image(g, store, real, nmfc, id_sel)?;
        let sf = discriminate_image(g, store, fake, nmfc, id_sel)?;
        let mr_patch = mouth_crop(g, real, &clip.landmarks[t], 0.25, cfg.mouth_patch)?;
        let mf_patch = mouth_crop(g, fake, &clip.landmarks[t], 0.25, cfg.mouth_patch)?;
        let mr = discriminate_mouth(g, store, mr_patch)?;
        let mf = discriminate_mouth(g, store, mf_patch)?;
        Ok((mode, fake, fake_mask, real, sr, sf, mr, mf))
    };

    // D step.
    let l_d = {
        let mut g = Graph::new();
        let (_, _, _, _, sr, sf, mr, mf) = forward(&mut g, store)?;
        let h1 = hinge_d(&mut g, sr.r, sf.r);
        let h2 = hinge_d(&mut g, sr.patch, sf.patch);
        let h3 = hinge_d(&mut g, mr.score, mf.score);
        let h4 = hinge_d(&mut g, mr.patch, mf.patch);
        let s12 = g.add(h1, h2)?;
        let s34 = g.add(h3, h4)?;
        let sum = g.add(s12, s34)?;
        let loss = g.mul_scalar(sum, 0.25);
        let grads = g.backward(loss)?;
        let pg = g.param_grads(&grads);
        let d_grads: BTreeMap<String, Tensor> = pg
            .into_iter()
            .filter(|(k, _)| k.starts_with("di.") || k.starts_with("dm."))
            .collect();
        adam_step(store, &d_grads, d_state, adam)?;
        g.value(loss).item()
    };

    // G step (embedder included in the multi-person stage).
    let mut g = Graph::new();
    let (mode, fake, fake_mask, real, sr, sf, mr, mf) = forward(&mut g, store)?;
    let a1 = hinge_g(&mut g, sf.r);
    let a2 = hinge_g(&mut g, sf.patch);
    let a3 = hinge_g(&mut g, mf.score);
    let a4 = hinge_g(&mut g, mf.patch);
    let s12 = g.add(a1, a2)?;
    let s34 = g.add(a3, a4)?;
    let asum = g.add(s12, s34)?;
    let l_adv = g.mul_scalar(asum, 0.25);
    let l_vgg = perceptual_loss(&mut g, stack, fake, real)?;
    let mut fake_feats = sf.features.clone();
    fake_feats.extend_from_slice(&mf.features);
    let mut real_feats = sr.features.clone();
    real_feats.extend_from_slice(&mr.features);
    let l_feat = feature_matching_loss(&mut g, &fake_feats, &real_feats)?;
    let mask_gt = g.leaf(clip.masks[t].clone());
    let l_mask = mask_loss(&mut g, fake_mask, mask_gt)?;
    let l_mch = match mode {
        NormMode::Embedding(h) => {
            let wmat = g.param("di.W", &*store)?;
            let row = g.slice_dim0(wmat, id_index, 1)?;
            let n_f = g.value(h).shape[0];
            let wi = g.reshape(row, vec![n_f, 1])?;
            Some(matching_loss(&mut g, h, wi)?)
        }
        NormMode::Instance => None,
    };
    let wv = g.mul_scalar(l_vgg, cfg.lambda_vgg);
    let wf = g.mul_scalar(l_feat, cfg.lambda_feat);
    let wm = g.mul_scalar(l_mask, cfg.lambda_mask);
    let t1 = g.add(l_adv, wv)?;
    let t2 = g.add(t1, wf)?;
    let mut total = g.add(t2, wm)?;
    if let Some(mch) = l_mch {
        let wmch = g.mul_scalar(mch, cfg.lambda_mch);
        total = g.add(total, wmch)?;
    }
    let grads = g.backward(total)?;
    let pg = g.param_grads(&grads);
    let g_grads: BTreeMap<String, Tensor> = pg
        .into_iter()
        .filter(|(k, _)| k.starts_with("g.") || (!person && k.starts_with("eid.")))
        .collect();
    adam_step(store, &g_grads, g_state, adam)?;

    Ok(StepLosses {
        l_d,
        l_g_adv: g.value(l_adv).item(),
        l_vgg: g.value(l_vgg).item(),
        l_feat: g.value(l_feat).item(),
        l_mask: g.value(l_mask).item(),
        l_mch: l_mch.map(|n| g.value(n).item()).unwrap_or(0.0),
        l_g_total: g.value(total).item(),
    })
}

fn train_loop(
    store: &mut ParamStore,
    cfg: &GanConfig,
    clips: &[TrainClip],
    opts: &TrainOptions,
) -> Result<Vec<TrainLogRow>> {
    for clip in clips {
        clip.validate(cfg)?;
    }
    let stack = PerceptualStack::new(opts.seed ^ 0x9e3779b97f4a7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut d_state = AdamState::new();
    let mut g_state = AdamState::new();
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let id_index = rng.gen_range(0..clips.len());
        let clip = &clips[id_index];
        let t = rng.gen_range(2..clip.frames.len());
        let embed_pick: Vec<usize> = (0..cfg.embed_frames)
            .map(|_| rng.gen_range(0..clip.frames.len()))
            .collect();
        let losses = train_step(
            store,
            cfg,
            &stack,
            clip,
            id_index,
            t,
            &embed_pick,
            &mut d_state,
            &mut g_state,
            &opts.adam,
        )?;
        log.push(TrainLogRow {
            step,
            l_d: losses.l_d,
            l_g_adv: losses.l_g_adv,
            l_vgg: losses.l_vgg,
            l_feat: losses.l_feat,
            l_mask: losses.l_mask,
            l_mch: losses.l_mch,
            l_g_total: losses.l_g_total,
        });
    }
    Ok(log)
}

/// Multi-person adversarial stage. The temporal discriminator is exercised
/// through `temporal_score`; the step loop trains the image and mouth
/// discriminators.
pub fn train_init_stage(
    clips: &[TrainClip],
    cfg: &GanConfig,
    opts: &TrainOptions,
) -> Result<(ParamStore, Vec<TrainLogRow>)> {
    if cfg.person_specific {
        return Err(Error::InvalidArgument(
            "init stage on a person-specific config".into(),
        ));
    }
    if clips.len() < 2 {
        return Err(Error::Dataset("init stage needs at least 2 identities".into()));
    }
    if clips.len() != cfg.num_identities {
        return Err(Error::Dataset(format!(
            "{} clips for {} identity rows",
            clips.len(),
            cfg.num_identities
        )));
    }
    let mut store = init_gan_params(cfg, opts.seed);
    let log = train_loop(&mut store, cfg, clips, opts)?;
    Ok((store, log))
}

/// Converts a multi-person checkpoint into a person-specific one: the new
/// person's average embedding is baked into every normalization site
/// (gamma = P_g h, beta = P_b h, computed with the same matmul as the
/// forward pass), the identity matrix collapses to a single vector, and
/// the embedder is dropped.
pub fn finetune_init(
    store: &ParamStore,
    cfg: &GanConfig,
    frames: &[Tensor],
) -> Result<(ParamStore, GanConfig)> {
    if cfg.person_specific {
        return Err(Error::InvalidArgument("checkpoint already converted".into()));
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument("conversion clip is empty".into()));
    }
    let mut g = Graph::new();
    let h_node = embed_average(&mut g, store, frames)?;
    let h = g.value(h_node).clone();

    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if name.starts_with("eid.") || name == "di.W" {
            continue;
        }
        out.insert(name, t.clone());
    }
    for (site, ch) in norm_sites() {
        for (mat, dst) in [("pg", "gamma"), ("pb", "beta")] {
            let p = out
                .remove(&format!("{site}.{mat}"))
                .ok_or_else(|| Error::InvalidArgument(format!("missing {site}.{mat}")))?;
            let mut cg = Graph::new();
            let pl = cg.leaf(p);
            let hl = cg.leaf(h.clone());
            let col = cg.matmul(pl, hl)?;
            let vec = cg.reshape(col, vec![ch])?;
            out.insert(&format!("{site}.{dst}"), cg.value(vec).clone());
        }
    }
    out.insert(
        "di.w",
        Tensor::new(vec![1, cfg.n_f], h.data.clone())?,
    );
    let mut pcfg = cfg.clone();
    pcfg.person_specific = true;
    pcfg.num_identities = 1;
    Ok((out, pcfg))
}

/// Person-specific adversarial refinement: the init-stage loop minus the
/// embedder and matching loss.
pub fn finetune_train(
    store: &ParamStore,
    cfg: &GanConfig,
    clip: &TrainClip,
    opts: &TrainOptions,
) -> Result<(ParamStore, Vec<TrainLogRow>)> {
    if !cfg.person_specific {
        return Err(Error::InvalidArgument(
            "fine-tuning needs a converted checkpoint".into(),
        ));
    }
    let mut out = store.clone();
    let log = train_loop(&mut out, cfg, std::slice::from_ref(clip), opts)?;
    Ok((out, log))
}

/// Mean absolute per-pixel, per-channel distance between [-1,1] frames on
/// the 0-255 scale, optionally restricted to foreground (mask > 0.5).
pub fn masked_distance_255(fake: &Tensor, real: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    if fake.shape != real.shape || fake.shape.len() != 3 {
        return Err(Error::ShapeMismatch("distance shapes differ".into()));
    }
    let (c, h, w) = (fake.shape[0], fake.shape[1], fake.shape[2]);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if m.data[y * w + x] <= 0.5 {
                    continue;
                }
            }
            for ch in 0..c {
                sum += (fake.data[(ch * h + y) * w + x] - real.data[(ch * h + y) * w + x]).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    Ok(sum / count as f64 * 127.5)
}

const GAN_CKPT_MAGIC: &[u8; 4] = b"GCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct GanCheckpoint {
    pub config: GanConfig,
    pub params: ParamStore,
}

/// Layout: magic, u32 LE config-JSON length, config JSON, parameter blob.
pub fn save_gan_checkpoint(path: &Path, ckpt: &GanCheckpoint) -> Result<()> {
    let cfg = serde_json::to_vec(&ckpt.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(GAN_CKPT_MAGIC);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&save_checkpoint_bytes(&ckpt.params));
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_gan_checkpoint(path: &Path) -> Result<GanCheckpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[0..4] != GAN_CKPT_MAGIC {
        return Err(Error::CorruptContainer("bad checkpoint magic".into()));
    }
    let clen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + clen {
        return Err(Error::CorruptContainer("truncated config".into()));
    }
    let config: GanConfig = serde_json::from_slice(&bytes[8..8 + clen])
        .map_err(|_| Error::CorruptContainer("bad config json".into()))?;
    let params = load_checkpoint_bytes(&bytes[8 + clen..])?;
    Ok(GanCheckpoint { config, params })
}
