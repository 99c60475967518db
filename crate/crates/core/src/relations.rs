//! Typed relation networks: decomposition (parent to child), composition
//! (child to parent) and dependency (sibling to sibling), with their
//! attention maps and the context extraction used by dependency edges.
//!
//! Parameter layout:
//! - `relations.decomposition.<u>.<v>.logit`: 1×1 logit map for child `v` of `u`
//! - `relations.composition.<v>.att`: 1×1 reduction over the children of `v`
//! - `relations.dependency.<u>.<v>.logit`: 1×1 logit map on the context of `u`
//! - `relations.dependency.context.{proj,rho}`: shared affinity projection and compression
//! - `relations.<kind>.net`: 3×3 relation network applied to `[source, h_v]`
//! - `relations.agnostic.net`: single network shared by every edge kind

use hparse_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::hierarchy::{Edge, NodeIdx, RelationKind, ValidatedHierarchy};
use crate::params::{Init, ParamStore, Session};

pub const SPATIAL_CHANNELS: usize = 8;
pub const AGNOSTIC_NET: &str = "relations.agnostic.net";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Channels sum to one at every pixel.
    Simplex,
    /// Every entry lies in `[0, 1]`.
    UnitInterval,
}

/// `[N, k, H, W]` attention weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub weights: Var,
    pub normalization: Normalization,
}

#[derive(Clone, Copy, Debug)]
pub struct RelationEmbedding {
    pub edge: Edge,
    pub h: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ContextFeature {
    pub owner: NodeIdx,
    /// `[N, c, H, W]`
    pub f: Var,
    /// `[N, HW, HW]`; row `i` holds the normalised weights of query pixel `i`
    /// over all reference pixels.
    pub affinity: Var,
}

pub fn net_name(kind: RelationKind) -> String {
    format!("relations.{}.net", kind.as_str())
}

pub fn decomposition_logit_name(h: &ValidatedHierarchy, u: NodeIdx, v: NodeIdx) -> String {
    format!("relations.decomposition.{}.{}.logit", h.id(u), h.id(v))
}

pub fn composition_att_name(h: &ValidatedHierarchy, v: NodeIdx) -> String {
    format!("relations.composition.{}.att", h.id(v))
}

pub fn dependency_logit_name(h: &ValidatedHierarchy, u: NodeIdx, v: NodeIdx) -> String {
    format!("relations.dependency.{}.{}.logit", h.id(u), h.id(v))
}

const CONTEXT_PROJ: &str = "relations.dependency.context.proj";
const CONTEXT_RHO: &str = "relations.dependency.context.rho";

fn no_decay<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
    if let Some(p) = store.get_mut(&format!("{prefix}.bias")) {
        p.decay = false;
    }
}

/// Attention and context parameters for one relation kind.
pub fn register_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &Init,
    h: &ValidatedHierarchy,
    kind: RelationKind,
    c: usize,
    feat_c: usize,
) {
    match kind {
        RelationKind::Decomposition => {
            for e in h.decomposition_edges() {
                let name = decomposition_logit_name(h, e.from, e.to);
                init.conv(store, &name, 1, c, 1, true);
                no_decay(store, &name);
            }
        }
        RelationKind::Composition => {
            for v in h.nodes().filter(|&v| !h.children(v).is_empty()) {
                let name = composition_att_name(h, v);
                init.conv(store, &name, 1, c * h.children(v).len(), 1, true);
                no_decay(store, &name);
            }
        }
        RelationKind::Dependency => {
            let d = c + SPATIAL_CHANNELS;
            let proj_std = (1.0 / ((feat_c + SPATIAL_CHANNELS) * d) as f64).sqrt();
            init.conv_with_std(store, CONTEXT_PROJ, d, feat_c + SPATIAL_CHANNELS, 1, false, proj_std);
            init.conv(store, CONTEXT_RHO, c, feat_c, 1, true);
            for e in h.dependency_edges() {
                let name = dependency_logit_name(h, e.from, e.to);
                init.conv(store, &name, 1, c, 1, true);
                no_decay(store, &name);
            }
        }
    }
}

/// 3×3 relation network mapping `[source (c), h_v (c)]` to `c` channels.
pub fn register_net<T: Scalar>(store: &mut ParamStore<T>, init: &Init, name: &str, c: usize) {
    init.conv(store, name, c, 2 * c, 3, true);
}

/// `R([source, h_v])` with a 3×3 receptive field and rectified output.
pub fn relation_net<T: Scalar>(s: &mut Session<'_, T>, net: &str, source: Var, h_v: Var) -> Result<Var> {
    same_shape(s, source, h_v, "relation input")?;
    let cat = s.tape.concat(&[source, h_v]);
    Ok(s.conv_relu(net, cat, 1, 1))
}

fn same_shape<T: Scalar>(s: &Session<'_, T>, a: Var, b: Var, what: &str) -> Result<()> {
    if s.tape.shape(a) != s.tape.shape(b) {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", s.tape.shape(a), s.tape.shape(b))));
    }
    Ok(())
}

fn gate<T: Scalar>(s: &mut Session<'_, T>, x: Var, att: Var) -> Result<Var> {
    let (xs, gs) = (s.tape.shape(x), s.tape.shape(att));
    if xs.len() != 4 || gs.len() != 4 || gs[1] != 1 || xs[0] != gs[0] || xs[2..] != gs[2..] {
        return Err(Error::Shape(format!("cannot gate {xs:?} with {gs:?}")));
    }
    Ok(s.tape.mul_channel(x, att))
}

/// Softmax over children of per-child 1×1 logit maps of `h_u`.
pub fn decomp_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    u: NodeIdx,
    h_u: Var,
) -> Result<AttentionMap> {
    let children = h.children(u);
    if children.is_empty() {
        return Err(Error::EmptyChildren(h.id(u).to_string()));
    }
    let logits: Vec<Var> = children.iter().map(|&v| s.conv(&decomposition_logit_name(h, u, v), h_u, 1, 0)).collect();
    let stacked = s.tape.concat(&logits);
    Ok(AttentionMap { weights: s.tape.softmax(stacked, 1), normalization: Normalization::Simplex })
}

/// Channel `i` of an attention stack as a `[N, 1, H, W]` map.
pub fn attention_slice<T: Scalar>(s: &mut Session<'_, T>, att: &AttentionMap, i: usize) -> Var {
    s.tape.narrow(att.weights, i, 1)
}

/// `R^dec([h_u ⊙ att_child, h_v])`.
pub fn decomp_message<T: Scalar>(s: &mut Session<'_, T>, h_u: Var, h_v: Var, att_child: Var) -> Result<Var> {
    let f = gate(s, h_u, att_child)?;
    relation_net(s, &net_name(RelationKind::Decomposition), f, h_v)
}

/// Logistic 1×1 reduction over the concatenated children of `v`.
pub fn comp_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    v: NodeIdx,
    child_states: &[Var],
) -> Result<AttentionMap> {
    if child_states.is_empty() {
        return Err(Error::EmptyChildren(h.id(v).to_string()));
    }
    let cat = s.tape.concat(child_states);
    let logit = s.conv(&composition_att_name(h, v), cat, 1, 0);
    Ok(AttentionMap { weights: s.tape.sigmoid(logit), normalization: Normalization::UnitInterval })
}

/// `R^com([h_u ⊙ att_parent, h_v])` for a child `u` of `v`.
pub fn comp_message<T: Scalar>(s: &mut Session<'_, T>, h_u: Var, h_v: Var, att_parent: Var) -> Result<Var> {
    let f = gate(s, h_u, att_parent)?;
    relation_net(s, &net_name(RelationKind::Composition), f, h_v)
}

/// `[N, 8, H, W]` spatial encoding: `x/W, y/H`, centred `x, y` in `[-1, 1]`,
/// squared normalised positions, then the constants `1/W` and `1/H`.
pub fn spatial_channels<T: Scalar>(n: usize, height: usize, width: usize) -> Tensor<T> {
    let plane = height * width;
    let mut data = Vec::with_capacity(n * SPATIAL_CHANNELS * plane);
    for _ in 0..n {
        for ch in 0..SPATIAL_CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    let xn = (x as f64 + 0.5) / width as f64;
                    let yn = (y as f64 + 0.5) / height as f64;
                    let v = match ch {
                        0 => xn,
                        1 => yn,
                        2 => 2.0 * xn - 1.0,
                        3 => 2.0 * yn - 1.0,
                        4 => xn * xn,
                        5 => yn * yn,
                        6 => 1.0 / width as f64,
                        _ => 1.0 / height as f64,
                    };
                    data.push(T::of(v));
                }
            }
        }
    }
    Tensor::new(&[n, SPATIAL_CHANNELS, height, width], data)
}

/// Context of node `u`: affinities between the spatially augmented node
/// feature (query) and projected image feature (reference), normalised over
/// reference pixels, then used to pool `x` and compressed by `ρ`.
pub fn context_extract<T: Scalar>(s: &mut Session<'_, T>, u: NodeIdx, h_u: Var, x: Var) -> Result<ContextFeature> {
    let (hs, xs) = (s.tape.shape(h_u).to_vec(), s.tape.shape(x).to_vec());
    if hs.len() != 4 || xs.len() != 4 || hs[0] != xs[0] || hs[2..] != xs[2..] {
        return Err(Error::Shape(format!("context: node {hs:?} not aligned with image {xs:?}")));
    }
    let (n, height, width) = (hs[0], hs[2], hs[3]);
    let hw = height * width;
    let coords = s.constant(spatial_channels(n, height, width));
    let h_aug = s.tape.concat(&[h_u, coords]);
    let x_aug = s.tape.concat(&[x, coords]);
    let key = s.conv(CONTEXT_PROJ, x_aug, 1, 0);
    let d = s.tape.shape(key)[1];
    if d != hs[1] + SPATIAL_CHANNELS {
        return Err(Error::Shape(format!("context projection width {d} does not match node width {}", hs[1])));
    }
    let q = s.tape.reshape(h_aug, &[n, d, hw]);
    let k = s.tape.reshape(key, &[n, d, hw]);
    let raw = s.tape.bmm(q, k, true, false);
    let affinity = s.tape.softmax(raw, 2);
    let xr = s.tape.reshape(x, &[n, xs[1], hw]);
    let pooled = s.tape.bmm(xr, affinity, false, true);
    let pooled = s.tape.reshape(pooled, &[n, xs[1], height, width]);
    let f = s.conv(CONTEXT_RHO, pooled, 1, 0);
    Ok(ContextFeature { owner: u, f, affinity })
}

/// Softmax over the dependency targets of `u` of per-pair 1×1 logit maps of its context.
pub fn dep_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    ctx: &ContextFeature,
) -> Result<AttentionMap> {
    let u = ctx.owner;
    let targets = h.dependency_targets(u);
    if targets.is_empty() {
        return Err(Error::EmptySiblings(h.id(u).to_string()));
    }
    let logits: Vec<Var> = targets.iter().map(|&v| s.conv(&dependency_logit_name(h, u, v), ctx.f, 1, 0)).collect();
    let stacked = s.tape.concat(&logits);
    Ok(AttentionMap { weights: s.tape.softmax(stacked, 1), normalization: Normalization::Simplex })
}

/// `R^dep([F^cont(h_u) ⊙ att_sib, h_v])`.
pub fn dep_message<T: Scalar>(s: &mut Session<'_, T>, ctx: &ContextFeature, h_v: Var, att_sib: Var) -> Result<Var> {
    let f = gate(s, ctx.f, att_sib)?;
    relation_net(s, &net_name(RelationKind::Dependency), f, h_v)
}
