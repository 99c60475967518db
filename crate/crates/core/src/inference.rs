//! Iterative message passing over the part hierarchy, the per-level decoder
//! and the readout into per-pixel class probabilities.

use std::collections::BTreeMap;

use hparse_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ImageFeatures, NodeState};
use crate::error::{Error, Result};
use crate::hierarchy::{Edge, NodeIdx, RelationKind, ValidatedHierarchy};
use crate::params::{Init, ParamStore, Session};
use crate::relations::{self, AttentionMap, ContextFeature, RelationEmbedding};

/// How edge embeddings are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    /// Typed networks applied to attention-adapted source features.
    Typed,
    /// Typed networks applied to raw `[h_u, h_v]`.
    TypedNoAdapt,
    /// One network shared by every edge kind, applied to raw `[h_u, h_v]`.
    Agnostic,
}

/// Which edge kinds contribute to the incoming message sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationKinds {
    pub decomposition: bool,
    pub composition: bool,
    pub dependency: bool,
}

impl RelationKinds {
    pub const ALL: RelationKinds = RelationKinds { decomposition: true, composition: true, dependency: true };

    pub fn only(kind: RelationKind) -> Self {
        RelationKinds {
            decomposition: kind == RelationKind::Decomposition,
            composition: kind == RelationKind::Composition,
            dependency: kind == RelationKind::Dependency,
        }
    }

    pub fn contains(&self, kind: RelationKind) -> bool {
        match kind {
            RelationKind::Decomposition => self.decomposition,
            RelationKind::Composition => self.composition,
            RelationKind::Dependency => self.dependency,
        }
    }

    pub fn enabled(&self) -> Vec<RelationKind> {
        RelationKind::ALL.into_iter().filter(|&k| self.contains(k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Backbone output width `C`.
    pub feat_channels: usize,
    /// Width of the stride-4 tap.
    pub low_channels: usize,
    /// Node embedding width `c`.
    pub node_channels: usize,
    /// Decoder output width.
    pub decoder_channels: usize,
    /// Width of the reduced low-level feature inside the decoder.
    pub low_reduce: usize,
    pub relation_mode: RelationMode,
    pub kinds: RelationKinds,
    /// Separate GRU gates per node instead of one shared set.
    pub per_node_gru: bool,
    /// Compute dependency context once from the initial states and reuse it.
    pub freeze_context: bool,
    /// Number of message-passing iterations `T`.
    pub iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_channels: 32,
            low_channels: 16,
            node_channels: 16,
            decoder_channels: 16,
            low_reduce: 8,
            relation_mode: RelationMode::Typed,
            kinds: RelationKinds::ALL,
            per_node_gru: false,
            freeze_context: false,
            iterations: 2,
        }
    }
}

/// Sum of incoming edge embeddings of one node.
#[derive(Clone, Copy, Debug)]
pub struct MessageBundle {
    pub node: NodeIdx,
    pub m: Var,
    pub term_count: usize,
}

/// `[N, |V_l| + 1, 4H, 4W]` per-pixel probabilities; channel 0 is background,
/// channel `k+1` is the `k`-th node of the level.
#[derive(Clone, Copy, Debug)]
pub struct LevelPrediction {
    pub level: u8,
    pub t: usize,
    pub scores: Var,
}

/// Attention maps produced during one iteration, keyed by owning node.
#[derive(Clone, Debug, Default)]
pub struct AttentionSet {
    pub decomposition: Vec<(NodeIdx, AttentionMap)>,
    pub composition: Vec<(NodeIdx, AttentionMap)>,
    pub dependency: Vec<(NodeIdx, AttentionMap)>,
}

#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub t: usize,
    /// One prediction per populated level, ascending; empty when not decoded.
    pub levels: Vec<LevelPrediction>,
    pub attention: AttentionSet,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub features: ImageFeatures,
    /// `t = 1..=T`, or the single `t = 0` entry when `T = 0`.
    pub iterations: Vec<IterationOutput>,
    /// Number of times each directed edge embedding was computed.
    pub relation_calls: BTreeMap<Edge, usize>,
}

impl ForwardOutput {
    pub fn last(&self) -> &IterationOutput {
        self.iterations.last().expect("forward emits at least one iteration")
    }
}

/// Which iterations get decoded into predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Emit {
    All,
    Last,
}

/// Incoming edges of `v` among the enabled kinds, in kind order.
pub fn in_edges(h: &ValidatedHierarchy, v: NodeIdx, kinds: RelationKinds) -> Vec<Edge> {
    let mut out = Vec::new();
    if kinds.decomposition {
        out.extend(h.parent(v).map(|u| Edge { from: u, to: v, kind: RelationKind::Decomposition }));
    }
    if kinds.composition {
        out.extend(h.children(v).iter().map(|&u| Edge { from: u, to: v, kind: RelationKind::Composition }));
    }
    if kinds.dependency {
        out.extend(h.dependency_sources(v).iter().map(|&u| Edge { from: u, to: v, kind: RelationKind::Dependency }));
    }
    out
}

fn edge_label(h: &ValidatedHierarchy, e: &Edge) -> String {
    format!("{} {} -> {}", e.kind.as_str(), h.id(e.from), h.id(e.to))
}

/// Elementwise sum of the embeddings arriving at `v`. `expected` lists its
/// in-edges; each must appear exactly once in `incoming`.
pub fn aggregate_messages<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    v: NodeIdx,
    incoming: &[RelationEmbedding],
    expected: &[Edge],
    state_shape: &[usize],
) -> Result<MessageBundle> {
    let mut terms = Vec::with_capacity(expected.len());
    for e in expected {
        let mut found = incoming.iter().filter(|r| r.edge == *e);
        let first = found.next().ok_or_else(|| Error::MissingEdge(edge_label(h, e)))?;
        if found.next().is_some() {
            return Err(Error::DuplicateEdge(edge_label(h, e)));
        }
        if s.tape.shape(first.h) != state_shape {
            return Err(Error::Shape(format!("embedding {} has shape {:?}", edge_label(h, e), s.tape.shape(first.h))));
        }
        terms.push(first.h);
    }
    if let Some(stray) = incoming.iter().find(|r| r.edge.to != v || !expected.contains(&r.edge)) {
        return Err(Error::InvalidHierarchy(format!("unexpected embedding {} for {}", edge_label(h, &stray.edge), h.id(v))));
    }
    let m = if terms.is_empty() { s.constant(Tensor::zeros(state_shape)) } else { s.tape.add_n(&terms) };
    Ok(MessageBundle { node: v, m, term_count: terms.len() })
}

/// `(1 - z) ⊙ h + z ⊙ cand`.
pub fn gru_combine<T: Scalar>(s: &mut Session<'_, T>, h: Var, z: Var, cand: Var) -> Var {
    let keep = s.tape.affine(z, -T::one(), T::one());
    let a = s.tape.mul(keep, h);
    let b = s.tape.mul(z, cand);
    s.tape.add(a, b)
}

/// Convolutional GRU update of one node state.
pub fn update_state<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, prev: &NodeState, m: &MessageBundle, t: usize) -> Result<NodeState> {
    if s.tape.shape(prev.h) != s.tape.shape(m.m) {
        return Err(Error::Shape(format!("state {:?} vs message {:?}", s.tape.shape(prev.h), s.tape.shape(m.m))));
    }
    let c = s.tape.shape(prev.h)[1];
    let hm = s.tape.concat(&[prev.h, m.m]);
    let gates = s.conv(&format!("{prefix}.gates"), hm, 1, 1);
    let gates = s.tape.sigmoid(gates);
    let z = s.tape.narrow(gates, 0, c);
    let r = s.tape.narrow(gates, c, c);
    let rh = s.tape.mul(r, prev.h);
    let rhm = s.tape.concat(&[rh, m.m]);
    let cand = s.conv(&format!("{prefix}.candidate"), rhm, 1, 1);
    let cand = s.tape.tanh(cand);
    let h = gru_combine(s, prev.h, z, cand);
    Ok(NodeState::new(prev.node, h, t))
}

/// Bilinear 2× upsample of `h`, concatenated with the reduced low-level
/// feature and fused by a 3×3 convolution.
pub fn decode<T: Scalar>(s: &mut Session<'_, T>, level: u8, h: Var, low_reduced: Var) -> Result<Var> {
    let (hs, ls) = (s.tape.shape(h).to_vec(), s.tape.shape(low_reduced).to_vec());
    if ls.len() != 4 || hs[0] != ls[0] || ls[2] != 2 * hs[2] || ls[3] != 2 * hs[3] {
        return Err(Error::Shape(format!("decoder: state {hs:?} vs low-level {ls:?}")));
    }
    let up = s.tape.resize_bilinear(h, ls[2], ls[3]);
    let cat = s.tape.concat(&[up, low_reduced]);
    Ok(s.conv_relu(&format!("inference.decoder.l{level}.fuse"), cat, 1, 1))
}

/// Per-node 1×1 readout plus a background channel from the mean decoded
/// feature, softmaxed over channels.
pub fn readout<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    level: u8,
    decoded: &[(NodeIdx, Var)],
    t: usize,
) -> Result<LevelPrediction> {
    let nodes = h.level_nodes(level);
    if decoded.len() != nodes.len() || decoded.iter().zip(&nodes).any(|((a, _), b)| a != b) {
        return Err(Error::Shape(format!("level {level} readout needs one feature per node in order")));
    }
    let feats: Vec<Var> = decoded.iter().map(|&(_, f)| f).collect();
    let sum = s.tape.add_n(&feats);
    let mean = s.tape.scale(sum, T::of(1.0 / feats.len() as f64));
    let mut logits = vec![s.conv(&format!("inference.readout.background.l{level}"), mean, 1, 0)];
    for &(v, f) in decoded {
        logits.push(s.conv(&format!("inference.readout.{}", h.id(v)), f, 1, 0));
    }
    let stacked = s.tape.concat(&logits);
    Ok(LevelPrediction { level, t, scores: s.tape.softmax(stacked, 1) })
}

#[derive(Clone, Debug)]
pub struct ParserModel {
    pub hierarchy: ValidatedHierarchy,
    pub config: ModelConfig,
}

impl ParserModel {
    pub fn new(hierarchy: ValidatedHierarchy, config: ModelConfig) -> Self {
        ParserModel { hierarchy, config }
    }

    /// Levels that have at least one node, ascending.
    pub fn levels(&self) -> Vec<u8> {
        (1..=3).filter(|&l| !self.hierarchy.level_nodes(l).is_empty()).collect()
    }

    pub fn gru_prefix(&self, v: NodeIdx) -> String {
        if self.config.per_node_gru {
            format!("inference.gru.{}", self.hierarchy.id(v))
        } else {
            "inference.gru".to_string()
        }
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let cfg = &self.config;
        let h = &self.hierarchy;
        let init = Init { seed };
        let c = cfg.node_channels;
        let mut store = ParamStore::new();
        backbone::register(&mut store, &init, cfg.feat_channels, cfg.low_channels, c, h.len());

        let kinds = cfg.kinds.enabled();
        match cfg.relation_mode {
            RelationMode::Typed => {
                for &k in &kinds {
                    relations::register_attention(&mut store, &init, h, k, c, cfg.feat_channels);
                    relations::register_net(&mut store, &init, &relations::net_name(k), c);
                }
            }
            RelationMode::TypedNoAdapt => {
                for &k in &kinds {
                    relations::register_net(&mut store, &init, &relations::net_name(k), c);
                }
            }
            RelationMode::Agnostic => {
                if !kinds.is_empty() {
                    relations::register_net(&mut store, &init, relations::AGNOSTIC_NET, c);
                }
            }
        }

        let gru_prefixes: Vec<String> = if cfg.per_node_gru {
            h.nodes().map(|v| self.gru_prefix(v)).collect()
        } else {
            vec![self.gru_prefix(NodeIdx(0))]
        };
        for p in gru_prefixes {
            init.conv(&mut store, &format!("{p}.gates"), 2 * c, 2 * c, 3, true);
            init.conv(&mut store, &format!("{p}.candidate"), c, 2 * c, 3, true);
            store.get_mut(&format!("{p}.gates.bias")).unwrap().decay = false;
            store.get_mut(&format!("{p}.candidate.bias")).unwrap().decay = false;
        }

        for l in self.levels() {
            init.conv(&mut store, &format!("inference.decoder.l{l}.low"), cfg.low_reduce, cfg.low_channels, 1, true);
            init.conv(&mut store, &format!("inference.decoder.l{l}.fuse"), cfg.decoder_channels, c + cfg.low_reduce, 3, true);
            init.conv(&mut store, &format!("inference.readout.background.l{l}"), 1, cfg.decoder_channels, 1, true);
            for v in h.level_nodes(l) {
                init.conv(&mut store, &format!("inference.readout.{}", h.id(v)), 1, cfg.decoder_channels, 1, true);
            }
        }
        store
    }

    fn decode_levels<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        states: &[NodeState],
        low: &BTreeMap<u8, Var>,
        t: usize,
    ) -> Result<Vec<LevelPrediction>> {
        let mut out = Vec::new();
        for l in self.levels() {
            let mut decoded = Vec::new();
            for v in self.hierarchy.level_nodes(l) {
                decoded.push((v, decode(s, l, states[v.0].h, low[&l])?));
            }
            out.push(readout(s, &self.hierarchy, l, &decoded, t)?);
        }
        Ok(out)
    }

    /// Runs the backbone, `iterations` rounds of message passing and the readout.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var, iterations: usize, emit: Emit) -> Result<ForwardOutput> {
        let h = &self.hierarchy;
        let cfg = &self.config;
        let features = backbone::extract_features(s, image)?;
        let mut low = BTreeMap::new();
        for l in self.levels() {
            let r = s.conv_relu(&format!("inference.decoder.l{l}.low"), features.low_level, 1, 0);
            low.insert(l, r);
        }
        let mut states = backbone::project_nodes(s, features.x, h, cfg.node_channels)?;
        let state_shape = s.tape.shape(states[0].h).to_vec();
        let mut relation_calls = BTreeMap::new();
        let mut outputs = Vec::new();
        if iterations == 0 {
            let levels = self.decode_levels(s, &states, &low, 0)?;
            outputs.push(IterationOutput { t: 0, levels, attention: AttentionSet::default() });
        }
        let mut frozen_context: BTreeMap<NodeIdx, ContextFeature> = BTreeMap::new();
        for t in 1..=iterations {
            let mut attention = AttentionSet::default();
            let mut incoming: Vec<Vec<RelationEmbedding>> = vec![Vec::new(); h.len()];
            let hs: Vec<Var> = states.iter().map(|st| st.h).collect();
            let typed = cfg.relation_mode == RelationMode::Typed;
            for kind in cfg.kinds.enabled() {
                let edges = match kind {
                    RelationKind::Decomposition => h.decomposition_edges(),
                    RelationKind::Composition => h.composition_edges(),
                    RelationKind::Dependency => h.dependency_edges(),
                };
                let mut att_by_owner: BTreeMap<NodeIdx, AttentionMap> = BTreeMap::new();
                let mut ctx_by_owner: BTreeMap<NodeIdx, ContextFeature> = BTreeMap::new();
                if typed {
                    match kind {
                        RelationKind::Decomposition => {
                            for u in h.nodes().filter(|&u| !h.children(u).is_empty()) {
                                let a = relations::decomp_attention(s, h, u, hs[u.0])?;
                                att_by_owner.insert(u, a);
                                attention.decomposition.push((u, a));
                            }
                        }
                        RelationKind::Composition => {
                            for v in h.nodes().filter(|&v| !h.children(v).is_empty()) {
                                let kids: Vec<Var> = h.children(v).iter().map(|c| hs[c.0]).collect();
                                let a = relations::comp_attention(s, h, v, &kids)?;
                                att_by_owner.insert(v, a);
                                attention.composition.push((v, a));
                            }
                        }
                        RelationKind::Dependency => {
                            for u in h.nodes().filter(|&u| !h.dependency_targets(u).is_empty()) {
                                let ctx = match frozen_context.get(&u) {
                                    Some(c) => *c,
                                    None => {
                                        let c = relations::context_extract(s, u, hs[u.0], features.x)?;
                                        if cfg.freeze_context {
                                            frozen_context.insert(u, c);
                                        }
                                        c
                                    }
                                };
                                let a = relations::dep_attention(s, h, &ctx)?;
                                ctx_by_owner.insert(u, ctx);
                                att_by_owner.insert(u, a);
                                attention.dependency.push((u, a));
                            }
                        }
                    }
                }
                for e in edges {
                    let (hu, hv) = (hs[e.from.0], hs[e.to.0]);
                    let msg = match cfg.relation_mode {
                        RelationMode::Agnostic => relations::relation_net(s, relations::AGNOSTIC_NET, hu, hv)?,
                        RelationMode::TypedNoAdapt => relations::relation_net(s, &relations::net_name(kind), hu, hv)?,
                        RelationMode::Typed => match kind {
                            RelationKind::Decomposition => {
                                let att = att_by_owner[&e.from];
                                let i = h.children(e.from).iter().position(|&c| c == e.to).expect("child of parent");
                                let a = relations::attention_slice(s, &att, i);
                                relations::decomp_message(s, hu, hv, a)?
                            }
                            RelationKind::Composition => relations::comp_message(s, hu, hv, att_by_owner[&e.to].weights)?,
                            RelationKind::Dependency => {
                                let att = att_by_owner[&e.from];
                                let i = h.dependency_targets(e.from).iter().position(|&c| c == e.to).expect("target");
                                let a = relations::attention_slice(s, &att, i);
                                relations::dep_message(s, &ctx_by_owner[&e.from], hv, a)?
                            }
                        },
                    };
                    *relation_calls.entry(e).or_insert(0) += 1;
                    incoming[e.to.0].push(RelationEmbedding { edge: e, h: msg });
                }
            }
            let mut next = Vec::with_capacity(h.len());
            for v in h.nodes() {
                let expected = in_edges(h, v, cfg.kinds);
                let m = aggregate_messages(s, h, v, &incoming[v.0], &expected, &state_shape)?;
                next.push(update_state(s, &self.gru_prefix(v), &states[v.0], &m, t)?);
            }
            states = next;
            let levels = if emit == Emit::All || t == iterations { self.decode_levels(s, &states, &low, t)? } else { Vec::new() };
            outputs.push(IterationOutput { t, levels, attention });
        }
        Ok(ForwardOutput { features, iterations: outputs, relation_calls })
    }

    /// Final-iteration level probabilities for an `[N, 3, H, W]` image batch, without gradients.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>, iterations: usize) -> Result<Vec<Tensor<T>>> {
        let mut s = Session::new(params, false);
        let img = s.constant(image.clone());
        let out = self.forward(&mut s, img, iterations, Emit::Last)?;
        Ok(out.last().levels.iter().map(|p| s.tape.value(p.scores).clone()).collect())
    }
}
