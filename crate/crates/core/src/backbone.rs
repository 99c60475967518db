//! Small convolutional backbone (stride 8 features plus a stride 4 tap) and
//! the projection of image features into per-node embeddings.

use std::cell::Cell;

use hparse_tensor::{Scalar, Var};

use crate::error::{Error, Result};
use crate::hierarchy::{NodeIdx, ValidatedHierarchy};
use crate::params::{Init, ParamStore, Session};

pub const STRIDE: usize = 8;
const STAGE1_CHANNELS: usize = 16;

/// Backbone outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    /// `[N, C, H/8, W/8]`
    pub x: Var,
    /// `[N, C_low, H/4, W/4]`
    pub low_level: Var,
    /// `(width, height)` of the input in pixels.
    pub input_size: (usize, usize),
}

pub fn register<T: Scalar>(store: &mut ParamStore<T>, init: &Init, feat_channels: usize, low_channels: usize, node_channels: usize, num_nodes: usize) {
    init.conv(store, "backbone.stage1", STAGE1_CHANNELS, 3, 3, true);
    init.conv(store, "backbone.stage2", low_channels, STAGE1_CHANNELS, 3, true);
    init.conv(store, "backbone.stage3", feat_channels, low_channels, 3, true);
    init.conv(store, "backbone.stage4", feat_channels, feat_channels, 3, false);
    init.conv(store, "backbone.projection", node_channels * num_nodes, feat_channels, 3, true);
}

/// Runs the backbone on an `[N, 3, H, W]` image batch with `H`, `W` multiples of 8.
pub fn extract_features<T: Scalar>(s: &mut Session<'_, T>, image: Var) -> Result<ImageFeatures> {
    let shape = s.tape.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!("backbone expects [N,3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % STRIDE != 0 || w % STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input {w}x{h} is not a multiple of {STRIDE}; pad it first")));
    }
    let centred = s.tape.affine(image, T::of(4.0), T::of(-2.0));
    let f1 = s.conv_relu("backbone.stage1", centred, 2, 1);
    let low_level = s.conv_relu("backbone.stage2", f1, 2, 1);
    let pooled = s.tape.avg_pool2(low_level);
    let f3 = s.conv_relu("backbone.stage3", pooled, 1, 1);
    let x = s.conv_relu("backbone.stage4", f3, 1, 1);
    Ok(ImageFeatures { x, low_level, input_size: (w, h) })
}

thread_local! {
    static LIVE_STATES: Cell<usize> = const { Cell::new(0) };
    static PEAK_STATES: Cell<usize> = const { Cell::new(0) };
}

/// Live/peak counters of [`NodeState`] values on the current thread.
pub mod state_accounting {
    use super::{LIVE_STATES, PEAK_STATES};

    pub fn reset_peak() {
        PEAK_STATES.with(|p| p.set(LIVE_STATES.with(|l| l.get())));
    }

    pub fn peak() -> usize {
        PEAK_STATES.with(|p| p.get())
    }

    pub fn live() -> usize {
        LIVE_STATES.with(|l| l.get())
    }
}

/// Embedding `h_v` of one node at iteration `t`: `[N, c, H/8, W/8]`.
#[derive(Debug)]
pub struct NodeState {
    pub node: NodeIdx,
    pub h: Var,
    pub t: usize,
}

impl NodeState {
    pub fn new(node: NodeIdx, h: Var, t: usize) -> Self {
        LIVE_STATES.with(|l| {
            let n = l.get() + 1;
            l.set(n);
            PEAK_STATES.with(|p| p.set(p.get().max(n)));
        });
        NodeState { node, h, t }
    }
}

impl Drop for NodeState {
    fn drop(&mut self) {
        LIVE_STATES.with(|l| l.set(l.get() - 1));
    }
}

/// Initial node embeddings: one 3×3 conv to `c·|V|` channels, ReLU, sliced per node.
pub fn project_nodes<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    hierarchy: &ValidatedHierarchy,
    node_channels: usize,
) -> Result<Vec<NodeState>> {
    let stack = s.conv_relu("backbone.projection", x, 1, 1);
    let c = s.tape.shape(stack)[1];
    if c != node_channels * hierarchy.len() {
        return Err(Error::Shape(format!(
            "projection has {c} channels, expected {} x {}",
            node_channels,
            hierarchy.len()
        )));
    }
    Ok(hierarchy
        .nodes()
        .map(|v| {
            let h = s.tape.narrow(stack, v.0 * node_channels, node_channels);
            NodeState::new(v, h, 0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hparse_tensor::Tensor;

    fn store(seed: u64) -> ParamStore<f64> {
        let mut st = ParamStore::new();
        register(&mut st, &Init { seed }, 32, 16, 16, 9);
        st
    }

    #[test]
    fn feature_shapes_follow_stride() {
        let st = store(1);
        for (w, h) in [(64, 64), (72, 64)] {
            let mut s = Session::new(&st, false);
            let img = s.constant(Tensor::full(&[1, 3, h, w], 0.5));
            let f = extract_features(&mut s, img).unwrap();
            assert_eq!(s.tape.shape(f.x), &[1, 32, h / 8, w / 8]);
            assert_eq!(s.tape.shape(f.low_level), &[1, 16, h / 4, w / 4]);
            assert_eq!(f.input_size, (w, h));
        }
    }

    #[test]
    fn rejects_non_rgb_and_unpadded_input() {
        let st = store(1);
        let mut s = Session::new(&st, false);
        let gray = s.constant(Tensor::zeros(&[1, 1, 64, 64]));
        assert!(matches!(extract_features(&mut s, gray), Err(Error::Shape(_))));
        let odd = s.constant(Tensor::zeros(&[1, 3, 60, 64]));
        assert!(matches!(extract_features(&mut s, odd), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        let mut st = store(3);
        st.get_mut("backbone.stage4.weight").unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut s = Session::new(&st, false);
        let img = s.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let f = extract_features(&mut s, img).unwrap();
        assert!(s.tape.value(f.x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_shapes_and_determinism() {
        let h = ValidatedHierarchy::pascal6();
        let st = store(4);
        let run = || {
            let mut s = Session::new(&st, false);
            let img = s.constant(Tensor::from_fn(&[1, 3, 64, 64], |i| (i % 7) as f64 / 7.0));
            let f = extract_features(&mut s, img).unwrap();
            let states = project_nodes(&mut s, f.x, &h, 16).unwrap();
            assert_eq!(states.len(), 9);
            states.iter().map(|st| s.tape.value(st.h).clone()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a[0].shape(), &[1, 16, 8, 8]);
        assert_eq!(a, run());
    }

    #[test]
    fn state_accounting_tracks_live_values() {
        let before = state_accounting::live();
        {
            let _a = NodeState::new(NodeIdx(0), Var::clone(&dummy_var()), 0);
            let _b = NodeState::new(NodeIdx(1), dummy_var(), 0);
            assert_eq!(state_accounting::live(), before + 2);
        }
        assert_eq!(state_accounting::live(), before);
    }

    fn dummy_var() -> Var {
        let mut t = hparse_tensor::Tape::<f64>::new();
        t.constant(Tensor::zeros(&[1]))
    }
}
