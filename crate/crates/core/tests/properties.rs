use std::collections::BTreeSet;

use hparse_core::data::{build_pyramid, generate_sample, pyramid_is_consistent, Sample, SyntheticConfig};
use hparse_core::evaluation::{confusion, metrics, multiscale_infer, InferOptions, MetricOptions};
use hparse_core::hierarchy::{validate, HierarchySpec, LabelEntry, LabelMap, NodeSpec, ValidatedHierarchy};
use hparse_core::inference::{Emit, ParserModel};
use hparse_core::objectives::{ce_pixel_loss, total_loss};
use hparse_core::params::{ParamStore, Session};
use hparse_core::training::{apply_augment, AugmentParams};
use hparse_core::verify::probe_config;
use hparse_tensor::Tensor;
use proptest::prelude::*;

/// Three-level tree: one root, 1-4 level-2 children, 1-3 leaves
/// under every level-2 node, plus random same-level dependency pairs.
fn hierarchy_strategy() -> impl Strategy<Value = HierarchySpec> {
    (1usize..=4, proptest::collection::vec(1usize..=3, 4), any::<u64>()).prop_map(
        |(mids, leaves, bits)| {
            let mut nodes = Vec::new();
            let mut decomposition = Vec::new();
            let mut by_level: [Vec<String>; 3] = Default::default();
            let node = |id: String, level: u8, nodes: &mut Vec<NodeSpec>| {
                nodes.push(NodeSpec { id: id.clone(), name: id.to_uppercase(), level });
                id
            };
            let root = node("root".into(), 3, &mut nodes);
            by_level[2].push(root.clone());
            for mid_i in 0..mids {
                let mid = node(format!("m{mid_i}"), 2, &mut nodes);
                decomposition.push((root.clone(), mid.clone()));
                by_level[1].push(mid.clone());
                for j in 0..leaves[mid_i] {
                    let leaf = node(format!("l{mid_i}_{j}"), 1, &mut nodes);
                    decomposition.push((mid.clone(), leaf.clone()));
                    by_level[0].push(leaf);
                }
            }
            let mut dependency = Vec::new();
            let mut bit = 0;
            for level in &by_level {
                for a in level {
                    for b in level {
                        if a != b && (bits >> (bit % 64)) & 1 == 1 {
                            dependency.push((a.clone(), b.clone()));
                        }
                        bit += 7;
                    }
                }
            }
            let labels = by_level[0]
                .iter()
                .enumerate()
                .map(|(i, id)| LabelEntry { index: i as u32 + 1, node: id.clone() })
                .collect();
            HierarchySpec { background_index: 0, decomposition, dependency, labels, nodes }
        },
    )
}

fn pascal() -> ValidatedHierarchy {
    ValidatedHierarchy::pascal6()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_is_a_forest_and_composition_reverses_it(spec in hierarchy_strategy()) {
        let h = validate(spec).unwrap();
        for v in h.nodes() {
            // Walking parents terminates and strictly climbs levels.
            let mut cur = v;
            let mut steps = 0;
            while let Some(p) = h.parent(cur) {
                prop_assert!(h.level(p) > h.level(cur));
                cur = p;
                steps += 1;
                prop_assert!(steps <= h.len());
            }
            let n = h.neighborhood(v).unwrap();
            let expected: BTreeSet<_> = h.nodes().filter(|&u| h.children(u).contains(&v)).collect();
            prop_assert_eq!(&n.parents, &expected);
            let kids: BTreeSet<_> = h.children(v).iter().copied().collect();
            prop_assert_eq!(&n.children, &kids);
            prop_assert_eq!(h.neighborhood(v).unwrap(), n);
        }
    }

    #[test]
    fn leaf_masks_reconstruct_the_label_map(data in proptest::collection::vec(0u32..7, 1..100)) {
        let h = pascal();
        let labels = LabelMap::new(data.len(), 1, data);
        let masks = h.leaf_masks_from_labels(&labels).unwrap();
        let leaves = h.leaves();
        let mut rebuilt = vec![h.background_index(); labels.data.len()];
        for (leaf, m) in leaves.iter().zip(&masks) {
            for (i, &on) in m.data.iter().enumerate() {
                if on {
                    prop_assert_eq!(rebuilt[i], h.background_index(), "leaf masks overlap");
                    rebuilt[i] = h.label_of_leaf(*leaf).unwrap();
                }
            }
        }
        prop_assert_eq!(rebuilt, labels.data);
    }

    #[test]
    fn metrics_equal_a_pixel_recount(
        k in 2usize..6,
        pairs in proptest::collection::vec((0usize..6, 0usize..6), 1..200),
        include_background in any::<bool>(),
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
        let gt: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
        let opts = MetricOptions { include_background, ..MetricOptions::default() };
        let r = metrics(&confusion(&pred, &gt, k).unwrap(), opts).unwrap();
        let n = pred.len();
        let hits = pred.iter().zip(&gt).filter(|(a, b)| a == b).count();
        prop_assert_eq!(r.pix_acc, hits as f64 / n as f64);
        let mut ious = Vec::new();
        for c in 0..k {
            let inter = (0..n).filter(|&i| pred[i] == c && gt[i] == c).count();
            let union = (0..n).filter(|&i| pred[i] == c || gt[i] == c).count();
            let expected = (union > 0).then(|| inter as f64 / union as f64);
            prop_assert_eq!(r.iou[c], expected);
            if (include_background || c != 0) && union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let miou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
        prop_assert_eq!(r.miou, miou);
    }

    #[test]
    fn miou_is_invariant_under_foreground_relabelling(
        pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200),
        perm in Just(vec![1usize, 2, 3, 4]).prop_shuffle(),
    ) {
        let map = |c: usize| if c == 0 { 0 } else { perm[c - 1] };
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = metrics(&confusion(&pred, &gt, 5).unwrap(), MetricOptions::default()).unwrap();
        let pred2: Vec<usize> = pred.iter().map(|&c| map(c)).collect();
        let gt2: Vec<usize> = gt.iter().map(|&c| map(c)).collect();
        let b = metrics(&confusion(&pred2, &gt2, 5).unwrap(), MetricOptions::default()).unwrap();
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        prop_assert_eq!(a.pix_acc, b.pix_acc);
    }

    #[test]
    fn pixel_loss_is_finite_and_non_negative(
        logits in proptest::collection::vec(-8.0f64..8.0, 3 * 16),
        classes in proptest::collection::vec(0usize..3, 16),
    ) {
        let params = ParamStore::<f64>::new();
        let mut s = Session::new(&params, true);
        let x = s.tape.leaf(Tensor::new(&[1, 3, 4, 4], logits), true);
        let pred = s.tape.softmax(x, 1);
        let target = hparse_core::objectives::one_hot::<f64>(&classes, 1, 3, 4, 4);
        let loss = ce_pixel_loss(&mut s, pred, &target, None).unwrap();
        let v = s.tape.value(loss).item();
        prop_assert!(v.is_finite() && v >= 0.0);
        let grads = s.tape.backward(loss);
        prop_assert!(grads.get(x).unwrap().is_finite());
    }

    #[test]
    fn total_loss_is_linear_in_each_component(
        parts in proptest::collection::vec(proptest::collection::vec(0.0f64..5.0, 4), 1..4),
        which in 0usize..4,
        alpha in 0.0f64..1.0,
        scale in 0.0f64..4.0,
    ) {
        let column = |j: usize, k: f64| -> Vec<f64> { parts.iter().map(|p| if j == which { p[j] * k } else { p[j] }).collect() };
        let eval = |k: f64| total_loss(&column(0, k), &column(1, k), &column(2, k), &column(3, k), alpha).unwrap().total;
        let (base, scaled) = (eval(1.0), eval(scale));
        let weight = if which == 0 { 1.0 } else { alpha };
        let component: f64 = parts.iter().map(|p| p[which]).sum();
        prop_assert!((scaled - base - weight * component * (scale - 1.0)).abs() < 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn augmentation_keeps_pyramids_consistent(
        seed in any::<u64>(),
        scale in 0.4f64..2.2,
        flip in any::<bool>(),
        ox in -20i64..40,
        oy in -20i64..40,
    ) {
        let h = pascal();
        let cfg = SyntheticConfig { image_size: 32, ..SyntheticConfig::default() };
        let s = generate_sample(&cfg, seed, &h).unwrap();
        prop_assert!(pyramid_is_consistent(&s.pyramid, &h));
        let a = apply_augment(&s, AugmentParams { scale, flip, offset: (ox, oy) }, 24, &h).unwrap();
        prop_assert!(pyramid_is_consistent(&a.pyramid, &h));
        prop_assert_eq!(build_pyramid(&a.labels, &h).unwrap(), a.pyramid);
    }

    #[test]
    fn generator_is_a_function_of_the_seed(seed in any::<u64>()) {
        let h = pascal();
        let cfg = SyntheticConfig { image_size: 24, ..SyntheticConfig::default() };
        let a: Sample = generate_sample(&cfg, seed, &h).unwrap();
        prop_assert_eq!(&generate_sample(&cfg, seed, &h).unwrap(), &a);
        prop_assert_ne!(&generate_sample(&cfg, seed.wrapping_add(1), &h).unwrap().image, &a.image);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attention_maps_are_pixelwise_simplices(seed in any::<u64>(), side in 1usize..=3, iterations in 1usize..=3) {
        let h = pascal();
        let model = ParserModel::new(h, probe_config(iterations));
        let params = model.init_params::<f64>(seed);
        let mut s = Session::new(&params, false);
        let size = 8 * side;
        let mut state = seed | 1;
        let img = Tensor::from_fn(&[1, 3, size, size], |_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 1000) as f64 / 1000.0
        });
        let x = s.constant(img);
        let out = model.forward(&mut s, x, iterations, Emit::All).unwrap();
        prop_assert_eq!(out.iterations.len(), iterations);
        for it in &out.iterations {
            for (_, att) in it.attention.decomposition.iter().chain(&it.attention.dependency) {
                let t = s.tape.value(att.weights);
                let (_, k, hh, ww) = t.dims4();
                for p in 0..hh * ww {
                    let sum: f64 = (0..k).map(|c| t.data()[c * hh * ww + p]).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-5);
                }
            }
            for (_, att) in &it.attention.composition {
                let t = s.tape.value(att.weights);
                prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn multiscale_output_stays_a_simplex(
        seed in any::<u64>(),
        scales in proptest::collection::vec(0.3f64..1.8, 1..4),
        flip in any::<bool>(),
    ) {
        let h = pascal();
        let model = ParserModel::new(h.clone(), probe_config(1));
        let params = model.init_params::<f32>(seed);
        let cfg = SyntheticConfig { image_size: 24, ..SyntheticConfig::default() };
        let sample = generate_sample(&cfg, seed, &h).unwrap();
        let opts = InferOptions { scales, flip, iterations: 1 };
        for level in multiscale_infer(&model, &params, &sample.image, &opts).unwrap() {
            let (_, k, hh, ww) = level.dims4();
            prop_assert_eq!((hh, ww), (24, 24));
            for p in 0..hh * ww {
                let sum: f64 = (0..k).map(|c| level.data()[c * hh * ww + p] as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }
}
