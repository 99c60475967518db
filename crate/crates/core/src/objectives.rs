//! Parsing and attention losses and their weighted total.

use std::collections::BTreeMap;

use hparse_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::LabelPyramid;
use crate::error::{Error, Result};
use crate::hierarchy::{NodeIdx, ValidatedHierarchy};
use crate::inference::{ForwardOutput, LevelPrediction};
use crate::params::Session;
use crate::relations::AttentionMap;

/// Floor inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// `[n, k, h, w]` one-hot encoding of per-pixel classes laid out as `[n, h, w]`.
pub fn one_hot<T: Scalar>(classes: &[usize], n: usize, k: usize, h: usize, w: usize) -> Tensor<T> {
    assert_eq!(classes.len(), n * h * w, "class map size");
    let plane = h * w;
    let mut t = Tensor::zeros(&[n, k, h, w]);
    let d = t.data_mut();
    for b in 0..n {
        for p in 0..plane {
            let c = classes[b * plane + p];
            assert!(c < k, "class {c} out of {k}");
            d[(b * k + c) * plane + p] = T::one();
        }
    }
    t
}

/// Mean over masked pixels of `−Σ_k target · ln(pred + ε)`.
pub fn ce_pixel_loss<T: Scalar>(s: &mut Session<'_, T>, pred: Var, target: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
    let shape = s.tape.shape(pred).to_vec();
    if shape.len() != 4 || target.shape() != shape.as_slice() {
        return Err(Error::Shape(format!("prediction {shape:?} vs target {:?}", target.shape())));
    }
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let count = match mask {
        Some(m) if m.len() != n * plane => return Err(Error::Shape(format!("mask has {} pixels, expected {}", m.len(), n * plane))),
        Some(m) => m.iter().filter(|&&b| b).count(),
        None => n * plane,
    };
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = T::of(1.0 / count as f64);
    let mut weights = target.clone();
    let d = weights.data_mut();
    for b in 0..n {
        for c in 0..k {
            for p in 0..plane {
                let on = mask.map_or(true, |m| m[b * plane + p]);
                let i = (b * k + c) * plane + p;
                d[i] = if on { d[i] * inv } else { T::zero() };
            }
        }
    }
    Ok(s.tape.neg_log_dot(pred, weights, T::of(LOG_EPS)))
}

fn check_batch(pyramids: &[LabelPyramid], shape: &[usize]) -> Result<()> {
    if pyramids.len() != shape[0] || pyramids.iter().any(|p| (p.height, p.width) != (shape[2], shape[3])) {
        return Err(Error::Shape(format!(
            "{} groundtruth pyramids of size {:?} for predictions {shape:?}",
            pyramids.len(),
            pyramids.first().map(|p| (p.width, p.height))
        )));
    }
    Ok(())
}

fn zero<T: Scalar>(s: &mut Session<'_, T>) -> Var {
    s.constant(Tensor::scalar(T::zero()))
}

fn sum<T: Scalar>(s: &mut Session<'_, T>, terms: &[Var]) -> Var {
    if terms.is_empty() {
        zero(s)
    } else {
        s.tape.add_n(terms)
    }
}

/// Sum over levels of the unmasked cross-entropy against level classes
/// (background included).
pub fn parsing_loss<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    preds: &[LevelPrediction],
    pyramids: &[LabelPyramid],
) -> Result<Var> {
    let mut terms = Vec::new();
    for p in preds {
        let shape = s.tape.shape(p.scores).to_vec();
        check_batch(pyramids, &shape)?;
        let k = h.level_nodes(p.level).len() + 1;
        if shape[1] != k {
            return Err(Error::Shape(format!("level {} has {} channels, expected {k}", p.level, shape[1])));
        }
        let classes: Vec<usize> = pyramids.iter().flat_map(|py| py.level_classes(h, p.level)).collect();
        let target = one_hot(&classes, shape[0], k, shape[2], shape[3]);
        terms.push(ce_pixel_loss(s, p.scores, &target, None)?);
    }
    Ok(sum(s, &terms))
}

/// Per-pixel index of the covering node among `nodes` and whether any covers it.
fn partition(pyramids: &[LabelPyramid], nodes: &[NodeIdx]) -> (Vec<usize>, Vec<bool>) {
    let mut classes = Vec::new();
    let mut mask = Vec::new();
    for py in pyramids {
        for p in 0..py.width * py.height {
            let hit = nodes.iter().position(|v| py.masks[v.0].data[p]);
            classes.push(hit.unwrap_or(0));
            mask.push(hit.is_some());
        }
    }
    (classes, mask)
}

/// Cross-entropy of each parent's attention over its children, restricted to
/// the parent's groundtruth pixels, summed over parents.
pub fn decomp_att_loss<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    atts: &[(NodeIdx, AttentionMap)],
    pyramids: &[LabelPyramid],
) -> Result<Var> {
    let mut terms = Vec::new();
    for &(u, att) in atts {
        let shape = s.tape.shape(att.weights).to_vec();
        check_batch(pyramids, &shape)?;
        let kids = h.children(u);
        let (classes, _) = partition(pyramids, kids);
        let mask: Vec<bool> = pyramids.iter().flat_map(|py| py.masks[u.0].data.iter().copied()).collect();
        let target = one_hot(&classes, shape[0], kids.len(), shape[2], shape[3]);
        match ce_pixel_loss(s, att.weights, &target, Some(&mask)) {
            Ok(l) => terms.push(l),
            Err(Error::EmptyMask) => log::debug!("no groundtruth pixels for {}; its decomposition attention is unsupervised", h.id(u)),
            Err(e) => return Err(e),
        }
    }
    Ok(sum(s, &terms))
}

/// Binary cross-entropy of each composition attention against the parent
/// mask over all pixels, summed over parents.
pub fn comp_att_loss<T: Scalar>(s: &mut Session<'_, T>, atts: &[(NodeIdx, AttentionMap)], pyramids: &[LabelPyramid]) -> Result<Var> {
    let mut terms = Vec::new();
    for &(v, att) in atts {
        let shape = s.tape.shape(att.weights).to_vec();
        check_batch(pyramids, &shape)?;
        if shape[1] != 1 {
            return Err(Error::Shape(format!("composition attention has {} channels", shape[1])));
        }
        let y: Vec<bool> = pyramids.iter().flat_map(|py| py.masks[v.0].data.iter().copied()).collect();
        let inv = T::of(1.0 / y.len() as f64);
        let pos = Tensor::new(&shape, y.iter().map(|&b| if b { inv } else { T::zero() }).collect());
        let neg = Tensor::new(&shape, y.iter().map(|&b| if b { T::zero() } else { inv }).collect());
        let on = s.tape.neg_log_dot(att.weights, pos, T::of(LOG_EPS));
        let complement = s.tape.affine(att.weights, -T::one(), T::one());
        let off = s.tape.neg_log_dot(complement, neg, T::of(LOG_EPS));
        terms.push(s.tape.add(on, off));
    }
    Ok(sum(s, &terms))
}

/// Cross-entropy of each dependency attention over the owner's targets,
/// restricted to the union of the targets' masks, summed over owners.
pub fn dep_att_loss<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    atts: &[(NodeIdx, AttentionMap)],
    pyramids: &[LabelPyramid],
) -> Result<Var> {
    let mut terms = Vec::new();
    for &(u, att) in atts {
        let targets = h.dependency_targets(u);
        if targets.is_empty() {
            continue;
        }
        let shape = s.tape.shape(att.weights).to_vec();
        check_batch(pyramids, &shape)?;
        let (classes, mask) = partition(pyramids, targets);
        let target = one_hot(&classes, shape[0], targets.len(), shape[2], shape[3]);
        match ce_pixel_loss(s, att.weights, &target, Some(&mask)) {
            Ok(l) => terms.push(l),
            Err(Error::EmptyMask) => log::debug!("no sibling pixels for {}", h.id(u)),
            Err(e) => return Err(e),
        }
    }
    Ok(sum(s, &terms))
}

/// Per-iteration loss components and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub parsing: Vec<f64>,
    pub decomposition: Vec<f64>,
    pub composition: Vec<f64>,
    pub dependency: Vec<f64>,
    pub alpha: f64,
    pub total: f64,
}

impl LossReport {
    /// Flat `name -> value` record, one key per component and iteration.
    pub fn record(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (name, vals) in
            [("parsing", &self.parsing), ("dec", &self.decomposition), ("com", &self.composition), ("dep", &self.dependency)]
        {
            for (t, v) in vals.iter().enumerate() {
                out.insert(format!("{name}_{}", t + 1), *v);
            }
        }
        out.insert("alpha".into(), self.alpha);
        out.insert("total".into(), self.total);
        out
    }
}

/// `Σ_t (parsing_t + α (dec_t + com_t + dep_t))`.
pub fn total_loss(parsing: &[f64], dec: &[f64], com: &[f64], dep: &[f64], alpha: f64) -> Result<LossReport> {
    let t = parsing.len();
    if t == 0 || dec.len() != t || com.len() != t || dep.len() != t {
        return Err(Error::Shape(format!(
            "loss components over {} / {} / {} / {} iterations",
            t,
            dec.len(),
            com.len(),
            dep.len()
        )));
    }
    let total = (0..t).map(|i| parsing[i] + alpha * (dec[i] + com[i] + dep[i])).sum();
    Ok(LossReport {
        parsing: parsing.to_vec(),
        decomposition: dec.to_vec(),
        composition: com.to_vec(),
        dependency: dep.to_vec(),
        alpha,
        total,
    })
}

/// Full training objective over every emitted iteration. `fine` holds
/// groundtruth at prediction resolution, `coarse` at node-feature resolution.
pub fn objective<T: Scalar>(
    s: &mut Session<'_, T>,
    h: &ValidatedHierarchy,
    out: &ForwardOutput,
    fine: &[LabelPyramid],
    coarse: &[LabelPyramid],
    alpha: f64,
) -> Result<(Var, LossReport)> {
    let (mut p, mut d, mut c, mut g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut terms = Vec::new();
    for it in &out.iterations {
        if it.levels.is_empty() {
            return Err(Error::Shape(format!("iteration {} was not decoded", it.t)));
        }
        let lp = parsing_loss(s, h, &it.levels, fine)?;
        let ld = decomp_att_loss(s, h, &it.attention.decomposition, coarse)?;
        let lc = comp_att_loss(s, &it.attention.composition, coarse)?;
        let lg = dep_att_loss(s, h, &it.attention.dependency, coarse)?;
        let value = |s: &Session<'_, T>, v: Var| s.tape.value(v).item().as_f64();
        p.push(value(s, lp));
        d.push(value(s, ld));
        c.push(value(s, lc));
        g.push(value(s, lg));
        let att = s.tape.add_n(&[ld, lc, lg]);
        let att = s.tape.scale(att, T::of(alpha));
        terms.push(lp);
        terms.push(att);
    }
    let total = s.tape.add_n(&terms);
    Ok((total, total_loss(&p, &d, &c, &g, alpha)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_pyramid;
    use crate::hierarchy::LabelMap;
    use crate::params::ParamStore;
    use crate::relations::Normalization;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn session(store: &ParamStore<f64>) -> Session<'_, f64> {
        Session::new(store, false)
    }

    fn value(s: &Session<'_, f64>, v: Var) -> f64 {
        s.tape.value(v).item()
    }

    #[test]
    fn exact_prediction_has_near_zero_loss() {
        let st = ParamStore::new();
        let mut s = session(&st);
        let t = one_hot::<f64>(&[0, 2, 1, 1], 1, 3, 2, 2);
        let p = s.constant(t.clone());
        let l = ce_pixel_loss(&mut s, p, &t, None).unwrap();
        assert!(value(&s, l) <= -(1.0 - LOG_EPS).ln() + 1e-15);
    }

    #[test]
    fn uniform_over_four_costs_ln4() {
        let st = ParamStore::new();
        let mut s = session(&st);
        let p = s.constant(Tensor::full(&[1, 4, 3, 3], 0.25));
        let t = one_hot::<f64>(&[0, 1, 2, 3, 0, 1, 2, 3, 0], 1, 4, 3, 3);
        let l = ce_pixel_loss(&mut s, p, &t, None).unwrap();
        assert!((value(&s, l) - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mean_of_ln2_and_ln4() {
        let st = ParamStore::new();
        let mut s = session(&st);
        // pixel 0: p(target) = 1/2, pixel 1: p(target) = 1/4
        let p = s.constant(Tensor::new(&[1, 2, 1, 2], vec![0.5, 0.25, 0.5, 0.75]));
        let t = one_hot::<f64>(&[0, 0], 1, 2, 1, 2);
        let l = ce_pixel_loss(&mut s, p, &t, None).unwrap();
        let want = (0.6931471805599453 + 1.3862943611198906) / 2.0;
        assert!((value(&s, l) - want).abs() < 1e-9);
        assert!((value(&s, l) - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let st = ParamStore::new();
        let mut s = session(&st);
        let p = s.constant(Tensor::full(&[1, 2, 1, 2], 0.5));
        let t = one_hot::<f64>(&[0, 1], 1, 2, 1, 2);
        assert!(matches!(ce_pixel_loss(&mut s, p, &t, Some(&[false, false])), Err(Error::EmptyMask)));
    }

    fn uniform_preds(s: &mut Session<'_, f64>, h: &ValidatedHierarchy, n: usize, size: usize) -> Vec<LevelPrediction> {
        (1..=3u8)
            .map(|l| {
                let k = h.level_nodes(l).len() + 1;
                let scores = s.constant(Tensor::full(&[n, k, size, size], 1.0 / k as f64));
                LevelPrediction { level: l, t: 1, scores }
            })
            .collect()
    }

    #[test]
    fn uniform_parsing_loss_sums_level_entropies() {
        let h = ValidatedHierarchy::pascal6();
        let st = ParamStore::new();
        let mut s = session(&st);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pyr: Vec<_> = (0..2)
            .map(|_| build_pyramid(&LabelMap::new(4, 4, (0..16).map(|_| rng.gen_range(0..7)).collect()), &h).unwrap())
            .collect();
        let preds = uniform_preds(&mut s, &h, 2, 4);
        let l = parsing_loss(&mut s, &h, &preds, &pyr).unwrap();
        let want = 7f64.ln() + 3f64.ln() + 2f64.ln();
        assert!((value(&s, l) - want).abs() < 1e-9);
        assert!((want - 3.7377).abs() < 1e-4);
    }

    #[test]
    fn perfect_parsing_prediction_is_near_zero_and_shapes_are_checked() {
        let h = ValidatedHierarchy::pascal6();
        let st = ParamStore::new();
        let mut s = session(&st);
        let pyr = vec![build_pyramid(&LabelMap::new(2, 2, vec![0, 1, 4, 6]), &h).unwrap()];
        let preds: Vec<LevelPrediction> = (1..=3u8)
            .map(|l| {
                let k = h.level_nodes(l).len() + 1;
                let t = one_hot::<f64>(&pyr[0].level_classes(&h, l), 1, k, 2, 2);
                LevelPrediction { level: l, t: 1, scores: s.constant(t) }
            })
            .collect();
        let l = parsing_loss(&mut s, &h, &preds, &pyr).unwrap();
        assert!(value(&s, l) <= 3e-10);
        let big = uniform_preds(&mut s, &h, 1, 4);
        assert!(matches!(parsing_loss(&mut s, &h, &big, &pyr), Err(Error::Shape(_))));
    }

    fn att(s: &mut Session<'_, f64>, t: Tensor<f64>, normalization: Normalization) -> AttentionMap {
        AttentionMap { weights: s.constant(t), normalization }
    }

    fn random_pyramid(h: &ValidatedHierarchy, seed: u64) -> LabelPyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_pyramid(&LabelMap::new(4, 4, (0..16).map(|_| rng.gen_range(0..7)).collect()), h).unwrap()
    }

    fn random_simplex(k: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..k * 16).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mut out = raw.clone();
        for p in 0..16 {
            let z: f64 = (0..k).map(|c| raw[c * 16 + p]).sum();
            for c in 0..k {
                out[c * 16 + p] = raw[c * 16 + p] / z;
            }
        }
        Tensor::new(&[1, k, 4, 4], out)
    }

    #[test]
    fn decomposition_loss_matches_brute_force() {
        let h = ValidatedHierarchy::pascal6();
        let st = ParamStore::new();
        for seed in 0..5 {
            let mut s = session(&st);
            let pyr = random_pyramid(&h, seed);
            let ub = h.find("upper_body").unwrap();
            let a = random_simplex(4, seed + 100);
            let map = att(&mut s, a.clone(), Normalization::Simplex);
            let l = decomp_att_loss(&mut s, &h, &[(ub, map)], std::slice::from_ref(&pyr)).unwrap();
            let (mut total, mut count) = (0.0, 0);
            for p in 0..16 {
                if pyr.masks[ub.0].data[p] {
                    let c = h.children(ub).iter().position(|v| pyr.masks[v.0].data[p]).unwrap();
                    total -= (a.data()[c * 16 + p] + LOG_EPS).ln();
                    count += 1;
                }
            }
            let want = if count == 0 { 0.0 } else { total / count as f64 };
            assert!((value(&s, l) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_decomposition_attention_costs_ln2() {
        let h = ValidatedHierarchy::pascal6();
        let st = ParamStore::new();
        let mut s = session(&st);
        let pyr = build_pyramid(&LabelMap::new(2, 2, vec![1, 5, 0, 6]), &h).unwrap();
        let fb = h.find("full_body").unwrap();
        let map = att(&mut s, Tensor::full(&[1, 2, 2, 2], 0.5), Normalization::Simplex);
        let l = decomp_att_loss(&mut s, &h, &[(fb, map)], &[pyr]).unwrap();
        assert!((value(&s, l) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn parent_without_pixels_contributes_nothing() {
        let h = ValidatedHierarchy::pascal6();
        let st = ParamStore::new();
        let mut s = session(&st);
        let pyr = build_pyramid(&LabelMap::filled(2, 2, 0), &h).unwrap();
        let fb = h.find("full_body").unwrap();
        let map = att(&mut s, Tensor::full(&[1, 2, 2, 2], 0.5), Normalization::Simplex);
        let l = decomp_att_loss(&mut s, &h, &[(fb, map)], &[pyr]).unwrap();
        assert_eq!(value(&s, l), 0.0);
    }

    #[test]
    fn composition_bce_values() {
        let h = ValidatedHierarchy::pascal6();
        let st = ParamStore::new();
        let mut s = session(&st);
        let ub = h.find("upper_body").unwrap();
        let full = build_pyramid(&LabelMap::filled(2, 2, 1), &h).unwrap();
        let map = att(&mut s, Tensor::full(&[1, 1, 2, 2], 0.9), Normalization::UnitInterval);
        let l = comp_att_loss(&mut s, &[(ub, map)], std::slice::from_ref(&full)).unwrap();
        assert!((value(&s, l) + 0.9f64.ln()).abs() < 1e-9);
        assert!((value(&s, l) - 0.1054).abs() < 1e-4);
        let half = att(&mut s, Tensor::full(&[1, 1, 2, 2], 0.5), Normalization::UnitInterval);
        let l = comp_att_loss(&mut s, &[(ub, half)], std::slice::from_ref(&full)).unwrap();
        assert!((value(&s, l) - 2f64.ln()).abs() < 1e-9);
        let mixed = build_pyramid(&LabelMap::new(2, 2, vec![1, 0, 0, 2]), &h).unwrap();
        let exact = att(&mut s, Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]), Normalization::UnitInterval);
        let l = comp_att_loss(&mut s, &[(ub, exact)], &[mixed]).unwrap();
        assert!(value(&s, l) < 1e-10);
    }

    #[test]
    fn dependency_loss_matches_brute_force_and_uniform_ln3() {
        let h = ValidatedHierarchy::pascal6();
        let st = ParamStore::new();
        let torso = h.find("torso").unwrap();
        let k = h.dependency_targets(torso).len();
        assert_eq!(k, 3);
        for seed in 0..5 {
            let mut s = session(&st);
            let pyr = random_pyramid(&h, seed + 50);
            let a = random_simplex(k, seed + 200);
            let map = att(&mut s, a.clone(), Normalization::Simplex);
            let l = dep_att_loss(&mut s, &h, &[(torso, map)], std::slice::from_ref(&pyr)).unwrap();
            let (mut total, mut count) = (0.0, 0);
            for p in 0..16 {
                if let Some(c) = h.dependency_targets(torso).iter().position(|v| pyr.masks[v.0].data[p]) {
                    total -= (a.data()[c * 16 + p] + LOG_EPS).ln();
                    count += 1;
                }
            }
            let want = if count == 0 { 0.0 } else { total / count as f64 };
            assert!((value(&s, l) - want).abs() < 1e-12);
            let uni = att(&mut s, Tensor::full(&[1, 3, 4, 4], 1.0 / 3.0), Normalization::Simplex);
            let l = dep_att_loss(&mut s, &h, &[(torso, uni)], std::slice::from_ref(&pyr)).unwrap();
            if count > 0 {
                assert!((value(&s, l) - 3f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn groundtruth_attentions_fall_below_floor() {
        let h = ValidatedHierarchy::pascal6();
        let st = ParamStore::new();
        let mut s = session(&st);
        let pyr = random_pyramid(&h, 7);
        let pyrs = std::slice::from_ref(&pyr);
        let indicator = |nodes: &[NodeIdx]| {
            let mut t = Tensor::zeros(&[1, nodes.len(), 4, 4]);
            for (c, v) in nodes.iter().enumerate() {
                for p in 0..16 {
                    if pyr.masks[v.0].data[p] {
                        t.data_mut()[c * 16 + p] = 1.0;
                    }
                }
            }
            t
        };
        let mut dec = Vec::new();
        let mut com = Vec::new();
        let mut dep = Vec::new();
        for u in h.nodes() {
            if !h.children(u).is_empty() {
                dec.push((u, att(&mut s, indicator(h.children(u)), Normalization::Simplex)));
                com.push((u, att(&mut s, indicator(&[u]), Normalization::UnitInterval)));
            }
            if !h.dependency_targets(u).is_empty() {
                dep.push((u, att(&mut s, indicator(h.dependency_targets(u)), Normalization::Simplex)));
            }
        }
        for l in [
            decomp_att_loss(&mut s, &h, &dec, pyrs).unwrap(),
            comp_att_loss(&mut s, &com, pyrs).unwrap(),
            dep_att_loss(&mut s, &h, &dep, pyrs).unwrap(),
        ] {
            assert!(value(&s, l) < 0.05);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let r = total_loss(&[1.0], &[0.5], &[0.5], &[0.5], 0.1).unwrap();
        assert!((r.total - 1.15).abs() < 1e-12);
        let r0 = total_loss(&[1.0, 2.0], &[3.0, 3.0], &[1.0, 1.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(r0.total, 3.0);
        let r2 = total_loss(&[1.0, 1.0], &[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5], 0.1).unwrap();
        assert!((r2.total - 2.0 * r.total).abs() < 1e-12);
        assert!(total_loss(&[], &[], &[], &[], 0.1).is_err());
        assert_eq!(r.record()["parsing_1"], 1.0);
    }

    #[test]
    fn parsing_loss_is_permutation_covariant() {
        let st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 7;
        let probs = random_simplex(k, 9);
        let classes: Vec<usize> = (0..16).map(|_| rng.gen_range(0..k)).collect();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let mut permuted = Tensor::zeros(&[1, k, 4, 4]);
        for c in 0..k {
            for p in 0..16 {
                permuted.data_mut()[perm[c] * 16 + p] = probs.data()[c * 16 + p];
            }
        }
        let permuted_classes: Vec<usize> = classes.iter().map(|&c| perm[c]).collect();
        let mut s = session(&st);
        let a = s.constant(probs);
        let la = ce_pixel_loss(&mut s, a, &one_hot(&classes, 1, k, 4, 4), None).unwrap();
        let b = s.constant(permuted);
        let lb = ce_pixel_loss(&mut s, b, &one_hot(&permuted_classes, 1, k, 4, 4), None).unwrap();
        assert!((value(&s, la) - value(&s, lb)).abs() < 1e-12);
    }

    /// Attention losses as a function of raw logits, for finite differences.
    fn attention_objective(logits: &[Tensor<f64>; 3], pyr: &LabelPyramid, h: &ValidatedHierarchy, grad: bool) -> (f64, Vec<Tensor<f64>>) {
        let st = ParamStore::new();
        let mut s = session(&st);
        let ub = h.find("upper_body").unwrap();
        let torso = h.find("torso").unwrap();
        let vars: Vec<Var> = logits.iter().map(|t| s.tape.leaf(t.clone(), grad)).collect();
        let dec = s.tape.softmax(vars[0], 1);
        let com = s.tape.sigmoid(vars[1]);
        let dep = s.tape.softmax(vars[2], 1);
        let pyrs = std::slice::from_ref(pyr);
        let ld = decomp_att_loss(&mut s, h, &[(ub, AttentionMap { weights: dec, normalization: Normalization::Simplex })], pyrs).unwrap();
        let lc = comp_att_loss(&mut s, &[(ub, AttentionMap { weights: com, normalization: Normalization::UnitInterval })], pyrs).unwrap();
        let lg = dep_att_loss(&mut s, h, &[(torso, AttentionMap { weights: dep, normalization: Normalization::Simplex })], pyrs).unwrap();
        let total = s.tape.add_n(&[ld, lc, lg]);
        let v = value(&s, total);
        if !grad {
            return (v, Vec::new());
        }
        let mut g = s.tape.backward(total);
        (v, vars.iter().map(|&x| g.take(x).unwrap()).collect())
    }

    #[test]
    fn attention_gradients_match_central_differences() {
        let h = ValidatedHierarchy::pascal6();
        let pyr = random_pyramid(&h, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut logits = [4usize, 1, 3].map(|k| Tensor::from_fn(&[1, k, 4, 4], |_| rng.gen_range(-2.0..2.0)));
        let (_, grads) = attention_objective(&logits, &pyr, &h, true);
        let step = 1e-6;
        for m in 0..3 {
            for i in 0..logits[m].len() {
                let orig = logits[m].data()[i];
                logits[m].data_mut()[i] = orig + step;
                let up = attention_objective(&logits, &pyr, &h, false).0;
                logits[m].data_mut()[i] = orig - step;
                let down = attention_objective(&logits, &pyr, &h, false).0;
                logits[m].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * step);
                let analytic = grads[m].data()[i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-4, "map {m} entry {i}: {analytic} vs {numeric}");
            }
        }
    }
}
