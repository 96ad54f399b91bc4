use std::collections::BTreeMap;

use rand::Rng;

use super::*;
use crate::model::{mac_count, Batch, CellId, CellOrigin, Model, WeightSet};
use crate::nn::forward;
use crate::rng::seeded;
use crate::tensor::Tensor;

fn two_cell_example() -> (Model, WeightSet) {
    let model = Model::initial(1, &[2], 1);
    let mut w = WeightSet::zeros_like(&model);
    w.get_mut(CellId(0)).unwrap().weight = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    w.get_mut(CellId(1)).unwrap().weight = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    (model, w)
}

fn random_batch(rng: &mut impl Rng, n: usize, d: usize) -> Batch {
    let data = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    Batch::new(Tensor::new(vec![n, d], data).unwrap(), vec![0; n]).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn widen_hand_example() {
    let (model, w) = two_cell_example();
    let (child, cw) = widen_cell_with_map(&model, &w, CellId(0), &[0, 1, 0, 1], 10).unwrap();
    let succ = cw.get(child.cells[1].id).unwrap();
    assert_eq!(succ.weight.data(), &[0.5, 0.5, 0.5, 0.5]);
    assert_eq!(
        cw.get(child.cells[0].id).unwrap().weight.data(),
        &[1.0, 2.0, 1.0, 2.0]
    );
    let x = Batch::new(Tensor::from_rows(&[vec![1.0]]).unwrap(), vec![0]).unwrap();
    assert_eq!(forward(&child, &cw, &x).unwrap().data(), &[3.0]);
    assert_eq!(mac_count(&model), 4);
    assert_eq!(mac_count(&child), 8);
    assert_eq!(child.cells[0].origin, CellOrigin::WidenedFrom(CellId(0)));
    assert_eq!(child.cells[1].origin, CellOrigin::WidenedFrom(CellId(1)));
}

#[test]
fn widen_mac_example() {
    // hidden cell 4->3 followed by 3->2, widened by 2
    let model = Model::initial(4, &[3], 2);
    assert_eq!(mac_count(&model), 18);
    let w = WeightSet::init(&model, &mut seeded(1));
    let (child, _) = widen_cell(&model, &w, CellId(0), 2, &mut seeded(2)).unwrap();
    assert_eq!(mac_count(&child), 36);
}

#[test]
fn widen_preserves_function_and_column_mass() {
    let mut rng = seeded(11);
    let model = Model::initial(5, &[4, 6], 3);
    let w = WeightSet::init(&model, &mut rng);
    let map = sample_unit_map(4, 3, &mut rng);
    let (child, cw) = widen_cell_with_map(&model, &w, CellId(0), &map, 20).unwrap();

    // columns grouped by source unit sum back to the original column
    let old = &w.get(CellId(1)).unwrap().weight;
    let new = &cw.get(child.cells[1].id).unwrap().weight;
    for r in 0..old.rows() {
        for u in 0..4 {
            let sum: f64 = map
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == u)
                .map(|(k, _)| new.at(r, k))
                .sum();
            assert!((sum - old.at(r, u)).abs() < 1e-14);
        }
    }

    let x = random_batch(&mut rng, 100, 5);
    let diff = max_abs_diff(
        &forward(&model, &w, &x).unwrap(),
        &forward(&child, &cw, &x).unwrap(),
    );
    assert!(diff <= 1e-9, "diff {diff}");
}

#[test]
fn widen_rejects_final_cell_and_bad_maps() {
    let (model, w) = two_cell_example();
    assert!(widen_cell(&model, &w, CellId(1), 2, &mut seeded(0)).is_err());
    assert!(widen_cell(&model, &w, CellId(0), 1, &mut seeded(0)).is_err());
    assert!(widen_cell_with_map(&model, &w, CellId(0), &[1, 0, 0], 9).is_err());
    assert!(widen_cell_with_map(&model, &w, CellId(0), &[0, 1, 2], 9).is_err());
    assert!(widen_cell(&model, &w, CellId(7), 2, &mut seeded(0)).is_err());
}

#[test]
fn widen_keeps_originals_leading() {
    let mut rng = seeded(3);
    let model = Model::initial(3, &[4], 2);
    let w = WeightSet::init(&model, &mut rng);
    let (child, cw) = widen_cell(&model, &w, CellId(0), 2, &mut rng).unwrap();
    let old = w.get(CellId(0)).unwrap();
    let new = cw.get(child.cells[0].id).unwrap();
    assert_eq!(new.weight.leading_block(4, 3).unwrap(), old.weight);
    assert_eq!(new.bias.leading_block(4, 1).unwrap(), old.bias);
}

#[test]
fn deepen_is_identity() {
    let mut rng = seeded(5);
    let model = Model::initial(4, &[6, 5], 3);
    let w = WeightSet::init(&model, &mut rng);
    let (child, cw) = deepen_cell(&model, &w, CellId(0), 2).unwrap();
    assert_eq!(child.cells.len(), model.cells.len() + 2);
    assert!(mac_count(&child) > mac_count(&model));
    for c in &child.cells[1..3] {
        assert_eq!(c.origin, CellOrigin::InsertedIdentity);
        assert_eq!(child.per_cell_mc[&c.id], 0.0);
        assert_eq!(cw.get(c.id).unwrap().weight, Tensor::identity(6));
    }
    let x = random_batch(&mut rng, 100, 4);
    let diff = max_abs_diff(
        &forward(&model, &w, &x).unwrap(),
        &forward(&child, &cw, &x).unwrap(),
    );
    assert!(diff <= 1e-12);
}

#[test]
fn deepen_after_linear_cell_fails() {
    let model = Model::initial(2, &[3], 2);
    let w = WeightSet::zeros_like(&model);
    assert!(deepen_cell(&model, &w, CellId(1), 1).is_err());
    assert!(deepen_cell(&model, &w, CellId(0), 0).is_err());
}

fn flat_activeness(model: &Model) -> BTreeMap<CellId, f64> {
    model.cells.iter().map(|c| (c.id, 1.0)).collect()
}

#[test]
fn transform_alternates_per_cell() {
    let mut rng = seeded(8);
    let m0 = Model::initial(4, &[3], 2);
    let w0 = WeightSet::init(&m0, &mut rng);
    let mut t = Transformer::new(TransformConfig::default()).unwrap();

    let first = t
        .transform_model(&m0, &w0, &flat_activeness(&m0), 1, 10, u64::MAX, &mut rng)
        .unwrap()
        .unwrap();
    assert_eq!(first.ops, vec![AppliedOp { cell: CellId(0), op: CellOp::Widen }]);
    assert_eq!(first.child.cells[0].out_dim, 6);
    assert_eq!(first.child.parent_id, Some(0));
    assert_eq!(first.child.id, 1);
    assert_eq!(first.child.created_round, 10);
    let widened = first.child.cells[0].id;
    assert_eq!(t.next_op(widened), CellOp::Deepen);

    let m1 = first.child;
    let second = t
        .transform_model(&m1, &first.weights, &flat_activeness(&m1), 2, 20, u64::MAX, &mut rng)
        .unwrap()
        .unwrap();
    assert_eq!(second.ops, vec![AppliedOp { cell: widened, op: CellOp::Deepen }]);
    assert_eq!(second.child.cells.len(), 3);
    assert_eq!(t.next_op(widened), CellOp::Widen);
    let inserted = second.child.cells[1].id;
    assert_eq!(second.child.per_cell_mc[&inserted], 0.0);
    assert_eq!(second.child.per_cell_mc[&widened], 1.0);
    assert_eq!(t.next_op(inserted), CellOp::Widen);
}

#[test]
fn transform_records_matching_degrees() {
    let mut rng = seeded(9);
    let m0 = Model::initial(4, &[3, 5], 2);
    let w0 = WeightSet::init(&m0, &mut rng);
    let mut t = Transformer::new(TransformConfig::default()).unwrap();
    let act: BTreeMap<_, _> = [(CellId(0), 1.0), (CellId(1), 0.1), (CellId(2), 0.1)].into();
    let tr = t
        .transform_model(&m0, &w0, &act, 1, 0, u64::MAX, &mut rng)
        .unwrap()
        .unwrap();
    let c = &tr.child.cells;
    // 4->3 widened to 4->6: (12+3)/(24+6); successor 3->5 became 6->5: (15+5)/(30+5)
    assert!((tr.child.per_cell_mc[&c[0].id] - 15.0 / 30.0).abs() < 1e-15);
    assert!((tr.child.per_cell_mc[&c[1].id] - 20.0 / 35.0).abs() < 1e-15);
    assert_eq!(tr.child.per_cell_mc[&c[2].id], 1.0);
    assert_eq!(c[2].id, CellId(2));
}

#[test]
fn transform_respects_capacity() {
    let mut rng = seeded(4);
    let m0 = Model::initial(4, &[3], 2);
    let w0 = WeightSet::init(&m0, &mut rng);
    let mut t = Transformer::new(TransformConfig::default()).unwrap();
    let before = t.clone();
    let r = t
        .transform_model(&m0, &w0, &flat_activeness(&m0), 1, 0, mac_count(&m0) + 1, &mut rng)
        .unwrap();
    assert!(r.is_none());
    assert_eq!(t, before);
}

#[test]
fn random_chains_preserve_function() {
    let mut rng = seeded(21);
    for trial in 0..10 {
        let hidden: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
        let mut model = Model::initial(3, &hidden, 4);
        let w0 = WeightSet::init(&model, &mut rng);
        let mut w = w0.clone();
        let parent = model.clone();
        let mut t = Transformer::new(TransformConfig::default()).unwrap();
        for step in 0..4 {
            let act: BTreeMap<_, _> =
                model.cells.iter().map(|c| (c.id, rng.random::<f64>())).collect();
            let tr = t
                .transform_model(&model, &w, &act, step + 1, step, u64::MAX, &mut rng)
                .unwrap()
                .unwrap();
            assert!(mac_count(&tr.child) > mac_count(&model));
            tr.child.validate().unwrap();
            tr.weights.check_matches(&tr.child).unwrap();
            model = tr.child;
            w = tr.weights;
        }
        let x = random_batch(&mut rng, 100, 3);
        let diff = max_abs_diff(
            &forward(&parent, &w0, &x).unwrap(),
            &forward(&model, &w, &x).unwrap(),
        );
        assert!(diff <= 1e-9, "trial {trial}: diff {diff}");
    }
}

#[test]
fn should_transform_gate() {
    let t = Transformer::new(TransformConfig::default()).unwrap();
    let m = Model::initial(4, &[3], 2);
    assert!(!t.should_transform(None, 0.003, &m, u64::MAX));
    assert!(t.should_transform(Some(0.001), 0.003, &m, u64::MAX));
    assert!(!t.should_transform(Some(0.01), 0.003, &m, u64::MAX));
    assert!(!t.should_transform(Some(0.001), 0.003, &m, mac_count(&m)));
    // widening the hidden cell adds 3 * (4 + 2) MACs
    assert!(t.should_transform(Some(0.001), 0.003, &m, mac_count(&m) + 18));
    assert!(!t.should_transform(Some(0.001), f64::NEG_INFINITY, &m, u64::MAX));
}

fn lineage_pair(mcs: &[f64], inserted_at: Option<usize>) -> Vec<Model> {
    let parent = Model::initial(2, &[3, 3, 3], 2);
    let mut child = parent.clone();
    child.id = 1;
    child.parent_id = Some(0);
    child.per_cell_mc.clear();
    let mut next = parent.next_cell_id();
    for (cell, &mc) in child.cells.iter_mut().zip(mcs) {
        if mc != 1.0 {
            cell.origin = CellOrigin::WidenedFrom(cell.id);
            cell.id = CellId(next);
            next += 1;
        }
        child.per_cell_mc.insert(cell.id, mc);
    }
    if let Some(pos) = inserted_at {
        let mut c = child.cells[pos].clone();
        c.id = CellId(next);
        c.origin = CellOrigin::InsertedIdentity;
        child.per_cell_mc.insert(c.id, 0.0);
        child.cells.insert(pos + 1, c);
    }
    vec![parent, child]
}

#[test]
fn similarity_examples() {
    let models = lineage_pair(&[1.0, 1.0, 1.0, 1.0], None);
    assert_eq!(model_similarity(&models, 0, 0), 1.0);
    assert_eq!(model_similarity(&models, 0, 1), 1.0);

    let models = lineage_pair(&[1.0, 0.5, 1.0, 1.0], None);
    assert_eq!(model_similarity(&models, 0, 1), 0.875);
    assert_eq!(model_similarity(&models, 1, 0), 0.875);

    let mut three = Model::initial(2, &[3, 3], 2);
    three.per_cell_mc = three.cells.iter().map(|c| (c.id, 1.0)).collect();
    let mut child = three.clone();
    child.id = 1;
    child.parent_id = Some(0);
    let mut ins = child.cells[0].clone();
    ins.id = CellId(10);
    ins.origin = CellOrigin::InsertedIdentity;
    child.per_cell_mc.insert(ins.id, 0.0);
    child.cells.insert(1, ins);
    assert_eq!(model_similarity(&[three, child], 0, 1), 0.75);
}

#[test]
fn similarity_with_lost_cells_is_clamped() {
    let models = lineage_pair(&[-1.0, -1.0, -1.0, -1.0], None);
    assert_eq!(model_similarity(&models, 0, 1), 0.0);
    let models = lineage_pair(&[1.0, -1.0, 1.0, 1.0], None);
    assert_eq!(model_similarity(&models, 0, 1), 0.5);
}

#[test]
fn similarity_composes_across_generations() {
    let mut rng = seeded(2);
    let m0 = Model::initial(4, &[3, 5], 2);
    let w0 = WeightSet::init(&m0, &mut rng);
    let mut t = Transformer::new(TransformConfig::default()).unwrap();
    let act: BTreeMap<_, _> = [(CellId(0), 1.0), (CellId(1), 0.0), (CellId(2), 0.0)].into();
    let t1 = t.transform_model(&m0, &w0, &act, 1, 0, u64::MAX, &mut rng).unwrap().unwrap();
    // second generation: widen the (reshaped) second cell
    let act: BTreeMap<_, _> = t1
        .child
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, if i == 1 { 1.0 } else { 0.0 }))
        .collect();
    let t2 = t
        .transform_model(&t1.child, &t1.weights, &act, 2, 0, u64::MAX, &mut rng)
        .unwrap()
        .unwrap();
    let models = vec![m0.clone(), t1.child.clone(), t2.child.clone()];

    // oracle: per cell, parameters of its root ancestor over its own count
    let roots = [&m0.cells[0], &m0.cells[1], &m0.cells[2]];
    let expected: f64 = t2
        .child
        .cells
        .iter()
        .zip(roots)
        .map(|(c, r)| r.param_count() as f64 / c.param_count() as f64)
        .sum::<f64>()
        / 3.0;
    let got = model_similarity(&models, 0, 2);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert_eq!(got, model_similarity(&models, 2, 0));
    for c in &t2.child.cells {
        assert!(matched_cell(&models, &t2.child, c.id, 0).is_some());
    }
}

#[test]
fn unrelated_models_have_zero_similarity() {
    let a = Model::initial(2, &[3], 2);
    let mut b = Model::initial(2, &[4], 2);
    b.id = 1;
    assert_eq!(model_similarity(&[a, b], 0, 1), 0.0);
}

#[test]
fn inserted_cells_are_unmatched() {
    let mut rng = seeded(6);
    let m0 = Model::initial(4, &[3], 2);
    let w0 = WeightSet::init(&m0, &mut rng);
    let (mut m1, _) = deepen_cell(&m0, &w0, CellId(0), 1).unwrap();
    m1.id = 1;
    m1.parent_id = Some(0);
    let models = vec![m0, m1.clone()];
    assert_eq!(matched_cell(&models, &m1, m1.cells[1].id, 0), None);
    assert_eq!(matched_cell(&models, &m1, CellId(0), 0), Some(CellId(0)));
    assert!((model_similarity(&models, 0, 1) - 2.0 / 3.0).abs() < 1e-15);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn morphisms_preserve_outputs(
        d in 1usize..6,
        hidden in proptest::collection::vec(1usize..5, 1..3),
        classes in 2usize..4,
        factor in 2usize..4,
        scale in 0.0f64..0.9,
        seed in proptest::prelude::any::<u64>(),
    ) {
        let model = Model::initial(d, &hidden, classes);
        let mut rng = seeded(seed);
        let w = WeightSet::init(&model, &mut rng);
        let x = random_batch(&mut seeded(seed ^ 1), 8, d);
        let before = forward(&model, &w, &x).unwrap();

        let map = sample_unit_map(hidden[0], factor, &mut rng);
        let next = model.next_cell_id();
        let (wide, mut ww) = widen_cell_with_map(&model, &w, CellId(0), &map, next).unwrap();
        jitter_split(&mut ww, CellId(next + 1), &map, scale, &mut rng).unwrap();
        proptest::prop_assert!(max_abs_diff(&before, &forward(&wide, &ww, &x).unwrap()) < 1e-9);

        let (deep, dw) = deepen_cell(&wide, &ww, CellId(next), 1).unwrap();
        proptest::prop_assert!(max_abs_diff(&before, &forward(&deep, &dw, &x).unwrap()) < 1e-9);
        proptest::prop_assert_eq!(deep.cells.len(), model.cells.len() + 1);
    }
}
