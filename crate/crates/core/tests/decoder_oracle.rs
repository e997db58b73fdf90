mod common;

use common::*;
use rand::Rng;
use rcsbnet::decoder::{Csbu, DecoderStage, DualStream, RcsbConfig, RecursiveBlock};
use rcsbnet::graph::{Graph, Mode};
use rcsbnet::params::{rng_from_seed, Builder, ParamGroup, ParamStore};
use rcsbnet::sfe::Sfe;

const C: usize = 4;

fn streams(seed: u64, n: usize, h: usize, w: usize) -> (rcsbnet::Tensor<f64>, rcsbnet::Tensor<f64>) {
    let mut rng = rng_from_seed(seed);
    (
        random_tensor(&mut rng, [n, C, h, w], -1.0, 1.0),
        random_tensor(&mut rng, [n, C, h, w], -1.0, 1.0),
    )
}

fn run_csbu(fusion: bool, mode: Mode, seed: u64) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_from_seed(seed);
    let unit = Csbu::new(&mut Builder::new(&mut store, &mut rng, ParamGroup::Decoder).sub("u"), C, fusion);
    perturb_norms(&mut store, &mut rng);
    let (s, c) = streams(seed + 1, 2, 5, 6);
    let g = Graph::new(&store, mode);
    let x = DualStream::new(g.input(s.clone()), g.input(c.clone())).unwrap();
    let y = unit.forward(&g, &x).unwrap();
    let train = mode == Mode::Train;
    let (os, oc) = csbu(&Nd::from_tensor(&s), &Nd::from_tensor(&c), &store, "u", fusion, train);
    assert!(rel_err(y.sal.value().data(), &os.v) < 1e-10);
    assert!(rel_err(y.ctr.value().data(), &oc.v) < 1e-10);
}

#[test]
fn csbu_matches_oracle() {
    for seed in 0..3 {
        for fusion in [true, false] {
            for mode in [Mode::Eval, Mode::Train] {
                run_csbu(fusion, mode, seed);
            }
        }
    }
}

#[test]
fn recursive_block_matches_oracle() {
    for recursions in [1, 2, 3] {
        for mode in [Mode::Eval, Mode::Train] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = rng_from_seed(recursions as u64);
            let block =
                RecursiveBlock::new(&mut Builder::new(&mut store, &mut rng, ParamGroup::Decoder).sub("b"), C, true);
            perturb_norms(&mut store, &mut rng);
            let (s, c) = streams(9, 2, 4, 4);
            let g = Graph::new(&store, mode);
            let x = DualStream::new(g.input(s.clone()), g.input(c.clone())).unwrap();
            let y = block.forward(&g, &x, recursions).unwrap();
            let (os, oc) = recursive_block(
                &Nd::from_tensor(&s),
                &Nd::from_tensor(&c),
                &store,
                "b",
                recursions,
                true,
                mode == Mode::Train,
            );
            assert!(rel_err(y.sal.value().data(), &os.v) < 1e-10);
            assert!(rel_err(y.ctr.value().data(), &oc.v) < 1e-10);
        }
    }
}

#[test]
fn zero_weights_pass_input_through() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_from_seed(3);
    let block = RecursiveBlock::new(&mut Builder::new(&mut store, &mut rng, ParamGroup::Decoder).sub("b"), C, true);
    let ids: Vec<_> = store
        .entries()
        .filter(|(_, e)| e.name.ends_with("conv.weight"))
        .map(|(id, e)| (id, e.value.shape()))
        .collect();
    for (id, shape) in ids {
        store.set(id, rcsbnet::Tensor::zeros(shape)).unwrap();
    }
    let (s, c) = streams(4, 1, 3, 3);
    let g = Graph::inference(&store);
    let x = DualStream::new(g.input(s.clone()), g.input(c.clone())).unwrap();
    let y = block.forward(&g, &x, 3).unwrap();
    assert_eq!(y.sal.value(), &s);
    assert_eq!(y.ctr.value(), &c);
}

#[test]
fn stack_and_stage_shapes() {
    for (blocks, recursions) in [(1, 1), (2, 3), (3, 2)] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(5);
        let cfg = RcsbConfig {
            blocks,
            recursions,
            early_fusion: true,
        };
        let stage = DecoderStage::new(&mut Builder::new(&mut store, &mut rng, ParamGroup::Decoder), C, cfg).unwrap();
        let (skip, carried) = streams(6, 2, 4, 6);
        let g = Graph::inference(&store);
        let skip = g.input(skip);
        let out = stage.forward(&g, &skip, Some(&g.input(carried))).unwrap();
        assert_eq!(out.shape(), [2, C, 4, 6]);
        let zero = g.input(rcsbnet::Tensor::zeros([2, C, 4, 6]));
        let a = stage.forward(&g, &skip, Some(&zero)).unwrap();
        let b = stage.forward(&g, &skip, None).unwrap();
        assert_eq!(a.sal.value(), b.sal.value());
        assert_eq!(a.ctr.value(), b.ctr.value());
        let wrong = g.input(rcsbnet::Tensor::zeros([2, C, 2, 3]));
        assert!(stage.forward(&g, &skip, Some(&wrong)).is_err());
    }
}

#[test]
fn stage_predict_and_extract_match_oracle() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_from_seed(11);
    let sfe = Sfe::new(&mut Builder::new(&mut store, &mut rng, ParamGroup::Decoder).sub("f"), C, true, true);
    perturb_norms(&mut store, &mut rng);
    for name in ["f.k_sal", "f.k_ctr"] {
        let id = store.find(name).unwrap();
        let k = rng.gen_range(0.5..2.0);
        store.set(id, rcsbnet::Tensor::full([1, 1, 1, 1], k)).unwrap();
    }
    let (s, c) = streams(12, 2, 3, 5);
    let g = Graph::inference(&store);
    let x = DualStream::new(g.input(s.clone()), g.input(c.clone())).unwrap();
    let out = sfe.forward(&g, &x).unwrap();
    let (ps, pc) = stage_predict(&Nd::from_tensor(&s), &Nd::from_tensor(&c), &store, "f");
    assert!(rel_err(out.sal_logits.value().data(), &ps.v) < 1e-12);
    assert!(rel_err(out.ctr_logits.value().data(), &pc.v) < 1e-12);
    let feats = extract_features(&ps, &pc, &store, "f.fuse", false);
    let next = out.next_features.unwrap();
    assert_eq!(next.shape(), [2, C, 6, 10]);
    assert!(rel_err(next.value().data(), &feats.v) < 1e-10);
}
