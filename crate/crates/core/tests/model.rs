use gtsp_core::graph::{Graph, PaddedGraph};
use gtsp_core::model::{forward_graph, ActiveMasks, ForwardOptions, ModelConfig, ModelParams, StackStyle, Sublayer};
use gtsp_core::prune::{exhaustive_layer_prune, finalize_layer_prune, HeadMask, PruneState, WeightMasks};
use gtsp_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn config(gnn: usize, blocks: usize, style: StackStyle) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        num_gnn_layers: gnn,
        num_transformer_layers: blocks,
        hidden_dim: 8,
        head_dim: 4,
        num_heads: 2,
        ffn_dim: 12,
        num_classes: 3,
        stack_style: style,
        norm_eps: 1e-5,
    }
}

fn random_graph(seed: u64, n: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < 0.35 {
                edges.push((i, j));
            }
        }
    }
    let feats = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    Graph::from_edges(n, &edges, Tensor::matrix(n, 3, feats).unwrap(), 1).unwrap()
}

fn logits(params: &ModelParams, state: &PruneState, g: &PaddedGraph) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, state.weights.as_ref());
    let trace = forward_graph(&mut tape, &vars, params, g, &ActiveMasks::from_state(state), &mut ForwardOptions::eval()).unwrap();
    tape.value(trace.logits).data().to_vec()
}

fn representations(params: &ModelParams, state: &PruneState, g: &PaddedGraph) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, None);
    let mut opts = ForwardOptions {
        record_representations: true,
        ..ForwardOptions::eval()
    };
    let trace = forward_graph(&mut tape, &vars, params, g, &ActiveMasks::from_state(state), &mut opts).unwrap();
    trace.representations.into_iter().map(|r| r.value).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn bitwise(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn mat(t: &Tensor) -> Mat {
    t.to_rows()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|p| a[i][p] * b[p][j]).sum()).collect()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            row.iter().enumerate().map(|(c, v)| (v - mean) / (var + eps).sqrt() * gain[c] + bias[c]).collect()
        })
        .collect()
}

fn named<'a>(params: &'a ModelParams, name: &str) -> &'a Tensor {
    params.tensor(params.layout.find(name).unwrap())
}

#[test]
fn gcn_matches_hand_propagation() {
    // Path 0-1-2: degrees with self loops are 2, 3, 2.
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap();
    let g = Graph::from_edges(3, &[(0, 1), (1, 2)], x.clone(), 0).unwrap().to_padded(3);
    let c = config(1, 1, StackStyle::Prelude);
    let params = ModelParams::init(&c, 4).unwrap();
    let s = |a: f64, b: f64| 1.0 / (a * b).sqrt();
    let a_hat = vec![
        vec![s(2.0, 2.0), s(2.0, 3.0), 0.0],
        vec![s(3.0, 2.0), s(3.0, 3.0), s(3.0, 2.0)],
        vec![0.0, s(2.0, 3.0), s(2.0, 2.0)],
    ];
    let expected: Mat = mm(&a_hat, &mm(&mat(&x), &mat(named(&params, "gnn.0.weight"))))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let reps = representations(&params, &PruneState::identity(&c), &g);
    assert!(close(reps[0].data(), &expected.concat(), 1e-12));
}

#[test]
fn mha_matches_hand_attention() {
    let c = config(1, 1, StackStyle::Prelude);
    let params = ModelParams::init(&c, 8).unwrap();
    let g = random_graph(3, 5).to_padded(5);
    let reps = representations(&params, &PruneState::identity(&c), &g);
    let h = mat(&reps[0]);
    let mut heads: Vec<Mat> = Vec::new();
    for hd in 0..c.num_heads {
        let q = mm(&h, &mat(named(&params, &format!("block.0.head.{hd}.query"))));
        let k = mm(&h, &mat(named(&params, &format!("block.0.head.{hd}.key"))));
        let v = mm(&h, &mat(named(&params, &format!("block.0.head.{hd}.value"))));
        let scale = 1.0 / (c.head_dim as f64).sqrt();
        let p: Mat = q
            .iter()
            .map(|qi| {
                let l: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect();
        heads.push(mm(&p, &v));
    }
    let cat: Mat = (0..h.len()).map(|i| heads.iter().flat_map(|z| z[i].clone()).collect()).collect();
    let bias = named(&params, "block.0.out.bias").data();
    let out: Mat = mm(&cat, &mat(named(&params, "block.0.out.weight")))
        .into_iter()
        .map(|r| r.iter().zip(bias).map(|(a, b)| a + b).collect())
        .collect();
    let normed = layer_norm(
        &out,
        named(&params, "block.0.norm1.gain").data(),
        named(&params, "block.0.norm1.bias").data(),
        c.norm_eps,
    );
    let expected: Vec<f64> = normed.concat().iter().zip(h.concat()).map(|(a, b)| a + b).collect();
    assert!(close(reps[1].data(), &expected, 1e-12));
}

#[test]
fn padding_does_not_change_logits() {
    for style in [StackStyle::Prelude, StackStyle::Interleaved] {
        let c = config(2, 2, style);
        let params = ModelParams::init(&c, 1).unwrap();
        let state = PruneState::identity(&c);
        let g = random_graph(11, 7);
        let tight = logits(&params, &state, &g.to_padded(7));
        let padded = logits(&params, &state, &g.to_padded(12));
        assert!(close(&tight, &padded, 1e-12), "{tight:?} vs {padded:?}");
    }
}

#[test]
fn node_permutation_does_not_change_logits() {
    let c = config(2, 2, StackStyle::Interleaved);
    let params = ModelParams::init(&c, 2).unwrap();
    let state = PruneState::identity(&c);
    let g = random_graph(12, 8);
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let a = logits(&params, &state, &g.to_padded(8));
    let b = logits(&params, &state, &g.permuted(&perm).to_padded(8));
    assert!(close(&a, &b, 1e-10), "{a:?} vs {b:?}");
}

#[test]
fn identity_masks_reproduce_dense_bitwise() {
    let c = config(2, 2, StackStyle::Prelude);
    let params = ModelParams::init(&c, 3).unwrap();
    let g = random_graph(13, 9).to_padded(10);
    let plain = PruneState::identity(&c);
    let masked = PruneState {
        weights: Some(WeightMasks::dense(&params)),
        ..plain.clone()
    };
    assert!(bitwise(&logits(&params, &plain, &g), &logits(&params, &masked, &g)));
}

#[test]
fn masked_head_equals_zeroed_value_projection() {
    let c = config(1, 2, StackStyle::Prelude);
    let params = ModelParams::init(&c, 5).unwrap();
    let g = random_graph(14, 6).to_padded(6);
    let mut state = PruneState::identity(&c);
    state.heads = HeadMask::from_bits(vec![vec![true, false], vec![true, true]]);
    let mut zeroed = params.clone();
    let id = zeroed.layout.find("block.0.head.1.value").unwrap();
    zeroed.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let a = logits(&params, &state, &g);
    let b = logits(&zeroed, &PruneState::identity(&c), &g);
    assert!(close(&a, &b, 1e-14), "{a:?} vs {b:?}");
}

#[test]
fn dropped_sublayers_compose_as_identity() {
    let c = config(2, 3, StackStyle::Interleaved);
    let params = ModelParams::init(&c, 6).unwrap();
    let g = random_graph(15, 7).to_padded(7);
    let subs = c.sublayers();
    let mut state = PruneState::identity(&c);
    let bits: Vec<bool> = subs.iter().map(|s| !matches!(s, Sublayer::Mha(1) | Sublayer::Ffn(1) | Sublayer::Gnn(1))).collect();
    state.layers = gtsp_core::prune::LayerMask::fixed(&c, bits.clone()).unwrap();
    let reps = representations(&params, &state, &g);
    for (pos, &b) in bits.iter().enumerate() {
        if !b {
            assert!(bitwise(reps[pos].data(), reps[pos - 1].data()), "position {pos}");
        }
    }
}

#[test]
fn greedy_layer_choice_against_exhaustive_search() {
    // Greedy is exact when one sublayer is dropped and never beats the
    // exhaustive optimum otherwise.
    let mut agree = 0;
    for seed in 0..12u64 {
        let c = config(2, 2, StackStyle::Prelude);
        let params = ModelParams::init(&c, seed).unwrap();
        let graphs: Vec<PaddedGraph> = (0..4).map(|i| random_graph(100 * seed + i, 6).to_padded(6)).collect();
        let state = PruneState::identity(&c);
        let prunable = (c.sublayers().len() - 1) as f64;
        let one = 0.5 / prunable;
        let g1 = finalize_layer_prune(&params, &state, one, &graphs).unwrap();
        let e1 = exhaustive_layer_prune(&params, &state, one, &graphs).unwrap();
        assert_eq!(g1.bits(), e1.bits(), "seed {seed}");
        let g = finalize_layer_prune(&params, &state, 0.5, &graphs).unwrap();
        let e = exhaustive_layer_prune(&params, &state, 0.5, &graphs).unwrap();
        assert_eq!(g.dropped_count(), e.dropped_count());
        let loss = |bits: &[bool]| {
            let st = PruneState {
                layers: gtsp_core::prune::LayerMask::fixed(&c, bits.to_vec()).unwrap(),
                ..state.clone()
            };
            graphs
                .iter()
                .map(|gr| {
                    let l = logits(&params, &st, gr);
                    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    lse - l[gr.label]
                })
                .sum::<f64>()
        };
        assert!(loss(e.bits()) <= loss(g.bits()) + 1e-12, "seed {seed}");
        if g.bits() == e.bits() {
            agree += 1;
        }
    }
    println!("greedy matched the exhaustive subset on {agree}/12 seeds");
    assert!(agree > 0);
}
