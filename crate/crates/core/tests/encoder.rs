mod common;

use common::gradcheck::{check_op, random};
use transfer_core::encoder::{
    classify_head, encoder_block, msa_with_msad, project_to_sequence, self_attention, Encoder, EncoderBlock,
    EncoderConfig,
};
use transfer_core::params::ParamStore;
use transfer_core::rng::seeded;
use transfer_core::{Graph, Mode, Tensor, Var};

fn config(d: usize, heads: usize, grid: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels: d,
        grid,
        embed_dim: d,
        heads,
        depth: 2,
        mlp_hidden: 2 * d,
        num_classes: 3,
    }
}

fn block(d: usize, heads: usize, seed: u64) -> (ParamStore, EncoderBlock) {
    let mut ps = ParamStore::new();
    let b = EncoderBlock::new(&config(d, heads, 2), 0, &mut ps, &mut seeded(seed));
    (ps, b)
}

fn columns(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let cols = t.shape()[1];
    let rows = t.shape()[0];
    Tensor::from_fn(&[rows, hi - lo], |i| t.data()[(i / (hi - lo)) * cols + lo + i % (hi - lo)])
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn two_token_attention_matches_hand_computation() {
    let x = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let wq = Tensor::eye(2);
    let wk = Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
    let wv = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (a, o) = self_attention(&x, &wq, &wk, &wv).unwrap();
    // scores are √2·I, so each token keeps weight 1/(1 + e^{-√2}) on itself
    let s = 1.0 / (1.0 + (-(2.0f64).sqrt()).exp());
    assert!(close(a.data(), &[s, 1.0 - s, 1.0 - s, s], 1e-10), "{:?}", a.data());
    let expect = [3.0 - 2.0 * s, 4.0 - 2.0 * s, 1.0 + 2.0 * s, 2.0 + 2.0 * s];
    assert!(close(o.data(), &expect, 1e-10), "{:?}", o.data());
}

#[test]
fn attention_rows_are_distributions() {
    let x = random(&[6, 8], -2.0, 2.0, 3);
    let (wq, wk, wv) = (random(&[8, 4], -1.0, 1.0, 4), random(&[8, 4], -1.0, 1.0, 5), random(&[8, 3], -1.0, 1.0, 6));
    let (a, o) = self_attention(&x, &wq, &wk, &wv).unwrap();
    assert_eq!(a.shape(), &[6, 6]);
    assert_eq!(o.shape(), &[6, 3]);
    for row in a.data().chunks(6) {
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Multi-head output assembled head by head from single-head attention.
fn per_head_oracle(ps: &ParamStore, b: &EncoderBlock, x: &Tensor, skip: Option<usize>) -> Vec<f64> {
    let (len, d) = (x.shape()[0], x.shape()[1]);
    let dk = d / b.heads;
    let mut concat = vec![0.0; len * d];
    for h in 0..b.heads {
        if skip == Some(h) {
            continue;
        }
        let slice = |w: &Tensor| columns(w, h * dk, (h + 1) * dk);
        let (_, o) = self_attention(
            x,
            &slice(ps.get(b.wq.weight)),
            &slice(ps.get(b.wk.weight)),
            &slice(ps.get(b.wv.weight)),
        )
        .unwrap();
        for t in 0..len {
            concat[t * d + h * dk..t * d + (h + 1) * dk].copy_from_slice(&o.data()[t * dk..(t + 1) * dk]);
        }
    }
    let wp = ps.get(b.proj.weight);
    let bias = ps.get(b.proj.bias.unwrap());
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..d {
            out[t * d + j] = bias.data()[j] + (0..d).map(|i| concat[t * d + i] * wp.at(&[i, j])).sum::<f64>();
        }
    }
    out
}

#[test]
fn msa_without_drops_matches_head_by_head_oracle() {
    let (mut ps, b) = block(8, 2, 1);
    ps.get_mut(b.proj.bias.unwrap()).data_mut().copy_from_slice(random(&[8], -1.0, 1.0, 9).data());
    let x = random(&[5, 8], -1.5, 1.5, 2);
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape(&[1, 5, 8]).unwrap());
    let out = msa_with_msad(&mut g, &ps, &b, xv, 0.0, Mode::Training, &mut seeded(0)).unwrap();
    assert!(out.decisions.iter().all(|d| d.dropped_index.is_none()));
    let expect = per_head_oracle(&ps, &b, &x, None);
    assert!(close(g.value(out.output).data(), &expect, 1e-10));
}

#[test]
fn forced_head_drop_equals_zero_substitution() {
    let (mut ps, b) = block(8, 4, 3);
    ps.get_mut(b.proj.bias.unwrap()).data_mut().copy_from_slice(random(&[8], -1.0, 1.0, 4).data());
    let x = random(&[1, 5, 8], -1.0, 1.0, 5);
    let mut seen = [false; 4];
    for seed in 0..40 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let forced = msa_with_msad(&mut g, &ps, &b, xv, 1.0, Mode::Training, &mut seeded(seed)).unwrap();
        let dropped = forced.decisions[0].dropped_index.expect("p2 = 1 always drops");
        seen[dropped] = true;

        let clean = msa_with_msad(&mut g, &ps, &b, xv, 0.0, Mode::Training, &mut seeded(seed)).unwrap();
        let mut heads = g.value(clean.heads_out).clone();
        for t in 0..5 {
            heads.data_mut()[t * 8 + dropped * 2..t * 8 + dropped * 2 + 2].fill(0.0);
        }
        let hv = g.constant(heads);
        let oracle = b.proj.forward(&mut g, &ps, hv).unwrap();
        assert!(g.value(forced.output).bitwise_eq(g.value(oracle)), "seed {seed}");
        let expect = per_head_oracle(&ps, &b, &x.clone().reshape(&[5, 8]).unwrap(), Some(dropped));
        assert!(close(g.value(forced.output).data(), &expect, 1e-10));
    }
    assert!(seen.iter().all(|&s| s), "every head should be dropped at least once: {seen:?}");
}

#[test]
fn single_head_drop_leaves_only_the_projection_bias() {
    let (mut ps, b) = block(6, 1, 2);
    let bias = random(&[6], -1.0, 1.0, 7);
    ps.get_mut(b.proj.bias.unwrap()).data_mut().copy_from_slice(bias.data());
    let mut g = Graph::new();
    let xv = g.constant(random(&[2, 4, 6], -1.0, 1.0, 8));
    let out = msa_with_msad(&mut g, &ps, &b, xv, 1.0, Mode::Training, &mut seeded(1)).unwrap();
    for row in g.value(out.output).data().chunks(6) {
        assert_eq!(row, bias.data());
    }
}

#[test]
fn inference_never_drops_heads() {
    let (ps, b) = block(8, 2, 4);
    let x = random(&[3, 5, 8], -1.0, 1.0, 9);
    let mut rng = seeded(5);
    let before = rng.get_word_pos();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = msa_with_msad(&mut g, &ps, &b, xv, 1.0, Mode::Inference, &mut rng).unwrap();
    assert!(out.decisions.is_empty());
    assert_eq!(rng.get_word_pos(), before);
    let clean = msa_with_msad(&mut g, &ps, &b, xv, 0.0, Mode::Training, &mut seeded(0)).unwrap();
    assert!(g.value(out.output).bitwise_eq(g.value(clean.output)));
}

#[test]
fn zero_weight_block_is_identity() {
    let (mut ps, b) = block(8, 2, 5);
    for id in [b.wq.weight, b.wk.weight, b.wv.weight, b.proj.weight, b.mlp1.weight, b.mlp2.weight] {
        ps.get_mut(id).data_mut().fill(0.0);
    }
    let x = random(&[2, 5, 8], -3.0, 3.0, 10);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = encoder_block(&mut g, &ps, &b, xv, 0.0, Mode::Inference, &mut seeded(0)).unwrap();
    assert!(g.value(out.output).bitwise_eq(&x));
}

#[test]
fn block_gradient_matches_finite_differences() {
    let (ps, b) = block(8, 2, 6);
    let x = random(&[1, 5, 8], -1.0, 1.0, 11);
    let report = check_op(
        &[x],
        |g, v| encoder_block(g, &ps, &b, v[0], 0.0, Mode::Inference, &mut seeded(0)).map(|o| o.output),
        40,
        12,
    );
    assert!(report.checked >= 40);
    assert!(report.max_rel < 1e-4, "{report:?}");
}

#[test]
fn projection_sequence_length_and_positions() {
    let cfg = EncoderConfig {
        in_channels: 16,
        grid: 6,
        embed_dim: 12,
        heads: 3,
        depth: 1,
        mlp_hidden: 8,
        num_classes: 2,
    };
    let mut ps = ParamStore::new();
    let enc = Encoder::new(cfg, &mut ps, &mut seeded(0)).unwrap();
    let proj = &enc.projection;
    for id in [proj.conv.weight, proj.conv.bias, proj.cls] {
        ps.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 6, 6, 16], -1.0, 1.0, 1));
    let seq = project_to_sequence(&mut g, &ps, proj, x).unwrap();
    assert_eq!(g.shape(seq), &[1, 37, 12]);
    // with a zero projection the sequence is exactly the position embeddings
    assert_eq!(g.value(seq).data(), ps.get(proj.pos).data());

    let wrong = g.constant(random(&[1, 5, 5, 16], -1.0, 1.0, 2));
    assert!(project_to_sequence(&mut g, &ps, proj, wrong).is_err());
}

fn run_encoder(g: &mut Graph, ps: &ParamStore, enc: &Encoder, features: Tensor) -> (Vec<Var>, Var) {
    let x = g.constant(features);
    let mut seq = project_to_sequence(g, ps, &enc.projection, x).unwrap();
    let mut outs = Vec::new();
    for b in &enc.blocks {
        seq = encoder_block(g, ps, b, seq, 0.0, Mode::Inference, &mut seeded(0)).unwrap().output;
        outs.push(seq);
    }
    let normed = enc.norm.forward(g, ps, seq).unwrap();
    (outs, classify_head(g, ps, &enc.head, normed).unwrap())
}

#[test]
fn permutation_equivariance_without_positions() {
    let mut ps = ParamStore::new();
    let enc = Encoder::new(config(8, 2, 2), &mut ps, &mut seeded(3)).unwrap();
    ps.get_mut(enc.projection.pos).data_mut().fill(0.0);
    let features = random(&[1, 2, 2, 8], -1.0, 1.0, 4);
    let perm = [2usize, 0, 3, 1];
    let permuted = Tensor::from_fn(&[1, 2, 2, 8], |i| features.data()[perm[i / 8] * 8 + i % 8]);

    let mut g = Graph::new();
    let (outs, logits) = run_encoder(&mut g, &ps, &enc, features);
    let (outs_p, logits_p) = run_encoder(&mut g, &ps, &enc, permuted);
    assert!(close(g.value(logits).data(), g.value(logits_p).data(), 1e-12));
    for (o, op) in outs.iter().zip(&outs_p) {
        let (a, b) = (g.value(*o).data(), g.value(*op).data());
        assert!(close(&a[..8], &b[..8], 1e-12), "class token moved");
        for (p, &src) in perm.iter().enumerate() {
            let t = (1 + p) * 8;
            let s = (1 + src) * 8;
            assert!(close(&b[t..t + 8], &a[s..s + 8], 1e-12), "token {p}");
        }
    }
}

#[test]
fn heads_must_divide_width() {
    assert!(config(8, 3, 2).validate().is_err());
    let mut ps = ParamStore::new();
    assert!(Encoder::new(config(10, 4, 2), &mut ps, &mut seeded(0)).is_err());
}
