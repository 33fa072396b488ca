use posenc::attention::{
    attention_weights, init_attention, multi_head_self_attention, scaled_dot_attention, AttentionConfig, HeadProjection,
};
use posenc::params::ParamStore;
use posenc::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.dim(0)).map(|i| t.row(i).to_vec()).collect()
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                c[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    c
}

/// Attention computed one query position at a time.
fn attention_oracle(q: &Mat, k: &Mat, v: &Mat, d_k: f64) -> Mat {
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d_k.sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (w, vj) in exp.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += w / z * x;
                }
            }
            out
        })
        .collect()
}

/// Every head on its own, concatenated, then the output projection.
fn mha_oracle(x: &Mat, store: &ParamStore, cfg: &AttentionConfig) -> Mat {
    let mut cat: Mat = vec![Vec::new(); x.len()];
    for head in 0..cfg.heads {
        let [nq, nk, nv] = cfg.head_weight_names("a", head);
        let w = |n: &str| to_mat(store.get(n).unwrap());
        let (q, k, v) = (mat_mul(x, &w(&nq)), mat_mul(x, &w(&nk)), mat_mul(x, &w(&nv)));
        for (row, h) in cat.iter_mut().zip(attention_oracle(&q, &k, &v, cfg.scale())) {
            row.extend(h);
        }
    }
    mat_mul(&cat, &to_mat(store.get("a.wo").unwrap()))
}

fn mha(x: &Tensor, store: &ParamStore, cfg: &AttentionConfig) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let out = multi_head_self_attention(&mut tape, &bound, "a", xv, cfg).unwrap();
    tape.value(out).clone()
}

fn random_instance(rng: &mut ChaCha8Rng, projection: HeadProjection, tied: bool) -> (Tensor, ParamStore, AttentionConfig) {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let d = heads * rng.random_range(1..=8 / heads);
    let t = rng.random_range(1..=6);
    let cfg = AttentionConfig {
        projection,
        tied,
        ..AttentionConfig::new(d, heads)
    };
    let mut store = ParamStore::new();
    init_attention(&mut store, "a", &cfg, rng);
    (Tensor::uniform([t, d], 2.0, rng), store, cfg)
}

fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    a.data()
        .iter()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn multi_head_attention_matches_per_head_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let (x, store, cfg) = random_instance(&mut rng, HeadProjection::Full, false);
        let out = mha(&x, &store, &cfg);
        assert_eq!(out.shape(), x.shape());
        let err = max_diff(&out, &mha_oracle(&to_mat(&x), &store, &cfg));
        assert!(err < 1e-10, "trial {trial}: {err:e}");
        worst = worst.max(err);
    }
    println!("max abs deviation from oracle over 100 instances: {worst:e}");
}

#[test]
fn split_and_tied_layouts_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for trial in 0..60 {
        let (projection, tied) = match trial % 3 {
            0 => (HeadProjection::Split, false),
            1 => (HeadProjection::Full, true),
            _ => (HeadProjection::Split, true),
        };
        let (x, store, cfg) = random_instance(&mut rng, projection, tied);
        let out = mha(&x, &store, &cfg);
        assert_eq!(out.shape(), x.shape());
        assert!(max_diff(&out, &mha_oracle(&to_mat(&x), &store, &cfg)) < 1e-10, "trial {trial}");
    }
}

#[test]
fn scaled_dot_attention_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let run = |q: &Tensor, k: &Tensor, v: &Tensor, d_k: f64| {
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let out = scaled_dot_attention(&mut tape, qv, kv, vv, d_k).unwrap();
        tape.value(out).clone()
    };

    // A single position attends only to itself.
    let (q, k, v) = (
        Tensor::uniform([1, 3], 1.0, &mut rng),
        Tensor::uniform([1, 3], 1.0, &mut rng),
        Tensor::uniform([1, 3], 1.0, &mut rng),
    );
    assert_eq!(run(&q, &k, &v, 3.0).data(), v.data());

    // Identical keys give uniform weights, so every output row is the mean of V.
    let q = Tensor::uniform([4, 3], 1.0, &mut rng);
    let key = Tensor::uniform([1, 3], 1.0, &mut rng);
    let k = Tensor::new([4, 3], key.data().repeat(4)).unwrap();
    let v = Tensor::uniform([4, 3], 1.0, &mut rng);
    let out = run(&q, &k, &v, 3.0);
    for j in 0..3 {
        let mean = (0..4).map(|i| v.at2(i, j)).sum::<f64>() / 4.0;
        for i in 0..4 {
            assert!((out.at2(i, j) - mean).abs() < 1e-14);
        }
    }

    // T=2, D=2 against the position loop.
    for _ in 0..20 {
        let (q, k, v) = (
            Tensor::uniform([2, 2], 2.0, &mut rng),
            Tensor::uniform([2, 2], 2.0, &mut rng),
            Tensor::uniform([2, 2], 2.0, &mut rng),
        );
        let expect = attention_oracle(&to_mat(&q), &to_mat(&k), &to_mat(&v), 2.0);
        assert!(max_diff(&run(&q, &k, &v, 2.0), &expect) < 1e-10);
    }
}

#[test]
fn single_identity_head_reduces_to_scaled_dot_attention() {
    let d = 5;
    let cfg = AttentionConfig::new(d, 1);
    let mut store = ParamStore::new();
    for n in ["a.head0.wq", "a.head0.wk", "a.head0.wv", "a.wo"] {
        store.insert(n, Tensor::eye(d));
    }
    let x = Tensor::uniform([4, d], 1.0, &mut ChaCha8Rng::seed_from_u64(45));
    let m = to_mat(&x);
    assert!(max_diff(&mha(&x, &store, &cfg), &attention_oracle(&m, &m, &m, d as f64)) < 1e-12);
}

#[test]
fn branch_shapes_are_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    for (t, d) in [(84, 120), (20, 1536)] {
        let cfg = AttentionConfig::new(d, 4);
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", &cfg, &mut rng);
        let x = Tensor::uniform([t, d], 1.0, &mut rng);
        assert_eq!(mha(&x, &store, &cfg).shape(), &[t, d]);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..100 {
        let (t, d) = (rng.random_range(1..12), rng.random_range(1..9));
        let scale = rng.random_range(0.1..10.0);
        let q = Tensor::uniform([t, d], scale, &mut rng);
        let k = Tensor::uniform([t, d], scale, &mut rng);
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(&q), tape.constant(&k));
        let w = attention_weights(&mut tape, qv, kv, d as f64).unwrap();
        let w = tape.value(w);
        for i in 0..t {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mha_is_permutation_equivariant(seed in any::<u64>(), split in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = if split { HeadProjection::Split } else { HeadProjection::Full };
        let (x, store, cfg) = random_instance(&mut rng, projection, false);
        let t = x.dim(0);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let px = Tensor::new(x.shape().to_vec(), perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let out = mha(&x, &store, &cfg);
        let out_p = mha(&px, &store, &cfg);
        for (row, &src) in perm.iter().enumerate() {
            for (a, b) in out_p.row(row).iter().zip(out.row(src)) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
