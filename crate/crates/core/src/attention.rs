//! Score functions and the residual fusion shared by decoder self-attention
//! and encoder→decoder skip-attention.
//!
//! Projections are single dense layers stored as `{site}.query`, `{site}.key`
//! and `{site}.value`.

use rand::Rng;

use crate::autodiff::{Ctx, Graph, ParamStore, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// Row-wise softmax of projected query·key products.
    Learnable,
    /// Raw cosine similarity, no softmax.
    Cosine,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Learnable => "learnable",
            ScoreMode::Cosine => "cosine",
        }
    }
}

/// `J × K` score matrix produced by one attention site.
#[derive(Clone, Copy, Debug)]
pub struct AttentionScores {
    pub matrix: Var,
    pub mode: ScoreMode,
}

fn width<T: Real>(g: &Graph<T>, v: Var) -> Result<usize> {
    match g.shape(v) {
        [_, w] => Ok(*w),
        s => Err(Error::Attention(format!("expected rank-2 features, got {s:?}"))),
    }
}

/// `softmax_k(M(q_j|θ_h)ᵀ M(k_k|θ_l))`. The key map has no bias: it would
/// shift a whole row of logits and cancel in the softmax.
pub fn learnable_scores<T: Real>(ctx: &mut Ctx<T>, queries: Var, keys: Var, site: &str) -> Result<AttentionScores> {
    let q = ctx.dense(&format!("{site}.query"), queries)?;
    let k = ctx.linear(&format!("{site}.key"), keys)?;
    let (wq, wk) = (width(&ctx.graph, q)?, width(&ctx.graph, k)?);
    if wq != wk {
        return Err(Error::Attention(format!("{site}: query width {wq} != key width {wk} after projection")));
    }
    let logits = ctx.graph.matmul_t(q, k, false, true)?;
    let matrix = ctx.graph.softmax(logits)?;
    Ok(AttentionScores { matrix, mode: ScoreMode::Learnable })
}

/// `⟨k_k, q_j⟩ / (‖k_k‖ ‖q_j‖)`; pairs involving a zero vector score 0.
pub fn cosine_scores<T: Real>(g: &mut Graph<T>, queries: Var, keys: Var) -> Result<AttentionScores> {
    let (wq, wk) = (width(g, queries)?, width(g, keys)?);
    if wq != wk {
        return Err(Error::Attention(format!("cosine needs equal widths, got {wq} and {wk}")));
    }
    let (j, k) = (g.shape(queries)[0], g.shape(keys)[0]);
    let dots = g.matmul_t(queries, keys, false, true)?;
    let norm = |g: &mut Graph<T>, x: Var, shape: &[usize]| -> Result<Var> {
        let sq = g.mul(x, x)?;
        let s = g.reduce_sum(sq, 1)?;
        let n = g.sqrt(s)?;
        g.reshape(n, shape)
    };
    let nq = norm(g, queries, &[j, 1])?;
    let nk = norm(g, keys, &[1, k])?;
    let denom = g.matmul(nq, nk)?;
    let inv = g.recip(denom)?;
    let matrix = g.mul(dots, inv)?;
    Ok(AttentionScores { matrix, mode: ScoreMode::Cosine })
}

/// `out_j = target_j + Σ_k score(j,k) · M(source_k|θ_g)`.
pub fn fuse<T: Real>(ctx: &mut Ctx<T>, targets: Var, sources: Var, scores: &AttentionScores, site: &str) -> Result<Var> {
    let values = ctx.dense(&format!("{site}.value"), sources)?;
    let (wt, wv) = (width(&ctx.graph, targets)?, width(&ctx.graph, values)?);
    if wt != wv {
        return Err(Error::Attention(format!("{site}: value width {wv} != target width {wt}")));
    }
    let context = ctx.graph.matmul(scores.matrix, values)?;
    ctx.graph.add(targets, context)
}

/// Attention of a feature set over itself.
pub fn self_attention<T: Real>(ctx: &mut Ctx<T>, features: Var, mode: ScoreMode, site: &str) -> Result<(Var, AttentionScores)> {
    let scores = match mode {
        ScoreMode::Learnable => learnable_scores(ctx, features, features, site)?,
        ScoreMode::Cosine => cosine_scores(&mut ctx.graph, features, features)?,
    };
    Ok((fuse(ctx, features, features, &scores, site)?, scores))
}

/// Decoder point features attend over encoder region features of the same
/// resolution. In cosine mode, regions whose width differs from the point
/// features are first mapped through the site's (bias-free) key projection.
pub fn skip_attention<T: Real>(
    ctx: &mut Ctx<T>,
    point_feats: Var,
    region_feats: Var,
    mode: ScoreMode,
    site: &str,
) -> Result<(Var, AttentionScores)> {
    let scores = match mode {
        ScoreMode::Learnable => learnable_scores(ctx, point_feats, region_feats, site)?,
        ScoreMode::Cosine => {
            let keys = if width(&ctx.graph, point_feats)? == width(&ctx.graph, region_feats)? {
                region_feats
            } else {
                ctx.linear(&format!("{site}.key"), region_feats)?
            };
            cosine_scores(&mut ctx.graph, point_feats, keys)?
        }
    };
    Ok((fuse(ctx, point_feats, region_feats, &scores, site)?, scores))
}

/// Creates the projections a self-attention site uses.
pub fn init_self_attention<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, site: &str, mode: ScoreMode, width: usize) {
    if mode == ScoreMode::Learnable {
        store.init_dense(rng, &format!("{site}.query"), width, width);
        store.init_linear(rng, &format!("{site}.key"), width, width);
    }
    store.init_dense(rng, &format!("{site}.value"), width, width);
}

/// Creates the projections a skip-attention site uses.
pub fn init_skip_attention<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    site: &str,
    mode: ScoreMode,
    point_width: usize,
    region_width: usize,
) {
    match mode {
        ScoreMode::Learnable => {
            store.init_dense(rng, &format!("{site}.query"), point_width, point_width);
            store.init_linear(rng, &format!("{site}.key"), region_width, point_width);
        }
        ScoreMode::Cosine if region_width != point_width => {
            store.init_linear(rng, &format!("{site}.key"), region_width, point_width);
        }
        ScoreMode::Cosine => {}
    }
    store.init_dense(rng, &format!("{site}.value"), region_width, point_width);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_params;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store_with(site: &str, d_in: usize, d_out: usize, seed: u64, learnable: bool) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        if learnable {
            s.init_dense(&mut rng, &format!("{site}.query"), d_out, d_out);
            s.init_linear(&mut rng, &format!("{site}.key"), d_in, d_out);
        }
        s.init_dense(&mut rng, &format!("{site}.value"), d_in, d_out);
        s
    }

    #[test]
    fn single_key_softmax_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = store_with("a", 4, 4, 2, true);
        let mut ctx = Ctx::new(&store);
        let q = ctx.constant(random(&mut rng, 5, 4));
        let k = ctx.constant(random(&mut rng, 1, 4));
        let s = learnable_scores(&mut ctx, q, k, "a").unwrap();
        assert!(ctx.value(s.matrix).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = store_with("a", 4, 4, 4, true);
        let mut ctx = Ctx::new(&store);
        let q = ctx.constant(random(&mut rng, 3, 4));
        let row = random(&mut rng, 1, 4);
        let k = ctx.constant(Tensor::from_rows(&[row.data(), row.data(), row.data(), row.data()]).unwrap());
        let s = learnable_scores(&mut ctx, q, k, "a").unwrap();
        assert!(ctx.value(s.matrix).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn learnable_scores_match_scalar_oracle() {
        // 3 queries × 2 keys, computed entry by entry.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = store_with("a", 3, 2, 6, true);
        let qx = random(&mut rng, 3, 2);
        let kx = random(&mut rng, 2, 3);
        let mut ctx = Ctx::new(&store);
        let q = ctx.constant(qx.clone());
        let k = ctx.constant(kx.clone());
        let s = learnable_scores(&mut ctx, q, k, "a").unwrap();

        let proj = |x: &[f64], name: &str| -> Vec<f64> {
            let w = store.get(&format!("a.{name}.w")).unwrap();
            let b = store.get(&format!("a.{name}.b"));
            (0..w.shape()[1]).map(|o| b.map_or(0.0, |b| b.data()[o]) + (0..x.len()).map(|i| x[i] * w.at(i, o)).sum::<f64>()).collect()
        };
        for j in 0..3 {
            let qp = proj(qx.row(j), "query");
            let logits: Vec<f64> = (0..2)
                .map(|kk| {
                    let kp = proj(kx.row(kk), "key");
                    qp.iter().zip(&kp).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for kk in 0..2 {
                let expected = logits[kk].exp() / z;
                assert!((ctx.value(s.matrix).at(j, kk) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cosine_special_cases() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_rows(&[[1.0, 2.0, 0.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[[1.0, 2.0, 0.0], [-2.0, 1.0, 0.0], [-3.0, -6.0, 0.0], [0.0, 0.0, 0.0]]).unwrap());
        let s = cosine_scores(&mut g, q, k).unwrap();
        let row = g.value(s.matrix).row(0).to_vec();
        assert!((row[0] - 1.0).abs() < 1e-15);
        assert!(row[1].abs() < 1e-15);
        assert!((row[2] + 1.0).abs() < 1e-15);
        assert_eq!(row[3], 0.0, "zero-norm key scores 0");
    }

    #[test]
    fn width_mismatch_errors() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(vec![2, 3]));
        let k = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(cosine_scores(&mut g, q, k), Err(Error::Attention(_))));

        let store = store_with("f", 4, 4, 0, false);
        let mut ctx = Ctx::new(&store);
        let t = ctx.constant(Tensor::zeros(vec![2, 3]));
        let src = ctx.constant(Tensor::zeros(vec![1, 4]));
        let sc = ctx.constant(Tensor::zeros(vec![2, 1]));
        let scores = AttentionScores { matrix: sc, mode: ScoreMode::Cosine };
        assert!(matches!(fuse(&mut ctx, t, src, &scores, "f"), Err(Error::Attention(_))));
    }

    #[test]
    fn fuse_zero_scores_and_single_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = store_with("f", 3, 4, 9, false);
        let tx = random(&mut rng, 2, 4);
        let sx = random(&mut rng, 1, 3);
        let mut ctx = Ctx::new(&store);
        let t = ctx.constant(tx.clone());
        let s = ctx.constant(sx.clone());
        let zero = ctx.constant(Tensor::zeros(vec![2, 1]));
        let out = fuse(&mut ctx, t, s, &AttentionScores { matrix: zero, mode: ScoreMode::Cosine }, "f").unwrap();
        assert_eq!(ctx.value(out), &tx);

        let one = ctx.constant(Tensor::filled(vec![2, 1], 1.0));
        let out = fuse(&mut ctx, t, s, &AttentionScores { matrix: one, mode: ScoreMode::Cosine }, "f").unwrap();
        let m = ctx.dense("f.value", s).unwrap();
        for j in 0..2 {
            for d in 0..4 {
                let expected = tx.at(j, d) + ctx.value(m).at(0, d);
                assert!((ctx.value(out).at(j, d) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fuse_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let store = store_with("f", 5, 3, 11, false);
        let (tx, sx, scx) = (random(&mut rng, 2, 3), random(&mut rng, 4, 5), random(&mut rng, 2, 4));
        let mut ctx = Ctx::new(&store);
        let (t, s, sc) = (ctx.constant(tx.clone()), ctx.constant(sx.clone()), ctx.constant(scx.clone()));
        let out = fuse(&mut ctx, t, s, &AttentionScores { matrix: sc, mode: ScoreMode::Learnable }, "f").unwrap();
        let w = store.get("f.value.w").unwrap();
        let b = store.get("f.value.b").unwrap();
        for j in 0..2 {
            for d in 0..3 {
                let mut acc = tx.at(j, d);
                for k in 0..4 {
                    let mut v = b.data()[d];
                    for i in 0..5 {
                        v += sx.at(k, i) * w.at(i, d);
                    }
                    acc += scx.at(j, k) * v;
                }
                assert!((ctx.value(out).at(j, d) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn self_attention_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let store = store_with("s", 4, 4, 13, true);
        let x = random(&mut rng, 1, 4);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.constant(x.clone());
        let (out, _) = self_attention(&mut ctx, xv, ScoreMode::Learnable, "s").unwrap();
        let m = ctx.dense("s.value", xv).unwrap();
        for d in 0..4 {
            assert!((ctx.value(out).at(0, d) - (x.at(0, d) + ctx.value(m).at(0, d))).abs() < 1e-15);
        }
    }

    #[test]
    fn skip_cosine_selects_the_parallel_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let store = store_with("k", 3, 3, 15, false);
        let mut ctx = Ctx::new(&store);
        let p = ctx.constant(Tensor::from_rows(&[[2.0, 0.0, 0.0]]).unwrap());
        let r = ctx.constant(Tensor::from_rows(&[[0.0, 1.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, -3.0]]).unwrap());
        let (out, scores) = skip_attention(&mut ctx, p, r, ScoreMode::Cosine, "k").unwrap();
        assert_eq!(ctx.value(scores.matrix).data(), &[0.0, 1.0, 0.0]);
        let only = ctx.constant(Tensor::from_rows(&[[5.0, 0.0, 0.0]]).unwrap());
        let v = ctx.dense("k.value", only).unwrap();
        for d in 0..3 {
            let expected = ctx.value(p).at(0, d) + ctx.value(v).at(0, d);
            assert!((ctx.value(out).at(0, d) - expected).abs() < 1e-15);
        }
        let _ = &mut rng;
    }

    #[test]
    fn skip_modes_differ_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let store = store_with("k", 5, 4, 17, true);
        let (px, rx) = (random(&mut rng, 3, 4), random(&mut rng, 6, 5));
        let mut ctx = Ctx::new(&store);
        let (p, r) = (ctx.constant(px), ctx.constant(rx));
        let (a, _) = skip_attention(&mut ctx, p, r, ScoreMode::Learnable, "k").unwrap();
        let (c, _) = skip_attention(&mut ctx, p, r, ScoreMode::Cosine, "k").unwrap();
        assert!(ctx.value(a).max_abs_diff(ctx.value(c)) > 1e-3);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut store = store_with("s", 4, 4, 19, true);
        store.insert("x", random(&mut rng, 5, 4));
        store.insert("r", random(&mut rng, 3, 6));
        let mut rs = ChaCha8Rng::seed_from_u64(20);
        init_skip_attention(&mut store, &mut rs, "kc", ScoreMode::Cosine, 4, 6);
        init_skip_attention(&mut store, &mut rs, "kl", ScoreMode::Learnable, 4, 6);
        let w = random(&mut rng, 5, 4);
        let report = check_params(&store, 1e-5, 40, 21, |ctx| {
            let x = ctx.param("x")?;
            let r = ctx.param("r")?;
            let (h, _) = self_attention(ctx, x, ScoreMode::Learnable, "s")?;
            let (h, _) = self_attention(ctx, h, ScoreMode::Cosine, "s")?;
            let (h, _) = skip_attention(ctx, h, r, ScoreMode::Cosine, "kc")?;
            let (h, _) = skip_attention(ctx, h, r, ScoreMode::Learnable, "kl")?;
            let wv = ctx.constant(w.clone());
            let p = ctx.graph.mul(h, wv)?;
            ctx.graph.sum_all(p)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn learnable_rows_are_distributions(j in 1usize..7, k in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let store = store_with("a", 3, 3, seed ^ 7, true);
            let mut ctx = Ctx::new(&store);
            let q = ctx.constant(random(&mut rng, j, 3).map(|v| v * 4.0));
            let kv = ctx.constant(random(&mut rng, k, 3).map(|v| v * 4.0));
            let s = learnable_scores(&mut ctx, q, kv, "a").unwrap();
            let m = ctx.value(s.matrix);
            for r in 0..j {
                prop_assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(m.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn cosine_bounded_with_unit_diagonal(j in 1usize..8, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(random(&mut rng, j, d));
            let s = cosine_scores(&mut g, x, x).unwrap();
            let m = g.value(s.matrix);
            prop_assert!(m.data().iter().all(|&v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&v)));
            for r in 0..j {
                prop_assert!((m.at(r, r) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn self_attention_is_permutation_equivariant(n in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let store = store_with("s", 4, 4, seed ^ 3, true);
            let x = random(&mut rng, n, 4);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut ctx = Ctx::new(&store);
            let xv = ctx.constant(x);
            let xp = ctx.graph.gather(xv, &perm).unwrap();
            let (a, _) = self_attention(&mut ctx, xv, ScoreMode::Learnable, "s").unwrap();
            let (b, _) = self_attention(&mut ctx, xp, ScoreMode::Learnable, "s").unwrap();
            let a_perm = ctx.graph.gather(a, &perm).unwrap();
            prop_assert!(ctx.value(a_perm).max_abs_diff(ctx.value(b)) < 1e-12);
        }
    }
}
