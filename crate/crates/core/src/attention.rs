//! Masked multi-head self-attention.
//!
//! The dense path follows the masked formulation exactly: scores
//! `Q Kᵀ / √d_l`, a full-row softmax `α`, then `α̃ = mask ⊙ α` with the kept
//! coefficients left as they are. [`banded_attention`] is the separate
//! efficient path that only ever touches `|i - j| <= k`, which means the
//! softmax is renormalized inside the band.

use std::sync::Arc;

use crate::config::{MaskMode, ModelConfig};
use crate::encoder::QkPair;
use crate::error::{Error, Result};
use crate::mask::{make_mask, Mask, MaskKind};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Borrowed projections of one head. `w_q`/`w_k` may be shared with other heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams<'a, T> {
    pub w_q: &'a Matrix<T>,
    pub w_k: &'a Matrix<T>,
    pub w_v: &'a Matrix<T>,
}

impl<T: Scalar> HeadParams<'_, T> {
    fn check(&self, x: &Matrix<T>, d_l: usize) -> Result<()> {
        for w in [self.w_q, self.w_k, self.w_v] {
            if w.shape() != (x.cols(), d_l) {
                return Err(Error::shape("head projection", x.shape(), w.shape()));
            }
        }
        Ok(())
    }
}

/// Attention maps captured for one head during a forward pass.
///
/// Tied heads in the same layer share the `alpha` allocation.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub layer: usize,
    pub head: usize,
    pub mask: Option<MaskKind>,
    /// Raw full-row softmax.
    pub alpha: Arc<Matrix<T>>,
    /// Coefficients the head actually used.
    pub alpha_tilde: Arc<Matrix<T>>,
}

/// `Q Kᵀ / √d_l` for `Q = X W_q`, `K = X W_k`.
pub fn attention_scores<T: Scalar>(x: &Matrix<T>, w_q: &Matrix<T>, w_k: &Matrix<T>, d_l: usize) -> Result<Matrix<T>> {
    let q = x.matmul(w_q)?;
    let k = x.matmul(w_k)?;
    Ok(q.matmul(&k.transpose())?.scale(T::one() / T::of(d_l as f64).sqrt()))
}

/// Applies `mask` to a raw softmax (or computes the support-restricted
/// softmax from `scores`, depending on `mode`).
fn effective_alpha<T: Scalar>(
    scores: &Matrix<T>,
    alpha: &Arc<Matrix<T>>,
    mask: Option<&Mask>,
    mode: MaskMode,
) -> Result<Arc<Matrix<T>>> {
    let Some(mask) = mask else {
        return Ok(Arc::clone(alpha));
    };
    if mask.size() != scores.rows() {
        return Err(Error::shape("mask", (mask.size(), mask.size()), scores.shape()));
    }
    Ok(Arc::new(match mode {
        MaskMode::PostSoftmax => mask.apply(alpha)?,
        MaskMode::Renormalized => scores.softmax_rows_where(|i, j| mask.get(i, j)),
    }))
}

/// Single masked head in the post-softmax (non-renormalized) mode.
///
/// Returns the `T×d_l` context `α̃ · X W_v` and the head's record (layer and
/// head indices are 0; [`multi_head_forward`] fills them in).
pub fn head_attention<T: Scalar>(
    x: &Matrix<T>,
    p: HeadParams<'_, T>,
    mask: Option<&Mask>,
    d_l: usize,
) -> Result<(Matrix<T>, AttentionRecord<T>)> {
    head_attention_with_mode(x, p, mask, d_l, MaskMode::PostSoftmax)
}

pub fn head_attention_with_mode<T: Scalar>(
    x: &Matrix<T>,
    p: HeadParams<'_, T>,
    mask: Option<&Mask>,
    d_l: usize,
    mode: MaskMode,
) -> Result<(Matrix<T>, AttentionRecord<T>)> {
    p.check(x, d_l)?;
    let scores = attention_scores(x, p.w_q, p.w_k, d_l)?;
    let alpha = Arc::new(scores.softmax_rows());
    let alpha_tilde = effective_alpha(&scores, &alpha, mask, mode)?;
    let context = alpha_tilde.matmul(&x.matmul(p.w_v)?)?;
    let record = AttentionRecord { layer: 0, head: 0, mask: mask.map(Mask::kind), alpha, alpha_tilde };
    Ok((context, record))
}

/// Band-limited coefficients stored as `size × (2k + 1)`; column `k + (j - i)`
/// holds `(i, j)` and out-of-range slots are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BandedMatrix<T> {
    size: usize,
    k: usize,
    data: Vec<T>,
}

impl<T: Scalar> BandedMatrix<T> {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn width(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if i.abs_diff(j) > self.k {
            return T::zero();
        }
        self.data[i * (2 * self.k + 1) + self.k + j - i]
    }

    pub fn row_sum(&self, i: usize) -> T {
        let w = 2 * self.k + 1;
        self.data[i * w..(i + 1) * w].iter().copied().sum()
    }

    pub fn to_dense(&self) -> Matrix<T> {
        Matrix::from_fn(self.size, self.size, |i, j| self.get(i, j))
    }
}

/// Band-limited attention: scores, softmax and context only for `|i - j| <= k`.
///
/// `O(T·k·d_l)` beyond the projections. The softmax is over the band, so each
/// row of the returned coefficients sums to one.
pub fn banded_attention<T: Scalar>(
    x: &Matrix<T>,
    p: HeadParams<'_, T>,
    k: usize,
    d_l: usize,
) -> Result<(Matrix<T>, BandedMatrix<T>)> {
    if k == 0 {
        return Err(Error::Contract("band width must be at least 1".into()));
    }
    p.check(x, d_l)?;
    let t = x.rows();
    let q = x.matmul(p.w_q)?;
    let key = x.matmul(p.w_k)?;
    let v = x.matmul(p.w_v)?;
    let inv = T::one() / T::of(d_l as f64).sqrt();
    let w = 2 * k + 1;
    let mut band = vec![T::zero(); t * w];
    let mut context = Matrix::zeros(t, d_l);
    for i in 0..t {
        let lo = i.saturating_sub(k);
        let hi = (i + k).min(t - 1);
        let slots = &mut band[i * w..(i + 1) * w];
        let qi = q.row(i);
        let mut max = T::neg_infinity();
        for j in lo..=hi {
            let s = qi.iter().zip(key.row(j)).map(|(&a, &b)| a * b).sum::<T>() * inv;
            slots[k + j - i] = s;
            max = max.max(s);
        }
        let mut total = T::zero();
        for j in lo..=hi {
            let slot = &mut slots[k + j - i];
            *slot = (*slot - max).exp();
            total += *slot;
        }
        let out = context.row_mut(i);
        for j in lo..=hi {
            let slot = &mut slots[k + j - i];
            *slot /= total;
            let a = *slot;
            for (o, &vv) in out.iter_mut().zip(v.row(j)) {
                *o += a * vv;
            }
        }
    }
    Ok((context, BandedMatrix { size: t, k, data: band }))
}

/// One layer's attention parameters, resolved against the shared `W_q`/`W_k` pool.
#[derive(Clone, Copy, Debug)]
pub struct LayerAttention<'a, T> {
    pub layer: usize,
    pub pool: &'a [QkPair<Matrix<T>>],
    /// Pool entry for each head.
    pub head_pool: &'a [usize],
    pub w_v: &'a [Matrix<T>],
    pub w_o: &'a Matrix<T>,
    pub masks: &'a [Option<MaskKind>],
    pub d_l: usize,
    pub mode: MaskMode,
}

/// `Y = Concat(head_1, …, head_H) W_o`, recording every head's maps.
///
/// Heads resolving to the same pool entry reuse one `α` computation.
pub fn multi_head_forward<T: Scalar>(
    x: &Matrix<T>,
    lp: &LayerAttention<'_, T>,
) -> Result<(Matrix<T>, Vec<AttentionRecord<T>>)> {
    let heads = lp.head_pool.len();
    if lp.w_v.len() != heads || lp.masks.len() != heads {
        return Err(Error::Contract(format!(
            "layer {}: {} pool refs, {} value maps, {} masks",
            lp.layer,
            heads,
            lp.w_v.len(),
            lp.masks.len()
        )));
    }
    if lp.w_o.shape() != (lp.d_l * heads, x.cols()) {
        return Err(Error::shape("W_o", (lp.d_l * heads, x.cols()), lp.w_o.shape()));
    }
    let t = x.rows();
    // (scores, alpha) per pool entry, computed once
    type Shared<T> = Option<(Matrix<T>, Arc<Matrix<T>>)>;
    let mut shared: Vec<Shared<T>> = vec![None; lp.pool.len()];
    let mut contexts = Vec::with_capacity(heads);
    let mut records = Vec::with_capacity(heads);
    for h in 0..heads {
        let pool_idx = lp.head_pool[h];
        let qk = lp.pool.get(pool_idx).ok_or_else(|| {
            Error::Contract(format!("layer {} head {h} refers to missing pool entry {pool_idx}", lp.layer))
        })?;
        let params = HeadParams { w_q: &qk.w_q, w_k: &qk.w_k, w_v: &lp.w_v[h] };
        params.check(x, lp.d_l)?;
        if shared[pool_idx].is_none() {
            let scores = attention_scores(x, &qk.w_q, &qk.w_k, lp.d_l)?;
            let alpha = Arc::new(scores.softmax_rows());
            shared[pool_idx] = Some((scores, alpha));
        }
        let (scores, alpha) = shared[pool_idx].as_ref().expect("filled above");
        let mask = lp.masks[h].map(|kind| make_mask(kind, t)).transpose()?;
        let alpha_tilde = effective_alpha(scores, alpha, mask.as_ref(), lp.mode)?;
        contexts.push(alpha_tilde.matmul(&x.matmul(&lp.w_v[h])?)?);
        records.push(AttentionRecord {
            layer: lp.layer,
            head: h,
            mask: lp.masks[h],
            alpha: Arc::clone(alpha),
            alpha_tilde,
        });
    }
    let refs: Vec<&Matrix<T>> = contexts.iter().collect();
    let y = Matrix::concat_cols(&refs)?.matmul(lp.w_o)?;
    Ok((y, records))
}

/// Attention parameter count: `W_q`/`W_k` once per tie group, `W_v` once per
/// head and `W_o` once per layer.
pub fn count_attention_params(cfg: &ModelConfig) -> u64 {
    let proj = (cfg.d_v * cfg.d_l) as u64;
    let qk = 2 * proj * cfg.tie_groups.len() as u64;
    let v = proj * cfg.total_heads() as u64;
    let o = (cfg.n_layers * cfg.heads * cfg.d_l * cfg.d_v) as u64;
    qk + v + o
}

/// Millions, truncated (not rounded) to two decimals: 3,538,944 → `"3.53M"`.
pub fn millions_truncated(count: u64) -> String {
    let hundredths = count / 10_000;
    format!("{}.{:02}M", hundredths / 100, hundredths % 100)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::resolve_preset;
    use crate::tensor::{seeded_uniform_init, Rng};

    fn rand(r: usize, c: usize, rng: &mut Rng) -> Matrix<f64> {
        seeded_uniform_init(r, c, 1.0, rng)
    }

    struct Fixture {
        x: Matrix<f64>,
        w_q: Matrix<f64>,
        w_k: Matrix<f64>,
        w_v: Matrix<f64>,
    }

    impl Fixture {
        fn new(t: usize, d_v: usize, d_l: usize, seed: u64) -> Self {
            let mut rng = Rng::new(seed);
            Fixture {
                x: rand(t, d_v, &mut rng),
                w_q: rand(d_v, d_l, &mut rng),
                w_k: rand(d_v, d_l, &mut rng),
                w_v: rand(d_v, d_l, &mut rng),
            }
        }

        fn params(&self) -> HeadParams<'_, f64> {
            HeadParams { w_q: &self.w_q, w_k: &self.w_k, w_v: &self.w_v }
        }
    }

    /// Straight-line scores → softmax → mask, written without the matrix helpers.
    fn oracle_alpha_tilde(f: &Fixture, d_l: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
        let t = f.x.rows();
        let d_v = f.x.cols();
        let project = |w: &Matrix<f64>| -> Vec<Vec<f64>> {
            (0..t)
                .map(|i| (0..d_l).map(|c| (0..d_v).map(|r| f.x.get(i, r) * w.get(r, c)).sum()).collect())
                .collect()
        };
        let q = project(&f.w_q);
        let k = project(&f.w_k);
        (0..t)
            .map(|i| {
                let s: Vec<f64> =
                    (0..t).map(|j| (0..d_l).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d_l as f64).sqrt()).collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                (0..t).map(|j| if keep(i, j) { (s[j] - m).exp() / z } else { 0.0 }).collect()
            })
            .collect()
    }

    #[test]
    fn all_ones_mask_matches_unmasked() {
        let f = Fixture::new(5, 6, 3, 1);
        let ones = make_mask(MaskKind::Band(10), 5).unwrap();
        let (plain, _) = head_attention(&f.x, f.params(), None, 3).unwrap();
        let (masked, _) = head_attention(&f.x, f.params(), Some(&ones), 3).unwrap();
        assert!(plain.max_abs_diff(&masked) <= 1e-15);
    }

    #[test]
    fn zero_mask_row_gives_zero_context() {
        let f = Fixture::new(3, 4, 2, 2);
        let prev = make_mask(MaskKind::Prev(1), 3).unwrap();
        let (ctx, rec) = head_attention(&f.x, f.params(), Some(&prev), 2).unwrap();
        assert!(ctx.row(0).iter().all(|&v| v == 0.0));
        assert!(rec.alpha_tilde.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_scores_give_uniform_attention() {
        let mut f = Fixture::new(3, 4, 2, 3);
        f.w_q = Matrix::zeros(4, 2);
        f.w_k = Matrix::zeros(4, 2);
        let band = make_mask(MaskKind::Band(1), 3).unwrap();
        let (_, rec) = head_attention(&f.x, f.params(), Some(&band), 2).unwrap();
        let third = 1.0 / 3.0;
        assert!(rec.alpha.data().iter().all(|&v| (v - third).abs() < 1e-15));
        assert_eq!(rec.alpha_tilde.row(1), &[third, third, third]);
        assert_eq!(rec.alpha_tilde.row(0), &[third, third, 0.0]);
    }

    #[test]
    fn alpha_tilde_matches_independent_oracle() {
        for (seed, kind) in [(4, MaskKind::Band(2)), (5, MaskKind::Prev(1)), (6, MaskKind::Next(2))] {
            let f = Fixture::new(7, 5, 4, seed);
            let mask = make_mask(kind, 7).unwrap();
            let (_, rec) = head_attention(&f.x, f.params(), Some(&mask), 4).unwrap();
            let expect = oracle_alpha_tilde(&f, 4, |i, j| kind.allows(i, j));
            for i in 0..7 {
                for j in 0..7 {
                    assert!((rec.alpha_tilde.get(i, j) - expect[i][j]).abs() <= 1e-12);
                }
                assert!((rec.alpha.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            // exact elementwise product with the 0/1 mask
            assert_eq!(*rec.alpha_tilde, mask.apply(&rec.alpha).unwrap());
        }
    }

    #[test]
    fn shape_errors() {
        let f = Fixture::new(4, 5, 3, 7);
        assert!(head_attention(&f.x, f.params(), None, 2).is_err());
        let wrong = make_mask(MaskKind::Band(1), 3).unwrap();
        assert!(head_attention(&f.x, f.params(), Some(&wrong), 3).is_err());
        assert!(banded_attention(&f.x, f.params(), 0, 3).is_err());
    }

    fn renormalized_dense(f: &Fixture, k: usize, d_l: usize) -> (Matrix<f64>, Matrix<f64>) {
        let t = f.x.rows();
        let mask = make_mask(MaskKind::Band(k), t).unwrap();
        let (_, rec) = head_attention(&f.x, f.params(), Some(&mask), d_l).unwrap();
        let mut a = (*rec.alpha_tilde).clone();
        for i in 0..t {
            let s: f64 = a.row(i).iter().sum();
            if s > 0.0 {
                a.row_mut(i).iter_mut().for_each(|v| *v /= s);
            }
        }
        let ctx = a.matmul(&f.x.matmul(&f.w_v).unwrap()).unwrap();
        (ctx, a)
    }

    #[test]
    fn banded_equals_renormalized_dense() {
        for (t, k, seed) in [(9, 1, 10), (16, 2, 11), (20, 6, 12), (3, 1, 13)] {
            let f = Fixture::new(t, 6, 4, seed);
            let (ctx, band) = banded_attention(&f.x, f.params(), k, 4).unwrap();
            let (ref_ctx, ref_alpha) = renormalized_dense(&f, k, 4);
            assert!(ctx.max_abs_diff(&ref_ctx) <= 1e-12);
            assert!(band.to_dense().max_abs_diff(&ref_alpha) <= 1e-12);
            for i in 0..t {
                assert!((band.row_sum(i) - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn full_band_equals_unmasked() {
        let f = Fixture::new(6, 5, 3, 14);
        let (ctx, _) = banded_attention(&f.x, f.params(), 5, 3).unwrap();
        let (plain, _) = head_attention(&f.x, f.params(), None, 3).unwrap();
        assert!(ctx.max_abs_diff(&plain) <= 1e-12);
    }

    #[test]
    fn renormalized_mode_matches_banded() {
        let f = Fixture::new(10, 6, 4, 15);
        let mask = make_mask(MaskKind::Band(2), 10).unwrap();
        let (ctx, _) = head_attention_with_mode(&f.x, f.params(), Some(&mask), 4, MaskMode::Renormalized).unwrap();
        let (band, _) = banded_attention(&f.x, f.params(), 2, 4).unwrap();
        assert!(ctx.max_abs_diff(&band) <= 1e-12);
    }

    /// Masked-out tokens still enter each row's softmax normalizer in the
    /// post-softmax mode, so perturbing them moves the context a little;
    /// the renormalized mode is immune.
    #[test]
    fn out_of_support_perturbation() {
        let f = Fixture::new(8, 5, 3, 16);
        let mask = make_mask(MaskKind::Band(1), 8).unwrap();
        let mut bumped = f.x.clone();
        bumped.row_mut(6).iter_mut().for_each(|v| *v += 0.7);
        let g = Fixture { x: bumped, w_q: f.w_q.clone(), w_k: f.w_k.clone(), w_v: f.w_v.clone() };

        let run = |fx: &Fixture, mode| head_attention_with_mode(&fx.x, fx.params(), Some(&mask), 3, mode).unwrap().0;
        let (a, b) = (run(&f, MaskMode::Renormalized), run(&g, MaskMode::Renormalized));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(2), b.row(2));

        let (a, b) = (run(&f, MaskMode::PostSoftmax), run(&g, MaskMode::PostSoftmax));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn tied_heads_share_alpha() {
        let cfg = resolve_preset("2LocHeads_6TiedLoc_All6").unwrap();
        let pools = cfg.head_pools();
        let mut rng = Rng::new(20);
        let (d_v, d_l, t) = (6, 2, 5);
        let pool: Vec<QkPair<Matrix<f64>>> =
            (0..cfg.tie_groups.len()).map(|_| QkPair { w_q: rand(d_v, d_l, &mut rng), w_k: rand(d_v, d_l, &mut rng) }).collect();
        let w_v: Vec<Matrix<f64>> = (0..8).map(|_| rand(d_v, d_l, &mut rng)).collect();
        let w_o = rand(8 * d_l, d_v, &mut rng);
        let x = rand(t, d_v, &mut rng);
        let lp = LayerAttention {
            layer: 0,
            pool: &pool,
            head_pool: &pools[0],
            w_v: &w_v,
            w_o: &w_o,
            masks: &cfg.masks[0],
            d_l,
            mode: MaskMode::PostSoftmax,
        };
        let (_, records) = multi_head_forward(&x, &lp).unwrap();
        for h in 1..4 {
            assert!(Arc::ptr_eq(&records[0].alpha, &records[h].alpha));
        }
        for h in 5..8 {
            assert!(Arc::ptr_eq(&records[4].alpha, &records[h].alpha));
        }
        assert!(!Arc::ptr_eq(&records[0].alpha, &records[4].alpha));
    }

    #[test]
    fn tied_heads_with_same_mask_are_bit_identical() {
        let mut rng = Rng::new(21);
        let (d_v, d_l) = (4, 2);
        let pool = vec![QkPair { w_q: rand(d_v, d_l, &mut rng), w_k: rand(d_v, d_l, &mut rng) }];
        let w_v = vec![rand(d_v, d_l, &mut rng), rand(d_v, d_l, &mut rng)];
        let w_o = rand(2 * d_l, d_v, &mut rng);
        let masks = [Some(MaskKind::Band(1)); 2];
        let x = rand(6, d_v, &mut rng);
        let lp = LayerAttention {
            layer: 3,
            pool: &pool,
            head_pool: &[0, 0],
            w_v: &w_v,
            w_o: &w_o,
            masks: &masks,
            d_l,
            mode: MaskMode::PostSoftmax,
        };
        let (_, rec) = multi_head_forward(&x, &lp).unwrap();
        assert_eq!(rec[0].alpha_tilde.data(), rec[1].alpha_tilde.data());
        assert_eq!(rec[1].layer, 3);
    }

    #[test]
    fn single_head_with_identity_output_projection() {
        let mut rng = Rng::new(22);
        let d = 3;
        let pool = vec![QkPair { w_q: rand(d, d, &mut rng), w_k: rand(d, d, &mut rng) }];
        let w_v = vec![rand(d, d, &mut rng)];
        let w_o = Matrix::identity(d);
        let x = rand(4, d, &mut rng);
        let masks = [None];
        let lp = LayerAttention {
            layer: 0,
            pool: &pool,
            head_pool: &[0],
            w_v: &w_v,
            w_o: &w_o,
            masks: &masks,
            d_l: d,
            mode: MaskMode::PostSoftmax,
        };
        let (y, _) = multi_head_forward(&x, &lp).unwrap();
        let (ctx, _) = head_attention(&x, HeadParams { w_q: &pool[0].w_q, w_k: &pool[0].w_k, w_v: &w_v[0] }, None, d)
            .unwrap();
        assert!(y.max_abs_diff(&ctx) <= 1e-15);
    }

    #[test]
    fn parameter_counts_match_tables() {
        let expect = [
            ("baseline", 6_291_456u64, "6.29M"),
            ("4LocHeads_4TiedLoc_All6", 4_718_592, "4.71M"),
            ("2LocHeads_6TiedLoc_All6", 3_932_160, "3.93M"),
            ("1LocHead_7TiedLoc_All6", 3_538_944, "3.53M"),
            ("1LocHead_7TiedLoc_First3", 4_915_200, "4.91M"),
            ("half_tied", 4_784_128, "4.78M"),
            ("fully_tied", 3_211_264, "3.21M"),
        ];
        for (name, count, printed) in expect {
            let n = count_attention_params(&resolve_preset(name).unwrap());
            assert_eq!(n, count, "{name}");
            assert_eq!(millions_truncated(n), printed, "{name}");
        }
        // formula cross-check for the fully tied case
        assert_eq!(6_291_456 - 47 * 2 * 512 * 64, 3_211_264);
        // masks alone never change the count
        assert_eq!(count_attention_params(&resolve_preset("8LocHeads_All6").unwrap()), 6_291_456);
    }
}
