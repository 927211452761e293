//! Reference feature matching, warping and center pasting.

use dzsr_autograd::conv::gemm;
use dzsr_autograd::{Graph, ParamStore, SparseMap, Tensor, Var};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{AdaStn, AdaStnConfig};
use crate::image::{area_downsample, Image};
use crate::nn::{self, lrelu, CallProbe, Conv, Init};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchConfig {
    pub patch_size: usize,
    /// Step between query patches folded back by [`warp_ref_features`].
    pub stride: usize,
    pub feature_channels: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 3,
            stride: 1,
            feature_channels: 16,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 {
            return Err(Error::Config(format!("patch_size must be odd, got {}", self.patch_size)));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "stride must be in 1..={}, got {}",
                self.patch_size, self.stride
            )));
        }
        if self.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Best reference patch per query position.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub height: usize,
    pub width: usize,
    pub ref_height: usize,
    pub ref_width: usize,
    /// Flat `i * ref_width + j` index of the matched patch center.
    pub index_map: Vec<u32>,
    pub score_map: Vec<f32>,
}

impl MatchResult {
    pub fn index(&self, i: usize, j: usize) -> (usize, usize) {
        let k = self.index_map[i * self.width + j] as usize;
        (k / self.ref_width, k % self.ref_width)
    }

    pub fn score(&self, i: usize, j: usize) -> f32 {
        self.score_map[i * self.width + j]
    }

    /// Identity on a reference of the query's size.
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            height: h,
            width: w,
            ref_height: h,
            ref_width: w,
            index_map: (0..(h * w) as u32).collect(),
            score_map: vec![1.0; h * w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.index_map.len() != n || self.score_map.len() != n {
            return dim_err("match maps do not cover the query grid");
        }
        let cap = self.ref_height * self.ref_width;
        if let Some(&bad) = self.index_map.iter().find(|&&k| k as usize >= cap) {
            return dim_err(format!("match index {bad} outside a {cap}-patch reference"));
        }
        Ok(())
    }
}

/// Unit-norm rows of zero-padded `p x p` patches, one per position.
fn unfold_normalized(t: &Tensor, p: usize) -> Vec<f32> {
    let (c, h, w) = t.dims3();
    let half = (p / 2) as isize;
    let d = c * p * p;
    let x = t.data();
    let mut rows = vec![0f32; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let row = &mut rows[(i * w + j) * d..(i * w + j + 1) * d];
            let mut k = 0;
            for ci in 0..c {
                for di in -half..=half {
                    for dj in -half..=half {
                        let (y, xx) = (i as isize + di, j as isize + dj);
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                            row[k] = x[(ci * h + y as usize) * w + xx as usize];
                        }
                        k += 1;
                    }
                }
            }
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                let inv = (1.0 / norm) as f32;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    rows
}

const QUERY_CHUNK: usize = 256;

/// Cosine similarity of every query patch against every reference patch.
///
/// The reference must already be at the query's scale. Ties go to the
/// smallest flat reference index. All-zero patches score 0.
pub fn patch_correlation_match(query: &Tensor, reference: &Tensor, cfg: &MatchConfig) -> Result<MatchResult> {
    if query.shape().len() != 3 || reference.shape().len() != 3 {
        return dim_err("feature maps must be [C, H, W]");
    }
    let (c, h, w) = query.dims3();
    let (rc, rh, rw) = reference.dims3();
    if c != rc {
        return dim_err(format!("query has {c} channels, reference has {rc}"));
    }
    let p = cfg.patch_size;
    if p % 2 == 0 {
        return Err(Error::Config(format!("patch_size must be odd, got {p}")));
    }
    if rh < p || rw < p {
        return dim_err(format!("reference {rh}x{rw} is smaller than one {p}x{p} patch"));
    }
    let d = c * p * p;
    let q = unfold_normalized(query, p);
    let r = unfold_normalized(reference, p);
    let (nq, nr) = (h * w, rh * rw);
    let mut index_map = vec![0u32; nq];
    let mut score_map = vec![0f32; nq];
    let mut scores = vec![0f32; QUERY_CHUNK.min(nq) * nr];
    for start in (0..nq).step_by(QUERY_CHUNK) {
        let m = QUERY_CHUNK.min(nq - start);
        gemm(m, d, nr, &q[start * d..(start + m) * d], false, &r, true, 0.0, &mut scores[..m * nr]);
        for a in 0..m {
            let row = &scores[a * nr..(a + 1) * nr];
            let mut best = 0usize;
            for (k, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = k;
                }
            }
            index_map[start + a] = best as u32;
            score_map[start + a] = row[best].clamp(-1.0, 1.0);
        }
    }
    Ok(MatchResult {
        height: h,
        width: w,
        ref_height: rh,
        ref_width: rw,
        index_map,
        score_map,
    })
}

/// Linear map that folds matched reference patches onto the query grid.
///
/// Query positions on the `stride` lattice each paste their matched
/// `p x p` patch; overlapping contributions are averaged and reads
/// outside the reference are dropped. Uncovered outputs are zero.
pub fn warp_map(m: &MatchResult, channels: usize, cfg: &MatchConfig) -> Result<SparseMap> {
    m.validate()?;
    cfg.validate()?;
    let (h, w, rh, rw) = (m.height, m.width, m.ref_height, m.ref_width);
    let half = (cfg.patch_size / 2) as isize;
    let s = cfg.stride;
    let mut per_pixel: Vec<Vec<u32>> = vec![Vec::new(); h * w];
    for qi in (0..h).step_by(s) {
        for qj in (0..w).step_by(s) {
            let (mi, mj) = m.index(qi, qj);
            for di in -half..=half {
                for dj in -half..=half {
                    let (pi, pj) = (qi as isize + di, qj as isize + dj);
                    let (si, sj) = (mi as isize + di, mj as isize + dj);
                    let inside_out = pi >= 0 && pj >= 0 && (pi as usize) < h && (pj as usize) < w;
                    let inside_ref = si >= 0 && sj >= 0 && (si as usize) < rh && (sj as usize) < rw;
                    if inside_out && inside_ref {
                        per_pixel[pi as usize * w + pj as usize].push((si as usize * rw + sj as usize) as u32);
                    }
                }
            }
        }
    }
    let mut map = SparseMap {
        offsets: Vec::with_capacity(channels * h * w + 1),
        ..Default::default()
    };
    map.offsets.push(0);
    for ch in 0..channels {
        let base = (ch * rh * rw) as u32;
        for srcs in &per_pixel {
            let wgt = 1.0 / srcs.len().max(1) as f32;
            for &k in srcs {
                map.cols.push(base + k);
                map.vals.push(wgt);
            }
            map.offsets.push(map.cols.len());
        }
    }
    Ok(map)
}

pub fn warp_ref_features(reference: &Tensor, m: &MatchResult, cfg: &MatchConfig) -> Result<Tensor> {
    let (c, rh, rw) = reference.dims3();
    if (rh, rw) != (m.ref_height, m.ref_width) {
        return dim_err(format!(
            "reference is {rh}x{rw} but the match indexes a {}x{} grid",
            m.ref_height, m.ref_width
        ));
    }
    let map = warp_map(m, c, cfg)?;
    let x = reference.data();
    let data = (0..map.rows())
        .map(|r| {
            (map.offsets[r]..map.offsets[r + 1])
                .map(|j| map.vals[j] * x[map.cols[j] as usize])
                .sum()
        })
        .collect();
    Ok(Tensor::new(&[c, m.height, m.width], data))
}

/// Graph form of [`warp_ref_features`]; gradients reach the gathered values only.
pub fn warp_ref_graph(g: &mut Graph, reference: Var, m: &MatchResult, cfg: &MatchConfig) -> Result<Var> {
    let (c, rh, rw) = g.value(reference).dims3();
    if (rh, rw) != (m.ref_height, m.ref_width) {
        return dim_err("reference grid does not match the match result");
    }
    let map = warp_map(m, c, cfg)?;
    Ok(g.sparse(reference, &[c, m.height, m.width], map))
}

fn gather_tensor(x: &Tensor, shape: &[usize], idx: &[u32]) -> Tensor {
    let d = x.data();
    Tensor::new(shape, idx.iter().map(|&k| d[k as usize]).collect())
}

/// `[C, H, W] -> [C * r^2, H / r, W / r]`.
pub fn inverse_pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3();
    if r == 0 || h % r != 0 || w % r != 0 {
        return dim_err(format!("{h}x{w} is not divisible by {r}"));
    }
    let idx = nn::inverse_pixel_shuffle_index(c, h, w, r);
    Ok(gather_tensor(x, &[c * r * r, h / r, w / r], &idx))
}

/// `[C * r^2, H, W] -> [C, H * r, W * r]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3();
    if r == 0 || c % (r * r) != 0 {
        return dim_err(format!("{c} channels are not divisible by {}", r * r));
    }
    let idx = nn::pixel_shuffle_index(c / (r * r), h, w, r);
    Ok(gather_tensor(x, &[c / (r * r), h * r, w * r], &idx))
}

/// Top-left corner of the centered `ch x cw` window.
pub fn center_window(h: usize, w: usize, ch: usize, cw: usize) -> (usize, usize) {
    ((h - ch) / 2, (w - cw) / 2)
}

/// Overwrite the centered window of `base` with `center`.
pub fn center_paste(base: &Tensor, center: &Tensor) -> Result<Tensor> {
    let (c, h, w) = base.dims3();
    let (cc, ch, cw) = center.dims3();
    if c != cc {
        return dim_err(format!("base has {c} channels, center has {cc}"));
    }
    if ch > h || cw > w {
        return dim_err(format!("center {ch}x{cw} exceeds base {h}x{w}"));
    }
    let (top, left) = center_window(h, w, ch, cw);
    let mut out = base.clone();
    let od = out.data_mut();
    for k in 0..c {
        for i in 0..ch {
            let dst = (k * h + top + i) * w + left;
            od[dst..dst + cw].copy_from_slice(&center.data()[(k * ch + i) * cw..(k * ch + i + 1) * cw]);
        }
    }
    Ok(out)
}

pub fn center_paste_graph(g: &mut Graph, base: Var, center: Var) -> Var {
    let (_, h, w) = g.value(base).dims3();
    let (_, ch, cw) = g.value(center).dims3();
    let (top, left) = center_window(h, w, ch, cw);
    g.paste(base, center, top, left)
}

/// Three-layer conv extractor used for matching and for the Ref branch.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    convs: [Conv; 3],
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Self {
        Self {
            convs: [
                Conv::same(store, &format!("{name}.0"), 3, channels, 3, Init::He(1.0), rng),
                Conv::same(store, &format!("{name}.1"), channels, channels, 3, Init::He(1.0), rng),
                Conv::same(store, &format!("{name}.2"), channels, channels, 3, Init::He(1.0), rng),
            ],
        }
    }

    pub fn channels(&self, store: &ParamStore) -> usize {
        self.convs[2].out_channels(store)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut f = x;
        for (i, conv) in self.convs.iter().enumerate() {
            f = conv.forward(g, store, f);
            if i < 2 {
                f = lrelu(g, f);
            }
        }
        f
    }

    /// Features as plain values.
    pub fn extract(&self, store: &ParamStore, img: &Image) -> Tensor {
        let mut g = Graph::new();
        let x = g.input(img.to_tensor());
        let mut f = x;
        for (i, conv) in self.convs.iter().enumerate() {
            f = conv.forward_frozen(&mut g, store, f);
            if i < 2 {
                f = lrelu(&mut g, f);
            }
        }
        g.value(f).clone()
    }
}

/// Match, warp, paste and refine Ref features onto the guide's grid.
#[derive(Clone, Debug)]
pub struct RefAligner {
    pub ratio: usize,
    pub cfg: MatchConfig,
    pub extractor: FeatureExtractor,
    pub refine: AdaStn,
    pub match_calls: CallProbe,
}

impl RefAligner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ratio: usize,
        cfg: MatchConfig,
        guide_channels: usize,
        out_channels: usize,
        stn: &AdaStnConfig,
        rng: &mut Rng,
    ) -> Self {
        let ce = cfg.feature_channels;
        let extractor = FeatureExtractor::new(store, &format!("{name}.extract"), ce, rng);
        let refine = AdaStn::new(
            store,
            &format!("{name}.refine"),
            ce * ratio * ratio,
            guide_channels,
            out_channels,
            stn.estimator_channels,
            stn.mode,
            rng,
        );
        Self {
            ratio,
            cfg,
            extractor,
            refine,
            match_calls: CallProbe::default(),
        }
    }

    /// Match the Ref (downscaled to LR scale) against the guide image.
    pub fn correspond(&self, store: &ParamStore, ref_img: &Image, guide_img: &Image) -> Result<MatchResult> {
        self.match_calls.hit();
        let query = self.extractor.extract(store, guide_img);
        let small = area_downsample(ref_img, self.ratio)?;
        let reference = self.extractor.extract(store, &small);
        patch_correlation_match(&query, &reference, &self.cfg)
    }

    /// Aligned Ref features `[C, H, W]` on the guide's grid.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ref_img: &Image,
        guide_img: &Image,
        guide_feat: Var,
        force_zero: bool,
    ) -> Result<Var> {
        let (h, w) = guide_img.dims();
        if ref_img.dims() != (h, w) {
            return Err(Error::Input(format!(
                "Ref is {:?} but the guide is {h}x{w}",
                ref_img.dims()
            )));
        }
        if h % (self.ratio * self.ratio) != 0 || w % (self.ratio * self.ratio) != 0 {
            return dim_err(format!("{h}x{w} is not divisible by {}", self.ratio * self.ratio));
        }
        let m = self.correspond(store, ref_img, guide_img)?;
        let x = g.input(ref_img.to_tensor());
        let f = self.extractor.forward(g, store, x);
        let packed = nn::inverse_pixel_shuffle(g, f, self.ratio);
        let warped = warp_ref_graph(g, packed, &m, &self.cfg)?;
        let pasted = center_paste_graph(g, warped, packed);
        Ok(self.refine.forward(g, store, pasted, guide_feat, force_zero))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn feat(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = crate::rng::rng(seed);
        Tensor::from_fn(&[c, h, w], |_| r.random_range(-1.0f32..1.0))
    }

    /// All-pairs cosine in f64, written from the definition.
    fn brute_force(q: &Tensor, r: &Tensor, p: usize) -> (Vec<u32>, Vec<f64>) {
        let (c, h, w) = q.dims3();
        let (_, rh, rw) = r.dims3();
        let half = p as isize / 2;
        let at = |t: &Tensor, ch: usize, hh: usize, ww: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= hh as isize || j >= ww as isize {
                0.0
            } else {
                t.data()[(ch * hh + i as usize) * ww + j as usize] as f64
            }
        };
        let mut idx = Vec::new();
        let mut best_scores = Vec::new();
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut best = (0u32, f64::NEG_INFINITY);
                for a in 0..rh as isize {
                    for b in 0..rw as isize {
                        let (mut dot, mut nq, mut nr) = (0.0, 0.0, 0.0);
                        for ch in 0..c {
                            for di in -half..=half {
                                for dj in -half..=half {
                                    let u = at(q, ch, h, w, i + di, j + dj);
                                    let v = at(r, ch, rh, rw, a + di, b + dj);
                                    dot += u * v;
                                    nq += u * u;
                                    nr += v * v;
                                }
                            }
                        }
                        let s = if nq > 0.0 && nr > 0.0 { dot / (nq.sqrt() * nr.sqrt()) } else { 0.0 };
                        if s > best.1 {
                            best = ((a * rw as isize + b) as u32, s);
                        }
                    }
                }
                idx.push(best.0);
                best_scores.push(best.1);
            }
        }
        (idx, best_scores)
    }

    #[test]
    fn self_match_is_identity_with_unit_scores() {
        let q = feat(4, 12, 12, 1);
        let m = patch_correlation_match(&q, &q, &MatchConfig::default()).unwrap();
        assert_eq!(m.index_map, MatchResult::identity(12, 12).index_map);
        assert!(m.score_map.iter().all(|&s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn circular_shift_matches_brute_force() {
        let q = feat(4, 16, 16, 2);
        let r = Tensor::from_fn(&[4, 16, 16], |k| {
            let (c, i, j) = (k / 256, (k / 16) % 16, k % 16);
            q.data()[(c * 16 + i) * 16 + (j + 14) % 16]
        });
        let m = patch_correlation_match(&q, &r, &MatchConfig::default()).unwrap();
        let (oracle, _) = brute_force(&q, &r, 3);
        assert_eq!(m.index_map, oracle);
        for i in 1..15 {
            for j in 1..13 {
                assert_eq!(m.index(i, j), (i, j + 2));
            }
        }
    }

    #[test]
    fn orthogonal_patterns_score_nonpositive() {
        let q = Tensor::from_fn(&[4, 8, 8], |k| if k / 64 < 2 { 1.0 } else { 0.0 });
        let r = Tensor::from_fn(&[4, 8, 8], |k| if k / 64 >= 2 { ((k % 7) as f32) + 1.0 } else { 0.0 });
        let m = patch_correlation_match(&q, &r, &MatchConfig::default()).unwrap();
        assert!(m.score_map.iter().all(|&s| s <= 1e-6));
    }

    #[test]
    fn ties_go_to_the_smallest_index() {
        let q = feat(2, 8, 8, 3);
        let r = Tensor::full(&[2, 8, 8], 0.5);
        let m = patch_correlation_match(&q, &r, &MatchConfig::default()).unwrap();
        let (oracle, _) = brute_force(&q, &r, 3);
        assert_eq!(m.index_map, oracle);
        // interior patches of a constant map are identical; the first is (1, 1)
        let zero_q = Tensor::full(&[2, 8, 8], 1.0);
        let m = patch_correlation_match(&zero_q, &r, &MatchConfig::default()).unwrap();
        assert_eq!(m.index(4, 4), (1, 1));
    }

    #[test]
    fn tiny_reference_is_rejected() {
        let q = feat(2, 8, 8, 4);
        let r = feat(2, 2, 8, 5);
        assert!(matches!(
            patch_correlation_match(&q, &r, &MatchConfig::default()),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            patch_correlation_match(&q, &feat(3, 8, 8, 6), &MatchConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn identity_warp_reproduces_reference() {
        let r = feat(3, 10, 10, 7);
        let out = warp_ref_features(&r, &MatchResult::identity(10, 10), &MatchConfig::default()).unwrap();
        assert!(out.max_abs_diff(&r) < 1e-5);
    }

    #[test]
    fn constant_reference_stays_constant() {
        let r = Tensor::full(&[2, 8, 8], 0.25);
        let q = feat(2, 12, 12, 8);
        let m = patch_correlation_match(&q, &r, &MatchConfig::default()).unwrap();
        let out = warp_ref_features(&r, &m, &MatchConfig::default()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert_eq!(out.shape(), &[2, 12, 12]);
    }

    #[test]
    fn permutation_gather_is_exact() {
        let r = Tensor::from_fn(&[1, 4, 4], |k| k as f32 * 1.5 + 0.25);
        let perm: Vec<u32> = vec![5, 0, 15, 3, 9, 12, 1, 7, 2, 14, 4, 10, 6, 13, 11, 8];
        let m = MatchResult {
            height: 4,
            width: 4,
            ref_height: 4,
            ref_width: 4,
            index_map: perm.clone(),
            score_map: vec![0.0; 16],
        };
        let cfg = MatchConfig {
            patch_size: 1,
            stride: 1,
            feature_channels: 1,
        };
        let out = warp_ref_features(&r, &m, &cfg).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(out.data()[k], r.data()[src as usize]);
        }
    }

    #[test]
    fn tiled_patches_copy_shifted_blocks() {
        // 3x3 tiles at stride 3 do not overlap
        let r = Tensor::from_fn(&[1, 6, 6], |k| k as f32);
        let mut index_map = vec![0u32; 36];
        for i in 0..6 {
            for j in 0..6 {
                index_map[i * 6 + j] = (i * 6 + (j + 1).min(4)) as u32;
            }
        }
        let m = MatchResult {
            height: 6,
            width: 6,
            ref_height: 6,
            ref_width: 6,
            index_map,
            score_map: vec![0.0; 36],
        };
        let cfg = MatchConfig {
            patch_size: 3,
            stride: 3,
            feature_channels: 1,
        };
        let out = warp_ref_features(&r, &m, &cfg).unwrap();
        // tile centered at (1, 1) reads the patch centered at (1, 2)
        assert_eq!(out.data()[0], r.data()[1]);
        assert_eq!(out.data()[2 * 6 + 2], r.data()[2 * 6 + 3]);
    }

    #[test]
    fn pixel_shuffle_round_trip_and_index_formula() {
        let x = feat(8, 16, 16, 9);
        let y = inverse_pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[32, 8, 8]);
        assert_eq!(pixel_shuffle(&y, 2).unwrap().data(), x.data());
        let ramp = Tensor::from_fn(&[1, 4, 4], |k| k as f32);
        let y = inverse_pixel_shuffle(&ramp, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let co = (i % 2) * 2 + j % 2;
                assert_eq!(y.data()[(co * 2 + i / 2) * 2 + j / 2], (i * 4 + j) as f32);
            }
        }
        assert!(matches!(inverse_pixel_shuffle(&feat(1, 5, 4, 0), 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn center_paste_contracts() {
        let base = feat(2, 8, 8, 10);
        let crop = Tensor::from_fn(&[2, 4, 4], |k| {
            let (c, i, j) = (k / 16, (k / 4) % 4, k % 4);
            base.data()[(c * 8 + i + 2) * 8 + j + 2]
        });
        assert_eq!(center_paste(&base, &crop).unwrap().data(), base.data());
        let out = center_paste(&Tensor::zeros(&[1, 8, 8]), &Tensor::full(&[1, 4, 4], 1.0)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let inside = (2..6).contains(&i) && (2..6).contains(&j);
                assert_eq!(out.data()[i * 8 + j], if inside { 1.0 } else { 0.0 });
            }
        }
        assert!(matches!(center_paste(&base, &feat(3, 4, 4, 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn extractor_is_deterministic_with_configured_width() {
        let mut store = ParamStore::new();
        let e = FeatureExtractor::new(&mut store, "e", 16, &mut crate::rng::rng(0));
        let img = crate::data::synthesize_scene(1, 32, 32).unwrap();
        let a = e.extract(&store, &img);
        assert_eq!(a.shape(), &[16, 32, 32]);
        assert_eq!(a.data(), e.extract(&store, &img).data());
    }

    #[test]
    fn aligner_output_follows_guide_grid_and_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::rng(1);
        let al = RefAligner::new(
            &mut store,
            "ref",
            2,
            MatchConfig::default(),
            8,
            8,
            &AdaStnConfig::default(),
            &mut rng,
        );
        let guide = crate::data::synthesize_scene(2, 32, 32).unwrap();
        let reference = crate::data::synthesize_scene(3, 32, 32).unwrap();
        let run = || {
            let mut g = Graph::new();
            let gf = g.input(feat(8, 32, 32, 11));
            let out = al.forward(&mut g, &store, &reference, &guide, gf, true).unwrap();
            g.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[8, 32, 32]);
        assert_eq!(a.data(), run().data());
        assert_eq!(al.refine.estimator_calls.count(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matcher_agrees_with_brute_force(seed in 0u64..10_000, h in 3usize..10, w in 3usize..10, rh in 3usize..8, rw in 3usize..8) {
            let q = feat(3, h, w, seed);
            let r = feat(3, rh, rw, seed ^ 0xABCD);
            let m = patch_correlation_match(&q, &r, &MatchConfig::default()).unwrap();
            let (oracle, scores) = brute_force(&q, &r, 3);
            prop_assert_eq!(&m.index_map, &oracle);
            for (a, b) in m.score_map.iter().zip(&scores) {
                prop_assert!((*a as f64 - b).abs() < 1e-5);
            }
        }

        #[test]
        fn warp_never_reads_out_of_bounds(seed in 0u64..10_000, h in 1usize..9, w in 1usize..9, rh in 1usize..9, rw in 1usize..9, p in 0usize..3) {
            let p = 2 * p + 1;
            let mut rng = crate::rng::rng(seed);
            let m = MatchResult {
                height: h,
                width: w,
                ref_height: rh,
                ref_width: rw,
                index_map: (0..h * w).map(|_| rng.random_range(0..(rh * rw) as u32)).collect(),
                score_map: vec![0.0; h * w],
            };
            let cfg = MatchConfig { patch_size: p, stride: rng.random_range(1..=p), feature_channels: 2 };
            let map = warp_map(&m, 2, &cfg).unwrap();
            prop_assert!(map.cols.iter().all(|&c| (c as usize) < 2 * rh * rw));
            let out = warp_ref_features(&feat(2, rh, rw, seed), &m, &cfg).unwrap();
            prop_assert!(out.is_finite());
        }

        #[test]
        fn inverse_pixel_shuffle_is_a_bijection(seed in 0u64..10_000, c in 1usize..4, h in 1usize..5, w in 1usize..5, r in 1usize..4) {
            let x = feat(c, h * r, w * r, seed);
            let y = inverse_pixel_shuffle(&x, r).unwrap();
            let mut a: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
