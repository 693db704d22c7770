//! Where in an image does a text query land?
//!
//! The pooling head already knows: pooled over all patch tokens it yields
//! the image embedding, pooled over a single token it scores that patch
//! alone. This module runs the same head over sliding w×w windows of the
//! patch grid, projects and normalizes each pooled vector, takes its
//! cosine against a text embedding, and scatter-averages the window
//! scores back onto the patches they cover. Small windows resolve fine
//! detail; large ones blur toward the global image similarity. The two
//! extremes are exact: w=1, s=1 reproduces per-patch similarity bitwise,
//! and a single full-grid window reproduces the image–text cosine.
//!
//! Windows step by `stride` from the top-left corner. The scan stops with
//! the first window that reaches the grid's edge; when the stride
//! overshoots, that last window is clipped to the grid and pools fewer
//! tokens rather than fabricating padding. Overlapping windows combine by
//! averaging (scatter-add, then divide by the per-cell coverage count),
//! which is symmetric and independent of scan order.
//!
//! Maps export as raw-float CSV or min–max normalized 8-bit PGM for
//! eyeballing; [`map_statistics`] supplies the exact order statistics the
//! adaptive pseudo-label thresholds are built on.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::forward::{attention_pool_on_tape, ParamVars};
use crate::model::params::ModelParams;
use crate::model::tokenizer::Vocab;
use crate::model::encode_text;
use crate::scalar::{fp, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Sliding-window geometry over the patch grid: `size`×`size` windows,
/// top-left corners `stride` patches apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    /// Patches per window side.
    pub size: usize,
    /// Patches between consecutive window corners.
    pub stride: usize,
}

impl WindowSpec {
    /// A window with `1 ≤ stride ≤ size`, so consecutive windows tile or
    /// overlap and never skip patches. The upper bound on `size` depends
    /// on the patch grid and is checked where the grid is known.
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "window size and stride must be at least 1, got {size}×{size} stride {stride}"
            )));
        }
        if stride > size {
            return Err(Error::Config(format!(
                "window stride {stride} exceeds window size {size}; windows would skip patches"
            )));
        }
        Ok(Self { size, stride })
    }

    /// The 1×1 window: per-patch similarity.
    pub fn per_patch() -> Self {
        Self { size: 1, stride: 1 }
    }

    /// One window covering the whole grid: full-image similarity.
    pub fn global(grid_side: usize) -> Self {
        Self {
            size: grid_side,
            stride: grid_side,
        }
    }

    /// Checks the spec against a concrete grid side.
    pub fn validate_for(&self, grid_side: usize) -> Result<()> {
        if self.size == 0 || self.stride == 0 || self.stride > self.size {
            return Err(Error::Config(format!(
                "invalid window: size {} stride {}",
                self.size, self.stride
            )));
        }
        if self.size > grid_side {
            return Err(Error::Config(format!(
                "window size {} exceeds the {grid_side}-patch grid side",
                self.size
            )));
        }
        Ok(())
    }
}

/// Top-left coordinates along one axis: multiples of the stride up to and
/// including the first corner whose window reaches the grid edge. That
/// last window is the one that may be clipped.
fn window_starts(grid_side: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut corner = 0;
    loop {
        starts.push(corner);
        if corner + size >= grid_side {
            break;
        }
        corner += stride;
    }
    starts
}

/// How many windows cover each cell of the grid, row-major.
pub fn coverage_grid(grid_side: usize, window: WindowSpec) -> Result<Vec<u32>> {
    window.validate_for(grid_side)?;
    let starts = window_starts(grid_side, window.size, window.stride);
    let mut coverage = vec![0u32; grid_side * grid_side];
    for &y0 in &starts {
        let y1 = (y0 + window.size).min(grid_side);
        for &x0 in &starts {
            let x1 = (x0 + window.size).min(grid_side);
            for y in y0..y1 {
                for x in x0..x1 {
                    coverage[y * grid_side + x] += 1;
                }
            }
        }
    }
    Ok(coverage)
}

/// A text query embedded into the shared space, keeping the text it came
/// from so downstream maps and masks can say what they were asked.
#[derive(Debug, Clone)]
pub struct QueryEmbedding<S: Scalar> {
    /// The original query text.
    pub query: String,
    /// 1×proj_dim unit-norm embedding.
    pub embedding: Tensor<S>,
}

/// Runs a query through the text tower.
pub fn embed_query<S: Scalar>(
    params: &ModelParams<S>,
    vocab: &Vocab,
    query: &str,
) -> Result<QueryEmbedding<S>> {
    let (ids, _) = vocab.encode(query, params.config.max_text_len);
    let embedding = encode_text(params, &ids)?;
    Ok(QueryEmbedding {
        query: query.to_owned(),
        embedding,
    })
}

/// Per-patch cosine similarities between localized pooled embeddings and
/// one text query, over the P×P patch grid.
#[derive(Debug, Clone)]
pub struct SimilarityMap<S> {
    side: usize,
    grid: Vec<S>,
    query: String,
    window: WindowSpec,
    coverage: Vec<u32>,
}

impl<S: Scalar> SimilarityMap<S> {
    /// Assembles a map from raw parts, checking the shapes agree.
    pub fn from_parts(
        side: usize,
        grid: Vec<S>,
        query: impl Into<String>,
        window: WindowSpec,
        coverage: Vec<u32>,
    ) -> Result<Self> {
        if side == 0 {
            return Err(Error::Data("similarity map needs a nonzero grid side".into()));
        }
        if grid.len() != side * side || coverage.len() != side * side {
            return Err(Error::Data(format!(
                "similarity map {side}×{side} given {} values and {} coverage counts",
                grid.len(),
                coverage.len()
            )));
        }
        Ok(Self {
            side,
            grid,
            query: query.into(),
            window,
            coverage,
        })
    }

    /// Patches per grid side.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Row-major similarity values.
    pub fn values(&self) -> &[S] {
        &self.grid
    }

    /// Value at (row, col).
    pub fn at(&self, row: usize, col: usize) -> S {
        self.grid[row * self.side + col]
    }

    /// Row-major window-overlap counts.
    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    /// The query this map answers.
    pub fn query(&self) -> &str {
        &self.query
    }

    /// The window geometry that produced the map.
    pub fn window(&self) -> WindowSpec {
        self.window
    }
}

/// Pools each sliding window with the attention head, projects and
/// normalizes the pooled vector, scores it against the query embedding,
/// and averages the window scores onto every patch each window covers.
pub fn smooth_attention_map<S: Scalar>(
    params: &ModelParams<S>,
    patch_tokens: &Tensor<S>,
    query: &QueryEmbedding<S>,
    window: WindowSpec,
) -> Result<SimilarityMap<S>> {
    let config = &params.config;
    let p = config.grid_side();
    window.validate_for(p)?;
    let (n, e) = patch_tokens.dims2();
    if n != p * p || e != config.embed_dim {
        return Err(Error::shape(
            "smooth_attention_map",
            format!(
                "patch tokens are {n}×{e}, model expects {}×{}",
                p * p,
                config.embed_dim
            ),
        ));
    }
    let (qr, qc) = query.embedding.dims2();
    if qr != 1 || qc != config.proj_dim {
        return Err(Error::shape(
            "smooth_attention_map",
            format!("query embedding is {qr}×{qc}, expected 1×{}", config.proj_dim),
        ));
    }

    let mut tape = Tape::new();
    let pv = ParamVars::register_filtered(&mut tape, params, false, &["pool.", "img_proj."])?;
    // The query as a column, so each window's cosine is a 1×1 matmul.
    let text_col = tape.leaf(query.embedding.data(), config.proj_dim, 1)?;

    let starts = window_starts(p, window.size, window.stride);
    let mut sums = vec![S::zero(); p * p];
    let mut coverage = vec![0u32; p * p];
    let tok = patch_tokens.data();
    for &y0 in &starts {
        let y1 = (y0 + window.size).min(p);
        for &x0 in &starts {
            let x1 = (x0 + window.size).min(p);
            // Gather the window's tokens in row-major grid order — for the
            // full-grid window this is exactly the encoder's token order.
            let mut block = Vec::with_capacity((y1 - y0) * (x1 - x0) * e);
            for y in y0..y1 {
                for x in x0..x1 {
                    let r = y * p + x;
                    block.extend_from_slice(&tok[r * e..(r + 1) * e]);
                }
            }
            let block = tape.leaf(&block, (y1 - y0) * (x1 - x0), e)?;
            let (pooled, _) = attention_pool_on_tape(&mut tape, config, &pv, block)?;
            let projected = tape.matmul(pooled, pv.var("img_proj.w"))?;
            let unit = tape.l2_normalize_rows(projected);
            let cos = tape.matmul(unit, text_col)?;
            let score = tape.value(cos)[0];
            for y in y0..y1 {
                for x in x0..x1 {
                    sums[y * p + x] += score;
                    coverage[y * p + x] += 1;
                }
            }
        }
    }

    let grid = sums
        .iter()
        .zip(&coverage)
        .map(|(&s, &c)| s / fp::<S>(c as f64))
        .collect();
    SimilarityMap::from_parts(p, grid, query.query.clone(), window, coverage)
}

/// Scores every patch alone: each token through the pooling head as a
/// singleton pool, projected, normalized, dotted with the query. The 1×1
/// window is precisely that, so this is its definitional shorthand.
pub fn per_patch_similarity<S: Scalar>(
    params: &ModelParams<S>,
    patch_tokens: &Tensor<S>,
    query: &QueryEmbedding<S>,
) -> Result<SimilarityMap<S>> {
    smooth_attention_map(params, patch_tokens, query, WindowSpec::per_patch())
}

/// Exact order statistics of a map's values.
#[derive(Debug, Clone)]
pub struct MapStatistics<S> {
    /// Smallest value.
    pub min: S,
    /// Largest value.
    pub max: S,
    /// Arithmetic mean.
    pub mean: S,
    sorted: Vec<S>,
}

impl<S: Scalar> MapStatistics<S> {
    /// The p-th percentile (p in 0..=100, clamped), lower interpolation:
    /// the sorted value at index ⌊(p/100)·(n−1)⌋.
    pub fn percentile(&self, p: f64) -> S {
        let n = self.sorted.len();
        let p = p.clamp(0.0, 100.0);
        let idx = ((p / 100.0) * ((n - 1) as f64)).floor() as usize;
        self.sorted[idx]
    }
}

/// Computes min, max, mean, and the sorted values behind [`MapStatistics::percentile`].
pub fn map_statistics<S: Scalar>(map: &SimilarityMap<S>) -> MapStatistics<S> {
    let mut sorted = map.values().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let sum: S = sorted.iter().copied().sum();
    MapStatistics {
        min: sorted[0],
        max: sorted[n - 1],
        mean: sum / fp::<S>(n as f64),
        sorted,
    }
}

/// On-disk forms of a similarity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    /// Raw floats, row-major, one grid row per line.
    Csv,
    /// Min–max normalized 8-bit grayscale, binary P5.
    Pgm,
}

/// The CSV text form: each value printed with 9 significant digits, which
/// round-trips f32 exactly.
pub fn map_to_csv<S: Scalar>(map: &SimilarityMap<S>) -> String {
    let side = map.side();
    let mut out = String::new();
    for row in 0..side {
        for col in 0..side {
            if col > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.8e}", map.at(row, col)));
        }
        out.push('\n');
    }
    out
}

/// The PGM raster: ⌊255·(v−min)/(max−min)⌋ per cell, mid-gray 128 when
/// the map is constant.
pub fn map_raster_bytes<S: Scalar>(map: &SimilarityMap<S>) -> Vec<u8> {
    let stats = map_statistics(map);
    let min = stats.min.to_f64().unwrap_or(f64::NAN);
    let max = stats.max.to_f64().unwrap_or(f64::NAN);
    map.values()
        .iter()
        .map(|v| {
            if max > min {
                let v = v.to_f64().unwrap_or(f64::NAN);
                (255.0 * (v - min) / (max - min)).floor() as u8
            } else {
                128
            }
        })
        .collect()
}

/// Writes a map to `path` in the chosen format.
pub fn export_map<S: Scalar>(map: &SimilarityMap<S>, path: &Path, format: MapFormat) -> Result<()> {
    match format {
        MapFormat::Csv => {
            std::fs::write(path, map_to_csv(map)).map_err(|e| Error::io(path, e))
        }
        MapFormat::Pgm => crate::data::image::write_pgm(
            path,
            map.side(),
            map.side(),
            &map_raster_bytes(map),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::Image;
    use crate::kernels;
    use crate::model::{encode_image, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth_vision: 1,
            depth_text: 1,
            heads: 2,
            proj_dim: 8,
            vocab_size: 16,
            max_text_len: 4,
            seed,
        }
    }

    fn random_image(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::filled(size, size, [0, 0, 0]);
        for y in 0..size {
            for x in 0..size {
                img.set(x, y, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
        img
    }

    fn random_query(seed: u64, dim: usize) -> QueryEmbedding<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let data: Vec<f32> = v.iter().map(|x| (x / norm) as f32).collect();
        QueryEmbedding {
            query: "query".into(),
            embedding: Tensor::matrix(1, dim, data).unwrap(),
        }
    }

    /// Params, patch tokens of a random image, and a random unit query.
    fn setup(seed: u64) -> (ModelParams<f32>, Tensor<f32>, QueryEmbedding<f32>) {
        let params = ModelParams::init(tiny_config(seed)).unwrap();
        let img = random_image(seed ^ 0xABCD, 32);
        let out = encode_image(&params, &img).unwrap();
        let q = random_query(seed ^ 0x1234, 8);
        (params, out.patch_tokens, q)
    }

    #[test]
    fn window_spec_bounds_are_enforced() {
        assert!(WindowSpec::new(0, 1).is_err());
        assert!(WindowSpec::new(2, 0).is_err());
        assert!(WindowSpec::new(2, 3).is_err(), "stride beyond size skips patches");
        assert!(WindowSpec::new(3, 3).is_ok());
        let w = WindowSpec::new(5, 2).unwrap();
        assert!(w.validate_for(4).is_err(), "window larger than the grid");
        assert!(w.validate_for(5).is_ok());
    }

    #[test]
    fn coverage_matches_brute_force_counts() {
        for grid in 1..=7usize {
            for size in 1..=grid {
                for stride in 1..=size {
                    let window = WindowSpec { size, stride };
                    let got = coverage_grid(grid, window).unwrap();
                    // Independent enumeration from the closed-form corner
                    // count: the scan needs ⌈(grid−size)/stride⌉ steps to
                    // reach the edge.
                    let steps = (grid - size).div_ceil(stride);
                    let corners: Vec<usize> = (0..=steps).map(|k| k * stride).collect();
                    let mut want = vec![0u32; grid * grid];
                    for &y0 in &corners {
                        for &x0 in &corners {
                            for y in y0..(y0 + size).min(grid) {
                                for x in x0..(x0 + size).min(grid) {
                                    want[y * grid + x] += 1;
                                }
                            }
                        }
                    }
                    assert_eq!(got, want, "grid {grid} window {size} stride {stride}");
                    assert!(
                        got.iter().all(|&c| c >= 1),
                        "uncovered cell at grid {grid} window {size} stride {stride}"
                    );
                }
            }
        }
    }

    #[test]
    fn hand_counted_coverage_for_overlapping_windows() {
        let got = coverage_grid(4, WindowSpec { size: 2, stride: 1 }).unwrap();
        #[rustfmt::skip]
        let want = vec![
            1, 2, 2, 1,
            2, 4, 4, 2,
            2, 4, 4, 2,
            1, 2, 2, 1,
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn identical_tokens_yield_constant_maps() {
        let (params, tokens, q) = setup(3);
        let e = params.config.embed_dim;
        let row = tokens.data()[..e].to_vec();
        let mut data = Vec::with_capacity(16 * e);
        for _ in 0..16 {
            data.extend_from_slice(&row);
        }
        let same = Tensor::matrix(16, e, data).unwrap();
        for (size, stride) in [(1, 1), (2, 1), (2, 2), (3, 2), (4, 4)] {
            let map =
                smooth_attention_map(&params, &same, &q, WindowSpec { size, stride }).unwrap();
            let first = map.values()[0];
            for &v in map.values() {
                assert!(
                    (v - first).abs() <= 1e-6,
                    "window {size}/{stride}: {v} vs {first}"
                );
            }
        }
        // The overlap pattern divides back out entirely.
        let map = smooth_attention_map(&params, &same, &q, WindowSpec { size: 2, stride: 1 })
            .unwrap();
        assert_eq!(map.coverage(), coverage_grid(4, map.window()).unwrap().as_slice());
    }

    #[test]
    fn per_patch_equals_unit_window_map_bitwise() {
        for seed in 0..20 {
            let (params, tokens, q) = setup(seed);
            let a = per_patch_similarity(&params, &tokens, &q).unwrap();
            let b =
                smooth_attention_map(&params, &tokens, &q, WindowSpec { size: 1, stride: 1 })
                    .unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn global_window_equals_image_text_cosine() {
        for seed in 0..20 {
            let (params, tokens, q) = setup(seed);
            let img = random_image(seed ^ 0xABCD, 32);
            let emb = encode_image(&params, &img).unwrap().embedding;
            let expect: f64 = emb
                .data()
                .iter()
                .zip(q.embedding.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let map = smooth_attention_map(&params, &tokens, &q, WindowSpec::global(4)).unwrap();
            let first = map.values()[0];
            for &v in map.values() {
                assert_eq!(v.to_bits(), first.to_bits(), "single window, single value");
            }
            assert!(
                (first as f64 - expect).abs() <= 1e-6,
                "seed {seed}: map {first} vs cosine {expect}"
            );
        }
    }

    #[test]
    fn singleton_pool_path_matches_attention_pool() {
        // The map's 1×1 windows must agree with the public pooling head
        // run one token at a time, finished with the same projection,
        // normalization, and dot kernels the tape uses.
        let (params, tokens, q) = setup(11);
        let map = per_patch_similarity(&params, &tokens, &q).unwrap();
        let e = params.config.embed_dim;
        let d = params.config.proj_dim;
        let w = params.get("img_proj.w");
        for p in 0..16 {
            let row = Tensor::matrix(1, e, tokens.data()[p * e..(p + 1) * e].to_vec()).unwrap();
            let (pooled, _) = crate::model::attention_pool(&params, &row).unwrap();
            let mut projected = vec![0.0f32; d];
            kernels::matmul(pooled.data(), w.data(), 1, e, d, &mut projected);
            let mut unit = vec![0.0f32; d];
            let mut norms = vec![0.0f32; 1];
            kernels::l2_normalize_rows(&projected, 1, d, &mut unit, &mut norms);
            let mut cos = vec![0.0f32; 1];
            kernels::matmul(&unit, q.embedding.data(), 1, d, 1, &mut cos);
            assert_eq!(
                map.values()[p].to_bits(),
                cos[0].to_bits(),
                "patch {p}: {} vs {}",
                map.values()[p],
                cos[0]
            );
        }
    }

    #[test]
    fn map_values_stay_in_cosine_range() {
        for seed in 40..48 {
            let (params, tokens, q) = setup(seed);
            for (size, stride) in [(1, 1), (2, 1), (3, 1), (2, 2), (4, 4)] {
                let map = smooth_attention_map(&params, &tokens, &q, WindowSpec { size, stride })
                    .unwrap();
                for &v in map.values() {
                    assert!(v.abs() <= 1.0 + 1e-5, "cosine {v} out of range");
                }
            }
        }
    }

    #[test]
    fn spatial_variance_never_grows_with_window_size() {
        // Wider windows blend more context into every patch score, so at
        // stride 1 the map flattens as the window grows. This is a
        // regularity of the scatter-averaged maps, not an algebraic
        // identity — attention pooling is nonlinear and border cells
        // average fewer windows — so the check runs one fixed model
        // against twenty random images and queries.
        let params = ModelParams::init(tiny_config(0)).unwrap();
        for i in 0..20u64 {
            let img = random_image(9000 + i, 32);
            let tokens = encode_image(&params, &img).unwrap().patch_tokens;
            let q = random_query(9100 + i, 8);
            let mut prev = f64::INFINITY;
            for size in 1..=4usize {
                let map =
                    smooth_attention_map(&params, &tokens, &q, WindowSpec { size, stride: 1 })
                        .unwrap();
                let vals: Vec<f64> = map.values().iter().map(|&v| v as f64).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                assert!(
                    var <= prev + 1e-6,
                    "input {i}: variance rose {prev} → {var} at window {size}"
                );
                prev = var;
            }
        }
    }

    #[test]
    fn order_statistics_count_from_the_bottom() {
        let grid: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let map = SimilarityMap::from_parts(
            4,
            grid,
            "q",
            WindowSpec::per_patch(),
            vec![1; 16],
        )
        .unwrap();
        let stats = map_statistics(&map);
        assert_eq!(stats.min, 0.0);
        assert_eq!(stats.max, 15.0);
        assert_eq!(stats.mean, 7.5);
        assert_eq!(stats.percentile(50.0), 7.0, "lower interpolation");
        assert_eq!(stats.percentile(100.0), stats.max);
        assert_eq!(stats.percentile(0.0), stats.min);
        assert_eq!(stats.percentile(75.0), 11.0);
    }

    #[test]
    fn constant_map_statistics_collapse() {
        let map = SimilarityMap::from_parts(
            3,
            vec![0.25f32; 9],
            "q",
            WindowSpec::per_patch(),
            vec![1; 9],
        )
        .unwrap();
        let stats = map_statistics(&map);
        assert_eq!(stats.min, 0.25);
        assert_eq!(stats.max, 0.25);
        assert_eq!(stats.mean, 0.25);
        assert_eq!(stats.percentile(33.0), 0.25);
    }

    #[test]
    fn csv_export_round_trips_f32_exactly() {
        let (params, tokens, q) = setup(7);
        let map =
            smooth_attention_map(&params, &tokens, &q, WindowSpec { size: 2, stride: 1 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        export_map(&map, &path, MapFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<f32> = text
            .lines()
            .flat_map(|l| l.split(','))
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(parsed.len(), 16);
        for (a, b) in parsed.iter().zip(map.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pgm_export_matches_hand_normalized_bytes() {
        let map = SimilarityMap::from_parts(
            2,
            vec![-1.0f32, 1.0, 0.0, 0.5],
            "q",
            WindowSpec::per_patch(),
            vec![1; 4],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        export_map(&map, &path, MapFormat::Pgm).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, b"P5\n2 2\n255\n\x00\xff\x7f\xbf");
    }

    #[test]
    fn constant_map_exports_mid_gray() {
        let map = SimilarityMap::from_parts(
            2,
            vec![0.7f32; 4],
            "q",
            WindowSpec::per_patch(),
            vec![1; 4],
        )
        .unwrap();
        assert_eq!(map_raster_bytes(&map), vec![128; 4]);
    }
}
