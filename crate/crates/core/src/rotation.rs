//! Outlier-smoothing rotations and the combined balancing transform.
//!
//! A layer `y = x w` is rewritten as
//!
//! ```text
//! y = [ (x / delta) R1 P R2 ] [ R2^T P^T R1^T (delta w) ]
//! ```
//!
//! where `R1`, `R2` are block-diagonal orthogonal matrices built greedily
//! from calibration activations and `P` is a zigzag channel permutation that
//! balances outlier channels across blocks between the two rotations.

use crate::error::{Result, TrdqError};
use crate::rng::{mix_seed, seeded};
use crate::smoothing::{compute_delta, SmoothingDiag};
use crate::tensor::{Axis, PermutationVector, Scope, Tensor2D};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Tolerance used when validating externally supplied rotation blocks.
const ORTHOGONALITY_CHECK: f64 = 1e-8;

/// A dense orthogonal `size x size` matrix acting on one channel block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationBlock {
    matrix: Tensor2D,
}

impl RotationBlock {
    /// Wraps `matrix` after checking that it is square and orthogonal.
    pub fn new(matrix: Tensor2D) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(TrdqError::shape("rotation block must be square"));
        }
        let err = orthogonality_error(&matrix);
        if err > ORTHOGONALITY_CHECK {
            return Err(TrdqError::domain(format!(
                "rotation block is not orthogonal (error {err:e})"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn identity(size: usize) -> Self {
        Self {
            matrix: Tensor2D::identity(size),
        }
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor2D {
        &self.matrix
    }

    /// `max |R R^T - I|`
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.matrix)
    }
}

fn orthogonality_error(m: &Tensor2D) -> f64 {
    let n = m.rows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

/// `BlockDiag(R_1, ..., R_K)` over `K * size` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRotation {
    blocks: Vec<RotationBlock>,
}

impl BlockRotation {
    pub fn new(blocks: Vec<RotationBlock>) -> Result<Self> {
        if let Some(first) = blocks.first() {
            if blocks.iter().any(|b| b.size() != first.size()) {
                return Err(TrdqError::shape("rotation blocks differ in size"));
            }
        }
        Ok(Self { blocks })
    }

    pub fn identity(channels: usize, block_size: usize) -> Result<Self> {
        check_blocking(channels, block_size)?;
        Ok(Self {
            blocks: vec![RotationBlock::identity(block_size); channels / block_size],
        })
    }

    pub fn blocks(&self) -> &[RotationBlock] {
        &self.blocks
    }

    pub fn block_size(&self) -> usize {
        self.blocks.first().map_or(0, RotationBlock::size)
    }

    pub fn channel_count(&self) -> usize {
        self.blocks.len() * self.block_size()
    }

    /// `x * R`
    pub fn rotate_activations(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_channels(x.cols())?;
        let bs = self.block_size();
        let mut out = Tensor2D::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let src = x.row(i);
            let dst = out.row_mut(i);
            for (k, block) in self.blocks.iter().enumerate() {
                let m = block.matrix();
                let base = k * bs;
                for a in 0..bs {
                    let v = src[base + a];
                    if v == 0.0 {
                        continue;
                    }
                    for (d, r) in dst[base..base + bs].iter_mut().zip(m.row(a)) {
                        *d += v * r;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `R^T * w`
    pub fn rotate_weights(&self, w: &Tensor2D) -> Result<Tensor2D> {
        self.check_channels(w.rows())?;
        let bs = self.block_size();
        let cols = w.cols();
        let mut out = Tensor2D::zeros(w.rows(), cols);
        for (k, block) in self.blocks.iter().enumerate() {
            let m = block.matrix();
            let base = k * bs;
            // (R^T w)[base + b] = sum_a R[a][b] * w[base + a]
            for a in 0..bs {
                let src = w.row(base + a).to_vec();
                for b in 0..bs {
                    let r = m.get(a, b);
                    if r == 0.0 {
                        continue;
                    }
                    for (d, s) in out.row_mut(base + b).iter_mut().zip(&src) {
                        *d += r * s;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Tensor2D {
        let n = self.channel_count();
        let bs = self.block_size();
        let mut d = Tensor2D::zeros(n, n);
        for (k, block) in self.blocks.iter().enumerate() {
            for a in 0..bs {
                for b in 0..bs {
                    d.set(k * bs + a, k * bs + b, block.matrix().get(a, b));
                }
            }
        }
        d
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.channel_count() {
            return Err(TrdqError::shape(format!(
                "rotation over {} channels applied to {c}",
                self.channel_count()
            )));
        }
        Ok(())
    }
}

fn check_blocking(channels: usize, block_size: usize) -> Result<()> {
    if block_size == 0 || !channels.is_multiple_of(block_size) {
        return Err(TrdqError::shape(format!(
            "{channels} channels cannot be split into blocks of {block_size}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationBuildConfig {
    pub block_size: usize,
    /// Upper bound on the length of the greedy rotation chain.
    pub max_greedy_steps: usize,
    pub rng_seed: u64,
    /// The chain stops once a step improves the max-abs by less than this
    /// fraction.
    pub stop_tol: f64,
}

impl Default for RotationBuildConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            max_greedy_steps: 8,
            rng_seed: 0,
            stop_tol: 1e-3,
        }
    }
}

impl RotationBuildConfig {
    pub fn new(
        block_size: usize,
        max_greedy_steps: usize,
        rng_seed: u64,
        stop_tol: f64,
    ) -> Result<Self> {
        let cfg = Self {
            block_size,
            max_greedy_steps,
            rng_seed,
            stop_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.block_size.is_power_of_two() {
            return Err(TrdqError::domain(format!(
                "block size {} is not a power of two",
                self.block_size
            )));
        }
        if self.max_greedy_steps == 0 {
            return Err(TrdqError::domain("max_greedy_steps must be at least 1"));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(TrdqError::domain("stop_tol must be non-negative"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

/// Orthogonal `d x d` matrix whose first row is `(1/sqrt d, ..., 1/sqrt d)`;
/// the remaining rows complete it from seeded Gaussian draws.
pub fn uniform_first_row_orthogonal(d: usize, seed: u64) -> Tensor2D {
    let mut rng = seeded(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    rows.push(vec![1.0 / (d as f64).sqrt(); d]);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        // modified Gram-Schmidt, second pass re-orthogonalizes
        for _ in 0..2 {
            for u in &rows {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    Tensor2D::from_fn(d, d, |i, j| rows[i][j])
}

/// Row and column of the largest-magnitude entry; lowest index wins ties.
fn argmax_abs(x: &Tensor2D) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = -1.0;
    for i in 0..x.rows() {
        for (j, v) in x.row(i).iter().enumerate() {
            if v.abs() > best_v {
                best_v = v.abs();
                best = (i, j);
            }
        }
    }
    best
}

/// One swap-rotate-swap step `C1 Q C2` targeting the column that holds the
/// block's largest-magnitude activation.
pub fn build_single_rotation(x_block: &Tensor2D, seed: u64) -> RotationBlock {
    let d = x_block.cols();
    let q = uniform_first_row_orthogonal(d, seed);
    let (_, col) = argmax_abs(x_block);
    let swap = |i: usize| {
        if i == 0 {
            col
        } else if i == col {
            0
        } else {
            i
        }
    };
    // C1 and C2 are the same transposition, so (C1 Q C2)[i][j] = Q[swap i][swap j]
    RotationBlock {
        matrix: Tensor2D::from_fn(d, d, |i, j| q.get(swap(i), swap(j))),
    }
}

/// Outcome of the greedy chain search for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyRotation {
    pub block: RotationBlock,
    /// Number of single rotations in the selected prefix (0 = identity).
    pub chain_len: usize,
    /// Number of single rotations that were built and evaluated.
    pub steps_evaluated: usize,
    /// `max_abs_trace[k]` is the max-abs after the first `k` rotations.
    pub max_abs_trace: Vec<f64>,
}

/// Greedy chain `R^1 R^2 ... R^n`, each step targeting the current largest
/// outlier; returns the prefix with the smallest max-abs.
pub fn build_greedy_rotation(x_block: &Tensor2D, cfg: &RotationBuildConfig) -> RotationBlock {
    greedy_rotation_search(x_block, cfg).block
}

pub fn greedy_rotation_search(x_block: &Tensor2D, cfg: &RotationBuildConfig) -> GreedyRotation {
    let d = x_block.cols();
    let mut current = x_block.clone();
    let mut acc = Tensor2D::identity(d);
    let mut trace = vec![current.abs_max()];
    let mut best = (0, trace[0], acc.clone());
    let mut steps = 0;
    for step in 1..=cfg.max_greedy_steps {
        let prev = *trace.last().unwrap();
        if prev == 0.0 {
            break;
        }
        let r = build_single_rotation(&current, mix_seed(cfg.rng_seed, &[step as u64]));
        current = current.matmul(r.matrix()).expect("block shapes agree");
        acc = acc.matmul(r.matrix()).expect("block shapes agree");
        steps = step;
        let m = current.abs_max();
        trace.push(m);
        if m < best.1 {
            best = (step, m, acc.clone());
        }
        if (prev - m) / prev < cfg.stop_tol {
            break;
        }
    }
    GreedyRotation {
        block: RotationBlock { matrix: best.2 },
        chain_len: best.0,
        steps_evaluated: steps,
        max_abs_trace: trace,
    }
}

/// Builds one greedy rotation per channel block of `x`.
pub fn build_block_rotation(
    x: &Tensor2D,
    cfg: &RotationBuildConfig,
    salt: u64,
) -> Result<BlockRotation> {
    cfg.validate()?;
    check_blocking(x.cols(), cfg.block_size)?;
    let bs = cfg.block_size;
    let blocks = (0..x.cols() / bs)
        .map(|k| {
            let block_cfg = cfg.with_seed(mix_seed(cfg.rng_seed, &[salt, k as u64]));
            build_greedy_rotation(&x.col_block(k * bs, bs), &block_cfg)
        })
        .collect();
    BlockRotation::new(blocks)
}

/// Zigzag channel-to-block assignment. Channels are ranked by descending
/// maximum (lowest index first on ties) and dealt to blocks `0..K`, then
/// `K-1..0`, and so on. Returns the gather permutation: new position
/// `k * block_size + m` holds the `m`-th channel dealt to block `k`.
pub fn build_zigzag_permutation(
    per_channel_max: &[f64],
    block_size: usize,
) -> Result<PermutationVector> {
    let c = per_channel_max.len();
    check_blocking(c, block_size)?;
    let k = c / block_size;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| per_channel_max[b].total_cmp(&per_channel_max[a]));
    let mut buckets: Vec<Vec<usize>> = vec![Vec::with_capacity(block_size); k];
    for (rank, &ch) in order.iter().enumerate() {
        buckets[zigzag_block(rank, k)].push(ch);
    }
    PermutationVector::new(buckets.concat())
}

/// Block that receives the channel of the given rank in the snake deal.
pub fn zigzag_block(rank: usize, blocks: usize) -> usize {
    let pos = rank % blocks;
    if (rank / blocks).is_multiple_of(2) {
        pos
    } else {
        blocks - 1 - pos
    }
}

/// Max minus min, over blocks, of each block's largest channel maximum after
/// gathering channels by `perm`.
pub fn block_max_spread(
    per_channel_max: &[f64],
    perm: &PermutationVector,
    block_size: usize,
) -> f64 {
    let block_max: Vec<f64> = perm
        .entries()
        .chunks(block_size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&c| per_channel_max[c])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let hi = block_max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = block_max.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

/// Which factors of the balancing transform are built. Disabled factors are
/// identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancingToggles {
    pub smooth: bool,
    pub r1: bool,
    pub permute: bool,
    pub r2: bool,
}

impl BalancingToggles {
    pub const ALL: Self = Self {
        smooth: true,
        r1: true,
        permute: true,
        r2: true,
    };
    pub const NONE: Self = Self {
        smooth: false,
        r1: false,
        permute: false,
        r2: false,
    };
    pub const SMOOTH_ONLY: Self = Self {
        smooth: true,
        r1: false,
        permute: false,
        r2: false,
    };

    pub fn any(&self) -> bool {
        self.smooth || self.r1 || self.permute || self.r2
    }
}

impl Default for BalancingToggles {
    fn default() -> Self {
        Self::ALL
    }
}

/// `{delta, R1, P, R2}` for one layer (and one timestep group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingParams {
    pub delta: SmoothingDiag,
    pub r1: BlockRotation,
    pub p: PermutationVector,
    pub r2: BlockRotation,
}

impl BalancingParams {
    pub fn new(
        delta: SmoothingDiag,
        r1: BlockRotation,
        p: PermutationVector,
        r2: BlockRotation,
    ) -> Result<Self> {
        let c = delta.len();
        if r1.channel_count() != c || p.len() != c || r2.channel_count() != c {
            return Err(TrdqError::shape(format!(
                "balancing factors disagree on channel count: delta {c}, r1 {}, p {}, r2 {}",
                r1.channel_count(),
                p.len(),
                r2.channel_count()
            )));
        }
        Ok(Self { delta, r1, p, r2 })
    }

    pub fn identity(channels: usize, block_size: usize) -> Result<Self> {
        Ok(Self {
            delta: SmoothingDiag::identity(channels),
            r1: BlockRotation::identity(channels, block_size)?,
            p: PermutationVector::identity(channels),
            r2: BlockRotation::identity(channels, block_size)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.delta.len()
    }

    /// `((x / delta) R1) P R2`
    pub fn transform_activations(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let x = self.delta.scale_activations(x)?;
        let x = self.r1.rotate_activations(&x)?;
        let x = x.apply_permutation(&self.p, Axis::Cols)?;
        self.r2.rotate_activations(&x)
    }

    /// `R2^T P^T R1^T (delta w)`
    pub fn transform_weights(&self, w: &Tensor2D) -> Result<Tensor2D> {
        let w = self.delta.scale_weights(w)?;
        let w = self.r1.rotate_weights(&w)?;
        let w = w.apply_permutation(&self.p, Axis::Rows)?;
        self.r2.rotate_weights(&w)
    }
}

pub fn transform_activations(x: &Tensor2D, bp: &BalancingParams) -> Result<Tensor2D> {
    bp.transform_activations(x)
}

pub fn transform_weights(w: &Tensor2D, bp: &BalancingParams) -> Result<Tensor2D> {
    bp.transform_weights(w)
}

pub fn assemble_balancing(
    x_calib: &Tensor2D,
    w: &Tensor2D,
    alpha: f64,
    cfg: &RotationBuildConfig,
) -> Result<BalancingParams> {
    assemble_balancing_with(x_calib, w, alpha, cfg, BalancingToggles::ALL)
}

/// Smoothing, then greedy `R1` per block, then zigzag `P` on the rotated
/// channel maxima, then greedy `R2` per block of the permuted activations.
pub fn assemble_balancing_with(
    x_calib: &Tensor2D,
    w: &Tensor2D,
    alpha: f64,
    cfg: &RotationBuildConfig,
    toggles: BalancingToggles,
) -> Result<BalancingParams> {
    cfg.validate()?;
    let c = x_calib.cols();
    if w.rows() != c {
        return Err(TrdqError::shape(format!(
            "activation channels {c} != weight input channels {}",
            w.rows()
        )));
    }
    check_blocking(c, cfg.block_size)?;
    x_calib.ensure_finite("calibration activations")?;

    let delta = if toggles.smooth {
        compute_delta(x_calib, w, alpha)?
    } else {
        SmoothingDiag::identity(c)
    };
    let x = delta.scale_activations(x_calib)?;

    let r1 = if toggles.r1 {
        build_block_rotation(&x, cfg, 1)?
    } else {
        BlockRotation::identity(c, cfg.block_size)?
    };
    let x = r1.rotate_activations(&x)?;

    let p = if toggles.permute {
        build_zigzag_permutation(&x.max_abs(Scope::PerCol)?, cfg.block_size)?
    } else {
        PermutationVector::identity(c)
    };
    let x = x.apply_permutation(&p, Axis::Cols)?;

    let r2 = if toggles.r2 {
        build_block_rotation(&x, cfg, 2)?
    } else {
        BlockRotation::identity(c, cfg.block_size)?
    };
    BalancingParams::new(delta, r1, p, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn det(m: &Tensor2D) -> f64 {
        // partial-pivot elimination
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
        let mut d = 1.0;
        for k in 0..n {
            let piv = (k..n)
                .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
                .unwrap();
            if a[piv][k] == 0.0 {
                return 0.0;
            }
            if piv != k {
                a.swap(piv, k);
                d = -d;
            }
            d *= a[k][k];
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        d
    }

    fn max_rel_diff(a: &Tensor2D, b: &Tensor2D) -> f64 {
        let scale = b.abs_max().max(1e-300);
        a.sub(b).unwrap().abs_max() / scale
    }

    #[test]
    fn q_has_uniform_first_row_and_is_orthogonal() {
        for d in [1, 2, 4, 16, 32] {
            let q = uniform_first_row_orthogonal(d, 3);
            assert!(q
                .row(0)
                .iter()
                .all(|&v| (v - 1.0 / (d as f64).sqrt()).abs() < 1e-15));
            assert!(orthogonality_error(&q) < 1e-12);
            assert!((det(&q).abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn outlier_in_first_column_gives_q() {
        let x = Tensor2D::new(2, 4, vec![9.0, 1.0, 0.0, 0.0, -2.0, 0.5, 0.0, 1.0]).unwrap();
        let r = build_single_rotation(&x, 17);
        assert_eq!(r.matrix(), &uniform_first_row_orthogonal(4, 17));
    }

    #[test]
    fn single_outlier_is_spread_evenly() {
        let x = Tensor2D::new(1, 4, vec![0.0, 0.0, 100.0, 0.0]).unwrap();
        let r = build_single_rotation(&x, 5);
        let y = x.matmul(r.matrix()).unwrap();
        assert!(
            y.data().iter().all(|v| (v - 50.0).abs() < 1e-12),
            "{:?}",
            y.data()
        );
        assert!((y.abs_max() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn single_rotation_is_orthogonal() {
        let mut rng = seeded(8);
        for seed in 0..20 {
            let x = Tensor2D::randn(8, 16, 1.0, &mut rng);
            let r = build_single_rotation(&x, seed);
            assert!(r.orthogonality_error() < 1e-10);
            assert!((det(r.matrix()).abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn flat_block_is_not_worsened() {
        let x = Tensor2D::filled(4, 8, 1.5);
        let g = greedy_rotation_search(&x, &RotationBuildConfig::default());
        assert_eq!(g.steps_evaluated, 1);
        let y = x.matmul(g.block.matrix()).unwrap();
        assert!(y.abs_max() <= 1.5 + 1e-12);
    }

    #[test]
    fn greedy_prefix_is_the_argmin() {
        let mut rng = seeded(33);
        let mut x = Tensor2D::randn(12, 16, 1.0, &mut rng);
        x.set(4, 9, 100.0);
        let cfg = RotationBuildConfig::default();
        let g = greedy_rotation_search(&x, &cfg);
        assert!(g.max_abs_trace[0] >= 100.0);

        // replay the chain and evaluate every prefix
        let mut cur = x.clone();
        let mut prefix_max = vec![cur.abs_max()];
        for step in 1..=g.steps_evaluated {
            let r = build_single_rotation(&cur, mix_seed(cfg.rng_seed, &[step as u64]));
            cur = cur.matmul(r.matrix()).unwrap();
            prefix_max.push(cur.abs_max());
        }
        let chosen = x.matmul(g.block.matrix()).unwrap().abs_max();
        let oracle = prefix_max.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((chosen - oracle).abs() <= 1e-9 * oracle);
        assert!(chosen <= prefix_max[1] + 1e-12);
        assert!(prefix_max[1] <= 100.0 + 1e-9);
        assert!(g.block.orthogonality_error() < 1e-10);
    }

    #[test]
    fn zigzag_snake_assignment() {
        let maxima = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let blocks: Vec<usize> = (0..6).map(|r| zigzag_block(r, 3)).collect();
        assert_eq!(blocks, vec![0, 1, 2, 2, 1, 0]);
        let p = build_zigzag_permutation(&maxima, 2).unwrap();
        assert_eq!(p.entries(), &[0, 5, 1, 4, 2, 3]);
    }

    #[test]
    fn zigzag_ties_and_errors() {
        let p = build_zigzag_permutation(&[1.0; 8], 4).unwrap();
        assert_eq!(block_max_spread(&[1.0; 8], &p, 4), 0.0);
        let mut sorted = p.entries().to_vec();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert!(build_zigzag_permutation(&[1.0; 6], 4).is_err());
    }

    #[test]
    fn identity_params_are_noops() {
        let mut rng = seeded(2);
        let x = Tensor2D::randn(4, 32, 1.0, &mut rng);
        let bp = BalancingParams::identity(32, 16).unwrap();
        assert_eq!(bp.transform_activations(&x).unwrap(), x);
        assert_eq!(bp.transform_weights(&x.transpose()).unwrap(), x.transpose());
    }

    #[test]
    fn transforms_match_dense_oracle() {
        let mut rng = seeded(12);
        let x = Tensor2D::randn(6, 32, 1.0, &mut rng);
        let w = Tensor2D::randn(32, 5, 1.0, &mut rng);
        let bp = assemble_balancing(&x, &w, 0.5, &RotationBuildConfig::default()).unwrap();
        let d_inv = Tensor2D::from_fn(32, 32, |i, j| {
            if i == j {
                1.0 / bp.delta.delta()[i]
            } else {
                0.0
            }
        });
        let d = Tensor2D::from_fn(
            32,
            32,
            |i, j| if i == j { bp.delta.delta()[i] } else { 0.0 },
        );
        let r1 = bp.r1.to_dense();
        let p = bp.p.to_matrix();
        let r2 = bp.r2.to_dense();
        let gx = x
            .matmul(&d_inv)
            .unwrap()
            .matmul(&r1)
            .unwrap()
            .matmul(&p)
            .unwrap()
            .matmul(&r2)
            .unwrap();
        let hw = r2
            .transpose()
            .matmul(&p.transpose())
            .unwrap()
            .matmul(&r1.transpose())
            .unwrap()
            .matmul(&d.matmul(&w).unwrap())
            .unwrap();
        assert!(max_rel_diff(&bp.transform_activations(&x).unwrap(), &gx) < 1e-11);
        assert!(max_rel_diff(&bp.transform_weights(&w).unwrap(), &hw) < 1e-11);

        let xs = bp.delta.scale_activations(&x).unwrap();
        let g = bp.transform_activations(&x).unwrap();
        assert!((g.frobenius_norm() - xs.frobenius_norm()).abs() <= 1e-10 * xs.frobenius_norm());
    }

    #[test]
    fn single_block_degenerate_case() {
        let mut rng = seeded(6);
        let x = Tensor2D::randn(4, 16, 1.0, &mut rng);
        let w = Tensor2D::randn(16, 4, 1.0, &mut rng);
        let bp = assemble_balancing(&x, &w, 0.5, &RotationBuildConfig::default()).unwrap();
        let y = bp
            .transform_activations(&x)
            .unwrap()
            .matmul(&bp.transform_weights(&w).unwrap())
            .unwrap();
        assert!(max_rel_diff(&y, &x.matmul(&w).unwrap()) < 1e-9);
    }

    #[test]
    fn toggles_disable_factors() {
        let mut rng = seeded(6);
        let x = Tensor2D::randn(8, 32, 1.0, &mut rng);
        let w = Tensor2D::randn(32, 4, 1.0, &mut rng);
        let cfg = RotationBuildConfig::default();
        let bp = assemble_balancing_with(&x, &w, 0.5, &cfg, BalancingToggles::SMOOTH_ONLY).unwrap();
        assert!(bp.p.is_identity());
        assert_eq!(bp.r1, BlockRotation::identity(32, 16).unwrap());
        assert_eq!(bp.r2, BlockRotation::identity(32, 16).unwrap());
        let none = assemble_balancing_with(&x, &w, 0.5, &cfg, BalancingToggles::NONE).unwrap();
        assert_eq!(none, BalancingParams::identity(32, 16).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(RotationBuildConfig::new(12, 8, 0, 1e-3).is_err());
        assert!(RotationBuildConfig::new(16, 0, 0, 1e-3).is_err());
        let x = Tensor2D::zeros(2, 24);
        let w = Tensor2D::zeros(24, 2);
        assert!(assemble_balancing(&x, &w, 0.5, &RotationBuildConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn computational_invariance(seed in any::<u64>(), outlier in 1.0f64..200.0) {
            let mut rng = seeded(seed);
            let mut x = Tensor2D::randn(4, 32, 1.0, &mut rng);
            x.set(1, (seed % 32) as usize, outlier);
            let w = Tensor2D::randn(32, 8, 1.0, &mut rng);
            let cfg = RotationBuildConfig::default().with_seed(seed);
            let bp = assemble_balancing(&x, &w, 0.5, &cfg).unwrap();
            let y = bp.transform_activations(&x).unwrap().matmul(&bp.transform_weights(&w).unwrap()).unwrap();
            let y0 = x.matmul(&w).unwrap();
            prop_assert!(y.sub(&y0).unwrap().frobenius_norm() <= 1e-9 * y0.frobenius_norm());
        }

        #[test]
        fn zigzag_never_worse_than_contiguous(maxima in proptest::collection::vec(0.0f64..100.0, 32)) {
            let p = build_zigzag_permutation(&maxima, 8).unwrap();
            let contiguous = PermutationVector::identity(32);
            prop_assert!(block_max_spread(&maxima, &p, 8) <= block_max_spread(&maxima, &contiguous, 8));
        }

        #[test]
        fn greedy_dominance(seed in any::<u64>(), col in 0usize..16, mag in 5.0f64..100.0) {
            let mut rng = seeded(seed);
            let mut x = Tensor2D::randn(6, 16, 1.0, &mut rng);
            x.set(2, col, mag);
            let g = greedy_rotation_search(&x, &RotationBuildConfig::default().with_seed(seed));
            let chosen = x.matmul(g.block.matrix()).unwrap().abs_max();
            prop_assert!(chosen <= g.max_abs_trace[1] * (1.0 + 1e-12));
            prop_assert!(chosen <= g.max_abs_trace[0] * (1.0 + 1e-12));
        }

        #[test]
        fn permutation_inverse_restores(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let x = Tensor2D::randn(5, 12, 1.0, &mut rng);
            let maxima = x.max_abs(Scope::PerCol).unwrap();
            let p = build_zigzag_permutation(&maxima, 4).unwrap();
            let y = x.apply_permutation(&p, Axis::Cols).unwrap();
            prop_assert_eq!(y.apply_permutation(&p.inverse(), Axis::Cols).unwrap(), x);
        }
    }
}
