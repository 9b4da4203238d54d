//! Weights and forward pass of the toy diffusion transformer.

use super::{LayerKind, ToyDiTConfig};
use crate::attention::{apply_sharing, Branch, SharingPlan};
use crate::error::Result;
use crate::rng::{mix_seed, seeded};
use crate::tensor::Tensor2D;
use crate::timebank::LayerId;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

/// Width of the time window in which a planted outlier channel is active,
/// in units of normalized noise level.
const OUTLIER_WINDOW: f64 = 0.25;
/// Noise levels at which the planted channels of a norm peak.
const OUTLIER_CENTERS: [f64; 3] = [0.1, 0.5, 0.9];
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Tensor2D,
    pub b: Vec<f64>,
}

impl Linear {
    fn random(rng: &mut crate::rng::SeededRng, cin: usize, cout: usize, std: f64) -> Self {
        let w = Tensor2D::randn(cin, cout, std, rng);
        let b = (0..cout)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                0.02 * z
            })
            .collect::<Vec<f64>>();
        Self { w, b }
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        x.matmul(&self.w)?.add_row_vector(&self.b)
    }
}

/// Channel whose norm gain swells to `peak_gain` around noise level `center`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PlantedOutlier {
    pub channel: usize,
    pub center: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    /// `dim x 4 dim`: shift/scale for both norms from the conditioning vector.
    pub modulation: Tensor2D,
    pub attn_outliers: Vec<PlantedOutlier>,
    pub mlp_outliers: Vec<PlantedOutlier>,
}

impl BlockWeights {
    pub fn linear(&self, kind: LayerKind) -> &Linear {
        match kind {
            LayerKind::Query => &self.q,
            LayerKind::Key => &self.k,
            LayerKind::Value => &self.v,
            LayerKind::AttnOut => &self.out,
            LayerKind::MlpUp => &self.fc1,
            LayerKind::MlpDown => &self.fc2,
            LayerKind::Head => unreachable!("head is not part of a block"),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ModelWeights {
    pub blocks: Vec<BlockWeights>,
    pub head: Linear,
}

impl ModelWeights {
    pub fn random(cfg: &ToyDiTConfig, seed: u64) -> Self {
        let d = cfg.dim;
        let hidden = cfg.mlp_hidden();
        let inv = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let mut rng = seeded(mix_seed(seed, &[b as u64]));
                let q = Linear::random(&mut rng, d, d, 0.5 * inv);
                let k = Linear::random(&mut rng, d, d, 0.5 * inv);
                let v = Linear::random(&mut rng, d, d, inv);
                let out = Linear::random(&mut rng, d, d, 0.5 * inv);
                let fc1 = Linear::random(&mut rng, d, hidden, inv);
                let fc2 = Linear::random(&mut rng, hidden, d, 0.5 / (hidden as f64).sqrt());
                let modulation = Tensor2D::randn(d, 4 * d, 0.1 * inv, &mut rng);
                let mut channels: Vec<usize> = (0..d).collect();
                channels.shuffle(&mut rng);
                let n = cfg.outlier_channels.min(d / 2);
                let plant = |chs: &[usize]| {
                    chs.iter()
                        .enumerate()
                        .map(|(i, &channel)| PlantedOutlier {
                            channel,
                            center: OUTLIER_CENTERS[i % OUTLIER_CENTERS.len()],
                        })
                        .collect::<Vec<_>>()
                };
                BlockWeights {
                    q,
                    k,
                    v,
                    out,
                    fc1,
                    fc2,
                    modulation,
                    attn_outliers: plant(&channels[..n]),
                    mlp_outliers: plant(&channels[n..2 * n]),
                }
            })
            .collect();
        let mut rng = seeded(mix_seed(seed, &[u64::MAX]));
        let head = Linear::random(&mut rng, d, d, 0.3 * inv);
        Self { blocks, head }
    }

    pub fn linear(&self, cfg: &ToyDiTConfig, id: LayerId) -> &Linear {
        let (block, kind) = cfg.layer_kind(id);
        match kind {
            LayerKind::Head => &self.head,
            k => self.blocks[block].linear(k),
        }
    }
}

/// Executes the linear layers of a forward pass; implementations decide
/// between full precision and fake quantization, and may record inputs.
pub(crate) trait LinearExec {
    fn linear(
        &mut self,
        id: LayerId,
        step: u32,
        branch: Branch,
        x: &Tensor2D,
        lin: &Linear,
    ) -> Result<Tensor2D>;
}

/// Per-branch inputs and the attention exchange for one forward pass.
pub(crate) struct ForwardCtx<'a> {
    pub step: u32,
    pub noise_level: f64,
    pub branch: Branch,
    pub condition: &'a [f64],
    /// Sharing plan and the conditional branch's per-block probabilities.
    pub share: Option<(&'a SharingPlan, &'a [Tensor2D])>,
    /// Receives each block's attention probabilities.
    pub attn_out: Option<&'a mut Vec<Tensor2D>>,
    pub attn_computed: usize,
    pub attn_skipped: usize,
}

pub(crate) fn forward(
    cfg: &ToyDiTConfig,
    weights: &ModelWeights,
    exec: &mut dyn LinearExec,
    latent: &Tensor2D,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor2D> {
    let d = cfg.dim;
    let temb = timestep_embedding(d, ctx.noise_level * super::schedule::TRAIN_TIMESTEPS as f64);
    let cvec: Vec<f64> = temb.iter().zip(ctx.condition).map(|(a, b)| a + b).collect();
    let mut h = latent.add_row_vector(&cvec)?;
    let silu_c = Tensor2D::new(1, d, cvec.iter().map(|&v| v / (1.0 + (-v).exp())).collect())?;

    for (b, blk) in weights.blocks.iter().enumerate() {
        let id = |kind| cfg.layer_id(b, kind);
        let m = silu_c.matmul(&blk.modulation)?;
        let m = m.row(0);
        let (shift1, scale1, shift2, scale2) =
            (&m[..d], &m[d..2 * d], &m[2 * d..3 * d], &m[3 * d..]);

        let a_in = modulated_norm(
            &h,
            shift1,
            scale1,
            &blk.attn_outliers,
            cfg.outlier_gain,
            ctx.noise_level,
        );
        let v = exec.linear(id(LayerKind::Value), ctx.step, ctx.branch, &a_in, &blk.v)?;
        let (step, branch) = (ctx.step, ctx.branch);
        let compute = |exec: &mut dyn LinearExec| -> Result<Tensor2D> {
            let q = exec.linear(id(LayerKind::Query), step, branch, &a_in, &blk.q)?;
            let k = exec.linear(id(LayerKind::Key), step, branch, &a_in, &blk.k)?;
            Ok(attention_probs(&q, &k, cfg.heads))
        };
        let (probs, computed) = match ctx.share {
            Some((plan, cond)) => {
                apply_sharing(plan, b as u32, step, &cond[b], || compute(&mut *exec))?
            }
            None => (compute(&mut *exec)?, true),
        };
        if computed {
            ctx.attn_computed += 1;
        } else {
            ctx.attn_skipped += 1;
        }
        let o = attention_apply(&probs, &v, cfg.heads);
        if let Some(out) = ctx.attn_out.as_deref_mut() {
            out.push(probs);
        }
        h = h.add(&exec.linear(id(LayerKind::AttnOut), ctx.step, ctx.branch, &o, &blk.out)?)?;

        let m_in = modulated_norm(
            &h,
            shift2,
            scale2,
            &blk.mlp_outliers,
            cfg.outlier_gain,
            ctx.noise_level,
        );
        let up = exec
            .linear(id(LayerKind::MlpUp), ctx.step, ctx.branch, &m_in, &blk.fc1)?
            .map(gelu);
        h = h.add(&exec.linear(id(LayerKind::MlpDown), ctx.step, ctx.branch, &up, &blk.fc2)?)?;
    }

    let head_in = layer_norm(&h);
    let correction = exec.linear(cfg.head_id(), ctx.step, ctx.branch, &head_in, &weights.head)?;
    latent.add(&correction)
}

pub(crate) fn timestep_embedding(dim: usize, t: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        e[i] = (t * freq).cos();
        e[half + i] = (t * freq).sin();
    }
    e
}

fn layer_norm(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Gain of a planted channel at the given noise level.
pub(crate) fn planted_gain(o: &PlantedOutlier, peak: f64, noise_level: f64) -> f64 {
    let z = (noise_level - o.center) / OUTLIER_WINDOW;
    1.0 + (peak - 1.0) * (-z * z).exp()
}

fn modulated_norm(
    h: &Tensor2D,
    shift: &[f64],
    scale: &[f64],
    outliers: &[PlantedOutlier],
    peak: f64,
    noise_level: f64,
) -> Tensor2D {
    let mut gain: Vec<f64> = scale.iter().map(|s| 1.0 + s).collect();
    for o in outliers {
        gain[o.channel] *= planted_gain(o, peak, noise_level);
    }
    let mut x = layer_norm(h);
    for i in 0..x.rows() {
        for ((v, g), s) in x.row_mut(i).iter_mut().zip(&gain).zip(shift) {
            *v = *v * g + s;
        }
    }
    x
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Softmax attention probabilities, heads stacked: `heads * tokens x tokens`.
pub(crate) fn attention_probs(q: &Tensor2D, k: &Tensor2D, heads: usize) -> Tensor2D {
    let (t, d) = q.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor2D::zeros(heads * t, t);
    for h in 0..heads {
        for i in 0..t {
            let qi = &q.row(i)[h * hd..(h + 1) * hd];
            let row = out.row_mut(h * t + i);
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[h * hd..(h + 1) * hd];
                *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            row.iter_mut().for_each(|r| *r /= sum);
        }
    }
    out
}

pub(crate) fn attention_apply(probs: &Tensor2D, v: &Tensor2D, heads: usize) -> Tensor2D {
    let (t, d) = v.shape();
    let hd = d / heads;
    let mut out = Tensor2D::zeros(t, d);
    for h in 0..heads {
        for i in 0..t {
            let p = probs.row(h * t + i);
            let dst = &mut out.row_mut(i)[h * hd..(h + 1) * hd];
            for (j, &pj) in p.iter().enumerate() {
                for (o, vv) in dst.iter_mut().zip(&v.row(j)[h * hd..(h + 1) * hd]) {
                    *o += pj * vv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = seeded(1);
        let q = Tensor2D::randn(5, 8, 1.0, &mut rng);
        let k = Tensor2D::randn(5, 8, 1.0, &mut rng);
        let p = attention_probs(&q, &k, 2);
        assert_eq!(p.shape(), (10, 5));
        for i in 0..10 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_averages_values() {
        let probs = Tensor2D::filled(4, 2, 0.5);
        let v = Tensor2D::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        let o = attention_apply(&probs, &v, 2);
        assert_eq!(o.row(0), &[2.0, 4.0]);
        assert_eq!(o.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn planted_gain_peaks_at_center() {
        let o = PlantedOutlier {
            channel: 0,
            center: 0.5,
        };
        assert!((planted_gain(&o, 20.0, 0.5) - 20.0).abs() < 1e-12);
        assert!(planted_gain(&o, 20.0, 0.0) < 2.0);
    }
}
