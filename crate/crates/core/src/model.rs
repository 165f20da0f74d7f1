//! The assembled segmentation network: per-slice fusion, Logic-LSTM over
//! the slice stack, two-class head; plus the training loss and sliding-window
//! inference over whole volumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{crop_at, inplane_origin, Crop, Volume};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::grid::{Grid3, Mask, ProbMap};
use crate::llstm::{class_softmax, Llstm, LlstmConfig, CLASSES};
use crate::moddrop::{self, RetentionSample};
use crate::nn::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const MODALITIES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub n_c: usize,
    pub n_l: usize,
    pub m: usize,
    pub w: usize,
    pub forget_bias: f64,
    /// Slices per crop.
    pub s: usize,
}

impl ModelConfig {
    pub fn llstm(&self) -> LlstmConfig {
        LlstmConfig {
            n_c: self.n_c,
            n_l: self.n_l,
            m: self.m,
            w: self.w,
            n1: self.fusion.n1,
            d_k: self.fusion.d_k,
            forget_bias: self.forget_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.llstm().validate()?;
        if self.s == 0 {
            return Err(Error::Config("model.s must be positive".into()));
        }
        Ok(())
    }
}

/// Relative weights of cross-entropy and soft-Dice terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 0.5, dice: 0.5 }
    }
}

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct UpAttLlstm<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub fusion: Fusion,
    pub llstm: Llstm,
}

impl<T: Scalar> UpAttLlstm<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let fusion = Fusion::new(&mut params, &cfg.fusion, &mut rng)?;
        let llstm = Llstm::new(&mut params, &cfg.llstm(), &mut rng)?;
        Ok(UpAttLlstm {
            cfg: cfg.clone(),
            params,
            fusion,
            llstm,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Recurrent-cell weights, head excluded.
    pub fn llstm_params(&self) -> usize {
        self.llstm.num_params(&self.params)
    }

    /// Per-slice `(dwi [1,n,n], susceptibility [2,n,n])` tensors.
    pub fn slice_inputs(&self, crop: &Crop) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let n = self.cfg.fusion.n1;
        let want = [n, n, self.cfg.s];
        if crop.dims() != want || crop.channels.len() != MODALITIES {
            return Err(Error::shape("model input", &crop.dims(), &want));
        }
        for c in &crop.channels {
            c.same_dims(&crop.gt)?;
        }
        let plane = |ch: &Grid3<f32>, z: usize| -> Vec<T> {
            let mut v = Vec::with_capacity(n * n);
            for x in 0..n {
                for y in 0..n {
                    v.push(T::lit(f64::from(*ch.get(x, y, z))));
                }
            }
            v
        };
        (0..self.cfg.s)
            .map(|z| {
                let dwi = Tensor::new([1, n, n], plane(&crop.channels[0], z))?;
                let mut sp = plane(&crop.channels[1], z);
                sp.extend(plane(&crop.channels[2], z));
                Ok((dwi, Tensor::new([2, n, n], sp)?))
            })
            .collect()
    }

    /// Per-slice class logits `[2, n1, n1]`.
    pub fn forward_logits(&self, g: &mut Graph<T>, b: &Binding, crop: &Crop) -> Result<Vec<Var>> {
        let inputs = self.slice_inputs(crop)?;
        let mut fused = Vec::with_capacity(inputs.len());
        for (dwi, sp) in inputs {
            let dwi = g.constant(dwi);
            let sp = g.constant(sp);
            fused.push(self.fusion.forward(g, b, dwi, sp)?);
        }
        self.llstm.run_sequence(g, b, &fused)
    }

    /// Foreground probability for every voxel of the crop.
    pub fn forward(&self, crop: &Crop, retention: &RetentionSample) -> Result<ProbMap> {
        let x = moddrop::apply(crop, retention)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let logits = self.forward_logits(&mut g, &b, &x)?;
        let n = self.cfg.fusion.n1;
        let mut out = ProbMap::filled([n, n, self.cfg.s], 0.0);
        for (z, &l) in logits.iter().enumerate() {
            let p = class_softmax(&mut g, l)?;
            let fg = &g.value(p).data()[n * n..2 * n * n];
            for x in 0..n {
                for y in 0..n {
                    out.set(x, y, z, fg[x * n + y].as_f64() as f32);
                }
            }
        }
        Ok(out)
    }

    /// Weighted cross-entropy plus soft-Dice loss against `gt` `[n1, n1, s]`.
    pub fn loss(&self, g: &mut Graph<T>, logits: &[Var], gt: &Mask, weights: LossWeights) -> Result<Var> {
        segmentation_loss(g, logits, gt, weights)
    }

    /// Sliding `s`-slice windows along z with the given stride; overlapping
    /// predictions are averaged. Voxels outside the in-plane window get 0.
    pub fn predict_volume(&self, vol: &Volume, stride: usize) -> Result<ProbMap> {
        let (n, s) = (self.cfg.fusion.n1, self.cfg.s);
        let d = vol.dims();
        if d[2] < s {
            return Err(Error::invalid(format!("volume has {} slices, model needs {s}", d[2])));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let [ox, oy] = inplane_origin(vol, n)?;
        let mut starts: Vec<usize> = (0..=d[2] - s).step_by(stride).collect();
        if starts.last() != Some(&(d[2] - s)) {
            starts.push(d[2] - s);
        }
        let ones = RetentionSample::ones(vol.channels.len());
        let mut sum = vec![0f64; d.iter().product()];
        let mut count = vec![0u32; sum.len()];
        let out_index = |x: usize, y: usize, z: usize| (x * d[1] + y) * d[2] + z;
        for z0 in starts {
            let crop = crop_at(vol, [ox, oy, z0], n, s)?;
            let p = self.forward(&crop, &ones)?;
            for x in 0..n {
                for y in 0..n {
                    for z in 0..s {
                        let i = out_index(ox + x, oy + y, z0 + z);
                        sum[i] += f64::from(*p.get(x, y, z));
                        count[i] += 1;
                    }
                }
            }
        }
        let data = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / f64::from(c)) as f32 })
            .collect();
        Grid3::from_vec(d, data)
    }
}

/// Loss on per-slice logits `[2, n, n]` against `gt: [n, n, slices]`.
pub fn segmentation_loss<T: Scalar>(g: &mut Graph<T>, logits: &[Var], gt: &Mask, weights: LossWeights) -> Result<Var> {
    let [gx, gy, gz] = gt.dims();
    if logits.len() != gz {
        return Err(Error::shape("loss slices", &[logits.len()], &[gz]));
    }
    let plane = gx * gy;
    let mut rows = Vec::with_capacity(gz);
    for &l in logits {
        if g.shape(l) != [CLASSES, gx, gy] {
            return Err(Error::shape("loss", g.shape(l), &[CLASSES, gx, gy]));
        }
        let flat = g.reshape(l, &[CLASSES, plane])?;
        rows.push(g.transpose(flat)?);
    }
    let all = g.concat(&rows)?;
    let total = plane * gz;
    let mut onehot = Vec::with_capacity(total * 2);
    let mut target = Vec::with_capacity(total);
    for z in 0..gz {
        for x in 0..gx {
            for y in 0..gy {
                let fg = *gt.get(x, y, z);
                onehot.extend([T::lit(if fg { 0.0 } else { 1.0 }), T::lit(if fg { 1.0 } else { 0.0 })]);
                target.push(T::lit(if fg { 1.0 } else { 0.0 }));
            }
        }
    }
    let fg_count = gt.count();
    let gt_count = T::lit(fg_count as f64);
    // each class present contributes half of the cross-entropy
    let (w_bg, w_fg) = if fg_count == 0 || fg_count == total {
        (1.0 / total as f64, 1.0 / total as f64)
    } else {
        (0.5 / (total - fg_count) as f64, 0.5 / fg_count as f64)
    };
    for pair in onehot.chunks_mut(2) {
        pair[0] *= T::lit(w_bg);
        pair[1] *= T::lit(w_fg);
    }
    let onehot = g.constant(Tensor::from_parts(vec![total, 2], onehot));
    let target = g.constant(Tensor::from_parts(vec![total, 1], target));

    let logp = g.log_softmax_lastdim(all)?;
    let picked = g.mul(logp, onehot)?;
    let ce = g.sum(picked)?;
    let ce = g.scale(ce, -T::one())?;

    let prob = g.exp(logp)?;
    let select = g.constant(Tensor::from_parts(vec![2, 1], vec![T::zero(), T::one()]));
    let fg = g.matmul(prob, select)?;
    let overlap = g.mul(fg, target)?;
    let inter = g.sum(overlap)?;
    let num = g.scale(inter, T::lit(2.0))?;
    let num = g.add_scalar(num, T::lit(DICE_SMOOTH))?;
    let fg_sum = g.sum(fg)?;
    let den = g.add_scalar(fg_sum, gt_count + T::lit(DICE_SMOOTH))?;
    let dice = g.div(num, den)?;

    let ce = g.scale(ce, T::lit(weights.ce))?;
    let dice_term = g.scale(dice, -T::lit(weights.dice))?;
    let sum = g.add(ce, dice_term)?;
    g.add_scalar(sum, T::lit(weights.dice))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction_on_empty_gt_gives_ln2_ce() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros([2, 3, 3]));
        let gt = Mask::filled([3, 3, 1], false);
        let w = LossWeights { ce: 1.0, dice: 0.0 };
        let loss = segmentation_loss(&mut g, &[l], &gt, w).unwrap();
        assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
    }
}
