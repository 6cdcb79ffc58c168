//! The xNet graph: a small convolutional backbone producing the diagonal
//! layers, one shared stride-1x2 convolution generating every layer right of
//! the diagonal, one shared stride-2x1 convolution generating every layer
//! below it, and two head stacks shared by all layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{CentersOutput, CornersOutput};
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeSpec};
use crate::losses::{
    expand_mask, focal_sum_logits, sigmoid, smooth_l1_sum, LayerLoss, LossReport, LossWeights,
};
use crate::net::ops::{conv2d, conv2d_backward, relu_backward_inplace, relu_inplace, Conv2dGeom};
use crate::net::Tensor;
use crate::targets::{CentersTargets, CornersTargets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Centers,
    Corners,
}

impl HeadKind {
    pub fn heat_channels(self, num_classes: usize) -> usize {
        match self {
            HeadKind::Centers => num_classes,
            HeadKind::Corners => 2 * num_classes,
        }
    }

    pub fn reg_channels(self) -> usize {
        match self {
            HeadKind::Centers => 4,
            HeadKind::Corners => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "centers" => Ok(HeadKind::Centers),
            "corners" => Ok(HeadKind::Corners),
            other => Err(Error::Config(format!("unknown head `{other}` (expected centers or corners)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Channels of every lattice feature map.
    pub width: usize,
    /// Hidden channels of each head stack.
    pub head_width: usize,
    /// Extra stride-1 convolutions after the stem reaches the base stride.
    pub stem_extra: usize,
    /// Initial heatmap probability, sets the bias of the heatmap output.
    pub heat_prior: f64,
    pub lattice: LatticeSpec,
}

impl ModelConfig {
    pub fn new(head: HeadKind, num_classes: usize, lattice: LatticeSpec) -> Self {
        Self {
            head,
            num_classes,
            in_channels: 3,
            width: 32,
            head_width: 32,
            stem_extra: 1,
            heat_prior: 0.1,
            lattice,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    weight: usize,
    bias: usize,
    geom: Conv2dGeom,
    relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct XNetModel {
    config: ModelConfig,
    lattice: Lattice,
    params: Vec<Param>,
    stem: Vec<ConvRef>,
    diag_down: Vec<ConvRef>,
    ext_right: ConvRef,
    ext_down: ConvRef,
    heat: [ConvRef; 2],
    reg: [ConvRef; 2],
    /// Layer indices ordered so that every layer follows its predecessor.
    order: Vec<usize>,
}

/// Raw per-layer head outputs: heatmap logits and regression maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub heat_logits: Tensor,
    pub reg: Tensor,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every stem conv followed by the stem output.
    stem: Vec<Tensor>,
    diag: Vec<Tensor>,
    feats: Vec<Tensor>,
    heat_hidden: Vec<Tensor>,
    reg_hidden: Vec<Tensor>,
}

const STEM: &str = "stem";

fn init_conv(
    params: &mut Vec<Param>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    geom: Conv2dGeom,
    relu: bool,
    gain: f64,
    bias: f64,
) -> ConvRef {
    let fan_in = (cin * k * k) as f64;
    let bound = gain * (3.0 / fan_in).sqrt();
    let data = (0..cout * cin * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
    let weight = params.len();
    params.push(Param {
        name: format!("{name}.weight"),
        value: Tensor::from_vec([cout, cin, k, k], data).expect("conv weight shape"),
    });
    params.push(Param { name: format!("{name}.bias"), value: Tensor::full([1, cout, 1, 1], bias) });
    ConvRef { weight, bias: weight + 1, geom, relu }
}

impl XNetModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let lattice = Lattice::build(config.lattice.clone())?;
        let bs = config.lattice.base_stride;
        if !bs.is_power_of_two() {
            return Err(Error::Config(format!("base stride {bs} must be a power of two")));
        }
        if config.num_classes == 0 || config.width == 0 || config.head_width == 0 {
            return Err(Error::Config("classes and channel widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let relu_gain = 2f64.sqrt();
        let k3 = |s: (usize, usize)| Conv2dGeom::new(s, (1, 1));

        let mut stem = Vec::new();
        let mut cin = config.in_channels;
        let downs = bs.trailing_zeros() as usize;
        for i in 0..downs {
            let cout = if i + 1 == downs { config.width } else { (config.width / 2).max(1) };
            stem.push(init_conv(&mut params, &mut rng, &format!("{STEM}.{i}"), cin, cout, 3, k3((2, 2)), true, relu_gain, 0.0));
            cin = cout;
        }
        for j in 0..config.stem_extra {
            stem.push(init_conv(
                &mut params,
                &mut rng,
                &format!("{STEM}.{}", downs + j),
                cin,
                config.width,
                3,
                k3((1, 1)),
                true,
                relu_gain,
                0.0,
            ));
            cin = config.width;
        }
        if stem.is_empty() {
            stem.push(init_conv(&mut params, &mut rng, &format!("{STEM}.0"), cin, config.width, 3, k3((1, 1)), true, relu_gain, 0.0));
        }

        let f = config.width;
        let diag_down = (1..lattice.diagonal_len())
            .map(|k| init_conv(&mut params, &mut rng, &format!("diag.{k}"), f, f, 3, k3((2, 2)), true, relu_gain, 0.0))
            .collect();
        let ext_right = init_conv(&mut params, &mut rng, "ext_right", f, f, 3, k3((1, 2)), true, relu_gain, 0.0);
        let ext_down = init_conv(&mut params, &mut rng, "ext_down", f, f, 3, k3((2, 1)), true, relu_gain, 0.0);

        let hw = config.head_width;
        let prior = config.heat_prior.clamp(1e-6, 1.0 - 1e-6);
        let heat_bias = -((1.0 - prior) / prior).ln();
        let nh = config.head.heat_channels(config.num_classes);
        let nr = config.head.reg_channels();
        let pw = Conv2dGeom::new((1, 1), (0, 0));
        let heat = [
            init_conv(&mut params, &mut rng, "head_heat.0", f, hw, 3, k3((1, 1)), true, relu_gain, 0.0),
            init_conv(&mut params, &mut rng, "head_heat.1", hw, nh, 1, pw, false, 0.1, heat_bias),
        ];
        let reg = [
            init_conv(&mut params, &mut rng, "head_reg.0", f, hw, 3, k3((1, 1)), true, relu_gain, 0.0),
            init_conv(&mut params, &mut rng, "head_reg.1", hw, nr, 1, pw, false, 0.1, 0.0),
        ];

        let mut order: Vec<usize> = (0..lattice.len()).collect();
        order.sort_by_key(|&i| {
            let id = lattice.layers()[i].id;
            (id.r.abs_diff(id.c), i)
        });

        Ok(Self { config, lattice, params, stem, diag_down, ext_right, ext_down, heat, reg, order })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces parameter values by name; every name must already exist with
    /// the same shape.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                named.len(),
                self.params.len()
            )));
        }
        for (name, t) in named {
            let p = self
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }

    fn conv(&self, c: ConvRef, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d(x, &self.params[c.weight].value, Some(&self.params[c.bias].value), c.geom)?;
        if c.relu {
            relu_inplace(&mut y);
        }
        Ok(y)
    }

    /// Backpropagates through one conv. `out` is its (post-activation)
    /// output; `grad` is consumed. Returns the input gradient when requested.
    fn conv_back(
        &self,
        c: ConvRef,
        input: &Tensor,
        out: &Tensor,
        mut grad: Tensor,
        grads: &mut [Tensor],
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        if c.relu {
            relu_backward_inplace(out, &mut grad);
        }
        let g = conv2d_backward(input, &self.params[c.weight].value, &grad, c.geom, need_input)?;
        grads[c.weight].add_assign(&g.weight);
        grads[c.bias].add_assign(&g.bias);
        Ok(g.input)
    }

    /// Generates every lattice feature map from the diagonal ones. Output is
    /// aligned with [`Lattice::layers`].
    pub fn build_matrix_features(&self, diagonals: &[Tensor]) -> Result<Vec<Tensor>> {
        if diagonals.len() != self.lattice.diagonal_len() {
            return Err(Error::Shape(format!(
                "{} diagonal features for a lattice with {} diagonal layers",
                diagonals.len(),
                self.lattice.diagonal_len()
            )));
        }
        let bs = self.lattice.spec().base_stride;
        let input_hw = (diagonals[0].h() * bs, diagonals[0].w() * bs);
        let mut feats: Vec<Option<Tensor>> = vec![None; self.lattice.len()];
        for &i in &self.order {
            let id = self.lattice.layers()[i].id;
            let f = if id.r == id.c {
                diagonals[id.r - 1].clone()
            } else {
                let (pred, conv) = if id.c > id.r {
                    (crate::lattice::LayerId::new(id.r, id.c - 1), self.ext_right)
                } else {
                    (crate::lattice::LayerId::new(id.r - 1, id.c), self.ext_down)
                };
                let pi = self
                    .lattice
                    .index_of(pred)
                    .ok_or_else(|| Error::Lattice(format!("layer {id} has no predecessor {pred}")))?;
                let parent = feats[pi].as_ref().expect("predecessor computed first");
                self.conv(conv, parent)?
            };
            let want = self.lattice.layers()[i].feature_shape(input_hw.0, input_hw.1);
            if f.hw() != want {
                return Err(Error::Shape(format!("feature {id} is {:?}, lattice expects {want:?}", f.hw())));
            }
            feats[i] = Some(f);
        }
        Ok(feats.into_iter().map(|f| f.expect("every layer computed")).collect())
    }

    /// Runs the network on `image [n, C, h, w]`, padding it bottom/right to a
    /// multiple of the largest stride first.
    pub fn forward(&self, image: &Tensor) -> Result<(Vec<LayerOutput>, ForwardCache)> {
        if image.c() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                image.c(),
                self.config.in_channels
            )));
        }
        let (ph, pw) = self.lattice.padded_size(image.h(), image.w());
        let mut stem = vec![image.pad_to(ph, pw)];
        for &c in &self.stem {
            let y = self.conv(c, stem.last().expect("stem input"))?;
            stem.push(y);
        }
        let mut diag = vec![stem.last().expect("stem output").clone()];
        for &c in &self.diag_down {
            let y = self.conv(c, diag.last().expect("diag input"))?;
            diag.push(y);
        }
        let feats = self.build_matrix_features(&diag)?;
        let mut outs = Vec::with_capacity(feats.len());
        let mut heat_hidden = Vec::with_capacity(feats.len());
        let mut reg_hidden = Vec::with_capacity(feats.len());
        for f in &feats {
            let hh = self.conv(self.heat[0], f)?;
            let heat_logits = self.conv(self.heat[1], &hh)?;
            let rh = self.conv(self.reg[0], f)?;
            let reg = self.conv(self.reg[1], &rh)?;
            heat_hidden.push(hh);
            reg_hidden.push(rh);
            outs.push(LayerOutput { heat_logits, reg });
        }
        Ok((outs, ForwardCache { stem, diag, feats, heat_hidden, reg_hidden }))
    }

    /// Parameter gradients given gradients of a scalar loss with respect to
    /// every layer output. Aligned with [`XNetModel::params`].
    pub fn backward(&self, cache: &ForwardCache, out_grads: &[LayerOutput]) -> Result<Vec<Tensor>> {
        if out_grads.len() != self.lattice.len() {
            return Err(Error::Shape("one output gradient per lattice layer expected".into()));
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        let mut feat_grads: Vec<Tensor> = cache.feats.iter().map(Tensor::zeros_like).collect();

        for (i, g) in out_grads.iter().enumerate() {
            let f = &cache.feats[i];
            let hh = &cache.heat_hidden[i];
            let out_h = Tensor::zeros([0, 0, 0, 0]);
            let gh = self
                .conv_back(self.heat[1], hh, &out_h, g.heat_logits.clone(), &mut grads, true)?
                .expect("input grad");
            let gf = self.conv_back(self.heat[0], f, hh, gh, &mut grads, true)?.expect("input grad");
            feat_grads[i].add_assign(&gf);

            let rh = &cache.reg_hidden[i];
            let gr = self
                .conv_back(self.reg[1], rh, &out_h, g.reg.clone(), &mut grads, true)?
                .expect("input grad");
            let gf = self.conv_back(self.reg[0], f, rh, gr, &mut grads, true)?.expect("input grad");
            feat_grads[i].add_assign(&gf);
        }

        for &i in self.order.iter().rev() {
            let id = self.lattice.layers()[i].id;
            if id.r == id.c {
                continue;
            }
            let (pred, conv) = if id.c > id.r {
                (crate::lattice::LayerId::new(id.r, id.c - 1), self.ext_right)
            } else {
                (crate::lattice::LayerId::new(id.r - 1, id.c), self.ext_down)
            };
            let pi = self.lattice.index_of(pred).expect("validated lattice");
            let g = std::mem::replace(&mut feat_grads[i], Tensor::zeros([0, 0, 0, 0]));
            let gp = self
                .conv_back(conv, &cache.feats[pi], &cache.feats[i], g, &mut grads, true)?
                .expect("input grad");
            feat_grads[pi].add_assign(&gp);
        }

        let mut diag_grads: Vec<Tensor> = cache.diag.iter().map(Tensor::zeros_like).collect();
        for (i, layer) in self.lattice.layers().iter().enumerate() {
            if layer.id.r == layer.id.c {
                diag_grads[layer.id.r - 1].add_assign(&feat_grads[i]);
            }
        }
        for k in (1..cache.diag.len()).rev() {
            let g = std::mem::replace(&mut diag_grads[k], Tensor::zeros([0, 0, 0, 0]));
            let gp = self
                .conv_back(self.diag_down[k - 1], &cache.diag[k - 1], &cache.diag[k], g, &mut grads, true)?
                .expect("input grad");
            diag_grads[k - 1].add_assign(&gp);
        }

        let mut g = std::mem::replace(&mut diag_grads[0], Tensor::zeros([0, 0, 0, 0]));
        for (j, &c) in self.stem.iter().enumerate().rev() {
            let need = j > 0;
            let gi = self.conv_back(c, &cache.stem[j], &cache.stem[j + 1], g, &mut grads, need)?;
            match gi {
                Some(t) => g = t,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Sigmoid heatmaps and split regression maps for sample `n`.
    pub fn centers_outputs(&self, outs: &[LayerOutput], n: usize) -> Vec<CentersOutput> {
        let c = self.config.num_classes;
        outs.iter()
            .map(|o| {
                let reg = o.reg.take_sample(n);
                CentersOutput {
                    heat: o.heat_logits.take_sample(n).map(sigmoid).channels(0, c),
                    tl_reg: reg.channels(0, 2),
                    br_reg: reg.channels(2, 2),
                }
            })
            .collect()
    }

    pub fn corners_outputs(&self, outs: &[LayerOutput], n: usize) -> Vec<CornersOutput> {
        let c = self.config.num_classes;
        outs.iter()
            .map(|o| {
                let heat = o.heat_logits.take_sample(n).map(sigmoid);
                let reg = o.reg.take_sample(n);
                CornersOutput {
                    tl_heat: heat.channels(0, c),
                    br_heat: heat.channels(c, c),
                    tl_off: reg.channels(0, 2),
                    br_off: reg.channels(2, 2),
                    tl_center_reg: reg.channels(4, 2),
                    br_center_reg: reg.channels(6, 2),
                }
            })
            .collect()
    }
}

/// Targets for one image, for either head.
#[derive(Debug, Clone)]
pub enum Targets {
    Centers(CentersTargets),
    Corners(CornersTargets),
}

fn check_out(out: &LayerOutput, nh: usize, nr: usize, hw: (usize, usize)) -> Result<()> {
    if out.heat_logits.shape() != [1, nh, hw.0, hw.1] || out.reg.shape() != [1, nr, hw.0, hw.1] {
        return Err(Error::Shape(format!(
            "layer output {:?}/{:?} does not match targets [1,{nh},{},{}]",
            out.heat_logits.shape(),
            out.reg.shape(),
            hw.0,
            hw.1
        )));
    }
    Ok(())
}

/// Loss of a single-image forward pass and its gradient with respect to the
/// layer outputs. Heat terms are pooled over layers and divided by the
/// number of positive cells; each regression family is averaged over its
/// masked elements.
pub fn loss_and_grads(outs: &[LayerOutput], targets: &Targets, w: &LossWeights) -> Result<(LossReport, Vec<LayerOutput>)> {
    let mut heat_sum = 0.0;
    let mut n_pos = 0usize;
    // (sum, count) for regression families: [reg, off]
    let mut fam = [(0.0, 0usize); 2];
    let mut per_layer_heat = Vec::new();
    let mut per_layer_reg: Vec<[f64; 2]> = Vec::new();
    let mut grads = Vec::with_capacity(outs.len());
    // Per-layer raw grads, normalized once the pooled counts are known.
    let mut raw: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = Vec::new();

    let ids: Vec<_>;
    match targets {
        Targets::Centers(t) => {
            if t.layers.len() != outs.len() {
                return Err(Error::Shape("targets and outputs differ in layer count".into()));
            }
            ids = t.layers.iter().map(|l| l.id).collect();
            for (o, l) in outs.iter().zip(&t.layers) {
                let hw = l.heat.hw();
                check_out(o, l.heat.c(), 4, hw)?;
                let fs = focal_sum_logits(o.heat_logits.data(), l.heat.data(), w.alpha, w.beta)?;
                heat_sum += fs.sum;
                n_pos += fs.count;
                per_layer_heat.push(fs.sum);
                let target = Tensor::concat_channels(&[&l.tl_reg, &l.br_reg])?;
                let mask = expand_mask(&l.mask, 4);
                let rs = smooth_l1_sum(o.reg.data(), target.data(), &mask, w.smooth_l1_delta)?;
                fam[0].0 += rs.sum;
                fam[0].1 += rs.count;
                per_layer_reg.push([rs.sum, 0.0]);
                let family = vec![0usize; rs.grad.len()];
                raw.push((fs.grad, rs.grad, family));
            }
        }
        Targets::Corners(t) => {
            if t.layers.len() != outs.len() {
                return Err(Error::Shape("targets and outputs differ in layer count".into()));
            }
            ids = t.layers.iter().map(|l| l.id).collect();
            for (o, l) in outs.iter().zip(&t.layers) {
                let hw = l.tl_heat.hw();
                check_out(o, 2 * l.tl_heat.c(), 8, hw)?;
                let heat_t = Tensor::concat_channels(&[&l.tl_heat, &l.br_heat])?;
                let fs = focal_sum_logits(o.heat_logits.data(), heat_t.data(), w.alpha, w.beta)?;
                heat_sum += fs.sum;
                n_pos += fs.count;
                per_layer_heat.push(fs.sum);

                let target = Tensor::concat_channels(&[&l.tl_off, &l.br_off, &l.tl_center_reg, &l.br_center_reg])?;
                let mut mask = expand_mask(&l.tl_mask, 2);
                mask.extend(expand_mask(&l.br_mask, 2));
                mask.extend(expand_mask(&l.tl_mask, 2));
                mask.extend(expand_mask(&l.br_mask, 2));
                // Channels 0..4 are offsets, 4..8 center regressions.
                let p4 = 4 * hw.0 * hw.1;
                let (x, y) = (o.reg.data(), target.data());
                let off = smooth_l1_sum(&x[..p4], &y[..p4], &mask[..p4], w.smooth_l1_delta)?;
                let creg = smooth_l1_sum(&x[p4..], &y[p4..], &mask[p4..], w.smooth_l1_delta)?;
                let sums = [creg.sum, off.sum];
                fam[0].0 += creg.sum;
                fam[0].1 += creg.count;
                fam[1].0 += off.sum;
                fam[1].1 += off.count;
                let mut family = vec![1usize; p4];
                family.extend(std::iter::repeat(0).take(p4));
                let mut rg = off.grad;
                rg.extend(creg.grad);
                per_layer_reg.push(sums);
                raw.push((fs.grad, rg, family));
            }
        }
    }

    let norm = n_pos.max(1) as f64;
    let weights = [w.reg, w.off];
    let fam_n = [fam[0].1.max(1) as f64, fam[1].1.max(1) as f64];
    for (i, (hg, rg, family)) in raw.into_iter().enumerate() {
        let o = &outs[i];
        let heat = Tensor::from_vec(o.heat_logits.shape(), hg.into_iter().map(|g| g / norm).collect())?;
        let reg = Tensor::from_vec(
            o.reg.shape(),
            rg.into_iter().zip(family).map(|(g, f)| g * weights[f] / fam_n[f]).collect(),
        )?;
        grads.push(LayerOutput { heat_logits: heat, reg });
    }

    let heat_loss = heat_sum / norm;
    let reg_loss = weights[0] * fam[0].0 / fam_n[0] + weights[1] * fam[1].0 / fam_n[1];
    let per_layer = ids
        .into_iter()
        .zip(per_layer_heat.iter().zip(&per_layer_reg))
        .map(|(id, (&h, r))| LayerLoss {
            id,
            heat: h / norm,
            reg: weights[0] * r[0] / fam_n[0] + weights[1] * r[1] / fam_n[1],
        })
        .collect();
    let report = LossReport { heat_loss, reg_loss, total: heat_loss + reg_loss, per_layer, normalizer: norm };
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadKind, preset: &str) -> XNetModel {
        let mut cfg = ModelConfig::new(head, 2, LatticeSpec::preset(preset).unwrap());
        cfg.width = 4;
        cfg.head_width = 4;
        XNetModel::new(cfg, 7).unwrap()
    }

    #[test]
    fn output_channels_per_head() {
        let img = Tensor::zeros([1, 3, 128, 128]);
        let m = tiny(HeadKind::Centers, "xnet19");
        let (outs, _) = m.forward(&img).unwrap();
        assert_eq!(outs.len(), 19);
        assert!(outs.iter().all(|o| o.heat_logits.c() + o.reg.c() == 2 + 4));
        let m = tiny(HeadKind::Corners, "xnet19");
        let (outs, _) = m.forward(&img).unwrap();
        assert!(outs.iter().all(|o| o.heat_logits.c() + o.reg.c() == 2 * 2 + 4 + 4));
    }

    #[test]
    fn extension_convs_are_shared() {
        for preset in ["fpn5", "xnet19", "full25"] {
            let m = tiny(HeadKind::Corners, preset);
            let count = |p: &str| m.params().iter().filter(|q| q.name.starts_with(p)).count();
            assert_eq!(count("ext_right"), 2);
            assert_eq!(count("ext_down"), 2);
            assert_eq!(count("head_heat"), 4);
        }
    }

    #[test]
    fn matrix_feature_shapes_at_512() {
        let m = tiny(HeadKind::Centers, "xnet19");
        let diags: Vec<Tensor> = (0..5).map(|k| Tensor::full([1, 4, 64 >> k, 64 >> k], 0.5)).collect();
        let feats = m.build_matrix_features(&diags).unwrap();
        let i13 = m.lattice().index_of(crate::lattice::LayerId::new(1, 3)).unwrap();
        assert_eq!(feats[i13].hw(), (64, 16));
        let bad: Vec<Tensor> = (0..5).map(|_| Tensor::zeros([1, 4, 8, 8])).collect();
        assert!(m.build_matrix_features(&bad).is_err());
    }

    #[test]
    fn fpn_features_are_the_diagonals() {
        let m = tiny(HeadKind::Centers, "fpn5");
        let diags: Vec<Tensor> = (0..5).map(|k| Tensor::full([1, 4, 16 >> k, 16 >> k], k as f64)).collect();
        assert_eq!(m.build_matrix_features(&diags).unwrap(), diags);
    }

    #[test]
    fn zeroing_right_extension_zeroes_upper_triangle() {
        let mut m = tiny(HeadKind::Centers, "xnet19");
        for p in m.params_mut() {
            if p.name.starts_with("ext_right") {
                p.value.fill(0.0);
            }
        }
        let diags: Vec<Tensor> = (0..5).map(|k| Tensor::full([1, 4, 64 >> k, 64 >> k], 1.0)).collect();
        let feats = m.build_matrix_features(&diags).unwrap();
        for (l, f) in m.lattice().layers().iter().zip(&feats) {
            if l.id.c > l.id.r {
                assert!(f.data().iter().all(|&v| v == 0.0), "layer {} not zero", l.id);
            } else {
                assert!(f.data().iter().any(|&v| v != 0.0), "layer {} zero", l.id);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny(HeadKind::Corners, "xnet19");
        let img = Tensor::from_vec([1, 3, 128, 128], (0..3 * 128 * 128).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap();
        let (a, _) = m.forward(&img).unwrap();
        let (b, _) = m.forward(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(tiny(HeadKind::Corners, "xnet19").params(), m.params());
    }
}
