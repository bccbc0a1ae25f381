//! Network definition: backbone, heads, parameter registry, checkpointing
//! and eval-mode inference helpers.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{
    read_checkpoint, write_checkpoint, BatchNorm, BnStats, Conv2d, Element, Linear, Mode, NnError,
    Tape, Tensor, Var,
};
use crate::pipeline::NormalizedCrop;
use crate::seed;

/// Architecture hyperparameters. The defaults follow the eight-layer
/// conv+BN backbone with skip connections between equal-shape maps and land
/// well under the 4M parameter budget; channel widths and head sizes are
/// configuration, not contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Channel plan: input channels followed by the output channels of each
    /// backbone layer.
    pub backbone_channels: Vec<usize>,
    /// Stride per backbone layer (1 or 2).
    pub backbone_strides: Vec<usize>,
    /// Viewpoint embedding dimension.
    pub embed_dim: usize,
    pub embed_head_channels: usize,
    pub inplane_head_channels: usize,
    pub inplane_hidden: usize,
    pub verify_head_channels: usize,
    /// Square input side in pixels.
    pub input_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![1, 16, 32, 32, 64, 64, 128, 128, 128],
            backbone_strides: vec![2, 1, 2, 1, 2, 1, 2, 1],
            embed_dim: 64,
            embed_head_channels: 128,
            inplane_head_channels: 64,
            inplane_hidden: 128,
            verify_head_channels: 128,
            input_size: 128,
        }
    }
}

impl NetworkConfig {
    /// A reduced plan for fast tests: same topology, smaller maps.
    pub fn tiny(input_size: usize) -> Self {
        Self {
            backbone_channels: vec![1, 4, 4, 8, 8, 8, 8, 8, 8],
            backbone_strides: vec![2, 1, 2, 1, 2, 1, 2, 1],
            embed_dim: 8,
            embed_head_channels: 8,
            inplane_head_channels: 8,
            inplane_hidden: 16,
            verify_head_channels: 8,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.backbone_channels.len() != self.backbone_strides.len() + 1 {
            return Err(ModelError::InvalidConfig(format!(
                "{} channels for {} strides",
                self.backbone_channels.len(),
                self.backbone_strides.len()
            )));
        }
        if self.backbone_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(ModelError::InvalidConfig("strides must be 1 or 2".into()));
        }
        let down: usize = self.backbone_strides.iter().product();
        if self.input_size % down != 0 || self.input_size / down < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "input size {} does not divide down to a usable map (stride product {down})",
                self.input_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(ModelError::InvalidConfig("embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side of the shared feature map.
    pub fn feature_map_size(&self) -> usize {
        self.input_size / self.backbone_strides.iter().product::<usize>()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("nonempty plan")
    }
}

/// The pose network parameters.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    backbone: Vec<(Conv2d<T>, BatchNorm<T>)>,
    embed_conv: Conv2d<T>,
    embed_bn: BatchNorm<T>,
    embed_fc: Linear<T>,
    inplane_conv: Conv2d<T>,
    inplane_bn: BatchNorm<T>,
    inplane_fc1: Linear<T>,
    inplane_fc2: Linear<T>,
    verify_conv1: Conv2d<T>,
    verify_bn1: BatchNorm<T>,
    verify_conv2: Conv2d<T>,
    verify_bn2: BatchNorm<T>,
    verify_fc: Linear<T>,
}

/// Tape handles for every parameter, produced by [`Network::bind`].
pub struct BoundNetwork {
    backbone: Vec<(Var, Var, Var, Var)>, // conv w, conv b, bn gamma, bn beta
    embed_conv: (Var, Var),
    embed_bn: (Var, Var),
    embed_fc: (Var, Var),
    inplane_conv: (Var, Var),
    inplane_bn: (Var, Var),
    inplane_fc1: (Var, Var),
    inplane_fc2: (Var, Var),
    verify_conv1: (Var, Var),
    verify_bn1: (Var, Var),
    verify_conv2: (Var, Var),
    verify_bn2: (Var, Var),
    verify_fc: (Var, Var),
}

impl BoundNetwork {
    /// Parameter vars in the canonical `named_params` order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for (w, b, g, be) in &self.backbone {
            v.extend([*w, *b, *g, *be]);
        }
        for (w, b) in [
            self.embed_conv,
            self.embed_bn,
            self.embed_fc,
            self.inplane_conv,
            self.inplane_bn,
            self.inplane_fc1,
            self.inplane_fc2,
            self.verify_conv1,
            self.verify_bn1,
            self.verify_conv2,
            self.verify_bn2,
            self.verify_fc,
        ] {
            v.extend([w, b]);
        }
        v
    }
}

impl<T: Element> Network<T> {
    pub fn new(config: NetworkConfig, seed_value: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(seed_value, "model/init", 0);
        let mut backbone = Vec::new();
        for i in 0..config.backbone_strides.len() {
            let (cin, cout) = (config.backbone_channels[i], config.backbone_channels[i + 1]);
            backbone.push((
                Conv2d::init(cin, cout, config.backbone_strides[i], &mut rng),
                BatchNorm::init(cout),
            ));
        }
        let fc_ch = config.feature_channels();
        let fm = config.feature_map_size();
        let embed_conv = Conv2d::init(fc_ch, config.embed_head_channels, 1, &mut rng);
        let embed_bn = BatchNorm::init(config.embed_head_channels);
        let embed_fc = Linear::init(config.embed_head_channels, config.embed_dim, &mut rng);
        let inplane_conv = Conv2d::init(2 * fc_ch, config.inplane_head_channels, 1, &mut rng);
        let inplane_bn = BatchNorm::init(config.inplane_head_channels);
        let inplane_fc1 = Linear::init(
            config.inplane_head_channels * fm * fm,
            config.inplane_hidden,
            &mut rng,
        );
        let inplane_fc2 = Linear::init(config.inplane_hidden, 2, &mut rng);
        let verify_conv1 = Conv2d::init(2 * fc_ch, config.verify_head_channels, 1, &mut rng);
        let verify_bn1 = BatchNorm::init(config.verify_head_channels);
        let verify_conv2 = Conv2d::init(
            config.verify_head_channels,
            config.verify_head_channels,
            1,
            &mut rng,
        );
        let verify_bn2 = BatchNorm::init(config.verify_head_channels);
        let verify_fc = Linear::init(config.verify_head_channels, 1, &mut rng);
        Ok(Self {
            config,
            backbone,
            embed_conv,
            embed_bn,
            embed_fc,
            inplane_conv,
            inplane_bn,
            inplane_fc1,
            inplane_fc2,
            verify_conv1,
            verify_bn1,
            verify_conv2,
            verify_bn2,
            verify_fc,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for (c, b) in &self.backbone {
            n += c.parameter_count() + b.parameter_count();
        }
        n += self.embed_conv.parameter_count()
            + self.embed_bn.parameter_count()
            + self.embed_fc.parameter_count();
        n += self.inplane_conv.parameter_count()
            + self.inplane_bn.parameter_count()
            + self.inplane_fc1.parameter_count()
            + self.inplane_fc2.parameter_count();
        n += self.verify_conv1.parameter_count()
            + self.verify_bn1.parameter_count()
            + self.verify_conv2.parameter_count()
            + self.verify_bn2.parameter_count()
            + self.verify_fc.parameter_count();
        n
    }

    /// Named trainable parameters in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (i, (c, b)) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.conv.weight"), &c.weight));
            out.push((format!("backbone.{i}.conv.bias"), &c.bias));
            out.push((format!("backbone.{i}.bn.gamma"), &b.gamma));
            out.push((format!("backbone.{i}.bn.beta"), &b.beta));
        }
        out.push(("embed.conv.weight".into(), &self.embed_conv.weight));
        out.push(("embed.conv.bias".into(), &self.embed_conv.bias));
        out.push(("embed.bn.gamma".into(), &self.embed_bn.gamma));
        out.push(("embed.bn.beta".into(), &self.embed_bn.beta));
        out.push(("embed.fc.weight".into(), &self.embed_fc.weight));
        out.push(("embed.fc.bias".into(), &self.embed_fc.bias));
        out.push(("inplane.conv.weight".into(), &self.inplane_conv.weight));
        out.push(("inplane.conv.bias".into(), &self.inplane_conv.bias));
        out.push(("inplane.bn.gamma".into(), &self.inplane_bn.gamma));
        out.push(("inplane.bn.beta".into(), &self.inplane_bn.beta));
        out.push(("inplane.fc1.weight".into(), &self.inplane_fc1.weight));
        out.push(("inplane.fc1.bias".into(), &self.inplane_fc1.bias));
        out.push(("inplane.fc2.weight".into(), &self.inplane_fc2.weight));
        out.push(("inplane.fc2.bias".into(), &self.inplane_fc2.bias));
        out.push(("verify.conv1.weight".into(), &self.verify_conv1.weight));
        out.push(("verify.conv1.bias".into(), &self.verify_conv1.bias));
        out.push(("verify.bn1.gamma".into(), &self.verify_bn1.gamma));
        out.push(("verify.bn1.beta".into(), &self.verify_bn1.beta));
        out.push(("verify.conv2.weight".into(), &self.verify_conv2.weight));
        out.push(("verify.conv2.bias".into(), &self.verify_conv2.bias));
        out.push(("verify.bn2.gamma".into(), &self.verify_bn2.gamma));
        out.push(("verify.bn2.beta".into(), &self.verify_bn2.beta));
        out.push(("verify.fc.weight".into(), &self.verify_fc.weight));
        out.push(("verify.fc.bias".into(), &self.verify_fc.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, (c, b)) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.conv.weight"), &mut c.weight));
            out.push((format!("backbone.{i}.conv.bias"), &mut c.bias));
            out.push((format!("backbone.{i}.bn.gamma"), &mut b.gamma));
            out.push((format!("backbone.{i}.bn.beta"), &mut b.beta));
        }
        out.push(("embed.conv.weight".into(), &mut self.embed_conv.weight));
        out.push(("embed.conv.bias".into(), &mut self.embed_conv.bias));
        out.push(("embed.bn.gamma".into(), &mut self.embed_bn.gamma));
        out.push(("embed.bn.beta".into(), &mut self.embed_bn.beta));
        out.push(("embed.fc.weight".into(), &mut self.embed_fc.weight));
        out.push(("embed.fc.bias".into(), &mut self.embed_fc.bias));
        out.push(("inplane.conv.weight".into(), &mut self.inplane_conv.weight));
        out.push(("inplane.conv.bias".into(), &mut self.inplane_conv.bias));
        out.push(("inplane.bn.gamma".into(), &mut self.inplane_bn.gamma));
        out.push(("inplane.bn.beta".into(), &mut self.inplane_bn.beta));
        out.push(("inplane.fc1.weight".into(), &mut self.inplane_fc1.weight));
        out.push(("inplane.fc1.bias".into(), &mut self.inplane_fc1.bias));
        out.push(("inplane.fc2.weight".into(), &mut self.inplane_fc2.weight));
        out.push(("inplane.fc2.bias".into(), &mut self.inplane_fc2.bias));
        out.push(("verify.conv1.weight".into(), &mut self.verify_conv1.weight));
        out.push(("verify.conv1.bias".into(), &mut self.verify_conv1.bias));
        out.push(("verify.bn1.gamma".into(), &mut self.verify_bn1.gamma));
        out.push(("verify.bn1.beta".into(), &mut self.verify_bn1.beta));
        out.push(("verify.conv2.weight".into(), &mut self.verify_conv2.weight));
        out.push(("verify.conv2.bias".into(), &mut self.verify_conv2.bias));
        out.push(("verify.bn2.gamma".into(), &mut self.verify_bn2.gamma));
        out.push(("verify.bn2.beta".into(), &mut self.verify_bn2.beta));
        out.push(("verify.fc.weight".into(), &mut self.verify_fc.weight));
        out.push(("verify.fc.bias".into(), &mut self.verify_fc.bias));
        out
    }

    /// Number of batch-norm layers in canonical slot order: backbone layers,
    /// then embed, inplane, verify1, verify2.
    pub fn bn_count(&self) -> usize {
        self.backbone.len() + 4
    }

    fn bn_by_slot_mut(&mut self, slot: usize) -> &mut BatchNorm<T> {
        let nb = self.backbone.len();
        match slot {
            s if s < nb => &mut self.backbone[s].1,
            s if s == nb => &mut self.embed_bn,
            s if s == nb + 1 => &mut self.inplane_bn,
            s if s == nb + 2 => &mut self.verify_bn1,
            s if s == nb + 3 => &mut self.verify_bn2,
            s => panic!("bn slot {s} out of range"),
        }
    }

    fn bn_by_slot(&self, slot: usize) -> &BatchNorm<T> {
        let nb = self.backbone.len();
        match slot {
            s if s < nb => &self.backbone[s].1,
            s if s == nb => &self.embed_bn,
            s if s == nb + 1 => &self.inplane_bn,
            s if s == nb + 2 => &self.verify_bn1,
            s if s == nb + 3 => &self.verify_bn2,
            s => panic!("bn slot {s} out of range"),
        }
    }

    /// Fold train-mode batch statistics into running statistics, in slot
    /// order (deterministic for a fixed shard order).
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BnStats)]) {
        for (slot, stats) in updates {
            self.bn_by_slot_mut(*slot).update_running(stats);
        }
    }

    /// Register every parameter on the tape. `trainable` controls whether
    /// gradients flow to them.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundNetwork, NnError> {
        let mut bind2 = |tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>| -> Result<(Var, Var), NnError> {
            Ok((
                tape.leaf(a.clone(), trainable)?,
                tape.leaf(b.clone(), trainable)?,
            ))
        };
        let mut backbone = Vec::new();
        for (c, bn) in &self.backbone {
            let (w, b) = bind2(tape, &c.weight, &c.bias)?;
            let (g, be) = bind2(tape, &bn.gamma, &bn.beta)?;
            backbone.push((w, b, g, be));
        }
        Ok(BoundNetwork {
            backbone,
            embed_conv: bind2(tape, &self.embed_conv.weight, &self.embed_conv.bias)?,
            embed_bn: bind2(tape, &self.embed_bn.gamma, &self.embed_bn.beta)?,
            embed_fc: bind2(tape, &self.embed_fc.weight, &self.embed_fc.bias)?,
            inplane_conv: bind2(tape, &self.inplane_conv.weight, &self.inplane_conv.bias)?,
            inplane_bn: bind2(tape, &self.inplane_bn.gamma, &self.inplane_bn.beta)?,
            inplane_fc1: bind2(tape, &self.inplane_fc1.weight, &self.inplane_fc1.bias)?,
            inplane_fc2: bind2(tape, &self.inplane_fc2.weight, &self.inplane_fc2.bias)?,
            verify_conv1: bind2(tape, &self.verify_conv1.weight, &self.verify_conv1.bias)?,
            verify_bn1: bind2(tape, &self.verify_bn1.gamma, &self.verify_bn1.beta)?,
            verify_conv2: bind2(tape, &self.verify_conv2.weight, &self.verify_conv2.bias)?,
            verify_bn2: bind2(tape, &self.verify_bn2.gamma, &self.verify_bn2.beta)?,
            verify_fc: bind2(tape, &self.verify_fc.weight, &self.verify_fc.bias)?,
        })
    }

    fn bn_apply(
        &self,
        tape: &mut Tape<T>,
        slot: usize,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        updates: &mut Vec<(usize, BnStats)>,
    ) -> Result<Var, NnError> {
        let bn = self.bn_by_slot(slot);
        let (y, stats) = tape.batch_norm(
            x,
            gamma,
            beta,
            &bn.running_mean,
            &bn.running_var,
            bn.eps,
            mode,
        )?;
        if let Some(s) = stats {
            updates.push((slot, s));
        }
        Ok(y)
    }

    /// Shared backbone: conv+BN+ReLU layers with skip connections wherever a
    /// stride-1 layer preserves the channel count (equal-shape maps).
    pub fn backbone_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundNetwork,
        x: Var,
        mode: Mode,
        updates: &mut Vec<(usize, BnStats)>,
    ) -> Result<Var, NnError> {
        let mut cur = x;
        for (i, (conv, _)) in self.backbone.iter().enumerate() {
            let (w, b, g, be) = bound.backbone[i];
            let prev = cur;
            let c = tape.conv2d(cur, w, b, conv.stride)?;
            let n = self.bn_apply(tape, i, c, g, be, mode, updates)?;
            cur = tape.relu(n)?;
            let same_shape = conv.stride == 1
                && self.config.backbone_channels[i] == self.config.backbone_channels[i + 1];
            if same_shape {
                cur = tape.add(cur, prev)?;
            }
        }
        Ok(cur)
    }

    /// Viewpoint-embedding head: conv+BN+ReLU, global average pool, FC,
    /// L2 normalization. Output `[N, embed_dim]` with unit rows.
    pub fn embed_from_map(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundNetwork,
        fmap: Var,
        mode: Mode,
        updates: &mut Vec<(usize, BnStats)>,
    ) -> Result<Var, NnError> {
        let slot = self.backbone.len();
        let (w, b) = bound.embed_conv;
        let (g, be) = bound.embed_bn;
        let c = tape.conv2d(fmap, w, b, 1)?;
        let n = self.bn_apply(tape, slot, c, g, be, mode, updates)?;
        let r = tape.relu(n)?;
        let p = tape.global_avg_pool(r)?;
        let (fw, fb) = bound.embed_fc;
        let e = tape.linear(p, fw, fb)?;
        tape.l2_normalize_rows(e)
    }

    /// In-plane regression head over a (from, to) feature-map pair: returns
    /// the unit 2-vector `(ϑ₁, ϑ₂)` of the rotation taking `from` to `to`.
    pub fn inplane_from_maps(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundNetwork,
        from: Var,
        to: Var,
        mode: Mode,
        updates: &mut Vec<(usize, BnStats)>,
    ) -> Result<Var, NnError> {
        let slot = self.backbone.len() + 1;
        let cat = tape.concat_channels(from, to)?;
        let (w, b) = bound.inplane_conv;
        let (g, be) = bound.inplane_bn;
        let c = tape.conv2d(cat, w, b, 1)?;
        let n = self.bn_apply(tape, slot, c, g, be, mode, updates)?;
        let r = tape.relu(n)?;
        let flat = tape.flatten_rows(r)?;
        let (w1, b1) = bound.inplane_fc1;
        let h = tape.linear(flat, w1, b1)?;
        let h = tape.relu(h)?;
        let (w2, b2) = bound.inplane_fc2;
        let raw = tape.linear(h, w2, b2)?;
        tape.l2_normalize_rows(raw)
    }

    /// Verification head over `[transformed; other]`: two conv+BN+ReLU
    /// blocks, pooling and FC to a scalar consistency score per sample.
    pub fn verify_from_maps(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundNetwork,
        transformed: Var,
        other: Var,
        mode: Mode,
        updates: &mut Vec<(usize, BnStats)>,
    ) -> Result<Var, NnError> {
        let nb = self.backbone.len();
        let cat = tape.concat_channels(transformed, other)?;
        let (w1, b1) = bound.verify_conv1;
        let (g1, be1) = bound.verify_bn1;
        let c1 = tape.conv2d(cat, w1, b1, 1)?;
        let n1 = self.bn_apply(tape, nb + 2, c1, g1, be1, mode, updates)?;
        let r1 = tape.relu(n1)?;
        let (w2, b2) = bound.verify_conv2;
        let (g2, be2) = bound.verify_bn2;
        let c2 = tape.conv2d(r1, w2, b2, 1)?;
        let n2 = self.bn_apply(tape, nb + 3, c2, g2, be2, mode, updates)?;
        let r2 = tape.relu(n2)?;
        let p = tape.global_avg_pool(r2)?;
        let (fw, fb) = bound.verify_fc;
        let s = tape.linear(p, fw, fb)?;
        let n = tape.value(s).shape()[0];
        tape.reshape(s, &[n])
    }
}

/// A normalized crop as a `[1, S, S]` network input tensor.
pub fn crop_to_tensor<T: Element>(crop: &NormalizedCrop) -> Tensor<T> {
    let s = crop.size as usize;
    Tensor::from_vec(
        &[1, s, s],
        crop.values.iter().map(|&v| T::from_f64(f64::from(v))).collect(),
    )
    .expect("crop tensor")
}

/// Eval-mode outputs for one crop.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Unit-norm viewpoint embedding.
    pub embedding: Vec<f32>,
    /// Shared feature map `[C, h, w]` consumed by the other heads.
    pub feature_map: Tensor<f32>,
}

impl Network<f32> {
    /// Encode crops in eval mode (batched). Returns the embedding and the
    /// shared feature map for each crop.
    pub fn encode_batch(&self, crops: &[&NormalizedCrop]) -> Result<Vec<Encoded>, ModelError> {
        if crops.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.config.input_size;
        let n = crops.len();
        let mut data = Vec::with_capacity(n * s * s);
        for c in crops {
            if c.size as usize != s {
                return Err(ModelError::InvalidArgument(format!(
                    "crop size {} does not match network input {s}",
                    c.size
                )));
            }
            data.extend(c.values.iter().copied());
        }
        let input = Tensor::from_vec(&[n, 1, s, s], data).map_err(ModelError::Nn)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.leaf(input, false)?;
        let mut updates = Vec::new();
        let fmap = self.backbone_forward(&mut tape, &bound, x, Mode::Eval, &mut updates)?;
        let emb = self.embed_from_map(&mut tape, &bound, fmap, Mode::Eval, &mut updates)?;

        let dim = self.config.embed_dim;
        let fms = self.config.feature_map_size();
        let fmc = self.config.feature_channels();
        let emb_data = tape.value(emb).data();
        let map_data = tape.value(fmap).data();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(Encoded {
                embedding: emb_data[i * dim..(i + 1) * dim].to_vec(),
                feature_map: Tensor::from_vec(
                    &[fmc, fms, fms],
                    map_data[i * fmc * fms * fms..(i + 1) * fmc * fms * fms].to_vec(),
                )
                .map_err(ModelError::Nn)?,
            });
        }
        Ok(out)
    }

    pub fn encode_one(&self, crop: &NormalizedCrop) -> Result<Encoded, ModelError> {
        Ok(self.encode_batch(&[crop])?.remove(0))
    }

    /// Regress the in-plane unit vector taking `from`'s view to `to`'s, in
    /// eval mode. Inputs are `[C, h, w]` feature maps from [`Self::encode_batch`].
    pub fn regress_inplane_pair(
        &self,
        from_map: &Tensor<f32>,
        to_map: &Tensor<f32>,
    ) -> Result<[f32; 2], ModelError> {
        let out = self.regress_inplane_batch(&[(from_map, to_map)])?;
        Ok(out[0])
    }

    /// Batched in-plane regression over (from, to) feature-map pairs.
    pub fn regress_inplane_batch(
        &self,
        pairs: &[(&Tensor<f32>, &Tensor<f32>)],
    ) -> Result<Vec<[f32; 2]>, ModelError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let (from, to) = self.stack_map_pairs(pairs)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let f = tape.leaf(from, false)?;
        let t = tape.leaf(to, false)?;
        let mut updates = Vec::new();
        let theta = self.inplane_from_maps(&mut tape, &bound, f, t, Mode::Eval, &mut updates)?;
        let d = tape.value(theta).data();
        Ok((0..pairs.len()).map(|i| [d[i * 2], d[i * 2 + 1]]).collect())
    }

    /// Verification score for a retrieved candidate against the observed
    /// map: the candidate map is rotated by the estimated in-plane vector
    /// and scored as `[transformed; observed]`.
    pub fn verify_candidate(
        &self,
        cand_map: &Tensor<f32>,
        theta: [f32; 2],
        real_map: &Tensor<f32>,
    ) -> Result<f32, ModelError> {
        Ok(self.verify_candidates_batch(&[(cand_map, theta, real_map)])?[0])
    }

    /// Batched candidate verification.
    pub fn verify_candidates_batch(
        &self,
        items: &[(&Tensor<f32>, [f32; 2], &Tensor<f32>)],
    ) -> Result<Vec<f32>, ModelError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let pairs: Vec<(&Tensor<f32>, &Tensor<f32>)> =
            items.iter().map(|(c, _, r)| (*c, *r)).collect();
        let (cand, real) = self.stack_map_pairs(&pairs)?;
        let mut theta_data = Vec::with_capacity(items.len() * 2);
        for (_, th, _) in items {
            theta_data.extend_from_slice(th);
        }
        let theta = Tensor::from_vec(&[items.len(), 2], theta_data).map_err(ModelError::Nn)?;

        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let c = tape.leaf(cand, false)?;
        let r = tape.leaf(real, false)?;
        let th = tape.leaf(theta, false)?;
        let rotated = tape.rotate2d(c, th)?;
        let mut updates = Vec::new();
        let s = self.verify_from_maps(&mut tape, &bound, rotated, r, Mode::Eval, &mut updates)?;
        Ok(tape.value(s).data().to_vec())
    }

    fn stack_map_pairs(
        &self,
        pairs: &[(&Tensor<f32>, &Tensor<f32>)],
    ) -> Result<(Tensor<f32>, Tensor<f32>), ModelError> {
        let fms = self.config.feature_map_size();
        let fmc = self.config.feature_channels();
        let expect = [fmc, fms, fms];
        let mut fd = Vec::new();
        let mut td = Vec::new();
        for (f, t) in pairs {
            if f.shape() != expect || t.shape() != expect {
                return Err(ModelError::InvalidArgument(format!(
                    "feature map shape {:?}/{:?}, expected {expect:?}",
                    f.shape(),
                    t.shape()
                )));
            }
            fd.extend_from_slice(f.data());
            td.extend_from_slice(t.data());
        }
        let shape = [pairs.len(), fmc, fms, fms];
        Ok((
            Tensor::from_vec(&shape, fd).map_err(ModelError::Nn)?,
            Tensor::from_vec(&shape, td).map_err(ModelError::Nn)?,
        ))
    }

    /// Write all parameters and batch-norm running statistics.
    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        let mut entries: Vec<(String, Tensor<f32>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for slot in 0..self.bn_count() {
            let bn = self.bn_by_slot(slot);
            let name = self.bn_slot_name(slot);
            entries.push((
                format!("{name}.running_mean"),
                Tensor::from_vec(
                    &[bn.running_mean.len()],
                    bn.running_mean.iter().map(|&v| v as f32).collect(),
                )
                .map_err(ModelError::Nn)?,
            ));
            entries.push((
                format!("{name}.running_var"),
                Tensor::from_vec(
                    &[bn.running_var.len()],
                    bn.running_var.iter().map(|&v| v as f32).collect(),
                )
                .map_err(ModelError::Nn)?,
            ));
        }
        let refs: Vec<(String, &Tensor<f32>)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_checkpoint(path, &refs).map_err(ModelError::Nn)
    }

    fn bn_slot_name(&self, slot: usize) -> String {
        let nb = self.backbone.len();
        match slot {
            s if s < nb => format!("backbone.{s}.bn"),
            s if s == nb => "embed.bn".into(),
            s if s == nb + 1 => "inplane.bn".into(),
            s if s == nb + 2 => "verify.bn1".into(),
            _ => "verify.bn2".into(),
        }
    }

    /// Load parameters and running statistics from a checkpoint written for
    /// the same architecture.
    pub fn load_checkpoint(&mut self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        let records = read_checkpoint(path).map_err(ModelError::Nn)?;
        let mut by_name: std::collections::HashMap<String, Tensor<f32>> =
            records.into_iter().map(|r| (r.name, r.tensor)).collect();
        for (name, param) in self.named_params_mut() {
            let Some(t) = by_name.remove(&name) else {
                return Err(ModelError::CheckpointMismatch(format!(
                    "missing record {name}"
                )));
            };
            if t.shape() != param.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "{name}: checkpoint {:?} vs network {:?}",
                    t.shape(),
                    param.shape()
                )));
            }
            *param = t;
        }
        for slot in 0..self.bn_count() {
            let name = self.bn_slot_name(slot);
            for suffix in ["running_mean", "running_var"] {
                let key = format!("{name}.{suffix}");
                let Some(t) = by_name.remove(&key) else {
                    return Err(ModelError::CheckpointMismatch(format!(
                        "missing record {key}"
                    )));
                };
                let bn = self.bn_by_slot_mut(slot);
                let dst = if suffix == "running_mean" {
                    &mut bn.running_mean
                } else {
                    &mut bn.running_var
                };
                if t.len() != dst.len() {
                    return Err(ModelError::CheckpointMismatch(format!(
                        "{key}: {} channels vs {}",
                        t.len(),
                        dst.len()
                    )));
                }
                *dst = t.data().iter().map(|&v| f64::from(v)).collect();
            }
        }
        if !by_name.is_empty() {
            let mut extra: Vec<String> = by_name.into_keys().collect();
            extra.sort();
            return Err(ModelError::CheckpointMismatch(format!(
                "unexpected records: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }
}
