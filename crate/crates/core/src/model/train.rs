//! End-to-end training of the three heads on procedural viewpoint triplets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{LOSS_WEIGHTS, RANKING_MARGIN};
use super::network::{BoundNetwork, Network};
use super::ModelError;
use crate::datagen::{augment, sample_triplets, AugmentConfig, TrainingTriplet};
use crate::geometry::TriangleMesh;
use crate::nn::{adam_step, cosine_lr, AdamConfig, AdamState, BnStats, Element, Mode, Tape, Tensor, Var};
use crate::pipeline::{preprocess, NormalizedCrop};
use crate::render::DEFAULT_CROP_FACTOR;
use crate::seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Objects drawn per batch; with the default 16 anchors each this forms
    /// the 128-triplet batch.
    pub objects_per_batch: usize,
    pub anchors_per_object: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub margin: f64,
    /// (viewpoint, verification, in-plane) loss weights.
    pub loss_weights: (f64, f64, f64),
    pub f_base: f64,
    pub seed: u64,
    /// Depth augmentation; `None` trains on noise-free renders.
    pub augment: Option<AugmentConfig>,
    /// Triplets per data-parallel shard. Batch-norm statistics are computed
    /// per shard, so this is fixed by configuration (not thread count) to
    /// keep runs bit-identical.
    pub shard_triplets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps_per_epoch: 16,
            objects_per_batch: 8,
            anchors_per_object: 16,
            lr_start: 1e-3,
            lr_end: 1e-5,
            weight_decay: 1e-5,
            margin: RANKING_MARGIN,
            loss_weights: LOSS_WEIGHTS,
            f_base: 5.0,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            shard_triplets: 8,
        }
    }
}

/// Per-epoch and per-step loss traces.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Mean (viewpoint, verification, in-plane) parts per epoch.
    pub epoch_parts: Vec<(f64, f64, f64)>,
}

/// One triplet ready for the network.
struct TripletCrops {
    anchor: NormalizedCrop,
    rotated: NormalizedCrop,
    off_view: NormalizedCrop,
    theta_cs: [f64; 2],
}

/// Training forward pass over one shard of triplets. Crops are stacked as
/// `[anchors..., rotated..., off_views...]`. Returns the scalar loss node
/// and the per-part mean nodes.
pub(crate) fn triplet_shard_forward<T: Element>(
    net: &Network<T>,
    tape: &mut Tape<T>,
    bound: &BoundNetwork,
    crops: Tensor<T>,
    theta_gt: Tensor<T>,
    margin: f64,
    weights: (f64, f64, f64),
    mode: Mode,
    updates: &mut Vec<(usize, BnStats)>,
) -> Result<(Var, [Var; 3]), ModelError> {
    let m = theta_gt.shape()[0];
    let x = tape.leaf(crops, false)?;
    let theta_gt = tape.leaf(theta_gt, false)?;

    let fmap = net.backbone_forward(tape, bound, x, mode, updates)?;
    let z_a = tape.slice_rows(fmap, 0, m)?;
    let z_t = tape.slice_rows(fmap, m, m)?;
    let z_g = tape.slice_rows(fmap, 2 * m, m)?;

    // Viewpoint ranking on embedding cosines.
    let emb = net.embed_from_map(tape, bound, fmap, mode, updates)?;
    let e_a = tape.slice_rows(emb, 0, m)?;
    let e_t = tape.slice_rows(emb, m, m)?;
    let e_g = tape.slice_rows(emb, 2 * m, m)?;
    let s_pos = tape.cosine_rows(e_a, e_t)?;
    let s_neg = tape.cosine_rows(e_a, e_g)?;
    let l_vp = tape.hinge_margin(s_pos, s_neg, margin)?;

    // In-plane regression, supervised through the image discrepancy: the
    // anchor depth image is rotated by the predicted and ground-truth
    // in-plane rotations and compared by cosine.
    let theta_pred = net.inplane_from_maps(tape, bound, z_a, z_t, mode, updates)?;
    let anchors = tape.slice_rows(x, 0, m)?;
    let rot_pred = tape.rotate2d(anchors, theta_pred)?;
    let rot_gt = tape.rotate2d(anchors, theta_gt)?;
    let flat_pred = tape.flatten_rows(rot_pred)?;
    let flat_gt = tape.flatten_rows(rot_gt)?;
    let s_cos = tape.cosine_rows(flat_pred, flat_gt)?;
    let l_theta = tape.neg_log_half_plus(s_cos)?;

    // Verification ranking: the anchor map transformed by the ground-truth
    // in-plane rotation is concatenated with the intra-view and
    // off-viewpoint maps.
    let z_hat = tape.rotate2d(z_a, theta_gt)?;
    let s_theta = net.verify_from_maps(tape, bound, z_hat, z_t, mode, updates)?;
    let s_gamma = net.verify_from_maps(tape, bound, z_hat, z_g, mode, updates)?;
    let l_css = tape.hinge_margin(s_theta, s_gamma, margin)?;

    let m_vp = tape.mean_all(l_vp)?;
    let m_css = tape.mean_all(l_css)?;
    let m_theta = tape.mean_all(l_theta)?;
    let total = tape.weighted_sum(&[
        (m_vp, weights.0),
        (m_css, weights.1),
        (m_theta, weights.2),
    ])?;
    Ok((total, [m_vp, m_css, m_theta]))
}

fn shard_tensors(shard: &[TripletCrops], input_size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let m = shard.len();
    let s = input_size;
    let mut data = Vec::with_capacity(3 * m * s * s);
    for t in shard {
        debug_assert_eq!(t.anchor.size as usize, s);
        data.extend_from_slice(&t.anchor.values);
    }
    for t in shard {
        data.extend_from_slice(&t.rotated.values);
    }
    for t in shard {
        data.extend_from_slice(&t.off_view.values);
    }
    let crops = Tensor::from_vec(&[3 * m, 1, s, s], data).expect("shard crops");
    let mut th = Vec::with_capacity(m * 2);
    for t in shard {
        th.push(t.theta_cs[0] as f32);
        th.push(t.theta_cs[1] as f32);
    }
    (crops, Tensor::from_vec(&[m, 2], th).expect("shard theta"))
}

struct ShardOutput {
    count: usize,
    loss: f64,
    parts: (f64, f64, f64),
    grads: Vec<Tensor<f32>>,
    updates: Vec<(usize, BnStats)>,
}

fn run_shard(
    net: &Network<f32>,
    shard: &[TripletCrops],
    cfg: &TrainConfig,
) -> Result<ShardOutput, ModelError> {
    let (crops, theta) = shard_tensors(shard, net.config().input_size);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true)?;
    let mut updates = Vec::new();
    let (total, parts) = triplet_shard_forward(
        net,
        &mut tape,
        &bound,
        crops,
        theta,
        cfg.margin,
        cfg.loss_weights,
        Mode::Train,
        &mut updates,
    )?;
    let loss = tape.value(total).data()[0] as f64;
    let part_vals = (
        tape.value(parts[0]).data()[0] as f64,
        tape.value(parts[1]).data()[0] as f64,
        tape.value(parts[2]).data()[0] as f64,
    );
    let grads = tape.backward(total)?;
    let grad_list: Vec<Tensor<f32>> = bound
        .param_vars()
        .iter()
        .map(|v| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))
        })
        .collect();
    Ok(ShardOutput {
        count: shard.len(),
        loss,
        parts: part_vals,
        grads: grad_list,
        updates,
    })
}

/// Render, augment and preprocess the triplets for one object slot.
fn prepare_object_triplets(
    mesh: &TriangleMesh,
    cfg: &TrainConfig,
    triplet_seed: u64,
    augment_seed: u64,
) -> Result<Vec<TripletCrops>, ModelError> {
    let raw: Vec<TrainingTriplet> =
        sample_triplets(mesh, cfg.anchors_per_object, triplet_seed, cfg.f_base)
            .map_err(|e| ModelError::Data(e.to_string()))?;
    let diameter = mesh.diameter();
    let mut out = Vec::with_capacity(raw.len());
    for (ti, t) in raw.into_iter().enumerate() {
        let frames = [&t.anchor, &t.rotated, &t.off_view];
        let mut crops: Vec<NormalizedCrop> = Vec::with_capacity(3);
        for (fi, frame) in frames.iter().enumerate() {
            let crop = if let Some(aug_cfg) = &cfg.augment {
                let s = seed::derive(augment_seed, "frame", (ti * 3 + fi) as u64);
                let augmented = augment(frame, aug_cfg, diameter, s)
                    .map_err(|e| ModelError::Data(e.to_string()))?;
                // Heavy cutout or occlusion can wipe the object out; fall
                // back to the clean render so the triplet stays usable.
                match preprocess(&augmented, &augmented.mask(), diameter, DEFAULT_CROP_FACTOR, 50)
                {
                    Ok(pre) => pre.crop,
                    Err(_) => {
                        preprocess(frame, &frame.mask(), diameter, DEFAULT_CROP_FACTOR, 50)
                            .map_err(|e| ModelError::Data(e.to_string()))?
                            .crop
                    }
                }
            } else {
                preprocess(frame, &frame.mask(), diameter, DEFAULT_CROP_FACTOR, 50)
                    .map_err(|e| ModelError::Data(e.to_string()))?
                    .crop
            };
            crops.push(crop);
        }
        let angle = t.theta_gt.inplane_angle_rad();
        let off_view = crops.pop().expect("three crops");
        let rotated = crops.pop().expect("three crops");
        let anchor = crops.pop().expect("three crops");
        out.push(TripletCrops {
            anchor,
            rotated,
            off_view,
            theta_cs: [angle.cos(), angle.sin()],
        });
    }
    Ok(out)
}

/// Train the network in place. Deterministic for a fixed seed and
/// configuration: object sampling, rendering, augmentation, sharding and
/// gradient summation all derive from the config seed in fixed order.
pub fn train(
    net: &mut Network<f32>,
    meshes: &[TriangleMesh],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    if meshes.len() < 2 {
        return Err(ModelError::Data(format!(
            "training needs at least 2 objects, got {}",
            meshes.len()
        )));
    }
    if cfg.objects_per_batch == 0 || cfg.anchors_per_object == 0 || cfg.shard_triplets == 0 {
        return Err(ModelError::InvalidConfig(
            "batch shape parameters must be positive".into(),
        ));
    }
    if let Some(a) = &cfg.augment {
        a.validate().map_err(|e| ModelError::Data(e.to_string()))?;
    }

    let param_count = net.named_params().len();
    let mut adam = {
        let params = net.named_params();
        let refs: Vec<&Tensor<f32>> = params.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };
    let adam_cfg = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };

    let mut report = TrainReport::default();
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end);
        let mut epoch_sum = 0.0;
        let mut epoch_parts = (0.0, 0.0, 0.0);
        for step in 0..cfg.steps_per_epoch {
            // Object selection for this batch.
            let mut rng = seed::rng(cfg.seed, "train/objects", global_step);
            let picks: Vec<usize> = if meshes.len() >= cfg.objects_per_batch {
                rand::seq::index::sample(&mut rng, meshes.len(), cfg.objects_per_batch).into_vec()
            } else {
                use rand::Rng;
                (0..cfg.objects_per_batch)
                    .map(|_| rng.gen_range(0..meshes.len()))
                    .collect()
            };

            // Render + preprocess in parallel, deterministic per slot.
            let prepared: Result<Vec<Vec<TripletCrops>>, ModelError> = picks
                .par_iter()
                .enumerate()
                .map(|(slot, &obj)| {
                    let counter = global_step * cfg.objects_per_batch as u64 + slot as u64;
                    let t_seed = seed::derive(cfg.seed, "train/triplets", counter);
                    let a_seed = seed::derive(cfg.seed, "train/augment", counter);
                    prepare_object_triplets(&meshes[obj], cfg, t_seed, a_seed)
                })
                .collect();
            let batch: Vec<TripletCrops> = prepared?.into_iter().flatten().collect();
            let total_n = batch.len();

            let shards: Vec<&[TripletCrops]> = batch.chunks(cfg.shard_triplets).collect();
            let outputs: Result<Vec<ShardOutput>, ModelError> = shards
                .par_iter()
                .map(|shard| run_shard(net, shard, cfg))
                .collect();
            let outputs = outputs.map_err(|e| match e {
                ModelError::Nn(crate::nn::NnError::NonFinite { op }) => ModelError::Diverged {
                    epoch,
                    step,
                    message: format!("non-finite values in {op}"),
                },
                other => other,
            })?;

            // Deterministic reduction in shard order.
            let mut grads: Vec<Tensor<f32>> = Vec::with_capacity(param_count);
            let mut loss = 0.0;
            let mut parts = (0.0, 0.0, 0.0);
            let mut bn_updates: Vec<(usize, BnStats)> = Vec::new();
            for out in &outputs {
                let w = out.count as f64 / total_n as f64;
                loss += w * out.loss;
                parts.0 += w * out.parts.0;
                parts.1 += w * out.parts.1;
                parts.2 += w * out.parts.2;
                if grads.is_empty() {
                    grads = out
                        .grads
                        .iter()
                        .map(|g| {
                            let mut g = g.clone();
                            g.scale_in_place(w);
                            g
                        })
                        .collect();
                } else {
                    for (acc, g) in grads.iter_mut().zip(&out.grads) {
                        let mut g = g.clone();
                        g.scale_in_place(w);
                        acc.add_assign_tensor(&g)?;
                    }
                }
            }
            for out in outputs {
                bn_updates.extend(out.updates);
            }
            if !loss.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    step,
                    message: format!("loss became {loss}"),
                });
            }

            net.apply_bn_updates(&bn_updates);
            {
                let mut params = net.named_params_mut();
                let mut prefs: Vec<&mut Tensor<f32>> =
                    params.iter_mut().map(|(_, t)| &mut **t).collect();
                let grefs: Vec<&Tensor<f32>> = grads.iter().collect();
                adam_step(&mut prefs, &grefs, &mut adam, lr, &adam_cfg)?;
            }

            report.step_losses.push(loss);
            epoch_sum += loss;
            epoch_parts.0 += parts.0;
            epoch_parts.1 += parts.1;
            epoch_parts.2 += parts.2;
            global_step += 1;
        }
        let steps = cfg.steps_per_epoch.max(1) as f64;
        report.epoch_losses.push(epoch_sum / steps);
        report.epoch_parts.push((
            epoch_parts.0 / steps,
            epoch_parts.1 / steps,
            epoch_parts.2 / steps,
        ));
    }
    Ok(report)
}
