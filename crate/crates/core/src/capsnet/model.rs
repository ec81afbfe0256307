//! Small end-to-end classifier used for desk-scale training:
//! flat input → linear feature layer → primary capsules → one routed capsule
//! layer → class activations.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{
    pose_side, BatchNorm, CapsError, MarginLossParams, RoutingAlgorithm, TransformWeights,
};
use crate::autodiff::{AutodiffError, Gradients, Tape, Var};
use crate::math;
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// Single-label: softmax cross entropy over activations.
    Softmax,
    /// Multi-label capable: margin loss over activations.
    Margin(MarginLossParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeskModelConfig {
    pub input_dim: usize,
    pub primary_caps: usize,
    pub k: usize,
    pub classes: usize,
    pub algorithm: RoutingAlgorithm,
    pub loss: LossMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskModel {
    pub config: DeskModelConfig,
    /// `[input_dim, primary_caps·k]`, no bias.
    pub feature: Tensor,
    pub caps: TransformWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
}

struct Recorded {
    tape: Tape,
    activation: Var,
    loss: Option<Var>,
}

impl DeskModel {
    /// Feature weights from `U(±√(6 / (fan_in + fan_out)))`; capsule
    /// transforms as in [`TransformWeights::init`].
    pub fn init<R: Rng + ?Sized>(config: DeskModelConfig, rng: &mut R) -> Result<Self, CapsError> {
        pose_side(config.k)?;
        let width = config.primary_caps * config.k;
        let bound = math::sqrt(6.0 / (config.input_dim + width) as f64);
        let feature = Tensor::new(
            vec![config.input_dim, width],
            (0..config.input_dim * width)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        )?;
        let caps = TransformWeights::init(config.primary_caps, config.classes, config.k, rng)?;
        Ok(DeskModel {
            config,
            feature,
            caps,
        })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(
        config: DeskModelConfig,
        feature: Tensor,
        matrices: Vec<f64>,
        bn: BatchNorm,
    ) -> Result<Self, CapsError> {
        if feature.shape() != [config.input_dim, config.primary_caps * config.k] {
            return Err(CapsError::Shape("feature weights"));
        }
        let caps = TransformWeights::from_parts(
            config.primary_caps,
            config.classes,
            config.k,
            matrices,
            bn,
        )?;
        Ok(DeskModel {
            config,
            feature,
            caps,
        })
    }

    fn record(
        &self,
        images: &[f64],
        labels: Option<&[usize]>,
        bn: &mut BatchNorm,
        training: bool,
    ) -> Result<Recorded, AutodiffError> {
        let c = &self.config;
        if !images.len().is_multiple_of(c.input_dim) || images.is_empty() {
            return Err(AutodiffError::Shape("images must be batch * input_dim"));
        }
        let batch = images.len() / c.input_dim;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![batch, c.input_dim], images.to_vec())?);
        let w_feat = tape.param("feature", self.feature.clone());
        let w_caps = tape.param(
            "caps.matrices",
            Tensor::new(
                vec![c.primary_caps, c.classes, c.k],
                self.caps.matrices.clone(),
            )?,
        );
        let gamma = tape.param("caps.bn.gamma", Tensor::vector(&self.caps.bn.gamma));
        let beta = tape.param("caps.bn.beta", Tensor::vector(&self.caps.bn.beta));

        let feats = tape.matmul(x, w_feat)?;
        let grouped = tape.reshape(feats, vec![batch, c.primary_caps, c.k])?;
        let primary = tape.squash(grouped);
        let raw = tape.caps_transform(primary, w_caps)?;
        let rows = tape.reshape(raw, vec![batch * c.primary_caps, c.classes * c.k])?;
        let normed = tape.batch_norm(rows, gamma, beta, bn, training)?;
        let preds = tape.reshape(normed, vec![batch, c.primary_caps, c.classes, c.k])?;
        let routed = tape.routing(preds, c.algorithm)?;

        let loss = match labels {
            None => None,
            Some(labels) => {
                if labels.len() != batch {
                    return Err(AutodiffError::Shape("one label per image"));
                }
                Some(match c.loss {
                    LossMode::Softmax => {
                        tape.softmax_cross_entropy(routed.activation, labels.to_vec())?
                    }
                    LossMode::Margin(params) => {
                        let mut targets = vec![false; batch * c.classes];
                        for (b, &l) in labels.iter().enumerate() {
                            if l >= c.classes {
                                return Err(CapsError::LabelOutOfRange {
                                    label: l,
                                    classes: c.classes,
                                }
                                .into());
                            }
                            targets[b * c.classes + l] = true;
                        }
                        tape.margin_loss(routed.activation, targets, params)?
                    }
                })
            }
        };
        Ok(Recorded {
            tape,
            activation: routed.activation,
            loss,
        })
    }

    /// Loss, per-example activations and parameter cotangents for a batch.
    /// In training mode the batch-norm running statistics are updated.
    pub fn loss_and_grads(
        &mut self,
        images: &[f64],
        labels: &[usize],
        training: bool,
    ) -> Result<(f64, Vec<f64>, Gradients), AutodiffError> {
        let mut bn = self.caps.bn.clone();
        let rec = self.record(images, Some(labels), &mut bn, training)?;
        self.caps.bn.running_mean = bn.running_mean;
        self.caps.bn.running_var = bn.running_var;
        let loss = rec.loss.expect("labels supplied");
        let grads = rec.tape.backward(loss)?;
        Ok((
            rec.tape.value(loss).data()[0],
            rec.tape.value(rec.activation).data().to_vec(),
            grads,
        ))
    }

    /// One optimizer step on a batch (training-mode batch norm).
    pub fn train_step(
        &mut self,
        images: &[f64],
        labels: &[usize],
        adam: &mut Adam,
    ) -> Result<StepOutput, AutodiffError> {
        let (loss, acts, grads) = self.loss_and_grads(images, labels, true)?;
        let correct = count_correct(&acts, labels, self.config.classes);
        let g = |name: &str| grads.param(name).expect("recorded param").data().to_vec();
        let (g_feat, g_mats, g_gamma, g_beta) = (
            g("feature"),
            g("caps.matrices"),
            g("caps.bn.gamma"),
            g("caps.bn.beta"),
        );
        adam.step(
            &mut [
                self.feature.data_mut(),
                &mut self.caps.matrices,
                &mut self.caps.bn.gamma,
                &mut self.caps.bn.beta,
            ],
            &[&g_feat, &g_mats, &g_gamma, &g_beta],
        );
        Ok(StepOutput { loss, correct })
    }

    /// Buffer sizes in the order [`train_step`](Self::train_step) passes them
    /// to the optimizer.
    pub fn parameter_sizes(&self) -> [usize; 4] {
        [
            self.feature.len(),
            self.caps.matrices.len(),
            self.caps.bn.gamma.len(),
            self.caps.bn.beta.len(),
        ]
    }

    /// Inference-mode class activations, `batch × classes`.
    pub fn predict(&self, images: &[f64]) -> Result<Vec<f64>, AutodiffError> {
        let mut bn = self.caps.bn.clone();
        let rec = self.record(images, None, &mut bn, false)?;
        Ok(rec.tape.value(rec.activation).data().to_vec())
    }

    /// Inference-mode loss and activations.
    pub fn evaluate(
        &self,
        images: &[f64],
        labels: &[usize],
    ) -> Result<(f64, Vec<f64>), AutodiffError> {
        let mut bn = self.caps.bn.clone();
        let rec = self.record(images, Some(labels), &mut bn, false)?;
        let loss = rec.loss.expect("labels supplied");
        Ok((
            rec.tape.value(loss).data()[0],
            rec.tape.value(rec.activation).data().to_vec(),
        ))
    }
}

/// Number of rows whose largest activation sits at the label.
pub fn count_correct(activations: &[f64], labels: &[usize], classes: usize) -> usize {
    activations
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng;
    use crate::optim::AdamConfig;

    fn tiny(algorithm: RoutingAlgorithm, loss: LossMode) -> DeskModel {
        let cfg = DeskModelConfig {
            input_dim: 6,
            primary_caps: 3,
            k: 4,
            classes: 3,
            algorithm,
            loss,
        };
        DeskModel::init(cfg, &mut rng(1)).unwrap()
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let mut model = tiny(RoutingAlgorithm::Fm, LossMode::Softmax);
        let mut r = rng(2);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for b in 0..24 {
            let label = b % 3;
            for d in 0..6 {
                let on = d / 2 == label;
                images.push(if on { 1.0 } else { 0.0 } + r.random_range(-0.1..0.1));
            }
            labels.push(label);
        }
        let cfg = AdamConfig {
            learning_rate: 0.02,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &model.parameter_sizes());
        let first = model.train_step(&images, &labels, &mut adam).unwrap().loss;
        let mut last = first;
        for _ in 0..150 {
            last = model.train_step(&images, &labels, &mut adam).unwrap().loss;
        }
        assert!(last < first * 0.5, "{first} -> {last}");
        let acts = model.predict(&images).unwrap();
        assert!(count_correct(&acts, &labels, 3) >= 22);
    }

    #[test]
    fn margin_loss_mode_runs() {
        let mut model = tiny(
            RoutingAlgorithm::Dynamic(Default::default()),
            LossMode::Margin(MarginLossParams::default()),
        );
        let images: Vec<f64> = (0..24).map(|x| (x as f64).cos()).collect();
        let (loss, acts, _) = model.loss_and_grads(&images, &[0, 1, 2, 0], true).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert_eq!(acts.len(), 12);
    }
}
