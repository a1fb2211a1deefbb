//! The robust teacher: a copy of the source backbone that adapts only its
//! batch-norm affine parameters against the proxy loss. EMA and frozen
//! teachers are kept as baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DisparityMap, NormMode, PartitionMode, StereoNet, StereoPair};
use crate::optim::{Adam, AdamConfig};
use crate::proxy::MaskPair;
use crate::supervision::masked_label_loss;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    Adaptbn,
    Ema,
    SourceFrozen,
}

impl FromStr for TeacherMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptbn" => Ok(TeacherMode::Adaptbn),
            "ema" => Ok(TeacherMode::Ema),
            "source_frozen" => Ok(TeacherMode::SourceFrozen),
            other => Err(Error::Config(format!("unknown teacher mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub lr: f64,
    pub ema_momentum: f64,
    /// Update the teacher after (true) or before (false) the student step.
    pub update_after_student: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            mode: TeacherMode::Adaptbn,
            lr: 1e-2,
            ema_momentum: 0.999,
            update_after_student: true,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("teacher.lr must be >= 0".into()));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(
                "teacher.ema_momentum must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TeacherState {
    pub model: StereoNet,
    pub trainable: BTreeSet<String>,
    pub optimizer: Adam,
    pub mode: TeacherMode,
}

/// Gradients for a teacher step computed ahead of applying it.
#[derive(Clone, Debug)]
pub struct PendingUpdate {
    pub prediction: Tensor,
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

pub fn init_teacher(source: &StereoNet, mode: TeacherMode, lr: f64) -> TeacherState {
    let trainable = match mode {
        TeacherMode::Adaptbn => source.partition(PartitionMode::TeacherAdaptbn),
        TeacherMode::Ema | TeacherMode::SourceFrozen => BTreeSet::new(),
    };
    TeacherState {
        model: source.clone(),
        trainable,
        optimizer: Adam::new(AdamConfig::with_lr(lr)),
        mode,
    }
}

/// Teacher disparity with frozen statistics; the state is not touched.
pub fn teacher_predict(state: &TeacherState, pair: &StereoPair) -> Result<DisparityMap> {
    state.model.predict(pair)
}

impl TeacherState {
    fn require(&self, mode: TeacherMode, op: &str) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Mode(format!(
                "{op} is not available for a {:?} teacher",
                self.mode
            )));
        }
        Ok(())
    }

    /// One forward/backward of the masked proxy loss. The returned prediction
    /// is the teacher's output for `pair` under the current weights.
    pub fn prepare_update(
        &self,
        pair: &StereoPair,
        proxy: &Tensor,
        masks: &MaskPair,
        beta: f64,
    ) -> Result<PendingUpdate> {
        self.require(TeacherMode::Adaptbn, "teacher_update")?;
        let step = self
            .model
            .differentiate(pair, &self.trainable, NormMode::Eval, |g, out| {
                Ok((
                    masked_label_loss(g, out.disparity, proxy, &masks.valid, beta),
                    vec![],
                ))
            })?;
        Ok(PendingUpdate {
            prediction: step.prediction,
            loss: step.loss,
            grads: step.grads,
        })
    }

    /// Applies a prepared step. An all-zero gradient (empty proxy support)
    /// leaves the teacher and its optimizer untouched.
    pub fn apply_update(&mut self, pending: &PendingUpdate) -> Result<()> {
        self.require(TeacherMode::Adaptbn, "teacher_update")?;
        if pending
            .grads
            .values()
            .all(|g| g.data().iter().all(|&v| v == 0.0))
        {
            return Ok(());
        }
        self.optimizer
            .step(&mut self.model, &self.trainable, &pending.grads)
    }
}

/// One Adam step on the teacher's batch-norm affine parameters.
pub fn teacher_update(
    state: &mut TeacherState,
    pair: &StereoPair,
    proxy: &Tensor,
    masks: &MaskPair,
    beta: f64,
) -> Result<f64> {
    let pending = state.prepare_update(pair, proxy, masks, beta)?;
    state.apply_update(&pending)?;
    Ok(pending.loss)
}

/// `teacher <- m * teacher + (1 - m) * student` for every teacher parameter.
pub fn ema_update(state: &mut TeacherState, student: &StereoNet, momentum: f64) -> Result<()> {
    state.require(TeacherMode::Ema, "ema_update")?;
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "EMA momentum {momentum} outside [0, 1]"
        )));
    }
    let names: Vec<String> = state.model.params().keys().cloned().collect();
    for name in &names {
        let s = student
            .param(name)
            .ok_or_else(|| Error::Shape(format!("student has no parameter {name}")))?;
        if s.shape() != state.model.param(name).expect("listed").shape() {
            return Err(Error::Shape(format!("shape mismatch for {name}")));
        }
    }
    for name in &names {
        let s = student.param(name).expect("checked");
        let t = state.model.param_mut(name).expect("listed");
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(())
}

/// Proxy where valid, teacher where invalid; dense.
pub fn fuse_dense_label(
    proxy: &Tensor,
    teacher: &Tensor,
    masks: &MaskPair,
) -> Result<DisparityMap> {
    if proxy.shape() != teacher.shape() || proxy.numel() != masks.valid.len() {
        return Err(Error::Shape("proxy, teacher and mask sizes differ".into()));
    }
    let data = Tensor::from_fn(proxy.shape(), |i| {
        if masks.valid[i] {
            proxy.data()[i]
        } else {
            teacher.data()[i]
        }
    });
    Ok(DisparityMap::dense(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> StereoNet {
        StereoNet::new(ModelConfig {
            encoder_blocks: 2,
            base_channels: 4,
            max_disparity: 8,
            moe_block_index: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn trainable_sets_per_mode() {
        let net = tiny();
        let t = init_teacher(&net, TeacherMode::Adaptbn, 5e-6);
        assert_eq!(t.trainable.len(), 2 * net.norm_layer_count());
        assert!(init_teacher(&net, TeacherMode::SourceFrozen, 5e-6)
            .trainable
            .is_empty());
        assert!("mean_teacher".parse::<TeacherMode>().is_err());
    }

    #[test]
    fn ema_examples() {
        let net = tiny();
        let mut zero = net.clone();
        let mut one = net.clone();
        let names: Vec<String> = net.params().keys().cloned().collect();
        for n in &names {
            zero.param_mut(n).unwrap().data_mut().fill(0.0);
            one.param_mut(n).unwrap().data_mut().fill(1.0);
        }
        let mut st = init_teacher(&zero, TeacherMode::Ema, 0.0);
        ema_update(&mut st, &one, 0.9).unwrap();
        for n in &names {
            assert!(st
                .model
                .param(n)
                .unwrap()
                .data()
                .iter()
                .all(|&v| (v - 0.1).abs() < 1e-15));
        }
        let before = st.model.checksum();
        ema_update(&mut st, &one, 1.0).unwrap();
        assert_eq!(before, st.model.checksum());
        ema_update(&mut st, &one, 0.0).unwrap();
        assert_eq!(st.model.checksum_of(&names), one.checksum_of(&names));
    }

    #[test]
    fn wrong_mode_operations_fail() {
        let net = tiny();
        let mut frozen = init_teacher(&net, TeacherMode::SourceFrozen, 5e-6);
        assert!(matches!(
            ema_update(&mut frozen, &net, 0.9),
            Err(Error::Mode(_))
        ));
        let pair =
            StereoPair::new(Tensor::zeros(&[3, 8, 16]), Tensor::zeros(&[3, 8, 16]), 0).unwrap();
        let masks = MaskPair::from_valid(vec![true; 128], 0.5);
        let r = teacher_update(&mut frozen, &pair, &Tensor::zeros(&[8, 16]), &masks, 1.0);
        assert!(matches!(r, Err(Error::Mode(_))));
    }

    #[test]
    fn fuse_examples() {
        let p = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let t = Tensor::from_vec(&[1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let all = fuse_dense_label(&p, &t, &MaskPair::from_valid(vec![true; 3], 0.5)).unwrap();
        assert_eq!(all.data, p);
        let none = fuse_dense_label(&p, &t, &MaskPair::from_valid(vec![false; 3], 0.5)).unwrap();
        assert_eq!(none.data, t);
        let mixed =
            fuse_dense_label(&p, &t, &MaskPair::from_valid(vec![true, false, true], 0.5)).unwrap();
        assert_eq!(mixed.data.data(), &[1.0, 8.0, 3.0]);
        assert_eq!(mixed.density(), 1.0);
    }
}
