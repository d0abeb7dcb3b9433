//! Optimizers and learning-rate control.
//!
//! The per-layer schedule assigns each depth index `l` of a model with
//! maximal depth `L` the rate
//!
//! ```text
//! t_l = t0 * exp(-gamma * d_l),   d_l = (L - l) / L,   gamma = |lambda|
//! ```
//!
//! so the output layer trains at `t0` and the first layer at `t0 * e^-gamma`.
//! With [`DepthNormalization::None`] the distance is the raw layer count
//! `L - l` instead. SGD with momentum then applies, per parameter of depth `l`,
//!
//! ```text
//! v <- mu * v - t_l * s * g
//! x <- x + v
//! ```
//!
//! where `s` is the global plateau scale of the [`LRMap`].

use std::collections::BTreeMap;

use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthNormalization {
    /// Distance from the output measured in layers.
    None,
    /// Distance from the output scaled into `[0, 1]`.
    UnitInterval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLRSchedule {
    pub t0: f64,
    /// Decay hyperparameter; only its magnitude is used.
    pub lambda: f64,
    pub depth_normalization: DepthNormalization,
}

impl LayerLRSchedule {
    pub fn new(t0: f64, lambda: f64) -> Self {
        LayerLRSchedule {
            t0,
            lambda,
            depth_normalization: DepthNormalization::UnitInterval,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.lambda.abs()
    }

    /// Rate for a layer at the given distance from the output.
    pub fn rate(&self, depth: usize, max_depth: usize) -> f64 {
        let dist = (max_depth - depth) as f64;
        let d = match self.depth_normalization {
            DepthNormalization::UnitInterval => dist / max_depth as f64,
            DepthNormalization::None => dist,
        };
        self.t0 * (-self.gamma() * d).exp()
    }
}

/// Learning rate per depth index, times a global scale reduced on plateaus.
#[derive(Debug, Clone, PartialEq)]
pub struct LRMap {
    rates: BTreeMap<usize, f64>,
    pub global_scale: f64,
}

impl LRMap {
    pub fn uniform(lr: f64, depths: &[usize]) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid("LRMap::uniform", format!("bad learning rate {lr}")));
        }
        Ok(LRMap {
            rates: depths.iter().map(|&d| (d, lr)).collect(),
            global_scale: 1.0,
        })
    }

    pub fn rate(&self, depth: usize) -> Option<f64> {
        self.rates.get(&depth).copied()
    }

    /// `t_l * global_scale`.
    pub fn effective(&self, depth: usize) -> Option<f64> {
        self.rate(depth).map(|r| r * self.global_scale)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rates.iter().map(|(d, r)| (*d, *r))
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// Builds the exponentially decaying per-layer rate map.
pub fn fted_lr_map(schedule: &LayerLRSchedule, depths: &[usize], max_depth: usize) -> Result<LRMap> {
    const OP: &str = "fted_lr_map";
    if depths.is_empty() {
        return Err(Error::invalid(OP, "no depth indices"));
    }
    if max_depth == 0 {
        return Err(Error::invalid(OP, "max_depth must be positive"));
    }
    if !(schedule.t0 > 0.0 && schedule.t0.is_finite()) {
        return Err(Error::invalid(OP, format!("t0 must be positive, got {}", schedule.t0)));
    }
    if let Some(&d) = depths.iter().find(|&&d| d > max_depth) {
        return Err(Error::invalid(OP, format!("depth {d} exceeds max_depth {max_depth}")));
    }
    let mut rates = BTreeMap::new();
    for &d in depths {
        let r = schedule.rate(d, max_depth);
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(
                OP,
                format!("rate for depth {d} is not a positive finite number: {r}"),
            ));
        }
        rates.insert(d, r);
    }
    Ok(LRMap {
        rates,
        global_scale: 1.0,
    })
}

fn check_grad<'a>(grads: &'a GradientMap, id: usize, p: &Parameter) -> Result<&'a Tensor> {
    let g = grads
        .get(id)
        .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
    if g.shape() != p.value.shape() {
        return Err(Error::shape(
            "optimizer step",
            format!("gradient {:?} vs parameter {} {:?}", g.shape(), p.name, p.value.shape()),
        ));
    }
    Ok(g)
}

fn check_mask(params: &[Parameter], trainable: &[bool]) -> Result<()> {
    if params.len() != trainable.len() {
        return Err(Error::invalid(
            "optimizer step",
            format!("{} parameters but {} mask entries", params.len(), trainable.len()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub mu: f64,
    pub velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(mu: f64, params: &[Parameter]) -> Result<Self> {
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::invalid("SgdMomentum", format!("mu {mu} outside [0, 1)")));
        }
        Ok(SgdMomentum {
            mu,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    /// One update of every trainable parameter. Frozen parameters and their
    /// velocities are left untouched.
    pub fn step(
        &mut self,
        params: &mut [Parameter],
        grads: &GradientMap,
        lr_map: &LRMap,
        trainable: &[bool],
    ) -> Result<()> {
        check_mask(params, trainable)?;
        for (id, p) in params.iter_mut().enumerate() {
            if !trainable[id] {
                continue;
            }
            let g = check_grad(grads, id, p)?;
            let lr = lr_map.effective(p.depth).ok_or_else(|| {
                Error::invalid("sgd_momentum_step", format!("no rate for depth {}", p.depth))
            })?;
            let v = self.velocity[id].data_mut();
            for ((x, vi), gi) in p.value.data_mut().iter_mut().zip(v).zip(g.data()) {
                *vi = self.mu * *vi - lr * gi;
                *x += *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &[Parameter]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[Parameter], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1,
            beta2,
            epsilon,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Bias-corrected Adam update of the trainable parameters.
    pub fn step(
        &mut self,
        params: &mut [Parameter],
        grads: &GradientMap,
        lr: f64,
        trainable: &[bool],
    ) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("adam_step", format!("bad learning rate {lr}")));
        }
        check_mask(params, trainable)?;
        for (id, p) in params.iter().enumerate() {
            if trainable[id] {
                check_grad(grads, id, p)?;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, p) in params.iter_mut().enumerate() {
            if !trainable[id] {
                continue;
            }
            let g = grads.get(id).expect("checked above");
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (((x, mi), vi), gi) in p.value.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Validation-loss monitor: divides the rate map's global scale on plateaus
/// and signals early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMonitor {
    pub history: Vec<f64>,
    pub patience: usize,
    pub plateau_patience: usize,
    pub plateau_divisor: f64,
    pub best_value: f64,
    pub epochs_since_improvement: usize,
    pub epochs_since_plateau: usize,
    pub plateaus: u32,
}

impl TrainingMonitor {
    pub fn new(patience: usize, plateau_patience: usize, plateau_divisor: f64) -> Result<Self> {
        if patience == 0 || plateau_patience == 0 {
            return Err(Error::invalid("TrainingMonitor", "patience values must be positive"));
        }
        if plateau_divisor.is_nan() || plateau_divisor <= 1.0 {
            return Err(Error::invalid(
                "TrainingMonitor",
                format!("plateau divisor {plateau_divisor} must exceed 1"),
            ));
        }
        Ok(TrainingMonitor {
            history: Vec::new(),
            patience,
            plateau_patience,
            plateau_divisor,
            best_value: f64::INFINITY,
            epochs_since_improvement: 0,
            epochs_since_plateau: 0,
            plateaus: 0,
        })
    }

    /// Records one epoch's validation loss. Improvement means strictly lower.
    pub fn observe(&mut self, val_loss: f64, lr_map: &mut LRMap) -> Decision {
        self.history.push(val_loss);
        if val_loss < self.best_value {
            self.best_value = val_loss;
            self.epochs_since_improvement = 0;
            self.epochs_since_plateau = 0;
            return Decision::Continue;
        }
        self.epochs_since_improvement += 1;
        self.epochs_since_plateau += 1;
        if self.epochs_since_plateau == self.plateau_patience {
            self.plateaus += 1;
            self.epochs_since_plateau = 0;
            lr_map.global_scale = 1.0 / self.plateau_divisor.powi(self.plateaus as i32);
        }
        if self.epochs_since_improvement >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64, depth: usize) -> Vec<Parameter> {
        vec![Parameter {
            name: "x".into(),
            value: Tensor::from_vec(vec![x]),
            depth,
        }]
    }

    fn grad(g: f64) -> GradientMap {
        let mut m = GradientMap::default();
        m.insert(0, Tensor::from_vec(vec![g]));
        m
    }

    #[test]
    fn fted_endpoints() {
        let s = LayerLRSchedule::new(1e-3, -3.0);
        let depths: Vec<usize> = (0..=10).collect();
        let map = fted_lr_map(&s, &depths, 10).unwrap();
        assert_eq!(map.rate(10).unwrap(), 1e-3);
        assert!((map.rate(0).unwrap() - 4.978_706_836_786_394e-5).abs() < 1e-18);
        let rates: Vec<f64> = map.iter().map(|(_, r)| r).collect();
        assert!(rates.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fted_zero_gamma_is_uniform() {
        let s = LayerLRSchedule::new(2e-3, 0.0);
        let map = fted_lr_map(&s, &[0, 3, 7], 7).unwrap();
        assert!(map.iter().all(|(_, r)| r == 2e-3));
    }

    #[test]
    fn fted_errors() {
        let s = LayerLRSchedule::new(1e-3, 3.0);
        assert!(fted_lr_map(&s, &[0], 0).is_err());
        assert!(fted_lr_map(&s, &[], 4).is_err());
        assert!(fted_lr_map(&s, &[5], 4).is_err());
        assert!(fted_lr_map(&LayerLRSchedule::new(0.0, 3.0), &[0], 4).is_err());
    }

    #[test]
    fn raw_depth_mode_uses_layer_counts() {
        let s = LayerLRSchedule {
            t0: 1.0,
            lambda: 0.5,
            depth_normalization: DepthNormalization::None,
        };
        let map = fted_lr_map(&s, &[0, 1, 2], 2).unwrap();
        assert_eq!(map.rate(2).unwrap(), 1.0);
        assert!((map.rate(0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut params = scalar_param(0.0, 0);
        let lr = LRMap::uniform(0.1, &[0]).unwrap();
        let mut opt = SgdMomentum::new(0.9, &params).unwrap();
        opt.step(&mut params, &grad(1.0), &lr, &[true]).unwrap();
        assert!((opt.velocity[0].data()[0] + 0.1).abs() < 1e-15);
        assert!((params[0].value.data()[0] + 0.1).abs() < 1e-15);
        opt.step(&mut params, &grad(1.0), &lr, &[true]).unwrap();
        assert!((opt.velocity[0].data()[0] + 0.19).abs() < 1e-15);
        assert!((params[0].value.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_plain_sgd() {
        let mut params = scalar_param(1.5, 0);
        let lr = LRMap::uniform(0.25, &[0]).unwrap();
        let mut opt = SgdMomentum::new(0.0, &params).unwrap();
        opt.step(&mut params, &grad(0.75), &lr, &[true]).unwrap();
        assert_eq!(params[0].value.data()[0], 1.5 - 0.25 * 0.75);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut params = scalar_param(2.0, 0);
        let lr = LRMap::uniform(0.1, &[0]).unwrap();
        let mut sgd = SgdMomentum::new(0.9, &params).unwrap();
        sgd.step(&mut params, &grad(123.0), &lr, &[false]).unwrap();
        assert_eq!(params[0].value.data()[0].to_bits(), 2.0f64.to_bits());
        assert_eq!(sgd.velocity[0].data()[0].to_bits(), 0.0f64.to_bits());
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grad(5.0), 0.1, &[false]).unwrap();
        assert_eq!(params[0].value.data()[0].to_bits(), 2.0f64.to_bits());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = scalar_param(0.0, 0);
        let lr = LRMap::uniform(0.1, &[0]).unwrap();
        let mut sgd = SgdMomentum::new(0.9, &params).unwrap();
        let empty = GradientMap::default();
        assert!(matches!(
            sgd.step(&mut params, &empty, &lr, &[true]),
            Err(Error::MissingGradient(_))
        ));
        let mut adam = Adam::new(&params);
        assert!(adam.step(&mut params, &empty, 0.1, &[true]).is_err());
        // frozen parameters need no gradient
        sgd.step(&mut params, &empty, &lr, &[false]).unwrap();
    }

    #[test]
    fn adam_first_step() {
        let mut params = scalar_param(1.0, 0);
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grad(1.0), 0.1, &[true]).unwrap();
        // m_hat = 1, v_hat = 1: x = 1 - 0.1 / (1 + 1e-8)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((params[0].value.data()[0] - want).abs() < 1e-15);
        assert!((params[0].value.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = scalar_param(-0.75, 0);
        let mut adam = Adam::new(&params);
        for _ in 0..5 {
            adam.step(&mut params, &grad(0.0), 0.1, &[true]).unwrap();
        }
        assert_eq!(params[0].value.data()[0], -0.75);
    }

    #[test]
    fn monitor_improving_sequence_continues() {
        let mut m = TrainingMonitor::new(15, 5, 10.0).unwrap();
        let mut lr = LRMap::uniform(1e-4, &[0]).unwrap();
        for v in [1.0, 0.9, 0.8] {
            assert_eq!(m.observe(v, &mut lr), Decision::Continue);
        }
        assert_eq!(lr.global_scale, 1.0);
    }

    #[test]
    fn monitor_stops_at_patience() {
        let mut m = TrainingMonitor::new(15, 5, 10.0).unwrap();
        let mut lr = LRMap::uniform(1e-4, &[0]).unwrap();
        assert_eq!(m.observe(0.5, &mut lr), Decision::Continue);
        for i in 1..15 {
            assert_eq!(m.observe(0.5, &mut lr), Decision::Continue, "epoch {i}");
        }
        assert_eq!(m.observe(0.6, &mut lr), Decision::Stop);
        assert_eq!(m.plateaus, 3);
        assert_eq!(lr.global_scale, 1e-3);
    }

    #[test]
    fn monitor_divides_by_ten_on_plateau() {
        let mut m = TrainingMonitor::new(15, 5, 10.0).unwrap();
        let mut lr = LRMap::uniform(1e-4, &[0]).unwrap();
        m.observe(1.0, &mut lr);
        for _ in 0..4 {
            m.observe(1.0, &mut lr);
        }
        assert_eq!(lr.global_scale, 1.0);
        m.observe(1.0, &mut lr);
        assert_eq!(lr.global_scale, 0.1);
    }
}
