//! Leaky integrate-and-fire dynamics and the dual-path MixedLIF neuron.
//!
//! Path A emits binary spikes through a step function whose recorded
//! backward is a rectangular surrogate window of width `surrogate_width`
//! centered at the firing threshold. Path B outputs the surrogate's
//! antiderivative, a clipped ReLU, so its forward pass is range-continuous
//! and its backward is exact. Both paths reset hard by default; the reset
//! gate on path B is treated as a constant during backward so the smooth
//! path stays smooth.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronKind {
    /// Spiking dynamics in both paths.
    Lif,
    /// Spiking dynamics in both paths, no leak (tau forced to 0).
    If,
    /// Spiking path A, clipped-ReLU surrogate path B.
    MixedLif,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResetMode {
    /// Membrane jumps to the reset value after a spike.
    Hard,
    /// Threshold is subtracted from the membrane after a spike.
    Soft,
}

#[derive(Clone, Copy, Debug)]
pub struct NeuronConfig {
    /// Leak factor in [0, 1]; the membrane is scaled by this each step.
    pub tau: f64,
    /// Firing threshold (> 0).
    pub v_threshold: f64,
    /// Post-spike membrane value for hard resets.
    pub v_reset: f64,
    /// Width of the rectangular surrogate window (> 0).
    pub surrogate_width: f64,
    pub kind: NeuronKind,
    pub reset: ResetMode,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            tau: 0.5,
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_width: 1.0,
            kind: NeuronKind::MixedLif,
            reset: ResetMode::Hard,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Invalid(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if self.v_threshold <= 0.0 {
            return Err(Error::Invalid(format!(
                "firing threshold must be > 0, got {}",
                self.v_threshold
            )));
        }
        if self.surrogate_width <= 0.0 {
            return Err(Error::Invalid(format!(
                "surrogate width must be > 0, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }

    /// Leak actually applied: IF neurons integrate without decay.
    pub fn effective_tau(&self) -> f64 {
        match self.kind {
            NeuronKind::If => 0.0,
            _ => self.tau,
        }
    }

    /// Whether path B uses the clipped-ReLU surrogate output.
    pub fn path_b_is_surrogate(&self) -> bool {
        self.kind == NeuronKind::MixedLif
    }
}

/// Per-layer membrane potentials, zero-initialized at t = 0.
#[derive(Clone, Debug)]
pub struct NeuronState {
    pub v_a: Tensor,
    pub v_b: Option<Tensor>,
}

impl NeuronState {
    pub fn zeros(shape: &[usize], dual: bool) -> NeuronState {
        NeuronState {
            v_a: Tensor::zeros(shape),
            v_b: if dual { Some(Tensor::zeros(shape)) } else { None },
        }
    }
}

// ------------------------------------------------------------ tape ops

/// Membrane charge: `h = tau * v + synaptic_input`, recorded on the tape.
pub fn charge(tape: &mut Tape, membrane: Var, synaptic_input: Var, cfg: &NeuronConfig) -> Result<Var> {
    let leaked = tape.scale(membrane, cfg.effective_tau())?;
    tape.add(leaked, synaptic_input)
}

/// Path-A step: binary spikes with surrogate backward, then reset.
/// Returns (spikes, updated membrane).
pub fn step_spiking(tape: &mut Tape, h: Var, cfg: &NeuronConfig) -> Result<(Var, Var)> {
    let spikes = tape.heaviside_surrogate(h, cfg.v_threshold, cfg.surrogate_width)?;
    let v = apply_reset(tape, h, spikes, cfg)?;
    Ok((spikes, v))
}

/// Path-B step: clipped-ReLU output, hard-reset-like gate at 1/2.
/// The gate is a constant during backward; gradient flows only through the
/// clipped ReLU and the kept membrane.
pub fn step_surrogate(tape: &mut Tape, h: Var, cfg: &NeuronConfig) -> Result<(Var, Var)> {
    let out = tape.relu_clip(h, cfg.v_threshold, cfg.surrogate_width)?;
    let gate_value = tape.value(out).map(|o| if o >= 0.5 { 1.0 } else { 0.0 });
    let gate = tape.constant(gate_value);
    let v = apply_reset(tape, h, gate, cfg)?;
    Ok((out, v))
}

fn apply_reset(tape: &mut Tape, h: Var, fired: Var, cfg: &NeuronConfig) -> Result<Var> {
    match cfg.reset {
        ResetMode::Hard => {
            let ones = tape.constant(Tensor::ones(tape.value(fired).shape()));
            let keep_mask = tape.sub(ones, fired)?;
            let kept = tape.mul(keep_mask, h)?;
            if cfg.v_reset == 0.0 {
                Ok(kept)
            } else {
                let reset_part = tape.scale(fired, cfg.v_reset)?;
                tape.add(kept, reset_part)
            }
        }
        ResetMode::Soft => {
            let drop = tape.scale(fired, cfg.v_threshold)?;
            tape.sub(h, drop)
        }
    }
}

// ------------------------------------------------------------- raw ops

/// Raw membrane charge for the tape-free inference path.
pub fn charge_value(membrane: &Tensor, synaptic_input: &Tensor, cfg: &NeuronConfig) -> Result<Tensor> {
    if membrane.shape() != synaptic_input.shape() {
        return Err(Error::Shape(format!(
            "membrane {:?} vs input {:?}",
            membrane.shape(),
            synaptic_input.shape()
        )));
    }
    let tau = cfg.effective_tau();
    let out: Vec<f64> = membrane
        .data()
        .iter()
        .zip(synaptic_input.data().iter())
        .map(|(&v, &x)| tau * v + x)
        .collect();
    Tensor::new(membrane.shape().to_vec(), out)
}

/// Raw path-A step. Returns (binary spikes, updated membrane).
pub fn step_spiking_value(h: &Tensor, cfg: &NeuronConfig) -> (Tensor, Tensor) {
    let spikes = h.map(|x| if x >= cfg.v_threshold { 1.0 } else { 0.0 });
    let v = match cfg.reset {
        ResetMode::Hard => h.data()
            .iter()
            .zip(spikes.data().iter())
            .map(|(&hv, &s)| (1.0 - s) * hv + cfg.v_reset * s)
            .collect::<Vec<f64>>(),
        ResetMode::Soft => h
            .data()
            .iter()
            .zip(spikes.data().iter())
            .map(|(&hv, &s)| hv - s * cfg.v_threshold)
            .collect(),
    };
    (spikes, Tensor::new(h.shape().to_vec(), v).expect("shape preserved"))
}

/// Rectangular surrogate window values: 1/width inside
/// |h - threshold| <= width/2 (boundaries inclusive), 0 outside.
/// This is the exact local derivative recorded for path-A spikes.
pub fn surrogate_gradient(h: &Tensor, cfg: &NeuronConfig) -> Tensor {
    let half = cfg.surrogate_width / 2.0;
    let unit = 1.0 / cfg.surrogate_width;
    h.map(|x| if (x - cfg.v_threshold).abs() <= half { unit } else { 0.0 })
}

/// Clipped-ReLU antiderivative of the surrogate window.
pub fn relu_clip_value(h: &Tensor, cfg: &NeuronConfig) -> Tensor {
    let (t, w) = (cfg.v_threshold, cfg.surrogate_width);
    h.map(|x| ((x - t) / w + 0.5).clamp(0.0, 1.0))
}

/// Closed-form membrane after T no-spike steps:
/// `h[T] = tau^(T-1) * h[1] + sum_{k=2..T} tau^(T-k) * input[k]`,
/// the unrolled form of `h[t] = tau * h[t-1] + input[t]`.
pub fn closed_form_membrane(h1: &Tensor, inputs: &[Tensor], tau: f64) -> Result<Tensor> {
    let t_total = inputs.len() + 1;
    for (i, x) in inputs.iter().enumerate() {
        if x.shape() != h1.shape() {
            return Err(Error::Shape(format!(
                "input {} has shape {:?}, expected {:?}",
                i + 2,
                x.shape(),
                h1.shape()
            )));
        }
    }
    let mut out: Vec<f64> = h1
        .data()
        .iter()
        .map(|&v| tau.powi((t_total - 1) as i32) * v)
        .collect();
    for (i, x) in inputs.iter().enumerate() {
        let k = i + 2;
        let coeff = tau.powi((t_total - k) as i32);
        for (o, &xv) in out.iter_mut().zip(x.data().iter()) {
            *o += coeff * xv;
        }
    }
    Tensor::new(h1.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::finite_difference_gradient;
    use crate::tape::ParamMap;
    use crate::tensor::Precision;

    fn cfg(tau: f64, v_th: f64, width: f64) -> NeuronConfig {
        NeuronConfig { tau, v_threshold: v_th, surrogate_width: width, ..NeuronConfig::default() }
    }

    #[test]
    fn charge_basic_arithmetic() {
        let c = cfg(0.5, 1.0, 1.0);
        let v = Tensor::scalar(1.0);
        let x = Tensor::scalar(1.0);
        assert_eq!(charge_value(&v, &x, &c).unwrap().item(), 1.5);
    }

    #[test]
    fn integrate_and_fire_has_no_leak() {
        let mut c = cfg(0.9, 1.0, 1.0);
        c.kind = NeuronKind::If;
        let v = Tensor::scalar(123.0);
        let x = Tensor::scalar(0.25);
        assert_eq!(charge_value(&v, &x, &c).unwrap().item(), 0.25);
    }

    #[test]
    fn charge_hand_arithmetic() {
        let c = cfg(0.9, 1.0, 1.0);
        let v = Tensor::new(vec![2], vec![0.2, -0.1]).unwrap();
        let x = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let h = charge_value(&v, &x, &c).unwrap();
        assert!((h.data()[0] - 1.18).abs() < 1e-12);
        assert!((h.data()[1] - 0.91).abs() < 1e-12);
    }

    #[test]
    fn surrogate_window_values() {
        let c1 = cfg(0.5, 1.0, 1.0);
        let h = Tensor::new(vec![2], vec![1.0, 1.5]).unwrap();
        let g = surrogate_gradient(&h, &c1);
        assert_eq!(g.data(), &[1.0, 1.0]); // center and inclusive boundary
        let c2 = cfg(0.5, 1.0, 2.0);
        let g2 = surrogate_gradient(&Tensor::scalar(2.5), &c2);
        assert_eq!(g2.item(), 0.0); // outside the window
    }

    #[test]
    fn relu_clip_values() {
        let c1 = cfg(0.5, 1.0, 1.0);
        assert_eq!(relu_clip_value(&Tensor::scalar(1.0), &c1).item(), 0.5);
        assert_eq!(relu_clip_value(&Tensor::scalar(1.5), &c1).item(), 1.0);
        assert_eq!(relu_clip_value(&Tensor::scalar(0.5), &c1).item(), 0.0);
        let c2 = cfg(0.5, 1.0, 2.0);
        assert!((relu_clip_value(&Tensor::scalar(1.4), &c2).item() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn spiking_step_hard_reset() {
        let c = cfg(0.5, 1.0, 1.0);
        let (o, v) = step_spiking_value(&Tensor::scalar(1.2), &c);
        assert_eq!(o.item(), 1.0);
        assert_eq!(v.item(), 0.0);
        let (o, v) = step_spiking_value(&Tensor::scalar(0.8), &c);
        assert_eq!(o.item(), 0.0);
        assert_eq!(v.item(), 0.8);
    }

    #[test]
    fn spiking_step_soft_reset() {
        let mut c = cfg(0.5, 1.0, 1.0);
        c.reset = ResetMode::Soft;
        let (o, v) = step_spiking_value(&Tensor::scalar(1.2), &c);
        assert_eq!(o.item(), 1.0);
        assert!((v.item() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn spike_exactly_at_threshold() {
        let c = cfg(0.5, 1.0, 1.0);
        let (o, v) = step_spiking_value(&Tensor::scalar(1.0), &c);
        assert_eq!(o.item(), 1.0);
        assert_eq!(v.item(), 0.0);
    }

    #[test]
    fn surrogate_step_output_gate_and_reset() {
        let c = cfg(0.5, 1.0, 1.0);
        let mut tape = Tape::new(Precision::F64);
        let h = tape.constant(Tensor::new(vec![3], vec![1.6, 0.4, 1.0]).unwrap());
        let (o, v) = step_surrogate(&mut tape, h, &c).unwrap();
        assert_eq!(tape.value(o).data(), &[1.0, 0.0, 0.5]);
        // gates fire at 1.6 and at the 0.5 output boundary, keeping 0.4
        assert_eq!(tape.value(v).data(), &[0.0, 0.4, 0.0]);
    }

    #[test]
    fn surrogate_gate_carries_no_gradient() {
        // d(sum(v'))/dh at h where the gate is closed must be exactly 1
        // (v' = h there) and 0 where the gate fired, with no window term.
        let c = cfg(0.5, 1.0, 1.0);
        let mut tape = Tape::new(Precision::F64);
        let h = tape
            .parameter("h", Tensor::new(vec![2], vec![0.2, 1.9]).unwrap())
            .unwrap();
        let (_o, v) = step_surrogate(&mut tape, h, &c).unwrap();
        let root = tape.sum(v).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get("h").unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn tape_and_raw_spiking_steps_agree() {
        let c = cfg(0.7, 1.0, 1.0);
        let mut rng = Rng::new(4);
        let h = Tensor::random_normal(&[20], 1.2, &mut rng);
        let (o_raw, v_raw) = step_spiking_value(&h, &c);
        let mut tape = Tape::new(Precision::F64);
        let hv = tape.constant(h);
        let (o, v) = step_spiking(&mut tape, hv, &c).unwrap();
        assert_eq!(tape.value(o), &o_raw);
        assert_eq!(tape.value(v), &v_raw);
    }

    #[test]
    fn closed_form_degenerate_cases() {
        let h1 = Tensor::scalar(2.5);
        // T = 1: unchanged
        assert_eq!(closed_form_membrane(&h1, &[], 0.37).unwrap().item(), 2.5);
        // tau = 0: only the last input survives
        let inputs = vec![Tensor::scalar(3.0), Tensor::scalar(-4.0)];
        assert_eq!(closed_form_membrane(&h1, &inputs, 0.0).unwrap().item(), -4.0);
    }

    #[test]
    fn closed_form_hand_recurrence() {
        // tau = 0.5, h1 = 1, inputs 1, 1: h3 = 0.5*(0.5*1 + 1) + 1 = 1.75
        let h1 = Tensor::scalar(1.0);
        let inputs = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let h3 = closed_form_membrane(&h1, &inputs, 0.5).unwrap();
        assert!((h3.item() - 1.75).abs() < 1e-15);
    }

    #[test]
    fn closed_form_matches_iterated_charge() {
        let mut rng = Rng::new(17);
        for trial in 0..100 {
            let tau = rng.uniform();
            let t_total = 1 + rng.below(16);
            let c = cfg(tau, 1e6, 1.0); // huge threshold: never spikes
            let h1 = Tensor::random_normal(&[3], 1.0, &mut rng);
            let inputs: Vec<Tensor> =
                (1..t_total).map(|_| Tensor::random_normal(&[3], 1.0, &mut rng)).collect();
            let mut v = h1.clone();
            for x in &inputs {
                v = charge_value(&v, x, &c).unwrap();
            }
            let closed = closed_form_membrane(&h1, &inputs, tau).unwrap();
            assert!(
                v.max_abs_diff(&closed) < 1e-12,
                "trial {trial}: tau={tau} T={t_total} diff {}",
                v.max_abs_diff(&closed)
            );
        }
    }

    #[test]
    fn hard_reset_is_exact_zero() {
        let c = cfg(0.9, 1.0, 1.0);
        let (_, v) = step_spiking_value(&Tensor::new(vec![3], vec![1.0, 7.3, 1e9]).unwrap(), &c);
        assert_eq!(v.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn path_b_output_bounded() {
        let c = cfg(0.5, 1.0, 0.3);
        let mut rng = Rng::new(8);
        let h = Tensor::random_normal(&[500], 5.0, &mut rng);
        let o = relu_clip_value(&h, &c);
        assert!(o.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn narrow_width_approaches_step_function() {
        let c = cfg(0.5, 1.0, 1e-6);
        let mut rng = Rng::new(14);
        let h = Tensor::random_uniform(&[1000], 0.0, 2.0, &mut rng);
        let half = c.surrogate_width / 2.0;
        let soft = relu_clip_value(&h, &c);
        let (hard, _) = step_spiking_value(&h, &c);
        for ((&x, &s), &sp) in h.data().iter().zip(soft.data()).zip(hard.data()) {
            if (x - c.v_threshold).abs() > half {
                assert_eq!(s, sp, "mismatch away from threshold at h={x}");
            }
        }
    }

    #[test]
    fn relu_clip_derivative_equals_surrogate_window() {
        // Finite differences of the antiderivative against the window,
        // sampled at margin >= 10h from both kinks.
        let c = cfg(0.5, 1.0, 1.0);
        let step = 1e-5;
        let mut rng = Rng::new(27);
        let mut checked = 0;
        while checked < 200 {
            let x = rng.range(-0.5, 2.5);
            let margin = (x - 0.5f64).abs().min((x - 1.5f64).abs());
            if margin < 10.0 * step {
                continue;
            }
            checked += 1;
            let mut params = ParamMap::new();
            params.insert("h".into(), Tensor::scalar(x));
            let fd = finite_difference_gradient(
                |p| Ok(relu_clip_value(&p["h"], &c).item()),
                &params,
                step,
            )
            .unwrap();
            let window = surrogate_gradient(&Tensor::scalar(x), &c).item();
            assert!(
                (fd.get("h").unwrap().item() - window).abs() < 1e-6,
                "at h={x}: fd {} vs window {window}",
                fd.get("h").unwrap().item()
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut c = NeuronConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 1.5;
        assert!(c.validate().is_err());
        c.tau = 0.5;
        c.surrogate_width = 0.0;
        assert!(c.validate().is_err());
        c.surrogate_width = 1.0;
        c.v_threshold = 0.0;
        assert!(c.validate().is_err());
    }
}
