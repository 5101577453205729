//! Adam with bias correction and a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `lr(s) = base · decay^⌊s / interval⌋` for the update with zero-based index `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base: f64,
    pub decay: f64,
    pub interval: u64,
}

impl StepDecay {
    pub fn constant(base: f64) -> Self {
        StepDecay {
            base,
            decay: 1.0,
            interval: u64::MAX,
        }
    }

    pub fn rate(&self, completed_steps: u64) -> f64 {
        let k = completed_steps / self.interval.max(1);
        self.base * self.decay.powi(k.min(i32::MAX as u64) as i32)
    }
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay {
            base: 1e-3,
            decay: 0.9,
            interval: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: StepDecay,
}

impl AdamState {
    /// Zero moments congruent with the given buffer sizes.
    pub fn new(shapes: &[usize], schedule: StepDecay) -> Self {
        AdamState {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    pub fn for_params(params: &[&mut Vec<f64>], schedule: StepDecay) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        AdamState::new(&shapes, schedule)
    }

    /// Learning rate the next update will use.
    pub fn current_rate(&self) -> f64 {
        self.schedule.rate(self.step)
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam holds {} buffers but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("buffer {i} changed size")));
            }
        }
        let lr = self.current_rate();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_of_quadratic() {
        let mut x = vec![1.0];
        let mut st = AdamState::new(&[1], StepDecay::constant(0.1));
        let g = vec![vec![2.0 * x[0]]];
        st.step(&mut [&mut x], &g).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut x = vec![0.3, -0.2];
        let mut st = AdamState::new(&[2], StepDecay::default());
        st.step(&mut [&mut x], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(x, vec![0.3, -0.2]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn schedule_decays_every_interval() {
        let s = StepDecay::default();
        assert_eq!(s.rate(0), 1e-3);
        assert_eq!(s.rate(999), 1e-3);
        assert!((s.rate(1000) - 0.9e-3).abs() < 1e-18);
        assert!((s.rate(2500) - 0.81e-3).abs() < 1e-18);
    }

    #[test]
    fn shape_mismatch() {
        let mut x = vec![0.0; 3];
        let mut st = AdamState::new(&[2], StepDecay::default());
        assert!(st.step(&mut [&mut x], &[vec![0.0; 3]]).is_err());
    }
}
