//! Second-order IIR sections (RBJ audio-EQ cookbook).

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    fn omega(fc: f64, sr: f64, q: f64) -> (f64, f64, f64) {
        let w = 2.0 * PI * (fc / sr).clamp(1e-5, 0.499);
        (w.cos(), w.sin(), w.sin() / (2.0 * q))
    }

    pub fn lowpass(fc: f64, q: f64, sr: f64) -> Self {
        let (c, _, al) = Self::omega(fc, sr, q);
        Self::normalized(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + al, -2.0 * c, 1.0 - al],
        )
    }

    pub fn highpass(fc: f64, q: f64, sr: f64) -> Self {
        let (c, _, al) = Self::omega(fc, sr, q);
        Self::normalized(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            [1.0 + al, -2.0 * c, 1.0 - al],
        )
    }

    /// Band-pass with 0 dB peak gain.
    pub fn bandpass(fc: f64, q: f64, sr: f64) -> Self {
        let (c, _, al) = Self::omega(fc, sr, q);
        Self::normalized([al, 0.0, -al], [1.0 + al, -2.0 * c, 1.0 - al])
    }

    /// Peaking EQ boosting or cutting `gain_db` around `fc`.
    pub fn peaking(fc: f64, q: f64, gain_db: f64, sr: f64) -> Self {
        let (c, _, al) = Self::omega(fc, sr, q);
        let a = 10f64.powf(gain_db / 40.0);
        Self::normalized(
            [1.0 + al * a, -2.0 * c, 1.0 - al * a],
            [1.0 + al / a, -2.0 * c, 1.0 - al / a],
        )
    }

    /// Filters `x` from zero initial state (direct form I, f64 state).
    pub fn process(&self, x: &[f32]) -> Vec<f32> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0f64, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let v = v as f64;
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = v;
                y2 = y1;
                y1 = y;
                y as f32
            })
            .collect()
    }

    /// Magnitude response at `f` Hz.
    pub fn gain_at(&self, f: f64, sr: f64) -> f64 {
        let w = 2.0 * PI * f / sr;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let nr = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let ni = -(self.b[1] * s1 + self.b[2] * s2);
        let dr = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let di = -(self.a[0] * s1 + self.a[1] * s2);
        ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
    }
}
