use log::warn;

use super::stft::Spectrogram;

/// Floor applied to magnitudes before taking the log.
pub const MAG_FLOOR: f64 = 1e-10;

/// Column layout of a [`FeatureFrameSeq`].
///
/// Columns `[0, K)` hold `log(|x⁽⁰⁾| + ε)`. Pair `p` then occupies
/// `[K + 2Kp, K + 2Kp + K)` for `cos Δφ` and the following `K` columns for
/// `sin Δφ`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub n_freqs: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl FeatureLayout {
    pub fn for_mics(n_freqs: usize, n_mics: usize) -> Self {
        let mut pairs = Vec::new();
        for a in 0..n_mics {
            for b in (a + 1)..n_mics {
                pairs.push((a, b));
            }
        }
        Self { n_freqs, pairs }
    }

    pub fn dim(&self) -> usize {
        self.n_freqs + 2 * self.n_freqs * self.pairs.len()
    }

    pub fn log_mag_cols(&self) -> std::ops::Range<usize> {
        0..self.n_freqs
    }

    pub fn cos_col(&self, pair: usize, k: usize) -> usize {
        self.n_freqs + 2 * self.n_freqs * pair + k
    }

    pub fn sin_col(&self, pair: usize, k: usize) -> usize {
        self.cos_col(pair, k) + self.n_freqs
    }
}

/// Per-frame feature rows, `[L × F]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrameSeq {
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub layout: FeatureLayout,
}

impl FeatureFrameSeq {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        let f = self.dim();
        &self.data[l * f..(l + 1) * f]
    }
}

/// Log magnitude of the reference channel plus (cos, sin) of the
/// inter-microphone phase difference for every microphone pair.
pub fn extract_features(spec: &Spectrogram) -> FeatureFrameSeq {
    let k_n = spec.n_freqs();
    let layout = FeatureLayout::for_mics(k_n, spec.n_mics());
    if layout.pairs.is_empty() {
        warn!("single-channel input: phase-difference features are empty");
    }
    let f = layout.dim();
    let n_frames = spec.n_frames();
    let mut data = vec![0.0; n_frames * f];
    for l in 0..n_frames {
        let row = &mut data[l * f..(l + 1) * f];
        for k in 0..k_n {
            row[k] = (spec.get(0, l, k).norm() + MAG_FLOOR).ln();
        }
        for (p, &(a, b)) in layout.pairs.iter().enumerate() {
            for k in 0..k_n {
                let cross = spec.get(a, l, k) * spec.get(b, l, k).conj();
                let r = cross.norm();
                let (c, s) = if r > 0.0 && r.is_finite() { (cross.re / r, cross.im / r) } else { (1.0, 0.0) };
                row[layout.cos_col(p, k)] = c;
                row[layout.sin_col(p, k)] = s;
            }
        }
    }
    FeatureFrameSeq { data, n_frames, layout }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(n_mics: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, k) = (6, 9);
        let bins = (0..n_mics * l * k).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        Spectrogram::from_bins(bins, n_mics, l, k, 16, 4).unwrap()
    }

    #[test]
    fn dimension_counts_pairs() {
        let f = extract_features(&random_spec(3, 0));
        assert_eq!(f.layout.pairs.len(), 3);
        assert_eq!(f.dim(), 9 + 2 * 9 * 3);
    }

    #[test]
    fn identical_channels_have_zero_phase_difference() {
        let mut s = random_spec(2, 1);
        for l in 0..s.n_frames() {
            for k in 0..s.n_freqs() {
                let z = s.get(0, l, k);
                s.set(1, l, k, z);
            }
        }
        let f = extract_features(&s);
        for l in 0..f.n_frames {
            for k in 0..9 {
                assert!((f.row(l)[f.layout.cos_col(0, k)] - 1.0).abs() < 1e-12);
                assert!(f.row(l)[f.layout.sin_col(0, k)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_turn_gives_minus_sine() {
        let mut s = random_spec(2, 2);
        for l in 0..s.n_frames() {
            for k in 0..s.n_freqs() {
                let z = s.get(0, l, k);
                s.set(1, l, k, z * C64::i());
            }
        }
        let f = extract_features(&s);
        for l in 0..f.n_frames {
            for k in 0..9 {
                assert!(f.row(l)[f.layout.cos_col(0, k)].abs() < 1e-12);
                assert!((f.row(l)[f.layout.sin_col(0, k)] + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_bin_hits_magnitude_floor() {
        let s = Spectrogram::zeros(2, 3, 5);
        let f = extract_features(&s);
        assert_eq!(f.row(0)[0], MAG_FLOOR.ln());
    }

    #[test]
    fn mono_has_no_phase_section() {
        let f = extract_features(&random_spec(1, 3));
        assert_eq!(f.dim(), 9);
    }

    #[test]
    fn phase_features_on_unit_circle() {
        let f = extract_features(&random_spec(3, 4));
        for l in 0..f.n_frames {
            for p in 0..3 {
                for k in 0..9 {
                    let c = f.row(l)[f.layout.cos_col(p, k)];
                    let s = f.row(l)[f.layout.sin_col(p, k)];
                    assert!((c * c + s * s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
