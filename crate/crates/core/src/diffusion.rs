//! Forward corruption with partial noising, the anchoring function, and the posterior mean.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Matrix;
use crate::tokenizer::{BOS, EOS, PAD, SEP};

/// A source/target pair laid out as `[BOS] src [SEP] trg [EOS]` and right-padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedExample {
    pub src_ids: Vec<u32>,
    pub trg_ids: Vec<u32>,
    pub ids: Vec<u32>,
    /// Index of the first target position, just past `SEP`.
    pub boundary: usize,
}

impl PairedExample {
    pub fn new(src_ids: Vec<u32>, trg_ids: Vec<u32>, seq_len: usize) -> Result<Self> {
        let needed = src_ids.len() + trg_ids.len() + 3;
        if needed > seq_len {
            return Err(Error::Data(format!(
                "pair needs {needed} positions but the layout has {seq_len}"
            )));
        }
        let mut ids = Vec::with_capacity(seq_len);
        ids.push(BOS);
        ids.extend(&src_ids);
        ids.push(SEP);
        let boundary = ids.len();
        ids.extend(&trg_ids);
        ids.push(EOS);
        ids.resize(seq_len, PAD);
        Ok(PairedExample {
            src_ids,
            trg_ids,
            ids,
            boundary,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    /// Ids of the anchored half, `[BOS] src [SEP]`.
    pub fn source_part(&self) -> &[u32] {
        &self.ids[..self.boundary]
    }

    pub fn target_part(&self) -> &[u32] {
        &self.ids[self.boundary..]
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id == PAD).collect()
    }
}

/// Layout used at inference: the source half only, with every remaining slot a target slot.
pub fn source_layout(src_ids: &[u32], seq_len: usize) -> Result<Vec<u32>> {
    if src_ids.len() + 3 > seq_len {
        return Err(Error::Data(format!(
            "source of {} tokens leaves no target slot in a layout of {seq_len}",
            src_ids.len()
        )));
    }
    let mut ids = Vec::with_capacity(src_ids.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(src_ids);
    ids.push(SEP);
    Ok(ids)
}

/// `z_t = x_t ⊕ y_t` with the split at `boundary`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Matrix,
    pub t: usize,
    pub boundary: usize,
    pub pad_mask: Vec<bool>,
}

impl LatentState {
    pub fn x_rows(&self) -> Matrix {
        Matrix::from_vec(
            self.boundary,
            self.z.cols,
            self.z.data[..self.boundary * self.z.cols].to_vec(),
        )
    }

    pub fn y_rows(&self) -> Matrix {
        let rows = self.z.rows - self.boundary;
        Matrix::from_vec(rows, self.z.cols, self.z.data[self.boundary * self.z.cols..].to_vec())
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Embeds the layout, reading source positions from `source` and the rest from `target`.
pub fn embed_layout(ids: &[u32], boundary: usize, target: &EmbeddingTable, source: &EmbeddingTable) -> Matrix {
    let mut z = target.embed(ids);
    for (i, &id) in ids[..boundary].iter().enumerate() {
        z.row_mut(i).copy_from_slice(source.row(id));
    }
    z
}

/// Draws `z_0 ~ N(Emb(w), β_0 I)`.
pub fn sample_z0<R: Rng + ?Sized>(
    example: &PairedExample,
    table: &EmbeddingTable,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> LatentState {
    let mut z = table.embed(&example.ids);
    let std = schedule.beta0().sqrt();
    if std > 0.0 {
        for v in z.data.iter_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    LatentState {
        z,
        t: 0,
        boundary: example.boundary,
        pad_mask: example.pad_mask(),
    }
}

/// Partial noising with explicit noise: target rows follow `√ᾱ_t·y_0 + √(1−ᾱ_t)·ε`, source rows
/// are carried over from `z0` untouched.
pub fn q_sample_with_noise(z0: &LatentState, t: usize, schedule: &NoiseSchedule, noise: &Matrix) -> LatentState {
    assert_eq!(noise.shape(), z0.z.shape(), "noise shape");
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut z = z0.z.clone();
    let start = z0.boundary * z.cols;
    for (v, e) in z.data[start..].iter_mut().zip(&noise.data[start..]) {
        *v = a * *v + b * e;
    }
    LatentState {
        z,
        t,
        boundary: z0.boundary,
        pad_mask: z0.pad_mask.clone(),
    }
}

pub fn q_sample<R: Rng + ?Sized>(z0: &LatentState, t: usize, schedule: &NoiseSchedule, rng: &mut R) -> LatentState {
    assert!((1..=schedule.steps()).contains(&t), "q_sample step {t} out of range");
    let noise = standard_normal(z0.z.rows, z0.z.cols, rng);
    q_sample_with_noise(z0, t, schedule, &noise)
}

/// One forward transition `q(z_t | z_{t−1})` on the target rows.
pub fn q_step<R: Rng + ?Sized>(prev: &LatentState, schedule: &NoiseSchedule, rng: &mut R) -> LatentState {
    let t = prev.t + 1;
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    let mut next = prev.clone();
    next.t = t;
    let start = prev.boundary * prev.z.cols;
    for v in next.z.data[start..].iter_mut() {
        *v = a * *v + b * rng.sample::<f64, _>(StandardNormal);
    }
    next
}

/// Overwrites the source rows with `x0_rows`.
pub fn anchor(state: &LatentState, x0_rows: &Matrix) -> Result<LatentState> {
    let mut out = state.clone();
    anchor_in_place(&mut out.z, out.boundary, x0_rows)?;
    Ok(out)
}

pub fn anchor_in_place(z: &mut Matrix, boundary: usize, x0_rows: &Matrix) -> Result<()> {
    if x0_rows.rows != boundary || x0_rows.cols != z.cols {
        return Err(Error::Config(format!(
            "anchor rows have shape {:?}, expected ({boundary}, {})",
            x0_rows.shape(),
            z.cols
        )));
    }
    z.data[..boundary * z.cols].copy_from_slice(&x0_rows.data);
    Ok(())
}

/// `μ = coef_zt·z_t + coef_z0·ẑ_0`.
pub fn posterior_mean(z_t: &Matrix, z0_hat: &Matrix, t: usize, schedule: &NoiseSchedule) -> Matrix {
    assert_eq!(z_t.shape(), z0_hat.shape(), "posterior mean operand shapes");
    let p = schedule.posterior(t);
    let data = z_t
        .data
        .iter()
        .zip(&z0_hat.data)
        .map(|(a, b)| p.coef_zt * a + p.coef_z0 * b)
        .collect();
    Matrix::from_vec(z_t.rows, z_t.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_sqrt_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(v: usize, d: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingTable::new(Matrix::randn(v, d, 1.0, &mut rng))
    }

    #[test]
    fn layout_and_boundary() {
        let ex = PairedExample::new(vec![7, 8], vec![9], 8).unwrap();
        assert_eq!(ex.ids, vec![BOS, 7, 8, SEP, 9, EOS, PAD, PAD]);
        assert_eq!(ex.boundary, 4);
        assert_eq!(ex.source_part(), &[BOS, 7, 8, SEP]);
        assert_eq!(ex.pad_mask(), vec![false, false, false, false, false, false, true, true]);
        assert!(PairedExample::new(vec![1; 4], vec![1; 4], 10).is_err());
    }

    #[test]
    fn zero_anchor_variance_gives_exact_embedding() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.1]).unwrap();
        let t = table(12, 3, 0);
        let ex = PairedExample::new(vec![5, 6], vec![7], 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = sample_z0(&ex, &t, &s, &mut rng);
        assert_eq!(z0.z, t.embed(&ex.ids));
        assert_eq!(z0.z.shape(), (7, 3));
    }

    #[test]
    fn z0_mean_matches_embedding() {
        let s = build_sqrt_schedule(200, 1e-4).unwrap();
        let t = table(12, 2, 2);
        let ex = PairedExample::new(vec![5], vec![7], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 10_000;
        let mut mean = Matrix::zeros(5, 2);
        for _ in 0..draws {
            let z0 = sample_z0(&ex, &t, &s, &mut rng);
            mean.data.iter_mut().zip(&z0.z.data).for_each(|(m, v)| *m += v / draws as f64);
        }
        let emb = t.embed(&ex.ids);
        let tol = 4.0 * (s.beta0() / draws as f64).sqrt();
        assert!(mean.max_abs_diff(&emb) < tol);
    }

    #[test]
    fn q_sample_keeps_source_rows_and_scales_target() {
        let s = build_sqrt_schedule(50, 1e-4).unwrap();
        let t = table(12, 3, 4);
        let ex = PairedExample::new(vec![5, 6], vec![7, 8], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = sample_z0(&ex, &t, &s, &mut rng);
        for step in [1usize, 10, 50] {
            let zt = q_sample(&z0, step, &s, &mut rng);
            assert_eq!(zt.x_rows(), z0.x_rows());
            let zero = q_sample_with_noise(&z0, step, &s, &Matrix::zeros(8, 3));
            let mut expect = z0.y_rows();
            expect.scale(s.alpha_bar(step).sqrt());
            assert!(zero.y_rows().max_abs_diff(&expect) < 1e-15);
        }
    }

    #[test]
    fn anchor_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = LatentState {
            z: Matrix::randn(6, 2, 1.0, &mut rng),
            t: 3,
            boundary: 2,
            pad_mask: vec![false; 6],
        };
        assert_eq!(anchor(&state, &state.x_rows()).unwrap(), state);
        let x0 = Matrix::randn(2, 2, 1.0, &mut rng);
        let once = anchor(&state, &x0).unwrap();
        let twice = anchor(&once, &x0).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.x_rows(), x0);
        assert_eq!(once.y_rows().max_abs_diff(&state.y_rows()), 0.0);
        assert!(anchor(&state, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn posterior_mean_cases() {
        let s = build_sqrt_schedule(100, 1e-4).unwrap();
        let v = Matrix::from_vec(2, 2, vec![1.5; 4]);
        let p = s.posterior(7);
        let mu = posterior_mean(&v, &v, 7, &s);
        assert!(mu.data.iter().all(|m| (m - (p.coef_zt + p.coef_z0) * 1.5).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0 = Matrix::randn(3, 2, 1.0, &mut rng);
        for t in 2..=100 {
            let mut zt = z0.clone();
            zt.scale(s.alpha_bar(t).sqrt());
            let mu = posterior_mean(&zt, &z0, t, &s);
            let mut expect = z0.clone();
            expect.scale(s.alpha_bar(t - 1).sqrt());
            assert!(mu.max_abs_diff(&expect) < 1e-6);
        }

        let zt = Matrix::randn(3, 2, 1.0, &mut rng);
        let zh = Matrix::randn(3, 2, 1.0, &mut rng);
        let mu = posterior_mean(&zt, &zh, 40, &s);
        let (ab_t, ab_p, beta) = (s.alpha_bar(40), s.alpha_bar(39), s.beta(40));
        for i in 0..6 {
            let scalar = (1.0 - beta).sqrt() * (1.0 - ab_p) / (1.0 - ab_t) * zt.data[i]
                + ab_p.sqrt() * beta / (1.0 - ab_t) * zh.data[i];
            assert!((mu.data[i] - scalar).abs() < 1e-12);
        }
    }
}
