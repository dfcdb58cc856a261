//! The shared token embedding and the distance-based rounding head.

use rand::Rng;

use crate::tensor::{squared_distance, Matrix};

/// Standard deviation of the initial rows; small, so the `‖z_0‖²` penalty starts near zero.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Matrix,
}

impl EmbeddingTable {
    pub fn new(matrix: Matrix) -> Self {
        EmbeddingTable { matrix }
    }

    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable::new(Matrix::randn(vocab, dim, INIT_STD, rng))
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols
    }

    pub fn row(&self, id: u32) -> &[f64] {
        self.matrix.row(id as usize)
    }

    /// Looks up one row per id. Panics on ids outside the table.
    pub fn embed(&self, ids: &[u32]) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            assert!((id as usize) < self.vocab_size(), "token id {id} outside vocab");
            out.row_mut(i).copy_from_slice(self.row(id));
        }
        out
    }

    /// `logits[i][v] = −‖z_i − e_v‖²`.
    pub fn round_logits(&self, z: &Matrix) -> Matrix {
        assert_eq!(z.cols, self.dim());
        let v = self.vocab_size();
        let mut out = Matrix::zeros(z.rows, v);
        for i in 0..z.rows {
            let zi = z.row(i);
            let row = out.row_mut(i);
            for (tok, slot) in row.iter_mut().enumerate() {
                *slot = -squared_distance(zi, self.matrix.row(tok));
            }
        }
        out
    }

    /// Index of the nearest embedding row, lowest id on ties.
    pub fn nearest(&self, z: &[f64]) -> u32 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for tok in 0..self.vocab_size() {
            let d = squared_distance(z, self.matrix.row(tok));
            if d < best_d {
                best_d = d;
                best = tok;
            }
        }
        best as u32
    }

    pub fn decode_tokens(&self, z: &Matrix) -> Vec<u32> {
        (0..z.rows).map(|i| self.nearest(z.row(i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_in_place;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_shapes_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = EmbeddingTable::random(10, 4, &mut rng);
        let m = t.embed(&[1, 2, 3, 3]);
        assert_eq!(m.shape(), (4, 4));
        assert_eq!(m.row(2), m.row(3));
        assert_eq!(m.row(0), t.row(1));
        assert_eq!(t.embed(&[]).shape(), (0, 4));
    }

    #[test]
    #[should_panic]
    fn embed_rejects_out_of_range() {
        let t = EmbeddingTable::new(Matrix::zeros(3, 2));
        t.embed(&[3]);
    }

    #[test]
    fn exact_row_rounds_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = EmbeddingTable::random(10, 4, &mut rng);
        let z = t.embed(&[7]);
        let logits = t.round_logits(&z);
        let argmax = (0..10).max_by(|&a, &b| logits.get(0, a).total_cmp(&logits.get(0, b))).unwrap();
        assert_eq!(argmax, 7);
        assert_eq!(logits.get(0, 7), 0.0);
    }

    #[test]
    fn zero_table_is_uniform() {
        let t = EmbeddingTable::new(Matrix::zeros(5, 3));
        let z = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]);
        let mut p = t.round_logits(&z).data;
        softmax_in_place(&mut p);
        for v in p {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_softmax_value() {
        let t = EmbeddingTable::new(Matrix::from_rows(&[vec![0.0], vec![2.0]]));
        let z = Matrix::from_rows(&[vec![0.5]]);
        let logits = t.round_logits(&z);
        assert_eq!(logits.data, vec![-0.25, -2.25]);
        let mut p = logits.data.clone();
        softmax_in_place(&mut p);
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p[0] - expect).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn decode_inverts_embed_and_ties_pick_lowest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = EmbeddingTable::random(10, 4, &mut rng);
        let ids = vec![0, 9, 4, 4, 2];
        assert_eq!(t.decode_tokens(&t.embed(&ids)), ids);
        let flat = EmbeddingTable::new(Matrix::from_vec(3, 2, vec![1.0; 6]));
        assert_eq!(flat.decode_tokens(&Matrix::zeros(4, 2)), vec![0; 4]);
    }

    #[test]
    fn small_perturbations_keep_decoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = EmbeddingTable::random(10, 4, &mut rng);
        let mut min_gap = f64::INFINITY;
        for a in 0..10 {
            for b in a + 1..10 {
                min_gap = min_gap.min(squared_distance(t.matrix.row(a), t.matrix.row(b)).sqrt());
            }
        }
        let ids: Vec<u32> = (0..10).collect();
        let mut z = t.embed(&ids);
        // push each row by just under half the gap along a random direction
        for i in 0..10 {
            let dir = Matrix::randn(1, 4, 1.0, &mut rng);
            let norm = dir.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (zv, dv) in z.row_mut(i).iter_mut().zip(&dir.data) {
                *zv += 0.49 * min_gap * dv / norm;
            }
        }
        assert_eq!(t.decode_tokens(&z), ids);
    }
}
