//! Retrieval and classification metrics with deterministic tie handling.

use crate::tensor::{Scalar, Tensor};

/// Rank of the positive (diagonal) item for each query row of a similarity
/// matrix: 1 + strictly-better items + equal items at a lower index.
fn positive_ranks<T: Scalar>(sim: &Tensor<T>) -> Vec<usize> {
    let (q, g) = (sim.dims()[0], sim.dims()[1]);
    let mut ranks = Vec::with_capacity(q);
    for i in 0..q {
        let row = &sim.data()[i * g..(i + 1) * g];
        let positive = row[i];
        let mut rank = 1;
        for (j, &s) in row.iter().enumerate() {
            if j == i {
                continue;
            }
            if s > positive || (s == positive && j < i) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    ranks
}

/// Recall@K over a square similarity matrix whose diagonal holds the
/// positive pair. K larger than the gallery clamps to the gallery size.
pub fn recall_from_similarity<T: Scalar>(sim: &Tensor<T>, ks: &[usize]) -> Vec<(usize, f64)> {
    assert_eq!(sim.rank(), 2);
    assert_eq!(sim.dims()[0], sim.dims()[1], "diagonal ground truth");
    let gallery = sim.dims()[1];
    let ranks = positive_ranks(sim);
    ks.iter()
        .map(|&k| {
            let k_used = k.min(gallery);
            let hits = ranks.iter().filter(|&&r| r <= k_used).count();
            (k, hits as f64 / ranks.len() as f64)
        })
        .collect()
}

fn cosine_matrix<T: Scalar>(query: &Tensor<T>, gallery: &Tensor<T>) -> Tensor<T> {
    let d = query.dims()[1];
    let (q, g) = (query.dims()[0], gallery.dims()[0]);
    let norm_rows = |t: &Tensor<T>| -> Vec<T> {
        let mut out = t.data().to_vec();
        let n = t.dims()[1];
        for r in 0..t.dims()[0] {
            let row = &mut out[r * n..(r + 1) * n];
            let mut sq = T::ZERO;
            for &v in row.iter() {
                sq += v * v;
            }
            let norm = sq.sqrt();
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        out
    };
    let qn = norm_rows(query);
    let gn = norm_rows(gallery);
    let mut sim = vec![T::ZERO; q * g];
    for i in 0..q {
        for j in 0..g {
            let mut dot = T::ZERO;
            for k in 0..d {
                dot += qn[i * d + k] * gn[j * d + k];
            }
            sim[i * g + j] = dot;
        }
    }
    Tensor::new(vec![q, g], sim).unwrap()
}

/// Recall@K by cosine similarity with the i-th gallery row as the positive
/// of the i-th query row.
pub fn evaluate_retrieval<T: Scalar>(
    query_feats: &Tensor<T>,
    gallery_feats: &Tensor<T>,
    ks: &[usize],
) -> Vec<(usize, f64)> {
    assert_eq!(query_feats.dims(), gallery_feats.dims());
    recall_from_similarity(&cosine_matrix(query_feats, gallery_feats), ks)
}

/// Top-1 / top-5 classification accuracy by cosine similarity against class
/// prompt features, ties broken by lower class index. Top-5 is reported
/// only when there are at least 5 classes.
pub fn evaluate_classification<T: Scalar>(
    img_feats: &Tensor<T>,
    class_feats: &Tensor<T>,
    labels: &[usize],
) -> (f64, Option<f64>) {
    let sim = cosine_matrix(img_feats, class_feats);
    let (n, c) = (sim.dims()[0], sim.dims()[1]);
    assert_eq!(n, labels.len());
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for i in 0..n {
        let row = &sim.data()[i * c..(i + 1) * c];
        let label = labels[i];
        let target = row[label];
        // Classes ranked above the true one: strictly better, or equal with
        // a lower index.
        let better = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| j != label && (s > target || (s == target && j < label)))
            .count();
        if better == 0 {
            top1 += 1;
        }
        if better < 5 {
            top5 += 1;
        }
    }
    let n = n as f64;
    (
        top1 as f64 / n,
        (c >= 5).then_some(top5 as f64 / n),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_identity_features() {
        let feats = Tensor::<f64>::eye(4);
        let r = evaluate_retrieval(&feats, &feats, &[1]);
        assert_eq!(r[0], (1, 1.0));
    }

    #[test]
    fn recall_hand_ranked_case() {
        // Query 1's positive 0.2 loses to 0.8 in its row.
        let sim = Tensor::new(
            vec![3, 3],
            vec![0.9, 0.1, 0.0, 0.8, 0.2, 0.1, 0.0, 0.1, 0.9],
        )
        .unwrap();
        let r = recall_from_similarity(&sim, &[1, 2, 3]);
        assert_eq!(r[0], (1, 2.0 / 3.0));
        assert_eq!(r[1], (2, 1.0));
        assert_eq!(r[2].1, 1.0);
    }

    #[test]
    fn recall_at_gallery_size_is_always_one() {
        let mut rng = crate::rng::DetRng::new(5);
        let feats = Tensor::<f64>::new(
            vec![6, 8],
            (0..48).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let r = evaluate_retrieval(&feats, &feats, &[6, 100]);
        assert_eq!(r[0].1, 1.0);
        // K beyond the gallery clamps.
        assert_eq!(r[1].1, 1.0);
    }

    #[test]
    fn recall_ties_break_toward_lower_index() {
        // Rows 0 and 1 are duplicates: query 1's positive ties with index 0,
        // so it ranks second.
        let sim = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let r = recall_from_similarity(&sim, &[1]);
        assert_eq!(r[0].1, 0.5);
    }

    #[test]
    fn classification_perfect_and_orthogonal() {
        let class_feats = Tensor::<f64>::eye(8);
        let labels: Vec<usize> = (0..8).collect();
        let (top1, top5) = evaluate_classification(&class_feats, &class_feats, &labels);
        assert_eq!(top1, 1.0);
        assert_eq!(top5, Some(1.0));

        // Orthogonal features pointing at the wrong class.
        let wrong: Vec<usize> = (0..8).map(|i| (i + 1) % 8).collect();
        let (top1, _) = evaluate_classification(&class_feats, &class_feats, &wrong);
        assert_eq!(top1, 0.0);
    }

    #[test]
    fn classification_matches_brute_force_argmax() {
        let mut rng = crate::rng::DetRng::new(9);
        let n = 16;
        let c = 8;
        let img = Tensor::<f64>::new(
            vec![n, 12],
            (0..n * 12).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let classes = Tensor::<f64>::new(
            vec![c, 12],
            (0..c * 12).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.index(c)).collect();

        let (top1, _) = evaluate_classification(&img, &classes, &labels);

        // Oracle: explicit normalized argmax.
        let unit = |row: &[f64]| -> Vec<f64> {
            let s: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / s).collect()
        };
        let mut hits = 0;
        for i in 0..n {
            let q = unit(&img.data()[i * 12..(i + 1) * 12]);
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..c {
                let g = unit(&classes.data()[j * 12..(j + 1) * 12]);
                let dot: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
                if dot > best_sim {
                    best_sim = dot;
                    best = j;
                }
            }
            if best == labels[i] {
                hits += 1;
            }
        }
        assert_eq!(top1, hits as f64 / n as f64);
    }

    #[test]
    fn classification_with_few_classes_drops_top5() {
        let class_feats = Tensor::<f64>::eye(3);
        let labels = vec![0, 1, 2];
        let (_, top5) = evaluate_classification(&class_feats, &class_feats, &labels);
        assert_eq!(top5, None);
    }
}
