//! Dense patch matching between two images for offline visualization.
//!
//! The default score is cosine similarity of final patch features. The
//! attention score averages, over heads, the softmax of last-block queries
//! of image `a` against last-block keys of image `b`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph};
use crate::image::Image;
use crate::math::sqrt;
use crate::model::{patchify, ModelPair};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    /// Row-major patch index in image `a`.
    pub a: usize,
    /// Best patch index in image `b`.
    pub b: usize,
    pub score: f64,
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// For each row of `a`, the row of `b` with the highest cosine similarity
/// (lowest index on ties).
pub fn match_features(a: &Matrix, b: &Matrix) -> Result<Vec<PatchMatch>> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!("feature dims {} and {}", a.cols, b.cols)));
    }
    let norms = |m: &Matrix| -> Result<Vec<f64>> {
        (0..m.rows)
            .map(|r| {
                let n = m.row(r).iter().map(|v| v * v).sum::<f64>();
                if n == 0.0 { Err(Error::ZeroVector) } else { Ok(n) }
            })
            .collect()
    };
    let (na, nb) = (norms(a)?, norms(b)?);
    let mut out = Vec::with_capacity(a.rows);
    for i in 0..a.rows {
        let sims: Vec<f64> = (0..b.rows)
            .map(|j| {
                let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                (dot / sqrt(na[i] * nb[j])).clamp(-1.0, 1.0)
            })
            .collect();
        let (j, score) = argmax(&sims);
        out.push(PatchMatch { a: i, b: j, score });
    }
    Ok(out)
}

/// Head-averaged cross-attention of `a`'s queries over `b`'s keys, taken
/// from `tokens x 3D` query/key/value projections.
pub fn attention_matches(qkv_a: &Matrix, qkv_b: &Matrix, heads: usize) -> Result<Vec<PatchMatch>> {
    if qkv_a.cols != qkv_b.cols || heads == 0 || qkv_a.cols % (3 * heads) != 0 {
        return Err(Error::Shape(format!("qkv widths {} and {} for {heads} heads", qkv_a.cols, qkv_b.cols)));
    }
    let d = qkv_a.cols / 3;
    let dh = d / heads;
    let scale = 1.0 / sqrt(dh as f64);
    let mut out = Vec::with_capacity(qkv_a.rows);
    for i in 0..qkv_a.rows {
        let mut avg = alloc::vec![0.0; qkv_b.rows];
        for h in 0..heads {
            let q = &qkv_a.row(i)[h * dh..(h + 1) * dh];
            let mut scores: Vec<f64> = (0..qkv_b.rows)
                .map(|j| {
                    let k = &qkv_b.row(j)[d + h * dh..d + (h + 1) * dh];
                    q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale
                })
                .collect();
            softmax_in_place(&mut scores);
            for (a, s) in avg.iter_mut().zip(&scores) {
                *a += s / heads as f64;
            }
        }
        let (j, score) = argmax(&avg);
        out.push(PatchMatch { a: i, b: j, score });
    }
    Ok(out)
}

/// Matches every patch of `a` to a patch of `b` with the base encoder.
pub fn match_images(model: &ModelPair, a: &Image, b: &Image, attention: bool) -> Result<Vec<PatchMatch>> {
    let vit = &model.arch.vit;
    let mut encoded = Vec::with_capacity(2);
    for img in [a, b] {
        let tokens = patchify(img, vit)?;
        let mut g = Graph::new();
        let mut branch = model.base_branch(false);
        let e = branch.encode_detailed(&mut g, &tokens, attention)?;
        let m = match e.last_qkv {
            Some(qkv) if attention => {
                let m = g.value(qkv);
                let skip = vit.use_class_token as usize;
                Matrix::from_vec(m.rows - skip, m.cols, m.data[skip * m.cols..].to_vec())
            }
            _ => g.value(e.features).clone(),
        };
        encoded.push(m);
    }
    if attention {
        if vit.depth == 0 {
            return Err(Error::Config("attention matching needs at least one block".into()));
        }
        attention_matches(&encoded[0], &encoded[1], vit.num_heads)
    } else {
        match_features(&encoded[0], &encoded[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadConfig, ViTConfig};
    use crate::synthetic::{synthetic_image, SyntheticParams};

    #[test]
    fn feature_matching_basics() {
        let a = Matrix::from_vec(2, 2, alloc::vec![1.0, 0.0, 0.0, 1.0]);
        let b = Matrix::from_vec(3, 2, alloc::vec![0.0, 2.0, 3.0, 0.1, 1.0, 1.0]);
        let m = match_features(&a, &b).unwrap();
        assert_eq!((m[0].a, m[0].b), (0, 1));
        assert_eq!((m[1].a, m[1].b), (1, 0));
        assert_eq!(m[1].score, 1.0);
        assert!(match_features(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn image_matches_itself() {
        let vit = ViTConfig { depth: 1, ..ViTConfig::desk() };
        let model = ModelPair::new(vit, HeadConfig::desk(), 0.996, 2).unwrap();
        let img = synthetic_image(&SyntheticParams { side: 224, ..Default::default() }, 1, 0);
        let m = match_images(&model, &img, &img, false).unwrap();
        assert_eq!(m.len(), 196);
        for p in &m {
            assert_eq!(p.a, p.b);
            assert_eq!(p.score, 1.0);
        }
        let att = match_images(&model, &img, &img, true).unwrap();
        assert_eq!(att.len(), 196);
        assert!(att.iter().all(|p| p.score > 0.0 && p.score <= 1.0));
    }
}
