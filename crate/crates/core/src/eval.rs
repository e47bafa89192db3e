//! Retrieval, box classification and candidate-matching metrics.
//!
//! Ties always count against the ground truth, so metric values do not depend
//! on sort stability or evaluation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{HARD_NEGATIVES, UNIT_NORM_TOL};
use crate::model::Model;
use crate::numerics::{dot, norm, Tensor};
use crate::synthdata::{AttributeVocab, Sample, Slot};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallSet {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub image_to_text: RecallSet,
    pub text_to_image: RecallSet,
}

fn check_finite(t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("similarity matrix".into()))
    }
}

/// `(image→text, text→image)` recall at `k` for a square similarity matrix
/// whose ground truth is the diagonal. An item counts as ranked above the
/// match when its similarity is greater or equal.
pub fn recall_at_k(sims: &Tensor, k: usize) -> Result<(f64, f64)> {
    let n = sims.rows();
    if sims.shape().len() != 2 || sims.cols() != n || n == 0 {
        return Err(Error::Shape(format!("recall needs a non-empty square matrix, got {:?}", sims.shape())));
    }
    check_finite(sims)?;
    let (mut rows, mut cols) = (0usize, 0usize);
    for i in 0..n {
        let d = sims.get2(i, i);
        let row_rank = (0..n).filter(|&j| j != i && sims.get2(i, j) >= d).count();
        let col_rank = (0..n).filter(|&j| j != i && sims.get2(j, i) >= d).count();
        rows += usize::from(row_rank < k);
        cols += usize::from(col_rank < k);
    }
    Ok((rows as f64 / n as f64, cols as f64 / n as f64))
}

pub fn retrieval(sims: &Tensor) -> Result<RetrievalResult> {
    let (a1, b1) = recall_at_k(sims, 1)?;
    let (a5, b5) = recall_at_k(sims, 5)?;
    let (a10, b10) = recall_at_k(sims, 10)?;
    Ok(RetrievalResult {
        image_to_text: RecallSet { r1: a1, r5: a5, r10: a10 },
        text_to_image: RecallSet { r1: b1, r5: b5, r10: b10 },
    })
}

fn check_unit(t: &Tensor, what: &'static str) -> Result<()> {
    for i in 0..t.rows() {
        let n = norm(t.row(i));
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { what, row: i, norm: n });
        }
    }
    Ok(())
}

/// Fraction of rows whose most similar class (lowest index on ties) is the
/// label. Applied to global image embeddings this is zero-shot classification.
pub fn bbox_classification_top1(regions: &Tensor, classes: &Tensor, labels: &[usize]) -> Result<f64> {
    let r = regions.rows();
    let c = classes.rows();
    if labels.len() != r || r == 0 || c == 0 || regions.cols() != classes.cols() {
        return Err(Error::Shape(format!(
            "{r} regions, {} labels, {c} classes, widths {} and {}",
            labels.len(),
            regions.cols(),
            classes.cols()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::BadLabel { label, classes: c });
    }
    check_unit(regions, "regions")?;
    check_unit(classes, "classes")?;
    let mut hits = 0;
    for (i, &label) in labels.iter().enumerate() {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..c {
            let s = dot(regions.row(i), classes.row(j));
            if s > best_sim {
                best = j;
                best_sim = s;
            }
        }
        hits += usize::from(best == label);
    }
    Ok(hits as f64 / r as f64)
}

/// One positive description and ten distractors for a region.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// `11 × D` candidate embeddings.
    pub embeddings: Tensor,
    pub positive: usize,
}

/// Hit iff the positive strictly beats every distractor.
pub fn candidate_match_top1(region: &[f64], candidates: &CandidateSet) -> Result<bool> {
    let e = &candidates.embeddings;
    if e.rows() != HARD_NEGATIVES + 1 {
        return Err(Error::BadCandidateCount(e.rows()));
    }
    if candidates.positive >= e.rows() {
        return Err(Error::BadIndex { index: candidates.positive, len: e.rows() });
    }
    if e.cols() != region.len() {
        return Err(Error::Shape(format!("region width {} vs candidate width {}", region.len(), e.cols())));
    }
    let pos = dot(region, e.row(candidates.positive));
    Ok((0..e.rows()).filter(|&j| j != candidates.positive).all(|j| dot(region, e.row(j)) < pos))
}

pub fn accuracy(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

// ---------------------------------------------------------------------------
// Corpus-level evaluation

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionKind {
    #[default]
    Short,
    Long,
}

/// Image/caption similarity matrix over the corpus.
pub fn corpus_similarities(model: &Model, corpus: &[Sample], caption: CaptionKind) -> Result<Tensor> {
    let img: Vec<Vec<f64>> = corpus.iter().map(|s| model.embed_image(s)).collect::<Result<_>>()?;
    let txt: Vec<Vec<f64>> = corpus
        .iter()
        .map(|s| {
            model.embed_text(match caption {
                CaptionKind::Short => &s.short_caption,
                CaptionKind::Long => &s.long_caption,
            })
        })
        .collect::<Result<_>>()?;
    if img.is_empty() {
        return Err(Error::Shape("empty corpus".into()));
    }
    Ok(Tensor::stack_rows(&img).matmul_t(&Tensor::stack_rows(&txt)))
}

pub fn evaluate_retrieval(model: &Model, corpus: &[Sample], caption: CaptionKind) -> Result<RetrievalResult> {
    retrieval(&corpus_similarities(model, corpus, caption)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FgovdResult {
    pub accuracy: f64,
    pub regions: usize,
}

/// Candidate matching over every region: the phrase against its negatives.
pub fn evaluate_fgovd(model: &Model, corpus: &[Sample]) -> Result<FgovdResult> {
    let mut hits = Vec::new();
    for s in corpus {
        let boxes: Vec<_> = s.regions.iter().map(|r| r.bbox).collect();
        let embs = model.embed_regions(s, &boxes)?;
        for (r, emb) in s.regions.iter().zip(&embs) {
            let mut rows = vec![model.embed_text(&r.phrase)?];
            for n in &r.hard_negatives {
                rows.push(model.embed_text(n)?);
            }
            let set = CandidateSet { embeddings: Tensor::stack_rows(&rows), positive: 0 };
            hits.push(candidate_match_top1(emb, &set)?);
        }
    }
    Ok(FgovdResult { accuracy: accuracy(&hits), regions: hits.len() })
}

/// A class name as a token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub tokens: Vec<u32>,
}

/// One class per shape value and language: `[lang, shape]`.
pub fn default_shape_classes(vocab: &AttributeVocab) -> Vec<ClassSpec> {
    let mut out = Vec::new();
    for lang in 0..2u8 {
        for v in 0..vocab.shapes {
            out.push(ClassSpec {
                name: format!("lang{lang}-shape{v}"),
                tokens: vec![AttributeVocab::lang_token(lang), vocab.token(lang, Slot::Shape, v)],
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BboxResult {
    pub accuracy: f64,
    pub regions: usize,
    /// Regions whose phrase matches no class.
    pub skipped: usize,
}

/// Zero-shot box classification. A region's label is the first class whose
/// tokens all occur in its phrase; unlabeled regions are skipped.
pub fn evaluate_bbox(model: &Model, corpus: &[Sample], classes: &[ClassSpec]) -> Result<BboxResult> {
    if classes.is_empty() {
        return Err(Error::Shape("no classes".into()));
    }
    let class_embs: Vec<Vec<f64>> = classes.iter().map(|c| model.embed_text(&c.tokens)).collect::<Result<_>>()?;
    let mut regions = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for s in corpus {
        let boxes: Vec<_> = s.regions.iter().map(|r| r.bbox).collect();
        let embs = model.embed_regions(s, &boxes)?;
        for (r, emb) in s.regions.iter().zip(embs) {
            match classes.iter().position(|c| c.tokens.iter().all(|t| r.phrase.contains(t))) {
                Some(l) => {
                    regions.push(emb);
                    labels.push(l);
                }
                None => skipped += 1,
            }
        }
    }
    if regions.is_empty() {
        return Ok(BboxResult { accuracy: 0.0, regions: 0, skipped });
    }
    let acc = bbox_classification_top1(&Tensor::stack_rows(&regions), &Tensor::stack_rows(&class_embs), &labels)?;
    Ok(BboxResult { accuracy: acc, regions: labels.len(), skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.row_mut(i)[i] = 1.0;
        }
        t
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| l2_normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        Tensor::stack_rows(&rows)
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&eye(5), 1).unwrap(), (1.0, 1.0));
        for n in 2..6 {
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                t.row_mut(i)[n - 1 - i] = 1.0;
            }
            if n % 2 == 1 {
                // The centre of the anti-diagonal is on the diagonal.
                t.row_mut(n / 2)[n / 2] = 0.0;
            }
            assert_eq!(recall_at_k(&t, 1).unwrap(), (0.0, 0.0));
        }
        assert!(matches!(recall_at_k(&Tensor::zeros(&[2, 3]), 1), Err(Error::Shape(_))));
        // All-equal rows: every tie counts against recall.
        assert_eq!(recall_at_k(&Tensor::zeros(&[3, 3]), 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn recall_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = 8;
            let data: Vec<f64> = (0..n * n).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
            let t = Tensor::new(vec![n, n], data).unwrap();
            for k in [1, 2, 5, 8] {
                let oracle = |get: &dyn Fn(usize, usize) -> f64| {
                    let mut hits = 0;
                    for i in 0..n {
                        // Sort with ties placing the match last.
                        let mut idx: Vec<usize> = (0..n).collect();
                        idx.sort_by(|&a, &b| {
                            get(i, b).partial_cmp(&get(i, a)).unwrap().then((a == i).cmp(&(b == i)))
                        });
                        hits += usize::from(idx.iter().position(|&j| j == i).unwrap() < k);
                    }
                    hits as f64 / n as f64
                };
                let rows = oracle(&|i, j| t.get2(i, j));
                let cols = oracle(&|i, j| t.get2(j, i));
                assert_eq!(recall_at_k(&t, k).unwrap(), (rows, cols));
            }
        }
    }

    #[test]
    fn bbox_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = unit_rows(&mut rng, 6, 8);
        assert_eq!(bbox_classification_top1(&r, &r, &[0, 1, 2, 3, 4, 5]).unwrap(), 1.0);
        assert!(matches!(
            bbox_classification_top1(&r, &r, &[0, 1, 2, 3, 4, 6]),
            Err(Error::BadLabel { label: 6, classes: 6 })
        ));
        let e = eye(3);
        assert_eq!(bbox_classification_top1(&e.slice_rows(1, 2), &e, &[1]).unwrap(), 1.0);

        for _ in 0..20 {
            let regions = unit_rows(&mut rng, 20, 4);
            let classes = unit_rows(&mut rng, 5, 4);
            let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..5)).collect();
            let mut hits = 0;
            for i in 0..20 {
                let sims: Vec<f64> = (0..5).map(|j| dot(regions.row(i), classes.row(j))).collect();
                let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                hits += usize::from(sims.iter().position(|&s| s == max) == Some(labels[i]));
            }
            assert_eq!(bbox_classification_top1(&regions, &classes, &labels).unwrap(), hits as f64 / 20.0);

            // Duplicating classes after the label range never changes the result.
            let mut rows: Vec<Vec<f64>> = (0..5).map(|j| classes.row(j).to_vec()).collect();
            rows.extend((0..5).map(|j| classes.row(j).to_vec()));
            let doubled = Tensor::stack_rows(&rows);
            assert_eq!(
                bbox_classification_top1(&regions, &doubled, &labels).unwrap(),
                hits as f64 / 20.0
            );
        }
    }

    fn set_with(pos: f64, others: &[f64]) -> (Vec<f64>, CandidateSet) {
        // Region e0; candidate j has cosine s_j with it.
        let row = |s: f64| vec![s, (1.0 - s * s).sqrt()];
        let mut rows = vec![row(pos)];
        rows.extend(others.iter().map(|&s| row(s)));
        (vec![1.0, 0.0], CandidateSet { embeddings: Tensor::stack_rows(&rows), positive: 0 })
    }

    #[test]
    fn candidate_examples() {
        let (r, set) = set_with(0.9, &[0.1; 10]);
        assert!(candidate_match_top1(&r, &set).unwrap());
        let mut others = [0.1; 10];
        others[4] = 0.9;
        let (r, set) = set_with(0.9, &others);
        assert!(!candidate_match_top1(&r, &set).unwrap());
        let (r, set) = set_with(0.9, &[0.1; 9]);
        assert!(matches!(candidate_match_top1(&r, &set), Err(Error::BadCandidateCount(10))));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut hits = Vec::new();
        let mut oracle = 0;
        for _ in 0..50 {
            let sims: Vec<f64> = (0..11).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            let (r, set) = set_with(sims[0], &sims[1..]);
            let got = candidate_match_top1(&r, &set).unwrap();
            let want = sims[1..].iter().all(|&s| s < sims[0]);
            assert_eq!(got, want);
            hits.push(got);
            oracle += usize::from(want);
        }
        assert_eq!(accuracy(&hits), oracle as f64 / 50.0);
    }

    proptest! {
        #[test]
        fn recall_at_n_is_one(n in 1usize..10, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            prop_assert_eq!(recall_at_k(&t, n).unwrap(), (1.0, 1.0));
            let r1 = recall_at_k(&t, 1).unwrap();
            let r5 = recall_at_k(&t, 5).unwrap();
            prop_assert!(r1.0 <= r5.0 && r1.1 <= r5.1);
        }

        #[test]
        fn recall_is_invariant_to_monotone_transforms(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let t = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(0..4) as f64).collect()).unwrap();
            let mut u = t.clone();
            u.data_mut().iter_mut().for_each(|v| *v = (*v * 0.7).exp() - 3.0);
            for k in [1, 3] {
                prop_assert_eq!(recall_at_k(&t, k).unwrap(), recall_at_k(&u, k).unwrap());
            }
        }
    }
}
