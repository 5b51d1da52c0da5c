//! Retrieval, multiple-choice, classification, probing and caption metrics.
//!
//! Rankings sort by descending score and break ties by ascending index.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{ClipAnnotation, ClipRef};
use crate::dual_encoder::DualEncoder;
use crate::grammar::{EventClass, Grammar};
use crate::training::ClipBank;
use crate::{Error, Result};

/// Parsed class of each narration; `None` when it does not parse.
pub fn narration_classes<S: AsRef<str>>(grammar: &Grammar, narrations: &[S]) -> Vec<Option<EventClass>> {
    narrations
        .iter()
        .map(|n| grammar.parse_str(n.as_ref()).map(|(c, _)| c))
        .collect()
}

/// Binary relevance: same parsed class, or identical text when a narration
/// does not parse.
pub fn relevance_matrix<S: AsRef<str>>(grammar: &Grammar, queries: &[S], items: &[S]) -> Mat {
    let qc = narration_classes(grammar, queries);
    let ic = narration_classes(grammar, items);
    Mat::from_shape_fn((queries.len(), items.len()), |(i, j)| {
        let same = match (qc[i], ic[j]) {
            (Some(a), Some(b)) => a == b,
            _ => queries[i].as_ref() == items[j].as_ref(),
        };
        if same {
            1.0
        } else {
            0.0
        }
    })
}

/// Item indices by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Average precision of one query; `None` without positives. Relevance is
/// binarized at `> 0`.
pub fn average_precision(scores: &[f64], relevance: &[f64]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if relevance[i] > 0.0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// DCG of the induced ranking over the ideal DCG, with a `log2(rank + 1)`
/// discount (ranks from 1). All-zero relevance scores 0.
pub fn ndcg(scores: &[f64], relevance: &[f64]) -> f64 {
    let dcg: f64 = ranking(scores)
        .iter()
        .enumerate()
        .map(|(r, &i)| relevance[i] / ((r + 2) as f64).log2())
        .sum();
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().enumerate().map(|(r, &x)| x / ((r + 2) as f64).log2()).sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalScores {
    pub v2t: f64,
    pub t2v: f64,
    pub avg: f64,
    /// Queries without any positive, per direction (mAP only).
    pub skipped_v2t: usize,
    pub skipped_t2v: usize,
}

fn check_shapes(s: &Mat, r: &Mat) -> Result<()> {
    if s.dim() != r.dim() {
        return Err(Error::Shape(format!("scores {:?} vs relevance {:?}", s.dim(), r.dim())));
    }
    if r.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Domain("relevance must be non-negative".into()));
    }
    Ok(())
}

fn mean_ap(s: &Mat, r: &Mat) -> (f64, usize) {
    let mut aps = Vec::new();
    let mut skipped = 0;
    for (srow, rrow) in s.rows().into_iter().zip(r.rows()) {
        match average_precision(&srow.to_vec(), &rrow.to_vec()) {
            Some(ap) => aps.push(ap),
            None => skipped += 1,
        }
    }
    let m = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    (m, skipped)
}

/// mAP with videos as rows of `s` (video→text) and its transpose
/// (text→video).
pub fn retrieval_map(s: &Mat, r: &Mat) -> Result<DirectionalScores> {
    check_shapes(s, r)?;
    let (v2t, skipped_v2t) = mean_ap(s, r);
    let (t2v, skipped_t2v) = mean_ap(&s.t().to_owned(), &r.t().to_owned());
    Ok(DirectionalScores {
        v2t,
        t2v,
        avg: 0.5 * (v2t + t2v),
        skipped_v2t,
        skipped_t2v,
    })
}

fn mean_ndcg(s: &Mat, r: &Mat) -> f64 {
    if s.nrows() == 0 {
        return 0.0;
    }
    s.rows()
        .into_iter()
        .zip(r.rows())
        .map(|(a, b)| ndcg(&a.to_vec(), &b.to_vec()))
        .sum::<f64>()
        / s.nrows() as f64
}

pub fn retrieval_ndcg(s: &Mat, r: &Mat) -> Result<DirectionalScores> {
    check_shapes(s, r)?;
    let v2t = mean_ndcg(s, r);
    let t2v = mean_ndcg(&s.t().to_owned(), &r.t().to_owned());
    Ok(DirectionalScores {
        v2t,
        t2v,
        avg: 0.5 * (v2t + t2v),
        skipped_v2t: 0,
        skipped_t2v: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: DirectionalScores,
    pub ndcg: DirectionalScores,
}

/// Similarities between clip embeddings and their own narrations.
pub fn similarity_scores(encoder: &DualEncoder, bank: &ClipBank, annotations: &[ClipAnnotation]) -> Result<Mat> {
    let clips: Vec<ClipRef> = annotations.iter().map(ClipAnnotation::clip).collect();
    let (v, _) = bank.embed(encoder, &clips)?;
    let bodies: Vec<Vec<usize>> = annotations
        .iter()
        .map(|a| encoder.tokenize(&a.narration))
        .collect::<Result<_>>()?;
    let u = encoder.embed_texts(&bodies, 64);
    Ok(v.dot(&u.t()))
}

/// Multi-instance retrieval over a held-out split.
pub fn evaluate_retrieval(
    encoder: &DualEncoder,
    bank: &ClipBank,
    annotations: &[ClipAnnotation],
    grammar: &Grammar,
) -> Result<RetrievalReport> {
    let s = similarity_scores(encoder, bank, annotations)?;
    let narrations: Vec<&str> = annotations.iter().map(|a| a.narration.as_str()).collect();
    let r = relevance_matrix(grammar, &narrations, &narrations);
    Ok(RetrievalReport {
        map: retrieval_map(&s, &r)?,
        ndcg: retrieval_ndcg(&s, &r)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McqGroup {
    /// Distractors come from other videos.
    Inter,
    /// Distractors come from the query's own video.
    Intra,
}

pub const MCQ_CHOICES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub clip: ClipRef,
    pub candidates: Vec<String>,
    pub answer: usize,
    pub group: McqGroup,
}

impl McqItem {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != MCQ_CHOICES {
            return Err(Error::Data(format!(
                "item for {} has {} candidates, expected {MCQ_CHOICES}",
                self.clip.video_id,
                self.candidates.len()
            )));
        }
        if self.answer >= MCQ_CHOICES {
            return Err(Error::Data(format!("answer index {} out of range", self.answer)));
        }
        Ok(())
    }
}

/// Index of the best-scoring candidate, lowest index on ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    ranking(scores).first().copied()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqScores {
    pub inter: f64,
    pub intra: f64,
    pub num_inter: usize,
    pub num_intra: usize,
}

/// Accuracy of picking the answer by clip-text similarity, per group.
pub fn mcq_accuracy(encoder: &DualEncoder, bank: &ClipBank, items: &[McqItem]) -> Result<McqScores> {
    items.iter().try_for_each(McqItem::validate)?;
    let clips: Vec<ClipRef> = items.iter().map(|i| i.clip.clone()).collect();
    let (v, _) = bank.embed(encoder, &clips)?;
    let mut correct = BTreeMap::<bool, (usize, usize)>::new();
    for (k, item) in items.iter().enumerate() {
        let bodies: Vec<Vec<usize>> = item
            .candidates
            .iter()
            .map(|c| encoder.tokenize(c))
            .collect::<Result<_>>()?;
        let u = encoder.embed_texts(&bodies, MCQ_CHOICES);
        let scores = u.dot(&v.row(k)).to_vec();
        let hit = argmax_first(&scores) == Some(item.answer);
        let e = correct.entry(item.group == McqGroup::Inter).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    let acc = |inter: bool| {
        correct
            .get(&inter)
            .map_or((0.0, 0), |&(h, n)| (h as f64 / n as f64, n))
    };
    let ((inter, num_inter), (intra, num_intra)) = (acc(true), acc(false));
    Ok(McqScores {
        inter,
        intra,
        num_inter,
        num_intra,
    })
}

/// One inter-video and one intra-video item per annotation where enough
/// distractors of other classes exist. The answer slot is uniform.
pub fn build_mcq_items<R: Rng>(annotations: &[ClipAnnotation], grammar: &Grammar, rng: &mut R) -> Vec<McqItem> {
    let classes = narration_classes(grammar, annotations.iter().map(|a| a.narration.as_str()).collect::<Vec<_>>().as_slice());
    let mut items = Vec::new();
    for (i, a) in annotations.iter().enumerate() {
        for group in [McqGroup::Inter, McqGroup::Intra] {
            let pool: Vec<usize> = (0..annotations.len())
                .filter(|&j| {
                    let same_video = annotations[j].video_id == a.video_id;
                    j != i
                        && classes[j] != classes[i]
                        && (group == McqGroup::Intra) == same_video
                })
                .collect();
            if pool.len() < MCQ_CHOICES - 1 {
                continue;
            }
            let mut distractors: Vec<String> = pool
                .choose_multiple(rng, MCQ_CHOICES - 1)
                .map(|&j| annotations[j].narration.clone())
                .collect();
            let answer = rng.random_range(0..MCQ_CHOICES);
            distractors.insert(answer, a.narration.clone());
            items.push(McqItem {
                clip: a.clip(),
                candidates: distractors,
                answer,
                group,
            });
        }
    }
    items
}

/// Class whose prompt is most similar to the clip.
pub fn zero_shot_classify(encoder: &DualEncoder, patches: &Mat, prompts: &[&str]) -> Result<usize> {
    if prompts.is_empty() {
        return Err(Error::Data("no class prompts".into()));
    }
    let (emb, _) = encoder.embed_clips(std::slice::from_ref(patches), 1)?;
    let bodies: Vec<Vec<usize>> = prompts.iter().map(|p| encoder.tokenize(p)).collect::<Result<_>>()?;
    let u = encoder.embed_texts(&bodies, 64);
    let scores = u.dot(&emb.row(0)).to_vec();
    Ok(argmax_first(&scores).expect("non-empty prompts"))
}

/// Zero-shot event classification over the classes present in
/// `annotations`, each prompted by its canonical narration.
pub fn zero_shot_accuracy(
    encoder: &DualEncoder,
    bank: &ClipBank,
    annotations: &[ClipAnnotation],
    grammar: &Grammar,
) -> Result<f64> {
    let classes = narration_classes(grammar, &annotations.iter().map(|a| a.narration.as_str()).collect::<Vec<_>>());
    let mut labels: Vec<EventClass> = classes.iter().flatten().copied().collect();
    labels.sort();
    labels.dedup();
    if labels.is_empty() {
        return Err(Error::Data("no parseable narrations".into()));
    }
    let canonical = crate::grammar::Phrasing::CANONICAL;
    let prompts: Vec<String> = labels
        .iter()
        .map(|c| grammar.realize(c, &canonical).map(|w| w.join(" ")))
        .collect::<Result<_>>()?;
    let bodies: Vec<Vec<usize>> = prompts.iter().map(|p| encoder.tokenize(p)).collect::<Result<_>>()?;
    let u = encoder.embed_texts(&bodies, 64);
    let clips: Vec<ClipRef> = annotations.iter().map(ClipAnnotation::clip).collect();
    let (v, _) = bank.embed(encoder, &clips)?;
    let s = v.dot(&u.t());
    let (mut hits, mut n) = (0usize, 0usize);
    for (i, c) in classes.iter().enumerate() {
        let Some(c) = c else { continue };
        let truth = labels.binary_search(c).expect("collected above");
        let pred = argmax_first(&s.row(i).to_vec()).expect("non-empty");
        hits += usize::from(pred == truth);
        n += 1;
    }
    Ok(hits as f64 / n as f64)
}

/// Regularization values swept by the linear probe: 1e-5 ... 1e4.
pub fn default_probe_sweep() -> Vec<f64> {
    (-5..=4).map(|e| 10f64.powi(e)).collect()
}

/// One-vs-rest L2-regularized hinge-loss linear classifier, fit by dual
/// coordinate descent. A constant feature provides the bias.
#[derive(Clone, Debug)]
pub struct LinearSvm {
    /// One weight row per class; the last column is the bias.
    pub weights: Mat,
    pub classes: Vec<usize>,
}

impl LinearSvm {
    pub fn fit(x: &Mat, y: &[usize], c: f64, epochs: usize) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::Shape(format!("{} feature rows, {} labels", x.nrows(), y.len())));
        }
        let mut classes: Vec<usize> = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Domain("degenerate labels: need at least two classes".into()));
        }
        if !(c > 0.0) {
            return Err(Error::Domain("regularization must be positive".into()));
        }
        let (n, d) = x.dim();
        let xa = Mat::from_shape_fn((n, d + 1), |(i, j)| if j < d { x[[i, j]] } else { 1.0 });
        let qii: Vec<f64> = xa.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut weights = Mat::zeros((classes.len(), d + 1));
        for (k, &cls) in classes.iter().enumerate() {
            let yk: Vec<f64> = y.iter().map(|&l| if l == cls { 1.0 } else { -1.0 }).collect();
            let mut alpha = vec![0.0; n];
            let mut w = ndarray::Array1::<f64>::zeros(d + 1);
            for _ in 0..epochs {
                let mut max_change = 0.0f64;
                for i in 0..n {
                    let g = yk[i] * w.dot(&xa.row(i)) - 1.0;
                    let old = alpha[i];
                    let new = (old - g / qii[i]).clamp(0.0, c);
                    if new != old {
                        w.scaled_add((new - old) * yk[i], &xa.row(i));
                        alpha[i] = new;
                        max_change = max_change.max((new - old).abs());
                    }
                }
                if max_change < 1e-8 {
                    break;
                }
            }
            weights.row_mut(k).assign(&w);
        }
        Ok(Self { weights, classes })
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        let d = x.ncols();
        x.rows()
            .into_iter()
            .map(|r| {
                let scores: Vec<f64> = self
                    .weights
                    .rows()
                    .into_iter()
                    .map(|w| w.slice(ndarray::s![..d]).dot(&r) + w[d])
                    .collect();
                self.classes[argmax_first(&scores).expect("at least two classes")]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub best_c: f64,
    pub best_accuracy: f64,
    /// `(C, held-out accuracy)` for every sweep value.
    pub sweep: Vec<(f64, f64)>,
}

/// Fit a linear SVM per regularization value and keep the best held-out
/// top-1 accuracy (ties: the earlier value).
pub fn linear_probe(
    train_x: &Mat,
    train_y: &[usize],
    test_x: &Mat,
    test_y: &[usize],
    sweep: &[f64],
) -> Result<ProbeResult> {
    if sweep.is_empty() || test_y.is_empty() || test_x.nrows() != test_y.len() {
        return Err(Error::Shape("probe needs a sweep and matching held-out data".into()));
    }
    let mut results = Vec::with_capacity(sweep.len());
    for &c in sweep {
        let svm = LinearSvm::fit(train_x, train_y, c, 200)?;
        let pred = svm.predict(test_x);
        let acc = pred.iter().zip(test_y).filter(|(a, b)| a == b).count() as f64 / test_y.len() as f64;
        results.push((c, acc));
    }
    let (best_c, best_accuracy) = results
        .iter()
        .copied()
        .fold((f64::NAN, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(ProbeResult {
        best_c,
        best_accuracy,
        sweep: results,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiderVariant {
    /// Cosine of TF-IDF n-gram vectors averaged over references and n = 1..4.
    #[default]
    Plain,
    /// Clipped counts, a Gaussian length penalty (σ = 6) and a factor of 10.
    D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

type Counts = BTreeMap<Vec<String>, f64>;

fn ngrams(words: &[String], n: usize) -> Counts {
    let mut out = Counts::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w.to_vec()).or_default() += 1.0;
        }
    }
    out
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Corpus BLEU-1..4: clipped n-gram precisions pooled over the corpus, the
/// geometric mean up to each order, and a brevity penalty against the
/// reference length closest to each candidate (shorter on ties).
fn bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> [f64; 4] {
    let mut matched = [0.0; 4];
    let mut total = [0.0; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len();
        r_len += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let cn = ngrams(c, n);
            let mut max_ref = Counts::new();
            for r in rs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = f64::max(*e, k);
                }
            }
            for (g, k) in &cn {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0.0));
                total[n - 1] += k;
            }
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0.0 || total[n] == 0.0 {
            break;
        }
        log_sum += (matched[n] / total[n]).ln();
        out[n] = bp * (log_sum / (n + 1) as f64).exp();
    }
    out
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Mean over candidates of the LCS F-measure (β = 1.2), taking the best
/// precision and best recall over the references.
fn rouge_l(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    const BETA: f64 = 1.2;
    let mut sum = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        if c.is_empty() {
            continue;
        }
        let (mut p, mut r) = (0.0f64, 0.0f64);
        for rf in rs {
            let l = lcs(c, rf) as f64;
            p = p.max(l / c.len() as f64);
            if !rf.is_empty() {
                r = r.max(l / rf.len() as f64);
            }
        }
        if p > 0.0 && r > 0.0 {
            sum += (1.0 + BETA * BETA) * p * r / (r + BETA * BETA * p);
        }
    }
    sum / cands.len() as f64
}

fn cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], variant: CiderVariant) -> f64 {
    let n_docs = cands.len() as f64;
    let mut df: [BTreeMap<Vec<String>, f64>; 4] = Default::default();
    for rs in refs {
        for n in 1..=4 {
            let mut seen = std::collections::BTreeSet::new();
            for r in rs {
                seen.extend(ngrams(r, n).into_keys());
            }
            for g in seen {
                *df[n - 1].entry(g).or_default() += 1.0;
            }
        }
    }
    let tfidf = |w: &[String], n: usize| -> (Counts, f64) {
        let mut v = ngrams(w, n);
        for (g, x) in v.iter_mut() {
            let d = df[n - 1].get(g).copied().unwrap_or(0.0).max(1.0);
            *x *= (n_docs.max(1.0) / d).ln();
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    };
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        if rs.is_empty() {
            continue;
        }
        let mut score = 0.0;
        for n in 1..=4 {
            let (vc, nc) = tfidf(c, n);
            let mut s_n = 0.0;
            for r in rs {
                let (vr, nr) = tfidf(r, n);
                let dot: f64 = vc
                    .iter()
                    .map(|(g, x)| {
                        let y = vr.get(g).copied().unwrap_or(0.0);
                        match variant {
                            CiderVariant::Plain => x * y,
                            CiderVariant::D => x.min(y) * y,
                        }
                    })
                    .sum();
                let mut sim = if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { 0.0 };
                if variant == CiderVariant::D {
                    let delta = c.len() as f64 - r.len() as f64;
                    sim *= (-(delta * delta) / (2.0 * 36.0)).exp();
                }
                s_n += sim;
            }
            score += s_n / rs.len() as f64;
        }
        score /= 4.0;
        if variant == CiderVariant::D {
            score *= 10.0;
        }
        total += score;
    }
    total / n_docs
}

/// BLEU-1..4, ROUGE-L and CIDEr of candidates against reference sets.
pub fn caption_metrics<S: AsRef<str>>(
    candidates: &[S],
    references: &[Vec<S>],
    variant: CiderVariant,
) -> Result<CaptionScores> {
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates, {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Data("every candidate needs at least one reference".into()));
    }
    if candidates.is_empty() {
        return Ok(CaptionScores {
            bleu: [0.0; 4],
            rouge_l: 0.0,
            cider: 0.0,
        });
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| words(c.as_ref())).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| words(r.as_ref())).collect())
        .collect();
    Ok(CaptionScores {
        bleu: bleu(&cands, &refs),
        rouge_l: rouge_l(&cands, &refs),
        cider: cider(&cands, &refs, variant),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub value: f64,
    pub seed: u64,
}

/// Named scalar results.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: &str, split: &str, value: f64, seed: u64) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            split: split.to_string(),
            value,
            seed,
        });
    }

    pub fn get(&self, metric: &str, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.split == split)
            .map(|r| r.value)
    }

    pub fn add_retrieval(&mut self, split: &str, report: &RetrievalReport, seed: u64) {
        for (name, s) in [("map", &report.map), ("ndcg", &report.ndcg)] {
            self.push(&format!("{name}_v2t"), split, s.v2t, seed);
            self.push(&format!("{name}_t2v"), split, s.t2v, seed);
            self.push(&format!("{name}_avg"), split, s.avg, seed);
        }
    }

    pub const CSV_HEADER: &'static str = "metric,split,value,seed";

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{}", r.metric, r.split, r.value, r.seed).expect("string write");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        for p in [json, csv] {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(json, serde_json::to_string_pretty(self)?)?;
        std::fs::write(csv, self.to_csv())?;
        Ok(())
    }
}
