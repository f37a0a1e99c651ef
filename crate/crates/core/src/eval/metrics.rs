//! Caption metrics and greedy decoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SemiError};
use crate::numerics::DenseMatrix;
use crate::projector::{project_batch, ProjectorParams};
use crate::synth::{FrozenDecoder, EOS};

const BLEU_SMOOTHING: f64 = 1e-9;

/// Argmax decoding from `prefix` followed by `instruction`. Stops after
/// emitting EOS or at `max_len` tokens; ties resolve to the lowest id.
pub fn greedy_decode(
    decoder: &FrozenDecoder,
    prefix: &DenseMatrix,
    instruction: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(SemiError::Precondition("max_len must be at least 1".into()));
    }
    crate::synth::decoder::greedy(decoder, prefix, instruction, max_len)
}

fn content(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Positional match rate after truncating both sequences at EOS:
/// matches over the first `min` positions divided by the longer length.
pub fn token_accuracy(output: &[usize], target: &[usize]) -> f64 {
    let (a, b) = (content(output), content(target));
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    hits as f64 / longest as f64
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU up to 4-grams, with the order capped by the candidate
/// length, clipped counts taken as the max over references, and the
/// brevity penalty against the closest reference length. Tokens after
/// EOS are ignored.
pub fn bleu4(candidate: &[usize], references: &[&[usize]]) -> f64 {
    let cand = content(candidate);
    let refs: Vec<&[usize]> = references.iter().map(|r| content(r)).collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let order = cand.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=order {
        let counts = ngram_counts(cand, n);
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = counts.iter().map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0))).sum();
        let total = cand.len() + 1 - n;
        let p = if clipped == 0 {
            BLEU_SMOOTHING
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = cand.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l))
        .expect("non-empty") as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * (log_sum / order as f64).exp()).clamp(0.0, 1.0)
}

fn lcs(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F-measure. Tokens after EOS are ignored.
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> f64 {
    let (c, r) = (content(candidate), content(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

/// Inputs with reference captions and the instruction used for each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub x: DenseMatrix,
    pub captions: Vec<Vec<usize>>,
    pub instructions: Vec<Vec<usize>>,
    pub concepts: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Rows `idx` as a new set.
    pub fn subset(&self, idx: &[usize]) -> Result<LabeledSet> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.x.row(i).to_vec()).collect();
        Ok(LabeledSet {
            x: if rows.is_empty() {
                DenseMatrix::zeros(0, self.x.cols())
            } else {
                DenseMatrix::from_rows(&rows)?
            },
            captions: idx.iter().map(|&i| self.captions[i].clone()).collect(),
            instructions: idx.iter().map(|&i| self.instructions[i].clone()).collect(),
            concepts: idx.iter().map(|&i| self.concepts[i]).collect(),
        })
    }

    pub fn with_inputs(&self, x: DenseMatrix) -> Result<LabeledSet> {
        if x.rows() != self.len() {
            return Err(SemiError::Shape("replacement inputs must keep the row count".into()));
        }
        Ok(LabeledSet { x, ..self.clone() })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub token_accuracy: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// Greedy-decodes every input of `set` through `psi` and averages metrics.
pub fn evaluate_projector(
    psi: &ProjectorParams,
    decoder: &FrozenDecoder,
    set: &LabeledSet,
    max_len: usize,
) -> Result<Scores> {
    if set.is_empty() {
        return Err(SemiError::Precondition("empty evaluation set".into()));
    }
    let out = project_batch(psi, &set.x)?;
    let mut s = Scores::default();
    for i in 0..set.len() {
        let prefix = DenseMatrix::from_vec(psi.prefix_slots, psi.d_out, out.row(i).to_vec())?;
        let pred = greedy_decode(decoder, &prefix, &set.instructions[i], max_len)?;
        let reference = &set.captions[i];
        s.token_accuracy += token_accuracy(&pred, reference);
        s.bleu4 += bleu4(&pred, &[reference]);
        s.rouge_l += rouge_l(&pred, reference);
    }
    let n = set.len() as f64;
    Ok(Scores {
        token_accuracy: s.token_accuracy / n,
        bleu4: s.bleu4 / n,
        rouge_l: s.rouge_l / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_accuracy_cases() {
        assert_eq!(token_accuracy(&[5, 6, 7, EOS], &[5, 6, 7, EOS]), 1.0);
        assert_eq!(token_accuracy(&[5, 6, EOS], &[8, 9, EOS]), 0.0);
        assert_eq!(token_accuracy(&[5, 6, 9, 9], &[5, 6, 7, 7, EOS]), 0.5);
        assert!((token_accuracy(&[5, 6, EOS, 4], &[5, 6, 7, EOS]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_accuracy(&[EOS], &[EOS]), 1.0);
    }

    #[test]
    fn bleu_cases() {
        let r: &[usize] = &[3, 4, 5, 6, 7];
        assert!((bleu4(r, &[r]) - 1.0).abs() < 1e-12);
        assert!((bleu4(&[3, 4], &[&[3, 4]]) - 1.0).abs() < 1e-12);
        assert!(bleu4(&[8, 9, 10, 11], &[r]) <= 1e-6);
        assert_eq!(bleu4(&[], &[r]), 0.0);
        // "a b c d e" vs "a b c d f": p_n = 4/5, 3/4, 2/3, 1/2, equal lengths.
        let hand = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu4(&[3, 4, 5, 6, 7], &[&[3, 4, 5, 6, 8]]) - hand).abs() < 1e-12);
    }

    #[test]
    fn bleu_multi_reference_and_brevity() {
        let cand: &[usize] = &[3, 4, 5, 6];
        let one = bleu4(cand, &[&[3, 4, 9, 9]]);
        let two = bleu4(cand, &[&[3, 4, 9, 9], &[9, 4, 5, 6]]);
        assert!(two > one);
        // Candidate shorter than the only reference: p_n = 1, BP = exp(1 - 6/4).
        let short = bleu4(cand, &[&[3, 4, 5, 6, 7, 8]]);
        assert!((short - (1.0f64 - 1.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&[3, 4, 5], &[3, 4, 5]), 1.0);
        assert_eq!(rouge_l(&[3, 4, 5], &[6, 7]), 0.0);
        assert!((rouge_l(&[3, 4, 5], &[3, 5, 4]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l(&[], &[3]), 0.0);
    }
}
