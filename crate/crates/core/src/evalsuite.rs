//! Unlearning metrics: memorization, extraction, ROUGE-L, fluency,
//! membership-inference attacks, privacy leakage and model utility.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::corpus::{segment, EncodedQa, QAPair, Tokenizer, EOS_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::model::{argmax, token_nll, Checkpoint, ForwardTrace};

/// Teacher-forced view of one QA pair: per answer token, whether the greedy
/// prediction matches, and the answer-token NLLs.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerStats {
    pub matches: Vec<bool>,
    pub nll: Vec<f64>,
}

pub fn answer_stats(trace: &ForwardTrace, qa: &EncodedQa) -> Result<AnswerStats> {
    if trace.tokens() != qa.tokens.as_slice() {
        return Err(Error::MismatchedTrace);
    }
    let ans = qa.answer();
    if ans.is_empty() {
        return Err(Error::EmptyInput("answer"));
    }
    let from = qa.answer_start - 1;
    let nll = token_nll(trace, from)[..ans.len()].to_vec();
    let matches = (0..ans.len()).map(|j| argmax(trace.logits_at(from + j)) == ans[j]).collect();
    Ok(AnswerStats { matches, nll })
}

/// Fraction of answer tokens where the teacher-forced argmax is correct.
pub fn em_from_stats(s: &AnswerStats) -> f64 {
    s.matches.iter().filter(|&&m| m).count() as f64 / s.matches.len() as f64
}

/// `1 − k*/|y|`. Greedy decoding from prefix `k` reproduces the rest of the
/// answer exactly when every teacher-forced prediction from `k` onward is
/// correct, so `k*` is one past the last mismatch.
pub fn es_from_stats(s: &AnswerStats) -> f64 {
    let n = s.matches.len();
    let k_star = s.matches.iter().rposition(|&m| !m).map_or(0, |i| i + 1);
    1.0 - k_star as f64 / n as f64
}

pub fn exact_memorization(ckpt: &Checkpoint, qa: &EncodedQa) -> Result<f64> {
    let tr = ckpt.forward(&qa.tokens)?;
    Ok(em_from_stats(&answer_stats(&tr, qa)?))
}

pub fn extraction_strength(ckpt: &Checkpoint, qa: &EncodedQa) -> Result<f64> {
    let tr = ckpt.forward(&qa.tokens)?;
    Ok(es_from_stats(&answer_stats(&tr, qa)?))
}

/// `exp(−mean answer NLL)`.
pub fn answer_probability(ckpt: &Checkpoint, qa: &EncodedQa) -> Result<f64> {
    let tr = ckpt.forward(&qa.tokens)?;
    let s = answer_stats(&tr, qa)?;
    Ok(prob_from_stats(&s))
}

fn prob_from_stats(s: &AnswerStats) -> f64 {
    (-s.nll.iter().sum::<f64>() / s.nll.len() as f64).exp()
}

/// Greedy continuation of `qa.prompt()`, identical to
/// [`Checkpoint::greedy_generate`]. `trace` is the forward pass over the full
/// QA; decoding only starts from the first position where the greedy token
/// leaves the reference, which saves most of the work on memorized answers.
pub fn greedy_answer(ckpt: &Checkpoint, trace: &ForwardTrace, qa: &EncodedQa, max_new: usize) -> Result<Vec<u32>> {
    let prompt_len = qa.answer_start;
    let mut out = Vec::new();
    let full = &qa.tokens;
    while out.len() < max_new && prompt_len + out.len() < full.len() {
        let pos = prompt_len + out.len() - 1;
        let next = argmax(trace.logits_at(pos));
        if next == EOS_ID {
            return Ok(out);
        }
        let agrees = full[pos + 1] == next;
        out.push(next);
        if !agrees {
            break;
        }
    }
    if out.len() >= max_new {
        return Ok(out);
    }
    let mut seq: Vec<u32> = full[..prompt_len].to_vec();
    seq.extend(&out);
    let rest = ckpt.greedy_generate(&seq, max_new - out.len(), EOS_ID)?;
    out.extend(rest);
    Ok(out)
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over token sequences.
pub fn rouge_l_tokens<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    match (hyp.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Lowercased alphanumeric runs, the usual ROUGE word tokenization, so
/// punctuation never counts as overlap.
pub fn rouge_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// ROUGE-L F1 on word tokens.
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    rouge_l_tokens(&rouge_words(hyp), &rouge_words(reference))
}

/// Probability that a text is gibberish.
pub trait GibberishScorer {
    fn score(&self, text: &str) -> f64;
}

/// `clamp(w_oov · oov_fraction + w_rep · trigram_repetition, 0, 1)`, where
/// the repetition term is `(max trigram count − 1) / (trigrams − 1)`.
#[derive(Clone, Debug)]
pub struct HeuristicGibberish {
    known: HashSet<String>,
    pub w_oov: f64,
    pub w_rep: f64,
}

impl HeuristicGibberish {
    pub fn new<I, S>(vocab: I, w_oov: f64, w_rep: f64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        HeuristicGibberish {
            known: vocab.into_iter().map(Into::into).filter(|w: &String| !w.starts_with('<')).collect(),
            w_oov,
            w_rep,
        }
    }

    pub fn from_tokenizer(tok: &Tokenizer) -> Self {
        Self::new(tok.vocab().iter().cloned(), 0.5, 0.5)
    }
}

pub fn trigram_repetition(words: &[&str]) -> f64 {
    if words.len() < 4 {
        return 0.0;
    }
    let mut counts: BTreeMap<(&str, &str, &str), usize> = BTreeMap::new();
    for w in words.windows(3) {
        *counts.entry((w[0], w[1], w[2])).or_default() += 1;
    }
    let n = words.len() - 2;
    let max = counts.values().copied().max().unwrap_or(1);
    (max - 1) as f64 / (n - 1) as f64
}

impl GibberishScorer for HeuristicGibberish {
    fn score(&self, text: &str) -> f64 {
        let words = segment(text);
        if words.is_empty() {
            return 1.0;
        }
        let oov = words.iter().filter(|w| !self.known.contains(**w)).count() as f64 / words.len() as f64;
        (self.w_oov * oov + self.w_rep * trigram_repetition(&words)).clamp(0.0, 1.0)
    }
}

/// `1 − g(text)`; the empty string scores 0.
pub fn answer_fluency(text: &str, scorer: &dyn GibberishScorer) -> f64 {
    if text.trim().is_empty() {
        return 0.0;
    }
    1.0 - scorer.score(text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Loss,
    MinK,
    Zlib,
    Reference,
}

pub fn mia_loss(nll: &[f64]) -> Result<f64> {
    if nll.is_empty() {
        return Err(Error::EmptyInput("token NLLs"));
    }
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Mean of the `⌈k/100 · T⌉` smallest token NLLs.
pub fn mia_min_k(nll: &[f64], k_percent: f64) -> Result<f64> {
    if nll.is_empty() {
        return Err(Error::EmptyInput("token NLLs"));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::invalid(format!("min-k percent {k_percent} outside (0, 100]")));
    }
    let k = ((k_percent / 100.0 * nll.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut sorted = nll.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Bytes of the zlib stream for `text` at the default compression level.
pub fn zlib_len(text: &str) -> Result<usize> {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(text.as_bytes())?;
    Ok(enc.finish()?.len())
}

/// `log PPL / (zlib_bytes / chars)`.
pub fn mia_zlib(nll: &[f64], text: &str) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::EmptyInput("zlib text"));
    }
    let chars = text.chars().count() as f64;
    Ok(mia_loss(nll)? / (zlib_len(text)? as f64 / chars))
}

pub fn mia_reference(nll: &[f64], reference_nll: &[f64]) -> Result<f64> {
    Ok(mia_loss(nll)? - mia_loss(reference_nll)?)
}

/// Attack score of one example; `reference` is required for
/// [`AttackKind::Reference`].
pub fn mia_score(
    kind: AttackKind,
    ckpt: &Checkpoint,
    reference: Option<&Checkpoint>,
    qa: &EncodedQa,
    text: &str,
    k_percent: f64,
) -> Result<f64> {
    let nll = example_nll(ckpt, qa)?;
    match kind {
        AttackKind::Loss => mia_loss(&nll),
        AttackKind::MinK => mia_min_k(&nll, k_percent),
        AttackKind::Zlib => mia_zlib(&nll, text),
        AttackKind::Reference => {
            let r = reference.ok_or_else(|| Error::invalid("reference attack needs a reference model"))?;
            mia_reference(&nll, &example_nll(r, qa)?)
        }
    }
}

/// Token NLLs of the answer (eos included) given its question: the
/// per-token losses every attack scores.
pub fn example_nll(ckpt: &Checkpoint, qa: &EncodedQa) -> Result<Vec<f64>> {
    if qa.answer_start == 0 || qa.answer_start >= qa.tokens.len() {
        return Err(Error::EmptyInput("answer"));
    }
    let tr = ckpt.forward(&qa.tokens)?;
    Ok(token_nll(&tr, qa.answer_start - 1))
}

/// Probability that a random member outscores a random non-member, ties
/// counting one half.
pub fn roc_auc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyInput("AUC score list"));
    }
    let mut wins = 0.0;
    for &m in members {
        for &n in nonmembers {
            if m > n {
                wins += 1.0;
            } else if m == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (members.len() * nonmembers.len()) as f64)
}

/// `100 · (auc − auc_retrain) / auc_retrain`.
pub fn privleak(auc_unlearned: f64, auc_retrain: f64) -> Result<f64> {
    if auc_retrain == 0.0 {
        return Err(Error::invalid("retrain AUC is zero"));
    }
    Ok(100.0 * (auc_unlearned - auc_retrain) / auc_retrain)
}

/// Harmonic mean, collapsing to 0 when any component is 0.
pub fn model_utility(components: &[f64]) -> f64 {
    if components.is_empty() || components.iter().any(|&c| c <= 0.0) {
        return 0.0;
    }
    components.len() as f64 / components.iter().map(|c| 1.0 / c).sum::<f64>()
}

/// One QA example prepared for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub qa: EncodedQa,
    pub answer: String,
}

impl EvalItem {
    pub fn new(tok: &Tokenizer, pair: &QAPair) -> Self {
        EvalItem {
            qa: tok.encode_qa(pair),
            answer: pair.answer.clone(),
        }
    }
}

/// Evaluation splits. `holdout` holds every never-trained QA (MIA
/// non-members); `holdout_utility` the subset about retained profiles.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub forget: Vec<EvalItem>,
    pub retain: Vec<EvalItem>,
    pub holdout: Vec<EvalItem>,
    pub holdout_utility: Vec<EvalItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub min_k_percent: f64,
    /// Generation budget beyond the reference answer length.
    pub gen_slack: usize,
    pub af_w_oov: f64,
    pub af_w_rep: f64,
    /// Attack whose AUC feeds the privacy-leakage number.
    pub privleak_attack: AttackKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_k_percent: 40.0,
            gen_slack: 8,
            af_w_oov: 0.5,
            af_w_rep: 0.5,
            privleak_attack: AttackKind::MinK,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub em: f64,
    pub es: f64,
    pub fr: f64,
    pub af: f64,
    pub prob: f64,
    pub mean_nll: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub auc: f64,
    pub risk: f64,
}

impl AttackResult {
    fn new(auc: f64) -> Self {
        AttackResult {
            auc,
            risk: (auc - 0.5).abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub loss: AttackResult,
    pub min_k: AttackResult,
    pub zlib: AttackResult,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference: Option<AttackResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub forget: SplitMetrics,
    pub retain: SplitMetrics,
    pub holdout: SplitMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub tool_version: String,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub em: f64,
    pub es: f64,
    pub fr: f64,
    pub af: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub privleak: Option<f64>,
    pub mu: f64,
    pub mia: MiaReport,
    pub splits: Splits,
    pub meta: ReportMeta,
}

struct ItemResult {
    em: f64,
    es: f64,
    fr: f64,
    af: f64,
    prob: f64,
    ans_nll: Vec<f64>,
}

fn eval_item(
    ckpt: &Checkpoint,
    tok: &Tokenizer,
    item: &EvalItem,
    cfg: &EvalConfig,
    scorer: &dyn GibberishScorer,
) -> Result<ItemResult> {
    let trace = ckpt.forward(&item.qa.tokens)?;
    let stats = answer_stats(&trace, &item.qa)?;
    let max_new = item.qa.answer().len() + cfg.gen_slack;
    let gen = greedy_answer(ckpt, &trace, &item.qa, max_new)?;
    let text = tok.detokenize(&gen);
    Ok(ItemResult {
        em: em_from_stats(&stats),
        es: es_from_stats(&stats),
        fr: rouge_l(&text, &item.answer),
        af: answer_fluency(&text, scorer),
        prob: prob_from_stats(&stats),
        ans_nll: token_nll(&trace, item.qa.answer_start - 1),
    })
}

fn summarize(rs: &[ItemResult]) -> SplitMetrics {
    if rs.is_empty() {
        return SplitMetrics::default();
    }
    let n = rs.len() as f64;
    let mean = |f: &dyn Fn(&ItemResult) -> f64| rs.iter().map(f).sum::<f64>() / n;
    SplitMetrics {
        n: rs.len(),
        em: mean(&|r| r.em),
        es: mean(&|r| r.es),
        fr: mean(&|r| r.fr),
        af: mean(&|r| r.af),
        prob: mean(&|r| r.prob),
        mean_nll: mean(&|r| r.ans_nll.iter().sum::<f64>() / r.ans_nll.len() as f64),
    }
}

fn eval_split(
    ckpt: &Checkpoint,
    tok: &Tokenizer,
    items: &[EvalItem],
    cfg: &EvalConfig,
    scorer: &dyn GibberishScorer,
) -> Result<Vec<ItemResult>> {
    items.iter().map(|it| eval_item(ckpt, tok, it, cfg, scorer)).collect()
}

struct AttackScores {
    loss: Vec<f64>,
    min_k: Vec<f64>,
    zlib: Vec<f64>,
}

fn attack_scores(items: &[EvalItem], results: &[ItemResult], k: f64) -> Result<AttackScores> {
    let mut s = AttackScores {
        loss: Vec::new(),
        min_k: Vec::new(),
        zlib: Vec::new(),
    };
    for (it, r) in items.iter().zip(results) {
        s.loss.push(mia_loss(&r.ans_nll)?);
        s.min_k.push(mia_min_k(&r.ans_nll, k)?);
        s.zlib.push(mia_zlib(&r.ans_nll, &it.answer)?);
    }
    Ok(s)
}

fn attack_auc(ckpt: &Checkpoint, set: &EvalSet, cfg: &EvalConfig, kind: AttackKind) -> Result<f64> {
    let score = |items: &[EvalItem]| -> Result<Vec<f64>> {
        items
            .iter()
            .map(|it| mia_score(kind, ckpt, None, &it.qa, &it.answer, cfg.min_k_percent))
            .collect()
    };
    roc_auc(&score(&set.forget)?, &score(&set.holdout)?)
}

/// Full report for `ckpt`. Without `retrain`, privacy leakage and the
/// reference attack are left out.
pub fn evaluate(
    ckpt: &Checkpoint,
    retrain: Option<&Checkpoint>,
    tok: &Tokenizer,
    set: &EvalSet,
    cfg: &EvalConfig,
    meta: ReportMeta,
) -> Result<MetricReport> {
    if set.forget.is_empty() || set.holdout.is_empty() {
        return Err(Error::EmptyInput("forget or holdout split"));
    }
    if let (Some(r), Some(a), Some(b)) = (retrain, &ckpt.tokenizer, retrain.and_then(|r| r.tokenizer.as_ref())) {
        if a != b {
            return Err(Error::TokenizerMismatch(format!(
                "checkpoint {} vs retrain {}",
                &ckpt.digest()[..12],
                &r.digest()[..12]
            )));
        }
    }
    let scorer = HeuristicGibberish::new(tok.vocab().iter().cloned(), cfg.af_w_oov, cfg.af_w_rep);
    let forget = eval_split(ckpt, tok, &set.forget, cfg, &scorer)?;
    let retain = eval_split(ckpt, tok, &set.retain, cfg, &scorer)?;
    let holdout = eval_split(ckpt, tok, &set.holdout, cfg, &scorer)?;
    let holdout_u = eval_split(ckpt, tok, &set.holdout_utility, cfg, &scorer)?;

    let m = attack_scores(&set.forget, &forget, cfg.min_k_percent)?;
    let n = attack_scores(&set.holdout, &holdout, cfg.min_k_percent)?;
    let loss = AttackResult::new(roc_auc(&m.loss, &n.loss)?);
    let min_k = AttackResult::new(roc_auc(&m.min_k, &n.min_k)?);
    let zlib = AttackResult::new(roc_auc(&m.zlib, &n.zlib)?);

    let (reference, privleak_value) = match retrain {
        Some(r) => {
            let ref_scores = |items: &[EvalItem], res: &[ItemResult]| -> Result<Vec<f64>> {
                items
                    .iter()
                    .zip(res)
                    .map(|(it, x)| mia_reference(&x.ans_nll, &example_nll(r, &it.qa)?))
                    .collect()
            };
            let auc = roc_auc(&ref_scores(&set.forget, &forget)?, &ref_scores(&set.holdout, &holdout)?)?;
            let own = match cfg.privleak_attack {
                AttackKind::Loss => loss.auc,
                AttackKind::MinK => min_k.auc,
                AttackKind::Zlib => zlib.auc,
                AttackKind::Reference => auc,
            };
            let retrain_auc = if cfg.privleak_attack == AttackKind::Reference {
                // the retrain model scores itself at exactly zero gap
                0.5
            } else {
                attack_auc(r, set, cfg, cfg.privleak_attack)?
            };
            (Some(AttackResult::new(auc)), Some(privleak(own, retrain_auc)?))
        }
        None => (None, None),
    };

    let fs = summarize(&forget);
    let rs = summarize(&retain);
    let hu = summarize(&holdout_u);
    let mu = model_utility(&[rs.fr, rs.prob, hu.fr]);
    Ok(MetricReport {
        em: fs.em,
        es: fs.es,
        fr: fs.fr,
        af: fs.af,
        privleak: privleak_value,
        mu,
        mia: MiaReport {
            loss,
            min_k,
            zlib,
            reference,
        },
        splits: Splits {
            forget: fs,
            retain: rs,
            holdout: summarize(&holdout),
        },
        meta,
    })
}

/// Forget-split ROUGE-L only; used as the convergence probe.
pub fn probe_rouge(ckpt: &Checkpoint, tok: &Tokenizer, items: &[EvalItem], gen_slack: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyInput("probe set"));
    }
    let mut total = 0.0;
    for it in items {
        let tr = ckpt.forward(&it.qa.tokens)?;
        let gen = greedy_answer(ckpt, &tr, &it.qa, it.qa.answer().len() + gen_slack)?;
        total += rouge_l(&tok.detokenize(&gen), &it.answer);
    }
    Ok(total / items.len() as f64)
}

/// Tokens the model would treat as unknown words.
pub fn unk_fraction(ids: &[u32]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    ids.iter().filter(|&&i| i == UNK_ID).count() as f64 / ids.len() as f64
}
