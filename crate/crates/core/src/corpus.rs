//! Deterministic synthetic fact corpus with forget/retain/test/utility
//! splits, plus a benign instruction-like corpus.
//!
//! Facts use a closed symbolic vocabulary (entity-k, relation-k, answer-k
//! plus template glue) rather than natural language: attribution analysis
//! needs clean token positions. Every fact renders through two question
//! templates that differ in one glue token; unlearning trains on template 0
//! and evaluation uses both.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::seed;

pub const NUM_TEMPLATES: usize = 2;
const NUM_INSTR: usize = 8;
const NUM_SUFFIXES: usize = 7;

/// Token ids of the fixed rejection response ("I can't answer" analog);
/// identical across every generated vocabulary.
pub const REJECTION_TOKENS: [u32; 2] = [2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Test,
    Utility,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Test => "test",
            Split::Utility => "utility",
        };
        f.write_str(s)
    }
}

/// One (subject, relation, object) triple rendered to token sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub fact_id: u32,
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
    /// Canonical question rendering (template 0).
    pub question_tokens: Vec<u32>,
    pub answer_tokens: Vec<u32>,
    pub split: Split,
}

/// Closed token table. Ids are assigned contiguously per symbol class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub symbols: Vec<String>,
    pub num_entities: u32,
    pub num_relations: u32,
    pub num_answers: u32,
}

impl Vocab {
    fn build(num_entities: u32, num_relations: u32, num_answers: u32) -> Vocab {
        let mut symbols = vec!["<bos>".to_string(), "<q>".to_string(), "<rej-0>".to_string(), "<rej-1>".to_string()];
        for t in 0..NUM_TEMPLATES {
            symbols.push(format!("tpl-{t}"));
        }
        for i in 0..NUM_INSTR {
            symbols.push(format!("instr-{i}"));
        }
        for i in 0..num_entities {
            symbols.push(format!("ent-{i}"));
        }
        for i in 0..num_relations {
            symbols.push(format!("rel-{i}"));
        }
        for i in 0..num_answers {
            symbols.push(format!("ans-{i}"));
        }
        for i in 0..NUM_SUFFIXES {
            symbols.push(format!("sfx-{i}"));
        }
        Vocab { symbols, num_entities, num_relations, num_answers }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn bos(&self) -> u32 {
        0
    }

    pub fn qmark(&self) -> u32 {
        1
    }

    /// Fixed rejection response used as the DPO positive instance.
    pub fn rejection(&self) -> Vec<u32> {
        REJECTION_TOKENS.to_vec()
    }

    pub fn template(&self, t: usize) -> u32 {
        debug_assert!(t < NUM_TEMPLATES);
        4 + t as u32
    }

    pub fn instr(&self, i: usize) -> u32 {
        (4 + NUM_TEMPLATES + i % NUM_INSTR) as u32
    }

    pub fn entity(&self, e: u32) -> u32 {
        (4 + NUM_TEMPLATES + NUM_INSTR) as u32 + e
    }

    pub fn relation(&self, r: u32) -> u32 {
        self.entity(self.num_entities) + r
    }

    pub fn answer(&self, a: u32) -> u32 {
        self.relation(self.num_relations) + a
    }

    pub fn suffix(&self, s: u32) -> u32 {
        self.answer(self.num_answers) + s
    }

    pub fn is_relation_token(&self, tok: u32) -> bool {
        tok >= self.relation(0) && tok < self.answer(0)
    }

    pub fn is_entity_token(&self, tok: u32) -> bool {
        tok >= self.entity(0) && tok < self.relation(0)
    }

    pub fn symbol(&self, tok: u32) -> &str {
        &self.symbols[tok as usize]
    }

    /// Symbols joined by single spaces; the exact inverse of rendering.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.symbol(t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub num_entities: u32,
    pub num_relations: u32,
    pub forget_fraction: f64,
    pub retain_fraction: f64,
    pub test_fraction: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            seed: 0,
            num_entities: 40,
            num_relations: 5,
            forget_fraction: 0.05,
            retain_fraction: 0.10,
            test_fraction: 0.70,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub config: GenerateConfig,
    pub vocab: Vocab,
    pub facts: Vec<Fact>,
}

impl CorpusSplits {
    pub fn split(&self, s: Split) -> Vec<&Fact> {
        self.facts.iter().filter(|f| f.split == s).collect()
    }

    pub fn forget(&self) -> Vec<&Fact> {
        self.split(Split::Forget)
    }

    pub fn retain(&self) -> Vec<&Fact> {
        self.split(Split::Retain)
    }

    pub fn test(&self) -> Vec<&Fact> {
        self.split(Split::Test)
    }

    pub fn utility(&self) -> Vec<&Fact> {
        self.split(Split::Utility)
    }

    pub fn check_fits(&self, cfg: &ModelConfig) -> Result<()> {
        if self.vocab.len() > cfg.vocab_size {
            return Err(Error::Corpus(format!(
                "vocabulary of {} tokens overflows model vocab-size {}",
                self.vocab.len(),
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Question rendering. Templates share the (entity, relation) positions and
/// differ only in the glue token, a weak paraphrase analog.
pub fn render_question(vocab: &Vocab, subject: u32, relation: u32, template: usize) -> Vec<u32> {
    vec![
        vocab.bos(),
        vocab.template(template),
        vocab.entity(subject),
        vocab.relation(relation),
        vocab.qmark(),
    ]
}

pub fn render_answer(vocab: &Vocab, object: u32) -> Vec<u32> {
    vec![vocab.answer(object), vocab.suffix(object % NUM_SUFFIXES as u32)]
}

/// The question's template string (symbols joined by spaces).
pub fn question_string(vocab: &Vocab, subject: u32, relation: u32, template: usize) -> String {
    vocab.detokenize(&render_question(vocab, subject, relation, template))
}

/// (x, y) pairs for the given facts and templates, in fact order.
pub fn fact_pairs(vocab: &Vocab, facts: &[&Fact], templates: &[usize]) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut out = Vec::with_capacity(facts.len() * templates.len());
    for f in facts {
        for &t in templates {
            out.push((render_question(vocab, f.subject, f.relation, t), f.answer_tokens.clone()));
        }
    }
    out
}

/// Deterministic corpus generation.
///
/// Every (subject, relation) pair appears exactly once; objects are assigned
/// per relation by a seeded permutation over a pool of `num_entities / 2`
/// answers, which makes every answer symbol the gold answer of at least two
/// distinct questions and gives every relation at least two distinct objects
/// (for distractor sampling).
pub fn generate(cfg: &GenerateConfig) -> Result<CorpusSplits> {
    let n_facts = (cfg.num_entities as usize) * (cfg.num_relations as usize);
    if n_facts < 20 {
        return Err(Error::Corpus(format!("{n_facts} facts; need at least 20")));
    }
    if cfg.num_entities < 4 || cfg.num_relations < 1 {
        return Err(Error::Corpus("need at least 4 entities and 1 relation".into()));
    }
    let fsum = cfg.forget_fraction + cfg.retain_fraction + cfg.test_fraction;
    if !(cfg.forget_fraction > 0.0 && cfg.retain_fraction >= 0.0 && cfg.test_fraction >= 0.0 && fsum <= 1.0) {
        return Err(Error::Corpus(format!("invalid split fractions summing to {fsum}")));
    }

    let num_answers = (cfg.num_entities / 2).max(2);
    let vocab = Vocab::build(cfg.num_entities, cfg.num_relations, num_answers);

    // Object assignment: seeded permutation of entities per relation,
    // reduced mod the answer pool.
    let mut objects = vec![0u32; n_facts];
    for r in 0..cfg.num_relations {
        let mut rng = seed::rng(seed::subseed_indexed(cfg.seed, "corpus-objects", r as u64));
        let mut perm: Vec<u32> = (0..cfg.num_entities).collect();
        perm.shuffle(&mut rng);
        for e in 0..cfg.num_entities {
            objects[(e * cfg.num_relations + r) as usize] = perm[e as usize] % num_answers;
        }
    }

    // Split assignment: floor-rounded counts over a seeded shuffle, with
    // the remainder becoming the utility split.
    let n_forget = (cfg.forget_fraction * n_facts as f64).floor() as usize;
    let n_retain = (cfg.retain_fraction * n_facts as f64).floor() as usize;
    let n_test = (cfg.test_fraction * n_facts as f64).floor() as usize;
    if n_forget == 0 {
        return Err(Error::Corpus("forget fraction rounds to an empty forget set".into()));
    }
    let mut order: Vec<usize> = (0..n_facts).collect();
    let mut rng = seed::rng(seed::subseed(cfg.seed, "corpus-splits"));
    order.shuffle(&mut rng);

    let mut split_of = vec![Split::Utility; n_facts];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx] = if rank < n_forget {
            Split::Forget
        } else if rank < n_forget + n_retain {
            Split::Retain
        } else if rank < n_forget + n_retain + n_test {
            Split::Test
        } else {
            Split::Utility
        };
    }

    let mut facts = Vec::with_capacity(n_facts);
    for e in 0..cfg.num_entities {
        for r in 0..cfg.num_relations {
            let idx = (e * cfg.num_relations + r) as usize;
            let object = objects[idx];
            facts.push(Fact {
                fact_id: idx as u32,
                subject: e,
                relation: r,
                object,
                question_tokens: render_question(&vocab, e, r, 0),
                answer_tokens: render_answer(&vocab, object),
                split: split_of[idx],
            });
        }
    }

    let corpus = CorpusSplits { config: cfg.clone(), vocab, facts };
    validate_corpus(&corpus)?;
    Ok(corpus)
}

fn validate_corpus(c: &CorpusSplits) -> Result<()> {
    // (subject, relation) uniqueness: one gold answer per question.
    let mut seen = BTreeSet::new();
    for f in &c.facts {
        if !seen.insert((f.subject, f.relation)) {
            return Err(Error::Corpus(format!("duplicate question ({}, {})", f.subject, f.relation)));
        }
    }
    // Every answer symbol is the gold answer of >= 2 distinct questions.
    let mut uses: BTreeMap<u32, usize> = BTreeMap::new();
    for f in &c.facts {
        *uses.entry(f.object).or_default() += 1;
    }
    for (obj, n) in &uses {
        if *n < 2 {
            return Err(Error::Corpus(format!("answer {obj} used by only {n} question(s)")));
        }
    }
    // Every relation offers >= 2 distinct objects (distractor sampling).
    let mut per_rel: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for f in &c.facts {
        per_rel.entry(f.relation).or_default().insert(f.object);
    }
    for (rel, objs) in &per_rel {
        if objs.len() < 2 {
            return Err(Error::Corpus(format!("relation {rel} has a single object")));
        }
    }
    Ok(())
}

// ── Benign corpus ────────────────────────────────────────────────────

/// Instruction-like sequences sharing the vocabulary but carrying no
/// (subject, relation) pair and no gold fact answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenignCorpus {
    pub seed: u64,
    pub seqs: Vec<Vec<u32>>,
}

/// Paraphrase/formatting/instruction patterns over instruction, entity,
/// answer and suffix tokens. Relation tokens never occur, so no benign
/// sequence can contain a (subject, relation) pair.
pub fn benign_corpus(seed: u64, size: usize, vocab: &Vocab) -> BenignCorpus {
    let mut rng = seed::rng(seed::subseed(seed, "benign-corpus"));
    let mut seqs = Vec::with_capacity(size);
    for _ in 0..size {
        let len = rng.random_range(5..=9usize);
        let mut s = Vec::with_capacity(len);
        s.push(vocab.bos());
        for j in 1..len {
            let tok = if j % 2 == 1 {
                vocab.instr(rng.random_range(0..NUM_INSTR))
            } else {
                match rng.random_range(0..3u32) {
                    0 => vocab.entity(rng.random_range(0..vocab.num_entities)),
                    1 => vocab.answer(rng.random_range(0..vocab.num_answers)),
                    _ => vocab.suffix(rng.random_range(0..NUM_SUFFIXES as u32)),
                }
            };
            s.push(tok);
        }
        seqs.push(s);
    }
    BenignCorpus { seed, seqs }
}

/// (subject, relation) pairs occurring as adjacent tokens in benign
/// sequences, intersected with the given facts. Empty by construction for
/// `benign_corpus`, but asserted rather than assumed.
pub fn benign_fact_overlap(benign: &BenignCorpus, vocab: &Vocab, facts: &[&Fact]) -> Vec<(u32, u32)> {
    let fact_pairs: BTreeSet<(u32, u32)> = facts.iter().map(|f| (f.subject, f.relation)).collect();
    let mut hits = BTreeSet::new();
    for s in &benign.seqs {
        for w in s.windows(2) {
            if vocab.is_entity_token(w[0]) && vocab.is_relation_token(w[1]) {
                let pair = (w[0] - vocab.entity(0), w[1] - vocab.relation(0));
                if fact_pairs.contains(&pair) {
                    hits.insert(pair);
                }
            }
        }
    }
    hits.into_iter().collect()
}

// ── Attack subsets ───────────────────────────────────────────────────

/// Splits the eligible facts into an attack set of ceil(p * n) facts and
/// the disjoint held-out remainder.
pub fn attack_subset(eligible: &[&Fact], p: f64, seed: u64) -> Result<(Vec<Fact>, Vec<Fact>)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument { op: "attack-subset", msg: format!("p = {p} outside (0, 1)") });
    }
    if eligible.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "attack-subset",
            msg: format!("{} eligible facts; need at least 2", eligible.len()),
        });
    }
    let n_attack = (p * eligible.len() as f64).ceil() as usize;
    if n_attack >= eligible.len() {
        return Err(Error::InvalidArgument {
            op: "attack-subset",
            msg: format!("p = {p} leaves an empty held-out set"),
        });
    }
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    let mut rng = seed::rng(seed::subseed(seed, "attack-subset"));
    order.shuffle(&mut rng);
    let attack: Vec<Fact> = order[..n_attack].iter().map(|&i| eligible[i].clone()).collect();
    let heldout: Vec<Fact> = order[n_attack..].iter().map(|&i| eligible[i].clone()).collect();
    Ok((attack, heldout))
}

// ── Line-delimited export/import ─────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum CorpusLine {
    Meta { config: GenerateConfig, vocab: Vocab },
    Fact(Fact),
}

pub fn export_corpus(path: &Path, corpus: &CorpusSplits) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let meta = CorpusLine::Meta { config: corpus.config.clone(), vocab: corpus.vocab.clone() };
    writeln!(w, "{}", serde_json::to_string(&meta)?)?;
    for f in &corpus.facts {
        writeln!(w, "{}", serde_json::to_string(&CorpusLine::Fact(f.clone()))?)?;
    }
    Ok(())
}

pub fn import_corpus(path: &Path) -> Result<CorpusSplits> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Corpus("empty corpus file".into()))??;
    let (config, vocab) = match serde_json::from_str::<CorpusLine>(&meta_line)? {
        CorpusLine::Meta { config, vocab } => (config, vocab),
        _ => return Err(Error::Corpus("first line must be the meta record".into())),
    };
    let mut facts = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusLine>(&line)? {
            CorpusLine::Fact(f) => facts.push(f),
            _ => return Err(Error::Corpus("unexpected second meta record".into())),
        }
    }
    let corpus = CorpusSplits { config, vocab, facts };
    validate_corpus(&corpus)?;
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum BenignLine {
    Meta { seed: u64 },
    Seq { tokens: Vec<u32> },
}

pub fn export_benign(path: &Path, benign: &BenignCorpus) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(&BenignLine::Meta { seed: benign.seed })?)?;
    for s in &benign.seqs {
        writeln!(w, "{}", serde_json::to_string(&BenignLine::Seq { tokens: s.clone() })?)?;
    }
    Ok(())
}

pub fn import_benign(path: &Path) -> Result<BenignCorpus> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let meta_line = lines.next().ok_or_else(|| Error::Corpus("empty benign file".into()))??;
    let seed = match serde_json::from_str::<BenignLine>(&meta_line)? {
        BenignLine::Meta { seed } => seed,
        _ => return Err(Error::Corpus("first line must be the meta record".into())),
    };
    let mut seqs = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BenignLine>(&line)? {
            BenignLine::Seq { tokens } => seqs.push(tokens),
            _ => return Err(Error::Corpus("unexpected second meta record".into())),
        }
    }
    Ok(BenignCorpus { seed, seqs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = GenerateConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn faithun_sized_corpus_has_33_forget_facts() {
        // 166 entities x 4 relations = 664 facts; floor(0.05 * 664) = 33.
        let cfg = GenerateConfig {
            num_entities: 166,
            num_relations: 4,
            ..Default::default()
        };
        let c = generate(&cfg).unwrap();
        assert_eq!(c.facts.len(), 664);
        assert_eq!(c.forget().len(), 33);
        assert_eq!(c.retain().len(), 66);
        assert_eq!(c.test().len(), 464);
        assert_eq!(c.utility().len(), 664 - 33 - 66 - 464);
    }

    #[test]
    fn utility_holds_the_remainder() {
        let cfg = GenerateConfig {
            num_entities: 40,
            num_relations: 5,
            forget_fraction: 0.05,
            retain_fraction: 0.10,
            test_fraction: 0.70,
            ..Default::default()
        };
        let c = generate(&cfg).unwrap();
        let total = c.facts.len();
        let used = c.forget().len() + c.retain().len() + c.test().len();
        assert_eq!(c.utility().len(), total - used);
        // 0.85 of the corpus is assigned, so utility holds ~15%.
        let frac = c.utility().len() as f64 / total as f64;
        assert!((0.13..=0.17).contains(&frac), "{frac}");
    }

    #[test]
    fn question_rendering_roundtrips() {
        let c = generate(&GenerateConfig::default()).unwrap();
        let f = &c.facts[17];
        let s = c.vocab.detokenize(&f.question_tokens);
        assert_eq!(s, question_string(&c.vocab, f.subject, f.relation, 0));
        assert!(s.starts_with("<bos> tpl-0 ent-"));
    }

    #[test]
    fn benign_corpus_has_size_and_no_forget_overlap() {
        let c = generate(&GenerateConfig::default()).unwrap();
        let b = benign_corpus(3, 1000, &c.vocab);
        assert_eq!(b.seqs.len(), 1000);
        let hits = benign_fact_overlap(&b, &c.vocab, &c.forget());
        assert!(hits.is_empty());
        let b2 = benign_corpus(3, 1000, &c.vocab);
        assert_eq!(b, b2);
    }

    #[test]
    fn attack_subset_rounds_up_and_stays_disjoint() {
        let c = generate(&GenerateConfig { num_entities: 30, num_relations: 1, forget_fraction: 0.99, retain_fraction: 0.0, test_fraction: 0.0, ..Default::default() })
            .unwrap();
        let eligible: Vec<&Fact> = c.facts.iter().take(30).collect();
        let (attack, heldout) = attack_subset(&eligible, 0.1, 7).unwrap();
        assert_eq!(attack.len(), 3);
        assert_eq!(heldout.len(), 27);
        let (attack3, heldout3) = attack_subset(&eligible, 0.3, 7).unwrap();
        assert_eq!(attack3.len(), 9);
        assert_eq!(heldout3.len(), 21);
        let a_ids: BTreeSet<u32> = attack.iter().map(|f| f.fact_id).collect();
        assert!(heldout.iter().all(|f| !a_ids.contains(&f.fact_id)));
        let _ = heldout3;
    }

    #[test]
    fn attack_subset_rejects_degenerate_inputs() {
        let c = generate(&GenerateConfig::default()).unwrap();
        let eligible: Vec<&Fact> = c.facts.iter().take(2).collect();
        assert!(attack_subset(&eligible, 0.9, 0).is_err()); // empty held-out
        assert!(attack_subset(&eligible[..1], 0.5, 0).is_err()); // too few
        assert!(attack_subset(&eligible, 0.0, 0).is_err());
    }

    #[test]
    fn corpus_jsonl_roundtrips() {
        let c = generate(&GenerateConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        export_corpus(&path, &c).unwrap();
        let back = import_corpus(&path).unwrap();
        assert_eq!(c, back);

        let b = benign_corpus(1, 25, &c.vocab);
        let bpath = dir.path().join("benign.jsonl");
        export_benign(&bpath, &b).unwrap();
        assert_eq!(import_benign(&bpath).unwrap(), b);
    }

    #[test]
    fn rejects_too_small_corpora() {
        let cfg = GenerateConfig { num_entities: 4, num_relations: 2, ..Default::default() };
        assert!(generate(&cfg).is_err());
    }
}
