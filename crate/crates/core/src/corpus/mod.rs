//! Synthetic fact world: vocabulary, functional facts, paraphrase templates,
//! neutral filler text, edit splits and CounterFact-format import.

mod counterfact;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use counterfact::{export_counterfact, import_counterfact, ImportReport, Rejection};
pub use vocab::{TokenKind, Vocab, VocabLayout, EOS, PAD};

/// Relation first, so the last subject token is the prediction site.
pub const CANONICAL_TEMPLATE: &str = "{r} {s}";

/// Smallest filler vocabulary that still supports templates and neutral text.
pub const MIN_FILLERS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    pub facts_per_relation: usize,
    /// Total vocabulary budget; whatever entities leave over becomes filler.
    pub vocab_size: usize,
    /// Fraction of subjects rendered with two tokens.
    pub two_token_subject_fraction: f64,
    /// Paraphrase surface forms per fact (at least 2).
    pub n_templates: usize,
    pub neutral_train_tokens: usize,
    pub neutral_eval_tokens: usize,
    /// Probability that a neutral-text token is a subject or object mention.
    pub entity_rate: f64,
    /// Out-degree of the filler bigram chain.
    pub successors_per_filler: usize,
    /// Require that every fact admits a counterfactual object.
    pub edit_pool: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_subjects: 24,
            n_relations: 4,
            n_objects: 16,
            facts_per_relation: 16,
            vocab_size: 160,
            two_token_subject_fraction: 0.25,
            n_templates: 3,
            neutral_train_tokens: 20_000,
            neutral_eval_tokens: 10_000,
            entity_rate: 0.1,
            successors_per_filler: 4,
            edit_pool: true,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    fn n_two_token_subjects(&self) -> usize {
        (self.n_subjects as f64 * self.two_token_subject_fraction).round() as usize
    }

    fn entity_tokens(&self) -> usize {
        2 + self.n_subjects + self.n_two_token_subjects() + self.n_relations + self.n_objects
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidCorpusSpec(m.to_string()));
        if self.n_subjects == 0
            || self.n_relations == 0
            || self.n_objects == 0
            || self.facts_per_relation == 0
        {
            return bad("n_subjects, n_relations, n_objects and facts_per_relation must be positive");
        }
        if self.facts_per_relation > self.n_subjects {
            return bad("facts_per_relation cannot exceed n_subjects (facts are functional)");
        }
        if self.n_templates < 2 {
            return bad("at least 2 paraphrase templates are required");
        }
        if !(0.0..=1.0).contains(&self.two_token_subject_fraction)
            || !(0.0..1.0).contains(&self.entity_rate)
        {
            return bad("fractions must lie in [0, 1)");
        }
        if self.edit_pool && self.n_objects < 2 {
            return bad("an edit pool needs at least 2 objects so that o* != o exists");
        }
        if self.successors_per_filler == 0 {
            return bad("successors_per_filler must be positive");
        }
        let needed = self.entity_tokens() + MIN_FILLERS.max(self.n_templates - 1);
        if needed > self.vocab_size {
            return Err(Error::VocabularyOverflow(format!(
                "{} entity tokens plus {} fillers need {} slots but vocab_size is {}",
                self.entity_tokens(),
                MIN_FILLERS.max(self.n_templates - 1),
                needed,
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub id: usize,
    pub subject: Vec<usize>,
    pub relation: usize,
    pub object: usize,
    /// Whitespace template with `{s}` and `{r}` slots, e.g. `"{r} {s}"`.
    pub prompt_template: String,
}

/// A rendered prompt together with the position of the last subject token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub subject_last: usize,
}

impl FactTriple {
    pub fn render(&self, template: &str, vocab: &Vocab) -> Result<Prompt> {
        let mut tokens = Vec::new();
        let mut subject_last = None;
        for word in template.split_whitespace() {
            match word {
                "{s}" => {
                    tokens.extend_from_slice(&self.subject);
                    subject_last = Some(tokens.len() - 1);
                }
                "{r}" => tokens.push(self.relation),
                w => tokens.push(vocab.id(w).ok_or_else(|| Error::UnknownToken(w.to_string()))?),
            }
        }
        let subject_last = subject_last.ok_or_else(|| {
            Error::SubjectNotFound(format!("template {template:?} has no {{s}} slot"))
        })?;
        Ok(Prompt {
            tokens,
            subject_last,
        })
    }

    /// The canonical prompt `x`.
    pub fn prompt(&self, vocab: &Vocab) -> Result<Prompt> {
        self.render(&self.prompt_template, vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditRequest {
    pub case_id: usize,
    pub fact: FactTriple,
    pub new_object: usize,
}

impl EditRequest {
    pub fn edit_id(&self) -> String {
        format!("edit-{:05}", self.case_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocab,
    pub facts: Vec<FactTriple>,
    pub templates: Vec<String>,
    pub neutral_train: Vec<usize>,
    pub neutral_eval: Vec<usize>,
}

impl Corpus {
    /// Every fact rendered through every template, followed by its object.
    pub fn training_sentences(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(self.facts.len() * self.templates.len());
        for fact in &self.facts {
            for t in &self.templates {
                let mut tokens = fact.render(t, &self.vocab)?.tokens;
                tokens.push(fact.object);
                tokens.push(self.vocab.eos());
                out.push(tokens);
            }
        }
        Ok(out)
    }

    pub fn longest_prompt(&self) -> usize {
        self.facts
            .iter()
            .flat_map(|f| self.templates.iter().map(move |t| (f, t)))
            .filter_map(|(f, t)| f.render(t, &self.vocab).ok())
            .map(|p| p.tokens.len())
            .max()
            .unwrap_or(0)
    }

    /// Writes `corpus.json`, `train.txt` and `neutral.txt` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("corpus.json");
        fs::write(&manifest, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&manifest, e))?;
        let train = dir.join("train.txt");
        let mut text = String::new();
        for s in self.training_sentences()? {
            text.push_str(&self.vocab.decode(&s));
            text.push('\n');
        }
        fs::write(&train, text).map_err(|e| Error::io(&train, e))?;
        let neutral = dir.join("neutral.txt");
        let mut text = String::new();
        for chunk in self.neutral_eval.chunks(32) {
            text.push_str(&self.vocab.decode(chunk));
            text.push('\n');
        }
        fs::write(&neutral, text).map_err(|e| Error::io(&neutral, e))?;
        Ok(vec![manifest, train, neutral])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_two = spec.n_two_token_subjects();
    let n_fillers = spec.vocab_size - spec.entity_tokens();
    let vocab = Vocab::build(spec.n_subjects + n_two, spec.n_relations, spec.n_objects, n_fillers);
    let layout = vocab.layout().clone();

    // Subject i uses token s_i; the first n_two subjects get a second token.
    let subjects: Vec<Vec<usize>> = (0..spec.n_subjects)
        .map(|i| {
            let main = layout.subject.start + i;
            if i < n_two {
                vec![main, layout.subject.start + spec.n_subjects + i]
            } else {
                vec![main]
            }
        })
        .collect();

    let mut facts = Vec::new();
    for r in 0..spec.n_relations {
        let mut order: Vec<usize> = (0..spec.n_subjects).collect();
        order.shuffle(&mut rng);
        let mut chosen = order[..spec.facts_per_relation].to_vec();
        chosen.sort_unstable();
        for s in chosen {
            let object = layout.object.start + rng.random_range(0..spec.n_objects);
            facts.push(FactTriple {
                id: facts.len(),
                subject: subjects[s].clone(),
                relation: layout.relation.start + r,
                object,
                prompt_template: CANONICAL_TEMPLATE.to_string(),
            });
        }
    }

    // Template words are the first fillers.
    let mut templates = vec![CANONICAL_TEMPLATE.to_string()];
    for t in 1..spec.n_templates {
        let word = vocab.token(layout.filler.start + t - 1).to_string();
        templates.push(if t % 2 == 1 {
            format!("{word} {{r}} {{s}}")
        } else {
            format!("{{r}} {word} {{s}}")
        });
    }

    let chain = FillerChain::new(&mut rng, layout.filler.clone(), spec.successors_per_filler);
    let neutral_train = chain.sample(&mut rng, spec.neutral_train_tokens, spec.entity_rate, &layout);
    let neutral_eval = chain.sample(&mut rng, spec.neutral_eval_tokens, spec.entity_rate, &layout);

    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        facts,
        templates,
        neutral_train,
        neutral_eval,
    })
}

/// Bigram chain over filler tokens with sparse, skewed successor sets.
struct FillerChain {
    fillers: std::ops::Range<usize>,
    successors: Vec<Vec<(usize, f64)>>,
}

impl FillerChain {
    fn new(rng: &mut ChaCha8Rng, fillers: std::ops::Range<usize>, degree: usize) -> Self {
        let n = fillers.len();
        let successors = (0..n)
            .map(|_| {
                let mut row: Vec<(usize, f64)> = (0..degree.min(n))
                    .map(|k| (fillers.start + rng.random_range(0..n), 1.0 / (k as f64 + 1.0)))
                    .collect();
                let z: f64 = row.iter().map(|(_, w)| w).sum();
                row.iter_mut().for_each(|(_, w)| *w /= z);
                row
            })
            .collect();
        Self { fillers, successors }
    }

    fn sample(
        &self,
        rng: &mut ChaCha8Rng,
        len: usize,
        entity_rate: f64,
        layout: &VocabLayout,
    ) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut state = self.fillers.start + rng.random_range(0..self.fillers.len());
        // Entity mentions use subject and object tokens only; without a
        // relation token no sentence can state a fact.
        let n_entities = layout.subject.len() + layout.object.len();
        while out.len() < len {
            if rng.random::<f64>() < entity_rate {
                let k = rng.random_range(0..n_entities);
                let tok = if k < layout.subject.len() {
                    layout.subject.start + k
                } else {
                    layout.object.start + k - layout.subject.len()
                };
                out.push(tok);
                state = self.fillers.start + rng.random_range(0..self.fillers.len());
                continue;
            }
            out.push(state);
            let row = &self.successors[state - self.fillers.start];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = row[row.len() - 1].0;
            for &(tok, w) in row {
                acc += w;
                if u < acc {
                    next = tok;
                    break;
                }
            }
            state = next;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    StratifiedByRelation,
    RelationDisjoint,
}

/// Samples disjoint train/test edit sets with uniformly drawn counterfactual objects.
pub fn split_edits(
    corpus: &Corpus,
    n_train: usize,
    n_test: usize,
    mode: SplitMode,
    seed: u64,
) -> Result<(Vec<EditRequest>, Vec<EditRequest>)> {
    if n_train + n_test > corpus.facts.len() {
        return Err(Error::InvalidSplit(format!(
            "{} edits requested but corpus has {} facts",
            n_train + n_test,
            corpus.facts.len()
        )));
    }
    let objects = corpus.vocab.objects();
    if objects.len() < 2 {
        return Err(Error::InvalidSplit("need at least 2 objects to sample o* != o".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_relation: BTreeMap<usize, Vec<&FactTriple>> = BTreeMap::new();
    for f in &corpus.facts {
        by_relation.entry(f.relation).or_default().push(f);
    }
    for facts in by_relation.values_mut() {
        facts.shuffle(&mut rng);
    }
    let relations: Vec<usize> = by_relation.keys().copied().collect();

    let (train_rel, test_rel) = match mode {
        SplitMode::StratifiedByRelation => (relations.clone(), relations.clone()),
        SplitMode::RelationDisjoint => {
            if relations.len() < 2 {
                return Err(Error::InvalidSplit(
                    "relation-disjoint mode requires at least 2 relations".into(),
                ));
            }
            let mut shuffled = relations.clone();
            shuffled.shuffle(&mut rng);
            let half = shuffled.len().div_ceil(2);
            let mut a = shuffled[..half].to_vec();
            let mut b = shuffled[half..].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            (a, b)
        }
    };

    let quotas = |total: usize, rels: &[usize]| -> BTreeMap<usize, usize> {
        rels.iter()
            .enumerate()
            .map(|(i, &r)| (r, total / rels.len() + usize::from(i < total % rels.len())))
            .collect()
    };
    let train_q = quotas(n_train, &train_rel);
    let test_q = quotas(n_test, &test_rel);
    for &r in &relations {
        let need = train_q.get(&r).copied().unwrap_or(0) + test_q.get(&r).copied().unwrap_or(0);
        let have = by_relation[&r].len();
        if need > have {
            return Err(Error::InfeasibleSplit {
                relation: corpus.vocab.token(r).to_string(),
                available: have,
                required: need,
            });
        }
    }

    let mut case_id = 0;
    let mut make = |fact: &FactTriple, rng: &mut ChaCha8Rng| {
        let mut new_object = objects.start + rng.random_range(0..objects.len() - 1);
        if new_object >= fact.object {
            new_object += 1;
        }
        let req = EditRequest {
            case_id,
            fact: fact.clone(),
            new_object,
        };
        case_id += 1;
        req
    };
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for &r in &relations {
        let facts = &by_relation[&r];
        let nt = train_q.get(&r).copied().unwrap_or(0);
        let ne = test_q.get(&r).copied().unwrap_or(0);
        for f in &facts[..nt] {
            train.push(make(f, &mut rng));
        }
        for f in &facts[nt..nt + ne] {
            test.push(make(f, &mut rng));
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub facts: usize,
    pub relations: usize,
    pub unique_objects: usize,
    pub unique_subjects: usize,
    pub unique_mappings: usize,
}

pub fn corpus_stats(edits: &[EditRequest]) -> Result<StatsRecord> {
    if edits.is_empty() {
        return Err(Error::Empty("edit set"));
    }
    let relations: BTreeSet<_> = edits.iter().map(|e| e.fact.relation).collect();
    let objects: BTreeSet<_> = edits.iter().map(|e| e.fact.object).collect();
    let subjects: BTreeSet<_> = edits.iter().map(|e| e.fact.subject.clone()).collect();
    let mappings: BTreeSet<_> = edits.iter().map(|e| (e.fact.object, e.new_object)).collect();
    Ok(StatsRecord {
        facts: edits.len(),
        relations: relations.len(),
        unique_objects: objects.len(),
        unique_subjects: subjects.len(),
        unique_mappings: mappings.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_subjects: 4,
            n_relations: 2,
            n_objects: 4,
            facts_per_relation: 4,
            vocab_size: 64,
            neutral_train_tokens: 200,
            neutral_eval_tokens: 100,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_and_functionality() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.facts.len(), 8);
        let pairs: BTreeSet<_> = c.facts.iter().map(|f| (f.subject.clone(), f.relation)).collect();
        assert_eq!(pairs.len(), 8);
        assert_eq!(c.vocab.len(), 64);
    }

    #[test]
    fn deterministic_bytes() {
        let a = serde_json::to_vec(&generate_corpus(&small()).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_corpus(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_object_with_edit_pool_is_rejected() {
        let spec = CorpusSpec {
            n_objects: 1,
            ..small()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::InvalidCorpusSpec(_))));
    }

    #[test]
    fn vocabulary_overflow() {
        let spec = CorpusSpec {
            vocab_size: 16,
            ..small()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::VocabularyOverflow(_))));
    }

    #[test]
    fn prompts_exclude_object_and_use_subject_tokens() {
        let c = generate_corpus(&small()).unwrap();
        for f in &c.facts {
            for t in &c.templates {
                let p = f.render(t, &c.vocab).unwrap();
                assert!(!p.tokens.contains(&f.object));
                assert_eq!(c.vocab.kind(p.tokens[p.subject_last]), Some(TokenKind::Subject));
            }
            assert!(f.subject.iter().all(|&s| c.vocab.kind(s) == Some(TokenKind::Subject)));
        }
        assert!(c.templates.len() >= 2);
    }

    #[test]
    fn neutral_text_never_contains_relations() {
        let c = generate_corpus(&small()).unwrap();
        let rel = c.vocab.relations();
        assert!(c.neutral_eval.iter().chain(&c.neutral_train).all(|t| !rel.contains(t)));
        assert_eq!(c.neutral_eval.len(), 100);
    }

    #[test]
    fn stratified_split_balances_relations() {
        let c = generate_corpus(&small()).unwrap();
        let (train, test) = split_edits(&c, 4, 4, SplitMode::StratifiedByRelation, 3).unwrap();
        for split in [&train, &test] {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for e in split.iter() {
                *counts.entry(e.fact.relation).or_default() += 1;
                assert_ne!(e.new_object, e.fact.object);
                assert_eq!(c.vocab.kind(e.new_object), Some(TokenKind::Object));
            }
            assert_eq!(counts.values().copied().collect::<Vec<_>>(), vec![2, 2]);
        }
        let train_ids: BTreeSet<_> = train.iter().map(|e| e.fact.id).collect();
        assert!(test.iter().all(|e| !train_ids.contains(&e.fact.id)));
    }

    #[test]
    fn relation_disjoint_split() {
        let c = generate_corpus(&small()).unwrap();
        let (train, test) = split_edits(&c, 2, 2, SplitMode::RelationDisjoint, 1).unwrap();
        let a: BTreeSet<_> = train.iter().map(|e| e.fact.relation).collect();
        let b: BTreeSet<_> = test.iter().map(|e| e.fact.relation).collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn infeasible_split_names_relation() {
        let c = generate_corpus(&small()).unwrap();
        let err = split_edits(&c, 5, 3, SplitMode::RelationDisjoint, 1).unwrap_err();
        match err {
            Error::InfeasibleSplit { relation, .. } => assert!(relation.starts_with('r')),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn new_object_varies_across_seeds() {
        let c = generate_corpus(&small()).unwrap();
        let mut per_fact: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for seed in 0..100 {
            let (train, test) = split_edits(&c, 4, 4, SplitMode::StratifiedByRelation, seed).unwrap();
            for e in train.iter().chain(&test) {
                per_fact.entry(e.fact.id).or_default().insert(e.new_object);
            }
        }
        assert!(per_fact.values().all(|s| s.len() > 1));
    }

    #[test]
    fn stats_count_exactly() {
        let c = generate_corpus(&small()).unwrap();
        let f = c.facts[0].clone();
        let mut g = c.facts[1].clone();
        g.subject = f.subject.clone();
        let e1 = EditRequest { case_id: 0, fact: f.clone(), new_object: c.vocab.objects().start };
        let e2 = EditRequest { case_id: 1, fact: g, new_object: c.vocab.objects().start + 1 };
        assert_eq!(corpus_stats(&[e1.clone(), e2]).unwrap().unique_subjects, 1);
        let dup = EditRequest { case_id: 2, ..e1.clone() };
        assert_eq!(corpus_stats(&[e1, dup]).unwrap().unique_mappings, 1);
        assert!(corpus_stats(&[]).is_err());
    }
}
