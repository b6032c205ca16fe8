//! Seeded synthetic QA generator. Fact questions name a head entity and a
//! relation word; the gold passage mentions the answer next to a confounder
//! entity that shares a different relation with the same head, in textually
//! symmetric frames. The only signal separating the two candidates is the
//! relation identity on the graph edges, so graph-free and relation-blind
//! models face a coin flip there. A configurable fraction of questions is
//! instead answerable from a plain textual cue with no supporting triple.

use crate::{io_err, PipelineError};
use kgfuse_core::kgstore::{EntityId, KnowledgeGraph, RelationId};
use kgfuse_core::rng::SeededRng;
use kgfuse_core::textproc::{write_examples, QaExample, Vocab};
use std::collections::HashSet;
use std::path::Path;

/// Verb-like labels the knowledge graph draws from.
const RELATION_WORDS: [&str; 10] = [
    "guards", "forges", "teaches", "feeds", "rules", "sells", "paints", "hunts", "builds",
    "heals",
];

/// Verbs for cue-based (non-fact) questions; disjoint from the relation
/// pool so a cue never hints at a graph edge.
const CUE_WORDS: [&str; 4] = ["visited", "described", "greeted", "observed"];

/// Syllables composed into entity names. Three-syllable names give a pool
/// of 4096 distinct words, none of which collide with the fixed word lists.
const SYLLABLES: [&str; 16] = [
    "ba", "ko", "ri", "mu", "ta", "ve", "zo", "pi", "lu", "de", "no", "fa", "si", "ga", "hy",
    "wa",
];

/// Text templates. Words wrapped in braces are slots; everything else is
/// emitted literally. See [`Templates::validate`] for the slot contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub fact_question: String,
    pub fact_passage: String,
    pub cue_question: String,
    pub cue_passage: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            fact_question: "which thing does {head} {relation}".into(),
            fact_passage: "{head} is linked to {first} and to {second}".into(),
            cue_question: "what did {head} {cue}".into(),
            cue_passage: "{head} {cue} {tail} near {other}".into(),
        }
    }
}

fn template_words(template: &str) -> impl Iterator<Item = &str> {
    template.split_whitespace()
}

fn slot_name(word: &str) -> Option<&str> {
    word.strip_prefix('{')?.strip_suffix('}')
}

impl Templates {
    /// Each slot must be a whole word from the template's allowed set, and
    /// the slots that make an example well-posed must be present.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let specs: [(&str, &str, &[&str], &[&str]); 4] = [
            (
                "fact_question",
                &self.fact_question,
                &["head", "relation"],
                &["head", "relation"],
            ),
            (
                "fact_passage",
                &self.fact_passage,
                &["head", "first", "second"],
                &["first", "second"],
            ),
            ("cue_question", &self.cue_question, &["head", "cue"], &["head", "cue"]),
            (
                "cue_passage",
                &self.cue_passage,
                &["head", "cue", "tail", "other"],
                &["cue", "tail"],
            ),
        ];
        for (name, template, allowed, required) in specs {
            let mut seen = Vec::new();
            for word in template_words(template) {
                if word.contains('{') || word.contains('}') {
                    let Some(slot) = slot_name(word) else {
                        return Err(PipelineError::Synth(format!(
                            "template {name}: malformed slot {word:?}"
                        )));
                    };
                    if !allowed.contains(&slot) {
                        return Err(PipelineError::Synth(format!(
                            "template {name}: undefined slot {{{slot}}}"
                        )));
                    }
                    seen.push(slot);
                }
            }
            for slot in required {
                if !seen.contains(slot) {
                    return Err(PipelineError::Synth(format!(
                        "template {name}: missing required slot {{{slot}}}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn fill(template: &str, lookup: impl Fn(&str) -> String) -> String {
        template_words(template)
            .map(|w| match slot_name(w) {
                Some(slot) => lookup(slot),
                None => w.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Literal (non-slot) words across all templates, first occurrence
    /// order, deduplicated.
    fn literal_words(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in [
            &self.fact_question,
            &self.fact_passage,
            &self.cue_question,
            &self.cue_passage,
        ] {
            for w in template_words(t) {
                if slot_name(w).is_none() && !out.contains(&w) {
                    out.push(w);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub templates: Templates,
    pub distractors_per_example: usize,
    pub seed: u64,
    /// Fraction of examples answered by a textual cue instead of a triple.
    pub non_fact_fraction: f64,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub test_examples: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_entities: 300,
            n_relations: 6,
            n_triples: 900,
            templates: Templates::default(),
            distractors_per_example: 4,
            seed: 1,
            non_fact_fraction: 0.4,
            train_examples: 2000,
            dev_examples: 60,
            test_examples: 300,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Synth(msg));
        if self.n_entities < 3 {
            return fail("need at least 3 entities".into());
        }
        if self.n_entities > SYLLABLES.len().pow(3) {
            return fail(format!(
                "n_entities {} exceeds the {}-name pool",
                self.n_entities,
                SYLLABLES.len().pow(3)
            ));
        }
        if self.n_relations < 2 || self.n_relations > RELATION_WORDS.len() {
            return fail(format!(
                "n_relations must be in 2..={}, got {}",
                RELATION_WORDS.len(),
                self.n_relations
            ));
        }
        if self.n_triples < self.n_entities {
            return fail(format!(
                "n_triples {} < n_entities {}: every entity must join at least one triple",
                self.n_triples, self.n_entities
            ));
        }
        let capacity = self.n_entities * (self.n_entities - 1) * self.n_relations;
        if self.n_triples > capacity / 2 {
            return fail(format!(
                "n_triples {} infeasible: more than half the {} possible triples",
                self.n_triples, capacity
            ));
        }
        if !(0.0..1.0).contains(&self.non_fact_fraction) {
            return fail(format!(
                "non_fact_fraction must be in [0, 1), got {}",
                self.non_fact_fraction
            ));
        }
        if self.train_examples == 0 || self.dev_examples == 0 || self.test_examples == 0 {
            return fail("all example counts must be positive".into());
        }
        if self.distractors_per_example == 0 {
            return fail("distractors_per_example must be positive".into());
        }
        self.templates.validate()
    }

    /// Apply one `key = value` override (the key arrives without its
    /// section prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        let bad = |key: &str| PipelineError::Option {
            key: key.to_string(),
            msg: format!("bad value {v:?}"),
        };
        match key {
            "n_entities" => self.n_entities = v.parse().map_err(|_| bad(key))?,
            "n_relations" => self.n_relations = v.parse().map_err(|_| bad(key))?,
            "n_triples" => self.n_triples = v.parse().map_err(|_| bad(key))?,
            "distractors_per_example" => {
                self.distractors_per_example = v.parse().map_err(|_| bad(key))?
            }
            "seed" => self.seed = v.parse().map_err(|_| bad(key))?,
            "non_fact_fraction" => self.non_fact_fraction = v.parse().map_err(|_| bad(key))?,
            "train_examples" => self.train_examples = v.parse().map_err(|_| bad(key))?,
            "dev_examples" => self.dev_examples = v.parse().map_err(|_| bad(key))?,
            "test_examples" => self.test_examples = v.parse().map_err(|_| bad(key))?,
            "template.fact_question" => self.templates.fact_question = v.to_string(),
            "template.fact_passage" => self.templates.fact_passage = v.to_string(),
            "template.cue_question" => self.templates.cue_question = v.to_string(),
            "template.cue_passage" => self.templates.cue_passage = v.to_string(),
            _ => {
                return Err(PipelineError::Option {
                    key: key.to_string(),
                    msg: "unknown dataset key".into(),
                })
            }
        }
        Ok(())
    }
}

/// A generated corpus plus everything needed to interpret it.
#[derive(Debug)]
pub struct SynthOutput {
    pub kg: KnowledgeGraph,
    pub vocab: Vocab,
    /// (surface form, entity label) pairs; the surface is the label itself.
    pub lexicon_entries: Vec<(String, String)>,
    pub train: Vec<QaExample>,
    pub dev: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

impl SynthOutput {
    /// Write `kg.tsv`, `vocab.txt`, `lexicon.tsv`, and the three example
    /// files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut kg_text = String::new();
        for t in self.kg.triples() {
            kg_text.push_str(&format!(
                "{}\t{}\t{}\n",
                self.kg.entity_label(t.head),
                self.kg.relation_label(t.relation),
                self.kg.entity_label(t.tail)
            ));
        }
        let kg_path = dir.join("kg.tsv");
        std::fs::write(&kg_path, kg_text).map_err(|e| io_err(&kg_path, e))?;
        let vocab_path = dir.join("vocab.txt");
        std::fs::write(&vocab_path, self.vocab.to_text()).map_err(|e| io_err(&vocab_path, e))?;
        let mut lex_text = String::new();
        for (surface, label) in &self.lexicon_entries {
            lex_text.push_str(&format!("{surface}\t{label}\n"));
        }
        let lex_path = dir.join("lexicon.tsv");
        std::fs::write(&lex_path, lex_text).map_err(|e| io_err(&lex_path, e))?;
        write_examples(&dir.join("train.jsonl"), &self.train)?;
        write_examples(&dir.join("dev.jsonl"), &self.dev)?;
        write_examples(&dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }
}

/// Entity names are three space-separated syllables ("ta ve zo"), so every
/// name is a multi-token span drawn from a 16-word syllable alphabet. Answers
/// must therefore be read out of context token by token — a model cannot get
/// by memorizing one output token per training question.
fn entity_names(n: usize, rng: &SeededRng) -> Vec<String> {
    let s = SYLLABLES.len();
    let mut indices: Vec<usize> = (0..s * s * s).collect();
    rng.fork("entity-names").shuffle(&mut indices);
    indices
        .into_iter()
        .take(n)
        .map(|i| format!("{} {} {}", SYLLABLES[i / (s * s)], SYLLABLES[(i / s) % s], SYLLABLES[i % s]))
        .collect()
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    kg: KnowledgeGraph,
    entities: Vec<EntityId>,
    relations: Vec<RelationId>,
    /// Triples as (head, relation, tail) index triplets into the id lists.
    triples: Vec<(usize, usize, usize)>,
    /// For each entity index, indices into `triples` where it is the head.
    by_head: Vec<Vec<usize>>,
}

impl<'a> Generator<'a> {
    fn build(spec: &'a SynthSpec, rng: &SeededRng) -> Result<Self, PipelineError> {
        let names = entity_names(spec.n_entities, rng);
        let mut kg = KnowledgeGraph::new();
        let entities: Vec<EntityId> = names
            .iter()
            .map(|n| kg.intern_entity(n))
            .collect::<Result<_, _>>()?;
        let relations: Vec<RelationId> = RELATION_WORDS[..spec.n_relations]
            .iter()
            .map(|r| kg.intern_relation(r))
            .collect::<Result<_, _>>()?;

        let mut trng = rng.fork("triples");
        let mut seen: HashSet<(usize, usize, usize)> = HashSet::new();
        let mut triples: Vec<(usize, usize, usize)> = Vec::with_capacity(spec.n_triples);
        let push = |h: usize, r: usize, t: usize,
                        seen: &mut HashSet<(usize, usize, usize)>,
                        triples: &mut Vec<(usize, usize, usize)>| {
            if h != t && seen.insert((h, r, t)) {
                triples.push((h, r, t));
                true
            } else {
                false
            }
        };
        // First pass guarantees every entity heads a triple, so reloading
        // the graph from its triple file preserves the entity set.
        for h in 0..spec.n_entities {
            loop {
                let r = trng.index(spec.n_relations);
                let t = trng.index(spec.n_entities);
                if push(h, r, t, &mut seen, &mut triples) {
                    break;
                }
            }
        }
        let mut attempts = 0usize;
        let budget = 200 * spec.n_triples;
        while triples.len() < spec.n_triples {
            attempts += 1;
            if attempts > budget {
                return Err(PipelineError::Synth(format!(
                    "gave up sampling {} distinct triples after {} attempts",
                    spec.n_triples, budget
                )));
            }
            let h = trng.index(spec.n_entities);
            let r = trng.index(spec.n_relations);
            let t = trng.index(spec.n_entities);
            push(h, r, t, &mut seen, &mut triples);
        }
        for &(h, r, t) in &triples {
            kg.add_triple(entities[h], relations[r], entities[t], true);
        }

        let mut by_head = vec![Vec::new(); spec.n_entities];
        for (i, &(h, _, _)) in triples.iter().enumerate() {
            by_head[h].push(i);
        }
        Ok(Generator {
            spec,
            kg,
            entities,
            relations,
            triples,
            by_head,
        })
    }

    /// A triple can anchor a fact question iff its head has another triple
    /// under a different relation with a different tail — the confounder
    /// that makes the gold passage ambiguous without relation identity.
    fn eligible(&self, triple_idx: usize) -> bool {
        let (h, r, t) = self.triples[triple_idx];
        self.by_head[h]
            .iter()
            .any(|&j| self.triples[j].1 != r && self.triples[j].2 != t)
    }

    fn confounder(&self, triple_idx: usize, rng: &mut SeededRng) -> usize {
        let (h, r, t) = self.triples[triple_idx];
        let options: Vec<usize> = self.by_head[h]
            .iter()
            .copied()
            .filter(|&j| self.triples[j].1 != r && self.triples[j].2 != t)
            .collect();
        options[rng.index(options.len())]
    }

    fn name(&self, entity_idx: usize) -> String {
        self.kg.entity_label(self.entities[entity_idx]).to_string()
    }

    fn relation_word(&self, relation_idx: usize) -> String {
        self.kg.relation_label(self.relations[relation_idx]).to_string()
    }

    fn fact_passage_for(&self, triple_idx: usize, rng: &mut SeededRng) -> String {
        let (h, _, t) = self.triples[triple_idx];
        let c = self.confounder(triple_idx, rng);
        let (_, _, t2) = self.triples[c];
        let (first, second) = if rng.chance(0.5) { (t, t2) } else { (t2, t) };
        let t = &self.spec.templates;
        Templates::fill(&t.fact_passage, |slot| match slot {
            "head" => self.name(h),
            "first" => self.name(first),
            "second" => self.name(second),
            _ => unreachable!("validated template"),
        })
    }

    /// Entities with no triple in either direction between them, used for
    /// cue examples so their answers never gain graph support.
    fn unconnected_pair(&self, rng: &mut SeededRng) -> Result<(usize, usize), PipelineError> {
        for _ in 0..10_000 {
            let h = rng.index(self.spec.n_entities);
            let t = rng.index(self.spec.n_entities);
            if h == t {
                continue;
            }
            let connected = !self
                .kg
                .relations_between(self.entities[h], self.entities[t])?
                .is_empty();
            if !connected {
                return Ok((h, t));
            }
        }
        Err(PipelineError::Synth(
            "could not find an unconnected entity pair; the graph is too dense".into(),
        ))
    }

    fn fact_example(
        &self,
        pool: &[usize],
        rng: &mut SeededRng,
    ) -> Result<QaExample, PipelineError> {
        let primary = pool[rng.index(pool.len())];
        let (h, r, t) = self.triples[primary];
        let templates = &self.spec.templates;
        let question = Templates::fill(&templates.fact_question, |slot| match slot {
            "head" => self.name(h),
            "relation" => self.relation_word(r),
            _ => unreachable!("validated template"),
        });
        let gold = self.fact_passage_for(primary, rng);
        let answers = vec![self.name(t)];
        Ok(self.with_distractors(question, answers, gold, pool, Some(primary), true, rng))
    }

    fn cue_example(
        &self,
        pool: &[usize],
        rng: &mut SeededRng,
    ) -> Result<QaExample, PipelineError> {
        let (h, t) = self.unconnected_pair(rng)?;
        let cue = CUE_WORDS[rng.index(CUE_WORDS.len())].to_string();
        let other = loop {
            let o = rng.index(self.spec.n_entities);
            if o != h && o != t {
                break o;
            }
        };
        let templates = &self.spec.templates;
        let question = Templates::fill(&templates.cue_question, |slot| match slot {
            "head" => self.name(h),
            "cue" => cue.clone(),
            _ => unreachable!("validated template"),
        });
        let gold = Templates::fill(&templates.cue_passage, |slot| match slot {
            "head" => self.name(h),
            "cue" => cue.clone(),
            "tail" => self.name(t),
            "other" => self.name(other),
            _ => unreachable!("validated template"),
        });
        let answers = vec![self.name(t)];
        Ok(self.with_distractors(question, answers, gold, pool, None, false, rng))
    }

    fn with_distractors(
        &self,
        question: String,
        answers: Vec<String>,
        gold: String,
        pool: &[usize],
        primary: Option<usize>,
        fact: bool,
        rng: &mut SeededRng,
    ) -> QaExample {
        let mut passages = vec![gold];
        for _ in 0..self.spec.distractors_per_example {
            let pick = loop {
                let p = pool[rng.index(pool.len())];
                if Some(p) != primary || pool.len() == 1 {
                    break p;
                }
            };
            passages.push(self.fact_passage_for(pick, rng));
        }
        rng.shuffle(&mut passages);
        QaExample {
            question,
            answers,
            passages,
            fact: Some(fact),
            discriminative: Some(fact),
        }
    }

    fn split_examples(
        &self,
        pool: &[usize],
        count: usize,
        label: &str,
        rng: &SeededRng,
    ) -> Result<Vec<QaExample>, PipelineError> {
        let eligible: Vec<usize> = pool.iter().copied().filter(|&i| self.eligible(i)).collect();
        if eligible.is_empty() {
            return Err(PipelineError::Synth(format!(
                "the {label} split has no head with two distinct relations; \
                 raise n_triples or lower n_entities"
            )));
        }
        let mut erng = rng.fork(&format!("examples.{label}"));
        (0..count)
            .map(|_| {
                if erng.chance(self.spec.non_fact_fraction) {
                    self.cue_example(&eligible, &mut erng)
                } else {
                    self.fact_example(&eligible, &mut erng)
                }
            })
            .collect()
    }
}

/// Generate the knowledge graph, vocabulary, entity lexicon, and the three
/// example files. Deterministic in `spec` (including its seed).
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthOutput, PipelineError> {
    spec.validate()?;
    let rng = SeededRng::new(spec.seed);
    let gen = Generator::build(spec, &rng)?;

    // Splits partition the triples; a question about a dev/test triple is
    // never asked in training.
    let mut order: Vec<usize> = (0..spec.n_triples).collect();
    rng.fork("split").shuffle(&mut order);
    let n_dev = (spec.n_triples / 10).max(1);
    let n_test = (spec.n_triples / 10).max(1);
    let n_train = spec.n_triples - n_dev - n_test;
    let train_pool = &order[..n_train];
    let dev_pool = &order[n_train..n_train + n_dev];
    let test_pool = &order[n_train + n_dev..];

    let train = gen.split_examples(train_pool, spec.train_examples, "train", &rng)?;
    let dev = gen.split_examples(dev_pool, spec.dev_examples, "dev", &rng)?;
    let test = gen.split_examples(test_pool, spec.test_examples, "test", &rng)?;

    // Vocabulary: literal template words, cues, relation labels, then
    // entity names; reserved tokens are prepended by the vocabulary itself.
    let mut words: Vec<String> = Vec::new();
    let add = |w: &str, words: &mut Vec<String>| {
        if !words.iter().any(|x| x == w) {
            words.push(w.to_string());
        }
    };
    for w in spec.templates.literal_words() {
        add(w, &mut words);
    }
    for w in &CUE_WORDS {
        add(w, &mut words);
    }
    for r in 0..spec.n_relations {
        add(RELATION_WORDS[r], &mut words);
    }
    let fixed_words = words.len();
    for e in 0..spec.n_entities {
        let name = gen.kg.entity_label(gen.entities[e]).to_string();
        for syllable in name.split_whitespace() {
            if words[..fixed_words].iter().any(|w| w == syllable) {
                return Err(PipelineError::Synth(format!(
                    "entity name word {syllable:?} collides with a template word"
                )));
            }
            add(syllable, &mut words);
        }
    }
    let vocab = Vocab::new(&words);

    let lexicon_entries: Vec<(String, String)> = (0..spec.n_entities)
        .map(|e| {
            let name = gen.kg.entity_label(gen.entities[e]).to_string();
            (name.clone(), name)
        })
        .collect();

    Ok(SynthOutput {
        kg: gen.kg,
        vocab,
        lexicon_entries,
        train,
        dev,
        test,
    })
}
