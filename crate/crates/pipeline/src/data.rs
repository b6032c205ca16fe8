//! Loading corpus artifacts from disk and turning raw examples into the
//! annotated, graph-attached form the model consumes.

use crate::synth::SynthOutput;
use crate::{io_err, PipelineError};
use kgfuse_core::evalkit::link_answer_entities;
use kgfuse_core::kgstore::{EntityId, KnowledgeGraph};
use kgfuse_core::localgraph::{build_graph, LocalGraph};
use kgfuse_core::reader::ReaderConfig;
use kgfuse_core::textproc::{
    annotate, link_mentions, read_examples, tokenize, AnnotatedDocument, QaExample, TokenLexicon,
    Vocab, UNK,
};
use std::path::Path;

/// Corpus artifacts as loaded, before any model-specific processing.
pub struct LoadedData {
    pub kg: KnowledgeGraph,
    pub vocab: Vocab,
    pub lexicon: TokenLexicon,
    pub train: Vec<QaExample>,
    pub dev: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

impl LoadedData {
    /// Read `kg.tsv`, `vocab.txt`, `lexicon.tsv`, and the example files
    /// written by dataset generation.
    pub fn load_dir(dir: &Path) -> Result<Self, PipelineError> {
        let kg = KnowledgeGraph::load_triples(&dir.join("kg.tsv"), true)?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let entries = kgfuse_core::textproc::load_lexicon(&dir.join("lexicon.tsv"))?;
        let lexicon = TokenLexicon::build(&entries, &vocab, &kg)?;
        Ok(LoadedData {
            kg,
            vocab,
            lexicon,
            train: read_examples(&dir.join("train.jsonl"))?,
            dev: read_examples(&dir.join("dev.jsonl"))?,
            test: read_examples(&dir.join("test.jsonl"))?,
        })
    }

    /// Adopt a generated corpus without the disk round trip.
    pub fn from_synth(out: SynthOutput) -> Result<Self, PipelineError> {
        let lexicon = TokenLexicon::build(&out.lexicon_entries, &out.vocab, &out.kg)?;
        Ok(LoadedData {
            kg: out.kg,
            vocab: out.vocab,
            lexicon,
            train: out.train,
            dev: out.dev,
            test: out.test,
        })
    }

    /// Token sequences of the relation labels, indexed by relation id.
    pub fn relation_tokens(&self) -> Vec<Vec<u32>> {
        self.kg
            .relation_ids()
            .map(|r| tokenize(self.kg.relation_label(r), &self.vocab))
            .collect()
    }
}

/// One example with every passage annotated and its graph built.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub question: String,
    pub answers: Vec<String>,
    /// First gold answer, tokenized; the teacher-forcing target.
    pub answer_tokens: Vec<u32>,
    pub answer_entities: Vec<EntityId>,
    pub question_tokens: Vec<u32>,
    pub passage_tokens: Vec<Vec<u32>>,
    pub docs: Vec<(AnnotatedDocument, LocalGraph)>,
    pub fact: Option<bool>,
    /// Whether answering hinges on telling relations apart.
    pub discriminative: Option<bool>,
}

/// Everything the training loop and evaluators need, preprocessed once.
pub struct PreparedData {
    pub kg: KnowledgeGraph,
    pub vocab: Vocab,
    pub lexicon: TokenLexicon,
    pub relation_tokens: Vec<Vec<u32>>,
    pub train: Vec<PreparedExample>,
    pub dev: Vec<PreparedExample>,
    pub test: Vec<PreparedExample>,
}

fn prepare_example(
    ex: &QaExample,
    index: usize,
    data: &LoadedData,
    config: &ReaderConfig,
) -> Result<PreparedExample, PipelineError> {
    let err = |msg: String| PipelineError::Example { index, msg };
    if ex.answers.is_empty() {
        return Err(err("no gold answers".into()));
    }
    if ex.passages.is_empty() {
        return Err(err("no passages".into()));
    }
    let answer_tokens = tokenize(&ex.answers[0], &data.vocab);
    if answer_tokens.is_empty() || answer_tokens.contains(&UNK) {
        return Err(err(format!(
            "gold answer {:?} does not tokenize cleanly",
            ex.answers[0]
        )));
    }
    if answer_tokens.len() > config.max_answer_len {
        return Err(err(format!(
            "gold answer {:?} exceeds max_answer_len {}",
            ex.answers[0], config.max_answer_len
        )));
    }
    let question_tokens = tokenize(&ex.question, &data.vocab);
    let q_mentions = link_mentions(&question_tokens, &data.lexicon);
    let mut passage_tokens = Vec::with_capacity(ex.passages.len());
    let mut docs = Vec::with_capacity(ex.passages.len());
    for passage in &ex.passages {
        let p_tokens = tokenize(passage, &data.vocab);
        let p_mentions = link_mentions(&p_tokens, &data.lexicon);
        let mut doc = annotate(&question_tokens, &p_tokens, &q_mentions, &p_mentions)?;
        doc.truncate(config.max_doc_len);
        let graph = build_graph(&doc, &data.kg);
        passage_tokens.push(p_tokens);
        docs.push((doc, graph));
    }
    Ok(PreparedExample {
        question: ex.question.clone(),
        answers: ex.answers.clone(),
        answer_tokens,
        answer_entities: link_answer_entities(&ex.answers, &data.vocab, &data.lexicon),
        question_tokens,
        passage_tokens,
        docs,
        fact: ex.fact,
        discriminative: ex.discriminative,
    })
}

/// Annotate and graph every example of every split.
pub fn prepare(data: LoadedData, config: &ReaderConfig) -> Result<PreparedData, PipelineError> {
    let run = |xs: &[QaExample], data: &LoadedData| -> Result<Vec<PreparedExample>, PipelineError> {
        xs.iter()
            .enumerate()
            .map(|(i, ex)| prepare_example(ex, i, data, config))
            .collect()
    };
    let train = run(&data.train, &data)?;
    let dev = run(&data.dev, &data)?;
    let test = run(&data.test, &data)?;
    let relation_tokens = data.relation_tokens();
    Ok(PreparedData {
        kg: data.kg,
        vocab: data.vocab,
        lexicon: data.lexicon,
        relation_tokens,
        train,
        dev,
        test,
    })
}

/// Write one graph-records file per split into `dir`, one record per
/// (question, passage) pair including empty graphs, so statistics can
/// count questions exactly.
pub fn write_graph_files(data: &PreparedData, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    use kgfuse_core::localgraph::{write_graph_records, GraphRecord};
    for (name, split) in [
        ("train", &data.train),
        ("dev", &data.dev),
        ("test", &data.test),
    ] {
        let mut records = Vec::new();
        for (q, ex) in split.iter().enumerate() {
            for (_, graph) in &ex.docs {
                records.push(GraphRecord::from_graph(graph, &data.kg, q));
            }
        }
        write_graph_records(&dir.join(format!("graphs-{name}.jsonl")), &records)?;
    }
    Ok(())
}

/// Spans whose entity the knowledge graph does not know, across all splits.
/// Non-zero counts signal a mismatched lexicon.
pub fn skipped_span_count(data: &PreparedData) -> usize {
    [&data.train, &data.dev, &data.test]
        .into_iter()
        .flatten()
        .flat_map(|ex| ex.docs.iter())
        .map(|(_, g)| g.skipped_spans)
        .sum()
}
