//! Knowledge-graph triple store with a bipartite edge predicate.
//!
//! Triples are directed facts `(head, relation, tail)`, but edges between
//! entity pairs are treated as bidirectional: a pair is connected when a
//! triple exists in either direction. The adjacency index is keyed by the
//! unordered pair so one lookup serves both query orders; the original
//! direction is kept on each witness for provenance.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Dense entity id, assigned in first-appearance order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

/// Dense relation id, assigned in first-appearance order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Which way the witnessing triple points relative to a queried pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("triple file {path}, line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unknown entity id {0}")]
    UnknownEntity(u32),
    #[error("entity label must be non-empty")]
    EmptyEntityLabel,
    #[error("relation label must be non-empty")]
    EmptyRelationLabel,
}

#[derive(Debug, Default)]
pub struct KnowledgeGraph {
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    triple_set: HashSet<Triple>,
    /// Unordered pair (min id, max id) -> witnesses. Direction is stored
    /// relative to that key order; duplicates are collapsed.
    adjacency: HashMap<(EntityId, EntityId), Vec<(RelationId, Direction)>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load a UTF-8 triple file: one `head<TAB>relation<TAB>tail` per line,
    /// no header; blank lines and lines starting with `#` are ignored.
    pub fn load_triples(path: &Path, dedupe: bool) -> Result<Self, KgError> {
        let text = std::fs::read_to_string(path).map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_triples(&text, &path.display().to_string(), dedupe)
    }

    /// The parsing behind [`KnowledgeGraph::load_triples`], usable on
    /// in-memory text.
    pub fn parse_triples(text: &str, source_name: &str, dedupe: bool) -> Result<Self, KgError> {
        let mut kg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 3 {
                return Err(KgError::Parse {
                    path: source_name.to_string(),
                    line: line_no,
                    msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            let trimmed: Vec<&str> = fields.iter().map(|f| f.trim()).collect();
            if trimmed.iter().any(|f| f.is_empty()) {
                return Err(KgError::Parse {
                    path: source_name.to_string(),
                    line: line_no,
                    msg: "empty field".to_string(),
                });
            }
            let head = kg.intern_entity(trimmed[0])?;
            let relation = kg.intern_relation(trimmed[1])?;
            let tail = kg.intern_entity(trimmed[2])?;
            kg.add_triple(head, relation, tail, dedupe);
        }
        Ok(kg)
    }

    /// Id for a surface label, minting a new one on first appearance.
    pub fn intern_entity(&mut self, surface: &str) -> Result<EntityId, KgError> {
        let surface = surface.trim();
        if surface.is_empty() {
            return Err(KgError::EmptyEntityLabel);
        }
        if let Some(&id) = self.entity_index.get(surface) {
            return Ok(id);
        }
        let id = EntityId(self.entity_labels.len() as u32);
        self.entity_labels.push(surface.to_string());
        self.entity_index.insert(surface.to_string(), id);
        Ok(id)
    }

    pub fn intern_relation(&mut self, label: &str) -> Result<RelationId, KgError> {
        let label = label.trim();
        if label.is_empty() {
            return Err(KgError::EmptyRelationLabel);
        }
        if let Some(&id) = self.relation_index.get(label) {
            return Ok(id);
        }
        let id = RelationId(self.relation_labels.len() as u32);
        self.relation_labels.push(label.to_string());
        self.relation_index.insert(label.to_string(), id);
        Ok(id)
    }

    /// Store a triple and index its pair. An exact duplicate is skipped
    /// entirely when `dedupe` is set; otherwise it repeats in the triple
    /// sequence but still indexes only once. Returns whether the sequence
    /// grew.
    pub fn add_triple(
        &mut self,
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
        dedupe: bool,
    ) -> bool {
        let triple = Triple {
            head,
            relation,
            tail,
        };
        let seen = !self.triple_set.insert(triple);
        if seen && dedupe {
            return false;
        }
        self.triples.push(triple);
        if !seen {
            let (key, dir) = if head.0 <= tail.0 {
                ((head, tail), Direction::Forward)
            } else {
                ((tail, head), Direction::Reverse)
            };
            let witnesses = self.adjacency.entry(key).or_default();
            if !witnesses.contains(&(relation, dir)) {
                witnesses.push((relation, dir));
            }
        }
        !seen || !dedupe
    }

    pub fn entity_count(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains_triple(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.triple_set.contains(&Triple {
            head,
            relation,
            tail,
        })
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id.0 as usize]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[id.0 as usize]
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relation_labels.len() as u32).map(RelationId)
    }

    pub fn lookup_entity(&self, surface: &str) -> Option<EntityId> {
        self.entity_index.get(surface.trim()).copied()
    }

    pub fn lookup_relation(&self, label: &str) -> Option<RelationId> {
        self.relation_index.get(label.trim()).copied()
    }

    fn check_entity(&self, id: EntityId) -> Result<(), KgError> {
        if (id.0 as usize) < self.entity_labels.len() {
            Ok(())
        } else {
            Err(KgError::UnknownEntity(id.0))
        }
    }

    /// All relations connecting `a` and `b` in either direction, with the
    /// direction expressed relative to the query order `(a, b)`.
    pub fn relations_between(
        &self,
        a: EntityId,
        b: EntityId,
    ) -> Result<Vec<(RelationId, Direction)>, KgError> {
        self.check_entity(a)?;
        self.check_entity(b)?;
        let (key, flipped) = if a.0 <= b.0 { ((a, b), false) } else { ((b, a), true) };
        let Some(witnesses) = self.adjacency.get(&key) else {
            return Ok(Vec::new());
        };
        Ok(witnesses
            .iter()
            .map(|&(r, d)| (r, if flipped { d.flip() } else { d }))
            .collect())
    }

    /// Every connected pair (u, v) with u drawn from `us` and v from `vs`,
    /// in input order. Pairs inside one side are never examined. Duplicate
    /// input ids are collapsed, keeping first positions.
    pub fn neighbors_between(
        &self,
        us: &[EntityId],
        vs: &[EntityId],
    ) -> Result<Vec<(EntityId, EntityId, Vec<(RelationId, Direction)>)>, KgError> {
        for &id in us.iter().chain(vs) {
            self.check_entity(id)?;
        }
        let mut out = Vec::new();
        let mut seen_u = HashSet::new();
        for &u in us {
            if !seen_u.insert(u) {
                continue;
            }
            let mut seen_v = HashSet::new();
            for &v in vs {
                if !seen_v.insert(v) {
                    continue;
                }
                let relations = self.relations_between(u, v)?;
                if !relations.is_empty() {
                    out.push((u, v, relations));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg_from(text: &str, dedupe: bool) -> KnowledgeGraph {
        KnowledgeGraph::parse_triples(text, "test", dedupe).unwrap()
    }

    #[test]
    fn single_line_file_yields_minimal_graph() {
        let kg = kg_from("SwanLake\tcomposer\tTchaikovsky", true);
        assert_eq!(kg.entity_count(), 2);
        assert_eq!(kg.relation_count(), 1);
        assert_eq!(kg.triples().len(), 1);
        assert_eq!(kg.entity_label(EntityId(0)), "SwanLake");
        assert_eq!(kg.relation_label(RelationId(0)), "composer");
    }

    #[test]
    fn dedupe_flag_controls_duplicate_storage() {
        let line = "a\tr\tb\na\tr\tb\n";
        assert_eq!(kg_from(line, true).triples().len(), 1);
        let kept = kg_from(line, false);
        assert_eq!(kept.triples().len(), 2);
        // The index never duplicates a witness.
        let ws = kept
            .relations_between(EntityId(0), EntityId(1))
            .unwrap();
        assert_eq!(ws.len(), 1);
    }

    #[test]
    fn reversed_duplicate_pair_counts_once_in_adjacency() {
        // Hand enumeration of unordered pairs: {A,B} from lines 1 and 2,
        // {A,C} from line 3 -> exactly 2 distinct pairs.
        let kg = kg_from("A\tr1\tB\nB\tr2\tA\nA\tr1\tC\n", true);
        assert_eq!(kg.adjacency.len(), 2);
        let ab = kg.relations_between(EntityId(0), EntityId(1)).unwrap();
        assert_eq!(ab.len(), 2);
    }

    #[test]
    fn ids_follow_first_appearance_order() {
        let kg = kg_from("B\tr\tA\nA\ts\tC\n", true);
        assert_eq!(kg.lookup_entity("B"), Some(EntityId(0)));
        assert_eq!(kg.lookup_entity("A"), Some(EntityId(1)));
        assert_eq!(kg.lookup_entity("C"), Some(EntityId(2)));
        assert_eq!(kg.lookup_relation("r"), Some(RelationId(0)));
        assert_eq!(kg.lookup_relation("s"), Some(RelationId(1)));
    }

    #[test]
    fn relations_between_reports_query_relative_direction() {
        let kg = kg_from("A\tcomposer\tB", true);
        let (a, b) = (EntityId(0), EntityId(1));
        assert_eq!(
            kg.relations_between(a, b).unwrap(),
            vec![(RelationId(0), Direction::Forward)]
        );
        assert_eq!(
            kg.relations_between(b, a).unwrap(),
            vec![(RelationId(0), Direction::Reverse)]
        );
    }

    #[test]
    fn reverse_triple_still_connects_the_pair() {
        let kg = kg_from("B\tcomposer\tA", true);
        let a = kg.lookup_entity("A").unwrap();
        let b = kg.lookup_entity("B").unwrap();
        assert_eq!(
            kg.relations_between(a, b).unwrap(),
            vec![(RelationId(0), Direction::Reverse)]
        );
    }

    #[test]
    fn relations_between_matches_exhaustive_scan() {
        let text = "A\tr1\tB\nA\tr2\tC\nC\tr1\tA\nB\tr3\tC\nA\tr3\tC\n";
        let kg = kg_from(text, true);
        let a = kg.lookup_entity("A").unwrap();
        let c = kg.lookup_entity("C").unwrap();
        // Oracle: scan every stored triple directly.
        let mut expected = Vec::new();
        for t in kg.triples() {
            if t.head == a && t.tail == c {
                expected.push((t.relation, Direction::Forward));
            } else if t.head == c && t.tail == a {
                expected.push((t.relation, Direction::Reverse));
            }
        }
        let mut got = kg.relations_between(a, c).unwrap();
        let key = |w: &(RelationId, Direction)| (w.0 .0, matches!(w.1, Direction::Reverse));
        got.sort_by_key(key);
        expected.sort_by_key(key);
        assert_eq!(got, expected);
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn neighbors_between_empty_when_unconnected() {
        let kg = kg_from("A\tr\tB\nC\tr\tD\n", true);
        let a = kg.lookup_entity("A").unwrap();
        let c = kg.lookup_entity("C").unwrap();
        assert!(kg.neighbors_between(&[a], &[c]).unwrap().is_empty());
    }

    #[test]
    fn neighbors_between_single_pair() {
        let kg = kg_from("SwanLake\tcomposer\tTchaikovsky", true);
        let u = kg.lookup_entity("SwanLake").unwrap();
        let v = kg.lookup_entity("Tchaikovsky").unwrap();
        let out = kg.neighbors_between(&[u], &[v]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, u);
        assert_eq!(out[0].1, v);
        assert_eq!(kg.relation_label(out[0].2[0].0), "composer");
    }

    #[test]
    fn neighbors_between_matches_double_loop_oracle() {
        let text = "\
A\tr1\tB\nB\tr2\tC\nC\tr1\tD\nD\tr3\tE\nE\tr1\tA\n\
A\tr2\tD\nB\tr3\tE\nF\tr1\tA\nC\tr2\tF\nE\tr2\tF\n";
        let kg = kg_from(text, true);
        let ids: Vec<EntityId> =
            ["A", "B", "C", "D", "E", "F"].iter().map(|s| kg.lookup_entity(s).unwrap()).collect();
        let us = vec![ids[0], ids[2], ids[4]];
        let vs = vec![ids[1], ids[3], ids[5]];
        let got = kg.neighbors_between(&us, &vs).unwrap();
        let mut expected = Vec::new();
        for &u in &us {
            for &v in &vs {
                let rels = kg.relations_between(u, v).unwrap();
                if !rels.is_empty() {
                    expected.push((u, v, rels));
                }
            }
        }
        assert_eq!(got, expected);
        assert!(!got.is_empty());
        for (u, v, _) in &got {
            assert!(us.contains(u) && vs.contains(v));
        }
    }

    #[test]
    fn neighbors_existence_is_symmetric() {
        let mut rng = crate::rng::SeededRng::new(77);
        for _ in 0..50 {
            let mut kg = KnowledgeGraph::new();
            let ents: Vec<EntityId> = (0..8)
                .map(|i| kg.intern_entity(&format!("e{i}")).unwrap())
                .collect();
            let rel = kg.intern_relation("r").unwrap();
            for _ in 0..10 {
                let h = ents[rng.index(8)];
                let t = ents[rng.index(8)];
                kg.add_triple(h, rel, t, true);
            }
            for &a in &ents {
                for &b in &ents {
                    let ab = kg.neighbors_between(&[a], &[b]).unwrap();
                    let ba = kg.neighbors_between(&[b], &[a]).unwrap();
                    assert_eq!(ab.is_empty(), ba.is_empty());
                }
            }
        }
    }

    #[test]
    fn adding_triples_never_removes_pairs() {
        let mut kg = KnowledgeGraph::new();
        let ents: Vec<EntityId> = (0..5)
            .map(|i| kg.intern_entity(&format!("e{i}")).unwrap())
            .collect();
        let rel = kg.intern_relation("r").unwrap();
        kg.add_triple(ents[0], rel, ents[1], true);
        kg.add_triple(ents[2], rel, ents[3], true);
        let before = kg.neighbors_between(&ents[..2], &ents[2..]).unwrap();
        kg.add_triple(ents[1], rel, ents[4], true);
        kg.add_triple(ents[0], rel, ents[3], true);
        let after = kg.neighbors_between(&ents[..2], &ents[2..]).unwrap();
        for pair in &before {
            assert!(after.iter().any(|p| p.0 == pair.0 && p.1 == pair.1));
        }
        assert!(after.len() > before.len());
    }

    #[test]
    fn loading_twice_gives_equal_graphs() {
        let text = "A\tr1\tB\nB\tr2\tC\nA\tr1\tC\n";
        let kg1 = kg_from(text, true);
        let kg2 = kg_from(text, true);
        assert_eq!(kg1.triples(), kg2.triples());
        assert_eq!(kg1.entity_labels, kg2.entity_labels);
        assert_eq!(kg1.relation_labels, kg2.relation_labels);
    }

    #[test]
    fn malformed_lines_name_their_line_number() {
        let err = KnowledgeGraph::parse_triples("A\tr\tB\nA\tB\n", "t", true).unwrap_err();
        match err {
            KgError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = KnowledgeGraph::parse_triples("A\t \tB\n", "t", true).unwrap_err();
        match err {
            KgError::Parse { line, msg, .. } => {
                assert_eq!(line, 1);
                assert!(msg.contains("empty field"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_blanks_and_empty_files_are_fine() {
        let kg = kg_from("# header comment\n\nA\tr\tB\n", true);
        assert_eq!(kg.triples().len(), 1);
        let empty = kg_from("", true);
        assert_eq!(empty.entity_count(), 0);
        assert_eq!(empty.triples().len(), 0);
    }

    #[test]
    fn unknown_ids_are_lookup_errors() {
        let kg = kg_from("A\tr\tB", true);
        let err = kg.relations_between(EntityId(0), EntityId(9)).unwrap_err();
        assert!(matches!(err, KgError::UnknownEntity(9)));
        let err = kg.neighbors_between(&[EntityId(7)], &[EntityId(0)]).unwrap_err();
        assert!(matches!(err, KgError::UnknownEntity(7)));
    }

    #[test]
    fn self_triples_index_under_one_key() {
        let kg = kg_from("A\tr\tA\nA\ts\tB\n", true);
        let a = kg.lookup_entity("A").unwrap();
        let ws = kg.relations_between(a, a).unwrap();
        assert_eq!(ws, vec![(RelationId(0), Direction::Forward)]);
    }
}
