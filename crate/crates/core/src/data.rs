//! Triple stores, vocabularies, entity categories and the filtered-ranking index.
//!
//! Triple files are UTF-8 TSV with exactly three fields per line
//! (`head\trelation\ttail`). Category files are `entity\tcategory`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{KgError, Result};

/// One `(head, relation, tail)` fact with dense ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Bijective name <-> dense id maps for entities and relations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    entities: Vec<String>,
    entity_index: HashMap<String, usize>,
    relations: Vec<String>,
    relation_index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> Option<&str> {
        self.entities.get(id).map(String::as_str)
    }

    pub fn relation_name(&self, id: usize) -> Option<&str> {
        self.relations.get(id).map(String::as_str)
    }

    /// Returns the id for `name`, assigning the next free id on first sight.
    pub fn intern_entity(&mut self, name: &str) -> usize {
        intern(&mut self.entities, &mut self.entity_index, name)
    }

    pub fn intern_relation(&mut self, name: &str) -> usize {
        intern(&mut self.relations, &mut self.relation_index, name)
    }
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, name: &str) -> usize {
    if let Some(&id) = index.get(name) {
        return id;
    }
    let id = names.len();
    names.push(name.to_owned());
    index.insert(name.to_owned(), id);
    id
}

/// How names missing from a supplied vocabulary are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabMode {
    /// Unknown names get fresh ids.
    Extend,
    /// Unknown names are a lookup error.
    Strict,
}

/// Result of reading one triple file.
#[derive(Clone, Debug)]
pub struct LoadedTriples {
    pub triples: Vec<Triple>,
    pub vocab: Vocab,
    /// Number of lines repeating an earlier triple of the same file.
    pub duplicates: usize,
}

/// Reads a triple TSV file. Ids follow first appearance; duplicates are kept and counted.
pub fn load_triples(path: &Path, vocab: Option<Vocab>, mode: VocabMode) -> Result<LoadedTriples> {
    let file = fs::File::open(path).map_err(|e| KgError::io(path, e))?;
    parse_triples(file, &path.display().to_string(), vocab, mode)
}

pub fn parse_triples<R: Read>(
    reader: R,
    source: &str,
    vocab: Option<Vocab>,
    mode: VocabMode,
) -> Result<LoadedTriples> {
    let mut vocab = vocab.unwrap_or_default();
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicates = 0;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| KgError::Parse {
            path: source.to_owned(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse {
                path: source.to_owned(),
                line: lineno,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (h, r, t) = match mode {
            VocabMode::Extend => (
                vocab.intern_entity(fields[0]),
                vocab.intern_relation(fields[1]),
                vocab.intern_entity(fields[2]),
            ),
            VocabMode::Strict => (
                lookup(vocab.entity_id(fields[0]), "entity", fields[0], lineno)?,
                lookup(vocab.relation_id(fields[1]), "relation", fields[1], lineno)?,
                lookup(vocab.entity_id(fields[2]), "entity", fields[2], lineno)?,
            ),
        };
        let triple = Triple::new(h, r, t);
        if !seen.insert(triple) {
            duplicates += 1;
        }
        triples.push(triple);
    }
    if duplicates > 0 {
        warn!("{source}: {duplicates} duplicate triple(s) kept");
    }
    Ok(LoadedTriples {
        triples,
        vocab,
        duplicates,
    })
}

fn lookup(id: Option<usize>, what: &'static str, name: &str, line: usize) -> Result<usize> {
    id.ok_or_else(|| KgError::UnknownName {
        what,
        name: name.to_owned(),
        line,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Train/valid/test splits over one vocabulary.
///
/// When `reciprocal` is set, relation `r + base` is the inverse of `r`, where
/// `base` is the vocabulary's relation count.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleStore {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub vocab: Vocab,
    reciprocal: bool,
}

impl TripleStore {
    pub fn new(train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>, vocab: Vocab) -> Result<Self> {
        let store = TripleStore {
            train,
            valid,
            test,
            vocab,
            reciprocal: false,
        };
        store.check_ids()?;
        Ok(store)
    }

    /// Loads three split files sharing one vocabulary (valid/test may add names).
    pub fn load(train: &Path, valid: &Path, test: &Path) -> Result<Self> {
        let tr = load_triples(train, None, VocabMode::Extend)?;
        let va = load_triples(valid, Some(tr.vocab), VocabMode::Extend)?;
        let te = load_triples(test, Some(va.vocab), VocabMode::Extend)?;
        TripleStore::new(tr.triples, va.triples, te.triples, te.vocab)
    }

    fn check_ids(&self) -> Result<()> {
        let ne = self.n_entities();
        let nr = self.n_relations();
        for t in self.all() {
            if t.head >= ne || t.tail >= ne {
                return Err(KgError::Index {
                    what: "entity",
                    id: t.head.max(t.tail),
                    size: ne,
                });
            }
            if t.relation >= nr {
                return Err(KgError::Index {
                    what: "relation",
                    id: t.relation,
                    size: nr,
                });
            }
        }
        Ok(())
    }

    pub fn is_reciprocal(&self) -> bool {
        self.reciprocal
    }

    pub fn n_entities(&self) -> usize {
        self.vocab.n_entities()
    }

    /// Relation count seen by models (doubled after reciprocal augmentation).
    pub fn n_relations(&self) -> usize {
        if self.reciprocal {
            2 * self.vocab.n_relations()
        } else {
            self.vocab.n_relations()
        }
    }

    pub fn n_base_relations(&self) -> usize {
        self.vocab.n_relations()
    }

    /// Inverse relation id, if the store is reciprocal.
    pub fn inverse_relation(&self, r: usize) -> Option<usize> {
        if !self.reciprocal {
            return None;
        }
        let base = self.n_base_relations();
        Some(if r < base { r + base } else { r - base })
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Adds `(t, r + |R|, h)` for every `(h, r, t)` in each split.
    pub fn add_reciprocals(mut self) -> Result<Self> {
        if self.reciprocal {
            return Err(KgError::Config("reciprocal relations already added".into()));
        }
        let base = self.n_base_relations();
        for split in [&mut self.train, &mut self.valid, &mut self.test] {
            let inverse: Vec<Triple> = split
                .iter()
                .map(|t| Triple::new(t.tail, t.relation + base, t.head))
                .collect();
            split.extend(inverse);
        }
        self.reciprocal = true;
        Ok(self)
    }

    /// Writes one split as TSV using vocabulary names. Inverse relations are
    /// written with a `_reverse` suffix.
    pub fn write_split(&self, split: Split, path: &Path) -> Result<()> {
        let base = self.n_base_relations();
        let mut out = String::new();
        for t in self.split(split) {
            let (rel, suffix) = if t.relation >= base {
                (t.relation - base, "_reverse")
            } else {
                (t.relation, "")
            };
            out.push_str(self.vocab.entity_name(t.head).unwrap_or_default());
            out.push('\t');
            out.push_str(self.vocab.relation_name(rel).unwrap_or_default());
            out.push_str(suffix);
            out.push('\t');
            out.push_str(self.vocab.entity_name(t.tail).unwrap_or_default());
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| KgError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| KgError::io(path, e))?;
    f.write_all(bytes).map_err(|e| KgError::io(path, e))
}

/// For every `(head, relation)` the set of tails known true in any split.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    true_tails: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    pub fn build(store: &TripleStore) -> Self {
        Self::from_triples(store.all())
    }

    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in triples {
            map.entry((t.head, t.relation)).or_default().push(t.tail);
        }
        for tails in map.values_mut() {
            tails.sort_unstable();
            tails.dedup();
        }
        FilterIndex { true_tails: map }
    }

    /// Sorted, deduplicated tails for `(h, r)`; empty when unseen.
    pub fn true_tails(&self, head: usize, relation: usize) -> &[usize] {
        self.true_tails
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.true_tails(t.head, t.relation).binary_search(&t.tail).is_ok()
    }
}

/// Partial entity -> category labelling with dense category ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryMap {
    category_of: Vec<Option<usize>>,
    names: Vec<String>,
}

impl CategoryMap {
    pub fn new(n_entities: usize) -> Self {
        CategoryMap {
            category_of: vec![None; n_entities],
            names: Vec::new(),
        }
    }

    /// Builds a map from explicit labels; category ids must be dense.
    pub fn from_labels(labels: Vec<Option<usize>>, n_categories: usize) -> Self {
        CategoryMap {
            category_of: labels,
            names: (0..n_categories).map(|c| format!("c{c}")).collect(),
        }
    }

    /// `None` means unlabeled; there is no default category.
    pub fn category(&self, entity: usize) -> Option<usize> {
        self.category_of.get(entity).copied().flatten()
    }

    pub fn category_name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn n_categories(&self) -> usize {
        self.names.len()
    }

    pub fn n_entities(&self) -> usize {
        self.category_of.len()
    }

    pub fn coverage(&self) -> f64 {
        if self.category_of.is_empty() {
            return 0.0;
        }
        let labeled = self.category_of.iter().filter(|c| c.is_some()).count();
        labeled as f64 / self.category_of.len() as f64
    }

    fn assign(&mut self, entity: usize, category: &str) -> bool {
        let cid = match self.names.iter().position(|n| n == category) {
            Some(c) => c,
            None => {
                self.names.push(category.to_owned());
                self.names.len() - 1
            }
        };
        let prev = self.category_of[entity].replace(cid);
        matches!(prev, Some(p) if p != cid)
    }

    pub fn write(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (e, c) in self.category_of.iter().enumerate() {
            if let (Some(c), Some(name)) = (c, vocab.entity_name(e)) {
                out.push_str(name);
                out.push('\t');
                out.push_str(&self.names[*c]);
                out.push('\n');
            }
        }
        write_file(path, out.as_bytes())
    }
}

/// Counters reported by [`load_categories`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryWarnings {
    pub unknown_entities: usize,
    pub relabeled: usize,
}

pub fn load_categories(path: &Path, vocab: &Vocab) -> Result<(CategoryMap, CategoryWarnings)> {
    let file = fs::File::open(path).map_err(|e| KgError::io(path, e))?;
    parse_categories(file, &path.display().to_string(), vocab)
}

/// Unknown entities are skipped; a relabelled entity keeps the last category.
pub fn parse_categories<R: Read>(
    reader: R,
    source: &str,
    vocab: &Vocab,
) -> Result<(CategoryMap, CategoryWarnings)> {
    let mut map = CategoryMap::new(vocab.n_entities());
    let mut warnings = CategoryWarnings::default();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| KgError::Parse {
            path: source.to_owned(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(KgError::Parse {
                path: source.to_owned(),
                line: lineno,
                msg: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        match vocab.entity_id(fields[0]) {
            Some(e) => {
                if map.assign(e, fields[1]) {
                    warnings.relabeled += 1;
                }
            }
            None => warnings.unknown_entities += 1,
        }
    }
    if warnings.unknown_entities > 0 {
        warn!("{source}: skipped {} unknown entities", warnings.unknown_entities);
    }
    if warnings.relabeled > 0 {
        warn!("{source}: {} entities relabeled (last label wins)", warnings.relabeled);
    }
    Ok((map, warnings))
}

/// Adjacency over the training split: `head -> [(relation, tail)]`, in file order.
pub(crate) fn outgoing(triples: &[Triple]) -> BTreeMap<usize, Vec<(usize, usize)>> {
    let mut adj: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for t in triples {
        adj.entry(t.head).or_default().push((t.relation, t.tail));
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> LoadedTriples {
        parse_triples(text.as_bytes(), "mem", None, VocabMode::Extend).unwrap()
    }

    #[test]
    fn four_line_file_counts() {
        let loaded = parse("a\tr\tb\na\tr\tb\nc\tr\tb\na\ts\tc\n");
        assert_eq!(loaded.triples.len(), 4);
        assert_eq!(loaded.duplicates, 1);
        assert_eq!(loaded.vocab.n_entities(), 3);
        assert_eq!(loaded.vocab.n_relations(), 2);
        assert_eq!(loaded.vocab.entity_id("a"), Some(0));
        assert_eq!(loaded.vocab.entity_id("b"), Some(1));
        assert_eq!(loaded.vocab.entity_id("c"), Some(2));
    }

    #[test]
    fn empty_file_is_empty_store() {
        let loaded = parse("");
        assert!(loaded.triples.is_empty());
        assert_eq!(loaded.duplicates, 0);
        assert_eq!(loaded.vocab.n_entities(), 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_triples("a\tr\tb\na\tr\n".as_bytes(), "f.tsv", None, VocabMode::Extend)
            .unwrap_err();
        match err {
            KgError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strict_vocab_rejects_unknown_entity() {
        let base = parse("a\tr\tb\n").vocab;
        let err = parse_triples("a\tr\tz\n".as_bytes(), "f", Some(base), VocabMode::Strict).unwrap_err();
        assert!(matches!(err, KgError::UnknownName { what: "entity", .. }));
    }

    #[test]
    fn reciprocal_doubles_and_rejects_second_application() {
        let loaded = parse("a\tr\tb\n");
        let mut vocab = loaded.vocab;
        vocab.intern_relation("s");
        let store = TripleStore::new(loaded.triples, vec![], vec![], vocab).unwrap();
        let store = store.add_reciprocals().unwrap();
        assert_eq!(store.train.len(), 2);
        assert_eq!(store.n_relations(), 4);
        assert_eq!(store.train[1], Triple::new(1, 2, 0));
        assert_eq!(store.inverse_relation(2), Some(0));
        assert!(store.add_reciprocals().is_err());
    }

    #[test]
    fn reciprocal_of_inverses_recovers_originals() {
        let loaded = parse("a\tr\tb\nb\ts\tc\n");
        let store = TripleStore::new(loaded.triples.clone(), vec![], vec![], loaded.vocab)
            .unwrap()
            .add_reciprocals()
            .unwrap();
        let base = store.n_base_relations();
        let inverses = &store.train[loaded.triples.len()..];
        for (orig, inv) in loaded.triples.iter().zip(inverses) {
            let back = Triple::new(inv.tail, inv.relation - base, inv.head);
            assert_eq!(&back, orig);
        }
    }

    #[test]
    fn filter_index_union() {
        let v = parse("a\tr\tb\na\tr\tc\n");
        let store = TripleStore::new(vec![v.triples[0]], vec![v.triples[1]], vec![], v.vocab).unwrap();
        let idx = FilterIndex::build(&store);
        assert_eq!(idx.true_tails(0, 0), &[1, 2]);
        assert!(idx.true_tails(1, 0).is_empty());
    }

    #[test]
    fn filter_index_reciprocal_answers_head_queries() {
        let v = parse("a\tr\tb\nc\tr\tb\n");
        let store = TripleStore::new(v.triples, vec![], vec![], v.vocab)
            .unwrap()
            .add_reciprocals()
            .unwrap();
        let idx = FilterIndex::build(&store);
        // heads of (?, r, b) are the tails of (b, r^-1, ?)
        assert_eq!(idx.true_tails(1, 1), &[0, 2]);
    }

    #[test]
    fn categories_coverage_and_relabel() {
        let v = parse("a\tr\tb\nc\tr\td\ne\tr\ta\n").vocab;
        let (map, w) = parse_categories("a\tx\nb\ty\nc\tx\nzz\tx\n".as_bytes(), "c", &v).unwrap();
        assert!((map.coverage() - 0.6).abs() < 1e-12);
        assert_eq!(w.unknown_entities, 1);
        assert_eq!(map.category(v.entity_id("d").unwrap()), None);
        assert_eq!(map.n_categories(), 2);

        let (map, w) = parse_categories("a\tx\na\ty\n".as_bytes(), "c", &v).unwrap();
        assert_eq!(w.relabeled, 1);
        assert_eq!(map.category(0), Some(1));
    }

    #[test]
    fn empty_category_file() {
        let v = parse("a\tr\tb\n").vocab;
        let (map, _) = parse_categories("".as_bytes(), "c", &v).unwrap();
        assert_eq!(map.coverage(), 0.0);
        assert_eq!(map.category(0), None);
        assert_eq!(map.category(1), None);
    }

    #[test]
    fn malformed_category_line() {
        let v = parse("a\tr\tb\n").vocab;
        assert!(matches!(
            parse_categories("a\tx\ty\n".as_bytes(), "c", &v),
            Err(KgError::Parse { line: 1, .. })
        ));
    }
}
