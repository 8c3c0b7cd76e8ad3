//! Vocabulary-keyed embedding tables in word2vec text format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Words, their corpus frequencies, and one embedding row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    frequencies: Vec<u64>,
    matrix: Tensor,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(words: Vec<String>, frequencies: Vec<u64>, matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != words.len() {
            return Err(Error::shape("EmbeddingTable", matrix.shape(), &[words.len()]));
        }
        if frequencies.len() != words.len() {
            return Err(Error::shape(
                "EmbeddingTable frequencies",
                &[frequencies.len()],
                &[words.len()],
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {w}")));
            }
        }
        Ok(Self {
            words,
            frequencies,
            matrix,
            index,
        })
    }

    /// Frequencies implied by file order: the first word is the most frequent.
    pub fn rank_frequencies(n: usize) -> Vec<u64> {
        (0..n).map(|i| (n - i) as u64).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.lookup(token).map(|i| self.row(i))
    }

    /// Scale every row to unit L2 norm.
    pub fn normalize(&self) -> Result<Self> {
        let mut matrix = self.matrix.clone();
        for i in 0..self.len() {
            let row = matrix.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Data(format!(
                    "cannot normalize row for token {:?} (norm {norm})",
                    self.words[i]
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self { matrix, ..self.clone() })
    }

    pub fn with_frequencies(mut self, frequencies: HashMap<String, u64>) -> Self {
        for (w, f) in self.words.iter().zip(self.frequencies.iter_mut()) {
            *f = frequencies.get(w).copied().unwrap_or(0);
        }
        self
    }

    pub fn load_word2vec_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_word2vec_text(BufReader::new(file), path)
    }

    /// Parse `"<count> <dim>"` followed by `count` lines of `token v1 .. vdim`.
    pub fn read_word2vec_text(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = reader.lines().enumerate();
        let (count, dim) = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(origin, e))?;
                let mut fields = line.split_whitespace();
                let mut num = |name: &str| -> Result<usize> {
                    fields
                        .next()
                        .ok_or_else(|| parse_err(1, format!("header missing {name}")))?
                        .parse()
                        .map_err(|_| parse_err(1, format!("header {name} is not an integer")))
                };
                let count = num("count")?;
                let dim = num("dim")?;
                if fields.next().is_some() {
                    return Err(parse_err(1, "header has extra fields".into()));
                }
                (count, dim)
            }
            None => return Err(parse_err(1, "empty file".into())),
        };
        if dim == 0 {
            return Err(parse_err(1, "dimension must be positive".into()));
        }

        let mut words = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        let mut seen = HashMap::with_capacity(count);
        let mut last_line = 1;
        for (i, line) in lines {
            let lineno = i + 1;
            last_line = lineno;
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if words.len() == count {
                return Err(parse_err(lineno, format!("more rows than the {count} declared")));
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap_or_default().to_string();
            let before = data.len();
            for field in fields {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("non-numeric field {field:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, format!("non-finite value {field:?}")));
                }
                data.push(v);
            }
            if data.len() - before != dim {
                return Err(parse_err(
                    lineno,
                    format!("expected {dim} values, found {}", data.len() - before),
                ));
            }
            if seen.insert(token.clone(), lineno).is_some() {
                return Err(parse_err(lineno, format!("duplicate token {token:?}")));
            }
            words.push(token);
        }
        if words.len() != count {
            return Err(parse_err(
                last_line + 1,
                format!("header declares {count} rows, found {} before end of file", words.len()),
            ));
        }
        if count == 0 {
            return Err(parse_err(1, "table has no rows".into()));
        }
        let frequencies = Self::rank_frequencies(count);
        Self::new(words, frequencies, Tensor::from_parts(vec![count, dim], data))
    }

    /// Write in word2vec text format with round-trip float formatting.
    pub fn save_word2vec_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_word2vec_text(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_word2vec_text(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim())?;
        for (i, word) in self.words.iter().enumerate() {
            write!(w, "{word}")?;
            for v in self.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_frequencies(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (w, f) in self.words.iter().zip(&self.frequencies) {
            out.push_str(&format!("{w} {f}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Read a `"<token> <count>"` sidecar frequency file.
pub fn load_frequencies(path: impl AsRef<Path>) -> Result<HashMap<String, u64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            message,
        };
        let mut fields = line.split_whitespace();
        let (Some(token), Some(count), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err("expected \"<token> <count>\"".into()));
        };
        let count: u64 = count.parse().map_err(|_| err(format!("non-integer count {count:?}")))?;
        if out.insert(token.to_string(), count).is_some() {
            return Err(err(format!("duplicate token {token:?}")));
        }
    }
    Ok(out)
}

/// Load a table, replacing rank-implied frequencies with a sidecar when given.
pub fn load_table(path: &Path, frequencies: Option<&Path>) -> Result<EmbeddingTable> {
    let table = EmbeddingTable::load_word2vec_text(path)?;
    match frequencies {
        Some(f) => Ok(table.with_frequencies(load_frequencies(f)?)),
        None => Ok(table),
    }
}

/// Paired (speech row, text row) indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dictionary {
    pairs: Vec<(usize, usize)>,
}

/// Which table a dictionary column refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Speech,
    Text,
}

impl Dictionary {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &pairs {
            if !seen.insert(*p) {
                return Err(Error::Data(format!("duplicate dictionary pair {p:?}")));
            }
        }
        Ok(Self { pairs })
    }

    /// Pair every shared token, in speech-table order.
    pub fn shared_tokens(speech: &EmbeddingTable, text: &EmbeddingTable) -> Self {
        let pairs = speech
            .words()
            .iter()
            .enumerate()
            .filter_map(|(i, w)| text.lookup(w).map(|j| (i, j)))
            .collect();
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First `n` pairs and the remainder.
    pub fn split_at(&self, n: usize) -> (Dictionary, Dictionary) {
        let n = n.min(self.pairs.len());
        (
            Dictionary {
                pairs: self.pairs[..n].to_vec(),
            },
            Dictionary {
                pairs: self.pairs[n..].to_vec(),
            },
        )
    }
}

/// Result of building the frequent-word dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyDictionary {
    pub dictionary: Dictionary,
    /// How many pairs short of the requested `k` the shared vocabulary fell.
    pub shortfall: usize,
}

/// The `k` most frequent tokens present in both vocabularies, paired by
/// identical token. A shared token's frequency is the smaller of its two
/// counts; ties break lexicographically.
pub fn build_frequency_dictionary(
    speech: &EmbeddingTable,
    text: &EmbeddingTable,
    k: usize,
) -> Result<FrequencyDictionary> {
    if k == 0 {
        return Err(Error::Argument("dictionary size k must be ≥ 1".into()));
    }
    let mut shared: Vec<(u64, &str, usize, usize)> = speech
        .words()
        .iter()
        .enumerate()
        .filter_map(|(i, w)| {
            text.lookup(w).map(|j| {
                let f = speech.frequencies()[i].min(text.frequencies()[j]);
                (f, w.as_str(), i, j)
            })
        })
        .collect();
    shared.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let shortfall = k.saturating_sub(shared.len());
    if shortfall > 0 {
        log::warn!("only {} shared tokens for a requested dictionary of {k}", shared.len());
    }
    let pairs = shared.into_iter().take(k).map(|(_, _, i, j)| (i, j)).collect();
    Ok(FrequencyDictionary {
        dictionary: Dictionary { pairs },
        shortfall,
    })
}

/// Rows of `table` selected by one side of `dictionary`, in dictionary order.
pub fn gather(table: &EmbeddingTable, dictionary: &Dictionary, side: Side) -> Result<Tensor> {
    if dictionary.is_empty() {
        return Err(Error::Argument("cannot gather from an empty dictionary".into()));
    }
    let d = table.dim();
    let mut data = Vec::with_capacity(dictionary.len() * d);
    for &(s, t) in dictionary.pairs() {
        let i = match side {
            Side::Speech => s,
            Side::Text => t,
        };
        if i >= table.len() {
            return Err(Error::Data(format!(
                "dictionary index {i} out of range for table of {}",
                table.len()
            )));
        }
        data.extend_from_slice(table.row(i));
    }
    Ok(Tensor::from_parts(vec![dictionary.len(), d], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<EmbeddingTable> {
        EmbeddingTable::read_word2vec_text(text.as_bytes(), Path::new("mem"))
    }

    fn table(words: &[&str], freqs: &[u64], rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable::new(
            words.iter().map(|s| s.to_string()).collect(),
            freqs.to_vec(),
            Tensor::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn parses_small_table() {
        let t = parse("2 3\napple 1 0 0\nbanana 0 1 0\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 3);
        assert_eq!(t.vector("banana").unwrap(), &[0.0, 1.0, 0.0]);
        assert_eq!(t.frequencies(), &[2, 1]);
    }

    #[test]
    fn short_file_errors_at_eof() {
        match parse("3 2\na 1 2\nb 3 4\n") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("declares 3"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let line_of = |text: &str| match parse(text) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("{other:?}"),
        };
        assert_eq!(line_of("2 2\na 1 2\nb 1 x\n"), 3);
        assert_eq!(line_of("2 2\na 1 2\na 3 4\n"), 3);
        assert_eq!(line_of("2 2\na 1 2 3\nb 3 4\n"), 2);
        assert_eq!(line_of("two 2\n"), 1);
    }

    #[test]
    fn normalize_scales_rows() {
        let t = table(&["a", "b"], &[1, 1], &[vec![3.0, 4.0], vec![0.0, 1.0]]);
        let n = t.normalize().unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15 && (n.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[0.0, 1.0]);
        let twice = n.normalize().unwrap();
        for (a, b) in twice.matrix().data().iter().zip(n.matrix().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_names_zero_row() {
        let t = table(&["a", "zero"], &[1, 1], &[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let msg = t.normalize().unwrap_err().to_string();
        assert!(msg.contains("zero"), "{msg}");
    }

    #[test]
    fn disjoint_vocabularies_give_empty_dictionary() {
        let s = table(&["a"], &[1], &[vec![1.0]]);
        let t = table(&["b"], &[1], &[vec![1.0]]);
        let d = build_frequency_dictionary(&s, &t, 3).unwrap();
        assert!(d.dictionary.is_empty());
        assert_eq!(d.shortfall, 3);
    }

    #[test]
    fn identical_vocabularies_pair_everything() {
        let s = table(&["a", "b", "c"], &[3, 2, 1], &[vec![1.0], vec![2.0], vec![3.0]]);
        let d = build_frequency_dictionary(&s, &s, 3).unwrap();
        assert_eq!(d.dictionary.pairs(), &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(d.shortfall, 0);
    }

    #[test]
    fn picks_most_frequent_shared_tokens() {
        let s = table(&["c", "b", "a"], &[1, 5, 10], &[vec![1.0], vec![2.0], vec![3.0]]);
        let t = table(&["a", "x", "b", "c"], &[10, 99, 5, 1], &vec![vec![1.0]; 4]);
        let d = build_frequency_dictionary(&s, &t, 2).unwrap();
        // Sort oracle: shared {a:10, b:5, c:1} → a, b.
        assert_eq!(d.dictionary.pairs(), &[(2, 0), (1, 2)]);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let s = table(&["z", "m", "a"], &[4, 4, 4], &vec![vec![1.0]; 3]);
        let d = build_frequency_dictionary(&s, &s, 2).unwrap();
        assert_eq!(d.dictionary.pairs(), &[(2, 2), (1, 1)]);
    }

    #[test]
    fn gather_rows() {
        let s = table(
            &["a", "b", "c"],
            &[3, 2, 1],
            &[vec![1.0, 0.0], vec![2.0, 0.5], vec![3.0, 1.0]],
        );
        let single = Dictionary::new(vec![(1, 1)]).unwrap();
        assert_eq!(gather(&s, &single, Side::Speech).unwrap().data(), &[2.0, 0.5]);
        let full = Dictionary::new(vec![(0, 0), (1, 1), (2, 2)]).unwrap();
        assert_eq!(&gather(&s, &full, Side::Text).unwrap(), s.matrix());
        let perm = Dictionary::new(vec![(2, 0), (0, 1), (1, 2)]).unwrap();
        let g = gather(&s, &perm, Side::Speech).unwrap();
        for (r, &(i, _)) in perm.pairs().iter().enumerate() {
            assert_eq!(g.row(r), s.row(i));
        }
        assert!(gather(&s, &Dictionary::default(), Side::Speech).is_err());
        let bad = Dictionary::new(vec![(7, 0)]).unwrap();
        assert!(gather(&s, &bad, Side::Speech).is_err());
    }

    #[test]
    fn sidecar_frequencies_override_rank() {
        let dir = tempfile::tempdir().unwrap();
        let vec_path = dir.path().join("t.vec");
        let freq_path = dir.path().join("t.freq");
        std::fs::write(&vec_path, "2 1\na 1\nb 2\n").unwrap();
        std::fs::write(&freq_path, "a 3\nb 40\n").unwrap();
        let t = load_table(&vec_path, Some(&freq_path)).unwrap();
        assert_eq!(t.frequencies(), &[3, 40]);
    }

    proptest! {
        #[test]
        fn save_load_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..8)) {
            let words: Vec<String> = (0..rows.len()).map(|i| format!("w{i}")).collect();
            let t = EmbeddingTable::new(
                words,
                EmbeddingTable::rank_frequencies(rows.len()),
                Tensor::from_rows(&rows).unwrap(),
            ).unwrap();
            let mut buf = Vec::new();
            t.write_word2vec_text(&mut buf).unwrap();
            let back = EmbeddingTable::read_word2vec_text(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.words(), t.words());
            for (a, b) in back.matrix().data().iter().zip(t.matrix().data()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }

        #[test]
        fn dictionary_size_bounded(k in 1usize..10, n_shared in 0usize..6) {
            let s_words: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
            let mut t_words: Vec<String> = (0..n_shared).map(|i| format!("s{i}")).collect();
            t_words.extend((0..3).map(|i| format!("t{i}")));
            let mk = |w: Vec<String>| {
                let n = w.len();
                EmbeddingTable::new(w, EmbeddingTable::rank_frequencies(n), Tensor::full(&[n, 2], 1.0)).unwrap()
            };
            let d = build_frequency_dictionary(&mk(s_words), &mk(t_words), k).unwrap();
            prop_assert!(d.dictionary.len() <= k);
            prop_assert!(d.dictionary.len() <= n_shared);
        }
    }
}
