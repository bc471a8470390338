//! Text formats for embeddings, lexicons, maps and synthetic ground truth.
//!
//! Embedding files start with a `n d` header followed by `n` lines of
//! `word v1 .. vd`. A Gaussian embedding is a pair of such files with the
//! same words: one for means, one for diagonal variances. Values are written
//! with 17 significant digits so that a save/load cycle is exact.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::evalkit::Lexicon;
use crate::geometry::{GaussianCloud, OrthogonalMap, PointCloud};
use crate::transport::Matching;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Numbered lines, skipping blank ones.
fn content_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>> + '_> {
    let reader = open(path)?;
    Ok(reader
        .lines()
        .enumerate()
        .map(move |(k, line)| line.map(|l| (k + 1, l)).map_err(|e| Error::io(path, e)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty())))
}

fn parse_value(path: &Path, line: usize, token: &str) -> Result<f64> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::parse(path, line, format!("'{token}' is not a finite number"))),
    }
}

fn parse_count(path: &Path, line: usize, token: Option<&str>, what: &str) -> Result<usize> {
    let token = token.ok_or_else(|| Error::parse(path, line, format!("header is missing the {what}")))?;
    token
        .parse()
        .map_err(|_| Error::parse(path, line, format!("header {what} '{token}' is not a count")))
}

fn write_value(out: &mut impl Write, v: f64) -> std::io::Result<()> {
    write!(out, "{v:.16e}")
}

/// Reads the first `max_words` records (all if `None`), preserving order.
pub fn load_point_embeddings(path: impl AsRef<Path>, max_words: Option<usize>) -> Result<(Vec<String>, PointCloud)> {
    let path = path.as_ref();
    let mut lines = content_lines(path)?;
    let (hline, header) = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::parse(path, 1, "empty file, expected an 'n d' header"))?;
    let mut tokens = header.split_whitespace();
    let n = parse_count(path, hline, tokens.next(), "word count")?;
    let d = parse_count(path, hline, tokens.next(), "dimension")?;
    if tokens.next().is_some() {
        return Err(Error::parse(path, hline, "header must be exactly 'n d'"));
    }
    if d == 0 {
        return Err(Error::parse(path, hline, "dimension must be positive"));
    }
    let take = max_words.map_or(n, |k| k.min(n));

    let mut words = Vec::with_capacity(take);
    let mut seen = HashSet::with_capacity(take);
    let mut values = Vec::with_capacity(take * d);
    let mut last_line = hline;
    for _ in 0..take {
        let Some((line, text)) = lines.next().transpose()? else {
            return Err(Error::parse(
                path,
                last_line + 1,
                format!("header announces {n} records but the file ends after {}", words.len()),
            ));
        };
        last_line = line;
        let mut tokens = text.split_whitespace();
        let word = tokens.next().expect("non-blank line has a token").to_owned();
        let start = values.len();
        for token in tokens {
            values.push(parse_value(path, line, token)?);
        }
        let got = values.len() - start;
        if got != d {
            return Err(Error::parse(path, line, format!("record '{word}' has {got} values, expected {d}")));
        }
        if !seen.insert(word.clone()) {
            return Err(Error::parse(path, line, format!("duplicate word '{word}'")));
        }
        words.push(word);
    }
    if max_words.is_none() {
        if let Some((line, _)) = lines.next().transpose()? {
            return Err(Error::parse(path, line, format!("more records than the {n} announced in the header")));
        }
    }
    let cloud = PointCloud::new(DMatrix::from_row_slice(take, d, &values))?;
    Ok((words, cloud))
}

pub fn save_point_embeddings<S: AsRef<str>>(path: impl AsRef<Path>, words: &[S], values: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let (n, d) = values.shape();
    if words.len() != n {
        return Err(Error::InvalidInput(format!("{} words for {n} rows", words.len())));
    }
    if let Some(bad) = words.iter().map(AsRef::as_ref).find(|w| w.is_empty() || w.contains(char::is_whitespace)) {
        return Err(Error::InvalidInput(format!("word '{bad}' is empty or contains whitespace")));
    }
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{n} {d}")?;
        for (word, row) in words.iter().zip(values.row_iter()) {
            out.write_all(word.as_ref().as_bytes())?;
            for &v in row.iter() {
                out.write_all(b" ")?;
                write_value(&mut out, v)?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Loads parallel mean and variance files that must list the same words in
/// the same order.
pub fn load_gaussian_embeddings(
    mean_path: impl AsRef<Path>,
    var_path: impl AsRef<Path>,
    max_words: Option<usize>,
) -> Result<(Vec<String>, GaussianCloud)> {
    let (mean_path, var_path) = (mean_path.as_ref(), var_path.as_ref());
    let (words, means) = load_point_embeddings(mean_path, max_words)?;
    let (var_words, vars) = load_point_embeddings(var_path, max_words)?;
    if let Some(pos) = (0..words.len().max(var_words.len())).find(|&i| words.get(i) != var_words.get(i)) {
        let show = |w: Option<&String>| w.map_or("<end of file>".to_owned(), |w| format!("'{w}'"));
        return Err(Error::Consistency(format!(
            "word lists diverge at position {pos}: {} has {}, {} has {}",
            mean_path.display(),
            show(words.get(pos)),
            var_path.display(),
            show(var_words.get(pos))
        )));
    }
    if means.dim() != vars.dim() {
        return Err(Error::Consistency(format!(
            "means have dimension {} but variances have dimension {}",
            means.dim(),
            vars.dim()
        )));
    }
    let v = vars.into_matrix();
    for (i, row) in v.row_iter().enumerate() {
        if let Some((k, &val)) = row.iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(Error::Validation(format!(
                "variance of '{}' in dimension {k} is {val}, must be positive",
                words[i]
            )));
        }
    }
    Ok((words, GaussianCloud::new(means, v)?))
}

pub fn save_gaussian_embeddings<S: AsRef<str>>(
    mean_path: impl AsRef<Path>,
    var_path: impl AsRef<Path>,
    words: &[S],
    cloud: &GaussianCloud,
) -> Result<()> {
    save_point_embeddings(mean_path, words, cloud.means().as_matrix())?;
    save_point_embeddings(var_path, words, cloud.variances())
}

/// One `source target` pair per line.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon> {
    let path = path.as_ref();
    let mut pairs = Vec::new();
    for item in content_lines(path)? {
        let (line, text) = item?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let [s, t] = tokens[..] else {
            return Err(Error::parse(
                path,
                line,
                format!("expected 'source target', found {} tokens", tokens.len()),
            ));
        };
        pairs.push((s.to_owned(), t.to_owned()));
    }
    Lexicon::from_pairs(pairs)
}

pub fn save_lexicon(path: impl AsRef<Path>, lexicon: &Lexicon) -> Result<()> {
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for (s, t) in lexicon.pairs() {
            writeln!(out, "{s} {t}")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

fn write_matrix(out: &mut impl Write, m: &DMatrix<f64>) -> std::io::Result<()> {
    for row in m.row_iter() {
        for (k, &v) in row.iter().enumerate() {
            if k > 0 {
                out.write_all(b" ")?;
            }
            write_value(out, v)?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_matrix_rows(path: &Path, rows: &[(usize, String)]) -> Result<OrthogonalMap> {
    let d = rows.len();
    let mut values = Vec::with_capacity(d * d);
    for (line, text) in rows {
        let start = values.len();
        for token in text.split_whitespace() {
            values.push(parse_value(path, *line, token)?);
        }
        if values.len() - start != d {
            return Err(Error::parse(
                path,
                *line,
                format!("map row has {} values, expected {d}", values.len() - start),
            ));
        }
    }
    OrthogonalMap::new(DMatrix::from_row_slice(d, d, &values)).map_err(|e| match e {
        Error::Validation(msg) | Error::InvalidInput(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes `d` lines of `d` numbers.
pub fn save_map(path: impl AsRef<Path>, map: &OrthogonalMap) -> Result<()> {
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write_matrix(&mut out, map.matrix())?;
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<OrthogonalMap> {
    let path = path.as_ref();
    let rows: Vec<(usize, String)> = content_lines(path)?.collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::parse(path, 1, "empty map file"));
    }
    parse_matrix_rows(path, &rows)
}

/// Ground truth of a synthetic pair: the `d x d` map, then one
/// `source_index target_index` line per source row.
pub fn save_truth(path: impl AsRef<Path>, map: &OrthogonalMap, matching: &Matching) -> Result<()> {
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write_matrix(&mut out, map.matrix())?;
        for (i, j) in matching.target_of().iter().enumerate() {
            writeln!(out, "{i} {j}")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// The map block is recognised by its first line: a line of `d` numbers
/// introduces `d` map rows.
pub fn load_truth(path: impl AsRef<Path>) -> Result<(OrthogonalMap, Matching)> {
    let path = path.as_ref();
    let rows: Vec<(usize, String)> = content_lines(path)?.collect::<Result<_>>()?;
    let d = rows
        .first()
        .map(|(_, l)| l.split_whitespace().count())
        .ok_or_else(|| Error::parse(path, 1, "empty truth file"))?;
    if rows.len() < d {
        return Err(Error::parse(path, rows.len() + 1, format!("truncated {d}x{d} map block")));
    }
    let map = parse_matrix_rows(path, &rows[..d])?;
    let mut target_of = Vec::with_capacity(rows.len() - d);
    for (line, text) in &rows[d..] {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let parsed = match tokens[..] {
            [i, j] => i.parse::<usize>().ok().zip(j.parse::<usize>().ok()),
            _ => None,
        };
        match parsed {
            Some((i, j)) if i == target_of.len() => target_of.push(j),
            Some((i, _)) => {
                return Err(Error::parse(path, *line, format!("expected source index {}, found {i}", target_of.len())))
            }
            None => return Err(Error::parse(path, *line, "expected 'source_index target_index'")),
        }
    }
    let n = target_of.len();
    let matching = Matching::new(target_of, n).map_err(|e| Error::parse(path, d + 1, e.to_string()))?;
    Ok((map, matching))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_orthogonal;
    use crate::synthgen::{generate, VarianceMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_small_point_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.vec", "2 3\na 1 0 0\nb 0 1 0\n");
        let (words, cloud) = load_point_embeddings(&p, None).unwrap();
        assert_eq!(words, ["a", "b"]);
        assert_eq!(cloud.as_matrix(), &nalgebra::dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0]);
        let (words, cloud) = load_point_embeddings(&p, Some(1)).unwrap();
        assert_eq!((words.len(), cloud.nrows(), cloud.dim()), (1, 1, 3));
    }

    #[test]
    fn short_record_is_parse_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.vec", "2 3\na 1 0 0\nb 0 1\n");
        let err = load_point_embeddings(&p, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("'b'"));
    }

    #[test]
    fn malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        for (body, line) in [
            ("", 1),
            ("x 3\n", 1),
            ("2\n", 1),
            ("1 2\na 1 nan\n", 2),
            ("2 2\na 1 2\na 3 4\n", 3),
            ("2 2\na 1 2\n", 3),
            ("1 2\na 1 2\nb 3 4\n", 3),
        ] {
            let p = write(&dir, "bad.vec", body);
            match load_point_embeddings(&p, None) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{body:?}"),
                other => panic!("{body:?}: {other:?}"),
            }
        }
        let p = write(&dir, "dup.vec", "2 2\na 1 2\na 3 4\n");
        assert!(load_point_embeddings(&p, None).unwrap_err().to_string().contains("duplicate word 'a'"));
    }

    #[test]
    fn gaussian_pair_checks() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(&dir, "m.vec", "2 2\na 1 2\nb 3 4\n");
        let v = write(&dir, "v.vec", "2 2\na 1 1\nb 2 2\n");
        let (words, g) = load_gaussian_embeddings(&m, &v, None).unwrap();
        assert_eq!((words.len(), g.nrows()), (2, 2));

        let zero = write(&dir, "z.vec", "2 2\na 1 1\nb 2 0.0\n");
        let err = load_gaussian_embeddings(&m, &zero, None).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("'b'") && err.to_string().contains("dimension 1"));

        let swapped = write(&dir, "s.vec", "2 2\nb 1 1\na 2 2\n");
        let err = load_gaussian_embeddings(&m, &swapped, None).unwrap_err();
        assert!(matches!(err, Error::Consistency(ref msg) if msg.contains("position 0")), "{err}");
    }

    #[test]
    fn lexicon_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "lex.txt", "cat chat\ncat minou\n\ndog chien\ncat chat\n");
        let lex = load_lexicon(&p).unwrap();
        assert_eq!(lex.len(), 2);
        assert_eq!(lex.entries()[0].targets, vec!["chat", "minou"]);

        let empty = write(&dir, "empty.txt", "");
        assert!(load_lexicon(&empty).unwrap().is_empty());

        let bad = write(&dir, "bad.txt", "cat chat\ndog chien hund\n");
        assert!(matches!(load_lexicon(&bad), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn gaussian_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate(50, 7, 0.3, VarianceMode::Informative, 4).unwrap();
        let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let (m, v) = (dir.path().join("m.vec"), dir.path().join("v.vec"));
        save_gaussian_embeddings(&m, &v, &words, &inst.source).unwrap();
        let (back_words, back) = load_gaussian_embeddings(&m, &v, None).unwrap();
        assert_eq!(back_words, words);
        assert_eq!(back, inst.source);
    }

    #[test]
    fn map_and_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = random_orthogonal(6, &mut ChaCha8Rng::seed_from_u64(1));
        let p = dir.path().join("R.txt");
        save_map(&p, &r).unwrap();
        assert_eq!(load_map(&p).unwrap(), r);
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 6);

        let inst = generate(30, 4, 0.0, VarianceMode::Clean, 2).unwrap();
        let t = dir.path().join("truth.txt");
        save_truth(&t, &inst.true_map, &inst.true_matching).unwrap();
        let (map, matching) = load_truth(&t).unwrap();
        assert_eq!(map, inst.true_map);
        assert_eq!(matching, inst.true_matching);
    }

    #[test]
    fn non_orthogonal_map_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "R.txt", "1 0\n0 2\n");
        assert!(matches!(load_map(&p), Err(Error::Validation(_))));
        let p = write(&dir, "R2.txt", "1 0\n0\n");
        assert!(matches!(load_map(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_point_embeddings("/nonexistent/x.vec", None), Err(Error::Io { .. })));
    }
}
