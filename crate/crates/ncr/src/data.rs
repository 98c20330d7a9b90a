//! Raw interaction ingestion and the temporal leave-one-out split.
//!
//! Input rows are `user<TAB>item<TAB>rating<TAB>timestamp` (commas also
//! accepted). Ratings of 4-5 binarize to liked, 1-3 to disliked; rows
//! without a rating count as liked. Per user, in time order: every liked
//! interaction becomes a statement target with its preceding interactions
//! (any sign, newest first, at most `history_len`) as the history. The last
//! liked target with a full-length history goes to the test split, the
//! second-to-last to validation, everything else trains; a user whose only
//! such target would be the validation one sends it to test instead.
//! Disliked interactions never become targets; they appear in histories
//! only. Timestamp ties break by input line order.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{NcrError, Result};
use crate::expr::Sign;

pub const DEFAULT_HISTORY_LEN: usize = 5;
const STATEMENTS_MAGIC: &str = "ncr-statements";
const STATEMENTS_VERSION: u32 = 1;

/// One (user, item, rating, timestamp) event from raw data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub rating: Option<i32>,
    pub timestamp: i64,
    pub line: usize,
}

/// A skipped input line and why.
#[derive(Clone, Debug)]
pub struct ParseIssue {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(NcrError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One training/evaluation statement over dense ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Statement {
    pub user: u32,
    pub target: u32,
    /// most recent first, at most history_len entries
    pub history: Vec<(u32, Sign)>,
    pub split: Split,
}

/// Preprocessed corpus: statements plus the per-user full interaction sets
/// that negative sampling and evaluation exclude from their candidate pools.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub statements: Vec<Statement>,
    /// per dense user id: every interacted item, ascending
    pub interactions: Vec<Vec<u32>>,
    pub history_len: usize,
}

impl Dataset {
    pub fn user_count(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_tokens.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.interactions.iter().map(|v| v.len()).sum()
    }

    pub fn statements_for(&self, split: Split) -> impl Iterator<Item = &Statement> {
        self.statements.iter().filter(move |s| s.split == split)
    }

    pub fn user_id(&self, token: &str) -> Option<u32> {
        self.user_tokens.iter().position(|t| t == token).map(|i| i as u32)
    }
}

/// Parse a raw interaction file. Malformed lines are reported, not fatal;
/// an input with zero valid rows is. Duplicate (user, item, timestamp)
/// triples collapse keeping the last row seen.
pub fn parse_interactions(path: &Path) -> Result<(Vec<InteractionRecord>, Vec<ParseIssue>)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records: Vec<InteractionRecord> = Vec::new();
    let mut issues = Vec::new();
    let mut dedup: BTreeMap<(String, String, i64), usize> = BTreeMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split(',').collect()
        };
        if fields.len() != 4 {
            issues.push(ParseIssue { line: lineno, msg: format!("expected 4 fields, got {}", fields.len()) });
            continue;
        }
        let user = fields[0].trim();
        let item = fields[1].trim();
        if user.is_empty() || item.is_empty() {
            issues.push(ParseIssue { line: lineno, msg: "empty user or item".into() });
            continue;
        }
        let rating_field = fields[2].trim();
        let rating = if rating_field.is_empty() {
            None
        } else {
            match rating_field.parse::<i32>() {
                Ok(r) if (1..=5).contains(&r) => Some(r),
                _ => {
                    issues.push(ParseIssue { line: lineno, msg: format!("bad rating `{rating_field}`") });
                    continue;
                }
            }
        };
        let timestamp = match fields[3].trim().parse::<i64>() {
            Ok(t) => t,
            Err(_) => {
                issues.push(ParseIssue { line: lineno, msg: format!("bad timestamp `{}`", fields[3].trim()) });
                continue;
            }
        };
        let record = InteractionRecord {
            user: user.to_string(),
            item: item.to_string(),
            rating,
            timestamp,
            line: lineno,
        };
        let key = (record.user.clone(), record.item.clone(), record.timestamp);
        match dedup.get(&key) {
            Some(&slot) => records[slot] = record, // keep the latest rating
            None => {
                dedup.insert(key, records.len());
                records.push(record);
            }
        }
    }
    if records.is_empty() {
        return Err(NcrError::EmptyInput(path.display().to_string()));
    }
    Ok((records, issues))
}

/// Liked / disliked from the 1-5 scale; missing ratings count as liked.
pub fn binarize_rating(rating: Option<i32>) -> Sign {
    match rating {
        Some(r) if r <= 3 => Sign::Negative,
        _ => Sign::Positive,
    }
}

/// Build the statement corpus from parsed records.
pub fn build_statements(records: &[InteractionRecord], history_len: usize) -> Dataset {
    // dense ids in first-appearance order
    let mut user_tokens: Vec<String> = Vec::new();
    let mut item_tokens: Vec<String> = Vec::new();
    let mut user_ids: BTreeMap<&str, u32> = BTreeMap::new();
    let mut item_ids: BTreeMap<&str, u32> = BTreeMap::new();
    for r in records {
        user_ids.entry(&r.user).or_insert_with(|| {
            user_tokens.push(r.user.clone());
            (user_tokens.len() - 1) as u32
        });
        item_ids.entry(&r.item).or_insert_with(|| {
            item_tokens.push(r.item.clone());
            (item_tokens.len() - 1) as u32
        });
    }

    // per-user timelines sorted by (timestamp, line)
    let mut timelines: Vec<Vec<(i64, usize, u32, Sign)>> = vec![Vec::new(); user_tokens.len()];
    for r in records {
        let u = user_ids[r.user.as_str()];
        let i = item_ids[r.item.as_str()];
        timelines[u as usize].push((r.timestamp, r.line, i, binarize_rating(r.rating)));
    }
    for t in timelines.iter_mut() {
        t.sort();
    }

    let mut statements = Vec::new();
    let mut interactions = Vec::with_capacity(user_tokens.len());
    for (u, timeline) in timelines.iter().enumerate() {
        let mut items: Vec<u32> = timeline.iter().map(|&(_, _, i, _)| i).collect();
        items.sort_unstable();
        items.dedup();
        interactions.push(items);

        // liked interactions late enough to carry a full history can be held out
        let holdout: Vec<usize> = timeline.iter().enumerate()
            .filter(|&(k, &(_, _, _, sign))| sign == Sign::Positive && k >= history_len)
            .map(|(k, _)| k)
            .collect();
        let test_at = holdout.last().copied();
        let valid_at = if holdout.len() >= 2 { Some(holdout[holdout.len() - 2]) } else { None };

        for (k, &(_, _, item, sign)) in timeline.iter().enumerate() {
            if sign != Sign::Positive || k == 0 {
                continue; // disliked events and zero-history targets are not statements
            }
            let split = if Some(k) == test_at {
                Split::Test
            } else if Some(k) == valid_at {
                Split::Valid
            } else {
                Split::Train
            };
            let history: Vec<(u32, Sign)> = timeline[..k]
                .iter()
                .rev()
                .take(history_len)
                .map(|&(_, _, i, s)| (i, s))
                .collect();
            statements.push(Statement { user: u as u32, target: item, history, split });
        }
    }

    Dataset {
        user_tokens,
        item_tokens,
        statements,
        interactions,
        history_len,
    }
}

/// Counts per split plus corpus statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
}

impl SplitSummary {
    pub fn total_statements(&self) -> usize {
        self.train + self.valid + self.test
    }
}

pub fn split_summary(dataset: &Dataset) -> SplitSummary {
    let count = |s: Split| dataset.statements.iter().filter(|st| st.split == s).count();
    let users = dataset.user_count();
    let items = dataset.item_count();
    let interactions = dataset.interaction_count();
    let density = if users == 0 || items == 0 {
        0.0
    } else {
        interactions as f64 / (users as f64 * items as f64)
    };
    SplitSummary {
        train: count(Split::Train),
        valid: count(Split::Valid),
        test: count(Split::Test),
        users,
        items,
        interactions,
        density,
    }
}

impl fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users: {}", self.users)?;
        writeln!(f, "items: {}", self.items)?;
        writeln!(f, "interactions: {}", self.interactions)?;
        writeln!(f, "density: {:.2}%", self.density * 100.0)?;
        writeln!(f, "train statements: {}", self.train)?;
        writeln!(f, "valid statements: {}", self.valid)?;
        write!(f, "test statements: {}", self.test)
    }
}

// ── Statements file ─────────────────────────────────────────────────────
//
// Line-oriented text, tab-separated fields:
//   ncr-statements <version> <history_len>
//   user <token> <item,item,...>                 full interaction set
//   stmt <split> <user> <target> <h1,h2,...>     history newest first,
//                                                `~` marks disliked events

pub fn write_statements(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{STATEMENTS_MAGIC}\t{STATEMENTS_VERSION}\t{}\n", dataset.history_len));
    for (u, items) in dataset.interactions.iter().enumerate() {
        let list: Vec<&str> = items.iter().map(|&i| dataset.item_tokens[i as usize].as_str()).collect();
        out.push_str(&format!("user\t{}\t{}\n", dataset.user_tokens[u], list.join(",")));
    }
    for s in &dataset.statements {
        let hist: Vec<String> = s.history.iter().map(|&(i, sign)| {
            let tok = &dataset.item_tokens[i as usize];
            match sign {
                Sign::Positive => tok.clone(),
                Sign::Negative => format!("~{tok}"),
            }
        }).collect();
        out.push_str(&format!(
            "stmt\t{}\t{}\t{}\t{}\n",
            s.split.label(),
            dataset.user_tokens[s.user as usize],
            dataset.item_tokens[s.target as usize],
            hist.join(","),
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_statements(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, msg: String| NcrError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };

    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let hf: Vec<&str> = header.split('\t').collect();
    if hf.len() != 3 || hf[0] != STATEMENTS_MAGIC {
        return Err(perr(1, format!("not a statements file (header `{header}`)")));
    }
    let version: u32 = hf[1].parse().map_err(|_| perr(1, "bad version".into()))?;
    if version != STATEMENTS_VERSION {
        return Err(perr(1, format!("unsupported statements version {version}")));
    }
    let history_len: usize = hf[2].parse().map_err(|_| perr(1, "bad history length".into()))?;

    let mut dataset = Dataset { history_len, ..Default::default() };
    let mut user_ids: BTreeMap<String, u32> = BTreeMap::new();
    let mut item_ids: BTreeMap<String, u32> = BTreeMap::new();

    let intern_item = |tok: &str, dataset: &mut Dataset, item_ids: &mut BTreeMap<String, u32>| -> u32 {
        *item_ids.entry(tok.to_string()).or_insert_with(|| {
            dataset.item_tokens.push(tok.to_string());
            (dataset.item_tokens.len() - 1) as u32
        })
    };

    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "user" => {
                if fields.len() != 3 {
                    return Err(perr(lineno, "user line needs 3 fields".into()));
                }
                let token = fields[1];
                if user_ids.contains_key(token) {
                    return Err(perr(lineno, format!("duplicate user `{token}`")));
                }
                let uid = dataset.user_tokens.len() as u32;
                user_ids.insert(token.to_string(), uid);
                dataset.user_tokens.push(token.to_string());
                let items: Vec<u32> = fields[2]
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|tok| intern_item(tok, &mut dataset, &mut item_ids))
                    .collect();
                let mut sorted = items;
                sorted.sort_unstable();
                sorted.dedup();
                dataset.interactions.push(sorted);
            }
            "stmt" => {
                if fields.len() != 5 {
                    return Err(perr(lineno, "stmt line needs 5 fields".into()));
                }
                let split = Split::parse(fields[1]).map_err(|e| perr(lineno, e.to_string()))?;
                let user = *user_ids
                    .get(fields[2])
                    .ok_or_else(|| perr(lineno, format!("statement for unknown user `{}`", fields[2])))?;
                let target = intern_item(fields[3], &mut dataset, &mut item_ids);
                let history: Vec<(u32, Sign)> = fields[4]
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|tok| match tok.strip_prefix('~') {
                        Some(rest) => (intern_item(rest, &mut dataset, &mut item_ids), Sign::Negative),
                        None => (intern_item(tok, &mut dataset, &mut item_ids), Sign::Positive),
                    })
                    .collect();
                if history.is_empty() {
                    return Err(perr(lineno, "statement with empty history".into()));
                }
                dataset.statements.push(Statement { user, target, history, split });
            }
            other => return Err(perr(lineno, format!("unknown record type `{other}`"))),
        }
    }
    if dataset.statements.is_empty() {
        return Err(NcrError::EmptyInput(path.display().to_string()));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn rec(user: &str, item: &str, rating: i32, ts: i64, line: usize) -> InteractionRecord {
        InteractionRecord {
            user: user.into(),
            item: item.into(),
            rating: Some(rating),
            timestamp: ts,
            line,
        }
    }

    #[test]
    fn parses_movielens_layout() {
        let f = write_tmp("1\t32\t4\t875072547\n");
        let (records, issues) = parse_interactions(f.path()).unwrap();
        assert!(issues.is_empty());
        assert_eq!(records[0], rec("1", "32", 4, 875072547, 1));
    }

    #[test]
    fn malformed_lines_are_reported_and_skipped() {
        let f = write_tmp("1\t32\tfoo\t0\n1\t33\t4\t10\n");
        let (records, issues) = parse_interactions(f.path()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 1);
    }

    #[test]
    fn zero_valid_rows_is_an_error() {
        let f = write_tmp("a\tb\tc\n");
        assert!(matches!(parse_interactions(f.path()), Err(NcrError::EmptyInput(_))));
    }

    #[test]
    fn duplicate_triples_keep_latest_rating() {
        let f = write_tmp("u\ti\t2\t100\nu\ti\t5\t100\n");
        let (records, _) = parse_interactions(f.path()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].rating, Some(5));
    }

    #[test]
    fn comma_layout_and_missing_rating() {
        let f = write_tmp("u1,i1,,100\n");
        let (records, issues) = parse_interactions(f.path()).unwrap();
        assert!(issues.is_empty());
        assert_eq!(records[0].rating, None);
        assert_eq!(binarize_rating(records[0].rating), Sign::Positive);
    }

    #[test]
    fn binarization_thresholds() {
        assert_eq!(binarize_rating(Some(4)), Sign::Positive);
        assert_eq!(binarize_rating(Some(5)), Sign::Positive);
        assert_eq!(binarize_rating(Some(3)), Sign::Negative);
        assert_eq!(binarize_rating(Some(1)), Sign::Negative);
    }

    /// 7 in-order interactions, all liked: target g tests, f validates,
    /// b..e train with growing histories.
    #[test]
    fn leave_one_out_on_seven_liked_interactions() {
        let records: Vec<InteractionRecord> = "abcdefg"
            .chars()
            .enumerate()
            .map(|(k, c)| rec("u", &c.to_string(), 5, 100 + k as i64, k + 1))
            .collect();
        let ds = build_statements(&records, 5);
        assert_eq!(ds.statements.len(), 6); // a has no history

        let by_target: BTreeMap<&str, &Statement> = ds
            .statements
            .iter()
            .map(|s| (ds.item_tokens[s.target as usize].as_str(), s))
            .collect();
        assert_eq!(by_target["g"].split, Split::Test);
        assert_eq!(by_target["f"].split, Split::Valid);
        for t in ["b", "c", "d", "e"] {
            assert_eq!(by_target[t].split, Split::Train);
        }
        // histories are the most recent five, newest first
        let hist = |t: &str| -> Vec<&str> {
            by_target[t].history.iter().map(|&(i, _)| ds.item_tokens[i as usize].as_str()).collect()
        };
        assert_eq!(hist("g"), ["f", "e", "d", "c", "b"]);
        assert_eq!(hist("f"), ["e", "d", "c", "b", "a"]);
        assert_eq!(hist("b"), ["a"]);
        assert_eq!(hist("e"), ["d", "c", "b", "a"]);
    }

    #[test]
    fn short_users_stay_in_train() {
        let records: Vec<InteractionRecord> = (0..3)
            .map(|k| rec("u", &format!("i{k}"), 5, 100 + k as i64, k as usize + 1))
            .collect();
        let ds = build_statements(&records, 5);
        assert_eq!(ds.statements.len(), 2);
        assert!(ds.statements.iter().all(|s| s.split == Split::Train));
    }

    #[test]
    fn lone_holdout_target_prefers_test() {
        // exactly 6 interactions, all liked: only the 6th can be held out
        let records: Vec<InteractionRecord> = (0..6)
            .map(|k| rec("u", &format!("i{k}"), 4, 100 + k as i64, k as usize + 1))
            .collect();
        let ds = build_statements(&records, 5);
        let held: Vec<_> = ds.statements.iter().filter(|s| s.split != Split::Train).collect();
        assert_eq!(held.len(), 1);
        assert_eq!(held[0].split, Split::Test);
    }

    #[test]
    fn disliked_interactions_never_become_targets() {
        let mut records: Vec<InteractionRecord> = (0..8)
            .map(|k| rec("u", &format!("i{k}"), if k % 2 == 0 { 5 } else { 2 }, 100 + k as i64, k as usize + 1))
            .collect();
        records.push(rec("u", "last", 2, 1000, 9));
        let ds = build_statements(&records, 5);
        for s in &ds.statements {
            assert_ne!(ds.item_tokens[s.target as usize], "last");
            assert_ne!(ds.item_tokens[s.target as usize], "i1");
        }
        // disliked events do appear in histories, signed
        let test_stmt = ds.statements.iter().find(|s| s.split == Split::Test).unwrap();
        assert!(test_stmt.history.iter().any(|&(_, s)| s == Sign::Negative));
    }

    #[test]
    fn histories_never_reach_into_the_future() {
        let records: Vec<InteractionRecord> = (0..12)
            .map(|k| rec("u", &format!("i{k}"), 4, 100 + k as i64, k as usize + 1))
            .collect();
        let ds = build_statements(&records, 5);
        for s in &ds.statements {
            let target_pos: usize = ds.item_tokens[s.target as usize][1..].parse().unwrap();
            for &(h, _) in &s.history {
                let hp: usize = ds.item_tokens[h as usize][1..].parse().unwrap();
                assert!(hp < target_pos);
            }
        }
    }

    #[test]
    fn summary_counts_and_density() {
        let records: Vec<InteractionRecord> = "abcdefg"
            .chars()
            .enumerate()
            .map(|(k, c)| rec("u", &c.to_string(), 5, 100 + k as i64, k + 1))
            .collect();
        let ds = build_statements(&records, 5);
        let sum = split_summary(&ds);
        assert_eq!(sum.total_statements(), ds.statements.len());
        assert_eq!((sum.train, sum.valid, sum.test), (4, 1, 1));
        assert_eq!(sum.users, 1);
        assert_eq!(sum.items, 7);
        assert!((sum.density - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_summary_is_zeros() {
        let sum = split_summary(&Dataset::default());
        assert_eq!(sum.total_statements(), 0);
        assert_eq!(sum.density, 0.0);
    }

    #[test]
    fn statements_file_round_trip_is_byte_identical() {
        let records: Vec<InteractionRecord> = (0..20)
            .map(|k| rec(&format!("u{}", k % 3), &format!("i{k}"), if k % 4 == 0 { 2 } else { 5 }, 100 + k as i64, k as usize + 1))
            .collect();
        let ds = build_statements(&records, 5);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.stmts");
        let p2 = dir.path().join("b.stmts");
        write_statements(&ds, &p1).unwrap();
        let loaded = read_statements(&p1).unwrap();
        write_statements(&loaded, &p2).unwrap();
        // dense ids may re-intern in a different order; byte identity of the
        // serialized form proves token-level equality
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.statements.len(), ds.statements.len());
        assert_eq!(loaded.user_tokens, ds.user_tokens);
    }
}
