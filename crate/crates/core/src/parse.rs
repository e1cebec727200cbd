//! Parsing of free-text diagnoses into per-subtask label occurrences.
//!
//! An occurrence is a line-anchored `LABEL: VALUE` pattern. Labels are the
//! canonical subtask names (case-insensitive, longest match, so `S` never
//! matches inside `S1`–`S9`), optionally wrapped in markdown emphasis and
//! preceded by a list marker. Values are `Yes`/`No`, case-insensitive, with
//! free reasoning text allowed after the value word.
//!
//! Parsing is pure and total: any input yields a [`ParsedResponse`],
//! unparseable text simply has no occurrences and `adherent = false`.

use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::subtask::{ExtractionScheme, LabelValue, Subtask, SubtaskLabelSet};

/// One extracted label occurrence; `offset` is the character offset of the
/// label name within the response text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub value: LabelValue,
    pub offset: usize,
}

/// Ordered occurrence lists per subtask, offset-ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OccurrenceMap {
    lists: [Vec<Occurrence>; 11],
}

impl OccurrenceMap {
    pub fn get(&self, subtask: Subtask) -> &[Occurrence] {
        &self.lists[subtask.index()]
    }

    pub fn push(&mut self, subtask: Subtask, occurrence: Occurrence) {
        self.lists[subtask.index()].push(occurrence);
    }

    pub fn iter(&self) -> impl Iterator<Item = (Subtask, &[Occurrence])> + '_ {
        Subtask::ALL
            .iter()
            .map(move |s| (*s, self.get(*s)))
    }

    pub fn is_empty(&self) -> bool {
        self.lists.iter().all(|l| l.is_empty())
    }
}

impl Serialize for OccurrenceMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(11))?;
        for (subtask, list) in self.iter() {
            map.serialize_entry(subtask.name(), list)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for OccurrenceMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MapVisitor;

        impl<'de> Visitor<'de> for MapVisitor {
            type Value = OccurrenceMap;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of subtask names to occurrence lists")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut access: A,
            ) -> Result<OccurrenceMap, A::Error> {
                let mut out = OccurrenceMap::default();
                while let Some((key, list)) = access.next_entry::<String, Vec<Occurrence>>()? {
                    let subtask = Subtask::from_name(&key).ok_or_else(|| {
                        serde::de::Error::custom(format!("unknown subtask name: {key}"))
                    })?;
                    out.lists[subtask.index()] = list;
                }
                Ok(out)
            }
        }

        deserializer.deserialize_map(MapVisitor)
    }
}

/// Parse result for one model response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub occurrences: OccurrenceMap,
    /// All eleven subtasks present and first occurrences in canonical order.
    pub adherent: bool,
    /// Response hedges its conclusion ("cannot conclude") despite any labels.
    pub hedged: bool,
    pub token_count: usize,
    pub char_count: usize,
    pub sentence_count: usize,
    pub word_count: usize,
}

/// Pluggable token counter for length statistics.
pub trait TokenCounter {
    fn count_tokens(&self, text: &str) -> usize;
}

/// Default counter: each alphanumeric run is one token, each remaining
/// non-whitespace character is one token. A crude stand-in for subword
/// tokenizers, adequate for relative length statistics.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count_tokens(&self, text: &str) -> usize {
        let mut count = 0;
        let mut in_run = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_run {
                    count += 1;
                    in_run = true;
                }
            } else {
                in_run = false;
                if !c.is_whitespace() {
                    count += 1;
                }
            }
        }
        count
    }
}

const HEDGE_MARKERS: [&str; 3] = ["cannot conclude", "can't conclude", "unable to conclude"];

/// Parses a response with the default token counter.
pub fn parse_response(text: &str) -> ParsedResponse {
    parse_response_with(text, &ApproxTokenCounter)
}

/// Parses a response, counting tokens with the supplied counter.
pub fn parse_response_with(text: &str, counter: &dyn TokenCounter) -> ParsedResponse {
    let chars: Vec<char> = text.chars().collect();
    let mut occurrences = OccurrenceMap::default();

    let mut line_start = 0;
    while line_start <= chars.len() {
        let line_end = chars[line_start..]
            .iter()
            .position(|&c| c == '\n')
            .map(|p| line_start + p)
            .unwrap_or(chars.len());
        if let Some((subtask, value, offset)) = scan_line(&chars, line_start, line_end) {
            occurrences.push(subtask, Occurrence { value, offset });
        }
        if line_end == chars.len() {
            break;
        }
        line_start = line_end + 1;
    }

    let adherent = is_adherent(&occurrences);
    let lower = text.to_lowercase();
    let hedged = HEDGE_MARKERS.iter().any(|m| lower.contains(m));

    ParsedResponse {
        occurrences,
        adherent,
        hedged,
        token_count: counter.count_tokens(text),
        char_count: chars.iter().filter(|c| c.is_alphanumeric()).count(),
        sentence_count: count_sentences(&chars),
        word_count: text.split_whitespace().count(),
    }
}

/// All eleven subtasks occur at least once and the eleven first occurrences
/// appear in canonical order.
fn is_adherent(occurrences: &OccurrenceMap) -> bool {
    let mut previous = None;
    for subtask in Subtask::ALL {
        match occurrences.get(subtask).first() {
            None => return false,
            Some(first) => {
                if let Some(prev) = previous {
                    if first.offset <= prev {
                        return false;
                    }
                }
                previous = Some(first.offset);
            }
        }
    }
    true
}

/// Sentence boundary: '.', '!' or '?' followed by whitespace or end of text.
fn count_sentences(chars: &[char]) -> usize {
    let mut count = 0;
    for (i, &c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            match chars.get(i + 1) {
                None => count += 1,
                Some(next) if next.is_whitespace() => count += 1,
                _ => {}
            }
        }
    }
    count
}

fn skip_spaces(chars: &[char], mut i: usize, end: usize) -> usize {
    while i < end && (chars[i] == ' ' || chars[i] == '\t') {
        i += 1;
    }
    i
}

fn skip_emphasis(chars: &[char], mut i: usize, end: usize) -> usize {
    while i < end && matches!(chars[i], '*' | '_') {
        i += 1;
    }
    i
}

/// Skips one leading list marker: a bullet character followed by whitespace,
/// or digits followed by '.' or ')'.
fn skip_list_marker(chars: &[char], i: usize, end: usize) -> usize {
    if i < end && matches!(chars[i], '-' | '+' | '•') {
        if i + 1 < end && (chars[i + 1] == ' ' || chars[i + 1] == '\t') {
            return skip_spaces(chars, i + 1, end);
        }
        return i;
    }
    // '*' is a bullet only when followed by whitespace; otherwise emphasis.
    if i < end && chars[i] == '*' && i + 1 < end && (chars[i + 1] == ' ' || chars[i + 1] == '\t') {
        return skip_spaces(chars, i + 1, end);
    }
    if i < end && chars[i].is_ascii_digit() {
        let mut j = i;
        while j < end && chars[j].is_ascii_digit() {
            j += 1;
        }
        if j < end && matches!(chars[j], '.' | ')') {
            return skip_spaces(chars, j + 1, end);
        }
    }
    i
}

/// Attempts to match one `LABEL: VALUE` occurrence anchored at the line start.
fn scan_line(chars: &[char], start: usize, end: usize) -> Option<(Subtask, LabelValue, usize)> {
    let mut i = skip_spaces(chars, start, end);
    i = skip_list_marker(chars, i, end);
    i = skip_emphasis(chars, i, end);
    i = skip_spaces(chars, i, end);

    let label_offset = i;
    let (subtask, after_label) = scan_label(chars, i, end)?;
    i = skip_emphasis(chars, after_label, end);
    i = skip_spaces(chars, i, end);
    if i >= end || chars[i] != ':' {
        return None;
    }
    i = skip_spaces(chars, i + 1, end);
    i = skip_emphasis(chars, i, end);
    i = skip_spaces(chars, i, end);

    let value = scan_value(chars, i, end)?;
    Some((subtask, value, label_offset))
}

/// Longest-match label scan; the character after the label must not be
/// alphanumeric, so `S10` or `Drop` never match.
fn scan_label(chars: &[char], i: usize, end: usize) -> Option<(Subtask, usize)> {
    if i >= end {
        return None;
    }
    match chars[i] {
        's' | 'S' => {
            if i + 1 < end && ('1'..='9').contains(&chars[i + 1]) {
                if i + 2 < end && chars[i + 2].is_alphanumeric() {
                    return None;
                }
                let digit = chars[i + 1] as usize - '0' as usize;
                Some((Subtask::from_index(digit).unwrap(), i + 2))
            } else {
                if i + 1 < end && chars[i + 1].is_alphanumeric() {
                    return None;
                }
                Some((Subtask::S, i + 1))
            }
        }
        'd' | 'D' => {
            if i + 1 < end && chars[i + 1].is_alphanumeric() {
                return None;
            }
            Some((Subtask::D, i + 1))
        }
        _ => None,
    }
}

/// Matches a `yes`/`no` word (case-insensitive) at a word boundary.
fn scan_value(chars: &[char], i: usize, end: usize) -> Option<LabelValue> {
    let mut j = i;
    while j < end && chars[j].is_ascii_alphabetic() {
        j += 1;
    }
    if j < end && chars[j].is_alphanumeric() {
        return None;
    }
    let word: String = chars[i..j].iter().collect::<String>().to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some(LabelValue::Yes),
        "no" => Some(LabelValue::No),
        _ => None,
    }
}

/// Extracts one label per subtask: first occurrence under IR, last under SR,
/// absent when a subtask was never annotated.
pub fn extract_labels(parsed: &ParsedResponse, scheme: ExtractionScheme) -> SubtaskLabelSet {
    let mut set = SubtaskLabelSet::new();
    for (subtask, list) in parsed.occurrences.iter() {
        let pick = match scheme {
            ExtractionScheme::Ir => list.first(),
            ExtractionScheme::Sr => list.last(),
        };
        set.set(subtask, pick.map(|o| o.value));
    }
    set
}

/// Revision summary for one response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionReport {
    /// Subtasks annotated two or more times, canonical order.
    pub multi_annotated_subtasks: Vec<Subtask>,
    /// Multi-annotated subtasks whose occurrences all share one value.
    pub duplicate_same_value_count: usize,
    /// Multi-annotated subtasks with mixed values.
    pub conflicting_count: usize,
}

impl RevisionReport {
    pub fn is_empty(&self) -> bool {
        self.multi_annotated_subtasks.is_empty()
    }
}

/// Reports multi-annotated subtasks, split into same-value duplicates and
/// conflicting revisions.
pub fn detect_revisions(parsed: &ParsedResponse) -> RevisionReport {
    let mut multi = Vec::new();
    let mut duplicates = 0;
    let mut conflicts = 0;
    for (subtask, list) in parsed.occurrences.iter() {
        if list.len() >= 2 {
            multi.push(subtask);
            if list.iter().all(|o| o.value == list[0].value) {
                duplicates += 1;
            } else {
                conflicts += 1;
            }
        }
    }
    RevisionReport {
        multi_annotated_subtasks: multi,
        duplicate_same_value_count: duplicates,
        conflicting_count: conflicts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yes() -> LabelValue {
        LabelValue::Yes
    }

    fn no() -> LabelValue {
        LabelValue::No
    }

    #[test]
    fn empty_text_is_not_adherent() {
        let parsed = parse_response("");
        assert!(!parsed.adherent);
        assert!(parsed.occurrences.is_empty());
        assert_eq!(parsed.token_count, 0);
        assert_eq!(parsed.word_count, 0);
    }

    #[test]
    fn plain_labels_in_order_are_adherent() {
        let text = "S: Yes\nS1: No\nS2: Yes\nS3: No\nS4: No\nS5: No\nS6: No\nS7: No\nS8: No\nS9: No\nD: Yes\n";
        let parsed = parse_response(text);
        assert!(parsed.adherent);
        for subtask in Subtask::ALL {
            assert_eq!(parsed.occurrences.get(subtask).len(), 1, "{subtask}");
        }
        assert_eq!(parsed.occurrences.get(Subtask::S2)[0].value, yes());
        assert_eq!(parsed.occurrences.get(Subtask::S9)[0].value, no());
    }

    #[test]
    fn grammar_tolerates_markers_emphasis_and_case() {
        let cases = [
            ("- S2: Yes", Subtask::S2, yes()),
            ("* S2: yes", Subtask::S2, yes()),
            ("3. s4 : NO", Subtask::S4, no()),
            ("12) D: No", Subtask::D, no()),
            ("**S7**: Yes", Subtask::S7, yes()),
            ("__s__ : no", Subtask::S, no()),
            ("- **S1:** no wait, actually still no", Subtask::S1, no()),
            ("S3: **Yes**, clearly", Subtask::S3, yes()),
            ("  \t S9: No.", Subtask::S9, no()),
        ];
        for (text, subtask, value) in cases {
            let parsed = parse_response(text);
            let list = parsed.occurrences.get(subtask);
            assert_eq!(list.len(), 1, "text: {text:?}");
            assert_eq!(list[0].value, value, "text: {text:?}");
            // No other subtask captured anything.
            for other in Subtask::ALL {
                if other != subtask {
                    assert!(parsed.occurrences.get(other).is_empty(), "text: {text:?}");
                }
            }
        }
    }

    #[test]
    fn grammar_rejects_non_occurrences() {
        let cases = [
            "S10: Yes",           // unknown label
            "Drop: Yes",          // label must end at a boundary
            "So: Yes",            // ditto
            "S2: Maybe",          // value must be yes/no
            "S2: Yesterday",      // value word boundary
            "S2 Yes",             // missing colon
            "the verdict S: Yes", // not line-anchored
            "S2:",                // missing value
            "4 S2: Yes",          // digits without . or ) are not a marker
        ];
        for text in cases {
            let parsed = parse_response(text);
            assert!(parsed.occurrences.is_empty(), "text: {text:?}");
        }
    }

    #[test]
    fn s_does_not_match_inside_numbered_labels() {
        let parsed = parse_response("S1: Yes");
        assert!(parsed.occurrences.get(Subtask::S).is_empty());
        assert_eq!(parsed.occurrences.get(Subtask::S1).len(), 1);
    }

    #[test]
    fn multiple_occurrences_keep_offset_order() {
        let text = "S: No\nOn reflection the speaker is describing themselves.\nS: Yes\nS1: No\nS2: No\nS3: No\nS4: No\nS5: No\nS6: No\nS7: No\nS8: No\nS9: No\nD: No\n";
        let parsed = parse_response(text);
        let s = parsed.occurrences.get(Subtask::S);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].value, no());
        assert_eq!(s[1].value, yes());
        assert!(s[0].offset < s[1].offset);
        // Ordering rule judges first occurrences, so this is adherent.
        assert!(parsed.adherent);
    }

    #[test]
    fn misordered_first_occurrences_are_not_adherent() {
        let text = "S1: No\nS: Yes\nS2: No\nS3: No\nS4: No\nS5: No\nS6: No\nS7: No\nS8: No\nS9: No\nD: No\n";
        let parsed = parse_response(text);
        assert!(!parsed.adherent);
    }

    #[test]
    fn missing_subtask_is_not_adherent() {
        let text = "S: Yes\nS1: No\nS2: Yes\nS3: No\nS4: No\nS5: No\nS6: No\nS7: No\nS8: No\nD: Yes\n";
        let parsed = parse_response(text);
        assert!(!parsed.adherent);
        assert!(parsed.occurrences.get(Subtask::S9).is_empty());
    }

    #[test]
    fn surface_counts() {
        let parsed = parse_response("Go. Go. Go.");
        assert_eq!(parsed.sentence_count, 3);
        assert_eq!(parsed.word_count, 3);
        assert_eq!(parsed.char_count, 6);
        // Tokens: three words plus three periods.
        assert_eq!(parsed.token_count, 6);
    }

    #[test]
    fn hedge_detection() {
        assert!(parse_response("I cannot conclude whether this is depression.").hedged);
        assert!(parse_response("We are UNABLE TO CONCLUDE.").hedged);
        assert!(!parse_response("The conclusion is clear.").hedged);
    }

    #[test]
    fn extraction_first_vs_last() {
        let text = "S: No\nS: Yes\nS1: No\n";
        let parsed = parse_response(text);
        let ir = extract_labels(&parsed, ExtractionScheme::Ir);
        let sr = extract_labels(&parsed, ExtractionScheme::Sr);
        assert_eq!(ir.get(Subtask::S), Some(no()));
        assert_eq!(sr.get(Subtask::S), Some(yes()));
        assert_eq!(ir.get(Subtask::S1), Some(no()));
        assert_eq!(sr.get(Subtask::S1), Some(no()));
        assert_eq!(ir.get(Subtask::D), None);
        assert_eq!(sr.get(Subtask::D), None);
    }

    #[test]
    fn all_absent_extraction() {
        let parsed = parse_response("nothing to see here");
        let ir = extract_labels(&parsed, ExtractionScheme::Ir);
        let sr = extract_labels(&parsed, ExtractionScheme::Sr);
        for subtask in Subtask::ALL {
            assert_eq!(ir.get(subtask), None);
            assert_eq!(sr.get(subtask), None);
        }
    }

    #[test]
    fn revision_reports() {
        let single = parse_response("S: Yes\nS1: No\n");
        assert!(detect_revisions(&single).is_empty());

        let duplicate = parse_response("S: Yes\nS: Yes\n");
        let report = detect_revisions(&duplicate);
        assert_eq!(report.multi_annotated_subtasks, vec![Subtask::S]);
        assert_eq!(report.duplicate_same_value_count, 1);
        assert_eq!(report.conflicting_count, 0);

        let mixed = parse_response("S: No\nS: Yes\nS4: Yes\nS4: Yes\n");
        let report = detect_revisions(&mixed);
        assert_eq!(report.multi_annotated_subtasks, vec![Subtask::S, Subtask::S4]);
        assert_eq!(report.duplicate_same_value_count, 1);
        assert_eq!(report.conflicting_count, 1);
    }

    #[test]
    fn parsed_response_serde_round_trip() {
        let parsed = parse_response("S: Yes\nS1: No\nD: Yes\n");
        let json = serde_json::to_string(&parsed).unwrap();
        let back: ParsedResponse = serde_json::from_str(&json).unwrap();
        assert_eq!(back, parsed);
    }
}
